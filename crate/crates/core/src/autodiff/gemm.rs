//! Bounds-checked strided `C += A·B` on top of `matrixmultiply`.

/// A strided view `M[r, c] = data[off + r·rs + c·cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

fn last_index(off: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    off + (rows - 1) * rs + (cols - 1) * cs
}

/// `C[m×n] += A[m×k] · B[k×n]` with `C = c[c_off + r·rsc + j·csc]`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, c: &mut [f64], c_off: usize, rsc: usize, csc: usize) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(last_index(a.off, m, k, a.rs, a.cs) < a.data.len(), "gemm: A view out of bounds");
    assert!(last_index(b.off, k, n, b.rs, b.cs) < b.data.len(), "gemm: B view out of bounds");
    assert!(last_index(c_off, m, n, rsc, csc) < c.len(), "gemm: C view out of bounds");
    // SAFETY: every index touched lies inside the checked ranges above; `c`
    // is a unique borrow so it cannot alias `a` or `b`, and callers use
    // strides under which distinct (row, col) pairs of C are distinct.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            1.0,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}
