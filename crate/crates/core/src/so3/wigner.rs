//! Real Wigner D-matrices.
//!
//! `D^l(R)` is defined by `Y_l(R·u) = D^l(R) · Y_l(u)` for the vector of
//! degree-`l` harmonics, so `D(R1)·D(R2) = D(R1·R2)` and coefficients of a
//! rotated signal transform as `c' = D(R)·c`. Degree one is the Cartesian
//! matrix permuted into `(y, z, x)` order; higher degrees follow the
//! Ivanic–Ruedenberg recurrence from degree `l-1` and degree one.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::layout::{RepLayout, SphericalCoeffs};
use super::rotation::Rotation;
use crate::error::{Error, Result};

/// Default highest supported degree.
pub const DEFAULT_L_MAX: usize = 4;

/// Cartesian axis index for degree-one order `m ∈ {-1, 0, 1}`.
const CART: [usize; 3] = [1, 2, 0];

/// `D^l(R)` for `l ≤ DEFAULT_L_MAX`.
pub fn wigner_d(l: usize, r: &Rotation) -> Result<DMatrix<f64>> {
    wigner_d_limited(l, r, DEFAULT_L_MAX)
}

/// `D^l(R)` with an explicit degree cap.
pub fn wigner_d_limited(l: usize, r: &Rotation, l_max: usize) -> Result<DMatrix<f64>> {
    if l > l_max {
        return Err(Error::UnsupportedDegree { degree: l, max: l_max });
    }
    Ok(wigner_blocks(l, r).pop().expect("at least degree zero"))
}

/// Blocks `D^0 … D^l_max`.
pub fn wigner_blocks(l_max: usize, r: &Rotation) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(l_max + 1);
    out.push(DMatrix::from_element(1, 1, 1.0));
    if l_max == 0 {
        return out;
    }
    let m = r.matrix();
    out.push(DMatrix::from_fn(3, 3, |i, j| m[(CART[i], CART[j])]));
    for l in 2..=l_max {
        let next = next_band(l, &out[1], &out[l - 1]);
        out.push(next);
    }
    out
}

#[inline]
fn at(m: &DMatrix<f64>, band: i64, i: i64, j: i64) -> f64 {
    m[((i + band) as usize, (j + band) as usize)]
}

fn p_term(i: i64, a: i64, b: i64, l: i64, r1: &DMatrix<f64>, prev: &DMatrix<f64>) -> f64 {
    let lp = l - 1;
    if b == l {
        at(r1, 1, i, 1) * at(prev, lp, a, lp) - at(r1, 1, i, -1) * at(prev, lp, a, -lp)
    } else if b == -l {
        at(r1, 1, i, 1) * at(prev, lp, a, -lp) + at(r1, 1, i, -1) * at(prev, lp, a, lp)
    } else {
        at(r1, 1, i, 0) * at(prev, lp, a, b)
    }
}

fn next_band(l: usize, r1: &DMatrix<f64>, prev: &DMatrix<f64>) -> DMatrix<f64> {
    let li = l as i64;
    let n = 2 * l + 1;
    let mut out = DMatrix::zeros(n, n);
    for m in -li..=li {
        for k in -li..=li {
            let d0 = if m == 0 { 1.0 } else { 0.0 };
            let denom = if k.abs() == li { (2 * li * (2 * li - 1)) as f64 } else { ((li + k) * (li - k)) as f64 };
            let am = m.abs();
            let u = (((li + m) * (li - m)) as f64 / denom).sqrt();
            let v = 0.5 * ((1.0 + d0) * ((li + am - 1) * (li + am)) as f64 / denom).sqrt() * (1.0 - 2.0 * d0);
            let w = -0.5 * (((li - am - 1) * (li - am)) as f64 / denom).max(0.0).sqrt() * (1.0 - d0);

            let mut val = 0.0;
            if u != 0.0 {
                val += u * p_term(0, m, k, li, r1, prev);
            }
            if v != 0.0 {
                let vt = if m == 0 {
                    p_term(1, 1, k, li, r1, prev) + p_term(-1, -1, k, li, r1, prev)
                } else if m > 0 {
                    let d1: f64 = if m == 1 { 1.0 } else { 0.0 };
                    p_term(1, m - 1, k, li, r1, prev) * (1.0 + d1).sqrt()
                        - p_term(-1, -m + 1, k, li, r1, prev) * (1.0 - d1)
                } else {
                    let d1: f64 = if m == -1 { 1.0 } else { 0.0 };
                    p_term(1, m + 1, k, li, r1, prev) * (1.0 - d1)
                        + p_term(-1, -m - 1, k, li, r1, prev) * (1.0 + d1).sqrt()
                };
                val += v * vt;
            }
            if w != 0.0 {
                let wt = if m > 0 {
                    p_term(1, m + 1, k, li, r1, prev) + p_term(-1, -m - 1, k, li, r1, prev)
                } else {
                    p_term(1, m - 1, k, li, r1, prev) - p_term(-1, -m + 1, k, li, r1, prev)
                };
                val += w * wt;
            }
            out[((m + li) as usize, (k + li) as usize)] = val;
        }
    }
    out
}

/// Block-diagonal action of a rotation on a layout: one block per degree
/// present, shared across all channels of that degree.
#[derive(Clone, Debug)]
pub struct WignerD {
    blocks: BTreeMap<usize, DMatrix<f64>>,
}

impl WignerD {
    pub fn block(&self, l: usize) -> Option<&DMatrix<f64>> {
        self.blocks.get(&l)
    }

    pub fn degrees(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.keys().copied()
    }

    /// Applies the blocks to every slice of `x` (all rows).
    pub fn apply(&self, x: &SphericalCoeffs) -> Result<SphericalCoeffs> {
        let layout = x.layout().clone();
        let mut out = x.clone();
        let mut buf = Vec::new();
        for r in 0..x.rows() {
            let src = x.row(r);
            let dst = out.row_mut(r);
            for (l, _, off) in layout.slices() {
                if l == 0 {
                    continue;
                }
                let d = self.blocks.get(&l).ok_or_else(|| {
                    crate::error::invalid(format!("no Wigner block for degree {l}"))
                })?;
                let n = 2 * l + 1;
                buf.clear();
                buf.extend_from_slice(&src[off..off + n]);
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += d[(i, j)] * buf[j];
                    }
                    dst[off + i] = acc;
                }
            }
        }
        Ok(out)
    }
}

/// One Wigner block per degree appearing in `layout`.
pub fn wigner_block_diag(layout: &RepLayout, r: &Rotation) -> Result<WignerD> {
    let l_max = layout.max_degree();
    if l_max > DEFAULT_L_MAX {
        return Err(Error::UnsupportedDegree { degree: l_max, max: DEFAULT_L_MAX });
    }
    let all = wigner_blocks(l_max, r);
    let blocks = layout.entries().iter().map(|&(l, _)| (l, all[l].clone())).collect();
    Ok(WignerD { blocks })
}

/// Rotates every `(degree, channel)` slice by its Wigner block.
pub fn rotate_coeffs(x: &SphericalCoeffs, r: &Rotation) -> Result<SphericalCoeffs> {
    wigner_block_diag(x.layout(), r)?.apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::sh::{cartesian_to_sh, real_sh_all};
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degree_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Rotation::random(&mut rng);
        assert_eq!(wigner_d(0, &r).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn degree_one_rotates_cartesian_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = Rotation::random(&mut rng);
        let v = Vector3::new(0.3, -1.2, 0.7);
        let d = wigner_d(1, &r).unwrap();
        let c = nalgebra::DVector::from_row_slice(&cartesian_to_sh(&v));
        let got = d * c;
        let want = cartesian_to_sh(&r.apply(&v));
        for i in 0..3 {
            assert!((got[i] - want[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn sh_rotation_identity_all_degrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let r = Rotation::random(&mut rng);
            let u = Rotation::random(&mut rng).apply(&Vector3::z());
            let y = real_sh_all(DEFAULT_L_MAX, &u).unwrap();
            let yr = real_sh_all(DEFAULT_L_MAX, &r.apply(&u)).unwrap();
            for (l, d) in wigner_blocks(DEFAULT_L_MAX, &r).iter().enumerate() {
                let n = 2 * l + 1;
                for i in 0..n {
                    let pred: f64 = (0..n).map(|j| d[(i, j)] * y[l * l + j]).sum();
                    assert!((pred - yr[l * l + i]).abs() < 1e-12, "l={l} i={i}");
                }
            }
        }
    }

    #[test]
    fn unsupported_degree_errors() {
        let r = Rotation::identity();
        assert!(matches!(wigner_d(5, &r), Err(Error::UnsupportedDegree { degree: 5, max: 4 })));
        assert!(wigner_d_limited(5, &r, 6).is_ok());
    }

    #[test]
    fn identity_rotation_leaves_coeffs_unchanged() {
        let layout = RepLayout::uniform(3, 2);
        let data: Vec<f64> = (0..layout.total_dim()).map(|i| i as f64 * 0.37 - 3.0).collect();
        let x = SphericalCoeffs::new(layout, data).unwrap();
        let y = rotate_coeffs(&x, &Rotation::identity()).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-15);
    }
}
