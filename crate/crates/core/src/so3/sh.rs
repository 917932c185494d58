//! Real spherical harmonics.
//!
//! Convention: real, orthonormal over S², no Condon–Shortley phase, orders
//! stored `m = -l..=l`. For `m > 0` the function carries `cos(mφ)`, for
//! `m < 0` it carries `sin(|m|φ)`. Degree one reduces to
//! `√(3/4π)·(y, z, x)`.

use nalgebra::Vector3;

use crate::error::{invalid, Result};

/// Index of `(l, m)` in a flat `(L+1)²` array.
#[inline]
pub fn sh_index(l: usize, m: i64) -> usize {
    (l * l) as usize + (m + l as i64) as usize
}

/// Number of coefficients of a single band-limited signal.
#[inline]
pub fn num_coeffs(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 1)
}

fn check_unit(u: &Vector3<f64>) -> Result<()> {
    let n = u.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("direction must be a unit vector, |u| = {n}")));
    }
    Ok(())
}

/// `Y_l^m(u)` for a unit vector `u`.
pub fn real_sh_eval(l: usize, m: i64, u: &Vector3<f64>) -> Result<f64> {
    if m.unsigned_abs() as usize > l {
        return Err(invalid(format!("order {m} out of range for degree {l}")));
    }
    check_unit(u)?;
    Ok(sh_all_unchecked(l, u)[sh_index(l, m)])
}

/// All `Y_l^m(u)` for `l ≤ l_max`, in `sh_index` order.
pub fn real_sh_all(l_max: usize, u: &Vector3<f64>) -> Result<Vec<f64>> {
    check_unit(u)?;
    Ok(sh_all_unchecked(l_max, u))
}

/// Same as [`real_sh_all`] without the unit-norm check.
pub(crate) fn sh_all_unchecked(l_max: usize, u: &Vector3<f64>) -> Vec<f64> {
    let mut out = vec![0.0; num_coeffs(l_max)];
    sh_fill(l_max, u.x, u.y, u.z, &mut out);
    out
}

/// Writes `Y_l^m(x, y, z)` into `out` (length `(l_max+1)²`).
///
/// Uses the Cartesian recurrences `C_m + i S_m = (x + i y)^m` and the
/// associated Legendre functions divided by `sin^m θ`, so the poles need no
/// special casing.
pub(crate) fn sh_fill(l_max: usize, x: f64, y: f64, z: f64, out: &mut [f64]) {
    use std::f64::consts::PI;
    debug_assert_eq!(out.len(), num_coeffs(l_max));
    let (mut c, mut s) = (1.0f64, 0.0f64);
    // (2m-1)!!
    let mut dfact = 1.0f64;
    for m in 0..=l_max {
        if m > 0 {
            let (c2, s2) = (x * c - y * s, x * s + y * c);
            c = c2;
            s = s2;
            dfact *= (2 * m - 1) as f64;
        }
        let mut q_prev2 = 0.0;
        let mut q_prev = 0.0;
        // (l-m)!/(l+m)! updated incrementally along l.
        let mut ratio = 1.0 / (1..=2 * m).map(|k| k as f64).product::<f64>();
        for l in m..=l_max {
            let q = if l == m {
                dfact
            } else if l == m + 1 {
                (2 * m + 1) as f64 * z * q_prev
            } else {
                ((2 * l - 1) as f64 * z * q_prev - (l + m - 1) as f64 * q_prev2) / (l - m) as f64
            };
            if l > m {
                ratio *= (l - m) as f64 / (l + m) as f64;
            }
            let norm = ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt();
            if m == 0 {
                out[sh_index(l, 0)] = norm * q;
            } else {
                let k = std::f64::consts::SQRT_2 * norm * q;
                out[sh_index(l, m as i64)] = k * c;
                out[sh_index(l, -(m as i64))] = k * s;
            }
            q_prev2 = q_prev;
            q_prev = q;
        }
    }
}

/// Maps a Cartesian vector to its degree-one coefficient ordering `(y, z, x)`.
/// This is an orthogonal change of basis; no `√(3/4π)` factor is applied.
#[inline]
pub fn cartesian_to_sh(v: &Vector3<f64>) -> [f64; 3] {
    [v.y, v.z, v.x]
}

/// Inverse of [`cartesian_to_sh`].
#[inline]
pub fn sh_to_cartesian(c: &[f64]) -> Vector3<f64> {
    Vector3::new(c[2], c[0], c[1])
}
