use nalgebra::Vector3;

use super::layout::{RepLayout, SphericalCoeffs};
use super::sh::{num_coeffs, sh_fill};
use crate::error::{invalid, Result};

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            if n == 1 {
                p1 = z;
                p0 = 1.0;
            } else {
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
            }
            // p1 = P_n(z), p0 = P_{n-1}(z)
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Product quadrature on S²: Gauss–Legendre in `cos θ`, equiangular in `φ`.
///
/// With `oversample = s` the grid has `s·(L+1)` polar and `s·(2L+1)` azimuthal
/// nodes, which integrates `Y_l^m·Y_l'^m'` exactly for `l, l' ≤ L` at any `s ≥ 1`.
#[derive(Clone, Debug)]
pub struct SphereGrid {
    band_limit: usize,
    oversample: usize,
    dirs: Vec<Vector3<f64>>,
    weights: Vec<f64>,
    /// `Y_k(u_node)` row-major `[node][k]` for `k < (band_limit+1)²`.
    basis: Vec<f64>,
}

impl SphereGrid {
    pub fn band_limit(&self) -> usize {
        self.band_limit
    }

    pub fn oversample(&self) -> usize {
        self.oversample
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn directions(&self) -> &[Vector3<f64>] {
        &self.dirs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Y_k` at `node` for `k < (l+1)²`, `l ≤ band_limit`.
    pub fn basis_row(&self, node: usize) -> &[f64] {
        let n = num_coeffs(self.band_limit);
        &self.basis[node * n..(node + 1) * n]
    }

    /// Synthesis matrix `[k][node] = Y_k(u_node)` truncated to degree `l`.
    pub fn synthesis_matrix(&self, l: usize) -> Vec<f64> {
        let k = num_coeffs(l);
        let nodes = self.len();
        let mut out = vec![0.0; k * nodes];
        for node in 0..nodes {
            let row = self.basis_row(node);
            for i in 0..k {
                out[i * nodes + node] = row[i];
            }
        }
        out
    }

    /// Analysis matrix `[node][k] = w_node · Y_k(u_node)` truncated to degree `l`.
    pub fn analysis_matrix(&self, l: usize) -> Vec<f64> {
        let k = num_coeffs(l);
        let mut out = Vec::with_capacity(k * self.len());
        for node in 0..self.len() {
            let w = self.weights[node];
            out.extend(self.basis_row(node)[..k].iter().map(|y| w * y));
        }
        out
    }
}

/// Builds a [`SphereGrid`] resolving degrees up to `band_limit`.
pub fn make_grid(band_limit: usize, oversample: usize) -> Result<SphereGrid> {
    if oversample == 0 {
        return Err(invalid("oversample must be at least 1"));
    }
    let n_theta = oversample * (band_limit + 1);
    let n_phi = oversample * (2 * band_limit + 1);
    let (z, wz) = gauss_legendre(n_theta);
    let nk = num_coeffs(band_limit);
    let mut dirs = Vec::with_capacity(n_theta * n_phi);
    let mut weights = Vec::with_capacity(n_theta * n_phi);
    let mut basis = vec![0.0; n_theta * n_phi * nk];
    let dphi = std::f64::consts::TAU / n_phi as f64;
    for (zi, wi) in z.iter().zip(&wz) {
        let s = (1.0 - zi * zi).max(0.0).sqrt();
        for j in 0..n_phi {
            let phi = (j as f64 + 0.5) * dphi;
            let u = Vector3::new(s * phi.cos(), s * phi.sin(), *zi);
            let node = dirs.len();
            sh_fill(band_limit, u.x, u.y, u.z, &mut basis[node * nk..(node + 1) * nk]);
            dirs.push(u);
            weights.push(wi * dphi);
        }
    }
    Ok(SphereGrid { band_limit, oversample, dirs, weights, basis })
}

fn single_channel_degree(layout: &RepLayout) -> Result<usize> {
    match layout.uniform_channels() {
        Some(1) => Ok(layout.max_degree()),
        _ => Err(invalid(format!(
            "expected a single-channel layout covering degrees 0..=L, got {layout}"
        ))),
    }
}

/// Inverse transform: `f(u) = Σ c_l^m Y_l^m(u)` at every grid node.
pub fn synthesis(x: &SphericalCoeffs, grid: &SphereGrid) -> Result<Vec<f64>> {
    let l = single_channel_degree(x.layout())?;
    if l > grid.band_limit {
        return Err(invalid(format!("degree {l} exceeds grid band limit {}", grid.band_limit)));
    }
    let k = num_coeffs(l);
    let mut out = Vec::with_capacity(x.rows() * grid.len());
    for r in 0..x.rows() {
        let c = x.row(r);
        for node in 0..grid.len() {
            let y = &grid.basis_row(node)[..k];
            out.push(c.iter().zip(y).map(|(a, b)| a * b).sum());
        }
    }
    Ok(out)
}

/// Forward transform: `c_l^m = Σ_nodes w·f(u)·Y_l^m(u)` up to degree `l`.
pub fn analysis(values: &[f64], grid: &SphereGrid, l: usize) -> Result<SphericalCoeffs> {
    if l > grid.band_limit {
        return Err(invalid(format!("band limit {l} exceeds grid band limit {}", grid.band_limit)));
    }
    if values.is_empty() || values.len() % grid.len() != 0 {
        return Err(invalid(format!(
            "value count {} is not a multiple of grid size {}",
            values.len(),
            grid.len()
        )));
    }
    let rows = values.len() / grid.len();
    let k = num_coeffs(l);
    let mut data = vec![0.0; rows * k];
    for r in 0..rows {
        let f = &values[r * grid.len()..(r + 1) * grid.len()];
        let c = &mut data[r * k..(r + 1) * k];
        for node in 0..grid.len() {
            let wf = grid.weights[node] * f[node];
            for (ci, y) in c.iter_mut().zip(&grid.basis_row(node)[..k]) {
                *ci += wf * y;
            }
        }
    }
    let lead = if rows == 1 { Vec::new() } else { vec![rows] };
    SphericalCoeffs::with_lead(RepLayout::uniform(l, 1), lead, data)
}
