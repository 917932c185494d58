use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Orthonormality slack accepted when validating externally supplied matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// A proper 3D rotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    /// Validates `RᵀR = I` and `det R = 1` within [`ROTATION_TOLERANCE`].
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(invalid("rotation matrix has non-finite entries"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).amax();
        let det = m.determinant();
        if ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(invalid(format!(
                "matrix is not a rotation (orthogonality error {ortho:.3e}, det {det:.15})"
            )));
        }
        Ok(Self(m))
    }

    /// Row-major 9-vector.
    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(invalid(format!("rotation needs 9 entries, got {}", v.len())));
        }
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Rotation by `angle` radians about `axis` (need not be normalised).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let q = UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self(*q.to_rotation_matrix().matrix())
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(*q.to_rotation_matrix().matrix())
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.0)
    }

    /// Haar-uniform sample: a normalised 4D Gaussian is a uniform unit quaternion.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let v = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let n = v.norm();
            if n > 1e-6 {
                let q = nalgebra::Quaternion::new(v[0] / n, v[1] / n, v[2] / n, v[3] / n);
                return Self::from_quaternion(&UnitQuaternion::new_unchecked(q));
            }
        }
    }

    /// Uniform rotation axis with the rotated `z` axis inside a cone of
    /// half-angle `max_polar` radians; the residual spin about the tilted
    /// axis is uniform.
    pub fn random_tilt<R: Rng + ?Sized>(rng: &mut R, max_polar: f64) -> Self {
        let cos_max = max_polar.cos();
        let cos_t: f64 = rng.random_range(cos_max..=1.0);
        let polar = cos_t.clamp(-1.0, 1.0).acos();
        let azimuth: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let spin: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let tilt_axis = Vector3::new(-azimuth.sin(), azimuth.cos(), 0.0);
        let tilt = if polar.abs() < 1e-15 {
            Rotation::identity()
        } else {
            Rotation::from_axis_angle(tilt_axis, polar)
        };
        tilt.compose(&Rotation::from_axis_angle(Vector3::z(), spin))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// `self · other` (apply `other` first).
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn inverse(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Geodesic distance `acos((tr(RᵀS) − 1)/2)` in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let tr = (self.0.transpose() * other.0).trace();
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Largest of the orthogonality and determinant defects.
    pub fn defect(&self) -> f64 {
        let ortho = (self.0.transpose() * self.0 - Matrix3::identity()).amax();
        ortho.max((self.0.determinant() - 1.0).abs())
    }
}

impl TryFrom<[f64; 9]> for Rotation {
    type Error = crate::Error;

    fn try_from(v: [f64; 9]) -> Result<Self> {
        Rotation::from_row_major(&v)
    }
}

impl From<Rotation> for [f64; 9] {
    fn from(r: Rotation) -> Self {
        r.to_row_major()
    }
}

/// Seeded Haar-uniform rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    Rotation::random(rng)
}
