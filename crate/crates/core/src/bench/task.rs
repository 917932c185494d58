//! Reach-and-orient task: a static colored object, a gripper that must reach
//! a grasp pose fixed in the object frame, and an analytic screw-motion
//! expert.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::canonical::{vec3, EndEffectorState, SceneObservation};
use crate::error::{invalid, Error, Result};
use crate::so3::Rotation;

/// A rigid pose `x ↦ R x + p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    #[serde(with = "vec3")]
    pub pos: Vector3<f64>,
    pub rot: Rotation,
}

impl Pose {
    pub fn new(pos: Vector3<f64>, rot: Rotation) -> Self {
        Self { pos, rot }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Rotation::identity())
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(self.rot.apply(&other.pos) + self.pos, self.rot.compose(&other.rot))
    }

    pub fn inverse(&self) -> Pose {
        let ri = self.rot.inverse();
        Pose::new(-ri.apply(&self.pos), ri)
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rot.apply(x) + self.pos
    }

    /// Point on the constant-twist path from `self` (s = 0) to `goal` (s = 1).
    pub fn screw_towards(&self, goal: &Pose, s: f64) -> Pose {
        let rel = self.inverse().compose(goal);
        let phi = rel.rot.to_quaternion().scaled_axis();
        let rho = left_jacobian(&phi).try_inverse().expect("left jacobian is invertible below 2π") * rel.pos;
        let step = Pose::new(left_jacobian(&(phi * s)) * (rho * s), exp_so3(&(phi * s)));
        self.compose(&step)
    }

    pub fn to_ee(&self, aperture: f64) -> EndEffectorState {
        EndEffectorState::new(self.pos, self.rot, aperture)
    }
}

fn exp_so3(phi: &Vector3<f64>) -> Rotation {
    let theta = phi.norm();
    if theta < 1e-15 {
        Rotation::identity()
    } else {
        Rotation::from_axis_angle(*phi, theta)
    }
}

/// `V(φ) = I + (1 − cos θ)/θ² [φ]× + (θ − sin θ)/θ³ [φ]×²`.
fn left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = phi.cross_matrix();
    let (a, b) = if theta < 1e-4 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / (theta * theta), (theta - theta.sin()) / (theta * theta * theta))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Distribution of whole-scene rotations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RotationSet {
    Identity,
    Haar,
    /// Rotations whose tilt of the `z` axis is at most this many degrees.
    Tilt(f64),
}

impl RotationSet {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Rotation {
        match *self {
            RotationSet::Identity => Rotation::identity(),
            RotationSet::Haar => Rotation::random(rng),
            RotationSet::Tilt(deg) => Rotation::random_tilt(rng, deg.to_radians()),
        }
    }
}

impl fmt::Display for RotationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RotationSet::Identity => write!(f, "identity"),
            RotationSet::Haar => write!(f, "haar"),
            RotationSet::Tilt(d) => write!(f, "tilt:{d}"),
        }
    }
}

impl FromStr for RotationSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "haar" => Ok(Self::Haar),
            _ => {
                let deg = s
                    .strip_prefix("tilt:")
                    .and_then(|d| d.parse::<f64>().ok())
                    .ok_or_else(|| invalid(format!("unknown rotation set {s:?}; expected identity, haar or tilt:<deg>")))?;
                if !(0.0..=180.0).contains(&deg) {
                    return Err(invalid(format!("tilt must be within [0, 180] degrees, got {deg}")));
                }
                Ok(Self::Tilt(deg))
            }
        }
    }
}

impl Serialize for RotationSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RotationSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatePoint {
    pub pos: [f64; 3],
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    /// Object points in the object frame.
    pub template: Vec<TemplatePoint>,
    /// Nominal object position before the random offset.
    #[serde(with = "vec3")]
    pub object_center: Vector3<f64>,
    /// Half-width of the uniform per-axis object offset.
    pub translation_range: f64,
    /// Half-width of the uniform object yaw about `z`, degrees.
    pub yaw_range_deg: f64,
    /// Rotation of the whole scene about the start gripper position.
    pub rotations: RotationSet,
    /// Target gripper pose in the object frame.
    pub grasp_offset: Pose,
    /// Gripper pose at the start of every episode.
    pub start: Pose,
    pub episode_steps: usize,
    /// Final steps during which the gripper is closed.
    pub close_steps: usize,
    pub sigma_pcd: f64,
    pub pos_threshold: f64,
    pub rot_threshold_deg: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        let mut template = vec![TemplatePoint { pos: [0.0; 3], color: [1.0, 1.0, 1.0] }];
        let arm = |dir: [f64; 3], n: usize, len: f64, color: [f64; 3]| {
            (1..=n).map(move |i| {
                let s = len * i as f64 / n as f64;
                TemplatePoint { pos: [dir[0] * s, dir[1] * s, dir[2] * s], color }
            })
        };
        template.extend(arm([1.0, 0.0, 0.0], 6, 0.12, [1.0, 0.0, 0.0]));
        template.extend(arm([0.0, 1.0, 0.0], 4, 0.08, [0.0, 1.0, 0.0]));
        template.extend(arm([0.0, 0.0, 1.0], 3, 0.04, [0.0, 0.0, 1.0]));
        Self {
            template,
            object_center: Vector3::new(0.3, 0.0, 0.0),
            translation_range: 0.05,
            yaw_range_deg: 0.0,
            rotations: RotationSet::Identity,
            grasp_offset: Pose::new(
                Vector3::new(0.03, 0.02, 0.05),
                Rotation::from_axis_angle(Vector3::x(), 2.0 * std::f64::consts::FRAC_PI_3),
            ),
            start: Pose::new(Vector3::new(0.0, 0.0, 0.25), Rotation::identity()),
            episode_steps: 16,
            close_steps: 2,
            sigma_pcd: 0.005,
            pos_threshold: 0.02,
            rot_threshold_deg: 10.0,
        }
    }
}

impl TaskSpec {
    /// Reads a TOML task description; missing keys take their defaults.
    pub fn from_toml_str(doc: &str) -> Result<Self> {
        toml::from_str(doc).map_err(|e| Error::Config { path: "task".into(), message: e.message().to_string() })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let doc = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_toml_str(&doc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("task serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.template.len() < 4 {
            return Err(invalid("object template needs at least four points"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !self.template.iter().all(|p| finite(&p.pos) && finite(&p.color)) {
            return Err(invalid("object template has non-finite entries"));
        }
        if !self.template_is_asymmetric() {
            return Err(invalid("object template must have no rotational symmetry (orientation must be observable)"));
        }
        if self.episode_steps == 0 || self.close_steps > self.episode_steps {
            return Err(invalid("episode_steps must be positive and at least close_steps"));
        }
        if !(self.translation_range >= 0.0 && self.yaw_range_deg >= 0.0 && self.sigma_pcd >= 0.0) {
            return Err(invalid("translation_range, yaw_range_deg and sigma_pcd must be non-negative"));
        }
        if !(self.pos_threshold > 0.0 && self.rot_threshold_deg > 0.0) {
            return Err(invalid("success thresholds must be positive"));
        }
        // the largest relative rotation must stay clear of π, where the screw path is ambiguous
        let worst = self.start.rot.inverse().compose(
            &Rotation::from_axis_angle(Vector3::z(), self.yaw_range_deg.to_radians()).compose(&self.grasp_offset.rot),
        );
        if worst.angle_to(&Rotation::identity()) > 0.95 * std::f64::consts::PI {
            return Err(invalid("grasp orientation is too close to a half turn from the start orientation"));
        }
        Ok(())
    }

    /// Distinct second-moment axes, each with a non-zero third moment, so
    /// no proper rotation other than the identity maps the template to itself.
    fn template_is_asymmetric(&self) -> bool {
        let pts: Vec<Vector3<f64>> = self.template.iter().map(|p| Vector3::from(p.pos)).collect();
        let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        let mut cov = Matrix3::zeros();
        for p in &pts {
            let d = p - c;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        let scale = ev[2].max(1e-300);
        if (ev[1] - ev[0]) / scale < 1e-3 || (ev[2] - ev[1]) / scale < 1e-3 {
            return false;
        }
        (0..3).all(|k| {
            let axis = eig.eigenvectors.column(k);
            let m3: f64 = pts.iter().map(|p| (p - c).dot(&axis).powi(3)).sum();
            m3.abs() > 1e-9 * scale.powf(1.5)
        })
    }

    /// Samples the object pose, then rotates the whole scene by `world`
    /// about the start gripper position.
    pub fn sample_instance<R: Rng + ?Sized>(&self, rng: &mut R, world: Rotation) -> Instance {
        let r = self.translation_range;
        let offset = if r > 0.0 {
            Vector3::new(rng.random_range(-r..=r), rng.random_range(-r..=r), rng.random_range(-r..=r))
        } else {
            Vector3::zeros()
        };
        let y = self.yaw_range_deg.to_radians();
        let yaw = if y > 0.0 { rng.random_range(-y..=y) } else { 0.0 };
        let base = Pose::new(self.object_center + offset, Rotation::from_axis_angle(Vector3::z(), yaw));
        let pivot = Pose::new(self.start.pos - world.apply(&self.start.pos), world);
        let object = pivot.compose(&base);
        let start = pivot.compose(&self.start);
        Instance { object, start, goal: object.compose(&self.grasp_offset), world }
    }

    /// Noisy observation of the object; the noise is drawn in the object's
    /// unrotated frame and rotated with the scene.
    pub fn observe<R: Rng + ?Sized>(&self, inst: &Instance, rng: &mut R) -> SceneObservation {
        let mut points = Vec::with_capacity(self.template.len());
        let mut colors = Vec::with_capacity(self.template.len());
        for tp in &self.template {
            let n = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)) * self.sigma_pcd;
            points.push(inst.object.apply(&Vector3::from(tp.pos)) + inst.world.apply(&n));
            colors.push(tp.color);
        }
        SceneObservation { points, colors }
    }

    /// Expert waypoints `w_1..w_N` from the start to the grasp pose; the
    /// gripper is open except on the last `close_steps` waypoints.
    pub fn expert(&self, inst: &Instance) -> Vec<EndEffectorState> {
        let n = self.episode_steps;
        (1..=n)
            .map(|s| {
                let pose = if s == n { inst.goal } else { inst.start.screw_towards(&inst.goal, s as f64 / n as f64) };
                pose.to_ee(if s + self.close_steps > n { 0.0 } else { 1.0 })
            })
            .collect()
    }

    /// Position error and geodesic rotation error in degrees.
    pub fn errors(&self, inst: &Instance, ee: &EndEffectorState) -> (f64, f64) {
        ((ee.position - inst.goal.pos).norm(), ee.rotation.angle_to(&inst.goal.rot).to_degrees())
    }

    pub fn is_success(&self, pos_err: f64, rot_err_deg: f64) -> bool {
        pos_err < self.pos_threshold && rot_err_deg < self.rot_threshold_deg
    }
}

/// One sampled scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Instance {
    pub object: Pose,
    pub start: Pose,
    pub goal: Pose,
    pub world: Rotation,
}
