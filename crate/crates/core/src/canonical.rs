//! End-effector encoding and gripper-relative canonicalization.
//!
//! A pose block is 13 reals laid out as `ρ0 ⊕ ρ1⁴`: the aperture, then the
//! position and the three rotation columns, each a degree-1 slice in
//! `(y, z, x)` order. For several arms the blocks are merged degree by
//! degree (all apertures first, then all vectors of arm 0, arm 1, …).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::so3::{cartesian_to_sh, sh_to_cartesian, RepLayout, Rotation, SphericalCoeffs};

/// Reals per arm in a pose block.
pub const EE_DIM: usize = 13;

/// Minimum `‖c1 × c2‖` accepted when decoding a rotation.
pub const DEGENERATE_CROSS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndEffectorState {
    #[serde(rename = "pos", with = "vec3")]
    pub position: Vector3<f64>,
    #[serde(rename = "rot")]
    pub rotation: Rotation,
    #[serde(rename = "grip")]
    pub aperture: f64,
}

pub(crate) mod vec3 {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::new(a[0], a[1], a[2]))
    }
}

impl EndEffectorState {
    pub fn new(position: Vector3<f64>, rotation: Rotation, aperture: f64) -> Self {
        Self { position, rotation, aperture: aperture.clamp(0.0, 1.0) }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Rotation::identity(), 0.0)
    }

    /// Rigid motion `x ↦ R x + t` applied to the pose.
    pub fn transformed(&self, r: &Rotation, t: &Vector3<f64>) -> Self {
        Self { position: r.apply(&self.position) + t, rotation: r.compose(&self.rotation), aperture: self.aperture }
    }

    pub fn translated(&self, t: &Vector3<f64>) -> Self {
        Self { position: self.position + t, ..*self }
    }
}

/// A colored point cloud.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SceneObservation {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
}

impl SceneObservation {
    pub fn new(points: Vec<Vector3<f64>>, colors: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("scene observation needs at least one point"));
        }
        if points.len() != colors.len() {
            return Err(invalid(format!("{} points but {} colors", points.len(), colors.len())));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(invalid("scene observation has non-finite coordinates"));
        }
        Ok(Self { points, colors })
    }

    /// Rigid motion `x ↦ R x + t` of every point.
    pub fn transformed(&self, r: &Rotation, t: &Vector3<f64>) -> Self {
        Self { points: self.points.iter().map(|p| r.apply(p) + t).collect(), colors: self.colors.clone() }
    }
}

/// One observation with the state of every arm.
#[derive(Clone, Debug, PartialEq)]
pub struct StateFrame {
    pub obs: SceneObservation,
    pub ee: Vec<EndEffectorState>,
}

/// The last `h` frames, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct StateWindow {
    pub frames: Vec<StateFrame>,
}

impl StateWindow {
    pub fn newest(&self) -> Result<&StateFrame> {
        self.frames.last().ok_or_else(|| invalid("state window is empty"))
    }

    pub fn arms(&self) -> usize {
        self.frames.first().map_or(0, |f| f.ee.len())
    }

    pub fn transformed(&self, r: &Rotation, t: &Vector3<f64>) -> Self {
        let frames = self
            .frames
            .iter()
            .map(|f| StateFrame { obs: f.obs.transformed(r, t), ee: f.ee.iter().map(|e| e.transformed(r, t)).collect() })
            .collect();
        Self { frames }
    }
}

/// `T` steps of per-arm target poses.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub steps: Vec<Vec<EndEffectorState>>,
}

impl ActionChunk {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn transformed(&self, r: &Rotation, t: &Vector3<f64>) -> Self {
        Self { steps: self.steps.iter().map(|s| s.iter().map(|e| e.transformed(r, t)).collect()).collect() }
    }
}

/// Single-arm 13-real block.
pub fn encode_ee(e: &EndEffectorState) -> [f64; EE_DIM] {
    let mut out = [0.0; EE_DIM];
    out[0] = e.aperture;
    out[1..4].copy_from_slice(&cartesian_to_sh(&e.position));
    let m = e.rotation.matrix();
    for c in 0..3 {
        let col = m.column(c).into_owned();
        out[4 + 3 * c..7 + 3 * c].copy_from_slice(&cartesian_to_sh(&col));
    }
    out
}

/// Inverse of [`encode_ee`], projecting the rotation part onto SO(3) by
/// Gram–Schmidt on the first two columns.
pub fn decode_ee(block: &[f64]) -> Result<EndEffectorState> {
    if block.len() != EE_DIM {
        return Err(invalid(format!("pose block needs {EE_DIM} reals, got {}", block.len())));
    }
    if !block.iter().all(|v| v.is_finite()) {
        return Err(invalid("pose block has non-finite entries"));
    }
    let position = sh_to_cartesian(&block[1..4]);
    let c1 = sh_to_cartesian(&block[4..7]);
    let c2 = sh_to_cartesian(&block[7..10]);
    let cross = c1.cross(&c2).norm();
    if cross < DEGENERATE_CROSS {
        return Err(Error::DegenerateRotation(cross));
    }
    let e1 = c1 / c1.norm();
    let u2 = c2 - e1 * e1.dot(&c2);
    let e2 = u2 / u2.norm();
    let e3 = e1.cross(&e2);
    let rotation = Rotation::new(Matrix3::from_columns(&[e1, e2, e3]))?;
    Ok(EndEffectorState::new(position, rotation, block[0]))
}

/// Degree-merged blocks for all arms, layout [`RepLayout::end_effector`].
pub fn encode_arms(arms: &[EndEffectorState]) -> Vec<f64> {
    let n = arms.len();
    let mut out = vec![0.0; EE_DIM * n];
    for (a, e) in arms.iter().enumerate() {
        let b = encode_ee(e);
        out[a] = b[0];
        out[n + 12 * a..n + 12 * (a + 1)].copy_from_slice(&b[1..]);
    }
    out
}

/// Inverse of [`encode_arms`].
pub fn decode_arms(data: &[f64], arms: usize) -> Result<Vec<EndEffectorState>> {
    if data.len() != EE_DIM * arms {
        return Err(invalid(format!("{} reals cannot hold {arms} pose blocks", data.len())));
    }
    (0..arms)
        .map(|a| {
            let mut b = [0.0; EE_DIM];
            b[0] = data[a];
            b[1..].copy_from_slice(&data[arms + 12 * a..arms + 12 * (a + 1)]);
            decode_ee(&b)
        })
        .collect()
}

/// Encodes a chunk as coefficients with lead `[T]`.
pub fn encode_chunk(chunk: &ActionChunk) -> Result<SphericalCoeffs> {
    let arms = chunk.steps.first().map_or(0, Vec::len);
    if arms == 0 {
        return Err(invalid("action chunk is empty"));
    }
    let mut data = Vec::with_capacity(chunk.horizon() * EE_DIM * arms);
    for s in &chunk.steps {
        if s.len() != arms {
            return Err(invalid("action chunk has a varying arm count"));
        }
        data.extend(encode_arms(s));
    }
    SphericalCoeffs::with_lead(RepLayout::end_effector(arms), vec![chunk.horizon()], data)
}

pub fn decode_chunk(coeffs: &SphericalCoeffs, arms: usize) -> Result<ActionChunk> {
    let steps = (0..coeffs.rows()).map(|r| decode_arms(coeffs.row(r), arms)).collect::<Result<_>>()?;
    Ok(ActionChunk { steps })
}

fn gripper_origin(s: &StateWindow, arm: usize) -> Result<Vector3<f64>> {
    let f = s.newest()?;
    f.ee.get(arm).map(|e| e.position).ok_or_else(|| invalid(format!("arm {arm} not present in state")))
}

fn shift_window(s: &StateWindow, t: &Vector3<f64>) -> StateWindow {
    let frames = s
        .frames
        .iter()
        .map(|f| StateFrame {
            obs: SceneObservation { points: f.obs.points.iter().map(|p| p + t).collect(), colors: f.obs.colors.clone() },
            ee: f.ee.iter().map(|e| e.translated(t)).collect(),
        })
        .collect();
    StateWindow { frames }
}

/// Expresses the window and the chunk relative to the newest position of
/// gripper `arm`. Rotations and apertures are untouched.
pub fn canonicalize(s: &StateWindow, a: &ActionChunk, arm: usize) -> Result<(StateWindow, ActionChunk)> {
    let t = -gripper_origin(s, arm)?;
    let steps = a.steps.iter().map(|st| st.iter().map(|e| e.translated(&t)).collect()).collect();
    Ok((shift_window(s, &t), ActionChunk { steps }))
}

/// Window relative to arm 0; each arm's actions relative to its own gripper.
pub fn canonicalize_per_arm(s: &StateWindow, a: &ActionChunk) -> Result<(StateWindow, ActionChunk)> {
    let origins = (0..s.arms()).map(|i| gripper_origin(s, i)).collect::<Result<Vec<_>>>()?;
    let t0 = -origins.first().copied().ok_or_else(|| invalid("state has no arms"))?;
    let mut steps = Vec::with_capacity(a.horizon());
    for st in &a.steps {
        if st.len() != origins.len() {
            return Err(invalid("action chunk and state disagree on the arm count"));
        }
        steps.push(st.iter().zip(&origins).map(|(e, o)| e.translated(&-o)).collect());
    }
    Ok((shift_window(s, &t0), ActionChunk { steps }))
}

/// Undoes the action translation of [`canonicalize`].
pub fn uncanonicalize(a: &ActionChunk, origin: &Vector3<f64>) -> ActionChunk {
    ActionChunk { steps: a.steps.iter().map(|st| st.iter().map(|e| e.translated(origin)).collect()).collect() }
}

/// Undoes [`canonicalize_per_arm`] for the actions.
pub fn uncanonicalize_per_arm(a: &ActionChunk, origins: &[Vector3<f64>]) -> Result<ActionChunk> {
    let mut steps = Vec::with_capacity(a.horizon());
    for st in &a.steps {
        if st.len() != origins.len() {
            return Err(invalid("action chunk and origins disagree on the arm count"));
        }
        steps.push(st.iter().zip(origins).map(|(e, o)| e.translated(o)).collect());
    }
    Ok(ActionChunk { steps })
}
