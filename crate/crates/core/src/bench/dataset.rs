//! Demonstrations and their JSON Lines form.
//!
//! One episode per line:
//! `{"points":[[x,y,z]…],"colors":[[r,g,b]…],"ee":[{"pos":[3],"rot":[9],"grip":s}…],
//!   "actions":[[13·arms reals]…],"object_pose":{"pos":[3],"rot":[9]}}`.
//! `ee` is the start state per arm, `actions` the expert waypoints in the
//! degree-merged pose-block layout. Reals are written with 17 significant
//! digits.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::Deserialize;

use super::task::{Pose, TaskSpec};
use crate::canonical::{decode_arms, encode_arms, ActionChunk, EndEffectorState, SceneObservation, StateFrame, StateWindow};
use crate::error::{invalid, Error, Result};
use crate::so3::Rotation;

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub obs: SceneObservation,
    pub start: Vec<EndEffectorState>,
    /// Expert waypoints `w_1..w_N`, one pose per arm.
    pub actions: Vec<Vec<EndEffectorState>>,
    pub object: Pose,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Gripper state after `t` executed steps.
    pub fn state(&self, t: usize) -> &[EndEffectorState] {
        if t == 0 {
            &self.start
        } else {
            &self.actions[t - 1]
        }
    }

    /// The `history` most recent frames at step `t` (earlier frames repeat
    /// the first one) and the next `horizon` waypoints, padded with the last.
    pub fn sample(&self, t: usize, history: usize, horizon: usize) -> Result<(StateWindow, ActionChunk)> {
        if t >= self.len() {
            return Err(invalid(format!("step {t} is past the episode end {}", self.len())));
        }
        let frames = (0..history)
            .map(|j| {
                let s = (t + j + 1).saturating_sub(history);
                StateFrame { obs: self.obs.clone(), ee: self.state(s).to_vec() }
            })
            .collect();
        let last = self.len() - 1;
        let steps = (0..horizon).map(|j| self.actions[(t + j).min(last)].clone()).collect();
        Ok((StateWindow { frames }, ActionChunk { steps }))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
}

/// Expert demonstrations under `spec.rotations`; `n = 0` gives an empty set.
pub fn gen_demos<R: Rng + ?Sized>(spec: &TaskSpec, n: usize, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    let mut episodes = Vec::with_capacity(n);
    for _ in 0..n {
        let world = spec.rotations.sample(rng);
        let inst = spec.sample_instance(rng, world);
        let obs = spec.observe(&inst, rng);
        let actions = spec.expert(&inst).into_iter().map(|e| vec![e]).collect();
        episodes.push(Episode { obs, start: vec![inst.start.to_ee(1.0)], actions, object: inst.object });
    }
    Ok(Dataset { episodes })
}

fn num(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").unwrap();
}

fn list(out: &mut String, vs: &[f64]) {
    out.push('[');
    for (i, &v) in vs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        num(out, v);
    }
    out.push(']');
}

fn pose_obj(out: &mut String, pos: &nalgebra::Vector3<f64>, rot: &Rotation, grip: Option<f64>) {
    out.push_str("{\"pos\":");
    list(out, pos.as_slice());
    out.push_str(",\"rot\":");
    list(out, &rot.to_row_major());
    if let Some(g) = grip {
        out.push_str(",\"grip\":");
        num(out, g);
    }
    out.push('}');
}

fn episode_line(e: &Episode) -> String {
    let mut s = String::from("{\"points\":[");
    for (i, p) in e.obs.points.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        list(&mut s, p.as_slice());
    }
    s.push_str("],\"colors\":[");
    for (i, c) in e.obs.colors.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        list(&mut s, c);
    }
    s.push_str("],\"ee\":[");
    for (i, a) in e.start.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        pose_obj(&mut s, &a.position, &a.rotation, Some(a.aperture));
    }
    s.push_str("],\"actions\":[");
    for (i, step) in e.actions.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        list(&mut s, &encode_arms(step));
    }
    s.push_str("],\"object_pose\":");
    pose_obj(&mut s, &e.object.pos, &e.object.rot, None);
    s.push('}');
    s
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    points: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    ee: Vec<EndEffectorState>,
    actions: Vec<Vec<f64>>,
    object_pose: Pose,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.episodes {
            writeln!(w, "{}", episode_line(e))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut episodes = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EpisodeRecord = serde_json::from_str(&line)
                .map_err(|e| invalid(format!("dataset line {}: {e}", i + 1)))?;
            let arms = rec.ee.len();
            let obs = SceneObservation::new(rec.points.iter().map(|p| nalgebra::Vector3::from(*p)).collect(), rec.colors)
                .map_err(|e| invalid(format!("dataset line {}: {e}", i + 1)))?;
            let actions = rec
                .actions
                .iter()
                .map(|a| decode_arms(a, arms))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| invalid(format!("dataset line {}: {e}", i + 1)))?;
            if actions.is_empty() {
                return Err(invalid(format!("dataset line {}: episode has no actions", i + 1)));
            }
            episodes.push(Episode { obs, start: rec.ee, actions, object: rec.object_pose });
        }
        Ok(Self { episodes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}
