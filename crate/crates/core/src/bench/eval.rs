//! Closed-loop rollouts and their summary.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::policy::{CoupledNoise, Policy};
use super::task::{RotationSet, TaskSpec};
use crate::autodiff::ParamStore;
use crate::canonical::{StateFrame, StateWindow};
use crate::error::Result;

/// Rollout `i` draws its scene and noise from stream `2i` of the seed and
/// its scene rotation from stream `2i + 1`, so evaluations that differ only
/// in the rotation set replay the same scenes.
fn rollout_rngs(seed: u64, i: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut a = ChaCha8Rng::seed_from_u64(seed);
    a.set_stream(2 * i as u64);
    let mut b = ChaCha8Rng::seed_from_u64(seed);
    b.set_stream(2 * i as u64 + 1);
    (a, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub index: usize,
    /// Angle of the scene rotation, degrees.
    pub rotation_deg: f64,
    pub pos_err: f64,
    pub rot_err_deg: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo_deg: f64,
    pub hi_deg: f64,
    pub rollouts: usize,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rotations: RotationSet,
    pub rollouts: usize,
    pub success_rate: f64,
    pub mean_pos_err: f64,
    pub mean_rot_err_deg: f64,
    pub buckets: Vec<Bucket>,
    pub seed: u64,
    pub config_hash: String,
}

/// One episode: re-plan every `action_horizon` steps until the episode
/// length is used up, then score the final gripper pose.
pub fn rollout(policy: &Policy, params: &ParamStore, spec: &TaskSpec, rotations: RotationSet, seed: u64, index: usize) -> Result<RolloutResult> {
    let (mut rng, mut rot_rng) = rollout_rngs(seed, index);
    let world = rotations.sample(&mut rot_rng);
    let inst = spec.sample_instance(&mut rng, world);
    let h = policy.config().encoder.history;
    let ta = policy.config().action_horizon;
    let mut ee = inst.start.to_ee(1.0);
    let first = StateFrame { obs: spec.observe(&inst, &mut rng), ee: vec![ee] };
    let mut frames = vec![first; h];
    let mut t = 0;
    while t < spec.episode_steps {
        let window = StateWindow { frames: frames[frames.len() - h..].to_vec() };
        let mut noise = CoupledNoise::new(&mut rng, world, 1);
        // a chunk that does not decode leaves the gripper where it is
        let chunk = policy.act(params, &window, &mut noise).ok();
        for j in 0..ta.min(spec.episode_steps - t) {
            if let Some(c) = &chunk {
                ee = c.steps[j][0];
            }
            t += 1;
            frames.push(StateFrame { obs: spec.observe(&inst, &mut rng), ee: vec![ee] });
        }
    }
    let (pos_err, rot_err_deg) = spec.errors(&inst, &ee);
    Ok(RolloutResult {
        index,
        rotation_deg: world.angle_to(&crate::so3::Rotation::identity()).to_degrees(),
        pos_err,
        rot_err_deg,
        success: spec.is_success(pos_err, rot_err_deg),
    })
}

pub fn evaluate(
    policy: &Policy,
    params: &ParamStore,
    spec: &TaskSpec,
    n_rollouts: usize,
    rotations: RotationSet,
    seed: u64,
) -> Result<(EvalReport, Vec<RolloutResult>)> {
    spec.validate()?;
    let results: Vec<RolloutResult> =
        (0..n_rollouts).into_par_iter().map(|i| rollout(policy, params, spec, rotations, seed, i)).collect::<Result<_>>()?;
    let n = results.len().max(1) as f64;
    let rate = |rs: &[&RolloutResult]| if rs.is_empty() { 0.0 } else { rs.iter().filter(|r| r.success).count() as f64 / rs.len() as f64 };
    let all: Vec<&RolloutResult> = results.iter().collect();
    let buckets = (0..6)
        .map(|b| {
            let (lo, hi) = (30.0 * b as f64, 30.0 * (b + 1) as f64);
            let members: Vec<&RolloutResult> =
                results.iter().filter(|r| r.rotation_deg >= lo && (r.rotation_deg < hi || (b == 5 && r.rotation_deg <= hi))).collect();
            Bucket { lo_deg: lo, hi_deg: hi, rollouts: members.len(), success_rate: rate(&members) }
        })
        .collect();
    let report = EvalReport {
        rotations,
        rollouts: results.len(),
        success_rate: rate(&all),
        mean_pos_err: results.iter().map(|r| r.pos_err).sum::<f64>() / n,
        mean_rot_err_deg: results.iter().map(|r| r.rot_err_deg).sum::<f64>() / n,
        buckets,
        seed,
        config_hash: policy.config().hash(),
    };
    Ok((report, results))
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    /// One row per rotation bucket plus an `all` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "bucket,rollouts,success_rate,mean_pos_err,mean_rot_err_deg")?;
        writeln!(f, "all,{},{:.6},{:.16e},{:.16e}", self.rollouts, self.success_rate, self.mean_pos_err, self.mean_rot_err_deg)?;
        for b in &self.buckets {
            writeln!(f, "{}-{},{},{:.6},,", b.lo_deg, b.hi_deg, b.rollouts, b.success_rate)?;
        }
        f.flush()?;
        Ok(())
    }
}

pub fn write_rollouts_csv(path: &Path, results: &[RolloutResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "index,rotation_deg,pos_err,rot_err_deg,success")?;
    for r in results {
        writeln!(f, "{},{:.16e},{:.16e},{:.16e},{}", r.index, r.rotation_deg, r.pos_err, r.rot_err_deg, u8::from(r.success))?;
    }
    f.flush()?;
    Ok(())
}
