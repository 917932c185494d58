//! Train / evaluate / ablate runs that write their artifacts to a directory.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{load_checkpoint, save_checkpoint, ParamStore};
use crate::bench::{evaluate, gen_demos, train, write_loss_csv, write_rollouts_csv, Dataset, EpochLoss, EvalReport, Policy, RotationSet};
use crate::config::{RunConfig, RESOLVED_CONFIG_FILE};
use crate::error::{invalid, Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const LOCK_FILE: &str = ".sphdiff.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                invalid(format!("{} is in use by another run (remove {} if stale)", dir.display(), path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Demonstrations described by the config.
pub fn demos(cfg: &RunConfig) -> Result<Dataset> {
    gen_demos(&cfg.task_spec()?, cfg.demos, &mut ChaCha8Rng::seed_from_u64(cfg.demo_seed))
}

pub struct TrainRun {
    pub policy: Policy,
    pub params: ParamStore,
    pub losses: Vec<EpochLoss>,
}

/// Trains with `cfg.train_seed` and writes the resolved config, the loss
/// curve and the checkpoint into `out`.
pub fn train_run(cfg: &RunConfig, data: &Dataset, out: &Path, on_epoch: impl FnMut(&EpochLoss)) -> Result<TrainRun> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let policy = Policy::new(cfg.policy_config())?;
    let outcome = train(&policy, data, &cfg.train_config(cfg.train_seed), on_epoch)?;
    write_loss_csv(&out.join(LOSS_FILE), &outcome.losses)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.params, &policy.config().hash())?;
    Ok(TrainRun { policy, params: outcome.params, losses: outcome.losses })
}

/// Policy and parameters from a checkpoint; the config is `config` or the
/// resolved config next to the checkpoint.
pub fn load_policy(ckpt: &Path, config: Option<&Path>) -> Result<(RunConfig, Policy, ParamStore)> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(RESOLVED_CONFIG_FILE),
    };
    let cfg = RunConfig::load(&cfg_path)?;
    let policy = Policy::new(cfg.policy_config())?;
    let params = load_checkpoint(ckpt, Some(&policy.config().hash()))?;
    Ok((cfg, policy, params))
}

fn eval_stem(rotations: RotationSet) -> String {
    format!("eval_{}", rotations.to_string().replace(':', "_"))
}

/// Evaluates and writes `eval_<set>.json`, `eval_<set>.csv` and
/// `eval_<set>_rollouts.csv` into `out`.
pub fn eval_run(cfg: &RunConfig, policy: &Policy, params: &ParamStore, rotations: RotationSet, rollouts: usize, seed: u64, out: &Path) -> Result<EvalReport> {
    std::fs::create_dir_all(out)?;
    let spec = cfg.task_spec()?;
    let (report, results) = evaluate(policy, params, &spec, rollouts, rotations, seed)?;
    let stem = eval_stem(rotations);
    report.write_json(&out.join(format!("{stem}.json")))?;
    report.write_csv(&out.join(format!("{stem}.csv")))?;
    write_rollouts_csv(&out.join(format!("{stem}_rollouts.csv")), &results)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Baseline,
    Degree(usize),
    AbsAction,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "abs-action" => Ok(Self::AbsAction),
            _ => match s.strip_prefix("degree:").map(str::parse::<usize>) {
                Some(Ok(l)) if l >= 1 => Ok(Self::Degree(l)),
                _ => Err(invalid(format!("unknown ablation `{s}` (baseline, degree:<L>, abs-action)"))),
            },
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Baseline => write!(f, "baseline"),
            Self::Degree(l) => write!(f, "degree:{l}"),
            Self::AbsAction => write!(f, "abs-action"),
        }
    }
}

impl Ablation {
    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        match *self {
            Self::Baseline => cfg.baseline(),
            Self::Degree(l) => RunConfig { band_limit: l, ..cfg.clone() },
            Self::AbsAction => RunConfig { absolute_actions: true, ..cfg.clone() },
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub rotations: String,
    pub success_rate: f64,
    pub mean_pos_err: f64,
    pub mean_rot_err_deg: f64,
}

/// Trains the reference config and the variant on the same demonstrations
/// and evaluates both under identity and Haar scene rotations. Runs go to
/// `out/reference` and `out/<variant>`; the summary to `out/ablation.csv`.
pub fn ablate(cfg: &RunConfig, which: Ablation, out: &Path) -> Result<Vec<AblationRow>> {
    let data = demos(cfg)?;
    let mut rows = Vec::new();
    for (name, c) in [("reference".to_string(), cfg.clone()), (which.to_string(), which.apply(cfg))] {
        let dir = out.join(name.replace(':', "_"));
        let run = train_run(&c, &data, &dir, |_| {})?;
        for rs in [RotationSet::Identity, RotationSet::Haar] {
            let r = eval_run(&c, &run.policy, &run.params, rs, c.eval_rollouts, c.eval_seed, &dir)?;
            rows.push(AblationRow {
                variant: name.clone(),
                rotations: rs.to_string(),
                success_rate: r.success_rate,
                mean_pos_err: r.mean_pos_err,
                mean_rot_err_deg: r.mean_rot_err_deg,
            });
        }
    }
    let mut csv = String::from("variant,rotations,success_rate,mean_pos_err,mean_rot_err_deg\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{:.6},{:.16e},{:.16e}\n", r.variant, r.rotations, r.success_rate, r.mean_pos_err, r.mean_rot_err_deg));
    }
    std::fs::write(out.join("ablation.csv"), csv)?;
    Ok(rows)
}
