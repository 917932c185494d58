//! `sphdiff` command-line tool.
//!
//! Exit codes: 0 success, 1 failure, 2 usage or config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use sphdiff::bench::{gen_demos, Dataset, RotationSet, TaskSpec};
use sphdiff::config::RunConfig;
use sphdiff::pipeline::{ablate, demos, eval_run, load_policy, train_run, Ablation, DirLock};
use sphdiff::verify::{run_suite, VerifyOptions};
use sphdiff::Error;

#[derive(Parser)]
#[command(name = "sphdiff", version, about = "Equivariant diffusion policy over spherical Fourier features")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the invariant suite and print a JSON report.
    VerifyEquivariance {
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
        /// Run config; only `eval_seed` is used, as the suite seed.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate expert demonstrations as JSON Lines.
    GenDemos {
        /// Task description (TOML); defaults to the built-in task.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy; writes checkpoint, loss curve and resolved config.
    Train {
        /// Demonstrations; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-loop evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to the resolved config next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// identity, haar or tilt:<deg>
        #[arg(long, default_value = "identity")]
        rotations: RotationSet,
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a variant next to the reference model.
    Ablate {
        /// baseline, degree:<L> or abs-action
        #[arg(long)]
        which: Ablation,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Failure with its exit code.
struct Fail(u8, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config { .. }) { 2 } else { 1 };
        Fail(code, e.to_string())
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Fail> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn set_threads() -> Result<(), Fail> {
    let Ok(v) = std::env::var("SPHDIFF_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Fail(2, format!("SPHDIFF_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Fail(1, e.to_string()))
}

fn run(cli: Cli) -> Result<(), Fail> {
    set_threads()?;
    match cli.cmd {
        Cmd::VerifyEquivariance { trials, tolerance, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let report = run_suite(VerifyOptions { trials, tolerance, seed: cfg.eval_seed })?;
            let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            println!("{json}");
            if let Some(p) = out {
                std::fs::write(p, format!("{json}\n")).map_err(Error::from)?;
            }
            if !report.passed {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                return Err(Fail(1, format!("failed checks: {}", failed.join(", "))));
            }
        }
        Cmd::GenDemos { spec, n, seed, out } => {
            let task = match &spec {
                Some(p) => TaskSpec::load(p)?,
                None => TaskSpec::default(),
            };
            let data = gen_demos(&task, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(Error::from)?;
            }
            data.save(&out)?;
            // resolved inputs next to the data
            let resolved = format!("n = {n}\nseed = {seed}\n\n{}", task.to_toml());
            let hash = format!("{:x}", Sha256::digest(resolved.as_bytes()));
            std::fs::write(out.with_extension("resolved.toml"), &resolved).map_err(Error::from)?;
            std::fs::write(out.with_extension("sha256"), format!("{hash}\n")).map_err(Error::from)?;
            eprintln!("wrote {} episodes to {}", data.len(), out.display());
        }
        Cmd::Train { data, config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train_seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let _lock = DirLock::acquire(&cfg.out_dir)?;
            let dataset = match &data {
                Some(p) => Dataset::load(p)?,
                None => demos(&cfg)?,
            };
            let run = train_run(&cfg, &dataset, &cfg.out_dir, |e| eprintln!("epoch {:>4}  loss {:.6e}  lr {:.3e}", e.epoch, e.loss, e.lr))?;
            eprintln!("trained {} epochs; outputs in {}", run.losses.len(), cfg.out_dir.display());
        }
        Cmd::Eval { ckpt, config, rotations, rollouts, seed, out } => {
            let (cfg, policy, params) = load_policy(&ckpt, config.as_deref())?;
            let out = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
            let _lock = DirLock::acquire(&out)?;
            let mut resolved = cfg.clone();
            resolved.eval_seed = seed.unwrap_or(cfg.eval_seed);
            resolved.eval_rollouts = rollouts.unwrap_or(cfg.eval_rollouts);
            resolved.write_resolved(&out)?;
            let report = eval_run(&resolved, &policy, &params, rotations, resolved.eval_rollouts, resolved.eval_seed, &out)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
        }
        Cmd::Ablate { which, config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train_seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let _lock = DirLock::acquire(&cfg.out_dir)?;
            cfg.write_resolved(&cfg.out_dir)?;
            for r in ablate(&cfg, which, &cfg.out_dir)? {
                println!("{:<12} {:<9} success {:.3}  pos {:.4}  rot {:.2}", r.variant, r.rotations, r.success_rate, r.mean_pos_err, r.mean_rot_err_deg);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
