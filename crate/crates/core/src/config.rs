//! Flat run configuration shared by the command-line tools.
//!
//! Every key is optional and falls back to its default; unknown keys are an
//! error. The resolved document and its SHA-256 are written next to every
//! run's outputs.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{PolicyConfig, RotationSet, TaskSpec, TrainConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::sdtu::ActivationKind;
use crate::sdtu::SdtuConfig;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const CONFIG_HASH_FILE: &str = "config.sha256";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // denoiser
    pub band_limit: usize,
    pub activation: ActivationKind,
    pub grid_oversample: usize,
    pub degree_norm: bool,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub horizon: usize,
    /// Non-equivariant baseline: every coefficient is a plain channel.
    pub flat: bool,
    // encoder
    pub radial_bins: usize,
    pub cutoff: f64,
    pub encoder_hidden: Vec<usize>,
    pub encoder_out: usize,
    pub history: usize,
    // policy
    pub pos_scale: f64,
    pub action_horizon: usize,
    pub absolute_actions: bool,
    /// Zero disables the clamp.
    pub x0_max_norm: f64,
    // noise schedule
    pub diffusion_steps: usize,
    pub ddim_steps: usize,
    // task
    /// Optional TOML file holding a full task description; the flat task
    /// keys below then override it.
    pub task_file: Option<PathBuf>,
    pub object_center: [f64; 3],
    pub translation_range: f64,
    pub yaw_range_deg: f64,
    pub demo_rotations: RotationSet,
    pub episode_steps: usize,
    pub close_steps: usize,
    pub sigma_pcd: f64,
    pub pos_threshold: f64,
    pub rot_threshold_deg: f64,
    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub sample_stride: usize,
    pub grad_chunk: usize,
    // data, seeds and outputs
    pub demos: usize,
    pub demo_seed: u64,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub eval_rollouts: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sdtu = SdtuConfig::default();
        let enc = EncoderConfig::default();
        let pol = PolicyConfig::default();
        let task = TaskSpec::default();
        let train = TrainConfig::default();
        Self {
            band_limit: sdtu.band_limit,
            activation: sdtu.activation,
            grid_oversample: sdtu.grid_oversample,
            degree_norm: sdtu.degree_norm,
            widths: sdtu.widths,
            kernel: sdtu.kernel,
            horizon: sdtu.horizon,
            flat: false,
            radial_bins: enc.radial_bins,
            cutoff: enc.cutoff,
            encoder_hidden: enc.hidden,
            encoder_out: enc.out_channels,
            history: enc.history,
            pos_scale: pol.pos_scale,
            action_horizon: pol.action_horizon,
            absolute_actions: pol.absolute,
            x0_max_norm: pol.x0_max_norm.unwrap_or(0.0),
            diffusion_steps: pol.diffusion_steps,
            ddim_steps: pol.ddim_steps,
            task_file: None,
            object_center: task.object_center.into(),
            translation_range: task.translation_range,
            yaw_range_deg: task.yaw_range_deg,
            demo_rotations: task.rotations,
            episode_steps: task.episode_steps,
            close_steps: task.close_steps,
            sigma_pcd: task.sigma_pcd,
            pos_threshold: task.pos_threshold,
            rot_threshold_deg: task.rot_threshold_deg,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr,
            warmup_steps: train.warmup_steps,
            sample_stride: train.sample_stride,
            grad_chunk: train.grad_chunk,
            demos: 200,
            demo_seed: 0,
            train_seed: 0,
            eval_seed: 1,
            eval_rollouts: 200,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Name of the key on the line an error span points into.
fn key_at(doc: &str, span: Option<std::ops::Range<usize>>) -> String {
    let Some(span) = span else { return "<document>".into() };
    let start = doc[..span.start.min(doc.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = doc[start..].lines().next().unwrap_or("");
    match line.split_once('=') {
        Some((k, _)) if !k.trim().is_empty() => k.trim().trim_matches('"').to_string(),
        _ => "<document>".into(),
    }
}

impl RunConfig {
    pub fn from_toml_str(doc: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(doc).map_err(|e| {
            let message = e.message().to_string();
            // unknown keys name themselves
            let path = match message.strip_prefix("unknown field `").and_then(|r| r.split_once('`')) {
                Some((k, _)) => k.to_string(),
                None => key_at(doc, e.span()),
            };
            Error::Config { path, message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_toml_str(&doc)
    }

    /// Checks every derived config, reporting the first bad key.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |path: &str, e: Error| Error::Config { path: path.into(), message: e.to_string() };
        if !(self.x0_max_norm >= 0.0 && self.x0_max_norm.is_finite()) {
            return Err(Error::Config { path: "x0_max_norm".into(), message: "must be finite and non-negative".into() });
        }
        self.policy_config().validate().map_err(|e| cfg_err("model", e))?;
        self.train_config(self.train_seed).validate().map_err(|e| cfg_err("training", e))?;
        if self.task_file.is_none() {
            self.task_spec()?.validate().map_err(|e| cfg_err("task", e))?;
        }
        Ok(())
    }

    pub fn sdtu_config(&self) -> SdtuConfig {
        SdtuConfig {
            band_limit: self.band_limit,
            horizon: self.horizon,
            widths: self.widths.clone(),
            kernel: self.kernel,
            arms: 1,
            activation: self.activation,
            grid_oversample: self.grid_oversample,
            degree_norm: self.degree_norm,
            flat: self.flat,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            band_limit: self.band_limit,
            radial_bins: self.radial_bins,
            cutoff: self.cutoff,
            hidden: self.encoder_hidden.clone(),
            out_channels: self.encoder_out,
            history: self.history,
            arms: 1,
            flat: self.flat,
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            sdtu: self.sdtu_config(),
            encoder: self.encoder_config(),
            diffusion_steps: self.diffusion_steps,
            ddim_steps: self.ddim_steps,
            pos_scale: self.pos_scale,
            action_horizon: self.action_horizon,
            absolute: self.absolute_actions,
            x0_max_norm: (self.x0_max_norm > 0.0).then_some(self.x0_max_norm),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            sample_stride: self.sample_stride,
            grad_chunk: self.grad_chunk,
            seed,
        }
    }

    /// The task from `task_file` (or the default task) with the flat keys
    /// applied on top.
    pub fn task_spec(&self) -> Result<TaskSpec> {
        let mut t = match &self.task_file {
            Some(p) => TaskSpec::load(p)?,
            None => TaskSpec::default(),
        };
        t.object_center = Vector3::from(self.object_center);
        t.translation_range = self.translation_range;
        t.yaw_range_deg = self.yaw_range_deg;
        t.rotations = self.demo_rotations;
        t.episode_steps = self.episode_steps;
        t.close_steps = self.close_steps;
        t.sigma_pcd = self.sigma_pcd;
        t.pos_threshold = self.pos_threshold;
        t.rot_threshold_deg = self.rot_threshold_deg;
        Ok(t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the resolved document.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Writes the resolved document and its hash into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_CONFIG_FILE), self.to_toml())?;
        std::fs::write(dir.join(CONFIG_HASH_FILE), format!("{}\n", self.hash()))?;
        Ok(())
    }

    /// Non-equivariant variant with roughly the same parameter count: each
    /// equivariant width `w` carries `L+1` degree blocks of `w²` weights,
    /// so the flat width is `w·√(L+1)`.
    pub fn baseline(&self) -> Self {
        let f = ((self.band_limit + 1) as f64).sqrt();
        let scale = |ws: &[usize]| ws.iter().map(|&w| ((w as f64 * f).round() as usize).max(1)).collect();
        Self {
            flat: true,
            widths: scale(&self.widths),
            encoder_hidden: scale(&self.encoder_hidden),
            encoder_out: ((self.encoder_out as f64 * f).round() as usize).max(1),
            ..self.clone()
        }
    }
}
