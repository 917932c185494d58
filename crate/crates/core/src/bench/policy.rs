//! Encoder plus denoiser wired into a closed-loop policy.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::canonical::{canonicalize_per_arm, decode_arms, encode_arms, uncanonicalize_per_arm, ActionChunk, StateWindow, EE_DIM};
use crate::diffusion::{ddim_sample_clamped, make_schedule, NoiseSchedule, NoiseSource, ScheduleKind, SdtuDenoiser};
use crate::encoder::{EncoderConfig, SceneEncoder};
use crate::error::{invalid, Result};
use crate::sdtu::{Sdtu, SdtuConfig};
use crate::so3::{rotate_coeffs, RepLayout, Rotation, SphericalCoeffs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub sdtu: SdtuConfig,
    pub encoder: EncoderConfig,
    pub diffusion_steps: usize,
    pub ddim_steps: usize,
    /// Positions are multiplied by this before entering the networks.
    pub pos_scale: f64,
    /// Executed actions per sampled chunk.
    pub action_horizon: usize,
    /// Skip gripper-relative canonicalization.
    pub absolute: bool,
    /// Norm bound on each slice of the sampler's clean-action estimate, in
    /// network units; `None` samples unclamped.
    pub x0_max_norm: Option<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            sdtu: SdtuConfig::default(),
            encoder: EncoderConfig::default(),
            diffusion_steps: 100,
            ddim_steps: 8,
            pos_scale: 4.0,
            action_horizon: 8,
            absolute: false,
            x0_max_norm: Some(2.5),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        self.sdtu.validate()?;
        self.encoder.validate()?;
        if self.sdtu.arms != self.encoder.arms {
            return Err(invalid("sdtu and encoder disagree on the arm count"));
        }
        if self.sdtu.flat != self.encoder.flat {
            return Err(invalid("sdtu and encoder must both be flat or both be spherical"));
        }
        if !self.sdtu.flat && self.sdtu.band_limit != self.encoder.band_limit {
            return Err(invalid("sdtu and encoder band limits differ"));
        }
        if self.action_horizon == 0 || self.action_horizon > self.sdtu.horizon {
            return Err(invalid(format!("action_horizon must be in 1..={}", self.sdtu.horizon)));
        }
        if !(self.pos_scale > 0.0 && self.pos_scale.is_finite()) {
            return Err(invalid("pos_scale must be positive"));
        }
        if let Some(m) = self.x0_max_norm {
            if !(m > 0.0 && m.is_finite()) {
                return Err(invalid("x0_max_norm must be positive"));
            }
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.diffusion_steps {
            return Err(invalid("ddim_steps must be in 1..=diffusion_steps"));
        }
        Ok(())
    }

    /// SHA-256 of the JSON form, stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

/// Network inputs for one training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub emb: Vec<f64>,
    pub ee: Vec<f64>,
    pub actions: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Policy {
    config: PolicyConfig,
    encoder: SceneEncoder,
    net: Sdtu,
    schedule: NoiseSchedule,
}

/// Aperture to `2g − 1`, positions scaled; applied to degree-merged blocks.
fn scale_blocks(data: &mut [f64], arms: usize, pos_scale: f64, forward: bool) {
    for block in data.chunks_mut(EE_DIM * arms) {
        for a in 0..arms {
            block[a] = if forward { 2.0 * block[a] - 1.0 } else { 0.5 * (block[a] + 1.0) };
            for v in &mut block[arms + 12 * a..arms + 12 * a + 3] {
                *v = if forward { *v * pos_scale } else { *v / pos_scale };
            }
        }
    }
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let encoder = SceneEncoder::new(config.encoder.clone(), "enc")?;
        let net = Sdtu::new(config.sdtu.clone(), encoder.cond_layout().clone(), "sdtu")?;
        let schedule = make_schedule(config.diffusion_steps, ScheduleKind::Cosine)?;
        Ok(Self { config, encoder, net, schedule })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn encoder(&self) -> &SceneEncoder {
        &self.encoder
    }

    pub fn net(&self) -> &Sdtu {
        &self.net
    }

    pub fn arms(&self) -> usize {
        self.config.sdtu.arms
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng)?;
        self.net.init(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Gripper positions the actions are expressed relative to.
    pub fn origins(&self, window: &StateWindow) -> Result<Vec<Vector3<f64>>> {
        let newest = window.newest()?;
        if newest.ee.len() != self.arms() {
            return Err(invalid(format!("state has {} arms, policy expects {}", newest.ee.len(), self.arms())));
        }
        Ok(if self.config.absolute {
            vec![Vector3::zeros(); self.arms()]
        } else {
            newest.ee.iter().map(|e| e.position).collect()
        })
    }

    fn canonical(&self, window: &StateWindow, chunk: &ActionChunk) -> Result<(StateWindow, ActionChunk)> {
        if self.config.absolute {
            Ok((window.clone(), chunk.clone()))
        } else {
            canonicalize_per_arm(window, chunk)
        }
    }

    fn features(&self, window: &StateWindow) -> Result<(Vec<f64>, Vec<f64>)> {
        let (emb, mut ee) = self.encoder.features(window)?;
        // one degree-merged block holding every frame's poses
        let poses = ee.len() / EE_DIM;
        scale_blocks(&mut ee, poses, self.config.pos_scale, true);
        Ok((emb, ee))
    }

    /// Canonicalized, scaled network inputs for a window and its expert chunk.
    pub fn prepare(&self, window: &StateWindow, chunk: &ActionChunk) -> Result<Sample> {
        if chunk.horizon() != self.config.sdtu.horizon {
            return Err(invalid(format!("chunk has {} steps, policy horizon is {}", chunk.horizon(), self.config.sdtu.horizon)));
        }
        let (w, a) = self.canonical(window, chunk)?;
        let (emb, ee) = self.features(&w)?;
        let mut actions = Vec::with_capacity(chunk.horizon() * EE_DIM * self.arms());
        for s in &a.steps {
            actions.extend(encode_arms(s));
        }
        scale_blocks(&mut actions, self.arms(), self.config.pos_scale, true);
        Ok(Sample { emb, ee, actions })
    }

    /// Mean squared noise-prediction error over a batch; `steps[i]` and the
    /// `eps` rows belong to `batch[i]`.
    pub fn loss_graph(&self, g: &mut Graph, p: &BoundParams, batch: &[&Sample], steps: &[usize], eps: &[f64]) -> Result<Var> {
        let b = batch.len();
        let h = self.config.encoder.history;
        let de = self.config.encoder.embed_layout().total_dim();
        let t = self.config.sdtu.horizon;
        let da = EE_DIM * self.arms();
        if steps.len() != b || eps.len() != b * t * da {
            return Err(invalid("loss_graph: steps / noise do not match the batch"));
        }
        let mut emb = Vec::with_capacity(b * h * de);
        let mut ee = Vec::with_capacity(b * batch.first().map_or(0, |s| s.ee.len()));
        let mut noisy = Vec::with_capacity(b * t * da);
        for (i, s) in batch.iter().enumerate() {
            emb.extend_from_slice(&s.emb);
            ee.extend_from_slice(&s.ee);
            let ab = self.schedule.alpha_bar(steps[i]);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            let e = &eps[i * t * da..(i + 1) * t * da];
            noisy.extend(s.actions.iter().zip(e).map(|(a, n)| sa * a + sn * n));
        }
        let dq = ee.len() / b.max(1);
        let ev = g.constant(Tensor::new(vec![b, h, de], emb)?);
        let qv = g.constant(Tensor::new(vec![b, dq], ee)?);
        let cond = self.encoder.forward_graph(g, p, ev, qv)?;
        let av = g.constant(Tensor::new(vec![b, t, da], noisy)?);
        let pred = self.net.forward_graph(g, p, cond, av, steps)?;
        let target = g.constant(Tensor::new(vec![b, t, da], eps.to_vec())?);
        let diff = g.sub(pred, target)?;
        Ok(g.mean_squares(diff))
    }

    /// Samples an action chunk for `window`, returned in world coordinates.
    pub fn act<N: NoiseSource>(&self, store: &ParamStore, window: &StateWindow, noise: &mut N) -> Result<ActionChunk> {
        let origins = self.origins(window)?;
        let (w, _) = self.canonical(window, &ActionChunk { steps: Vec::new() })?;
        let (emb, ee) = self.features(&w)?;
        let cond = self.encoder.encode_features(store, 1, emb, ee)?;
        let model = SdtuDenoiser { net: &self.net, params: store };
        let mut a = ddim_sample_clamped(&model, &cond, &self.schedule, self.config.ddim_steps, noise, self.config.x0_max_norm)?;
        let arms = self.arms();
        scale_blocks(a.data_mut(), arms, self.config.pos_scale, false);
        let steps = a.data().chunks(EE_DIM * arms).map(|row| decode_arms(row, arms)).collect::<Result<Vec<_>>>()?;
        uncanonicalize_per_arm(&ActionChunk { steps }, &origins)
    }
}

/// Gaussian draws made in the pose-block layout and rotated by a fixed
/// rotation before being handed to the model under its own layout label.
/// A rotated scene and its unrotated twin then see rotated copies of the
/// same noise, whatever the model's internal layout.
pub struct CoupledNoise<'a, R> {
    rng: &'a mut R,
    rotation: Rotation,
    arms: usize,
}

impl<'a, R: Rng> CoupledNoise<'a, R> {
    pub fn new(rng: &'a mut R, rotation: Rotation, arms: usize) -> Self {
        Self { rng, rotation, arms }
    }
}

impl<R: Rng> NoiseSource for CoupledNoise<'_, R> {
    fn sample(&mut self, layout: &RepLayout, lead: &[usize]) -> Result<SphericalCoeffs> {
        let ee = RepLayout::end_effector(self.arms);
        if layout.total_dim() != ee.total_dim() {
            return Err(invalid(format!("coupled noise expects {} reals per step, layout has {}", ee.total_dim(), layout.total_dim())));
        }
        let n = ee.total_dim() * lead.iter().product::<usize>();
        let data = (0..n).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect();
        let z = rotate_coeffs(&SphericalCoeffs::with_lead(ee, lead.to_vec(), data)?, &self.rotation)?;
        SphericalCoeffs::with_lead(layout.clone(), lead.to_vec(), z.into_data())
    }
}
