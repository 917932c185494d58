//! Point-cloud encoder producing the denoiser condition.
//!
//! Each point contributes `Y_l^m(p/‖p‖)·φ_b(‖p‖)·f` for every radial bin `b`
//! and feature `f ∈ (1, r, g, b)`; contributions are averaged over points.
//! A shared per-frame stack of per-degree linear maps and gates follows, the
//! frames are concatenated channel-wise, and the end-effector blocks of
//! every frame and arm are appended.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::canonical::{encode_arms, SceneObservation, StateWindow, EE_DIM};
use crate::error::{invalid, Result};
use crate::layers::LinearSpec;
use crate::so3::sh::{num_coeffs, sh_fill};
use crate::so3::{RepLayout, SphericalCoeffs};

/// Features carried per radial bin: geometry plus three color channels.
const FEATURES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub band_limit: usize,
    pub radial_bins: usize,
    pub cutoff: f64,
    pub hidden: Vec<usize>,
    pub out_channels: usize,
    pub history: usize,
    pub arms: usize,
    /// Treat every coefficient as an unstructured scalar channel.
    pub flat: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { band_limit: 2, radial_bins: 8, cutoff: 1.0, hidden: vec![16, 16, 16], out_channels: 16, history: 2, arms: 1, flat: false }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0) {
            return Err(invalid(format!("encoder cutoff must be positive, got {}", self.cutoff)));
        }
        if self.radial_bins == 0 || self.history == 0 || self.out_channels == 0 || self.hidden.contains(&0) {
            return Err(invalid("encoder radial_bins, history, out_channels and hidden widths must be positive"));
        }
        if !(1..=2).contains(&self.arms) {
            return Err(invalid(format!("arms must be 1 or 2, got {}", self.arms)));
        }
        if self.band_limit > crate::so3::DEFAULT_L_MAX {
            return Err(crate::Error::UnsupportedDegree { degree: self.band_limit, max: crate::so3::DEFAULT_L_MAX });
        }
        Ok(())
    }

    /// Layout of [`embed_points`].
    pub fn embed_layout(&self) -> RepLayout {
        RepLayout::uniform(self.band_limit, self.radial_bins * FEATURES)
    }

    /// Value of each radial basis function at distance `r`.
    pub fn radial_basis(&self, r: f64) -> Vec<f64> {
        let b = self.radial_bins;
        if r >= self.cutoff {
            return vec![0.0; b];
        }
        let window = 0.5 * (1.0 + (std::f64::consts::PI * r / self.cutoff).cos());
        let width = self.cutoff / b.max(2).saturating_sub(1) as f64;
        (0..b)
            .map(|i| {
                let mu = if b == 1 { 0.0 } else { i as f64 * self.cutoff / (b - 1) as f64 };
                let z = (r - mu) / width;
                (-z * z).exp() * window
            })
            .collect()
    }
}

/// Channel `bin·4 + feature` of every degree; see the module docs.
pub fn embed_points(obs: &SceneObservation, cfg: &EncoderConfig) -> Result<SphericalCoeffs> {
    if obs.points.is_empty() {
        return Err(invalid("cannot embed an empty point cloud"));
    }
    if obs.points.len() != obs.colors.len() {
        return Err(invalid("point and color counts differ"));
    }
    let layout = cfg.embed_layout();
    let l_max = cfg.band_limit;
    let nk = num_coeffs(l_max);
    let chans = cfg.radial_bins * FEATURES;
    let mut acc = vec![0.0; layout.total_dim()];
    let mut y = vec![0.0; nk];
    let inv_n = 1.0 / obs.points.len() as f64;
    for (p, c) in obs.points.iter().zip(&obs.colors) {
        let r = p.norm();
        if r > 1e-12 {
            sh_fill(l_max, p.x / r, p.y / r, p.z / r, &mut y);
        } else {
            // no direction at the origin: only the isotropic part survives
            y.iter_mut().for_each(|v| *v = 0.0);
            y[0] = 0.5 / std::f64::consts::PI.sqrt();
        }
        let phi = cfg.radial_basis(r);
        let feats = [1.0, c[0], c[1], c[2]];
        for l in 0..=l_max {
            let n = 2 * l + 1;
            let ys = &y[l * l..l * l + n];
            let base = layout.degree_offset(l).expect("uniform layout");
            for (bi, &ph) in phi.iter().enumerate() {
                if ph == 0.0 {
                    continue;
                }
                for (fi, &f) in feats.iter().enumerate() {
                    let w = ph * f * inv_n;
                    let off = base + (bi * FEATURES + fi) * n;
                    for m in 0..n {
                        acc[off + m] += w * ys[m];
                    }
                }
            }
        }
    }
    debug_assert_eq!(layout.multiplicity(0), chans);
    SphericalCoeffs::new(layout, acc)
}

/// Shared per-frame network plus concatenation into the condition layout.
#[derive(Clone, Debug)]
pub struct SceneEncoder {
    config: EncoderConfig,
    layers: Vec<LinearSpec>,
    out: LinearSpec,
    frame_layout: RepLayout,
    ee_layout: RepLayout,
    cond_layout: RepLayout,
    /// Gather indices from `[frames ‖ ee]` storage into `cond_layout` order.
    cond_index: Arc<Vec<usize>>,
}

impl SceneEncoder {
    pub fn new(config: EncoderConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let structured = |l: RepLayout| if config.flat { RepLayout::scalars(l.total_dim()) } else { l };
        let hidden = |w: usize| structured(RepLayout::uniform(config.band_limit, w));
        let mut prev = structured(config.embed_layout());
        let mut layers = Vec::with_capacity(config.hidden.len());
        for (i, &w) in config.hidden.iter().enumerate() {
            let next = if config.flat { RepLayout::scalars(w) } else { hidden(w) };
            layers.push(LinearSpec::new(format!("{prefix}.mlp{i}"), prev, next.clone(), true));
            prev = next;
        }
        let frame_layout =
            if config.flat { RepLayout::scalars(config.out_channels) } else { hidden(config.out_channels) };
        let out = LinearSpec::new(format!("{prefix}.out"), prev, frame_layout.clone(), true);
        let ee_layout = structured(RepLayout::end_effector(config.arms * config.history));
        let mut parts: Vec<&RepLayout> = vec![&frame_layout; config.history];
        parts.push(&ee_layout);
        let (cond_layout, map) = RepLayout::concat_map(&parts);
        let fd = frame_layout.total_dim();
        let cond_index = Arc::new(map.iter().map(|&(pi, j)| pi * fd + j).collect());
        Ok(Self { config, layers, out, frame_layout, ee_layout, cond_layout, cond_index })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Layout of the condition produced by [`SceneEncoder::forward_graph`].
    pub fn cond_layout(&self) -> &RepLayout {
        &self.cond_layout
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LinearSpec::num_params).sum::<usize>() + self.out.num_params()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for l in &self.layers {
            l.init(store, rng)?;
        }
        self.out.init(store, rng)
    }

    /// Per-frame point embeddings `[h · D_embed]` and the end-effector
    /// blocks `[h · arms · 13]` of one window, oldest frame first.
    pub fn features(&self, window: &StateWindow) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = self.config.history;
        if window.frames.len() != h {
            return Err(invalid(format!("state window has {} frames, encoder expects {h}", window.frames.len())));
        }
        let mut emb = Vec::with_capacity(h * self.config.embed_layout().total_dim());
        let mut ees = Vec::with_capacity(h * self.config.arms);
        for f in &window.frames {
            if f.ee.len() != self.config.arms {
                return Err(invalid(format!("frame has {} arms, encoder expects {}", f.ee.len(), self.config.arms)));
            }
            emb.extend_from_slice(embed_points(&f.obs, &self.config)?.data());
            ees.extend_from_slice(&f.ee);
        }
        Ok((emb, encode_arms(&ees)))
    }

    /// `emb` is `[B, h, D_embed]`, `ee` is `[B, h·arms·13]`; returns `[B, D_cond]`.
    pub fn forward_graph(&self, g: &mut Graph, p: &BoundParams, emb: Var, ee: Var) -> Result<Var> {
        let es = g.shape(emb).to_vec();
        let h = self.config.history;
        let d_emb = self.config.embed_layout().total_dim();
        if es.len() != 3 || es[1] != h || es[2] != d_emb {
            return Err(invalid(format!("encoder: embeddings have shape {es:?}, expected [B, {h}, {d_emb}]")));
        }
        let b = es[0];
        let want_ee = h * self.config.arms * EE_DIM;
        if g.shape(ee) != [b, want_ee] {
            return Err(invalid(format!("encoder: ee blocks have shape {:?}, expected [{b}, {want_ee}]", g.shape(ee))));
        }
        let mut x = emb;
        for lin in &self.layers {
            x = lin.forward(g, p, x)?;
            x = g.gate(x, &lin.out_layout)?;
        }
        let x = self.out.forward(g, p, x)?;
        let x = g.reshape(x, vec![b, h * self.frame_layout.total_dim()])?;
        let cat = g.concat_last(&[x, ee])?;
        g.gather_last(cat, self.cond_index.clone())
    }

    /// Condition for a batch of windows, lead `[B]`.
    pub fn encode(&self, store: &ParamStore, windows: &[StateWindow]) -> Result<SphericalCoeffs> {
        let mut emb = Vec::new();
        let mut ee = Vec::new();
        for w in windows {
            let (e, q) = self.features(w)?;
            emb.extend(e);
            ee.extend(q);
        }
        self.encode_features(store, windows.len(), emb, ee)
    }

    /// Runs the network on `b` rows of precomputed [`SceneEncoder::features`].
    pub fn encode_features(&self, store: &ParamStore, b: usize, emb: Vec<f64>, ee: Vec<f64>) -> Result<SphericalCoeffs> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let ev = g.constant(Tensor::new(vec![b, self.config.history, self.config.embed_layout().total_dim()], emb)?);
        let qv = g.constant(Tensor::new(vec![b, self.ee_layout.total_dim()], ee)?);
        let c = self.forward_graph(&mut g, &p, ev, qv)?;
        SphericalCoeffs::with_lead(self.cond_layout.clone(), vec![b], g.value(c).data().to_vec())
    }
}

/// Condition for one canonicalized window.
pub fn encode_scene(encoder: &SceneEncoder, store: &ParamStore, window: &StateWindow) -> Result<SphericalCoeffs> {
    let c = encoder.encode(store, std::slice::from_ref(window))?;
    SphericalCoeffs::new(c.layout().clone(), c.into_data())
}
