//! Spherical denoising temporal U-net.
//!
//! Down path: per level two residual blocks then a stride-2 convolution
//! (skipped at the deepest level). Up path: transposed stride-2 convolution,
//! per-degree channel concatenation with the mirrored skip, two residual
//! blocks. A per-degree linear map projects onto the action layout.
//!
//! Every block is conditioned through FiLM on the scene condition extended
//! by a sinusoidal embedding of the denoising step in degree-0 channels.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, Result};
use crate::layers::{concat_layouts, Activation, ConvSpec, FilmSpec, LinearSpec, Nonlinearity, DEGREE_NORM_EPS};
use crate::so3::{make_grid, RepLayout, SphericalCoeffs};

/// Number of degree-0 channels carrying the step embedding.
pub const TIME_EMBED_DIM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Gate,
    Grid,
}

impl std::str::FromStr for ActivationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gate" => Ok(Self::Gate),
            "grid" => Ok(Self::Grid),
            other => Err(format!("unknown activation `{other}` (expected gate or grid)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdtuConfig {
    pub band_limit: usize,
    pub horizon: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub arms: usize,
    pub activation: ActivationKind,
    /// Grid oversampling used by [`ActivationKind::Grid`].
    pub grid_oversample: usize,
    pub degree_norm: bool,
    /// Erase the per-degree structure: every feature is a plain scalar
    /// channel and FiLM is `γ ⊙ h + β`.
    pub flat: bool,
}

impl Default for SdtuConfig {
    fn default() -> Self {
        Self {
            band_limit: 2,
            horizon: 16,
            widths: vec![8, 16, 32, 64],
            kernel: 5,
            arms: 1,
            activation: ActivationKind::Gate,
            grid_oversample: 3,
            degree_norm: false,
            flat: false,
        }
    }
}

impl SdtuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(invalid("sdtu widths must be non-empty and positive"));
        }
        if !(1..=2).contains(&self.arms) {
            return Err(invalid(format!("arms must be 1 or 2, got {}", self.arms)));
        }
        if self.kernel % 2 == 0 {
            return Err(invalid(format!("kernel size must be odd, got {}", self.kernel)));
        }
        let div = 1usize << (self.widths.len() - 1);
        if self.horizon == 0 || self.horizon % div != 0 {
            return Err(invalid(format!(
                "horizon {} must be a positive multiple of 2^(levels-1) = {div}",
                self.horizon
            )));
        }
        if self.band_limit > crate::so3::DEFAULT_L_MAX {
            return Err(crate::Error::UnsupportedDegree { degree: self.band_limit, max: crate::so3::DEFAULT_L_MAX });
        }
        if !self.flat && self.band_limit == 0 {
            return Err(invalid("band_limit must be at least 1 to carry degree-1 actions"));
        }
        if self.activation == ActivationKind::Grid && self.grid_oversample == 0 {
            return Err(invalid("grid_oversample must be positive"));
        }
        Ok(())
    }

    /// Per-step action layout: `arms × (ρ1⁴ ⊕ ρ0)`.
    pub fn action_layout(&self) -> RepLayout {
        if self.flat {
            RepLayout::scalars(13 * self.arms)
        } else {
            RepLayout::end_effector(self.arms)
        }
    }

    /// Hidden layout of `width` channels.
    pub fn hidden_layout(&self, width: usize) -> RepLayout {
        if self.flat {
            RepLayout::scalars(width)
        } else {
            RepLayout::uniform(self.band_limit, width)
        }
    }

    /// Condition layout the network sees for a scene condition `scene`.
    pub fn full_cond_layout(&self, scene: &RepLayout) -> RepLayout {
        let scene = if self.flat { RepLayout::scalars(scene.total_dim()) } else { scene.clone() };
        scene.concat(&RepLayout::scalars(TIME_EMBED_DIM))
    }
}

/// Sinusoidal embedding of step `k`: `[sin(k f_i)…, cos(k f_i)…]` with
/// `f_i = 10000^(-i/(half-1))`.
pub fn timestep_embed(k: usize) -> SphericalCoeffs {
    let half = TIME_EMBED_DIM / 2;
    let scale = (10000f64).ln() / (half - 1) as f64;
    let mut v = vec![0.0; TIME_EMBED_DIM];
    for i in 0..half {
        let a = k as f64 * (-(i as f64) * scale).exp();
        v[i] = a.sin();
        v[half + i] = a.cos();
    }
    SphericalCoeffs::new(RepLayout::scalars(TIME_EMBED_DIM), v).expect("fixed layout")
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv: ConvSpec,
    film: FilmSpec,
    shortcut: Option<LinearSpec>,
    out_layout: RepLayout,
}

impl ResBlock {
    fn new(name: &str, cfg: &SdtuConfig, cond: &RepLayout, in_layout: RepLayout, out_layout: RepLayout) -> Self {
        let conv = ConvSpec::new(format!("{name}.conv"), in_layout.clone(), out_layout.clone(), cfg.kernel, 1, false);
        let film = FilmSpec::new(&format!("{name}.film"), cond.clone(), out_layout.clone(), !cfg.flat);
        let shortcut = (in_layout != out_layout)
            .then(|| LinearSpec::new(format!("{name}.skip"), in_layout, out_layout.clone(), true));
        Self { conv, film, shortcut, out_layout }
    }

    fn specs_init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.conv.init(store, rng)?;
        self.film.init(store, rng)?;
        if let Some(s) = &self.shortcut {
            s.init(store, rng)?;
        }
        Ok(())
    }

    fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var, cond: Var, act: &Activation, norm: bool) -> Result<Var> {
        let mut h = self.conv.forward(g, p, x)?;
        if norm {
            h = g.degree_norm(h, &self.out_layout, DEGREE_NORM_EPS)?;
        }
        let h = self.film.forward(g, p, h, cond)?;
        let h = act.forward(g, h, &self.out_layout)?;
        let s = match &self.shortcut {
            Some(lin) => lin.forward(g, p, x)?,
            None => x,
        };
        g.add(h, s)
    }
}

/// Architecture and parameters of one denoiser.
#[derive(Clone, Debug)]
pub struct Sdtu {
    config: SdtuConfig,
    scene_layout: RepLayout,
    cond_layout: RepLayout,
    action_layout: RepLayout,
    down: Vec<[ResBlock; 2]>,
    downsample: Vec<ConvSpec>,
    up: Vec<(ConvSpec, [ResBlock; 2])>,
    head: LinearSpec,
    activation: Activation,
}

impl Sdtu {
    /// Builds the architecture; parameter names are prefixed with `prefix`.
    pub fn new(config: SdtuConfig, scene_layout: RepLayout, prefix: &str) -> Result<Self> {
        config.validate()?;
        let cond = config.full_cond_layout(&scene_layout);
        let action = config.action_layout();
        let n = config.widths.len();
        let hl = |w| config.hidden_layout(w);
        let mut down = Vec::with_capacity(n);
        let mut downsample = Vec::new();
        let mut prev = action.clone();
        for (i, &w) in config.widths.iter().enumerate() {
            let a = ResBlock::new(&format!("{prefix}.down{i}.res0"), &config, &cond, prev.clone(), hl(w));
            let b = ResBlock::new(&format!("{prefix}.down{i}.res1"), &config, &cond, hl(w), hl(w));
            down.push([a, b]);
            if i + 1 < n {
                downsample.push(ConvSpec::new(format!("{prefix}.down{i}.sample"), hl(w), hl(w), config.kernel, 2, false));
            }
            prev = hl(w);
        }
        let mut up = Vec::new();
        for i in (0..n - 1).rev() {
            let (wi, wn) = (config.widths[i], config.widths[i + 1]);
            let sample = ConvSpec::new(format!("{prefix}.up{i}.sample"), hl(wn), hl(wn), config.kernel, 2, true);
            let cat = hl(wn).concat(&hl(wi));
            let a = ResBlock::new(&format!("{prefix}.up{i}.res0"), &config, &cond, cat, hl(wi));
            let b = ResBlock::new(&format!("{prefix}.up{i}.res1"), &config, &cond, hl(wi), hl(wi));
            up.push((sample, [a, b]));
        }
        let head = LinearSpec::new(format!("{prefix}.head"), hl(config.widths[0]), action.clone(), true);
        let activation = match (config.activation, config.flat) {
            (ActivationKind::Grid, false) => Activation::Grid {
                grid: Arc::new(make_grid(config.band_limit, config.grid_oversample)?),
                nonlinearity: Nonlinearity::Silu,
            },
            _ => Activation::Gate,
        };
        Ok(Self { config, scene_layout, cond_layout: cond, action_layout: action, down, downsample, up, head, activation })
    }

    pub fn config(&self) -> &SdtuConfig {
        &self.config
    }

    pub fn scene_layout(&self) -> &RepLayout {
        &self.scene_layout
    }

    pub fn action_layout(&self) -> &RepLayout {
        &self.action_layout
    }

    pub fn cond_layout(&self) -> &RepLayout {
        &self.cond_layout
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for (i, blocks) in self.down.iter().enumerate() {
            for b in blocks {
                b.specs_init(store, rng)?;
            }
            if let Some(s) = self.downsample.get(i) {
                s.init(store, rng)?;
            }
        }
        for (s, blocks) in &self.up {
            s.init(store, rng)?;
            for b in blocks {
                b.specs_init(store, rng)?;
            }
        }
        self.head.init(store, rng)
    }

    /// Names of the output projection parameters.
    pub fn head_param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.head.degrees().iter().map(|&l| self.head.weight_name(l)).collect();
        if self.head.bias {
            v.push(self.head.bias_name());
        }
        v
    }

    /// Records the network. `scene` is `[B, D_scene]`, `actions` is
    /// `[B, T, D_action]`, `steps` has one entry per batch element.
    pub fn forward_graph(&self, g: &mut Graph, p: &BoundParams, scene: Var, actions: Var, steps: &[usize]) -> Result<Var> {
        let s = g.shape(actions).to_vec();
        if s.len() != 3 || s[1] != self.config.horizon || s[2] != self.action_layout.total_dim() {
            return Err(invalid(format!(
                "sdtu: noisy actions have shape {s:?}, expected [B, {}, {}]",
                self.config.horizon,
                self.action_layout.total_dim()
            )));
        }
        let b = s[0];
        let cs = g.shape(scene).to_vec();
        if cs != [b, self.scene_layout.total_dim()] || steps.len() != b {
            return Err(invalid(format!(
                "sdtu: condition shape {cs:?} / {} steps incompatible with batch {b} and layout {}",
                steps.len(),
                self.scene_layout
            )));
        }
        let mut temb = Vec::with_capacity(b * TIME_EMBED_DIM);
        for &k in steps {
            temb.extend_from_slice(timestep_embed(k).data());
        }
        let temb = g.constant(Tensor::new(vec![b, TIME_EMBED_DIM], temb)?);
        let scene_l = if self.config.flat { RepLayout::scalars(self.scene_layout.total_dim()) } else { self.scene_layout.clone() };
        let (cond, cl) = concat_layouts(g, &[(scene, &scene_l), (temb, &RepLayout::scalars(TIME_EMBED_DIM))])?;
        debug_assert_eq!(cl, self.cond_layout);

        let norm = self.config.degree_norm;
        let act = &self.activation;
        let mut h = actions;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, blocks) in self.down.iter().enumerate() {
            for blk in blocks {
                h = blk.forward(g, p, h, cond, act, norm)?;
            }
            skips.push(h);
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(g, p, h)?;
            }
        }
        for (k, (us, blocks)) in self.up.iter().enumerate() {
            let i = self.down.len() - 2 - k;
            h = us.forward(g, p, h)?;
            let (cat, _) = concat_layouts(g, &[(h, &us.out_layout), (skips[i], &self.down[i][1].out_layout)])?;
            h = cat;
            for blk in blocks {
                h = blk.forward(g, p, h, cond, act, norm)?;
            }
        }
        self.head.forward(g, p, h)
    }

    /// Noise estimate for a batch: `scene` has lead `[B]`, `actions` lead `[B, T]`.
    pub fn forward(&self, store: &ParamStore, scene: &SphericalCoeffs, actions: &SphericalCoeffs, steps: &[usize]) -> Result<SphericalCoeffs> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let sv = g.constant(Tensor::new(scene.shape(), scene.data().to_vec())?);
        let av = g.constant(Tensor::new(actions.shape(), actions.data().to_vec())?);
        let out = self.forward_graph(&mut g, &p, sv, av, steps)?;
        SphericalCoeffs::with_lead(actions.layout().clone(), actions.lead().to_vec(), g.value(out).data().to_vec())
    }
}

/// Parameter count derived directly from the configuration.
///
/// With `m_l(X)` the degree-`l` multiplicity of layout `X`, `D` the degrees
/// kept by the hidden layouts and `w` a hidden width:
/// - conv `X → w`: `K·Σ_D m_l(X)·w + w`
/// - linear `X → w`: `Σ_D m_l(X)·w + w`
/// - FiLM: two linears from the condition
/// - residual block: conv + FiLM + a linear shortcut when `X ≠ w`
pub fn closed_form_param_count(cfg: &SdtuConfig, scene: &RepLayout) -> usize {
    let k = cfg.kernel;
    // multiplicities per kept degree; flat mode has one "degree" of scalars
    let kept = if cfg.flat { 1 } else { cfg.band_limit + 1 };
    let mult = |layout: &RepLayout| -> Vec<usize> {
        if cfg.flat {
            vec![layout.total_dim()]
        } else {
            (0..kept).map(|l| layout.multiplicity(l)).collect()
        }
    };
    let uni = |w: usize| vec![w; kept];
    let dot = |a: &[usize], w: usize| a.iter().sum::<usize>() * w;
    let cond = mult(&cfg.full_cond_layout(scene));
    let film = |w: usize| 2 * (dot(&cond, w) + w);
    let res = |x: &[usize], w: usize| {
        let same = x == uni(w).as_slice();
        k * dot(x, w) + w + film(w) + if same { 0 } else { dot(x, w) + w }
    };
    let action = mult(&cfg.action_layout());
    let ws = &cfg.widths;
    let n = ws.len();
    let mut total = 0;
    let mut prev = action.clone();
    for (i, &w) in ws.iter().enumerate() {
        total += res(&prev, w) + res(&uni(w), w);
        if i + 1 < n {
            total += k * kept * w * w + w;
        }
        prev = uni(w);
    }
    for i in 0..n - 1 {
        let (wi, wn) = (ws[i], ws[i + 1]);
        total += k * kept * wn * wn + wn;
        total += res(&uni(wi + wn), wi) + res(&uni(wi), wi);
    }
    // head: only degrees present in the action layout, bias on its scalars
    let head: usize = action.iter().map(|m| m * ws[0]).sum::<usize>() + action[0];
    total + head
}
