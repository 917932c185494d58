//! Equivariant building blocks.
//!
//! Each layer is described by a small spec (layouts, parameter names) whose
//! `forward` records onto a [`Graph`]; the free functions at the bottom of
//! this file are convenience wrappers that evaluate one layer on
//! [`SphericalCoeffs`] without keeping the tape.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, Result};
use crate::so3::{RepLayout, SphereGrid, SphericalCoeffs};

/// Norm threshold below which the SFiLM projection term is taken as zero.
pub const SFILM_EPS: f64 = 1e-12;

/// Stabiliser inside the square root of [`degree_norm`].
pub const DEGREE_NORM_EPS: f64 = 1e-6;

fn init_tensor<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize, l: usize) -> Tensor {
    let std = 1.0 / ((fan_in * (2 * l + 1)) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("consistent shape")
}

/// Generator for the degree-`l` block of a spec whose key was drawn once
/// from the caller's stream. Blocks of other degrees never shift its draws.
fn degree_rng(key: u64, l: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(key);
    r.set_stream(l as u64);
    r
}

fn common_degrees(a: &RepLayout, b: &RepLayout) -> Vec<usize> {
    a.entries().iter().map(|e| e.0).filter(|&l| b.has_degree(l)).collect()
}

fn check_last(g: &Graph, x: Var, layout: &RepLayout, op: &str) -> Result<()> {
    if g.value(x).last_dim() != layout.total_dim() {
        return Err(invalid(format!(
            "{op}: input shape {:?} does not match layout {layout} (dim {})",
            g.shape(x),
            layout.total_dim()
        )));
    }
    Ok(())
}

/// Per-degree channel mixing `c_out × c_in`, optional degree-0 bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSpec {
    pub name: String,
    pub in_layout: RepLayout,
    pub out_layout: RepLayout,
    pub bias: bool,
}

impl LinearSpec {
    pub fn new(name: impl Into<String>, in_layout: RepLayout, out_layout: RepLayout, bias: bool) -> Self {
        let bias = bias && out_layout.has_degree(0);
        Self { name: name.into(), in_layout, out_layout, bias }
    }

    pub fn degrees(&self) -> Vec<usize> {
        common_degrees(&self.in_layout, &self.out_layout)
    }

    pub fn weight_name(&self, l: usize) -> String {
        format!("{}.w{l}", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn num_params(&self) -> usize {
        let w: usize = self.degrees().iter().map(|&l| self.in_layout.multiplicity(l) * self.out_layout.multiplicity(l)).sum();
        w + if self.bias { self.out_layout.multiplicity(0) } else { 0 }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let key = rng.next_u64();
        for l in self.degrees() {
            let (ci, co) = (self.in_layout.multiplicity(l), self.out_layout.multiplicity(l));
            store.insert(self.weight_name(l), init_tensor(&mut degree_rng(key, l), vec![co, ci], ci, l))?;
        }
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(vec![self.out_layout.multiplicity(0)]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        check_last(g, x, &self.in_layout, &self.name)?;
        let degrees = self.degrees();
        let ws = degrees.iter().map(|&l| p.get(&self.weight_name(l))).collect::<Result<Vec<_>>>()?;
        let b = if self.bias { Some(p.get(&self.bias_name())?) } else { None };
        g.sph_linear(x, &degrees, &ws, b, &self.in_layout, &self.out_layout)
    }
}

/// Mixing-channel temporal convolution (or its transpose) with shared
/// weights across orders `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub in_layout: RepLayout,
    pub out_layout: RepLayout,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn new(
        name: impl Into<String>,
        in_layout: RepLayout,
        out_layout: RepLayout,
        kernel: usize,
        stride: usize,
        transposed: bool,
    ) -> Self {
        let bias = out_layout.has_degree(0);
        Self { name: name.into(), in_layout, out_layout, kernel, stride, bias, transposed }
    }

    pub fn degrees(&self) -> Vec<usize> {
        common_degrees(&self.in_layout, &self.out_layout)
    }

    pub fn weight_name(&self, l: usize) -> String {
        format!("{}.w{l}", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Weight shape for degree `l`: `[K, c_in, c_out]`, or `[K, c_out, c_in]`
    /// when transposed.
    pub fn weight_shape(&self, l: usize) -> Vec<usize> {
        let (ci, co) = (self.in_layout.multiplicity(l), self.out_layout.multiplicity(l));
        if self.transposed {
            vec![self.kernel, co, ci]
        } else {
            vec![self.kernel, ci, co]
        }
    }

    pub fn num_params(&self) -> usize {
        let w: usize = self.degrees().iter().map(|&l| self.weight_shape(l).iter().product::<usize>()).sum();
        w + if self.bias { self.out_layout.multiplicity(0) } else { 0 }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let key = rng.next_u64();
        for l in self.degrees() {
            let fan_in = self.in_layout.multiplicity(l) * self.kernel;
            store.insert(self.weight_name(l), init_tensor(&mut degree_rng(key, l), self.weight_shape(l), fan_in, l))?;
        }
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(vec![self.out_layout.multiplicity(0)]))?;
        }
        Ok(())
    }

    /// `x` is `[.., T, D_in]`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        check_last(g, x, &self.in_layout, &self.name)?;
        let degrees = self.degrees();
        let ws = degrees.iter().map(|&l| p.get(&self.weight_name(l))).collect::<Result<Vec<_>>>()?;
        let b = if self.bias { Some(p.get(&self.bias_name())?) } else { None };
        if self.transposed {
            g.temporal_conv_transposed(x, &degrees, &ws, b, &self.in_layout, &self.out_layout, self.kernel, self.stride)
        } else {
            g.temporal_conv(x, &degrees, &ws, b, &self.in_layout, &self.out_layout, self.kernel, self.stride)
        }
    }
}

/// Feature-wise modulation of a hidden sequence by a condition vector.
///
/// Spherical mode projects the per-slice scale onto the slice direction,
/// `(γ·h) h/‖h‖ + β`; flat mode is the usual `γ ⊙ h + β`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmSpec {
    pub gamma: LinearSpec,
    pub beta: LinearSpec,
    pub spherical: bool,
}

impl FilmSpec {
    pub fn new(name: &str, cond_layout: RepLayout, hidden_layout: RepLayout, spherical: bool) -> Self {
        let gamma = LinearSpec::new(format!("{name}.gamma"), cond_layout.clone(), hidden_layout.clone(), true);
        let beta = LinearSpec::new(format!("{name}.beta"), cond_layout, hidden_layout, true);
        Self { gamma, beta, spherical }
    }

    pub fn hidden_layout(&self) -> &RepLayout {
        &self.gamma.out_layout
    }

    pub fn num_params(&self) -> usize {
        self.gamma.num_params() + self.beta.num_params()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.gamma.init(store, rng)?;
        self.beta.init(store, rng)
    }

    /// `h` is `[.., T, D_h]`, `cond` is `[.., D_c]` shared by every step.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, h: Var, cond: Var) -> Result<Var> {
        let layout = self.hidden_layout();
        check_last(g, h, layout, "film")?;
        let hs = g.shape(h).to_vec();
        let cs = g.shape(cond).to_vec();
        if hs.len() != cs.len() + 1 || hs[..cs.len() - 1] != cs[..cs.len() - 1] {
            return Err(invalid(format!("film: hidden shape {hs:?} incompatible with condition shape {cs:?}")));
        }
        let t = hs[hs.len() - 2];
        let gamma = self.gamma.forward(g, p, cond)?;
        let beta = self.beta.forward(g, p, cond)?;
        let gamma = g.expand_time(gamma, t);
        let beta = g.expand_time(beta, t);
        let scaled = if self.spherical {
            let dot = g.slice_dot(gamma, h, layout)?;
            let norm = g.slice_norm(h, layout)?;
            let coef = g.div_guarded(dot, norm, SFILM_EPS)?;
            g.slice_scale(h, coef, layout)?
        } else {
            g.mul(gamma, h)?
        };
        g.add(scaled, beta)
    }
}

/// Pointwise nonlinearity applied on sphere-grid samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Identity,
    Silu,
    Sigmoid,
}

/// Hidden nonlinearity used between layers.
#[derive(Clone, Debug)]
pub enum Activation {
    /// Degree 0 through `x·σ(x)`, higher degrees scaled by `σ` of a gate scalar.
    Gate,
    /// Synthesis → pointwise nonlinearity → analysis on a quadrature grid.
    Grid { grid: Arc<SphereGrid>, nonlinearity: Nonlinearity },
}

impl Activation {
    pub fn forward(&self, g: &mut Graph, x: Var, layout: &RepLayout) -> Result<Var> {
        match self {
            Activation::Gate => g.gate(x, layout),
            Activation::Grid { grid, nonlinearity } => grid_activation(g, x, layout, grid, *nonlinearity),
        }
    }
}

/// Graph version of [`spherical_activation`].
pub fn grid_activation(
    g: &mut Graph,
    x: Var,
    layout: &RepLayout,
    grid: &SphereGrid,
    nonlinearity: Nonlinearity,
) -> Result<Var> {
    check_last(g, x, layout, "spherical_activation")?;
    let c = layout.uniform_channels().ok_or_else(|| {
        invalid(format!("spherical_activation needs every channel to carry degrees 0..=L, got {layout}"))
    })?;
    let l = layout.max_degree();
    if grid.band_limit() < l {
        return Err(invalid(format!(
            "spherical_activation: grid band limit {} is below the signal degree {l}",
            grid.band_limit()
        )));
    }
    let k = (l + 1) * (l + 1);
    // layout order (degree, channel, m) → (channel, degree, m)
    let mut to_chan = Vec::with_capacity(layout.total_dim());
    for ch in 0..c {
        for deg in 0..=l {
            let off = layout.slice_offset(deg, ch).expect("uniform layout");
            to_chan.extend(off..off + 2 * deg + 1);
        }
    }
    let mut back = vec![0; to_chan.len()];
    for (i, &j) in to_chan.iter().enumerate() {
        back[j] = i;
    }
    let shape = g.shape(x).to_vec();
    let mut split = shape[..shape.len() - 1].to_vec();
    split.extend([c, k]);
    let y = g.gather_last(x, Arc::new(to_chan))?;
    let y = g.reshape(y, split)?;
    let n = grid.len();
    let synth = g.constant(Tensor::new(vec![k, n], grid.synthesis_matrix(l))?);
    let anal = g.constant(Tensor::new(vec![n, k], grid.analysis_matrix(l))?);
    let v = g.matmul(y, synth)?;
    let v = match nonlinearity {
        Nonlinearity::Identity => v,
        Nonlinearity::Silu => g.silu(v),
        Nonlinearity::Sigmoid => g.sigmoid(v),
    };
    let y = g.matmul(v, anal)?;
    let y = g.reshape(y, shape)?;
    g.gather_last(y, Arc::new(back))
}

/// Concatenates features along channels degree by degree.
pub fn concat_layouts(g: &mut Graph, parts: &[(Var, &RepLayout)]) -> Result<(Var, RepLayout)> {
    for (v, l) in parts {
        check_last(g, *v, l, "concat")?;
    }
    let layouts: Vec<&RepLayout> = parts.iter().map(|p| p.1).collect();
    let (out, map) = RepLayout::concat_map(&layouts);
    let mut starts = Vec::with_capacity(parts.len());
    let mut acc = 0;
    for l in &layouts {
        starts.push(acc);
        acc += l.total_dim();
    }
    let idx: Vec<usize> = map.iter().map(|&(pi, j)| starts[pi] + j).collect();
    let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
    let cat = g.concat_last(&vars)?;
    Ok((g.gather_last(cat, Arc::new(idx))?, out))
}

// ----------------------------------------------------------------- value-level API

fn eval_store<F>(store: &ParamStore, x: &SphericalCoeffs, out_layout: &RepLayout, f: F) -> Result<SphericalCoeffs>
where
    F: FnOnce(&mut Graph, &BoundParams, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.constant(Tensor::new(x.shape(), x.data().to_vec())?);
    let y = f(&mut g, &p, xv)?;
    let t = g.value(y);
    let lead = t.shape()[..t.shape().len() - 1].to_vec();
    SphericalCoeffs::with_lead(out_layout.clone(), lead, t.data().to_vec())
}

fn check_layout(x: &SphericalCoeffs, want: &RepLayout, op: &str) -> Result<()> {
    if x.layout() != want {
        return Err(invalid(format!("{op}: input layout {} does not match {want}", x.layout())));
    }
    Ok(())
}

/// Parameters of a standalone [`spherical_linear`].
#[derive(Clone, Debug)]
pub struct SphericalLinearParams {
    pub spec: LinearSpec,
    pub store: ParamStore,
}

impl SphericalLinearParams {
    pub fn random<R: Rng + ?Sized>(in_layout: RepLayout, out_layout: RepLayout, bias: bool, rng: &mut R) -> Result<Self> {
        let spec = LinearSpec::new("linear", in_layout, out_layout, bias);
        let mut store = ParamStore::new();
        spec.init(&mut store, rng)?;
        Ok(Self { spec, store })
    }

    /// Identity weights, zero bias.
    pub fn identity(layout: RepLayout) -> Self {
        let spec = LinearSpec::new("linear", layout.clone(), layout.clone(), true);
        let mut store = ParamStore::new();
        for &(l, c) in layout.entries() {
            let mut w = Tensor::zeros(vec![c, c]);
            for i in 0..c {
                w.data_mut()[i * c + i] = 1.0;
            }
            store.insert(spec.weight_name(l), w).expect("unique names");
        }
        if spec.bias {
            store.insert(spec.bias_name(), Tensor::zeros(vec![layout.multiplicity(0)])).expect("unique");
        }
        Self { spec, store }
    }

    pub fn weight_mut(&mut self, l: usize) -> Result<&mut Tensor> {
        self.store.get_mut(&self.spec.weight_name(l))
    }

    pub fn bias_mut(&mut self) -> Result<&mut Tensor> {
        self.store.get_mut(&self.spec.bias_name())
    }
}

pub fn spherical_linear(x: &SphericalCoeffs, p: &SphericalLinearParams) -> Result<SphericalCoeffs> {
    check_layout(x, &p.spec.in_layout, "spherical_linear")?;
    eval_store(&p.store, x, &p.spec.out_layout, |g, b, v| p.spec.forward(g, b, v))
}

/// Synthesis, pointwise `nonlinearity`, analysis back to the input band limit,
/// channel by channel.
pub fn spherical_activation(x: &SphericalCoeffs, grid: &SphereGrid, nonlinearity: Nonlinearity) -> Result<SphericalCoeffs> {
    let layout = x.layout().clone();
    eval_store(&ParamStore::new(), x, &layout, |g, _, v| grid_activation(g, v, &layout, grid, nonlinearity))
}

pub fn gate_activation(x: &SphericalCoeffs) -> Result<SphericalCoeffs> {
    let layout = x.layout().clone();
    eval_store(&ParamStore::new(), x, &layout, |g, _, v| g.gate(v, &layout))
}

pub fn degree_norm(x: &SphericalCoeffs) -> Result<SphericalCoeffs> {
    let layout = x.layout().clone();
    eval_store(&ParamStore::new(), x, &layout, |g, _, v| g.degree_norm(v, &layout, DEGREE_NORM_EPS))
}

/// Parameters of a standalone [`sfilm`].
#[derive(Clone, Debug)]
pub struct SFiLMParams {
    pub spec: FilmSpec,
    pub store: ParamStore,
}

impl SFiLMParams {
    pub fn random<R: Rng + ?Sized>(cond_layout: RepLayout, hidden_layout: RepLayout, rng: &mut R) -> Result<Self> {
        let spec = FilmSpec::new("sfilm", cond_layout, hidden_layout, true);
        let mut store = ParamStore::new();
        spec.init(&mut store, rng)?;
        // non-zero biases so the β path is exercised
        for name in [spec.gamma.bias_name(), spec.beta.bias_name()] {
            if let Ok(b) = store.get_mut(&name) {
                for v in b.data_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
        }
        Ok(Self { spec, store })
    }
}

/// `h` has lead `[.., T]`, `cond` the same lead without `T`.
pub fn sfilm(h: &SphericalCoeffs, cond: &SphericalCoeffs, p: &SFiLMParams) -> Result<SphericalCoeffs> {
    check_layout(h, p.spec.hidden_layout(), "sfilm")?;
    check_layout(cond, &p.spec.gamma.in_layout, "sfilm condition")?;
    let mut g = Graph::new();
    let b = p.store.bind(&mut g, false);
    let hv = g.constant(Tensor::new(h.shape(), h.data().to_vec())?);
    let cv = g.constant(Tensor::new(cond.shape(), cond.data().to_vec())?);
    let y = p.spec.forward(&mut g, &b, hv, cv)?;
    SphericalCoeffs::with_lead(h.layout().clone(), h.lead().to_vec(), g.value(y).data().to_vec())
}

/// Parameters of a standalone [`mctc`] / [`mctc_transposed`].
#[derive(Clone, Debug)]
pub struct MCTCParams {
    pub spec: ConvSpec,
    pub store: ParamStore,
}

impl MCTCParams {
    pub fn random<R: Rng + ?Sized>(
        in_layout: RepLayout,
        out_layout: RepLayout,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = ConvSpec::new("mctc", in_layout, out_layout, kernel, stride, false);
        let mut store = ParamStore::new();
        spec.init(&mut store, rng)?;
        Ok(Self { spec, store })
    }

    /// The adjoint layer: same weights, layouts swapped, no bias.
    pub fn transposed(&self) -> Self {
        let mut spec = self.spec.clone();
        std::mem::swap(&mut spec.in_layout, &mut spec.out_layout);
        spec.transposed = !spec.transposed;
        spec.bias = false;
        let mut store = ParamStore::new();
        for l in spec.degrees() {
            let name = spec.weight_name(l);
            store.insert(name.clone(), self.store.get(&name).expect("weight present").clone()).expect("unique");
        }
        Self { spec, store }
    }

    pub fn weight_mut(&mut self, l: usize) -> Result<&mut Tensor> {
        self.store.get_mut(&self.spec.weight_name(l))
    }

    pub fn bias_mut(&mut self) -> Result<&mut Tensor> {
        self.store.get_mut(&self.spec.bias_name())
    }
}

fn run_conv(x: &SphericalCoeffs, p: &MCTCParams, transposed: bool) -> Result<SphericalCoeffs> {
    if p.spec.transposed != transposed {
        return Err(invalid("convolution parameters have the wrong orientation for this call"));
    }
    check_layout(x, &p.spec.in_layout, "mctc")?;
    if x.lead().is_empty() {
        return Err(invalid("mctc: input needs a time axis"));
    }
    eval_store(&p.store, x, &p.spec.out_layout, |g, b, v| p.spec.forward(g, b, v))
}

/// Strided same-padded temporal convolution over lead `[.., T]`.
pub fn mctc(x: &SphericalCoeffs, p: &MCTCParams) -> Result<SphericalCoeffs> {
    run_conv(x, p, false)
}

/// Adjoint of [`mctc`]; `p` must come from [`MCTCParams::transposed`] or be
/// built with a transposed spec.
pub fn mctc_transposed(x: &SphericalCoeffs, p: &MCTCParams) -> Result<SphericalCoeffs> {
    run_conv(x, p, true)
}
