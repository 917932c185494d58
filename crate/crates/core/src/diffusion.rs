//! Forward noising, the noise-prediction loss and the DDPM / DDIM samplers.
//!
//! Steps are indexed `k = 1..=K`; index `0` of every table is the clean
//! signal (`β_0 = 0`, `ᾱ_0 = 1`). The reverse DDPM step is written as
//! `A^{k-1} = α_k (A^k − γ_k ε_θ(C, A^k, k) + z)` with `z ~ N(0, σ_k² I)`,
//! `α_k = 1/√(1−β_k)`, `γ_k = β_k/√(1−ᾱ_k)` and `σ_k = √(β̃_k (1−β_k))`,
//! where `β̃_k` is the posterior variance. `σ_1 = 0`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{invalid, Result};
use crate::sdtu::Sdtu;
use crate::so3::{rotate_coeffs, RepLayout, Rotation, SphericalCoeffs};

/// Offset of the cosine schedule.
const COSINE_S: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(k: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if k == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    let f = |t: f64| ((t / k as f64 + COSINE_S) / (1.0 + COSINE_S) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let mut betas = vec![0.0; k + 1];
    let mut alpha_bars = vec![1.0; k + 1];
    for i in 1..=k {
        let b = (1.0 - f(i as f64) / f((i - 1) as f64)).min(MAX_BETA);
        betas[i] = b;
        alpha_bars[i] = alpha_bars[i - 1] * (1.0 - b);
    }
    Ok(NoiseSchedule { kind, betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of denoising steps `K`.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.betas[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    /// Reverse-step coefficients `(α_k, γ_k, σ_k)`, `k ≥ 1`.
    pub fn reverse_coeffs(&self, k: usize) -> (f64, f64, f64) {
        let b = self.betas[k];
        let ab = self.alpha_bars[k];
        let post_var = (1.0 - self.alpha_bars[k - 1]) / (1.0 - ab) * b;
        (1.0 / (1.0 - b).sqrt(), b / (1.0 - ab).sqrt(), (post_var * (1.0 - b)).sqrt())
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(invalid(format!("step {k} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `A^k = √ᾱ_k A^0 + √(1−ᾱ_k) ε`.
pub fn add_noise(a0: &SphericalCoeffs, eps: &SphericalCoeffs, k: usize, sched: &NoiseSchedule) -> Result<SphericalCoeffs> {
    if k > sched.steps() {
        return Err(invalid(format!("step {k} outside 0..={}", sched.steps())));
    }
    if a0.layout() != eps.layout() || a0.lead() != eps.lead() {
        return Err(invalid("add_noise: signal and noise shapes differ"));
    }
    let (s, n) = (sched.alpha_bar(k).sqrt(), (1.0 - sched.alpha_bar(k)).sqrt());
    let mut out = a0.clone();
    for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = s * *o + n * e;
    }
    Ok(out)
}

/// Source of standard normal coefficient tensors.
pub trait NoiseSource {
    fn sample(&mut self, layout: &RepLayout, lead: &[usize]) -> Result<SphericalCoeffs>;
}

/// I.i.d. `N(0, 1)` draws in storage order.
pub struct GaussianNoise<R> {
    rng: R,
}

impl<R: Rng> GaussianNoise<R> {
    pub fn new(rng: R) -> Self {
        Self { rng }
    }

    pub fn into_inner(self) -> R {
        self.rng
    }
}

impl<R: Rng> NoiseSource for GaussianNoise<R> {
    fn sample(&mut self, layout: &RepLayout, lead: &[usize]) -> Result<SphericalCoeffs> {
        let n = layout.total_dim() * lead.iter().product::<usize>();
        let data = (0..n).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect();
        SphericalCoeffs::with_lead(layout.clone(), lead.to_vec(), data)
    }
}

/// Rotates every draw of an inner source by a fixed rotation; pairs the
/// noise of a rotated run with that of an unrotated one.
pub struct RotatedNoise<N> {
    inner: N,
    rotation: Rotation,
}

impl<N: NoiseSource> RotatedNoise<N> {
    pub fn new(inner: N, rotation: Rotation) -> Self {
        Self { inner, rotation }
    }
}

impl<N: NoiseSource> NoiseSource for RotatedNoise<N> {
    fn sample(&mut self, layout: &RepLayout, lead: &[usize]) -> Result<SphericalCoeffs> {
        rotate_coeffs(&self.inner.sample(layout, lead)?, &self.rotation)
    }
}

/// A noise-prediction network `ε_θ(C, A^k, k)`.
pub trait Denoiser {
    fn action_layout(&self) -> RepLayout;
    fn horizon(&self) -> usize;
    /// `cond` has lead `[B]` (or none), `actions` lead `cond.lead ++ [T]`.
    fn predict_noise(&self, cond: &SphericalCoeffs, actions: &SphericalCoeffs, k: usize) -> Result<SphericalCoeffs>;
}

/// An [`Sdtu`] together with its parameters.
pub struct SdtuDenoiser<'a> {
    pub net: &'a Sdtu,
    pub params: &'a ParamStore,
}

impl Denoiser for SdtuDenoiser<'_> {
    fn action_layout(&self) -> RepLayout {
        self.net.action_layout().clone()
    }

    fn horizon(&self) -> usize {
        self.net.config().horizon
    }

    fn predict_noise(&self, cond: &SphericalCoeffs, actions: &SphericalCoeffs, k: usize) -> Result<SphericalCoeffs> {
        let b = cond.lead().first().copied().unwrap_or(1);
        let c = SphericalCoeffs::with_lead(cond.layout().clone(), vec![b], cond.data().to_vec())?;
        let t = self.horizon();
        let a = SphericalCoeffs::with_lead(actions.layout().clone(), vec![b, t], actions.data().to_vec())?;
        let y = self.net.forward(self.params, &c, &a, &vec![k; b])?;
        SphericalCoeffs::with_lead(actions.layout().clone(), actions.lead().to_vec(), y.into_data())
    }
}

fn action_lead<M: Denoiser + ?Sized>(model: &M, cond: &SphericalCoeffs) -> Vec<usize> {
    let mut lead = cond.lead().to_vec();
    lead.push(model.horizon());
    lead
}

/// `‖ε_θ(C, A^k, k) − ε‖²` for given `k` and `ε`.
pub fn training_loss_at<M: Denoiser + ?Sized>(
    model: &M,
    cond: &SphericalCoeffs,
    a0: &SphericalCoeffs,
    sched: &NoiseSchedule,
    k: usize,
    eps: &SphericalCoeffs,
) -> Result<f64> {
    sched.check_step(k)?;
    let ak = add_noise(a0, eps, k, sched)?;
    let pred = model.predict_noise(cond, &ak, k)?;
    Ok(pred.data().iter().zip(eps.data()).map(|(p, e)| (p - e) * (p - e)).sum())
}

/// Draws `k ~ U{1..K}` from `rng`, then `ε` from `noise`.
pub fn training_loss<M: Denoiser + ?Sized, R: Rng + ?Sized, N: NoiseSource>(
    model: &M,
    cond: &SphericalCoeffs,
    a0: &SphericalCoeffs,
    sched: &NoiseSchedule,
    rng: &mut R,
    noise: &mut N,
) -> Result<f64> {
    let k = rng.random_range(1..=sched.steps());
    let eps = noise.sample(a0.layout(), a0.lead())?;
    training_loss_at(model, cond, a0, sched, k, &eps)
}

/// Ancestral sampling over all `K` steps.
pub fn ddpm_sample<M: Denoiser + ?Sized, N: NoiseSource>(
    model: &M,
    cond: &SphericalCoeffs,
    sched: &NoiseSchedule,
    noise: &mut N,
) -> Result<SphericalCoeffs> {
    let layout = model.action_layout();
    let lead = action_lead(model, cond);
    let mut a = noise.sample(&layout, &lead)?;
    for k in (1..=sched.steps()).rev() {
        let eps = model.predict_noise(cond, &a, k)?;
        let (alpha, gamma, sigma) = sched.reverse_coeffs(k);
        let z = if k > 1 { Some(noise.sample(&layout, &lead)?) } else { None };
        for (i, v) in a.data_mut().iter_mut().enumerate() {
            let zi = z.as_ref().map_or(0.0, |z| sigma * z.data()[i]);
            *v = alpha * (*v - gamma * eps.data()[i] + zi);
        }
    }
    Ok(a)
}

/// Sub-sampled step set `τ_0 = 0`, `τ_i = 1 + (i − 1)·⌊K/steps⌋`. The
/// sampler starts at `τ_steps` rather than at `K`: where `ᾱ_K ≈ 0` the
/// clean-signal estimate is all prediction error.
pub fn ddim_timesteps(k: usize, steps: usize) -> Vec<usize> {
    let r = k / steps.max(1);
    std::iter::once(0).chain((1..=steps).map(|i| 1 + (i - 1) * r)).collect()
}

/// Deterministic (η = 0) accelerated sampling; `noise` is used once for the
/// initial draw.
pub fn ddim_sample<M: Denoiser + ?Sized, N: NoiseSource>(
    model: &M,
    cond: &SphericalCoeffs,
    sched: &NoiseSchedule,
    steps: usize,
    noise: &mut N,
) -> Result<SphericalCoeffs> {
    ddim_sample_clamped(model, cond, sched, steps, noise, None)
}

/// Scales every `(degree, channel)` slice of every row down to Euclidean
/// norm at most `max_norm`. Commutes with rotations.
pub fn clamp_slice_norms(x: &mut SphericalCoeffs, max_norm: f64) {
    let slices: Vec<(usize, usize)> = x.layout().slices().map(|(l, _, off)| (off, 2 * l + 1)).collect();
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        for &(off, n) in &slices {
            let v = &mut row[off..off + n];
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                v.iter_mut().for_each(|a| *a *= s);
            }
        }
    }
}

/// [`ddim_sample`] with the clean-signal estimate of every step passed
/// through [`clamp_slice_norms`] when `max_norm` is set, and the noise
/// estimate made consistent with it. Near `ᾱ_K ≈ 0` the estimate divides
/// the prediction error by `√ᾱ_K`; the clamp keeps that from running away.
pub fn ddim_sample_clamped<M: Denoiser + ?Sized, N: NoiseSource>(
    model: &M,
    cond: &SphericalCoeffs,
    sched: &NoiseSchedule,
    steps: usize,
    noise: &mut N,
    max_norm: Option<f64>,
) -> Result<SphericalCoeffs> {
    if steps == 0 || steps > sched.steps() {
        return Err(invalid(format!("ddim steps must be in 1..={}, got {steps}", sched.steps())));
    }
    if let Some(m) = max_norm {
        if !(m > 0.0) {
            return Err(invalid("ddim clamp norm must be positive"));
        }
    }
    let layout = model.action_layout();
    let mut a = noise.sample(&layout, &action_lead(model, cond))?;
    let tau = ddim_timesteps(sched.steps(), steps);
    for i in (1..=steps).rev() {
        let (k, prev) = (tau[i], tau[i - 1]);
        let mut eps = model.predict_noise(cond, &a, k)?;
        let (ab, abp) = (sched.alpha_bar(k), sched.alpha_bar(prev));
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pn) = (abp.sqrt(), (1.0 - abp).sqrt());
        let mut x0 = a.clone();
        for (v, e) in x0.data_mut().iter_mut().zip(eps.data()) {
            *v = (*v - sn * e) / sa;
        }
        if let Some(m) = max_norm {
            clamp_slice_norms(&mut x0, m);
            for ((e, v), x) in eps.data_mut().iter_mut().zip(a.data()).zip(x0.data()) {
                *e = (v - sa * x) / sn;
            }
        }
        for ((v, e), x) in a.data_mut().iter_mut().zip(eps.data()).zip(x0.data()) {
            *v = pa * x + pn * e;
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_invariants() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        assert_eq!(s.steps(), 100);
        for k in 1..=100 {
            assert!(s.beta(k) > 0.0 && s.beta(k) < 1.0);
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
            if k > 1 {
                assert!(s.beta(k) >= s.beta(k - 1));
            }
            assert!(s.reverse_coeffs(k).2 >= 0.0);
        }
        assert_eq!(s.reverse_coeffs(1).2, 0.0);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<NoiseSchedule>(&json).unwrap(), s);
    }

    #[test]
    fn ddim_steps_cover_the_range() {
        assert_eq!(ddim_timesteps(100, 8), vec![0, 1, 13, 25, 37, 49, 61, 73, 85]);
        assert_eq!(ddim_timesteps(5, 5), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(ddim_timesteps(10, 3), vec![0, 1, 4, 7]);
    }
}
