//! Deterministic training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::policy::{Policy, Sample};
use crate::autodiff::{Adam, AdamConfig, Graph, LrSchedule, ParamStore, Tensor};
use crate::canonical::EE_DIM;
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Training states are taken every `sample_stride` steps of an episode.
    pub sample_stride: usize,
    /// Batch elements per gradient task; the reduction order over tasks is
    /// fixed, so results do not depend on the thread count.
    pub grad_chunk: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, lr: 3e-3, warmup_steps: 100, sample_stride: 4, grad_chunk: 8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_chunk == 0 || self.sample_stride == 0 {
            return Err(invalid("batch_size, grad_chunk and sample_stride must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub losses: Vec<EpochLoss>,
}

/// Every `stride`-th state of every episode with its expert chunk.
pub fn build_samples(policy: &Policy, data: &Dataset, stride: usize) -> Result<Vec<Sample>> {
    let cfg = policy.config();
    let jobs: Vec<(usize, usize)> =
        data.episodes.iter().enumerate().flat_map(|(i, e)| (0..e.len()).step_by(stride.max(1)).map(move |t| (i, t))).collect();
    jobs.par_iter()
        .map(|&(i, t)| {
            let (w, a) = data.episodes[i].sample(t, cfg.encoder.history, cfg.sdtu.horizon)?;
            policy.prepare(&w, &a)
        })
        .collect()
}

/// Trains from `policy.init(cfg.seed)`; `on_epoch` sees each epoch's loss.
pub fn train(policy: &Policy, data: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLoss)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = build_samples(policy, data, cfg.sample_stride)?;
    if samples.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut params = policy.init(cfg.seed)?;
    let batches_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule { base_lr: cfg.lr, warmup_steps: cfg.warmup_steps, total_steps: cfg.epochs * batches_per_epoch };
    let mut opt = Adam::new(&params, AdamConfig::default(), schedule);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let k_max = policy.schedule().steps();
    let per = policy.config().sdtu.horizon * EE_DIM * policy.arms();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = opt.current_lr();
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let steps: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=k_max)).collect();
            let eps: Vec<f64> = (0..idx.len() * per).map(|_| rng.sample(StandardNormal)).collect();
            let b = idx.len();
            let tasks: Vec<usize> = (0..b).step_by(cfg.grad_chunk).collect();
            let results: Vec<(f64, Vec<Tensor>)> = tasks
                .par_iter()
                .map(|&lo| {
                    let hi = (lo + cfg.grad_chunk).min(b);
                    let batch: Vec<&Sample> = idx[lo..hi].iter().map(|&i| &samples[i]).collect();
                    let mut g = Graph::new();
                    let p = params.bind(&mut g, true);
                    let mse = policy.loss_graph(&mut g, &p, &batch, &steps[lo..hi], &eps[lo * per..hi * per])?;
                    // weight so the chunk terms sum to the batch mean
                    let loss = g.scale(mse, (hi - lo) as f64 / b as f64);
                    let grads = g.backward(loss)?;
                    Ok((g.value(loss).item(), p.gradients(&grads, &params)))
                })
                .collect::<Result<_>>()?;
            let mut iter = results.into_iter();
            let (mut loss, mut grads) = iter.next().expect("batch is non-empty");
            for (l, gr) in iter {
                loss += l;
                for (a, b) in grads.iter_mut().zip(&gr) {
                    a.add_assign(b);
                }
            }
            if !loss.is_finite() {
                return Err(invalid(format!("training diverged at epoch {epoch}")));
            }
            total += loss;
            opt.step(&mut params, &grads)?;
        }
        let e = EpochLoss { epoch, loss: total / batches_per_epoch as f64, lr };
        on_epoch(&e);
        losses.push(e);
    }
    Ok(TrainOutcome { params, losses })
}

pub fn write_loss_csv(path: &Path, losses: &[EpochLoss]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,loss,lr")?;
    for e in losses {
        writeln!(f, "{},{:.16e},{:.16e}", e.epoch, e.loss, e.lr)?;
    }
    f.flush()?;
    Ok(())
}
