//! Synthetic reach-and-orient benchmark: task, demonstrations, policy,
//! training and closed-loop evaluation.

pub mod dataset;
pub mod eval;
pub mod policy;
pub mod task;
pub mod train;

pub use dataset::{gen_demos, Dataset, Episode};
pub use eval::{evaluate, rollout, write_rollouts_csv, Bucket, EvalReport, RolloutResult};
pub use policy::{CoupledNoise, Policy, PolicyConfig, Sample};
pub use task::{Instance, Pose, RotationSet, TaskSpec, TemplatePoint};
pub use train::{build_samples, train, write_loss_csv, EpochLoss, TrainConfig, TrainOutcome};
