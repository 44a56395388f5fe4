//! Coarse-to-fine visual question answering engine.
//!
//! A downsampled view of the image is used to localize the region that
//! matters, that region is cropped from the original at full resolution, and
//! the answer is produced from the crop. Around that pipeline this crate
//! provides the reward system used to train such a policy, group-relative
//! advantages for rollout groups, and an evaluation harness.
//!
//! Ratio, coverage and reward arithmetic is generic over [`Scalar`]; the
//! aliases below fix it to `f64` for everyday use, and [`Exact`] runs the same
//! code in exact rational arithmetic.

pub mod backends;
pub mod geometry;
pub mod grpo;
pub mod harness;
pub mod imaging;
pub mod pipeline;
pub mod protocol;
pub mod rewards;
pub mod scalar;

pub use scalar::{Exact, Scalar};

pub type Weights = rewards::RewardWeights<f64>;
pub type Breakdown = rewards::RewardBreakdown<f64>;
pub type Group = grpo::RolloutGroup<f64>;
pub type Record = grpo::RolloutRecord<f64>;

pub type ExactWeights = rewards::RewardWeights<Exact>;
pub type ExactBreakdown = rewards::RewardBreakdown<Exact>;
