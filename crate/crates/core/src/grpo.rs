//! Group-relative advantages and rollout-group assembly.
//!
//! For a group of `G` rollouts of one sample with rewards `R_g`,
//!
//! ```text
//! mean  = (1/G) * sum_g R_g
//! sigma = sqrt((1/G) * sum_g (R_g - mean)^2)
//! A_g   = (R_g - mean) / (epsilon + sigma)
//! ```
//!
//! The policy update itself happens elsewhere; this module produces scored
//! records for a trainer to consume.

use std::io::Write;

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::Backend;
use crate::pipeline::{run_sample, Clock, Flag, PipelineConfig, PipelineError, Query, RunOptions};
use crate::rewards::{score_rollout, RewardBreakdown, RewardError, RewardWeights, ScoreInput};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("a group needs at least 2 rollouts, got {0}")]
    GroupSize(usize),
    #[error("epsilon must be positive")]
    Epsilon,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("failed to write rollouts: {0}")]
    Io(#[from] std::io::Error),
}

/// Mean and population standard deviation (Welford's update).
pub fn mean_std<F: Float>(values: &[F]) -> (F, F) {
    let mut mean = F::zero();
    let mut m2 = F::zero();
    let mut n = F::zero();
    for &x in values {
        n = n + F::one();
        let delta = x - mean;
        mean = mean + delta / n;
        m2 = m2 + delta * (x - mean);
    }
    if values.is_empty() {
        return (F::zero(), F::zero());
    }
    (mean, (m2 / n).max(F::zero()).sqrt())
}

/// `(R_g - mean) / (epsilon + sigma)` for every reward in the group.
pub fn group_advantages<F: Float>(rewards: &[F], epsilon: F) -> Result<Vec<F>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupSize(rewards.len()));
    }
    if !(epsilon > F::zero()) {
        return Err(GrpoError::Epsilon);
    }
    let (mean, std) = mean_std(rewards);
    let denom = epsilon + std;
    Ok(rewards.iter().map(|&r| (r - mean) / denom).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord<F> {
    pub sample_id: String,
    /// 1-based rollout index.
    pub g: u32,
    pub stage1_text: String,
    pub stage2_text: Option<String>,
    pub region: Option<[u32; 4]>,
    pub breakdown: RewardBreakdown<F>,
    pub advantage: F,
    pub flags: Vec<Flag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup<F> {
    pub sample_id: String,
    pub records: Vec<RolloutRecord<F>>,
    pub mean_reward: F,
    pub std_reward: F,
}

impl<F: Float> RolloutGroup<F> {
    pub fn rewards(&self) -> Vec<F> {
        self.records.iter().map(|r| r.breakdown.total).collect()
    }
}

/// Flat line format for the rollout export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedRollout {
    pub sample_id: String,
    pub g: u32,
    pub stage1_text: String,
    pub stage2_text: Option<String>,
    pub region: Option<[u32; 4]>,
    pub rewards: ExportedRewards,
    pub advantage: f64,
    pub area_ratio: Option<f64>,
    pub flags: Vec<Flag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExportedRewards {
    pub region: u8,
    #[serde(rename = "box")]
    pub box_: u8,
    pub acc: u8,
    pub format: u8,
    pub tce: f64,
    pub total: f64,
}

impl<F: Float + Scalar> From<&RolloutRecord<F>> for ExportedRollout {
    fn from(r: &RolloutRecord<F>) -> Self {
        let b = &r.breakdown;
        Self {
            sample_id: r.sample_id.clone(),
            g: r.g,
            stage1_text: r.stage1_text.clone(),
            stage2_text: r.stage2_text.clone(),
            region: r.region,
            rewards: ExportedRewards {
                region: b.r_region,
                box_: b.r_box,
                acc: b.r_acc,
                format: b.r_format,
                tce: b.r_tce.to_real(),
                total: b.total.to_real(),
            },
            advantage: Scalar::to_real(r.advantage),
            area_ratio: b.area_ratio.map(Scalar::to_real),
            flags: r.flags.clone(),
        }
    }
}

/// Writes one JSON object per record.
pub fn write_jsonl<F: Float + Scalar, W: Write>(groups: &[RolloutGroup<F>], mut out: W) -> Result<(), GrpoError> {
    for group in groups {
        for rec in &group.records {
            serde_json::to_writer(&mut out, &ExportedRollout::from(rec)).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// One training sample: its query and the answer it should produce.
pub struct GroupSample<'a> {
    pub query: Query<'a>,
    pub gt: &'a str,
}

/// Shared settings for building rollout groups.
pub struct GroupSettings<'a, F> {
    pub group_size: usize,
    pub weights: &'a RewardWeights<F>,
    pub pipeline: &'a PipelineConfig,
    pub clock: &'a dyn Clock,
}

/// Runs `group_size` rollouts of one sample, scores them and normalizes.
///
/// A rollout whose policy call fails becomes a zero-reward record flagged
/// [`Flag::PolicyBackendFailed`], so the group always has `group_size` records.
pub fn build_group<F, P, R>(
    sample: &GroupSample<'_>,
    settings: &GroupSettings<'_, F>,
    policy: &P,
    reward: &R,
) -> Result<RolloutGroup<F>, GrpoError>
where
    F: Float + Scalar,
    P: Backend + ?Sized,
    R: Backend + ?Sized,
{
    let g_total = settings.group_size;
    if g_total < 2 {
        return Err(GrpoError::GroupSize(g_total));
    }
    let score_input = ScoreInput {
        question: sample.query.question,
        gt: sample.gt,
        reward_system: &settings.pipeline.templates.reward_system,
    };
    let scored: Vec<Result<RolloutRecord<F>, GrpoError>> = (1..=g_total as u32)
        .into_par_iter()
        .map(|g| {
            let opts = RunOptions {
                rollout: Some(g),
                variant: None,
                clock: settings.clock,
            };
            match run_sample(&sample.query, settings.pipeline, policy, &opts) {
                Ok(run) => {
                    let breakdown = score_rollout(&run, &score_input, settings.weights, reward)?;
                    let mut flags = run.trace.flags.clone();
                    flags.extend(breakdown.flags.iter().cloned());
                    Ok(RolloutRecord {
                        sample_id: sample.query.id.to_string(),
                        g,
                        stage1_text: run.trace.stage1_text,
                        stage2_text: run.trace.stage2_text,
                        region: run.trace.region,
                        breakdown,
                        advantage: F::zero(),
                        flags,
                    })
                }
                Err(PipelineError::Backend { turn, source, .. }) => {
                    log::warn!("{} rollout {g}: policy turn {turn} failed: {source}", sample.query.id);
                    let mut breakdown = RewardBreakdown::invalid();
                    breakdown.flags = vec![Flag::PolicyBackendFailed];
                    Ok(RolloutRecord {
                        sample_id: sample.query.id.to_string(),
                        g,
                        stage1_text: String::new(),
                        stage2_text: None,
                        region: None,
                        breakdown,
                        advantage: F::zero(),
                        flags: vec![Flag::PolicyBackendFailed],
                    })
                }
                Err(e) => Err(e.into()),
            }
        })
        .collect();
    let mut records = scored.into_iter().collect::<Result<Vec<_>, _>>()?;
    let rewards: Vec<F> = records.iter().map(|r| r.breakdown.total).collect();
    let adv = group_advantages(&rewards, settings.weights.epsilon)?;
    for (rec, a) in records.iter_mut().zip(adv) {
        rec.advantage = a;
    }
    let (mean, std) = mean_std(&rewards);
    Ok(RolloutGroup {
        sample_id: sample.query.id.to_string(),
        records,
        mean_reward: mean,
        std_reward: std,
    })
}
