//! Per-rollout rewards.
//!
//! ```text
//! r_tce   = alpha * r_region + beta * r_box
//! total   = r_tce + r_acc + r_format
//! ```
//!
//! `r_region` asks a frozen reward model the question with only the crop in
//! view. `r_box` is one when the crop covers at most `gamma` of the original
//! image. A rollout whose region cannot be cropped scores zero on everything.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, CallContext, Caller, ChatMessage, ImagePart, Part, Role};
use crate::geometry::{area_ratio, BBox, CoordSpace, GeometryError};
use crate::imaging::RasterImage;
use crate::pipeline::{Flag, PipelineRun};
use crate::protocol::{format_reward, match_answer, parse_output, StageOutput};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("invalid reward weights: {0}")]
    Weights(String),
    #[error("reward model unavailable: {0}")]
    Unavailable(#[source] BackendError),
    #[error("crop is empty")]
    EmptyCrop,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Reward weights. Defaults: alpha 1, beta 0.5, gamma 0.6, epsilon 1e-4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights<S> {
    pub alpha: S,
    pub beta: S,
    /// Largest crop-to-image area ratio that still earns the box reward.
    pub gamma: S,
    /// Added to the group standard deviation when normalizing advantages.
    pub epsilon: S,
}

impl<S: Scalar> Default for RewardWeights<S> {
    fn default() -> Self {
        Self {
            alpha: S::one(),
            beta: S::from_ratio(1, 2),
            gamma: S::from_ratio(3, 5),
            epsilon: S::from_ratio(1, 10_000),
        }
    }
}

impl<S: Scalar> RewardWeights<S> {
    pub fn validate(&self) -> Result<(), RewardError> {
        let zero = S::zero();
        if !(self.alpha >= zero) {
            return Err(RewardError::Weights(format!("alpha must be >= 0, got {:?}", self.alpha)));
        }
        if !(self.beta >= zero) {
            return Err(RewardError::Weights(format!("beta must be >= 0, got {:?}", self.beta)));
        }
        if !(self.gamma > zero && self.gamma <= S::one()) {
            return Err(RewardError::Weights(format!("gamma must be in (0, 1], got {:?}", self.gamma)));
        }
        if !(self.epsilon > zero) {
            return Err(RewardError::Weights(format!("epsilon must be > 0, got {:?}", self.epsilon)));
        }
        Ok(())
    }

    /// Converts weights given as reals, e.g. from a config file.
    pub fn from_reals(alpha: f64, beta: f64, gamma: f64, epsilon: f64) -> Result<Self, RewardError> {
        let conv = |name: &str, v: f64| {
            S::from_real(v).ok_or_else(|| RewardError::Weights(format!("{name} = {v} is not representable")))
        };
        let w = Self {
            alpha: conv("alpha", alpha)?,
            beta: conv("beta", beta)?,
            gamma: conv("gamma", gamma)?,
            epsilon: conv("epsilon", epsilon)?,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn to_f64(&self) -> RewardWeights<f64> {
        RewardWeights {
            alpha: self.alpha.to_real(),
            beta: self.beta.to_real(),
            gamma: self.gamma.to_real(),
            epsilon: self.epsilon.to_real(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown<S> {
    pub r_region: u8,
    pub r_box: u8,
    pub r_acc: u8,
    pub r_format: u8,
    pub r_tce: S,
    pub total: S,
    pub region_valid: bool,
    pub reward_model_answer: Option<String>,
    pub area_ratio: Option<S>,
    pub flags: Vec<Flag>,
}

impl<S: Scalar> RewardBreakdown<S> {
    /// Combines binary components into the weighted total.
    pub fn combine(w: &RewardWeights<S>, r_region: u8, r_box: u8, r_acc: u8, r_format: u8) -> Self {
        let ind = |v: u8| -> S { crate::scalar::indicator(v != 0) };
        let r_tce = w.alpha * ind(r_region) + w.beta * ind(r_box);
        let total = r_tce + ind(r_acc) + ind(r_format);
        Self {
            r_region,
            r_box,
            r_acc,
            r_format,
            r_tce,
            total,
            region_valid: true,
            reward_model_answer: None,
            area_ratio: None,
            flags: Vec::new(),
        }
    }

    /// The all-zero outcome for a region that cannot be cropped.
    pub fn invalid() -> Self {
        Self {
            r_region: 0,
            r_box: 0,
            r_acc: 0,
            r_format: 0,
            r_tce: S::zero(),
            total: S::zero(),
            region_valid: false,
            reward_model_answer: None,
            area_ratio: None,
            flags: vec![Flag::InvalidRegion],
        }
    }

    pub fn to_f64(&self) -> RewardBreakdown<f64> {
        RewardBreakdown {
            r_region: self.r_region,
            r_box: self.r_box,
            r_acc: self.r_acc,
            r_format: self.r_format,
            r_tce: self.r_tce.to_real(),
            total: self.total.to_real(),
            region_valid: self.region_valid,
            reward_model_answer: self.reward_model_answer.clone(),
            area_ratio: self.area_ratio.map(Scalar::to_real),
            flags: self.flags.clone(),
        }
    }
}

/// One when the region covers at most `gamma` of the image (inclusive).
pub fn box_reward<S: Scalar>(region: &BBox, orig: CoordSpace, w: &RewardWeights<S>) -> Result<u8, GeometryError> {
    let ratio: S = area_ratio(region, orig)?;
    Ok(u8::from(ratio <= w.gamma))
}

/// Conversation sent to the reward model: its system prompt, then the crop and
/// the question. No other image is included.
pub fn reward_messages(crop: &RasterImage, query: &str, system: &str) -> Result<Vec<ChatMessage>, RewardError> {
    let image = ImagePart::from_image(crop).map_err(|e| RewardError::Unavailable(e.into()))?;
    Ok(vec![
        ChatMessage::text(Role::System, system),
        ChatMessage {
            role: Role::User,
            parts: vec![Part::Image(image), Part::Text { text: query.to_string() }],
        },
    ])
}

/// Asks the reward model to answer from the crop alone. Returns the indicator
/// and the answer it gave.
pub fn region_reward<B: Backend + ?Sized>(
    reward_backend: &B,
    ctx: &CallContext,
    crop: &RasterImage,
    query: &str,
    gt: &str,
    system: &str,
) -> Result<(u8, String), RewardError> {
    if crop.width() == 0 || crop.height() == 0 {
        return Err(RewardError::EmptyCrop);
    }
    let msgs = reward_messages(crop, query, system)?;
    let text = reward_backend.complete(ctx, &msgs).map_err(RewardError::Unavailable)?;
    let answer = parse_output(&text).answer.unwrap_or_else(|| text.trim().to_string());
    Ok((u8::from(match_answer(&answer, gt)), answer))
}

pub fn accuracy_reward(answer_out: Option<&StageOutput>, gt: &str) -> u8 {
    answer_out
        .and_then(|o| o.answer.as_deref())
        .map_or(0, |a| u8::from(match_answer(a, gt)))
}

/// Inputs for scoring one rollout beyond the pipeline run itself.
pub struct ScoreInput<'a> {
    pub question: &'a str,
    pub gt: &'a str,
    pub reward_system: &'a str,
}

/// Scores one rollout. A reward-model failure zeroes `r_region` and records
/// [`Flag::RewardBackendFailed`] instead of failing the rollout.
pub fn score_rollout<S: Scalar, B: Backend + ?Sized>(
    run: &PipelineRun,
    input: &ScoreInput<'_>,
    w: &RewardWeights<S>,
    reward_backend: &B,
) -> Result<RewardBreakdown<S>, RewardError> {
    let trace = &run.trace;
    let (Some(region), Some(crop)) = (trace.region_box(), run.crop.as_ref()) else {
        return Ok(RewardBreakdown::invalid());
    };
    let orig = trace.original_space();

    let ctx = CallContext::new(trace.sample_id.clone(), 1, Caller::Reward).with_rollout(trace.rollout);
    let mut flags = Vec::new();
    let (r_region, rm_answer) = match region_reward(reward_backend, &ctx, crop, input.question, input.gt, input.reward_system) {
        Ok((r, a)) => (r, Some(a)),
        Err(RewardError::Unavailable(e)) => {
            log::warn!("{}: reward model failed: {e}", trace.sample_id);
            flags.push(Flag::RewardBackendFailed);
            (0, None)
        }
        Err(e) => return Err(e),
    };
    let r_box = box_reward(&region, orig, w)?;
    let region_out = parse_output(&trace.stage1_text);
    let answer_out = trace.stage2_text.as_deref().map(parse_output);
    let r_acc = accuracy_reward(answer_out.as_ref(), input.gt);
    let r_format = format_reward(&region_out, answer_out.as_ref());

    let mut out = RewardBreakdown::combine(w, r_region, r_box, r_acc, r_format);
    out.reward_model_answer = rm_answer;
    out.area_ratio = Some(area_ratio(&region, orig)?);
    out.flags = flags;
    Ok(out)
}
