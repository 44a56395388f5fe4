//! Two-stage coarse-to-fine inference.
//!
//! 1. Downsample the original image under the pixel constraint.
//! 2. Ask the policy for a region (`<zoom>`) or a direct answer.
//! 3. Map the zoom box from the coarse image's pixel space onto the original,
//!    crop at original resolution and ask for the answer with the crop
//!    appended to the conversation.
//!
//! Every run yields a [`PipelineTrace`] with the token cost of each image sent.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, CallContext, Caller, ChatMessage, ImagePart, Part, Role};
use crate::geometry::{clamp_and_validate, BBox, CoordSpace, InvalidRegion};
use crate::imaging::{self, token_count, ImagingError, PixelConstraint, RasterImage};
use crate::protocol::{parse_output, StageOutput};

/// Token cap applied to crops when no explicit crop constraint is configured.
/// Crops within it (and patch-aligned) are sent untouched.
pub const DEFAULT_CROP_TOKENS: u32 = 16384;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("sample {sample_id}: {message}")]
    Precondition { sample_id: String, message: String },
    #[error("sample {sample_id}, turn {turn}: {source}")]
    Backend {
        sample_id: String,
        turn: u32,
        #[source]
        source: BackendError,
    },
    #[error("sample {sample_id}: {source}")]
    Imaging {
        sample_id: String,
        #[source]
        source: ImagingError,
    },
}

impl PipelineError {
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            PipelineError::Backend { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Conditions worth auditing that do not abort a run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    MalformedStage1,
    MalformedStage2,
    InvalidRegion,
    AnswerMissing,
    DirectAnswer,
    OracleRegion,
    PolicyBackendFailed,
    RewardBackendFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplates {
    pub version: String,
    /// System prompt for the region-selection turn.
    pub stage1_system: String,
    /// User text sent with the crop; `{question}` is substituted.
    pub stage2_user: String,
    /// System prompt for the coarse-only baseline.
    pub direct_system: String,
    /// System prompt for the reward model, which sees only the crop.
    pub reward_system: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            version: "v1".into(),
            stage1_system: "You see a downsampled view of an image together with a question. \
Reason inside <think></think>. If the details needed to answer are too small to make out, \
output the region to inspect at full resolution as <zoom>[x1, y1, x2, y2]</zoom>, using pixel \
coordinates of the image you were shown. Otherwise give the final answer inside <answer></answer>."
                .into(),
            stage2_user: "Here is the selected region at full resolution.\nQuestion: {question}\n\
Reason inside <think></think> and give the final answer inside <answer></answer>."
                .into(),
            direct_system: "Reason inside <think></think> and give the final answer inside <answer></answer>."
                .into(),
            reward_system: "Answer the question using only the provided image.".into(),
        }
    }
}

impl PromptTemplates {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for tag in ["<think>", "<zoom>", "<answer>"] {
            if !self.stage1_system.contains(tag) {
                return Err(PipelineError::Config(format!("stage1_system template lacks a {tag} instruction")));
            }
        }
        if !self.stage2_user.contains("<answer>") {
            return Err(PipelineError::Config("stage2_user template lacks an <answer> instruction".into()));
        }
        if !self.stage2_user.contains("{question}") {
            return Err(PipelineError::Config("stage2_user template lacks a {question} slot".into()));
        }
        if !self.direct_system.contains("<answer>") {
            return Err(PipelineError::Config("direct_system template lacks an <answer> instruction".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Vision-token cap for the coarse view.
    pub tokens: PixelConstraint,
    /// Optional cap on crop tokens; crops are sent at original resolution otherwise.
    pub crop_tokens: Option<PixelConstraint>,
    pub direct_answer_allowed: bool,
    pub templates: PromptTemplates,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tokens: PixelConstraint::new(640).expect("non-zero"),
            crop_tokens: None,
            direct_answer_allowed: true,
            templates: PromptTemplates::default(),
        }
    }
}

impl PipelineConfig {
    pub fn with_tokens(tokens: u32) -> Result<Self, PipelineError> {
        let tokens = PixelConstraint::new(tokens).map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self {
            tokens,
            ..Default::default()
        })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.templates.validate()
    }

    fn crop_constraint(&self) -> PixelConstraint {
        self.crop_tokens
            .unwrap_or_else(|| PixelConstraint::new(DEFAULT_CROP_TOKENS).expect("non-zero"))
    }
}

/// Wall-clock source for latency measurement.
pub trait Clock: Send + Sync {
    /// Seconds since an arbitrary fixed origin.
    fn now(&self) -> f64;
}

pub struct SystemClock(Instant);

impl SystemClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// A clock that never advances; traces record zero latency.
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now(&self) -> f64 {
        0.0
    }
}

/// What the pipeline needs to know about a sample.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub id: &'a str,
    /// Full prompt text, including any answer options.
    pub question: &'a str,
    pub image: &'a RasterImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCost {
    pub width: u32,
    pub height: u32,
    pub tokens: u64,
}

impl ImageCost {
    fn of(img: &RasterImage) -> Result<Self, ImagingError> {
        Ok(Self {
            width: img.width(),
            height: img.height(),
            tokens: token_count(img.width(), img.height())?,
        })
    }
}

/// Pixel space the policy's zoom coordinates are read in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoomSpace {
    Coarse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout: Option<u32>,
    pub original: [u32; 2],
    pub coarse: ImageCost,
    pub zoom_space: ZoomSpace,
    /// Region in original-image pixels, `[x1, y1, x2, y2]`, half-open.
    pub region: Option<[u32; 4]>,
    pub crop: Option<ImageCost>,
    pub stage1_text: String,
    pub stage2_text: Option<String>,
    pub final_answer: Option<String>,
    pub total_vision_tokens: u64,
    pub latency_secs: f64,
    pub flags: Vec<Flag>,
}

impl PipelineTrace {
    pub fn original_space(&self) -> CoordSpace {
        CoordSpace::new(self.original[0], self.original[1]).expect("trace built from a real image")
    }

    pub fn region_box(&self) -> Option<BBox> {
        let [x1, y1, x2, y2] = self.region?;
        BBox::new(x1.into(), y1.into(), x2.into(), y2.into(), self.original_space()).ok()
    }

    pub fn has_flag(&self, flag: &Flag) -> bool {
        self.flags.contains(flag)
    }

    pub fn crop_tokens(&self) -> u64 {
        self.crop.map_or(0, |c| c.tokens)
    }
}

/// A finished run: the trace plus the crop image that was sent, if any.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub trace: PipelineTrace,
    pub crop: Option<RasterImage>,
}

fn image_part(img: &RasterImage, sample_id: &str) -> Result<Part, PipelineError> {
    ImagePart::from_image(img).map(Part::Image).map_err(|source| PipelineError::Imaging {
        sample_id: sample_id.to_string(),
        source,
    })
}

/// System prompt plus one user turn holding the coarse image and the question.
pub fn build_stage1_messages(
    query: &Query<'_>,
    coarse: &RasterImage,
    cfg: &PipelineConfig,
) -> Result<Vec<ChatMessage>, PipelineError> {
    cfg.templates.validate()?;
    if query.question.trim().is_empty() {
        return Err(PipelineError::Precondition {
            sample_id: query.id.into(),
            message: "empty question".into(),
        });
    }
    Ok(vec![
        ChatMessage::text(Role::System, cfg.templates.stage1_system.clone()),
        ChatMessage {
            role: Role::User,
            parts: vec![
                image_part(coarse, query.id)?,
                Part::Text {
                    text: query.question.to_string(),
                },
            ],
        },
    ])
}

/// Extends a conversation whose last turn is the policy's region turn with a
/// user turn carrying the crop.
pub fn build_stage2_messages(
    history: &[ChatMessage],
    crop: &RasterImage,
    question: &str,
    cfg: &PipelineConfig,
    sample_id: &str,
) -> Result<Vec<ChatMessage>, PipelineError> {
    if history.last().map(|m| m.role) != Some(Role::Assistant) {
        return Err(PipelineError::Precondition {
            sample_id: sample_id.into(),
            message: "stage-2 history must end with the stage-1 assistant turn".into(),
        });
    }
    let mut msgs = history.to_vec();
    msgs.push(ChatMessage {
        role: Role::User,
        parts: vec![
            image_part(crop, sample_id)?,
            Part::Text {
                text: cfg.templates.stage2_user.replace("{question}", question),
            },
        ],
    });
    Ok(msgs)
}

/// Maps a zoom box read in `coarse` pixels onto the original image.
///
/// The coarse image was produced from the (possibly edge-padded) original, so
/// the box is scaled onto the padded size and then clipped to the real image.
pub fn zoom_to_original(
    zoom: [f64; 4],
    coarse: CoordSpace,
    original: CoordSpace,
) -> Result<BBox, InvalidRegion> {
    let in_coarse = clamp_and_validate(&zoom, coarse)?;
    let padded = CoordSpace::new(
        original.width().max(imaging::PATCH),
        original.height().max(imaging::PATCH),
    )
    .expect("non-empty");
    let scaled = crate::geometry::scale_box(&in_coarse, coarse, padded)?;
    let c = scaled.coords();
    clamp_and_validate(&c.map(f64::from), original)
}

/// Prepares a crop for sending: patch-aligned crops within the crop budget go
/// as-is, anything else is resized to its budgeted patch grid.
pub fn prepare_crop(crop: &RasterImage, cfg: &PipelineConfig) -> RasterImage {
    imaging::downsample(crop, cfg.crop_constraint())
}

/// Per-run knobs that are not part of the pipeline configuration.
#[derive(Clone, Copy)]
pub struct RunOptions<'a> {
    pub rollout: Option<u32>,
    pub variant: Option<&'a str>,
    pub clock: &'a dyn Clock,
}

impl<'a> RunOptions<'a> {
    pub fn new(clock: &'a dyn Clock) -> Self {
        Self {
            rollout: None,
            variant: None,
            clock,
        }
    }
}

struct Stage1 {
    coarse: RasterImage,
    messages: Vec<ChatMessage>,
    text: String,
    parsed: StageOutput,
}

fn run_stage1<B: Backend + ?Sized>(
    query: &Query<'_>,
    cfg: &PipelineConfig,
    backend: &B,
    opts: &RunOptions<'_>,
) -> Result<Stage1, PipelineError> {
    let coarse = imaging::downsample(query.image, cfg.tokens);
    let mut messages = build_stage1_messages(query, &coarse, cfg)?;
    let ctx = CallContext::new(query.id, 1, Caller::Policy)
        .with_rollout(opts.rollout)
        .with_variant(opts.variant);
    let text = backend.complete(&ctx, &messages).map_err(|source| PipelineError::Backend {
        sample_id: query.id.into(),
        turn: 1,
        source,
    })?;
    messages.push(ChatMessage::text(Role::Assistant, text.clone()));
    let parsed = parse_output(&text);
    Ok(Stage1 {
        coarse,
        messages,
        text,
        parsed,
    })
}

fn imaging_err(sample_id: &str) -> impl FnOnce(ImagingError) -> PipelineError + '_ {
    move |source| PipelineError::Imaging {
        sample_id: sample_id.into(),
        source,
    }
}

/// Region proposal only: the stage-1 turn and the zoom box it yields in
/// original coordinates (`None` when absent or not croppable).
pub fn predict_region<B: Backend + ?Sized>(
    query: &Query<'_>,
    cfg: &PipelineConfig,
    backend: &B,
    opts: &RunOptions<'_>,
) -> Result<(StageOutput, Option<BBox>), PipelineError> {
    let s1 = run_stage1(query, cfg, backend, opts)?;
    let region = s1
        .parsed
        .first_zoom()
        .and_then(|z| zoom_to_original(z, s1.coarse.space(), query.image.space()).ok());
    Ok((s1.parsed, region))
}

/// Runs the full coarse-to-fine pipeline for one sample.
pub fn run_sample<B: Backend + ?Sized>(
    query: &Query<'_>,
    cfg: &PipelineConfig,
    backend: &B,
    opts: &RunOptions<'_>,
) -> Result<PipelineRun, PipelineError> {
    let started = opts.clock.now();
    let s1 = run_stage1(query, cfg, backend, opts)?;
    let coarse_cost = ImageCost::of(&s1.coarse).map_err(imaging_err(query.id))?;
    let mut flags = Vec::new();
    if !s1.parsed.is_well_formed() {
        flags.push(Flag::MalformedStage1);
    }

    let mut region = None;
    let mut crop_sent = None;
    let mut stage2_text = None;
    let mut final_answer = None;

    if s1.parsed.has_zoom() {
        let mapped = s1
            .parsed
            .first_zoom()
            .ok_or(InvalidRegion::WrongArity { got: 0 })
            .and_then(|z| zoom_to_original(z, s1.coarse.space(), query.image.space()));
        match mapped {
            Ok(b) => {
                let raw_crop = imaging::crop(query.image, &b).map_err(imaging_err(query.id))?;
                let sent = prepare_crop(&raw_crop, cfg);
                let msgs = build_stage2_messages(&s1.messages, &sent, query.question, cfg, query.id)?;
                let ctx = CallContext::new(query.id, 2, Caller::Policy)
                    .with_rollout(opts.rollout)
                    .with_variant(opts.variant);
                let text = backend.complete(&ctx, &msgs).map_err(|source| PipelineError::Backend {
                    sample_id: query.id.into(),
                    turn: 2,
                    source,
                })?;
                let parsed = parse_output(&text);
                if !parsed.is_well_formed() {
                    flags.push(Flag::MalformedStage2);
                }
                final_answer = parsed.answer.clone();
                region = Some(b.coords());
                crop_sent = Some(sent);
                stage2_text = Some(text);
            }
            Err(_) => {
                flags.push(Flag::InvalidRegion);
                final_answer = s1.parsed.answer.clone();
            }
        }
    } else if cfg.direct_answer_allowed && s1.parsed.answer.is_some() {
        flags.push(Flag::DirectAnswer);
        final_answer = s1.parsed.answer.clone();
    }
    if final_answer.is_none() {
        flags.push(Flag::AnswerMissing);
    }

    let crop_cost = crop_sent
        .as_ref()
        .map(ImageCost::of)
        .transpose()
        .map_err(imaging_err(query.id))?;
    let total = coarse_cost.tokens + crop_cost.map_or(0, |c| c.tokens);
    let trace = PipelineTrace {
        sample_id: query.id.into(),
        rollout: opts.rollout,
        original: [query.image.width(), query.image.height()],
        coarse: coarse_cost,
        zoom_space: ZoomSpace::Coarse,
        region,
        crop: crop_cost,
        stage1_text: s1.text,
        stage2_text,
        final_answer,
        total_vision_tokens: total,
        latency_secs: opts.clock.now() - started,
        flags,
    };
    Ok(PipelineRun { trace, crop: crop_sent })
}

/// Answers from the coarse image plus a given region, skipping region
/// proposal entirely. Used to measure what a perfect localizer would buy.
pub fn run_with_region<B: Backend + ?Sized>(
    query: &Query<'_>,
    region: &BBox,
    cfg: &PipelineConfig,
    backend: &B,
    opts: &RunOptions<'_>,
) -> Result<PipelineRun, PipelineError> {
    let started = opts.clock.now();
    let coarse = imaging::downsample(query.image, cfg.tokens);
    let coarse_cost = ImageCost::of(&coarse).map_err(imaging_err(query.id))?;
    let raw_crop = imaging::crop(query.image, region).map_err(imaging_err(query.id))?;
    let sent = prepare_crop(&raw_crop, cfg);
    let crop_cost = ImageCost::of(&sent).map_err(imaging_err(query.id))?;
    cfg.templates.validate()?;
    let messages = vec![
        ChatMessage::text(Role::System, cfg.templates.stage1_system.clone()),
        ChatMessage {
            role: Role::User,
            parts: vec![
                image_part(&coarse, query.id)?,
                image_part(&sent, query.id)?,
                Part::Text {
                    text: cfg.templates.stage2_user.replace("{question}", query.question),
                },
            ],
        },
    ];
    let ctx = CallContext::new(query.id, 2, Caller::Policy)
        .with_rollout(opts.rollout)
        .with_variant(opts.variant);
    let text = backend.complete(&ctx, &messages).map_err(|source| PipelineError::Backend {
        sample_id: query.id.into(),
        turn: 2,
        source,
    })?;
    let parsed = parse_output(&text);
    let mut flags = vec![Flag::OracleRegion];
    if !parsed.is_well_formed() {
        flags.push(Flag::MalformedStage2);
    }
    if parsed.answer.is_none() {
        flags.push(Flag::AnswerMissing);
    }
    let trace = PipelineTrace {
        sample_id: query.id.into(),
        rollout: opts.rollout,
        original: [query.image.width(), query.image.height()],
        coarse: coarse_cost,
        zoom_space: ZoomSpace::Coarse,
        region: Some(region.coords()),
        crop: Some(crop_cost),
        stage1_text: String::new(),
        stage2_text: Some(text),
        final_answer: parsed.answer,
        total_vision_tokens: coarse_cost.tokens + crop_cost.tokens,
        latency_secs: opts.clock.now() - started,
        flags,
    };
    Ok(PipelineRun { trace, crop: Some(sent) })
}

/// Coarse-only baseline: one turn on the downsampled image, no crop.
pub fn run_coarse_only<B: Backend + ?Sized>(
    query: &Query<'_>,
    cfg: &PipelineConfig,
    backend: &B,
    opts: &RunOptions<'_>,
) -> Result<PipelineRun, PipelineError> {
    let started = opts.clock.now();
    let coarse = imaging::downsample(query.image, cfg.tokens);
    let coarse_cost = ImageCost::of(&coarse).map_err(imaging_err(query.id))?;
    cfg.templates.validate()?;
    let messages = vec![
        ChatMessage::text(Role::System, cfg.templates.direct_system.clone()),
        ChatMessage {
            role: Role::User,
            parts: vec![
                image_part(&coarse, query.id)?,
                Part::Text {
                    text: query.question.to_string(),
                },
            ],
        },
    ];
    let ctx = CallContext::new(query.id, 1, Caller::Policy)
        .with_rollout(opts.rollout)
        .with_variant(opts.variant);
    let text = backend.complete(&ctx, &messages).map_err(|source| PipelineError::Backend {
        sample_id: query.id.into(),
        turn: 1,
        source,
    })?;
    let parsed = parse_output(&text);
    let mut flags = vec![Flag::DirectAnswer];
    if !parsed.is_well_formed() {
        flags.push(Flag::MalformedStage1);
    }
    if parsed.answer.is_none() {
        flags.push(Flag::AnswerMissing);
    }
    let trace = PipelineTrace {
        sample_id: query.id.into(),
        rollout: opts.rollout,
        original: [query.image.width(), query.image.height()],
        coarse: coarse_cost,
        zoom_space: ZoomSpace::Coarse,
        region: None,
        crop: None,
        stage1_text: text,
        stage2_text: None,
        final_answer: parsed.answer,
        total_vision_tokens: coarse_cost.tokens,
        latency_secs: opts.clock.now() - started,
        flags,
    };
    Ok(PipelineRun { trace, crop: None })
}
