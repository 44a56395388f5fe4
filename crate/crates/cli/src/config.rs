//! Engine configuration: a TOML file whose keys the command-line flags mirror.
//!
//! Precedence is flag, then file, then built-in default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use c2f_core::backends::BackendConfig;
use c2f_core::harness::EvalMode;
use c2f_core::imaging::PixelConstraint;
use c2f_core::pipeline::{PipelineConfig, PromptTemplates};
use c2f_core::Weights;
use serde::{Deserialize, Serialize};

/// Every key the config file accepts. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Dataset file (JSON Lines).
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Vision-token cap for the coarse view.
    #[arg(long, global = true)]
    pub tokens: Option<u32>,
    /// Optional vision-token cap for crops.
    #[arg(long, global = true)]
    pub crop_tokens: Option<u32>,
    /// Largest crop area ratio that still earns the box reward.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Weight of the region-verification reward.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Weight of the box-size reward.
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Stabilizer added to the group standard deviation.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Rollouts per sample.
    #[arg(long, global = true)]
    pub group_size: Option<usize>,
    /// coarse_to_fine, oracle_region or no_crop.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Samples evaluated concurrently.
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
    /// Policy model endpoint (OpenAI-compatible base URL).
    #[arg(long, global = true)]
    pub backend_url: Option<String>,
    /// Reward model endpoint (OpenAI-compatible base URL).
    #[arg(long, global = true)]
    pub reward_backend_url: Option<String>,
    /// Policy sampling temperature.
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Scripted-response file; replaces both remote backends when set.
    #[arg(long, global = true)]
    pub script: Option<PathBuf>,
    /// Accept an answer given without a zoom in the first turn.
    #[arg(long, global = true)]
    pub direct_answer_allowed: Option<bool>,
    /// Remaining policy backend settings.
    #[arg(skip)]
    pub policy: Option<BackendConfig>,
    /// Remaining reward backend settings.
    #[arg(skip)]
    pub reward: Option<BackendConfig>,
    #[arg(skip)]
    pub templates: Option<PromptTemplates>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Fills every unset key of `self` from `base`.
    pub fn over(self, base: ConfigFile) -> ConfigFile {
        macro_rules! pick {
            ($($f:ident),*) => { ConfigFile { $($f: self.$f.or(base.$f)),* } };
        }
        pick!(
            dataset, out, tokens, crop_tokens, gamma, alpha, beta, epsilon, group_size, mode, parallel,
            backend_url, reward_backend_url, temperature, script, direct_answer_allowed, policy, reward,
            templates
        )
    }
}

/// Fully resolved, validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineConfig {
    pub pipeline: PipelineConfig,
    pub weights: Weights,
    pub group_size: usize,
    pub mode: EvalMode,
    pub parallel: usize,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub script: Option<PathBuf>,
    pub policy: BackendConfig,
    pub reward: BackendConfig,
}

impl EngineConfig {
    pub fn resolve(file: ConfigFile) -> Result<Self> {
        let d = Weights::default();
        let weights = Weights::from_reals(
            file.alpha.unwrap_or(d.alpha),
            file.beta.unwrap_or(d.beta),
            file.gamma.unwrap_or(d.gamma),
            file.epsilon.unwrap_or(d.epsilon),
        )?;
        let tokens = PixelConstraint::new(file.tokens.unwrap_or(640))?;
        let crop_tokens = file.crop_tokens.map(PixelConstraint::new).transpose()?;
        let pipeline = PipelineConfig {
            tokens,
            crop_tokens,
            direct_answer_allowed: file.direct_answer_allowed.unwrap_or(true),
            templates: file.templates.unwrap_or_default(),
        };
        pipeline.validate()?;

        let group_size = file.group_size.unwrap_or(8);
        if group_size < 2 {
            bail!("group_size must be at least 2, got {group_size}");
        }
        let parallel = file.parallel.unwrap_or(4);
        if parallel == 0 {
            bail!("parallel must be at least 1");
        }
        let mode = file.mode.as_deref().unwrap_or("coarse_to_fine").parse::<EvalMode>()?;

        let mut policy = file.policy.unwrap_or_default();
        if let Some(url) = file.backend_url {
            policy.endpoint = url;
        }
        if let Some(t) = file.temperature {
            policy.temperature = t;
        }
        policy.validate().context("policy backend")?;
        let mut reward = file.reward.unwrap_or_else(|| BackendConfig {
            model: "reward".into(),
            ..Default::default()
        });
        if let Some(url) = file.reward_backend_url {
            reward.endpoint = url;
        }
        reward.validate().context("reward backend")?;

        if let Some(p) = &file.dataset {
            if !p.exists() {
                bail!("dataset {} does not exist", p.display());
            }
        }
        if let Some(p) = &file.script {
            if !p.exists() {
                bail!("script {} does not exist", p.display());
            }
        }
        Ok(Self {
            pipeline,
            weights,
            group_size,
            mode,
            parallel,
            dataset: file.dataset,
            out: file.out.unwrap_or_else(|| PathBuf::from("out")),
            script: file.script,
            policy,
            reward,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
