mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use c2f_core::backends::{Backend, RemoteBackend, ScriptEntry, ScriptKey, ScriptedBackend, Caller};
use c2f_core::grpo::{build_group, write_jsonl, GroupSample, GroupSettings};
use c2f_core::harness::{
    area_ratio_stats, emit_reports, load_dataset, masked_coverage_experiment, run_benchmark, Dataset, HarnessOptions,
    ReportFormat,
};
use c2f_core::imaging::{smart_resize, token_count, PixelConstraint};
use c2f_core::pipeline::{run_sample, PipelineConfig, Query, RunOptions, SystemClock};
use c2f_core::rewards::{score_rollout, ScoreInput};
use c2f_core::Breakdown;

use crate::config::{ConfigFile, EngineConfig};

#[derive(Parser)]
#[command(name = "c2f", version, about = "Coarse-to-fine VQA engine: evaluation, rollout scoring and analyses")]
struct Cli {
    /// TOML config file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: ConfigFile,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the benchmark and write reports.
    Eval {
        /// Extra token caps to sweep, in addition to --tokens.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<u32>,
    },
    /// Build scored rollout groups and export them as JSON Lines.
    Rollout,
    /// Score recorded rollouts and print each reward breakdown.
    RewardAudit {
        /// JSON Lines of {"sample_id", "stage1_text", "stage2_text"?}.
        #[arg(long)]
        rollouts: PathBuf,
    },
    /// Histogram of ground-truth region area ratios.
    Stats,
    /// Coverage of ground truth with targets visible versus masked.
    MaskExp,
    /// Print resized dimensions and token count for an image size.
    ResizeInfo {
        #[arg(long)]
        width: u32,
        #[arg(long)]
        height: u32,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let cfg = EngineConfig::resolve(cli.overrides.over(file))?;
    match cli.command {
        Command::ResizeInfo { width, height } => {
            let (w, h) = smart_resize(width, height, cfg.pipeline.tokens);
            println!("{w}x{h} {}", token_count(w, h)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Stats => stats(&cfg),
        Command::Eval { sweep } => eval(&cfg, &sweep),
        Command::Rollout => rollout(&cfg),
        Command::RewardAudit { rollouts } => reward_audit(&cfg, &rollouts),
        Command::MaskExp => mask_exp(&cfg),
    }
}

fn dataset(cfg: &EngineConfig) -> Result<Dataset> {
    let path = cfg.dataset.as_ref().context("--dataset is required")?;
    Ok(load_dataset(path)?)
}

struct Backends {
    policy: Box<dyn Backend>,
    reward: Box<dyn Backend>,
}

fn backends(cfg: &EngineConfig) -> Result<Backends> {
    if let Some(script) = &cfg.script {
        let b = ScriptedBackend::from_jsonl(script)?;
        return Ok(Backends {
            policy: Box::new(b.clone()),
            reward: Box::new(b),
        });
    }
    Ok(Backends {
        policy: Box::new(RemoteBackend::new(cfg.policy.clone())?),
        reward: Box::new(RemoteBackend::new(cfg.reward.clone())?),
    })
}

fn write_out(cfg: &EngineConfig, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let path = cfg.out.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn json_bytes(v: &impl serde::Serialize) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

fn with_config(mut v: serde_json::Value, cfg: &EngineConfig) -> serde_json::Value {
    if let Some(obj) = v.as_object_mut() {
        obj.insert("config".into(), cfg.to_json());
    }
    v
}

fn eval(cfg: &EngineConfig, sweep: &[u32]) -> Result<ExitCode> {
    let ds = dataset(cfg)?;
    let b = backends(cfg)?;
    let clock = SystemClock::new();
    let opts = HarnessOptions {
        parallel: cfg.parallel,
        clock: &clock,
    };
    let mut caps = vec![cfg.pipeline.tokens.max_tokens()];
    for &t in sweep {
        if !caps.contains(&t) {
            caps.push(t);
        }
    }

    let mut reports = Vec::new();
    for cap in caps {
        let pipeline = PipelineConfig {
            tokens: PixelConstraint::new(cap)?,
            ..cfg.pipeline.clone()
        };
        let mut report = run_benchmark(&ds, &pipeline, b.policy.as_ref(), cfg.mode, &opts)?;
        report.metadata = with_config(report.metadata, cfg);
        println!(
            "{} tokens={} accuracy={:.4} ({}/{}) mean_total_tokens={:.1} mean_latency={:.3}s failures={}",
            report.mode,
            cap,
            report.accuracy,
            report.correct,
            report.total,
            report.mean_total_tokens,
            report.mean_latency_secs,
            report.failures
        );
        reports.push(report);
    }

    write_out(cfg, "report.json", &emit_reports(&reports, ReportFormat::Json)?)?;
    write_out(cfg, "report.csv", &emit_reports(&reports, ReportFormat::Csv)?)?;
    write_out(cfg, "plot.csv", &emit_reports(&reports, ReportFormat::PlotCsv)?)?;
    let mut traces = Vec::new();
    for r in &reports {
        for s in r.samples.iter().filter_map(|s| s.trace.as_ref()) {
            serde_json::to_writer(&mut traces, s)?;
            traces.push(b'\n');
        }
    }
    write_out(cfg, "traces.jsonl", &traces)?;
    write_out(cfg, "traces.meta.json", &json_bytes(&with_config(serde_json::json!({}), cfg)))?;

    let hard: usize = reports.iter().map(|r| r.backend_failures()).sum();
    if hard > 0 {
        eprintln!("{hard} sample(s) failed on the backend");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn rollout(cfg: &EngineConfig) -> Result<ExitCode> {
    let ds = dataset(cfg)?;
    let b = backends(cfg)?;
    let clock = SystemClock::new();
    let settings = GroupSettings {
        group_size: cfg.group_size,
        weights: &cfg.weights,
        pipeline: &cfg.pipeline,
        clock: &clock,
    };
    let mut groups = Vec::new();
    for s in &ds.samples {
        let image = s.load_image().with_context(|| format!("sample {}", s.id))?;
        let prompt = s.prompt();
        let sample = GroupSample {
            query: Query {
                id: &s.id,
                question: &prompt,
                image: &image,
            },
            gt: &s.gt_answer,
        };
        let group = build_group(&sample, &settings, b.policy.as_ref(), b.reward.as_ref())
            .with_context(|| format!("sample {}", s.id))?;
        println!(
            "{} mean={:.4} std={:.4} rewards={:?}",
            s.id,
            group.mean_reward,
            group.std_reward,
            group.rewards()
        );
        groups.push(group);
    }
    let mut buf = Vec::new();
    write_jsonl(&groups, &mut buf)?;
    write_out(cfg, "rollouts.jsonl", &buf)?;
    write_out(cfg, "rollouts.meta.json", &json_bytes(&with_config(serde_json::json!({}), cfg)))?;
    let failed = groups
        .iter()
        .flat_map(|g| &g.records)
        .filter(|r| r.flags.iter().any(|f| matches!(f, c2f_core::pipeline::Flag::PolicyBackendFailed)))
        .count();
    if failed > 0 {
        eprintln!("{failed} rollout(s) failed on the policy backend");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct AuditLine {
    sample_id: String,
    stage1_text: String,
    #[serde(default)]
    stage2_text: Option<String>,
}

fn reward_audit(cfg: &EngineConfig, rollouts: &Path) -> Result<ExitCode> {
    let ds = dataset(cfg)?;
    let b = backends(cfg)?;
    let text = fs::read_to_string(rollouts).with_context(|| format!("reading {}", rollouts.display()))?;
    let clock = SystemClock::new();
    let mut out = Vec::new();
    let stdout = std::io::stdout();
    let mut stdout = stdout.lock();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let a: AuditLine =
            serde_json::from_str(line).with_context(|| format!("{}:{}", rollouts.display(), i + 1))?;
        let s = ds
            .samples
            .iter()
            .find(|s| s.id == a.sample_id)
            .with_context(|| format!("{}:{}: unknown sample {}", rollouts.display(), i + 1, a.sample_id))?;
        let image = s.load_image()?;
        let prompt = s.prompt();
        let key = |turn| ScriptKey {
            sample_id: s.id.clone(),
            turn,
            caller: Caller::Policy,
            rollout: None,
            variant: None,
        };
        let mut entries = vec![ScriptEntry {
            key: key(1),
            response: a.stage1_text.clone(),
        }];
        if let Some(t) = &a.stage2_text {
            entries.push(ScriptEntry {
                key: key(2),
                response: t.clone(),
            });
        }
        let replay = ScriptedBackend::new(entries)?;
        let query = Query {
            id: &s.id,
            question: &prompt,
            image: &image,
        };
        let run = run_sample(&query, &cfg.pipeline, &replay, &RunOptions::new(&clock))?;
        let input = ScoreInput {
            question: &prompt,
            gt: &s.gt_answer,
            reward_system: &cfg.pipeline.templates.reward_system,
        };
        let bd: Breakdown = score_rollout(&run, &input, &cfg.weights, b.reward.as_ref())?;
        writeln!(
            stdout,
            "{} region={} box={} acc={} format={} tce={} total={} area_ratio={} flags={:?}",
            s.id,
            bd.r_region,
            bd.r_box,
            bd.r_acc,
            bd.r_format,
            bd.r_tce,
            bd.total,
            bd.area_ratio.map_or("-".to_string(), |r| format!("{r:.4}")),
            bd.flags
        )?;
        serde_json::to_writer(&mut out, &serde_json::json!({"sample_id": s.id, "breakdown": bd}))?;
        out.push(b'\n');
    }
    write_out(cfg, "reward_audit.jsonl", &out)?;
    write_out(cfg, "reward_audit.meta.json", &json_bytes(&with_config(serde_json::json!({}), cfg)))?;
    Ok(ExitCode::SUCCESS)
}

fn stats(cfg: &EngineConfig) -> Result<ExitCode> {
    let ds = dataset(cfg)?;
    let st = area_ratio_stats(&ds);
    for (i, n) in st.bins.iter().enumerate() {
        println!("[{:.1},{:.1}{} {n}", i as f64 / 10.0, (i + 1) as f64 / 10.0, if i == 9 { "]" } else { ")" });
    }
    println!("below 0.6: {:.1}%", 100.0 * st.cumulative_below(6));
    let v = with_config(serde_json::to_value(&st)?, cfg);
    write_out(cfg, "area_ratio_stats.json", &json_bytes(&v))?;
    Ok(ExitCode::SUCCESS)
}

fn mask_exp(cfg: &EngineConfig) -> Result<ExitCode> {
    let ds = dataset(cfg)?;
    if ds.samples.is_empty() {
        bail!("dataset is empty");
    }
    let b = backends(cfg)?;
    let clock = SystemClock::new();
    let opts = HarnessOptions {
        parallel: cfg.parallel,
        clock: &clock,
    };
    let mut r = masked_coverage_experiment(&ds, &cfg.pipeline, b.policy.as_ref(), &opts)?;
    r.metadata = with_config(serde_json::json!({}), cfg);
    println!("unmasked={:.4} masked={:.4} failures={}", r.unmasked_mean, r.masked_mean, r.failures);
    write_out(cfg, "masked_coverage.json", &json_bytes(&r))?;
    Ok(ExitCode::from(u8::from(r.failures > 0)))
}
