//! Dataset ingestion, benchmark runs and the analyses built on them.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::Backend;
use crate::geometry::{area_ratio, bounding_union, clamp_and_validate, coverage_score, BBox, CoordSpace};
use crate::imaging::{self, mask_region, RasterImage};
use crate::pipeline::{
    predict_region, run_coarse_only, run_sample, run_with_region, Clock, PipelineConfig, PipelineError, PipelineTrace,
    Query, RunOptions,
};
use crate::protocol::match_answer;

/// Number of equal-width area-ratio bins over `[0, 1]`.
pub const RATIO_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Schema { path: PathBuf, line: usize, message: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("unreadable images for samples: {}", ids.join(", "))]
    UnreadableImages { ids: Vec<String> },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {0} has no ground-truth boxes")]
    MissingBoxes(String),
    #[error("unknown {kind} {value:?} (expected one of: {expected})")]
    Usage {
        kind: &'static str,
        value: String,
        expected: &'static str,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

/// One line of a dataset file as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: PathBuf,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Resolved image path.
    pub image: PathBuf,
    pub question: String,
    pub gt_answer: String,
    pub options: Option<Vec<String>>,
    /// Validated boxes in original-image pixels; empty when not annotated.
    pub gt_boxes: Vec<BBox>,
    pub space: CoordSpace,
}

impl Sample {
    /// Question text with lettered options appended, as sent to models.
    pub fn prompt(&self) -> String {
        match &self.options {
            Some(opts) if !opts.is_empty() => {
                let mut s = self.question.clone();
                s.push_str("\nOptions:");
                for (i, o) in opts.iter().enumerate() {
                    let letter = char::from(b'A' + (i % 26) as u8);
                    s.push_str(&format!("\n({letter}) {o}"));
                }
                s
            }
            _ => self.question.clone(),
        }
    }

    pub fn load_image(&self) -> Result<RasterImage, imaging::ImagingError> {
        imaging::decode_file(&self.image)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub warnings: Vec<String>,
}

/// Reads a JSON-Lines dataset. Image paths resolve relative to the file.
pub fn load_dataset(path: &Path) -> Result<Dataset, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| HarnessError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(HarnessError::DuplicateId(rec.id));
        }
        records.push(rec);
    }

    let mut dataset = Dataset::default();
    let mut unreadable = Vec::new();
    for rec in records {
        let image = if rec.image.is_absolute() {
            rec.image.clone()
        } else {
            base.join(&rec.image)
        };
        let space = match imaging::probe_dimensions(&image).map(|(w, h)| CoordSpace::new(w, h)) {
            Ok(Ok(space)) => space,
            _ => {
                unreadable.push(rec.id.clone());
                continue;
            }
        };
        let mut gt_boxes = Vec::new();
        for raw in rec.gt_boxes.iter().flatten() {
            match clamp_and_validate(raw, space) {
                Ok(b) => {
                    if b.coords().iter().map(|&v| f64::from(v)).ne(raw.iter().copied()) {
                        dataset
                            .warnings
                            .push(format!("{}: gt box {raw:?} clamped to {b} in {space}", rec.id));
                    }
                    gt_boxes.push(b);
                }
                Err(e) => dataset
                    .warnings
                    .push(format!("{}: gt box {raw:?} dropped: {e}", rec.id)),
            }
        }
        dataset.samples.push(Sample {
            id: rec.id,
            image,
            question: rec.question,
            gt_answer: rec.answer,
            options: rec.options,
            gt_boxes,
            space,
        });
    }
    if !unreadable.is_empty() {
        return Err(HarnessError::UnreadableImages { ids: unreadable });
    }
    for w in &dataset.warnings {
        log::warn!("{w}");
    }
    Ok(dataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Localize on the coarse view, then answer from the crop.
    #[default]
    CoarseToFine,
    /// Skip localization and crop the annotated ground-truth region.
    OracleRegion,
    /// Answer from the coarse view alone.
    NoCrop,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::CoarseToFine => "coarse_to_fine",
            EvalMode::OracleRegion => "oracle_region",
            EvalMode::NoCrop => "no_crop",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coarse_to_fine" => Ok(EvalMode::CoarseToFine),
            "oracle_region" => Ok(EvalMode::OracleRegion),
            "no_crop" => Ok(EvalMode::NoCrop),
            _ => Err(HarnessError::Usage {
                kind: "mode",
                value: s.into(),
                expected: "coarse_to_fine, oracle_region, no_crop",
            }),
        }
    }
}

pub struct HarnessOptions<'a> {
    /// Maximum samples evaluated at once.
    pub parallel: usize,
    pub clock: &'a dyn Clock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub correct: bool,
    pub trace: Option<PipelineTrace>,
    pub coverage: Option<f64>,
    pub error: Option<String>,
    /// The error came from a model backend rather than the sample itself.
    #[serde(default)]
    pub backend_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub constraint_tokens: u32,
    pub samples: Vec<SampleResult>,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_total_tokens: f64,
    pub mean_coarse_tokens: f64,
    pub mean_crop_tokens: f64,
    pub mean_latency_secs: f64,
    pub mean_coverage: Option<f64>,
    /// Counts of predicted region area ratios in ten bins over `[0, 1]`.
    pub area_ratio_histogram: [u64; RATIO_BINS],
    pub failures: usize,
    /// Resolved configuration and methodology notes.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl EvalReport {
    /// Folds per-sample results into aggregates.
    pub fn aggregate(mode: EvalMode, constraint_tokens: u32, samples: Vec<SampleResult>) -> Self {
        let total = samples.len();
        let correct = samples.iter().filter(|s| s.correct).count();
        let traces: Vec<&PipelineTrace> = samples.iter().filter_map(|s| s.trace.as_ref()).collect();
        let mean = |f: &dyn Fn(&PipelineTrace) -> f64| -> f64 {
            if traces.is_empty() {
                0.0
            } else {
                traces.iter().map(|t| f(t)).sum::<f64>() / traces.len() as f64
            }
        };
        let coverages: Vec<f64> = samples.iter().filter_map(|s| s.coverage).collect();
        let mut hist = [0u64; RATIO_BINS];
        for t in &traces {
            if let Some(b) = t.region_box() {
                hist[ratio_bin(&b, t.original_space())] += 1;
            }
        }
        Self {
            mode,
            constraint_tokens,
            total,
            correct,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            mean_total_tokens: mean(&|t| t.total_vision_tokens as f64),
            mean_coarse_tokens: mean(&|t| t.coarse.tokens as f64),
            mean_crop_tokens: mean(&|t| t.crop_tokens() as f64),
            mean_latency_secs: mean(&|t| t.latency_secs),
            mean_coverage: if coverages.is_empty() {
                None
            } else {
                Some(coverages.iter().sum::<f64>() / coverages.len() as f64)
            },
            area_ratio_histogram: hist,
            failures: samples.iter().filter(|s| s.error.is_some()).count(),
            samples,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn backend_failures(&self) -> usize {
        self.samples.iter().filter(|s| s.backend_failure).count()
    }
}

/// Bin index for `area(b) / area(space)`, computed exactly in integers.
fn ratio_bin(b: &BBox, space: CoordSpace) -> usize {
    let bin = (b.area() as u128 * RATIO_BINS as u128 / space.area() as u128) as usize;
    bin.min(RATIO_BINS - 1)
}

fn pool(parallel: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))
}

fn failure(sample: &Sample, err: String, backend_failure: bool) -> SampleResult {
    log::warn!("{}: {err}", sample.id);
    SampleResult {
        sample_id: sample.id.clone(),
        correct: false,
        trace: None,
        coverage: None,
        error: Some(err),
        backend_failure,
    }
}

fn evaluate_one<B: Backend + ?Sized>(
    sample: &Sample,
    cfg: &PipelineConfig,
    backend: &B,
    mode: EvalMode,
    clock: &dyn Clock,
) -> SampleResult {
    let image = match sample.load_image() {
        Ok(img) => img,
        Err(e) => return failure(sample, e.to_string(), false),
    };
    let prompt = sample.prompt();
    let query = Query {
        id: &sample.id,
        question: &prompt,
        image: &image,
    };
    let opts = RunOptions::new(clock);
    let run = match mode {
        EvalMode::CoarseToFine => run_sample(&query, cfg, backend, &opts),
        EvalMode::NoCrop => run_coarse_only(&query, cfg, backend, &opts),
        EvalMode::OracleRegion => match bounding_union(&sample.gt_boxes) {
            Ok(Some(region)) => run_with_region(&query, &region, cfg, backend, &opts),
            _ => return failure(sample, format!("sample {} has no ground-truth boxes", sample.id), false),
        },
    };
    let run = match run {
        Ok(r) => r,
        Err(e) => {
            let backend_failure = matches!(e, PipelineError::Backend { .. });
            return failure(sample, e.to_string(), backend_failure);
        }
    };
    let correct = run
        .trace
        .final_answer
        .as_deref()
        .is_some_and(|a| match_answer(a, &sample.gt_answer));
    let coverage = match mode {
        EvalMode::NoCrop => None,
        _ if sample.gt_boxes.is_empty() => None,
        _ => {
            let preds: Vec<BBox> = run.trace.region_box().into_iter().collect();
            coverage_score::<f64>(&preds, &sample.gt_boxes).ok()
        }
    };
    SampleResult {
        sample_id: sample.id.clone(),
        correct,
        trace: Some(run.trace),
        coverage,
        error: None,
        backend_failure: false,
    }
}

/// Evaluates every sample. Per-sample failures count as incorrect and are
/// recorded in the report; they never abort the run.
pub fn run_benchmark<B: Backend + ?Sized>(
    dataset: &Dataset,
    cfg: &PipelineConfig,
    backend: &B,
    mode: EvalMode,
    opts: &HarnessOptions<'_>,
) -> Result<EvalReport, HarnessError> {
    if dataset.samples.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let results: Vec<SampleResult> = pool(opts.parallel)?.install(|| {
        dataset
            .samples
            .par_iter()
            .map(|s| evaluate_one(s, cfg, backend, mode, opts.clock))
            .collect()
    });
    let mut report = EvalReport::aggregate(mode, cfg.tokens.max_tokens(), results);
    report.metadata = serde_json::json!({
        "coverage_averaging": "uniform_per_sample",
        "area_ratio_histogram": "predicted region / original image, 10 bins",
    });
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedSample {
    pub sample_id: String,
    pub unmasked: f64,
    pub masked: f64,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedCoverageReport {
    pub samples: Vec<MaskedSample>,
    pub unmasked_mean: f64,
    pub masked_mean: f64,
    pub failures: usize,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Region prediction with the target visible versus blacked out.
///
/// Runs only the localization turn, once on the original image and once with
/// every ground-truth box filled black (call variant `masked`), and compares
/// mean coverage of the ground truth. Failed predictions score zero.
pub fn masked_coverage_experiment<B: Backend + ?Sized>(
    dataset: &Dataset,
    cfg: &PipelineConfig,
    backend: &B,
    opts: &HarnessOptions<'_>,
) -> Result<MaskedCoverageReport, HarnessError> {
    if dataset.samples.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    if let Some(s) = dataset.samples.iter().find(|s| s.gt_boxes.is_empty()) {
        return Err(HarnessError::MissingBoxes(s.id.clone()));
    }
    let samples: Vec<MaskedSample> = pool(opts.parallel)?.install(|| {
        dataset
            .samples
            .par_iter()
            .map(|s| masked_one(s, cfg, backend, opts.clock))
            .collect()
    });
    let n = samples.len() as f64;
    Ok(MaskedCoverageReport {
        unmasked_mean: samples.iter().map(|s| s.unmasked).sum::<f64>() / n,
        masked_mean: samples.iter().map(|s| s.masked).sum::<f64>() / n,
        failures: samples.iter().filter(|s| !s.errors.is_empty()).count(),
        samples,
        metadata: serde_json::Value::Null,
    })
}

fn masked_one<B: Backend + ?Sized>(sample: &Sample, cfg: &PipelineConfig, backend: &B, clock: &dyn Clock) -> MaskedSample {
    let mut out = MaskedSample {
        sample_id: sample.id.clone(),
        unmasked: 0.0,
        masked: 0.0,
        errors: Vec::new(),
    };
    let image = match sample.load_image() {
        Ok(img) => img,
        Err(e) => {
            out.errors.push(e.to_string());
            return out;
        }
    };
    let mut masked = image.clone();
    for b in &sample.gt_boxes {
        match mask_region(&masked, b) {
            Ok(m) => masked = m,
            Err(e) => {
                out.errors.push(e.to_string());
                return out;
            }
        }
    }
    let prompt = sample.prompt();
    for (variant, img) in [(None, &image), (Some("masked"), &masked)] {
        let query = Query {
            id: &sample.id,
            question: &prompt,
            image: img,
        };
        let opts = RunOptions {
            rollout: None,
            variant,
            clock,
        };
        let score = match predict_region(&query, cfg, backend, &opts) {
            Ok((_, region)) => {
                let preds: Vec<BBox> = region.into_iter().collect();
                coverage_score::<f64>(&preds, &sample.gt_boxes).unwrap_or(0.0)
            }
            Err(e) => {
                out.errors.push(e.to_string());
                0.0
            }
        };
        if variant.is_some() {
            out.masked = score;
        } else {
            out.unmasked = score;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRatioStats {
    pub bins: [u64; RATIO_BINS],
    pub contributing: u64,
    /// Samples without ground-truth boxes.
    pub skipped: Vec<String>,
    /// How multi-box samples are reduced to one ratio.
    pub method: String,
}

impl AreaRatioStats {
    /// Fraction of contributing samples that fall in bins `0..bin`.
    pub fn cumulative_below(&self, bin: usize) -> f64 {
        if self.contributing == 0 {
            return 0.0;
        }
        self.bins[..bin.min(RATIO_BINS)].iter().sum::<u64>() as f64 / self.contributing as f64
    }
}

/// Histogram of ground-truth region size relative to the image.
///
/// Bins are `[0, 0.1), ..., [0.9, 1.0]`. Samples with several boxes use the
/// bounding rectangle of their union.
pub fn area_ratio_stats(dataset: &Dataset) -> AreaRatioStats {
    let mut stats = AreaRatioStats {
        bins: [0; RATIO_BINS],
        contributing: 0,
        skipped: Vec::new(),
        method: "union_bounding_rect".into(),
    };
    for s in &dataset.samples {
        match bounding_union(&s.gt_boxes) {
            Ok(Some(u)) => {
                stats.bins[ratio_bin(&u, s.space)] += 1;
                stats.contributing += 1;
            }
            _ => {
                log::warn!("{}: no ground-truth boxes, skipped in area-ratio stats", s.id);
                stats.skipped.push(s.id.clone());
            }
        }
    }
    stats
}

/// Exact area ratio of a sample's union box, for reporting.
pub fn union_area_ratio(sample: &Sample) -> Option<f64> {
    let u = bounding_union(&sample.gt_boxes).ok()??;
    area_ratio::<f64>(&u, sample.space).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    PlotCsv,
}

impl FromStr for ReportFormat {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "plot-csv" | "plot_csv" => Ok(ReportFormat::PlotCsv),
            _ => Err(HarnessError::Usage {
                kind: "report format",
                value: s.into(),
                expected: "json, csv, plot-csv",
            }),
        }
    }
}

/// Columns of the flat aggregate CSV.
pub const CSV_HEADER: &str = "mode,constraint_tokens,samples,correct,accuracy,total_tokens_mean,\
coarse_tokens_mean,crop_tokens_mean,latency_mean_secs,coverage_mean,failures";

/// Columns of the token-versus-accuracy CSV.
pub const PLOT_CSV_HEADER: &str = "constraint_tokens,total_tokens_mean,accuracy";

fn csv_row(r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.mode,
        r.constraint_tokens,
        r.total,
        r.correct,
        r.accuracy,
        r.mean_total_tokens,
        r.mean_coarse_tokens,
        r.mean_crop_tokens,
        r.mean_latency_secs,
        r.mean_coverage.map(|c| c.to_string()).unwrap_or_default(),
        r.failures
    )
}

/// Serializes reports. JSON holds everything (one report as an object,
/// several as an array); the CSV formats carry one row per non-empty report.
pub fn emit_reports(reports: &[EvalReport], format: ReportFormat) -> Result<Vec<u8>, HarnessError> {
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            let v = match reports {
                [one] => serde_json::to_string_pretty(one),
                many => serde_json::to_string_pretty(many),
            };
            out = v.expect("reports serialize");
            out.push('\n');
        }
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in reports.iter().filter(|r| r.total > 0) {
                out.push_str(&csv_row(r));
                out.push('\n');
            }
        }
        ReportFormat::PlotCsv => {
            out.push_str(PLOT_CSV_HEADER);
            out.push('\n');
            for r in reports.iter().filter(|r| r.total > 0) {
                out.push_str(&format!("{},{},{}\n", r.constraint_tokens, r.mean_total_tokens, r.accuracy));
            }
        }
    }
    Ok(out.into_bytes())
}

pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<Vec<u8>, HarnessError> {
    emit_reports(std::slice::from_ref(report), format)
}
