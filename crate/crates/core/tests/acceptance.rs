//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.
//!
//! Criterion 10 talks to a live model endpoint and only runs when
//! `C2F_LIVE_ENDPOINT` and `C2F_LIVE_DATASET` are set.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use c2f_core::backends::{BackendConfig, Caller, RecordingBackend, RemoteBackend};
use c2f_core::geometry::{area_ratio, coverage_score, BBox, CoordSpace};
use c2f_core::grpo::group_advantages;
use c2f_core::harness::{
    area_ratio_stats, load_dataset, masked_coverage_experiment, run_benchmark, EvalMode, HarnessOptions,
};
use c2f_core::imaging::{crop, smart_resize, token_count, PixelConstraint, PATCH};
use c2f_core::pipeline::{run_sample, Flag, FrozenClock, PipelineConfig, Query, RunOptions};
use c2f_core::protocol::{format_reward, parse_output, StageOutput};
use c2f_core::rewards::{box_reward, score_rollout, RewardBreakdown, ScoreInput};
use c2f_core::{Exact, ExactWeights, Weights};
use common::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(elapsed: Duration, limit_secs: f64) -> Result<(), String> {
    if elapsed.as_secs_f64() < limit_secs {
        Ok(())
    } else {
        Err(format!("took {:.2}s, limit {limit_secs}s", elapsed.as_secs_f64()))
    }
}

// ---------------------------------------------------------------------------
// 1. Reward arithmetic

fn reward_matrix() -> Outcome {
    let started = Instant::now();
    let image = pattern(112, 112);
    let cfg = PipelineConfig::with_tokens(640).unwrap();
    let question = "What color is the sign?";
    let ew = ExactWeights::default();
    let fw = Weights::default();
    let mut max_total = Exact::from_integer(0);
    let mut cases = 0;

    for i in 0..16u8 {
        let (region, boxr, acc, fmt) = (i & 1, (i >> 1) & 1, (i >> 2) & 1, (i >> 3) & 1);
        let id = format!("valid{i}");
        let zoom = if boxr == 1 { "[0, 0, 56, 56]" } else { "[0, 0, 112, 84]" };
        let stage1 = if fmt == 1 {
            format!("<think>find the sign</think><zoom>{zoom}</zoom>")
        } else {
            format!("<zoom>{zoom}</zoom>")
        };
        let stage2 = format!("<think>read it</think><answer>{}</answer>", if acc == 1 { "Red" } else { "blue" });
        let judge = format!("<answer>{}</answer>", if region == 1 { "red" } else { "green" });
        let backend = scripted(vec![policy(&id, 1, &stage1), policy(&id, 2, &stage2), reward(&id, &judge)]);
        let query = Query {
            id: &id,
            question,
            image: &image,
        };
        let run = run_sample(&query, &cfg, &backend, &RunOptions::new(&FrozenClock)).map_err(|e| e.to_string())?;
        let input = ScoreInput {
            question,
            gt: "red",
            reward_system: &cfg.templates.reward_system,
        };
        let exact: RewardBreakdown<Exact> = score_rollout(&run, &input, &ew, &backend).map_err(|e| e.to_string())?;
        let float: RewardBreakdown<f64> = score_rollout(&run, &input, &fw, &backend).map_err(|e| e.to_string())?;

        let got = (exact.r_region, exact.r_box, exact.r_acc, exact.r_format);
        ensure!(got == (region, boxr, acc, fmt), "{id}: components {got:?}");
        let expect_tce = Exact::from_integer(region.into()) + Exact::new(boxr.into(), 2);
        let expect_total = expect_tce + Exact::from_integer((acc + fmt).into());
        ensure!(exact.r_tce == expect_tce, "{id}: r_tce {}", exact.r_tce);
        ensure!(exact.total == expect_total, "{id}: total {} != {expect_total}", exact.total);
        ensure!(
            float.total == *expect_total.numer() as f64 / *expect_total.denom() as f64,
            "{id}: f64 total {}",
            float.total
        );
        ensure!(exact.region_valid, "{id}: region should be valid");
        if exact.total > max_total {
            max_total = exact.total;
        }
        cases += 1;
    }

    let payloads = ["[60, 10, 60, 90]", "[10, 60, 90, 60]", "[90, 90, 10, 10]", "[1, 2, 3]"];
    for j in 0..16u8 {
        let (kind, judge_right, think) = (usize::from(j & 3), (j >> 2) & 1, (j >> 3) & 1);
        let id = format!("invalid{j}");
        let stage1 = if think == 1 {
            format!("<think>hm</think><zoom>{}</zoom>", payloads[kind])
        } else {
            format!("<zoom>{}</zoom>", payloads[kind])
        };
        let judge = if judge_right == 1 { "red" } else { "green" };
        let backend = scripted(vec![
            policy(&id, 1, &stage1),
            policy(&id, 2, "<think>x</think><answer>red</answer>"),
            reward(&id, judge),
        ]);
        let query = Query {
            id: &id,
            question,
            image: &image,
        };
        let run = run_sample(&query, &cfg, &backend, &RunOptions::new(&FrozenClock)).map_err(|e| e.to_string())?;
        ensure!(run.trace.has_flag(&Flag::InvalidRegion), "{id}: not flagged invalid");
        let input = ScoreInput {
            question,
            gt: "red",
            reward_system: &cfg.templates.reward_system,
        };
        let b: RewardBreakdown<Exact> = score_rollout(&run, &input, &ew, &backend).map_err(|e| e.to_string())?;
        let zero = Exact::from_integer(0);
        ensure!(
            (b.r_region, b.r_box, b.r_acc, b.r_format, b.r_tce, b.total, b.region_valid) == (0, 0, 0, 0, zero, zero, false),
            "{id}: invalid crop not zeroed: {b:?}"
        );
        cases += 1;
    }

    ensure!(cases == 32, "ran {cases} cases");
    ensure!(max_total == Exact::new(7, 2), "maximum total {max_total}");
    within(started.elapsed(), 1.0)?;
    Ok(format!("32 cases exact, max total {max_total}"))
}

// ---------------------------------------------------------------------------
// 2. Box threshold boundary

fn box_boundary() -> Outcome {
    let s = space(10_000, 1);
    let mut got = Vec::new();
    for x2 in [5999, 6000, 6001] {
        let b = bbox([0, 0, x2, 1], s);
        let exact = box_reward(&b, s, &ExactWeights::default()).map_err(|e| e.to_string())?;
        let float = box_reward(&b, s, &Weights::default()).map_err(|e| e.to_string())?;
        let ratio: Exact = area_ratio(&b, s).map_err(|e| e.to_string())?;
        ensure!(ratio == Exact::new(x2.into(), 10_000), "ratio {ratio}");
        ensure!(exact == float, "exact {exact} vs f64 {float} at {x2}");
        got.push(exact);
    }
    ensure!(got == [1, 1, 0], "rewards {got:?}");
    Ok("ratios 0.5999/0.6/0.6001 -> 1/1/0".into())
}

// ---------------------------------------------------------------------------
// 3. Group advantages

/// Textbook two-pass computation, kept deliberately naive.
fn brute_advantages(r: &[f64], eps: f64) -> Vec<f64> {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    r.iter().map(|x| (x - mean) / (eps + sd)).collect()
}

fn grpo_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x5eed_0003);
    let eps = 1e-4;
    let (mut worst_oracle, mut worst_sum, mut worst_shift) = (0f64, 0f64, 0f64);
    for k in 0..1000 {
        let g = rng.gen_range(2..=16usize);
        // alternate continuous rewards and the half-integer lattice real totals live on
        let rewards: Vec<f64> = if k % 2 == 0 {
            (0..g).map(|_| rng.gen_range(0.0..=3.5)).collect()
        } else {
            (0..g).map(|_| f64::from(rng.gen_range(0..=7u8)) / 2.0).collect()
        };
        let adv = group_advantages(&rewards, eps).map_err(|e| e.to_string())?;
        let oracle = brute_advantages(&rewards, eps);
        for (a, o) in adv.iter().zip(&oracle) {
            worst_oracle = worst_oracle.max((a - o).abs());
        }
        let sum: f64 = adv.iter().sum();
        ensure!(sum.abs() <= g as f64 * 1e-9, "group {k}: advantages sum to {sum}");
        worst_sum = worst_sum.max(sum.abs());

        if k % 2 == 1 {
            let shift = f64::from(rng.gen_range(-8..=8i8)) / 2.0;
            let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            let adv2 = group_advantages(&shifted, eps).map_err(|e| e.to_string())?;
            for (a, b) in adv.iter().zip(&adv2) {
                worst_shift = worst_shift.max((a - b).abs());
            }
        }
    }
    ensure!(worst_oracle <= 1e-9, "oracle deviation {worst_oracle:e}");
    ensure!(worst_shift <= 1e-12, "shift deviation {worst_shift:e}");

    for k in 0..100 {
        let g = rng.gen_range(2..=16usize);
        let v: f64 = if k == 0 { 0.0 } else { rng.gen_range(-10.0..10.0) };
        let adv = group_advantages(&vec![v; g], eps).map_err(|e| e.to_string())?;
        ensure!(adv.iter().all(|&a| a == 0.0), "constant group {v} gave {adv:?}");
    }
    within(started.elapsed(), 5.0)?;
    Ok(format!(
        "1000 groups, oracle max dev {worst_oracle:.1e}, max |sum| {worst_sum:.1e}, shift max dev {worst_shift:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 4. Resize and token budget

fn resize_budget() -> Outcome {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x5eed_0004);
    let budgets = [320u32, 640, 1280, 16384];
    let constraints: Vec<PixelConstraint> = budgets.iter().map(|&n| PixelConstraint::new(n).unwrap()).collect();
    for _ in 0..500 {
        let (w, h) = (rng.gen_range(28..=8000u32), rng.gen_range(28..=8000u32));
        let mut prev_tokens = 0;
        for (&n, &c) in budgets.iter().zip(&constraints) {
            let (rw, rh) = smart_resize(w, h, c);
            ensure!(rw % PATCH == 0 && rh % PATCH == 0, "{w}x{h}@{n}: {rw}x{rh} not patch-aligned");
            ensure!(u64::from(rw) * u64::from(rh) <= u64::from(n) * 784, "{w}x{h}@{n}: over pixel budget");
            let tokens = token_count(rw, rh).map_err(|e| e.to_string())?;
            ensure!(tokens <= u64::from(n), "{w}x{h}@{n}: {tokens} tokens");
            ensure!(rw <= w && rh <= h, "{w}x{h}@{n}: upscaled to {rw}x{rh}");
            let (a, a2) = (f64::from(w) / f64::from(h), f64::from(rw) / f64::from(rh));
            let bound = f64::from(PATCH) / f64::from(rh) * (a + 1.0);
            ensure!((a2 - a).abs() <= bound, "{w}x{h}@{n}: aspect {a2} vs {a}, bound {bound}");
            ensure!(tokens >= prev_tokens, "{w}x{h}: tokens decrease as the budget grows");
            prev_tokens = tokens;
        }
    }
    let (rw, rh) = smart_resize(4000, 3000, constraints[1]);
    let tokens = token_count(rw, rh).map_err(|e| e.to_string())?;
    ensure!((rw, rh, tokens) == (812, 588, 609), "worked example gave {rw}x{rh}, {tokens}");
    within(started.elapsed(), 1.0)?;
    Ok("2000 resize checks; 4000x3000@640 -> 812x588, 609 tokens".into())
}

// ---------------------------------------------------------------------------
// 5. Coverage score

fn random_box(rng: &mut StdRng, s: CoordSpace) -> BBox {
    let x1 = rng.gen_range(0..s.width());
    let y1 = rng.gen_range(0..s.height());
    let x2 = rng.gen_range(x1 + 1..=s.width());
    let y2 = rng.gen_range(y1 + 1..=s.height());
    bbox([x1, y1, x2, y2].map(i64::from), s)
}

fn exact_oracle(preds: &[BBox], gts: &[BBox]) -> Exact {
    let mut total = Exact::from_integer(0);
    for g in gts {
        let [gx1, gy1, gx2, gy2] = g.coords().map(i128::from);
        let best = preds
            .iter()
            .map(|p| {
                let [px1, py1, px2, py2] = p.coords().map(i128::from);
                let w = (gx2.min(px2) - gx1.max(px1)).max(0);
                let h = (gy2.min(py2) - gy1.max(py1)).max(0);
                w * h
            })
            .max()
            .unwrap_or(0);
        total += Exact::new(best, (gx2 - gx1) * (gy2 - gy1));
    }
    total / Exact::from_integer(gts.len() as i128)
}

fn monte_carlo(preds: &[BBox], gts: &[BBox], rng: &mut StdRng, draws: u32) -> f64 {
    let mut total = 0.0;
    for g in gts {
        let mut hits = vec![0u32; preds.len()];
        for _ in 0..draws {
            let x = rng.gen_range(g.x1()..g.x2());
            let y = rng.gen_range(g.y1()..g.y2());
            for (h, p) in hits.iter_mut().zip(preds) {
                *h += u32::from(p.contains_pixel(x, y));
            }
        }
        total += f64::from(hits.into_iter().max().unwrap_or(0)) / f64::from(draws);
    }
    total / gts.len() as f64
}

fn to_f64(r: Exact) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn coverage_oracles() -> Outcome {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x5eed_0005);
    let (mut worst_exact, mut worst_mc) = (0f64, 0f64);
    let mut pixels_sampled = 0u64;
    for k in 0..200 {
        let s = space(rng.gen_range(20..=200), rng.gen_range(20..=200));
        let gts: Vec<BBox> = (0..rng.gen_range(1..=3)).map(|_| random_box(&mut rng, s)).collect();
        let n_preds = if k % 25 == 0 { 0 } else { rng.gen_range(1..=3) };
        let preds: Vec<BBox> = (0..n_preds).map(|_| random_box(&mut rng, s)).collect();
        let oracle = exact_oracle(&preds, &gts);
        let exact: Exact = coverage_score(&preds, &gts).map_err(|e| e.to_string())?;
        ensure!(exact == oracle, "set {k}: exact {exact} vs oracle {oracle}");
        let float: f64 = coverage_score(&preds, &gts).map_err(|e| e.to_string())?;
        worst_exact = worst_exact.max((float - to_f64(oracle)).abs());
        let draws = 40_000;
        let mc = monte_carlo(&preds, &gts, &mut rng, draws);
        pixels_sampled += u64::from(draws) * gts.len() as u64;
        worst_mc = worst_mc.max((float - mc).abs());
        ensure!((0.0..=1.0).contains(&float), "set {k}: score {float} outside [0, 1]");
    }
    ensure!(worst_exact <= 1e-12, "rational oracle deviation {worst_exact:e}");
    ensure!(worst_mc <= 1e-2, "Monte-Carlo deviation {worst_mc}");

    for k in 0..1000 {
        let s = space(rng.gen_range(10..=300), rng.gen_range(10..=300));
        let gts: Vec<BBox> = (0..rng.gen_range(1..=3)).map(|_| random_box(&mut rng, s)).collect();
        let mut preds: Vec<BBox> = (0..rng.gen_range(1..=3)).map(|_| random_box(&mut rng, s)).collect();
        let before: Exact = coverage_score(&preds, &gts).map_err(|e| e.to_string())?;
        let i = rng.gen_range(0..preds.len());
        let p = preds[i];
        let grown = [
            rng.gen_range(0..=p.x1()),
            rng.gen_range(0..=p.y1()),
            rng.gen_range(p.x2()..=s.width()),
            rng.gen_range(p.y2()..=s.height()),
        ];
        preds[i] = bbox(grown.map(i64::from), s);
        ensure!(preds[i].contains(&p), "perturbation {k} is not a superset");
        let after: Exact = coverage_score(&preds, &gts).map_err(|e| e.to_string())?;
        ensure!(after >= before, "perturbation {k}: {before} -> {after}");
    }
    within(started.elapsed(), 30.0)?;
    Ok(format!(
        "200 sets: rational max dev {worst_exact:.1e}, Monte-Carlo max dev {worst_mc:.4} ({pixels_sampled} pixels); 1000 enlargements monotone"
    ))
}

// ---------------------------------------------------------------------------
// 6. Protocol

fn random_text(rng: &mut StdRng, min: usize, max: usize) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ABCDEFGHIJ0123456789.,;:!?()-'\n";
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| char::from(ALPHABET[rng.gen_range(0..ALPHABET.len())])).collect()
}

fn coord(rng: &mut StdRng) -> f64 {
    let whole = f64::from(rng.gen_range(0..4000u32));
    match rng.gen_range(0..3) {
        0 => whole,
        1 => whole + 0.5,
        _ => whole + 0.25,
    }
}

/// `(region turn, answer turn, expected format reward)`.
const FORMAT_FIXTURE: &[(&str, Option<&str>, u8)] = &[
    ("<think>a</think><zoom>[1, 2, 3, 4]</zoom>", Some("<think>b</think><answer>A</answer>"), 1),
    ("<think>a</think><answer>A</answer>", None, 1),
    ("<think>a</think><zoom>[1,2,3,4]</zoom>", None, 1),
    ("<zoom>[1,2,3,4]</zoom>", Some("<think>b</think><answer>A</answer>"), 0),
    ("<think>a</think><zoom>[1,2,3,4]</zoom>", Some("<think>b</think> A"), 0),
    ("<think>a</think><answer>A</answer>", Some("<think>b</think><answer>A</answer>"), 0),
    ("<think>a<answer>A</answer>", None, 0),
    ("<think>a</think><zoom>[1,2,3]</zoom>", Some("<think>b</think><answer>A</answer>"), 0),
    ("<answer>A</answer><think>a</think>", None, 0),
    ("<think>a</think>", None, 0),
    ("<think>a</think></zoom>[1,2,3,4]", Some("<think>b</think><answer>A</answer>"), 0),
    ("<think>a</think><zoom>[1,2,3,4]", Some("<think>b</think><answer>A</answer>"), 0),
    ("<think>a</think><zoom>[1,2,3,4]</zoom>", Some("<think>b</think><answer>A"), 0),
    ("<think>a</think><zoom>[1,2,3,4]</zoom>", Some("<answer>A</answer>"), 0),
    ("<think>a</think><zoom>[1,2,3,4]</zoom><zoom>[5,6,7,8]</zoom>", Some("<think>b</think><answer>A</answer>"), 1),
    ("Sure. <think>a</think> <zoom>[0,0,5,5]</zoom> done", Some("<think>b</think><answer>A</answer>"), 1),
    ("<think>a</think><zoom>[0.5, 1e1, 30, 40.25]</zoom>", Some("<think>b</think><answer>A</answer>"), 1),
    ("<think>a</think><zoom>[1,2,3,4,5]</zoom>", Some("<think>b</think><answer>A</answer>"), 0),
    ("<think>a</think><zoom>(1,2,3,4)</zoom>", Some("<think>b</think><answer>A</answer>"), 0),
    ("<think>a</think><zoom>[\"1\",2,3,4]</zoom>", Some("<think>b</think><answer>A</answer>"), 0),
    ("<think>a</think><zoom>[1,2,3,4]</zoom>", Some("<think>b</think><answer>A</answer><answer>B</answer>"), 1),
    ("<think>a</think><think>b</think><zoom>[1,2,3,4]</zoom>", Some("<think>b</think><answer>A</answer>"), 1),
    ("<think>a</think><zoom><think>x</think></zoom>", Some("<think>b</think><answer>A</answer>"), 0),
    ("<think>a</think><zoom>[1,2,3,4]</zoom><answer>A</answer>", Some("<think>b</think><answer>A</answer>"), 1),
    ("<think>a</think><zoom>[1,2,3,4]</zoom>", Some("<think>b</think><zoom>[1,2,3,4]</zoom>"), 0),
    ("<think>a</think><zoom>[1,2,3,4]</zoom>", Some("<think>b</think><zoom>[1,2,3,4]</zoom><answer>C</answer>"), 1),
    ("", None, 0),
    ("", Some("<think>b</think><answer>A</answer>"), 0),
    ("<THINK>a</THINK><zoom>[1,2,3,4]</zoom>", Some("<think>b</think><answer>A</answer>"), 0),
    ("<think>a</think><zoom>[1,2,3,4]</zoom>", Some(""), 0),
    ("<think></think><answer>A</answer>", None, 1),
    ("<think>a</think><zoom>[]</zoom>", Some("<think>b</think><answer>A</answer>"), 0),
    ("<think>a</think><zoom>[NaN,1,2,3]</zoom>", Some("<think>b</think><answer>A</answer>"), 0),
    ("<think>a</think></think><answer>A</answer>", None, 0),
    ("<think>a</think><answer>A</answer></answer>", None, 0),
    ("<think>a</think><answer>A<zoom>[1,2,3,4]</zoom></answer>", None, 0),
    ("<think>a < b</think><answer>A</answer>", None, 1),
    ("<think>a</think>\n<zoom> [ 10 , 20 , 30 , 40 ] </zoom>", Some("<think>b</think><answer>A</answer>"), 1),
    ("<think>a</think><zoom>[1,2,3,4]</zoom>", Some("<think>b</think><answer>A</answer> trailing"), 1),
    ("<think>a</think><zoom>[1,2,3,4]</zoom>", Some("<think>b<answer>A</answer></think>"), 0),
];

fn protocol() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed_0006);
    for k in 0..100 {
        let thinking = random_text(&mut rng, 0, 60);
        let zooms: Vec<[f64; 4]> = (0..rng.gen_range(0..=2))
            .map(|_| [coord(&mut rng), coord(&mut rng), coord(&mut rng), coord(&mut rng)])
            .collect();
        let answer = if zooms.is_empty() || rng.gen_bool(0.5) {
            Some(format!("x{}", random_text(&mut rng, 0, 20).trim()))
        } else {
            None
        };
        let out = StageOutput::compose(&thinking, zooms.clone(), answer.as_deref());
        ensure!(out.is_well_formed(), "case {k}: generated output not well-formed: {:?}", out.issues);
        let text = out.emit();
        ensure!(text == out.raw, "case {k}: emit differs from composed text");
        let back = parse_output(&text);
        ensure!(back == out, "case {k}: round-trip changed the output");
        let coords: Vec<[f64; 4]> = back.zoom.iter().filter_map(|z| z.coords).collect();
        ensure!(coords == zooms, "case {k}: zoom coordinates changed");
        ensure!(back.answer == answer, "case {k}: answer changed");
    }

    ensure!(FORMAT_FIXTURE.len() == 40, "fixture has {} cases", FORMAT_FIXTURE.len());
    for (i, (region, answer, expected)) in FORMAT_FIXTURE.iter().enumerate() {
        let r = parse_output(region);
        let a = answer.map(parse_output);
        let got = format_reward(&r, a.as_ref());
        ensure!(got == *expected, "fixture {i}: {region:?} / {answer:?} scored {got}, expected {expected}");
    }
    Ok("100 round-trips; 40 labeled format cases".into())
}

// ---------------------------------------------------------------------------
// 7. Determinism and token accounting

fn determinism() -> Outcome {
    let started = Instant::now();
    let cfg = PipelineConfig::with_tokens(640).unwrap();
    let fixtures = [
        ("zoom", pattern(1000, 750), "<think>top left</think><zoom>[10, 20, 300, 250]</zoom>"),
        ("direct", pattern(300, 200), "<think>obvious</think><answer>B</answer>"),
        ("invalid", pattern(640, 480), "<think>hm</think><zoom>[50, 50, 50, 90]</zoom>"),
        ("tiny", pattern(50, 20), "<think>all of it</think><zoom>[0, 0, 28, 28]</zoom>"),
    ];
    let mut checked_calls = 0;
    for (id, image, stage1) in &fixtures {
        let backend = RecordingBackend::new(scripted(vec![
            policy(id, 1, stage1),
            policy(id, 2, "<think>seen</think><answer>B</answer>"),
        ]));
        let query = Query {
            id,
            question: "Which option?",
            image,
        };
        let mut first: Option<Vec<u8>> = None;
        for rep in 0..10 {
            backend.clear();
            let run = run_sample(&query, &cfg, &backend, &RunOptions::new(&FrozenClock)).map_err(|e| e.to_string())?;
            let bytes = serde_json::to_vec(&run.trace).map_err(|e| e.to_string())?;
            match &first {
                None => first = Some(bytes),
                Some(f) => ensure!(*f == bytes, "{id}: trace differs on repetition {rep}"),
            }

            // tokens of every image actually sent, each counted once
            let calls = backend.calls();
            let mut sent = 0;
            for call in &calls {
                let new_turn = call.messages.last().expect("non-empty conversation");
                for img in message_images(std::slice::from_ref(new_turn)) {
                    sent += token_count(img.width(), img.height()).map_err(|e| e.to_string())?;
                }
                checked_calls += 1;
            }
            ensure!(
                run.trace.total_vision_tokens == sent,
                "{id}: trace says {} tokens, backend received {sent}",
                run.trace.total_vision_tokens
            );
            let expect_calls = if run.trace.region.is_some() { 2 } else { 1 };
            ensure!(calls.len() == expect_calls, "{id}: {} policy calls", calls.len());
        }
    }
    within(started.elapsed(), 10.0)?;
    Ok(format!("4 fixtures x 10 repetitions byte-identical; {checked_calls} calls token-audited"))
}

// ---------------------------------------------------------------------------
// 8. Harness modes and the masking experiment

fn harness_modes() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let clock = FrozenClock;
    let opts = HarnessOptions {
        parallel: 2,
        clock: &clock,
    };
    let cfg = PipelineConfig::with_tokens(640).unwrap();

    // oracle region and no-crop
    let img = pattern(336, 224);
    let s = img.space();
    let path = write_png(dir.path(), "a.png", &img);
    let gt = [28, 28, 112, 84];
    let ds = dataset(vec![
        sample("o1", path.clone(), s, "A", &[gt]),
        sample("o2", path.clone(), s, "B", &[[0, 0, 28, 28], [56, 56, 84, 112]]),
    ]);
    let backend = RecordingBackend::new(scripted(vec![
        policy("o1", 2, "<think>x</think><answer>A</answer>"),
        policy("o2", 2, "<think>x</think><answer>C</answer>"),
        policy("o1", 1, "<think>x</think><answer>A</answer>"),
        policy("o2", 1, "<think>x</think><answer>B</answer>"),
    ]));
    let report = run_benchmark(&ds, &cfg, &backend, EvalMode::OracleRegion, &opts).map_err(|e| e.to_string())?;
    let calls = backend.calls();
    ensure!(calls.iter().all(|c| c.ctx.turn == 2), "oracle mode issued a region call");
    ensure!(calls.len() == 2, "oracle mode made {} calls", calls.len());
    ensure!(report.correct == 1 && report.failures == 0, "oracle report {}/{}", report.correct, report.failures);
    let o1 = report.samples[0].trace.as_ref().ok_or("o1 has no trace")?;
    ensure!(o1.region == Some([28, 28, 112, 84]), "o1 region {:?}", o1.region);
    let o2 = report.samples[1].trace.as_ref().ok_or("o2 has no trace")?;
    ensure!(o2.region == Some([0, 0, 84, 112]), "o2 union region {:?}", o2.region);
    let o1_call = calls.iter().find(|c| c.ctx.sample_id == "o1").ok_or("no o1 call")?;
    let images = message_images(&o1_call.messages);
    let expected_crop = crop(&img, &bbox(gt, s)).map_err(|e| e.to_string())?;
    ensure!(images.len() == 2, "oracle turn carried {} images", images.len());
    ensure!(images[1] == expected_crop, "oracle crop differs from the ground-truth box");
    ensure!(report.samples[0].coverage == Some(1.0), "oracle coverage {:?}", report.samples[0].coverage);

    backend.clear();
    let report = run_benchmark(&ds, &cfg, &backend, EvalMode::NoCrop, &opts).map_err(|e| e.to_string())?;
    ensure!(report.mean_crop_tokens == 0.0, "no_crop crop tokens {}", report.mean_crop_tokens);
    ensure!(
        report.samples.iter().all(|r| r.trace.as_ref().is_some_and(|t| t.crop.is_none())),
        "no_crop produced a crop"
    );
    ensure!(report.accuracy == 1.0, "no_crop accuracy {}", report.accuracy);

    // masking experiment, scored by hand:
    //   id  ground truth                  unmasked zoom        cov    masked zoom          cov
    //   m1  [0,0,56,56]                   [0,0,56,56]          1      [56,56,112,112]      0
    //   m2  [0,0,56,56]                   [0,0,28,56]          1/2    [0,0,112,112]        1
    //   m3  [28,28,84,84]                 [28,28,56,84]        1/2    [0,0,42,42]          196/3136
    //   m4  [0,0,28,28] + [84,84,112,112] [0,0,112,112]        1      [0,0,28,28]          1/2
    //   m5  [0,0,112,56]                  answers directly     0      "[1, 2, 3]"          0
    //   m6  [56,0,112,112]                [56,0,112,56]        1/2    (backend error)      0
    let img = pattern(112, 112);
    let s = img.space();
    let path = write_png(dir.path(), "m.png", &img);
    let table: [(&str, &[[i64; 4]], &str, Option<&str>); 6] = [
        ("m1", &[[0, 0, 56, 56]], "<zoom>[0, 0, 56, 56]</zoom>", Some("<zoom>[56, 56, 112, 112]</zoom>")),
        ("m2", &[[0, 0, 56, 56]], "<zoom>[0, 0, 28, 56]</zoom>", Some("<zoom>[0, 0, 112, 112]</zoom>")),
        ("m3", &[[28, 28, 84, 84]], "<zoom>[28, 28, 56, 84]</zoom>", Some("<zoom>[0, 0, 42, 42]</zoom>")),
        (
            "m4",
            &[[0, 0, 28, 28], [84, 84, 112, 112]],
            "<zoom>[0, 0, 112, 112]</zoom>",
            Some("<zoom>[0, 0, 28, 28]</zoom>"),
        ),
        ("m5", &[[0, 0, 112, 56]], "<answer>A</answer>", Some("<zoom>[1, 2, 3]</zoom>")),
        ("m6", &[[56, 0, 112, 112]], "<zoom>[56, 0, 112, 56]</zoom>", None),
    ];
    let mut samples = Vec::new();
    let mut entries = Vec::new();
    for (id, boxes, unmasked, masked) in table {
        samples.push(sample(id, path.clone(), s, "A", boxes));
        entries.push(policy(id, 1, &format!("<think>look</think>{unmasked}")));
        if let Some(m) = masked {
            entries.push(entry(id, 1, Caller::Policy, Some("masked"), &format!("<think>look</think>{m}")));
        }
    }
    let backend = RecordingBackend::new(scripted(entries));
    let ds = dataset(samples);
    let r = masked_coverage_experiment(&ds, &cfg, &backend, &opts).map_err(|e| e.to_string())?;
    let per: Vec<(f64, f64)> = r.samples.iter().map(|m| (m.unmasked, m.masked)).collect();
    let expect = [(1.0, 0.0), (0.5, 1.0), (0.5, 0.0625), (1.0, 0.5), (0.0, 0.0), (0.5, 0.0)];
    ensure!(per == expect, "per-sample coverage {per:?}");
    ensure!(r.unmasked_mean == 3.5 / 6.0, "unmasked mean {}", r.unmasked_mean);
    ensure!(r.masked_mean == 1.5625 / 6.0, "masked mean {}", r.masked_mean);
    ensure!(r.failures == 1, "failures {}", r.failures);

    // the masked call really saw black where the target was
    let call = backend
        .calls()
        .into_iter()
        .find(|c| c.ctx.sample_id == "m1" && c.ctx.variant.as_deref() == Some("masked"))
        .ok_or("no masked call for m1")?;
    let seen = &message_images(&call.messages)[0];
    ensure!(seen.pixel(10, 10) == [0, 0, 0], "masked image not blacked out");
    ensure!(seen.pixel(100, 100) == img.pixel(100, 100), "mask leaked outside the box");

    Ok(format!(
        "oracle: 0 region calls, exact GT crop; no_crop: 0 crop tokens; masked means {:.6}/{:.6}",
        r.unmasked_mean, r.masked_mean
    ))
}

// ---------------------------------------------------------------------------
// 9. Region-size histogram

fn area_ratio_histogram() -> Outcome {
    let s = space(100, 100);
    let img = std::path::PathBuf::from("unused.png");
    let widths = [5, 10, 15, 15, 25, 35, 45, 55, 60, 65, 95, 100];
    let mut samples: Vec<_> = widths
        .iter()
        .enumerate()
        .map(|(i, &w)| sample(&format!("w{i}"), img.clone(), s, "A", &[[0, 0, w, 100]]))
        .collect();
    // two boxes whose bounding rectangle is [0,0,50,50]: ratio 0.25
    samples.push(sample("multi", img.clone(), s, "A", &[[0, 0, 10, 10], [40, 40, 50, 50]]));
    samples.push(sample("bare", img.clone(), s, "A", &[]));
    let stats = area_ratio_stats(&dataset(samples));
    let expect = [1, 3, 2, 1, 1, 1, 2, 0, 0, 2];
    ensure!(stats.bins == expect, "bins {:?}", stats.bins);
    ensure!(stats.contributing == 13, "contributing {}", stats.contributing);
    ensure!(stats.skipped == ["bare"], "skipped {:?}", stats.skipped);

    let mut rng = StdRng::seed_from_u64(0x5eed_0009);
    let small: Vec<_> = (0..500)
        .map(|i| {
            let (w, h) = (rng.gen_range(1..=100), rng.gen_range(1..=100));
            // keep w*h below 6000 of 10000
            let h = if w * h >= 6000 { 5999 / w } else { h };
            sample(&format!("s{i}"), img.clone(), s, "A", &[[0, 0, w, h]])
        })
        .collect();
    let stats = area_ratio_stats(&dataset(small));
    let below = stats.cumulative_below(6);
    ensure!(below == 1.0, "cumulative mass below bin 6 is {below}");
    Ok(format!("bins {expect:?}; 500 small regions, {:.0}% below 0.6", below * 100.0))
}

// ---------------------------------------------------------------------------
// 10. Live backend (opt-in)

fn live_backend() -> Option<Outcome> {
    let endpoint = std::env::var("C2F_LIVE_ENDPOINT").ok()?;
    let data = std::env::var("C2F_LIVE_DATASET").ok()?;
    Some((|| {
        let mut ds = load_dataset(std::path::Path::new(&data)).map_err(|e| e.to_string())?;
        ds.samples.truncate(5);
        let backend = RemoteBackend::new(BackendConfig {
            endpoint,
            model: std::env::var("C2F_LIVE_MODEL").unwrap_or_else(|_| "policy".into()),
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let clock = c2f_core::pipeline::SystemClock::new();
        let opts = HarnessOptions {
            parallel: 1,
            clock: &clock,
        };
        let cfg = PipelineConfig::with_tokens(640).unwrap();
        let report = run_benchmark(&ds, &cfg, &backend, EvalMode::CoarseToFine, &opts).map_err(|e| e.to_string())?;
        ensure!(report.failures == 0, "{} samples failed", report.failures);
        let regions: Vec<[u32; 4]> =
            report.samples.iter().filter_map(|s| s.trace.as_ref().and_then(|t| t.region)).collect();
        let full = report
            .samples
            .iter()
            .filter_map(|s| s.trace.as_ref())
            .filter(|t| t.region == Some([0, 0, t.original[0], t.original[1]]))
            .count();
        ensure!(!regions.is_empty() && full < regions.len(), "no non-trivial region predicted");
        Ok(format!("{} samples, {} regions, accuracy {:.2}", report.total, regions.len(), report.accuracy))
    })())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("reward arithmetic", reward_matrix),
        ("box threshold boundary", box_boundary),
        ("group advantages", grpo_oracle),
        ("resize and token budget", resize_budget),
        ("coverage score", coverage_oracles),
        ("protocol", protocol),
        ("determinism and token accounting", determinism),
        ("harness modes", harness_modes),
        ("region-size histogram", area_ratio_histogram),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({secs:.2}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({secs:.2}s): {why}", i + 1);
            }
        }
    }
    match live_backend() {
        None => println!("criterion 10 SKIP  live backend: set C2F_LIVE_ENDPOINT and C2F_LIVE_DATASET to run"),
        Some(Ok(detail)) => println!("criterion 10 PASS  live backend: {detail}"),
        Some(Err(why)) => {
            failed += 1;
            println!("criterion 10 FAIL  live backend: {why}");
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
