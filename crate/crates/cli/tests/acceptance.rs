//! Acceptance criteria 1-9, run in order. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use slowfast_core::bench::{
    compression_ratio, frames_under_budget, run_ablation, strategy_ratio, ModelProfile, SuiteConfig,
    REFERENCE_GRID,
};
use slowfast_core::compressors::{timeperceiver_forward, CompressorSpec, ModelParams, Strategy};
use slowfast_core::numeric::Array;
use slowfast_core::pipeline::token_count;
use slowfast_core::synth::{mock_encode, TaskKind};
use slowfast_core::training::{grad_check_model, run_experiment, ExperimentConfig, GradCheckOptions, SeedSummary};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    ok: bool,
    detail: String,
    /// Time spent on shared work computed by an earlier criterion.
    reused: Duration,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
        reused: Duration::ZERO,
    }
}

/// Runs `f`, checks its wall time against `limit` and prints the verdict.
fn criterion(n: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(f));
    let mut elapsed = start.elapsed();
    let (mut ok, mut detail) = match result {
        Ok(o) => {
            elapsed += o.reused;
            (o.ok, o.detail)
        }
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    if let Some(limit) = limit {
        if elapsed > limit {
            ok = false;
            detail.push_str(&format!("; over the {}s limit", limit.as_secs()));
        }
    }
    println!(
        "criterion {n} [{name}]: {} ({detail}; {:.2}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    ok
}

fn token_arithmetic() -> Outcome {
    let one = token_count(1, 196, 49);
    let seg = token_count(4, 196, 49);
    let video = token_count(96, 196, 49);
    let per_frame = video / 96;
    outcome(
        (one, seg, video, per_frame) == (196, 245, 5880, 61),
        format!("1 frame {one}, segment {seg}, 96 frames {video}, per frame {per_frame}"),
    )
}

fn budgets() -> Outcome {
    let p = ModelProfile::slowfast();
    let at = |b| frames_under_budget(&p, b).unwrap().frames;
    let (f2k, f6k) = (at(2000), at(6000));
    let mut mismatches = 0;
    let mut scan = 0;
    for budget in 196..=10_000 {
        while p.cost(scan + 1) <= budget {
            scan += 1;
        }
        let r = frames_under_budget(&p, budget).unwrap();
        if r.frames != scan || r.tokens > budget || p.cost(r.frames + 1) <= budget {
            mismatches += 1;
        }
    }
    outcome(
        f2k == 32 && f6k == 96 && mismatches == 0,
        format!("2k -> {f2k} frames, 6k -> {f6k} frames, {mismatches} oracle mismatches over 196..=10000"),
    )
}

fn ratios() -> Outcome {
    let direct: Vec<(f64, String)> = Strategy::ALL
        .iter()
        .map(|&s| {
            let r = strategy_ratio(s, REFERENCE_GRID).unwrap();
            (r.value, r.to_string())
        })
        .collect();
    let report = run_ablation(&SuiteConfig::parse("tasks = none").unwrap()).unwrap();
    let from_report: Vec<f64> = report.rows.iter().map(|r| r.compression_ratio).collect();
    let want = [4.0, 16.0, 16.0, 12.8, 12.8];
    let shown: Vec<&str> = direct.iter().map(|d| d.1.as_str()).collect();
    let ok = direct.iter().map(|d| d.0).eq(want)
        && from_report == want
        && shown == ["4x", "16x", "16x", "13x", "13x"]
        && compression_ratio(3136, 245).unwrap().value == 12.8;
    outcome(ok, format!("{from_report:?} shown as {shown:?}"))
}

fn paper_shapes() -> Outcome {
    let (g, d) = (28, 1152);
    let spec = CompressorSpec::new(Strategy::TimePerceiver, g);
    let params = ModelParams::init(&spec, g, d, 0).unwrap();
    let clip = mock_encode(4, g, d, 7).unwrap();
    let mut shapes = Vec::new();
    for t in [2, 3, 4] {
        let out = timeperceiver_forward(&clip.frames_range(0, t).unwrap(), &params, &spec).unwrap();
        assert!(out.all_finite());
        shapes.push(out.shape().to_vec());
    }
    outcome(
        shapes.iter().all(|s| s == &[49, 1152]),
        format!("T=2,3,4 -> {shapes:?}"),
    )
}

fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    let mut checked = 0;
    for (g, d, heads) in [(4, 8, 2), (8, 16, 4)] {
        for s in Strategy::ALL {
            let spec = CompressorSpec::new(s, g).with_heads(heads);
            let report = grad_check_model(&spec, g, d, &GradCheckOptions::default()).unwrap();
            worst = worst.max(report.worst());
            checked += report.entries.len();
            failed.extend(
                report
                    .entries
                    .iter()
                    .filter(|e| !e.passed)
                    .map(|e| format!("{s}@G{g}:{}", e.name)),
            );
        }
    }
    outcome(
        failed.is_empty(),
        format!("{checked} arrays checked, worst relative error {worst:.2e}, failures {failed:?}"),
    )
}

fn permute(frames: &Array, order: &[usize]) -> Array {
    let per = frames.len() / frames.shape()[0];
    let data = order
        .iter()
        .flat_map(|&t| frames.data()[t * per..(t + 1) * per].iter().copied())
        .collect();
    Array::new(frames.shape().to_vec(), data).unwrap()
}

fn permutations() -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = vec![a, b, c, d];
                    let mut s = p.clone();
                    s.sort_unstable();
                    if s == [0, 1, 2, 3] {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

fn permutation_dichotomy() -> Outcome {
    let perms = permutations();
    assert_eq!(perms.len(), 24);
    let (g, d) = (8, 16);
    let mut max_off: f64 = 0.0;
    let mut min_on_max = f64::INFINITY;
    for seed in 0..5 {
        let clip = mock_encode(4, g, d, 100 + seed).unwrap().values;
        for pos in [false, true] {
            let spec = CompressorSpec::new(Strategy::TimePerceiver, g).with_temporal_pos(pos);
            let params = ModelParams::init(&spec, g, d, seed).unwrap();
            let base = timeperceiver_forward(&clip, &params, &spec).unwrap();
            let diffs: Vec<f64> = perms
                .iter()
                .map(|p| {
                    let out = timeperceiver_forward(&permute(&clip, p), &params, &spec).unwrap();
                    base.max_abs_diff(&out).unwrap()
                })
                .collect();
            let largest = diffs.iter().copied().fold(0.0, f64::max);
            if pos {
                min_on_max = min_on_max.min(largest);
            } else {
                max_off = max_off.max(largest);
            }
        }
    }
    outcome(
        max_off < 1e-9 && min_on_max > 1e-6,
        format!("pos off: max diff {max_off:.1e}; pos on: largest diff per clip >= {min_on_max:.1e}"),
    )
}

struct Timed<T> {
    value: T,
    elapsed: Duration,
}

fn change_direction(strategy: Strategy, warm_up: bool) -> Timed<SeedSummary> {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let accs = SEEDS
        .iter()
        .map(|&seed| {
            run_experiment(strategy, TaskKind::ChangeDirection, warm_up, &cfg, seed).unwrap().accuracies
                ["change-direction"]
        })
        .collect();
    Timed {
        value: SeedSummary::from_values(accs),
        elapsed: start.elapsed(),
    }
}

/// Two-stage timeperceiver on change-direction, shared by criteria 7 and 8.
fn two_stage() -> &'static Timed<SeedSummary> {
    static CELL: OnceLock<Timed<SeedSummary>> = OnceLock::new();
    CELL.get_or_init(|| change_direction(Strategy::TimePerceiver, true))
}

fn changed_cell(strategy: Strategy) -> SeedSummary {
    let cfg = ExperimentConfig::for_task(TaskKind::ChangedCell);
    let accs = SEEDS
        .iter()
        .map(|&seed| {
            run_experiment(strategy, TaskKind::ChangedCell, false, &cfg, seed).unwrap().accuracies["changed-cell"]
        })
        .collect();
    SeedSummary::from_values(accs)
}

fn fmt_summary(s: &SeedSummary) -> String {
    format!("{:.3} [{:.3}, {:.3}]", s.mean, s.min, s.max)
}

fn retention_ordering() -> Outcome {
    let pool = change_direction(Strategy::TemporalPool, false).value;
    let two = &two_stage().value;
    let pool_ok = pool.values.iter().all(|a| (a - 0.5).abs() <= 0.05);
    let two_ok = two.mean > 0.9;

    let spatial = changed_cell(Strategy::SpatialPool);
    let keyframe: Vec<(Strategy, SeedSummary)> = [Strategy::Baseline4x, Strategy::Perceiver, Strategy::TimePerceiver]
        .into_iter()
        .map(|s| (s, changed_cell(s)))
        .collect();
    let gap_ok = keyframe.iter().all(|(_, s)| s.mean - spatial.mean >= 0.10);
    let kf: Vec<String> = keyframe.iter().map(|(s, a)| format!("{s} {}", fmt_summary(a))).collect();
    outcome(
        pool_ok && two_ok && gap_ok,
        format!(
            "change-direction: temporal-pool {}, two-stage timeperceiver {}; changed-cell: spatial-pool {}, {}",
            fmt_summary(&pool),
            fmt_summary(two),
            fmt_summary(&spatial),
            kf.join(", "),
        ),
    )
}

fn staging_benefit() -> Outcome {
    let direct = change_direction(Strategy::TimePerceiver, false).value;
    let two = two_stage();
    Outcome {
        reused: two.elapsed,
        ..outcome(
            two.value.mean >= direct.mean,
            format!(
                "direct {}, two-stage {} over seeds {SEEDS:?}; includes {:.0}s of two-stage runs shared with criterion 7",
                fmt_summary(&direct),
                fmt_summary(&two.value),
                two.elapsed.as_secs_f64()
            ),
        )
    }
}

const SMALL_CONFIG: &str = "\
strategies = baseline4x, temporal-pool, spatial-pool, perceiver, timeperceiver
tasks = change-direction, changed-cell
grid = 4
channels = 8
heads = 2
seeds = 3
epochs = 1
train_samples = 48
warmup_samples = 32
test_pairs = 16
";

fn run_cli(args: &[&str], out: &Path, config: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_slowfast"))
        .args(args)
        .arg("--seed")
        .arg("7")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("run cli")
        .status
        .success()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.cfg");
    fs::write(&config, SMALL_CONFIG).unwrap();
    let mut compared = 0;
    let mut differing = Vec::new();
    for cmd in ["tokens", "budget", "report", "gradcheck", "ablate", "train"] {
        let a = tmp.path().join(format!("{cmd}-a"));
        let b = tmp.path().join(format!("{cmd}-b"));
        assert!(run_cli(&[cmd], &a, &config), "{cmd} failed");
        assert!(run_cli(&[cmd], &b, &config), "{cmd} failed");
        let (fa, fb) = (files(&a), files(&b));
        assert!(!fa.is_empty(), "{cmd} wrote nothing");
        compared += fa.len();
        if fa != fb {
            differing.push(cmd);
        }
    }
    outcome(
        differing.is_empty(),
        format!("{compared} output files compared across two runs each, differing: {differing:?}"),
    )
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let results = [
        criterion(1, "token arithmetic", secs(1), token_arithmetic),
        criterion(2, "budget", secs(5), budgets),
        criterion(3, "compression ratio", secs(1), ratios),
        criterion(4, "shape contracts", secs(30), paper_shapes),
        criterion(5, "gradient verification", secs(120), gradients),
        criterion(6, "permutation dichotomy", secs(60), permutation_dichotomy),
        criterion(7, "information retention", secs(15 * 60), retention_ordering),
        criterion(8, "staging benefit", secs(20 * 60), staging_benefit),
        criterion(9, "determinism", None, determinism),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
