//! Token arithmetic, budget audits and the strategy ablation report.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compressors::Strategy;
use crate::error::{Error, Result};
use crate::pipeline::{strategy_token_count, token_count, SEGMENT_LEN};
use crate::synth::TaskKind;
use crate::training::{run_experiment, ExperimentConfig, SeedSummary};

/// Encoder grid side of the reference vision tower (784 tokens per frame).
pub const REFERENCE_GRID: usize = 28;
/// Keyframe block size at [`REFERENCE_GRID`].
pub const KEYFRAME_TOKENS: usize = 196;
/// Temporal block size at [`REFERENCE_GRID`].
pub const TEMPORAL_TOKENS: usize = 49;

/// `original / compressed` token counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionRatio {
    pub original: usize,
    pub compressed: usize,
    pub value: f64,
}

impl fmt::Display for CompressionRatio {
    /// Nearest integer with an `x` suffix: 12.8 shows as `13x`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x", self.value.round())
    }
}

pub fn compression_ratio(original: usize, compressed: usize) -> Result<CompressionRatio> {
    if compressed == 0 {
        return Err(Error::Input("compression ratio with zero compressed tokens".into()));
    }
    if original == 0 {
        return Err(Error::Input("compression ratio with zero original tokens".into()));
    }
    Ok(CompressionRatio {
        original,
        compressed,
        value: original as f64 / compressed as f64,
    })
}

/// Ratio of one full segment at grid side `grid` for `strategy`.
pub fn strategy_ratio(strategy: Strategy, grid: usize) -> Result<CompressionRatio> {
    compression_ratio(
        SEGMENT_LEN * grid * grid,
        strategy_token_count(strategy, SEGMENT_LEN, grid),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TokenRule {
    /// The same number of tokens for every frame.
    Constant { per_frame: usize },
    /// Segments of four frames: a keyframe block, plus a temporal block
    /// when the segment has at least two frames.
    SegmentPacking { keyframe: usize, temporal: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub rule: TokenRule,
    pub note: String,
}

impl ModelProfile {
    pub fn constant(name: &str, per_frame: usize) -> Self {
        ModelProfile {
            name: name.into(),
            rule: TokenRule::Constant { per_frame },
            note: format!("published {per_frame} tokens/frame"),
        }
    }

    /// The keyframe + temporal-perceiver packing at the reference grid.
    pub fn slowfast() -> Self {
        ModelProfile {
            name: "slowfast".into(),
            rule: TokenRule::SegmentPacking {
                keyframe: KEYFRAME_TOKENS,
                temporal: TEMPORAL_TOKENS,
            },
            note: "196 keyframe + 49 temporal tokens per 4-frame segment".into(),
        }
    }

    /// Total visual tokens for `frames` frames.
    pub fn cost(&self, frames: usize) -> usize {
        match self.rule {
            TokenRule::Constant { per_frame } => per_frame * frames,
            TokenRule::SegmentPacking { keyframe, temporal } => token_count(frames, keyframe, temporal),
        }
    }

    /// Whole-number tokens per frame at `frames` frames (floor).
    pub fn tokens_per_frame(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            self.cost(frames) / frames
        }
    }
}

/// Profiles with a fixed per-frame token count, plus the slow-fast rule.
pub fn known_profiles() -> Vec<ModelProfile> {
    let mut v: Vec<ModelProfile> = [
        ("IXComposer-2.5", 400),
        ("InternVL2", 256),
        ("InternVL2.5", 256),
        ("Kangaroo", 256),
        ("LongVILA", 196),
        ("LLaVA-Video", 196),
        ("LLaVA-OneVision", 196),
        ("LLaVA-NeXT-Video", 144),
        ("LongVA", 144),
        ("LongLLaVA", 144),
        ("MiniCPM-V 2.6", 96),
        ("VideoLLaMA2", 72),
        ("VideoChat2-HD", 72),
        ("InternVideo2-HD", 72),
        ("LongVU", 64),
        ("LLaMA-VID", 2),
    ]
    .into_iter()
    .map(|(n, t)| ModelProfile::constant(n, t))
    .collect();
    v.push(ModelProfile::slowfast());
    v
}

pub fn profile_by_name(name: &str) -> Result<ModelProfile> {
    let all = known_profiles();
    all.iter().find(|p| p.name == name).cloned().ok_or_else(|| {
        let names: Vec<&str> = all.iter().map(|p| p.name.as_str()).collect();
        Error::Config(format!("unknown profile '{name}'; known: {}", names.join(", ")))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub profile: String,
    pub budget: usize,
    pub frames: usize,
    pub tokens: usize,
}

/// Largest frame count whose exact token cost fits in `budget`.
pub fn frames_under_budget(profile: &ModelProfile, budget: usize) -> Result<BudgetReport> {
    let one = profile.cost(1);
    if budget < one {
        return Err(Error::Input(format!(
            "budget {budget} is below the {one} tokens of a single frame for {}",
            profile.name
        )));
    }
    let frames = match profile.rule {
        TokenRule::Constant { per_frame } => budget / per_frame,
        TokenRule::SegmentPacking { keyframe, temporal } => {
            let full = budget / (keyframe + temporal);
            let rest = budget - full * (keyframe + temporal);
            // A partial segment of one frame costs only the keyframe block;
            // two or more frames cost as much as a full segment.
            full * SEGMENT_LEN + usize::from(rest >= keyframe)
        }
    };
    Ok(BudgetReport {
        profile: profile.name.clone(),
        budget,
        frames,
        tokens: profile.cost(frames),
    })
}

/// A published frame count for a model under a token budget.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedBudgetRow {
    pub profile: String,
    pub budget: usize,
    pub frames: usize,
}

pub fn published_budget_rows() -> Vec<PublishedBudgetRow> {
    [
        ("InternVideo2-HD", 2000, 32),
        ("LLaVA-Video", 2000, 10),
        ("slowfast", 2000, 32),
        ("MiniCPM-V 2.6", 6000, 64),
        ("LLaVA-Video", 6000, 32),
        ("slowfast", 6000, 96),
    ]
    .into_iter()
    .map(|(p, b, f)| PublishedBudgetRow {
        profile: p.into(),
        budget: b,
        frames: f,
    })
    .collect()
}

/// Budget row checked under two readings: the strict one (cost must not
/// exceed the budget) and a lenient one where the budget is a label such as
/// "6k" that the cost only has to round to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetAudit {
    pub published: PublishedBudgetRow,
    pub computed: BudgetReport,
    pub published_cost: usize,
    pub strict_agrees: bool,
    pub rounded_agrees: bool,
    pub discrepancy: bool,
}

pub fn audit_budget_row(row: &PublishedBudgetRow) -> Result<BudgetAudit> {
    let profile = profile_by_name(&row.profile)?;
    let computed = frames_under_budget(&profile, row.budget)?;
    let published_cost = profile.cost(row.frames);
    let strict_agrees = computed.frames == row.frames;
    Ok(BudgetAudit {
        rounded_agrees: thousands_label(published_cost) == thousands_label(row.budget),
        discrepancy: !strict_agrees,
        published: row.clone(),
        computed,
        published_cost,
        strict_agrees,
    })
}

/// Compact token label: "5880" → "6k", "12544" → "13k"; below 1,000 the
/// exact count.
pub fn thousands_label(tokens: usize) -> String {
    if tokens < 1000 {
        tokens.to_string()
    } else {
        format!("{}k", (tokens as f64 / 1000.0).round())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenTableRow {
    pub profile: String,
    pub frames: usize,
    pub tokens: usize,
    pub label: String,
    pub tokens_per_frame: usize,
    /// `(budget, tokens <= budget)` for each requested budget.
    pub within: Vec<(usize, bool)>,
}

/// Total tokens of every profile at every frame count.
pub fn emit_token_table(profiles: &[ModelProfile], frames: &[usize], budgets: &[usize]) -> Vec<TokenTableRow> {
    profiles
        .iter()
        .flat_map(|p| {
            frames.iter().map(move |&f| {
                let tokens = p.cost(f);
                TokenTableRow {
                    profile: p.name.clone(),
                    frames: f,
                    tokens,
                    label: thousands_label(tokens),
                    tokens_per_frame: p.tokens_per_frame(f),
                    within: budgets.iter().map(|&b| (b, tokens <= b)).collect(),
                }
            })
        })
        .collect()
}

pub fn token_table_csv(rows: &[TokenTableRow]) -> String {
    let budgets: Vec<usize> = rows.first().map(|r| r.within.iter().map(|w| w.0).collect()).unwrap_or_default();
    let mut out = String::from("profile,frames,tokens,label,tokens_per_frame");
    for b in &budgets {
        out.push_str(&format!(",within_{b}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}",
            csv_field(&r.profile),
            r.frames,
            r.tokens,
            r.label,
            r.tokens_per_frame
        ));
        for (_, ok) in &r.within {
            out.push_str(if *ok { ",yes" } else { ",no" });
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Settings for the ablation suite, read from a flat `key = value` file.
///
/// Keys: `strategies`, `tasks`, `grid`, `channels`, `heads`, `frames`,
/// `token_grid`, `seed`, `seeds`, `budgets`, `out`, `warm_up`, `epochs`,
/// `train_samples`, `warmup_samples`, `test_pairs`, `batch_size`,
/// `learning_rate`. Lines starting with `#` are comments. Training keys
/// left unset fall back to the per-task presets of
/// [`ExperimentConfig::for_task`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub strategies: Vec<Strategy>,
    pub tasks: Vec<TaskKind>,
    pub grid: usize,
    pub channels: usize,
    pub heads: usize,
    /// Video length in frames for the tokens-per-video column.
    pub frames: usize,
    /// Grid side for token arithmetic.
    pub token_grid: usize,
    pub seed: u64,
    pub seeds: usize,
    pub budgets: Vec<usize>,
    /// Output directory; not part of the serialized report.
    #[serde(skip)]
    pub out: Option<PathBuf>,
    pub warm_up: bool,
    pub overrides: TrainingOverrides,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingOverrides {
    pub epochs: Option<usize>,
    pub train_samples: Option<usize>,
    pub warmup_samples: Option<usize>,
    pub test_pairs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            strategies: Strategy::ALL.to_vec(),
            tasks: vec![TaskKind::ChangeDirection, TaskKind::ChangedCell],
            grid: 8,
            channels: 16,
            heads: 4,
            frames: 96,
            token_grid: REFERENCE_GRID,
            seed: 0,
            seeds: 3,
            budgets: vec![2000, 6000],
            out: None,
            warm_up: true,
            overrides: TrainingOverrides::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

impl SuiteConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SuiteConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let o = &mut self.overrides;
        match key {
            "strategies" => self.strategies = parse_list(v, str::parse)?,
            "tasks" => {
                self.tasks = if v == "none" {
                    Vec::new()
                } else {
                    parse_list(v, str::parse)?
                }
            }
            "grid" => self.grid = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "frames" => self.frames = parse_num(key, v)?,
            "token_grid" => self.token_grid = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "seeds" => self.seeds = parse_num(key, v)?,
            "budgets" => self.budgets = parse_list(v, |s| parse_num(key, s))?,
            "out" => self.out = Some(PathBuf::from(v)),
            "warm_up" => self.warm_up = parse_num(key, v)?,
            "epochs" => o.epochs = Some(parse_num(key, v)?),
            "train_samples" => o.train_samples = Some(parse_num(key, v)?),
            "warmup_samples" => o.warmup_samples = Some(parse_num(key, v)?),
            "test_pairs" => o.test_pairs = Some(parse_num(key, v)?),
            "batch_size" => o.batch_size = Some(parse_num(key, v)?),
            "learning_rate" => o.learning_rate = Some(parse_num(key, v)?),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies selected".into()));
        }
        if self.token_grid == 0 || self.token_grid % 4 != 0 {
            return Err(Error::Config(format!(
                "token_grid must be a positive multiple of 4, got {}",
                self.token_grid
            )));
        }
        if self.tasks.iter().any(|t| !t.is_classification()) {
            return Err(Error::Config("ablation tasks must be classification tasks".into()));
        }
        if !self.tasks.is_empty() {
            if self.seeds == 0 {
                return Err(Error::Config("seeds must be positive".into()));
            }
            for s in &self.strategies {
                self.experiment(TaskKind::ChangeDirection).spec(*s).validate(self.grid, self.channels)?;
            }
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn experiment(&self, task: TaskKind) -> ExperimentConfig {
        let base = ExperimentConfig::for_task(task);
        let o = &self.overrides;
        ExperimentConfig {
            grid: self.grid,
            channels: self.channels,
            heads: self.heads,
            epochs: o.epochs.unwrap_or(base.epochs),
            train_samples: o.train_samples.unwrap_or(base.train_samples),
            warmup_samples: o.warmup_samples.unwrap_or(base.warmup_samples),
            test_pairs: o.test_pairs.unwrap_or(base.test_pairs),
            batch_size: o.batch_size.unwrap_or(base.batch_size),
            learning_rate: o.learning_rate.unwrap_or(base.learning_rate),
            ..base
        }
    }
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub accuracy: SeedSummary,
    /// Mean accuracy minus the baseline4x mean, when baseline4x ran.
    pub delta_vs_baseline: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub compression_ratio: f64,
    pub compression_display: String,
    pub tokens_per_video: usize,
    pub tasks: BTreeMap<String, TaskResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: u32,
    pub config: SuiteConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Token arithmetic plus trained accuracies for each configured strategy.
/// Training runs are independent and run in parallel.
pub fn run_ablation(cfg: &SuiteConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let seeds = cfg.seed_list();
    let jobs: Vec<(Strategy, TaskKind, u64)> = cfg
        .strategies
        .iter()
        .flat_map(|&s| {
            let seeds = &seeds;
            cfg.tasks.iter().flat_map(move |&t| seeds.iter().map(move |&seed| (s, t, seed)))
        })
        .collect();
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(s, t, seed)| {
            let warm = cfg.warm_up && s.is_learned();
            let rec = run_experiment(s, t, warm, &cfg.experiment(t), seed)?;
            Ok(rec.accuracies[t.name()])
        })
        .collect::<Result<_>>()?;

    let mut summaries: BTreeMap<(Strategy, TaskKind), SeedSummary> = BTreeMap::new();
    for (chunk, (s, t)) in accs.chunks(seeds.len().max(1)).zip(
        cfg.strategies
            .iter()
            .flat_map(|&s| cfg.tasks.iter().map(move |&t| (s, t))),
    ) {
        summaries.insert((s, t), SeedSummary::from_values(chunk.to_vec()));
    }

    let rows = cfg
        .strategies
        .iter()
        .map(|&s| {
            let cr = strategy_ratio(s, cfg.token_grid)?;
            let tasks = cfg
                .tasks
                .iter()
                .map(|&t| {
                    let accuracy = summaries[&(s, t)].clone();
                    let delta_vs_baseline = summaries
                        .get(&(Strategy::Baseline4x, t))
                        .map(|b| accuracy.mean - b.mean);
                    (t.name().to_string(), TaskResult { accuracy, delta_vs_baseline })
                })
                .collect();
            Ok(AblationRow {
                strategy: s,
                compression_ratio: cr.value,
                compression_display: cr.to_string(),
                tokens_per_video: strategy_token_count(s, cfg.frames, cfg.token_grid),
                tasks,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationReport {
        version: REPORT_VERSION,
        config: cfg.clone(),
        seeds,
        rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,compression_ratio,compression_display,tokens_per_video");
        for t in &self.config.tasks {
            let n = t.name().replace('-', "_");
            out.push_str(&format!(",{n}_mean,{n}_min,{n}_max,{n}_delta_vs_baseline"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}",
                r.strategy, r.compression_ratio, r.compression_display, r.tokens_per_video
            ));
            for t in &self.config.tasks {
                let res = &r.tasks[t.name()];
                out.push_str(&format!(
                    ",{},{},{},{}",
                    res.accuracy.mean,
                    res.accuracy.min,
                    res.accuracy.max,
                    opt(res.delta_vs_baseline)
                ));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Runs the suite and writes `ablation.csv` and `ablation.json` into `out`.
pub fn run_ablation_suite(cfg: &SuiteConfig, out: &Path) -> Result<AblationReport> {
    let report = run_ablation(cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.csv"), report.to_csv())?;
    fs::write(out.join("ablation.json"), report.to_json()?)?;
    Ok(report)
}
