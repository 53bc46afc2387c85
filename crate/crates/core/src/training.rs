//! Two-stage training on synthetic tasks and model-level gradient checks.
//!
//! Stage 1 warms the compressor up on the caption-regression task; stage 2
//! fine-tunes on a classification task. Each sample is one four-frame
//! segment; its packed tokens are flattened into a linear task head.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compressors::{
    compress_segment, Bound, CompressorSpec, ModelParams, Strategy, COMPRESSOR_GROUP, HEAD_PREFIX,
};
use crate::error::{Error, Result};
use crate::numeric::gradcheck::{self, InputCheck};
use crate::numeric::{adam_step, Array, OpKind, OptimState, ParamSet, Tape, Var};
use crate::pipeline::strategy_token_count;
use crate::synth::{self, Label, SyntheticSample, TaskKind, SAMPLE_FRAMES};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

fn head_group(task: TaskKind) -> String {
    format!("{HEAD_PREFIX}{}", task.name())
}

/// Makes sure `params` carries a head for `task`.
pub fn ensure_head(params: &mut ModelParams, task: TaskKind, seed: u64) {
    let name = format!("{}.w", head_group(task));
    if !params.arrays.contains_key(&name) {
        let tokens = strategy_token_count(params.spec.strategy, SAMPLE_FRAMES, params.grid);
        params.add_head(
            task.name(),
            tokens * params.channels,
            task.output_dim(params.grid),
            seed ^ 0x4ead,
        );
    }
}

/// Head output (`[1, outputs]`) for one clip.
pub fn forward_sample(
    tape: &mut Tape,
    bound: &Bound,
    spec: &CompressorSpec,
    frames: Var,
    task: TaskKind,
) -> Result<Var> {
    let blocks = compress_segment(tape, frames, bound, spec)?;
    let parts: Vec<Var> = blocks.into_iter().map(|(_, v)| v).collect();
    let tokens = tape.concat_rows(&parts)?;
    let n = tape.value(tokens).len();
    let flat = tape.reshape(tokens, &[1, n])?;
    let group = head_group(task);
    let logits = tape.matmul(flat, bound.get(&format!("{group}.w"))?)?;
    tape.add_row(logits, bound.get(&format!("{group}.b"))?)
}

/// Per-sample loss: cross-entropy for classification, mean squared error
/// for regression.
pub fn sample_loss(tape: &mut Tape, output: Var, label: &Label) -> Result<Var> {
    match label {
        Label::Class(c) => tape.cross_entropy(output, *c),
        Label::Target(t) => {
            let target = tape.leaf(Array::new(tape.shape(output).to_vec(), t.clone())?);
            let diff = tape.sub(output, target)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean(sq))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: u8,
    pub task: TaskKind,
    /// Parameter groups that must not change.
    pub frozen: Vec<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl StagePlan {
    /// Stage 1: compressor and regression head on caption regression.
    pub fn warm_up(epochs: usize, batch_size: usize, learning_rate: f64) -> Self {
        StagePlan {
            stage: 1,
            task: TaskKind::CaptionRegression,
            frozen: Vec::new(),
            epochs,
            batch_size,
            learning_rate,
        }
    }

    /// Stage 2: every parameter on a classification task.
    pub fn fine_tune(task: TaskKind, epochs: usize, batch_size: usize, learning_rate: f64) -> Self {
        StagePlan {
            stage: 2,
            task,
            frozen: Vec::new(),
            epochs,
            batch_size,
            learning_rate,
        }
    }

    pub fn freeze(mut self, group: impl Into<String>) -> Self {
        self.frozen.push(group.into());
        self
    }

    fn validate(&self) -> Result<()> {
        match (self.stage, self.task.is_classification()) {
            (1, false) | (2, true) => {}
            (1, true) => {
                return Err(Error::Config(
                    "stage 1 trains on the caption-regression objective".into(),
                ))
            }
            (2, false) => {
                return Err(Error::Config(
                    "stage 2 trains on a classification objective".into(),
                ))
            }
            (s, _) => return Err(Error::Config(format!("unknown stage {s}"))),
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub plan: StagePlan,
    /// Mean batch loss after every optimizer step.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub strategy: Strategy,
    pub stages: Vec<StageRecord>,
    /// Final evaluation accuracy per task name.
    pub accuracies: BTreeMap<String, f64>,
}

fn batch_loss(
    params: &ModelParams,
    batch: &[&SyntheticSample],
    task: TaskKind,
) -> Result<(Tape, Bound, Var)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        let x = tape.leaf(s.clip.values.clone());
        let out = forward_sample(&mut tape, &bound, &params.spec, x, task)?;
        let l = sample_loss(&mut tape, out, &s.label)?;
        losses.push(tape.reshape(l, &[1])?);
    }
    let all = tape.concat_rows(&losses)?;
    let loss = tape.mean(all);
    Ok((tape, bound, loss))
}

/// Runs one stage of minibatch Adam. Sample order is shuffled per epoch
/// from `seed`, so the result is a pure function of its inputs.
pub fn train_stage(
    plan: &StagePlan,
    data: &[SyntheticSample],
    mut params: ModelParams,
    seed: u64,
) -> Result<(ModelParams, StageRecord)> {
    plan.validate()?;
    if let Some(bad) = data.iter().find(|s| s.task != plan.task) {
        return Err(Error::Config(format!(
            "stage {} expects {:?} samples, got {:?}",
            plan.stage, plan.task, bad.task
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("train_stage"));
    }
    ensure_head(&mut params, plan.task, seed);

    let frozen: BTreeSet<&str> = plan.frozen.iter().map(String::as_str).collect();
    let head = head_group(plan.task);
    let trainable: Vec<String> = params
        .arrays
        .keys()
        .filter(|name| {
            let g = ModelParams::group_of(name);
            (g == COMPRESSOR_GROUP || g == head) && !frozen.contains(g.as_str())
        })
        .cloned()
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(plan.stage) << 56));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut state = OptimState::new(plan.learning_rate);
    let mut record = StageRecord {
        plan: plan.clone(),
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
    };

    for _ in 0..plan.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(plan.batch_size) {
            let batch: Vec<&SyntheticSample> = chunk.iter().map(|&i| &data[i]).collect();
            let (tape, bound, loss) = batch_loss(&params, &batch, plan.task)?;
            let value = tape.value(loss).item().expect("scalar loss");
            if !value.is_finite() {
                return Err(Error::Diagnostic(format!(
                    "non-finite loss in stage {}",
                    plan.stage
                )));
            }
            let grads = tape.backward(loss)?;
            let grad_set: ParamSet = trainable
                .iter()
                .map(|name| Ok((name.clone(), grads.wrt(bound.get(name)?))))
                .collect::<Result<_>>()?;
            let (next, next_state) = adam_step(&params.arrays, &grad_set, &state)?;
            params.arrays = next;
            state = next_state;
            record.step_losses.push(value);
            epoch_total += value;
            steps += 1;
        }
        record.epoch_losses.push(epoch_total / steps as f64);
    }
    Ok((params, record))
}

/// Head outputs for every sample, evaluated without recording gradients
/// beyond one sample at a time.
fn predictions(params: &ModelParams, samples: &[SyntheticSample], task: TaskKind) -> Result<Vec<Array>> {
    samples
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.leaf(s.clip.values.clone());
            let out = forward_sample(&mut tape, &bound, &params.spec, x, task)?;
            Ok(tape.value(out).clone())
        })
        .collect()
}

/// Fraction of samples whose arg-max head output equals the label. Ties go
/// to the lowest class index.
pub fn accuracy(params: &ModelParams, samples: &[SyntheticSample]) -> Result<f64> {
    let task = samples.first().ok_or(Error::EmptyInput("accuracy"))?.task;
    let preds = predictions(params, samples, task)?;
    let mut correct = 0usize;
    for (p, s) in preds.iter().zip(samples) {
        let label = s
            .label
            .class()
            .ok_or_else(|| Error::Config("accuracy needs class labels".into()))?;
        let best = p
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0;
        correct += usize::from(best == label);
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Mean squared error of the regression head.
pub fn regression_loss(params: &ModelParams, samples: &[SyntheticSample]) -> Result<f64> {
    let task = samples.first().ok_or(Error::EmptyInput("regression_loss"))?.task;
    let preds = predictions(params, samples, task)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        let t = s
            .label
            .target()
            .ok_or_else(|| Error::Config("regression needs vector targets".into()))?;
        total += p.data().iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Sizes and hyperparameters shared by the desk-scale experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub grid: usize,
    pub channels: usize,
    pub heads: usize,
    pub temporal_pos: bool,
    pub warmup_samples: usize,
    pub train_samples: usize,
    /// Evaluation set size: mirrored pairs for change-direction, and
    /// `2 * test_pairs` samples for other tasks.
    pub test_pairs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            grid: 8,
            channels: 16,
            heads: 4,
            temporal_pos: true,
            warmup_samples: 2000,
            train_samples: 2000,
            test_pairs: 500,
            epochs: 20,
            batch_size: 16,
            learning_rate: DEFAULT_LEARNING_RATE,
        }
    }
}

// Stream tags keep warm-up, training and test data disjoint for one seed.
const WARMUP_STREAM: u64 = 0x1000_0000;
const TRAIN_STREAM: u64 = 0x2000_0000;
const TEST_STREAM: u64 = 0x3000_0000;

impl ExperimentConfig {
    /// Desk-scale preset per task. Changed-cell has 64 classes and needs
    /// more samples before a linear head stops memorizing.
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::ChangedCell => ExperimentConfig {
                warmup_samples: 6000,
                train_samples: 6000,
                epochs: 10,
                ..ExperimentConfig::default()
            },
            _ => ExperimentConfig::default(),
        }
    }

    pub fn spec(&self, strategy: Strategy) -> CompressorSpec {
        CompressorSpec::new(strategy, self.grid)
            .with_heads(self.heads)
            .with_temporal_pos(self.temporal_pos)
    }

    pub fn warmup_data(&self, seed: u64) -> Result<Vec<SyntheticSample>> {
        synth::generate_many(
            TaskKind::CaptionRegression,
            self.grid,
            self.channels,
            seed ^ WARMUP_STREAM,
            self.warmup_samples,
        )
    }

    pub fn train_data(&self, task: TaskKind, seed: u64) -> Result<Vec<SyntheticSample>> {
        synth::generate_many(task, self.grid, self.channels, seed ^ TRAIN_STREAM, self.train_samples)
    }

    pub fn test_data(&self, task: TaskKind, seed: u64) -> Result<Vec<SyntheticSample>> {
        match task {
            TaskKind::ChangeDirection => {
                synth::change_direction_pairs(self.grid, self.channels, seed ^ TEST_STREAM, self.test_pairs)
            }
            _ => synth::generate_many(task, self.grid, self.channels, seed ^ TEST_STREAM, 2 * self.test_pairs),
        }
    }
}

/// Trains `strategy` on `task` (optionally after a warm-up stage) and
/// evaluates on held-out data. Returns the trained parameters too.
pub fn train_model(
    strategy: Strategy,
    task: TaskKind,
    warm_up: bool,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(ModelParams, RunRecord)> {
    let spec = cfg.spec(strategy);
    let mut params = ModelParams::init(&spec, cfg.grid, cfg.channels, seed)?;
    let mut stages = Vec::new();
    if warm_up {
        let plan = StagePlan::warm_up(cfg.epochs, cfg.batch_size, cfg.learning_rate);
        let (p, rec) = train_stage(&plan, &cfg.warmup_data(seed)?, params, seed)?;
        params = p;
        stages.push(rec);
    }
    let plan = StagePlan::fine_tune(task, cfg.epochs, cfg.batch_size, cfg.learning_rate);
    let (params, rec) = train_stage(&plan, &cfg.train_data(task, seed)?, params, seed)?;
    stages.push(rec);
    let acc = accuracy(&params, &cfg.test_data(task, seed)?)?;
    let record = RunRecord {
        seed,
        strategy,
        stages,
        accuracies: BTreeMap::from([(task.name().to_string(), acc)]),
    };
    Ok((params, record))
}

pub fn run_experiment(
    strategy: Strategy,
    task: TaskKind,
    warm_up: bool,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<RunRecord> {
    Ok(train_model(strategy, task, warm_up, cfg, seed)?.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StagingSetup {
    /// No learned temporal compressor: temporal pooling, fine-tune only.
    Baseline,
    /// Time-aware perceiver trained only in the fine-tuning stage.
    Direct,
    /// Time-aware perceiver with warm-up then fine-tuning.
    TwoStage,
}

impl StagingSetup {
    pub const ALL: [StagingSetup; 3] = [StagingSetup::Baseline, StagingSetup::Direct, StagingSetup::TwoStage];

    pub fn name(self) -> &'static str {
        match self {
            StagingSetup::Baseline => "baseline",
            StagingSetup::Direct => "direct",
            StagingSetup::TwoStage => "two-stage",
        }
    }

    fn strategy(self) -> Strategy {
        match self {
            StagingSetup::Baseline => Strategy::TemporalPool,
            _ => Strategy::TimePerceiver,
        }
    }
}

impl fmt::Display for StagingSetup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Mean and min/max spread over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

impl SeedSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        SeedSummary {
            mean: values.iter().sum::<f64>() / n,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagingRow {
    pub setup: StagingSetup,
    pub strategy: Strategy,
    pub accuracy: SeedSummary,
    pub runs: Vec<RunRecord>,
    /// Trained parameters, aligned with `runs`.
    #[serde(skip)]
    pub models: Vec<ModelParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagingTable {
    pub task: TaskKind,
    pub seeds: Vec<u64>,
    pub rows: Vec<StagingRow>,
}

impl StagingTable {
    pub fn row(&self, setup: StagingSetup) -> Option<&StagingRow> {
        self.rows.iter().find(|r| r.setup == setup)
    }

    /// One line per setup: mean, min, max and the per-seed accuracies
    /// separated by `;`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setup,strategy,accuracy_mean,accuracy_min,accuracy_max,per_seed\n");
        for r in &self.rows {
            let per: Vec<String> = r.accuracy.values.iter().map(f64::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.setup,
                r.strategy,
                r.accuracy.mean,
                r.accuracy.min,
                r.accuracy.max,
                per.join(";")
            ));
        }
        out
    }
}

/// Baseline vs direct vs two-stage training over several seeds. Runs are
/// independent and execute in parallel; results keep seed order.
pub fn run_staging_ablation(seeds: &[u64], task: TaskKind, cfg: &ExperimentConfig) -> Result<StagingTable> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!(
            "staging ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    if !task.is_classification() {
        return Err(Error::Config("staging ablation compares classification accuracy".into()));
    }
    let jobs: Vec<(StagingSetup, u64)> = StagingSetup::ALL
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let trained: Vec<(ModelParams, RunRecord)> = jobs
        .par_iter()
        .map(|&(setup, seed)| {
            train_model(setup.strategy(), task, setup == StagingSetup::TwoStage, cfg, seed)
        })
        .collect::<Result<_>>()?;

    let name = task.name();
    let rows = StagingSetup::ALL
        .iter()
        .enumerate()
        .map(|(i, &setup)| {
            let chunk = &trained[i * seeds.len()..(i + 1) * seeds.len()];
            let runs: Vec<RunRecord> = chunk.iter().map(|(_, r)| r.clone()).collect();
            let accs = runs.iter().map(|r| r.accuracies[name]).collect();
            StagingRow {
                setup,
                strategy: setup.strategy(),
                accuracy: SeedSummary::from_values(accs),
                runs,
                models: chunk.iter().map(|(m, _)| m.clone()).collect(),
            }
        })
        .collect();
    Ok(StagingTable {
        task,
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub strategy: Strategy,
    pub tolerance: f64,
    pub step: f64,
    pub entries: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max)
    }
}

/// Finite-difference step used by [`grad_check_model`].
pub const GRADCHECK_STEP: f64 = 1e-5;
const GRADCHECK_MAX_PARAMS: usize = 100_000;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub seed: u64,
    /// Check on an all-zero clip instead of mock features.
    pub zero_input: bool,
    /// Deliberately corrupt one backward rule (negative control).
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-4,
            seed: 0,
            zero_input: false,
            fault: None,
        }
    }
}

/// Central finite differences against the tape gradient for every parameter
/// of `spec` (plus its task head and the input frames), on the
/// change-direction loss of one sample.
pub fn grad_check_model(
    spec: &CompressorSpec,
    grid: usize,
    channels: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut params = ModelParams::init(spec, grid, channels, opts.seed)?;
    ensure_head(&mut params, TaskKind::ChangeDirection, opts.seed);
    if params.parameter_count() >= GRADCHECK_MAX_PARAMS {
        return Err(Error::Config(format!(
            "{} parameters is too many for a finite-difference check",
            params.parameter_count()
        )));
    }
    let sample = synth::gen_change_direction(grid, channels, opts.seed)?;
    let frames = if opts.zero_input {
        Array::zeros(sample.clip.values.shape())
    } else {
        sample.clip.values.clone()
    };

    let names: Vec<String> = params.arrays.keys().cloned().collect();
    let mut inputs: Vec<Array> = params.arrays.values().cloned().collect();
    inputs.push(frames);

    let loss_fn = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect());
        let x = *vars.last().expect("frames input");
        let out = forward_sample(tape, &bound, spec, x, TaskKind::ChangeDirection)?;
        sample_loss(tape, out, &sample.label)
    };
    let make_tape = || match opts.fault {
        Some((kind, factor)) => Tape::with_backward_fault(kind, factor),
        None => Tape::new(),
    };
    let checks = gradcheck::check_with(make_tape, loss_fn, &inputs, GRADCHECK_STEP)?;

    let entries = names
        .iter()
        .map(String::as_str)
        .chain(std::iter::once("input.frames"))
        .zip(checks)
        .map(|(name, c): (&str, InputCheck)| ParamCheck {
            name: name.to_string(),
            passed: c.max_relative_error < opts.tolerance && c.analytic.is_finite(),
            max_relative_error: c.max_relative_error,
            analytic: c.analytic,
            numeric: c.numeric,
        })
        .collect();
    Ok(GradCheckReport {
        strategy: spec.strategy,
        tolerance: opts.tolerance,
        step: GRADCHECK_STEP,
        entries,
    })
}
