//! Deterministic frame features and synthetic tasks with known ground truth.
//!
//! Every value produced here lies on a 2⁻¹⁰ grid and stays well inside
//! [-10, 10]. Sums of a handful of such values are exact in `f64`, so
//! temporal means of mirrored clips compare equal bit for bit.

use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Array;

/// Frames per synthetic sample (one full segment).
pub const SAMPLE_FRAMES: usize = 4;

const QUANTUM: f64 = 1024.0;
const WAVES_PER_CHANNEL: usize = 3;
/// Static background is scaled down so injected changes dominate it.
const BACKGROUND_GAIN: f64 = 0.5;
/// Ramp offsets for the change-direction task, in units of the signature.
const RAMP: [f64; 4] = [-3.0, -1.0, 1.0, 3.0];
/// Time-symmetric, zero-mean flicker for the changed-cell task.
const FLICKER: [f64; 4] = [4.0, -4.0, -4.0, 4.0];
const SIGNATURE_SEED: u64 = 0x5157_a7e5;
const MAX_MOVING_CELLS: usize = 4;

fn quantize(v: f64) -> f64 {
    (v * QUANTUM).round() / QUANTUM
}

/// Stand-in for vision-encoder output: a `[T, G, G, D]` feature grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatureClip {
    pub frames: usize,
    pub grid: usize,
    pub channels: usize,
    pub values: Array,
    pub seed: u64,
}

impl FrameFeatureClip {
    pub fn tokens_per_frame(&self) -> usize {
        self.grid * self.grid
    }

    /// One frame as a `[G, G, D]` array.
    pub fn frame(&self, t: usize) -> Result<Array> {
        let n = self.grid * self.grid * self.channels;
        let data = self
            .values
            .data()
            .get(t * n..(t + 1) * n)
            .ok_or_else(|| Error::Input(format!("frame {t} out of range")))?
            .to_vec();
        Array::new(vec![self.grid, self.grid, self.channels], data)
    }

    /// Frames `start..start + len` as a `[len, G, G, D]` array.
    pub fn frames_range(&self, start: usize, len: usize) -> Result<Array> {
        let n = self.grid * self.grid * self.channels;
        let data = self
            .values
            .data()
            .get(start * n..(start + len) * n)
            .ok_or_else(|| Error::Input(format!("frames {start}..{} out of range", start + len)))?
            .to_vec();
        Array::new(vec![len, self.grid, self.grid, self.channels], data)
    }

    fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Ok(FrameFeatureClip {
            values: Array::new(self.values.shape().to_vec(), values)?,
            ..self.clone()
        })
    }
}

fn check_dims(frames: usize, grid: usize, channels: usize) -> Result<()> {
    if frames == 0 || channels == 0 {
        return Err(Error::Config(format!(
            "clip needs at least one frame and one channel, got T={frames} D={channels}"
        )));
    }
    if grid == 0 || grid % 4 != 0 {
        return Err(Error::Config(format!(
            "grid side {grid} must be a positive multiple of 4"
        )));
    }
    Ok(())
}

/// Smooth pseudo-random features: each channel is a sum of a few plane waves
/// drifting slowly in phase from frame to frame.
pub fn mock_encode(frames: usize, grid: usize, channels: usize, seed: u64) -> Result<FrameFeatureClip> {
    check_dims(frames, grid, channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (amplitude, fx, fy, phase, drift)
    let waves: Vec<[f64; 5]> = (0..channels * WAVES_PER_CHANNEL)
        .map(|_| {
            let max_freq = 4.0 * PI / grid as f64;
            [
                rng.random_range(0.2..0.6),
                rng.random_range(-max_freq..max_freq),
                rng.random_range(-max_freq..max_freq),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(-0.5..0.5),
            ]
        })
        .collect();

    let mut values = Vec::with_capacity(frames * grid * grid * channels);
    for t in 0..frames {
        for i in 0..grid {
            for j in 0..grid {
                for d in 0..channels {
                    let v: f64 = waves[d * WAVES_PER_CHANNEL..(d + 1) * WAVES_PER_CHANNEL]
                        .iter()
                        .map(|&[a, fx, fy, ph, dr]| {
                            a * (fx * i as f64 + fy * j as f64 + ph + dr * t as f64).sin()
                        })
                        .sum();
                    values.push(quantize(v));
                }
            }
        }
    }
    Ok(FrameFeatureClip {
        frames,
        grid,
        channels,
        values: Array::new(vec![frames, grid, grid, channels], values)?,
        seed,
    })
}

/// Fixed unit-norm channel direction along which synthetic changes happen.
/// Components are multiples of 1/64.
pub fn change_signature(channels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED ^ channels as u64);
    let raw: Vec<f64> = (0..channels).map(|_| rng.sample(StandardNormal)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    raw.iter().map(|v| (v / norm * 64.0).round() / 64.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    ChangeDirection,
    ChangedCell,
    CaptionRegression,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::ChangeDirection,
        TaskKind::ChangedCell,
        TaskKind::CaptionRegression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ChangeDirection => "change-direction",
            TaskKind::ChangedCell => "changed-cell",
            TaskKind::CaptionRegression => "caption-regression",
        }
    }

    pub fn is_classification(self) -> bool {
        !matches!(self, TaskKind::CaptionRegression)
    }

    /// Class count for classification tasks, target length for regression.
    pub fn output_dim(self, grid: usize) -> usize {
        match self {
            TaskKind::ChangeDirection => 2,
            TaskKind::ChangedCell => grid * grid,
            TaskKind::CaptionRegression => 4,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                let valid: Vec<&str> = TaskKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown task '{s}'; valid names: {}", valid.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Label {
    Class(usize),
    Target(Vec<f64>),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Target(_) => None,
        }
    }

    pub fn target(&self) -> Option<&[f64]> {
        match self {
            Label::Target(t) => Some(t),
            Label::Class(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub task: TaskKind,
    pub clip: FrameFeatureClip,
    pub label: Label,
    /// Grid cells (row-major index) the generator perturbed.
    pub changed_cells: Vec<usize>,
}

/// Static background clip: frame 0 of the mock encoder repeated.
fn static_clip(grid: usize, channels: usize, seed: u64) -> Result<FrameFeatureClip> {
    let base = mock_encode(1, grid, channels, seed)?;
    let frame: Vec<f64> = base
        .values
        .data()
        .iter()
        .map(|v| quantize(v * BACKGROUND_GAIN))
        .collect();
    let values = frame.repeat(SAMPLE_FRAMES);
    Ok(FrameFeatureClip {
        frames: SAMPLE_FRAMES,
        grid,
        channels,
        values: Array::new(vec![SAMPLE_FRAMES, grid, grid, channels], values)?,
        seed,
    })
}

/// Adds `offsets[t] * scale * signature` to `cell` in every frame.
fn perturb_cell(
    values: &mut [f64],
    grid: usize,
    channels: usize,
    cell: usize,
    offsets: &[f64; SAMPLE_FRAMES],
    scale: f64,
    signature: &[f64],
) {
    let frame = grid * grid * channels;
    for (t, off) in offsets.iter().enumerate() {
        let base = t * frame + cell * channels;
        for (d, u) in signature.iter().enumerate() {
            values[base + d] += off * scale * u;
        }
    }
}

/// The two mirrored clips of the change-direction task for one seed:
/// `(up, down)`. They share background and changed cell; only the ramp
/// order differs, so their temporal means are identical.
pub fn gen_change_direction_pair(
    grid: usize,
    channels: usize,
    seed: u64,
) -> Result<(SyntheticSample, SyntheticSample)> {
    check_dims(SAMPLE_FRAMES, grid, channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = rng.random_range(0..grid * grid);
    let background = static_clip(grid, channels, rng.random())?;
    let u = change_signature(channels);

    let make = |ramp: [f64; 4], class: usize| -> Result<SyntheticSample> {
        let mut values = background.values.data().to_vec();
        perturb_cell(&mut values, grid, channels, cell, &ramp, 1.0, &u);
        Ok(SyntheticSample {
            task: TaskKind::ChangeDirection,
            clip: FrameFeatureClip {
                seed,
                ..background.with_values(values)?
            },
            label: Label::Class(class),
            changed_cells: vec![cell],
        })
    };
    let mut down = RAMP;
    down.reverse();
    Ok((make(RAMP, 1)?, make(down, 0)?))
}

/// One cell's magnitude ramps up (label 1) or down (label 0) over four
/// frames; everything else is static.
pub fn gen_change_direction(grid: usize, channels: usize, seed: u64) -> Result<SyntheticSample> {
    let (up, down) = gen_change_direction_pair(grid, channels, seed)?;
    // Separate stream for the label so it is independent of the pair.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Ok(if rng.random_bool(0.5) { up } else { down })
}

/// One cell flickers with a time-symmetric pattern; the label is its
/// row-major index.
pub fn gen_changed_cell(grid: usize, channels: usize, seed: u64) -> Result<SyntheticSample> {
    check_dims(SAMPLE_FRAMES, grid, channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = rng.random_range(0..grid * grid);
    let background = static_clip(grid, channels, rng.random())?;
    let mut values = background.values.data().to_vec();
    perturb_cell(
        &mut values,
        grid,
        channels,
        cell,
        &FLICKER,
        1.0,
        &change_signature(channels),
    );
    Ok(SyntheticSample {
        task: TaskKind::ChangedCell,
        clip: FrameFeatureClip {
            seed,
            ..background.with_values(values)?
        },
        label: Label::Class(cell),
        changed_cells: vec![cell],
    })
}

/// Per-quadrant motion along the change signature: for each quadrant
/// (row-major over the 2×2 split of the grid) the mean over its cells of
/// `(last frame − first frame) · signature`.
pub fn caption_target(clip: &FrameFeatureClip) -> Vec<f64> {
    let (g, d, t) = (clip.grid, clip.channels, clip.frames);
    let u = change_signature(d);
    let half = g / 2;
    let frame = g * g * d;
    let x = clip.values.data();
    let mut target = vec![0.0; 4];
    for i in 0..g {
        for j in 0..g {
            let q = (i / half) * 2 + j / half;
            let first = &x[(i * g + j) * d..(i * g + j + 1) * d];
            let last = &x[(t - 1) * frame + (i * g + j) * d..(t - 1) * frame + (i * g + j + 1) * d];
            target[q] += last
                .iter()
                .zip(first)
                .zip(&u)
                .map(|((l, f), u)| (l - f) * u)
                .sum::<f64>();
        }
    }
    let cells = (half * half) as f64;
    target.iter_mut().for_each(|v| *v /= cells);
    target
}

/// A few cells drift linearly along the change signature with random signed
/// slopes; the target is [`caption_target`].
pub fn gen_caption_regression(grid: usize, channels: usize, seed: u64) -> Result<SyntheticSample> {
    check_dims(SAMPLE_FRAMES, grid, channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = static_clip(grid, channels, rng.random())?;
    let u = change_signature(channels);
    let moving = rng.random_range(1..=MAX_MOVING_CELLS.min(grid * grid));
    let mut cells: Vec<usize> = Vec::with_capacity(moving);
    while cells.len() < moving {
        let c = rng.random_range(0..grid * grid);
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    let mut values = background.values.data().to_vec();
    for &cell in &cells {
        // Slopes are multiples of 1/8 in [-1, 1].
        let slope = f64::from(rng.random_range(-8i32..=8)) / 8.0;
        perturb_cell(&mut values, grid, channels, cell, &RAMP, slope, &u);
    }
    let clip = FrameFeatureClip {
        seed,
        ..background.with_values(values)?
    };
    Ok(SyntheticSample {
        task: TaskKind::CaptionRegression,
        label: Label::Target(caption_target(&clip)),
        clip,
        changed_cells: cells,
    })
}

pub fn generate(task: TaskKind, grid: usize, channels: usize, seed: u64) -> Result<SyntheticSample> {
    match task {
        TaskKind::ChangeDirection => gen_change_direction(grid, channels, seed),
        TaskKind::ChangedCell => gen_changed_cell(grid, channels, seed),
        TaskKind::CaptionRegression => gen_caption_regression(grid, channels, seed),
    }
}

/// `count` samples with per-sample seeds derived from `seed`.
pub fn generate_many(
    task: TaskKind,
    grid: usize,
    channels: usize,
    seed: u64,
    count: usize,
) -> Result<Vec<SyntheticSample>> {
    (0..count as u64)
        .map(|i| generate(task, grid, channels, sample_seed(seed, i)))
        .collect()
}

/// Change-direction evaluation set made of mirrored pairs, `2 * pairs`
/// samples with exactly balanced labels.
pub fn change_direction_pairs(
    grid: usize,
    channels: usize,
    seed: u64,
    pairs: usize,
) -> Result<Vec<SyntheticSample>> {
    let mut out = Vec::with_capacity(2 * pairs);
    for i in 0..pairs as u64 {
        let (up, down) = gen_change_direction_pair(grid, channels, sample_seed(seed, i))?;
        out.push(up);
        out.push(down);
    }
    Ok(out)
}

/// SplitMix64 step, so neighbouring run seeds give unrelated sample seeds.
pub fn sample_seed(run_seed: u64, index: u64) -> u64 {
    let mut z = run_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Corpus {
    version: u32,
    samples: Vec<SyntheticSample>,
}

/// Writes samples as one JSON document (see `docs/formats.md`).
pub fn write_corpus(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        file,
        &Corpus {
            version: CORPUS_VERSION,
            samples: samples.to_vec(),
        },
    )?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<SyntheticSample>> {
    let corpus: Corpus = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if corpus.version != CORPUS_VERSION {
        return Err(Error::Input(format!(
            "unsupported corpus version {}",
            corpus.version
        )));
    }
    Ok(corpus.samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::mean_over_time;

    #[test]
    fn paper_scale_shape() {
        let clip = mock_encode(4, 28, 1152, 7).unwrap();
        assert_eq!(clip.values.shape(), &[4, 28, 28, 1152]);
        assert_eq!(clip.tokens_per_frame(), 784);
    }

    #[test]
    fn encoder_is_deterministic_per_seed() {
        let a = mock_encode(1, 4, 2, 0).unwrap();
        let b = mock_encode(1, 4, 2, 0).unwrap();
        assert!(a.values.bit_eq(&b.values));
        let c = mock_encode(2, 8, 4, 0).unwrap();
        let d = mock_encode(2, 8, 4, 1).unwrap();
        assert!(c.values.max_abs_diff(&d.values).unwrap() > 0.0);
    }

    #[test]
    fn encoder_rejects_bad_grid() {
        assert!(matches!(mock_encode(1, 6, 2, 0), Err(Error::Config(_))));
        assert!(matches!(gen_changed_cell(10, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn mirrored_pair_has_identical_time_mean() {
        for seed in 0..50 {
            let (up, down) = gen_change_direction_pair(8, 16, seed).unwrap();
            assert_eq!(up.label, Label::Class(1));
            assert_eq!(down.label, Label::Class(0));
            let a = mean_over_time(&up.clip.values).unwrap();
            let b = mean_over_time(&down.clip.values).unwrap();
            assert!(a.bit_eq(&b), "seed {seed}");
            assert!(up.clip.values.max_abs_diff(&down.clip.values).unwrap() > 1.0);
        }
    }

    #[test]
    fn ramp_is_monotone_in_the_changed_cell() {
        let s = gen_change_direction(8, 16, 3).unwrap();
        let u = change_signature(16);
        let cell = s.changed_cells[0];
        let proj: Vec<f64> = (0..4)
            .map(|t| {
                let f = s.clip.frame(t).unwrap();
                f.data()[cell * 16..(cell + 1) * 16]
                    .iter()
                    .zip(&u)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let up = s.label == Label::Class(1);
        for w in proj.windows(2) {
            assert_eq!(w[1] > w[0], up, "{proj:?}");
        }
    }

    #[test]
    fn changed_cell_index_convention() {
        let s = (0..2000)
            .map(|seed| gen_changed_cell(8, 4, seed).unwrap())
            .find(|s| s.changed_cells[0] == 0)
            .unwrap();
        assert_eq!(s.label, Label::Class(0));
    }

    #[test]
    fn static_clip_has_zero_caption_target() {
        let clip = static_clip(8, 16, 11).unwrap();
        assert_eq!(caption_target(&clip), vec![0.0; 4]);
    }

    #[test]
    fn caption_target_is_linear_in_amplitude() {
        let s = gen_caption_regression(8, 16, 5).unwrap();
        let doubled = s
            .clip
            .with_values(s.clip.values.data().iter().map(|v| v * 2.0).collect())
            .unwrap();
        let t = caption_target(&s.clip);
        for (a, b) in caption_target(&doubled).iter().zip(&t) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        assert!(t.iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn values_are_bounded() {
        for seed in 0..20 {
            for task in [
                TaskKind::ChangeDirection,
                TaskKind::ChangedCell,
                TaskKind::CaptionRegression,
            ] {
                let s = generate(task, 8, 16, seed).unwrap();
                assert!(s.clip.values.max_abs() <= 10.0);
            }
        }
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.json");
        let samples = vec![
            gen_change_direction(4, 3, 1).unwrap(),
            gen_caption_regression(4, 3, 2).unwrap(),
        ];
        write_corpus(&path, &samples).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), samples);
    }
}
