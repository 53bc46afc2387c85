//! Token compression strategies.
//!
//! Five strategies are available: the 4x baseline (stride-2 pooling of every
//! frame), temporal pooling, extra spatial pooling, a perceiver with learned
//! queries, and the time-aware perceiver whose queries are the temporal mean
//! of stride-4 pooled features. The two perceivers sit next to a stride-2
//! pooled keyframe in each segment.

mod attention;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use attention::resample;
pub use attention::ResamplerTrace;
pub use params::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Bound, ModelParams,
    COMPRESSOR_GROUP, HEAD_PREFIX,
};

use crate::error::{Error, Result};
use crate::numeric::{Array, Tape, Var};
use crate::pipeline::BlockKind;

/// Frames a segment can hold; also the number of temporal position
/// embeddings.
pub const MAX_SEGMENT_FRAMES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "baseline4x")]
    Baseline4x,
    #[serde(rename = "temporal-pool")]
    TemporalPool,
    #[serde(rename = "spatial-pool")]
    SpatialPool,
    #[serde(rename = "perceiver")]
    Perceiver,
    #[serde(rename = "timeperceiver")]
    TimePerceiver,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Baseline4x,
        Strategy::TemporalPool,
        Strategy::SpatialPool,
        Strategy::Perceiver,
        Strategy::TimePerceiver,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline4x => "baseline4x",
            Strategy::TemporalPool => "temporal-pool",
            Strategy::SpatialPool => "spatial-pool",
            Strategy::Perceiver => "perceiver",
            Strategy::TimePerceiver => "timeperceiver",
        }
    }

    /// Whether the strategy has learnable compressor weights.
    pub fn is_learned(self) -> bool {
        matches!(self, Strategy::Perceiver | Strategy::TimePerceiver)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                let valid: Vec<&str> = Strategy::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown strategy '{s}'; valid names: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Strategy selector plus resampler hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressorSpec {
    pub strategy: Strategy,
    /// Output tokens of the perceivers, `(G/4)²` by default.
    pub queries: usize,
    pub heads: usize,
    pub temporal_pos: bool,
    /// Cross-attention blocks.
    pub depth: usize,
    /// Feed-forward hidden width as a multiple of the channel count.
    pub ffn_mult: usize,
}

impl CompressorSpec {
    pub fn new(strategy: Strategy, grid: usize) -> Self {
        CompressorSpec {
            strategy,
            queries: (grid / 4) * (grid / 4),
            heads: 4,
            temporal_pos: true,
            depth: 1,
            ffn_mult: 4,
        }
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn with_temporal_pos(mut self, on: bool) -> Self {
        self.temporal_pos = on;
        self
    }

    pub fn validate(&self, grid: usize, channels: usize) -> Result<()> {
        if grid == 0 || grid % 4 != 0 {
            return Err(Error::Config(format!(
                "grid side {grid} must be a positive multiple of 4"
            )));
        }
        if !self.strategy.is_learned() {
            return Ok(());
        }
        if self.heads == 0 || channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide {channels} channels",
                self.heads
            )));
        }
        if self.depth == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("depth and ffn_mult must be positive".into()));
        }
        let pooled = (grid / 4) * (grid / 4);
        if self.strategy == Strategy::TimePerceiver && self.queries != pooled {
            return Err(Error::Config(format!(
                "timeperceiver queries come from pooling and must number {pooled}, got {}",
                self.queries
            )));
        }
        if self.queries == 0 {
            return Err(Error::Config("query count must be positive".into()));
        }
        Ok(())
    }
}

fn grid_of(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    match *s {
        [g, g2, d] if g == g2 => Ok((g, d)),
        [_, g, g2, d] if g == g2 => Ok((g, d)),
        _ => Err(Error::dim(op, s, &[0, 0, 0])),
    }
}

/// Stride-2 pooling of one `[G, G, D]` frame, flattened to `[(G/2)², D]`.
pub fn keyframe_tokens(tape: &mut Tape, frame: Var) -> Result<Var> {
    let (g, d) = grid_of(tape, frame, "keyframe_compress")?;
    let p = tape.avg_pool_grid(frame, 2)?;
    tape.reshape(p, &[(g / 2) * (g / 2), d])
}

/// Stride-4 pooling of one frame, flattened to `[(G/4)², D]`.
pub fn spatial_pool_tokens(tape: &mut Tape, frame: Var) -> Result<Var> {
    let (g, d) = grid_of(tape, frame, "spatial_pool_compress")?;
    if g % 4 != 0 {
        return Err(Error::Config(format!(
            "grid side {g} is not divisible by 4"
        )));
    }
    let p = tape.avg_pool_grid(frame, 4)?;
    tape.reshape(p, &[(g / 4) * (g / 4), d])
}

/// Stride-2 pooling of each frame, then the mean over frames.
pub fn temporal_pool_tokens(tape: &mut Tape, frames: Var) -> Result<Var> {
    let (g, d) = grid_of(tape, frames, "temporal_pool_compress")?;
    let p = tape.avg_pool_grid(frames, 2)?;
    let m = tape.mean_over_time(p)?;
    tape.reshape(m, &[(g / 2) * (g / 2), d])
}

fn frame_count(tape: &Tape, frames: Var, op: &'static str) -> Result<usize> {
    match tape.shape(frames) {
        [t, _, _, _] => Ok(*t),
        s => Err(Error::dim(op, s, &[0, 0, 0, 0])),
    }
}

fn check_segment_frames(t: usize) -> Result<()> {
    if !(2..=MAX_SEGMENT_FRAMES).contains(&t) {
        return Err(Error::Input(format!(
            "temporal compressor needs 2 to {MAX_SEGMENT_FRAMES} frames, got {t}"
        )));
    }
    Ok(())
}

/// Time-aware perceiver over `[T, G, G, D]` frames: queries are the temporal
/// mean of stride-4 pooled features.
pub fn timeperceiver_tokens(
    tape: &mut Tape,
    frames: Var,
    bound: &Bound,
    spec: &CompressorSpec,
) -> Result<Var> {
    let t = frame_count(tape, frames, "timeperceiver_forward")?;
    check_segment_frames(t)?;
    let (g, d) = grid_of(tape, frames, "timeperceiver_forward")?;
    if g % 4 != 0 {
        return Err(Error::Config(format!("grid side {g} is not divisible by 4")));
    }
    let pooled = tape.avg_pool_grid(frames, 4)?;
    let mean = tape.mean_over_time(pooled)?;
    let queries = tape.reshape(mean, &[(g / 4) * (g / 4), d])?;
    Ok(resample(tape, queries, frames, bound, spec)?.output)
}

/// Perceiver with free learned queries over `[T, G, G, D]` frames.
pub fn perceiver_tokens(
    tape: &mut Tape,
    frames: Var,
    bound: &Bound,
    spec: &CompressorSpec,
) -> Result<Var> {
    let t = frame_count(tape, frames, "perceiver_forward")?;
    check_segment_frames(t)?;
    let queries = bound.get("queries")?;
    Ok(resample(tape, queries, frames, bound, spec)?.output)
}

/// Token blocks for one segment of `[T, G, G, D]` frames, in packing order.
pub fn compress_segment(
    tape: &mut Tape,
    frames: Var,
    bound: &Bound,
    spec: &CompressorSpec,
) -> Result<Vec<(BlockKind, Var)>> {
    let t = frame_count(tape, frames, "compress_segment")?;
    if t == 0 || t > MAX_SEGMENT_FRAMES {
        return Err(Error::Input(format!(
            "segment must hold 1 to {MAX_SEGMENT_FRAMES} frames, got {t}"
        )));
    }
    let (g, d) = grid_of(tape, frames, "compress_segment")?;
    let frame = |tape: &mut Tape, i: usize| -> Result<Var> {
        let f = tape.slice_rows(frames, i, 1)?;
        tape.reshape(f, &[g, g, d])
    };
    let mut blocks = Vec::new();
    match spec.strategy {
        Strategy::Baseline4x => {
            for i in 0..t {
                let f = frame(tape, i)?;
                blocks.push((BlockKind::Frame, keyframe_tokens(tape, f)?));
            }
        }
        Strategy::SpatialPool => {
            for i in 0..t {
                let f = frame(tape, i)?;
                blocks.push((BlockKind::Frame, spatial_pool_tokens(tape, f)?));
            }
        }
        Strategy::TemporalPool => {
            blocks.push((BlockKind::Temporal, temporal_pool_tokens(tape, frames)?));
        }
        Strategy::Perceiver | Strategy::TimePerceiver => {
            let key = frame(tape, 0)?;
            blocks.push((BlockKind::Keyframe, keyframe_tokens(tape, key)?));
            if t >= 2 {
                let temporal = if spec.strategy == Strategy::Perceiver {
                    perceiver_tokens(tape, frames, bound, spec)?
                } else {
                    timeperceiver_tokens(tape, frames, bound, spec)?
                };
                blocks.push((BlockKind::Temporal, temporal));
            }
        }
    }
    Ok(blocks)
}

fn eager(x: &Array, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Array> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

/// Keyframe block of a `[G, G, D]` frame: `[(G/2)², D]`.
pub fn keyframe_compress(frame: &Array) -> Result<Array> {
    eager(frame, keyframe_tokens)
}

/// `[(G/4)², D]` tokens for one frame.
pub fn spatial_pool_compress(frame: &Array) -> Result<Array> {
    eager(frame, spatial_pool_tokens)
}

/// `[(G/2)², D]` tokens for a `[T, G, G, D]` segment.
pub fn temporal_pool_compress(frames: &Array) -> Result<Array> {
    eager(frames, temporal_pool_tokens)
}

pub fn timeperceiver_forward(
    frames: &Array,
    params: &ModelParams,
    spec: &CompressorSpec,
) -> Result<Array> {
    check_forward(frames, params, spec, Strategy::TimePerceiver)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(frames.clone());
    let out = timeperceiver_tokens(&mut tape, x, &bound, spec)?;
    Ok(tape.value(out).clone())
}

pub fn perceiver_forward(
    frames: &Array,
    params: &ModelParams,
    spec: &CompressorSpec,
) -> Result<Array> {
    check_forward(frames, params, spec, Strategy::Perceiver)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(frames.clone());
    let out = perceiver_tokens(&mut tape, x, &bound, spec)?;
    Ok(tape.value(out).clone())
}

/// Attention weight matrices (`[Q, Q + T·G²]`, one per head and block) of a
/// perceiver forward pass.
pub fn attention_weights(
    frames: &Array,
    params: &ModelParams,
    spec: &CompressorSpec,
) -> Result<Vec<Array>> {
    check_forward(frames, params, spec, spec.strategy)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(frames.clone());
    let queries = match spec.strategy {
        Strategy::Perceiver => bound.get("queries")?,
        Strategy::TimePerceiver => {
            let (g, d) = grid_of(&tape, x, "attention_weights")?;
            let p = tape.avg_pool_grid(x, 4)?;
            let m = tape.mean_over_time(p)?;
            tape.reshape(m, &[(g / 4) * (g / 4), d])?
        }
        other => {
            return Err(Error::Config(format!("{other} has no attention")));
        }
    };
    let trace = resample(&mut tape, queries, x, &bound, spec)?;
    Ok(trace
        .attention
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect())
}

fn check_forward(
    frames: &Array,
    params: &ModelParams,
    spec: &CompressorSpec,
    expected: Strategy,
) -> Result<()> {
    if spec.strategy != expected {
        return Err(Error::Config(format!(
            "spec selects {}, expected {expected}",
            spec.strategy
        )));
    }
    match *frames.shape() {
        [_, g, g2, d] if g == g2 => params.check_compatible(spec, g, d),
        _ => Err(Error::dim("perceiver input", frames.shape(), &[0, 0, 0, 0])),
    }
}
