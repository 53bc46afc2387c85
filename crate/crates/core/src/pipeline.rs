//! Frame sampling, segmentation and token accounting.

use serde::{Deserialize, Serialize};

use crate::compressors::{self, CompressorSpec, ModelParams, Strategy};
use crate::error::{Error, Result};
use crate::numeric::{Array, Tape};
use crate::synth::FrameFeatureClip;

/// Frames per segment; the first one is the keyframe.
pub const SEGMENT_LEN: usize = 4;
pub const DEFAULT_RATE: f64 = 1.0;
pub const DEFAULT_FRAME_CAP: usize = 96;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub duration: f64,
    pub rate: f64,
    pub cap: usize,
    pub timestamps: Vec<f64>,
}

impl SamplingPlan {
    pub fn frame_count(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_capped(&self) -> bool {
        ((self.duration * self.rate).floor() as usize) > self.cap
    }
}

/// Picks frame timestamps: one per `1 / rate` seconds, or `cap` frames at the
/// centres of equal bins once the video is longer than the cap allows.
pub fn plan_sampling(duration: f64, rate: f64, cap: usize) -> Result<SamplingPlan> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Input(format!("duration must be positive, got {duration}")));
    }
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Input(format!("sample rate must be positive, got {rate}")));
    }
    if cap == 0 {
        return Err(Error::Input("frame cap must be at least 1".into()));
    }
    let natural = ((duration * rate).floor() as usize).max(1);
    let timestamps = if natural <= cap {
        (0..natural).map(|i| i as f64 / rate).collect()
    } else {
        let bin = duration / cap as f64;
        (0..cap).map(|i| (i as f64 + 0.5) * bin).collect()
    };
    Ok(SamplingPlan {
        duration,
        rate,
        cap,
        timestamps,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// Indices into the sampled frame sequence, consecutive.
    pub frames: Vec<usize>,
}

impl Segment {
    pub fn keyframe(&self) -> usize {
        self.frames[0]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn start(&self) -> usize {
        self.frames[0]
    }
}

/// Splits `frames` sampled frames into runs of four; the last run holds the
/// remainder.
pub fn segmentize(frames: usize) -> Result<Vec<Segment>> {
    if frames == 0 {
        return Err(Error::EmptyInput("segmentize"));
    }
    Ok((0..frames)
        .step_by(SEGMENT_LEN)
        .map(|start| Segment {
            frames: (start..(start + SEGMENT_LEN).min(frames)).collect(),
        })
        .collect())
}

/// Visual tokens for `frames` frames when every segment carries a
/// `keyframe_tokens` block plus, unless it has a single frame, a
/// `temporal_tokens` block.
pub fn token_count(frames: usize, keyframe_tokens: usize, temporal_tokens: usize) -> usize {
    let full = frames / SEGMENT_LEN;
    let rest = frames % SEGMENT_LEN;
    let tail = match rest {
        0 => 0,
        1 => keyframe_tokens,
        _ => keyframe_tokens + temporal_tokens,
    };
    full * (keyframe_tokens + temporal_tokens) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// Stride-2 pooled keyframe.
    Keyframe,
    /// Output of a temporal compressor over the whole segment.
    Temporal,
    /// A per-frame block (baseline and spatial-pool strategies).
    Frame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenBlock {
    pub kind: BlockKind,
    /// `[tokens, D]`.
    pub tokens: Array,
}

impl TokenBlock {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One segment's packed tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentTokens {
    pub segment: Segment,
    pub blocks: Vec<TokenBlock>,
}

impl SegmentTokens {
    pub fn token_count(&self) -> usize {
        self.blocks.iter().map(TokenBlock::len).sum()
    }

    pub fn keyframe(&self) -> Option<&Array> {
        self.block(BlockKind::Keyframe)
    }

    pub fn temporal(&self) -> Option<&Array> {
        self.block(BlockKind::Temporal)
    }

    fn block(&self, kind: BlockKind) -> Option<&Array> {
        self.blocks.iter().find(|b| b.kind == kind).map(|b| &b.tokens)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoTokenSequence {
    pub frames: usize,
    pub segments: Vec<SegmentTokens>,
}

impl VideoTokenSequence {
    pub fn total_tokens(&self) -> usize {
        self.segments.iter().map(SegmentTokens::token_count).sum()
    }

    /// Floor of total tokens over sampled frames.
    pub fn tokens_per_frame(&self) -> usize {
        self.total_tokens() / self.frames.max(1)
    }

    /// All tokens in temporal order as one `[N, D]` array.
    pub fn concatenated(&self) -> Result<Array> {
        let d = self
            .segments
            .first()
            .and_then(|s| s.blocks.first())
            .map(|b| b.tokens.shape()[1])
            .ok_or(Error::EmptyInput("VideoTokenSequence::concatenated"))?;
        let data: Vec<f64> = self
            .segments
            .iter()
            .flat_map(|s| s.blocks.iter())
            .flat_map(|b| b.tokens.data().iter().copied())
            .collect();
        Array::new(vec![data.len() / d, d], data)
    }

    pub fn manifest(&self) -> TokenManifest {
        let mut offset = 0;
        let segments = self
            .segments
            .iter()
            .enumerate()
            .map(|(index, s)| {
                let blocks = s
                    .blocks
                    .iter()
                    .map(|b| {
                        let entry = BlockEntry {
                            kind: b.kind,
                            offset,
                            tokens: b.len(),
                        };
                        offset += b.len();
                        entry
                    })
                    .collect();
                SegmentEntry {
                    index,
                    frames: s.segment.frames.clone(),
                    keyframe: s.segment.keyframe(),
                    tokens: s.token_count(),
                    blocks,
                }
            })
            .collect();
        TokenManifest {
            version: MANIFEST_VERSION,
            frames: self.frames,
            total_tokens: self.total_tokens(),
            tokens_per_frame: self.tokens_per_frame(),
            segments,
        }
    }
}

pub const MANIFEST_VERSION: u32 = 1;

/// JSON description of a packed video: per-segment counts and offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenManifest {
    pub version: u32,
    pub frames: usize,
    pub total_tokens: usize,
    pub tokens_per_frame: usize,
    pub segments: Vec<SegmentEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub index: usize,
    pub frames: Vec<usize>,
    pub keyframe: usize,
    pub tokens: usize,
    pub blocks: Vec<BlockEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub kind: BlockKind,
    pub offset: usize,
    pub tokens: usize,
}

/// Packs every segment of `clip` with the configured strategy.
pub fn pack_video(
    clip: &FrameFeatureClip,
    spec: &CompressorSpec,
    params: &ModelParams,
) -> Result<VideoTokenSequence> {
    if clip.grid % 4 != 0 {
        return Err(Error::Config(format!(
            "grid side {} must be a multiple of 4",
            clip.grid
        )));
    }
    params.check_compatible(spec, clip.grid, clip.channels)?;
    let segments = segmentize(clip.frames)?
        .into_iter()
        .map(|segment| {
            let frames = clip.frames_range(segment.start(), segment.len())?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.leaf(frames);
            let blocks = compressors::compress_segment(&mut tape, x, &bound, spec)?
                .into_iter()
                .map(|(kind, v)| TokenBlock {
                    kind,
                    tokens: tape.value(v).clone(),
                })
                .collect();
            Ok(SegmentTokens { segment, blocks })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoTokenSequence {
        frames: clip.frames,
        segments,
    })
}

/// Tokens a strategy emits for `frames` frames at grid side `grid`.
pub fn strategy_token_count(strategy: Strategy, frames: usize, grid: usize) -> usize {
    let kf = (grid / 2) * (grid / 2);
    let q = (grid / 4) * (grid / 4);
    match strategy {
        Strategy::Baseline4x => frames * kf,
        Strategy::TemporalPool => frames.div_ceil(SEGMENT_LEN) * kf,
        Strategy::SpatialPool => frames * q,
        Strategy::Perceiver | Strategy::TimePerceiver => token_count(frames, kf, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sampling_examples() {
        let p = plan_sampling(10.0, 1.0, 96).unwrap();
        assert_eq!(p.timestamps, (0..10).map(f64::from).collect::<Vec<_>>());
        assert_eq!(plan_sampling(96.0, 1.0, 96).unwrap().frame_count(), 96);

        let p = plan_sampling(192.0, 1.0, 96).unwrap();
        assert_eq!(p.frame_count(), 96);
        assert!(p.is_capped());
        assert_eq!(p.timestamps[0], 1.0);
        assert_eq!(*p.timestamps.last().unwrap(), 191.0);
        for w in p.timestamps.windows(2) {
            assert!((w[1] - w[0] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn short_video_still_gets_a_frame() {
        let p = plan_sampling(0.4, 1.0, 96).unwrap();
        assert_eq!(p.timestamps, vec![0.0]);
    }

    #[test]
    fn sampling_rejects_bad_input() {
        assert!(matches!(plan_sampling(0.0, 1.0, 96), Err(Error::Input(_))));
        assert!(matches!(plan_sampling(-3.0, 1.0, 96), Err(Error::Input(_))));
        assert!(plan_sampling(10.0, 0.0, 96).is_err());
        assert!(plan_sampling(10.0, 1.0, 0).is_err());
    }

    #[test]
    fn segment_examples() {
        let s = segmentize(96).unwrap();
        assert_eq!(s.len(), 24);
        assert!(s.iter().all(|s| s.len() == 4));
        assert_eq!(segmentize(1).unwrap(), vec![Segment { frames: vec![0] }]);
        let sizes: Vec<usize> = segmentize(5).unwrap().iter().map(Segment::len).collect();
        assert_eq!(sizes, vec![4, 1]);
        assert_eq!(segmentize(5).unwrap()[1].keyframe(), 4);
        assert!(matches!(segmentize(0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn token_count_examples() {
        assert_eq!(token_count(96, 196, 49), 5_880);
        assert_eq!(token_count(1, 196, 49), 196);
        assert_eq!(token_count(4, 196, 49), 245);
        assert_eq!(token_count(5, 196, 49), 441);
        assert_eq!(token_count(6, 196, 49), 490);
        assert_eq!(token_count(96, 196, 49) / 96, 61);
    }

    proptest! {
        #[test]
        fn segment_sizes_follow_remainder_rule(t in 1usize..500) {
            let segs = segmentize(t).unwrap();
            prop_assert_eq!(segs.len(), t.div_ceil(4));
            let last = segs.last().unwrap().len();
            prop_assert_eq!(last, (t - 1) % 4 + 1);
            prop_assert!(segs[..segs.len() - 1].iter().all(|s| s.len() == 4));
            let flat: Vec<usize> = segs.iter().flat_map(|s| s.frames.clone()).collect();
            prop_assert_eq!(flat, (0..t).collect::<Vec<_>>());
        }

        #[test]
        fn token_count_matches_segment_sum(t in 1usize..500, kf in 1usize..300, q in 0usize..100) {
            let by_segment: usize = segmentize(t).unwrap().iter()
                .map(|s| if s.len() == 1 { kf } else { kf + q })
                .sum();
            prop_assert_eq!(token_count(t, kf, q), by_segment);
            prop_assert!(token_count(t + 1, kf, q) >= token_count(t, kf, q));
        }

        #[test]
        fn full_segments_give_61_tokens_per_frame(n in 1usize..200) {
            prop_assert_eq!(token_count(4 * n, 196, 49) / (4 * n), 61);
        }

        #[test]
        fn capped_gaps_are_uniform(duration in 97.0f64..20_000.0, rate in 0.5f64..4.0) {
            let p = plan_sampling(duration, rate, 96).unwrap();
            prop_assume!(p.is_capped());
            prop_assert_eq!(p.frame_count(), 96);
            let gaps: Vec<f64> = p.timestamps.windows(2).map(|w| w[1] - w[0]).collect();
            let (lo, hi) = gaps.iter().fold((f64::MAX, f64::MIN), |(a, b), &g| (a.min(g), b.max(g)));
            prop_assert!(hi - lo < 1.0 / rate);
            prop_assert!(p.timestamps.iter().all(|&t| (0.0..duration).contains(&t)));
        }
    }
}
