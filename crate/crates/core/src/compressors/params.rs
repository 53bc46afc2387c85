use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Array, ParamSet, Tape, Var};

use super::{CompressorSpec, Strategy, MAX_SEGMENT_FRAMES};

pub const COMPRESSOR_GROUP: &str = "compressor";
/// Task heads are named `head.<task>.w` / `head.<task>.b`.
pub const HEAD_PREFIX: &str = "head.";

const POS_EMBED_STD: f64 = 0.2;

/// Learnable arrays of a compressor plus any task heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: CompressorSpec,
    pub grid: usize,
    pub channels: usize,
    pub arrays: ParamSet,
}

/// Parameters registered on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub(crate) fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Bound { vars }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    // Variance 1 / fan_in.
    let a = (3.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Array::new(vec![rows, cols], data).expect("finite init")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Array::new(shape.to_vec(), data).expect("finite init")
}

impl ModelParams {
    /// Seeded initialization of the compressor weights. Pooling strategies
    /// have none.
    pub fn init(spec: &CompressorSpec, grid: usize, channels: usize, seed: u64) -> Result<Self> {
        spec.validate(grid, channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arrays = ParamSet::new();
        if spec.strategy.is_learned() {
            let d = channels;
            let hidden = d * spec.ffn_mult;
            for l in 0..spec.depth {
                let mut put = |name: &str, a: Array| {
                    arrays.insert(format!("block{l}.{name}"), a);
                };
                for ln in ["ln_q", "ln_kv", "ln_ff"] {
                    put(&format!("{ln}.gamma"), Array::full(&[d], 1.0));
                    put(&format!("{ln}.beta"), Array::zeros(&[d]));
                }
                for w in ["wq", "wk", "wv", "wo"] {
                    put(&format!("attn.{w}"), uniform(&mut rng, d, d));
                }
                put("ff.w1", uniform(&mut rng, d, hidden));
                put("ff.b1", Array::zeros(&[hidden]));
                put("ff.w2", uniform(&mut rng, hidden, d));
                put("ff.b2", Array::zeros(&[d]));
            }
            if spec.temporal_pos {
                arrays.insert(
                    "pos_embed".into(),
                    normal(&mut rng, &[MAX_SEGMENT_FRAMES, d], POS_EMBED_STD),
                );
            }
            if spec.strategy == Strategy::Perceiver {
                arrays.insert("queries".into(), normal(&mut rng, &[spec.queries, d], 1.0));
            }
        }
        Ok(ModelParams {
            spec: spec.clone(),
            grid,
            channels,
            arrays,
        })
    }

    /// Adds a linear head mapping `inputs` flattened token features to
    /// `outputs` values.
    pub fn add_head(&mut self, task: &str, inputs: usize, outputs: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.arrays
            .insert(format!("{HEAD_PREFIX}{task}.w"), uniform(&mut rng, inputs, outputs));
        self.arrays
            .insert(format!("{HEAD_PREFIX}{task}.b"), Array::zeros(&[outputs]));
    }

    /// Group a parameter belongs to: [`COMPRESSOR_GROUP`] or `head.<task>`.
    pub fn group_of(name: &str) -> String {
        match name.strip_prefix(HEAD_PREFIX) {
            Some(rest) => {
                let task = rest.split('.').next().unwrap_or(rest);
                format!("{HEAD_PREFIX}{task}")
            }
            None => COMPRESSOR_GROUP.to_string(),
        }
    }

    pub fn groups(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<String> =
            self.arrays.keys().map(|k| Self::group_of(k)).collect();
        set.into_iter().collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    /// Registers every array on `tape` once.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .arrays
                .iter()
                .map(|(k, a)| (k.clone(), tape.leaf(a.clone())))
                .collect(),
        }
    }

    /// Checks that these parameters can run `spec` on `grid`×`grid`×`channels`
    /// frames.
    pub fn check_compatible(&self, spec: &CompressorSpec, grid: usize, channels: usize) -> Result<()> {
        spec.validate(grid, channels)?;
        if spec.strategy != self.spec.strategy {
            return Err(Error::Config(format!(
                "parameters are for {}, spec selects {}",
                self.spec.strategy, spec.strategy
            )));
        }
        if !spec.strategy.is_learned() {
            return Ok(());
        }
        if channels != self.channels {
            return Err(Error::Config(format!(
                "parameters expect {} channels, clip has {channels}",
                self.channels
            )));
        }
        let need = |name: &str, shape: &[usize]| -> Result<()> {
            match self.arrays.get(name) {
                Some(a) if a.shape() == shape => Ok(()),
                Some(a) => Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    a.shape()
                ))),
                None => Err(Error::Config(format!("missing parameter {name}"))),
            }
        };
        let d = channels;
        for l in 0..spec.depth {
            need(&format!("block{l}.attn.wq"), &[d, d])?;
            need(&format!("block{l}.ff.w1"), &[d, d * spec.ffn_mult])?;
        }
        if spec.temporal_pos {
            need("pos_embed", &[MAX_SEGMENT_FRAMES, d])?;
        }
        match spec.strategy {
            Strategy::Perceiver => need("queries", &[spec.queries, d])?,
            _ if self.arrays.contains_key("queries") => {
                return Err(Error::Config(
                    "learned queries only exist for the perceiver strategy".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"SFPARAMS";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    spec: CompressorSpec,
    grid: usize,
    channels: usize,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes parameters to the flat little-endian container described in
/// `docs/formats.md`. Entries are written in name order, so equal parameters
/// produce equal bytes.
pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let meta = serde_json::to_vec(&CheckpointMeta {
        spec: params.spec.clone(),
        grid: params.grid,
        channels: params.channels,
    })?;
    put_u32(&mut buf, meta.len() as u32);
    buf.extend_from_slice(&meta);
    put_u32(&mut buf, params.arrays.len() as u32);
    for (name, a) in &params.arrays {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, a.rank() as u32);
        for &dim in a.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in a.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Input("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Input("not a parameter checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Input(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let count = r.u32()?;
    let mut arrays = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Input("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Input("bad shape".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.insert(name, Array::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Input("trailing bytes after checkpoint".into()));
    }
    Ok(ModelParams {
        spec: meta.spec,
        grid: meta.grid,
        channels: meta.channels,
        arrays,
    })
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&fs::read(path)?)
}
