use crate::error::{Error, Result};
use crate::numeric::{Tape, Var};

use super::{Bound, CompressorSpec};

pub(super) const LN_EPS: f64 = 1e-5;

/// Output of [`resample`] with the per-head attention matrices kept for
/// inspection.
#[derive(Debug)]
pub struct ResamplerTrace {
    pub output: Var,
    pub attention: Vec<Var>,
}

/// Pre-norm cross-attention resampler.
///
/// Each block normalizes the latents and the flattened frames separately,
/// attends from the latents to the concatenation `[latents; frames]`, adds
/// the result to the latents and applies a residual feed-forward layer.
/// With temporal position embeddings on, frame `t` gets row `t` of
/// `pos_embed` added to all its tokens first.
pub fn resample(
    tape: &mut Tape,
    latents: Var,
    frames: Var,
    bound: &Bound,
    spec: &CompressorSpec,
) -> Result<ResamplerTrace> {
    let (t, g, d) = match *tape.shape(frames) {
        [t, g, _, d] => (t, g, d),
        ref s => return Err(Error::dim("resample", s, &[0, 0, 0, 0])),
    };
    let q = tape.shape(latents)[0];
    if tape.shape(latents) != [q, d] {
        return Err(Error::dim("resample", tape.shape(latents), &[q, d]));
    }

    let mut media = tape.reshape(frames, &[t * g * g, d])?;
    if spec.temporal_pos {
        let pos = bound.get("pos_embed")?;
        let rows = tape.slice_rows(pos, 0, t)?;
        let per_token = tape.repeat_rows(rows, g * g)?;
        media = tape.add(media, per_token)?;
    }

    let dh = d / spec.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = latents;
    let mut attention = Vec::with_capacity(spec.depth * spec.heads);
    for l in 0..spec.depth {
        let p = |name: &str| bound.get(&format!("block{l}.{name}"));

        let lat = tape.layer_norm(x, p("ln_q.gamma")?, p("ln_q.beta")?, LN_EPS)?;
        let med = tape.layer_norm(media, p("ln_kv.gamma")?, p("ln_kv.beta")?, LN_EPS)?;
        let kv = tape.concat_rows(&[lat, med])?;

        let qp = tape.matmul(lat, p("attn.wq")?)?;
        let kp = tape.matmul(kv, p("attn.wk")?)?;
        let vp = tape.matmul(kv, p("attn.wv")?)?;

        let mut heads = Vec::with_capacity(spec.heads);
        for h in 0..spec.heads {
            let qh = tape.cols(qp, h * dh, dh)?;
            let kh = tape.cols(kp, h * dh, dh)?;
            let vh = tape.cols(vp, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            attention.push(weights);
            heads.push(tape.matmul(weights, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let out = tape.matmul(merged, p("attn.wo")?)?;
        x = tape.add(x, out)?;

        let h = tape.layer_norm(x, p("ln_ff.gamma")?, p("ln_ff.beta")?, LN_EPS)?;
        let h = tape.matmul(h, p("ff.w1")?)?;
        let h = tape.add_row(h, p("ff.b1")?)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, p("ff.w2")?)?;
        let h = tape.add_row(h, p("ff.b2")?)?;
        x = tape.add(x, h)?;
    }
    Ok(ResamplerTrace {
        output: x,
        attention,
    })
}
