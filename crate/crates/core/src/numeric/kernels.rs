//! Raw slice kernels shared by the tape and the eager helpers.

use crate::error::{Error, Result};

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // Logical A is m×k. When `a_t` the buffer holds Aᵀ (k×m) row-major.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three buffers, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = op(a) · op(b)` where `op` optionally transposes the stored matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    dgemm(m, k, n, a, a_t, b, b_t, c, 0.0)
}

/// `c += op(a) · op(b)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    dgemm(m, k, n, a, a_t, b, b_t, c, 1.0)
}

pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean and reciprocal standard deviation of one row.
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Splits `[.., G, G, D]` into (batch, G, D) and validates the stride.
fn grid_dims(shape: &[usize], stride: usize) -> Result<(usize, usize, usize)> {
    let r = shape.len();
    if r < 3 || shape[r - 3] != shape[r - 2] {
        return Err(Error::dim("avg_pool_grid", shape, &[stride]));
    }
    let g = shape[r - 3];
    if stride == 0 || g % stride != 0 {
        return Err(Error::Config(format!(
            "pooling stride {stride} does not divide grid side {g}"
        )));
    }
    let batch = shape[..r - 3].iter().product();
    Ok((batch, g, shape[r - 1]))
}

pub(crate) fn avg_pool_grid(
    x: &[f64],
    shape: &[usize],
    stride: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let (batch, g, d) = grid_dims(shape, stride)?;
    let go = g / stride;
    let inv = 1.0 / (stride * stride) as f64;
    let mut out = vec![0.0; batch * go * go * d];
    for b in 0..batch {
        let src = &x[b * g * g * d..(b + 1) * g * g * d];
        let dst = &mut out[b * go * go * d..(b + 1) * go * go * d];
        for oi in 0..go {
            for oj in 0..go {
                let cell = &mut dst[(oi * go + oj) * d..(oi * go + oj + 1) * d];
                for di in 0..stride {
                    for dj in 0..stride {
                        let (i, j) = (oi * stride + di, oj * stride + dj);
                        let px = &src[(i * g + j) * d..(i * g + j + 1) * d];
                        cell.iter_mut().zip(px).for_each(|(c, v)| *c += v);
                    }
                }
                cell.iter_mut().for_each(|c| *c *= inv);
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 3] = go;
    out_shape[r - 2] = go;
    Ok((out, out_shape))
}

pub(crate) fn avg_pool_grid_backward(g_out: &[f64], in_shape: &[usize], stride: usize, dx: &mut [f64]) {
    let (batch, g, d) = grid_dims(in_shape, stride).expect("validated in forward");
    let go = g / stride;
    let inv = 1.0 / (stride * stride) as f64;
    for b in 0..batch {
        for i in 0..g {
            for j in 0..g {
                let o = b * go * go * d + ((i / stride) * go + j / stride) * d;
                let p = b * g * g * d + (i * g + j) * d;
                for c in 0..d {
                    dx[p + c] += g_out[o + c] * inv;
                }
            }
        }
    }
}

pub(crate) fn mean_over_time(x: &[f64], shape: &[usize]) -> Result<Vec<f64>> {
    let t = *shape.first().ok_or(Error::EmptyInput("mean_over_time"))?;
    if t == 0 {
        return Err(Error::EmptyInput("mean_over_time"));
    }
    let frame = x.len() / t;
    let mut out = vec![0.0; frame];
    for chunk in x.chunks(frame.max(1)) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    let inv = 1.0 / t as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}
