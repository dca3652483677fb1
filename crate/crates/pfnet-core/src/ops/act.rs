//! Pointwise activations, softmax and the classification loss.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape(), data).expect("shape by construction")
}

/// Subgradient 0 at the kink.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data).expect("shape by construction")
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
        .collect();
    Tensor::new(x.shape(), data).expect("shape by construction")
}

pub fn gelu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let inner = GELU_C * (v + 0.044715 * v * v * v);
            let t = inner.tanh();
            let sech2 = 1.0 - t * t;
            let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * dinner)
        })
        .collect();
    Tensor::new(x.shape(), data).expect("shape by construction")
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    Tensor::new(x.shape(), data).expect("shape by construction")
}

pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::new(y.shape(), data).expect("shape by construction")
}

fn axis_extents(shape: Shape, axis: usize) -> Result<(usize, usize, usize)> {
    let dims = shape.dims();
    if axis >= 4 {
        return Err(Error::Shape(format!("softmax axis {axis} out of range")));
    }
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    Ok((outer, dims[axis], inner))
}

/// Softmax along `axis` with the row max subtracted before exponentiation.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_extents(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![0.0f32; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let mut maxv = f32::NEG_INFINITY;
            for a in 0..len {
                maxv = maxv.max(xd[at(a)]);
            }
            let mut denom = 0.0f64;
            for a in 0..len {
                let e = ((xd[at(a)] - maxv) as f64).exp();
                out[at(a)] = e as f32;
                denom += e;
            }
            for a in 0..len {
                out[at(a)] = (out[at(a)] as f64 / denom) as f32;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn softmax_backward(y: &Tensor, axis: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (outer, len, inner) = axis_extents(y.shape(), axis)?;
    let yd = y.data();
    let gd = grad_out.data();
    let mut dx = vec![0.0f32; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let mut dot = 0.0f64;
            for a in 0..len {
                dot += (gd[at(a)] * yd[at(a)]) as f64;
            }
            for a in 0..len {
                dx[at(a)] = yd[at(a)] * (gd[at(a)] - dot as f32);
            }
        }
    }
    Tensor::new(y.shape(), dx)
}

/// Mean cross-entropy over the batch with optional label smoothing.
/// Logits live in the channel dimension: (N, K, 1, 1).
/// Returns (scalar loss, softmax probabilities) — the probabilities are the
/// saved state for the backward pass.
pub fn cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    smoothing: f32,
) -> Result<(Tensor, Tensor)> {
    let ls = logits.shape();
    if ls.h != 1 || ls.w != 1 {
        return Err(Error::Shape(format!("logits must be (N,K,1,1), got {ls}")));
    }
    if targets.len() != ls.n {
        return Err(Error::Shape(format!(
            "{} targets for batch of {}",
            targets.len(),
            ls.n
        )));
    }
    let k = ls.c;
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Shape(format!("target {bad} out of {k} classes")));
    }
    let probs = softmax(logits, 1)?;
    let ld = logits.data();
    let off = smoothing / k as f32;
    let on = 1.0 - smoothing + off;
    let mut total = 0.0f64;
    for n in 0..ls.n {
        let row = &ld[n * k..(n + 1) * k];
        let maxv = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = row
            .iter()
            .map(|&v| ((v - maxv) as f64).exp())
            .sum::<f64>()
            .ln()
            + maxv as f64;
        // loss_n = -sum_c target_c * log p_c, with the smoothed target.
        let mut loss_n = 0.0f64;
        for (c, &v) in row.iter().enumerate() {
            let t = if c == targets[n] { on } else { off };
            if t != 0.0 {
                loss_n -= t as f64 * (v as f64 - lse);
            }
        }
        total += loss_n;
    }
    let loss = Tensor::scalar((total / ls.n as f64) as f32);
    Ok((loss, probs))
}

/// d loss / d logits = (softmax - smoothed target) / N, scaled by the
/// incoming scalar gradient.
pub fn cross_entropy_backward(
    probs: &Tensor,
    targets: &[usize],
    smoothing: f32,
    grad_scalar: f32,
) -> Tensor {
    let ps = probs.shape();
    let k = ps.c;
    let off = smoothing / k as f32;
    let on = 1.0 - smoothing + off;
    let scale = grad_scalar / ps.n as f32;
    let mut dx = probs.data().to_vec();
    for n in 0..ps.n {
        for c in 0..k {
            let t = if c == targets[n] { on } else { off };
            dx[n * k + c] = (dx[n * k + c] - t) * scale;
        }
    }
    Tensor::new(ps, dx).expect("shape by construction")
}
