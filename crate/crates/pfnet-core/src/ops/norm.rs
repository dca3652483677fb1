//! Batch normalization (per channel over N,H,W) and layer normalization
//! (per token over the feature dimension).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const LN_EPS: f32 = 1e-6;

/// Per-channel statistics captured at forward time for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved {
    pub mean: Vec<f32>,
    pub invstd: Vec<f32>,
}

fn check_affine(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    let c = x.shape().c;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::Shape(format!(
            "batch norm affine length ({}, {}) does not match {} channels",
            gamma.numel(),
            beta.numel(),
            c
        )));
    }
    Ok(())
}

/// Training-mode forward: normalizes with batch statistics and returns the
/// biased per-channel mean/variance so the caller can update running stats.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, BnSaved, Vec<f32>)> {
    check_affine(x, gamma, beta)?;
    let xs = x.shape();
    let m = xs.n * xs.h * xs.w;
    if m == 0 {
        return Err(Error::Shape("batch norm over empty batch".into()));
    }
    let plane = xs.h * xs.w;
    let xd = x.data();

    let mut mean = vec![0.0f32; xs.c];
    let mut var = vec![0.0f32; xs.c];
    for c in 0..xs.c {
        let mut acc = 0.0f64;
        for n in 0..xs.n {
            let base = (n * xs.c + c) * plane;
            for &v in &xd[base..base + plane] {
                acc += v as f64;
            }
        }
        let mu = acc / m as f64;
        let mut vacc = 0.0f64;
        for n in 0..xs.n {
            let base = (n * xs.c + c) * plane;
            for &v in &xd[base..base + plane] {
                let d = v as f64 - mu;
                vacc += d * d;
            }
        }
        mean[c] = mu as f32;
        var[c] = (vacc / m as f64) as f32;
    }

    let invstd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0f32; x.numel()];
    let gd = gamma.data();
    let bd = beta.data();
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * plane;
            let (mu, is, g, b) = (mean[c], invstd[c], gd[c], bd[c]);
            for (o, &v) in out[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                *o = (v - mu) * is * g + b;
            }
        }
    }
    Ok((
        Tensor::new(xs, out)?,
        BnSaved { mean, invstd },
        var,
    ))
}

/// Eval-mode forward using running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> Result<Tensor> {
    check_affine(x, gamma, beta)?;
    let xs = x.shape();
    if running_mean.len() != xs.c || running_var.len() != xs.c {
        return Err(Error::Shape("running stats length mismatch".into()));
    }
    let plane = xs.h * xs.w;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0f32; x.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * plane;
            let scale = gd[c] / (running_var[c] + eps).sqrt();
            let shiftv = bd[c] - running_mean[c] * scale;
            for (o, &v) in out[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                *o = v * scale + shiftv;
            }
        }
    }
    Tensor::new(xs, out)
}

/// Training-mode backward.
pub fn batch_norm_backward_train(
    x: &Tensor,
    gamma: &Tensor,
    saved: &BnSaved,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let plane = xs.h * xs.w;
    let m = (xs.n * plane) as f64;
    let xd = x.data();
    let gd = grad_out.data();
    let gamma_d = gamma.data();

    let mut dgamma = vec![0.0f32; xs.c];
    let mut dbeta = vec![0.0f32; xs.c];
    let mut sum_dy = vec![0.0f64; xs.c];
    let mut sum_dy_xhat = vec![0.0f64; xs.c];

    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * plane;
            let (mu, is) = (saved.mean[c], saved.invstd[c]);
            let mut sd = 0.0f64;
            let mut sdx = 0.0f64;
            for (&dy, &v) in gd[base..base + plane].iter().zip(&xd[base..base + plane]) {
                let xhat = (v - mu) * is;
                sd += dy as f64;
                sdx += dy as f64 * xhat as f64;
            }
            sum_dy[c] += sd;
            sum_dy_xhat[c] += sdx;
        }
    }
    for c in 0..xs.c {
        dbeta[c] = sum_dy[c] as f32;
        dgamma[c] = sum_dy_xhat[c] as f32;
    }

    let mut dx = vec![0.0f32; x.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * plane;
            let (mu, is, g) = (saved.mean[c], saved.invstd[c], gamma_d[c]);
            let mean_dy = (sum_dy[c] / m) as f32;
            let mean_dy_xhat = (sum_dy_xhat[c] / m) as f32;
            for ((o, &dy), &v) in dx[base..base + plane]
                .iter_mut()
                .zip(&gd[base..base + plane])
                .zip(&xd[base..base + plane])
            {
                let xhat = (v - mu) * is;
                *o = g * is * (dy - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    (
        Tensor::new(xs, dx).expect("shape by construction"),
        Tensor::new(gamma.shape(), dgamma).expect("shape by construction"),
        Tensor::new(gamma.shape(), dbeta).expect("shape by construction"),
    )
}

/// Eval-mode backward (running stats are constants).
pub fn batch_norm_backward_eval(
    x: &Tensor,
    gamma: &Tensor,
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let plane = xs.h * xs.w;
    let xd = x.data();
    let gd = grad_out.data();
    let gamma_d = gamma.data();
    let mut dx = vec![0.0f32; x.numel()];
    let mut dgamma = vec![0.0f32; xs.c];
    let mut dbeta = vec![0.0f32; xs.c];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * plane;
            let is = 1.0 / (running_var[c] + eps).sqrt();
            let mu = running_mean[c];
            for ((o, &dy), &v) in dx[base..base + plane]
                .iter_mut()
                .zip(&gd[base..base + plane])
                .zip(&xd[base..base + plane])
            {
                *o = dy * gamma_d[c] * is;
                dgamma[c] += dy * (v - mu) * is;
                dbeta[c] += dy;
            }
        }
    }
    (
        Tensor::new(xs, dx).expect("shape by construction"),
        Tensor::new(gamma.shape(), dgamma).expect("shape by construction"),
        Tensor::new(gamma.shape(), dbeta).expect("shape by construction"),
    )
}

/// Per-row statistics for layer norm backward.
#[derive(Clone, Debug)]
pub struct LnSaved {
    pub mean: Vec<f32>,
    pub invstd: Vec<f32>,
}

/// Layer norm over the feature dimension of a token tensor (N,T,D,1).
pub fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, LnSaved)> {
    let xs = x.shape();
    let d = xs.h;
    if xs.w != 1 {
        return Err(Error::Shape(format!(
            "layer norm expects token layout (N,T,D,1), got {xs}"
        )));
    }
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::Shape("layer norm affine length mismatch".into()));
    }
    let rows = xs.n * xs.c;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0f32; x.numel()];
    let mut mean = vec![0.0f32; rows];
    let mut invstd = vec![0.0f32; rows];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mu = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let e = v as f64 - mu;
                e * e
            })
            .sum::<f64>()
            / d as f64;
        let is = 1.0 / (var + eps as f64).sqrt();
        mean[r] = mu as f32;
        invstd[r] = is as f32;
        for (i, (o, &v)) in out[r * d..(r + 1) * d].iter_mut().zip(row).enumerate() {
            *o = ((v as f64 - mu) * is) as f32 * gd[i] + bd[i];
        }
    }
    Ok((Tensor::new(xs, out)?, LnSaved { mean, invstd }))
}

pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    saved: &LnSaved,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let d = xs.h;
    let rows = xs.n * xs.c;
    let xd = x.data();
    let gd = grad_out.data();
    let gamma_d = gamma.data();
    let mut dx = vec![0.0f32; x.numel()];
    let mut dgamma = vec![0.0f32; d];
    let mut dbeta = vec![0.0f32; d];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let grow = &gd[r * d..(r + 1) * d];
        let (mu, is) = (saved.mean[r], saved.invstd[r]);
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for i in 0..d {
            let xhat = (row[i] - mu) * is;
            let dxhat = grow[i] * gamma_d[i];
            dgamma[i] += grow[i] * xhat;
            dbeta[i] += grow[i];
            sum_dxhat += dxhat as f64;
            sum_dxhat_xhat += (dxhat * xhat) as f64;
        }
        let inv_d = 1.0 / d as f64;
        for i in 0..d {
            let xhat = (row[i] - mu) * is;
            let dxhat = (grow[i] * gamma_d[i]) as f64;
            dx[r * d + i] =
                (is as f64 * (dxhat - sum_dxhat * inv_d - xhat as f64 * sum_dxhat_xhat * inv_d))
                    as f32;
        }
    }
    (
        Tensor::new(xs, dx).expect("shape by construction"),
        Tensor::new(gamma.shape(), dgamma).expect("shape by construction"),
        Tensor::new(gamma.shape(), dbeta).expect("shape by construction"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_init, InitScheme};
    use crate::tensor::Shape;

    #[test]
    fn train_mode_normalizes() {
        let x = rng_init(Shape::new(4, 3, 4, 4), InitScheme::Uniform(-2.0, 5.0), 11);
        let gamma = Tensor::ones(Shape::new(3, 1, 1, 1));
        let beta = Tensor::zeros(Shape::new(3, 1, 1, 1));
        let (y, _, _) = batch_norm_train(&x, &gamma, &beta, BN_EPS).unwrap();
        let ys = y.shape();
        let plane = ys.h * ys.w;
        for c in 0..3 {
            let mut acc = 0.0f64;
            let mut acc2 = 0.0f64;
            for n in 0..4 {
                for &v in &y.data()[(n * 3 + c) * plane..(n * 3 + c + 1) * plane] {
                    acc += v as f64;
                    acc2 += (v * v) as f64;
                }
            }
            let m = (4 * plane) as f64;
            let mean = acc / m;
            let var = acc2 / m - mean * mean;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let x = rng_init(Shape::new(2, 3, 3, 3), InitScheme::Uniform(-1.0, 1.0), 3);
        let gamma = Tensor::ones(Shape::new(3, 1, 1, 1));
        let beta = Tensor::zeros(Shape::new(3, 1, 1, 1));
        let y = batch_norm_eval(&x, &gamma, &beta, &[0.0; 3], &[1.0; 3], BN_EPS).unwrap();
        assert!(x.max_diff(&y) < 1e-5);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::zeros(Shape::new(1, 3, 2, 2));
        let gamma = Tensor::ones(Shape::new(2, 1, 1, 1));
        let beta = Tensor::zeros(Shape::new(2, 1, 1, 1));
        assert!(matches!(
            batch_norm_train(&x, &gamma, &beta, BN_EPS),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let x = rng_init(Shape::new(2, 5, 8, 1), InitScheme::Uniform(-3.0, 3.0), 17);
        let gamma = Tensor::ones(Shape::new(8, 1, 1, 1));
        let beta = Tensor::zeros(Shape::new(8, 1, 1, 1));
        let (y, _) = layer_norm(&x, &gamma, &beta, LN_EPS).unwrap();
        for r in 0..10 {
            let row = &y.data()[r * 8..(r + 1) * 8];
            let mean: f32 = row.iter().sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-5);
        }
    }
}
