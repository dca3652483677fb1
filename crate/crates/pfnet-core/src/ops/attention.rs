//! Fused multi-head self-attention over token tensors (N,T,D,1).

use crate::error::{Error, Result};
use crate::ops::linear::{linear, linear_backward};
use crate::tensor::{Shape, Tensor};

/// Intermediates kept for the backward pass.
pub struct AttnSaved {
    pub qkv: Tensor,    // (N, T, 3D, 1)
    pub weights: Tensor, // (N, heads, T, T) softmax rows
    pub ctx: Tensor,    // (N, T, D, 1) pre-projection context
}

fn check(x: &Tensor, wqkv: &Tensor, wo: &Tensor, heads: usize) -> Result<(usize, usize, usize)> {
    let xs = x.shape();
    let d = xs.h;
    if xs.w != 1 {
        return Err(Error::Shape(format!("attention expects (N,T,D,1), got {xs}")));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model dim {d} not divisible by {heads} heads"
        )));
    }
    if wqkv.shape() != Shape::new(3 * d, d, 1, 1) {
        return Err(Error::Shape(format!(
            "qkv weight must be (3D,D,1,1), got {}",
            wqkv.shape()
        )));
    }
    if wo.shape() != Shape::new(d, d, 1, 1) {
        return Err(Error::Shape(format!(
            "output projection must be (D,D,1,1), got {}",
            wo.shape()
        )));
    }
    Ok((xs.n, xs.c, d))
}

/// Scaled dot-product attention with a fused qkv projection, per-head
/// softmax over keys and an output projection.
///
/// `biases` carries (query bias, value bias), each of length D. There is
/// deliberately no key bias: a shared offset on every key shifts each
/// score row uniformly and cancels in the softmax, leaving it with an
/// identically zero gradient.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    x: &Tensor,
    wqkv: &Tensor,
    biases: Option<(&Tensor, &Tensor)>,
    wo: &Tensor,
    bo: Option<&Tensor>,
    heads: usize,
) -> Result<(Tensor, AttnSaved)> {
    let (n, t, d) = check(x, wqkv, wo, heads)?;
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();

    let mut qkv = linear(x, wqkv, None)?; // (N, T, 3D, 1)
    if let Some((bq, bv)) = biases {
        if bq.numel() != d || bv.numel() != d {
            return Err(Error::Shape(format!(
                "attention biases must have {d} elements each"
            )));
        }
        let data = qkv.make_mut();
        let (bqd, bvd) = (bq.data(), bv.data());
        for row in 0..n * t {
            let base = row * 3 * d;
            for i in 0..d {
                data[base + i] += bqd[i];
                data[base + 2 * d + i] += bvd[i];
            }
        }
    }
    let qd = qkv.data();
    let stride = 3 * d;

    let mut weights = vec![0.0f32; n * heads * t * t];
    let mut ctx = vec![0.0f32; n * t * d];

    for b in 0..n {
        for h in 0..heads {
            let q_off = h * hd;
            let k_off = d + h * hd;
            let v_off = 2 * d + h * hd;
            let wbase = (b * heads + h) * t * t;
            for i in 0..t {
                let qi = &qd[(b * t + i) * stride + q_off..(b * t + i) * stride + q_off + hd];
                let wrow = &mut weights[wbase + i * t..wbase + (i + 1) * t];
                let mut maxv = f32::NEG_INFINITY;
                for (j, wv) in wrow.iter_mut().enumerate() {
                    let kj = &qd[(b * t + j) * stride + k_off..(b * t + j) * stride + k_off + hd];
                    let mut dot = 0.0f32;
                    for (a, b2) in qi.iter().zip(kj) {
                        dot += a * b2;
                    }
                    *wv = dot * scale;
                    maxv = maxv.max(*wv);
                }
                let mut denom = 0.0f64;
                for wv in wrow.iter_mut() {
                    let e = ((*wv - maxv) as f64).exp();
                    *wv = e as f32;
                    denom += e;
                }
                for wv in wrow.iter_mut() {
                    *wv = (*wv as f64 / denom) as f32;
                }
                // ctx_i = sum_j A_ij * v_j
                let crow = &mut ctx[(b * t + i) * d + h * hd..(b * t + i) * d + (h + 1) * hd];
                for j in 0..t {
                    let a = wrow[j];
                    let vj = &qd[(b * t + j) * stride + v_off..(b * t + j) * stride + v_off + hd];
                    for (c, &v) in crow.iter_mut().zip(vj) {
                        *c += a * v;
                    }
                }
            }
        }
    }

    let ctx = Tensor::new(Shape::new(n, t, d, 1), ctx)?;
    let out = linear(&ctx, wo, bo)?;
    let saved = AttnSaved {
        qkv,
        weights: Tensor::new(Shape::new(n, heads, t, t), weights)?,
        ctx,
    };
    Ok((out, saved))
}

pub struct AttnGrads {
    pub x: Tensor,
    pub wqkv: Tensor,
    /// (query bias, value bias) gradients.
    pub biases: Option<(Tensor, Tensor)>,
    pub wo: Tensor,
    pub bo: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention_backward(
    x: &Tensor,
    wqkv: &Tensor,
    has_biases: bool,
    wo: &Tensor,
    has_bo: bool,
    heads: usize,
    saved: &AttnSaved,
    grad_out: &Tensor,
) -> AttnGrads {
    let xs = x.shape();
    let (n, t, d) = (xs.n, xs.c, xs.h);
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let stride = 3 * d;

    // Through the output projection.
    let (dctx, dwo, dbo) = linear_backward(&saved.ctx, wo, has_bo, grad_out);

    let qd = saved.qkv.data();
    let wd = saved.weights.data();
    let dctx_d = dctx.data();
    let mut dqkv = vec![0.0f32; n * t * stride];

    for b in 0..n {
        for h in 0..heads {
            let q_off = h * hd;
            let k_off = d + h * hd;
            let v_off = 2 * d + h * hd;
            let wbase = (b * heads + h) * t * t;
            for i in 0..t {
                let dci = &dctx_d[(b * t + i) * d + h * hd..(b * t + i) * d + (h + 1) * hd];
                let arow = &wd[wbase + i * t..wbase + (i + 1) * t];
                // dA_ij = dot(dctx_i, v_j); dV_j += A_ij * dctx_i
                let mut da = vec![0.0f32; t];
                for j in 0..t {
                    let vj = &qd[(b * t + j) * stride + v_off..(b * t + j) * stride + v_off + hd];
                    let mut dot = 0.0f32;
                    for (a, b2) in dci.iter().zip(vj) {
                        dot += a * b2;
                    }
                    da[j] = dot;
                    let dvj = &mut dqkv
                        [(b * t + j) * stride + v_off..(b * t + j) * stride + v_off + hd];
                    for (dv, &g) in dvj.iter_mut().zip(dci) {
                        *dv += arow[j] * g;
                    }
                }
                // softmax backward: dS_ij = A_ij * (dA_ij - sum_k dA_ik A_ik)
                let mut dot = 0.0f64;
                for j in 0..t {
                    dot += (da[j] * arow[j]) as f64;
                }
                for j in 0..t {
                    let ds = arow[j] * (da[j] - dot as f32) * scale;
                    // dQ_i += ds * K_j ; dK_j += ds * Q_i
                    let kj = &qd[(b * t + j) * stride + k_off..(b * t + j) * stride + k_off + hd];
                    let qi = &qd[(b * t + i) * stride + q_off..(b * t + i) * stride + q_off + hd];
                    {
                        let dqi = &mut dqkv
                            [(b * t + i) * stride + q_off..(b * t + i) * stride + q_off + hd];
                        for (dq, &kv) in dqi.iter_mut().zip(kj) {
                            *dq += ds * kv;
                        }
                    }
                    {
                        let dkj = &mut dqkv
                            [(b * t + j) * stride + k_off..(b * t + j) * stride + k_off + hd];
                        for (dk, &qv) in dkj.iter_mut().zip(qi) {
                            *dk += ds * qv;
                        }
                    }
                }
            }
        }
    }

    let biases = if has_biases {
        let mut dbq = vec![0.0f32; d];
        let mut dbv = vec![0.0f32; d];
        for row in 0..n * t {
            let base = row * 3 * d;
            for i in 0..d {
                dbq[i] += dqkv[base + i];
                dbv[i] += dqkv[base + 2 * d + i];
            }
        }
        Some((
            Tensor::new(Shape::new(d, 1, 1, 1), dbq).expect("shape by construction"),
            Tensor::new(Shape::new(d, 1, 1, 1), dbv).expect("shape by construction"),
        ))
    } else {
        None
    };
    let dqkv = Tensor::new(Shape::new(n, t, 3 * d, 1), dqkv).expect("shape by construction");
    let (dx, dwqkv, _) = linear_backward(x, wqkv, false, &dqkv);
    AttnGrads {
        x: dx,
        wqkv: dwqkv,
        biases,
        wo: dwo,
        bo: dbo,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_init, InitScheme};

    #[test]
    fn single_token_attention_weight_is_one() {
        let d = 4;
        let x = rng_init(Shape::new(1, 1, d, 1), InitScheme::Uniform(-1.0, 1.0), 5);
        let wqkv = rng_init(Shape::new(3 * d, d, 1, 1), InitScheme::Uniform(-0.5, 0.5), 6);
        let wo = rng_init(Shape::new(d, d, 1, 1), InitScheme::Uniform(-0.5, 0.5), 7);
        let (_, saved) = multi_head_attention(&x, &wqkv, None, &wo, None, 2).unwrap();
        assert!(saved.weights.data().iter().all(|&w| (w - 1.0).abs() < 1e-6));
    }

    #[test]
    fn identical_tokens_give_uniform_rows() {
        let d = 6;
        let t = 5;
        let row = rng_init(Shape::new(1, 1, d, 1), InitScheme::Uniform(-1.0, 1.0), 8);
        let mut data = Vec::new();
        for _ in 0..t {
            data.extend_from_slice(row.data());
        }
        let x = Tensor::from_vec([1, t, d, 1], data).unwrap();
        let wqkv = rng_init(Shape::new(3 * d, d, 1, 1), InitScheme::Uniform(-0.5, 0.5), 9);
        let wo = rng_init(Shape::new(d, d, 1, 1), InitScheme::Uniform(-0.5, 0.5), 10);
        let (_, saved) = multi_head_attention(&x, &wqkv, None, &wo, None, 3).unwrap();
        let expect = 1.0 / t as f32;
        assert!(saved
            .weights
            .data()
            .iter()
            .all(|&w| (w - expect).abs() < 1e-6));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let x = Tensor::zeros(Shape::new(1, 2, 6, 1));
        let wqkv = Tensor::zeros(Shape::new(18, 6, 1, 1));
        let wo = Tensor::zeros(Shape::new(6, 6, 1, 1));
        assert!(matches!(
            multi_head_attention(&x, &wqkv, None, &wo, None, 4),
            Err(Error::Config(_))
        ));
    }
}
