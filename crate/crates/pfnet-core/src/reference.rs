//! Obviously-correct f64 reference kernels.
//!
//! Everything here is written as direct loops over the mathematical
//! definition, with no shared code with the fast f32 paths in [`crate::ops`].
//! The oracle tests pin the fast paths against these, and the gradient
//! checker differentiates through them numerically.

use crate::ops::{ConvSpec, DeformGeom, PoolKind, PoolSpec, ShiftAssignment};
use crate::tensor::Tensor;

/// Dense f64 tensor mirroring the engine layout (N,C,H,W).
#[derive(Clone, Debug)]
pub struct RTensor {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl RTensor {
    pub fn zeros(dims: [usize; 4]) -> Self {
        RTensor {
            data: vec![0.0; dims.iter().product()],
            dims,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let d = t.shape().dims();
        RTensor {
            dims: d,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.dims, self.data.iter().map(|&v| v as f32).collect())
            .expect("length by construction")
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, h, w)]
    }

    /// Zero-padded read.
    #[inline]
    pub fn at_pad(&self, n: usize, c: usize, h: isize, w: isize) -> f64 {
        if h < 0 || w < 0 || h >= self.dims[2] as isize || w >= self.dims[3] as isize {
            0.0
        } else {
            self.at(n, c, h as usize, w as usize)
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn max_diff_f32(&self, t: &Tensor) -> f64 {
        assert_eq!(self.dims, t.shape().dims());
        self.data
            .iter()
            .zip(t.data())
            .fold(0.0f64, |m, (&a, &b)| m.max((a - b as f64).abs()))
    }
}

/// Naive direct convolution: six nested loops over the definition.
pub fn conv2d(x: &RTensor, w: &RTensor, bias: Option<&RTensor>, spec: &ConvSpec) -> RTensor {
    let [n, cin, h, win] = x.dims;
    assert_eq!(cin, spec.in_channels);
    let k = spec.kernel;
    let (r, p, g) = (spec.stride, spec.padding, spec.groups);
    let cig = spec.in_channels / g;
    let cog = spec.out_channels / g;
    let ho = (h + 2 * p - k) / r + 1;
    let wo = (win + 2 * p - k) / r + 1;
    let mut out = RTensor::zeros([n, spec.out_channels, ho, wo]);
    for b in 0..n {
        for o in 0..spec.out_channels {
            let gi = o / cog;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb.data[o]);
                    for cl in 0..cig {
                        let c = gi * cig + cl;
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * r + kh) as isize - p as isize;
                                let iw = (ow * r + kw) as isize - p as isize;
                                let wv = w.data[((o * cig + cl) * k + kh) * k + kw];
                                acc += wv * x.at_pad(b, c, ih, iw);
                            }
                        }
                    }
                    let i = out.idx(b, o, oh, ow);
                    out.data[i] = acc;
                }
            }
        }
    }
    out
}

/// Window-enumeration max pooling (padding never wins).
pub fn max_pool2d(x: &RTensor, spec: &PoolSpec) -> RTensor {
    pool(x, spec, true)
}

/// Window-enumeration average pooling.
pub fn avg_pool2d(x: &RTensor, spec: &PoolSpec) -> RTensor {
    pool(x, spec, false)
}

fn pool(x: &RTensor, spec: &PoolSpec, take_max: bool) -> RTensor {
    let [n, c, h, w] = x.dims;
    let k = spec.kernel;
    let (r, p) = (spec.stride, spec.padding);
    let ho = (h + 2 * p - k) / r + 1;
    let wo = (w + 2 * p - k) / r + 1;
    let mut out = RTensor::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut acc = 0.0f64;
                    let mut count = 0usize;
                    for kh in 0..k {
                        for kw in 0..k {
                            let ih = (oh * r + kh) as isize - p as isize;
                            let iw = (ow * r + kw) as isize - p as isize;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                continue;
                            }
                            let v = x.at(b, ch, ih as usize, iw as usize);
                            best = best.max(v);
                            acc += v;
                            count += 1;
                        }
                    }
                    let i = out.idx(b, ch, oh, ow);
                    out.data[i] = if take_max {
                        best
                    } else {
                        let div = if spec.avg_count_excludes_padding {
                            count
                        } else {
                            k * k
                        };
                        acc / div as f64
                    };
                }
            }
        }
    }
    out
}

/// The argmax-impulse construction: per output cell, build the one-hot
/// window kernel that selects the largest input and apply it as a
/// multiply-sum. Equals max pooling by construction, but computed the
/// long way round.
pub fn max_pool_impulse(x: &RTensor, spec: &PoolSpec) -> RTensor {
    let [n, c, h, w] = x.dims;
    let k = spec.kernel;
    let (r, p) = (spec.stride, spec.padding);
    let ho = (h + 2 * p - k) / r + 1;
    let wo = (w + 2 * p - k) / r + 1;
    let mut out = RTensor::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    // First pass: locate the argmax position (h*, w*).
                    let mut best = f64::NEG_INFINITY;
                    let mut star = (0usize, 0usize);
                    for kh in 0..k {
                        for kw in 0..k {
                            let ih = (oh * r + kh) as isize - p as isize;
                            let iw = (ow * r + kw) as isize - p as isize;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                continue;
                            }
                            let v = x.at(b, ch, ih as usize, iw as usize);
                            if v > best {
                                best = v;
                                star = (kh, kw);
                            }
                        }
                    }
                    // Second pass: impulse kernel W with W[h*,w*] = 1.
                    let mut acc = 0.0f64;
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = if (kh, kw) == star { 1.0 } else { 0.0 };
                            if wv != 0.0 {
                                let ih = (oh * r + kh) as isize - p as isize;
                                let iw = (ow * r + kw) as isize - p as isize;
                                acc += wv * x.at_pad(b, ch, ih, iw);
                            }
                        }
                    }
                    let i = out.idx(b, ch, oh, ow);
                    out.data[i] = acc;
                }
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &RTensor) -> RTensor {
    let [n, c, h, w] = x.dims;
    let mut out = RTensor::zeros([n, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += x.at(b, ch, i, j);
                }
            }
            out.data[b * c + ch] = acc / (h * w) as f64;
        }
    }
    out
}

pub fn shift(x: &RTensor, assign: &ShiftAssignment, stride: usize) -> RTensor {
    let [n, c, h, w] = x.dims;
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut out = RTensor::zeros([n, c, ho, wo]);
    for b in 0..n {
        for (v, &(dh, dw)) in assign.offsets.iter().enumerate() {
            for oh in 0..ho {
                for ow in 0..wo {
                    let ih = (oh * stride) as isize + dh as isize;
                    let iw = (ow * stride) as isize + dw as isize;
                    let i = out.idx(b, v, oh, ow);
                    out.data[i] = x.at_pad(b, v, ih, iw);
                }
            }
        }
    }
    out
}

/// Two-pass batch statistics, then normalize + affine.
pub fn batch_norm_train(x: &RTensor, gamma: &[f64], beta: &[f64], eps: f64) -> RTensor {
    let [n, c, h, w] = x.dims;
    let m = (n * h * w) as f64;
    let mut out = RTensor::zeros(x.dims);
    for ch in 0..c {
        let mut mean = 0.0;
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    mean += x.at(b, ch, i, j);
                }
            }
        }
        mean /= m;
        let mut var = 0.0;
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    var += (x.at(b, ch, i, j) - mean).powi(2);
                }
            }
        }
        var /= m;
        let invstd = 1.0 / (var + eps).sqrt();
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let v = (x.at(b, ch, i, j) - mean) * invstd * gamma[ch] + beta[ch];
                    let id = out.idx(b, ch, i, j);
                    out.data[id] = v;
                }
            }
        }
    }
    out
}

pub fn batch_norm_eval(
    x: &RTensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> RTensor {
    let [n, c, h, w] = x.dims;
    let mut out = RTensor::zeros(x.dims);
    for ch in 0..c {
        let invstd = 1.0 / (var[ch] + eps).sqrt();
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let v = (x.at(b, ch, i, j) - mean[ch]) * invstd * gamma[ch] + beta[ch];
                    let id = out.idx(b, ch, i, j);
                    out.data[id] = v;
                }
            }
        }
    }
    out
}

pub fn layer_norm(x: &RTensor, gamma: &[f64], beta: &[f64], eps: f64) -> RTensor {
    let [n, t, d, _] = x.dims;
    let rows = n * t;
    let mut out = RTensor::zeros(x.dims);
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let invstd = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            out.data[r * d + i] = (row[i] - mean) * invstd * gamma[i] + beta[i];
        }
    }
    out
}

pub fn relu(x: &RTensor) -> RTensor {
    RTensor {
        dims: x.dims,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn gelu(x: &RTensor) -> RTensor {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    RTensor {
        dims: x.dims,
        data: x
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()))
            .collect(),
    }
}

pub fn sigmoid(x: &RTensor) -> RTensor {
    RTensor {
        dims: x.dims,
        data: x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
    }
}

pub fn softmax(x: &RTensor, axis: usize) -> RTensor {
    let dims = x.dims;
    let outer: usize = dims[..axis].iter().product();
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let mut out = RTensor::zeros(dims);
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let maxv = (0..len).map(|a| x.data[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for a in 0..len {
                let e = (x.data[at(a)] - maxv).exp();
                out.data[at(a)] = e;
                denom += e;
            }
            for a in 0..len {
                out.data[at(a)] /= denom;
            }
        }
    }
    out
}

/// x (N,T,D,1) * w (O,D) + b -> (N,T,O,1)
pub fn linear(x: &RTensor, w: &RTensor, bias: Option<&RTensor>) -> RTensor {
    let [n, t, d, _] = x.dims;
    let o = w.dims[0];
    let mut out = RTensor::zeros([n, t, o, 1]);
    for r in 0..n * t {
        for oi in 0..o {
            let mut acc = bias.map_or(0.0, |b| b.data[oi]);
            for di in 0..d {
                acc += x.data[r * d + di] * w.data[oi * d + di];
            }
            out.data[r * o + oi] = acc;
        }
    }
    out
}

/// Hand-unrolled multi-head attention; `biases` is (query bias, value
/// bias), matching the engine op (no key bias — it cancels in softmax).
pub fn multi_head_attention(
    x: &RTensor,
    wqkv: &RTensor,
    biases: Option<(&RTensor, &RTensor)>,
    wo: &RTensor,
    bo: Option<&RTensor>,
    heads: usize,
) -> RTensor {
    let [n, t, d, _] = x.dims;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut qkv = linear(x, wqkv, None); // (n, t, 3d, 1)
    if let Some((bq, bv)) = biases {
        for row in 0..n * t {
            for i in 0..d {
                qkv.data[row * 3 * d + i] += bq.data[i];
                qkv.data[row * 3 * d + 2 * d + i] += bv.data[i];
            }
        }
    }
    let mut ctx = RTensor::zeros([n, t, d, 1]);
    for b in 0..n {
        for h in 0..heads {
            for i in 0..t {
                // scores over keys
                let mut scores = vec![0.0f64; t];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for a in 0..hd {
                        let q = qkv.data[(b * t + i) * 3 * d + h * hd + a];
                        let kk = qkv.data[(b * t + j) * 3 * d + d + h * hd + a];
                        dot += q * kk;
                    }
                    *s = dot * scale;
                }
                let maxv = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = scores.iter().map(|&s| (s - maxv).exp()).sum();
                for j in 0..t {
                    let a = (scores[j] - maxv).exp() / denom;
                    for q in 0..hd {
                        ctx.data[(b * t + i) * d + h * hd + q] +=
                            a * qkv.data[(b * t + j) * 3 * d + 2 * d + h * hd + q];
                    }
                }
            }
        }
    }
    linear(&ctx, wo, bo)
}

/// Direct 4-neighbor weighted sum at the given fractional coordinates.
pub fn bilinear_sample(x: &RTensor, coords: &RTensor) -> RTensor {
    let [n, c, _, _] = x.dims;
    let s = coords.dims[1];
    let mut out = RTensor::zeros([n, c, s, 1]);
    for b in 0..n {
        for si in 0..s {
            let ry = coords.data[(b * s + si) * 2];
            let cx = coords.data[(b * s + si) * 2 + 1];
            let y0 = ry.floor();
            let x0 = cx.floor();
            let (fy, fx) = (ry - y0, cx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let v = (1.0 - fy) * (1.0 - fx) * x.at_pad(b, ch, y0, x0)
                    + (1.0 - fy) * fx * x.at_pad(b, ch, y0, x0 + 1)
                    + fy * (1.0 - fx) * x.at_pad(b, ch, y0 + 1, x0)
                    + fy * fx * x.at_pad(b, ch, y0 + 1, x0 + 1);
                let i = out.idx(b, ch, si, 0);
                out.data[i] = v;
            }
        }
    }
    out
}

/// Loop-over-cells deformable pooling: sample each displaced tap with the
/// bilinear formula, drop taps outside (-1,H)x(-1,W), then reduce.
pub fn deform_pool(x: &RTensor, offsets: &RTensor, geom: &DeformGeom) -> RTensor {
    let [n, c, h, w] = x.dims;
    let k = geom.kernel;
    let taps = k * k;
    let ho = offsets.dims[2];
    let wo = offsets.dims[3];
    let mut out = RTensor::zeros([n, c, ho, wo]);
    for b in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut pos = Vec::with_capacity(taps);
                for t in 0..taps {
                    let (kh, kw) = (t / k, t % k);
                    let ry = (oh * geom.stride + kh) as f64 - geom.padding as f64
                        + geom.scale as f64 * offsets.at(b, 2 * t, oh, ow);
                    let cx = (ow * geom.stride + kw) as f64 - geom.padding as f64
                        + geom.scale as f64 * offsets.at(b, 2 * t + 1, oh, ow);
                    let included = ry > -1.0 && ry < h as f64 && cx > -1.0 && cx < w as f64;
                    pos.push((ry, cx, included));
                }
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut acc = 0.0;
                    let mut count = 0usize;
                    for &(ry, cx, included) in &pos {
                        if !included {
                            continue;
                        }
                        let y0 = ry.floor();
                        let x0 = cx.floor();
                        let (fy, fx) = (ry - y0, cx - x0);
                        let (y0, x0) = (y0 as isize, x0 as isize);
                        let v = (1.0 - fy) * (1.0 - fx) * x.at_pad(b, ch, y0, x0)
                            + (1.0 - fy) * fx * x.at_pad(b, ch, y0, x0 + 1)
                            + fy * (1.0 - fx) * x.at_pad(b, ch, y0 + 1, x0)
                            + fy * fx * x.at_pad(b, ch, y0 + 1, x0 + 1);
                        best = best.max(v);
                        acc += v;
                        count += 1;
                    }
                    let i = out.idx(b, ch, oh, ow);
                    out.data[i] = if count == 0 {
                        0.0
                    } else if geom.kind == PoolKind::Max {
                        best
                    } else {
                        acc / count as f64
                    };
                }
            }
        }
    }
    out
}

pub fn cross_entropy(logits: &RTensor, targets: &[usize], smoothing: f64) -> f64 {
    let [n, k, _, _] = logits.dims;
    let off = smoothing / k as f64;
    let on = 1.0 - smoothing + off;
    let mut total = 0.0;
    for b in 0..n {
        let row = &logits.data[b * k..(b + 1) * k];
        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - maxv).exp()).sum::<f64>().ln() + maxv;
        for (c, &v) in row.iter().enumerate() {
            let t = if c == targets[b] { on } else { off };
            total -= t * (v - lse);
        }
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_init, InitScheme};
    use crate::tensor::Shape;

    #[test]
    fn reference_conv_window_sums() {
        let x = RTensor::from_tensor(&Tensor::ones(Shape::new(1, 1, 3, 3)));
        let w = RTensor::from_tensor(&Tensor::ones(Shape::new(1, 1, 3, 3)));
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 1, 3, 1));
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn impulse_construction_equals_max_pool() {
        let x = RTensor::from_tensor(&rng_init(
            Shape::new(1, 2, 5, 5),
            InitScheme::Uniform(-3.0, 3.0),
            31,
        ));
        let spec = PoolSpec::max3(2);
        let a = max_pool2d(&x, &spec);
        let b = max_pool_impulse(&x, &spec);
        assert_eq!(a.data, b.data);
    }
}
