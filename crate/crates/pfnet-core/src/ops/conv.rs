//! 2-D convolution: im2col + GEMM fast path with zero padding.

use crate::error::{Error, Result};
use crate::ops::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::ops::out_extent;
use crate::tensor::{Shape, Tensor};

/// Geometry of one convolution layer. `groups == in_channels` is depthwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec::new(channels, channels, kernel, stride).with_groups(channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(format!("degenerate conv spec {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "channels ({}, {}) not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// Expected weight shape (out, in/groups, k, k).
    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        )
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            out_extent(h, self.kernel, self.stride, self.padding)?,
            out_extent(w, self.kernel, self.stride, self.padding)?,
        ))
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel
    }
}

fn check_inputs(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    if x.shape().c != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv input has {} channels, spec expects {}",
            x.shape().c,
            spec.in_channels
        )));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::Shape(format!(
            "conv weight shape {} does not match spec {}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    if let Some(b) = bias {
        if b.numel() != spec.out_channels {
            return Err(Error::Shape(format!(
                "conv bias has {} elements, expected {}",
                b.numel(),
                spec.out_channels
            )));
        }
    }
    Ok(())
}

/// Unfolds one (image, group) pair into a (cig*k*k, ho*wo) patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    (h, w): (usize, usize),
    c0: usize,
    cig: usize,
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    col: &mut [f32],
) {
    let howo = ho * wo;
    for cl in 0..cig {
        let plane = &x[(c0 + cl) * h * w..(c0 + cl + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = ((cl * k + kh) * k + kw) * howo;
                let dst = &mut col[row..row + howo];
                for oh in 0..ho {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    let drow = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    // Valid ow range: 0 <= ow*stride + kw - pad < w
                    let lo = pad.saturating_sub(kw).div_ceil(stride).min(wo);
                    let hi = if w + pad > kw {
                        (((w + pad - kw - 1) / stride) + 1).min(wo)
                    } else {
                        0
                    };
                    drow[..lo].fill(0.0);
                    drow[hi..].fill(0.0);
                    if stride == 1 {
                        let start = lo + kw - pad;
                        drow[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ow, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = src[(lo + ow) * stride + kw - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Folds a patch matrix back, accumulating into one (image, group) pair.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f32],
    (h, w): (usize, usize),
    c0: usize,
    cig: usize,
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [f32],
) {
    let howo = ho * wo;
    for cl in 0..cig {
        let plane = &mut dx[(c0 + cl) * h * w..(c0 + cl + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = ((cl * k + kh) * k + kw) * howo;
                let src = &col[row..row + howo];
                for oh in 0..ho {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. Output (N, out, ho, wo); zero padding; no activation.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    check_inputs(x, w, bias, spec)?;
    let xs = x.shape();
    let (ho, wo) = spec.out_hw(xs.h, xs.w)?;
    let howo = ho * wo;
    let g = spec.groups;
    let cig = spec.in_channels / g;
    let cog = spec.out_channels / g;
    let k = spec.kernel;
    let patch = cig * k * k;

    // A pointwise stride-1 conv is a plain matrix product on the input;
    // skip the unfold copy.
    let pointwise = k == 1 && spec.stride == 1 && spec.padding == 0;
    let mut out = vec![0.0f32; xs.n * spec.out_channels * howo];
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![0.0f32; patch * howo]
    };
    let xd = x.data();
    let wd = w.data();

    for n in 0..xs.n {
        let xin = &xd[n * xs.c * xs.h * xs.w..(n + 1) * xs.c * xs.h * xs.w];
        for gi in 0..g {
            let wg = &wd[gi * cog * patch..(gi + 1) * cog * patch];
            let og = &mut out[(n * spec.out_channels + gi * cog) * howo
                ..(n * spec.out_channels + (gi + 1) * cog) * howo];
            if pointwise {
                let xg = &xin[gi * cig * howo..(gi + 1) * cig * howo];
                gemm_nn(cog, patch, howo, wg, xg, og);
                continue;
            }
            im2col(
                xin,
                (xs.h, xs.w),
                gi * cig,
                cig,
                k,
                spec.stride,
                spec.padding,
                (ho, wo),
                &mut col,
            );
            gemm_nn(cog, patch, howo, wg, &col, og);
        }
        if let Some(b) = bias {
            let bd = b.data();
            for (c, &bv) in bd.iter().enumerate() {
                let off = (n * spec.out_channels + c) * howo;
                for v in &mut out[off..off + howo] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(Shape::new(xs.n, spec.out_channels, ho, wo), out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
/// Pass `need_x = false` to skip the input gradient (e.g. first layer).
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need_x: bool,
    has_bias: bool,
) -> Result<(Option<Tensor>, Tensor, Option<Tensor>)> {
    let xs = x.shape();
    let (ho, wo) = spec.out_hw(xs.h, xs.w)?;
    let howo = ho * wo;
    let g = spec.groups;
    let cig = spec.in_channels / g;
    let cog = spec.out_channels / g;
    let k = spec.kernel;
    let patch = cig * k * k;

    let xd = x.data();
    let wd = w.data();
    let gd = grad_out.data();

    let pointwise = k == 1 && spec.stride == 1 && spec.padding == 0;
    let mut dw = vec![0.0f32; w.numel()];
    let mut dx = if need_x { vec![0.0f32; x.numel()] } else { Vec::new() };
    let mut db = if has_bias { vec![0.0f32; spec.out_channels] } else { Vec::new() };
    let (mut col, mut dcol) = if pointwise {
        (Vec::new(), Vec::new())
    } else {
        (vec![0.0f32; patch * howo], vec![0.0f32; patch * howo])
    };

    for n in 0..xs.n {
        let xin = &xd[n * xs.c * xs.h * xs.w..(n + 1) * xs.c * xs.h * xs.w];
        for gi in 0..g {
            let go = &gd[(n * spec.out_channels + gi * cog) * howo
                ..(n * spec.out_channels + (gi + 1) * cog) * howo];
            if pointwise {
                let xg = &xin[gi * cig * howo..(gi + 1) * cig * howo];
                gemm_nt(
                    cog,
                    howo,
                    patch,
                    go,
                    xg,
                    &mut dw[gi * cog * patch..(gi + 1) * cog * patch],
                );
                if need_x {
                    let dxn = &mut dx[(n * xs.c + gi * cig) * howo
                        ..(n * xs.c + (gi + 1) * cig) * howo];
                    gemm_tn(
                        patch,
                        cog,
                        howo,
                        &wd[gi * cog * patch..(gi + 1) * cog * patch],
                        go,
                        dxn,
                    );
                }
                continue;
            }
            im2col(
                xin,
                (xs.h, xs.w),
                gi * cig,
                cig,
                k,
                spec.stride,
                spec.padding,
                (ho, wo),
                &mut col,
            );
            // dW_g += dOut_g (cog, howo) * col^T (howo, patch)
            gemm_nt(
                cog,
                howo,
                patch,
                go,
                &col,
                &mut dw[gi * cog * patch..(gi + 1) * cog * patch],
            );
            if need_x {
                dcol.fill(0.0);
                // dcol = W_g^T (patch, cog) * dOut_g (cog, howo)
                gemm_tn(
                    patch,
                    cog,
                    howo,
                    &wd[gi * cog * patch..(gi + 1) * cog * patch],
                    go,
                    &mut dcol,
                );
                let dxn = &mut dx[n * xs.c * xs.h * xs.w..(n + 1) * xs.c * xs.h * xs.w];
                col2im_add(
                    &dcol,
                    (xs.h, xs.w),
                    gi * cig,
                    cig,
                    k,
                    spec.stride,
                    spec.padding,
                    (ho, wo),
                    dxn,
                );
            }
        }
        if has_bias {
            for c in 0..spec.out_channels {
                let off = (n * spec.out_channels + c) * howo;
                let mut acc = 0.0f32;
                for &v in &gd[off..off + howo] {
                    acc += v;
                }
                db[c] += acc;
            }
        }
    }

    let gx = if need_x { Some(Tensor::new(xs, dx)?) } else { None };
    let gw = Tensor::new(w.shape(), dw)?;
    let gb = if has_bias {
        Some(Tensor::new(Shape::new(spec.out_channels, 1, 1, 1), db)?)
    } else {
        None
    };
    Ok((gx, gw, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_sums_of_ones() {
        // 3x3 all-ones input, 3x3 all-ones kernel, stride 1, pad 1:
        // center sees the full window (9), corners see 4 cells.
        let x = Tensor::ones(Shape::new(1, 1, 3, 3));
        let w = Tensor::ones(Shape::new(1, 1, 3, 3));
        let spec = ConvSpec::new(1, 1, 3, 1);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 0, 2), 4.0);
        assert_eq!(y.at(0, 0, 2, 0), 4.0);
        assert_eq!(y.at(0, 0, 2, 2), 4.0);
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn identity_1x1_mixing() {
        // k=1 kernel holding the identity matrix over channels copies the input.
        let x = Tensor::from_vec([1, 3, 2, 2], (0..12).map(|i| i as f32 * 0.5 - 2.0).collect())
            .unwrap();
        let mut wdat = vec![0.0f32; 9];
        for c in 0..3 {
            wdat[c * 3 + c] = 1.0;
        }
        let w = Tensor::from_vec([3, 3, 1, 1], wdat).unwrap();
        let spec = ConvSpec::new(3, 3, 1, 1);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert!(y.bit_eq(&x.clone()));
    }

    #[test]
    fn group_mismatch_is_config_error() {
        let spec = ConvSpec::new(3, 4, 3, 1).with_groups(2);
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::zeros(Shape::new(4, 1, 3, 3));
        assert!(matches!(
            conv2d(&x, &w, None, &spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let spec = ConvSpec::new(4, 4, 3, 1);
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::zeros(spec.weight_shape());
        assert!(matches!(conv2d(&x, &w, None, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn stride_two_geometry() {
        let spec = ConvSpec::new(2, 5, 3, 2);
        let x = Tensor::ones(Shape::new(2, 2, 7, 7));
        let w = Tensor::ones(spec.weight_shape());
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 5, 4, 4));
    }
}
