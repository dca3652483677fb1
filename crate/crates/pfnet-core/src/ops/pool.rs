//! Spatial pooling: max (with argmax routing for backward), average, and
//! global average.

use crate::error::{Error, Result};
use crate::ops::out_extent;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Pooling geometry. Padding cells contribute negative infinity to max
/// pooling (they never win) and are excluded from the average divisor by
/// default; `avg_count_excludes_padding = false` divides by k*k instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub avg_count_excludes_padding: bool,
}

impl PoolSpec {
    pub fn new(kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Self {
        PoolSpec {
            kind,
            kernel,
            stride,
            padding,
            avg_count_excludes_padding: true,
        }
    }

    pub fn max3(stride: usize) -> Self {
        PoolSpec::new(PoolKind::Max, 3, stride, 1)
    }

    pub fn avg3(stride: usize) -> Self {
        PoolSpec::new(PoolKind::Avg, 3, stride, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel < 1 || self.stride < 1 {
            return Err(Error::Config(format!("degenerate pool spec {self:?}")));
        }
        if self.padding > self.kernel / 2 {
            return Err(Error::Config(format!(
                "pool padding {} exceeds kernel/2 = {}",
                self.padding,
                self.kernel / 2
            )));
        }
        Ok(())
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ho = out_extent(h, self.kernel, self.stride, self.padding)?;
        let wo = out_extent(w, self.kernel, self.stride, self.padding)?;
        if ho == 0 || wo == 0 {
            return Err(Error::Geometry(format!(
                "pooling {}x{} input with kernel {} produces empty output",
                h, w, self.kernel
            )));
        }
        Ok((ho, wo))
    }
}

/// Max pooling. Returns the pooled tensor and, per output element, the flat
/// index (ih * W + iw) of the selected input cell inside its (n, c) plane.
/// Ties break to the lowest flat index (first in row-major scan).
pub fn max_pool2d(x: &Tensor, spec: &PoolSpec) -> Result<(Tensor, Vec<u32>)> {
    if spec.kind != PoolKind::Max {
        return Err(Error::Config("max_pool2d requires PoolKind::Max".into()));
    }
    spec.validate()?;
    let xs = x.shape();
    let (ho, wo) = spec.out_hw(xs.h, xs.w)?;
    let mut out = vec![0.0f32; xs.n * xs.c * ho * wo];
    let mut arg = vec![0u32; out.len()];
    let xd = x.data();
    let k = spec.kernel;

    for nc in 0..xs.n * xs.c {
        let plane = &xd[nc * xs.h * xs.w..(nc + 1) * xs.h * xs.w];
        let obase = nc * ho * wo;
        for oh in 0..ho {
            let h0 = (oh * spec.stride) as isize - spec.padding as isize;
            for ow in 0..wo {
                let w0 = (ow * spec.stride) as isize - spec.padding as isize;
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = u32::MAX;
                for kh in 0..k {
                    let ih = h0 + kh as isize;
                    if ih < 0 || ih >= xs.h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = w0 + kw as isize;
                        if iw < 0 || iw >= xs.w as isize {
                            continue;
                        }
                        let idx = ih as usize * xs.w + iw as usize;
                        let v = plane[idx];
                        if v > best {
                            best = v;
                            best_idx = idx as u32;
                        }
                    }
                }
                if best_idx == u32::MAX {
                    // Unreachable under the PoolSpec invariants, kept as a
                    // hard failure rather than emitting -inf.
                    return Err(Error::Geometry(format!(
                        "window at ({oh},{ow}) lies fully in padding"
                    )));
                }
                out[obase + oh * wo + ow] = best;
                arg[obase + oh * wo + ow] = best_idx;
            }
        }
    }
    Ok((Tensor::new(Shape::new(xs.n, xs.c, ho, wo), out)?, arg))
}

/// Routes output gradient to the recorded argmax cells.
pub fn max_pool2d_backward(
    input_shape: Shape,
    argmax: &[u32],
    grad_out: &Tensor,
) -> Result<Tensor> {
    let os = grad_out.shape();
    let mut dx = vec![0.0f32; input_shape.numel()];
    let gd = grad_out.data();
    let plane = input_shape.h * input_shape.w;
    let oplane = os.h * os.w;
    for nc in 0..os.n * os.c {
        for o in 0..oplane {
            let src = nc * oplane + o;
            dx[nc * plane + argmax[src] as usize] += gd[src];
        }
    }
    Tensor::new(input_shape, dx)
}

/// Average pooling; the divisor counts only in-bounds cells when
/// `avg_count_excludes_padding` is set.
pub fn avg_pool2d(x: &Tensor, spec: &PoolSpec) -> Result<Tensor> {
    if spec.kind != PoolKind::Avg {
        return Err(Error::Config("avg_pool2d requires PoolKind::Avg".into()));
    }
    spec.validate()?;
    let xs = x.shape();
    let (ho, wo) = spec.out_hw(xs.h, xs.w)?;
    let mut out = vec![0.0f32; xs.n * xs.c * ho * wo];
    let xd = x.data();
    let k = spec.kernel;

    for nc in 0..xs.n * xs.c {
        let plane = &xd[nc * xs.h * xs.w..(nc + 1) * xs.h * xs.w];
        let obase = nc * ho * wo;
        for oh in 0..ho {
            let h0 = (oh * spec.stride) as isize - spec.padding as isize;
            for ow in 0..wo {
                let w0 = (ow * spec.stride) as isize - spec.padding as isize;
                let mut acc = 0.0f64;
                let mut count = 0usize;
                for kh in 0..k {
                    let ih = h0 + kh as isize;
                    if ih < 0 || ih >= xs.h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = w0 + kw as isize;
                        if iw < 0 || iw >= xs.w as isize {
                            continue;
                        }
                        acc += plane[ih as usize * xs.w + iw as usize] as f64;
                        count += 1;
                    }
                }
                if count == 0 {
                    return Err(Error::Geometry(format!(
                        "window at ({oh},{ow}) lies fully in padding"
                    )));
                }
                let div = if spec.avg_count_excludes_padding {
                    count
                } else {
                    k * k
                };
                out[obase + oh * wo + ow] = (acc / div as f64) as f32;
            }
        }
    }
    Tensor::new(Shape::new(xs.n, xs.c, ho, wo), out)
}

pub fn avg_pool2d_backward(
    input_shape: Shape,
    spec: &PoolSpec,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let os = grad_out.shape();
    let mut dx = vec![0.0f32; input_shape.numel()];
    let gd = grad_out.data();
    let k = spec.kernel;
    let (h, w) = (input_shape.h, input_shape.w);
    for nc in 0..os.n * os.c {
        let dplane = &mut dx[nc * h * w..(nc + 1) * h * w];
        for oh in 0..os.h {
            let h0 = (oh * spec.stride) as isize - spec.padding as isize;
            for ow in 0..os.w {
                let w0 = (ow * spec.stride) as isize - spec.padding as isize;
                let mut count = 0usize;
                for kh in 0..k {
                    let ih = h0 + kh as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = w0 + kw as isize;
                        if iw >= 0 && iw < w as isize {
                            count += 1;
                        }
                    }
                }
                let div = if spec.avg_count_excludes_padding {
                    count
                } else {
                    k * k
                };
                let g = gd[(nc * os.h + oh) * os.w + ow] / div as f32;
                for kh in 0..k {
                    let ih = h0 + kh as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = w0 + kw as isize;
                        if iw >= 0 && iw < w as isize {
                            dplane[ih as usize * w + iw as usize] += g;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape, dx)
}

/// Mean over the spatial extent: (N,C,H,W) -> (N,C,1,1).
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let plane = xs.h * xs.w;
    let mut out = vec![0.0f32; xs.n * xs.c];
    let xd = x.data();
    for nc in 0..xs.n * xs.c {
        let mut acc = 0.0f64;
        for &v in &xd[nc * plane..(nc + 1) * plane] {
            acc += v as f64;
        }
        out[nc] = (acc / plane as f64) as f32;
    }
    Tensor::new(Shape::new(xs.n, xs.c, 1, 1), out).expect("shape by construction")
}

pub fn global_avg_pool_backward(input_shape: Shape, grad_out: &Tensor) -> Tensor {
    let plane = input_shape.h * input_shape.w;
    let mut dx = vec![0.0f32; input_shape.numel()];
    let gd = grad_out.data();
    for nc in 0..input_shape.n * input_shape.c {
        let g = gd[nc] / plane as f32;
        dx[nc * plane..(nc + 1) * plane].fill(g);
    }
    Tensor::new(input_shape, dx).expect("shape by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_of_single_window() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec = PoolSpec::new(PoolKind::Max, 2, 1, 0);
        let (y, arg) = max_pool2d(&x, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(arg[0], 3);
    }

    #[test]
    fn constant_input_is_fixed_point() {
        let x = Tensor::full(Shape::new(2, 3, 5, 5), 2.5);
        let (y, _) = max_pool2d(&x, &PoolSpec::max3(1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        let y = avg_pool2d(&x, &PoolSpec::avg3(1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn avg_of_single_window() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec = PoolSpec::new(PoolKind::Avg, 2, 1, 0);
        let y = avg_pool2d(&x, &spec).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn ties_break_to_first_flat_index() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![4.0, 4.0, 4.0, 4.0]).unwrap();
        let spec = PoolSpec::new(PoolKind::Max, 2, 1, 0);
        let (_, arg) = max_pool2d(&x, &spec).unwrap();
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn excessive_padding_rejected() {
        // p <= k/2 is the PoolSpec invariant: p=1 with k=2 is legal,
        // p=2 with k=3 is not.
        let legal = PoolSpec::new(PoolKind::Max, 2, 1, 1);
        let x = Tensor::ones(Shape::new(1, 1, 4, 4));
        assert!(max_pool2d(&x, &legal).is_ok());
        let spec = PoolSpec::new(PoolKind::Max, 3, 1, 2);
        assert!(matches!(max_pool2d(&x, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_input_geometry_error() {
        let spec = PoolSpec::new(PoolKind::Max, 5, 1, 2);
        let x = Tensor::ones(Shape::new(1, 1, 1, 1));
        // 1 + 2*2 = 5 fits exactly: one output window that still sees the
        // single real cell.
        let (y, _) = max_pool2d(&x, &spec).unwrap();
        assert_eq!(y.numel(), 1);
        let spec7 = PoolSpec::new(PoolKind::Max, 7, 1, 3);
        let y = max_pool2d(&x, &spec7).unwrap().0;
        assert_eq!(y.data()[0], 1.0);
        let bad = PoolSpec::new(PoolKind::Max, 7, 1, 2);
        assert!(matches!(max_pool2d(&x, &bad), Err(Error::Geometry(_))));
    }

    #[test]
    fn gap_of_constant_is_constant() {
        let x = Tensor::full(Shape::new(2, 4, 3, 5), -1.25);
        let y = global_avg_pool(&x);
        assert_eq!(y.shape(), Shape::new(2, 4, 1, 1));
        assert!(y.data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn border_divisors_exclude_padding() {
        // 3x3 kernel, pad 1 on a 3x3 constant input: with exclusion the
        // output stays constant; with k*k divisor the borders shrink.
        let x = Tensor::ones(Shape::new(1, 1, 3, 3));
        let y = avg_pool2d(&x, &PoolSpec::avg3(1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
        let mut inc = PoolSpec::avg3(1);
        inc.avg_count_excludes_padding = false;
        let y = avg_pool2d(&x, &inc).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), 4.0 / 9.0);
        assert_eq!(y.at(0, 0, 1, 1), 1.0);
    }
}
