//! Per-channel spatial shift: a depthwise convolution degenerated to a
//! one-hot kernel, so it moves features without any weights.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// One (dh, dw) offset per channel, bounded by the virtual kernel size:
/// |dh|, |dw| <= kernel/2. Each channel has exactly one active kernel
/// position, which is the defining constraint of the operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShiftAssignment {
    pub kernel: usize,
    pub offsets: Vec<(i32, i32)>,
}

impl ShiftAssignment {
    pub fn new(kernel: usize, offsets: Vec<(i32, i32)>) -> Result<Self> {
        let half = (kernel / 2) as i32;
        for &(dh, dw) in &offsets {
            if dh.abs() > half || dw.abs() > half {
                return Err(Error::Config(format!(
                    "shift offset ({dh},{dw}) exceeds kernel/2 = {half}"
                )));
            }
        }
        Ok(ShiftAssignment { kernel, offsets })
    }

    /// Cycles the k*k offsets over the channels in row-major kernel order,
    /// the conventional grouping for shift layers.
    pub fn round_robin(channels: usize, kernel: usize) -> Self {
        let half = (kernel / 2) as i32;
        let mut table = Vec::with_capacity(kernel * kernel);
        for dh in -half..=half {
            for dw in -half..=half {
                table.push((dh, dw));
            }
        }
        let offsets = (0..channels).map(|c| table[c % table.len()]).collect();
        ShiftAssignment { kernel, offsets }
    }

    pub fn identity(channels: usize, kernel: usize) -> Self {
        ShiftAssignment {
            kernel,
            offsets: vec![(0, 0); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.offsets.len()
    }

    /// Depthwise one-hot kernels realizing this assignment, shape (C,1,k,k).
    /// Running them through conv2d reproduces shift exactly.
    pub fn one_hot_kernels(&self) -> Tensor {
        let k = self.kernel;
        let half = (k / 2) as i32;
        let c = self.channels();
        let mut w = vec![0.0f32; c * k * k];
        for (v, &(dh, dw)) in self.offsets.iter().enumerate() {
            let kh = (dh + half) as usize;
            let kw = (dw + half) as usize;
            w[(v * k + kh) * k + kw] = 1.0;
        }
        Tensor::new(Shape::new(c, 1, k, k), w).expect("shape by construction")
    }
}

/// y[n,v,i,j] = x[n,v, stride*i + dh_v, stride*j + dw_v], zero outside bounds.
/// Output geometry matches a same-padded depthwise conv of the same kernel.
pub fn shift(x: &Tensor, assign: &ShiftAssignment, stride: usize) -> Result<Tensor> {
    let xs = x.shape();
    if assign.channels() != xs.c {
        return Err(Error::Config(format!(
            "shift assignment covers {} channels, input has {}",
            assign.channels(),
            xs.c
        )));
    }
    let ho = (xs.h - 1) / stride + 1;
    let wo = (xs.w - 1) / stride + 1;
    let mut out = vec![0.0f32; xs.n * xs.c * ho * wo];
    let xd = x.data();
    for n in 0..xs.n {
        for (v, &(dh, dw)) in assign.offsets.iter().enumerate() {
            let plane = &xd[(n * xs.c + v) * xs.h * xs.w..(n * xs.c + v + 1) * xs.h * xs.w];
            let dst = &mut out[(n * xs.c + v) * ho * wo..(n * xs.c + v + 1) * ho * wo];
            for oh in 0..ho {
                let ih = (oh * stride) as i32 + dh;
                if ih < 0 || ih >= xs.h as i32 {
                    continue;
                }
                for ow in 0..wo {
                    let iw = (ow * stride) as i32 + dw;
                    if iw >= 0 && iw < xs.w as i32 {
                        dst[oh * wo + ow] = plane[ih as usize * xs.w + iw as usize];
                    }
                }
            }
        }
    }
    Tensor::new(Shape::new(xs.n, xs.c, ho, wo), out)
}

pub fn shift_backward(
    input_shape: Shape,
    assign: &ShiftAssignment,
    stride: usize,
    grad_out: &Tensor,
) -> Tensor {
    let os = grad_out.shape();
    let mut dx = vec![0.0f32; input_shape.numel()];
    let gd = grad_out.data();
    let (h, w) = (input_shape.h, input_shape.w);
    for n in 0..os.n {
        for (v, &(dh, dw)) in assign.offsets.iter().enumerate() {
            let src = &gd[(n * os.c + v) * os.h * os.w..(n * os.c + v + 1) * os.h * os.w];
            let dplane = &mut dx[(n * os.c + v) * h * w..(n * os.c + v + 1) * h * w];
            for oh in 0..os.h {
                let ih = (oh * stride) as i32 + dh;
                if ih < 0 || ih >= h as i32 {
                    continue;
                }
                for ow in 0..os.w {
                    let iw = (ow * stride) as i32 + dw;
                    if iw >= 0 && iw < w as i32 {
                        dplane[ih as usize * w + iw as usize] += src[oh * os.w + ow];
                    }
                }
            }
        }
    }
    Tensor::new(input_shape, dx).expect("shape by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_offsets_are_identity() {
        let x = Tensor::from_vec([1, 2, 2, 3], (0..12).map(|i| i as f32).collect()).unwrap();
        let a = ShiftAssignment::identity(2, 3);
        let y = shift(&x, &a, 1).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn one_step_shift_with_zero_fill() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let a = ShiftAssignment::new(3, vec![(0, 1)]).unwrap();
        let y = shift(&x, &a, 1).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 0.0]);
    }

    #[test]
    fn oversized_offset_rejected() {
        assert!(matches!(
            ShiftAssignment::new(3, vec![(0, 2)]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uncovered_channel_rejected() {
        let x = Tensor::zeros(Shape::new(1, 3, 2, 2));
        let a = ShiftAssignment::identity(2, 3);
        assert!(matches!(shift(&x, &a, 1), Err(Error::Config(_))));
    }

    #[test]
    fn round_robin_covers_all_offsets() {
        let a = ShiftAssignment::round_robin(18, 3);
        assert_eq!(a.offsets[0], (-1, -1));
        assert_eq!(a.offsets[4], (0, 0));
        assert_eq!(a.offsets[9], (-1, -1));
        assert_eq!(a.offsets[17], (1, 1));
    }
}
