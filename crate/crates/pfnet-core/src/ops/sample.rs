//! Bilinear sampling at fractional positions and the deformable pooling
//! operator built on top of it. Only the offset predictor that feeds
//! `deform_pool` carries weights; the operator itself is parameter-free.

use crate::error::{Error, Result};
use crate::ops::pool::PoolKind;
use crate::tensor::{Shape, Tensor};

/// One sampling position: integer corners plus interpolation weights.
#[derive(Clone, Copy)]
struct TapGeom {
    y0: isize,
    x0: isize,
    fy: f32,
    fx: f32,
    included: bool,
}

#[inline]
fn tap_geom(ry: f32, cx: f32, h: usize, w: usize) -> TapGeom {
    let included = ry > -1.0 && ry < h as f32 && cx > -1.0 && cx < w as f32;
    let y0 = ry.floor() as isize;
    let x0 = cx.floor() as isize;
    TapGeom {
        y0,
        x0,
        fy: ry - y0 as f32,
        fx: cx - x0 as f32,
        included,
    }
}

#[inline]
fn corner(plane: &[f32], h: usize, w: usize, y: isize, x: isize) -> f32 {
    if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

#[inline]
fn sample_plane(plane: &[f32], h: usize, w: usize, g: &TapGeom) -> f32 {
    let v00 = corner(plane, h, w, g.y0, g.x0);
    let v01 = corner(plane, h, w, g.y0, g.x0 + 1);
    let v10 = corner(plane, h, w, g.y0 + 1, g.x0);
    let v11 = corner(plane, h, w, g.y0 + 1, g.x0 + 1);
    (1.0 - g.fy) * ((1.0 - g.fx) * v00 + g.fx * v01) + g.fy * ((1.0 - g.fx) * v10 + g.fx * v11)
}

/// Interpolates x at `coords` (N,S,2,1) holding fractional (row, col) pairs
/// shared across channels. Positions outside the feature map contribute
/// zero through their out-of-bounds corners. Output (N,C,S,1).
pub fn bilinear_sample(x: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let cs = coords.shape();
    if cs.n != xs.n || cs.h != 2 || cs.w != 1 {
        return Err(Error::Shape(format!(
            "coords must be (N,S,2,1) with N = {}, got {cs}",
            xs.n
        )));
    }
    if !coords.is_finite() {
        return Err(Error::Numeric("non-finite sampling coordinates".into()));
    }
    let s = cs.c;
    let cd = coords.data();
    let xd = x.data();
    let plane = xs.h * xs.w;
    let mut out = vec![0.0f32; xs.n * xs.c * s];
    for n in 0..xs.n {
        for si in 0..s {
            let ry = cd[(n * s + si) * 2];
            let cx = cd[(n * s + si) * 2 + 1];
            let g = tap_geom(ry, cx, xs.h, xs.w);
            for c in 0..xs.c {
                let pl = &xd[(n * xs.c + c) * plane..(n * xs.c + c + 1) * plane];
                out[(n * xs.c + c) * s + si] = sample_plane(pl, xs.h, xs.w, &g);
            }
        }
    }
    Tensor::new(Shape::new(xs.n, xs.c, s, 1), out)
}

fn scatter_corner(dplane: &mut [f32], h: usize, w: usize, y: isize, x: isize, v: f32) {
    if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
        dplane[y as usize * w + x as usize] += v;
    }
}

/// Spatial gradient of one bilinear sample with respect to (row, col).
#[inline]
fn position_grad(plane: &[f32], h: usize, w: usize, g: &TapGeom) -> (f32, f32) {
    let v00 = corner(plane, h, w, g.y0, g.x0);
    let v01 = corner(plane, h, w, g.y0, g.x0 + 1);
    let v10 = corner(plane, h, w, g.y0 + 1, g.x0);
    let v11 = corner(plane, h, w, g.y0 + 1, g.x0 + 1);
    let dy = (1.0 - g.fx) * (v10 - v00) + g.fx * (v11 - v01);
    let dx = (1.0 - g.fy) * (v01 - v00) + g.fy * (v11 - v10);
    (dy, dx)
}

/// Gradients to both the feature map and the coordinates.
pub fn bilinear_sample_backward(
    x: &Tensor,
    coords: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let xs = x.shape();
    let cs = coords.shape();
    let s = cs.c;
    let cd = coords.data();
    let xd = x.data();
    let gd = grad_out.data();
    let plane = xs.h * xs.w;
    let mut dx = vec![0.0f32; x.numel()];
    let mut dc = vec![0.0f32; coords.numel()];
    for n in 0..xs.n {
        for si in 0..s {
            let ry = cd[(n * s + si) * 2];
            let cx = cd[(n * s + si) * 2 + 1];
            let g = tap_geom(ry, cx, xs.h, xs.w);
            let (w00, w01, w10, w11) = (
                (1.0 - g.fy) * (1.0 - g.fx),
                (1.0 - g.fy) * g.fx,
                g.fy * (1.0 - g.fx),
                g.fy * g.fx,
            );
            let mut dry = 0.0f32;
            let mut dcx = 0.0f32;
            for c in 0..xs.c {
                let go = gd[(n * xs.c + c) * s + si];
                let pl = &xd[(n * xs.c + c) * plane..(n * xs.c + c + 1) * plane];
                let (py, px) = position_grad(pl, xs.h, xs.w, &g);
                dry += go * py;
                dcx += go * px;
                let dpl = &mut dx[(n * xs.c + c) * plane..(n * xs.c + c + 1) * plane];
                scatter_corner(dpl, xs.h, xs.w, g.y0, g.x0, go * w00);
                scatter_corner(dpl, xs.h, xs.w, g.y0, g.x0 + 1, go * w01);
                scatter_corner(dpl, xs.h, xs.w, g.y0 + 1, g.x0, go * w10);
                scatter_corner(dpl, xs.h, xs.w, g.y0 + 1, g.x0 + 1, go * w11);
            }
            dc[(n * s + si) * 2] = dry;
            dc[(n * s + si) * 2 + 1] = dcx;
        }
    }
    (
        Tensor::new(xs, dx).expect("shape by construction"),
        Tensor::new(cs, dc).expect("shape by construction"),
    )
}

/// Deformable pooling geometry: a k x k grid displaced per output location
/// by predicted offsets, sampled bilinearly, then reduced by max or mean.
#[derive(Clone, Copy, Debug)]
pub struct DeformGeom {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub scale: f32,
}

impl DeformGeom {
    pub fn new(kind: PoolKind, stride: usize) -> Self {
        DeformGeom {
            kind,
            kernel: 3,
            stride,
            padding: 1,
            scale: 1.0,
        }
    }

    pub fn offset_channels(&self) -> usize {
        2 * self.kernel * self.kernel
    }
}

/// Saved argmax tap per output element (max pooling only).
pub struct DeformSaved {
    pub argtap: Vec<u8>,
}

fn check_offsets(x: &Tensor, offsets: &Tensor, geom: &DeformGeom) -> Result<(usize, usize)> {
    let xs = x.shape();
    let os = offsets.shape();
    let (ho, wo) = (os.h, os.w);
    if os.n != xs.n || os.c != geom.offset_channels() {
        return Err(Error::Config(format!(
            "offset tensor {os} does not match {} channels for kernel {}",
            geom.offset_channels(),
            geom.kernel
        )));
    }
    let eh = crate::ops::out_extent(xs.h, geom.kernel, geom.stride, geom.padding)?;
    let ew = crate::ops::out_extent(xs.w, geom.kernel, geom.stride, geom.padding)?;
    if (eh, ew) != (ho, wo) {
        return Err(Error::Shape(format!(
            "offset grid {ho}x{wo} does not match pooled output {eh}x{ew}"
        )));
    }
    Ok((ho, wo))
}

/// Forward pass. A tap whose displaced position falls entirely outside the
/// open interval (-1, H) x (-1, W) is dropped from the reduction, which
/// makes the zero-offset case agree bit-exactly with plain max/avg pooling
/// (average with the padding-excluding divisor).
pub fn deform_pool(
    x: &Tensor,
    offsets: &Tensor,
    geom: &DeformGeom,
) -> Result<(Tensor, DeformSaved)> {
    if !offsets.is_finite() {
        return Err(Error::Numeric("non-finite offsets".into()));
    }
    let xs = x.shape();
    let (ho, wo) = check_offsets(x, offsets, geom)?;
    let k = geom.kernel;
    let taps = k * k;
    let plane = xs.h * xs.w;
    let oplane = ho * wo;
    let od = offsets.data();
    let xd = x.data();
    let mut out = vec![0.0f32; xs.n * xs.c * oplane];
    let is_max = geom.kind == PoolKind::Max;
    let mut argtap = if is_max {
        vec![0u8; out.len()]
    } else {
        Vec::new()
    };
    let mut geoms: Vec<TapGeom> = Vec::with_capacity(taps);

    for n in 0..xs.n {
        let obase_off = n * 2 * taps * oplane;
        for oh in 0..ho {
            for ow in 0..wo {
                geoms.clear();
                for t in 0..taps {
                    let (kh, kw) = (t / k, t % k);
                    let py = (oh * geom.stride + kh) as f32 - geom.padding as f32
                        + geom.scale * od[obase_off + (2 * t * ho + oh) * wo + ow];
                    let px = (ow * geom.stride + kw) as f32 - geom.padding as f32
                        + geom.scale * od[obase_off + ((2 * t + 1) * ho + oh) * wo + ow];
                    geoms.push(tap_geom(py, px, xs.h, xs.w));
                }
                for c in 0..xs.c {
                    let pl = &xd[(n * xs.c + c) * plane..(n * xs.c + c + 1) * plane];
                    let oi = (n * xs.c + c) * oplane + oh * wo + ow;
                    if is_max {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_t = u8::MAX;
                        for (t, g) in geoms.iter().enumerate() {
                            if !g.included {
                                continue;
                            }
                            let v = sample_plane(pl, xs.h, xs.w, g);
                            if v > best {
                                best = v;
                                best_t = t as u8;
                            }
                        }
                        if best_t == u8::MAX {
                            out[oi] = 0.0;
                            argtap[oi] = u8::MAX;
                        } else {
                            out[oi] = best;
                            argtap[oi] = best_t;
                        }
                    } else {
                        let mut acc = 0.0f64;
                        let mut count = 0usize;
                        for g in geoms.iter().filter(|g| g.included) {
                            acc += sample_plane(pl, xs.h, xs.w, g) as f64;
                            count += 1;
                        }
                        out[oi] = if count == 0 {
                            0.0
                        } else {
                            (acc / count as f64) as f32
                        };
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(Shape::new(xs.n, xs.c, ho, wo), out)?,
        DeformSaved { argtap },
    ))
}

/// Gradients to the feature map and the offsets.
pub fn deform_pool_backward(
    x: &Tensor,
    offsets: &Tensor,
    geom: &DeformGeom,
    saved: &DeformSaved,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let xs = x.shape();
    let os = offsets.shape();
    let (ho, wo) = (os.h, os.w);
    let k = geom.kernel;
    let taps = k * k;
    let plane = xs.h * xs.w;
    let oplane = ho * wo;
    let od = offsets.data();
    let xd = x.data();
    let gd = grad_out.data();
    let mut dx = vec![0.0f32; x.numel()];
    let mut doff = vec![0.0f32; offsets.numel()];
    let is_max = geom.kind == PoolKind::Max;
    let mut geoms: Vec<TapGeom> = Vec::with_capacity(taps);

    for n in 0..xs.n {
        let obase_off = n * 2 * taps * oplane;
        for oh in 0..ho {
            for ow in 0..wo {
                geoms.clear();
                for t in 0..taps {
                    let (kh, kw) = (t / k, t % k);
                    let py = (oh * geom.stride + kh) as f32 - geom.padding as f32
                        + geom.scale * od[obase_off + (2 * t * ho + oh) * wo + ow];
                    let px = (ow * geom.stride + kw) as f32 - geom.padding as f32
                        + geom.scale * od[obase_off + ((2 * t + 1) * ho + oh) * wo + ow];
                    geoms.push(tap_geom(py, px, xs.h, xs.w));
                }
                let count = geoms.iter().filter(|g| g.included).count();
                for c in 0..xs.c {
                    let oi = (n * xs.c + c) * oplane + oh * wo + ow;
                    let go = gd[oi];
                    if go == 0.0 {
                        continue;
                    }
                    let pl = &xd[(n * xs.c + c) * plane..(n * xs.c + c + 1) * plane];
                    let route = |t: usize, g: f32, dx: &mut [f32], doff: &mut [f32]| {
                        let tg = &geoms[t];
                        let (w00, w01, w10, w11) = (
                            (1.0 - tg.fy) * (1.0 - tg.fx),
                            (1.0 - tg.fy) * tg.fx,
                            tg.fy * (1.0 - tg.fx),
                            tg.fy * tg.fx,
                        );
                        let dpl =
                            &mut dx[(n * xs.c + c) * plane..(n * xs.c + c + 1) * plane];
                        scatter_corner(dpl, xs.h, xs.w, tg.y0, tg.x0, g * w00);
                        scatter_corner(dpl, xs.h, xs.w, tg.y0, tg.x0 + 1, g * w01);
                        scatter_corner(dpl, xs.h, xs.w, tg.y0 + 1, tg.x0, g * w10);
                        scatter_corner(dpl, xs.h, xs.w, tg.y0 + 1, tg.x0 + 1, g * w11);
                        let (py, px) = position_grad(pl, xs.h, xs.w, tg);
                        doff[obase_off + (2 * t * ho + oh) * wo + ow] += g * py * geom.scale;
                        doff[obase_off + ((2 * t + 1) * ho + oh) * wo + ow] +=
                            g * px * geom.scale;
                    };
                    if is_max {
                        let t = saved.argtap[oi];
                        if t != u8::MAX {
                            route(t as usize, go, &mut dx, &mut doff);
                        }
                    } else if count > 0 {
                        let g = go / count as f32;
                        for t in 0..taps {
                            if geoms[t].included {
                                route(t, g, &mut dx, &mut doff);
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(xs, dx).expect("shape by construction"),
        Tensor::new(os, doff).expect("shape by construction"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::pool::{avg_pool2d, max_pool2d, PoolSpec};
    use crate::rng::{rng_init, InitScheme};

    #[test]
    fn integer_coords_are_exact_lookup() {
        let x = rng_init(Shape::new(1, 2, 4, 4), InitScheme::Uniform(-1.0, 1.0), 1);
        let coords = Tensor::from_vec([1, 3, 2, 1], vec![0.0, 0.0, 2.0, 3.0, 3.0, 1.0]).unwrap();
        let y = bilinear_sample(&x, &coords).unwrap();
        for c in 0..2 {
            assert_eq!(y.at(0, c, 0, 0), x.at(0, c, 0, 0));
            assert_eq!(y.at(0, c, 1, 0), x.at(0, c, 2, 3));
            assert_eq!(y.at(0, c, 2, 0), x.at(0, c, 3, 1));
        }
    }

    #[test]
    fn center_of_four_neighbors() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let coords = Tensor::from_vec([1, 1, 2, 1], vec![0.5, 0.5]).unwrap();
        let y = bilinear_sample(&x, &coords).unwrap();
        assert!((y.data()[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn far_out_of_bounds_samples_zero() {
        let x = Tensor::ones(Shape::new(1, 1, 3, 3));
        let coords = Tensor::from_vec([1, 2, 2, 1], vec![-5.0, 1.0, 1.0, 10.0]).unwrap();
        let y = bilinear_sample(&x, &coords).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_offsets_match_plain_pooling_bit_exact() {
        let x = rng_init(Shape::new(2, 3, 7, 7), InitScheme::Uniform(-4.0, 4.0), 9);
        for stride in [1usize, 2] {
            let geom = DeformGeom::new(PoolKind::Max, stride);
            let spec = PoolSpec::max3(stride);
            let (ho, wo) = spec.out_hw(7, 7).unwrap();
            let offsets = Tensor::zeros(Shape::new(2, 18, ho, wo));
            let (y, _) = deform_pool(&x, &offsets, &geom).unwrap();
            let (want, _) = max_pool2d(&x, &spec).unwrap();
            assert!(y.bit_eq(&want), "max stride {stride}");

            let geom = DeformGeom::new(PoolKind::Avg, stride);
            let (y, _) = deform_pool(&x, &offsets, &geom).unwrap();
            let want = avg_pool2d(&x, &PoolSpec::avg3(stride)).unwrap();
            assert!(y.bit_eq(&want), "avg stride {stride}");
        }
    }

    #[test]
    fn constant_input_stays_constant_under_offsets() {
        let x = Tensor::full(Shape::new(1, 2, 7, 7), 3.25);
        let geom = DeformGeom::new(PoolKind::Avg, 1);
        let offsets = rng_init(Shape::new(1, 18, 7, 7), InitScheme::Uniform(-0.9, 0.9), 4);
        let (y, _) = deform_pool(&x, &offsets, &geom).unwrap();
        // Tap positions reach base +- (1 + 0.9), so cells at least 2 away
        // from every border interpolate only real pixels; nearer the border
        // the zero padding bleeds in by design.
        for c in 0..2 {
            for i in 2..=4 {
                for j in 2..=4 {
                    assert!((y.at(0, c, i, j) - 3.25).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let x = Tensor::ones(Shape::new(1, 1, 5, 5));
        let geom = DeformGeom::new(PoolKind::Max, 1);
        let offsets = Tensor::zeros(Shape::new(1, 10, 5, 5));
        assert!(matches!(
            deform_pool(&x, &offsets, &geom),
            Err(Error::Config(_))
        ));
    }
}
