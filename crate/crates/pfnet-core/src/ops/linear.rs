//! Fully connected layer over the feature dimension of token tensors.

use crate::error::{Error, Result};
use crate::ops::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Shape, Tensor};

fn check(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.w != 1 {
        return Err(Error::Shape(format!(
            "linear expects (N,T,D,1) layout, got {xs}"
        )));
    }
    if ws.h != 1 || ws.w != 1 {
        return Err(Error::Shape(format!("linear weight must be (O,D,1,1), got {ws}")));
    }
    if ws.c != xs.h {
        return Err(Error::Shape(format!(
            "linear weight expects {} input features, got {}",
            ws.c, xs.h
        )));
    }
    if let Some(b) = bias {
        if b.numel() != ws.n {
            return Err(Error::Shape("linear bias length mismatch".into()));
        }
    }
    Ok((xs.n * xs.c, xs.h, ws.n))
}

/// y[n,t,o] = sum_d x[n,t,d] * w[o,d] + b[o].
/// x: (N,T,D,1), w: (O,D,1,1), b: (O,1,1,1); output (N,T,O,1).
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, d, o) = check(x, w, bias)?;
    let mut out = vec![0.0f32; rows * o];
    gemm_nt(rows, d, o, x.data(), w.data(), &mut out);
    if let Some(b) = bias {
        let bd = b.data();
        for r in 0..rows {
            for (v, &bv) in out[r * o..(r + 1) * o].iter_mut().zip(bd) {
                *v += bv;
            }
        }
    }
    let xs = x.shape();
    Tensor::new(Shape::new(xs.n, xs.c, o, 1), out)
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let xs = x.shape();
    let ws = w.shape();
    let rows = xs.n * xs.c;
    let (d, o) = (ws.c, ws.n);

    // dX (rows, d) = dY (rows, o) * W (o, d)
    let mut dx = vec![0.0f32; rows * d];
    gemm_nn(rows, o, d, grad_out.data(), w.data(), &mut dx);

    // dW (o, d) = dY^T (o, rows) * X (rows, d)
    let mut dw = vec![0.0f32; o * d];
    gemm_tn(o, rows, d, grad_out.data(), x.data(), &mut dw);

    let db = if has_bias {
        let gd = grad_out.data();
        let mut db = vec![0.0f32; o];
        for r in 0..rows {
            for (s, &g) in db.iter_mut().zip(&gd[r * o..(r + 1) * o]) {
                *s += g;
            }
        }
        Some(Tensor::new(Shape::new(o, 1, 1, 1), db).expect("shape by construction"))
    } else {
        None
    };
    (
        Tensor::new(xs, dx).expect("shape by construction"),
        Tensor::new(ws, dw).expect("shape by construction"),
        db,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn applies_weight_and_bias() {
        // x = [1, 2], W = [[1, 0], [0, 1], [1, 1]], b = [0, 10, 100]
        let x = Tensor::from_vec([1, 1, 2, 1], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec([3, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::from_vec([3, 1, 1, 1], vec![0.0, 10.0, 100.0]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[1.0, 12.0, 103.0]);
    }

    #[test]
    fn shape_checks() {
        let x = Tensor::zeros(Shape::new(1, 1, 3, 1));
        let w = Tensor::zeros(Shape::new(2, 4, 1, 1));
        assert!(matches!(linear(&x, &w, None), Err(Error::Shape(_))));
    }
}
