//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is built per forward pass: every operation stores its output
//! value and, when gradients are enabled and some input needs them, a
//! backward closure. [`Tape::backward`] walks the recorded nodes in reverse,
//! which is a valid topological order by construction.

use crate::error::{Error, Result};
use crate::ops;
use crate::ops::{
    AttnSaved, ConvSpec, DeformGeom, DeformSaved, LnSaved, PoolSpec, ShiftAssignment,
};
use crate::tensor::{Shape, Tensor};

pub type ValueId = usize;

/// Running statistics owned by one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

type BackFn = Box<dyn Fn(&Tensor, &Tape, &mut GradSink)>;

struct Node {
    back: BackFn,
}

/// Accumulates gradients per value id during the reverse sweep.
pub struct GradSink {
    grads: Vec<Option<Tensor>>,
    needs: Vec<bool>,
}

impl GradSink {
    pub fn add(&mut self, id: ValueId, g: Tensor) {
        if !self.needs[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape(), "gradient shape mismatch");
                let dst = acc.make_mut();
                for (d, &s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
            slot => *slot = Some(g),
        }
    }
}

/// Gradient map produced by [`Tape::backward`]: tensor id -> gradient.
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Option<Node>>,
    needs: Vec<bool>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
            needs: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values but no backward graph; used for inference.
    pub fn inference() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
            needs: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        let needs = self.grad_enabled && t.requires_grad();
        self.values.push(t);
        self.nodes.push(None);
        self.needs.push(needs);
        self.values.len() - 1
    }

    fn push(&mut self, out: Tensor, inputs: &[ValueId], back: impl Fn(&Tensor, &Tape, &mut GradSink) + 'static) -> ValueId {
        let needs = self.grad_enabled && inputs.iter().any(|&i| self.needs[i]);
        self.values.push(out);
        self.needs.push(needs);
        if needs {
            self.nodes.push(Some(Node { back: Box::new(back) }));
        } else {
            self.nodes.push(None);
        }
        self.values.len() - 1
    }

    /// Populates gradients for every requires-grad ancestor of `loss`.
    /// d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: ValueId) -> Result<GradMap> {
        if loss >= self.values.len() {
            return Err(Error::Usage(format!("value {loss} is not on this tape")));
        }
        if !self.grad_enabled {
            return Err(Error::Usage(
                "backward() on an inference tape; build with Tape::new()".into(),
            ));
        }
        if self.values[loss].numel() != 1 {
            return Err(Error::Usage(format!(
                "loss must be a 1-element tensor, got {}",
                self.values[loss].shape()
            )));
        }
        let mut sink = GradSink {
            grads: vec![None; self.values.len()],
            needs: self.needs.clone(),
        };
        sink.needs[loss] = true;
        sink.add(loss, Tensor::ones(self.values[loss].shape()));
        for id in (0..=loss).rev() {
            if let Some(node) = &self.nodes[id] {
                let Some(g) = sink.grads[id].clone() else {
                    continue;
                };
                (node.back)(&g, self, &mut sink);
            }
        }
        Ok(GradMap { grads: sink.grads })
    }

    // ── recorded operations ──────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
        spec: ConvSpec,
    ) -> Result<ValueId> {
        let out = ops::conv2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.push(out, &inputs, move |g, tape, sink| {
            let (gx, gw, gb) = ops::conv2d_backward(
                tape.value(x),
                tape.value(w),
                &spec,
                g,
                sink.needs[x],
                bias.is_some(),
            )
            .expect("forward geometry already validated");
            if let Some(gx) = gx {
                sink.add(x, gx);
            }
            sink.add(w, gw);
            if let (Some(b), Some(gb)) = (bias, gb) {
                sink.add(b, gb);
            }
        }))
    }

    pub fn max_pool2d(&mut self, x: ValueId, spec: PoolSpec) -> Result<ValueId> {
        let (out, argmax) = ops::max_pool2d(self.value(x), &spec)?;
        let in_shape = self.value(x).shape();
        Ok(self.push(out, &[x], move |g, _tape, sink| {
            let gx = ops::max_pool2d_backward(in_shape, &argmax, g)
                .expect("shapes fixed at forward");
            sink.add(x, gx);
        }))
    }

    pub fn avg_pool2d(&mut self, x: ValueId, spec: PoolSpec) -> Result<ValueId> {
        let out = ops::avg_pool2d(self.value(x), &spec)?;
        let in_shape = self.value(x).shape();
        Ok(self.push(out, &[x], move |g, _tape, sink| {
            let gx = ops::avg_pool2d_backward(in_shape, &spec, g)
                .expect("shapes fixed at forward");
            sink.add(x, gx);
        }))
    }

    pub fn global_avg_pool(&mut self, x: ValueId) -> ValueId {
        let out = ops::global_avg_pool(self.value(x));
        let in_shape = self.value(x).shape();
        self.push(out, &[x], move |g, _tape, sink| {
            sink.add(x, ops::global_avg_pool_backward(in_shape, g));
        })
    }

    pub fn shift(&mut self, x: ValueId, assign: ShiftAssignment, stride: usize) -> Result<ValueId> {
        let out = ops::shift(self.value(x), &assign, stride)?;
        let in_shape = self.value(x).shape();
        Ok(self.push(out, &[x], move |g, _tape, sink| {
            sink.add(x, ops::shift_backward(in_shape, &assign, stride, g));
        }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        state: &mut BnState,
        training: bool,
        eps: f32,
        momentum: f32,
    ) -> Result<ValueId> {
        if training {
            let (out, saved, var) =
                ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
            let xs = self.value(x).shape();
            let m = (xs.n * xs.h * xs.w) as f32;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for c in 0..xs.c {
                state.running_mean[c] =
                    (1.0 - momentum) * state.running_mean[c] + momentum * saved.mean[c];
                state.running_var[c] =
                    (1.0 - momentum) * state.running_var[c] + momentum * var[c] * unbias;
            }
            Ok(self.push(out, &[x, gamma, beta], move |g, tape, sink| {
                let (gx, gg, gb) = ops::batch_norm_backward_train(
                    tape.value(x),
                    tape.value(gamma),
                    &saved,
                    g,
                );
                sink.add(x, gx);
                sink.add(gamma, gg);
                sink.add(beta, gb);
            }))
        } else {
            let mean = state.running_mean.clone();
            let var = state.running_var.clone();
            let out = ops::batch_norm_eval(
                self.value(x),
                self.value(gamma),
                self.value(beta),
                &mean,
                &var,
                eps,
            )?;
            Ok(self.push(out, &[x, gamma, beta], move |g, tape, sink| {
                let (gx, gg, gb) = ops::batch_norm_backward_eval(
                    tape.value(x),
                    tape.value(gamma),
                    &mean,
                    &var,
                    eps,
                    g,
                );
                sink.add(x, gx);
                sink.add(gamma, gg);
                sink.add(beta, gb);
            }))
        }
    }

    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f32,
    ) -> Result<ValueId> {
        let (out, saved): (Tensor, LnSaved) =
            ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, &[x, gamma, beta], move |g, tape, sink| {
            let (gx, gg, gb) =
                ops::layer_norm_backward(tape.value(x), tape.value(gamma), &saved, g);
            sink.add(x, gx);
            sink.add(gamma, gg);
            sink.add(beta, gb);
        }))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = ops::relu(self.value(x));
        self.push(out, &[x], move |g, tape, sink| {
            sink.add(x, ops::relu_backward(tape.value(x), g));
        })
    }

    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        let out = ops::gelu(self.value(x));
        self.push(out, &[x], move |g, tape, sink| {
            sink.add(x, ops::gelu_backward(tape.value(x), g));
        })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let out = ops::sigmoid(self.value(x));
        let saved = out.clone();
        self.push(out, &[x], move |g, _tape, sink| {
            sink.add(x, ops::sigmoid_backward(&saved, g));
        })
    }

    pub fn linear(&mut self, x: ValueId, w: ValueId, bias: Option<ValueId>) -> Result<ValueId> {
        let out = ops::linear(self.value(x), self.value(w), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.push(out, &inputs, move |g, tape, sink| {
            let (gx, gw, gb) =
                ops::linear_backward(tape.value(x), tape.value(w), bias.is_some(), g);
            sink.add(x, gx);
            sink.add(w, gw);
            if let (Some(b), Some(gb)) = (bias, gb) {
                sink.add(b, gb);
            }
        }))
    }

    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let out = ops::softmax(self.value(x), axis)?;
        let saved = out.clone();
        Ok(self.push(out, &[x], move |g, _tape, sink| {
            let gx = ops::softmax_backward(&saved, axis, g).expect("axis validated at forward");
            sink.add(x, gx);
        }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_attention(
        &mut self,
        x: ValueId,
        wqkv: ValueId,
        biases: Option<(ValueId, ValueId)>,
        wo: ValueId,
        bo: Option<ValueId>,
        heads: usize,
    ) -> Result<ValueId> {
        let (out, saved): (Tensor, AttnSaved) = ops::multi_head_attention(
            self.value(x),
            self.value(wqkv),
            biases.map(|(q, v)| (self.value(q), self.value(v))),
            self.value(wo),
            bo.map(|b| self.value(b)),
            heads,
        )?;
        let mut inputs = vec![x, wqkv, wo];
        if let Some((q, v)) = biases {
            inputs.push(q);
            inputs.push(v);
        }
        inputs.extend(bo);
        Ok(self.push(out, &inputs, move |g, tape, sink| {
            let grads = ops::multi_head_attention_backward(
                tape.value(x),
                tape.value(wqkv),
                biases.is_some(),
                tape.value(wo),
                bo.is_some(),
                heads,
                &saved,
                g,
            );
            sink.add(x, grads.x);
            sink.add(wqkv, grads.wqkv);
            sink.add(wo, grads.wo);
            if let (Some((q, v)), Some((gq, gv))) = (biases, grads.biases) {
                sink.add(q, gq);
                sink.add(v, gv);
            }
            if let (Some(b), Some(gb)) = (bo, grads.bo) {
                sink.add(b, gb);
            }
        }))
    }

    pub fn bilinear_sample(&mut self, x: ValueId, coords: ValueId) -> Result<ValueId> {
        let out = ops::bilinear_sample(self.value(x), self.value(coords))?;
        Ok(self.push(out, &[x, coords], move |g, tape, sink| {
            let (gx, gc) = ops::bilinear_sample_backward(tape.value(x), tape.value(coords), g);
            sink.add(x, gx);
            sink.add(coords, gc);
        }))
    }

    pub fn deform_pool(
        &mut self,
        x: ValueId,
        offsets: ValueId,
        geom: DeformGeom,
    ) -> Result<ValueId> {
        let (out, saved): (Tensor, DeformSaved) =
            ops::deform_pool(self.value(x), self.value(offsets), &geom)?;
        Ok(self.push(out, &[x, offsets], move |g, tape, sink| {
            let (gx, goff) = ops::deform_pool_backward(
                tape.value(x),
                tape.value(offsets),
                &geom,
                &saved,
                g,
            );
            sink.add(x, gx);
            sink.add(offsets, goff);
        }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add of mismatched shapes {} and {}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, &[a, b], move |g, _tape, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.clone());
        }))
    }

    /// y[n,c,h,w] = x[n,c,h,w] * s[n,c,0,0]; the channel-attention scale.
    pub fn channel_scale(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        let (tx, ts) = (self.value(x), self.value(s));
        let xs = tx.shape();
        if ts.shape() != Shape::new(xs.n, xs.c, 1, 1) {
            return Err(Error::Shape(format!(
                "scale must be (N,C,1,1) = ({},{},1,1), got {}",
                xs.n,
                xs.c,
                ts.shape()
            )));
        }
        let plane = xs.h * xs.w;
        let mut data = vec![0.0f32; tx.numel()];
        for nc in 0..xs.n * xs.c {
            let sv = ts.data()[nc];
            for (o, &v) in data[nc * plane..(nc + 1) * plane]
                .iter_mut()
                .zip(&tx.data()[nc * plane..(nc + 1) * plane])
            {
                *o = v * sv;
            }
        }
        let out = Tensor::new(xs, data)?;
        Ok(self.push(out, &[x, s], move |g, tape, sink| {
            let tx = tape.value(x);
            let ts = tape.value(s);
            let xs = tx.shape();
            let plane = xs.h * xs.w;
            let mut gx = vec![0.0f32; tx.numel()];
            let mut gs = vec![0.0f32; ts.numel()];
            for nc in 0..xs.n * xs.c {
                let sv = ts.data()[nc];
                let mut acc = 0.0f64;
                for i in nc * plane..(nc + 1) * plane {
                    gx[i] = g.data()[i] * sv;
                    acc += (g.data()[i] * tx.data()[i]) as f64;
                }
                gs[nc] = acc as f32;
            }
            sink.add(x, Tensor::new(xs, gx).expect("shape by construction"));
            sink.add(s, Tensor::new(ts.shape(), gs).expect("shape by construction"));
        }))
    }

    /// (N,T,D,1) tokens -> (N,D,Hg,Wg) grid, token t at (t / Wg, t % Wg).
    pub fn tokens_to_grid(&mut self, x: ValueId, hg: usize, wg: usize) -> Result<ValueId> {
        let tx = self.value(x);
        let xs = tx.shape();
        if xs.c != hg * wg || xs.w != 1 {
            return Err(Error::Config(format!(
                "{} tokens do not factor into a {hg}x{wg} grid",
                xs.c
            )));
        }
        let (n, t, d) = (xs.n, xs.c, xs.h);
        let mut data = vec![0.0f32; tx.numel()];
        let xd = tx.data();
        for b in 0..n {
            for ti in 0..t {
                for di in 0..d {
                    data[((b * d + di) * hg + ti / wg) * wg + ti % wg] = xd[(b * t + ti) * d + di];
                }
            }
        }
        let out = Tensor::new(Shape::new(n, d, hg, wg), data)?;
        Ok(self.push(out, &[x], move |g, _tape, sink| {
            let gd = g.data();
            let mut dx = vec![0.0f32; n * t * d];
            for b in 0..n {
                for ti in 0..t {
                    for di in 0..d {
                        dx[(b * t + ti) * d + di] =
                            gd[((b * d + di) * hg + ti / wg) * wg + ti % wg];
                    }
                }
            }
            sink.add(
                x,
                Tensor::new(Shape::new(n, t, d, 1), dx).expect("shape by construction"),
            );
        }))
    }

    /// (N,D,H,W) grid -> (N,H*W,D,1) tokens; inverse of [`Self::tokens_to_grid`].
    pub fn grid_to_tokens(&mut self, x: ValueId) -> ValueId {
        let tx = self.value(x);
        let xs = tx.shape();
        let (n, d, h, w) = (xs.n, xs.c, xs.h, xs.w);
        let t = h * w;
        let mut data = vec![0.0f32; tx.numel()];
        let xd = tx.data();
        for b in 0..n {
            for di in 0..d {
                for hw in 0..t {
                    data[(b * t + hw) * d + di] = xd[(b * d + di) * t + hw];
                }
            }
        }
        let out = Tensor::new(Shape::new(n, t, d, 1), data).expect("shape by construction");
        self.push(out, &[x], move |g, _tape, sink| {
            let gd = g.data();
            let mut dx = vec![0.0f32; n * d * t];
            for b in 0..n {
                for di in 0..d {
                    for hw in 0..t {
                        dx[(b * d + di) * t + hw] = gd[(b * t + hw) * d + di];
                    }
                }
            }
            sink.add(
                x,
                Tensor::new(Shape::new(n, d, h, w), dx).expect("shape by construction"),
            );
        })
    }

    /// Metadata-only reshape.
    pub fn reshape(&mut self, x: ValueId, dims: [usize; 4]) -> Result<ValueId> {
        let tx = self.value(x);
        let old = tx.shape().dims();
        let out = tx.reshaped(dims)?;
        Ok(self.push(out, &[x], move |g, _tape, sink| {
            sink.add(x, g.reshaped(old).expect("element count preserved"));
        }))
    }

    /// x (N,T,D,1) + p (1,T,D,1), broadcast over the batch.
    pub fn add_broadcast_n(&mut self, x: ValueId, p: ValueId) -> Result<ValueId> {
        let (tx, tp) = (self.value(x), self.value(p));
        let xs = tx.shape();
        if tp.shape() != Shape::new(1, xs.c, xs.h, xs.w) {
            return Err(Error::Shape(format!(
                "broadcast add expects (1,{},{},{}), got {}",
                xs.c,
                xs.h,
                xs.w,
                tp.shape()
            )));
        }
        let per = tp.numel();
        let mut data = vec![0.0f32; tx.numel()];
        for b in 0..xs.n {
            for (o, (&v, &e)) in data[b * per..(b + 1) * per]
                .iter_mut()
                .zip(tx.data()[b * per..(b + 1) * per].iter().zip(tp.data()))
            {
                *o = v + e;
            }
        }
        let out = Tensor::new(xs, data)?;
        Ok(self.push(out, &[x, p], move |g, tape, sink| {
            sink.add(x, g.clone());
            let per = tape.value(p).numel();
            let mut dp = vec![0.0f32; per];
            for b in 0..xs.n {
                for (d, &gv) in dp.iter_mut().zip(&g.data()[b * per..(b + 1) * per]) {
                    *d += gv;
                }
            }
            sink.add(
                p,
                Tensor::new(tape.value(p).shape(), dp).expect("shape by construction"),
            );
        }))
    }

    /// Scalar loss: sum_i coeffs[i] * x[i], accumulated in f64.
    pub fn weighted_sum(&mut self, x: ValueId, coeffs: Tensor) -> Result<ValueId> {
        let tx = self.value(x);
        if coeffs.shape() != tx.shape() {
            return Err(Error::Shape("weighted_sum coefficient shape mismatch".into()));
        }
        let acc: f64 = tx
            .data()
            .iter()
            .zip(coeffs.data())
            .map(|(&v, &c)| v as f64 * c as f64)
            .sum();
        let out = Tensor::scalar(acc as f32);
        Ok(self.push(out, &[x], move |g, _tape, sink| {
            let gv = g.data()[0];
            let data = coeffs.data().iter().map(|&c| c * gv).collect();
            sink.add(
                x,
                Tensor::new(coeffs.shape(), data).expect("shape by construction"),
            );
        }))
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let coeffs = Tensor::ones(self.value(x).shape());
        self.weighted_sum(x, coeffs).expect("shapes match")
    }

    /// Mean cross-entropy with label smoothing; logits (N,K,1,1).
    pub fn cross_entropy(
        &mut self,
        logits: ValueId,
        targets: Vec<usize>,
        smoothing: f32,
    ) -> Result<ValueId> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), &targets, smoothing)?;
        Ok(self.push(loss, &[logits], move |g, _tape, sink| {
            sink.add(
                logits,
                ops::cross_entropy_backward(&probs, &targets, smoothing, g.data()[0]),
            );
        }))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{PoolKind, PoolSpec};

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec([1, 1, 2, 2], vec![1.0, -2.0, 3.0, 4.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_zero_at_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec([1, 1, 2, 2], vec![-1.0, 2.0, 3.0, -4.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let y = tape.relu(x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let y = tape
            .max_pool2d(x, PoolSpec::new(PoolKind::Max, 2, 1, 0))
            .unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn loss_must_be_scalar_and_on_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
        assert!(matches!(tape.backward(99), Err(Error::Usage(_))));
    }

    #[test]
    fn chain_rule_composition_matches_split_graphs() {
        // Composed: loss = sum(relu(conv(x))) in one tape.
        let xt = Tensor::from_vec(
            [1, 1, 3, 3],
            vec![0.5, -1.0, 2.0, 1.5, -0.5, 0.25, -2.0, 1.0, 0.75],
        )
        .unwrap()
        .with_requires_grad(true);
        let wt = Tensor::from_vec([1, 1, 3, 3], (0..9).map(|i| 0.1 * i as f32 - 0.4).collect())
            .unwrap()
            .with_requires_grad(true);
        let spec = ConvSpec::new(1, 1, 3, 1);

        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone());
        let w = tape.leaf(wt.clone());
        let y = tape.conv2d(x, w, None, spec).unwrap();
        let z = tape.relu(y);
        let loss = tape.sum_all(z);
        let grads = tape.backward(loss).unwrap();
        let composed_gx = grads.get(x).unwrap().clone();
        let composed_gw = grads.get(w).unwrap().clone();

        // Split: first run relu-only backward to get d(loss)/d(conv out),
        // then feed that as the output gradient of a conv-only graph.
        let conv_out = ops::conv2d(&xt, &wt, None, &spec).unwrap();
        let mut t2 = Tape::new();
        let mid = t2.leaf(conv_out.clone().with_requires_grad(true));
        let z2 = t2.relu(mid);
        let loss2 = t2.sum_all(z2);
        let g2 = t2.backward(loss2).unwrap();
        let dmid = g2.get(mid).unwrap();

        let (gx, gw, _) = ops::conv2d_backward(&xt, &wt, &spec, dmid, true, false).unwrap();
        assert!(gx.unwrap().max_diff(&composed_gx) < 1e-6);
        assert!(gw.max_diff(&composed_gw) < 1e-6);
    }
}
