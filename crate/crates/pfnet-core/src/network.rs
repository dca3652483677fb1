//! Materialized networks: an [`ArchSpec`] turned into parameters plus an
//! execution plan, with training and inference forwards.

use std::path::Path;

use crate::arch::{ArchSpec, StemSpec};
use crate::blocks::{
    materialize_block, materialize_head, materialize_stem, BlockPiece, Fwd, HeadPiece,
    Materializer, StemPiece,
};
use crate::error::{Error, Result};
use crate::params::{load_checkpoint, save_checkpoint, ParamSet};
use crate::tape::{BnState, GradMap, Tape, ValueId};
use crate::tensor::{Shape, Tensor};

pub struct Network {
    pub spec: ArchSpec,
    pub params: ParamSet,
    pub states: Vec<BnState>,
    pub seed: u64,
    stem: StemPiece,
    blocks: Vec<BlockPiece>,
    head: HeadPiece,
}

/// Result of a recorded forward pass: the logits id plus the tape id of
/// every parameter, aligned with `Network::params` order.
pub struct ForwardRecord {
    pub logits: ValueId,
    pub param_ids: Vec<ValueId>,
}

impl Network {
    /// Materializes and deterministically initializes every parameter.
    /// The same seed and spec yield bit-identical networks.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Network> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut states = Vec::new();
        let mut m = Materializer::new(&mut params, &mut states, seed);

        let stem = materialize_stem(&mut m, &spec.stem, spec.input)?;
        let token_body = matches!(spec.stem, StemSpec::PatchEmbed { .. });

        // Track the token grid through the stages for token blocks.
        let mut grid = match &stem {
            StemPiece::PatchEmbed { grid, .. } => Some(*grid),
            _ => None,
        };

        let mut blocks = Vec::new();
        let mut features = 0usize;
        for (si, stage) in spec.stages.iter().enumerate() {
            for (bi, b) in stage.blocks.iter().enumerate() {
                let name = format!("stage{}.block{}", si + 1, bi + 1);
                let piece = materialize_block(&mut m, &name, b, grid)?;
                if let (Some(g), crate::arch::BlockKind::TokenDownsample) = (grid, b.kind) {
                    grid = Some(((g.0 - 1) / 2 + 1, (g.1 - 1) / 2 + 1));
                }
                features = b.out_channels;
                blocks.push(piece);
            }
        }
        let head = materialize_head(&mut m, &spec.head, features, token_body)?;
        Ok(Network {
            spec: spec.clone(),
            params,
            states,
            seed,
            stem,
            blocks,
            head,
        })
    }

    pub fn blocks(&self) -> &[BlockPiece] {
        &self.blocks
    }

    /// Number of trainable scalars actually allocated; the engine side of
    /// the cost-model cross check.
    pub fn trainable_scalars(&self) -> usize {
        self.params.scalar_count()
    }

    fn expected_input(&self, batch: usize) -> Shape {
        let (c, h, w) = self.spec.input;
        Shape::new(batch, c, h, w)
    }

    /// Recorded forward pass. `training` selects batch-statistics mode for
    /// batch norm and updates running statistics.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Tensor,
        training: bool,
    ) -> Result<ForwardRecord> {
        let want = self.expected_input(x.shape().n);
        if x.shape() != want {
            return Err(Error::Shape(format!(
                "network expects input {}, got {}",
                want,
                x.shape()
            )));
        }
        let param_ids: Vec<ValueId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let mut fw = Fwd {
            tape,
            pids: &param_ids,
            states: &mut self.states,
            training,
        };
        let mut v = fw.tape.leaf(x);
        v = self.stem.forward(&mut fw, v)?;
        for block in &self.blocks {
            v = block.forward(&mut fw, v)?;
        }
        let logits = self.head.forward(&mut fw, v)?;
        Ok(ForwardRecord { logits, param_ids })
    }

    /// Inference forward: no gradient recording, running statistics used
    /// and left untouched.
    pub fn forward_eval(&self, x: Tensor) -> Result<Tensor> {
        let want = self.expected_input(x.shape().n);
        if x.shape() != want {
            return Err(Error::Shape(format!(
                "network expects input {}, got {}",
                want,
                x.shape()
            )));
        }
        let mut tape = Tape::inference();
        let mut states = self.states.clone();
        let param_ids: Vec<ValueId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let mut fw = Fwd {
            tape: &mut tape,
            pids: &param_ids,
            states: &mut states,
            training: false,
        };
        let mut v = fw.tape.leaf(x);
        v = self.stem.forward(&mut fw, v)?;
        for block in &self.blocks {
            v = block.forward(&mut fw, v)?;
        }
        let logits = self.head.forward(&mut fw, v)?;
        Ok(tape.value(logits).clone())
    }

    /// Inference over a batch split across `threads` workers. Per-sample
    /// results are bit-identical to the single-threaded path because eval
    /// mode has no cross-sample coupling.
    pub fn forward_eval_threaded(&self, x: Tensor, threads: usize) -> Result<Tensor> {
        let n = x.shape().n;
        if threads <= 1 || n <= 1 {
            return self.forward_eval(x);
        }
        let workers = threads.min(n);
        let chunk = n.div_ceil(workers);
        let xs = x.shape();
        let per = xs.c * xs.h * xs.w;
        let mut slices = Vec::new();
        let mut start = 0usize;
        while start < n {
            let len = chunk.min(n - start);
            let sub = Tensor::new(
                Shape::new(len, xs.c, xs.h, xs.w),
                x.data()[start * per..(start + len) * per].to_vec(),
            )?;
            slices.push(sub);
            start += len;
        }
        let outputs: Vec<Result<Tensor>> = std::thread::scope(|scope| {
            let handles: Vec<_> = slices
                .into_iter()
                .map(|sub| scope.spawn(move || self.forward_eval(sub)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut data = Vec::with_capacity(n * self.spec.classes());
        let mut classes = 0usize;
        for out in outputs {
            let t = out?;
            classes = t.shape().c;
            data.extend_from_slice(t.data());
        }
        Tensor::new(Shape::new(n, classes, 1, 1), data)
    }

    /// Cross-entropy training step graph: forward + loss on one tape.
    pub fn loss_graph(
        &mut self,
        tape: &mut Tape,
        x: Tensor,
        targets: Vec<usize>,
        label_smoothing: f32,
    ) -> Result<(ValueId, ForwardRecord)> {
        let rec = self.forward(tape, x, true)?;
        let loss = tape.cross_entropy(rec.logits, targets, label_smoothing)?;
        Ok((loss, rec))
    }

    /// Applies a gradient map produced by `tape.backward` to external
    /// storage aligned with parameter order.
    pub fn collect_grads(&self, record: &ForwardRecord, grads: &mut GradMap) -> Vec<Option<Tensor>> {
        record
            .param_ids
            .iter()
            .map(|&id| grads.take(id))
            .collect()
    }

    // ── checkpointing ────────────────────────────────────────────────

    /// Saves trainable parameters plus batch-norm running statistics.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (i, st) in self.states.iter().enumerate() {
            let c = st.running_mean.len();
            entries.push((
                format!("_state{}.running_mean", i),
                Tensor::new(Shape::new(c, 1, 1, 1), st.running_mean.clone())?,
            ));
            entries.push((
                format!("_state{}.running_var", i),
                Tensor::new(Shape::new(c, 1, 1, 1), st.running_var.clone())?,
            ));
        }
        save_checkpoint(path, entries.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Restores parameters and running statistics by name.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = load_checkpoint(path)?;
        for (name, tensor) in entries {
            if let Some(rest) = name.strip_prefix("_state") {
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Format(format!("bad state entry '{name}'")))?;
                let idx: usize = idx
                    .parse()
                    .map_err(|_| Error::Format(format!("bad state index in '{name}'")))?;
                let st = self
                    .states
                    .get_mut(idx)
                    .ok_or_else(|| Error::Format(format!("state {idx} out of range")))?;
                match field {
                    "running_mean" => st.running_mean = tensor.data().to_vec(),
                    "running_var" => st.running_var = tensor.data().to_vec(),
                    other => {
                        return Err(Error::Format(format!("unknown state field '{other}'")))
                    }
                }
            } else {
                let have = self
                    .params
                    .by_name(&name)
                    .ok_or_else(|| Error::Format(format!("unknown parameter '{name}'")))?;
                if have.value.shape() != tensor.shape() {
                    return Err(Error::Format(format!(
                        "parameter '{name}' shape {} does not match checkpoint {}",
                        have.value.shape(),
                        tensor.shape()
                    )));
                }
                let id = self
                    .params
                    .iter()
                    .position(|p| p.name == name)
                    .expect("checked above");
                self.params.get_mut(id).value = tensor.with_requires_grad(true);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_resnet, ResnetDepth, ResnetOptions, StagePattern};
    use crate::blocks::random_input;

    fn tiny_spec() -> ArchSpec {
        build_resnet(
            ResnetDepth::R26,
            &StagePattern::Hybrid,
            &ResnetOptions {
                classes: 10,
                ..ResnetOptions::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn deterministic_build_and_forward() {
        let spec = tiny_spec();
        let a = Network::build(&spec, 42).unwrap();
        let b = Network::build(&spec, 42).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert!(pa.value.bit_eq(&pb.value), "{} differs", pa.name);
        }
        let x = random_input(Shape::new(2, 3, 32, 32), 7);
        let ya = a.forward_eval(x.clone()).unwrap();
        let yb = b.forward_eval(x).unwrap();
        assert!(ya.bit_eq(&yb));
        assert_eq!(ya.shape(), Shape::new(2, 10, 1, 1));
        assert!(ya.is_finite());
    }

    #[test]
    fn different_seed_differs() {
        let spec = tiny_spec();
        let a = Network::build(&spec, 1).unwrap();
        let b = Network::build(&spec, 2).unwrap();
        let same = a
            .params
            .iter()
            .zip(b.params.iter())
            .all(|(x, y)| x.value.bit_eq(&y.value));
        assert!(!same);
    }

    #[test]
    fn threaded_eval_matches_single() {
        let spec = tiny_spec();
        let net = Network::build(&spec, 3).unwrap();
        let x = random_input(Shape::new(5, 3, 32, 32), 11);
        let single = net.forward_eval(x.clone()).unwrap();
        let multi = net.forward_eval_threaded(x, 3).unwrap();
        assert!(single.bit_eq(&multi));
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = tiny_spec();
        let net = Network::build(&spec, 5).unwrap();
        let dir = std::env::temp_dir().join(format!("pfnet-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.pfnt");
        net.save(&path).unwrap();

        let mut other = Network::build(&spec, 99).unwrap();
        other.load(&path).unwrap();
        for (a, b) in net.params.iter().zip(other.params.iter()) {
            assert!(a.value.bit_eq(&b.value), "{}", a.name);
        }
        let x = random_input(Shape::new(1, 3, 32, 32), 13);
        assert!(net
            .forward_eval(x.clone())
            .unwrap()
            .bit_eq(&other.forward_eval(x).unwrap()));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn wrong_input_geometry_rejected() {
        let spec = tiny_spec();
        let net = Network::build(&spec, 5).unwrap();
        let x = random_input(Shape::new(1, 3, 16, 16), 1);
        assert!(matches!(net.forward_eval(x), Err(Error::Shape(_))));
    }
}
