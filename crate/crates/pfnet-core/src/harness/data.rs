//! Dataset ingestion: the CIFAR-10 binary format and deterministic
//! synthetic datasets for desk-scale experiments.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Per-channel standardization constants applied after scaling CIFAR-10
/// pixels to [0,1].
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const CIFAR_RECORD: usize = 3073;
const CIFAR_RECORDS_PER_FILE: usize = 10_000;

#[derive(Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s.c, s.h, s.w)
    }

    /// Gathers the given sample indices into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.images.shape();
        let per = s.c * s.h * s.w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!("sample {i} out of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((
            Tensor::new(Shape::new(indices.len(), s.c, s.h, s.w), data)?,
            labels,
        ))
    }

    /// First n samples and the rest, as two datasets.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head, "head")?, self.subset(&tail, "tail")?))
    }

    pub fn subset(&self, indices: &[usize], split: &str) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Ok(Dataset {
            images,
            labels,
            classes: self.classes,
            split: split.to_string(),
        })
    }
}

fn parse_cifar_file(path: &Path, images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != CIFAR_RECORD * CIFAR_RECORDS_PER_FILE {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            CIFAR_RECORD * CIFAR_RECORDS_PER_FILE,
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!(
                "{}: label {label} out of range",
                path.display()
            )));
        }
        labels.push(label);
        for c in 0..3 {
            let plane = &rec[1 + c * 1024..1 + (c + 1) * 1024];
            for &px in plane {
                images.push((px as f32 / 255.0 - CIFAR10_MEAN[c]) / CIFAR10_STD[c]);
            }
        }
    }
    Ok(())
}

/// Loads the CIFAR-10 binary batches (5 train files + 1 test file of
/// 10000 records each: 1 label byte + 3072 pixel bytes). Pixels are
/// scaled to [0,1] and per-channel standardized.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        parse_cifar_file(
            &dir.join(format!("data_batch_{i}.bin")),
            &mut train_images,
            &mut train_labels,
        )?;
    }
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    parse_cifar_file(&dir.join("test_batch.bin"), &mut test_images, &mut test_labels)?;
    let train = Dataset {
        images: Tensor::new(Shape::new(train_labels.len(), 3, 32, 32), train_images)?,
        labels: train_labels,
        classes: 10,
        split: "train".into(),
    };
    let test = Dataset {
        images: Tensor::new(Shape::new(test_labels.len(), 3, 32, 32), test_images)?,
        labels: test_labels,
        classes: 10,
        split: "test".into(),
    };
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Two linearly separable classes: a bright 3x3 blob in a
    /// class-specific corner of an 8x8 single-channel image.
    Blobs,
    /// Ten classes of oriented sinusoidal stripes on 3x32x32 images.
    Stripes,
    /// Ten classes of sparse bright dots on 3x32x32 noise where dot
    /// height and dot count trade off so every class has the same mean
    /// intensity: the class is only readable from peak amplitudes, not
    /// from averages.
    Checker,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "blobs" => SynthKind::Blobs,
            "stripes" => SynthKind::Stripes,
            "checker" => SynthKind::Checker,
            other => return Err(Error::Config(format!("unknown synth kind '{other}'"))),
        })
    }
}

/// Deterministic synthetic dataset; identical (kind, n, seed) yield
/// identical tensors.
pub fn synth(kind: SynthKind, n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    match kind {
        SynthKind::Blobs => {
            let (c, h, w) = (1usize, 8usize, 8usize);
            let mut data = vec![0.0f32; n * c * h * w];
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % 2;
                labels.push(class);
                let img = &mut data[i * h * w..(i + 1) * h * w];
                for v in img.iter_mut() {
                    *v = rng.normal() * 0.1;
                }
                let (r0, c0) = if class == 0 { (1, 1) } else { (4, 4) };
                for dr in 0..3 {
                    for dc in 0..3 {
                        img[(r0 + dr) * w + (c0 + dc)] += 1.5 + rng.normal() * 0.05;
                    }
                }
            }
            Dataset {
                images: Tensor::new(Shape::new(n, c, h, w), data).expect("sized above"),
                labels,
                classes: 2,
                split: "synth-blobs".into(),
            }
        }
        SynthKind::Stripes => {
            let (c, h, w) = (3usize, 32usize, 32usize);
            let mut data = vec![0.0f32; n * c * h * w];
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % 10;
                labels.push(class);
                let theta = class as f32 * std::f32::consts::PI / 10.0;
                let phase = rng.uniform() * std::f32::consts::TAU;
                let freq = std::f32::consts::TAU / 8.0;
                for ch in 0..c {
                    let img = &mut data[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            let proj = x as f32 * theta.cos() + y as f32 * theta.sin();
                            img[y * w + x] =
                                0.5 * (freq * proj + phase).cos() + rng.normal() * 0.1;
                        }
                    }
                }
            }
            Dataset {
                images: Tensor::new(Shape::new(n, c, h, w), data).expect("sized above"),
                labels,
                classes: 10,
                split: "synth-stripes".into(),
            }
        }
        SynthKind::Checker => {
            let (c, h, w) = (3usize, 32usize, 32usize);
            let mut data = vec![0.0f32; n * c * h * w];
            let mut labels = Vec::with_capacity(n);
            // Sparse-peak field. Each image scatters 3x3 patches whose
            // true height encodes the class but where only a random subset
            // of the 9 cells is lit, and the patch count offsets the
            // height so mean intensity carries no class signal. Pointwise
            // or averaged readouts see height * (lit fraction), a
            // multiplicatively noisy value; the local maximum over a
            // window recovers the true height.
            const MEAN_BUDGET: f32 = 100.0;
            for i in 0..n {
                let class = i % 10;
                labels.push(class);
                let height = 1.0 + 0.3 * class as f32;
                let count = (MEAN_BUDGET / (4.0 * height)).round().max(1.0) as usize;
                let base = i * c * h * w;
                for v in &mut data[base..base + c * h * w] {
                    *v = rng.normal() * 0.1;
                }
                for _ in 0..count {
                    let py = rng.uniform_usize(h - 2);
                    let px = rng.uniform_usize(w - 2);
                    let force_lit = rng.uniform_usize(9);
                    for cell in 0..9 {
                        if cell != force_lit && rng.uniform() >= 0.4 {
                            continue;
                        }
                        let a = height * (1.0 + rng.normal() * 0.02);
                        for ch in 0..c {
                            data[base
                                + (ch * h + py + cell / 3) * w
                                + px
                                + cell % 3] += a;
                        }
                    }
                }
            }
            Dataset {
                images: Tensor::new(Shape::new(n, c, h, w), data).expect("sized above"),
                labels,
                classes: 10,
                split: "synth-checker".into(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic() {
        let a = synth(SynthKind::Blobs, 100, 1);
        let b = synth(SynthKind::Blobs, 100, 1);
        assert!(a.images.bit_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        let c = synth(SynthKind::Blobs, 100, 2);
        assert!(!a.images.bit_eq(&c.images));
    }

    #[test]
    fn cifar_loader_round_trips_generated_files() {
        let dir = std::env::temp_dir().join(format!("pfnet-cifar-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        // Synthesize format-exact batch files with a known pattern.
        let mut rng = Rng::new(9);
        for f in 1..=6 {
            let name = if f <= 5 {
                format!("data_batch_{f}.bin")
            } else {
                "test_batch.bin".to_string()
            };
            let mut bytes = Vec::with_capacity(CIFAR_RECORD * CIFAR_RECORDS_PER_FILE);
            for r in 0..CIFAR_RECORDS_PER_FILE {
                bytes.push((r % 10) as u8);
                for _ in 0..3072 {
                    bytes.push((rng.next_u64() & 0xff) as u8);
                }
            }
            std::fs::write(dir.join(name), &bytes).unwrap();
        }
        let (train, test) = load_cifar10(&dir).unwrap();
        assert_eq!(train.len(), 50_000);
        assert_eq!(test.len(), 10_000);
        assert_eq!(train.classes, 10);
        assert_eq!(train.labels[3], 3);
        // Spot-check the standardization of a single known byte.
        let raw = std::fs::read(dir.join("data_batch_1.bin")).unwrap();
        let px = raw[1] as f32 / 255.0;
        let want = (px - CIFAR10_MEAN[0]) / CIFAR10_STD[0];
        assert!((train.images.data()[0] - want).abs() < 1e-6);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_cifar_file_fails_closed() {
        let dir = std::env::temp_dir().join(format!("pfnet-cifar-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        for f in 1..=5 {
            std::fs::write(
                dir.join(format!("data_batch_{f}.bin")),
                vec![0u8; CIFAR_RECORD * CIFAR_RECORDS_PER_FILE],
            )
            .unwrap();
        }
        std::fs::write(dir.join("test_batch.bin"), vec![0u8; 300]).unwrap();
        match load_cifar10(&dir) {
            Err(Error::Format(msg)) => assert!(msg.contains("test_batch.bin")),
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn batch_gathers_correct_samples() {
        let d = synth(SynthKind::Blobs, 10, 3);
        let (images, labels) = d.batch(&[2, 5]).unwrap();
        assert_eq!(images.shape().n, 2);
        assert_eq!(labels, vec![d.labels[2], d.labels[5]]);
        assert!(d.batch(&[99]).is_err());
    }
}
