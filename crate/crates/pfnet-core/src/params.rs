//! Named parameter storage and the flat binary checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// One trainable tensor with its hierarchical name,
/// e.g. "stage3.block2.conv1.weight".
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Flat, name-indexed parameter store. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: value.with_requires_grad(true),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

// ── checkpoint format ────────────────────────────────────────────────
//
// Flat binary file, little endian throughout:
//   magic "PFNT", version u32, count u32, then per entry:
//   name length u16, UTF-8 name, 4 u32 shape entries, raw f32 payload.

const MAGIC: &[u8; 4] = b"PFNT";
const VERSION: u32 = 1;

/// Writes named tensors in file order.
pub fn save_checkpoint<'a>(
    path: &Path,
    entries: impl Iterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let entries: Vec<(&str, &Tensor)> = entries.collect();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: {name}")));
        }
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        for d in tensor.shape().dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads every entry of a checkpoint file in order.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} of {}",
                *off,
                bytes.len()
            )));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected PFNT".into()));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, nlen)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        }
        let shape = Shape::from(dims);
        let payload = take(&mut off, shape.numel() * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if off != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last checkpoint entry",
            bytes.len() - off
        )));
    }
    Ok(out)
}
