//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "G2PCKPT\0"
//! version u32
//! hlen    u64      length of the JSON header
//! header  hlen bytes: config, vocabularies, training metadata, tensor count
//! tensors repeated: u32 name length, name (UTF-8), u32 rank, u64 per dim,
//!         f32 values in row-major order
//! ```
//!
//! LSTM weight rows are stored in gate order (input, forget, cell, output).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{G2pError, Result};
use crate::layers::ParamGroup;
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"G2PCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
pub const GATE_ORDER: &str = "input,forget,cell,output";

/// Training state recorded alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub dev_wer: Option<f64>,
    pub lr: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    graphemes: Vocabulary,
    phonemes: Vocabulary,
    meta: CheckpointMeta,
    gate_order: String,
    tensors: usize,
}

fn bad(msg: impl Into<String>) -> G2pError {
    G2pError::Checkpoint(msg.into())
}

/// Writes `model` and `meta` to `w`. Values are stored as 32-bit floats.
pub fn write_checkpoint<T: Scalar, W: Write>(model: &Model<T>, meta: &CheckpointMeta, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    let named = model.params.named();
    let header = Header {
        config: model.config.clone(),
        graphemes: model.graphemes.clone(),
        phonemes: model.phonemes.clone(),
        meta: meta.clone(),
        gate_order: GATE_ORDER.to_string(),
        tensors: named.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (name, t) in named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<T: Scalar, R: Read>(r: R) -> Result<(Model<T>, CheckpointMeta)> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let hlen = read_u64(&mut r)? as usize;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    if header.gate_order != GATE_ORDER {
        return Err(bad(format!("unknown gate order {:?}", header.gate_order)));
    }

    let mut stored: HashMap<String, Tensor<T>> = HashMap::with_capacity(header.tensors);
    for _ in 0..header.tensors {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let t = Tensor::new(shape, data)?.with_requires_grad();
        if stored.insert(name.clone(), t).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }

    let mut model = Model::<T>::new(header.config, header.graphemes, header.phonemes)?;
    let mut problem = None;
    model.params.visit_mut("", &mut |name, t| match stored.remove(&name) {
        Some(s) if s.shape() == t.shape() => *t = s,
        Some(s) => {
            problem.get_or_insert(format!("{name}: stored shape {:?}, expected {:?}", s.shape(), t.shape()));
        }
        None => {
            problem.get_or_insert(format!("missing tensor {name}"));
        }
    });
    if let Some(p) = problem {
        return Err(bad(p));
    }
    if let Some(extra) = stored.keys().min() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok((model, header.meta))
}

/// Saves through a temporary file so an interrupted write never leaves a
/// truncated checkpoint at `path`.
pub fn save<T: Scalar>(model: &Model<T>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write_checkpoint(model, meta, File::create(&tmp)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let f = File::open(path).map_err(|e| {
        G2pError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    read_checkpoint(f)
}
