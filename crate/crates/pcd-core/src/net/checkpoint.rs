//! Binary model checkpoints.
//!
//! Layout: magic `PCDC`, format version, a JSON descriptor (tree name,
//! build config, optional surgery record, scalar dtype), then a parameter
//! table of name, trainable flag, shape, and raw little-endian values.
//! Loading rebuilds the model structure from the descriptor and validates
//! every stored shape against it, so a file can never silently deserialize
//! into a mismatched architecture.

use super::{build_model, network_surgery, ModelConfig, PCDModel, SurgeryInfo};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::tree::DendriticTree;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

const MAGIC: &[u8; 4] = b"PCDC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Descriptor {
    tree: String,
    config: ModelConfig,
    surgery: Option<SurgeryInfo>,
    dtype: String,
}

fn dtype_name<F: Scalar>() -> &'static str {
    match std::mem::size_of::<F>() {
        4 => "f32",
        8 => "f64",
        _ => unreachable!("scalar types are f32 or f64"),
    }
}

pub fn save_checkpoint<F: Scalar>(model: &PCDModel<F>, path: &Path) -> Result<()> {
    let desc = Descriptor {
        tree: model.tree.name().to_string(),
        config: model.cfg.clone(),
        surgery: model.surgery.clone(),
        dtype: dtype_name::<F>().to_string(),
    };
    let desc_json =
        serde_json::to_vec(&desc).map_err(|e| Error::data(format!("descriptor encode: {e}")))?;

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(desc_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&desc_json);
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.trainable as u8);
        buf.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match std::mem::size_of::<F>() {
            4 => {
                for &v in p.value.data() {
                    let x: f32 = num_traits::cast(v).unwrap_or(f32::NAN);
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            _ => {
                for &v in p.value.data() {
                    let x: f64 = num_traits::cast(v).unwrap_or(f64::NAN);
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data("checkpoint truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Read only the scalar type a checkpoint stores, without loading it.
pub fn checkpoint_dtype(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut c = Cursor { buf: &bytes, pos: 0 };
    Ok(read_descriptor(&mut c)?.dtype)
}

fn read_descriptor(c: &mut Cursor<'_>) -> Result<Descriptor> {
    if c.take(4)? != MAGIC {
        return Err(Error::data("not a model checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let desc_len = c.u32()? as usize;
    serde_json::from_slice(c.take(desc_len)?)
        .map_err(|e| Error::data(format!("descriptor decode: {e}")))
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<PCDModel<F>> {
    let bytes = std::fs::read(path)?;
    let mut c = Cursor { buf: &bytes, pos: 0 };
    let desc = read_descriptor(&mut c)?;
    if desc.dtype != dtype_name::<F>() {
        return Err(Error::data(format!(
            "checkpoint stores {} parameters, loader expects {}",
            desc.dtype,
            dtype_name::<F>()
        )));
    }

    // Rebuild the architecture; stored values then overwrite every
    // parameter, so the build seed is irrelevant.
    let mut model: PCDModel<F> = match &desc.surgery {
        None => {
            let tree = DendriticTree::by_name(&desc.tree)?;
            build_model(&tree, &desc.config, 0)?
        }
        Some(info) => {
            let source = DendriticTree::by_name(&info.source_tree)?;
            let target = DendriticTree::by_name(&desc.tree)?;
            let base = build_model(&source, &desc.config, 0)?;
            network_surgery(&base, &target, &info.split_map, 0)?
        }
    };

    let n_params = c.u32()? as usize;
    if n_params != model.params.len() {
        return Err(Error::data(format!(
            "checkpoint has {} parameters, model expects {}",
            n_params,
            model.params.len()
        )));
    }
    let mut seen: HashSet<String> = HashSet::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::data("parameter name is not UTF-8"))?
            .to_string();
        let trainable = c.u8()? != 0;
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        let idx = model
            .index
            .get(&name)
            .copied()
            .ok_or_else(|| Error::data(format!("checkpoint parameter '{name}' not in model")))?;
        if model.params[idx].value.shape() != shape.as_slice() {
            return Err(Error::data(format!(
                "shape mismatch for '{}': checkpoint {:?}, model {:?}",
                name,
                shape,
                model.params[idx].value.shape()
            )));
        }
        if !seen.insert(name) {
            return Err(Error::data("duplicate parameter in checkpoint"));
        }
        let len: usize = shape.iter().product();
        let data: Vec<F> = match std::mem::size_of::<F>() {
            4 => {
                let raw = c.take(len * 4)?;
                raw.chunks_exact(4)
                    .map(|b| {
                        let x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                        num_traits::cast(x).expect("f32 fits scalar")
                    })
                    .collect()
            }
            _ => {
                let raw = c.take(len * 8)?;
                raw.chunks_exact(8)
                    .map(|b| {
                        let x = f64::from_le_bytes([
                            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
                        ]);
                        num_traits::cast(x).expect("f64 fits scalar")
                    })
                    .collect()
            }
        };
        model.params[idx].value = Tensor::from_vec(&shape, data)?;
        model.params[idx].trainable = trainable;
    }
    if c.pos != bytes.len() {
        return Err(Error::data("trailing bytes after checkpoint table"));
    }
    Ok(model)
}
