//! Binary checkpoint: `"SWRN"`, a `u32` version, a length-prefixed JSON
//! header, then one record per tensor:
//!
//! ```text
//! u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f32 payload
//! ```
//!
//! All integers and floats are little-endian. Optimizer moments are stored
//! under `adam.m.<param>` and `adam.v.<param>`.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig};
use crate::numerics::Tensor;
use crate::training::adam::AdamState;

pub const MAGIC: &[u8; 4] = b"SWRN";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    adam_step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &EncoderModel<f32>, state: &AdamState<f32>) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        adam_step: state.step,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 12 * model.num_params());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(&header);
    for p in model.store.iter() {
        put_record(&mut out, &p.name, p.tensor.shape(), p.tensor.data());
    }
    for (prefix, moments) in [("adam.m.", &state.m), ("adam.v.", &state.v)] {
        for (p, values) in model.store.iter().zip(moments) {
            put_record(&mut out, &format!("{prefix}{}", p.name), p.tensor.shape(), values);
        }
    }
    out
}

/// Writes to a sibling temporary file first so an interrupted save never
/// leaves a truncated checkpoint under `path`.
pub fn save_checkpoint(path: &Path, model: &EncoderModel<f32>, state: &AdamState<f32>) -> Result<()> {
    let bytes = encode_checkpoint(model, state);
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(&bytes)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(EncoderModel<f32>, AdamState<f32>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len, "header")?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header.config.validate()?;
    let mut model = EncoderModel::<f32>::new(&header.config, 0)?;
    let mut state = AdamState::new(&model.store);
    state.step = header.adam_step;

    let ids: HashMap<String, usize> = model
        .store
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), i))
        .collect();
    let n = ids.len();
    let mut filled = vec![false; 3 * n];
    while !r.done() {
        let name_len = r.u32("record name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "record name")?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > crate::numerics::MAX_RANK {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let (slot, base) = if let Some(rest) = name.strip_prefix("adam.m.") {
            (1, rest)
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            (2, rest)
        } else {
            (0, name.as_str())
        };
        let &i = ids
            .get(base)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected record {name:?}")))?;
        let id = model.store.ids().nth(i).unwrap();
        let expect = model.store.tensor(id).shape().to_vec();
        if shape != expect {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {shape:?}, config expects {expect:?}"
            )));
        }
        if std::mem::replace(&mut filled[slot * n + i], true) {
            return Err(Error::Checkpoint(format!("duplicate record {name:?}")));
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4, &name)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("{name}: non-finite value at index {pos}")));
        }
        match slot {
            0 => *model.store.tensor_mut(id) = Tensor::new(&shape, values)?,
            1 => state.m[i] = values,
            _ => state.v[i] = values,
        }
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        let name = &model.store.get(model.store.ids().nth(missing % n).unwrap()).name;
        let prefix = ["", "adam.m.", "adam.v."][missing / n];
        return Err(Error::Checkpoint(format!("missing record {prefix}{name}")));
    }
    Ok((model, state))
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderModel<f32>, AdamState<f32>)> {
    decode_checkpoint(&std::fs::read(path)?)
}
