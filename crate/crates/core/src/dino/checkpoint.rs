//! Binary checkpoint files (magic `STNC`).
//!
//! Layout, little-endian throughout:
//! magic `STNC`, u32 version, u32 parameter count, then per parameter
//! `u16 name length, name bytes, u8 ndim, u32 dims..., f32 data`;
//! followed by the center vector (u32 length + f32 data) and the scalar
//! clocks (u64 global step, u32 epoch, u64 optimizer step).
//!
//! Student, teacher and optimizer moment tensors share the parameter table
//! under the `student.`, `teacher.`, `opt.m.` and `opt.v.` prefixes.

use super::DinoState;
use crate::encoder::ParameterSet;
use crate::error::{Error, Result};
use crate::tensor::{AdamWState, Tensor};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"STNC";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, state: &DinoState) -> Result<()> {
    let mut table: BTreeMap<String, &Tensor<f32>> = BTreeMap::new();
    for (k, v) in state.student.map() {
        table.insert(format!("student.{k}"), v);
    }
    for (k, v) in state.teacher.map() {
        table.insert(format!("teacher.{k}"), v);
    }
    let (m, v) = state.opt.moments();
    for (k, t) in m {
        table.insert(format!("opt.m.{k}"), t);
    }
    for (k, t) in v {
        table.insert(format!("opt.v.{k}"), t);
    }

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, tensor) in &table {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in tensor.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(state.center.numel() as u32).to_le_bytes());
    for &x in state.center.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&state.epoch.to_le_bytes());
    buf.extend_from_slice(&state.opt.t.to_le_bytes());

    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.clone(),
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<DinoState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            path: r.path,
            offset: 0,
            reason: "bad magic, expected STNC".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            path: r.path,
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("parameter count")? as usize;
    let mut table: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_off = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format {
                path: path.display().to_string(),
                offset: name_off as u64,
                reason: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = r.take(1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        table.insert(name, Tensor::new(&shape, data)?);
    }
    let center_len = r.u32("center length")? as usize;
    let raw = r.take(4 * center_len, "center")?;
    let center = Tensor::new(
        &[center_len],
        raw.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )?;
    let step = r.u64("step")?;
    let epoch = r.u32("epoch")?;
    let opt_t = r.u64("optimizer step")?;
    if r.pos != bytes.len() {
        return Err(Error::Format {
            path: r.path,
            offset: r.pos as u64,
            reason: "trailing bytes after checkpoint".into(),
        });
    }

    let mut student = ParameterSet::new();
    let mut teacher = ParameterSet::new();
    let mut opt = AdamWState::new(0.9, 0.999, 1e-8);
    opt.t = opt_t;
    let mut moments: BTreeMap<String, (Option<Tensor<f32>>, Option<Tensor<f32>>)> =
        BTreeMap::new();
    for (name, tensor) in table {
        if let Some(rest) = name.strip_prefix("student.") {
            student.insert(rest, tensor);
        } else if let Some(rest) = name.strip_prefix("teacher.") {
            teacher.insert(rest, tensor);
        } else if let Some(rest) = name.strip_prefix("opt.m.") {
            moments.entry(rest.to_string()).or_default().0 = Some(tensor);
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            moments.entry(rest.to_string()).or_default().1 = Some(tensor);
        } else {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: 0,
                reason: format!("unknown parameter namespace in `{name}`"),
            });
        }
    }
    for (name, (m, v)) in moments {
        match (m, v) {
            (Some(m), Some(v)) => opt.insert_moments(&name, m, v),
            _ => {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    offset: 0,
                    reason: format!("incomplete optimizer moments for `{name}`"),
                })
            }
        }
    }
    Ok(DinoState {
        student,
        teacher,
        center,
        opt,
        step,
        epoch,
    })
}
