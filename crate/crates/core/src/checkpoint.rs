//! Binary checkpoint: magic "BHIV", version, config echo, and length-prefixed
//! name/shape/f32-LE parameter records. Optimizer moments ride along as
//! reserved-name records so resumed training is bit-reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{BhivaeArch, BhivaeParams};
use crate::ndgrad::Array;

pub const MAGIC: &[u8; 4] = b"BHIV";
pub const VERSION: u32 = 1;

/// Adam first/second moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct OptMoments {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub arch: BhivaeArch,
    pub step: u64,
    pub params: BhivaeParams,
    pub opt: Option<OptMoments>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    run: RunConfig,
    arch: BhivaeArch,
}

fn push_record(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let meta = serde_json::to_vec(&Meta {
        run: ckpt.run.clone(),
        arch: ckpt.arch.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    let opt_t = ckpt.opt.as_ref().map_or(0, |o| o.t);
    out.extend_from_slice(&opt_t.to_le_bytes());

    let mut records: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    ckpt.params.visit_params(&mut |name, array: &Array| {
        records.push((name, array.shape().to_vec(), array.data().to_vec()));
    });
    if let Some(opt) = &ckpt.opt {
        let param_names: Vec<String> = records.iter().map(|(n, _, _)| n.clone()).collect();
        for name in &param_names {
            let m = opt.m.get(name).ok_or_else(|| {
                Error::Contract(format!("optimizer moments missing for {name}"))
            })?;
            records.push((format!("adam.m.{name}"), vec![m.len()], m.clone()));
        }
        for name in &param_names {
            let v = opt.v.get(name).ok_or_else(|| {
                Error::Contract(format!("optimizer moments missing for {name}"))
            })?;
            records.push((format!("adam.v.{name}"), vec![v.len()], v.clone()));
        }
    }
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, shape, values) in &records {
        push_record(&mut out, name, shape, values);
    }
    fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8, what)?))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:02x?}, want \"BHIV\""),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}, this build reads {VERSION}"),
        });
    }
    let meta_len = cur.u32("meta length")? as usize;
    let meta_offset = cur.pos as u64;
    let meta_bytes = cur.take(meta_len, "meta JSON")?;
    let meta: Meta = serde_json::from_slice(meta_bytes).map_err(|e| Error::Format {
        offset: meta_offset,
        detail: format!("meta JSON: {e}"),
    })?;
    meta.run.validate().map_err(|e| Error::Format {
        offset: meta_offset,
        detail: format!("embedded config invalid: {e}"),
    })?;
    meta.arch.validate().map_err(|e| Error::Format {
        offset: meta_offset,
        detail: format!("embedded arch invalid: {e}"),
    })?;
    let step = cur.u64("step")?;
    let opt_t = cur.u64("optimizer step count")?;
    let n_records = cur.u32("record count")? as usize;

    let mut records: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..n_records {
        let name_len = cur.u32("record name length")? as usize;
        let name_offset = cur.pos as u64;
        let name = String::from_utf8(cur.take(name_len, "record name")?.to_vec())
            .map_err(|e| Error::Format {
                offset: name_offset,
                detail: format!("record name not UTF-8: {e}"),
            })?;
        let rank = cur.u32("record rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("record dim")? as usize);
        }
        let count = cur.u64("record value count")? as usize;
        if count != shape.iter().product::<usize>() {
            return Err(Error::Format {
                offset: cur.pos as u64,
                detail: format!(
                    "record {name}: {count} values for shape {shape:?}"
                ),
            });
        }
        let raw = cur.take(count * 4, "record values")?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| LittleEndian::read_f32(c) as f64)
            .collect();
        if records.insert(name.clone(), (shape, values)).is_some() {
            return Err(Error::Format {
                offset: name_offset,
                detail: format!("duplicate record {name}"),
            });
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            detail: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }

    // Rebuild parameter arrays in place over a skeleton of the right shapes.
    let mut params = BhivaeParams::init(&meta.arch, 0)?;
    let mut missing = Vec::new();
    let mut err: Option<Error> = None;
    params.visit_params_mut(&mut |name, array: &mut Array| {
        match records.remove(&name) {
            Some((shape, values)) => {
                if shape != array.shape() {
                    err.get_or_insert(Error::Format {
                        offset: 0,
                        detail: format!(
                            "record {name} has shape {shape:?}, arch wants {:?}",
                            array.shape()
                        ),
                    });
                } else {
                    array.data_mut().copy_from_slice(&values);
                }
            }
            None => missing.push(name),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::Format {
            offset: 0,
            detail: format!("missing parameter records: {}", missing.join(", ")),
        });
    }

    // Whatever remains must be optimizer moments — all or none.
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, (_, values)) in records {
        if let Some(stripped) = name.strip_prefix("adam.m.") {
            m.insert(stripped.to_string(), values);
        } else if let Some(stripped) = name.strip_prefix("adam.v.") {
            v.insert(stripped.to_string(), values);
        } else {
            return Err(Error::Format {
                offset: 0,
                detail: format!("unexpected record {name}"),
            });
        }
    }
    let opt = if m.is_empty() && v.is_empty() {
        None
    } else {
        let mut names = Vec::new();
        params.visit_params(&mut |name, _| names.push(name));
        for name in &names {
            if !m.contains_key(name) || !v.contains_key(name) {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("incomplete optimizer moments (missing {name})"),
                });
            }
        }
        Some(OptMoments { t: opt_t, m, v })
    };

    Ok(Checkpoint {
        run: meta.run,
        arch: meta.arch,
        step,
        params,
        opt,
    })
}
