//! Checkpoint container: little-endian binary, self-describing, checksummed.
//!
//! Layout:
//! ```text
//! magic    8  b"SLPTCKP\x01"
//! config   u32 length + UTF-8 key=value lines (full model configuration)
//! meanface u32 point count + 2*count f64
//! params   u32 count, then per entry:
//!            u16 name length + name bytes
//!            u32 rank + rank*u32 extents
//!            numel*f64 values
//! opt      u8 flag; when 1: u64 step, then per param numel*f64 first
//!            moments, numel*f64 second moments (parameter order)
//! footer   u64 FNV-1a checksum of everything above
//! ```
//! Round trips are bit-exact; any truncation, trailing garbage, or flipped
//! byte fails the checksum.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SLPTCKP\x01";

pub struct OptimizerBlob {
    pub step: u64,
    pub first_moments: Vec<Vec<f64>>,
    pub second_moments: Vec<Vec<f64>>,
}

pub struct CheckpointData {
    /// Key=value lines describing the model (validated on load by the
    /// model layer).
    pub config: String,
    pub mean_face: Vec<(f64, f64)>,
    /// Name, shape, values — in parameter order.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub optimizer: Option<OptimizerBlob>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = data.config.as_bytes();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&(data.mean_face.len() as u32).to_le_bytes());
    for &(x, y) in &data.mean_face {
        put_f64s(&mut out, &[x, y]);
    }
    out.extend_from_slice(&(data.params.len() as u32).to_le_bytes());
    for (name, shape, values) in &data.params {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f64s(&mut out, values);
    }
    match &data.optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.step.to_le_bytes());
            for m in &opt.first_moments {
                put_f64s(&mut out, m);
            }
            for v in &opt.second_moments {
                put_f64s(&mut out, v);
            }
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Integrity(format!(
            "checkpoint too short ({} bytes)",
            bytes.len()
        )));
    }
    let (body, footer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(footer.try_into().unwrap());
    let computed = fnv1a(body);
    if stored != computed {
        return Err(Error::Integrity(format!(
            "checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
        )));
    }
    let mut cur = Cursor { bytes: body, pos: 0 };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        if magic[..7] == MAGIC[..7] {
            return Err(Error::Incompatible(format!(
                "checkpoint format version {} (this build reads {})",
                magic[7], MAGIC[7]
            )));
        }
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let cfg_len = cur.u32()? as usize;
    let config = String::from_utf8(cur.take(cfg_len)?.to_vec())
        .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
    let mf_count = cur.u32()? as usize;
    let mf_flat = cur.f64s(2 * mf_count)?;
    let mean_face = mf_flat.chunks(2).map(|c| (c[0], c[1])).collect();
    let n_params = cur.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel = shape.iter().product::<usize>();
        let values = cur.f64s(numel)?;
        params.push((name, shape, values));
    }
    let flag = cur.take(1)?[0];
    let optimizer = match flag {
        0 => None,
        1 => {
            let step = cur.u64()?;
            let mut first = Vec::with_capacity(params.len());
            for (_, shape, _) in &params {
                first.push(cur.f64s(shape.iter().product())?);
            }
            let mut second = Vec::with_capacity(params.len());
            for (_, shape, _) in &params {
                second.push(cur.f64s(shape.iter().product())?);
            }
            Some(OptimizerBlob { step, first_moments: first, second_moments: second })
        }
        other => {
            return Err(Error::Format(format!("bad optimizer flag {other}")));
        }
    };
    if cur.pos != body.len() {
        return Err(Error::Integrity(format!(
            "{} unread bytes after checkpoint payload",
            body.len() - cur.pos
        )));
    }
    Ok(CheckpointData { config, mean_face, params, optimizer })
}
