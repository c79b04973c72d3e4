//! Binary checkpoint container.
//!
//! Layout, all little-endian: magic `NNL1`, `u32` record count, then per
//! record `u32` name length, UTF-8 name, `u8` dtype (0 = f32), `u32` rank,
//! `rank` x `u32` dims, raw f32 data. Optimizer state rides along as records
//! named `adam/m/<param>`, `adam/v/<param>` and `adam/t`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{AdamState, NetError, NetParams, Tensor};

pub const MAGIC: &[u8; 4] = b"NNL1";
const DTYPE_F32: u8 = 0;
const ADAM_M: &str = "adam/m/";
const ADAM_V: &str = "adam/v/";
const ADAM_T: &str = "adam/t";
/// Largest step count an f32 record stores exactly.
const MAX_EXACT_STEP: u64 = 1 << 24;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NetError + '_ {
    move |source| NetError::Io { path: path.to_path_buf(), source }
}

fn push_record(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize parameters (and optionally optimizer state) to bytes.
pub fn checkpoint_bytes(params: &NetParams<f32>, state: Option<&AdamState<f32>>) -> Result<Vec<u8>, NetError> {
    let mut records: Vec<(String, &Tensor<f32>)> = params.tensors().iter().map(|(k, v)| (k.clone(), v)).collect();
    let step;
    if let Some(s) = state {
        if s.t > MAX_EXACT_STEP {
            return Err(NetError::CorruptRecord(format!("step count {} exceeds the exact f32 range", s.t)));
        }
        records.extend(s.m.iter().map(|(k, v)| (format!("{ADAM_M}{k}"), v)));
        records.extend(s.v.iter().map(|(k, v)| (format!("{ADAM_V}{k}"), v)));
        step = Tensor::new(vec![1], vec![s.t as f32])?;
        records.push((ADAM_T.to_string(), &step));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        push_record(&mut buf, &name, t);
    }
    Ok(buf)
}

pub fn save_checkpoint(
    params: &NetParams<f32>,
    state: Option<&AdamState<f32>>,
    path: impl AsRef<Path>,
) -> Result<(), NetError> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(params, state)?;
    fs::write(path, bytes).map_err(io_err(path))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NetError> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
                NetError::CorruptRecord(format!("truncated while reading {what} at byte {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parse checkpoint bytes into parameters and, when present, optimizer state.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(NetParams<f32>, Option<AdamState<f32>>), NetError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(NetError::BadMagic(found));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let count = r.u32("record count")?;
    let mut params = BTreeMap::new();
    let mut state = AdamState::new();
    let mut has_state = false;
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| NetError::CorruptRecord("record name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(NetError::CorruptRecord(format!("`{name}` has unknown dtype tag {dtype}")));
        }
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(NetError::CorruptRecord(format!("`{name}` has rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| NetError::CorruptRecord(format!("`{name}` has invalid dims {dims:?}")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| NetError::CorruptRecord("size overflow".into()))?, "data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let tensor = Tensor::new(dims, data)?;
        let duplicate = if let Some(p) = name.strip_prefix(ADAM_M) {
            has_state = true;
            state.m.insert(p.to_string(), tensor).is_some()
        } else if let Some(p) = name.strip_prefix(ADAM_V) {
            has_state = true;
            state.v.insert(p.to_string(), tensor).is_some()
        } else if name == ADAM_T {
            has_state = true;
            state.t = tensor.data()[0] as u64;
            false
        } else {
            params.insert(name.clone(), tensor).is_some()
        };
        if duplicate {
            return Err(NetError::CorruptRecord(format!("duplicate record `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(NetError::CorruptRecord(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((NetParams::from_tensors(params), has_state.then_some(state)))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetParams<f32>, Option<AdamState<f32>>), NetError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_checkpoint(&bytes)
}
