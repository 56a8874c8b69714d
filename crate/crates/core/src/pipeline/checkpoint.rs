//! `INFOM1` checkpoints: a flat, name-sorted list of f64 tensors.
//!
//! After the magic, each record is `name-len u32, name bytes, rank u32,
//! dims u32×rank, data f64×numel`, all little-endian, until end of file.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{AdamState, ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"INFOM1";

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

/// Named tensors; iteration (and so serialisation) order is lexicographic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| fmt_err(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn put_params(&mut self, prefix: &str, p: &ParamSet) {
        for (k, t) in p.iter() {
            self.insert(format!("{prefix}/{k}"), t.clone());
        }
    }

    /// All tensors under `prefix/`, prefix removed.
    pub fn params(&self, prefix: &str) -> Result<ParamSet> {
        let head = format!("{prefix}/");
        let p: ParamSet = self
            .tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(head.as_str()).map(|r| (r.to_string(), t.clone())))
            .collect();
        if p.is_empty() {
            return Err(fmt_err(format!("no tensors under `{prefix}/`")));
        }
        Ok(p)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let head = format!("{prefix}/");
        self.tensors.keys().any(|k| k.starts_with(&head))
    }

    pub fn put_adam(&mut self, prefix: &str, st: &AdamState) {
        self.put_params(&format!("adam/{prefix}/m"), &st.m);
        self.put_params(&format!("adam/{prefix}/v"), &st.v);
        self.insert(format!("adam/{prefix}/t"), Tensor::scalar(st.step as f64));
    }

    pub fn adam(&self, prefix: &str) -> Result<AdamState> {
        Ok(AdamState {
            m: self.params(&format!("adam/{prefix}/m"))?,
            v: self.params(&format!("adam/{prefix}/v"))?,
            step: self.get(&format!("adam/{prefix}/t"))?.item() as u64,
        })
    }

    pub fn put_scalar(&mut self, name: &str, v: f64) {
        self.insert(name, Tensor::scalar(v));
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.numel() != 1 {
            return Err(fmt_err(format!("`{name}` is not a scalar")));
        }
        Ok(t.item())
    }

    /// A u64 stored exactly as two u32 halves.
    pub fn put_u64(&mut self, name: &str, v: u64) {
        self.insert(name, Tensor::vector(vec![(v & 0xffff_ffff) as f64, (v >> 32) as f64]));
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let d = self.get(name)?.data();
        if d.len() != 2 {
            return Err(fmt_err(format!("`{name}` is not a split u64")));
        }
        Ok(d[0] as u64 | (d[1] as u64) << 32)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < CHECKPOINT_MAGIC.len() || &buf[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let mut pos = CHECKPOINT_MAGIC.len();
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= buf.len()).ok_or_else(|| fmt_err("truncated"))?;
            let s = &buf[pos..end];
            pos = end;
            Ok(s)
        };
        let mut out = Checkpoint::new();
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        while let Ok(head) = take(4) {
            let len = u32_at(head);
            let name = std::str::from_utf8(take(len)?).map_err(|_| fmt_err("tensor name is not UTF-8"))?.to_string();
            let rank = u32_at(take(4)?);
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32_at(take(4)?));
            }
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fmt_err("dims overflow"))?;
            let bytes = take(numel.checked_mul(8).ok_or_else(|| fmt_err("size overflow"))?)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if out.tensors.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
                return Err(fmt_err(format!("duplicate tensor `{name}`")));
            }
        }
        // A dangling partial header is corruption, not end of file.
        if pos != buf.len() {
            return Err(fmt_err("trailing bytes"));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
