//! Binary checkpoints: magic `GRIDLM01`, config hash and text, step count, RNG
//! state, and a named tensor table with little-endian `f64` payloads.

use std::path::Path;

use crate::error::{GridError, Result};
use crate::substrate::{OptimizerState, ParamStore, RealArray, RngState};

pub const MAGIC: &[u8; 8] = b"GRIDLM01";
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config_text: String,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, RealArray)>,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| GridError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| GridError::Format("invalid utf-8 in checkpoint".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_bytes(&mut out, self.config_hash.as_bytes());
        put_bytes(&mut out, self.config_text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.position.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(GridError::Format("not a checkpoint (bad magic)".into()));
        }
        let config_hash = r.string()?;
        let config_text = r.string()?;
        let step = r.u64()?;
        let rng = RngState { seed: r.u64()?, position: r.u64()? };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            if r.u8()? != DTYPE_F64 {
                return Err(GridError::Format(format!("tensor {name}: unsupported dtype")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| GridError::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, RealArray::from_vec(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(GridError::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { config_hash, config_text, step, rng, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&RealArray> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fails on a config-hash mismatch unless `force` is set.
    pub fn check_hash(&self, expected: &str, force: bool) -> Result<()> {
        if self.config_hash != expected && !force {
            return Err(GridError::Config(format!(
                "checkpoint config hash {} does not match {expected} (use --force to override)",
                self.config_hash
            )));
        }
        Ok(())
    }
}

/// Parameters as `param/<name>` tensors.
pub fn param_tensors(store: &ParamStore) -> Vec<(String, RealArray)> {
    store.iter().map(|p| (format!("param/{}", p.name), p.value.clone())).collect()
}

/// Copies `param/<name>` tensors into a freshly built store with the same layout.
pub fn restore_params(store: &mut ParamStore, tensors: &[(String, RealArray)]) -> Result<()> {
    for p in store.iter_mut() {
        let key = format!("param/{}", p.name);
        let t = tensors
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, t)| t)
            .ok_or_else(|| GridError::Format(format!("checkpoint lacks {key}")))?;
        if t.shape() != p.value.shape() {
            return Err(GridError::Format(format!("{key}: shape {:?} != {:?}", t.shape(), p.value.shape())));
        }
        p.value = t.clone();
    }
    Ok(())
}

pub fn optimizer_tensors(store: &ParamStore, state: &OptimizerState) -> Vec<(String, RealArray)> {
    let mut out = vec![(
        "adam.meta".to_string(),
        RealArray::from_vec(
            vec![6],
            vec![
                state.step_count as f64,
                state.beta1,
                state.beta2,
                state.learning_rate,
                state.weight_decay,
                state.epsilon,
            ],
        )
        .expect("meta"),
    )];
    for (i, p) in store.iter().enumerate() {
        out.push((format!("adam.m/{}", p.name), state.first_moment[i].clone()));
        out.push((format!("adam.v/{}", p.name), state.second_moment[i].clone()));
    }
    out
}

pub fn restore_optimizer(store: &ParamStore, tensors: &[(String, RealArray)]) -> Result<OptimizerState> {
    let find = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| GridError::Format(format!("checkpoint lacks {name}")))
    };
    let meta = find("adam.meta")?.data().to_vec();
    if meta.len() != 6 {
        return Err(GridError::Format("bad optimizer meta".into()));
    }
    let mut state = OptimizerState::new(store, meta[3], meta[1], meta[2], meta[4], meta[5])?;
    state.step_count = meta[0] as u64;
    for (i, p) in store.iter().enumerate() {
        state.first_moment[i] = find(&format!("adam.m/{}", p.name))?.clone();
        state.second_moment[i] = find(&format!("adam.v/{}", p.name))?.clone();
    }
    Ok(state)
}
