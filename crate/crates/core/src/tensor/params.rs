//! Named parameter storage, the Adam optimizer, and the checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::util::fnv1a64;

#[derive(Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    grad: Vec<f64>,
    trainable: bool,
}

/// Ordered collection of named parameters and buffers.
///
/// Insertion order is the checkpoint block order, so the same construction
/// sequence always produces byte-identical checkpoints. Buffers (batch-norm
/// running statistics) live here too, flagged non-trainable.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.insert_with(name, tensor, true)
    }

    pub fn insert_buffer(&mut self, name: &str, tensor: Tensor) {
        self.insert_with(name, tensor, false)
    }

    fn insert_with(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name:?}"
        );
        let n = tensor.len();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            grad: vec![0.0; n],
            trainable,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub(crate) fn tensor_at(&self, idx: usize) -> &Tensor {
        &self.entries[idx].tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.index_of(name)?;
        Some(&mut self.entries[i].tensor)
    }

    pub fn grad_of(&self, name: &str) -> Option<&[f64]> {
        self.index_of(name).map(|i| self.entries[i].grad.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub(crate) fn accumulate_grad(&mut self, idx: usize, contrib: &[f64]) {
        let e = &mut self.entries[idx];
        for (g, c) in e.grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g *= c);
        }
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = false;
            }
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index_of(name)
            .map(|i| self.entries[i].trainable)
            .unwrap_or(false)
    }

    /// Content hash of all parameters whose name starts with `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> u64 {
        let mut bytes = Vec::new();
        for e in &self.entries {
            if !e.name.starts_with(prefix) {
                continue;
            }
            bytes.extend_from_slice(e.name.as_bytes());
            for v in e.tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    /// First non-finite parameter or gradient value, if any.
    pub fn find_non_finite(&self) -> Option<String> {
        for e in &self.entries {
            if e.tensor.data().iter().any(|v| !v.is_finite()) {
                return Some(format!("parameter {}", e.name));
            }
            if e.grad.iter().any(|v| !v.is_finite()) {
                return Some(format!("gradient of {}", e.name));
            }
        }
        None
    }

    /// Serialize to the binary checkpoint format: magic `CKPT1`, then per
    /// block `{u32 name length, name bytes, u32 rank, u32 dims, f64 LE
    /// values}`. Blocks appear in insertion order; round trips are
    /// byte-exact.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"CKPT1")?;
        for e in &self.entries {
            let nb = e.name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            let shape = e.tensor.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in e.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Read a checkpoint written by [`ParamStore::write_checkpoint`]. All
    /// entries load as trainable; the caller re-applies freezing and buffer
    /// flags.
    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("checkpoint: missing magic"))?;
        if &magic != b"CKPT1" {
            return Err(Error::format("checkpoint: bad magic"));
        }
        let mut store = ParamStore::new();
        loop {
            let mut lenb = [0u8; 4];
            match r.read_exact(&mut lenb) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(lenb) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("checkpoint: non-UTF-8 name"))?;
            let mut rankb = [0u8; 4];
            r.read_exact(&mut rankb)?;
            let rank = u32::from_le_bytes(rankb) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut db = [0u8; 4];
                r.read_exact(&mut db)?;
                shape.push(u32::from_le_bytes(db) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0.0f64; n];
            let mut vb = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut vb)?;
                *v = f64::from_le_bytes(vb);
            }
            if store.contains(&name) {
                return Err(Error::format(format!(
                    "checkpoint: duplicate block {name:?}"
                )));
            }
            store.insert(&name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut f)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moment buffers, aligned with the store's entries.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .entries
            .iter()
            .map(|e| vec![0.0; e.tensor.len()])
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over all trainable entries. Weight decay is the classic
/// L2 term added to the gradient before the moment updates.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, e) in store.entries.iter_mut().enumerate() {
        if !e.trainable {
            continue;
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = e.tensor.data_mut();
        for j in 0..data.len() {
            let g = e.grad[j] + cfg.weight_decay * data[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}
