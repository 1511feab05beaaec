use std::io::{Read, Write};

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Real, Tensor2D, TensorError};

/// A trainable tensor with its gradient accumulator and AdamW moment slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor2D<T>,
    pub grad: Tensor2D<T>,
    pub m: Tensor2D<T>,
    pub v: Tensor2D<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor2D<T>) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Tensor2D::zeros(r, c),
            m: Tensor2D::zeros(r, c),
            v: Tensor2D::zeros(r, c),
        }
    }
}

/// Named parameters in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor2D<T>,
    ) -> Result<(), TensorError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor2D<T>, TensorError> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor2D<T>, TensorError> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor2D<T>, TensorError> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Adds `delta` into the named gradient accumulator.
    pub fn accumulate(&mut self, name: &str, delta: &Tensor2D<T>) -> Result<(), TensorError> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        p.grad.add_assign(delta)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn shapes(&self) -> Vec<(String, usize, usize)> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.rows(), p.value.cols()))
            .collect()
    }

    /// Copies parameter values (not gradients or moments) from `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<(), TensorError> {
        for (name, p) in self.params.iter_mut() {
            let src = other.value(name)?;
            if src.shape() != p.value.shape() {
                return Err(TensorError::shape(
                    "copy_values_from",
                    p.value.shape(),
                    src.shape(),
                ));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    /// Snapshot of values only, with fresh accumulators.
    pub fn values_snapshot(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, p) in &self.params {
            out.params.insert(name.clone(), Param::new(p.value.clone()));
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, p) in &self.params {
            out.params.insert(name.clone(), Param::new(p.value.cast()));
        }
        out
    }

    pub fn global_grad_norm(&self) -> T {
        self.params
            .values()
            .flat_map(|p| p.grad.data().iter())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }
}

/// Uniform(-s, s) with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Tensor2D<T> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.random_range(-s..s)))
        .collect();
    Tensor2D::from_vec(rows, cols, data).expect("positive shape")
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SSTNSR01";

/// Shape manifest written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub init_seed: u64,
    pub tensors: Vec<TensorShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Writes a named-tensor container: magic, tensor count, then per tensor
/// `(name_len u32, name, rows u32, cols u32, f32 LE values)`.
pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(p.value.rows() as u32).to_le_bytes())?;
        w.write_all(&(p.value.cols() as u32).to_le_bytes())?;
        for &x in p.value.data() {
            w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> Result<ParamStore<T>, TensorError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 4];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            data.push(T::lit(f32::from_le_bytes(buf) as f64));
        }
        store.insert(name, Tensor2D::from_vec(rows, cols, data)?)?;
    }
    Ok(store)
}

pub fn checkpoint_manifest<T: Real>(store: &ParamStore<T>, init_seed: u64) -> CheckpointManifest {
    CheckpointManifest {
        init_seed,
        tensors: store
            .shapes()
            .into_iter()
            .map(|(name, rows, cols)| TensorShape { name, rows, cols })
            .collect(),
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
