//! Tensor files and the named parameter store.
//!
//! Single-tensor format "DFT1": magic bytes `DFT1`, one dtype byte
//! (0 = f32, 1 = f64), one ndim byte, `ndim` u32 little-endian dims, then the
//! row-major little-endian payload.
//!
//! A [`ParamStore`] serializes as a container: a u64 little-endian length,
//! that many bytes of JSON index `{name -> {offset, shape, dtype}}` with
//! offsets relative to the end of the index, then the concatenated DFT1
//! blobs. Values round-trip bit-exactly; gradients are transient and load as
//! zeros.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"DFT1";
// Refuses absurd headers before allocating (covers corrupt and truncated files).
const MAX_ELEMENTS: u64 = 1 << 30;

/// A tensor of either precision, as read from disk.
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts into the requested precision; exact when dtypes match.
    pub fn cast_into<E: Scalar>(self) -> Tensor<E> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_dft1<E: Scalar, W: Write>(w: &mut W, t: &Tensor<E>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[E::DTYPE.byte(), t.ndim() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match E::DTYPE {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_dft1<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let io = |e: std::io::Error| CueError::Data(format!("tensor read: {e}"));
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(io)?;
    if &head[..4] != MAGIC {
        return Err(CueError::Data("bad tensor magic, want DFT1".into()));
    }
    let dtype = Dtype::from_byte(head[4])?;
    let ndim = head[5] as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut elems: u64 = 1;
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io)?;
        let d = u32::from_le_bytes(b) as u64;
        elems = elems.saturating_mul(d.max(1)).min(u64::MAX);
        shape.push(u32::from_le_bytes(b) as usize);
    }
    if elems > MAX_ELEMENTS {
        return Err(CueError::Data(format!(
            "tensor header claims {elems} elements, refusing"
        )));
    }
    let n: usize = shape.iter().product();
    match dtype {
        Dtype::F32 => {
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut b).map_err(io)?;
                data.push(f32::from_le_bytes(b));
            }
            Ok(AnyTensor::F32(Tensor::from_vec(&shape, data)?))
        }
        Dtype::F64 => {
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b).map_err(io)?;
                data.push(f64::from_le_bytes(b));
            }
            Ok(AnyTensor::F64(Tensor::from_vec(&shape, data)?))
        }
    }
}

pub fn save_tensor<E: Scalar>(path: impl AsRef<Path>, t: &Tensor<E>) -> Result<()> {
    let mut f = std::fs::File::create(&path).map_err(|e| CueError::io(&path, e))?;
    let mut buf = std::io::BufWriter::new(&mut f);
    write_dft1(&mut buf, t).map_err(|e| CueError::io(&path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let f = std::fs::File::open(&path).map_err(|e| CueError::io(&path, e))?;
    read_dft1(&mut std::io::BufReader::new(f))
}

/// One learnable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<E: Scalar> {
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
}

/// Named parameters of the fusion graph. The map is ordered so every
/// iteration (initialization, optimizer steps, serialization) is
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Scalar> {
    params: BTreeMap<String, Param<E>>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    offset: u64,
    shape: Vec<usize>,
    dtype: String,
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    /// Registers a parameter. A name can exist only once; re-registration is
    /// a config error rather than a silent overwrite.
    pub fn insert(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(CueError::Config(format!("parameter {name} already exists")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<E>> {
        self.params
            .get(name)
            .ok_or_else(|| CueError::Config(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<E>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<E>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<E>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            for g in p.grad.data_mut() {
                *g = E::ZERO;
            }
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor<E>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| CueError::Config(format!("unknown parameter {name}")))?;
        if p.grad.shape() != g.shape() {
            return Err(CueError::Shape(format!(
                "gradient for {name} has shape {:?}, parameter is {:?}",
                g.shape(),
                p.grad.shape()
            )));
        }
        for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *a += *b;
        }
        Ok(())
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| CueError::Config(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(CueError::Shape(format!(
                "cannot replace {name} {:?} with shape {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Converts all values to another precision (grads reset to zero).
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, p) in &self.params {
            out.insert(name, p.value.cast()).expect("names are unique");
        }
        out
    }

    pub fn write_container<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut index: BTreeMap<String, IndexEntry> = BTreeMap::new();
        let mut blobs: Vec<u8> = Vec::new();
        for (name, p) in &self.params {
            index.insert(
                name.clone(),
                IndexEntry {
                    offset: blobs.len() as u64,
                    shape: p.value.shape().to_vec(),
                    dtype: match E::DTYPE {
                        Dtype::F32 => "f32".into(),
                        Dtype::F64 => "f64".into(),
                    },
                },
            );
            write_dft1(&mut blobs, &p.value)?;
        }
        let json = serde_json::to_vec(&index).expect("index serializes");
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&blobs)
    }

    pub fn read_container<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e: std::io::Error| CueError::Data(format!("param container read: {e}"));
        let mut lenb = [0u8; 8];
        r.read_exact(&mut lenb).map_err(io)?;
        let json_len = u64::from_le_bytes(lenb) as usize;
        if json_len > (64 << 20) {
            return Err(CueError::Data("param index implausibly large".into()));
        }
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json).map_err(io)?;
        let index: BTreeMap<String, IndexEntry> = serde_json::from_slice(&json)?;
        let mut blobs = Vec::new();
        r.read_to_end(&mut blobs).map_err(io)?;

        let mut store = ParamStore::new();
        for (name, entry) in index {
            let off = entry.offset as usize;
            if off >= blobs.len() {
                return Err(CueError::Data(format!("offset of {name} past end of file")));
            }
            let any = read_dft1(&mut &blobs[off..])?;
            if any.shape() != entry.shape.as_slice() {
                return Err(CueError::Data(format!(
                    "index says {name} is {:?}, blob says {:?}",
                    entry.shape,
                    any.shape()
                )));
            }
            store.insert(&name, any.cast_into::<E>())?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(&path).map_err(|e| CueError::io(&path, e))?;
        let mut buf = std::io::BufWriter::new(&mut f);
        self.write_container(&mut buf)
            .map_err(|e| CueError::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(&path).map_err(|e| CueError::io(&path, e))?;
        Self::read_container(&mut std::io::BufReader::new(f))
    }
}

/// Binds store parameters to tape leaves for one forward pass, so each
/// parameter enters the graph exactly once and its gradient can be routed
/// back by name afterwards.
#[derive(Debug, Default)]
pub struct ParamLeaves {
    vars: BTreeMap<String, crate::tape::Var>,
}

impl ParamLeaves {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf for `name`, created on first use and shared afterwards.
    pub fn leaf<E: Scalar>(
        &mut self,
        tape: &mut crate::tape::Tape<E>,
        store: &ParamStore<E>,
        name: &str,
    ) -> Result<crate::tape::Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let v = tape.leaf(store.value(name)?.clone())?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, crate::tape::Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Adds the tape gradients of all bound parameters into the store.
    /// Returns how many parameters actually received one.
    pub fn accumulate<E: Scalar>(
        &self,
        grads: &crate::tape::Grads<E>,
        store: &mut ParamStore<E>,
    ) -> Result<usize> {
        let mut n = 0;
        for (name, var) in &self.vars {
            if let Some(g) = grads.get(*var) {
                store.accumulate_grad(name, g)?;
                n += 1;
            }
        }
        Ok(n)
    }
}
