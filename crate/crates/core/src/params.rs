//! Model parameter containers and their arithmetic.
//!
//! A [`ParameterSet`] is an ordered list of named [`Tensor`]s. It is the unit
//! exchanged between clients and the server, and its byte encoding (see
//! [`serialize_params`]) doubles as the `.apfm` checkpoint format.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::ByteReader;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected {expected} weights, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("tensor name is {0} bytes long, limit is 65535")]
    NameTooLong(usize),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("buffer truncated at offset {0}")]
    Truncated(usize),
    #[error("unknown dtype tag {0}")]
    BadDtypeTag(u8),
    #[error("{0} trailing bytes after parameter set")]
    TrailingBytes(usize),
    #[error("tensor name is not valid UTF-8")]
    BadName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub const fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub const fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub const fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense row-major tensor. A scalar has shape `[]` and one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, ParamError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(ParamError::InvalidTensor(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ParamError::InvalidTensor(format!(
                "shape {shape:?} needs {expected} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, ParamError> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ParamError> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Result<Self, ParamError> {
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::F64 => TensorData::F64(vec![0.0; n]),
        };
        Self::new(shape, data)
    }

    /// Builds a tensor of `dtype` from f64 values, rounding when `dtype` is f32.
    pub fn from_values(
        dtype: DType,
        shape: Vec<usize>,
        values: impl IntoIterator<Item = f64>,
    ) -> Result<Self, ParamError> {
        let data = match dtype {
            DType::F32 => TensorData::F32(values.into_iter().map(|v| v as f32).collect()),
            DType::F64 => TensorData::F64(values.into_iter().collect()),
        };
        Self::new(shape, data)
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => f64::from(v[i]),
            TensorData::F64(v) => v[i],
        }
    }

    pub fn values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match &self.data {
            TensorData::F32(v) => Box::new(v.iter().map(|&x| f64::from(x))),
            TensorData::F64(v) => Box::new(v.iter().copied()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values().collect()
    }

    /// Same dtype and shape.
    pub fn same_layout(&self, other: &Tensor) -> bool {
        self.dtype() == other.dtype() && self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(v.iter().map(|&x| f(f64::from(x)) as f32).collect()),
            TensorData::F64(v) => TensorData::F64(v.iter().map(|&x| f(x)).collect()),
        };
        Tensor { shape: self.shape.clone(), data }
    }

    /// Bitwise equality of dtype, shape and buffer (NaN-safe).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (TensorData::F64(a), TensorData::F64(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        }
    }

    pub(crate) fn write_le<W: Write>(&self, w: &mut W) -> io::Result<()> {
        const CHUNK: usize = 8192;
        let mut buf = Vec::with_capacity(CHUNK * 8);
        match &self.data {
            TensorData::F32(v) => {
                for chunk in v.chunks(CHUNK) {
                    buf.clear();
                    chunk.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                    w.write_all(&buf)?;
                }
            }
            TensorData::F64(v) => {
                for chunk in v.chunks(CHUNK) {
                    buf.clear();
                    chunk.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                    w.write_all(&buf)?;
                }
            }
        }
        Ok(())
    }
}

/// Ordered, uniquely named collection of tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self, ParamError> {
        let mut set = Self::new();
        for (name, tensor) in entries {
            set.push(name, tensor)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(ParamError::DuplicateName(name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across all tensors.
    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Bytes taken by raw element data only (no headers).
    pub fn data_bytes(&self) -> usize {
        self.tensors().map(|t| t.len() * t.dtype().size()).sum()
    }

    pub fn is_compatible(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, ta), (nb, tb))| na == nb && ta.same_layout(tb))
    }

    fn check_compatible(&self, other: &ParameterSet) -> Result<(), ParamError> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(ParamError::ShapeMismatch(format!("{} vs {}", self.layout_summary(), other.layout_summary())))
        }
    }

    fn layout_summary(&self) -> String {
        let parts: Vec<String> = self.iter().map(|(n, t)| format!("{n}:{:?}{:?}", t.dtype(), t.shape())).collect();
        format!("[{}]", parts.join(", "))
    }

    pub fn zeros_like(&self) -> ParameterSet {
        let entries = self.entries.iter().map(|(n, t)| (n.clone(), t.map(|_| 0.0))).collect();
        ParameterSet { entries }
    }

    /// Applies `f` element-wise, preserving names, shapes and dtypes.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParameterSet {
        let entries = self.entries.iter().map(|(n, t)| (n.clone(), t.map(&f))).collect();
        ParameterSet { entries }
    }

    /// Element-wise combination of two compatible sets.
    pub fn zip_map(&self, other: &ParameterSet, f: impl Fn(f64, f64) -> f64) -> Result<ParameterSet, ParamError> {
        self.check_compatible(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((n, a), (_, b))| {
                let t =
                    Tensor::from_values(a.dtype(), a.shape.clone(), a.values().zip(b.values()).map(|(x, y)| f(x, y)))
                        .expect("layout preserved");
                (n.clone(), t)
            })
            .collect();
        Ok(ParameterSet { entries })
    }

    pub fn sub(&self, other: &ParameterSet) -> Result<ParameterSet, ParamError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &ParameterSet) -> Result<ParameterSet, ParamError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, alpha: f64) -> ParameterSet {
        self.map(|x| alpha * x)
    }

    /// All elements concatenated in entry order, widened to f64.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend(t.values());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the layout template.
    pub fn with_flat(&self, values: &[f64]) -> Result<ParameterSet, ParamError> {
        if values.len() != self.num_params() {
            return Err(ParamError::LengthMismatch { expected: self.num_params(), got: values.len() });
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (n, t) in &self.entries {
            let chunk = &values[offset..offset + t.len()];
            offset += t.len();
            entries.push((n.clone(), Tensor::from_values(t.dtype(), t.shape.clone(), chunk.iter().copied())?));
        }
        Ok(ParameterSet { entries })
    }

    pub fn bit_eq(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    /// Largest absolute element-wise difference; `None` if incompatible.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> Option<f64> {
        if !self.is_compatible(other) {
            return None;
        }
        Some(
            self.tensors()
                .zip(other.tensors())
                .flat_map(|(a, b)| a.values().zip(b.values()).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max),
        )
    }
}

/// Element-wise `Σ wᵢ·setᵢ`, accumulated in f64.
pub fn weighted_sum(sets: &[&ParameterSet], weights: &[f64]) -> Result<ParameterSet, ParamError> {
    if sets.len() != weights.len() {
        return Err(ParamError::LengthMismatch { expected: sets.len(), got: weights.len() });
    }
    let Some(first) = sets.first() else {
        return Err(ParamError::LengthMismatch { expected: 1, got: 0 });
    };
    for s in &sets[1..] {
        first.check_compatible(s)?;
    }
    let mut entries = Vec::with_capacity(first.len());
    for (idx, (name, template)) in first.entries.iter().enumerate() {
        let mut acc = vec![0.0f64; template.len()];
        for (set, &w) in sets.iter().zip(weights) {
            let t = &set.entries[idx].1;
            for (a, v) in acc.iter_mut().zip(t.values()) {
                *a += w * v;
            }
        }
        entries.push((name.clone(), Tensor::from_values(template.dtype(), template.shape.clone(), acc)?));
    }
    Ok(ParameterSet { entries })
}

/// `alpha·x + y`.
pub fn axpy(alpha: f64, x: &ParameterSet, y: &ParameterSet) -> Result<ParameterSet, ParamError> {
    x.zip_map(y, |a, b| alpha * a + b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

pub fn norms(p: &ParameterSet) -> Norms {
    let mut l1 = 0.0;
    let mut sq = 0.0;
    let mut linf: f64 = 0.0;
    for v in p.tensors().flat_map(Tensor::values) {
        let a = v.abs();
        l1 += a;
        sq += a * a;
        linf = linf.max(a);
    }
    Norms { l1, l2: sq.sqrt(), linf }
}

/// Exact length of [`serialize_params`] output without encoding.
pub fn serialized_len(p: &ParameterSet) -> usize {
    4 + p.iter().map(|(n, t)| 2 + n.len() + 1 + 1 + 4 * t.shape().len() + t.dtype().size() * t.len()).sum::<usize>()
}

pub(crate) fn check_header(name: &str, t: &Tensor) -> Result<(), ParamError> {
    if name.len() > u16::MAX as usize {
        return Err(ParamError::NameTooLong(name.len()));
    }
    if t.shape().len() > u8::MAX as usize || t.shape().iter().any(|&d| d > u32::MAX as usize) {
        return Err(ParamError::InvalidTensor(format!("shape {:?} not encodable", t.shape())));
    }
    Ok(())
}

pub(crate) fn write_tensor_header<W: Write>(w: &mut W, name: &str, t: &Tensor) -> io::Result<()> {
    w.write_all(&(name.len() as u16).to_be_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[t.dtype().tag(), t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_be_bytes())?;
    }
    Ok(())
}

/// Streams the encoding of `p` into `w`. Header validation happens up front,
/// so an error never leaves a partial encoding behind.
pub fn write_params<W: Write>(p: &ParameterSet, w: &mut W) -> Result<(), ParamError> {
    for (n, t) in p.iter() {
        check_header(n, t)?;
    }
    let io_err = |e: io::Error| ParamError::InvalidTensor(format!("write failed: {e}"));
    w.write_all(&(p.len() as u32).to_be_bytes()).map_err(io_err)?;
    for (n, t) in p.iter() {
        write_tensor_header(w, n, t).map_err(io_err)?;
        t.write_le(w).map_err(io_err)?;
    }
    Ok(())
}

/// Encodes `p`: entry count (u32 BE), then per entry the name length (u16 BE),
/// UTF-8 name, dtype tag, ndim, dims (u32 BE each) and little-endian elements.
pub fn serialize_params(p: &ParameterSet) -> Result<Vec<u8>, ParamError> {
    let mut out = Vec::with_capacity(serialized_len(p));
    write_params(p, &mut out)?;
    Ok(out)
}

pub(crate) fn read_tensor_header(r: &mut ByteReader<'_>) -> Result<(String, DType, Vec<usize>), ParamError> {
    let trunc = |e: crate::wire::Truncated| ParamError::Truncated(e.0);
    let name_len = r.u16().map_err(trunc)? as usize;
    let name = std::str::from_utf8(r.take(name_len).map_err(trunc)?).map_err(|_| ParamError::BadName)?.to_owned();
    let tag = r.u8().map_err(trunc)?;
    let dtype = DType::from_tag(tag).ok_or(ParamError::BadDtypeTag(tag))?;
    let ndim = r.u8().map_err(trunc)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32().map_err(trunc)? as usize);
    }
    Ok((name, dtype, shape))
}

pub(crate) fn decode_elements(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor, ParamError> {
    let data = match dtype {
        DType::F32 => TensorData::F32(
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect(),
        ),
        DType::F64 => TensorData::F64(
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect(),
        ),
    };
    Tensor::new(shape, data)
}

pub(crate) fn element_count(shape: &[usize], offset: usize) -> Result<usize, ParamError> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(ParamError::Truncated(offset))
}

pub fn deserialize_params(bytes: &[u8]) -> Result<ParameterSet, ParamError> {
    let mut r = ByteReader::new(bytes);
    let count = r.u32().map_err(|e| ParamError::Truncated(e.0))?;
    let mut set = ParameterSet::new();
    for _ in 0..count {
        let (name, dtype, shape) = read_tensor_header(&mut r)?;
        let n = element_count(&shape, r.position())?;
        let len = n.checked_mul(dtype.size()).ok_or(ParamError::Truncated(r.position()))?;
        let raw = r.take(len).map_err(|e| ParamError::Truncated(e.0))?;
        set.push(name, decode_elements(dtype, shape, raw)?)?;
    }
    if r.remaining() > 0 {
        return Err(ParamError::TrailingBytes(r.remaining()));
    }
    Ok(set)
}

/// A client's trained parameters (or their delta from the base model).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpdate {
    pub client_id: String,
    pub params: ParameterSet,
    pub is_delta: bool,
    pub sample_count: u64,
    pub local_steps: u32,
    /// Global-model version the client started from.
    pub base_epoch: u64,
    /// Training start and end time in seconds, when known.
    pub wall_meta: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub timestamp: f64,
    pub entity: String,
    pub kind: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(timestamp: f64, entity: impl Into<String>, kind: impl Into<String>, value: f64) -> Self {
        Self { timestamp, entity: entity.into(), kind: kind.into(), value }
    }
}
