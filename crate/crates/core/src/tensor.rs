//! Dense tensors and the named-tensor container.
//!
//! The container layout is the safetensors layout: an 8-byte little-endian
//! header length `N`, `N` bytes of UTF-8 JSON describing every tensor
//! (`dtype`, `shape`, `data_offsets` relative to the end of the header) plus
//! an optional `__metadata__` string map, then the concatenated payloads.
//!
//! Output is canonical: tensors are laid out in lexicographic name order, the
//! JSON keys are sorted, and the header is space-padded to an 8-byte boundary.
//! Saving a loaded canonical file therefore reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use half::f16;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

/// Upper bound on the JSON header, matching the limit used by safetensors.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    /// Raw bytes; used for packed quantization codes.
    U8,
    /// Used for sparse outlier indices.
    I32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16 => 2,
            DType::U8 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::U8 => "U8",
            DType::I32 => "I32",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            "U8" => Ok(DType::U8),
            "I32" => Ok(DType::I32),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F16)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F16(_) => DType::F16,
            TensorData::U8(_) => DType::U8,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} implies {numel} elements but buffer holds {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, TensorData::F32(data))
    }

    pub fn from_f16(shape: Vec<usize>, data: Vec<f16>) -> Result<Self> {
        Tensor::new(shape, TensorData::F16(data))
    }

    pub fn from_u8(data: Vec<u8>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], TensorData::U8(data))
    }

    pub fn from_i32(data: Vec<i32>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], TensorData::I32(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Borrow the buffer when the tensor is stored as float32.
    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    /// Widen float data to float32. Integer tensors are rejected.
    pub fn to_f32_vec(&self) -> Result<Vec<f32>> {
        match &self.data {
            TensorData::F32(v) => Ok(v.clone()),
            TensorData::F16(v) => Ok(v.iter().map(|x| x.to_f32()).collect()),
            other => Err(Error::invalid(format!(
                "expected a float tensor, found {}",
                other.dtype()
            ))),
        }
    }

    /// Converts to an f32-backed tensor with the same shape.
    pub fn into_f32(self) -> Result<Tensor> {
        match self.data {
            TensorData::F32(_) => Ok(self),
            _ => {
                let v = self.to_f32_vec()?;
                Tensor::from_f32(self.shape, v)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F16(v) => v.iter().all(|x| x.is_finite()),
            _ => true,
        }
    }

    fn write_le_bytes(&self, out: &mut Vec<u8>) {
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn from_le_bytes(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor> {
        let data = match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F16 => TensorData::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(bytes.to_vec()),
            DType::I32 => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        Tensor::new(shape, data)
    }
}

/// Name-ordered tensor collection plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorMap {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl NamedTensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Serializes to the canonical container byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            let meta: Map<String, Value> = self
                .metadata
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.to_string(), Value::Object(meta));
        }
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            if name == METADATA_KEY {
                return Err(Error::invalid(format!("`{METADATA_KEY}` is a reserved name")));
            }
            let begin = payload.len();
            t.write_le_bytes(&mut payload);
            header.insert(
                name.clone(),
                json!({
                    "dtype": t.dtype().as_str(),
                    "shape": t.shape(),
                    "data_offsets": [begin, payload.len()],
                }),
            );
        }
        let mut header_bytes = serde_json::to_vec(&Value::Object(header))?;
        while header_bytes.len() % 8 != 0 {
            header_bytes.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses and validates a container image.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format(format!(
                "file is {} bytes, too short for the 8-byte header length at offset 0",
                bytes.len()
            )));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = (bytes.len() - 8) as u64;
        if n > available || n > MAX_HEADER_LEN {
            return Err(Error::Format(format!(
                "header length {n} (offset 0) exceeds the {available} bytes following offset 8"
            )));
        }
        let header_end = 8 + n as usize;
        let header: Value = serde_json::from_slice(&bytes[8..header_end]).map_err(|e| {
            Error::Format(format!("header JSON at offsets 8..{header_end} is invalid: {e}"))
        })?;
        let Value::Object(entries) = header else {
            return Err(Error::Format("header JSON is not an object".into()));
        };
        let payload = &bytes[header_end..];

        let mut map = NamedTensorMap::new();
        let mut extents: Vec<(usize, usize, &str)> = Vec::new();
        for (name, entry) in &entries {
            if name == METADATA_KEY {
                let Value::Object(meta) = entry else {
                    return Err(Error::Format("`__metadata__` must be an object".into()));
                };
                for (k, v) in meta {
                    let Value::String(s) = v else {
                        return Err(Error::Format(format!("metadata value for `{k}` is not a string")));
                    };
                    map.metadata.insert(k.clone(), s.clone());
                }
                continue;
            }
            let (dtype, shape, begin, end) = parse_entry(name, entry)?;
            let numel: usize = shape.iter().product();
            let expected = numel
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            if end < begin || end - begin != expected {
                return Err(Error::Format(format!(
                    "tensor `{name}`: data_offsets [{begin},{end}] do not span {expected} bytes \
                     for {dtype} {shape:?}"
                )));
            }
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "tensor `{name}`: data_offsets end {end} (file offset {}) is beyond the \
                     {}-byte payload",
                    header_end + end,
                    payload.len()
                )));
            }
            let t = Tensor::from_le_bytes(dtype, shape, &payload[begin..end])
                .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            if !t.is_finite() {
                return Err(Error::Format(format!(
                    "tensor `{name}` at file offset {} contains NaN or infinite values",
                    header_end + begin
                )));
            }
            extents.push((begin, end, name.as_str()));
            map.tensors.insert(name.clone(), t);
        }
        extents.sort_unstable();
        for w in extents.windows(2) {
            let (b0, e0, n0) = w[0];
            let (b1, _, n1) = w[1];
            // zero-length tensors cannot exist (all dims positive), so any shared byte is a clash
            if b1 < e0 {
                return Err(Error::Format(format!(
                    "tensors `{n0}` [{b0},{e0}] and `{n1}` overlap at payload offset {b1}"
                )));
            }
        }
        Ok(map)
    }
}

fn parse_entry(name: &str, entry: &Value) -> Result<(DType, Vec<usize>, usize, usize)> {
    let bad = |what: &str| Error::Format(format!("tensor `{name}`: {what}"));
    let obj = entry.as_object().ok_or_else(|| bad("entry is not an object"))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing dtype"))?;
    let dtype = DType::parse(dtype)?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("shape must hold non-negative integers"))?;
    if shape.contains(&0) {
        return Err(bad("zero-sized dimension"));
    }
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing data_offsets"))?;
    if offsets.len() != 2 {
        return Err(bad("data_offsets must have two entries"));
    }
    let begin = offsets[0].as_u64().ok_or_else(|| bad("bad data_offsets"))? as usize;
    let end = offsets[1].as_u64().ok_or_else(|| bad("bad data_offsets"))? as usize;
    Ok((dtype, shape, begin, end))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<NamedTensorMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    NamedTensorMap::from_bytes(&bytes)
}

pub fn save_container(map: &NamedTensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = map.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
