//! Tensor container files (checkpoints and activation dumps).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "CRDASGN1"
//! header_len u64
//! header     header_len bytes of JSON: {"kind", "meta", "tensors": [{"name","shape","offset"}]}
//! payload    f32 values; each tensor starts at `offset` bytes into the payload
//! ```
//!
//! JSON object keys are emitted in sorted order, so encoding is a pure
//! function of the contents.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{decode_f32s, encode_f32s, ByteCursor, Tensor};

pub const MAGIC: &[u8; 8] = b"CRDASGN1";
/// Refuse headers above this size; real headers are a few kilobytes.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
    }

    fn byte_len(&self) -> Option<u64> {
        self.numel().and_then(|n| (n as u64).checked_mul(4))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

impl Header {
    fn payload_len(&self) -> Option<u64> {
        self.tensors
            .iter()
            .map(|t| t.byte_len().and_then(|l| t.offset.checked_add(l)))
            .try_fold(0u64, |acc, end| end.map(|e| acc.max(e)))
    }

    fn validate(&self, payload_len: u64) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Decode(format!("duplicate tensor {:?}", t.name)));
            }
            if t.shape.is_empty() || t.shape.contains(&0) {
                return Err(Error::Decode(format!("tensor {:?} has shape {:?}", t.name, t.shape)));
            }
            let end = t
                .byte_len()
                .and_then(|l| t.offset.checked_add(l))
                .ok_or_else(|| Error::Decode(format!("tensor {:?} size overflows", t.name)))?;
            if t.offset % 4 != 0 || end > payload_len {
                return Err(Error::Decode(format!(
                    "tensor {:?} spans bytes {}..{end} of a {payload_len}-byte payload",
                    t.name, t.offset
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Decode(format!("missing tensor {name:?}")))
    }
}

/// A fully materialized container.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container { kind: kind.into(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Decode(format!("missing tensor {name:?}")))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Decode(format!("missing tensor {name:?}")))?;
        Ok(self.tensors.remove(i).1)
    }

    fn header(&self) -> Header {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        Header { kind: self.kind.clone(), meta: self.meta.clone(), tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| 4 * t.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            encode_f32s(t.data(), &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        let header = read_header(&mut cur)?;
        let payload = &bytes[cur.pos..];
        header.validate(payload.len() as u64)?;
        let want = header.payload_len().unwrap_or(0);
        if want != payload.len() as u64 {
            return Err(Error::Decode(format!(
                "payload is {} bytes, header describes {want}",
                payload.len()
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let start = e.offset as usize;
            let end = start + 4 * e.numel().expect("validated");
            let t = Tensor::new(e.shape.clone(), decode_f32s(&payload[start..end]))?;
            t.ensure_finite(&e.name).map_err(|err| Error::Decode(err.to_string()))?;
            tensors.push((e.name.clone(), t));
        }
        Ok(Container { kind: header.kind, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn read_header(cur: &mut ByteCursor<'_>) -> Result<Header> {
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(Error::Decode("bad magic".into()));
    }
    let len = cur.u64()?;
    if len > MAX_HEADER {
        return Err(Error::Decode(format!("header length {len} too large")));
    }
    let raw = cur.take(len as usize)?;
    serde_json::from_slice(raw).map_err(|e| Error::Decode(format!("header: {e}")))
}

/// Random access to a container on disk without loading the payload.
pub struct ContainerReader {
    path: PathBuf,
    file: BufReader<File>,
    header: Header,
    payload_start: u64,
}

impl ContainerReader {
    pub fn open(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut file = BufReader::new(File::open(path).map_err(io)?);
        let mut prefix = [0u8; 16];
        file.read_exact(&mut prefix).map_err(io)?;
        let len = u64::from_le_bytes(prefix[8..].try_into().expect("8 bytes"));
        if &prefix[..8] != MAGIC || len > MAX_HEADER {
            return Err(Error::format(path, "not a container file"));
        }
        let mut raw = vec![0u8; len as usize];
        file.read_exact(&mut raw).map_err(io)?;
        let header: Header = serde_json::from_slice(&raw)
            .map_err(|e| Error::format(path, format!("header: {e}")))?;
        let payload_start = 16 + len;
        let total = file.get_ref().metadata().map_err(io)?.len();
        header
            .validate(total.saturating_sub(payload_start))
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(ContainerReader { path: path.to_path_buf(), file, header, payload_start })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn read(&mut self, name: &str) -> Result<Tensor<f32>> {
        let e = self.header.entry(name)?.clone();
        let rows: Vec<usize> = (0..e.shape[0]).collect();
        self.read_rows(name, &rows)
    }

    /// Rows `rows` (indices into the leading dimension) of tensor `name`.
    pub fn read_rows(&mut self, name: &str, rows: &[usize]) -> Result<Tensor<f32>> {
        let e = self.header.entry(name)?.clone();
        if rows.is_empty() {
            return Err(Error::EmptySubset(format!("no rows requested from {name}")));
        }
        let row_len: usize = e.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        let mut buf = vec![0u8; 4 * row_len];
        let mut next: Option<usize> = None;
        for &r in rows {
            if r >= e.shape[0] {
                return Err(Error::dim(format!("row {r} out of range for {name} {:?}", e.shape)));
            }
            if next != Some(r) {
                let at = self.payload_start + e.offset + (4 * row_len * r) as u64;
                self.file.seek(SeekFrom::Start(at)).map_err(|err| Error::io(&self.path, err))?;
            }
            self.file.read_exact(&mut buf).map_err(|err| Error::io(&self.path, err))?;
            data.extend(decode_f32s(&buf));
            next = Some(r + 1);
        }
        let mut shape = e.shape.clone();
        shape[0] = rows.len();
        let t = Tensor::new(shape, data)?;
        t.ensure_finite(name).map_err(|err| Error::format(&self.path, err.to_string()))?;
        Ok(t)
    }
}

/// Writes a container whose tensor shapes are known up front, filling
/// payload rows in any order.
pub struct ContainerWriter {
    path: PathBuf,
    file: BufWriter<File>,
    header: Header,
    payload_start: u64,
}

impl ContainerWriter {
    pub fn create(
        path: &Path,
        kind: &str,
        meta: serde_json::Value,
        shapes: &[(String, Vec<usize>)],
    ) -> Result<Self> {
        let mut offset = 0u64;
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let e = TensorEntry { name: name.clone(), shape: shape.clone(), offset };
            offset += e.byte_len().ok_or_else(|| Error::dim("tensor too large"))?;
            tensors.push(e);
        }
        let header = Header { kind: kind.to_string(), meta, tensors };
        let raw = serde_json::to_vec(&header).expect("header serializes");
        let io = |e| Error::io(path, e);
        let file = File::create(path).map_err(io)?;
        let payload_start = 16 + raw.len() as u64;
        file.set_len(payload_start + offset).map_err(io)?;
        let mut file = BufWriter::new(file);
        file.write_all(MAGIC).map_err(io)?;
        file.write_all(&(raw.len() as u64).to_le_bytes()).map_err(io)?;
        file.write_all(&raw).map_err(io)?;
        Ok(ContainerWriter { path: path.to_path_buf(), file, header, payload_start })
    }

    /// Writes `values` as consecutive rows of `name` starting at row `first_row`.
    pub fn write_rows(&mut self, name: &str, first_row: usize, values: &[f32]) -> Result<()> {
        let e = self.header.entry(name)?;
        let row_len: usize = e.shape[1..].iter().product();
        if !values.len().is_multiple_of(row_len) || first_row + values.len() / row_len > e.shape[0] {
            return Err(Error::dim(format!(
                "{} values at row {first_row} do not fit {name} {:?}",
                values.len(),
                e.shape
            )));
        }
        let at = self.payload_start + e.offset + (4 * row_len * first_row) as u64;
        let mut bytes = Vec::new();
        encode_f32s(values, &mut bytes);
        let io = |err| Error::io(&self.path, err);
        self.file.seek(SeekFrom::Start(at)).map_err(io)?;
        self.file.write_all(&bytes).map_err(io)
    }

    pub fn finish(mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}
