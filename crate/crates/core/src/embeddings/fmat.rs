//! FMAT: a small binary container for dense row-major arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"FMAT" | u32 version (=1) | u8 dtype (1 = f32, 2 = f64) | u32 ndim
//! | ndim x u64 dims | row-major payload | u32 metadata length | UTF-8 JSON metadata
//! ```
//!
//! Records are self-delimiting, so several can be concatenated in one file
//! (the checkpoint container relies on this).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde_json::{Map, Value};

use crate::error::{Error, FmatError, Result};

pub const MAGIC: &[u8; 4] = b"FMAT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self, FmatError> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(FmatError::UnknownDtype(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FmatData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl FmatData {
    pub fn len(&self) -> usize {
        match self {
            FmatData::F32(v) => v.len(),
            FmatData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            FmatData::F32(_) => Dtype::F32,
            FmatData::F64(_) => Dtype::F64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            FmatData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            FmatData::F64(v) => v.clone(),
        }
    }
}

/// One decoded FMAT record.
#[derive(Debug, Clone, PartialEq)]
pub struct FmatArray {
    pub shape: Vec<usize>,
    pub data: FmatData,
    pub metadata: Map<String, Value>,
}

impl FmatArray {
    pub fn new(shape: Vec<usize>, data: FmatData, metadata: Map<String, Value>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FmatError::ShapeMismatch {
                shape,
                len: data.len(),
            }
            .into());
        }
        Ok(Self {
            shape,
            data,
            metadata,
        })
    }

    pub fn from_array2(matrix: &Array2<f64>, dtype: Dtype, metadata: Map<String, Value>) -> Self {
        let shape = vec![matrix.nrows(), matrix.ncols()];
        let values: Vec<f64> = matrix.iter().copied().collect();
        let data = match dtype {
            Dtype::F64 => FmatData::F64(values),
            Dtype::F32 => FmatData::F32(values.iter().map(|&x| x as f32).collect()),
        };
        Self {
            shape,
            data,
            metadata,
        }
    }

    /// Interprets the record as a matrix; 1-D records become a single row.
    pub fn to_array2(&self) -> Result<Array2<f64>> {
        let (rows, cols) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::shape(
                    "fmat",
                    format!("expected a 1-D or 2-D record, found shape {other:?}"),
                ))
            }
        };
        Array2::from_shape_vec((rows, cols), self.data.to_f64())
            .map_err(|e| Error::shape("fmat", e.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let width = self.data.dtype().width();
        let meta = serde_json::to_vec(&self.metadata).expect("JSON map always serializes");
        let mut out = Vec::with_capacity(
            4 + 4 + 1 + 4 + 8 * self.shape.len() + width * self.data.len() + 4 + meta.len(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.dtype().code());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            FmatData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            FmatData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    /// Decodes one record from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), FmatError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take("magic", 4)?;
        if magic != MAGIC {
            return Err(FmatError::BadMagic {
                found: magic.to_vec(),
            });
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(FmatError::UnsupportedVersion(version));
        }
        let dtype = Dtype::from_code(cur.take("dtype", 1)?[0])?;
        let ndim = cur.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(cur.u64("dims")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FmatError::Metadata(format!("dims {shape:?} overflow")))?;
        let payload_len = count
            .checked_mul(dtype.width())
            .ok_or_else(|| FmatError::Metadata(format!("dims {shape:?} overflow")))?;
        let payload = cur.take("payload", payload_len)?;
        let data = match dtype {
            Dtype::F32 => FmatData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => FmatData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        let meta_len = cur.u32("metadata length")? as usize;
        let meta_bytes = cur.take("metadata", meta_len)?;
        let metadata = if meta_bytes.is_empty() {
            Map::new()
        } else {
            match serde_json::from_slice::<Value>(meta_bytes) {
                Ok(Value::Object(map)) => map,
                Ok(_) => return Err(FmatError::Metadata("metadata is not a JSON object".into())),
                Err(e) => return Err(FmatError::Metadata(e.to_string())),
            }
        };
        Ok((
            Self {
                shape,
                data,
                metadata,
            },
            cur.pos,
        ))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, section: &'static str, n: usize) -> Result<&'a [u8], FmatError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(FmatError::Truncated {
                section,
                expected: n,
                actual: available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, FmatError> {
        Ok(u32::from_le_bytes(self.take(section, 4)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64, FmatError> {
        Ok(u64::from_le_bytes(self.take(section, 8)?.try_into().unwrap()))
    }
}

pub fn write_fmat(path: impl AsRef<Path>, array: &FmatArray) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, array.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_fmat(path: impl AsRef<Path>) -> Result<FmatArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (array, used) = FmatArray::decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes after FMAT record", bytes.len() - used),
        });
    }
    Ok(array)
}

/// Writes a matrix as f64 FMAT.
pub fn write_matrix(
    path: impl AsRef<Path>,
    matrix: &Array2<f64>,
    metadata: Map<String, Value>,
) -> Result<()> {
    write_fmat(path, &FmatArray::from_array2(matrix, Dtype::F64, metadata))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    read_fmat(path)?.to_array2()
}
