//! Externally computed speech representations: window pooling, session
//! stacking and matrix file IO.

pub mod fmat;

use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

pub use fmat::{read_fmat, read_matrix, write_fmat, write_matrix, Dtype, FmatArray, FmatData};

/// Widths produced by base and large pretrained speech encoders.
pub const SUPPORTED_DIMS: [usize; 2] = [768, 1024];

/// Per-window representations of one segment, `[windows x dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRepMatrix {
    values: Array2<f64>,
    source: String,
}

impl WindowRepMatrix {
    pub fn new(values: Array2<f64>, source: impl Into<String>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::invalid("window representation matrix has no windows"));
        }
        if !SUPPORTED_DIMS.contains(&values.ncols()) {
            return Err(Error::invalid(format!(
                "representation width {} is not one of {:?}",
                values.ncols(),
                SUPPORTED_DIMS
            )));
        }
        Ok(Self {
            values,
            source: source.into(),
        })
    }

    /// Skips the width check; for toy dimensions in tests and fixtures.
    pub fn new_unchecked_dim(values: Array2<f64>, source: impl Into<String>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::invalid("window representation matrix has no windows"));
        }
        Ok(Self {
            values,
            source: source.into(),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEmbedding {
    pub values: Array1<f64>,
    pub segment_index: usize,
}

/// `[segments x dim]` stack for one session, rows in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionEmbeddingStack {
    pub values: Array2<f64>,
    pub subject_id: String,
    pub session_id: String,
}

impl SessionEmbeddingStack {
    pub fn new(
        values: Array2<f64>,
        subject_id: impl Into<String>,
        session_id: impl Into<String>,
    ) -> Self {
        Self {
            values,
            subject_id: subject_id.into(),
            session_id: session_id.into(),
        }
    }

    pub fn segments(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Arithmetic mean over the window axis.
pub fn mean_pool_windows(windows: &WindowRepMatrix, segment_index: usize) -> Result<SegmentEmbedding> {
    let values = windows.values();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "window representations from {}",
            windows.source()
        )));
    }
    let n = values.nrows() as f64;
    let mut mean = Array1::<f64>::zeros(values.ncols());
    for row in values.axis_iter(Axis(0)) {
        mean += &row;
    }
    mean /= n;
    Ok(SegmentEmbedding {
        values: mean,
        segment_index,
    })
}

pub fn stack_session(
    embeddings: &[SegmentEmbedding],
    subject_id: &str,
    session_id: &str,
) -> Result<SessionEmbeddingStack> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::invalid(format!("session {session_id} has no segment embeddings")))?;
    let dim = first.values.len();
    let mut values = Array2::<f64>::zeros((embeddings.len(), dim));
    for (i, e) in embeddings.iter().enumerate() {
        if e.values.len() != dim {
            return Err(Error::shape(
                "stack_session",
                format!(
                    "segment {} has dim {}, expected {dim}",
                    e.segment_index,
                    e.values.len()
                ),
            ));
        }
        values.row_mut(i).assign(&e.values);
    }
    Ok(SessionEmbeddingStack::new(values, subject_id, session_id))
}

/// Reads a numeric CSV with a header row; rows of the file become rows of
/// the matrix (frames or windows), columns stay columns.
pub fn read_csv_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let parse_err = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(e.to_string()))?;
    let cols = reader.headers().map_err(|e| parse_err(e.to_string()))?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        if record.len() != cols {
            return Err(parse_err(format!(
                "row {} has {} fields, header has {cols}",
                line + 2,
                record.len()
            )));
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(format!("row {}: {field:?} is not a number", line + 2)))?;
            data.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| parse_err(e.to_string()))
}

pub fn write_csv_matrix(path: impl AsRef<Path>, header: &[String], matrix: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    if header.len() != matrix.ncols() {
        return Err(Error::shape(
            "write_csv_matrix",
            format!("{} header names for {} columns", header.len(), matrix.ncols()),
        ));
    }
    let to_err = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = csv::Writer::from_path(path).map_err(to_err)?;
    writer.write_record(header).map_err(to_err)?;
    for row in matrix.rows() {
        writer
            .write_record(row.iter().map(|v| format!("{v:?}")))
            .map_err(to_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Loads a matrix from FMAT, or from CSV when the extension is `.csv`.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        read_csv_matrix(path)
    } else {
        read_matrix(path)
    }
}
