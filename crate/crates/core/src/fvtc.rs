//! Full vocal tract coordination features: lagged channel correlations
//! stacked over every channel pair.
//!
//! For channels `x`, `y` of length `N` and delay `d`,
//!
//! ```text
//! r(x, y; d) = sum_{t=0}^{N-d-1} x[t] * y[t+d] / (N - d)
//! ```
//!
//! Each pair contributes the vector `[r(d = 0), ..., r(d = D)]`. Pairs are the
//! upper triangle including the diagonal, ordered `(1,1), (1,2), ..., (1,8),
//! (2,2), ..., (8,8)`, giving a `36 x (D+1)` matrix for eight channels.
//! All sums accumulate left to right in `t`, so results are bit-reproducible.

use ndarray::{Array2, ArrayView1};
use serde_json::{json, Map, Value};

use crate::datamodel::TimeSeriesSegment;
use crate::embeddings::fmat::{self, Dtype, FmatArray};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_DELAY: usize = 50;
pub const PAIR_ORDER: &str = "upper-triangle-row-major";

/// `(i, j)` channel pairs (0-based, `i <= j`) in row order.
pub fn pair_order(channels: usize) -> Vec<(usize, usize)> {
    (0..channels)
        .flat_map(|i| (i..channels).map(move |j| (i, j)))
        .collect()
}

/// A segment whose channels were z-scored, with flags for constant channels
/// (which map to all zeros).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSegment {
    pub segment: TimeSeriesSegment,
    pub degenerate: Vec<bool>,
}

/// Per-channel z-score: sample mean 0, population standard deviation 1.
pub fn channel_normalize(segment: &TimeSeriesSegment) -> NormalizedSegment {
    let mut out = segment.channels().clone();
    let mut degenerate = vec![false; out.nrows()];
    for (c, mut row) in out.rows_mut().into_iter().enumerate() {
        let (mean, sd) = mean_sd(row.view());
        if sd <= 1e-12 * mean.abs().max(1.0) {
            row.fill(0.0);
            degenerate[c] = true;
        } else {
            row.mapv_inplace(|v| (v - mean) / sd);
        }
    }
    NormalizedSegment {
        segment: segment
            .map_channels(out)
            .expect("z-scored channels keep the segment invariants"),
        degenerate,
    }
}

fn mean_sd(x: ArrayView1<f64>) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Lagged inner product of `x` and `y` at delay `d`, divided by `N - d`.
pub fn delayed_correlation(x: &[f64], y: &[f64], d: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "delayed_correlation",
            format!("lengths {} and {}", x.len(), y.len()),
        ));
    }
    let n = x.len();
    if d >= n {
        return Err(Error::invalid(format!("delay {d} must be below the length {n}")));
    }
    let mut acc = 0.0;
    for t in 0..n - d {
        acc += x[t] * y[t + d];
    }
    Ok(acc / (n - d) as f64)
}

/// `[r(0), r(1), ..., r(max_delay)]` for one channel pair.
pub fn correlation_vector(x: &[f64], y: &[f64], max_delay: usize) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "correlation_vector",
            format!("lengths {} and {}", x.len(), y.len()),
        ));
    }
    if max_delay >= x.len() {
        return Err(Error::invalid(format!(
            "max delay {max_delay} must be below the length {}",
            x.len()
        )));
    }
    (0..=max_delay).map(|d| delayed_correlation(x, y, d)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationVector {
    pub values: Vec<f64>,
    pub channel_pair: (usize, usize),
}

/// Stacked correlation vectors, `[pairs x (D+1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FvtcMatrix {
    values: Array2<f64>,
    max_delay: usize,
    normalized: bool,
    degenerate: Vec<bool>,
}

impl FvtcMatrix {
    pub fn from_values(values: Array2<f64>, max_delay: usize, normalized: bool) -> Result<Self> {
        if values.ncols() != max_delay + 1 {
            return Err(Error::shape(
                "fvtc",
                format!("{} columns for max delay {max_delay}", values.ncols()),
            ));
        }
        Ok(Self {
            values,
            max_delay,
            normalized,
            degenerate: Vec::new(),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn max_delay(&self) -> usize {
        self.max_delay
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    /// Channels that were constant when normalizing; their rows are zero.
    pub fn degenerate_channels(&self) -> &[bool] {
        &self.degenerate
    }

    pub fn pairs(&self) -> usize {
        self.values.nrows()
    }

    pub fn row(&self, index: usize) -> CorrelationVector {
        let channels = channels_for_pairs(self.values.nrows());
        CorrelationVector {
            values: self.values.row(index).to_vec(),
            channel_pair: pair_order(channels)[index],
        }
    }

    pub fn metadata(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("D".into(), json!(self.max_delay));
        m.insert("normalized".into(), json!(self.normalized));
        m.insert("pair_order".into(), json!(PAIR_ORDER));
        m
    }

    pub fn to_fmat(&self) -> FmatArray {
        FmatArray::from_array2(&self.values, Dtype::F64, self.metadata())
    }

    pub fn from_fmat(rec: &FmatArray) -> Result<Self> {
        let values = rec.to_array2()?;
        let max_delay = rec
            .metadata
            .get("D")
            .and_then(Value::as_u64)
            .map(|d| d as usize)
            .unwrap_or(values.ncols().saturating_sub(1));
        let normalized = rec
            .metadata
            .get("normalized")
            .and_then(Value::as_bool)
            .unwrap_or(true);
        Self::from_values(values, max_delay, normalized)
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        fmat::write_fmat(path, &self.to_fmat())
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_fmat(&fmat::read_fmat(path)?)
    }
}

fn channels_for_pairs(pairs: usize) -> usize {
    (0..=pairs).find(|c| c * (c + 1) / 2 >= pairs).unwrap_or(0)
}

/// FVTC matrix of a segment; with `normalize`, channels are z-scored first.
pub fn fvtc_matrix(segment: &TimeSeriesSegment, max_delay: usize, normalize: bool) -> Result<FvtcMatrix> {
    let n = segment.frames();
    if max_delay >= n {
        return Err(Error::invalid(format!(
            "max delay {max_delay} must be below the segment length {n}"
        )));
    }
    let (channels, degenerate) = if normalize {
        let ns = channel_normalize(segment);
        (ns.segment.channels().clone(), ns.degenerate)
    } else {
        (segment.channels().clone(), vec![false; segment.channels().nrows()])
    };
    let rows: Vec<Vec<f64>> = channels.rows().into_iter().map(|r| r.to_vec()).collect();
    let pairs = pair_order(rows.len());
    let mut values = Array2::zeros((pairs.len(), max_delay + 1));
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let v = correlation_vector(&rows[i], &rows[j], max_delay)?;
        values.row_mut(p).assign(&ArrayView1::from(&v));
    }
    Ok(FvtcMatrix {
        values,
        max_delay,
        normalized: normalize,
        degenerate,
    })
}
