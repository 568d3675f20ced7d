use ndarray::{s, Array2};

use crate::error::{Error, Result};

/// Six tract variables followed by aperiodicity and periodicity.
pub const CHANNELS: usize = 8;

pub const CHANNEL_NAMES: [&str; CHANNELS] = [
    "LA", "LP", "TBCL", "TBCD", "TTCL", "TTCD", "aperiodicity", "periodicity",
];

pub const DEFAULT_FRAME_RATE: f64 = 100.0;
pub const DEFAULT_SEGMENT_SECONDS: f64 = 40.0;

/// One segment of the 8-channel articulatory series, `[8 x N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSegment {
    channels: Array2<f64>,
    pub frame_rate: f64,
    pub subject_id: String,
    pub session_id: String,
    pub segment_index: usize,
}

impl TimeSeriesSegment {
    pub fn new(channels: Array2<f64>, frame_rate: f64) -> Result<Self> {
        if channels.nrows() != CHANNELS {
            return Err(Error::shape(
                "segment",
                format!("expected {CHANNELS} channel rows, got {}", channels.nrows()),
            ));
        }
        if channels.ncols() == 0 {
            return Err(Error::invalid("segment has no frames"));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::invalid(format!("frame rate {frame_rate} must be positive")));
        }
        if let Some(pos) = channels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "segment sample at channel {}, frame {}",
                pos / channels.ncols(),
                pos % channels.ncols()
            )));
        }
        Ok(Self {
            channels,
            frame_rate,
            subject_id: String::new(),
            session_id: String::new(),
            segment_index: 0,
        })
    }

    pub fn with_ids(
        mut self,
        subject_id: impl Into<String>,
        session_id: impl Into<String>,
        segment_index: usize,
    ) -> Self {
        self.subject_id = subject_id.into();
        self.session_id = session_id.into();
        self.segment_index = segment_index;
        self
    }

    pub fn channels(&self) -> &Array2<f64> {
        &self.channels
    }

    pub fn frames(&self) -> usize {
        self.channels.ncols()
    }

    /// Replaces the samples, keeping ids and frame rate; same invariants as
    /// [`TimeSeriesSegment::new`].
    pub fn map_channels(&self, channels: Array2<f64>) -> Result<Self> {
        Ok(TimeSeriesSegment::new(channels, self.frame_rate)?.with_ids(
            self.subject_id.clone(),
            self.session_id.clone(),
            self.segment_index,
        ))
    }
}

/// Frames per full segment.
pub fn segment_frames(frame_rate: f64, segment_seconds: f64) -> usize {
    (segment_seconds * frame_rate).round() as usize
}

/// Splits `[8 x T]` into consecutive non-overlapping segments of
/// `round(segment_seconds * frame_rate)` frames. A trailing remainder of at
/// least half a segment is kept as a short final segment; shorter ones are
/// dropped.
pub fn segment_series(
    series: &Array2<f64>,
    frame_rate: f64,
    segment_seconds: f64,
) -> Result<Vec<TimeSeriesSegment>> {
    if series.ncols() == 0 {
        return Err(Error::invalid("cannot segment an empty series"));
    }
    if !(frame_rate > 0.0 && segment_seconds > 0.0) {
        return Err(Error::invalid("frame rate and segment length must be positive"));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("series to segment".into()));
    }
    let n = segment_frames(frame_rate, segment_seconds).max(1);
    let plan = segment_plan(series.ncols(), n);
    plan.into_iter()
        .enumerate()
        .map(|(i, (start, len))| {
            let seg = TimeSeriesSegment::new(series.slice(s![.., start..start + len]).to_owned(), frame_rate)?;
            Ok(seg.with_ids("", "", i))
        })
        .collect()
}

/// `(start, len)` windows for a series of `total` frames and segments of `n`.
pub fn segment_plan(total: usize, n: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..total / n).map(|i| (i * n, n)).collect();
    let rem = total % n;
    if rem > 0 && 2 * rem >= n {
        out.push((total - rem, rem));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(t: usize) -> Array2<f64> {
        Array2::from_shape_fn((8, t), |(c, i)| (c * 7 + i) as f64 * 1e-3)
    }

    #[test]
    fn two_full_segments() {
        let segs = segment_series(&series(8000), 100.0, 40.0).unwrap();
        assert_eq!(segs.len(), 2);
        assert!(segs.iter().all(|s| s.frames() == 4000));
        assert_eq!(segs[1].segment_index, 1);
        assert_eq!(segs[1].channels()[[0, 0]], series(8000)[[0, 4000]]);
    }

    #[test]
    fn short_remainder_is_dropped() {
        let segs = segment_series(&series(4500), 100.0, 40.0).unwrap();
        assert_eq!(segs.len(), 1);
    }

    #[test]
    fn long_remainder_is_kept() {
        let segs = segment_series(&series(7000), 100.0, 40.0).unwrap();
        assert_eq!(segs.iter().map(|s| s.frames()).collect::<Vec<_>>(), vec![4000, 3000]);
    }

    #[test]
    fn errors() {
        assert!(segment_series(&Array2::zeros((8, 0)), 100.0, 40.0).is_err());
        let mut bad = series(10);
        bad[[3, 4]] = f64::NAN;
        assert!(matches!(segment_series(&bad, 100.0, 40.0), Err(Error::NonFinite(_))));
        assert!(TimeSeriesSegment::new(Array2::zeros((7, 10)), 100.0).is_err());
    }
}
