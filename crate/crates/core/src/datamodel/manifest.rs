use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::segment::{TimeSeriesSegment, CHANNELS, DEFAULT_FRAME_RATE};
use crate::embeddings::{self, fmat, WindowRepMatrix};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// BPRS totals: 18 items scored 1 to 7.
pub const SEVERITY_MIN: u32 = 18;
pub const SEVERITY_MAX: u32 = 126;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRef {
    pub index: usize,
    pub tv_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssl_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub subject_id: String,
    pub session_id: String,
    pub severity: u32,
    pub segments: Vec<SegmentRef>,
}

impl Session {
    pub fn key(&self) -> String {
        format!("{}/{}", self.subject_id, self.session_id)
    }

    /// File-name friendly identifier.
    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.subject_id, self.session_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub sessions: Vec<Session>,
    /// Directory relative paths resolve against; the manifest's own directory
    /// once loaded.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(sessions: Vec<Session>, root: impl Into<PathBuf>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            sessions,
            root: root.into(),
        }
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.iter().map(|s| s.subject_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn segment_count(&self) -> usize {
        self.sessions.iter().map(|s| s.segments.len()).sum()
    }

    /// Checks every invariant; with `check_files`, also that each referenced
    /// file exists.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Validation {
                record: "manifest".into(),
                reason: format!("unsupported version {}", self.version),
            });
        }
        let mut seen = HashSet::new();
        for session in &self.sessions {
            let record = format!("session {}", session.key());
            let fail = |reason: String| Error::Validation {
                record: record.clone(),
                reason,
            };
            if session.subject_id.is_empty() || session.session_id.is_empty() {
                return Err(fail("empty subject or session id".into()));
            }
            if !seen.insert((session.subject_id.as_str(), session.session_id.as_str())) {
                return Err(fail("duplicate (subject_id, session_id)".into()));
            }
            if !(SEVERITY_MIN..=SEVERITY_MAX).contains(&session.severity) {
                return Err(fail(format!(
                    "severity {} outside [{SEVERITY_MIN}, {SEVERITY_MAX}]",
                    session.severity
                )));
            }
            if session.segments.is_empty() {
                return Err(fail("no segments".into()));
            }
            if check_files {
                for seg in &session.segments {
                    let paths = std::iter::once(&seg.tv_path).chain(seg.ssl_path.as_ref());
                    for p in paths {
                        let resolved = self.resolve(p);
                        if !resolved.is_file() {
                            return Err(fail(format!(
                                "segment {} references missing file {}",
                                seg.index,
                                resolved.display()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Loads one segment's channels. FMAT files hold `[8 x N]`; CSV files
    /// hold one row per frame and one column per channel.
    pub fn load_segment(&self, session: &Session, seg: &SegmentRef) -> Result<TimeSeriesSegment> {
        let path = self.resolve(&seg.tv_path);
        let (channels, frame_rate) = if is_csv(&path) {
            (embeddings::read_csv_matrix(&path)?.reversed_axes(), DEFAULT_FRAME_RATE)
        } else {
            let rec = fmat::read_fmat(&path)?;
            let rate = rec
                .metadata
                .get("frame_rate")
                .and_then(|v| v.as_f64())
                .unwrap_or(DEFAULT_FRAME_RATE);
            (rec.to_array2()?, rate)
        };
        if channels.nrows() != CHANNELS {
            return Err(Error::Validation {
                record: format!("segment {} of session {}", seg.index, session.key()),
                reason: format!("{} has {} channels, expected {CHANNELS}", path.display(), channels.nrows()),
            });
        }
        Ok(TimeSeriesSegment::new(channels.as_standard_layout().to_owned(), frame_rate)?
            .with_ids(&session.subject_id, &session.session_id, seg.index))
    }

    /// Loads one segment's window representations (rows = windows).
    pub fn load_windows(&self, session: &Session, seg: &SegmentRef) -> Result<WindowRepMatrix> {
        let rel = seg.ssl_path.as_ref().ok_or_else(|| Error::Validation {
            record: format!("segment {} of session {}", seg.index, session.key()),
            reason: "no ssl_path".into(),
        })?;
        let path = self.resolve(rel);
        let matrix = embeddings::load_matrix(&path)?;
        WindowRepMatrix::new(matrix, path.display().to_string())
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads and validates a manifest; relative paths resolve against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate(true)?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| Error::invalid(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
