//! Synthetic corpus with severity planted in inter-channel coordination.
//!
//! Each subject has a base severity; each session perturbs it. A session's
//! coupling weight is `alpha = g(1-u) / (1 + g(1-u))` with `u = (s-18)/108`
//! and `g` the coupling gain, so higher severity means weaker coupling.
//! Channel `c` is
//!
//! ```text
//! x_c = offset_c + scale_c * (sqrt(alpha) * shared_c + sqrt(1-alpha) * private_c) + noise_sd * e
//! ```
//!
//! where `shared_c` mixes `k` latent oscillators through a fixed corpus-wide
//! mixing matrix and per-channel lags, and `private_c` is an independent
//! oscillator. Every oscillator completes a whole, distinct number of cycles
//! per segment, so all components are exactly orthogonal over a segment and
//! the lag-0 correlation of channels `c != d` is `alpha` times a corpus-wide
//! constant (up to the noise term). The window representations are a fixed random projection of
//! `[alpha, 1 - alpha, 1]` plus noise.

use std::f64::consts::{PI, SQRT_2};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map};

use super::manifest::{save_manifest, Manifest, SegmentRef, Session, SEVERITY_MAX, SEVERITY_MIN};
use super::segment::{segment_frames, CHANNELS, DEFAULT_FRAME_RATE, DEFAULT_SEGMENT_SECONDS};
use crate::embeddings::fmat::{write_fmat, Dtype, FmatArray};
use crate::embeddings::SUPPORTED_DIMS;
use crate::error::{Error, Result};
use crate::seed;

const MAX_LAG_FRAMES: usize = 20;
const SESSION_JITTER: i64 = 8;
const THETA_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub sessions_per_subject: usize,
    pub segments_per_session: usize,
    pub frame_rate: f64,
    pub segment_seconds: f64,
    pub severity_range: [u32; 2],
    pub coupling_gain: f64,
    pub noise_sd: f64,
    pub ssl_dim: usize,
    pub ssl_windows: usize,
    pub latent_oscillators: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_subjects: 40,
            sessions_per_subject: 4,
            segments_per_session: 3,
            frame_rate: DEFAULT_FRAME_RATE,
            segment_seconds: DEFAULT_SEGMENT_SECONDS,
            severity_range: [SEVERITY_MIN, SEVERITY_MAX],
            coupling_gain: 1.0,
            noise_sd: 0.1,
            ssl_dim: 768,
            ssl_windows: 8,
            latent_oscillators: 3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("synthetic config: {m}")));
        if self.n_subjects == 0
            || self.sessions_per_subject == 0
            || self.segments_per_session == 0
            || self.ssl_windows == 0
            || self.latent_oscillators == 0
        {
            return bad("all counts must be at least 1".into());
        }
        let [lo, hi] = self.severity_range;
        if lo < SEVERITY_MIN || hi > SEVERITY_MAX || lo > hi {
            return bad(format!("severity range [{lo}, {hi}] must lie within [18, 126] with lo <= hi"));
        }
        if !SUPPORTED_DIMS.contains(&self.ssl_dim) {
            return bad(format!("ssl_dim {} must be 768 or 1024", self.ssl_dim));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad(format!("frame rate {} must be positive", self.frame_rate));
        }
        if segment_frames(self.frame_rate, self.segment_seconds) <= MAX_LAG_FRAMES {
            return bad("segments must be longer than the maximum channel lag".into());
        }
        let (lo, hi) = cycle_range(self);
        if hi + 1 < lo + self.latent_oscillators + CHANNELS {
            return bad(format!(
                "segments are too short for {} distinct oscillator frequencies",
                self.latent_oscillators + CHANNELS
            ));
        }
        if !(self.coupling_gain >= 0.0 && self.coupling_gain.is_finite()) {
            return bad(format!("coupling gain {} must be non-negative", self.coupling_gain));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise sd {} must be non-negative", self.noise_sd));
        }
        Ok(())
    }
}

/// Coupling weight in `[0, 1)` for a severity score; decreasing in severity.
pub fn coupling_strength(severity: f64, gain: f64) -> f64 {
    let u = ((severity - SEVERITY_MIN as f64) / (SEVERITY_MAX - SEVERITY_MIN) as f64).clamp(0.0, 1.0);
    let g = gain * (1.0 - u);
    g / (1.0 + g)
}

/// Corpus-wide structure shared by every session.
struct Structure {
    mixing: Array2<f64>,
    lags: Vec<usize>,
    /// Cycles per segment of each latent oscillator.
    latent_cycles: Vec<usize>,
    offsets: Vec<f64>,
    scales: Vec<f64>,
    projection: Array2<f64>,
}

impl Structure {
    fn draw(cfg: &SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[0]));
        let k = cfg.latent_oscillators;
        let mut mixing: Array2<f64> = Array2::from_shape_fn((CHANNELS, k), |_| StandardNormal.sample(&mut rng));
        for mut row in mixing.rows_mut() {
            let norm = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v: f64| v / norm);
        }
        let lags = (0..CHANNELS).map(|_| rng.random_range(0..=MAX_LAG_FRAMES)).collect();
        let (lo, hi) = cycle_range(cfg);
        let latent_cycles = sample(&mut rng, hi - lo + 1, k).iter().map(|i| lo + i).collect();
        let offsets = (0..CHANNELS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scales = (0..CHANNELS).map(|_| rng.random_range(0.5..2.0)).collect();
        let projection =
            Array2::from_shape_fn((cfg.ssl_dim, THETA_DIM), |_| StandardNormal.sample(&mut rng));
        Self {
            mixing,
            lags,
            latent_cycles,
            offsets,
            scales,
            projection,
        }
    }
}

/// Whole cycle counts per segment available to oscillators: roughly 0.5 to
/// 4 Hz, widened when needed so every oscillator gets its own count, and
/// kept below half the segment length so no pair aliases.
fn cycle_range(cfg: &SyntheticConfig) -> (usize, usize) {
    let n = segment_frames(cfg.frame_rate, cfg.segment_seconds);
    let seconds = n as f64 / cfg.frame_rate;
    let needed = cfg.latent_oscillators + CHANNELS;
    let lo = ((0.5 * seconds).round() as usize).max(1);
    let hi = ((4.0 * seconds).round() as usize).max(lo + needed - 1);
    (lo, hi.min(n.saturating_sub(1) / 2))
}

/// Unit-variance sinusoid with `cycles` whole cycles over `len` frames.
fn oscillator(cycles: usize, phase: f64, len: usize, shift: usize) -> Vec<f64> {
    (0..len)
        .map(|t| SQRT_2 * (2.0 * PI * cycles as f64 * (t + shift) as f64 / len as f64 + phase).sin())
        .collect()
}

fn segment_channels(cfg: &SyntheticConfig, st: &Structure, alpha: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = segment_frames(cfg.frame_rate, cfg.segment_seconds);
    let phases: Vec<f64> = st.latent_cycles.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let (lo, hi) = cycle_range(cfg);
    let free: Vec<usize> = (lo..=hi).filter(|k| !st.latent_cycles.contains(k)).collect();
    let private_cycles: Vec<usize> = sample(rng, free.len(), CHANNELS).iter().map(|i| free[i]).collect();
    let mut out = Array2::zeros((CHANNELS, n));
    for c in 0..CHANNELS {
        let mut shared = vec![0.0; n];
        for (j, (&k, &ph)) in st.latent_cycles.iter().zip(&phases).enumerate() {
            let w = st.mixing[[c, j]];
            for (s, v) in shared.iter_mut().zip(oscillator(k, ph, n, st.lags[c])) {
                *s += w * v;
            }
        }
        let private = oscillator(private_cycles[c], rng.random_range(0.0..2.0 * PI), n, 0);
        for t in 0..n {
            let e: f64 = StandardNormal.sample(rng);
            let mixed = alpha.sqrt() * shared[t] + (1.0 - alpha).sqrt() * private[t];
            out[[c, t]] = st.offsets[c] + st.scales[c] * mixed + cfg.noise_sd * e;
        }
    }
    out
}

fn ssl_windows(cfg: &SyntheticConfig, st: &Structure, alpha: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let theta = [alpha, 1.0 - alpha, 1.0];
    Array2::from_shape_fn((cfg.ssl_windows, cfg.ssl_dim), |(_, e)| {
        let clean: f64 = (0..THETA_DIM).map(|j| st.projection[[e, j]] * theta[j]).sum();
        let noise: f64 = StandardNormal.sample(rng);
        clean + cfg.noise_sd * noise
    })
}

/// Writes a synthetic corpus under `out_dir` (`tv/`, `ssl/` and
/// `manifest.json`) and returns its manifest, rooted at `out_dir`.
pub fn synth_dataset(config: &SyntheticConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    for sub in ["tv", "ssl"] {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let st = Structure::draw(config);
    let [lo, hi] = config.severity_range;
    let mut sessions = Vec::new();
    for subj in 0..config.n_subjects {
        let subject_id = format!("S{:03}", subj + 1);
        let mut subj_rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[1, subj as u64]));
        let base = subj_rng.random_range(lo..=hi) as i64;
        for sess in 0..config.sessions_per_subject {
            let session_id = format!("V{}", sess + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[2, subj as u64, sess as u64]));
            let jitter = rng.random_range(-SESSION_JITTER..=SESSION_JITTER);
            let severity = (base + jitter).clamp(lo as i64, hi as i64) as u32;
            let alpha = coupling_strength(severity as f64, config.coupling_gain);
            let mut segments = Vec::new();
            for index in 0..config.segments_per_session {
                let stem = format!("{subject_id}_{session_id}_{index}.fmat");
                let tv_rel = format!("tv/{stem}");
                let ssl_rel = format!("ssl/{stem}");
                let mut meta = Map::new();
                meta.insert("frame_rate".into(), json!(config.frame_rate));
                let tv = segment_channels(config, &st, alpha, &mut rng);
                write_fmat(out_dir.join(&tv_rel), &FmatArray::from_array2(&tv, Dtype::F32, meta))?;
                let ssl = ssl_windows(config, &st, alpha, &mut rng);
                write_fmat(out_dir.join(&ssl_rel), &FmatArray::from_array2(&ssl, Dtype::F32, Map::new()))?;
                segments.push(SegmentRef {
                    index,
                    tv_path: tv_rel,
                    ssl_path: Some(ssl_rel),
                });
            }
            sessions.push(Session {
                subject_id: subject_id.clone(),
                session_id,
                severity,
                segments,
            });
        }
    }
    let manifest = Manifest::new(sessions, out_dir);
    save_manifest(&manifest, out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_subjects: 8,
            sessions_per_subject: 2,
            segments_per_session: 3,
            segment_seconds: 2.0,
            seed,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn counts_follow_config() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(&small(3), dir.path()).unwrap();
        assert_eq!(m.sessions.len(), 16);
        assert_eq!(m.segment_count(), 48);
        m.validate(true).unwrap();
        let s = &m.sessions[0];
        assert_eq!(m.load_segment(s, &s.segments[0]).unwrap().frames(), 200);
        assert_eq!(m.load_windows(s, &s.segments[0]).unwrap().dim(), 768);
    }

    #[test]
    fn byte_identical_for_fixed_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_dataset(&small(5), a.path()).unwrap();
        synth_dataset(&small(5), b.path()).unwrap();
        for rel in ["manifest.json", "tv/S003_V2_1.fmat", "ssl/S008_V1_2.fmat"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
    }

    #[test]
    fn coupling_decreases_with_severity() {
        let mut prev = f64::INFINITY;
        for s in SEVERITY_MIN..=SEVERITY_MAX {
            let a = coupling_strength(s as f64, 1.0);
            assert!(a < prev);
            prev = a;
        }
        assert_eq!(coupling_strength(126.0, 5.0), 0.0);
        assert_eq!(coupling_strength(18.0, 1.0), 0.5);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small(0);
        c.severity_range = [10, 50];
        assert!(c.validate().is_err());
        c = small(0);
        c.ssl_dim = 512;
        assert!(c.validate().is_err());
        c = small(0);
        c.n_subjects = 0;
        assert!(c.validate().is_err());
    }
}
