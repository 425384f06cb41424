//! Synthetic paired signals, feature extraction, levels and clip filtering.
//!
//! A pair shares one smooth latent trajectory. Each role maps the latent
//! through its own fixed non-negative linear map, adds role-specific noise,
//! and uses the result to drive the amplitudes of a bank of harmonic
//! partials. Features are log amplitudes of the same partials measured over
//! non-overlapping frames, so they depend on the waveform (and on any noise
//! added to it) rather than on the latent directly.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Frequency spacing of the partial bank. Frames at 50 Hz and 75 Hz both hold
/// a whole number of periods of every partial.
pub const PARTIAL_SPACING_HZ: f64 = 150.0;
const CONTROL_RATE_HZ: u32 = 150;
const LOG_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl Waveform {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Self {
            sample_rate,
            samples,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Frame-level feature vectors at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStream {
    pub frame_rate: u32,
    /// `[frames, dim]`.
    pub frames: Tensor,
}

impl FeatureStream {
    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub seed: u64,
    pub vocal: Waveform,
    pub vocal_features: FeatureStream,
    pub instrumental: Waveform,
    pub instrumental_features: FeatureStream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub sample_rate: u32,
    /// Number of partials, which is also the feature dimension.
    pub feature_dim: usize,
    pub latent_dim: usize,
    /// Correlation time of the shared latent, seconds.
    pub latent_tau_s: f64,
    /// Standard deviation of the per-role drive noise.
    pub role_noise: f64,
    /// Peak amplitude of a single partial.
    pub partial_amp: f64,
    /// Instrumental gain relative to the vocal is drawn uniformly from this
    /// range, in dB.
    pub instrumental_gain_db: (f64, f64),
    /// Seed of the two fixed role maps, shared by every pair.
    pub map_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            feature_dim: 16,
            latent_dim: 4,
            latent_tau_s: 0.06,
            role_noise: 0.35,
            partial_amp: 0.08,
            instrumental_gain_db: (-6.0, 4.0),
            map_seed: 0x5eed,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.sample_rate % CONTROL_RATE_HZ != 0 {
            return Err(Error::invalid(format!(
                "sample rate {} must be a positive multiple of {CONTROL_RATE_HZ}",
                self.sample_rate
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.feature_dim == 0 || PARTIAL_SPACING_HZ * self.feature_dim as f64 >= nyquist {
            return Err(Error::invalid(format!(
                "feature_dim {} does not fit below Nyquist at {} Hz",
                self.feature_dim, self.sample_rate
            )));
        }
        if self.latent_dim == 0 || self.latent_tau_s <= 0.0 || self.role_noise < 0.0 || self.partial_amp <= 0.0 {
            return Err(Error::invalid("latent_dim, latent_tau_s and partial_amp must be positive"));
        }
        let (lo, hi) = self.instrumental_gain_db;
        if !(lo <= hi) {
            return Err(Error::invalid("instrumental_gain_db must be an ordered range"));
        }
        Ok(())
    }

    fn partial_freq(&self, k: usize) -> f64 {
        PARTIAL_SPACING_HZ * (k + 1) as f64
    }

    /// The fixed `[feature_dim, latent_dim]` maps for (vocal, instrumental).
    fn role_maps(&self) -> (Vec<f64>, Vec<f64>) {
        let mut r = rng::stream(self.map_seed, "role-maps");
        let scale = 1.0 / (self.latent_dim as f64).sqrt();
        let mut draw = || -> Vec<f64> {
            (0..self.feature_dim * self.latent_dim)
                .map(|_| r.gen_range(0.0..1.0) * scale * 2.0)
                .collect()
        };
        let v = draw();
        let i = draw();
        (v, i)
    }
}

/// Generate one aligned (vocal, instrumental) pair.
pub fn synth_pair(seed: u64, duration_s: f64, cfg: &SynthConfig) -> Result<PairExample> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::invalid(format!("duration must be positive, got {duration_s}")));
    }
    cfg.validate()?;
    let sr = cfg.sample_rate;
    let n_samples = (duration_s * sr as f64).round() as usize;
    let hop = (sr / CONTROL_RATE_HZ) as usize;
    let n_ctrl = n_samples / hop + 2;

    // Shared latent: unit-variance AR(1) at the control rate.
    let mut lat_rng = rng::stream(seed, "latent");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rho = (-1.0 / (CONTROL_RATE_HZ as f64 * cfg.latent_tau_s)).exp();
    let innov = (1.0 - rho * rho).sqrt();
    let mut latent = vec![0.0; n_ctrl * cfg.latent_dim];
    for c in 0..cfg.latent_dim {
        let mut z: f64 = normal.sample(&mut lat_rng);
        for n in 0..n_ctrl {
            latent[n * cfg.latent_dim + c] = z;
            z = rho * z + innov * normal.sample(&mut lat_rng);
        }
    }

    let (map_v, map_i) = cfg.role_maps();
    let mut gain_rng = rng::stream(seed, "gain");
    let (lo, hi) = cfg.instrumental_gain_db;
    let instr_gain_db = if hi > lo { gain_rng.gen_range(lo..hi) } else { lo };
    let instr_gain = 10f64.powf(instr_gain_db / 20.0);

    let render = |map: &[f64], role: &str, gain: f64| -> Result<Waveform> {
        let mut noise_rng = rng::stream(seed, role);
        let d = cfg.feature_dim;
        let l = cfg.latent_dim;
        // Partial amplitudes at control frames.
        let mut amps = vec![0.0; n_ctrl * d];
        for n in 0..n_ctrl {
            let z = &latent[n * l..(n + 1) * l];
            for k in 0..d {
                let drive: f64 = map[k * l..(k + 1) * l].iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
                    + cfg.role_noise * normal.sample(&mut noise_rng);
                amps[n * d + k] = cfg.partial_amp / (1.0 + (-2.0 * drive).exp());
            }
        }
        let phases: Vec<f64> = (0..d).map(|_| noise_rng.gen_range(0.0..2.0 * PI)).collect();
        let mut samples = vec![0.0; n_samples];
        for (s, out) in samples.iter_mut().enumerate() {
            let n = s / hop;
            let frac = (s % hop) as f64 / hop as f64;
            let t = s as f64 / sr as f64;
            let mut acc = 0.0;
            for k in 0..d {
                let a = amps[n * d + k] * (1.0 - frac) + amps[(n + 1) * d + k] * frac;
                acc += a * (2.0 * PI * cfg.partial_freq(k) * t + phases[k]).sin();
            }
            *out = gain * acc;
        }
        Waveform::new(sr, samples)
    };

    let vocal = render(&map_v, "vocal", 1.0)?;
    let instrumental = render(&map_i, "instrumental", instr_gain)?;
    let vocal_features = extract_features(&vocal, 50, cfg.feature_dim)?;
    let instrumental_features = extract_features(&instrumental, 50, cfg.feature_dim)?;
    Ok(PairExample {
        seed,
        vocal,
        vocal_features,
        instrumental,
        instrumental_features,
    })
}

/// Log partial amplitudes over non-overlapping frames at `frame_rate`.
///
/// Produces `floor(duration · frame_rate)` frames of `dim` features; feature
/// `k` measures the partial at `150 · (k + 1)` Hz.
pub fn extract_features(w: &Waveform, frame_rate: u32, dim: usize) -> Result<FeatureStream> {
    if frame_rate == 0 || w.sample_rate % frame_rate != 0 {
        return Err(Error::invalid(format!(
            "frame rate {frame_rate} must divide sample rate {}",
            w.sample_rate
        )));
    }
    let hop = (w.sample_rate / frame_rate) as usize;
    let n_frames = w.samples.len() / hop;
    let sr = w.sample_rate as f64;
    // Basis tables for one frame; frame starts are whole periods apart only
    // up to phase, which the magnitude discards.
    let basis: Vec<(Vec<f64>, Vec<f64>)> = (0..dim)
        .map(|k| {
            let f = PARTIAL_SPACING_HZ * (k + 1) as f64;
            let cos = (0..hop).map(|s| (2.0 * PI * f * s as f64 / sr).cos()).collect();
            let sin = (0..hop).map(|s| (2.0 * PI * f * s as f64 / sr).sin()).collect();
            (cos, sin)
        })
        .collect();
    let mut data = vec![0.0; n_frames * dim];
    for (fr, row) in data.chunks_mut(dim.max(1)).enumerate().take(n_frames) {
        let x = &w.samples[fr * hop..(fr + 1) * hop];
        for (k, (cos, sin)) in basis.iter().enumerate() {
            let c: f64 = x.iter().zip(cos).map(|(a, b)| a * b).sum();
            let s: f64 = x.iter().zip(sin).map(|(a, b)| a * b).sum();
            let amp = 2.0 / hop as f64 * (c * c + s * s).sqrt();
            row[k] = (amp + LOG_FLOOR).ln();
        }
    }
    Ok(FeatureStream {
        frame_rate,
        frames: Tensor::new(vec![n_frames, dim], data)?,
    })
}

/// Resynthesize a waveform from log partial amplitudes, with amplitudes held
/// per frame and linearly crossfaded between frame centres.
pub fn render_features(features: &FeatureStream, sample_rate: u32) -> Result<Waveform> {
    let rate = features.frame_rate;
    if rate == 0 || sample_rate % rate != 0 {
        return Err(Error::invalid(format!("frame rate {rate} must divide {sample_rate}")));
    }
    let hop = (sample_rate / rate) as usize;
    let (n, dim) = features.frames.dims2()?;
    let amps: Vec<f64> = features
        .frames
        .data()
        .iter()
        .map(|f| (f.exp() - LOG_FLOOR).max(0.0))
        .collect();
    let mut samples = vec![0.0; n * hop];
    for (s, out) in samples.iter_mut().enumerate() {
        let pos = (s as f64 + 0.5) / hop as f64 - 0.5;
        let f0 = pos.floor().clamp(0.0, (n - 1) as f64) as usize;
        let f1 = (f0 + 1).min(n - 1);
        let frac = (pos - f0 as f64).clamp(0.0, 1.0);
        let t = s as f64 / sample_rate as f64;
        let mut acc = 0.0;
        for k in 0..dim {
            let a = amps[f0 * dim + k] * (1.0 - frac) + amps[f1 * dim + k] * frac;
            acc += a * (2.0 * PI * PARTIAL_SPACING_HZ * (k + 1) as f64 * t).sin();
        }
        *out = acc;
    }
    Waveform::new(sample_rate, samples)
}

/// Add i.i.d. `N(0, σ²)` noise drawn from `seed`.
pub fn add_noise(w: &Waveform, sigma: f64, seed: u64) -> Result<Waveform> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(w.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut r = rng::stream(seed, "noise");
    let samples = w.samples.iter().map(|&s| s + normal.sample(&mut r)).collect();
    Waveform::new(w.sample_rate, samples)
}

/// Signal level in dB RMS. Digital silence is a dedicated variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Level {
    Silent,
    Db(f64),
}

impl Level {
    /// Finite dB value, or `None` for silence.
    pub fn db(self) -> Option<f64> {
        match self {
            Level::Silent => None,
            Level::Db(v) => Some(v),
        }
    }
}

pub fn rms_db(w: &Waveform) -> Result<Level> {
    if w.samples.is_empty() {
        return Err(Error::invalid("rms of an empty waveform"));
    }
    let ms = w.samples.iter().map(|s| s * s).sum::<f64>() / w.samples.len() as f64;
    if ms == 0.0 {
        return Ok(Level::Silent);
    }
    Ok(Level::Db(10.0 * ms.log10()))
}

/// Instrumental below this level counts as silent.
pub const SILENCE_THRESHOLD_DB: f64 = -25.0;
/// Maximum allowed excess of vocal over instrumental level.
pub const MAX_VOCAL_EXCESS_DB: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    SilentInstrumental,
    VocalDominant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipDecision {
    Keep,
    Reject(RejectReason),
}

/// Decision from the two levels alone.
pub fn filter_levels(vocal: Level, instrumental: Level) -> ClipDecision {
    let instr = match instrumental {
        Level::Silent => return ClipDecision::Reject(RejectReason::SilentInstrumental),
        Level::Db(v) if v < SILENCE_THRESHOLD_DB => {
            return ClipDecision::Reject(RejectReason::SilentInstrumental)
        }
        Level::Db(v) => v,
    };
    match vocal {
        Level::Db(v) if v - instr > MAX_VOCAL_EXCESS_DB => ClipDecision::Reject(RejectReason::VocalDominant),
        _ => ClipDecision::Keep,
    }
}

pub fn filter_clip(vocal: &Waveform, instrumental: &Waveform) -> Result<ClipDecision> {
    if vocal.samples.len() != instrumental.samples.len() || vocal.sample_rate != instrumental.sample_rate {
        return Err(Error::invalid(format!(
            "duration mismatch: {:.3} s vs {:.3} s",
            vocal.duration_s(),
            instrumental.duration_s()
        )));
    }
    Ok(filter_levels(rms_db(vocal)?, rms_db(instrumental)?))
}
