use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Mono PCM audio with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be > 0".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Log-mel frames, one row per hop.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFeatures {
    pub frames: Matrix,
    pub hop_seconds: f64,
}

impl MelFeatures {
    pub fn new(frames: Matrix, hop_seconds: f64) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::InvalidInput("features need at least one frame".into()));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("features contain non-finite values".into()));
        }
        Ok(Self { frames, hop_seconds })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    /// Window length in samples (25 ms at 16 kHz).
    pub n_fft: usize,
    /// Hop in samples (10 ms at 16 kHz).
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Mel energies are clamped to this before `log10`.
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 400,
            hop: 160,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8_000.0,
            floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn log_floor(&self) -> f64 {
        self.floor.log10()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * (logstep * (m - min_log_mel)).exp()
    } else {
        f_sp * m
    }
}

/// Slaney-style triangular filters (`n_mels × (n_fft/2 + 1)`), area-normalised.
pub fn mel_filterbank(cfg: &MelConfig) -> Matrix {
    let n_bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    Matrix::from_shape_fn((cfg.n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let lower = (f - pts[m]) / (pts[m + 1] - pts[m]);
        let upper = (pts[m + 2] - f) / (pts[m + 2] - pts[m + 1]);
        let w = lower.min(upper).max(0.0);
        w * 2.0 / (pts[m + 2] - pts[m])
    })
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Samples of frame `i`: centred on `i * hop`, zero outside the signal.
pub fn frame_samples(samples: &[f32], i: usize, cfg: &MelConfig) -> Vec<f64> {
    let start = (i * cfg.hop) as isize - (cfg.n_fft / 2) as isize;
    (0..cfg.n_fft as isize)
        .map(|j| {
            let t = start + j;
            if t >= 0 && (t as usize) < samples.len() {
                samples[t as usize] as f64
            } else {
                0.0
            }
        })
        .collect()
}

/// Log-mel front end. Deterministic; produces `ceil(len / hop)` frames.
pub struct FeatureExtractor {
    cfg: MelConfig,
    filters: Matrix,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl FeatureExtractor {
    pub fn new(cfg: MelConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Self {
            filters: mel_filterbank(&cfg),
            window: hann(cfg.n_fft),
            fft,
            cfg,
        }
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filters(&self) -> &Matrix {
        &self.filters
    }

    pub fn extract(&self, w: &Waveform) -> Result<MelFeatures> {
        if w.samples.is_empty() {
            return Err(Error::InvalidInput("empty waveform".into()));
        }
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::InvalidInput(format!(
                "expected {} Hz audio, got {} Hz (resample first)",
                self.cfg.sample_rate, w.sample_rate
            )));
        }
        let n_frames = w.samples.len().div_ceil(self.cfg.hop);
        let n_bins = self.cfg.n_fft / 2 + 1;
        let mut power = Matrix::zeros((n_bins, n_frames));
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        for i in 0..n_frames {
            let frame = frame_samples(&w.samples, i, &self.cfg);
            for (b, (x, h)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex::new(x * h, 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..n_bins {
                power[[k, i]] = buf[k].norm_sqr();
            }
        }
        let floor = self.cfg.floor;
        let mel = self.filters.dot(&power).t().mapv(|v| v.max(floor).log10());
        MelFeatures::new(mel, self.cfg.hop as f64 / self.cfg.sample_rate as f64)
    }
}

/// Convenience wrapper with the default 80-mel, 25 ms / 10 ms recipe.
pub fn extract_features(w: &Waveform) -> Result<MelFeatures> {
    FeatureExtractor::new(MelConfig::default()).extract(w)
}
