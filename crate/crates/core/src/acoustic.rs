//! Log-mel spectrogram targets: Hann-windowed power spectra pooled by a
//! triangular mel filterbank, floored and log-compressed.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate_hz: f64,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000.0,
            n_fft: 512,
            hop: 186,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.sample_rate_hz > 0.0) {
            out.push(format!("mel.sample_rate_hz must be > 0 (got {})", self.sample_rate_hz));
        }
        if self.n_fft < 2 {
            out.push(format!("mel.n_fft must be >= 2 (got {})", self.n_fft));
        }
        if self.hop < 1 {
            out.push("mel.hop must be >= 1".to_string());
        }
        if self.n_mels < 1 {
            out.push("mel.n_mels must be >= 1".to_string());
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz) {
            out.push(format!(
                "mel.fmin_hz must satisfy 0 <= fmin < fmax (got {} / {})",
                self.fmin_hz, self.fmax_hz
            ));
        }
        if self.fmax_hz > self.sample_rate_hz / 2.0 {
            out.push(format!(
                "mel.fmax_hz {} exceeds Nyquist {}",
                self.fmax_hz,
                self.sample_rate_hz / 2.0
            ));
        }
        if !(self.log_floor > 0.0) {
            out.push("mel.log_floor must be > 0".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::param(v.join("; ")))
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

pub fn hz_to_mel(hz: f64) -> Result<f64> {
    if !(hz >= 0.0) {
        return Err(Error::param(format!("frequency must be >= 0, got {hz}")));
    }
    Ok(2595.0 * (1.0 + hz / 700.0).log10())
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// The `n_mels + 2` edge/centre frequencies (Hz), equally spaced in mel.
pub fn mel_points_hz(cfg: &MelConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let lo = hz_to_mel(cfg.fmin_hz)?;
    let hi = hz_to_mel(cfg.fmax_hz)?;
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    Ok((0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect())
}

/// Centre frequency (Hz) of every band.
pub fn band_centers_hz(cfg: &MelConfig) -> Result<Vec<f64>> {
    let pts = mel_points_hz(cfg)?;
    Ok(pts[1..pts.len() - 1].to_vec())
}

/// `n_mels x (n_fft/2 + 1)` triangular filterbank, each row scaled to a peak of 1.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Array2<f64>> {
    let pts = mel_points_hz(cfg)?;
    let bin_hz = cfg.sample_rate_hz / cfg.n_fft as f64;
    let mut fb = Array2::zeros((cfg.n_mels, cfg.n_bins()));
    for m in 0..cfg.n_mels {
        let (lo, c, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        let mut row = fb.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0);
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(Error::param(format!(
                "mel band {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; reduce n_mels or raise n_fft"
            )));
        }
        row.mapv_inplace(|w| w / peak);
    }
    Ok(fb)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub data: Array2<f64>,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.data.ncols()
    }

    /// Stores the spectrogram as a feature matrix labelled by band centre (Hz).
    pub fn to_features(&self) -> Result<FeatureMatrix> {
        let labels = band_centers_hz(&self.config)?
            .into_iter()
            .map(|c| format!("{c:.3}"))
            .collect();
        FeatureMatrix::new(
            self.data.clone(),
            labels,
            self.config.hop as f64 / self.config.sample_rate_hz,
            self.config.n_fft as f64 / self.config.sample_rate_hz,
        )
    }

    pub fn from_features(m: &FeatureMatrix, config: MelConfig) -> Result<Self> {
        if m.dims() != config.n_mels {
            return Err(Error::param(format!(
                "feature matrix has {} dims, config expects {} mel bands",
                m.dims(),
                config.n_mels
            )));
        }
        Ok(Self {
            data: m.data().clone(),
            config,
        })
    }
}

pub fn frame_count(len: usize, cfg: &MelConfig) -> usize {
    if len < cfg.n_fft {
        0
    } else {
        1 + (len - cfg.n_fft) / cfg.hop
    }
}

pub fn log_mel(audio: &[f64], cfg: &MelConfig) -> Result<MelSpectrogram> {
    let fb = mel_filterbank(cfg)?;
    if audio.len() < cfg.n_fft {
        return Err(Error::empty(format!(
            "audio of {} samples is shorter than n_fft={}",
            audio.len(),
            cfg.n_fft
        )));
    }
    let frames = frame_count(audio.len(), cfg);
    let window = hann(cfg.n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let floor_log = cfg.log_floor.ln();
    let mut data = Array2::zeros((frames, cfg.n_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0.0; cfg.n_bins()];
    for f in 0..frames {
        let start = f * cfg.hop;
        for (slot, (x, w)) in buf
            .iter_mut()
            .zip(audio[start..start + cfg.n_fft].iter().zip(&window))
        {
            *slot = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            data[[f, m]] = if e > cfg.log_floor { e.ln() } else { floor_log };
        }
    }
    Ok(MelSpectrogram { data, config: *cfg })
}
