//! EMG front end: band-limiting, framing and the per-frame descriptor set.
//!
//! Each channel is low-passed with a triangular FIR, cut into 31 ms frames
//! every 11.6 ms, and summarised by five time-domain descriptors plus nine
//! averaged 16-point DFT magnitudes, i.e. 14 values per channel and frame.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of time-domain descriptors per channel and frame.
pub const TD_DESCRIPTORS: usize = 5;
const TD_NAMES: [&str; TD_DESCRIPTORS] = ["rms", "mean", "energy", "abs", "zcr"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeechMode {
    Silent,
    Vocalized,
}

impl SpeechMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SpeechMode::Silent => "silent",
            SpeechMode::Vocalized => "vocalized",
        }
    }
}

impl std::str::FromStr for SpeechMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silent" => Ok(SpeechMode::Silent),
            "vocalized" => Ok(SpeechMode::Vocalized),
            other => Err(Error::param(format!("unknown speech mode `{other}`"))),
        }
    }
}

/// A multichannel recording. `samples` is channels x T.
#[derive(Debug, Clone, PartialEq)]
pub struct EmgRecording {
    samples: Array2<f64>,
    pub sample_rate_hz: f64,
    pub session_id: String,
    pub utterance_id: String,
    pub mode: SpeechMode,
}

impl EmgRecording {
    pub fn new(
        samples: Array2<f64>,
        sample_rate_hz: f64,
        session_id: impl Into<String>,
        utterance_id: impl Into<String>,
        mode: SpeechMode,
    ) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::param("recording needs at least one channel"));
        }
        if samples.ncols() == 0 {
            return Err(Error::empty("recording has no samples"));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::param(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("recording contains non-finite samples"));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
            session_id: session_id.into(),
            utterance_id: utterance_id.into(),
            mode,
        })
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> ArrayView1<'_, f64> {
        self.samples.row(c)
    }
}

/// Frames x dims matrix with a label per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
    dim_labels: Vec<String>,
    pub frame_stride_s: f64,
    pub frame_length_s: f64,
}

impl FeatureMatrix {
    pub fn new(
        data: Array2<f64>,
        dim_labels: Vec<String>,
        frame_stride_s: f64,
        frame_length_s: f64,
    ) -> Result<Self> {
        if data.ncols() != dim_labels.len() {
            return Err(Error::param(format!(
                "{} dims but {} labels",
                data.ncols(),
                dim_labels.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("feature matrix contains NaN or Inf"));
        }
        if !(frame_stride_s > 0.0 && frame_length_s > 0.0) {
            return Err(Error::param("frame stride and length must be positive"));
        }
        Ok(Self {
            data,
            dim_labels,
            frame_stride_s,
            frame_length_s,
        })
    }

    /// Labels `d0..d{n-1}` and unit timing; handy for ad-hoc matrices.
    pub fn unlabeled(data: Array2<f64>) -> Result<Self> {
        let labels = (0..data.ncols()).map(|d| format!("d{d}")).collect();
        Self::new(data, labels, 1.0, 1.0)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn dim_labels(&self) -> &[String] {
        &self.dim_labels
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dims(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FramingConfig {
    pub frame_length_s: f64,
    pub frame_stride_s: f64,
    pub filter_cutoff_hz: f64,
    pub stft_points: usize,
}

impl Default for FramingConfig {
    fn default() -> Self {
        Self {
            frame_length_s: 0.031,
            frame_stride_s: 0.0116,
            filter_cutoff_hz: 115.0,
            stft_points: 16,
        }
    }
}

impl FramingConfig {
    /// Every violated invariant, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.frame_length_s > 0.0) {
            out.push(format!("framing.frame_length_s must be > 0 (got {})", self.frame_length_s));
        }
        if !(self.frame_stride_s > 0.0) {
            out.push(format!("framing.frame_stride_s must be > 0 (got {})", self.frame_stride_s));
        }
        if !(self.filter_cutoff_hz > 0.0) {
            out.push(format!("framing.filter_cutoff_hz must be > 0 (got {})", self.filter_cutoff_hz));
        }
        if self.stft_points < 2 || self.stft_points % 2 != 0 {
            out.push(format!("framing.stft_points must be even and >= 2 (got {})", self.stft_points));
        }
        if self.frame_length_s < self.frame_stride_s {
            out.push("framing.frame_length_s must be >= framing.frame_stride_s".to_string());
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

    /// Dimensions produced per channel: 5 descriptors + stft_points/2 + 1 bins.
    pub fn dims_per_channel(&self) -> usize {
        TD_DESCRIPTORS + self.stft_points / 2 + 1
    }
}

/// Unit-area symmetric triangular taps whose first spectral null is near `cutoff_hz`.
pub fn triangular_kernel(sample_rate_hz: f64, cutoff_hz: f64) -> Result<Vec<f64>> {
    if !(sample_rate_hz > 0.0) || !(cutoff_hz > 0.0) {
        return Err(Error::param(format!(
            "sample rate and cutoff must be positive (fs={sample_rate_hz}, cutoff={cutoff_hz})"
        )));
    }
    if sample_rate_hz <= 2.0 * cutoff_hz {
        return Err(Error::param(format!(
            "cutoff {cutoff_hz} Hz is at or above Nyquist for fs={sample_rate_hz}"
        )));
    }
    let half = (sample_rate_hz / cutoff_hz).round() as usize;
    let len = 2 * half - 1;
    let area = (half * half) as f64;
    Ok((0..len)
        .map(|k| (half - k.abs_diff(half - 1)) as f64 / area)
        .collect())
}

/// Same-length, centre-aligned convolution with the triangular kernel.
///
/// Taps that fall outside the signal are dropped and the remaining weights
/// renormalised, so DC passes with unit gain right up to the edges.
pub fn triangular_filter(signal: &[f64], sample_rate_hz: f64, cutoff_hz: f64) -> Result<Vec<f64>> {
    let kernel = triangular_kernel(sample_rate_hz, cutoff_hz)?;
    if signal.is_empty() {
        return Err(Error::empty("cannot filter an empty signal"));
    }
    let centre = (kernel.len() - 1) / 2;
    let n = signal.len() as isize;
    Ok((0..n)
        .map(|i| {
            let (mut acc, mut weight) = (0.0, 0.0);
            for (k, &w) in kernel.iter().enumerate() {
                let j = i + k as isize - centre as isize;
                if (0..n).contains(&j) {
                    acc += w * signal[j as usize];
                    weight += w;
                }
            }
            if weight == 1.0 {
                acc
            } else {
                acc / weight
            }
        })
        .collect())
}

/// Frame length and start offsets in samples for a signal of `len` samples.
pub fn frame_starts(len: usize, sample_rate_hz: f64, cfg: &FramingConfig) -> (usize, Vec<usize>) {
    let frame_len = (cfg.frame_length_s * sample_rate_hz).round() as usize;
    let mut starts = Vec::new();
    for k in 0.. {
        let start = (k as f64 * cfg.frame_stride_s * sample_rate_hz).round() as usize;
        if start + frame_len > len {
            break;
        }
        starts.push(start);
    }
    (frame_len, starts)
}

pub fn frame_signal(signal: &[f64], sample_rate_hz: f64, cfg: &FramingConfig) -> Result<Vec<Vec<f64>>> {
    if !(sample_rate_hz > 0.0) {
        return Err(Error::param("sample rate must be positive"));
    }
    cfg.validate()?;
    let (frame_len, starts) = frame_starts(signal.len(), sample_rate_hz, cfg);
    if frame_len == 0 {
        return Err(Error::param("frame length rounds to zero samples"));
    }
    if starts.is_empty() {
        return Err(Error::empty(format!(
            "signal of {} samples is shorter than one {frame_len}-sample frame",
            signal.len()
        )));
    }
    Ok(starts
        .into_iter()
        .map(|s| signal[s..s + frame_len].to_vec())
        .collect())
}

/// `[rms, mean, energy, mean |x|, zero-crossing rate]` of one frame.
pub fn td_descriptors(frame: &[f64]) -> Result<[f64; TD_DESCRIPTORS]> {
    if frame.is_empty() {
        return Err(Error::empty("descriptor frame is empty"));
    }
    let n = frame.len() as f64;
    let energy: f64 = frame.iter().map(|x| x * x).sum();
    let mean = frame.iter().sum::<f64>() / n;
    let abs_mean = frame.iter().map(|x| x.abs()).sum::<f64>() / n;
    // a crossing needs a strict sign change; zeros never count
    let zcr = if frame.len() < 2 {
        0.0
    } else {
        let crossings = frame.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
        crossings as f64 / (n - 1.0)
    };
    Ok([(energy / n).sqrt(), mean, energy, abs_mean, zcr])
}

/// Averaged DFT magnitudes of rectangular `stft_points` windows with half-window hop.
///
/// Returns bins `0..=stft_points/2`.
pub fn stft16_mags(frame: &[f64], stft_points: usize) -> Result<Vec<f64>> {
    if stft_points < 2 || stft_points % 2 != 0 {
        return Err(Error::param(format!("stft_points must be even and >= 2, got {stft_points}")));
    }
    if frame.len() < stft_points {
        return Err(Error::param(format!(
            "frame of {} samples is shorter than the {stft_points}-point window",
            frame.len()
        )));
    }
    let bins = stft_points / 2 + 1;
    let hop = stft_points / 2;
    let twiddles: Vec<(f64, f64)> = (0..stft_points)
        .map(|t| {
            let a = -2.0 * PI * t as f64 / stft_points as f64;
            (a.cos(), a.sin())
        })
        .collect();
    let mut acc = vec![0.0; bins];
    let mut windows = 0usize;
    let mut start = 0;
    while start + stft_points <= frame.len() {
        let win = &frame[start..start + stft_points];
        for (k, slot) in acc.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &x) in win.iter().enumerate() {
                let (c, s) = twiddles[(k * t) % stft_points];
                re += x * c;
                im += x * s;
            }
            *slot += re.hypot(im);
        }
        windows += 1;
        start += hop;
    }
    Ok(acc.into_iter().map(|v| v / windows as f64).collect())
}

/// Dimension labels `ch{c}_{feature}` for a recording with `channels` channels.
pub fn feature_labels(channels: usize, cfg: &FramingConfig) -> Vec<String> {
    let bins = cfg.stft_points / 2 + 1;
    (0..channels)
        .flat_map(|c| {
            TD_NAMES
                .iter()
                .map(move |n| format!("ch{c}_{n}"))
                .chain((0..bins).map(move |b| format!("ch{c}_stft{b}")))
        })
        .collect()
}

/// Full per-recording featurisation: `channels x 14` dims per frame for the default config.
pub fn featurize_recording(rec: &EmgRecording, cfg: &FramingConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let per_channel = cfg.dims_per_channel();
    let (_, starts) = frame_starts(rec.len(), rec.sample_rate_hz, cfg);
    let frames = starts.len();
    let mut data = Array2::zeros((frames, rec.channels() * per_channel));
    for c in 0..rec.channels() {
        let raw = rec.channel(c).to_vec();
        let filtered = triangular_filter(&raw, rec.sample_rate_hz, cfg.filter_cutoff_hz)?;
        let framed = frame_signal(&filtered, rec.sample_rate_hz, cfg)?;
        for (f, frame) in framed.iter().enumerate() {
            let td = td_descriptors(frame)?;
            let mags = stft16_mags(frame, cfg.stft_points)?;
            let mut row = data.row_mut(f);
            let base = c * per_channel;
            for (d, v) in td.iter().chain(mags.iter()).enumerate() {
                row[base + d] = *v;
            }
        }
    }
    FeatureMatrix::new(
        data,
        feature_labels(rec.channels(), cfg),
        cfg.frame_stride_s,
        cfg.frame_length_s,
    )
}
