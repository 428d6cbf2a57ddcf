//! Synthetic parallel silent/vocalized corpus and manifest handling.
//!
//! Each vocabulary word has a fixed per-channel EMG activation template and a
//! two-tone audio signature. A vocalized utterance concatenates word templates
//! on a shared timeline; its silent counterpart is a monotone time-warp of the
//! vocalized EMG with a random gain.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{read_emg, write_emg};
use crate::error::{Error, Result};
use crate::signals::{frame_starts, EmgRecording, FramingConfig, SpeechMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelTemplate {
    pub freq_hz: f64,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordTemplate {
    pub channels: Vec<ChannelTemplate>,
    /// Audio signature: two sinusoids.
    pub tones_hz: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_utterances: usize,
    pub vocab: Vec<String>,
    /// Filled from `vocab` and `seed` when empty.
    pub phoneme_map: BTreeMap<String, WordTemplate>,
    /// Scales the random rate variation of the silent time-warp, the silent
    /// duration change and the per-channel silent gains. 0 leaves the EMG untouched.
    pub time_warp_strength: f64,
    pub noise_sigma: f64,
    pub sessions: usize,
    pub channels: usize,
    pub emg_rate_hz: f64,
    pub audio_rate_hz: f64,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_utterances: 20,
            vocab: ["yes", "no", "up", "down", "left", "right", "stop", "go"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            phoneme_map: BTreeMap::new(),
            time_warp_strength: 0.3,
            noise_sigma: 0.02,
            sessions: 2,
            channels: 8,
            emg_rate_hz: 1000.0,
            audio_rate_hz: 16_000.0,
            min_words: 1,
            max_words: 3,
        }
    }
}

const LEAD_S: f64 = 0.1;
const GAP_S: f64 = 0.06;

/// Samples are stored with six decimals.
fn quantize(x: f64) -> f64 {
    let q = (x * 1e6).round() / 1e6;
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

impl SynthConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.vocab.is_empty() {
            out.push("corpus.vocab must not be empty".to_string());
        }
        let mut seen = HashSet::new();
        for w in &self.vocab {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                out.push(format!("corpus.vocab entry `{w}` must be a single non-empty word"));
            }
            if !seen.insert(w) {
                out.push(format!("corpus.vocab entry `{w}` is duplicated"));
            }
        }
        if self.sessions == 0 {
            out.push("corpus.sessions must be >= 1".to_string());
        }
        if self.channels == 0 {
            out.push("corpus.channels must be >= 1".to_string());
        }
        if !(self.time_warp_strength >= 0.0 && self.time_warp_strength <= 1.0) {
            out.push(format!(
                "corpus.time_warp_strength must be in [0, 1] (got {})",
                self.time_warp_strength
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            out.push(format!("corpus.noise_sigma must be >= 0 (got {})", self.noise_sigma));
        }
        if !(self.emg_rate_hz > 0.0) || !(self.audio_rate_hz > 0.0) {
            out.push("corpus sample rates must be > 0".to_string());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            out.push(format!(
                "corpus.min_words / max_words must satisfy 1 <= min <= max (got {} / {})",
                self.min_words, self.max_words
            ));
        }
        for (w, t) in &self.phoneme_map {
            if t.channels.len() != self.channels {
                out.push(format!(
                    "corpus.phoneme_map `{w}` has {} channel templates, expected {}",
                    t.channels.len(),
                    self.channels
                ));
            }
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

    /// Templates for every vocabulary word, taking explicit entries from
    /// `phoneme_map` and generating the rest from the seed.
    pub fn templates(&self) -> Result<Vec<WordTemplate>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let nyquist = self.audio_rate_hz / 2.0;
        let mut out = Vec::with_capacity(self.vocab.len());
        for (i, w) in self.vocab.iter().enumerate() {
            let generated = WordTemplate {
                channels: (0..self.channels)
                    .map(|_| ChannelTemplate {
                        freq_hz: rng.gen_range(15.0..90.0),
                        amplitude: rng.gen_range(0.3..1.0),
                        phase: rng.gen_range(0.0..2.0 * PI),
                    })
                    .collect(),
                tones_hz: [
                    (300.0 + 170.0 * i as f64).min(0.45 * nyquist),
                    (1500.0 + 430.0 * i as f64).min(0.9 * nyquist),
                ],
            };
            out.push(self.phoneme_map.get(w).cloned().unwrap_or(generated));
        }
        Ok(out)
    }
}

fn word_duration_s(word: &str) -> f64 {
    0.18 + 0.04 * word.chars().count() as f64
}

fn hann_env(pos: f64, len: f64) -> f64 {
    0.5 - 0.5 * (2.0 * PI * pos / len).cos()
}

/// One generated utterance, held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub utterance_id: String,
    pub session_id: String,
    pub words: Vec<String>,
    pub vocal: EmgRecording,
    pub silent: EmgRecording,
    pub audio: EmgRecording,
    /// Vocalized sample position (fractional) of every silent sample.
    pub warp: Vec<f64>,
}

impl SynthUtterance {
    pub fn transcript(&self) -> String {
        self.words.join(" ")
    }
}

/// Vocalized feature frame paired with each silent feature frame under the
/// generator's warp, matching frame centres.
pub fn ground_truth_frames(
    warp: &[f64],
    silent_len: usize,
    vocal_len: usize,
    sample_rate_hz: f64,
    framing: &FramingConfig,
) -> Vec<usize> {
    let (frame_len, silent_starts) = frame_starts(silent_len, sample_rate_hz, framing);
    let (_, vocal_starts) = frame_starts(vocal_len, sample_rate_hz, framing);
    let half = (frame_len as f64 - 1.0) / 2.0;
    silent_starts
        .iter()
        .map(|&s| {
            let centre = (s as f64 + half).min(warp.len() as f64 - 1.0);
            let lo = centre.floor() as usize;
            let hi = (lo + 1).min(warp.len() - 1);
            let frac = centre - lo as f64;
            let target = warp[lo] * (1.0 - frac) + warp[hi] * frac;
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, &v) in vocal_starts.iter().enumerate() {
                let d = (v as f64 + half - target).abs();
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// Session-specific per-channel gains.
fn session_gains(cfg: &SynthConfig, session: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX - session as u64);
    (0..cfg.channels).map(|_| rng.gen_range(0.8..1.2)).collect()
}

/// Generates utterance `index` using its own random stream.
pub fn synthesize_utterance(cfg: &SynthConfig, templates: &[WordTemplate], index: usize) -> Result<SynthUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let n_words = rng.gen_range(cfg.min_words..=cfg.max_words);
    let word_ids: Vec<usize> = (0..n_words).map(|_| rng.gen_range(0..cfg.vocab.len())).collect();
    let session = index % cfg.sessions;
    let gains = session_gains(cfg, session);

    // word segments on a shared timeline, in seconds
    let mut segments = Vec::with_capacity(n_words);
    let mut t = LEAD_S;
    for &w in &word_ids {
        let d = word_duration_s(&cfg.vocab[w]);
        segments.push((w, t, d));
        t += d + GAP_S;
    }
    let total_s = t - GAP_S + LEAD_S;

    let n_emg = (total_s * cfg.emg_rate_hz).round() as usize;
    let mut vocal = Array2::<f64>::zeros((cfg.channels, n_emg));
    for &(w, start, dur) in &segments {
        let s0 = (start * cfg.emg_rate_hz).round() as usize;
        let len = (dur * cfg.emg_rate_hz).round() as usize;
        for (c, tmpl) in templates[w].channels.iter().enumerate() {
            for k in 0..len.min(n_emg.saturating_sub(s0)) {
                let tt = k as f64 / cfg.emg_rate_hz;
                vocal[[c, s0 + k]] += gains[c]
                    * tmpl.amplitude
                    * hann_env(k as f64, len as f64)
                    * (2.0 * PI * tmpl.freq_hz * tt + tmpl.phase).sin();
            }
        }
    }
    let clean = vocal.clone();
    if cfg.noise_sigma > 0.0 {
        vocal.mapv_inplace(|v| v + cfg.noise_sigma * standard_normal(&mut rng));
    }
    vocal.mapv_inplace(quantize);

    let n_audio = (total_s * cfg.audio_rate_hz).round() as usize;
    let mut audio = Array2::<f64>::zeros((1, n_audio));
    for &(w, start, dur) in &segments {
        let s0 = (start * cfg.audio_rate_hz).round() as usize;
        let len = (dur * cfg.audio_rate_hz).round() as usize;
        let [f1, f2] = templates[w].tones_hz;
        for k in 0..len.min(n_audio.saturating_sub(s0)) {
            let tt = k as f64 / cfg.audio_rate_hz;
            audio[[0, s0 + k]] += 0.4
                * hann_env(k as f64, len as f64)
                * ((2.0 * PI * f1 * tt).sin() + 0.6 * (2.0 * PI * f2 * tt).sin());
        }
    }
    audio.mapv_inplace(quantize);

    let (warp, gain) = silent_warp(cfg, n_emg, &mut rng);
    let n_silent = warp.len();
    let mut silent = Array2::<f64>::zeros((cfg.channels, n_silent));
    for (s, &g) in warp.iter().enumerate() {
        let lo = g.floor() as usize;
        let hi = (lo + 1).min(n_emg - 1);
        let frac = g - lo as f64;
        for c in 0..cfg.channels {
            let v = if frac == 0.0 {
                clean[[c, lo]]
            } else {
                clean[[c, lo]] * (1.0 - frac) + clean[[c, hi]] * frac
            };
            silent[[c, s]] = v * gain[c];
        }
    }
    if cfg.noise_sigma > 0.0 {
        silent.mapv_inplace(|v| v + cfg.noise_sigma * standard_normal(&mut rng));
    }
    silent.mapv_inplace(quantize);

    let utterance_id = format!("utt{index:04}");
    let session_id = format!("sess{session}");
    Ok(SynthUtterance {
        words: word_ids.iter().map(|&w| cfg.vocab[w].clone()).collect(),
        vocal: EmgRecording::new(vocal, cfg.emg_rate_hz, &session_id, &utterance_id, SpeechMode::Vocalized)?,
        silent: EmgRecording::new(silent, cfg.emg_rate_hz, &session_id, &utterance_id, SpeechMode::Silent)?,
        audio: EmgRecording::new(audio, cfg.audio_rate_hz, &session_id, &utterance_id, SpeechMode::Vocalized)?,
        utterance_id,
        session_id,
        warp,
    })
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Monotone map from silent samples to vocalized positions, plus per-channel silent gains.
/// Rates are `exp(strength * r(t))` for a smooth random `r`, integrated and
/// rescaled so the first and last samples line up.
fn silent_warp(cfg: &SynthConfig, n_vocal: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let s = cfg.time_warp_strength;
    let stretch = 1.0 + s * rng.gen_range(-0.5..0.5);
    let gain: Vec<f64> = (0..cfg.channels).map(|_| (2.0 * s * rng.gen_range(-1.0..1.0)).exp()).collect();
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.5..3.0), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.5..1.0)))
        .collect();
    if s == 0.0 {
        return ((0..n_vocal).map(|i| i as f64).collect(), gain);
    }
    let n_silent = ((n_vocal as f64 * stretch).round() as usize).max(2);
    let duration = n_silent as f64 / cfg.emg_rate_hz;
    let rate = |i: usize| {
        let t = i as f64 / cfg.emg_rate_hz / duration;
        let r: f64 = waves.iter().map(|(f, p, a)| a * (2.0 * PI * f * t + p).sin()).sum();
        (s * 1.5 * r / 3.0).exp()
    };
    let mut pos = Vec::with_capacity(n_silent);
    let mut acc = 0.0;
    pos.push(0.0);
    for i in 1..n_silent {
        acc += rate(i);
        pos.push(acc);
    }
    let scale = (n_vocal - 1) as f64 / acc;
    let last = n_silent - 1;
    let warp = pos
        .into_iter()
        .enumerate()
        .map(|(i, p)| if i == last { (n_vocal - 1) as f64 } else { (p * scale).min((n_vocal - 1) as f64) })
        .collect();
    (warp, gain)
}

pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<SynthUtterance>> {
    let templates = cfg.templates()?;
    (0..cfg.n_utterances)
        .map(|i| synthesize_utterance(cfg, &templates, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub session_id: String,
    pub transcript: String,
    /// Empty for vocalized-only entries.
    pub silent_emg_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocal_emg_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
    pub mode: SpeechMode,
}

/// Entries plus the directory relative paths are resolved against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn get(&self, utterance_id: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.utterance_id == utterance_id)
            .ok_or_else(|| Error::Lookup(format!("utterance `{utterance_id}` is not in the manifest")))
    }

    pub fn sessions(&self) -> Vec<String> {
        let mut s: Vec<String> = self.entries.iter().map(|e| e.session_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn silent_emg(&self, e: &ManifestEntry) -> Result<EmgRecording> {
        read_emg(&self.resolve(&e.silent_emg_path))
    }

    pub fn vocal_emg(&self, e: &ManifestEntry) -> Result<Option<EmgRecording>> {
        e.vocal_emg_path.as_deref().map(|p| read_emg(&self.resolve(p))).transpose()
    }

    /// Mono audio stored in the recording container.
    pub fn audio(&self, e: &ManifestEntry) -> Result<Option<(Vec<f64>, f64)>> {
        e.audio_path
            .as_deref()
            .map(|p| {
                let rec = read_emg(&self.resolve(p))?;
                if rec.channels() != 1 {
                    return Err(Error::Ingestion {
                        entry: e.utterance_id.clone(),
                        detail: format!("audio file has {} channels, expected 1", rec.channels()),
                    });
                }
                Ok((rec.channel(0).to_vec(), rec.sample_rate_hz))
            })
            .transpose()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            let fail = |detail: String| Error::Ingestion {
                entry: e.utterance_id.clone(),
                detail,
            };
            if e.utterance_id.is_empty() {
                return Err(fail("empty utterance_id".into()));
            }
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(fail("duplicate utterance_id".into()));
            }
            let mut files: Vec<(&str, &str)> = Vec::new();
            match e.mode {
                SpeechMode::Silent => {
                    if e.silent_emg_path.is_empty() {
                        return Err(fail("silent entry without silent_emg_path".into()));
                    }
                }
                SpeechMode::Vocalized => {
                    if e.vocal_emg_path.is_none() || e.audio_path.is_none() {
                        return Err(fail("vocalized entry needs vocal_emg_path and audio_path".into()));
                    }
                }
            }
            if !e.silent_emg_path.is_empty() {
                files.push(("silent_emg_path", &e.silent_emg_path));
            }
            if let Some(p) = &e.vocal_emg_path {
                files.push(("vocal_emg_path", p));
            }
            if let Some(p) = &e.audio_path {
                files.push(("audio_path", p));
            }
            for (field, rel) in files {
                let path = self.resolve(rel);
                if !path.is_file() {
                    return Err(fail(format!("{field} `{}` does not exist", path.display())));
                }
            }
        }
        Ok(())
    }
}

pub fn manifest_to_string(entries: &[ManifestEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(manifest_to_string(entries)?.as_bytes())?;
    Ok(())
}

/// Reads and validates a line-delimited manifest; referenced files must exist.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("utterance_id").and_then(|u| u.as_str()).map(str::to_string))
                .unwrap_or_else(|| format!("line {}", n + 1));
            Error::Ingestion {
                entry: id,
                detail: e.to_string(),
            }
        })?;
        entries.push(entry);
    }
    let manifest = CorpusManifest {
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        entries,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Writes every utterance under `dir` (`emg/`, `audio/`, `manifest.jsonl`) and
/// returns the manifest.
pub fn generate_corpus(cfg: &SynthConfig, dir: &Path) -> Result<CorpusManifest> {
    let utts = synthesize(cfg)?;
    fs::create_dir_all(dir.join("emg"))?;
    fs::create_dir_all(dir.join("audio"))?;
    let mut entries = Vec::with_capacity(utts.len());
    for u in &utts {
        let silent = format!("emg/{}_silent.emg", u.utterance_id);
        let vocal = format!("emg/{}_vocal.emg", u.utterance_id);
        let audio = format!("audio/{}.audio", u.utterance_id);
        write_emg(&dir.join(&silent), &u.silent)?;
        write_emg(&dir.join(&vocal), &u.vocal)?;
        write_emg(&dir.join(&audio), &u.audio)?;
        entries.push(ManifestEntry {
            utterance_id: u.utterance_id.clone(),
            session_id: u.session_id.clone(),
            transcript: u.transcript(),
            silent_emg_path: silent,
            vocal_emg_path: Some(vocal),
            audio_path: Some(audio),
            mode: SpeechMode::Silent,
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &entries)?;
    Ok(CorpusManifest {
        base_dir: dir.to_path_buf(),
        entries,
    })
}
