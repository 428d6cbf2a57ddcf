//! Pipeline configuration: TOML file merged over built-in defaults, with
//! model presets and whole-config validation.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ssr_core::acoustic::MelConfig;
use ssr_core::align::AttConfig;
use ssr_core::corpus::SynthConfig;
use ssr_core::correction::FilterConfig;
use ssr_core::nn::{LossKind, TrainConfig, TransformerConfig};
use ssr_core::signals::FramingConfig;
use toml::{Table, Value};

pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

/// Keys that may be absent from the serialized defaults because their default is `None`.
const OPTIONAL_KEYS: [&str; 3] = [
    "transducer.train.clip_norm",
    "asr.train.clip_norm",
    "correction.domain_lexicon",
];

/// Per-stage seeds are derived from the top-level seed and may not be set directly.
const DERIVED_SEEDS: [&str; 5] = [
    "corpus.seed",
    "transducer.model.seed",
    "transducer.train.seed",
    "asr.model.seed",
    "asr.train.seed",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub preset: String,
    pub model: TransformerConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub provider: String,
    pub endpoint: String,
    pub timeout_s: f64,
    pub retries: usize,
    pub n_candidates: usize,
    #[serde(flatten)]
    pub filter: FilterConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub beam_width: usize,
    pub max_len: usize,
    pub length_norm: bool,
    pub n_best: usize,
    pub corpus: SynthConfig,
    pub framing: FramingConfig,
    pub mel: MelConfig,
    pub att: AttConfig,
    pub transducer: StageConfig,
    pub asr: StageConfig,
    pub correction: CorrectionConfig,
}

/// Every problem found while loading, one message per violated rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} configuration problem(s):", self.0.len())?;
        for v in &self.0 {
            write!(f, "\n  - {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// Laptop-scale model shapes used by the default configuration.
pub fn pipeline_preset(stage: &str) -> TransformerConfig {
    TransformerConfig {
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        n_enc_layers: 2,
        n_dec_layers: if stage == "asr" { 2 } else { 0 },
        dropout: 0.1,
        relpos_clip: 16,
        session_dim: 4,
        seed: 0,
    }
}

fn preset(stage: &str, name: &str) -> Result<TransformerConfig, String> {
    match name {
        "pipeline" => Ok(pipeline_preset(stage)),
        other => TransformerConfig::preset(other).map_err(|_| {
            format!("{stage}.preset: unknown preset `{other}` (expected pipeline, transduction, recognition or toy)")
        }),
    }
}

fn get_path<'a>(table: &'a Table, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

/// Overlays `user` onto `base`, recording keys that `base` does not know.
fn merge(base: &mut Table, user: &Table, prefix: &str, unknown: &mut Vec<String>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u, &path, unknown),
            (Some(slot), _) => *slot = v.clone(),
            (None, _) if OPTIONAL_KEYS.contains(&path.as_str()) => {
                base.insert(k.clone(), v.clone());
            }
            (None, _) => unknown.push(format!("unknown key `{path}`")),
        }
    }
}

fn base_config() -> PipelineConfig {
    let stage = |name: &str| StageConfig {
        preset: "pipeline".into(),
        model: pipeline_preset(name),
        train: TrainConfig::default(),
        loss: LossKind::Euclidean,
    };
    PipelineConfig {
        seed: 0,
        beam_width: 500,
        max_len: 48,
        length_norm: false,
        n_best: 5,
        corpus: SynthConfig::default(),
        framing: FramingConfig::default(),
        mel: MelConfig::default(),
        att: AttConfig::default(),
        transducer: stage("transducer"),
        asr: stage("asr"),
        correction: CorrectionConfig {
            provider: "mock".into(),
            endpoint: "127.0.0.1:7878".into(),
            timeout_s: 10.0,
            retries: 1,
            n_candidates: 3,
            filter: FilterConfig::default(),
        },
    }
}

impl PipelineConfig {
    /// Built-in defaults, then the shipped default file, then `user_text` if any.
    pub fn from_toml(user_text: Option<&str>) -> Result<Self, ConfigErrors> {
        let mut problems = Vec::new();
        let mut layers = vec![DEFAULT_CONFIG.parse::<Table>().expect("shipped config parses")];
        if let Some(text) = user_text {
            match text.parse::<Table>() {
                Ok(t) => layers.push(t),
                Err(e) => return Err(ConfigErrors(vec![format!("config is not valid TOML: {e}")])),
            }
        }
        let user = layers.last().expect("at least the shipped layer");
        for key in DERIVED_SEEDS {
            if user_text.is_some() && get_path(user, key).is_some() {
                problems.push(format!("`{key}` is derived from the top-level `seed`; remove it"));
            }
        }

        let mut cfg = base_config();
        for stage in ["transducer", "asr"] {
            let name = layers
                .iter()
                .rev()
                .find_map(|l| get_path(l, &format!("{stage}.preset")).and_then(Value::as_str))
                .unwrap_or("pipeline")
                .to_string();
            match preset(stage, &name) {
                Ok(model) => {
                    let s = if stage == "asr" { &mut cfg.asr } else { &mut cfg.transducer };
                    s.model = model;
                    s.preset = name;
                }
                Err(e) => problems.push(e),
            }
        }
        let mut table = Table::try_from(&cfg).expect("config serializes");
        for layer in &layers {
            merge(&mut table, layer, "", &mut problems);
        }
        if !problems.is_empty() {
            return Err(ConfigErrors(problems));
        }
        let mut cfg: PipelineConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigErrors(vec![format!("config has a wrongly typed value: {e}")]))?;
        cfg.apply_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let text = match path {
            Some(p) => Some(
                std::fs::read_to_string(p).map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?,
            ),
            None => None,
        };
        Ok(Self::from_toml(text.as_deref())?)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.seed = seed;
        self.transducer.model.seed = seed.wrapping_add(1);
        self.transducer.train.seed = seed.wrapping_add(2);
        self.asr.model.seed = seed.wrapping_add(3);
        self.asr.train.seed = seed.wrapping_add(4);
    }

    /// Every violated invariant across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.beam_width == 0 {
            out.push("beam_width must be >= 1".to_string());
        }
        if self.max_len == 0 {
            out.push("max_len must be >= 1".to_string());
        }
        if self.n_best == 0 {
            out.push("n_best must be >= 1".to_string());
        }
        out.extend(self.corpus.violations().into_iter().map(|v| prefixed("corpus", v)));
        out.extend(self.framing.violations().into_iter().map(|v| prefixed("framing", v)));
        out.extend(self.mel.violations().into_iter().map(|v| prefixed("mel", v)));
        if self.att.cca_k == 0 {
            out.push("att.cca_k must be >= 1".to_string());
        }
        if !(self.att.ridge >= 0.0) {
            out.push(format!("att.ridge must be >= 0 (got {})", self.att.ridge));
        }
        if self.mel.sample_rate_hz != self.corpus.audio_rate_hz {
            out.push(format!(
                "mel.sample_rate_hz ({}) must equal corpus.audio_rate_hz ({})",
                self.mel.sample_rate_hz, self.corpus.audio_rate_hz
            ));
        }
        for (name, stage) in [("transducer", &self.transducer), ("asr", &self.asr)] {
            out.extend(stage.model.violations(&format!("{name}.model")));
            if stage.train.steps == 0 {
                out.push(format!("{name}.train.steps must be >= 1"));
            }
            if stage.train.batch_size == 0 {
                out.push(format!("{name}.train.batch_size must be >= 1"));
            }
            if !(stage.train.adam.lr > 0.0) {
                out.push(format!("{name}.train.adam.lr must be > 0 (got {})", stage.train.adam.lr));
            }
            if let Some(c) = stage.train.clip_norm {
                if !(c > 0.0) {
                    out.push(format!("{name}.train.clip_norm must be > 0 (got {c})"));
                }
            }
        }
        if self.asr.model.n_dec_layers == 0 {
            out.push("asr.model.n_dec_layers must be >= 1".to_string());
        }
        out.extend(self.correction.filter.violations("correction"));
        if !["mock", "remote"].contains(&self.correction.provider.as_str()) {
            out.push(format!(
                "correction.provider must be mock or remote (got `{}`)",
                self.correction.provider
            ));
        }
        if !(self.correction.timeout_s > 0.0) || !self.correction.timeout_s.is_finite() {
            out.push(format!("correction.timeout_s must be > 0 (got {})", self.correction.timeout_s));
        }
        if self.correction.n_candidates == 0 {
            out.push("correction.n_candidates must be >= 1".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(v))
        }
    }
}

fn prefixed(section: &str, msg: String) -> String {
    if msg.starts_with(&format!("{section}.")) {
        msg
    } else {
        format!("{section}: {msg}")
    }
}
