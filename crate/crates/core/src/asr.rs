//! Character-level encoder-decoder recogniser over log-mel input, with
//! teacher-forced training and beam-search decoding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    add_attention, add_encoder_stack, add_ffn, add_layer_norm, add_linear, encoder_stack, feed_forward, layer_norm,
    linear, multi_head_attention, Ctx,
};
use crate::nn::tape::{causal_mask, Mat, Tape, Var};
use crate::nn::transducer::run_training;
use crate::nn::{Grads, ParamSet, Standardizer, TensorRecord, TrainConfig, TransformerConfig};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    bos: usize,
    eos: usize,
    pad: Option<usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Tokens must be unique and include [`BOS`] and [`EOS`]; [`PAD`] is optional.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token `{t}`")));
            }
        }
        let find = |t: &str| index.get(t).copied();
        let bos = find(BOS).ok_or_else(|| Error::Vocabulary("missing <bos>".into()))?;
        let eos = find(EOS).ok_or_else(|| Error::Vocabulary("missing <eos>".into()))?;
        let pad = find(PAD);
        Ok(Self {
            tokens,
            index,
            bos,
            eos,
            pad,
        })
    }

    /// `<pad>`, `<bos>`, `<eos>` followed by the distinct characters in sorted order.
    pub fn characters(chars: impl IntoIterator<Item = char>) -> Self {
        let mut set: Vec<char> = chars.into_iter().collect();
        set.sort_unstable();
        set.dedup();
        let tokens = [PAD, BOS, EOS]
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().map(String::from))
            .collect();
        Self::new(tokens).expect("specials are unique and present")
    }

    pub fn printable_ascii() -> Self {
        Self::characters((0x20u8..0x7f).map(char::from))
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::characters(texts.into_iter().flat_map(str::chars))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> usize {
        self.bos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn pad(&self) -> Option<usize> {
        self.pad
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocabulary(format!("token id {id} out of range")))
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.bos || id == self.eos || Some(id) == self.pad
    }

    /// `[BOS, c1, ..., cn, EOS]`
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = vec![self.bos];
        let mut buf = [0u8; 4];
        for c in text.chars() {
            let id = self
                .id(c.encode_utf8(&mut buf))
                .ok_or_else(|| Error::Vocabulary(format!("character {c:?} is not in the vocabulary")))?;
            out.push(id);
        }
        out.push(self.eos);
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id)?;
            if !self.is_special(id) {
                out.push_str(tok);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Starts with BOS; ends with EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens, excluding the leading BOS.
    pub fn generated(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }
}

/// Encoder-decoder recogniser.
#[derive(Debug, Clone, PartialEq)]
pub struct AsrModel {
    pub config: TransformerConfig,
    pub n_mels: usize,
    pub vocab: Vocabulary,
    pub input_norm: Standardizer,
    pub params: ParamSet,
}

impl AsrModel {
    pub fn new(config: TransformerConfig, n_mels: usize, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if config.n_dec_layers == 0 {
            return Err(Error::param("the recogniser needs at least one decoder layer"));
        }
        if n_mels == 0 {
            return Err(Error::param("n_mels must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let d = config.d_model;
        add_linear(&mut params, &mut rng, "enc_in", n_mels, d);
        add_encoder_stack(&mut params, &mut rng, "enc", &config);
        params.add_uniform("tok_emb", vocab.len(), d, d, &mut rng);
        for l in 0..config.n_dec_layers {
            let p = format!("dec.{l}");
            add_layer_norm(&mut params, &format!("{p}.ln1"), d);
            add_attention(&mut params, &mut rng, &format!("{p}.self"), &config, true);
            add_layer_norm(&mut params, &format!("{p}.ln2"), d);
            add_attention(&mut params, &mut rng, &format!("{p}.cross"), &config, false);
            add_layer_norm(&mut params, &format!("{p}.ln3"), d);
            add_ffn(&mut params, &mut rng, &format!("{p}.ffn"), &config);
        }
        add_layer_norm(&mut params, "dec.ln_f", d);
        add_linear(&mut params, &mut rng, "out", d, vocab.len());
        Ok(Self {
            config,
            n_mels,
            input_norm: Standardizer::identity(n_mels),
            vocab,
            params,
        })
    }

    fn check_mel(&self, mel: &Mat) -> Result<()> {
        if mel.nrows() == 0 {
            return Err(Error::empty("mel input has no frames"));
        }
        if mel.ncols() != self.n_mels {
            return Err(Error::param(format!(
                "recogniser expects {} mel bands, got {}",
                self.n_mels,
                mel.ncols()
            )));
        }
        Ok(())
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        if prefix.first() != Some(&self.vocab.bos()) {
            return Err(Error::param("decoder prefix must start with <bos>"));
        }
        if let Some(bad) = prefix.iter().find(|t| **t >= self.vocab.len()) {
            return Err(Error::Vocabulary(format!("token id {bad} out of range")));
        }
        Ok(())
    }

    pub fn encode_var(&self, tape: &mut Tape<'_>, ctx: &mut Ctx, mel: &Mat) -> Result<Var> {
        self.check_mel(mel)?;
        let x = tape.input(self.input_norm.apply(mel));
        let h = linear(tape, x, "enc_in")?;
        let h = ctx.dropout(tape, h);
        encoder_stack(tape, ctx, h, "enc", &self.config)
    }

    /// Decoder logits, one row per prefix position.
    pub fn decode_var(&self, tape: &mut Tape<'_>, ctx: &mut Ctx, enc: Var, prefix: &[usize]) -> Result<Var> {
        self.check_prefix(prefix)?;
        let cfg = &self.config;
        let table = tape.param_named("tok_emb")?;
        let mut h = tape.gather_rows(table, prefix);
        h = ctx.dropout(tape, h);
        let mask = causal_mask(prefix.len());
        for l in 0..cfg.n_dec_layers {
            let p = format!("dec.{l}");
            let a = layer_norm(tape, h, &format!("{p}.ln1"))?;
            let a = multi_head_attention(tape, a, a, &format!("{p}.self"), cfg.n_heads, Some(cfg.relpos_clip), Some(&mask))?;
            let a = ctx.dropout(tape, a);
            h = tape.add(h, a);
            let c = layer_norm(tape, h, &format!("{p}.ln2"))?;
            let c = multi_head_attention(tape, c, enc, &format!("{p}.cross"), cfg.n_heads, None, None)?;
            let c = ctx.dropout(tape, c);
            h = tape.add(h, c);
            let f = layer_norm(tape, h, &format!("{p}.ln3"))?;
            let f = feed_forward(tape, f, &format!("{p}.ffn"))?;
            let f = ctx.dropout(tape, f);
            h = tape.add(h, f);
        }
        let h = layer_norm(tape, h, "dec.ln_f")?;
        linear(tape, h, "out")
    }

    /// Encoder output in eval mode.
    pub fn encode(&self, mel: &Mat) -> Result<Mat> {
        let mut tape = Tape::new(&self.params);
        let e = self.encode_var(&mut tape, &mut Ctx::eval(), mel)?;
        Ok(tape.value(e).clone())
    }

    /// Log-probabilities of the next token after `prefix`, given encoder output.
    pub fn next_log_probs(&self, enc: &Mat, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let e = tape.input(enc.clone());
        let logits = self.decode_var(&mut tape, &mut Ctx::eval(), e, prefix)?;
        let lp = tape.log_softmax(logits);
        let out = tape.value(lp);
        Ok(out.row(out.nrows() - 1).to_vec())
    }

    /// Next-token log-softmax for `prefix` given a mel spectrogram.
    pub fn forward(&self, mel: &Mat, prefix: &[usize]) -> Result<Vec<f64>> {
        let enc = self.encode(mel)?;
        self.next_log_probs(&enc, prefix)
    }

    /// Teacher-forced cross-entropy over a full `[BOS, ..., EOS]` token sequence.
    pub fn loss_and_grads(&self, mel: &Mat, tokens: &[usize], ctx: &mut Ctx) -> Result<(f64, Grads)> {
        if tokens.len() < 2 {
            return Err(Error::param("token sequence needs at least <bos> and one target"));
        }
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_var(&mut tape, ctx, mel)?;
        let logits = self.decode_var(&mut tape, ctx, enc, &tokens[..tokens.len() - 1])?;
        let loss = tape.cross_entropy(logits, &tokens[1..])?;
        Ok((tape.scalar(loss), tape.backward(loss)?))
    }

    /// Sum of step log-probabilities of `tokens` (which start with BOS).
    pub fn score(&self, mel: &Mat, tokens: &[usize]) -> Result<f64> {
        let enc = self.encode(mel)?;
        let mut total = 0.0;
        for t in 1..tokens.len() {
            total += self.next_log_probs(&enc, &tokens[..t])?[tokens[t]];
        }
        Ok(total)
    }

    pub fn to_checkpoint(&self) -> AsrCheckpoint {
        AsrCheckpoint {
            kind: "asr".into(),
            config: self.config,
            n_mels: self.n_mels,
            vocab: self.vocab.clone(),
            input_norm: self.input_norm.clone(),
            tensors: self.params.to_records(),
        }
    }

    pub fn from_checkpoint(ck: AsrCheckpoint) -> Result<Self> {
        if ck.kind != "asr" {
            return Err(Error::param(format!("checkpoint kind `{}` is not an asr model", ck.kind)));
        }
        let mut model = AsrModel::new(ck.config, ck.n_mels, ck.vocab)?;
        let params = ParamSet::from_records(&ck.tensors)?;
        if !params.same_layout(&model.params) {
            return Err(Error::param("checkpoint tensors do not match the configured architecture"));
        }
        if ck.input_norm.dims() != ck.n_mels {
            return Err(Error::param("checkpoint normaliser does not match n_mels"));
        }
        model.params = params;
        model.input_norm = ck.input_norm;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrCheckpoint {
    pub kind: String,
    pub config: TransformerConfig,
    pub n_mels: usize,
    pub vocab: Vocabulary,
    pub input_norm: Standardizer,
    pub tensors: Vec<TensorRecord>,
}

/// Anything that yields next-token log-probabilities for a prefix.
pub trait StepScorer {
    fn vocab(&self) -> &Vocabulary;
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// An [`AsrModel`] bound to one utterance's encoder output.
pub struct AsrScorer<'a> {
    model: &'a AsrModel,
    enc: Mat,
}

impl<'a> AsrScorer<'a> {
    pub fn new(model: &'a AsrModel, mel: &Mat) -> Result<Self> {
        Ok(Self {
            model,
            enc: model.encode(mel)?,
        })
    }
}

impl StepScorer for AsrScorer<'_> {
    fn vocab(&self) -> &Vocabulary {
        &self.model.vocab
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.model.next_log_probs(&self.enc, prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
    /// Rank by log-probability per generated token instead of the raw sum.
    pub length_norm: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 500,
            max_len: 64,
            length_norm: false,
        }
    }
}

fn rank_key(h: &Hypothesis, length_norm: bool) -> f64 {
    if length_norm {
        h.log_prob / h.generated().max(1) as f64
    } else {
        h.log_prob
    }
}

fn sort_hyps(hyps: &mut [Hypothesis], length_norm: bool) {
    hyps.sort_by(|a, b| {
        rank_key(b, length_norm)
            .total_cmp(&rank_key(a, length_norm))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Breadth-limited search over `scorer`. The last allowed step only extends with EOS,
/// so at least one finished hypothesis is always returned.
pub fn beam_search(scorer: &impl StepScorer, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if cfg.beam_width == 0 || cfg.max_len == 0 {
        return Err(Error::param("beam_width and max_len must be >= 1"));
    }
    let vocab = scorer.vocab();
    let expandable: Vec<usize> = (0..vocab.len())
        .filter(|&t| t != vocab.bos() && Some(t) != vocab.pad())
        .collect();
    let mut live = vec![Hypothesis {
        tokens: vec![vocab.bos()],
        log_prob: 0.0,
        finished: false,
    }];
    let mut pool = Vec::new();
    for step in 0..cfg.max_len {
        let last = step + 1 == cfg.max_len;
        let mut candidates = Vec::with_capacity(live.len() * expandable.len());
        for h in &live {
            let lp = scorer.log_probs(&h.tokens)?;
            if lp.len() != vocab.len() {
                return Err(Error::param(format!(
                    "scorer returned {} log-probabilities for a vocabulary of {}",
                    lp.len(),
                    vocab.len()
                )));
            }
            for &t in &expandable {
                if last && t != vocab.eos() {
                    continue;
                }
                // impossible continuations are dropped unless EOS is forced
                if lp[t] == f64::NEG_INFINITY && !last {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + lp[t],
                    finished: t == vocab.eos(),
                });
            }
        }
        sort_hyps(&mut candidates, cfg.length_norm);
        candidates.truncate(cfg.beam_width);
        live.clear();
        for c in candidates {
            if c.finished {
                pool.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    sort_hyps(&mut pool, cfg.length_norm);
    Ok(pool)
}

/// Greedy decoding: the arg-max token at every step.
pub fn greedy_decode(scorer: &impl StepScorer, max_len: usize) -> Result<Hypothesis> {
    let vocab = scorer.vocab();
    let mut h = Hypothesis {
        tokens: vec![vocab.bos()],
        log_prob: 0.0,
        finished: false,
    };
    for step in 0..max_len {
        let lp = scorer.log_probs(&h.tokens)?;
        let t = if step + 1 == max_len {
            vocab.eos()
        } else {
            (0..vocab.len())
                .filter(|&t| t != vocab.bos() && Some(t) != vocab.pad())
                .fold(None::<usize>, |best, t| match best {
                    Some(b) if lp[b] >= lp[t] => Some(b),
                    _ => Some(t),
                })
                .expect("vocabulary has EOS")
        };
        h.tokens.push(t);
        h.log_prob += lp[t];
        if t == vocab.eos() {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// One recogniser training example.
#[derive(Debug, Clone, PartialEq)]
pub struct AsrItem {
    pub mel: Mat,
    pub transcript: String,
}

/// Teacher-forced training, one utterance per Adam step. Returns per-step losses.
pub fn train_asr(model: &mut AsrModel, items: &[AsrItem], tc: &TrainConfig) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::empty("recogniser training set is empty"));
    }
    let tokens = items
        .iter()
        .map(|it| model.vocab.tokenize(&it.transcript))
        .collect::<Result<Vec<_>>>()?;
    let dropout = model.config.dropout;
    run_training(
        model,
        items.len(),
        tc,
        dropout,
        |m, i, ctx| m.loss_and_grads(&items[i].mel, &tokens[i], ctx),
        |m| &mut m.params,
    )
}

/// Fixed next-token tables keyed by prefix; used to exercise the search in isolation.
pub struct TableScorer {
    pub vocab: Vocabulary,
    pub table: HashMap<Vec<usize>, Vec<f64>>,
    pub fallback: Vec<f64>,
}

impl StepScorer for TableScorer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.table.get(prefix).cloned().unwrap_or_else(|| self.fallback.clone()))
    }
}
