//! Encoder-only EMG-to-mel transducer and its training loop.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::config::TransformerConfig;
use super::layers::{add_encoder_stack, add_linear, encoder_stack, linear, Ctx};
use super::params::{Grads, ParamSet, TensorRecord};
use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Per-column affine normalisation, `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dims: usize) -> Self {
        Self {
            mean: vec![0.0; dims],
            std: vec![1.0; dims],
        }
    }

    /// Column statistics pooled over every row of every matrix.
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a Mat>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut rows = 0usize;
        for m in mats {
            if sum.is_empty() {
                sum = vec![0.0; m.ncols()];
                sq = vec![0.0; m.ncols()];
            } else if sum.len() != m.ncols() {
                return Err(Error::param("matrices disagree on column count"));
            }
            for row in m.rows() {
                for (c, v) in row.iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            rows += m.nrows();
        }
        if rows == 0 {
            return Err(Error::empty("cannot fit a standardizer on zero rows"));
        }
        let n = rows as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var.sqrt() > 1e-8 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Mean over frames of the per-frame Euclidean distance.
    #[default]
    Euclidean,
    /// Mean squared error over every entry.
    Mse,
}

/// Plain-matrix form of the transduction losses.
pub fn transduction_loss(pred: &Mat, target: &Mat, kind: LossKind) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::param(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dim(),
            target.dim()
        )));
    }
    let diff = pred - target;
    Ok(match kind {
        LossKind::Euclidean => {
            diff.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / diff.nrows() as f64
        }
        LossKind::Mse => diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64,
    })
}

fn tape_loss(tape: &mut Tape<'_>, pred: Var, target: &Mat, kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::Euclidean => tape.euclidean_loss(pred, target),
        LossKind::Mse => tape.mse_loss(pred, target),
    }
}

/// EMG features (frames x d_in) to mel frames (frames x d_out).
#[derive(Debug, Clone, PartialEq)]
pub struct Transducer {
    pub config: TransformerConfig,
    pub d_in: usize,
    pub d_out: usize,
    pub sessions: Vec<String>,
    pub input_norm: Standardizer,
    /// Maps network outputs back to mel units.
    pub output_norm: Standardizer,
    pub params: ParamSet,
}

impl Transducer {
    pub fn new(config: TransformerConfig, d_in: usize, d_out: usize, sessions: Vec<String>) -> Result<Self> {
        config.validate()?;
        if d_in == 0 || d_out == 0 {
            return Err(Error::param("input and output widths must be >= 1"));
        }
        if sessions.is_empty() {
            return Err(Error::param("at least one session is required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let d = config.d_model;
        add_linear(&mut params, &mut rng, "in_proj", d_in, d);
        params.add_uniform("session.table", sessions.len(), config.session_dim, config.session_dim, &mut rng);
        params.add_uniform("session.proj", config.session_dim, d, config.session_dim, &mut rng);
        add_encoder_stack(&mut params, &mut rng, "enc", &config);
        add_linear(&mut params, &mut rng, "out_proj", d, d_out);
        Ok(Self {
            config,
            d_in,
            d_out,
            input_norm: Standardizer::identity(d_in),
            output_norm: Standardizer::identity(d_out),
            sessions,
            params,
        })
    }

    pub fn session_index(&self, session: &str) -> Result<usize> {
        self.sessions
            .iter()
            .position(|s| s == session)
            .ok_or_else(|| Error::Lookup(format!("unknown session `{session}`")))
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.nrows() == 0 {
            return Err(Error::empty("transducer input has no frames"));
        }
        if x.ncols() != self.d_in {
            return Err(Error::param(format!(
                "transducer expects {} input dims, got {}",
                self.d_in,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Encoder output (frames x d_model) on `tape`.
    pub fn encode_var(&self, tape: &mut Tape<'_>, ctx: &mut Ctx, x: &Mat, session: usize) -> Result<Var> {
        self.check_input(x)?;
        if session >= self.sessions.len() {
            return Err(Error::Lookup(format!("session index {session} out of range")));
        }
        let input = tape.input(self.input_norm.apply(x));
        let mut h = linear(tape, input, "in_proj")?;
        let table = tape.param_named("session.table")?;
        let emb = tape.gather_rows(table, &[session]);
        let proj = tape.param_named("session.proj")?;
        let emb = tape.matmul(emb, proj);
        h = tape.add_row(h, emb);
        let h = ctx.dropout(tape, h);
        encoder_stack(tape, ctx, h, "enc", &self.config)
    }

    pub fn predict_var(&self, tape: &mut Tape<'_>, ctx: &mut Ctx, x: &Mat, session: usize) -> Result<Var> {
        let h = self.encode_var(tape, ctx, x, session)?;
        let y = linear(tape, h, "out_proj")?;
        Ok(tape.col_affine(y, &self.output_norm.std, &self.output_norm.mean))
    }

    /// Encoder output in eval mode.
    pub fn encode(&self, x: &Mat, session: &str) -> Result<Mat> {
        let s = self.session_index(session)?;
        let mut tape = Tape::new(&self.params);
        let h = self.encode_var(&mut tape, &mut Ctx::eval(), x, s)?;
        Ok(tape.value(h).clone())
    }

    /// Predicted mel frames in eval mode.
    pub fn predict(&self, x: &Mat, session: &str) -> Result<Mat> {
        let s = self.session_index(session)?;
        let mut tape = Tape::new(&self.params);
        let y = self.predict_var(&mut tape, &mut Ctx::eval(), x, s)?;
        Ok(tape.value(y).clone())
    }

    pub fn loss_and_grads(
        &self,
        x: &Mat,
        target: &Mat,
        session: usize,
        kind: LossKind,
        ctx: &mut Ctx,
    ) -> Result<(f64, Grads)> {
        let mut tape = Tape::new(&self.params);
        let y = self.predict_var(&mut tape, ctx, x, session)?;
        let loss = tape_loss(&mut tape, y, target, kind)?;
        Ok((tape.scalar(loss), tape.backward(loss)?))
    }

    pub fn to_checkpoint(&self) -> TransducerCheckpoint {
        TransducerCheckpoint {
            kind: "transducer".into(),
            config: self.config,
            d_in: self.d_in,
            d_out: self.d_out,
            sessions: self.sessions.clone(),
            input_norm: self.input_norm.clone(),
            output_norm: self.output_norm.clone(),
            tensors: self.params.to_records(),
        }
    }

    pub fn from_checkpoint(ck: TransducerCheckpoint) -> Result<Self> {
        if ck.kind != "transducer" {
            return Err(Error::param(format!("checkpoint kind `{}` is not a transducer", ck.kind)));
        }
        let mut model = Transducer::new(ck.config, ck.d_in, ck.d_out, ck.sessions)?;
        let params = ParamSet::from_records(&ck.tensors)?;
        if !params.same_layout(&model.params) {
            return Err(Error::param("checkpoint tensors do not match the configured architecture"));
        }
        if ck.input_norm.dims() != ck.d_in || ck.output_norm.dims() != ck.d_out {
            return Err(Error::param("checkpoint normalisers do not match model widths"));
        }
        model.params = params;
        model.input_norm = ck.input_norm;
        model.output_norm = ck.output_norm;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: TransducerCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_checkpoint(ck)
    }
}

/// Self-describing checkpoint: architecture, session table and named tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransducerCheckpoint {
    pub kind: String,
    pub config: TransformerConfig,
    pub d_in: usize,
    pub d_out: usize,
    pub sessions: Vec<String>,
    pub input_norm: Standardizer,
    pub output_norm: Standardizer,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub adam: AdamConfig,
    pub loss: LossKind,
    pub seed: u64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
    /// Utterances averaged into each Adam step.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            adam: AdamConfig::default(),
            loss: LossKind::Euclidean,
            seed: 0,
            clip_norm: Some(5.0),
            batch_size: 1,
        }
    }
}

/// One utterance: EMG features, mel target (true or transferred) and session.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub features: Mat,
    pub target: Mat,
    pub session: String,
}

/// Visits items in a fresh seeded permutation every epoch.
pub(crate) struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn next(&mut self) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

pub(crate) fn clip_grads(grads: &mut Grads, clip: Option<f64>) {
    if let Some(limit) = clip {
        let norm = grads.global_norm();
        if norm > limit {
            grads.scale(limit / norm);
        }
    }
}

/// Mean loss over `items` in eval mode.
pub fn corpus_loss(model: &Transducer, items: &[TrainItem], kind: LossKind) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::empty("no items to score"));
    }
    let mut total = 0.0;
    for it in items {
        total += transduction_loss(&model.predict(&it.features, &it.session)?, &it.target, kind)?;
    }
    Ok(total / items.len() as f64)
}

/// Trains in place, one utterance per Adam step. Returns the per-step losses.
pub fn train_transducer(model: &mut Transducer, items: &[TrainItem], tc: &TrainConfig) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::empty("training corpus is empty"));
    }
    let sessions = items
        .iter()
        .map(|it| model.session_index(&it.session))
        .collect::<Result<Vec<_>>>()?;
    for it in items {
        if it.features.nrows() != it.target.nrows() {
            return Err(Error::param(format!(
                "item has {} feature frames but {} target frames",
                it.features.nrows(),
                it.target.nrows()
            )));
        }
        if it.target.ncols() != model.d_out {
            return Err(Error::param(format!(
                "target width {} does not match model output {}",
                it.target.ncols(),
                model.d_out
            )));
        }
    }
    let dropout = model.config.dropout;
    run_training(
        model,
        items.len(),
        tc,
        dropout,
        |m, i, ctx| m.loss_and_grads(&items[i].features, &items[i].target, sessions[i], tc.loss, ctx),
        |m| &mut m.params,
    )
}

/// Shared Adam loop: each step averages loss and gradients over `tc.batch_size` sampled items.
pub(crate) fn run_training<M>(
    model: &mut M,
    n_items: usize,
    tc: &TrainConfig,
    dropout: f64,
    item_grads: impl Fn(&M, usize, &mut Ctx) -> Result<(f64, Grads)>,
    params: fn(&mut M) -> &mut ParamSet,
) -> Result<Vec<f64>> {
    if tc.batch_size == 0 {
        return Err(Error::param("batch_size must be >= 1"));
    }
    let mut state = AdamState::new(params(model), tc.adam);
    let mut sampler = EpochSampler::new(n_items, tc.seed);
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut total = 0.0;
        let mut acc: Option<Grads> = None;
        for b in 0..tc.batch_size {
            let i = sampler.next();
            let stream = (step * tc.batch_size + b) as u64;
            let mut ctx = Ctx::train(dropout, tc.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (loss, grads) = item_grads(model, i, &mut ctx)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDivergence {
                    step,
                    detail: format!("loss became {loss}"),
                });
            }
            total += loss;
            match acc.as_mut() {
                Some(a) => a.add_assign(&grads),
                None => acc = Some(grads),
            }
        }
        let mut grads = acc.expect("batch_size >= 1");
        if tc.batch_size > 1 {
            grads.scale(1.0 / tc.batch_size as f64);
        }
        clip_grads(&mut grads, tc.clip_norm);
        adam_step(params(model), &grads, &mut state).map_err(|e| match e {
            Error::TrainingDivergence { detail, .. } => Error::TrainingDivergence { step, detail },
            other => other,
        })?;
        losses.push(total / tc.batch_size as f64);
    }
    Ok(losses)
}

/// Mean over `window` consecutive values, one per full window.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
