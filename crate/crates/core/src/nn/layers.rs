//! Transformer building blocks expressed as tape ops, plus the matching
//! parameter registration. Blocks use pre-norm residual ordering.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TransformerConfig;
use super::params::ParamSet;
use super::tape::{Mat, Tape, Var};
use crate::error::Result;

/// Forward-pass mode. Dropout masks come from a seeded stream in training mode.
pub struct Ctx {
    train: bool,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            train: true,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn dropout(&mut self, tape: &mut Tape<'_>, x: Var) -> Var {
        if !self.train || self.dropout == 0.0 {
            return x;
        }
        let keep = 1.0 - self.dropout;
        let dim = tape.value(x).raw_dim();
        let mask = Mat::from_shape_fn((dim[0], dim[1]), |_| {
            if self.rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        tape.mul_const(x, mask)
    }
}

pub fn add_linear(params: &mut ParamSet, rng: &mut impl Rng, prefix: &str, d_in: usize, d_out: usize) {
    params.add_uniform(format!("{prefix}.w"), d_in, d_out, d_in, rng);
    params.add_uniform(format!("{prefix}.b"), 1, d_out, d_in, rng);
}

pub fn add_layer_norm(params: &mut ParamSet, prefix: &str, d: usize) {
    params.add(format!("{prefix}.g"), Mat::ones((1, d)));
    params.add(format!("{prefix}.b"), Mat::zeros((1, d)));
}

pub fn add_attention(params: &mut ParamSet, rng: &mut impl Rng, prefix: &str, cfg: &TransformerConfig, relpos: bool) {
    let d = cfg.d_model;
    for name in ["wq", "wk", "wv", "wo"] {
        params.add_uniform(format!("{prefix}.{name}"), d, d, d, rng);
    }
    if relpos {
        params.add(format!("{prefix}.relpos"), Mat::zeros((cfg.n_heads, 2 * cfg.relpos_clip + 1)));
    }
}

pub fn add_ffn(params: &mut ParamSet, rng: &mut impl Rng, prefix: &str, cfg: &TransformerConfig) {
    add_linear(params, rng, &format!("{prefix}.l1"), cfg.d_model, cfg.d_ff);
    add_linear(params, rng, &format!("{prefix}.l2"), cfg.d_ff, cfg.d_model);
}

/// Registers `n_enc_layers` self-attention blocks under `prefix` plus a final norm.
pub fn add_encoder_stack(params: &mut ParamSet, rng: &mut impl Rng, prefix: &str, cfg: &TransformerConfig) {
    for l in 0..cfg.n_enc_layers {
        let p = format!("{prefix}.{l}");
        add_layer_norm(params, &format!("{p}.ln1"), cfg.d_model);
        add_attention(params, rng, &format!("{p}.attn"), cfg, true);
        add_layer_norm(params, &format!("{p}.ln2"), cfg.d_model);
        add_ffn(params, rng, &format!("{p}.ffn"), cfg);
    }
    add_layer_norm(params, &format!("{prefix}.ln_f"), cfg.d_model);
}

pub fn linear(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param_named(&format!("{prefix}.w"))?;
    let b = tape.param_named(&format!("{prefix}.b"))?;
    let xw = tape.matmul(x, w);
    Ok(tape.add_row(xw, b))
}

pub fn layer_norm(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let g = tape.param_named(&format!("{prefix}.g"))?;
    let b = tape.param_named(&format!("{prefix}.b"))?;
    Ok(tape.layer_norm(x, g, b))
}

pub fn feed_forward(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(tape, x, &format!("{prefix}.l1"))?;
    let h = tape.gelu(h);
    linear(tape, h, &format!("{prefix}.l2"))
}

/// Multi-head attention of `xq` over `xkv`.
///
/// With `relpos_clip`, each head adds its learned relative-position bias to the
/// logits; `mask` marks blocked (query, key) pairs.
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    xq: Var,
    xkv: Var,
    prefix: &str,
    n_heads: usize,
    relpos_clip: Option<usize>,
    mask: Option<&Array2<bool>>,
) -> Result<Var> {
    let wq = tape.param_named(&format!("{prefix}.wq"))?;
    let wk = tape.param_named(&format!("{prefix}.wk"))?;
    let wv = tape.param_named(&format!("{prefix}.wv"))?;
    let wo = tape.param_named(&format!("{prefix}.wo"))?;
    let table = match relpos_clip {
        Some(_) => Some(tape.param_named(&format!("{prefix}.relpos"))?),
        None => None,
    };
    let q = tape.matmul(xq, wq);
    let k = tape.matmul(xkv, wk);
    let v = tape.matmul(xkv, wv);
    let d_model = tape.value(q).ncols();
    let dh = d_model / n_heads;
    let (n, m) = (tape.value(q).nrows(), tape.value(k).nrows());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_t(qh, kh);
        let mut logits = tape.scale(scores, scale);
        if let (Some(t), Some(clip)) = (table, relpos_clip) {
            let bias = tape.relpos_bias(t, h, n, m, clip);
            logits = tape.add(logits, bias);
        }
        let weights = tape.softmax(logits, mask)?;
        heads.push(tape.matmul(weights, vh));
    }
    let joined = tape.concat_cols(&heads);
    Ok(tape.matmul(joined, wo))
}

/// Pre-norm self-attention encoder stack followed by the final layer norm.
pub fn encoder_stack(
    tape: &mut Tape<'_>,
    ctx: &mut Ctx,
    mut h: Var,
    prefix: &str,
    cfg: &TransformerConfig,
) -> Result<Var> {
    for l in 0..cfg.n_enc_layers {
        let p = format!("{prefix}.{l}");
        let a = layer_norm(tape, h, &format!("{p}.ln1"))?;
        let a = multi_head_attention(tape, a, a, &format!("{p}.attn"), cfg.n_heads, Some(cfg.relpos_clip), None)?;
        let a = ctx.dropout(tape, a);
        h = tape.add(h, a);
        let f = layer_norm(tape, h, &format!("{p}.ln2"))?;
        let f = feed_forward(tape, f, &format!("{p}.ffn"))?;
        let f = ctx.dropout(tape, f);
        h = tape.add(h, f);
    }
    layer_norm(tape, h, &format!("{prefix}.ln_f"))
}
