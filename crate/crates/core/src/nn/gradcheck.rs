//! Central-difference gradient checking against the taped backward pass.

use super::params::{Grads, ParamSet};
use crate::error::Result;

/// Worst mismatch found for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Perturbs every scalar of every parameter by `+-step` and compares the centred
/// difference of `loss` with `analytic`.
pub fn check_gradients<F>(params: &ParamSet, analytic: &Grads, step: f64, floor: f64, loss: F) -> Result<Vec<TensorCheck>>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for (i, name) in params.names().iter().enumerate() {
        let (rows, cols) = params.value(i).dim();
        let mut check = TensorCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
        };
        for r in 0..rows {
            for c in 0..cols {
                let orig = work.value(i)[[r, c]];
                work.value_mut(i)[[r, c]] = orig + step;
                let up = loss(&work)?;
                work.value_mut(i)[[r, c]] = orig - step;
                let down = loss(&work)?;
                work.value_mut(i)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * step);
                let a = analytic.get(i)[[r, c]];
                let err = relative_error(a, numeric, floor);
                if err > check.max_rel_err || (r, c) == (0, 0) {
                    check.max_rel_err = check.max_rel_err.max(err);
                    check.worst_index = (r, c);
                    check.analytic = a;
                    check.numeric = numeric;
                }
            }
        }
        out.push(check);
    }
    Ok(out)
}

/// Largest relative error across all tensors.
pub fn worst(checks: &[TensorCheck]) -> f64 {
    checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
}

/// Gradient checks for every taped op and for full toy transducer and
/// recogniser models, all at the given seed.
pub mod suite {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{check_gradients, TensorCheck};
    use crate::asr::{AsrModel, Vocabulary};
    use crate::error::Result;
    use crate::nn::layers::{
        add_attention, add_ffn, add_layer_norm, feed_forward, layer_norm, multi_head_attention, Ctx,
    };
    use crate::nn::tape::{causal_mask, Mat, Tape, Var};
    use crate::nn::transducer::{LossKind, Standardizer, Transducer};
    use crate::nn::{ParamSet, TransformerConfig};

    pub const STEP: f64 = 1e-4;
    pub const FLOOR: f64 = 1e-5;

    /// Named check over every tensor of one graph.
    #[derive(Debug, Clone)]
    pub struct CaseResult {
        pub case: String,
        pub tensors: Vec<TensorCheck>,
    }

    impl CaseResult {
        pub fn worst(&self) -> f64 {
            super::worst(&self.tensors)
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn jitter(params: &mut ParamSet, rng: &mut ChaCha8Rng, amount: f64) {
        for i in 0..params.len() {
            params.value_mut(i).mapv_inplace(|v| v + rng.gen_range(-amount..amount));
        }
    }

    /// Builds a graph from `build`, scores it with MSE against a random target
    /// and compares gradients for every entry of `params`.
    fn op_case<F>(name: &str, params: ParamSet, rng: &mut ChaCha8Rng, build: F) -> Result<CaseResult>
    where
        F: Fn(&mut Tape<'_>) -> Result<Var>,
    {
        let shape = {
            let mut t = Tape::new(&params);
            let y = build(&mut t)?;
            t.value(y).dim()
        };
        let target = rand_mat(rng, shape.0, shape.1);
        let loss = |p: &ParamSet| -> Result<f64> {
            let mut t = Tape::new(p);
            let y = build(&mut t)?;
            let l = t.mse_loss(y, &target)?;
            Ok(t.scalar(l))
        };
        let grads = {
            let mut t = Tape::new(&params);
            let y = build(&mut t)?;
            let l = t.mse_loss(y, &target)?;
            t.backward(l)?
        };
        Ok(CaseResult {
            case: name.to_string(),
            tensors: check_gradients(&params, &grads, STEP, FLOOR, loss)?,
        })
    }

    /// Like `op_case` but the graph produces the scalar loss itself.
    fn loss_case<F>(name: &str, params: ParamSet, build: F) -> Result<CaseResult>
    where
        F: Fn(&mut Tape<'_>) -> Result<Var>,
    {
        let loss = |p: &ParamSet| -> Result<f64> {
            let mut t = Tape::new(p);
            let l = build(&mut t)?;
            Ok(t.scalar(l))
        };
        let grads = {
            let mut t = Tape::new(&params);
            let l = build(&mut t)?;
            t.backward(l)?
        };
        Ok(CaseResult {
            case: name.to_string(),
            tensors: check_gradients(&params, &grads, STEP, FLOOR, loss)?,
        })
    }

    fn set(rng: &mut ChaCha8Rng, shapes: &[(&str, usize, usize)]) -> ParamSet {
        let mut p = ParamSet::new();
        for &(n, r, c) in shapes {
            p.add(n, rand_mat(rng, r, c));
        }
        p
    }

    pub fn op_cases(seed: u64) -> Result<Vec<CaseResult>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let r = &mut rng;

        let p = set(r, &[("a", 3, 4), ("b", 4, 2)]);
        out.push(op_case("matmul", p, r, |t| {
            let (a, b) = (t.param_named("a")?, t.param_named("b")?);
            Ok(t.matmul(a, b))
        })?);

        let p = set(r, &[("a", 3, 4), ("b", 5, 4)]);
        out.push(op_case("matmul_t", p, r, |t| {
            let (a, b) = (t.param_named("a")?, t.param_named("b")?);
            Ok(t.matmul_t(a, b))
        })?);

        let p = set(r, &[("a", 3, 4), ("b", 3, 4), ("row", 1, 4)]);
        out.push(op_case("add/add_row/scale", p, r, |t| {
            let (a, b, row) = (t.param_named("a")?, t.param_named("b")?, t.param_named("row")?);
            let s = t.add(a, b);
            let s = t.add_row(s, row);
            Ok(t.scale(s, -1.7))
        })?);

        let mut p = set(r, &[("x", 4, 3)]);
        p.value_mut(0).mapv_inplace(|v| 3.0 * v);
        out.push(op_case("gelu", p, r, |t| {
            let x = t.param_named("x")?;
            Ok(t.gelu(x))
        })?);

        let p = set(r, &[("x", 3, 6), ("g", 1, 6), ("b", 1, 6)]);
        out.push(op_case("layer_norm", p, r, |t| {
            let (x, g, b) = (t.param_named("x")?, t.param_named("g")?, t.param_named("b")?);
            Ok(t.layer_norm(x, g, b))
        })?);

        let p = set(r, &[("x", 4, 4)]);
        out.push(op_case("softmax", p, r, |t| {
            let x = t.param_named("x")?;
            t.softmax(x, None)
        })?);

        let p = set(r, &[("x", 4, 4)]);
        let mask = causal_mask(4);
        out.push(op_case("softmax/masked", p, r, |t| {
            let x = t.param_named("x")?;
            t.softmax(x, Some(&mask))
        })?);

        let p = set(r, &[("x", 3, 5)]);
        out.push(op_case("log_softmax", p, r, |t| {
            let x = t.param_named("x")?;
            Ok(t.log_softmax(x))
        })?);

        let p = set(r, &[("table", 2, 5), ("x", 6, 4)]);
        out.push(op_case("relpos_bias", p, r, |t| {
            let (table, x) = (t.param_named("table")?, t.param_named("x")?);
            let b0 = t.relpos_bias(table, 0, 6, 4, 2);
            let b1 = t.relpos_bias(table, 1, 6, 4, 2);
            let s = t.add(x, b0);
            let b1 = t.scale(b1, 0.5);
            Ok(t.add(s, b1))
        })?);

        let p = set(r, &[("x", 3, 6), ("y", 3, 2)]);
        out.push(op_case("slice/concat", p, r, |t| {
            let (x, y) = (t.param_named("x")?, t.param_named("y")?);
            let a = t.slice_cols(x, 1, 3);
            let b = t.slice_cols(x, 4, 2);
            Ok(t.concat_cols(&[b, y, a]))
        })?);

        let p = set(r, &[("x", 3, 4)]);
        let factor = rand_mat(r, 3, 4);
        let (scale, shift) = (vec![0.5, -2.0, 1.5, 3.0], vec![1.0, 0.0, -1.0, 2.0]);
        out.push(op_case("mul_const/col_affine", p, r, |t| {
            let x = t.param_named("x")?;
            let y = t.mul_const(x, factor.clone());
            Ok(t.col_affine(y, &scale, &shift))
        })?);

        let p = set(r, &[("table", 4, 3)]);
        out.push(op_case("gather_rows", p, r, |t| {
            let table = t.param_named("table")?;
            Ok(t.gather_rows(table, &[2, 0, 2, 3]))
        })?);

        let p = set(r, &[("x", 4, 3)]);
        let target = rand_mat(r, 4, 3);
        out.push(loss_case("euclidean_loss", p, |t| {
            let x = t.param_named("x")?;
            t.euclidean_loss(x, &target)
        })?);

        let p = set(r, &[("x", 4, 3)]);
        out.push(loss_case("cross_entropy", p, |t| {
            let x = t.param_named("x")?;
            t.cross_entropy(x, &[0, 2, 1, 2])
        })?);

        let cfg = TransformerConfig { d_model: 8, n_heads: 2, d_ff: 12, relpos_clip: 2, ..TransformerConfig::toy() };
        let mut p = ParamSet::new();
        p.add("xq", rand_mat(r, 5, 8));
        p.add("xkv", rand_mat(r, 3, 8));
        add_attention(&mut p, r, "self", &cfg, true);
        add_attention(&mut p, r, "cross", &cfg, false);
        jitter(&mut p, r, 0.3);
        let mask = causal_mask(5);
        out.push(op_case("attention", p, r, |t| {
            let (xq, xkv) = (t.param_named("xq")?, t.param_named("xkv")?);
            let a = multi_head_attention(t, xq, xq, "self", 2, Some(2), Some(&mask))?;
            let c = multi_head_attention(t, a, xkv, "cross", 2, None, None)?;
            Ok(t.add(a, c))
        })?);

        let mut p = ParamSet::new();
        p.add("x", rand_mat(r, 3, 8));
        add_layer_norm(&mut p, "ln", 8);
        add_ffn(&mut p, r, "ffn", &cfg);
        jitter(&mut p, r, 0.3);
        out.push(op_case("norm+ffn", p, r, |t| {
            let x = t.param_named("x")?;
            let h = layer_norm(t, x, "ln")?;
            feed_forward(t, h, "ffn")
        })?);

        Ok(out)
    }

    /// Model shapes used by the full-model cases.
    pub fn toy_config(seed: u64) -> TransformerConfig {
        TransformerConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            dropout: 0.25,
            relpos_clip: 3,
            session_dim: 3,
            seed,
        }
    }

    pub fn transducer_case(seed: u64, kind: LossKind) -> Result<CaseResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Transducer::new(toy_config(seed), 6, 4, vec!["s0".into(), "s1".into(), "s2".into()])?;
        jitter(&mut model.params, &mut rng, 0.2);
        model.input_norm = Standardizer { mean: vec![0.1; 6], std: vec![0.8; 6] };
        model.output_norm = Standardizer { mean: vec![0.5, -0.5, 0.0, 1.0], std: vec![1.5, 0.7, 1.0, 2.0] };
        let x = rand_mat(&mut rng, 5, 6);
        let target = rand_mat(&mut rng, 5, 4);
        let (_, grads) = model.loss_and_grads(&x, &target, 1, kind, &mut Ctx::train(0.25, seed))?;
        let loss = |p: &ParamSet| -> Result<f64> {
            let mut m = model.clone();
            m.params = p.clone();
            Ok(m.loss_and_grads(&x, &target, 1, kind, &mut Ctx::train(0.25, seed))?.0)
        };
        Ok(CaseResult {
            case: format!("transducer/{kind:?}"),
            tensors: check_gradients(&model.params, &grads, STEP, FLOOR, loss)?,
        })
    }

    pub fn recogniser_case(seed: u64) -> Result<CaseResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = AsrModel::new(toy_config(seed), 5, Vocabulary::characters("ab ".chars()))?;
        jitter(&mut model.params, &mut rng, 0.2);
        let mel = rand_mat(&mut rng, 4, 5);
        let tokens = model.vocab.tokenize("ab a")?;
        let (_, grads) = model.loss_and_grads(&mel, &tokens, &mut Ctx::train(0.25, seed))?;
        let loss = |p: &ParamSet| -> Result<f64> {
            let mut m = model.clone();
            m.params = p.clone();
            Ok(m.loss_and_grads(&mel, &tokens, &mut Ctx::train(0.25, seed))?.0)
        };
        Ok(CaseResult {
            case: "recogniser/cross_entropy".into(),
            tensors: check_gradients(&model.params, &grads, STEP, FLOOR, loss)?,
        })
    }

    /// Every op case plus both full models.
    pub fn all(seed: u64) -> Result<Vec<CaseResult>> {
        let mut out = op_cases(seed)?;
        out.push(transducer_case(seed, LossKind::Euclidean)?);
        out.push(transducer_case(seed, LossKind::Mse)?);
        out.push(recogniser_case(seed)?);
        Ok(out)
    }
}
