use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssr_core::nn::gradcheck::suite;
use ssr_core::nn::transducer::smooth;
use ssr_core::nn::{
    corpus_loss, train_transducer, transduction_loss, AdamConfig, Ctx, LossKind, Mat, ParamSet, Standardizer, Tape,
    TrainConfig, TrainItem, Transducer, TransformerConfig,
};
use ssr_core::Error;

fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn every_op_matches_finite_differences() {
    for case in suite::op_cases(11).unwrap() {
        for t in &case.tensors {
            assert!(t.max_rel_err < 1e-3, "{} / {}: {:?}", case.case, t.name, t);
        }
    }
}

#[test]
fn full_models_match_finite_differences() {
    for case in [
        suite::transducer_case(3, LossKind::Euclidean).unwrap(),
        suite::transducer_case(4, LossKind::Mse).unwrap(),
        suite::recogniser_case(5).unwrap(),
    ] {
        assert!(case.worst() < 1e-3, "{}: {:?}", case.case, case.tensors);
    }
}

fn toy_transducer(sessions: usize) -> Transducer {
    let cfg = TransformerConfig { d_model: 8, n_heads: 2, d_ff: 16, relpos_clip: 3, ..TransformerConfig::toy() };
    Transducer::new(cfg, 6, 4, (0..sessions).map(|s| format!("s{s}")).collect()).unwrap()
}

#[test]
fn unused_session_row_has_zero_gradient() {
    let model = toy_transducer(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, y) = (rand_mat(&mut rng, 4, 6), rand_mat(&mut rng, 4, 4));
    let (_, g) = model.loss_and_grads(&x, &y, 1, LossKind::Euclidean, &mut Ctx::eval()).unwrap();
    let table = g.get(model.params.index("session.table").unwrap());
    assert!(table.row(0).iter().all(|v| *v == 0.0));
    assert!(table.row(2).iter().all(|v| *v == 0.0));
    assert!(table.row(1).iter().any(|v| *v != 0.0));
}

#[test]
fn zero_residual_gives_zero_mse_gradients() {
    let model = toy_transducer(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_mat(&mut rng, 5, 6);
    let y = model.predict(&x, "s0").unwrap();
    let (loss, g) = model.loss_and_grads(&x, &y, 0, LossKind::Mse, &mut Ctx::eval()).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(g.global_norm(), 0.0);
}

#[test]
fn backward_without_forward_is_a_state_error() {
    let mut p = ParamSet::new();
    p.add("w", Mat::ones((1, 1)));
    let mut other = Tape::new(&p);
    let w = other.param(0);
    let loss = other.mse_loss(w, &Mat::zeros((1, 1))).unwrap();
    let fresh = Tape::new(&p);
    assert!(matches!(fresh.backward(loss), Err(Error::State(_))));
    let mut t = Tape::new(&p);
    let m = t.input(Mat::ones((2, 2)));
    assert!(matches!(t.backward(m), Err(Error::State(_))));
}

#[test]
fn unknown_session_is_a_lookup_error() {
    let model = toy_transducer(1);
    assert!(matches!(model.predict(&Mat::zeros((2, 6)), "nope"), Err(Error::Lookup(_))));
}

#[test]
fn eval_forward_is_deterministic() {
    let model = toy_transducer(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_mat(&mut rng, 7, 6);
    let a = model.encode(&x, "s1").unwrap();
    assert_eq!(a.dim(), (7, 8));
    assert_eq!(a, model.encode(&x, "s1").unwrap());
}

#[test]
fn loss_examples() {
    let t = Mat::zeros((3, 80));
    let p = Mat::ones((3, 80));
    assert_eq!(transduction_loss(&t, &t, LossKind::Euclidean).unwrap(), 0.0);
    assert_abs_diff_eq!(transduction_loss(&p, &t, LossKind::Euclidean).unwrap(), 80f64.sqrt(), epsilon = 1e-12);
    assert_abs_diff_eq!(transduction_loss(&p, &t, LossKind::Euclidean).unwrap(), 8.944, epsilon = 1e-3);
    let p2 = &p * 2.0;
    assert_abs_diff_eq!(transduction_loss(&p2, &t, LossKind::Euclidean).unwrap(), 2.0 * 80f64.sqrt(), epsilon = 1e-12);
    assert_abs_diff_eq!(transduction_loss(&p2, &t, LossKind::Mse).unwrap(), 4.0, epsilon = 1e-12);
    assert!(matches!(transduction_loss(&p, &Mat::zeros((2, 80)), LossKind::Mse), Err(Error::Parameter(_))));
}

// Independent scalar-loop evaluation of the encoder on a 2-frame input with
// parameters set from a closed-form pattern.
mod golden {
    use super::*;

    const D: usize = 8;
    const HEADS: usize = 2;
    const FF: usize = 12;
    const CLIP: usize = 2;

    pub fn pattern(k: usize, tensor: usize) -> f64 {
        0.3 * ((k as f64) * 0.7 + tensor as f64 * 1.3).sin()
    }

    pub fn model() -> Transducer {
        let cfg = TransformerConfig { d_model: D, n_heads: HEADS, d_ff: FF, n_enc_layers: 1, relpos_clip: CLIP, session_dim: 3, ..TransformerConfig::toy() };
        let mut m = Transducer::new(cfg, 3, 2, vec!["a".into(), "b".into()]).unwrap();
        for i in 0..m.params.len() {
            let v = m.params.value_mut(i);
            for (k, x) in v.iter_mut().enumerate() {
                *x = pattern(k, i);
            }
        }
        m
    }

    fn w(m: &Transducer, name: &str) -> Vec<Vec<f64>> {
        let v = m.params.get(name).unwrap();
        (0..v.nrows()).map(|r| v.row(r).to_vec()).collect()
    }

    fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| {
                (0..b[0].len())
                    .map(|j| {
                        let mut s = 0.0;
                        for k in 0..row.len() {
                            s += row[k] * b[k][j];
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    fn add_bias(a: &mut [Vec<f64>], b: &[f64]) {
        for row in a {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn ln(x: &[Vec<f64>], g: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn oracle(m: &Transducer, x: &[Vec<f64>], session: usize) -> Vec<Vec<f64>> {
        let mut h = mm(x, &w(m, "in_proj.w"));
        add_bias(&mut h, &w(m, "in_proj.b")[0]);
        let emb = mm(&[w(m, "session.table")[session].clone()], &w(m, "session.proj"));
        add_bias(&mut h, &emb[0]);

        let a = ln(&h, &w(m, "enc.0.ln1.g")[0], &w(m, "enc.0.ln1.b")[0]);
        let q = mm(&a, &w(m, "enc.0.attn.wq"));
        let k = mm(&a, &w(m, "enc.0.attn.wk"));
        let v = mm(&a, &w(m, "enc.0.attn.wv"));
        let table = w(m, "enc.0.attn.relpos");
        let n = x.len();
        let dh = D / HEADS;
        let mut joined = vec![vec![0.0; D]; n];
        for head in 0..HEADS {
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += q[i][head * dh + c] * k[j][head * dh + c];
                    }
                    let off = (j as isize - i as isize).clamp(-(CLIP as isize), CLIP as isize) + CLIP as isize;
                    *l = s / (dh as f64).sqrt() + table[head][off as usize];
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    joined[i][head * dh + c] = (0..n).map(|j| e[j] / z * v[j][head * dh + c]).sum();
                }
            }
        }
        let att = mm(&joined, &w(m, "enc.0.attn.wo"));
        for i in 0..n {
            for c in 0..D {
                h[i][c] += att[i][c];
            }
        }
        let f = ln(&h, &w(m, "enc.0.ln2.g")[0], &w(m, "enc.0.ln2.b")[0]);
        let mut f1 = mm(&f, &w(m, "enc.0.ffn.l1.w"));
        add_bias(&mut f1, &w(m, "enc.0.ffn.l1.b")[0]);
        for row in f1.iter_mut() {
            for v in row.iter_mut() {
                *v = gelu(*v);
            }
        }
        let mut f2 = mm(&f1, &w(m, "enc.0.ffn.l2.w"));
        add_bias(&mut f2, &w(m, "enc.0.ffn.l2.b")[0]);
        for i in 0..n {
            for c in 0..D {
                h[i][c] += f2[i][c];
            }
        }
        ln(&h, &w(m, "enc.ln_f.g")[0], &w(m, "enc.ln_f.b")[0])
    }

    pub fn input() -> Vec<Vec<f64>> {
        vec![vec![0.5, -1.0, 0.25], vec![-0.75, 0.1, 1.2]]
    }
}

#[test]
fn encoder_matches_step_by_step_oracle() {
    let m = golden::model();
    let x = golden::input();
    let want = golden::oracle(&m, &x, 1);
    let xm = Mat::from_shape_fn((2, 3), |(r, c)| x[r][c]);
    let got = m.encode(&xm, "b").unwrap();
    for r in 0..2 {
        for c in 0..8 {
            assert_abs_diff_eq!(got[[r, c]], want[r][c], epsilon = 1e-12);
        }
    }
    // frozen values of the oracle
    let frozen = GOLDEN_ROW0;
    for c in 0..8 {
        assert_abs_diff_eq!(want[0][c], frozen[c], epsilon = 1e-9);
    }
}

const GOLDEN_ROW0: [f64; 8] = [
    -0.33532948705006305,
    -0.5593762723004457,
    -0.38161624421330526,
    0.08756318742711011,
    0.31772675560982994,
    0.12210661656510796,
    -0.12421224194154004,
    -0.13063468805411502,
];

fn linear_task(seed: u64, n: usize) -> Vec<TrainItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = rand_mat(&mut rng, 10, 6);
    (0..n)
        .map(|i| {
            let frames = rng.gen_range(8..16);
            let x = rand_mat(&mut rng, frames, 10);
            TrainItem { target: x.dot(&map), features: x, session: format!("s{}", i % 2) }
        })
        .collect()
}

fn linear_model(items: &[TrainItem], seed: u64) -> Transducer {
    let cfg = TransformerConfig { d_model: 32, n_heads: 4, d_ff: 64, n_enc_layers: 2, dropout: 0.0, relpos_clip: 8, session_dim: 4, seed, ..TransformerConfig::toy() };
    let mut m = Transducer::new(cfg, 10, 6, vec!["s0".into(), "s1".into()]).unwrap();
    m.input_norm = Standardizer::fit(items.iter().map(|i| &i.features)).unwrap();
    m.output_norm = Standardizer::fit(items.iter().map(|i| &i.target)).unwrap();
    m
}

#[test]
fn toy_linear_task_trains() {
    let items = linear_task(5, 20);
    let mut m = linear_model(&items, 1);
    let tc = TrainConfig { steps: 200, adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() }, seed: 9, ..TrainConfig::default() };
    let before = corpus_loss(&m, &items, tc.loss).unwrap();
    let losses = train_transducer(&mut m, &items, &tc).unwrap();
    let after = corpus_loss(&m, &items, tc.loss).unwrap();
    assert_eq!(losses.len(), 200);
    assert!(after < 0.2 * before, "{before} -> {after}");
}

#[test]
fn zero_steps_keeps_initialisation() {
    let items = linear_task(6, 4);
    let mut m = linear_model(&items, 2);
    let init = m.params.clone();
    let losses = train_transducer(&mut m, &items, &TrainConfig { steps: 0, ..TrainConfig::default() }).unwrap();
    assert!(losses.is_empty());
    assert_eq!(m.params, init);
}

#[test]
fn identical_pairs_trend_down_and_runs_repeat() {
    let items = vec![linear_task(7, 1)[0].clone(); 5];
    let run = || {
        let mut m = linear_model(&items, 3);
        train_transducer(&mut m, &items, &TrainConfig { steps: 60, seed: 4, ..TrainConfig::default() }).unwrap()
    };
    let losses = run();
    let s = smooth(&losses, 10);
    for w in s.windows(2) {
        assert!(w[1] <= w[0], "{s:?}");
    }
    assert_eq!(losses, run());
}
