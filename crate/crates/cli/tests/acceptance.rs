//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion with its runtime against the allowed limit, and fails if any
//! criterion fails.

use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssr_core::acoustic::{log_mel, MelConfig, MelSpectrogram};
use ssr_core::align::{audio_target_transfer, distance_matrix, dtw_matrices, resample_rows, AttConfig, Metric};
use ssr_core::asr::{
    beam_search, train_asr, AsrItem, AsrModel, AsrScorer, BeamConfig, StepScorer, Vocabulary, BOS, EOS,
};
use ssr_core::corpus::{ground_truth_frames, synthesize, SynthConfig, SynthUtterance};
use ssr_core::correction::{
    apply_correction, correct, filter_candidates, CorrectionCandidate, CorrectionProvider, CorrectionRequest,
    FilterConfig, MockProvider,
};
use ssr_core::eval::{
    corpus_wer, normalize_words, relative_improvement, render_report, wer, EvalReport, ReportFormat, WerResult,
    CSV_HEADER, TABLE_COLUMNS,
};
use ssr_core::nn::gradcheck::suite;
use ssr_core::nn::{
    attention_weights, corpus_loss, scaled_dot_product_attention, train_transducer, AdamConfig, LossKind, Mat,
    Standardizer, TrainConfig, TrainItem, Transducer, TransformerConfig,
};
use ssr_core::signals::{featurize_recording, EmgRecording, FramingConfig, SpeechMode};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit_s: f64,
    run: fn() -> Check,
}

#[test]
fn acceptance() {
    let criteria = [
        Criterion { id: 1, name: "table arithmetic and fixture", limit_s: 1.0, run: c1_table },
        Criterion { id: 2, name: "feature shape and labels", limit_s: 1.0, run: c2_features },
        Criterion { id: 3, name: "DTW exhaustive oracle", limit_s: 30.0, run: c3_dtw },
        Criterion { id: 4, name: "WER brute-force oracle", limit_s: 60.0, run: c4_wer },
        Criterion { id: 5, name: "gradient checks", limit_s: 120.0, run: c5_gradients },
        Criterion { id: 6, name: "attention invariants", limit_s: 1.0, run: c6_attention },
        Criterion { id: 7, name: "beam search oracle and monotonicity", limit_s: 60.0, run: c7_beam },
        Criterion { id: 8, name: "transducer training smoke", limit_s: 300.0, run: c8_training },
        Criterion { id: 9, name: "audio target transfer", limit_s: 120.0, run: c9_att },
        Criterion { id: 10, name: "correction behaviour", limit_s: 120.0, run: c10_correction },
        Criterion { id: 11, name: "end-to-end CLI pipeline", limit_s: 600.0, run: c11_pipeline },
    ];
    let mut failed = Vec::new();
    let mut lines = Vec::new();
    for c in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(d) if secs <= c.limit_s => (true, d),
            Ok(d) => (false, format!("{d}; runtime over limit")),
            Err(e) => (false, e),
        };
        let line = format!(
            "criterion {:>2} {} {:<38} [{secs:7.2} s / {:>3} s] {detail}",
            c.id,
            if ok { "PASS" } else { "FAIL" },
            c.name,
            c.limit_s
        );
        println!("{line}");
        lines.push(line);
        if !ok {
            failed.push(c.id);
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed.len(), criteria.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}\n{}", lines.join("\n"));
}

fn c1_table() -> Check {
    let a = relative_improvement(36.0, 32.5).map_err(err)?;
    let b = relative_improvement(36.0, 30.0).map_err(err)?;
    ensure((a - 9.7).abs() <= 0.05, || format!("36 -> 32.5 gives {a}"))?;
    ensure((b - 16.6).abs() <= 0.15, || format!("36 -> 30 gives {b}"))?;

    let report = EvalReport::table1_fixture();
    let expected = [
        ("Deep Speech (RNN-Based ASR baseline)", "36", "Baseline", "1.42"),
        ("Transformer based ASR (proposed)", "32.5", "9.7", "0.73"),
        ("Transformer + LLM Correction (proposed)", "30", "16.7", "0.78"),
    ];
    let text = render_report(&report, ReportFormat::TableText);
    let lines: Vec<&str> = text.lines().collect();
    ensure(lines.len() == 5, || format!("table has {} lines", lines.len()))?;
    let header: Vec<&str> = lines[0].split('|').map(str::trim).collect();
    ensure(header == TABLE_COLUMNS, || format!("header {header:?}"))?;
    for (line, (sys, w, rel, t)) in lines[2..].iter().zip(expected) {
        let cells: Vec<&str> = line.split('|').map(str::trim).collect();
        ensure(cells == [sys, w, rel, t], || format!("row {cells:?}"))?;
    }
    Ok(format!("improvements {a} and {b}; three rows match"))
}

fn c2_features() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples = Array2::from_shape_fn((8, 1000), |_| rng.gen_range(-1.0..1.0));
    let rec = EmgRecording::new(samples, 1000.0, "s", "u", SpeechMode::Silent).map_err(err)?;
    let f = featurize_recording(&rec, &FramingConfig::default()).map_err(err)?;
    ensure(f.dims() == 112, || format!("{} dims", f.dims()))?;
    ensure(f.frames() == 84, || format!("{} frames", f.frames()))?;
    let mut expected = Vec::new();
    for c in 0..8 {
        for d in ["rms", "mean", "energy", "abs", "zcr"] {
            expected.push(format!("ch{c}_{d}"));
        }
        for b in 0..9 {
            expected.push(format!("ch{c}_stft{b}"));
        }
    }
    ensure(f.dim_labels() == expected.as_slice(), || format!("labels {:?}", &f.dim_labels()[..16]))?;
    ensure(f.data().iter().all(|v| v.is_finite()), || "non-finite features".into())?;
    Ok("84 x 112, 14 labelled dims per channel".into())
}

/// Cheapest monotone path by enumerating every path from the origin.
fn enumerate_paths(d: &Array2<f64>, i: usize, j: usize, acc: f64, best: &mut f64) {
    let (n, m) = d.dim();
    if i == n - 1 && j == m - 1 {
        *best = best.min(acc);
        return;
    }
    for (di, dj) in [(1, 0), (0, 1), (1, 1)] {
        let (a, b) = (i + di, j + dj);
        if a < n && b < m {
            enumerate_paths(d, a, b, acc + d[[a, b]], best);
        }
    }
}

fn c3_dtw() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for inst in 0..200 {
        let (n, m, k) = (rng.gen_range(1..=7), rng.gen_range(1..=7), rng.gen_range(1..=4));
        let a = Array2::from_shape_fn((n, k), |_| rng.gen_range(-2.0..2.0));
        let b = Array2::from_shape_fn((m, k), |_| rng.gen_range(-2.0..2.0));
        let path = dtw_matrices(&a, &b, Metric::Euclidean).map_err(err)?;
        let d = distance_matrix(&a, &b, Metric::Euclidean);
        let mut best = f64::INFINITY;
        enumerate_paths(&d, 0, 0, d[[0, 0]], &mut best);
        ensure(path.total_cost == best, || format!("instance {inst}: dtw {} vs {best}", path.total_cost))?;
        let along: f64 = path.pairs.iter().map(|&(i, j)| d[[i, j]]).sum();
        ensure((along - best).abs() <= 1e-9 * best.max(1.0), || format!("instance {inst}: path sums to {along}"))?;
    }
    Ok("200 instances, costs identical".into())
}

/// Edit distance from `start` to every sequence reachable within `radius` single-word edits.
fn bfs_distances(start: &[u8], radius: usize, alphabet: u8) -> HashMap<Vec<u8>, usize> {
    let mut dist = HashMap::from([(start.to_vec(), 0usize)]);
    let mut queue = VecDeque::from([start.to_vec()]);
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        if d == radius {
            continue;
        }
        let mut next = Vec::new();
        for p in 0..s.len() {
            let mut t = s.clone();
            t.remove(p);
            next.push(t);
            for w in 0..alphabet {
                if w != s[p] {
                    let mut t = s.clone();
                    t[p] = w;
                    next.push(t);
                }
            }
        }
        if s.len() < 8 {
            for p in 0..=s.len() {
                for w in 0..alphabet {
                    let mut t = s.clone();
                    t.insert(p, w);
                    next.push(t);
                }
            }
        }
        for t in next {
            if !dist.contains_key(&t) {
                dist.insert(t.clone(), d + 1);
                queue.push_back(t);
            }
        }
    }
    dist
}

fn c4_wer() -> Check {
    const WORDS: [&str; 3] = ["red", "green", "blue"];
    let mut seqs: Vec<Vec<u8>> = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..4 {
        let mut grown = Vec::new();
        for s in &frontier {
            for w in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(w);
                grown.push(t);
            }
        }
        seqs.extend(grown.iter().cloned());
        frontier = grown;
    }
    let text = |s: &[u8]| s.iter().map(|&w| WORDS[w as usize]).collect::<Vec<_>>().join(" ");
    let mut pairs = 0;
    for r in &seqs {
        let dist = bfs_distances(r, 4, 3);
        for h in &seqs {
            let oracle = dist[h];
            let w: WerResult = wer(&text(r), &text(h));
            ensure(w.errors() == oracle, || format!("{:?} vs {:?}: {} edits, oracle {oracle}", text(r), text(h), w.errors()))?;
            ensure(h.len() + w.deletions == r.len() + w.insertions, || format!("inconsistent counts for {r:?} {h:?}"))?;
            let expected = if r.is_empty() { h.len() as f64 } else { oracle as f64 / r.len() as f64 };
            ensure(w.wer == expected, || format!("{r:?} {h:?}: wer {} expected {expected}", w.wer))?;
            pairs += 1;
        }
    }
    Ok(format!("{pairs} pairs agree"))
}

fn c5_gradients() -> Check {
    let cases = suite::all(0).map_err(err)?;
    let ops = [
        "matmul", "matmul_t", "add/add_row/scale", "gelu", "layer_norm", "softmax", "softmax/masked", "log_softmax",
        "relpos_bias", "slice/concat", "mul_const/col_affine", "gather_rows", "euclidean_loss", "cross_entropy",
        "attention", "norm+ffn", "transducer/Euclidean", "transducer/Mse", "recogniser/cross_entropy",
    ];
    for op in ops {
        ensure(cases.iter().any(|c| c.case == op), || format!("no gradient case for {op}"))?;
    }
    let mut tensors = 0;
    let mut worst: f64 = 0.0;
    for c in &cases {
        ensure(!c.tensors.is_empty(), || format!("{} checks no tensors", c.case))?;
        ensure(c.worst() < 1e-3, || format!("{}: relative error {:.3e}", c.case, c.worst()))?;
        worst = worst.max(c.worst());
        tensors += c.tensors.len();
    }
    let cfg = suite::toy_config(0);
    let transducer = Transducer::new(cfg, 6, 4, vec!["s0".into(), "s1".into(), "s2".into()]).map_err(err)?;
    let recogniser = AsrModel::new(cfg, 5, Vocabulary::characters("ab ".chars())).map_err(err)?;
    for (case, names) in [
        ("transducer/Euclidean", transducer.params.names()),
        ("transducer/Mse", transducer.params.names()),
        ("recogniser/cross_entropy", recogniser.params.names()),
    ] {
        let c = cases.iter().find(|c| c.case == case).expect("present");
        let checked: Vec<&str> = c.tensors.iter().map(|t| t.name.as_str()).collect();
        ensure(checked == names, || format!("{case}: checked {} of {} tensors", checked.len(), names.len()))?;
    }
    Ok(format!("{} cases, {tensors} tensors, worst relative error {worst:.2e}", cases.len()))
}

fn c6_attention() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rand = |r: usize, c: usize| Mat::from_shape_fn((r, c), |_| rng.gen_range(-2.0..2.0));
    for (n, m) in [(1, 1), (3, 5), (6, 2), (4, 4)] {
        let (q, k) = (rand(n, 4), rand(m, 4));
        let bias = rand(n, m);
        let mask = Array2::from_shape_fn((n, m), |(i, j)| j > i && j > 0);
        for w in [
            attention_weights(&q, &k, None, None).map_err(err)?,
            attention_weights(&q, &k, Some(&bias), Some(&mask)).map_err(err)?,
        ] {
            for row in w.rows() {
                let s: f64 = row.sum();
                ensure((s - 1.0).abs() <= 1e-9, || format!("row sums to {s}"))?;
            }
        }
    }
    let (q, k, v) = (rand(3, 4), rand(1, 4), rand(1, 5));
    let out = scaled_dot_product_attention(&q, &k, &v, None, None).map_err(err)?;
    for row in out.rows() {
        ensure(row == v.row(0), || "single key does not return its value row".into())?;
    }
    let q = rand(3, 4);
    let krow = rand(1, 4);
    let k = Mat::from_shape_fn((5, 4), |(_, c)| krow[[0, c]]);
    let v = rand(5, 3);
    let out = scaled_dot_product_attention(&q, &k, &v, None, None).map_err(err)?;
    let mean = v.mean_axis(ndarray::Axis(0)).expect("rows");
    for row in out.rows() {
        for (a, b) in row.iter().zip(mean.iter()) {
            ensure((a - b).abs() <= 1e-12, || format!("uniform case {a} vs {b}"))?;
        }
    }
    let q = ndarray::array![[1.0, 0.0]];
    let k = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
    let v = k.clone();
    let w = attention_weights(&q, &k, None, None).map_err(err)?;
    let out = scaled_dot_product_attention(&q, &k, &v, None, None).map_err(err)?;
    let e = (1.0f64 / 2.0f64.sqrt()).exp();
    let oracle = [e / (e + 1.0), 1.0 / (e + 1.0)];
    for j in 0..2 {
        ensure((w[[0, j]] - oracle[j]).abs() <= 1e-12, || format!("weight {j}: {}", w[[0, j]]))?;
        ensure((out[[0, j]] - oracle[j]).abs() <= 1e-12, || format!("output {j}: {}", out[[0, j]]))?;
    }
    ensure((w[[0, 0]] - 0.6698).abs() < 5e-5 && (w[[0, 1]] - 0.3302).abs() < 5e-5, || format!("{w:?}"))?;
    Ok(format!("two-key weights [{:.4}, {:.4}]", w[[0, 0]], w[[0, 1]]))
}

fn c7_beam() -> Check {
    let vocab = Vocabulary::new(vec![BOS.into(), EOS.into(), "a".into(), "b".into()]).map_err(err)?;
    let widths = [1usize, 2, 4, 8];
    let mut strict = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TransformerConfig { seed, ..TransformerConfig::toy() };
        let mut model = AsrModel::new(cfg, 3, vocab.clone()).map_err(err)?;
        for i in 0..model.params.len() {
            model.params.value_mut(i).mapv_inplace(|v| v + rng.gen_range(-1.0..1.0));
        }
        let mel = Mat::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let scorer = AsrScorer::new(&model, &mel).map_err(err)?;
        let (bos, eos) = (vocab.bos(), vocab.eos());
        let mut best = f64::NEG_INFINITY;
        let mut seqs: Vec<Vec<usize>> = vec![vec![eos]];
        for x in [2, 3] {
            seqs.push(vec![x, eos]);
            for y in [2, 3] {
                seqs.push(vec![x, y, eos]);
            }
        }
        for s in &seqs {
            let mut prefix = vec![bos];
            let mut lp = 0.0;
            for &t in s {
                lp += scorer.log_probs(&prefix).map_err(err)?[t];
                prefix.push(t);
            }
            best = best.max(lp);
        }
        let mut tops = Vec::new();
        for w in widths {
            let hyps = beam_search(&scorer, &BeamConfig { beam_width: w, max_len: 3, length_norm: false })
                .map_err(err)?;
            tops.push(hyps[0].log_prob);
        }
        ensure((tops[3] - best).abs() <= 1e-12, || format!("seed {seed}: beam {} vs exhaustive {best}", tops[3]))?;
        for i in 1..tops.len() {
            ensure(tops[i] >= tops[i - 1], || format!("seed {seed}: widths {widths:?} give {tops:?}"))?;
        }
        if tops[0] < tops[3] {
            strict += 1;
        }
    }
    Ok(format!("50 models; greedy strictly below the optimum on {strict}"))
}

fn corpus_items(cfg: &SynthConfig) -> Result<(Vec<SynthUtterance>, Vec<TrainItem>, Vec<MelSpectrogram>), String> {
    let utts = synthesize(cfg).map_err(err)?;
    let (fc, mc) = (FramingConfig::default(), MelConfig::default());
    let mut items = Vec::new();
    let mut mels = Vec::new();
    for u in &utts {
        let s = featurize_recording(&u.silent, &fc).map_err(err)?;
        let v = featurize_recording(&u.vocal, &fc).map_err(err)?;
        let mel = log_mel(u.audio.channel(0).as_slice().expect("contiguous"), &mc).map_err(err)?;
        let out = audio_target_transfer(&s, &v, &mel, &AttConfig::default()).map_err(err)?;
        items.push(TrainItem {
            features: s.into_data(),
            target: out.targets,
            session: u.session_id.clone(),
        });
        mels.push(mel);
    }
    Ok((utts, items, mels))
}

fn laptop_model(stage_seed: u64, decoder_layers: usize) -> TransformerConfig {
    TransformerConfig {
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        n_enc_layers: 2,
        n_dec_layers: decoder_layers,
        dropout: 0.1,
        relpos_clip: 16,
        session_dim: 4,
        seed: stage_seed,
    }
}

fn transducer_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 200,
        batch_size: 8,
        adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
        seed,
        ..TrainConfig::default()
    }
}

fn fresh_transducer(items: &[TrainItem], sessions: Vec<String>) -> Result<Transducer, String> {
    let mut t = Transducer::new(laptop_model(1, 0), items[0].features.ncols(), items[0].target.ncols(), sessions)
        .map_err(err)?;
    t.input_norm = Standardizer::fit(items.iter().map(|i| &i.features)).map_err(err)?;
    t.output_norm = Standardizer::fit(items.iter().map(|i| &i.target)).map_err(err)?;
    Ok(t)
}

fn sessions_of(utts: &[SynthUtterance]) -> Vec<String> {
    let mut s: Vec<String> = utts.iter().map(|u| u.session_id.clone()).collect();
    s.sort();
    s.dedup();
    s
}

fn c8_training() -> Check {
    let (utts, items, _) = corpus_items(&SynthConfig { n_utterances: 20, seed: 0, ..SynthConfig::default() })?;
    let tc = transducer_train_config(2);
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut t = fresh_transducer(&items, sessions_of(&utts))?;
        let before = corpus_loss(&t, &items, LossKind::Euclidean).map_err(err)?;
        let losses = train_transducer(&mut t, &items, &tc).map_err(err)?;
        let after = corpus_loss(&t, &items, LossKind::Euclidean).map_err(err)?;
        runs.push((before, after, losses, t.params.to_records()));
    }
    let (before, after, losses, params) = &runs[0];
    ensure(losses.len() == 200, || format!("{} steps", losses.len()))?;
    ensure(*after < 0.2 * before, || format!("loss {before:.3} -> {after:.3}"))?;
    ensure(
        runs[1].2 == *losses && runs[1].3 == *params,
        || "two runs with the same seed differ".into(),
    )?;
    Ok(format!("loss {before:.3} -> {after:.3} (ratio {:.3}); repeat run identical", after / before))
}

fn per_frame_error(targets: &Mat, truth: &Mat, gt: &[usize]) -> f64 {
    let total: f64 = gt
        .iter()
        .enumerate()
        .map(|(f, &g)| {
            let d = &targets.row(f) - &truth.row(g);
            d.dot(&d).sqrt()
        })
        .sum();
    total / gt.len() as f64
}

fn c9_att() -> Check {
    let (fc, mc) = (FramingConfig::default(), MelConfig::default());
    let still = synthesize(&SynthConfig { n_utterances: 5, time_warp_strength: 0.0, noise_sigma: 0.0, ..SynthConfig::default() })
        .map_err(err)?;
    for u in &still {
        let s = featurize_recording(&u.silent, &fc).map_err(err)?;
        let v = featurize_recording(&u.vocal, &fc).map_err(err)?;
        let mel = log_mel(u.audio.channel(0).as_slice().expect("contiguous"), &mc).map_err(err)?;
        for refine in [false, true] {
            let out = audio_target_transfer(&s, &v, &mel, &AttConfig { refine, ..AttConfig::default() }).map_err(err)?;
            let expected = resample_rows(&mel.data, v.frames());
            ensure(out.targets == expected, || format!("{}: targets differ from the vocalized mel", u.utterance_id))?;
        }
    }

    let utts = synthesize(&SynthConfig { n_utterances: 40, seed: 0, ..SynthConfig::default() }).map_err(err)?;
    let (mut raw, mut cca) = (0.0, 0.0);
    for u in &utts {
        let s = featurize_recording(&u.silent, &fc).map_err(err)?;
        let v = featurize_recording(&u.vocal, &fc).map_err(err)?;
        let mel = log_mel(u.audio.channel(0).as_slice().expect("contiguous"), &mc).map_err(err)?;
        let truth = resample_rows(&mel.data, v.frames());
        let gt = ground_truth_frames(&u.warp, u.silent.len(), u.vocal.len(), u.silent.sample_rate_hz, &fc);
        for (refine, acc) in [(false, &mut raw), (true, &mut cca)] {
            let out = audio_target_transfer(&s, &v, &mel, &AttConfig { refine, ..AttConfig::default() }).map_err(err)?;
            *acc += per_frame_error(&out.targets, &truth, &gt) / utts.len() as f64;
        }
    }
    ensure(cca <= raw, || format!("refined error {cca:.4} > raw {raw:.4}"))?;
    Ok(format!("exact without warp; {} utterances: raw {raw:.3}, refined {cca:.3}", utts.len()))
}

fn cand(text: &str, confidence: f64) -> CorrectionCandidate {
    CorrectionCandidate::new(text, confidence, "test").expect("valid confidence")
}

/// Decodes every utterance of a trained in-process pipeline with a small beam.
fn pipeline_transcripts(seed: u64) -> Result<(Vec<SynthUtterance>, Vec<String>, Vec<Vec<String>>), String> {
    let (utts, items, mels) = corpus_items(&SynthConfig { n_utterances: 20, seed, ..SynthConfig::default() })?;
    let mut t = fresh_transducer(&items, sessions_of(&utts))?;
    train_transducer(&mut t, &items, &transducer_train_config(seed + 2)).map_err(err)?;
    let vocab = Vocabulary::from_texts(utts.iter().map(|u| u.transcript()).collect::<Vec<_>>().iter().map(String::as_str));
    let mut asr = AsrModel::new(laptop_model(seed + 3, 2), 80, vocab).map_err(err)?;
    asr.input_norm = Standardizer::fit(mels.iter().map(|m| &m.data)).map_err(err)?;
    let asr_items: Vec<AsrItem> = utts
        .iter()
        .zip(&mels)
        .map(|(u, m)| AsrItem { mel: m.data.clone(), transcript: u.transcript() })
        .collect();
    let tc = TrainConfig { steps: 300, batch_size: 8, adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() }, seed: seed + 4, ..TrainConfig::default() };
    train_asr(&mut asr, &asr_items, &tc).map_err(err)?;
    let mut best = Vec::new();
    let mut nbest = Vec::new();
    for (u, it) in utts.iter().zip(&items) {
        let mel = t.predict(&it.features, &u.session_id).map_err(err)?;
        let scorer = AsrScorer::new(&asr, &mel).map_err(err)?;
        let hyps = beam_search(&scorer, &BeamConfig { beam_width: 4, max_len: 48, length_norm: false }).map_err(err)?;
        let texts = hyps.iter().take(5).map(|h| asr.vocab.detokenize(&h.tokens)).collect::<Result<Vec<_>, _>>().map_err(err)?;
        best.push(texts[0].clone());
        nbest.push(texts);
    }
    Ok((utts, best, nbest))
}

fn c10_correction() -> Check {
    let cfg = FilterConfig::default();
    ensure(cfg.confidence_threshold == 0.7, || "default threshold is not 0.7".into())?;
    let input = "the cat zat on the mat";
    let edit = "the cat sat on the mat";
    ensure(filter_candidates(input, &[cand(edit, 0.69)], &cfg).is_empty(), || "0.69 accepted".into())?;
    ensure(filter_candidates(input, &[cand(edit, 0.7)], &cfg).len() == 1, || "0.7 rejected".into())?;
    ensure(
        filter_candidates("i saw it", &[cand("a saw it", 0.95)], &cfg).is_empty(),
        || "one-letter edit accepted".into(),
    )?;
    ensure(
        filter_candidates(input, &[cand(input, 0.99)], &cfg).is_empty(),
        || "unchanged candidate accepted".into(),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let words = ["sat", "mat", "cat", "the", "hat", "on", "a", "zat"];
    for _ in 0..300 {
        let sentence = |rng: &mut ChaCha8Rng| (0..4).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ");
        let inp = format!("  {}\t", sentence(&mut rng));
        let mut cands = Vec::new();
        for _ in 0..4 {
            let text = sentence(&mut rng);
            cands.push(cand(&text, rng.gen_range(0.0..1.0)));
        }
        let (t1, t2) = {
            let a: f64 = rng.gen_range(0.0..1.0);
            let b: f64 = rng.gen_range(0.0..1.0);
            (a.min(b), a.max(b))
        };
        let lo = filter_candidates(&inp, &cands, &FilterConfig { confidence_threshold: t1, ..cfg.clone() });
        let hi = filter_candidates(&inp, &cands, &FilterConfig { confidence_threshold: t2, ..cfg.clone() });
        ensure(hi.iter().all(|c| lo.contains(c)), || format!("threshold {t2} accepts more than {t1}"))?;
        let strict = FilterConfig { confidence_threshold: 1.0, ..cfg.clone() };
        let low_conf: Vec<CorrectionCandidate> = cands.iter().map(|c| cand(&c.text, c.confidence.min(0.99))).collect();
        let out = apply_correction(&inp, &filter_candidates(&inp, &low_conf, &strict));
        ensure(out.as_bytes() == inp.as_bytes(), || "fallback changed the input bytes".into())?;
    }

    let (utts, best, nbest) = pipeline_transcripts(0)?;
    let lexicon: Vec<String> = utts.iter().flat_map(|u| normalize_words(&u.transcript())).collect();
    let provider = MockProvider::new(lexicon, 3);
    let mut runs = Vec::new();
    for threshold in [0.7, 0.3] {
        let fc = FilterConfig { confidence_threshold: threshold, ..cfg.clone() };
        let mut plain = Vec::new();
        let mut fixed = Vec::new();
        for ((u, b), nb) in utts.iter().zip(&best).zip(&nbest) {
            let mut req = CorrectionRequest::new(b.clone(), fc.max_seq_tokens);
            req.n_best = nb.iter().map(|t| ssr_core::correction::NBestEntry { text: t.clone(), log_prob: 0.0 }).collect();
            let outcome = correct(&provider as &dyn CorrectionProvider, &req, &fc).map_err(err)?;
            plain.push(wer(&u.transcript(), b));
            fixed.push(wer(&u.transcript(), &outcome.output));
        }
        runs.push((threshold, corpus_wer(&plain), corpus_wer(&fixed)));
    }
    let (_, before, after) = runs[0];
    ensure(after <= before, || format!("correction raised WER {before:.4} -> {after:.4}"))?;
    Ok(format!(
        "corpus WER {:.3} -> {:.3} at 0.7 (at 0.3: {:.3} -> {:.3})",
        before, after, runs[1].1, runs[1].2
    ))
}

fn ssr(out: &Path, args: &[&str]) -> Result<String, String> {
    let res = Command::new(env!("CARGO_BIN_EXE_ssr"))
        .arg("--out")
        .arg(out)
        .args(["--beam-width", "8"])
        .args(args)
        .output()
        .map_err(err)?;
    if !res.status.success() {
        return Err(format!(
            "`ssr {}` exited with {}: {}",
            args.join(" "),
            res.status,
            String::from_utf8_lossy(&res.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&res.stdout).into_owned())
}

fn c11_pipeline() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let out = dir.path();
    for step in [
        "gen-corpus",
        "featurize",
        "align",
        "train-transducer",
        "transduce",
        "train-asr",
        "transcribe",
        "correct",
        "evaluate",
    ] {
        ssr(out, &[step])?;
    }
    let text = ssr(out, &["report"])?;
    let header: Vec<&str> = text.lines().next().unwrap_or("").split('|').map(str::trim).collect();
    ensure(header == TABLE_COLUMNS, || format!("report header {header:?}"))?;
    let csv = std::fs::read_to_string(out.join("report.csv")).map_err(err)?;
    ensure(csv.lines().next() == Some(CSV_HEADER), || format!("csv header {:?}", csv.lines().next()))?;
    let report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval_report.json")).map_err(err)?).map_err(err)?;
    ensure(report.rows.len() == 2, || format!("{} rows", report.rows.len()))?;
    ensure(report.details.iter().all(|d| d.utterances.len() == 20), || "not 20 utterances per system".into())?;
    let manifest = ssr_core::corpus::load_manifest(&out.join("corpus/manifest.jsonl")).map_err(err)?;
    ensure(manifest.entries.len() == 20, || "manifest size".into())?;
    Ok(format!(
        "WER {:.1}% -> {:.1}% over 20 utterances",
        report.rows[0].wer_percent, report.rows[1].wer_percent
    ))
}
