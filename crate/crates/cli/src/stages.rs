//! One function per subcommand. Every stage reads and writes files under the
//! work directory, so stages can be rerun or inspected independently.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use ssr_core::acoustic::{log_mel, MelSpectrogram};
use ssr_core::align::audio_target_transfer;
use ssr_core::asr::{beam_search, train_asr, AsrItem, AsrModel, AsrScorer, BeamConfig, Vocabulary};
use ssr_core::container::{read_features, write_features, write_path};
use ssr_core::corpus::{generate_corpus, load_manifest, CorpusManifest, ManifestEntry};
use ssr_core::correction::{correct, CorrectionProvider, CorrectionRequest, MockProvider, NBestEntry, RemoteProvider};
use ssr_core::eval::{normalize_words, render_report, time_utterance, EvalReport, ReportFormat, SystemDetail, UtteranceDetail};
use ssr_core::nn::{corpus_loss, train_transducer, Standardizer, TrainItem, Transducer};
use ssr_core::signals::{featurize_recording, FeatureMatrix};

use crate::config::PipelineConfig;
use crate::records::{
    read_jsonl, write_jsonl, write_loss_csv, AlignRecord, CorrectionRecord, NBestRecord, TimingRecord,
    TranscriptRecord,
};

pub const TRANSFORMER_SYSTEM: &str = "transformer";
pub const CORRECTED_SYSTEM: &str = "transformer + correction";

pub struct Workspace {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub manifest: PathBuf,
}

impl Workspace {
    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    fn dir(&self, rel: &str) -> Result<PathBuf> {
        let d = self.path(rel);
        fs::create_dir_all(&d).with_context(|| format!("cannot create {}", d.display()))?;
        Ok(d)
    }

    fn load_manifest(&self) -> Result<CorpusManifest> {
        let mut m = load_manifest(&self.manifest)
            .with_context(|| format!("cannot load manifest {}", self.manifest.display()))?;
        m.entries.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        Ok(m)
    }

    fn features(&self, id: &str, kind: &str) -> Result<FeatureMatrix> {
        let p = self.path(format!("features/{id}_{kind}.feat"));
        read_features(&p).with_context(|| format!("{id}: run `featurize` first"))
    }

    fn mel(&self, rel: String) -> Result<MelSpectrogram> {
        let m = read_features(&self.path(&rel)).with_context(|| format!("cannot read {rel}"))?;
        Ok(MelSpectrogram::from_features(&m, self.cfg.mel)?)
    }
}

/// Entries with silent EMG: the inference set.
fn silent_entries(m: &CorpusManifest) -> Vec<&ManifestEntry> {
    m.entries.iter().filter(|e| !e.silent_emg_path.is_empty()).collect()
}

/// Entries with silent EMG plus vocalized EMG and audio: the audio-target-transfer set.
fn parallel_entries(m: &CorpusManifest) -> Vec<&ManifestEntry> {
    m.entries
        .iter()
        .filter(|e| !e.silent_emg_path.is_empty() && e.vocal_emg_path.is_some() && e.audio_path.is_some())
        .collect()
}

fn non_empty<T>(items: Vec<T>, what: &str) -> Result<Vec<T>> {
    if items.is_empty() {
        bail!(ssr_core::Error::EmptyInput(format!("no {what} in the manifest")));
    }
    Ok(items)
}

pub fn gen_corpus(ws: &Workspace) -> Result<String> {
    let dir = ws.manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| ws.path("corpus"));
    let m = generate_corpus(&ws.cfg.corpus, &dir)?;
    let written = dir.join("manifest.jsonl");
    if written != ws.manifest {
        fs::rename(&written, &ws.manifest)
            .with_context(|| format!("cannot move manifest to {}", ws.manifest.display()))?;
    }
    Ok(format!(
        "wrote {} utterances over {} sessions to {}",
        m.entries.len(),
        m.sessions().len(),
        dir.display()
    ))
}

pub fn featurize(ws: &Workspace) -> Result<String> {
    let m = ws.load_manifest()?;
    ws.dir("features")?;
    ws.dir("mel")?;
    let counts = m
        .entries
        .par_iter()
        .map(|e| -> Result<usize> {
            let id = &e.utterance_id;
            let mut n = 0;
            if !e.silent_emg_path.is_empty() {
                let f = featurize_recording(&m.silent_emg(e)?, &ws.cfg.framing)?;
                write_features(&ws.path(format!("features/{id}_silent.feat")), &f)?;
                n += 1;
            }
            if let Some(rec) = m.vocal_emg(e)? {
                let f = featurize_recording(&rec, &ws.cfg.framing)?;
                write_features(&ws.path(format!("features/{id}_vocal.feat")), &f)?;
                n += 1;
            }
            if let Some((audio, rate)) = m.audio(e)? {
                if rate != ws.cfg.mel.sample_rate_hz {
                    bail!(ssr_core::Error::Ingestion {
                        entry: id.clone(),
                        detail: format!("audio is {rate} Hz, mel.sample_rate_hz is {}", ws.cfg.mel.sample_rate_hz),
                    });
                }
                let mel = log_mel(&audio, &ws.cfg.mel)?;
                write_features(&ws.path(format!("mel/{id}.mel")), &mel.to_features()?)?;
                n += 1;
            }
            Ok(n)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(format!(
        "featurized {} utterances ({} files)",
        m.entries.len(),
        counts.iter().sum::<usize>()
    ))
}

pub fn align(ws: &Workspace) -> Result<String> {
    let m = ws.load_manifest()?;
    let entries = non_empty(parallel_entries(&m), "parallel silent/vocalized entries")?;
    ws.dir("targets")?;
    ws.dir("align")?;
    let records = entries
        .par_iter()
        .map(|e| -> Result<AlignRecord> {
            let id = &e.utterance_id;
            let silent = ws.features(id, "silent")?;
            let vocal = ws.features(id, "vocal")?;
            let mel = ws.mel(format!("mel/{id}.mel"))?;
            let out = audio_target_transfer(&silent, &vocal, &mel, &ws.cfg.att).with_context(|| format!("{id}: alignment"))?;
            let targets = MelSpectrogram {
                data: out.targets,
                config: ws.cfg.mel,
            };
            write_features(&ws.path(format!("targets/{id}.mel")), &targets.to_features()?)?;
            write_path(&ws.path(format!("align/{id}.path")), &out.path)?;
            Ok(AlignRecord {
                utterance_id: id.clone(),
                silent_frames: silent.frames(),
                vocal_frames: vocal.frames(),
                path_length: out.path.pairs.len(),
                cca_correlations: out.cca.map(|c| c.correlations).unwrap_or_default(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&ws.path("align/summary.jsonl"), &records)?;
    Ok(format!("transferred audio targets for {} utterances", records.len()))
}

pub fn train_transducer_stage(ws: &Workspace) -> Result<String> {
    let m = ws.load_manifest()?;
    let entries = non_empty(parallel_entries(&m), "parallel silent/vocalized entries")?;
    let items = entries
        .iter()
        .map(|e| -> Result<TrainItem> {
            let id = &e.utterance_id;
            let target = ws.mel(format!("targets/{id}.mel")).with_context(|| format!("{id}: run `align` first"))?;
            Ok(TrainItem {
                features: ws.features(id, "silent")?.into_data(),
                target: target.data,
                session: e.session_id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stage = &ws.cfg.transducer;
    let mut model = Transducer::new(stage.model, items[0].features.ncols(), ws.cfg.mel.n_mels, m.sessions())?;
    model.input_norm = Standardizer::fit(items.iter().map(|i| &i.features))?;
    model.output_norm = Standardizer::fit(items.iter().map(|i| &i.target))?;
    let tc = ssr_core::nn::TrainConfig { loss: stage.loss, ..stage.train };
    let before = corpus_loss(&model, &items, tc.loss)?;
    let losses = train_transducer(&mut model, &items, &tc)?;
    let after = corpus_loss(&model, &items, tc.loss)?;
    model.save(&ws.path("transducer.json"))?;
    write_loss_csv(&ws.path("transducer_loss.csv"), &losses)?;
    Ok(format!(
        "trained transducer on {} utterances for {} steps: loss {before:.4} -> {after:.4}",
        items.len(),
        losses.len()
    ))
}

pub fn transduce(ws: &Workspace) -> Result<String> {
    let m = ws.load_manifest()?;
    let entries = non_empty(silent_entries(&m), "silent entries")?;
    let model = Transducer::load(&ws.path("transducer.json")).context("run `train-transducer` first")?;
    ws.dir("transduced")?;
    let timings = entries
        .par_iter()
        .map(|e| -> Result<TimingRecord> {
            let id = &e.utterance_id;
            let feats = ws.features(id, "silent")?;
            let (pred, seconds) = time_utterance(|| model.predict(feats.data(), &e.session_id));
            let mel = MelSpectrogram {
                data: pred.with_context(|| format!("{id}: transduction"))?,
                config: ws.cfg.mel,
            };
            write_features(&ws.path(format!("transduced/{id}.mel")), &mel.to_features()?)?;
            Ok(TimingRecord {
                utterance_id: id.clone(),
                seconds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&ws.path("transduced/timing.jsonl"), &timings)?;
    Ok(format!("transduced {} silent utterances", timings.len()))
}

pub fn train_asr_stage(ws: &Workspace) -> Result<String> {
    let m = ws.load_manifest()?;
    let entries = non_empty(
        m.entries.iter().filter(|e| e.audio_path.is_some()).collect(),
        "entries with audio",
    )?;
    let items = entries
        .iter()
        .map(|e| -> Result<AsrItem> {
            let id = &e.utterance_id;
            Ok(AsrItem {
                mel: ws.mel(format!("mel/{id}.mel")).with_context(|| format!("{id}: run `featurize` first"))?.data,
                transcript: e.transcript.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_texts(items.iter().map(|i| i.transcript.as_str()));
    let mut model = AsrModel::new(ws.cfg.asr.model, ws.cfg.mel.n_mels, vocab)?;
    model.input_norm = Standardizer::fit(items.iter().map(|i| &i.mel))?;
    let losses = train_asr(&mut model, &items, &ws.cfg.asr.train)?;
    model.save(&ws.path("asr.json"))?;
    write_loss_csv(&ws.path("asr_loss.csv"), &losses)?;
    let tail = &losses[losses.len().saturating_sub(10)..];
    Ok(format!(
        "trained recogniser on {} utterances for {} steps: loss {:.4} -> {:.4} (mean of last {})",
        items.len(),
        losses.len(),
        losses[0],
        tail.iter().sum::<f64>() / tail.len() as f64,
        tail.len()
    ))
}

fn read_timings(path: &Path) -> Result<BTreeMap<String, f64>> {
    if !path.is_file() {
        return Ok(BTreeMap::new());
    }
    Ok(read_jsonl::<TimingRecord>(path)?
        .into_iter()
        .map(|t| (t.utterance_id, t.seconds))
        .collect())
}

pub fn transcribe(ws: &Workspace) -> Result<String> {
    let m = ws.load_manifest()?;
    let entries = non_empty(silent_entries(&m), "silent entries")?;
    let model = AsrModel::load(&ws.path("asr.json")).context("run `train-asr` first")?;
    let transduce_s = read_timings(&ws.path("transduced/timing.jsonl"))?;
    let beam = BeamConfig {
        beam_width: ws.cfg.beam_width,
        max_len: ws.cfg.max_len,
        length_norm: ws.cfg.length_norm,
    };
    let decoded = entries
        .par_iter()
        .map(|e| -> Result<(TranscriptRecord, Vec<NBestRecord>)> {
            let id = &e.utterance_id;
            let mel = ws
                .mel(format!("transduced/{id}.mel"))
                .with_context(|| format!("{id}: run `transduce` first"))?;
            let (hyps, seconds) = time_utterance(|| -> Result<_> {
                let scorer = AsrScorer::new(&model, &mel.data)?;
                Ok(beam_search(&scorer, &beam)?)
            });
            let hyps = hyps.with_context(|| format!("{id}: decoding"))?;
            let nbest = hyps
                .iter()
                .take(ws.cfg.n_best)
                .enumerate()
                .map(|(rank, h)| -> Result<NBestRecord> {
                    Ok(NBestRecord {
                        utterance_id: id.clone(),
                        rank: rank + 1,
                        log_prob: h.log_prob,
                        transcript: model.vocab.detokenize(&h.tokens)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let best = nbest.first().map(|n| n.transcript.clone()).unwrap_or_default();
            Ok((
                TranscriptRecord {
                    utterance_id: id.clone(),
                    transcript: best,
                    seconds: seconds + transduce_s.get(id).copied().unwrap_or(0.0),
                },
                nbest,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (hyps, nbest): (Vec<_>, Vec<_>) = decoded.into_iter().unzip();
    write_jsonl(&ws.path("nbest.jsonl"), &nbest.concat())?;
    write_jsonl(&ws.path("hypotheses/transformer.jsonl"), &hyps)?;
    Ok(format!("decoded {} utterances with beam width {}", hyps.len(), beam.beam_width))
}

fn provider(ws: &Workspace) -> Result<Box<dyn CorrectionProvider>> {
    let c = &ws.cfg.correction;
    match c.provider.as_str() {
        "mock" => {
            let lexicon: BTreeSet<String> = ws
                .load_manifest()?
                .entries.iter().flat_map(|e| normalize_words(&e.transcript)).collect();
            Ok(Box::new(MockProvider::new(lexicon, c.n_candidates)))
        }
        "remote" => Ok(Box::new(RemoteProvider::new(c.endpoint.clone(), c.timeout_s, c.retries)?)),
        other => Err(anyhow!(ssr_core::Error::Parameter(format!("unknown provider `{other}`")))),
    }
}

pub fn correct_stage(ws: &Workspace) -> Result<String> {
    let provider = provider(ws)?;
    let base: Vec<TranscriptRecord> =
        read_jsonl(&ws.path("hypotheses/transformer.jsonl")).context("run `transcribe` first")?;
    let mut nbest: BTreeMap<String, Vec<NBestEntry>> = BTreeMap::new();
    for r in read_jsonl::<NBestRecord>(&ws.path("nbest.jsonl"))? {
        nbest.entry(r.utterance_id).or_default().push(NBestEntry {
            text: r.transcript,
            log_prob: r.log_prob,
        });
    }
    let filter = &ws.cfg.correction.filter;
    let records = base
        .par_iter()
        .map(|h| -> Result<CorrectionRecord> {
            let request = CorrectionRequest {
                transcript: h.transcript.clone(),
                n_best: nbest.get(&h.utterance_id).cloned().unwrap_or_default(),
                max_tokens: filter.max_seq_tokens,
            };
            let (outcome, seconds) = time_utterance(|| correct(provider.as_ref(), &request, filter));
            let outcome = outcome.with_context(|| format!("{}: correction", h.utterance_id))?;
            Ok(CorrectionRecord {
                utterance_id: h.utterance_id.clone(),
                transcript: outcome.output,
                seconds: h.seconds + seconds,
                input: outcome.input,
                provider: provider.id().to_string(),
                proposed: outcome.proposed,
                accepted: outcome.accepted,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&ws.path("hypotheses/corrected.jsonl"), &records)?;
    let changed = records.iter().filter(|r| r.transcript != r.input).count();
    Ok(format!(
        "corrected {} utterances with the {} provider; {} changed",
        records.len(),
        provider.id(),
        changed
    ))
}

/// `name=path` pairs; the first system is the baseline.
pub fn parse_systems(specs: &[String], ws: &Workspace) -> Result<Vec<(String, PathBuf)>> {
    if specs.is_empty() {
        return Ok(vec![
            (TRANSFORMER_SYSTEM.to_string(), ws.path("hypotheses/transformer.jsonl")),
            (CORRECTED_SYSTEM.to_string(), ws.path("hypotheses/corrected.jsonl")),
        ]);
    }
    specs
        .iter()
        .map(|s| match s.split_once('=') {
            Some((name, path)) if !name.trim().is_empty() && !path.is_empty() => {
                Ok((name.trim().to_string(), PathBuf::from(path)))
            }
            _ => Err(anyhow!(ssr_core::Error::Parameter(format!(
                "--system expects NAME=PATH, got `{s}`"
            )))),
        })
        .collect()
}

pub fn evaluate(ws: &Workspace, systems: &[(String, PathBuf)], references: Option<&Path>) -> Result<String> {
    let ref_path = references.map(Path::to_path_buf).unwrap_or_else(|| ws.manifest.clone());
    let refs: BTreeMap<String, String> = read_jsonl::<TranscriptRecord>(&ref_path)?
        .into_iter()
        .map(|r| (r.utterance_id, r.transcript))
        .collect();
    let mut details = Vec::with_capacity(systems.len());
    let mut ids: Option<Vec<String>> = None;
    for (name, path) in systems {
        let mut hyps: Vec<TranscriptRecord> = read_jsonl(path)?;
        hyps.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        let these: Vec<String> = hyps.iter().map(|h| h.utterance_id.clone()).collect();
        if these.windows(2).any(|w| w[0] == w[1]) {
            bail!(ssr_core::Error::Parameter(format!("{name}: duplicate utterance ids in {}", path.display())));
        }
        match &ids {
            None => ids = Some(these),
            Some(first) if *first != these => bail!(ssr_core::Error::Parameter(format!(
                "{name}: {} covers different utterances than the baseline system",
                path.display()
            ))),
            Some(_) => {}
        }
        let utterances = hyps
            .iter()
            .map(|h| -> Result<UtteranceDetail> {
                let r = refs.get(&h.utterance_id).ok_or_else(|| {
                    anyhow!(ssr_core::Error::Lookup(format!(
                        "no reference transcript for `{}` in {}",
                        h.utterance_id,
                        ref_path.display()
                    )))
                })?;
                Ok(UtteranceDetail::score(&h.utterance_id, r, &h.transcript, h.seconds))
            })
            .collect::<Result<Vec<_>>>()?;
        details.push(SystemDetail {
            system: name.clone(),
            utterances,
        });
    }
    let report = EvalReport::from_details(details)?;
    let path = ws.path("eval_report.json");
    fs::create_dir_all(&ws.out)?;
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    Ok(render_report(&report, ReportFormat::TableText))
}

pub fn report(ws: &Workspace, fixture: bool, input: Option<&Path>, format: ReportFormat) -> Result<String> {
    let report = if fixture {
        EvalReport::table1_fixture()
    } else {
        let p = input.map(Path::to_path_buf).unwrap_or_else(|| ws.path("eval_report.json"));
        let text = fs::read_to_string(&p).with_context(|| format!("cannot read {}; run `evaluate` first", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{} is not an evaluation report", p.display()))?
    };
    fs::create_dir_all(&ws.out)?;
    for (f, name) in [
        (ReportFormat::TableText, "report.txt"),
        (ReportFormat::Csv, "report.csv"),
        (ReportFormat::PlotData, "report_plot.csv"),
    ] {
        fs::write(ws.path(name), render_report(&report, f))?;
    }
    Ok(render_report(&report, format))
}
