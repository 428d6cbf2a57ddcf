//! `ssr`: silent-speech recognition pipeline from EMG to corrected transcripts.

mod config;
mod records;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ssr_core::eval::ReportFormat;

use config::{ConfigErrors, PipelineConfig};
use stages::Workspace;

#[derive(Parser)]
#[command(name = "ssr", version, about = "EMG silent-speech recognition pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML configuration merged over the built-in defaults.
    #[arg(long, global = true, env = "SSR_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed for corpus generation, initialisation and training.
    #[arg(long, global = true, env = "SSR_SEED")]
    seed: Option<u64>,
    /// Corpus manifest (default: <out>/corpus/manifest.jsonl).
    #[arg(long, global = true, env = "SSR_MANIFEST")]
    manifest: Option<PathBuf>,
    /// Work directory holding every artifact.
    #[arg(long, global = true, env = "SSR_OUT", default_value = "work")]
    out: PathBuf,
    #[arg(long, global = true, env = "SSR_BEAM_WIDTH")]
    beam_width: Option<usize>,
    #[arg(long, global = true, env = "SSR_CONFIDENCE_THRESHOLD")]
    confidence_threshold: Option<f64>,
    #[arg(long, global = true, env = "SSR_PROVIDER")]
    provider: Option<Provider>,
    /// host:port of the remote correction service.
    #[arg(long, global = true, env = "SSR_PROVIDER_ENDPOINT")]
    provider_endpoint: Option<String>,
    #[arg(long, global = true, env = "SSR_TIMEOUT_S")]
    timeout_s: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Provider {
    Mock,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    Table1,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    TableText,
    Csv,
    PlotData,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic parallel silent/vocalized corpus and its manifest.
    GenCorpus,
    /// EMG features for every recording and log-mel spectrograms for every audio file.
    Featurize,
    /// Transfer vocalized audio targets onto silent EMG frames.
    Align,
    /// Train the EMG-to-mel transducer on silent features and transferred targets.
    TrainTransducer,
    /// Predict mel spectrograms from silent EMG.
    Transduce,
    /// Train the recogniser on vocalized audio spectrograms.
    TrainAsr,
    /// Beam-search transcripts from transduced spectrograms.
    Transcribe,
    /// Filtered transcript correction over the N-best lists.
    Correct,
    /// Score transcript sets against references.
    Evaluate {
        /// NAME=PATH of a transcript JSONL file; repeat for each system, baseline first.
        #[arg(long = "system")]
        systems: Vec<String>,
        /// JSONL with utterance_id and transcript (default: the manifest).
        #[arg(long)]
        references: Option<PathBuf>,
    },
    /// Render an evaluation report as a table, CSV or plot data.
    Report {
        #[arg(long)]
        fixture: Option<Fixture>,
        /// Evaluation report JSON (default: <out>/eval_report.json).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table-text")]
        format: Format,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn resolve_config(g: &GlobalArgs) -> anyhow::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.apply_seed(s);
    }
    if let Some(b) = g.beam_width {
        cfg.beam_width = b;
    }
    if let Some(t) = g.confidence_threshold {
        cfg.correction.filter.confidence_threshold = t;
    }
    if let Some(p) = g.provider {
        cfg.correction.provider = match p {
            Provider::Mock => "mock",
            Provider::Remote => "remote",
        }
        .into();
    }
    if let Some(e) = &g.provider_endpoint {
        cfg.correction.endpoint = e.clone();
    }
    if let Some(t) = g.timeout_s {
        cfg.correction.timeout_s = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let cfg = resolve_config(&cli.global)?;
    let manifest = cli
        .global
        .manifest
        .clone()
        .unwrap_or_else(|| cli.global.out.join("corpus").join("manifest.jsonl"));
    let ws = Workspace {
        cfg,
        out: cli.global.out.clone(),
        manifest,
    };
    match cli.command {
        Command::GenCorpus => stages::gen_corpus(&ws),
        Command::Featurize => stages::featurize(&ws),
        Command::Align => stages::align(&ws),
        Command::TrainTransducer => stages::train_transducer_stage(&ws),
        Command::Transduce => stages::transduce(&ws),
        Command::TrainAsr => stages::train_asr_stage(&ws),
        Command::Transcribe => stages::transcribe(&ws),
        Command::Correct => stages::correct_stage(&ws),
        Command::Evaluate { systems, references } => {
            let systems = stages::parse_systems(&systems, &ws)?;
            stages::evaluate(&ws, &systems, references.as_deref())
        }
        Command::Report { fixture, input, format } => {
            let format = match format {
                Format::TableText => ReportFormat::TableText,
                Format::Csv => ReportFormat::Csv,
                Format::PlotData => ReportFormat::PlotData,
            };
            stages::report(&ws, fixture.is_some(), input.as_deref(), format)
        }
        Command::ShowConfig => Ok(toml::to_string(&ws.cfg)?),
    }
}

/// Exit status and label for a failure.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    if err.downcast_ref::<ConfigErrors>().is_some() {
        return (2, "config");
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ssr_core::Error>() {
            let code = match e {
                ssr_core::Error::Parameter(_) => 2,
                ssr_core::Error::Ingestion { .. } | ssr_core::Error::Format { .. } | ssr_core::Error::Io(_) => 3,
                ssr_core::Error::Timeout(_) | ssr_core::Error::Provider(_) => 4,
                ssr_core::Error::TrainingDivergence { .. } => 5,
                _ => 1,
            };
            return (code, e.category());
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (3, "io");
        }
    }
    (1, "error")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{}", msg.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, label) = classify(&e);
            eprintln!("error [{label}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
