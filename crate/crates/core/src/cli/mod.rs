//! Command-line entry point.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
//! Failures print one line `error: <usage|data|numeric>: <reason>` to stderr.

mod ablate;
mod config;

pub use ablate::{ablation_grid, run_ablation, AblationEntry, AblationGrid};
pub use config::{RunConfig, Snapshot};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::interpret::{
    attribute_sample, counterfactual_study, overlay_csv, overlay_rows, parse_overlay_csv, position_amplitudes,
    render_overlay_svg, CounterfactualKind, MaskRegime,
};
use crate::metrics;
use crate::model::{read_checkpoint, write_checkpoint, Checkpoint, ModelState};
use crate::pipeline;
use crate::signal_io::{read_segments, synthesize_dataset, write_segments, DatasetManifest};
use crate::tokenizer::{read_dataset, write_dataset, TokenDataset};
use crate::training::{history_csv, run_training};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Usage => 1,
            Self::Data => 2,
            Self::Numeric => 3,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Self::Usage => "usage",
            Self::Data => "data",
            Self::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Usage, message: m.into() }
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Data, message: m.into() }
    }

    pub fn numeric(m: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Numeric, message: m.into() }
    }

    /// The single diagnostic line.
    pub fn line(&self) -> String {
        let flat: String = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error: {}: {flat}", self.kind.tag())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::data(e.to_string())
            }
        }
    )*};
}

data_errors!(crate::signal_io::SignalError, crate::tokenizer::TokenizerError, std::io::Error);

impl From<crate::model::ModelError> for CliError {
    fn from(e: crate::model::ModelError) -> Self {
        use crate::model::ModelError::*;
        match e {
            NonFiniteLoss(_) => CliError::numeric(e.to_string()),
            Config(_) => CliError::usage(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<crate::training::TrainingError> for CliError {
    fn from(e: crate::training::TrainingError) -> Self {
        use crate::training::TrainingError::*;
        match e {
            Model(m) => m.into(),
            NonFiniteGradient { .. } => CliError::numeric(e.to_string()),
            InvalidArgument(_) => CliError::usage(e.to_string()),
            Counterfactual(c) => c.into(),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<crate::metrics::MetricsError> for CliError {
    fn from(e: crate::metrics::MetricsError) -> Self {
        match e {
            crate::metrics::MetricsError::Model(m) => m.into(),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<crate::interpret::InterpretError> for CliError {
    fn from(e: crate::interpret::InterpretError) -> Self {
        use crate::interpret::InterpretError::*;
        match e {
            NonFiniteGradient { .. } => CliError::numeric(e.to_string()),
            InvalidArgument(_) => CliError::usage(e.to_string()),
            Model(m) => m.into(),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<pipeline::PipelineError> for CliError {
    fn from(e: pipeline::PipelineError) -> Self {
        use pipeline::PipelineError::*;
        match e {
            Signal(x) => x.into(),
            Tokenizer(x) => x.into(),
            Model(x) => x.into(),
            Training(x) => x.into(),
            Metrics(x) => x.into(),
            Interpret(x) => x.into(),
            Config(m) => CliError::usage(m),
            e @ Diverged { .. } => CliError::numeric(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "egmlm", version, about = "Masked-token modelling of electrogram segments")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read WFDB or CSV recordings listed in a manifest and segment them.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a balanced synthetic segment set.
    Synth {
        /// Total segments (half per class).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split segments by placement and tokenize each split.
    Tokenize {
        #[arg(long)]
        segments: PathBuf,
        #[arg(long)]
        levels: Option<usize>,
        /// Train,validation,test fractions, e.g. 0.8,0.1,0.1
        #[arg(long, value_delimiter = ',', num_args = 3)]
        ratios: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a tokenized split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        alpha1: Option<f64>,
        #[arg(long)]
        alpha2: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        cf_kind: Option<CounterfactualKind>,
        #[arg(long)]
        cf_fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a tokenized split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integrated gradients and attention for one sequence.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        steps: Option<usize>,
        /// Also mask signal tokens (otherwise only the label slot).
        #[arg(long)]
        mask_signal: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a plainly trained and a counterfactually trained checkpoint.
    Counterfactual {
        #[arg(long)]
        plain: PathBuf,
        #[arg(long)]
        cf: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        kind: Option<CounterfactualKind>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one axis of the synthetic experiment.
    Ablate {
        #[arg(long)]
        grid: AblationGrid,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an overlay CSV as SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
}

/// Parses `argv` (program name first), runs the command, reports failures on
/// stderr and returns the exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::usage(first).line());
            return 1;
        }
    };
    let words: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, &words) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.kind.exit_code()
        }
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn set<T>(slot: &mut T, value: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = value {
        *slot = v.clone();
    }
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_tokens(path: &Path) -> CliResult<TokenDataset> {
    read_dataset(&read(path)?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    read_checkpoint(&read(path)?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn create(dir: &Path, config: &RunConfig, argv: &[String]) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        let out = Self { dir: dir.to_path_buf() };
        let snapshot = serde_json::to_string_pretty(&config.snapshot(argv)).expect("config serializes");
        out.write("config.json", snapshot.as_bytes())?;
        Ok(out)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }

    fn json<T: serde::Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

fn execute(cli: Cli, argv: &[String]) -> CliResult<()> {
    let mut config = resolve(&cli)?;
    match &cli.command {
        Command::Ingest { manifest, m, out } => {
            set(&mut config.segment_length, m);
            let text = fs::read_to_string(manifest).map_err(|e| CliError::data(format!("{}: {e}", manifest.display())))?;
            let parsed = DatasetManifest::from_json(&text)?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let set = parsed.load_segments(base, config.segment_length)?;
            config.split = parsed.splits.ratios;
            let out = Output::create(out, &config, argv)?;
            out.write("segments.bin", &write_segments(&set))?;
        }
        Command::Synth { n, m, out } => {
            set(&mut config.n_segments, n);
            set(&mut config.segment_length, m);
            let exp = config.experiment()?;
            let set = synthesize_dataset(exp.n_per_class, exp.segment_length, config.sub_seed("data"))?;
            let out = Output::create(out, &config, argv)?;
            out.write("segments.bin", &write_segments(&set))?;
        }
        Command::Tokenize { segments, levels, ratios, out } => {
            set(&mut config.levels, levels);
            if let Some(r) = ratios {
                config.split = [r[0], r[1], r[2]];
            }
            let set = read_segments(&read(segments)?)?;
            config.segment_length = set.segment_length;
            let splits = pipeline::tokenized_splits(&set, config.levels, config.split, config.sub_seed("split"))?;
            let out = Output::create(out, &config, argv)?;
            out.write("train.tok", &write_dataset(&splits.train)?)?;
            out.write("val.tok", &write_dataset(&splits.val)?)?;
            out.write("test.tok", &write_dataset(&splits.test)?)?;
            out.write("vocab.json", splits.train.vocabulary()?.to_json().as_bytes())?;
        }
        Command::Train {
            data,
            epochs,
            lr,
            alpha1,
            alpha2,
            batch_size,
            cf_kind,
            cf_fraction,
            out,
        } => {
            let t = &mut config.train;
            set(&mut t.epochs, epochs);
            set(&mut t.learning_rate, lr);
            set(&mut t.alpha1, alpha1);
            set(&mut t.alpha2, alpha2);
            set(&mut t.batch_size_train, batch_size);
            set(&mut t.counterfactual_kind, cf_kind);
            set(&mut t.counterfactual_fraction, cf_fraction);
            let dataset = load_tokens(data)?;
            config.levels = dataset.levels;
            config.segment_length = dataset.segment_length;
            let exp = config.experiment()?;
            let model = exp.model_config()?;
            let train = exp.train_config();
            train.validate()?;
            let out = Output::create(out, &config, argv)?;
            let result = run_training(&dataset, &model, &train)?;
            out.write("model.ckpt", &write_checkpoint(&result.checkpoint))?;
            out.write("history.csv", history_csv(&result.history).as_bytes())?;
            out.json(
                "train_summary.json",
                &serde_json::json!({
                    "steps": result.steps,
                    "diverged": result.diverged,
                    "parameters": result.checkpoint.state.weights.num_parameters(),
                }),
            )?;
            if let Some(d) = result.diverged {
                return Err(CliError::numeric(format!(
                    "training diverged at epoch {} step {}: {}; last good checkpoint written",
                    d.epoch, d.step, d.reason
                )));
            }
        }
        Command::Eval { checkpoint, data, batch_size, out } => {
            set(&mut config.train.batch_size_eval, batch_size);
            let ckpt = load_checkpoint(checkpoint)?;
            let dataset = load_tokens(data)?;
            let out = Output::create(out, &config, argv)?;
            let (report, details) = metrics::evaluate_detailed(&ckpt.state, &dataset, &config.eval_options())?;
            out.json("report.json", &report)?;
            out.write("sequences.csv", metrics::results_csv(&details).as_bytes())?;
        }
        Command::Attribute {
            checkpoint,
            data,
            index,
            steps,
            mask_signal,
            out,
        } => {
            set(&mut config.study.ig_steps, steps);
            let ckpt = load_checkpoint(checkpoint)?;
            let dataset = load_tokens(data)?;
            let seq = dataset
                .sequences
                .get(*index)
                .ok_or_else(|| CliError::usage(format!("index {index} outside dataset of {}", dataset.len())))?;
            let vocab = dataset.vocabulary()?;
            let regime = if *mask_signal {
                MaskRegime::LabelAndSignalMasked
            } else {
                MaskRegime::LabelMasked
            };
            let eval = config.eval_options();
            let mask_seed = crate::seed::nth(eval.mask_seed, *index as u64);
            let out = Output::create(out, &config, argv)?;
            let (masked, report, attention) =
                attribute_sample(&ckpt.state, seq, regime, eval.mask_rate, mask_seed, config.study.ig_steps, &vocab)?;
            let rows = overlay_rows(&position_amplitudes(&masked, &vocab), &attention, &report.per_token_scores)?;
            out.json("attribution.json", &report)?;
            out.write("overlay.csv", overlay_csv(&rows).as_bytes())?;
            out.write("overlay.svg", render_overlay_svg(&rows, &format!("sequence {index}")).as_bytes())?;
        }
        Command::Counterfactual {
            plain,
            cf,
            data,
            kind,
            window,
            length,
            samples,
            steps,
            out,
        } => {
            let cf_seed = config.sub_seed("counterfactual");
            let spec = &mut config.counterfactual;
            set(&mut spec.kind, kind);
            set(&mut spec.window, window);
            set(&mut spec.segment_length, length);
            spec.seed = cf_seed;
            set(&mut config.study.attribution_samples, samples);
            set(&mut config.study.ig_steps, steps);
            let a = load_checkpoint(plain)?;
            let b = load_checkpoint(cf)?;
            let dataset = load_tokens(data)?;
            let out = Output::create(out, &config, argv)?;
            let report = counterfactual_study(&a.state, &b.state, &dataset, &config.counterfactual, &config.study_options())?;
            out.json("study.json", &report)?;
            for s in &report.samples {
                let rows = overlay_rows(&s.amplitudes, &s.attention, &s.attribution.per_token_scores)?;
                let regime = match s.regime {
                    MaskRegime::LabelMasked => "label",
                    MaskRegime::LabelAndSignalMasked => "label_signal",
                };
                out.write(&format!("overlay_{}_{}_{regime}.csv", s.index, s.model), overlay_csv(&rows).as_bytes())?;
            }
        }
        Command::Ablate { grid, out } => {
            let out = Output::create(out, &config, argv)?;
            let entries = run_ablation(&config, *grid)?;
            for e in &entries {
                out.json(&format!("report_{}.json", e.label), &e.report)?;
            }
            out.json("summary.json", &entries)?;
            out.write("summary.csv", ablate::summary_csv(&entries).as_bytes())?;
        }
        Command::Plot { csv, out, title } => {
            let text = fs::read_to_string(csv).map_err(|e| CliError::data(format!("{}: {e}", csv.display())))?;
            let rows = parse_overlay_csv(&text).map_err(|e| CliError::data(e.to_string()))?;
            let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("overlay").to_string();
            let out = Output::create(out, &config, argv)?;
            let title = title.clone().unwrap_or_else(|| stem.clone());
            out.write(&format!("{stem}.svg"), render_overlay_svg(&rows, &title).as_bytes())?;
        }
    }
    Ok(())
}

/// Fresh model for `config`, used by callers that train outside the CLI.
pub fn init_model(config: &RunConfig) -> CliResult<ModelState> {
    Ok(ModelState::init(config.experiment()?.model_config()?)?)
}
