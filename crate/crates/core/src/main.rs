use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cllrce_core::io;
use cllrce_core::losses::LossKind;
use cllrce_core::metrics::DcfParams;
use cllrce_core::model::Pooling;
use cllrce_core::pipeline::{self, ExperimentConfig};
use cllrce_core::scoring::BackendKind;
use cllrce_core::Error;

/// CllrCE speaker-embedding experiments on synthetic multi-style data.
#[derive(Parser)]
#[command(name = "cllrce", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed for every stage.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut config = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.set_seed(seed);
        }
        Ok(config)
    }
}

#[derive(Args)]
struct DcfArgs {
    #[arg(long, default_value_t = 0.01)]
    p_target: f64,
    #[arg(long, default_value_t = 1.0)]
    c_miss: f64,
    #[arg(long, default_value_t = 1.0)]
    c_fa: f64,
}

impl DcfArgs {
    fn params(&self) -> DcfParams {
        DcfParams {
            p_target: self.p_target,
            c_miss: self.c_miss,
            c_fa: self.c_fa,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the default experiment config.
    Config,
    /// Generate and split a synthetic corpus into a feature archive.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the corpus training split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = parse::<LossKind>)]
        loss: Option<LossKind>,
        #[arg(long, value_parser = parse::<Pooling>)]
        pooling: Option<Pooling>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Training history (JSON); defaults to `<out>.history.json`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Embed every corpus utterance with a trained checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the enroll-style x test-style trial list.
    Trials {
        #[arg(long)]
        embeddings: PathBuf,
        /// Restrict to one condition (requires --test-style).
        #[arg(long, requires = "test_style")]
        enroll_style: Option<usize>,
        #[arg(long, requires = "enroll_style")]
        test_style: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list.
    Score {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, default_value = "cosine", value_parser = parse::<BackendKind>)]
        backend: BackendKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// EER, minDCF and Cllr, pooled and per style condition.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Labels; without it, labels follow the speaker ids in the keys.
        #[arg(long)]
        trials: Option<PathBuf>,
        #[command(flatten)]
        dcf: DcfArgs,
        #[arg(long, default_value = "system")]
        name: String,
        /// Metrics record (JSON); printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// McNemar test between two score files, each at its own EER threshold.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, default_value = "a")]
        name_a: String,
        #[arg(long, default_value = "b")]
        name_b: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-condition table from metrics records, as text and CSV.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        compare: Vec<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        out_text: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Full pipeline: synth, train, embed, score, eval, compare and report.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Comma-separated losses; the first is the baseline.
        #[arg(long, value_delimiter = ',', value_parser = parse::<LossKind>)]
        systems: Vec<LossKind>,
        #[arg(long, value_parser = parse::<Pooling>)]
        pooling: Option<Pooling>,
        #[arg(long, value_parser = parse::<BackendKind>)]
        backend: Option<BackendKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        p_target: Option<f64>,
    },
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    print!("{}", io::to_json(value)?);
    Ok(())
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Config => print!("{}", ExperimentConfig::default().to_toml()),
        Command::Synth { cfg, out } => pipeline::cmd_synth(&cfg.load()?, &out)?,
        Command::Train {
            cfg,
            corpus,
            loss,
            pooling,
            epochs,
            out,
            history,
        } => {
            let mut config = cfg.load()?;
            if let Some(p) = pooling {
                config.model.pooling = p;
            }
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            let loss = loss.unwrap_or(config.train.loss_kind);
            let history = history.unwrap_or_else(|| pipeline::history_path(&out));
            pipeline::cmd_train(&config, &corpus, loss, &out, &history)?;
        }
        Command::Embed { checkpoint, corpus, out } => {
            pipeline::cmd_embed(&checkpoint, &corpus, &out)?;
        }
        Command::Trials {
            embeddings,
            enroll_style,
            test_style,
            out,
        } => {
            pipeline::cmd_trials(&embeddings, enroll_style.zip(test_style), &out)?;
        }
        Command::Score {
            embeddings,
            trials,
            backend,
            out,
        } => {
            pipeline::cmd_score(&embeddings, &trials, backend, &out)?;
        }
        Command::Eval {
            scores,
            trials,
            dcf,
            name,
            out,
        } => {
            let record = pipeline::cmd_eval(&name, &scores, trials.as_deref(), &dcf.params(), out.as_deref())?;
            if out.is_none() {
                print_json(&record)?;
            }
        }
        Command::Compare {
            a,
            b,
            trials,
            name_a,
            name_b,
            out,
        } => {
            let record = pipeline::cmd_compare((&name_a, &a), (&name_b, &b), &trials, out.as_deref())?;
            if out.is_none() {
                print_json(&record)?;
            }
        }
        Command::Report {
            metrics,
            compare,
            baseline,
            out_text,
            out_csv,
        } => {
            let table = pipeline::cmd_report(
                &metrics,
                &compare,
                baseline.as_deref(),
                out_text.as_deref(),
                out_csv.as_deref(),
            )?;
            print!("{}", table.to_text());
        }
        Command::Run {
            cfg,
            out_dir,
            systems,
            pooling,
            backend,
            epochs,
            p_target,
        } => {
            let mut config = cfg.load()?;
            if let Some(d) = out_dir {
                config.output_dir = d;
            }
            if !systems.is_empty() {
                config.systems = systems;
            }
            if let Some(p) = pooling {
                config.model.pooling = p;
            }
            if let Some(b) = backend {
                config.backend = b;
            }
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            if let Some(p) = p_target {
                config.dcf.p_target = p;
            }
            let (_, table) = pipeline::run(&config)?;
            print!("{}", table.to_text());
            eprintln!("artifacts written to {}", config.output_dir.display());
        }
    }
    Ok(())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Contract(_) => "contract",
        Error::NonFiniteGradient { .. } => "non_finite_gradient",
        Error::Io { .. } => "io",
        Error::Format(_) => "format",
        Error::Config(_) => "config",
    }
}

/// Errors are reported as one line: `error[<kind>]: <message>`.
fn fail(kind: &str, message: &str) -> ExitCode {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error[{kind}]: {message}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            return fail("usage", first.trim_start_matches("error: "));
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(error_kind(&e), &e.to_string()),
    }
}
