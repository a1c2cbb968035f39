use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use groundalign::detector::transport::serve_lines;
use groundalign::detector::{MockDetector, MockScript};
use groundalign::evaluation::ThresholdMode;
use groundalign::pipeline::{
    self, Context, DetectorSpec, ExpressionSource, Overrides, ReportInput, RunConfig,
};
use groundalign::{Error, Result};

#[derive(Parser)]
#[command(name = "groundalign", version, about = "Expression alignment and pseudo-labelling for grounding detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Directory that relative paths resolve against and outputs land in.
    #[arg(long, default_value = ".")]
    workdir: PathBuf,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    federated: Option<PathBuf>,
    #[arg(long)]
    images_root: Option<PathBuf>,
    #[arg(long)]
    terms: Option<PathBuf>,
    /// Detector command line, run as a subprocess adapter.
    #[arg(long, num_args = 1.., value_delimiter = ' ', conflicts_with = "detector_url")]
    detector_cmd: Option<Vec<String>>,
    /// HTTP detector endpoint.
    #[arg(long)]
    detector_url: Option<String>,
    #[arg(long)]
    initial_model: Option<String>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    max_iterations: Option<u32>,
    #[arg(long)]
    holdout_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn context(&self) -> Result<Context> {
        let detector = match (&self.detector_cmd, &self.detector_url) {
            (Some(cmd), _) => Some(DetectorSpec::Subprocess {
                command: cmd.clone(),
            }),
            (None, Some(url)) => Some(DetectorSpec::Http { url: url.clone() }),
            _ => None,
        };
        let flags = Overrides {
            annotations: self.annotations.clone(),
            federated: self.federated.clone(),
            images_root: self.images_root.clone(),
            terms: self.terms.clone(),
            detector,
            initial_model: self.initial_model.clone(),
            n_candidates: self.candidates,
            shots_k: self.shots,
            eta: self.eta,
            iou_threshold: self.iou_threshold,
            max_iterations: self.max_iterations,
            holdout_fraction: self.holdout_fraction,
            seed: self.seed,
        };
        let file = self.config.as_ref().map(|p| {
            if p.is_absolute() || p.exists() {
                p.clone()
            } else {
                self.workdir.join(p)
            }
        });
        let config = RunConfig::resolve(file.as_deref(), flags)?;
        Context::new(&self.workdir, config)
    }
}

#[derive(Args, Clone)]
struct ExpressionArgs {
    /// `classnames` to use raw category names instead of a selection file.
    #[arg(long, default_value = "selection")]
    expressions: String,
    /// Selection file written by `align`.
    #[arg(long, default_value = pipeline::SELECTION_FILE)]
    selection: PathBuf,
}

impl ExpressionArgs {
    fn source(&self) -> Result<ExpressionSource> {
        match self.expressions.as_str() {
            "classnames" => Ok(ExpressionSource::ClassNames),
            "selection" => Ok(ExpressionSource::Selection(self.selection.clone())),
            other => Err(Error::Config(format!(
                "--expressions must be 'selection' or 'classnames', got '{other}'"
            ))),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pick the best referential expression per category.
    Align {
        #[command(flatten)]
        common: Common,
    },
    /// Generate one round of pseudo labels with the initial model.
    GenPseudo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        expr: ExpressionArgs,
    },
    /// Run the pseudo-label / finetune loop.
    Iterate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        expr: ExpressionArgs,
    },
    /// COCO-style evaluation of a results file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Single threshold (`0.5`) or range (`0.5:0.95`).
        #[arg(long, default_value = "0.5:0.95")]
        iou: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render an alignment or comparison report.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "comparison")]
        selection: Option<PathBuf>,
        /// JSON array of `{"method": ..., "map": ...}`.
        #[arg(long)]
        comparison: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the built-in mock detector on stdin/stdout.
    MockDetector {
        #[arg(long)]
        script: PathBuf,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Align { common } => {
            let ctx = common.context()?;
            let out = pipeline::cmd_align(&ctx)?;
            print!("{}", out.report.text);
        }
        Command::GenPseudo { common, expr } => {
            let ctx = common.context()?;
            let out = pipeline::cmd_gen_pseudo(&ctx, &expr.source()?)?;
            println!(
                "{} pseudo labels ({} suppressed)",
                out.batch.labels.len(),
                out.batch.suppressed
            );
        }
        Command::Iterate { common, expr } => {
            let ctx = common.context()?;
            let state = pipeline::cmd_iterate(&ctx, &expr.source()?)?;
            for h in &state.history {
                let labels: usize = h.label_counts.values().sum();
                match h.metric {
                    Some(m) => println!("iter {} model {} labels {} mAP@0.5 {:.4}", h.iteration, h.model, labels, m),
                    None => println!("iter {} model {} labels {}", h.iteration, h.model, labels),
                }
            }
        }
        Command::Eval {
            common,
            results,
            gt,
            iou,
            out,
        } => {
            let ctx = common.context()?;
            let mode = ThresholdMode::parse(&iou)?;
            let fed = ctx.config.federated.clone();
            let report = pipeline::cmd_eval(&ctx, &results, &gt, fed.as_deref(), mode, out.as_deref())?;
            print!("{}", report.to_text());
        }
        Command::Report {
            common,
            selection,
            comparison,
            out,
        } => {
            let ctx = common.context()?;
            let input = match (selection, comparison) {
                (_, Some(c)) => ReportInput::Comparison(c),
                (Some(s), None) => ReportInput::Selection(s),
                (None, None) => ReportInput::Selection(ctx.workdir.join(pipeline::SELECTION_FILE)),
            };
            let report = pipeline::cmd_report(&ctx, &input, out.as_deref())?;
            print!("{}", report.text);
        }
        Command::MockDetector { script } => {
            let mut mock = MockDetector::new(MockScript::load(&script)?)?;
            let stdin = io::stdin();
            serve_lines(&mut mock, BufReader::new(stdin.lock()), io::stdout().lock())
                .map_err(|e| Error::io("<stdio>", e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
