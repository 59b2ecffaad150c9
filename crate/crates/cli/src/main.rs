use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpcal::calibration::{evaluate, Recalibrator, DEFAULT_BINS};
use dpcal::data::{load_features, make_gaussian_mixture, make_gaussian_mixture_test};
use dpcal::harness::{self, ExperimentConfig, ExperimentKind, OutputFormat};
use dpcal::{Error, LinearModel};

#[derive(Parser)]
#[command(
    name = "dpcal",
    version,
    about = "Calibration experiments for DP-SGD trained classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-mixture train/test pair as feature CSVs.
    Synth {
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 10_000)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; receives train.csv and test.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Non-private SGD against DP-SGD on the synthetic mixture.
    Fig1(RunArgs),
    /// DP-SGD at fixed epsilon across clip norms.
    AblateClip(RunArgs),
    /// dp, clip-only, noise-only and non-private arms.
    AblateNoise(RunArgs),
    /// DP-SGD across target epsilons.
    SweepEps(RunArgs),
    /// DP training followed by private and non-private recalibration.
    Recalibrate(RunArgs),
    /// Training on corrupted labels.
    LabelNoise(RunArgs),
    /// Calibration report of a saved model on a feature file.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Saved recalibrator applied to the model's logits.
        #[arg(long)]
        recal: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Also write reliability and histogram CSVs into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "json")]
        format: OutputFormat,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seed list overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value = "json")]
    format: OutputFormat,
}

fn run_experiment(kind: ExperimentKind, args: RunArgs) -> dpcal::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
    }
    let report = harness::run_to_dir(kind, &cfg, args.format)?;
    for arm in &report.arms {
        eprintln!(
            "{:<20} ece {:.4}  acc {:.4}  conf {:.4}",
            arm.name, arm.median.ece, arm.median.accuracy, arm.median.mean_confidence
        );
    }
    println!("{}", cfg.output_dir.display());
    Ok(())
}

fn dispatch(command: Command) -> dpcal::Result<()> {
    match command {
        Command::Synth { n, n_test, seed, out } => {
            std::fs::create_dir_all(&out)?;
            make_gaussian_mixture(n, seed).save_features(out.join("train.csv"))?;
            make_gaussian_mixture_test(n_test, seed).save_features(out.join("test.csv"))?;
            Ok(())
        }
        Command::Fig1(a) => run_experiment(ExperimentKind::Fig1, a),
        Command::AblateClip(a) => run_experiment(ExperimentKind::AblateClip, a),
        Command::AblateNoise(a) => run_experiment(ExperimentKind::AblateNoise, a),
        Command::SweepEps(a) => run_experiment(ExperimentKind::SweepEps, a),
        Command::Recalibrate(a) => run_experiment(ExperimentKind::Recalibrate, a),
        Command::LabelNoise(a) => run_experiment(ExperimentKind::LabelNoise, a),
        Command::Evaluate {
            model,
            data,
            recal,
            bins,
            out,
            format,
        } => {
            let model = LinearModel::from_json(&std::fs::read_to_string(model)?)?;
            let recal: Option<Recalibrator> = recal
                .map(|p| -> dpcal::Result<_> { Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?) })
                .transpose()?;
            let data = load_features(data)?;
            let report = evaluate(&model, recal.as_ref(), &data, bins)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                report.bins.write_reliability_csv(dir.join("reliability.csv"))?;
                report.bins.write_histogram_csv(dir.join("histogram.csv"))?;
            }
            match format {
                OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
                OutputFormat::Csv => {
                    println!("ece,accuracy,mean_confidence,n");
                    println!(
                        "{},{},{},{}",
                        report.ece,
                        report.accuracy,
                        report.mean_confidence,
                        report.bins.total()
                    );
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::Arm { arm, source } => eprintln!("error: arm {arm} failed: {source}"),
                other => eprintln!("error: {other}"),
            }
            ExitCode::FAILURE
        }
    }
}
