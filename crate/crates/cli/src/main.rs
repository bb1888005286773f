use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use genhints::harness::{self, ExperimentConfig};
use genhints::Error;

/// Experiment harness for training with generative invariance hints.
#[derive(Parser)]
#[command(name = "genhints", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (`key=value` lines); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run a single seed, which also seeds the generated data.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel jobs for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test sets.
    SynthData(Common),
    /// Train every configured seed (and the baseline, if enabled).
    Train(Common),
    /// One run per (alpha, seed).
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Comma-separated alphas; defaults to `sweep.alphas`.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Correlate virtual and real hint loss across sampler qualities.
    QualityStudy {
        #[command(flatten)]
        common: Common,
        /// Comma-separated KDE bandwidths; defaults to `study.bandwidths`.
        #[arg(long, value_delimiter = ',')]
        bandwidths: Option<Vec<f64>>,
    },
    /// Accuracy and hint loss of a saved model on a saved dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Dataset `.bin` file; labels are read from the sibling CSV.
        #[arg(long)]
        data: PathBuf,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

fn write(out: &Path, name: &str, text: &str) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let path = out.join(name);
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::SynthData(c) => {
            let cfg = load(&c)?;
            let (train, test) = harness::cmd_synth_data(&cfg, &c.out)?;
            println!("wrote {} and {}", train.display(), test.display());
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            let summary = harness::cmd_train(&cfg, &c.out, c.jobs)?;
            print!("{}", summary.to_text());
        }
        Command::SweepAlpha { common, alphas } => {
            let mut cfg = load(&common)?;
            if let Some(a) = alphas {
                cfg.sweep_alphas = a;
                cfg.validate()?;
            }
            let rows = harness::cmd_sweep_alpha(&cfg, &cfg.sweep_alphas, &common.out, common.jobs)?;
            print!("{}", harness::sweep_csv(&cfg.hash(), &rows));
        }
        Command::QualityStudy { common, bandwidths } => {
            let mut cfg = load(&common)?;
            if let Some(b) = bandwidths {
                cfg.study_bandwidths = b;
                cfg.validate()?;
            }
            let rows = harness::cmd_quality_study(&cfg, &cfg.study_bandwidths, &common.out, common.jobs)?;
            print!("{}", harness::study_csv(&cfg.hash(), &rows));
        }
        Command::Eval { common, model, data } => {
            let cfg = load(&common)?;
            let report = harness::cmd_eval(&cfg, &model, &data)?;
            write(&common.out, "eval.txt", &report.to_text())?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // bad arguments count as a config error; --help/--version succeed
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
