use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use fui_core::ingest::IngestConfig;
use fui_core::smooth::SmoothConfig;

use fui_cli::pipeline::{self, InferParams, RawPaths, StudyParams, Suite};

/// Function-on-scalar regression inference for CGM sleep windows:
/// pointwise mixed-model fits, subject bootstrap, joint confidence bands,
/// and joint-band p-values.
#[derive(Parser)]
#[command(name = "fui", version, about)]
struct Cli {
    /// Worker threads (0 = all cores). Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// CGM readings CSV (subject_id,timestamp,glucose).
    #[arg(long)]
    cgm: PathBuf,
    /// Sleep periods CSV (subject_id,onset,offset).
    #[arg(long)]
    sleep: PathBuf,
    /// Subject covariates CSV (subject_id,<name1>,...).
    #[arg(long)]
    covariates: PathBuf,
    /// Maximum CGM gap (minutes) to interpolate across.
    #[arg(long, default_value_t = 30.0)]
    max_gap_min: f64,
    /// Minimum sleep-period length in hours (inclusive).
    #[arg(long, default_value_t = 5.0)]
    min_period_hours: f64,
    /// Minimum accepted periods per subject.
    #[arg(long, default_value_t = 5)]
    min_periods: usize,
}

impl InputArgs {
    fn paths(&self) -> RawPaths {
        RawPaths {
            cgm: self.cgm.clone(),
            sleep: self.sleep.clone(),
            covariates: self.covariates.clone(),
        }
    }

    fn ingest_config(&self) -> IngestConfig {
        IngestConfig {
            max_gap_min: self.max_gap_min,
            min_period_hours: self.min_period_hours,
            min_periods_per_subject: self.min_periods,
            ..IngestConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (raw CSVs plus the truth record).
    Simulate {
        /// Generator config (TOML). Omit for the built-in sleep-study-like
        /// default.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the generator seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Ingest raw CSVs and fit the pointwise mixed models.
    Fit {
        #[command(flatten)]
        input: InputArgs,
        /// Spline basis size for coefficient smoothing.
        #[arg(long, default_value_t = 30)]
        basis_size: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Full inference: fit, subject bootstrap, joint bands, p-values.
    Infer {
        #[command(flatten)]
        input: InputArgs,
        /// Bootstrap replicates.
        #[arg(long, default_value_t = 100)]
        bootstrap: usize,
        /// Monte-Carlo draws for the max-deviation distribution.
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        /// Band levels; repeat for several (the first is the primary one).
        #[arg(long = "alpha", default_values_t = vec![0.05])]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Spline basis size for coefficient smoothing.
        #[arg(long, default_value_t = 30)]
        basis_size: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render SVG panels from an inference output directory.
    Report {
        #[arg(long)]
        infer_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the Monte-Carlo verification suites and print pass/fail rates.
    CoverageStudy {
        /// all | reml | critical | duality | coverage | power
        #[arg(long, default_value = "all")]
        suite: String,
        /// Simulation runs for the coverage/type-I study.
        #[arg(long, default_value_t = 200)]
        runs: usize,
        #[arg(long, default_value_t = 100)]
        bootstrap: usize,
        #[arg(long, default_value_t = 2000)]
        draws: usize,
        #[arg(long, default_value_t = 20_260_810)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()?;
    }
    match cli.command {
        Command::Simulate { config, seed, out_dir } => {
            pipeline::cmd_simulate(config.as_deref(), seed, &out_dir)
        }
        Command::Fit {
            input,
            basis_size,
            out_dir,
        } => {
            let smooth = SmoothConfig {
                basis_size,
                ..Default::default()
            };
            pipeline::cmd_fit(&input.paths(), &input.ingest_config(), &smooth, &out_dir)
        }
        Command::Infer {
            input,
            bootstrap,
            draws,
            alphas,
            seed,
            basis_size,
            out_dir,
        } => {
            let params = InferParams {
                bootstrap,
                draws,
                alphas,
                seed,
                smooth: SmoothConfig {
                    basis_size,
                    ..Default::default()
                },
                ..Default::default()
            };
            pipeline::cmd_infer(&input.paths(), &input.ingest_config(), &params, &out_dir)
        }
        Command::Report { infer_dir, out_dir } => pipeline::cmd_report(&infer_dir, &out_dir),
        Command::CoverageStudy {
            suite,
            runs,
            bootstrap,
            draws,
            seed,
        } => {
            let suite = match suite.as_str() {
                "all" => Suite::All,
                "reml" => Suite::Reml,
                "critical" => Suite::Critical,
                "duality" => Suite::Duality,
                "coverage" => Suite::Coverage,
                "power" => Suite::Power,
                other => anyhow::bail!("unknown suite {other:?}"),
            };
            pipeline::cmd_coverage_study(&StudyParams {
                suite,
                runs,
                bootstrap,
                draws,
                seed,
            })
        }
    }
}
