//! Subcommand implementations. Each command is a thin orchestration of the
//! library pipeline: artifacts are assembled in memory first (so tests can
//! compare bytes across thread counts) and written to disk afterwards.
//! Timing goes to stdout, never into the artifact files.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use fui_core::infer::{self, BootstrapOptions, TestSpec};
use fui_core::ingest::{ingest_files, IngestConfig, IngestReport};
use fui_core::lmm::{self, SolverOptions};
use fui_core::simulate::{simulate_dataset, GeneratorConfig};
use fui_core::smooth::{CoefficientFunction, SmoothConfig, SmoothingOperator};
use fui_core::study;
use fui_core::{io as core_io, FunctionalDataset};

use crate::artifacts::{self, InferCurve, PvalueRow};
use crate::svg;

/// Paths of the three raw input CSVs.
#[derive(Debug, Clone)]
pub struct RawPaths {
    pub cgm: std::path::PathBuf,
    pub sleep: std::path::PathBuf,
    pub covariates: std::path::PathBuf,
}

/// Inference parameters shared by `fit` and `infer`.
#[derive(Debug, Clone)]
pub struct InferParams {
    pub bootstrap: usize,
    pub draws: usize,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub solver: SolverOptions,
    pub smooth: SmoothConfig,
    pub max_redraws: usize,
}

impl Default for InferParams {
    fn default() -> Self {
        Self {
            bootstrap: 100,
            draws: 10_000,
            alphas: vec![0.05],
            seed: 1,
            solver: SolverOptions::default(),
            smooth: SmoothConfig::default(),
            max_redraws: 10,
        }
    }
}

/// Everything `infer` produces, as in-memory bytes.
#[derive(Debug, Clone)]
pub struct InferArtifacts {
    pub fit_csv: String,
    pub variance_csv: String,
    /// (covariate name, csv text) per design column, intercept first.
    pub curves: Vec<(String, String)>,
    pub pvalues_csv: String,
    pub pvalue_table: String,
}

pub fn cmd_simulate(config: Option<&Path>, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("read {}", path.display()))?;
            GeneratorConfig::from_toml_str(&text)?
        }
        None => GeneratorConfig::default_sleep_study(seed.unwrap_or(1)),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let start = Instant::now();
    let (dataset, truth) = simulate_dataset(&cfg)?;
    fs::create_dir_all(out_dir)?;
    core_io::export_raw_csvs(&dataset, out_dir)?;
    core_io::export_truth_json(&truth, &out_dir.join(core_io::TRUTH_FILE))?;
    fs::write(out_dir.join("generator.toml"), cfg.to_toml_string())?;
    println!(
        "simulated {} subjects, {} periods, {} grid points in {:.2} s -> {}",
        dataset.n_subjects(),
        dataset.n_rows(),
        dataset.grid().len(),
        start.elapsed().as_secs_f64(),
        out_dir.display()
    );
    Ok(())
}

pub fn run_ingest(paths: &RawPaths, cfg: &IngestConfig) -> Result<(FunctionalDataset, IngestReport)> {
    Ok(ingest_files(&paths.cgm, &paths.sleep, &paths.covariates, cfg)?)
}

fn smooth_series(
    series: &lmm::PointwiseFitSeries,
    smoother: &SmoothingOperator,
) -> Result<Vec<CoefficientFunction>> {
    (0..series.n_coefficients())
        .map(|j| {
            Ok(smoother.apply(&series.coefficient_curve(j), &series.coefficient_names[j])?)
        })
        .collect()
}

pub fn cmd_fit(
    paths: &RawPaths,
    ingest_cfg: &IngestConfig,
    smooth_cfg: &SmoothConfig,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let t0 = Instant::now();
    let (dataset, report) = run_ingest(paths, ingest_cfg)?;
    let ingest_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let series = lmm::fit_all_timepoints(&dataset, &SolverOptions::default())?;
    let fit_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let smoother = SmoothingOperator::new(dataset.grid(), smooth_cfg)?;
    let smoothed = smooth_series(&series, &smoother)?;
    let smooth_s = t2.elapsed().as_secs_f64();

    let mut fit_csv = Vec::new();
    artifacts::write_fit_csv(&mut fit_csv, &series, &smoothed)?;
    fs::write(out_dir.join("fit.csv"), fit_csv)?;
    let mut var_csv = Vec::new();
    artifacts::write_variance_csv(&mut var_csv, &series)?;
    fs::write(out_dir.join("variance.csv"), var_csv)?;
    write_ingest_report(&report, out_dir)?;

    println!("{report}");
    println!("timing: ingest {ingest_s:.2} s");
    println!("timing: pointwise fits {fit_s:.2} s");
    println!("timing: smoothing {smooth_s:.2} s");
    println!("wrote fit.csv, variance.csv -> {}", out_dir.display());
    Ok(())
}

fn write_ingest_report(report: &IngestReport, out_dir: &Path) -> Result<()> {
    fs::write(
        out_dir.join("ingest_report.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    fs::write(out_dir.join("ingest_report.txt"), format!("{report}\n"))?;
    Ok(())
}

/// Run the full inference pipeline on an in-memory dataset and build all
/// artifacts as strings.
pub fn infer_artifacts(dataset: &FunctionalDataset, params: &InferParams) -> Result<InferArtifacts> {
    if params.alphas.is_empty() {
        bail!("need at least one alpha level");
    }
    for &a in &params.alphas {
        if !(0.0 < a && a < 1.0) {
            bail!("alpha {a} out of (0, 1)");
        }
    }
    if params.bootstrap < 2 {
        bail!("need at least 2 bootstrap replicates");
    }
    if params.draws < 100 {
        bail!("need at least 100 Monte-Carlo draws");
    }

    let series = lmm::fit_all_timepoints(dataset, &params.solver)?;
    let smoother = SmoothingOperator::new(dataset.grid(), &params.smooth)?;
    let smoothed = smooth_series(&series, &smoother)?;

    let boot_opts = BootstrapOptions {
        solver: params.solver.clone(),
        smooth: params.smooth.clone(),
        max_redraws: params.max_redraws,
    };
    let ensembles = infer::cluster_bootstrap(dataset, params.bootstrap, params.seed, &boot_opts)?;

    let primary_alpha = params.alphas[0];
    let mut curves = Vec::with_capacity(ensembles.len());
    let mut pvalue_rows = Vec::new();
    for (j, ensemble) in ensembles.iter().enumerate() {
        let band_seed = fui_core::rng::derive_seed(
            params.seed,
            fui_core::rng::domain::MC_BAND_COVARIATE,
            j as u64,
        );
        let base = infer::joint_band(ensemble, primary_alpha, params.draws, band_seed)?;
        let mut joint = vec![(primary_alpha, base.lower.clone(), base.upper.clone())];
        for &alpha in &params.alphas[1..] {
            let band = base.at_level(ensemble, alpha)?;
            joint.push((alpha, band.lower, band.upper));
        }

        let estimate_raw = series.coefficient_curve(j);
        let se_model = series.se_curve(j);
        let (pw_lower, pw_upper) = infer::pointwise_band(&estimate_raw, &se_model, primary_alpha)?;

        let k = dataset.grid().len() as f64;
        let joint_width: f64 = joint[0]
            .2
            .iter()
            .zip(&joint[0].1)
            .map(|(u, l)| u - l)
            .sum::<f64>()
            / k;
        let pw_width: f64 = pw_upper
            .iter()
            .zip(&pw_lower)
            .map(|(u, l)| u - l)
            .sum::<f64>()
            / k;

        if j > 0 {
            let test = infer::global_pvalue(ensemble, &base, &TestSpec::default())?;
            pvalue_rows.push(PvalueRow {
                covariate: ensemble.covariate_name.clone(),
                p_value: test.p_value,
                max_standardized_deviation: test.max_standardized_deviation,
                width_ratio: joint_width / pw_width,
            });
        }

        let curve = InferCurve {
            covariate: ensemble.covariate_name.clone(),
            t_min: dataset.grid().points().to_vec(),
            estimate_boot: ensemble.mean.iter().copied().collect(),
            estimate_raw,
            se_model,
            se_boot: (0..ensemble.len())
                .map(|i| ensemble.cov[(i, i)].max(0.0).sqrt())
                .collect(),
            pw_lower,
            pw_upper,
            joint,
        };
        let mut text = Vec::new();
        artifacts::write_infer_csv(&mut text, &curve)?;
        curves.push((ensemble.covariate_name.clone(), String::from_utf8(text)?));
    }

    let mut fit_csv = Vec::new();
    artifacts::write_fit_csv(&mut fit_csv, &series, &smoothed)?;
    let mut variance_csv = Vec::new();
    artifacts::write_variance_csv(&mut variance_csv, &series)?;
    let mut pvalues_csv = Vec::new();
    artifacts::write_pvalues_csv(&mut pvalues_csv, &pvalue_rows)?;

    Ok(InferArtifacts {
        fit_csv: String::from_utf8(fit_csv)?,
        variance_csv: String::from_utf8(variance_csv)?,
        curves,
        pvalues_csv: String::from_utf8(pvalues_csv)?,
        pvalue_table: artifacts::format_pvalue_table(&pvalue_rows),
    })
}

pub fn cmd_infer(
    paths: &RawPaths,
    ingest_cfg: &IngestConfig,
    params: &InferParams,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let t0 = Instant::now();
    let (dataset, report) = run_ingest(paths, ingest_cfg)?;
    let ingest_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let artifacts_bundle = infer_artifacts(&dataset, params)?;
    let infer_s = t1.elapsed().as_secs_f64();

    write_ingest_report(&report, out_dir)?;
    write_infer_artifacts(&artifacts_bundle, out_dir)?;

    println!("{report}");
    println!("{}", artifacts_bundle.pvalue_table);
    println!("timing: ingest {ingest_s:.2} s");
    println!(
        "timing: inference (B={}, N={}) {infer_s:.2} s",
        params.bootstrap, params.draws
    );
    println!("wrote artifacts -> {}", out_dir.display());
    Ok(())
}

/// Write an artifact bundle into a directory.
pub fn write_infer_artifacts(bundle: &InferArtifacts, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("fit.csv"), &bundle.fit_csv)?;
    fs::write(out_dir.join("variance.csv"), &bundle.variance_csv)?;
    for (name, text) in &bundle.curves {
        let file = format!("infer_{}.csv", artifacts::sanitize_name(name));
        fs::write(out_dir.join(file), text)?;
    }
    fs::write(out_dir.join("pvalues.csv"), &bundle.pvalues_csv)?;
    fs::write(out_dir.join("pvalues.txt"), &bundle.pvalue_table)?;
    Ok(())
}

pub fn cmd_report(infer_dir: &Path, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut rendered = 0;
    let mut entries: Vec<_> = fs::read_dir(infer_dir)?
        .collect::<std::result::Result<Vec<_>, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_prefix("infer_").and_then(|s| s.strip_suffix(".csv")) else {
            continue;
        };
        let curve = artifacts::read_infer_csv(&entry.path(), stem)?;
        let svg_text = svg::render_panel(&curve);
        fs::write(out_dir.join(format!("{stem}.svg")), svg_text)?;
        rendered += 1;
    }
    if rendered == 0 {
        return Err(anyhow!(
            "no infer_*.csv files found in {}",
            infer_dir.display()
        ));
    }
    println!("rendered {rendered} panel(s) -> {}", out_dir.display());
    Ok(())
}

/// Which verification suites to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Reml,
    Critical,
    Duality,
    Coverage,
    Power,
}

pub struct StudyParams {
    pub suite: Suite,
    pub runs: usize,
    pub bootstrap: usize,
    pub draws: usize,
    pub seed: u64,
}

pub fn cmd_coverage_study(params: &StudyParams) -> Result<()> {
    let mut all_pass = true;
    let mut gate = |name: &str, pass: bool, detail: String| {
        println!("{}: {} — {detail}", name, if pass { "PASS" } else { "FAIL" });
        all_pass &= pass;
    };

    if matches!(params.suite, Suite::All | Suite::Reml) {
        let r = study::reml_oracle_suite(20, params.seed)?;
        gate(
            "reml-oracle",
            r.pass,
            format!(
                "{} instances, max |Δbeta| {:.2e} (< 1e-4), max rel var err {:.2e} (< 1e-3), {:.1} s",
                r.instances, r.max_beta_err, r.max_var_rel_err, r.elapsed_s
            ),
        );
    }
    if matches!(params.suite, Suite::All | Suite::Critical) {
        let r = study::critical_value_suite(10_000, params.seed)?;
        gate(
            "critical-values",
            r.pass,
            format!(
                "K=1 q {:.3} (expect {:.3}±0.05), K=2 q {:.3} (expect {:.3}±0.05), K=84 corr q {:.3}",
                r.q_k1, r.q_k1_expected, r.q_k2_independent, r.q_k2_expected, r.q_k84_correlated
            ),
        );
    }
    if matches!(params.suite, Suite::All | Suite::Duality) {
        let r = study::duality_suite(100, params.seed)?;
        gate(
            "band-pvalue-duality",
            r.pass,
            format!(
                "{} violations in {} checks over {} ensembles",
                r.violations, r.checks, r.ensembles
            ),
        );
    }
    if matches!(params.suite, Suite::All | Suite::Coverage) {
        let cfg = study::CoverageConfig {
            runs: params.runs,
            bootstrap: params.bootstrap,
            draws: params.draws,
            seed: params.seed,
            ..Default::default()
        };
        let r = study::coverage_study(&cfg)?;
        gate(
            "joint-band-coverage",
            r.pass_coverage,
            format!(
                "{}/{} runs covered the whole true curve ({:.3}, gate [0.91, 0.99]), {:.1} s",
                r.covered, r.runs, r.coverage_rate, r.elapsed_s
            ),
        );
        gate(
            "type-i-error",
            r.pass_type1,
            format!(
                "{}/{} null rejections at alpha 0.05 ({:.3}, gate [0.02, 0.09])",
                r.null_rejections, r.runs, r.type1_rate
            ),
        );
    }
    if matches!(params.suite, Suite::Power) {
        let (hits, runs) = study::power_suite(params.runs.min(50), params.seed)?;
        gate(
            "power",
            hits == runs,
            format!("{hits}/{runs} strong-effect runs with p < 0.01"),
        );
    }

    if !all_pass {
        bail!("one or more suites failed");
    }
    Ok(())
}
