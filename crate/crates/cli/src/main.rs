//! `prevalence`: generate synthetic inputs, estimate weights, precompute a
//! particle store, then serve, query or validate it.

mod manifest;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use prevalence_api::ApiConfig;
use prevalence_core::pipeline::{estimate_weights, generate_inputs, StageSeeds};
use prevalence_core::query::{parse_query, run_query, CurveResponse, DEFAULT_BAND_LEVEL};
use prevalence_core::store::{
    precompute, read_ensemble, read_store, read_weights, write_ensemble, write_store, write_weights, DEFAULT_PARTICLES,
};
use prevalence_core::synthetic::{DemographicMargins, GroundTruth, SurveySample};
use prevalence_core::validation::{coverage, oracle_spot_checks, CoverageReport, OracleReport, COVERAGE_RANGE, ORACLE_TOLERANCE};
use prevalence_core::{GridIndex, PipelineConfig};
use serde::Serialize;
use serde_json::json;

use manifest::{beside, write_atomic, RunManifest, Seeds};

#[derive(Parser)]
#[command(name = "prevalence", version, about = "Bayesian chronic-disease prevalence dissemination engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic truth, posterior ensemble, census margins and survey.
    Generate(GenerateArgs),
    /// Estimate risk-category weights from a survey and census margins.
    Weights(WeightsArgs),
    /// Thin the ensemble and precompute the particle store.
    Precompute(PrecomputeArgs),
    /// Serve the HTTP API over a store.
    Serve(ServeArgs),
    /// Print one prevalence curve set.
    Query(QueryArgs),
    /// Check band coverage and aggregation against the synthetic truth.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WeightsArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    survey: PathBuf,
    #[arg(long)]
    margins: PathBuf,
    /// Run seed; the weights stage seed is derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides `weight_replicates` from the config.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrecomputeArgs {
    /// Config whose grid the inputs must match.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PARTICLES)]
    particles: usize,
    /// Run seed; the precompute stage seed is derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; all cores when unset.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Census margins the store must have been built from.
    #[arg(long)]
    margins: Option<PathBuf>,
    /// Refuse to start unless the store digest equals this hex string.
    #[arg(long)]
    expect_digest: Option<String>,
    /// Allowed CORS origin; repeatable, `*` for any.
    #[arg(long = "origin")]
    origins: Vec<String>,
    /// JSON-lines request log; stderr when unset.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    disease: String,
    /// BY_YEAR or BY_AGE.
    #[arg(long, default_value = "BY_YEAR")]
    view: String,
    /// `dimension:value[,value...]`; repeatable.
    #[arg(long = "filter", short = 'f')]
    filters: Vec<String>,
    #[arg(long)]
    stratify: Option<String>,
    #[arg(long)]
    no_bands: bool,
    #[arg(long, default_value_t = DEFAULT_BAND_LEVEL)]
    level: f64,
    /// PREVALENCE, PER_100K or ABSOLUTE.
    #[arg(long, default_value = "PREVALENCE")]
    scale: String,
    /// Use mean weights instead of per-particle weight replicates.
    #[arg(long)]
    no_replicates: bool,
    #[arg(long, conflicts_with = "table")]
    json: bool,
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    store: PathBuf,
    /// Ground truth written by `generate`.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pairs: usize,
    #[arg(long, default_value_t = DEFAULT_BAND_LEVEL)]
    level: f64,
    #[arg(long, default_value_t = 200)]
    checks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Validation ran but the store failed it.
#[derive(Debug)]
struct ValidationFailed(String);

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "validation failed: {}", self.0)
    }
}

impl std::error::Error for ValidationFailed {}

const EXIT_VALIDATION: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_CORRUPT: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ValidationFailed>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<prevalence_core::Error>() {
            if e.is_corruption() {
                return EXIT_CORRUPT;
            }
        }
    }
    EXIT_INPUT
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INPUT) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Weights(a) => weights(a),
        Command::Precompute(a) => precompute_cmd(a),
        Command::Serve(a) => serve(a),
        Command::Query(a) => query(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn load_config(path: &Path) -> Result<(PipelineConfig, serde_json::Value)> {
    let config = PipelineConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    let text = fs::read_to_string(path)?;
    let resolved = json!({
        "file": path,
        "text": text,
        "grid": config.grid,
        "generation": config.generation,
    });
    Ok((config, resolved))
}

fn generate(args: GenerateArgs) -> Result<()> {
    let (config, resolved) = load_config(&args.config)?;
    let seeds = Seeds::from_run(args.seed);
    let mut m = RunManifest::new("generate", resolved, Some(seeds));
    m.input(&args.config)?;
    let grid = GridIndex::new(config.grid.clone())?;
    let inputs = m.timed("generate", || generate_inputs(&config, StageSeeds::from_run(args.seed)))?;

    fs::create_dir_all(&args.out)?;
    let ensemble = args.out.join("ensemble.bin");
    let margins = args.out.join("margins.csv");
    let survey = args.out.join("survey.csv");
    let truth = args.out.join("truth.json");
    m.timed("write", || -> Result<()> {
        write_ensemble(&ensemble, &config.grid, &inputs.ensemble)?;
        let mut buf = Vec::new();
        inputs.margins.write_csv(&grid, &mut buf)?;
        write_atomic(&margins, &buf)?;
        buf.clear();
        inputs.survey.write_csv(&grid, &mut buf)?;
        write_atomic(&survey, &buf)?;
        write_atomic(&truth, inputs.truth.to_json()?.as_bytes())?;
        Ok(())
    })?;
    for path in [&ensemble, &margins, &survey, &truth] {
        m.output(path)?;
    }
    m.note("cells", grid.len());
    m.note("ensemble_size", inputs.ensemble.len());
    m.note("survey_records", inputs.survey.len());
    m.note("population", inputs.margins.total());
    m.write(&args.out.join("manifest.json"))?;
    println!("generated {} cells, {} draws, {} survey records in {}", grid.len(), inputs.ensemble.len(), inputs.survey.len(), args.out.display());
    Ok(())
}

fn weights(args: WeightsArgs) -> Result<()> {
    let (config, resolved) = load_config(&args.config)?;
    let seeds = Seeds::from_run(args.seed);
    let mut m = RunManifest::new("weights", resolved, Some(seeds));
    let grid = GridIndex::new(config.grid.clone())?;
    let survey = SurveySample::read_csv(&grid, BufReader::new(open(&args.survey)?))
        .with_context(|| format!("reading survey {}", args.survey.display()))?;
    let margins = DemographicMargins::read_csv(&grid, BufReader::new(open(&args.margins)?))
        .with_context(|| format!("reading margins {}", args.margins.display()))?;
    for path in [&args.config, &args.survey, &args.margins] {
        m.input(path)?;
    }
    let replicates = args.replicates.unwrap_or(config.generation.weight_replicates);
    let alpha = config.generation.prior_alpha;
    let weights = m.timed("estimate", || estimate_weights(&grid, &survey, &margins, alpha, replicates, seeds.weights))?;
    write_weights(&args.out, &config.grid, &weights, seeds.weights)?;
    m.output(&args.out)?;
    m.note("replicates", replicates);
    m.note("prior_alpha", alpha);
    m.note("max_simplex_error", weights.table.max_simplex_error());
    m.write(&beside(&args.out))?;
    println!("estimated weights for {} demographic cells, {replicates} replicates", grid.n_demographic_cells());
    Ok(())
}

fn precompute_cmd(args: PrecomputeArgs) -> Result<()> {
    let seeds = Seeds::from_run(args.seed);
    let mut resolved = json!({ "particles": args.particles, "threads": args.threads });
    let (grid_cfg, ensemble) = read_ensemble(&args.ensemble).with_context(|| format!("reading {}", args.ensemble.display()))?;
    let (weights_grid, weights) = read_weights(&args.weights).with_context(|| format!("reading {}", args.weights.display()))?;
    if weights_grid != grid_cfg {
        bail!("ensemble and weights were built for different grids");
    }
    let mut m_inputs = vec![args.ensemble.clone(), args.weights.clone()];
    if let Some(path) = &args.grid {
        let (config, value) = load_config(path)?;
        if config.grid.digest() != grid_cfg.digest() {
            bail!("ensemble grid does not match the grid in {}", path.display());
        }
        resolved["config"] = value;
        m_inputs.push(path.clone());
    }
    resolved["grid"] = serde_json::to_value(&grid_cfg)?;
    let mut m = RunManifest::new("precompute", resolved, Some(seeds));
    for path in &m_inputs {
        m.input(path)?;
    }
    let store = m.timed("precompute", || {
        precompute(&grid_cfg, &ensemble, &weights, args.particles, seeds.precompute, args.threads)
    })?;
    m.timed("write", || write_store(&args.out, &store))?;
    m.output(&args.out)?;
    let params = store.params();
    m.note("cells", store.n_cells());
    m.note("particles", params.particles);
    m.note("stride", params.stride);
    m.note("store_digest", store.digest_hex());
    m.write(&beside(&args.out))?;
    println!("precomputed {} cells x {} particles, digest {}", store.n_cells(), params.particles, store.digest_hex());
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let config = ApiConfig {
        bind: args.bind,
        store_path: args.store,
        margins_path: args.margins,
        expected_digest: args.expect_digest,
        allowed_origins: args.origins,
        request_log: args.log,
    };
    let runtime = tokio::runtime::Runtime::new()?;
    eprintln!("serving {} on http://{}", config.store_path.display(), config.bind);
    runtime.block_on(prevalence_api::serve(config))?;
    Ok(())
}

fn query(args: QueryArgs) -> Result<()> {
    let store = read_store(&args.store).with_context(|| format!("reading store {}", args.store.display()))?;
    let mut params: Vec<(&str, String)> = vec![
        ("disease", args.disease.clone()),
        ("view", args.view.clone()),
        ("bands", (!args.no_bands).to_string()),
        ("level", args.level.to_string()),
        ("scale", args.scale.clone()),
        ("replicates", (!args.no_replicates).to_string()),
    ];
    params.extend(args.filters.iter().map(|f| ("f", f.clone())));
    if let Some(s) = &args.stratify {
        params.push(("stratify", s.clone()));
    }
    let response = run_query(&store, &parse_query(store.grid(), &params)?)?;
    if args.json {
        println!("{}", serde_json::to_string(&response)?);
    } else {
        print!("{}", render_table(&response));
    }
    Ok(())
}

fn render_table(r: &CurveResponse) -> String {
    let mut out = String::new();
    let axis = serde_json::to_value(r.view).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    let _ = writeln!(out, "{} ({}), {axis}, {}", r.disease, r.disease_name, r.unit);
    for (dim, values) in &r.filters {
        let _ = writeln!(out, "  {dim} = {}", values.join(","));
    }
    let x = if axis == "BY_AGE" { "age" } else { "year" };
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
    for s in &r.series {
        let _ = writeln!(out, "\n[{}]", s.label);
        match (&s.lo, &s.hi) {
            (Some(_), Some(_)) => {
                let level = r.band_level.unwrap_or(DEFAULT_BAND_LEVEL);
                let _ = writeln!(out, "{x:>6} {:>14} {:>14} {:>14}", "mean", format!("lo({level})"), format!("hi({level})"));
            }
            _ => {
                let _ = writeln!(out, "{x:>6} {:>14}", "mean");
            }
        }
        for (i, xv) in r.axis.iter().enumerate() {
            let _ = write!(out, "{xv:>6} {:>14}", cell(s.mean[i]));
            if let (Some(lo), Some(hi)) = (&s.lo, &s.hi) {
                let _ = write!(out, " {:>14} {:>14}", cell(lo[i]), cell(hi[i]));
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Serialize)]
struct ValidationReport {
    store_digest: String,
    coverage: CoverageReport,
    coverage_range: (f64, f64),
    coverage_checked: bool,
    /// Binomial standard error of the coverage estimate.
    coverage_se: f64,
    oracle: OracleReport,
    oracle_tolerance: f64,
    passed: bool,
    failures: Vec<String>,
}

fn validate(args: ValidateArgs) -> Result<()> {
    let store = read_store(&args.store).with_context(|| format!("reading store {}", args.store.display()))?;
    let text = fs::read_to_string(&args.truth).with_context(|| format!("missing ground truth {}", args.truth.display()))?;
    let truth = GroundTruth::from_json(&text).with_context(|| format!("parsing ground truth {}", args.truth.display()))?;
    let cov = coverage(&store, &truth, args.pairs, args.level, args.seed)?;
    let oracle = oracle_spot_checks(&store, args.checks, args.seed)?;

    let mut failures = Vec::new();
    let checked = !cov.degenerate;
    if !checked {
        println!("notice: every sampled band has zero width; coverage check skipped");
    } else if cov.fraction < COVERAGE_RANGE.0 || cov.fraction > COVERAGE_RANGE.1 {
        failures.push(format!("coverage {:.3} outside [{}, {}]", cov.fraction, COVERAGE_RANGE.0, COVERAGE_RANGE.1));
    }
    if oracle.max_abs_error.is_nan() || oracle.max_abs_error > ORACLE_TOLERANCE {
        failures.push(format!("oracle mismatch {:.3e} exceeds {ORACLE_TOLERANCE:e}", oracle.max_abs_error));
    }
    let p = cov.fraction;
    let report = ValidationReport {
        store_digest: store.digest_hex(),
        coverage_se: (p * (1.0 - p) / cov.pairs as f64).sqrt(),
        coverage: cov,
        coverage_range: COVERAGE_RANGE,
        coverage_checked: checked,
        oracle,
        oracle_tolerance: ORACLE_TOLERANCE,
        passed: failures.is_empty(),
        failures: failures.clone(),
    };
    println!(
        "coverage {}/{} = {:.3} at level {} (se {:.3}); oracle {} checks, {} empty, max error {:.3e}",
        report.coverage.covered,
        report.coverage.pairs,
        report.coverage.fraction,
        report.coverage.level,
        report.coverage_se,
        report.oracle.checks,
        report.oracle.empty,
        report.oracle.max_abs_error
    );
    if let Some(path) = &args.report {
        let mut text = serde_json::to_vec_pretty(&report)?;
        text.push(b'\n');
        write_atomic(path, &text)?;
    }
    if !failures.is_empty() {
        return Err(ValidationFailed(failures.join("; ")).into());
    }
    println!("validation passed");
    Ok(())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}
