use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::json;

use gcfpca::fpca::{FpcaOptions, Truncation, DEFAULT_PVE};
use gcfpca::ingest::{binarize_profiles, load_long_csv, read_multiday_csv, LongSchema};
use gcfpca::joint_glmm::{cma_bands, fixed_effect_curves};
use gcfpca::pipeline::{run_pipeline, PipelineConfig, DEFAULT_BIN_FRACTION, DEFAULT_FIXED_BASIS};
use gcfpca::simlab::{generate_replicate, run_replications, write_replicates, write_table, SimScenario};
use gcfpca::{Error, Family, FamilyKind};

const VERSION: &str = env!("CARGO_PKG_VERSION");
const MINUTES_PER_DAY: usize = 1440;
const MIN_SUCCESS_FRACTION: f64 = 0.8;

#[derive(Parser, Debug)]
#[command(name = "gcfpca", version, about = "Generalized conditional functional PCA for exponential-family curves")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the model to a long-format CSV (subject_id,s,value,x1..xp).
    Fit(FitArgs),
    /// Generate one simulated dataset and its truth.
    Simulate(SimulateArgs),
    /// Run simulation replicates and summarize the metrics.
    Replicate(ReplicateArgs),
    /// Threshold multi-day profiles and take the per-minute median.
    Binarize(BinarizeArgs),
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Outcome family: gaussian, binomial or poisson.
    #[arg(long, default_value = "binomial")]
    family: FamilyKind,
    /// Bin width as a fraction of the grid (about 0.10 is also a sound choice).
    #[arg(long, default_value_t = DEFAULT_BIN_FRACTION)]
    bin_frac: f64,
    /// Let bins wrap around the domain ends; defaults to true on a 1440-point grid.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    cyclic: Option<bool>,
    /// Cubic B-spline dimension for the fixed-effect curves (about 20 suits minute-level data).
    #[arg(long, default_value_t = DEFAULT_FIXED_BASIS)]
    n_basis: usize,
    /// Keep the fewest components explaining this share of variance.
    #[arg(long, conflicts_with = "fixed_l")]
    pve: Option<f64>,
    /// Keep exactly this many components.
    #[arg(long = "fixed-L", id = "fixed_l")]
    fixed_l: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 10_000)]
    cma_draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Covariate columns; every column after `value` when absent.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Accept empty cells and a ragged grid as missing at random.
    #[arg(long)]
    allow_missing: bool,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Replicate index; each index draws an independent stream.
    #[arg(long, default_value_t = 0)]
    rep: u64,
}

#[derive(Args, Debug, Serialize)]
struct ReplicateArgs {
    /// Scenario JSON files, one table row each.
    #[arg(long, required = true, num_args = 1..)]
    scenario: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Args, Debug, Serialize)]
struct BinarizeArgs {
    /// Multi-day CSV (subject_id,day,s,value[,valid]).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long, default_value_t = 10.558)]
    threshold: f64,
}

/// Metadata written as the first line of every output.
#[derive(Debug, Clone, Serialize)]
struct Meta {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    threads: Option<usize>,
    config: serde_json::Value,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Convergence { .. } | Error::Fit(_) | Error::NoVariation => 3,
        Error::Io(_) => 4,
        Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => 4,
        _ => 2,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Domain { .. } => "domain",
        Error::Argument(_) => "argument",
        Error::Construction(_) => "construction",
        Error::Fit(_) => "fit",
        Error::Validation(_) => "validation",
        Error::Convergence { .. } => "convergence",
        Error::NoVariation => "no_variation",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "schema",
    }
}

fn report(err: &Error) -> u8 {
    let code = exit_code(err);
    let mut body = json!({ "error": error_kind(err), "message": err.to_string(), "exit_code": code });
    if let Error::Convergence { trace, .. } = err {
        body["trace"] = json!(trace);
    }
    eprintln!("{body}");
    code
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path, meta: &Meta) -> gcfpca::Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# {}", serde_json::to_string(meta)?)?;
    Ok(w)
}

fn write_rows(path: &Path, meta: &Meta, header: &[String], rows: &[Vec<String>]) -> gcfpca::Result<()> {
    let mut csv = csv::Writer::from_writer(create(path, meta)?);
    csv.write_record(header)?;
    for row in rows {
        csv.write_record(row)?;
    }
    csv.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> gcfpca::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn cmd_fit(args: &FitArgs, threads: Option<usize>) -> gcfpca::Result<()> {
    let schema = LongSchema { covariates: args.covariates.clone(), allow_missing: args.allow_missing };
    let data = load_long_csv(&args.input, &schema)?;
    info!("read {} subjects on {} grid points", data.n_subjects(), data.n_grid());
    let truncation = match (args.fixed_l, args.pve) {
        (Some(l), _) => Truncation::FixedL(l),
        (None, p) => Truncation::Pve(p.unwrap_or(DEFAULT_PVE)),
    };
    let config = PipelineConfig {
        bin_fraction: args.bin_frac,
        cyclic: args.cyclic.unwrap_or(data.n_grid() == MINUTES_PER_DAY),
        n_fixed_basis: args.n_basis,
        fpca: FpcaOptions { truncation, ..FpcaOptions::default() },
        ..PipelineConfig::default()
    };
    let meta = Meta {
        tool: "gcfpca",
        version: VERSION,
        command: "fit",
        threads,
        config: json!({ "args": args, "pipeline": config }),
    };
    fs::create_dir_all(&args.out)?;
    let out = run_pipeline(&data, &Family::from_kind(args.family), &config)?;
    let fit = &out.fit;
    let grid = &fit.eigensystem.grid;

    let curves = fixed_effect_curves(fit, grid, args.level)?;
    let bands = (0..fit.n_terms())
        .map(|r| cma_bands(fit, r, grid, args.level, args.cma_draws, args.seed.wrapping_add(r as u64)))
        .collect::<gcfpca::Result<Vec<_>>>()?;
    let mut header = vec!["s".to_string()];
    for c in &curves {
        for suffix in ["estimate", "se", "pointwise_lower", "pointwise_upper", "cma_lower", "cma_upper"] {
            header.push(format!("{}_{suffix}", c.term));
        }
    }
    let rows: Vec<Vec<String>> = (0..grid.len())
        .map(|k| {
            let mut row = vec![num(grid[k])];
            for (c, b) in curves.iter().zip(&bands) {
                row.extend([c.estimate[k], c.se[k], c.lower[k], c.upper[k], b.lower[k], b.upper[k]].map(num));
            }
            row
        })
        .collect();
    write_rows(&args.out.join("beta_curves.csv"), &meta, &header, &rows)?;

    let l = fit.n_components();
    let es = &fit.eigensystem;
    let mut header = vec!["s".to_string()];
    header.extend((1..=l).map(|j| format!("phi{j}")));
    let rows: Vec<Vec<String>> = (0..grid.len())
        .map(|k| std::iter::once(grid[k]).chain(es.eigenfunctions.row(k).iter().copied()).map(num).collect())
        .collect();
    write_rows(&args.out.join("eigenfunctions.csv"), &meta, &header, &rows)?;

    let total: f64 = es.all_eigenvalues.iter().filter(|v| **v > 0.0).sum();
    let mut cumulative = 0.0;
    let header = ["component", "eigenvalue", "cumulative_pve", "score_variance"].map(String::from);
    let rows: Vec<Vec<String>> = (0..l)
        .map(|j| {
            cumulative += es.eigenvalues[j];
            let share = if total > 0.0 { cumulative / total } else { 0.0 };
            vec![(j + 1).to_string(), num(es.eigenvalues[j]), num(share), num(fit.lambda[j])]
        })
        .collect();
    write_rows(&args.out.join("eigenvalues.csv"), &meta, &header, &rows)?;

    let mut header = vec!["subject_id".to_string()];
    header.extend((1..=l).map(|j| format!("xi{j}")));
    let rows: Vec<Vec<String>> = fit
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| std::iter::once(s.clone()).chain(fit.scores.row(i).iter().map(|&v| num(v))).collect())
        .collect();
    write_rows(&args.out.join("scores.csv"), &meta, &header, &rows)?;

    let fit_meta = json!({
        "meta": meta,
        "family": fit.family,
        "n_subjects": data.n_subjects(),
        "n_grid": data.n_grid(),
        "n_components": l,
        "pve": es.pve,
        "fpca_smoothing_parameter": es.smoothing_parameter,
        "n_smooth_basis": es.n_smooth_basis,
        "timings_seconds": { "steps": out.timings, "total": out.timings.total() },
        "local": out.local,
        "joint": {
            "converged": fit.converged,
            "outer_iterations": fit.n_outer,
            "inner_iterations": fit.n_inner,
            "controls": config.joint,
            "restricted_likelihood_trace": fit.laml_trace,
            "log_likelihood": fit.log_likelihood,
            "penalized_objective": fit.penalized_objective,
            "effective_df": fit.effective_df,
            "smoothing_parameters": fit.smoothing,
            "score_variances": fit.lambda,
            "dispersion": fit.dispersion,
            "boundary_components": fit.boundary_components,
        },
        "bands": bands.iter().map(|b| json!({
            "term": b.term,
            "cma_quantile": b.quantile,
            "pointwise_quantile": b.pointwise_quantile,
        })).collect::<Vec<_>>(),
    });
    write_json(&args.out.join("fit_meta.json"), &fit_meta)?;
    info!("wrote results to {}", args.out.display());
    Ok(())
}

fn read_scenario(path: &Path) -> gcfpca::Result<SimScenario> {
    SimScenario::from_json(&fs::read_to_string(path)?)
}

fn cmd_simulate(args: &SimulateArgs, threads: Option<usize>) -> gcfpca::Result<()> {
    let sc = read_scenario(&args.scenario)?;
    let meta = Meta {
        tool: "gcfpca",
        version: VERSION,
        command: "simulate",
        threads,
        config: json!({ "args": args, "scenario": sc }),
    };
    let sim = generate_replicate(&sc, args.rep)?;
    fs::create_dir_all(&args.out)?;
    let mut w = create(&args.out.join("data.csv"), &meta)?;
    sim.data.write_csv(&mut w)?;
    w.flush()?;

    let grid = &sim.data.grid;
    let t = &sim.truth;
    let header = ["subject_id", "s", "eta"].map(String::from);
    let rows: Vec<Vec<String>> = (0..sim.data.n_subjects())
        .flat_map(|i| {
            let id = &sim.data.subjects[i];
            (0..grid.len()).map(move |k| vec![id.clone(), num(grid[k]), num(t.eta[(i, k)])])
        })
        .collect();
    write_rows(&args.out.join("truth_eta.csv"), &meta, &header, &rows)?;

    let mut header = vec!["s".to_string(), "beta0".into(), "beta1".into()];
    header.extend((1..=t.phi.ncols()).map(|j| format!("phi{j}")));
    let rows: Vec<Vec<String>> = (0..grid.len())
        .map(|k| {
            std::iter::once(grid[k])
                .chain(t.beta.row(k).iter().copied())
                .chain(t.phi.row(k).iter().copied())
                .map(num)
                .collect()
        })
        .collect();
    write_rows(&args.out.join("truth_curves.csv"), &meta, &header, &rows)?;

    let mut header = vec!["subject_id".to_string()];
    header.extend((1..=t.scores.ncols()).map(|j| format!("xi{j}")));
    let rows: Vec<Vec<String>> = (0..sim.data.n_subjects())
        .map(|i| std::iter::once(sim.data.subjects[i].clone()).chain(t.scores.row(i).iter().map(|&v| num(v))).collect())
        .collect();
    write_rows(&args.out.join("truth_scores.csv"), &meta, &header, &rows)?;
    info!("wrote scenario '{}' replicate {} to {}", sc.id, args.rep, args.out.display());
    Ok(())
}

fn cmd_replicate(args: &ReplicateArgs, threads: Option<usize>) -> gcfpca::Result<()> {
    let scenarios = args.scenario.iter().map(|p| read_scenario(p)).collect::<gcfpca::Result<Vec<_>>>()?;
    fs::create_dir_all(&args.out)?;
    let mut summaries = Vec::new();
    for sc in &scenarios {
        info!("scenario '{}': {} replicates", sc.id, args.reps);
        let summary = run_replications(sc, args.reps, &sc.pipeline_config(), args.level)?;
        info!(
            "scenario '{}': {} of {} replicates succeeded",
            sc.id,
            summary.n_reps - summary.n_failed,
            summary.n_reps
        );
        let meta = Meta {
            tool: "gcfpca",
            version: VERSION,
            command: "replicate",
            threads,
            config: json!({ "args": args, "scenario": sc, "pipeline": sc.pipeline_config() }),
        };
        let mut w = create(&args.out.join(format!("replicates_{}.csv", sc.id)), &meta)?;
        write_replicates(&summary, &mut w)?;
        w.flush()?;
        write_json(&args.out.join(format!("summary_{}.json", sc.id)), &json!({ "meta": meta, "summary": summary }))?;
        summaries.push(summary);
    }
    let meta = Meta {
        tool: "gcfpca",
        version: VERSION,
        command: "replicate",
        threads,
        config: json!({ "args": args, "scenarios": scenarios }),
    };
    let mut w = create(&args.out.join("table.csv"), &meta)?;
    write_table(&summaries, &mut w)?;
    w.flush()?;
    let short: Vec<String> = summaries
        .iter()
        .filter(|s| s.success_fraction() < MIN_SUCCESS_FRACTION)
        .map(|s| format!("'{}' ({} of {} failed)", s.scenario.id, s.n_failed, s.n_reps))
        .collect();
    if !short.is_empty() {
        return Err(Error::Fit(format!("too many failed replicates in {}", short.join(", "))));
    }
    Ok(())
}

fn cmd_binarize(args: &BinarizeArgs, threads: Option<usize>) -> gcfpca::Result<()> {
    let (grid, profiles) = read_multiday_csv(File::open(&args.input)?)?;
    let data = binarize_profiles(&profiles, &grid, args.threshold)?;
    let meta = Meta { tool: "gcfpca", version: VERSION, command: "binarize", threads, config: json!({ "args": args }) };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = create(&args.out, &meta)?;
    data.write_csv(&mut w)?;
    w.flush()?;
    info!("binarized {} subjects on {} grid points", data.n_subjects(), data.n_grid());
    Ok(())
}

fn run(cli: &Cli) -> gcfpca::Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Argument("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Argument(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Fit(a) => cmd_fit(a, cli.threads),
        Command::Simulate(a) => cmd_simulate(a, cli.threads),
        Command::Replicate(a) => cmd_replicate(a, cli.threads),
        Command::Binarize(a) => cmd_binarize(a, cli.threads),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => ExitCode::from(report(&e)),
    }
}
