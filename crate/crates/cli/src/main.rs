//! Command-line front end: fit dependence models, explain predictions,
//! simulate Burr data and run the benchmark.

mod bench;
mod bundle;
mod data;
mod error;
mod predictor;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use vineshap::explain::{predict_all, stable_mean, CoalitionDiagnostic, Explainer, DEFAULT_K};
use vineshap::simstudy::{simulate, BurrParams};
use vineshap::ShapMethod;

use crate::bundle::{manifest_path, parse_families, Bundle, FitMethod, FitSettings, Manifest};
use crate::data::{write_csv, write_text, Dataset};
use crate::error::{io_error, CliError, CliResult};

#[derive(Parser)]
#[command(name = "vineshap", version, about = "Shapley-value explanations with D-vine copulas")]
struct Cli {
    /// Maximum number of worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Fit a dependence model to training data and write a model bundle.
    Fit {
        /// Training CSV with a header row.
        train: PathBuf,
        #[arg(long, value_enum, default_value = "vine-parametric")]
        method: FitMethod,
        /// Contribution estimator the vines serve: condsim or ratio.
        #[arg(long, default_value = "ratio")]
        shap: String,
        /// Column to drop before fitting (e.g. the response).
        #[arg(long)]
        response: Option<String>,
        /// Parametric families for vine edges, comma-separated, or `all`.
        #[arg(long, default_value = "all")]
        families: String,
        /// Mesh size of nonparametric pair copulas.
        #[arg(long, default_value_t = vineshap::bicop::DEFAULT_GRID_SIZE)]
        grid_size: usize,
        /// Random candidate orders per greedy cover step.
        #[arg(long, default_value_t = vineshap::structure::DEFAULT_CANDIDATES)]
        candidates: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Explain the predictions at each row of a test CSV.
    Explain {
        /// Model bundle written by `fit`.
        model: PathBuf,
        /// Test CSV; columns are matched to the model by name.
        test: PathBuf,
        /// const:<c> | linear:<b0>,<w..> | burr:<p>:<b..>:<r..> | cmd:<shell command>
        #[arg(long)]
        predictor: String,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Include per-coalition diagnostics in each record.
        #[arg(long)]
        diagnostics: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw from a multivariate Burr distribution.
    Simulate {
        #[arg(long)]
        p: f64,
        /// Comma-separated shape parameters b_1..b_M.
        #[arg(long)]
        b: String,
        /// Comma-separated scale parameters r_1..r_M.
        #[arg(long)]
        r: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the benchmark described by a key=value configuration file.
    Bench {
        config: PathBuf,
        /// Output directory for the report CSVs.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct ExplanationRecord<'a> {
    row_id: usize,
    features: &'a [String],
    phi0: f64,
    phi: &'a [f64],
    prediction: f64,
    method: &'a str,
    k: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<&'a [CoalitionDiagnostic]>,
}

fn parse_shap(text: &str) -> CliResult<ShapMethod> {
    text.parse().map_err(|e: vineshap::Error| CliError::Usage(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    train: &Path,
    method: FitMethod,
    shap: &str,
    response: Option<&str>,
    families: &str,
    grid_size: usize,
    candidates: usize,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    let shap_method = parse_shap(shap)?;
    let mut settings = FitSettings::new(method, shap_method, seed);
    settings.families.families = parse_families(families)?;
    settings.grid_size = grid_size;
    settings.candidates = candidates;
    let data = Dataset::read(train)?.without_column(response)?;
    let (n, m) = (data.n_rows(), data.columns.len());
    let start = Instant::now();
    let bundle = Bundle::fit(data.columns, data.rows, &settings).map_err(|e| e.context(train.display()))?;
    let fit_seconds = start.elapsed().as_secs_f64();
    write_text(out, &bundle.to_json()?)?;
    let manifest =
        Manifest { method: bundle.method_tag(), features: m, rows: n, seed, orders: bundle.n_orders(), fit_seconds };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(&manifest_path(out), &text)?;
    eprintln!("fitted {} on {n} rows x {m} features in {fit_seconds:.2}s", bundle.method_tag());
    Ok(())
}

fn cmd_explain(
    model: &Path,
    test: &Path,
    predictor: &str,
    k: usize,
    seed: u64,
    diagnostics: bool,
    out: &Path,
) -> CliResult<()> {
    if k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let bundle = Bundle::from_json(&crate::data::read_text(model)?).map_err(|e| e.context(model.display()))?;
    let rows = Dataset::read(test)?.select(&bundle.columns, test)?;
    let g = predictor::parse(predictor, &bundle.columns)?;
    let estimator = bundle.estimator()?;
    let phi0 = stable_mean(&predict_all(g.as_ref(), &bundle.train)?);
    let explainer = Explainer::new(estimator.as_ref(), g.as_ref(), phi0, k)?;
    let explanations = explainer.explain_all(&rows, seed)?;
    let tag = bundle.method_tag();
    let file = std::fs::File::create(out).map_err(|e| io_error(out, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (row_id, e) in explanations.iter().enumerate() {
        let record = ExplanationRecord {
            row_id,
            features: &bundle.columns,
            phi0: e.phi0,
            phi: &e.phi,
            prediction: e.prediction(),
            method: &tag,
            k,
            seed,
            diagnostics: diagnostics.then_some(e.diagnostics.as_slice()),
        };
        serde_json::to_writer(&mut w, &record).map_err(|e| io_error(out, e))?;
        w.write_all(b"\n").map_err(|e| io_error(out, e))?;
    }
    w.flush().map_err(|e| io_error(out, e))?;
    eprintln!("explained {} rows with {tag}", explanations.len());
    Ok(())
}

fn cmd_simulate(p: f64, b: &str, r: &str, n: usize, seed: u64, out: &Path) -> CliResult<()> {
    let b = predictor::parse_list(b).map_err(|e| CliError::Usage(format!("--b: {e}")))?;
    let r = predictor::parse_list(r).map_err(|e| CliError::Usage(format!("--r: {e}")))?;
    let burr = BurrParams::new(p, b, r).map_err(|e| CliError::Usage(e.to_string()))?;
    let header: Vec<String> = (1..=burr.dim()).map(|j| format!("x{j}")).collect();
    let rows: Vec<Vec<String>> =
        simulate(&burr, n, seed).iter().map(|x| x.iter().map(|v| v.to_string()).collect()).collect();
    write_csv(out, &header, &rows)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    match cli.command {
        Commands::Fit { train, method, shap, response, families, grid_size, candidates, seed, out } => {
            cmd_fit(&train, method, &shap, response.as_deref(), &families, grid_size, candidates, seed, &out)
        }
        Commands::Explain { model, test, predictor, k, seed, diagnostics, out } => {
            cmd_explain(&model, &test, &predictor, k, seed, diagnostics, &out)
        }
        Commands::Simulate { p, b, r, n, seed, out } => cmd_simulate(p, &b, &r, n, seed, &out),
        Commands::Bench { config, out } => {
            let report = bench::run(&config, &out)?;
            for s in &report.summary {
                eprintln!("{:<28} mean MAE {:.5} (se {:.5})", s.method.tag(), s.mean_mae, s.stderr);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
