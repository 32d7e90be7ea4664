//! `bench`: key=value configuration files and report writing.

use std::path::Path;

use vineshap::bicop::FitOptions;
use vineshap::simstudy::{run_experiment, BurrParams, ExperimentConfig, Method, PredictorKind, Report, Response};

use crate::bundle::parse_families;
use crate::data::{write_csv, write_text};
use crate::error::{io_error, CliError, CliResult};
use crate::predictor::parse_list;

const KEYS: [&str; 16] = [
    "p",
    "m",
    "b",
    "r",
    "n_train",
    "n_test",
    "reps",
    "k",
    "k_oracle",
    "methods",
    "predictor",
    "seed",
    "noise",
    "families",
    "grid_size",
    "candidates",
];

/// Parses a configuration; unspecified keys take the desk-scale defaults.
pub fn parse_config(text: &str) -> CliResult<ExperimentConfig> {
    let mut entries: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("line {line_no}: expected key=value, got '{line}'")))?;
        let key = k.trim().to_ascii_lowercase();
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!("line {line_no}: unknown config key '{}'", k.trim())));
        }
        if entries.iter().any(|(e, _, _)| *e == key) {
            return Err(CliError::Usage(format!("line {line_no}: config key '{}' given twice", k.trim())));
        }
        entries.push((key, v.trim().to_string(), line_no));
    }
    let get = |key: &str| entries.iter().find(|(k, _, _)| k == key).map(|(_, v, l)| (v.as_str(), *l));
    fn num<T: std::str::FromStr>(key: &str, v: (&str, usize)) -> CliResult<T> {
        v.0.parse().map_err(|_| CliError::Usage(format!("line {}: bad value '{}' for config key '{key}'", v.1, v.0)))
    }
    let bad = |key: &str, line: usize, e: String| CliError::Usage(format!("line {line}: config key '{key}': {e}"));

    let p: f64 = match get("p") {
        Some(v) => num("p", v)?,
        None => 0.5,
    };
    let m: usize = match get("m") {
        Some(v) => num("M", v)?,
        None => 4,
    };
    let mut cfg = ExperimentConfig::desk_scale(p).map_err(|e| CliError::Usage(e.to_string()))?;
    let reference = BurrParams::reference(p, m.clamp(1, 10)).map_err(|e| CliError::Usage(e.to_string()))?;
    let b = match get("b") {
        Some((v, l)) => parse_list(v).map_err(|e| bad("b", l, e))?,
        None => reference.b().to_vec(),
    };
    let r = match get("r") {
        Some((v, l)) => parse_list(v).map_err(|e| bad("r", l, e))?,
        None => reference.r().to_vec(),
    };
    if b.len() != m || r.len() != m {
        return Err(CliError::Usage(format!("M = {m} but b has {} and r has {} entries", b.len(), r.len())));
    }
    cfg.burr = BurrParams::new(p, b, r).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(v) = get("n_train") {
        cfg.n_train = num("n_train", v)?;
    }
    if let Some(v) = get("n_test") {
        cfg.n_test = num("n_test", v)?;
    }
    if let Some(v) = get("reps") {
        cfg.repetitions = num("reps", v)?;
    }
    if let Some(v) = get("k") {
        cfg.k = num("K", v)?;
    }
    if let Some(v) = get("k_oracle") {
        cfg.k_oracle = num("K_oracle", v)?;
    }
    if let Some(v) = get("seed") {
        cfg.seed = num("seed", v)?;
    }
    if let Some(v) = get("grid_size") {
        cfg.grid_size = num("grid_size", v)?;
    }
    if let Some(v) = get("candidates") {
        cfg.candidates = num("candidates", v)?;
    }
    if let Some(v) = get("noise") {
        cfg.response = Response::new(num("noise", v)?).map_err(|e| bad("noise", v.1, e.to_string()))?;
    }
    if let Some((v, l)) = get("methods") {
        cfg.methods = if v == "all" {
            Method::ALL.to_vec()
        } else {
            v.split(',')
                .map(|s| s.trim().parse::<Method>().map_err(|e| bad("methods", l, e.to_string())))
                .collect::<CliResult<_>>()?
        };
    }
    if let Some((v, l)) = get("predictor") {
        cfg.predictor = v.parse::<PredictorKind>().map_err(|e| bad("predictor", l, e.to_string()))?;
    }
    if let Some((v, l)) = get("families") {
        cfg.families = FitOptions {
            families: parse_families(v).map_err(|e| bad("families", l, e.to_string()))?,
            mle_refine: false,
        };
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Resolved configuration, one key per line, plus the response formula.
pub fn manifest(cfg: &ExperimentConfig) -> String {
    let predictor = match cfg.predictor {
        PredictorKind::AnalyticMean => "analytic_mean".to_string(),
        PredictorKind::Knn(k) => format!("knn:{k}"),
    };
    let families: Vec<String> = cfg.families.families.iter().map(|f| format!("{f:?}")).collect();
    let methods: Vec<&str> = cfg.methods.iter().map(|m| m.tag()).collect();
    let m = cfg.burr.dim();
    [
        format!("p={}", cfg.burr.p()),
        format!("M={m}"),
        format!("b={}", join(cfg.burr.b())),
        format!("r={}", join(cfg.burr.r())),
        format!("n_train={}", cfg.n_train),
        format!("n_test={}", cfg.n_test),
        format!("reps={}", cfg.repetitions),
        format!("K={}", cfg.k),
        format!("K_oracle={}", cfg.k_oracle),
        format!("methods={}", methods.join(",")),
        format!("predictor={predictor}"),
        format!("seed={}", cfg.seed),
        format!("noise={}", cfg.response.noise_scale),
        format!("families={}", families.join(",")),
        format!("grid_size={}", cfg.grid_size),
        format!("candidates={}", cfg.candidates),
        format!("response=y = {}", cfg.response.formula(m)),
        String::new(),
    ]
    .join("\n")
}

/// Writes `results.csv`, `summary.csv`, `timings.csv` and `manifest.txt`.
/// All but the timings are a pure function of the configuration.
pub fn write_report(out_dir: &Path, cfg: &ExperimentConfig, report: &Report) -> CliResult<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_error(out_dir, e))?;
    let h = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let results: Vec<Vec<String>> = report
        .results
        .iter()
        .map(|r| vec![r.method.tag().to_string(), r.repetition.to_string(), r.mae.to_string()])
        .collect();
    write_csv(&out_dir.join("results.csv"), &h(&["method", "repetition", "mae"]), &results)?;
    let summary: Vec<Vec<String>> = report
        .summary
        .iter()
        .map(|s| vec![s.method.tag().to_string(), s.mean_mae.to_string(), s.stderr.to_string()])
        .collect();
    write_csv(&out_dir.join("summary.csv"), &h(&["method", "mean_mae", "stderr"]), &summary)?;
    let timings: Vec<Vec<String>> = report
        .results
        .iter()
        .map(|r| vec![r.method.tag().to_string(), r.repetition.to_string(), format!("{:.3}", r.seconds)])
        .collect();
    write_csv(&out_dir.join("timings.csv"), &h(&["method", "repetition", "seconds"]), &timings)?;
    write_text(&out_dir.join("manifest.txt"), &manifest(cfg))
}

pub fn run(config_path: &Path, out_dir: &Path) -> CliResult<Report> {
    let text = crate::data::read_text(config_path)?;
    let cfg = parse_config(&text).map_err(|e| e.context(config_path.display()))?;
    let report = run_experiment(&cfg)?;
    write_report(out_dir, &cfg, &report)?;
    Ok(report)
}
