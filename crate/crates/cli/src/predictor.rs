//! Predictors selectable from the command line.

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use vineshap::explain::{FnPredictor, Predictor};
use vineshap::simstudy::{BurrMeanPredictor, BurrParams};
use vineshap::Error;

use crate::error::{CliError, CliResult};

/// Parses a predictor specification:
///
/// * `const:<c>`: the constant `c`;
/// * `linear:<b0>,<w1>,...,<wM>`: `b0 + Σ w_j x_j`;
/// * `burr:<p>:<b1,...,bM>:<r1,...,rM>`: noiseless mean of the Burr
///   benchmark response;
/// * `cmd:<shell command>`: a child process that reads a CSV of query rows
///   (with header) on its input and writes one prediction per line.
pub fn parse(spec: &str, columns: &[String]) -> CliResult<Box<dyn Predictor>> {
    let usage = |msg: String| CliError::Usage(format!("predictor '{spec}': {msg}"));
    let (kind, rest) = spec.split_once(':').ok_or_else(|| usage("expected <kind>:<arguments>".into()))?;
    let m = columns.len();
    match kind {
        "const" => {
            let c: f64 = rest.trim().parse().map_err(|_| usage("constant is not a number".into()))?;
            Ok(Box::new(FnPredictor(move |_: &[f64]| c)))
        }
        "linear" => {
            let w = parse_list(rest).map_err(usage)?;
            if w.len() != m + 1 {
                return Err(usage(format!("expected an intercept and {m} weights, got {} numbers", w.len())));
            }
            Ok(Box::new(FnPredictor(move |x: &[f64]| w[0] + w[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())))
        }
        "burr" => {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 3 {
                return Err(usage("expected burr:<p>:<b list>:<r list>".into()));
            }
            let p: f64 = parts[0].trim().parse().map_err(|_| usage("p is not a number".into()))?;
            let burr = BurrParams::new(p, parse_list(parts[1]).map_err(usage)?, parse_list(parts[2]).map_err(usage)?)
                .map_err(|e| usage(e.to_string()))?;
            if burr.dim() != m {
                return Err(usage(format!("{} Burr features for {m} model columns", burr.dim())));
            }
            Ok(Box::new(BurrMeanPredictor::new(burr)))
        }
        "cmd" => {
            if rest.trim().is_empty() {
                return Err(usage("empty command".into()));
            }
            Ok(Box::new(CommandPredictor { command: rest.to_string(), columns: columns.to_vec() }))
        }
        other => Err(usage(format!("unknown kind '{other}' (const|linear|burr|cmd)"))),
    }
}

pub fn parse_list(text: &str) -> Result<Vec<f64>, String> {
    text.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| format!("'{}' is not a number", v.trim()))).collect()
}

/// Child-process predictor; one process per batch.
pub struct CommandPredictor {
    command: String,
    columns: Vec<String>,
}

impl Predictor for CommandPredictor {
    fn predict_batch(&self, rows: &[Vec<f64>]) -> vineshap::Result<Vec<f64>> {
        let fail = |msg: String| Error::Predictor(format!("command '{}': {msg}", self.command));
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| fail(format!("cannot start: {e}")))?;
        let mut input = String::with_capacity(rows.len() * self.columns.len() * 12);
        input.push_str(&self.columns.join(","));
        input.push('\n');
        for r in rows {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            input.push_str(&cells.join(","));
            input.push('\n');
        }
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || {
            // a child that exits early closes the pipe; that surfaces below
            // as a line-count mismatch
            let _ = stdin.write_all(input.as_bytes());
        });
        let stdout = child.stdout.take().expect("piped stdout");
        let mut out = Vec::with_capacity(rows.len());
        for (i, line) in BufReader::new(stdout).lines().enumerate() {
            let line = line.map_err(|e| fail(format!("reading output: {e}")))?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            out.push(t.parse::<f64>().map_err(|_| fail(format!("output line {} '{t}' is not a number", i + 1)))?);
        }
        let _ = writer.join();
        let status = child.wait().map_err(|e| fail(e.to_string()))?;
        if !status.success() {
            return Err(fail(format!("exited with {status}")));
        }
        if out.len() != rows.len() {
            return Err(fail(format!("protocol violation: {} query rows but {} predictions", rows.len(), out.len())));
        }
        Ok(out)
    }
}
