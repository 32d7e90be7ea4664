//! Fitted-model bundles: training rows plus the cover plan and vines, or the
//! baseline parameters, in a versioned JSON document.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use vineshap::bicop::{Family, FitOptions, Rotation, DEFAULT_GRID_SIZE};
use vineshap::explain::{
    ContributionEstimator, GaussianCopulaEstimator, GaussianEstimator, IndependenceEstimator, TrainingData,
    VineCondSimEstimator, VineRatioEstimator, VineSet,
};
use vineshap::structure::DEFAULT_CANDIDATES;
use vineshap::{CoverPlan, FitMode, ShapMethod, VineCopula};

use crate::error::{CliError, CliResult};

const FORMAT_NAME: &str = "vineshap-bundle";
const FORMAT_VERSION: u32 = 1;

/// Dependence model fitted by `fit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    VineParametric,
    VineNonparametric,
    Gaussian,
    GaussianCopula,
    Independence,
}

impl FitMethod {
    pub fn tag(self) -> &'static str {
        match self {
            FitMethod::VineParametric => "vine-parametric",
            FitMethod::VineNonparametric => "vine-nonparametric",
            FitMethod::Gaussian => "gaussian",
            FitMethod::GaussianCopula => "gaussian-copula",
            FitMethod::Independence => "independence",
        }
    }
}

/// Parses a comma-separated family list (`all`, `independence`,
/// `gaussian`, `clayton0`, `clayton90`, `clayton180`, `clayton270`).
pub fn parse_families(text: &str) -> CliResult<Vec<Family>> {
    if text.trim() == "all" {
        return Ok(Family::all());
    }
    text.split(',')
        .map(|f| match f.trim() {
            "independence" => Ok(Family::Independence),
            "gaussian" => Ok(Family::Gaussian),
            "clayton" | "clayton0" => Ok(Family::Clayton(Rotation::R0)),
            "clayton90" => Ok(Family::Clayton(Rotation::R90)),
            "clayton180" | "survival-clayton" => Ok(Family::Clayton(Rotation::R180)),
            "clayton270" => Ok(Family::Clayton(Rotation::R270)),
            other => Err(CliError::Usage(format!(
                "unknown copula family '{other}' (all|independence|gaussian|clayton0|clayton90|clayton180|clayton270)"
            ))),
        })
        .collect()
}

/// Settings of a fit besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub method: FitMethod,
    pub shap_method: ShapMethod,
    pub families: FitOptions,
    pub grid_size: usize,
    pub candidates: usize,
    pub seed: u64,
}

impl FitSettings {
    pub fn new(method: FitMethod, shap_method: ShapMethod, seed: u64) -> Self {
        FitSettings {
            method,
            shap_method,
            families: FitOptions::default(),
            grid_size: DEFAULT_GRID_SIZE,
            candidates: DEFAULT_CANDIDATES,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPayload {
    Independence,
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    GaussianCopula { correlation: Vec<Vec<f64>> },
    Vine { plan: CoverPlan, vines: Vec<VineCopula> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub format: String,
    pub version: u32,
    pub method: FitMethod,
    pub shap_method: ShapMethod,
    pub seed: u64,
    pub columns: Vec<String>,
    pub train: Vec<Vec<f64>>,
    pub model: ModelPayload,
}

impl Bundle {
    pub fn fit(columns: Vec<String>, rows: Vec<Vec<f64>>, settings: &FitSettings) -> CliResult<Self> {
        let m = columns.len();
        if m > vineshap::explain::MAX_FEATURES {
            return Err(CliError::Data(format!(
                "{m} features exceed the limit of {} for exact Shapley enumeration",
                vineshap::explain::MAX_FEATURES
            )));
        }
        if rows.len() < 2 {
            return Err(CliError::Data(format!("training data needs at least 2 rows, got {}", rows.len())));
        }
        let train = TrainingData::new(rows)?;
        let model = match settings.method {
            FitMethod::Independence => ModelPayload::Independence,
            FitMethod::Gaussian => {
                let g = GaussianEstimator::fit(&train);
                ModelPayload::Gaussian { mean: g.mean, cov: g.cov }
            }
            FitMethod::GaussianCopula => {
                ModelPayload::GaussianCopula { correlation: GaussianCopulaEstimator::fit(&train).correlation() }
            }
            FitMethod::VineParametric | FitMethod::VineNonparametric => {
                if m < 2 {
                    return Err(CliError::Data("a vine needs at least 2 feature columns".into()));
                }
                let mode = if settings.method == FitMethod::VineParametric {
                    FitMode::Parametric(settings.families.clone())
                } else {
                    FitMode::Nonparametric { grid_size: settings.grid_size }
                };
                let set = VineSet::fit(&train, settings.shap_method, &mode, settings.candidates, settings.seed)?;
                ModelPayload::Vine { plan: set.plan().clone(), vines: set.copulas() }
            }
        };
        Ok(Bundle {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            method: settings.method,
            shap_method: settings.shap_method,
            seed: settings.seed,
            columns,
            train: train.rows().to_vec(),
            model,
        })
    }

    pub fn to_json(&self) -> CliResult<String> {
        serde_json::to_string(self).map_err(|e| CliError::Data(format!("cannot serialize model bundle: {e}")))
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let b: Bundle =
            serde_json::from_str(text).map_err(|e| CliError::Data(format!("malformed model bundle: {e}")))?;
        if b.format != FORMAT_NAME {
            return Err(CliError::Data(format!("not a model bundle (format '{}')", b.format)));
        }
        if b.version != FORMAT_VERSION {
            return Err(CliError::Data(format!("unsupported bundle version {}", b.version)));
        }
        Ok(b)
    }

    /// Method tag reported with explanations.
    pub fn method_tag(&self) -> String {
        match self.method {
            FitMethod::VineParametric | FitMethod::VineNonparametric => {
                let shap = match self.shap_method {
                    ShapMethod::CondSim => "condsim",
                    ShapMethod::Ratio => "ratio",
                };
                let kind = if self.method == FitMethod::VineParametric { "parametric" } else { "nonparametric" };
                format!("vine-{shap}-{kind}")
            }
            other => other.tag().to_string(),
        }
    }

    pub fn estimator(&self) -> CliResult<Box<dyn ContributionEstimator>> {
        let train = TrainingData::new(self.train.clone())?;
        if train.dim() != self.columns.len() {
            return Err(CliError::Data("bundle training rows do not match its column list".into()));
        }
        let tag = self.method_tag();
        Ok(match &self.model {
            ModelPayload::Independence => Box::new(IndependenceEstimator::new(train)),
            ModelPayload::Gaussian { mean, cov } => {
                Box::new(GaussianEstimator { mean: mean.clone(), cov: cov.clone() })
            }
            ModelPayload::GaussianCopula { correlation } => {
                Box::new(GaussianCopulaEstimator::with_correlation(train.marginals().clone(), correlation.clone())?)
            }
            ModelPayload::Vine { plan, vines } => {
                let set = VineSet::from_copulas(&train, plan.clone(), vines.clone())?;
                match self.shap_method {
                    ShapMethod::CondSim => Box::new(VineCondSimEstimator::new(set, tag)?),
                    ShapMethod::Ratio => Box::new(VineRatioEstimator::new(set, train, tag)?),
                }
            }
        })
    }

    pub fn n_orders(&self) -> usize {
        match &self.model {
            ModelPayload::Vine { plan, .. } => plan.orders.len(),
            _ => 0,
        }
    }
}

impl FromStr for FitMethod {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        [
            FitMethod::VineParametric,
            FitMethod::VineNonparametric,
            FitMethod::Gaussian,
            FitMethod::GaussianCopula,
            FitMethod::Independence,
        ]
        .into_iter()
        .find(|m| m.tag() == s)
        .ok_or_else(|| CliError::Usage(format!("unknown fit method '{s}'")))
    }
}

/// Fit metadata written next to the bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub method: String,
    pub features: usize,
    pub rows: usize,
    pub seed: u64,
    pub orders: usize,
    pub fit_seconds: f64,
}

/// Path of the manifest for a bundle path.
pub fn manifest_path(bundle: &std::path::Path) -> std::path::PathBuf {
    let mut name = bundle.as_os_str().to_owned();
    name.push(".manifest.json");
    std::path::PathBuf::from(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, m: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..m).map(|j| ((i * (j + 3) * 7919) % 101) as f64 + 0.01 * i as f64).collect()).collect()
    }

    #[test]
    fn family_lists() {
        assert_eq!(parse_families("all").unwrap(), Family::all());
        assert_eq!(
            parse_families("gaussian, clayton180").unwrap(),
            vec![Family::Gaussian, Family::Clayton(Rotation::R180)]
        );
        assert!(parse_families("gumbel").is_err());
    }

    #[test]
    fn bundle_roundtrip() {
        let cols = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        for method in
            [FitMethod::VineParametric, FitMethod::Gaussian, FitMethod::GaussianCopula, FitMethod::Independence]
        {
            let b = Bundle::fit(cols.clone(), rows(60, 3), &FitSettings::new(method, ShapMethod::CondSim, 3)).unwrap();
            let text = b.to_json().unwrap();
            let back = Bundle::from_json(&text).unwrap();
            assert_eq!(back, b);
            assert_eq!(back.to_json().unwrap(), text);
            back.estimator().unwrap();
        }
        let b = Bundle::fit(cols, rows(60, 3), &FitSettings::new(FitMethod::VineParametric, ShapMethod::CondSim, 3))
            .unwrap();
        assert_eq!(b.n_orders(), 2);
        assert_eq!(b.method_tag(), "vine-condsim-parametric");
    }
}
