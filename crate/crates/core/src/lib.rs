//! Shapley-value explanations for arbitrary prediction functions when the
//! features are dependent.
//!
//! Conditional expectations `v(S) = E[g(x) | x_S = x*_S]` are estimated with
//! D-vine copula models, either by simulating from the conditional
//! distribution (Rosenblatt transform and its inverse) or by reweighting
//! training rows with ratios of copula densities. Independence, Gaussian and
//! Gaussian-copula estimators are included as baselines, together with a
//! multivariate Burr benchmark whose conditionals are known in closed form.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod bicop;
pub mod dvine;
pub mod error;
pub mod explain;
pub mod marginals;
pub mod simstudy;
pub mod stats;
pub mod structure;

pub use bicop::{Family, FitOptions, PairCopula, Rotation};
pub use dvine::{DVineModel, FitMode, VineCopula};
pub use explain::{ContributionEstimator, Explainer, Explanation, FnPredictor, Predictor, TrainingData, VineSet};

pub use error::{Error, Result};

pub use marginals::EmpiricalMarginal;
pub use structure::{Coalition, CoverPlan, ShapMethod};
