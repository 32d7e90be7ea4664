//! Shapley values by exact enumeration of coalitions, with pluggable
//! estimators of the contribution function `v(S) = E[g(x) | x_S = x*_S]`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dvine::{check_table, fit_marginals, DVineModel, FitMode, VineCopula};
use crate::error::{Error, Result};
use crate::marginals::EmpiricalMarginal;
use crate::stats::{norm_cdf, norm_quantile};
use crate::structure::{greedy_cover, Coalition, CoverPlan, Role, ShapMethod, DEFAULT_CANDIDATES};

/// Largest feature count accepted for exact enumeration.
pub const MAX_FEATURES: usize = 20;

/// Default Monte Carlo / subsample size.
pub const DEFAULT_K: usize = 1000;

/// Upper bound on the number of rows passed to one predictor call.
pub const MAX_BATCH_ROWS: usize = 1 << 18;

/// A prediction function on the data scale. Implementations must be
/// deterministic and must tolerate concurrent calls.
pub trait Predictor: Send + Sync {
    fn predict_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>>;
}

/// Adapts a closure on single rows.
pub struct FnPredictor<F>(pub F);

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn predict_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(rows.iter().map(|r| (self.0)(r)).collect())
    }
}

impl<P: Predictor + ?Sized> Predictor for Arc<P> {
    fn predict_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        (**self).predict_batch(rows)
    }
}

/// Calls the predictor in bounded batches and checks the result.
pub fn predict_all(predictor: &dyn Predictor, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(MAX_BATCH_ROWS) {
        let pred = predictor.predict_batch(chunk)?;
        if pred.len() != chunk.len() {
            return Err(Error::Predictor(format!("expected {} predictions, got {}", chunk.len(), pred.len())));
        }
        if let Some(i) = pred.iter().position(|p| !p.is_finite()) {
            return Err(Error::Predictor(format!("non-finite prediction for query row {i}")));
        }
        out.extend(pred);
    }
    Ok(out)
}

/// Mean written as an offset from the first value, so that a constant
/// sequence averages to exactly that constant.
pub fn stable_mean(values: &[f64]) -> f64 {
    let Some(&g0) = values.first() else { return f64::NAN };
    g0 + values.iter().map(|g| g - g0).sum::<f64>() / values.len() as f64
}

/// Weighted counterpart of [`stable_mean`].
pub fn stable_weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    let Some(&g0) = values.first() else { return f64::NAN };
    let total: f64 = weights.iter().sum();
    g0 + values.iter().zip(weights).map(|(g, w)| w * (g - g0)).sum::<f64>() / total
}

/// Shapley kernel weight `|S|! (M - |S| - 1)! / M!` for a coalition of size
/// `s` not containing the feature.
pub fn shapley_weight(m: usize, s: usize) -> f64 {
    // 1 / (M * binom(M - 1, s))
    let mut binom = 1.0;
    for i in 0..s {
        binom = binom * (m - 1 - i) as f64 / (i + 1) as f64;
    }
    1.0 / (m as f64 * binom)
}

/// Shapley values from a complete table of contributions indexed by mask.
pub fn shapley_from_values(m: usize, values: &[f64]) -> Result<Vec<f64>> {
    if m == 0 || m > 30 || values.len() != 1usize << m {
        return Err(Error::ShapeMismatch(format!("{} contributions for {m} features", values.len())));
    }
    let weights: Vec<f64> = (0..m).map(|s| shapley_weight(m, s)).collect();
    let mut phi = vec![0.0; m];
    for (j, pj) in phi.iter_mut().enumerate() {
        let bit = 1usize << j;
        let mut acc = 0.0;
        for mask in 0..values.len() {
            if mask & bit == 0 {
                let s = mask.count_ones() as usize;
                acc += weights[s] * (values[mask | bit] - values[mask]);
            }
        }
        *pj = acc;
    }
    Ok(phi)
}

/// How one coalition's contribution is estimated from predictions.
#[derive(Debug, Clone, Default)]
pub struct QuerySet {
    /// Full-length data-scale rows to evaluate the predictor on.
    pub rows: Vec<Vec<f64>>,
    /// Importance weights; `None` means a plain average.
    pub weights: Option<Vec<f64>>,
    /// Set when the estimate took a fallback path.
    pub flagged: bool,
}

/// Training rows shared by all coalitions of one explanation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subsample {
    /// `K` rows drawn uniformly with replacement.
    WithReplacement,
    /// `K` distinct rows when `K <= N`, otherwise with replacement.
    WithoutReplacement,
}

/// Draws `k` row indices out of `n`.
pub fn draw_rows<R: Rng + ?Sized>(n: usize, k: usize, policy: Subsample, rng: &mut R) -> Vec<usize> {
    match policy {
        Subsample::WithoutReplacement if k <= n => index::sample(rng, n, k).into_vec(),
        _ => (0..k).map(|_| rng.random_range(0..n)).collect(),
    }
}

/// Estimator of the contribution function for proper, non-empty coalitions.
pub trait ContributionEstimator: Send + Sync {
    /// Short method tag.
    fn name(&self) -> &str;

    /// Number of features.
    fn dim(&self) -> usize;

    /// Training-row subsample to be shared across coalitions, if any, as
    /// (number of training rows, policy).
    fn subsample(&self) -> Option<(usize, Subsample)> {
        None
    }

    /// Query rows for `v(s)`. `shared` holds the shared subsample when
    /// [`subsample`](Self::subsample) requested one; `rng` is a stream owned
    /// by this coalition.
    fn queries(
        &self,
        s: Coalition,
        x_star: &[f64],
        k: usize,
        shared: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<QuerySet>;
}

fn fill_rows(x_star: &[f64], s: Coalition, rows: impl Iterator<Item = Vec<f64>>) -> Vec<Vec<f64>> {
    rows.map(|mut r| {
        for j in s.indices() {
            r[j] = x_star[j];
        }
        r
    })
    .collect()
}

/// Assembles full rows from `x*_S` and draws of the complement features
/// (listed by increasing index).
fn assemble(x_star: &[f64], s: Coalition, draws: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let free = s.complement().indices();
    draws
        .into_iter()
        .map(|d| {
            let mut r = x_star.to_vec();
            for (&j, v) in free.iter().zip(d) {
                r[j] = v;
            }
            r
        })
        .collect()
}

/// Training data shared by the estimators.
#[derive(Debug, Clone)]
pub struct TrainingData {
    rows: Arc<Vec<Vec<f64>>>,
    marginals: Arc<Vec<EmpiricalMarginal>>,
}

impl TrainingData {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = check_table(&rows)?;
        if m == 0 {
            return Err(Error::invalid("training data has no columns"));
        }
        let marginals = Arc::new(fit_marginals(&rows)?);
        Ok(TrainingData { rows: Arc::new(rows), marginals })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn marginals(&self) -> &Arc<Vec<EmpiricalMarginal>> {
        &self.marginals
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    /// Pseudo-observations of the training rows.
    pub fn copula_rows(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| self.marginals.iter().zip(r).map(|(f, &x)| f.cdf(x)).collect()).collect()
    }

    pub fn to_copula_scale(&self, x: &[f64]) -> Vec<f64> {
        self.marginals.iter().zip(x).map(|(f, &v)| f.cdf(v)).collect()
    }
}

/// Features assumed independent: complement features come from training
/// rows drawn with replacement.
pub struct IndependenceEstimator {
    train: TrainingData,
}

impl IndependenceEstimator {
    pub fn new(train: TrainingData) -> Self {
        IndependenceEstimator { train }
    }
}

impl ContributionEstimator for IndependenceEstimator {
    fn name(&self) -> &str {
        "independence"
    }

    fn dim(&self) -> usize {
        self.train.dim()
    }

    fn subsample(&self) -> Option<(usize, Subsample)> {
        Some((self.train.n(), Subsample::WithReplacement))
    }

    fn queries(
        &self,
        s: Coalition,
        x_star: &[f64],
        _k: usize,
        shared: &[usize],
        _rng: &mut ChaCha8Rng,
    ) -> Result<QuerySet> {
        let rows = fill_rows(x_star, s, shared.iter().map(|&i| self.train.rows[i].clone()));
        Ok(QuerySet { rows, weights: None, flagged: false })
    }
}

/// Conditional distribution of `N(mean, cov)` given the `s` coordinates.
struct ConditionalNormal {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    ridged: bool,
}

fn cholesky_with_ridge(a: DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    if let Some(c) = a.clone().cholesky() {
        return Ok((c.l(), false));
    }
    let n = a.nrows();
    let ridge = 1e-8 * a.trace().abs().max(f64::MIN_POSITIVE);
    let mut bump = ridge;
    for _ in 0..8 {
        let b = &a + DMatrix::identity(n, n) * bump;
        if let Some(c) = b.cholesky() {
            return Ok((c.l(), true));
        }
        bump *= 100.0;
    }
    Err(Error::Numeric("covariance matrix is not positive definite even after regularization".into()))
}

fn conditional_normal(mean: &DVector<f64>, cov: &DMatrix<f64>, s: Coalition, x_s: &[f64]) -> Result<ConditionalNormal> {
    let si = s.indices();
    let fi = s.complement().indices();
    let pick =
        |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |a, b| cov[(rows[a], cols[b])]);
    let sss = pick(&si, &si);
    let sfs = pick(&fi, &si);
    let sff = pick(&fi, &fi);
    let (l, ridged_s) = cholesky_with_ridge(sss)?;
    let chol = nalgebra::Cholesky::pack_dirty(l);
    let diff = DVector::from_iterator(si.len(), si.iter().zip(x_s).map(|(&j, &x)| x - mean[j]));
    let mu_f = DVector::from_iterator(fi.len(), fi.iter().map(|&j| mean[j]));
    let cond_mean = mu_f + &sfs * chol.solve(&diff);
    let cond_cov = sff - &sfs * chol.solve(&sfs.transpose());
    let cond_cov = (&cond_cov + cond_cov.transpose()) * 0.5;
    let (cl, ridged_f) = cholesky_with_ridge(cond_cov)?;
    Ok(ConditionalNormal { mean: cond_mean, chol: cl, ridged: ridged_s || ridged_f })
}

impl ConditionalNormal {
    fn sample(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let d = self.mean.len();
        (0..k)
            .map(|_| {
                let e = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
                (&self.mean + &self.chol * e).iter().copied().collect()
            })
            .collect()
    }
}

fn sample_covariance(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let m = rows[0].len();
    let mean = DVector::from_fn(m, |j, _| crate::stats::mean(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()));
    let mut cov = DMatrix::zeros(m, m);
    for r in rows {
        let d = DVector::from_fn(m, |j, _| r[j] - mean[j]);
        cov += &d * d.transpose();
    }
    (mean, cov / (n as f64 - 1.0).max(1.0))
}

/// Features assumed jointly Gaussian with the sample mean and covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEstimator {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl GaussianEstimator {
    pub fn fit(train: &TrainingData) -> Self {
        let (mean, cov) = sample_covariance(train.rows());
        GaussianEstimator {
            mean: mean.iter().copied().collect(),
            cov: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    fn matrices(&self) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.mean.len();
        (DVector::from_vec(self.mean.clone()), DMatrix::from_fn(m, m, |i, j| self.cov[i][j]))
    }
}

impl ContributionEstimator for GaussianEstimator {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn queries(
        &self,
        s: Coalition,
        x_star: &[f64],
        k: usize,
        _shared: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<QuerySet> {
        let (mean, cov) = self.matrices();
        let x_s: Vec<f64> = s.indices().iter().map(|&j| x_star[j]).collect();
        let cn = conditional_normal(&mean, &cov, s, &x_s)?;
        Ok(QuerySet { rows: assemble(x_star, s, cn.sample(k, rng)), weights: None, flagged: cn.ridged })
    }
}

/// Gaussian copula with the correlation matrix of the training normal
/// scores, combined with the empirical margins.
pub struct GaussianCopulaEstimator {
    marginals: Arc<Vec<EmpiricalMarginal>>,
    corr: DMatrix<f64>,
}

impl GaussianCopulaEstimator {
    pub fn fit(train: &TrainingData) -> Self {
        let scores: Vec<Vec<f64>> =
            train.copula_rows().iter().map(|u| u.iter().map(|&p| norm_quantile(p)).collect()).collect();
        let (_, cov) = sample_covariance(&scores);
        let m = cov.nrows();
        let corr =
            DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt() });
        GaussianCopulaEstimator { marginals: train.marginals().clone(), corr }
    }

    pub fn with_correlation(marginals: Arc<Vec<EmpiricalMarginal>>, corr: Vec<Vec<f64>>) -> Result<Self> {
        let m = marginals.len();
        if corr.len() != m || corr.iter().any(|r| r.len() != m) {
            return Err(Error::ShapeMismatch(format!("correlation matrix is not {m} x {m}")));
        }
        Ok(GaussianCopulaEstimator { marginals, corr: DMatrix::from_fn(m, m, |i, j| corr[i][j]) })
    }

    pub fn correlation(&self) -> Vec<Vec<f64>> {
        self.corr.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

impl ContributionEstimator for GaussianCopulaEstimator {
    fn name(&self) -> &str {
        "gaussian-copula"
    }

    fn dim(&self) -> usize {
        self.marginals.len()
    }

    fn queries(
        &self,
        s: Coalition,
        x_star: &[f64],
        k: usize,
        _shared: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<QuerySet> {
        let m = self.dim();
        let z_s: Vec<f64> = s.indices().iter().map(|&j| norm_quantile(self.marginals[j].cdf(x_star[j]))).collect();
        let cn = conditional_normal(&DVector::zeros(m), &self.corr, s, &z_s)?;
        let free = s.complement().indices();
        let draws = cn
            .sample(k, rng)
            .into_iter()
            .map(|z| {
                free.iter()
                    .zip(z)
                    .map(|(&j, zj)| self.marginals[j].quantile_unchecked(norm_cdf(zj).clamp(1e-300, 1.0 - 1e-16)))
                    .collect()
            })
            .collect();
        Ok(QuerySet { rows: assemble(x_star, s, draws), weights: None, flagged: cn.ridged })
    }
}

/// The D-vines of a cover plan, fitted to the same training data.
#[derive(Debug, Clone)]
pub struct VineSet {
    plan: CoverPlan,
    models: Vec<DVineModel>,
}

impl VineSet {
    /// Searches a cover plan with `candidates` random orders per greedy step
    /// and fits one vine per order.
    pub fn fit(train: &TrainingData, method: ShapMethod, mode: &FitMode, candidates: usize, seed: u64) -> Result<Self> {
        let m = train.dim();
        if m > MAX_FEATURES {
            return Err(Error::TooManyFeatures(m, MAX_FEATURES));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = greedy_cover(m, method, candidates, &mut rng)?;
        VineSet::fit_plan(train, plan, mode)
    }

    pub fn fit_default(train: &TrainingData, method: ShapMethod, mode: &FitMode, seed: u64) -> Result<Self> {
        VineSet::fit(train, method, mode, DEFAULT_CANDIDATES, seed)
    }

    pub fn fit_plan(train: &TrainingData, plan: CoverPlan, mode: &FitMode) -> Result<Self> {
        let columns = crate::dvine::pseudo_observations(train.marginals(), train.rows());
        let models = plan
            .orders
            .par_iter()
            .map(|order| {
                let copula = crate::dvine::fit_copula(&columns, order, mode)?;
                Ok(DVineModel::from_parts(copula, train.marginals().clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VineSet { plan, models })
    }

    /// Assembles a set from already fitted copulas (one per plan order).
    pub fn from_copulas(train: &TrainingData, plan: CoverPlan, copulas: Vec<VineCopula>) -> Result<Self> {
        if copulas.len() != plan.orders.len() {
            return Err(Error::ShapeMismatch(format!("{} vines for {} orders", copulas.len(), plan.orders.len())));
        }
        let mut models = Vec::with_capacity(copulas.len());
        for (c, order) in copulas.into_iter().zip(&plan.orders) {
            if c.order() != order.as_slice() || c.dim() != train.dim() {
                return Err(Error::ShapeMismatch("vine order does not match the cover plan".into()));
            }
            models.push(DVineModel::from_parts(c, train.marginals().clone()));
        }
        Ok(VineSet { plan, models })
    }

    pub fn plan(&self) -> &CoverPlan {
        &self.plan
    }

    pub fn models(&self) -> &[DVineModel] {
        &self.models
    }

    pub fn copulas(&self) -> Vec<VineCopula> {
        self.models.iter().map(|m| m.copula().clone()).collect()
    }

    fn assigned(&self, s: Coalition) -> Result<(&DVineModel, Role)> {
        let key = match self.plan.method {
            ShapMethod::CondSim => s.mask,
            ShapMethod::Ratio => s.complement().mask,
        };
        let a = self.plan.lookup(s).ok_or(Error::PlanCoverage(key as u64))?;
        Ok((&self.models[a.order], a.role))
    }
}

/// Conditional simulation from the D-vine assigned to each coalition.
pub struct VineCondSimEstimator {
    vines: VineSet,
    name: String,
}

impl VineCondSimEstimator {
    pub fn new(vines: VineSet, name: impl Into<String>) -> Result<Self> {
        if vines.plan.method != ShapMethod::CondSim {
            return Err(Error::invalid("conditional simulation needs a prefix/suffix cover plan"));
        }
        Ok(VineCondSimEstimator { vines, name: name.into() })
    }
}

impl ContributionEstimator for VineCondSimEstimator {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.vines.plan.m
    }

    fn queries(
        &self,
        s: Coalition,
        x_star: &[f64],
        k: usize,
        _shared: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<QuerySet> {
        let (model, _) = self.vines.assigned(s)?;
        let draws = model.conditional_sample(s, x_star, k, rng)?;
        Ok(QuerySet { rows: assemble(x_star, s, draws), weights: None, flagged: false })
    }
}

/// Training rows reweighted by ratios of D-vine copula densities.
pub struct VineRatioEstimator {
    vines: VineSet,
    train: TrainingData,
    train_u: Vec<Vec<f64>>,
    name: String,
}

/// Normalized weights computed in the log domain, or `None` when no weight
/// is usable.
pub fn normalize_log_weights(log_w: &[f64]) -> Option<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let w: Vec<f64> = log_w.iter().map(|&l| if l.is_nan() { 0.0 } else { (l - max).exp() }).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    Some(w.into_iter().map(|x| x / total).collect())
}

/// Effective sample size `1 / Σ π²` of normalized weights.
pub fn effective_sample_size(pi: &[f64]) -> f64 {
    1.0 / pi.iter().map(|p| p * p).sum::<f64>()
}

impl VineRatioEstimator {
    pub fn new(vines: VineSet, train: TrainingData, name: impl Into<String>) -> Result<Self> {
        if vines.plan.method != ShapMethod::Ratio {
            return Err(Error::invalid("the ratio method needs a block cover plan"));
        }
        let train_u = train.copula_rows();
        Ok(VineRatioEstimator { vines, train, train_u, name: name.into() })
    }

    /// Log importance weights `log ĉ(u_S̄, u*_S) − log ĉ_S̄(u_S̄)` of the
    /// given training rows.
    fn log_weights(&self, s: Coalition, x_star: &[f64], rows: &[usize]) -> Result<Vec<f64>> {
        let u_star = self.train.to_copula_scale(x_star);
        let sbar = s.complement();
        let (model, block) = if sbar.len() >= 2 {
            let (model, role) = self.vines.assigned(s)?;
            match role {
                Role::Block { start, end } => (model, Some((start, end))),
                _ => return Err(Error::PlanCoverage(sbar.mask as u64)),
            }
        } else {
            (&self.vines.models[0], None)
        };
        let si = s.indices();
        rows.iter()
            .map(|&i| {
                let mut u = self.train_u[i].clone();
                for &j in &si {
                    u[j] = u_star[j];
                }
                let joint = model.copula_log_density(&u);
                let marginal = match block {
                    Some((start, end)) => model.marginal_copula_log_density(start, end, &u)?,
                    None => 0.0,
                };
                Ok(joint - marginal)
            })
            .collect()
    }

    /// Normalized implicit resampling probabilities of the given training
    /// rows for coalition `s`.
    pub fn implicit_weights(&self, s: Coalition, x_star: &[f64], rows: &[usize]) -> Result<Vec<f64>> {
        let log_w = self.log_weights(s, x_star, rows)?;
        normalize_log_weights(&log_w).ok_or_else(|| Error::Numeric("all importance weights vanished".into()))
    }
}

impl ContributionEstimator for VineRatioEstimator {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.vines.plan.m
    }

    fn subsample(&self) -> Option<(usize, Subsample)> {
        Some((self.train.n(), Subsample::WithoutReplacement))
    }

    fn queries(
        &self,
        s: Coalition,
        x_star: &[f64],
        _k: usize,
        shared: &[usize],
        _rng: &mut ChaCha8Rng,
    ) -> Result<QuerySet> {
        let rows = fill_rows(x_star, s, shared.iter().map(|&i| self.train.rows[i].clone()));
        let log_w = self.log_weights(s, x_star, shared)?;
        Ok(match normalize_log_weights(&log_w) {
            Some(w) => QuerySet { rows, weights: Some(w), flagged: false },
            None => {
                log::warn!("importance weights vanished for coalition {:#b}; using the plain average", s.mask);
                QuerySet { rows, weights: None, flagged: true }
            }
        })
    }
}

/// Per-coalition record kept with an explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalitionDiagnostic {
    pub mask: u32,
    pub value: f64,
    pub flagged: bool,
    /// Effective sample size of importance weights, when weighted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    /// `v(∅)`: the mean prediction over the training data.
    pub phi0: f64,
    pub phi: Vec<f64>,
    /// `v(S)` for every coalition, indexed by mask.
    pub values: Vec<f64>,
    /// Coalitions that took a fallback path or carry weight diagnostics.
    pub diagnostics: Vec<CoalitionDiagnostic>,
}

impl Explanation {
    /// Prediction at the explained point, `v(M)`.
    pub fn prediction(&self) -> f64 {
        *self.values.last().expect("non-empty table")
    }
}

/// 32-byte generator seed for explanation `index` under master `seed`.
pub fn explanation_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

/// Exact Shapley values for one estimator and predictor.
pub struct Explainer<'a> {
    estimator: &'a dyn ContributionEstimator,
    predictor: &'a dyn Predictor,
    phi0: f64,
    k: usize,
}

impl<'a> Explainer<'a> {
    /// `phi0` is the mean prediction over the training data.
    pub fn new(
        estimator: &'a dyn ContributionEstimator,
        predictor: &'a dyn Predictor,
        phi0: f64,
        k: usize,
    ) -> Result<Self> {
        let m = estimator.dim();
        if m > MAX_FEATURES {
            return Err(Error::TooManyFeatures(m, MAX_FEATURES));
        }
        if k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        Ok(Explainer { estimator, predictor, phi0, k })
    }

    /// Computes `phi0` from the training rows.
    pub fn with_training(
        estimator: &'a dyn ContributionEstimator,
        predictor: &'a dyn Predictor,
        train: &[Vec<f64>],
        k: usize,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("training data is empty"));
        }
        let phi0 = stable_mean(&predict_all(predictor, train)?);
        Explainer::new(estimator, predictor, phi0, k)
    }

    pub fn phi0(&self) -> f64 {
        self.phi0
    }

    /// Explains `x_star`; `seed` and `index` select the random streams.
    pub fn explain(&self, x_star: &[f64], seed: u64, index: u64) -> Result<Explanation> {
        let m = self.estimator.dim();
        if x_star.len() != m {
            return Err(Error::ShapeMismatch(format!("x* has {} values, expected {m}", x_star.len())));
        }
        if let Some(j) = x_star.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("x* feature {j} is not finite")));
        }
        let base = explanation_rng(seed, index);
        let shared = match self.estimator.subsample() {
            Some((n, policy)) => {
                if n == 0 {
                    return Err(Error::invalid("training data is empty"));
                }
                let mut rng = base.clone();
                rng.set_stream(0);
                draw_rows(n, self.k, policy, &mut rng)
            }
            None => Vec::new(),
        };
        let full = (1usize << m) - 1;
        let mut values = vec![0.0; full + 1];
        values[0] = self.phi0;
        values[full] = predict_all(self.predictor, &[x_star.to_vec()])?[0];
        let mut diagnostics = Vec::new();
        let masks: Vec<u32> = (1..full as u32).collect();
        let per_group = (MAX_BATCH_ROWS / self.k).max(1);
        for group in masks.chunks(per_group) {
            let queries = group
                .par_iter()
                .map(|&mask| {
                    let mut rng = base.clone();
                    rng.set_stream(mask as u64 + 1);
                    self.estimator.queries(Coalition::new(mask, m), x_star, self.k, &shared, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<Vec<f64>> = queries.iter().flat_map(|q| q.rows.iter().cloned()).collect();
            let preds = predict_all(self.predictor, &rows)?;
            let mut offset = 0;
            for (&mask, q) in group.iter().zip(&queries) {
                let g = &preds[offset..offset + q.rows.len()];
                offset += q.rows.len();
                if g.is_empty() {
                    return Err(Error::Numeric(format!("no query rows for coalition {mask:#b}")));
                }
                let v = match &q.weights {
                    Some(w) => stable_weighted_mean(g, w),
                    None => stable_mean(g),
                };
                values[mask as usize] = v;
                let ess = q.weights.as_deref().map(effective_sample_size);
                if q.flagged || ess.is_some() {
                    diagnostics.push(CoalitionDiagnostic { mask, value: v, flagged: q.flagged, ess });
                }
            }
        }
        let phi = shapley_from_values(m, &values)?;
        Ok(Explanation { phi0: self.phi0, phi, values, diagnostics })
    }

    /// Explains every row, in parallel; row `i` uses stream index `i`.
    pub fn explain_all(&self, rows: &[Vec<f64>], seed: u64) -> Result<Vec<Explanation>> {
        rows.par_iter().enumerate().map(|(i, x)| self.explain(x, seed, i as u64)).collect()
    }
}

/// For each sample, the mean Mahalanobis distance to its `neighbors`
/// nearest training rows, using the training covariance of the `columns`.
/// `samples` rows hold the `columns` values in the same order.
pub fn mahalanobis_diagnostic(
    samples: &[Vec<f64>],
    train: &[Vec<f64>],
    columns: &[usize],
    neighbors: usize,
) -> Result<Vec<f64>> {
    let d = columns.len();
    if d == 0 {
        return Err(Error::invalid("no columns selected for the distance diagnostic"));
    }
    if neighbors == 0 || neighbors > train.len() {
        return Err(Error::invalid(format!("neighbor count {neighbors} is outside 1..={}", train.len())));
    }
    if let Some(i) = samples.iter().position(|s| s.len() != d) {
        return Err(Error::ShapeMismatch(format!("sample {i} does not have {d} values")));
    }
    let sub: Vec<Vec<f64>> = train.iter().map(|r| columns.iter().map(|&j| r[j]).collect()).collect();
    let (_, cov) = sample_covariance(&sub);
    let (l, _) = cholesky_with_ridge(cov)?;
    let whiten = |x: &[f64]| -> DVector<f64> {
        let v = DVector::from_column_slice(x);
        l.solve_lower_triangular(&v).expect("triangular factor is invertible")
    };
    let train_w: Vec<DVector<f64>> = sub.iter().map(|r| whiten(r)).collect();
    Ok(samples
        .par_iter()
        .map(|s| {
            let z = whiten(s);
            let mut dist: Vec<f64> = train_w.iter().map(|t| (t - &z).norm()).collect();
            dist.select_nth_unstable_by(neighbors - 1, f64::total_cmp);
            dist[..neighbors].iter().sum::<f64>() / neighbors as f64
        })
        .collect())
}
