//! Benchmark machinery: the multivariate Burr distribution with closed-form
//! conditionals, a heteroscedastic response, exact-conditional Shapley
//! values, and a reproducible experiment runner scored by mean absolute
//! error.

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bicop::{Family, FitOptions, PairCopula, Rotation};
use crate::dvine::{FitMode, VineCopula};
use crate::error::{Error, Result};
use crate::explain::{
    explanation_rng, predict_all, stable_mean, ContributionEstimator, Explainer, Explanation, GaussianCopulaEstimator,
    GaussianEstimator, IndependenceEstimator, Predictor, QuerySet, TrainingData, VineCondSimEstimator,
    VineRatioEstimator, VineSet,
};
use crate::structure::{Coalition, ShapMethod, DEFAULT_CANDIDATES};

/// Default number of draws per coalition for the exact-conditional oracle.
pub const DEFAULT_K_ORACLE: usize = 10_000;

/// Parameters of the multivariate Burr distribution with joint survival
/// function `(1 + Σ r_m x_m^{b_m})^{-p}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurrParams {
    p: f64,
    b: Vec<f64>,
    r: Vec<f64>,
}

impl BurrParams {
    pub fn new(p: f64, b: Vec<f64>, r: Vec<f64>) -> Result<Self> {
        if b.is_empty() || b.len() != r.len() {
            return Err(Error::invalid(format!(
                "Burr shape vectors must be non-empty and of equal length (got {} and {})",
                b.len(),
                r.len()
            )));
        }
        let positive = |x: &f64| *x > 0.0 && x.is_finite();
        if !positive(&p) {
            return Err(Error::invalid(format!("Burr parameter p = {p} must be positive")));
        }
        if let Some(j) = b.iter().chain(&r).position(|x| !positive(x)) {
            let (name, idx) = if j < b.len() { ("b", j) } else { ("r", j - b.len()) };
            return Err(Error::invalid(format!("Burr parameter {name}[{idx}] must be positive")));
        }
        Ok(BurrParams { p, b, r })
    }

    /// The parameter vectors used in the published study, truncated to the
    /// first `m <= 10` features.
    pub fn reference(p: f64, m: usize) -> Result<Self> {
        const B: [f64; 10] = [2.0, 4.0, 6.0, 2.0, 4.0, 6.0, 2.0, 4.0, 6.0, 6.0];
        const R: [f64; 10] = [1.0, 3.0, 5.0, 1.0, 3.0, 5.0, 1.0, 3.0, 5.0, 5.0];
        if !(1..=10).contains(&m) {
            return Err(Error::invalid(format!("reference Burr parameters exist for 1..=10 features, not {m}")));
        }
        BurrParams::new(p, B[..m].to_vec(), R[..m].to_vec())
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!("{} values for a {}-variate Burr", x.len(), self.dim())));
        }
        Ok(())
    }

    /// Log density; `-inf` outside the open positive orthant.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        if x.iter().any(|&v| !(v > 0.0)) {
            return Ok(f64::NEG_INFINITY);
        }
        let m = self.dim() as f64;
        let mut acc = ln_gamma(self.p + m) - ln_gamma(self.p);
        let mut s = 0.0;
        for ((&xm, &bm), &rm) in x.iter().zip(&self.b).zip(&self.r) {
            acc += (bm * rm).ln() + (bm - 1.0) * xm.ln();
            s += rm * xm.powf(bm);
        }
        Ok(acc - (self.p + m) * s.ln_1p())
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    /// Marginal cdf `1 - (1 + r_j x^{b_j})^{-p}` of feature `j`.
    pub fn marginal_cdf(&self, j: usize, x: f64) -> f64 {
        if !(x > 0.0) {
            return 0.0;
        }
        let s = self.r[j] * x.powf(self.b[j]);
        -(-self.p * s.ln_1p()).exp_m1()
    }

    /// Parameters of the marginal distribution of the features in `s`.
    pub fn marginal(&self, s: Coalition) -> Result<BurrParams> {
        let idx = s.indices();
        BurrParams::new(self.p, idx.iter().map(|&j| self.b[j]).collect(), idx.iter().map(|&j| self.r[j]).collect())
    }

    /// Draws `n` rows by compounding Weibull variables with a gamma frailty.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let gamma = Gamma::new(self.p, 1.0).expect("validated shape");
        (0..n)
            .map(|_| {
                let g: f64 = gamma.sample(rng);
                self.b
                    .iter()
                    .zip(&self.r)
                    .map(|(&bm, &rm)| {
                        let e: f64 = Exp1.sample(rng);
                        (e / (g * rm)).powf(1.0 / bm)
                    })
                    .collect()
            })
            .collect()
    }

    /// Parameters of the features outside `s` (in increasing index order)
    /// given `x_S = x*_S`: `p + |S|`, unchanged `b`, and
    /// `r_j / (1 + Σ_{m∈S} r_m x*_m^{b_m})`.
    pub fn conditional_params(&self, s: Coalition, x_star: &[f64]) -> Result<BurrParams> {
        self.check_point(x_star)?;
        if s.n_features() != self.dim() || s.is_empty() || s.is_full() {
            return Err(Error::invalid("the conditioning set must be a proper non-empty subset"));
        }
        let si = s.indices();
        if let Some(&j) = si.iter().find(|&&j| !(x_star[j] > 0.0)) {
            return Err(Error::invalid(format!("conditioning value of feature {j} is outside the support")));
        }
        let denom = 1.0 + si.iter().map(|&j| self.r[j] * x_star[j].powf(self.b[j])).sum::<f64>();
        let free = s.complement().indices();
        BurrParams::new(
            self.p + si.len() as f64,
            free.iter().map(|&j| self.b[j]).collect(),
            free.iter().map(|&j| self.r[j] / denom).collect(),
        )
    }

    pub fn conditional_sample<R: Rng + ?Sized>(
        &self,
        s: Coalition,
        x_star: &[f64],
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        Ok(self.conditional_params(s, x_star)?.sample(k, rng))
    }

    /// The copula of the distribution as a D-vine on `order`: survival
    /// Clayton pairs with parameter `1 / (p + t)` in tree `t`.
    pub fn truth_vine(&self, order: Vec<usize>) -> Result<VineCopula> {
        let m = order.len();
        if m != self.dim() {
            return Err(Error::ShapeMismatch(format!("order of length {m} for {} features", self.dim())));
        }
        let pairs = (0..m.saturating_sub(1))
            .map(|t| {
                let c = PairCopula::clayton(1.0 / (self.p + t as f64), Rotation::R180)?;
                Ok(vec![c; m - 1 - t])
            })
            .collect::<Result<Vec<_>>>()?;
        VineCopula::new(order, pairs)
    }

    /// Pairwise Kendall's tau implied by `p`.
    pub fn kendall_tau(&self) -> f64 {
        1.0 / (1.0 + 2.0 * self.p)
    }
}

/// `n` reproducible Burr draws for `seed`.
pub fn simulate(burr: &BurrParams, n: usize, seed: u64) -> Vec<Vec<f64>> {
    burr.sample(n, &mut explanation_rng(seed, 0))
}

/// Response `y = f(u) + noise_scale · (u1 + u5 + u9) · ε` with
/// `u_m = F_m(x_m)` and
/// `f = u1 u2 e^{1.8 u3 u4} + u5 u6 e^{1.8 u7 u8} + u9 e^{1.8 u10}`.
///
/// With fewer than ten features, factors of absent features are dropped, a
/// term without any present feature vanishes, and an exponent without any
/// present factor becomes `e^0`. For example `M = 4` gives
/// `u1 u2 e^{1.8 u3 u4} + noise_scale · u1 · ε` and `M = 3` gives
/// `u1 u2 e^{1.8 u3} + noise_scale · u1 · ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub noise_scale: f64,
}

impl Default for Response {
    fn default() -> Self {
        Response { noise_scale: 0.5 }
    }
}

/// (product factors, exponent factors) of each additive term, 0-based.
const TERMS: [(&[usize], &[usize]); 3] = [(&[0, 1], &[2, 3]), (&[4, 5], &[6, 7]), (&[8], &[9])];
const NOISE_FACTORS: [usize; 3] = [0, 4, 8];

impl Response {
    pub fn new(noise_scale: f64) -> Result<Self> {
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return Err(Error::invalid(format!("noise scale {noise_scale} must be non-negative")));
        }
        Ok(Response { noise_scale })
    }

    /// Noiseless mean `f(u)` on the copula scale.
    pub fn mean_of_u(u: &[f64]) -> f64 {
        let m = u.len();
        let mut y = 0.0;
        for (prod, expo) in TERMS {
            let present = |f: &[usize]| f.iter().filter(|&&j| j < m).map(|&j| u[j]).collect::<Vec<_>>();
            let p = present(prod);
            let e = present(expo);
            if p.is_empty() && e.is_empty() {
                continue;
            }
            let pf: f64 = p.iter().product();
            let ef: f64 = if e.is_empty() { 0.0 } else { e.iter().product() };
            y += pf * (1.8 * ef).exp();
        }
        y
    }

    fn noise_weight(u: &[f64]) -> f64 {
        NOISE_FACTORS.iter().filter(|&&j| j < u.len()).map(|&j| u[j]).sum()
    }

    /// Human-readable formula for `m` features.
    pub fn formula(&self, m: usize) -> String {
        let name = |j: usize| format!("u{}", j + 1);
        let mut terms = Vec::new();
        for (prod, expo) in TERMS {
            let p: Vec<String> = prod.iter().filter(|&&j| j < m).map(|&j| name(j)).collect();
            let e: Vec<String> = expo.iter().filter(|&&j| j < m).map(|&j| name(j)).collect();
            if p.is_empty() && e.is_empty() {
                continue;
            }
            let mut t = p.join("*");
            if !e.is_empty() {
                if !t.is_empty() {
                    t.push('*');
                }
                t.push_str(&format!("exp(1.8*{})", e.join("*")));
            }
            terms.push(t);
        }
        let noise: Vec<String> = NOISE_FACTORS.iter().filter(|&&j| j < m).map(|&j| name(j)).collect();
        let mut out = terms.join(" + ");
        if self.noise_scale > 0.0 && !noise.is_empty() {
            out.push_str(&format!(" + {}*({})*eps", self.noise_scale, noise.join(" + ")));
        }
        out
    }

    /// One noisy response for a data-scale row.
    pub fn generate<R: Rng + ?Sized>(&self, burr: &BurrParams, x: &[f64], rng: &mut R) -> Result<f64> {
        let u = data_to_u(burr, x)?;
        let eps: f64 = rng.sample(StandardNormal);
        Ok(Response::mean_of_u(&u) + self.noise_scale * Response::noise_weight(&u) * eps)
    }
}

fn data_to_u(burr: &BurrParams, x: &[f64]) -> Result<Vec<f64>> {
    burr.check_point(x)?;
    if let Some(j) = x.iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::invalid(format!("feature {j} value {} is outside the Burr support", x[j])));
    }
    Ok(x.iter().enumerate().map(|(j, &v)| burr.marginal_cdf(j, v)).collect())
}

/// The noiseless regression function `E[y | x]` of [`Response`].
#[derive(Debug, Clone)]
pub struct BurrMeanPredictor {
    burr: BurrParams,
}

impl BurrMeanPredictor {
    pub fn new(burr: BurrParams) -> Self {
        BurrMeanPredictor { burr }
    }
}

impl Predictor for BurrMeanPredictor {
    /// Total on finite inputs: values below the support map to `u = 0`, as
    /// the baselines can propose them.
    fn predict_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.iter()
            .map(|x| {
                self.burr.check_point(x)?;
                let u: Vec<f64> = x.iter().enumerate().map(|(j, &v)| self.burr.marginal_cdf(j, v)).collect();
                Ok(Response::mean_of_u(&u))
            })
            .collect()
    }
}

/// k-nearest-neighbour regression on standardized features with
/// inverse-distance weights.
#[derive(Debug, Clone)]
pub struct KnnPredictor {
    k: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    train: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl KnnPredictor {
    pub fn fit(x: &[Vec<f64>], y: &[f64], k: usize) -> Result<Self> {
        let m = crate::dvine::check_table(x)?;
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::ShapeMismatch(format!("{} rows and {} responses", x.len(), y.len())));
        }
        if k == 0 || k > x.len() {
            return Err(Error::invalid(format!("k = {k} is outside 1..={}", x.len())));
        }
        let mut center = Vec::with_capacity(m);
        let mut scale = Vec::with_capacity(m);
        for j in 0..m {
            let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
            center.push(crate::stats::mean(&col));
            let sd = crate::stats::variance(&col).sqrt();
            scale.push(if sd > 0.0 { sd } else { 1.0 });
        }
        let train = x.iter().map(|r| standardize(r, &center, &scale)).collect();
        Ok(KnnPredictor { k, center, scale, train, y: y.to_vec() })
    }

    fn predict_one(&self, x: &[f64]) -> f64 {
        let z = standardize(x, &self.center, &self.scale);
        let mut d: Vec<(f64, usize)> = self
            .train
            .iter()
            .enumerate()
            .map(|(i, t)| (t.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), i))
            .collect();
        d.select_nth_unstable_by(self.k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let near = &mut d[..self.k];
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let exact: Vec<f64> = near.iter().filter(|(dist, _)| *dist == 0.0).map(|&(_, i)| self.y[i]).collect();
        if !exact.is_empty() {
            return stable_mean(&exact);
        }
        let w: Vec<f64> = near.iter().map(|(dist, _)| 1.0 / dist).collect();
        let ys: Vec<f64> = near.iter().map(|&(_, i)| self.y[i]).collect();
        crate::explain::stable_weighted_mean(&ys, &w)
    }
}

fn standardize(x: &[f64], center: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter().zip(center).zip(scale).map(|((v, c), s)| (v - c) / s).collect()
}

impl Predictor for KnnPredictor {
    fn predict_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        if let Some(i) = rows.iter().position(|r| r.len() != self.center.len()) {
            return Err(Error::ShapeMismatch(format!("query row {i} has {} values", rows[i].len())));
        }
        Ok(rows.par_iter().map(|r| self.predict_one(r)).collect())
    }
}

/// Contribution estimator that samples the exact Burr conditionals.
pub struct BurrOracle {
    burr: BurrParams,
}

impl BurrOracle {
    pub fn new(burr: BurrParams) -> Self {
        BurrOracle { burr }
    }
}

impl ContributionEstimator for BurrOracle {
    fn name(&self) -> &str {
        "truth"
    }

    fn dim(&self) -> usize {
        self.burr.dim()
    }

    fn queries(
        &self,
        s: Coalition,
        x_star: &[f64],
        k: usize,
        _shared: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<QuerySet> {
        let draws = self.burr.conditional_sample(s, x_star, k, rng)?;
        let free = s.complement().indices();
        let rows = draws
            .into_iter()
            .map(|d| {
                let mut r = x_star.to_vec();
                for (&j, v) in free.iter().zip(d) {
                    r[j] = v;
                }
                r
            })
            .collect();
        Ok(QuerySet { rows, weights: None, flagged: false })
    }
}

/// Shapley values with every `v(S)` from `k_oracle` exact conditional draws
/// and `v(∅)` from `k_oracle` unconditional draws.
pub fn true_shapley(
    burr: &BurrParams,
    predictor: &dyn Predictor,
    x_star: &[f64],
    k_oracle: usize,
    seed: u64,
    index: u64,
) -> Result<Explanation> {
    let oracle = BurrOracle::new(burr.clone());
    let mut rng = explanation_rng(seed, index);
    rng.set_stream(u64::MAX);
    let phi0 = stable_mean(&predict_all(predictor, &burr.sample(k_oracle, &mut rng))?);
    Explainer::new(&oracle, predictor, phi0, k_oracle)?.explain(x_star, seed, index)
}

/// Mean over rows of the mean absolute difference over features.
pub fn mae(estimates: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<f64> {
    if estimates.len() != truths.len() || estimates.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} estimate rows and {} truth rows", estimates.len(), truths.len())));
    }
    let mut total = 0.0;
    for (i, (e, t)) in estimates.iter().zip(truths).enumerate() {
        if e.len() != t.len() || e.is_empty() {
            return Err(Error::ShapeMismatch(format!("row {i}: {} estimates and {} truths", e.len(), t.len())));
        }
        total += e.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / e.len() as f64;
    }
    Ok(total / estimates.len() as f64)
}

/// Shapley estimator compared in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Independence,
    Gaussian,
    GaussianCopula,
    VineCondSimParametric,
    VineCondSimNonparametric,
    VineRatioParametric,
    VineRatioNonparametric,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Independence,
        Method::Gaussian,
        Method::GaussianCopula,
        Method::VineCondSimParametric,
        Method::VineCondSimNonparametric,
        Method::VineRatioParametric,
        Method::VineRatioNonparametric,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Independence => "independence",
            Method::Gaussian => "gaussian",
            Method::GaussianCopula => "gaussian-copula",
            Method::VineCondSimParametric => "vine-condsim-parametric",
            Method::VineCondSimNonparametric => "vine-condsim-nonparametric",
            Method::VineRatioParametric => "vine-ratio-parametric",
            Method::VineRatioNonparametric => "vine-ratio-nonparametric",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.tag() == s).ok_or_else(|| Error::invalid(format!("unknown method '{s}'")))
    }
}

/// Regression function explained in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PredictorKind {
    /// The noiseless regression function of the response.
    AnalyticMean,
    /// k-nearest-neighbour regression fitted to the noisy training responses.
    Knn(usize),
}

impl FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "analytic_mean" || s == "analytic-mean" {
            return Ok(PredictorKind::AnalyticMean);
        }
        if s == "knn" {
            return Ok(PredictorKind::Knn(10));
        }
        if let Some(k) = s.strip_prefix("knn:").or_else(|| s.strip_prefix("knn(").and_then(|r| r.strip_suffix(')'))) {
            return k
                .parse()
                .map(PredictorKind::Knn)
                .map_err(|_| Error::invalid(format!("bad neighbour count in predictor '{s}'")));
        }
        Err(Error::invalid(format!("unknown predictor '{s}' (analytic_mean|knn|knn:<k>)")))
    }
}

/// Everything that determines an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub burr: BurrParams,
    pub response: Response,
    pub n_train: usize,
    pub n_test: usize,
    pub repetitions: usize,
    pub k: usize,
    pub k_oracle: usize,
    pub methods: Vec<Method>,
    pub predictor: PredictorKind,
    /// Families offered to the parametric vines.
    pub families: FitOptions,
    pub grid_size: usize,
    pub candidates: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Desk-scale defaults: four features, 1000 training rows, 20 test
    /// points, 5 repetitions.
    pub fn desk_scale(p: f64) -> Result<Self> {
        Ok(ExperimentConfig {
            burr: BurrParams::reference(p, 4)?,
            response: Response::default(),
            n_train: 1000,
            n_test: 20,
            repetitions: 5,
            k: crate::explain::DEFAULT_K,
            k_oracle: DEFAULT_K_ORACLE,
            methods: vec![
                Method::Independence,
                Method::Gaussian,
                Method::GaussianCopula,
                Method::VineCondSimParametric,
                Method::VineRatioParametric,
            ],
            predictor: PredictorKind::AnalyticMean,
            families: FitOptions::only(Family::Clayton(Rotation::R180)),
            grid_size: crate::bicop::DEFAULT_GRID_SIZE,
            candidates: DEFAULT_CANDIDATES,
            seed: 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train < 50 {
            return Err(Error::invalid(format!("n_train = {} is below 50", self.n_train)));
        }
        if self.n_test == 0 || self.repetitions == 0 || self.k == 0 || self.k_oracle == 0 {
            return Err(Error::invalid("n_test, repetitions, K and K_oracle must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods requested"));
        }
        if self.burr.dim() < 2 || self.burr.dim() > crate::explain::MAX_FEATURES {
            return Err(Error::invalid(format!("feature count {} is outside 2..=20", self.burr.dim())));
        }
        if self.burr.dim() > 10 {
            return Err(Error::invalid("the response is defined for at most 10 features"));
        }
        Ok(())
    }
}

/// One method's score in one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub method: Method,
    pub repetition: usize,
    pub mae: f64,
    pub seconds: f64,
}

/// Across-repetition summary of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_mae: f64,
    /// Standard error of the mean; `NaN` with a single repetition.
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub results: Vec<RepetitionResult>,
    pub summary: Vec<MethodSummary>,
}

impl Report {
    pub fn mean_mae(&self, method: Method) -> Option<f64> {
        self.summary.iter().find(|s| s.method == method).map(|s| s.mean_mae)
    }
}

fn build_estimator(
    method: Method,
    cfg: &ExperimentConfig,
    train: &TrainingData,
    seed: u64,
) -> Result<Box<dyn ContributionEstimator>> {
    let par = FitMode::Parametric(cfg.families.clone());
    let nonpar = FitMode::Nonparametric { grid_size: cfg.grid_size };
    let vines = |shap: ShapMethod, mode: &FitMode| VineSet::fit(train, shap, mode, cfg.candidates, seed);
    let tag = method.tag();
    Ok(match method {
        Method::Independence => Box::new(IndependenceEstimator::new(train.clone())),
        Method::Gaussian => Box::new(GaussianEstimator::fit(train)),
        Method::GaussianCopula => Box::new(GaussianCopulaEstimator::fit(train)),
        Method::VineCondSimParametric => Box::new(VineCondSimEstimator::new(vines(ShapMethod::CondSim, &par)?, tag)?),
        Method::VineCondSimNonparametric => {
            Box::new(VineCondSimEstimator::new(vines(ShapMethod::CondSim, &nonpar)?, tag)?)
        }
        Method::VineRatioParametric => {
            Box::new(VineRatioEstimator::new(vines(ShapMethod::Ratio, &par)?, train.clone(), tag)?)
        }
        Method::VineRatioNonparametric => {
            Box::new(VineRatioEstimator::new(vines(ShapMethod::Ratio, &nonpar)?, train.clone(), tag)?)
        }
    })
}

fn in_repetition(repetition: usize, method: Option<Method>, e: Error) -> Error {
    Error::Experiment {
        repetition,
        method: method.map_or_else(|| "setup".to_string(), |m| m.tag().to_string()),
        source: Box::new(e),
    }
}

/// Runs one repetition; returns one result per method in config order.
pub fn run_repetition(cfg: &ExperimentConfig, repetition: usize) -> Result<Vec<RepetitionResult>> {
    let setup = |e| in_repetition(repetition, None, e);
    let mut rng = explanation_rng(cfg.seed, repetition as u64);
    let x_train = cfg.burr.sample(cfg.n_train, &mut rng);
    let y_train = x_train
        .iter()
        .map(|x| cfg.response.generate(&cfg.burr, x, &mut rng))
        .collect::<Result<Vec<_>>>()
        .map_err(setup)?;
    let predictor: Box<dyn Predictor> = match cfg.predictor {
        PredictorKind::AnalyticMean => Box::new(BurrMeanPredictor::new(cfg.burr.clone())),
        PredictorKind::Knn(k) => Box::new(KnnPredictor::fit(&x_train, &y_train, k).map_err(setup)?),
    };
    let x_test = cfg.burr.sample(cfg.n_test, &mut rng);
    let truth_seed = rng.next_u64();
    let truths = x_test
        .par_iter()
        .enumerate()
        .map(|(i, x)| true_shapley(&cfg.burr, predictor.as_ref(), x, cfg.k_oracle, truth_seed, i as u64).map(|e| e.phi))
        .collect::<Result<Vec<_>>>()
        .map_err(setup)?;
    let train = TrainingData::new(x_train).map_err(setup)?;
    let phi0 = stable_mean(&predict_all(predictor.as_ref(), train.rows()).map_err(setup)?);
    let mut out = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let fit_seed = rng.next_u64();
        let explain_seed = rng.next_u64();
        let fail = |e| in_repetition(repetition, Some(method), e);
        let start = Instant::now();
        let estimator = build_estimator(method, cfg, &train, fit_seed).map_err(fail)?;
        let explainer = Explainer::new(estimator.as_ref(), predictor.as_ref(), phi0, cfg.k).map_err(fail)?;
        let phis: Vec<Vec<f64>> =
            explainer.explain_all(&x_test, explain_seed).map_err(fail)?.into_iter().map(|e| e.phi).collect();
        let seconds = start.elapsed().as_secs_f64();
        let score = mae(&phis, &truths).map_err(fail)?;
        log::info!("repetition {repetition} {method}: MAE {score:.5} in {seconds:.2}s");
        out.push(RepetitionResult { method, repetition, mae: score, seconds });
    }
    Ok(out)
}

/// Runs every repetition and summarizes the scores per method.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let mut results = Vec::new();
    for rep in 0..cfg.repetitions {
        results.extend(run_repetition(cfg, rep)?);
    }
    let summary = cfg
        .methods
        .iter()
        .map(|&method| {
            let scores: Vec<f64> = results.iter().filter(|r| r.method == method).map(|r| r.mae).collect();
            let mean_mae = crate::stats::mean(&scores);
            let stderr = if scores.len() > 1 {
                (crate::stats::variance(&scores) / scores.len() as f64).sqrt()
            } else {
                f64::NAN
            };
            MethodSummary { method, mean_mae, stderr }
        })
        .collect();
    Ok(Report { results, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::FnPredictor;
    use crate::stats::{kendall_tau, ks_one_sample};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn marginal_density(burr: &BurrParams, j: usize, x: f64) -> f64 {
        let (b, r, p) = (burr.b[j], burr.r[j], burr.p);
        p * b * r * x.powf(b - 1.0) * (1.0 + r * x.powf(b)).powf(-p - 1.0)
    }

    fn marginal_quantile(burr: &BurrParams, j: usize, u: f64) -> f64 {
        (((1.0 - u).powf(-1.0 / burr.p) - 1.0) / burr.r[j]).powf(1.0 / burr.b[j])
    }

    #[test]
    fn parameter_validation() {
        assert!(BurrParams::new(0.0, vec![1.0], vec![1.0]).is_err());
        assert!(BurrParams::new(1.0, vec![1.0, -1.0], vec![1.0, 1.0]).is_err());
        assert!(BurrParams::new(1.0, vec![1.0], vec![]).is_err());
        assert!(BurrParams::reference(0.5, 11).is_err());
        assert_eq!(BurrParams::reference(0.5, 10).unwrap().b()[9], 6.0);
    }

    #[test]
    fn univariate_density_near_zero() {
        let burr = BurrParams::new(1.0, vec![1.0], vec![1.0]).unwrap();
        assert!((burr.density(&[1e-9]).unwrap() - 1.0).abs() < 1e-8);
        assert!((burr.density(&[1.0]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(burr.density(&[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn bivariate_density_integrates_to_one() {
        let burr = BurrParams::new(1.0, vec![2.0, 4.0], vec![1.0, 3.0]).unwrap();
        // x = t / (1 - t) maps (0,1) onto (0,inf); midpoint rule in t
        let n = 1500;
        let h = 1.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            let t = (i as f64 + 0.5) * h;
            let x = t / (1.0 - t);
            let jx = 1.0 / ((1.0 - t) * (1.0 - t));
            for k in 0..n {
                let s = (k as f64 + 0.5) * h;
                let y = s / (1.0 - s);
                let jy = 1.0 / ((1.0 - s) * (1.0 - s));
                total += burr.density(&[x, y]).unwrap() * jx * jy * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
        for i in 1..=10 {
            for k in 1..=10 {
                let d = burr.density(&[i as f64 * 0.3, k as f64 * 0.3]).unwrap();
                assert!(d > 0.0 && d.is_finite());
            }
        }
    }

    #[test]
    fn sampled_marginal_matches_cdf() {
        let burr = BurrParams::reference(0.5, 3).unwrap();
        let x = burr.sample(20_000, &mut rng(1));
        for j in 0..3 {
            let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
            assert!(ks_one_sample(&col, |v| burr.marginal_cdf(j, v)).passes(0.01), "feature {j}");
        }
    }

    #[test]
    fn pairwise_tau_follows_p() {
        for p in [0.5, 1.0, 1.5] {
            let burr = BurrParams::reference(p, 3).unwrap();
            let x = burr.sample(10_000, &mut rng(2));
            let col = |j: usize| x.iter().map(|r| r[j]).collect::<Vec<_>>();
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                let tau = kendall_tau(&col(a), &col(b)).unwrap();
                assert!((tau - burr.kendall_tau()).abs() < 0.02, "p={p}: {tau}");
            }
        }
    }

    #[test]
    fn samples_fit_a_survival_clayton() {
        let burr = BurrParams::reference(1.0, 2).unwrap();
        let x = burr.sample(5000, &mut rng(3));
        let m = crate::dvine::fit_marginals(&x).unwrap();
        let cols = crate::dvine::pseudo_observations(&m, &x);
        let fit = crate::bicop::fit_parametric(&cols[0], &cols[1], &FitOptions::default()).unwrap();
        match fit.copula {
            PairCopula::Clayton { theta, rotation: Rotation::R180 } => assert!((theta - 1.0).abs() < 0.1, "{theta}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conditional_parameters() {
        let burr = BurrParams::new(1.0, vec![2.0, 4.0, 1.0], vec![1.0, 3.0, 2.0]).unwrap();
        let s = Coalition::from_indices(&[2], 3);
        let c = burr.conditional_params(s, &[0.0, 0.0, 0.5]).unwrap();
        assert_eq!(c.p(), 2.0);
        assert_eq!(c.r(), &[0.5, 1.5]);
        assert_eq!(c.b(), &[2.0, 4.0]);
        let near_zero = burr.conditional_params(s, &[0.0, 0.0, 1e-12]).unwrap();
        assert!((near_zero.r()[0] - 1.0).abs() < 1e-11);
        assert!(burr.conditional_params(Coalition::full(3), &[1.0; 3]).is_err());
        let two = burr.conditional_params(Coalition::from_indices(&[0, 1], 3), &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(two.dim(), 1);
    }

    #[test]
    fn conditional_density_obeys_bayes_rule() {
        let burr = BurrParams::new(0.7, vec![2.0, 4.0], vec![1.0, 3.0]).unwrap();
        let s = Coalition::from_indices(&[0], 2);
        for i in 1..=12 {
            for k in 1..=12 {
                let x = [i as f64 * 0.2, k as f64 * 0.15];
                let joint = burr.density(&x).unwrap();
                let marg = burr.marginal(s).unwrap().density(&[x[0]]).unwrap();
                let cond = burr.conditional_params(s, &x).unwrap().density(&[x[1]]).unwrap();
                assert!((cond * marg - joint).abs() < 1e-10, "{x:?}");
            }
        }
    }

    #[test]
    fn conditional_sampler_matches_analytic_marginals() {
        let burr = BurrParams::reference(1.0, 4).unwrap();
        let s = Coalition::from_indices(&[1, 3], 4);
        let x_star = [0.0, 0.6, 0.0, 0.9];
        let cond = burr.conditional_params(s, &x_star).unwrap();
        let draws = burr.conditional_sample(s, &x_star, 10_000, &mut rng(4)).unwrap();
        for q in 0..2 {
            let col: Vec<f64> = draws.iter().map(|r| r[q]).collect();
            assert!(ks_one_sample(&col, |v| cond.marginal_cdf(q, v)).passes(0.01));
        }
        let tau = kendall_tau(
            &draws.iter().map(|r| r[0]).collect::<Vec<_>>(),
            &draws.iter().map(|r| r[1]).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!((tau - 1.0 / (1.0 + 2.0 * 3.0)).abs() < 0.02, "{tau}");
    }

    #[test]
    fn truth_vine_is_the_burr_copula() {
        let burr = BurrParams::reference(0.8, 4).unwrap();
        let vine = burr.truth_vine(vec![2, 0, 3, 1]).unwrap();
        let pts = [0.05, 0.3, 0.6, 0.9];
        for &a in &pts {
            for &b in &pts {
                for &c in &pts {
                    for &d in &pts {
                        let u = [a, b, c, d];
                        let x: Vec<f64> = u.iter().enumerate().map(|(j, &v)| marginal_quantile(&burr, j, v)).collect();
                        let expect = burr.log_density(&x).unwrap()
                            - x.iter().enumerate().map(|(j, &v)| marginal_density(&burr, j, v).ln()).sum::<f64>();
                        let got = vine.log_density(&u);
                        assert!((got - expect).abs() < 1e-8, "{u:?}: {got} vs {expect}");
                    }
                }
            }
        }
    }

    #[test]
    fn response_examples() {
        assert_eq!(Response::mean_of_u(&[0.0; 10]), 0.0);
        let top = Response::mean_of_u(&[1.0; 10]);
        assert!((top - 3.0 * 1.8f64.exp()).abs() < 1e-12);
        assert!((top - 18.149).abs() < 1e-3);
        let r = Response::default();
        assert_eq!(r.formula(4), "u1*u2*exp(1.8*u3*u4) + 0.5*(u1)*eps");
        assert_eq!(r.formula(3), "u1*u2*exp(1.8*u3) + 0.5*(u1)*eps");
        assert_eq!(r.formula(5), "u1*u2*exp(1.8*u3*u4) + u5 + 0.5*(u1 + u5)*eps");
        let u = [0.2, 0.4, 0.6, 0.8];
        assert!((Response::mean_of_u(&u) - 0.2 * 0.4 * (1.8f64 * 0.6 * 0.8).exp()).abs() < 1e-15);
        let burr = BurrParams::reference(1.0, 4).unwrap();
        let quiet = Response::new(0.0).unwrap();
        let x = [0.5, 0.5, 0.5, 0.5];
        let a = quiet.generate(&burr, &x, &mut rng(1)).unwrap();
        let b = quiet.generate(&burr, &x, &mut rng(2)).unwrap();
        assert_eq!(a, b);
        assert!(Response::new(-1.0).is_err());
        assert!(quiet.generate(&burr, &[-1.0, 0.5, 0.5, 0.5], &mut rng(1)).is_err());
    }

    #[test]
    fn oracle_examples() {
        let burr = BurrParams::reference(1.0, 3).unwrap();
        let c = FnPredictor(|_: &[f64]| 2.5);
        let e = true_shapley(&burr, &c, &[0.3, 0.5, 0.4], 1000, 1, 0).unwrap();
        assert!(e.phi.iter().all(|&p| p == 0.0));
        let g = BurrMeanPredictor::new(burr.clone());
        let x = [0.3, 0.5, 0.4];
        let e = true_shapley(&burr, &g, &x, 2000, 1, 0).unwrap();
        let y = g.predict_batch(&[x.to_vec()]).unwrap()[0];
        assert!((e.phi0 + e.phi.iter().sum::<f64>() - y).abs() < 1e-10);
    }

    #[test]
    fn additive_game_in_the_independent_limit() {
        let burr = BurrParams::reference(50.0, 3).unwrap();
        let b2 = burr.clone();
        let g = FnPredictor(move |x: &[f64]| (0..3).map(|j| b2.marginal_cdf(j, x[j])).sum::<f64>());
        let x = [0.2, 0.1, 0.12];
        let e = true_shapley(&burr, &g, &x, 10_000, 3, 0).unwrap();
        for (j, &xj) in x.iter().enumerate() {
            let expect = burr.marginal_cdf(j, xj) - 0.5;
            assert!((e.phi[j] - expect).abs() < 0.03, "{j}: {} vs {expect}", e.phi[j]);
        }
    }

    #[test]
    fn mae_examples() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&vec![vec![1.0; 3]; 4], &vec![vec![0.0; 3]; 4]).unwrap(), 1.0);
        assert_eq!(mae(&[vec![0.0, 0.0]], &[vec![1.0, -1.0]]).unwrap(), 1.0);
        assert!(mae(&[vec![0.0]], &[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn knn_predictor() {
        let x: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let y: Vec<f64> = (0..50).map(|i| i as f64 * 2.0).collect();
        let knn = KnnPredictor::fit(&x, &y, 10).unwrap();
        assert_eq!(knn.predict_batch(&[vec![7.0, 49.0]]).unwrap()[0], 14.0);
        let p = knn.predict_batch(&[vec![7.5, 56.25]]).unwrap()[0];
        assert!(p > 10.0 && p < 19.0);
        assert!(KnnPredictor::fit(&x, &y, 0).is_err());
    }

    #[test]
    fn experiments_are_reproducible() {
        let mut cfg = ExperimentConfig::desk_scale(1.0).unwrap();
        cfg.burr = BurrParams::reference(1.0, 3).unwrap();
        cfg.n_train = 200;
        cfg.n_test = 3;
        cfg.repetitions = 2;
        cfg.k = 100;
        cfg.k_oracle = 1000;
        cfg.methods = vec![Method::Independence, Method::VineRatioParametric];
        cfg.predictor = PredictorKind::Knn(5);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        let strip =
            |r: &Report| r.results.iter().map(|x| (x.method, x.repetition, x.mae.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.results.len(), 4);
        cfg.n_train = 10;
        assert!(run_experiment(&cfg).is_err());
    }

    #[test]
    fn method_and_predictor_tags() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
        assert!("vine".parse::<Method>().is_err());
        assert_eq!("knn:7".parse::<PredictorKind>().unwrap(), PredictorKind::Knn(7));
        assert_eq!("knn(3)".parse::<PredictorKind>().unwrap(), PredictorKind::Knn(3));
        assert_eq!("analytic_mean".parse::<PredictorKind>().unwrap(), PredictorKind::AnalyticMean);
    }
}
