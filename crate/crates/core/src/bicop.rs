//! Bivariate copulas: densities, h-functions and their inverses, Kendall's
//! tau based fitting with AIC family selection, and a transformation-kernel
//! nonparametric estimator stored on a grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{kendall_tau, norm_cdf, norm_pdf, norm_quantile};

/// Inputs on the copula scale are clamped to `[EPS, 1 - EPS]`.
pub const EPS: f64 = 1e-10;

/// Probability levels passed to inverse h-functions are clamped more
/// tightly, so conditional cdf values deep in the tails still invert.
const LEVEL_EPS: f64 = 1e-15;

const TAU_INDEPENDENCE: f64 = 0.02;
const MAX_TAU: f64 = 0.98;
const MAX_RHO: f64 = 0.9999;

#[inline]
fn clamp01(x: f64) -> f64 {
    if x.is_nan() {
        return 0.5;
    }
    x.clamp(EPS, 1.0 - EPS)
}

/// Counter-clockwise rotation of a copula, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rotation {
    #[serde(rename = "0")]
    R0,
    #[serde(rename = "90")]
    R90,
    #[serde(rename = "180")]
    R180,
    #[serde(rename = "270")]
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    fn flips(self) -> (bool, bool) {
        match self {
            Rotation::R0 => (false, false),
            Rotation::R90 => (true, false),
            Rotation::R180 => (true, true),
            Rotation::R270 => (false, true),
        }
    }

    fn positive(self) -> bool {
        matches!(self, Rotation::R0 | Rotation::R180)
    }

    pub fn degrees(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }
}

/// Parametric families that [`fit_parametric`] may select from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Independence,
    Gaussian,
    Clayton(Rotation),
}

impl Family {
    /// Independence, Gaussian and Clayton in all four rotations.
    pub fn all() -> Vec<Family> {
        let mut v = vec![Family::Independence, Family::Gaussian];
        v.extend(Rotation::ALL.iter().map(|&r| Family::Clayton(r)));
        v
    }
}

/// Which argument the h-function conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cond {
    /// `F(v | u) = dC(u, v) / du`
    First,
    /// `F(u | v) = dC(u, v) / dv`
    Second,
}

/// A bivariate copula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PairCopula {
    Independence,
    Gaussian { rho: f64 },
    Clayton { theta: f64, rotation: Rotation },
    Grid(Box<KernelGrid>),
}

impl PairCopula {
    pub fn gaussian(rho: f64) -> Result<Self> {
        if !(rho > -1.0 && rho < 1.0) {
            return Err(Error::invalid(format!("Gaussian correlation {rho} is outside (-1,1)")));
        }
        Ok(PairCopula::Gaussian { rho })
    }

    pub fn clayton(theta: f64, rotation: Rotation) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::invalid(format!("Clayton parameter {theta} must be positive")));
        }
        Ok(PairCopula::Clayton { theta, rotation })
    }

    /// Number of free parameters, as used by AIC.
    pub fn n_params(&self) -> usize {
        match self {
            PairCopula::Independence => 0,
            PairCopula::Gaussian { .. } | PairCopula::Clayton { .. } => 1,
            PairCopula::Grid(_) => 0,
        }
    }

    pub fn is_independence(&self) -> bool {
        matches!(self, PairCopula::Independence)
    }

    /// Population Kendall's tau. `None` for grids.
    pub fn kendall_tau(&self) -> Option<f64> {
        match *self {
            PairCopula::Independence => Some(0.0),
            PairCopula::Gaussian { rho } => Some(2.0 / std::f64::consts::PI * rho.asin()),
            PairCopula::Clayton { theta, rotation } => {
                let t = theta / (theta + 2.0);
                Some(if rotation.positive() { t } else { -t })
            }
            PairCopula::Grid(_) => None,
        }
    }

    /// The copula of `(V, U)` when `self` is the copula of `(U, V)`.
    pub fn swapped(&self) -> PairCopula {
        match self {
            PairCopula::Clayton { theta, rotation: Rotation::R90 } => {
                PairCopula::Clayton { theta: *theta, rotation: Rotation::R270 }
            }
            PairCopula::Clayton { theta, rotation: Rotation::R270 } => {
                PairCopula::Clayton { theta: *theta, rotation: Rotation::R90 }
            }
            PairCopula::Grid(g) => PairCopula::Grid(Box::new(g.transposed())),
            other => other.clone(),
        }
    }

    pub fn density(&self, u: f64, v: f64) -> f64 {
        match self {
            PairCopula::Grid(g) => g.density(clamp01(u), clamp01(v)),
            _ => self.log_density(u, v).exp(),
        }
    }

    pub fn log_density(&self, u: f64, v: f64) -> f64 {
        let (u, v) = (clamp01(u), clamp01(v));
        match *self {
            PairCopula::Independence => 0.0,
            PairCopula::Gaussian { rho } => gaussian_log_density(rho, u, v),
            PairCopula::Clayton { theta, rotation } => {
                let (fu, fv) = rotation.flips();
                let u = if fu { 1.0 - u } else { u };
                let v = if fv { 1.0 - v } else { v };
                clayton_log_density(theta, u, v)
            }
            PairCopula::Grid(ref g) => g.density(u, v).ln(),
        }
    }

    /// h-function: `F(u | v)` for [`Cond::Second`], `F(v | u)` for
    /// [`Cond::First`].
    pub fn hfunc(&self, u: f64, v: f64, cond: Cond) -> f64 {
        let (u, v) = (clamp01(u), clamp01(v));
        match *self {
            PairCopula::Independence => match cond {
                Cond::Second => u,
                Cond::First => v,
            },
            PairCopula::Gaussian { rho } => match cond {
                Cond::Second => gaussian_h(rho, u, v),
                Cond::First => gaussian_h(rho, v, u),
            },
            PairCopula::Clayton { theta, rotation } => {
                let (fu, fv) = rotation.flips();
                let ru = if fu { 1.0 - u } else { u };
                let rv = if fv { 1.0 - v } else { v };
                match cond {
                    Cond::Second => {
                        let h = clayton_h(theta, ru, rv);
                        if fu {
                            1.0 - h
                        } else {
                            h
                        }
                    }
                    Cond::First => {
                        let h = clayton_h(theta, rv, ru);
                        if fv {
                            1.0 - h
                        } else {
                            h
                        }
                    }
                }
            }
            PairCopula::Grid(ref g) => match cond {
                Cond::Second => g.by_v.cdf(v, u),
                Cond::First => g.by_u.cdf(u, v),
            },
        }
    }

    /// Inverse h-function in the non-conditioning argument: the `x` with
    /// `hfunc(x, given, Second) = w` (or `hfunc(given, x, First) = w`).
    pub fn hinv(&self, w: f64, given: f64, cond: Cond) -> f64 {
        let w = if w.is_nan() { 0.5 } else { w.clamp(LEVEL_EPS, 1.0 - LEVEL_EPS) };
        let given = clamp01(given);
        let x = match *self {
            PairCopula::Independence => w,
            PairCopula::Gaussian { rho } => gaussian_hinv(rho, w, given),
            PairCopula::Clayton { theta, rotation } => {
                let (fu, fv) = rotation.flips();
                let (flip_out, flip_given) = match cond {
                    Cond::Second => (fu, fv),
                    Cond::First => (fv, fu),
                };
                let g = if flip_given { 1.0 - given } else { given };
                if flip_out {
                    1.0 - clayton_hinv(theta, 1.0 - w, g)
                } else {
                    clayton_hinv(theta, w, g)
                }
            }
            PairCopula::Grid(ref g) => match cond {
                Cond::Second => g.by_v.inverse(given, w),
                Cond::First => g.by_u.inverse(given, w),
            },
        };
        clamp01(x)
    }

    /// Draws `n` pairs by inverse-h sampling.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let w: f64 = rng.random();
                (u, self.hinv(w, u, Cond::First))
            })
            .collect()
    }

    pub fn log_likelihood(&self, u: &[f64], v: &[f64]) -> f64 {
        u.iter().zip(v).map(|(&a, &b)| self.log_density(a, b)).sum()
    }
}

fn gaussian_log_density(rho: f64, u: f64, v: f64) -> f64 {
    let x = norm_quantile(u);
    let y = norm_quantile(v);
    let r2 = rho * rho;
    -0.5 * (1.0 - r2).ln() - (r2 * (x * x + y * y) - 2.0 * rho * x * y) / (2.0 * (1.0 - r2))
}

fn gaussian_h(rho: f64, u: f64, v: f64) -> f64 {
    let x = norm_quantile(u);
    let y = norm_quantile(v);
    norm_cdf((x - rho * y) / (1.0 - rho * rho).sqrt())
}

fn gaussian_hinv(rho: f64, w: f64, v: f64) -> f64 {
    let z = norm_quantile(w);
    let y = norm_quantile(v);
    norm_cdf(z * (1.0 - rho * rho).sqrt() + rho * y)
}

/// `ln(u^-theta + v^-theta - 1)` without overflow.
fn clayton_log_sum(theta: f64, u: f64, v: f64) -> f64 {
    let a = -theta * u.ln();
    let b = -theta * v.ln();
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp() - (-m).exp()).ln()
}

fn clayton_log_density(theta: f64, u: f64, v: f64) -> f64 {
    let l = clayton_log_sum(theta, u, v);
    (1.0 + theta).ln() - (1.0 + theta) * (u.ln() + v.ln()) - (2.0 + 1.0 / theta) * l
}

/// `dC(u, v) / dv` of the unrotated Clayton copula.
fn clayton_h(theta: f64, u: f64, v: f64) -> f64 {
    let l = clayton_log_sum(theta, u, v);
    ((-theta - 1.0) * v.ln() - (1.0 + 1.0 / theta) * l).exp().min(1.0)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Closed-form inverse of [`clayton_h`] in `u`.
fn clayton_hinv(theta: f64, w: f64, v: f64) -> f64 {
    // u^-theta = 1 + v^-theta * ((w^(-theta/(1+theta))) - 1)
    let b = -theta * v.ln();
    let a = -theta / (1.0 + theta) * w.ln();
    let x = b + a.exp_m1().ln();
    (-softplus(x) / theta).exp()
}

/// Result of fitting a pair copula.
#[derive(Debug, Clone, PartialEq)]
pub struct BicopFit {
    pub copula: PairCopula,
    pub log_likelihood: f64,
    pub aic: f64,
    pub tau: f64,
    /// Set when a column was constant and the fit fell back to independence.
    pub degenerate: bool,
}

/// Options for [`fit_parametric`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub families: Vec<Family>,
    /// Refine the tau-inversion estimate by golden-section maximum likelihood.
    pub mle_refine: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { families: Family::all(), mle_refine: false }
    }
}

impl FitOptions {
    pub fn only(family: Family) -> Self {
        FitOptions { families: vec![family], mle_refine: false }
    }
}

fn check_pseudo_obs(u: &[f64], v: &[f64], min_n: usize) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} pseudo-observations", u.len(), v.len())));
    }
    if u.len() < min_n {
        return Err(Error::invalid(format!(
            "pair-copula fitting needs at least {min_n} observations, got {}",
            u.len()
        )));
    }
    if let Some(i) = u.iter().chain(v).position(|x| !(*x > 0.0 && *x < 1.0)) {
        return Err(Error::invalid(format!("pseudo-observation {i} is outside (0,1)")));
    }
    Ok(())
}

fn tau_inversion(family: Family, tau: f64) -> Option<PairCopula> {
    let t = tau.clamp(-MAX_TAU, MAX_TAU);
    match family {
        Family::Independence => Some(PairCopula::Independence),
        Family::Gaussian => {
            let rho = (std::f64::consts::FRAC_PI_2 * t).sin().clamp(-MAX_RHO, MAX_RHO);
            Some(PairCopula::Gaussian { rho })
        }
        Family::Clayton(rotation) => {
            if (t > 0.0) != rotation.positive() || t == 0.0 {
                return None;
            }
            let a = t.abs();
            Some(PairCopula::Clayton { theta: 2.0 * a / (1.0 - a), rotation })
        }
    }
}

fn golden_section(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
        if (hi - lo).abs() < 1e-7 {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn refine(copula: PairCopula, u: &[f64], v: &[f64]) -> PairCopula {
    match copula {
        PairCopula::Gaussian { rho } => {
            let lo = (rho - 0.2).max(-MAX_RHO);
            let hi = (rho + 0.2).min(MAX_RHO);
            let r = golden_section(lo, hi, |r| PairCopula::Gaussian { rho: r }.log_likelihood(u, v));
            PairCopula::Gaussian { rho: r }
        }
        PairCopula::Clayton { theta, rotation } => {
            let lo = (theta * 0.5).max(1e-4);
            let hi = theta * 2.0 + 0.1;
            let t = golden_section(lo, hi, |t| PairCopula::Clayton { theta: t, rotation }.log_likelihood(u, v));
            PairCopula::Clayton { theta: t, rotation }
        }
        other => other,
    }
}

/// Fits a parametric pair copula to pseudo-observations by Kendall's tau
/// inversion, choosing among `options.families` by AIC.
///
/// An empirical `|tau| < 0.02` yields the independence copula, as does a
/// constant column (flagged as degenerate).
pub fn fit_parametric(u: &[f64], v: &[f64], options: &FitOptions) -> Result<BicopFit> {
    check_pseudo_obs(u, v, 10)?;
    let independent = |tau: f64, degenerate: bool| BicopFit {
        copula: PairCopula::Independence,
        log_likelihood: 0.0,
        aic: 0.0,
        tau,
        degenerate,
    };
    let Some(tau) = kendall_tau(u, v) else {
        log::warn!("constant pseudo-observation column; using the independence copula");
        return Ok(independent(0.0, true));
    };
    if tau.abs() < TAU_INDEPENDENCE {
        return Ok(independent(tau, false));
    }
    let mut best: Option<BicopFit> = None;
    for &family in &options.families {
        let Some(mut copula) = tau_inversion(family, tau) else { continue };
        if options.mle_refine {
            copula = refine(copula, u, v);
        }
        let ll = copula.log_likelihood(u, v);
        let aic = -2.0 * ll + 2.0 * copula.n_params() as f64;
        if !aic.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| aic < b.aic) {
            best = Some(BicopFit { copula, log_likelihood: ll, aic, tau, degenerate: false });
        }
    }
    Ok(best.unwrap_or_else(|| independent(tau, false)))
}

/// Default mesh size of the nonparametric estimator.
pub const DEFAULT_GRID_SIZE: usize = 64;

/// Transformation-kernel copula density estimate: a bivariate Gaussian KDE on
/// normal scores, mapped back to the unit square and tabulated on a `G x G`
/// mesh at `(i + 0.5) / G`.
pub fn fit_nonparametric(u: &[f64], v: &[f64], grid_size: usize) -> Result<PairCopula> {
    check_pseudo_obs(u, v, 30)?;
    if grid_size < 4 {
        return Err(Error::invalid(format!("grid size {grid_size} is below 4")));
    }
    let n = u.len();
    let zu: Vec<f64> = u.iter().map(|&x| norm_quantile(x)).collect();
    let zv: Vec<f64> = v.iter().map(|&x| norm_quantile(x)).collect();
    let scale = (n as f64).powf(-1.0 / 6.0);
    let hu = crate::stats::variance(&zu).sqrt() * scale;
    let hv = crate::stats::variance(&zv).sqrt() * scale;
    if !(hu > 0.0 && hv > 0.0) {
        return Ok(PairCopula::Independence);
    }
    let g = grid_size;
    let mesh: Vec<f64> = (0..g).map(|i| norm_quantile(node(i, g))).collect();
    let kernel = |z: &[f64], h: f64| -> Vec<f64> {
        let mut k = vec![0.0; g * n];
        for (i, &a) in mesh.iter().enumerate() {
            for (s, &zs) in z.iter().enumerate() {
                k[i * n + s] = norm_pdf((a - zs) / h) / h;
            }
        }
        k
    };
    let ku = kernel(&zu, hu);
    let kv = kernel(&zv, hv);
    let mut values = vec![0.0; g * g];
    for i in 0..g {
        let row_u = &ku[i * n..(i + 1) * n];
        for j in 0..g {
            let row_v = &kv[j * n..(j + 1) * n];
            let f: f64 = row_u.iter().zip(row_v).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            values[i * g + j] = f / (norm_pdf(mesh[i]) * norm_pdf(mesh[j]));
        }
    }
    Ok(PairCopula::Grid(Box::new(KernelGrid::new(g, values)?)))
}

#[inline]
fn node(i: usize, g: usize) -> f64 {
    (i as f64 + 0.5) / g as f64
}

/// Locates `x` on the mesh: lower node index and linear weight of the upper
/// node. Outside the outer nodes the weight is zero (constant extension).
#[inline]
fn locate(x: f64, g: usize) -> (usize, f64) {
    let t = x * g as f64 - 0.5;
    if t <= 0.0 {
        return (0, 0.0);
    }
    if t >= (g - 1) as f64 {
        return (g - 1, 0.0);
    }
    let i = t.floor() as usize;
    (i, t - i as f64)
}

/// Cumulative integrals of the piecewise-linear density along one axis, one
/// line per node of the other (conditioning) axis.
#[derive(Debug, Clone, PartialEq)]
struct AxisTable {
    g: usize,
    /// `values[line * g + k]`: density at conditioning node `line`, node `k`.
    values: Vec<f64>,
    /// `cum[line * g + k]`: integral from 0 to node `k`.
    cum: Vec<f64>,
}

impl AxisTable {
    fn new(g: usize, values: Vec<f64>) -> Self {
        let step = 1.0 / g as f64;
        let t0 = node(0, g);
        let mut cum = vec![0.0; g * g];
        for line in 0..g {
            let y = &values[line * g..(line + 1) * g];
            let c = &mut cum[line * g..(line + 1) * g];
            c[0] = y[0] * t0;
            for k in 1..g {
                c[k] = c[k - 1] + 0.5 * (y[k - 1] + y[k]) * step;
            }
        }
        AxisTable { g, values, cum }
    }

    #[inline]
    fn y(&self, line: usize, beta: f64, k: usize) -> f64 {
        let g = self.g;
        let a = self.values[line * g + k];
        if beta == 0.0 {
            a
        } else {
            (1.0 - beta) * a + beta * self.values[(line + 1) * g + k]
        }
    }

    #[inline]
    fn c(&self, line: usize, beta: f64, k: usize) -> f64 {
        let g = self.g;
        let a = self.cum[line * g + k];
        if beta == 0.0 {
            a
        } else {
            (1.0 - beta) * a + beta * self.cum[(line + 1) * g + k]
        }
    }

    fn integral(&self, line: usize, beta: f64, x: f64) -> f64 {
        let g = self.g;
        let step = 1.0 / g as f64;
        let t0 = node(0, g);
        if x <= t0 {
            return self.y(line, beta, 0) * x;
        }
        let last = node(g - 1, g);
        if x >= last {
            return self.c(line, beta, g - 1) + self.y(line, beta, g - 1) * (x - last);
        }
        let (k, _) = locate(x, g);
        let d = x - node(k, g);
        let y0 = self.y(line, beta, k);
        let slope = (self.y(line, beta, k + 1) - y0) / step;
        self.c(line, beta, k) + y0 * d + 0.5 * slope * d * d
    }

    fn total(&self, line: usize, beta: f64) -> f64 {
        let g = self.g;
        self.c(line, beta, g - 1) + self.y(line, beta, g - 1) * node(0, g)
    }

    /// Conditional cdf of the integration axis at `x`, given `given`.
    fn cdf(&self, given: f64, x: f64) -> f64 {
        let (line, beta) = locate(given, self.g);
        let total = self.total(line, beta);
        (self.integral(line, beta, x) / total).clamp(0.0, 1.0)
    }

    fn inverse(&self, given: f64, w: f64) -> f64 {
        let g = self.g;
        let step = 1.0 / g as f64;
        let (line, beta) = locate(given, g);
        let target = w * self.total(line, beta);
        let first = self.c(line, beta, 0);
        if target <= first {
            let y0 = self.y(line, beta, 0);
            return if y0 > 0.0 { target / y0 } else { node(0, g) * w };
        }
        let last = self.c(line, beta, g - 1);
        if target >= last {
            let y = self.y(line, beta, g - 1);
            let x = if y > 0.0 { node(g - 1, g) + (target - last) / y } else { node(g - 1, g) };
            return x.min(1.0);
        }
        // c(k) <= target < c(k + 1)
        let (mut lo, mut hi) = (0usize, g - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.c(line, beta, mid) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let r = target - self.c(line, beta, lo);
        let y0 = self.y(line, beta, lo);
        let slope = (self.y(line, beta, lo + 1) - y0) / step;
        let disc = (y0 * y0 + 2.0 * slope * r).max(0.0);
        let denom = y0 + disc.sqrt();
        let d = if denom > 0.0 { 2.0 * r / denom } else { 0.0 };
        node(lo, g) + d.clamp(0.0, step)
    }
}

/// Copula density tabulated on an equispaced mesh, bilinearly interpolated
/// and extended as a constant into the boundary strips of width `1 / (2G)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct KernelGrid {
    size: usize,
    /// Conditioning on `u`, integrating along `v`; `values[i * G + j]` is the
    /// density at `(u_i, v_j)`.
    by_u: AxisTable,
    /// Conditioning on `v`, integrating along `u`.
    by_v: AxisTable,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    size: usize,
    values: Vec<f64>,
}

impl TryFrom<GridRepr> for KernelGrid {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        KernelGrid::from_normalized(r.size, r.values)
    }
}

impl From<KernelGrid> for GridRepr {
    fn from(g: KernelGrid) -> Self {
        GridRepr { size: g.size, values: g.by_u.values }
    }
}

impl KernelGrid {
    /// Builds a grid from raw density values (`values[i * G + j]` at
    /// `(u_i, v_j)`), rescaling them to integrate to one.
    pub fn new(size: usize, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::ShapeMismatch(format!(
                "grid of size {size} needs {} values, got {}",
                size * size,
                values.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Numeric("grid density has negative or non-finite values".into()));
        }
        let mass = values.iter().sum::<f64>() / (size * size) as f64;
        if !(mass > 0.0) {
            return Err(Error::Numeric("grid density has zero mass".into()));
        }
        for v in &mut values {
            *v /= mass;
        }
        KernelGrid::from_normalized(size, values)
    }

    fn from_normalized(size: usize, values: Vec<f64>) -> Result<Self> {
        if size < 2 || values.len() != size * size {
            return Err(Error::Format(format!("malformed grid of size {size}")));
        }
        let mut transposed = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                transposed[j * size + i] = values[i * size + j];
            }
        }
        Ok(KernelGrid { size, by_u: AxisTable::new(size, values), by_v: AxisTable::new(size, transposed) })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Density values at the mesh nodes, `values[i * G + j]` at `(u_i, v_j)`.
    pub fn values(&self) -> &[f64] {
        &self.by_u.values
    }

    /// Exact integral of the interpolated density over the unit square.
    pub fn integral(&self) -> f64 {
        self.values().iter().sum::<f64>() / (self.size * self.size) as f64
    }

    fn transposed(&self) -> KernelGrid {
        KernelGrid { size: self.size, by_u: self.by_v.clone(), by_v: self.by_u.clone() }
    }

    fn density(&self, u: f64, v: f64) -> f64 {
        let g = self.size;
        let (i, a) = locate(u, g);
        let (j, b) = locate(v, g);
        let val = |i: usize, j: usize| self.by_u.values[i * g + j];
        let mut d = (1.0 - a) * (1.0 - b) * val(i, j);
        if a > 0.0 {
            d += a * (1.0 - b) * val(i + 1, j);
        }
        if b > 0.0 {
            d += (1.0 - a) * b * val(i, j + 1);
        }
        if a > 0.0 && b > 0.0 {
            d += a * b * val(i + 1, j + 1);
        }
        d.max(1e-300)
    }
}
