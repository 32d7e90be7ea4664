//! D-vine copula models: sequential fitting, joint and contiguous-block
//! copula densities, the Rosenblatt transform and its inverse, and
//! conditional sampling given a prefix or suffix of the vine order.
//!
//! Tree `t` (0-based) of a D-vine on the order `π` has edges `e = 0..M-1-t`;
//! edge `(t, e)` links `π_e` and `π_{e+t+1}` given the variables between them.
//! Under the simplified-vine assumption the pair copula of an edge does not
//! depend on the values of its conditioning variables.

use std::sync::{Arc, OnceLock};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bicop::{self, Cond, FitOptions, PairCopula, DEFAULT_GRID_SIZE};
use crate::error::{Error, Result};
use crate::marginals::EmpiricalMarginal;
use crate::structure::{validate_order, Coalition};

/// Minimum number of training rows for fitting a vine.
pub const MIN_ROWS: usize = 30;

const FORMAT_NAME: &str = "vineshap-dvine";
const FORMAT_VERSION: u32 = 1;

/// How the pair copulas of a vine are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum FitMode {
    /// Tau inversion with AIC selection among the given families.
    Parametric(FitOptions),
    /// Transformation-kernel estimate tabulated on a `grid_size` mesh.
    Nonparametric { grid_size: usize },
    /// The same copula on every edge, without estimation.
    Fixed(PairCopula),
}

impl FitMode {
    pub fn nonparametric() -> Self {
        FitMode::Nonparametric { grid_size: DEFAULT_GRID_SIZE }
    }
}

/// The copula part of a D-vine: an order and the triangular table of pair
/// copulas, `pairs[t][e]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VineCopula {
    order: Vec<usize>,
    pairs: Vec<Vec<PairCopula>>,
}

impl VineCopula {
    pub fn new(order: Vec<usize>, pairs: Vec<Vec<PairCopula>>) -> Result<Self> {
        let m = order.len();
        if m < 2 {
            return Err(Error::invalid("a vine needs at least 2 variables"));
        }
        validate_order(&order, m)?;
        if pairs.len() != m - 1 || pairs.iter().enumerate().any(|(t, row)| row.len() != m - 1 - t) {
            return Err(Error::ShapeMismatch(format!(
                "pair table does not have the triangular shape of a {m}-variable vine"
            )));
        }
        Ok(VineCopula { order, pairs })
    }

    /// The same copula on every edge.
    pub fn uniform(order: Vec<usize>, copula: PairCopula) -> Result<Self> {
        let m = order.len();
        let pairs = (0..m.saturating_sub(1)).map(|t| vec![copula.clone(); m - 1 - t]).collect();
        VineCopula::new(order, pairs)
    }

    pub fn dim(&self) -> usize {
        self.order.len()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn pairs(&self) -> &[Vec<PairCopula>] {
        &self.pairs
    }

    pub fn pair(&self, tree: usize, edge: usize) -> &PairCopula {
        &self.pairs[tree][edge]
    }

    /// The same model described on the reversed order.
    pub fn reversed(&self) -> VineCopula {
        let m = self.dim();
        let order = self.order.iter().rev().copied().collect();
        let pairs =
            (0..m - 1).map(|t| (0..m - 1 - t).map(|e| self.pairs[t][m - 2 - t - e].swapped()).collect()).collect();
        VineCopula { order, pairs }
    }

    fn to_positions(&self, u: &[f64]) -> Vec<f64> {
        self.order.iter().map(|&j| u[j]).collect()
    }

    /// Log copula density of the sub-vine on order positions `start..=end`;
    /// `x` holds the values of those positions.
    fn block_log_density(&self, start: usize, x: &[f64]) -> f64 {
        let len = x.len();
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        let mut total = 0.0;
        for t in 0..len.saturating_sub(1) {
            let last = t + 2 == len;
            for e in 0..len - 1 - t {
                let c = &self.pairs[t][start + e];
                let (ae, be) = (a[e], b[e + t + 1]);
                total += c.log_density(ae, be);
                if !last {
                    a[e] = c.hfunc(ae, be, Cond::Second);
                    b[e + t + 1] = c.hfunc(ae, be, Cond::First);
                }
            }
        }
        total
    }

    /// Log copula density at `u` (original feature indexing).
    pub fn log_density(&self, u: &[f64]) -> f64 {
        self.block_log_density(0, &self.to_positions(u))
    }

    /// Log density of the copula marginal of the variables at order positions
    /// `start..=end`. Only those coordinates of `u` are read.
    pub fn marginal_log_density(&self, start: usize, end: usize, u: &[f64]) -> Result<f64> {
        if start > end || end >= self.dim() {
            return Err(Error::invalid(format!("block {start}..={end} is outside 0..{}", self.dim())));
        }
        let x: Vec<f64> = self.order[start..=end].iter().map(|&j| u[j]).collect();
        Ok(self.block_log_density(start, &x))
    }

    /// Order positions spanned by `set` when it is a contiguous block.
    pub fn block_of(&self, set: Coalition) -> Result<(usize, usize)> {
        let positions: Vec<usize> = (0..self.dim()).filter(|&k| set.contains(self.order[k])).collect();
        let (Some(&start), Some(&end)) = (positions.first(), positions.last()) else {
            return Err(Error::invalid("empty block"));
        };
        if end - start + 1 != positions.len() {
            return Err(Error::UnsupportedBlock { start, end });
        }
        Ok((start, end))
    }

    /// Rosenblatt transform: `w_k = F(u_{π_k} | u_{π_0..π_{k-1}})`, returned
    /// in order positions.
    fn rosenblatt_positions(&self, x: &[f64]) -> Vec<f64> {
        let mut state = State::new(self.dim());
        let mut w = Vec::with_capacity(x.len());
        for (k, &xk) in x.iter().enumerate() {
            w.push(state.push_known(self, k, xk));
        }
        w
    }

    /// Rosenblatt transform; input and output in original feature indexing.
    pub fn rosenblatt(&self, u: &[f64]) -> Vec<f64> {
        let w = self.rosenblatt_positions(&self.to_positions(u));
        self.by_feature(&w)
    }

    /// Inverse Rosenblatt transform; input and output in original feature
    /// indexing.
    pub fn inverse_rosenblatt(&self, w: &[f64]) -> Vec<f64> {
        let wp = self.to_positions(w);
        let mut state = State::new(self.dim());
        let x: Vec<f64> = wp.iter().enumerate().map(|(k, &wk)| state.push_uniform(self, k, wk)).collect();
        self.by_feature(&x)
    }

    fn by_feature(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (k, &j) in self.order.iter().enumerate() {
            out[j] = x[k];
        }
        out
    }

    /// Draws `n` vectors from the copula (original feature indexing).
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..self.dim()).map(|_| rng.random()).collect();
                self.inverse_rosenblatt(&w)
            })
            .collect()
    }

    /// Samples the variables at order positions `p..M` given copula-scale
    /// values `fixed` for positions `0..p`. Returned rows are in position
    /// order and cover positions `p..M` only.
    fn sample_after_prefix<R: Rng + ?Sized>(&self, fixed: &[f64], n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let m = self.dim();
        let p = fixed.len();
        // steps 1-2: transform the conditioning values (the placeholders for
        // the remaining coordinates never influence the prefix part of T)
        let mut base = State::new(m);
        for (k, &x) in fixed.iter().enumerate() {
            base.push_known(self, k, x);
        }
        (0..n)
            .map(|_| {
                // steps 3-5: fresh uniforms for the remaining coordinates,
                // then the inverse transform
                let mut state = base.clone();
                (p..m).map(|k| state.push_uniform(self, k, rng.random())).collect()
            })
            .collect()
    }
}

/// Pseudo-observations of the recursion for one vector: `a[t][j]` is
/// `F(x_j | x_{j+1..j+t})` and `b[t][j]` is `F(x_j | x_{j-t..j-1})`, stored
/// row-major in `M x M` tables.
#[derive(Clone)]
struct State {
    m: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl State {
    fn new(m: usize) -> Self {
        State { m, a: vec![0.0; m * m], b: vec![0.0; m * m] }
    }

    /// Records the h-functions that become available once position `k` is
    /// known: the forward quantities `a[t+1][k-1-t]`.
    fn finish(&mut self, vine: &VineCopula, k: usize) {
        let m = self.m;
        for t in 0..k {
            let e = k - 1 - t;
            if t + 1 >= m - 1 {
                break;
            }
            let c = &vine.pairs[t][e];
            self.a[(t + 1) * m + e] = c.hfunc(self.a[t * m + e], self.b[t * m + k], Cond::Second);
        }
    }

    /// Adds the known value of position `k` and returns its Rosenblatt
    /// coordinate.
    fn push_known(&mut self, vine: &VineCopula, k: usize, x: f64) -> f64 {
        let m = self.m;
        self.a[k] = x;
        self.b[k] = x;
        for t in 0..k {
            let e = k - 1 - t;
            let c = &vine.pairs[t][e];
            self.b[(t + 1) * m + k] = c.hfunc(self.a[t * m + e], self.b[t * m + k], Cond::First);
        }
        self.finish(vine, k);
        self.b[k * m + k]
    }

    /// Adds position `k` from its Rosenblatt coordinate `w` and returns the
    /// copula-scale value.
    fn push_uniform(&mut self, vine: &VineCopula, k: usize, w: f64) -> f64 {
        let m = self.m;
        let mut cur = w;
        self.b[k * m + k] = cur;
        for t in (0..k).rev() {
            let e = k - 1 - t;
            cur = vine.pairs[t][e].hinv(cur, self.a[t * m + e], Cond::First);
            self.b[t * m + k] = cur;
        }
        self.a[k] = cur;
        self.finish(vine, k);
        cur
    }
}

/// A fitted D-vine: copula plus empirical margins of the training data.
#[derive(Debug, Clone)]
pub struct DVineModel {
    copula: VineCopula,
    marginals: Arc<Vec<EmpiricalMarginal>>,
    reversed: OnceLock<VineCopula>,
}

impl PartialEq for DVineModel {
    fn eq(&self, other: &Self) -> bool {
        self.copula == other.copula && self.marginals == other.marginals
    }
}

/// Validates an `N x M` table and returns `M`.
pub(crate) fn check_table(data: &[Vec<f64>]) -> Result<usize> {
    let m = data.first().map_or(0, Vec::len);
    if let Some(i) = data.iter().position(|row| row.len() != m) {
        return Err(Error::ShapeMismatch(format!("row {i} has {} columns, expected {m}", data[i].len())));
    }
    if let Some(i) = data.iter().position(|row| row.iter().any(|x| !x.is_finite())) {
        return Err(Error::invalid(format!("row {i} contains a non-finite value")));
    }
    Ok(m)
}

/// Fits one empirical margin per column.
pub fn fit_marginals(data: &[Vec<f64>]) -> Result<Vec<EmpiricalMarginal>> {
    let m = check_table(data)?;
    (0..m).map(|j| EmpiricalMarginal::fit(&data.iter().map(|r| r[j]).collect::<Vec<_>>())).collect()
}

/// Copula-scale pseudo-observations of `data`, as columns.
pub fn pseudo_observations(marginals: &[EmpiricalMarginal], data: &[Vec<f64>]) -> Vec<Vec<f64>> {
    marginals.iter().enumerate().map(|(j, f)| data.iter().map(|r| f.cdf(r[j])).collect()).collect()
}

/// Fits the pair copulas of a D-vine on `order` to copula-scale columns.
pub fn fit_copula(columns: &[Vec<f64>], order: &[usize], mode: &FitMode) -> Result<VineCopula> {
    let m = columns.len();
    if m < 2 {
        return Err(Error::invalid("a vine needs at least 2 variables"));
    }
    validate_order(order, m)?;
    let n = columns[0].len();
    if n < MIN_ROWS {
        return Err(Error::invalid(format!("fitting a vine needs at least {MIN_ROWS} rows, got {n}")));
    }
    let fit_edge = |u: &[f64], v: &[f64]| -> Result<PairCopula> {
        match mode {
            FitMode::Parametric(opts) => {
                let fit = bicop::fit_parametric(u, v, opts)?;
                if fit.degenerate {
                    log::warn!("degenerate edge fitted as independence");
                }
                Ok(fit.copula)
            }
            FitMode::Nonparametric { grid_size } => bicop::fit_nonparametric(u, v, *grid_size),
            FitMode::Fixed(c) => Ok(c.clone()),
        }
    };
    // a[j] = F(x_j | x_{j+1..j+t}), b[j] = F(x_j | x_{j-t..j-1}) at tree t
    let mut a: Vec<Vec<f64>> = order.iter().map(|&j| columns[j].clone()).collect();
    let mut b = a.clone();
    let mut pairs = Vec::with_capacity(m - 1);
    for t in 0..m - 1 {
        let edges = m - 1 - t;
        let row: Vec<PairCopula> =
            (0..edges).into_par_iter().map(|e| fit_edge(&a[e], &b[e + t + 1])).collect::<Result<_>>()?;
        if t + 2 < m {
            let updates: Vec<(Vec<f64>, Vec<f64>)> = (0..edges)
                .into_par_iter()
                .map(|e| {
                    let c = &row[e];
                    let (ae, be) = (&a[e], &b[e + t + 1]);
                    let na = ae.iter().zip(be).map(|(&x, &y)| c.hfunc(x, y, Cond::Second)).collect();
                    let nb = ae.iter().zip(be).map(|(&x, &y)| c.hfunc(x, y, Cond::First)).collect();
                    (na, nb)
                })
                .collect();
            for (e, (na, nb)) in updates.into_iter().enumerate() {
                a[e] = na;
                b[e + t + 1] = nb;
            }
        }
        pairs.push(row);
    }
    VineCopula::new(order.to_vec(), pairs)
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    order: Vec<usize>,
    pairs: Vec<Vec<PairCopula>>,
    marginals: Vec<Vec<f64>>,
}

impl DVineModel {
    /// Fits margins and copula to an `N x M` data table.
    pub fn fit(data: &[Vec<f64>], order: &[usize], mode: &FitMode) -> Result<Self> {
        let marginals = Arc::new(fit_marginals(data)?);
        DVineModel::fit_with_marginals(marginals, data, order, mode)
    }

    /// Fits the copula with margins that were fitted beforehand (shared
    /// between the vines of a cover plan).
    pub fn fit_with_marginals(
        marginals: Arc<Vec<EmpiricalMarginal>>,
        data: &[Vec<f64>],
        order: &[usize],
        mode: &FitMode,
    ) -> Result<Self> {
        let m = check_table(data)?;
        if marginals.len() != m {
            return Err(Error::ShapeMismatch(format!("{} margins for {m} columns", marginals.len())));
        }
        let columns = pseudo_observations(&marginals, data);
        let copula = fit_copula(&columns, order, mode)?;
        Ok(DVineModel::from_parts(copula, marginals))
    }

    pub fn from_parts(copula: VineCopula, marginals: Arc<Vec<EmpiricalMarginal>>) -> Self {
        assert_eq!(copula.dim(), marginals.len(), "copula and margins disagree on the dimension");
        DVineModel { copula, marginals, reversed: OnceLock::new() }
    }

    pub fn dim(&self) -> usize {
        self.copula.dim()
    }

    pub fn order(&self) -> &[usize] {
        self.copula.order()
    }

    pub fn copula(&self) -> &VineCopula {
        &self.copula
    }

    pub fn marginals(&self) -> &Arc<Vec<EmpiricalMarginal>> {
        &self.marginals
    }

    fn reversed(&self) -> &VineCopula {
        self.reversed.get_or_init(|| self.copula.reversed())
    }

    /// Maps a data-scale vector to the copula scale.
    pub fn to_copula_scale(&self, x: &[f64]) -> Vec<f64> {
        self.marginals.iter().zip(x).map(|(f, &v)| f.cdf(v)).collect()
    }

    pub fn copula_log_density(&self, u: &[f64]) -> f64 {
        self.copula.log_density(u)
    }

    pub fn marginal_copula_log_density(&self, start: usize, end: usize, u: &[f64]) -> Result<f64> {
        self.copula.marginal_log_density(start, end, u)
    }

    pub fn rosenblatt(&self, u: &[f64]) -> Vec<f64> {
        self.copula.rosenblatt(u)
    }

    pub fn inverse_rosenblatt(&self, w: &[f64]) -> Vec<f64> {
        self.copula.inverse_rosenblatt(w)
    }

    /// Draws `n` data-scale vectors from the model.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        self.copula
            .sample(n, rng)
            .into_iter()
            .map(|u| self.marginals.iter().zip(&u).map(|(f, &p)| f.quantile_unchecked(p)).collect())
            .collect()
    }

    /// `K` draws of the features outside `s` given `x_S = x*_S`, on the data
    /// scale. `x_star` is a full-length vector of which only the `s`
    /// coordinates are read; each returned row lists the complement features
    /// in increasing index order.
    ///
    /// `s` must be a prefix or a suffix of the vine order.
    pub fn conditional_sample<R: Rng + ?Sized>(
        &self,
        s: Coalition,
        x_star: &[f64],
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        let m = self.dim();
        if x_star.len() != m {
            return Err(Error::ShapeMismatch(format!("x* has {} values, expected {m}", x_star.len())));
        }
        let p = s.len();
        if p == 0 || p >= m || s.n_features() != m {
            return Err(Error::invalid("the conditioning set must be a proper non-empty subset"));
        }
        let order = self.order();
        let vine = if order[..p].iter().all(|&j| s.contains(j)) {
            &self.copula
        } else if order[m - p..].iter().all(|&j| s.contains(j)) {
            self.reversed()
        } else {
            return Err(Error::UnsupportedCoalition(s.mask as u64));
        };
        let order = vine.order();
        // step 1: conditioning values on the copula scale
        let fixed: Vec<f64> = order[..p].iter().map(|&j| self.marginals[j].cdf(x_star[j])).collect();
        let draws = vine.sample_after_prefix(&fixed, k, rng);
        // step 6: back to the data scale, columns by increasing feature index
        let free = s.complement().indices();
        let slot: Vec<usize> =
            free.iter().map(|j| order[p..].iter().position(|o| o == j).expect("complement is the tail")).collect();
        Ok(draws
            .into_iter()
            .map(|row| free.iter().zip(&slot).map(|(&j, &q)| self.marginals[j].quantile_unchecked(row[q])).collect())
            .collect())
    }

    /// Versioned JSON representation.
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            order: self.copula.order.clone(),
            pairs: self.copula.pairs.clone(),
            marginals: self.marginals.iter().map(|f| f.sorted_sample().to_vec()).collect(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if file.format != FORMAT_NAME {
            return Err(Error::Format(format!("unexpected format tag '{}'", file.format)));
        }
        if file.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", file.version)));
        }
        let copula = VineCopula::new(file.order, file.pairs)?;
        let marginals = file.marginals.iter().map(|s| EmpiricalMarginal::fit(s)).collect::<Result<Vec<_>>>()?;
        if marginals.len() != copula.dim() {
            return Err(Error::Format(format!("{} margins for a {}-variable vine", marginals.len(), copula.dim())));
        }
        Ok(DVineModel::from_parts(copula, Arc::new(marginals)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bicop::Rotation;
    use crate::stats::{chi_square_uniformity, kendall_tau, ks_two_sample, norm_cdf, norm_quantile};
    use nalgebra::{Matrix3, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gauss3(r12: f64, r23: f64, r13_2: f64) -> VineCopula {
        VineCopula::new(
            vec![0, 1, 2],
            vec![
                vec![PairCopula::Gaussian { rho: r12 }, PairCopula::Gaussian { rho: r23 }],
                vec![PairCopula::Gaussian { rho: r13_2 }],
            ],
        )
        .unwrap()
    }

    fn gauss_copula_log_density(r: &Matrix3<f64>, u: &[f64]) -> f64 {
        let z = Vector3::new(norm_quantile(u[0]), norm_quantile(u[1]), norm_quantile(u[2]));
        let inv = r.try_inverse().unwrap();
        let q = (z.transpose() * (inv - Matrix3::identity()) * z)[0];
        -0.5 * r.determinant().ln() - 0.5 * q
    }

    fn lattice(m: usize) -> Vec<Vec<f64>> {
        let pts = [0.03, 0.2, 0.5, 0.77, 0.96];
        let mut out = vec![vec![]];
        for _ in 0..m {
            out = out.into_iter().flat_map(|v| pts.iter().map(move |&p| [v.clone(), vec![p]].concat())).collect();
        }
        out
    }

    fn simulate_gauss(r: &Matrix3<f64>, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let l = r.cholesky().unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let e = Vector3::from_fn(|_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
                let z = l * e;
                z.iter().copied().collect()
            })
            .collect()
    }

    #[test]
    fn independence_vine_is_trivial() {
        let v = VineCopula::uniform(vec![2, 0, 3, 1], PairCopula::Independence).unwrap();
        for u in lattice(4) {
            assert_eq!(v.log_density(&u), 0.0);
            assert_eq!(v.rosenblatt(&u), u);
            assert_eq!(v.inverse_rosenblatt(&u), u);
        }
        let other = VineCopula::uniform(vec![0, 1, 2, 3], PairCopula::Independence).unwrap();
        assert_eq!(other.log_density(&[0.1, 0.4, 0.8, 0.3]), v.log_density(&[0.1, 0.4, 0.8, 0.3]));
    }

    #[test]
    fn two_variable_vine_is_its_pair() {
        let c = PairCopula::clayton(2.5, Rotation::R90).unwrap();
        let v = VineCopula::new(vec![1, 0], vec![vec![c.clone()]]).unwrap();
        for u in lattice(2) {
            assert_eq!(v.log_density(&u), c.log_density(u[1], u[0]));
            let w = v.rosenblatt(&u);
            assert_eq!(w[1], u[1]);
            assert_eq!(w[0], c.hfunc(u[1], u[0], Cond::First));
        }
    }

    #[test]
    fn gaussian_vine_matches_trivariate_gaussian_copula() {
        let (r12, r23, r13_2): (f64, f64, f64) = (0.6, -0.4, 0.3);
        let r13 = r13_2 * ((1.0 - r12 * r12) * (1.0 - r23 * r23)).sqrt() + r12 * r23;
        let r = Matrix3::new(1.0, r12, r13, r12, 1.0, r23, r13, r23, 1.0);
        let v = gauss3(r12, r23, r13_2);
        for u in lattice(3) {
            let expect = gauss_copula_log_density(&r, &u);
            assert!((v.log_density(&u) - expect).abs() < 1e-8, "{u:?}");
            let two = PairCopula::Gaussian { rho: r12 }.log_density(u[0], u[1]);
            assert!((v.marginal_log_density(0, 1, &u).unwrap() - two).abs() < 1e-10);
            assert_eq!(v.marginal_log_density(1, 1, &u).unwrap(), 0.0);
            assert_eq!(v.marginal_log_density(0, 2, &u).unwrap(), v.log_density(&u));
        }
    }

    #[test]
    fn reversed_vine_is_the_same_distribution() {
        let v = VineCopula::new(
            vec![3, 1, 0, 2],
            vec![
                vec![
                    PairCopula::clayton(1.5, Rotation::R90).unwrap(),
                    PairCopula::Gaussian { rho: 0.5 },
                    PairCopula::clayton(0.8, Rotation::R180).unwrap(),
                ],
                vec![PairCopula::Gaussian { rho: -0.3 }, PairCopula::clayton(2.0, Rotation::R270).unwrap()],
                vec![PairCopula::clayton(0.6, Rotation::R0).unwrap()],
            ],
        )
        .unwrap();
        let r = v.reversed();
        assert_eq!(r.reversed(), v);
        for u in lattice(4) {
            assert!((v.log_density(&u) - r.log_density(&u)).abs() < 1e-9);
        }
    }

    #[test]
    fn rosenblatt_roundtrip_parametric() {
        let v = gauss3(0.7, 0.5, -0.6).reversed();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let w: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            let back = v.rosenblatt(&v.inverse_rosenblatt(&w));
            for (a, b) in w.iter().zip(&back) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn simulated_taus_match_model() {
        let v = gauss3(0.6, 0.5, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = v.sample(10_000, &mut rng);
        let col = |j: usize| s.iter().map(|r| r[j]).collect::<Vec<_>>();
        let r13 = 0.2 * ((1.0f64 - 0.36) * (1.0 - 0.25)).sqrt() + 0.3;
        let tau = |r: f64| 2.0 / std::f64::consts::PI * r.asin();
        assert!((kendall_tau(&col(0), &col(1)).unwrap() - tau(0.6)).abs() < 0.03);
        assert!((kendall_tau(&col(1), &col(2)).unwrap() - tau(0.5)).abs() < 0.03);
        assert!((kendall_tau(&col(0), &col(2)).unwrap() - tau(r13)).abs() < 0.03);
    }

    #[test]
    fn partial_correlation_recovered() {
        let (r12, r23, r13): (f64, f64, f64) = (0.7, 0.5, 0.2);
        let r = Matrix3::new(1.0, r12, r13, r12, 1.0, r23, r13, r23, 1.0);
        let data = simulate_gauss(&r, 5000, 7);
        let model = DVineModel::fit(&data, &[0, 1, 2], &FitMode::Parametric(FitOptions::only(crate::Family::Gaussian)))
            .unwrap();
        let partial = (r13 - r12 * r23) / ((1.0 - r12 * r12) * (1.0 - r23 * r23)).sqrt();
        match model.copula().pair(1, 0) {
            PairCopula::Gaussian { rho } => assert!((rho - partial).abs() < 0.05, "{rho} vs {partial}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fitted_rosenblatt_is_uniform() {
        let r = Matrix3::new(1.0, 0.6, 0.3, 0.6, 1.0, 0.5, 0.3, 0.5, 1.0);
        let data = simulate_gauss(&r, 2000, 8);
        let model = DVineModel::fit(&data, &[2, 0, 1], &FitMode::Parametric(FitOptions::default())).unwrap();
        let w: Vec<Vec<f64>> = data.iter().map(|x| model.rosenblatt(&model.to_copula_scale(x))).collect();
        for j in 0..3 {
            let col: Vec<f64> = w.iter().map(|r| r[j]).collect();
            assert!(chi_square_uniformity(&col, 20).passes(0.01), "coordinate {j}");
        }
    }

    #[test]
    fn nonparametric_roundtrip() {
        let r = Matrix3::new(1.0, 0.6, 0.3, 0.6, 1.0, 0.5, 0.3, 0.5, 1.0);
        let data = simulate_gauss(&r, 500, 9);
        let model = DVineModel::fit(&data, &[0, 1, 2], &FitMode::Nonparametric { grid_size: 32 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let w: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            let back = model.rosenblatt(&model.inverse_rosenblatt(&w));
            for (a, b) in w.iter().zip(&back) {
                assert!((a - b).abs() < 1e-4, "{w:?} {back:?}");
            }
        }
    }

    fn fixed_model(order: Vec<usize>, c: PairCopula, data: &[Vec<f64>]) -> DVineModel {
        let marg = Arc::new(fit_marginals(data).unwrap());
        DVineModel::from_parts(VineCopula::uniform(order, c).unwrap(), marg)
    }

    fn normal_data(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..m).map(|_| rng.sample(rand_distr::StandardNormal)).collect()).collect()
    }

    #[test]
    fn conditional_normal_oracle() {
        let rho = 0.7;
        let data = normal_data(2, 20_000, 1);
        let model = fixed_model(vec![0, 1], PairCopula::Gaussian { rho }, &data);
        let x_star = [0.8, 0.0];
        let u1 = model.marginals()[0].cdf(0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = model.conditional_sample(Coalition::from_indices(&[0], 2), &x_star, 10_000, &mut rng).unwrap();
        let z: Vec<f64> = s.iter().map(|r| norm_quantile(model.marginals()[1].cdf(r[0]))).collect();
        let mean = crate::stats::mean(&z);
        let var = crate::stats::variance(&z);
        let mu = rho * norm_quantile(u1);
        assert!((mean - mu).abs() < 4.0 * (0.51f64 / 10_000.0).sqrt() + 0.01, "{mean} vs {mu}");
        assert!((var - (1.0 - rho * rho)).abs() < 0.04, "{var}");
        // the suffix route serves the other feature
        let s = model.conditional_sample(Coalition::from_indices(&[1], 2), &[0.0, -0.5], 10, &mut rng).unwrap();
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn independence_conditional_ignores_conditioning_values() {
        let data = normal_data(3, 3000, 5);
        let model = fixed_model(vec![0, 1, 2], PairCopula::Independence, &data);
        let s = Coalition::from_indices(&[0], 3);
        let a = model.conditional_sample(s, &[-2.0, 0.0, 0.0], 500, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = model.conditional_sample(s, &[2.0, 0.0, 0.0], 500, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let col: Vec<f64> = a.iter().map(|r| r[1]).collect();
        assert!(crate::stats::ks_one_sample(&col, norm_cdf).passes(0.01));
    }

    #[test]
    fn prefix_and_reversed_suffix_agree() {
        let data = normal_data(3, 3000, 6);
        let c = PairCopula::clayton(2.0, Rotation::R0).unwrap();
        let fwd = fixed_model(vec![0, 1, 2], c.clone(), &data);
        let rev = fixed_model(vec![2, 1, 0], c, &data);
        let s = Coalition::from_indices(&[0], 3);
        let x = [0.4, 0.0, 0.0];
        let a = fwd.conditional_sample(s, &x, 5000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = rev.conditional_sample(s, &x, 5000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for j in 0..2 {
            let ca: Vec<f64> = a.iter().map(|r| r[j]).collect();
            let cb: Vec<f64> = b.iter().map(|r| r[j]).collect();
            assert!(ks_two_sample(&ca, &cb).passes(0.01), "column {j}");
        }
    }

    #[test]
    fn unsupported_requests_are_errors() {
        let data = normal_data(3, 100, 2);
        let model = fixed_model(vec![0, 1, 2], PairCopula::Independence, &data);
        let middle = Coalition::from_indices(&[1], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            model.conditional_sample(middle, &[0.0; 3], 5, &mut rng),
            Err(Error::UnsupportedCoalition(_))
        ));
        assert!(matches!(
            model.copula().block_of(Coalition::from_indices(&[0, 2], 3)),
            Err(Error::UnsupportedBlock { start: 0, end: 2 })
        ));
        assert_eq!(model.copula().block_of(Coalition::from_indices(&[1, 2], 3)).unwrap(), (1, 2));
        assert!(DVineModel::fit(&data[..20], &[0, 1, 2], &FitMode::nonparametric()).is_err());
        assert!(DVineModel::fit(&data, &[0, 1, 1], &FitMode::nonparametric()).is_err());
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let r = Matrix3::new(1.0, 0.6, 0.3, 0.6, 1.0, 0.5, 0.3, 0.5, 1.0);
        let data = simulate_gauss(&r, 300, 10);
        for mode in [FitMode::Parametric(FitOptions::default()), FitMode::Nonparametric { grid_size: 16 }] {
            let model = DVineModel::fit(&data, &[1, 2, 0], &mode).unwrap();
            let text = model.to_json().unwrap();
            let back = DVineModel::from_json(&text).unwrap();
            assert_eq!(back, model);
            assert_eq!(back.to_json().unwrap(), text);
        }
        assert!(DVineModel::from_json("{\"format\":\"other\"}").is_err());
    }
}
