//! Randomized greedy search for a small set of D-vine orders that together
//! cover every coalition a contribution method needs.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest feature count the structure search accepts.
pub const MAX_FEATURES: usize = 25;

/// Default number of random candidate orders per greedy step.
pub const DEFAULT_CANDIDATES: usize = 100;

/// A subset of the features `0..m`, stored as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Coalition {
    pub mask: u32,
    pub m: u8,
}

impl Coalition {
    pub fn new(mask: u32, m: usize) -> Self {
        debug_assert!(m <= 32 && (m == 32 || mask >> m == 0));
        Coalition { mask, m: m as u8 }
    }

    pub fn empty(m: usize) -> Self {
        Coalition::new(0, m)
    }

    pub fn full(m: usize) -> Self {
        Coalition::new(full_mask(m), m)
    }

    pub fn from_indices(indices: &[usize], m: usize) -> Self {
        Coalition::new(indices.iter().fold(0, |acc, &i| acc | (1 << i)), m)
    }

    pub fn n_features(&self) -> usize {
        self.m as usize
    }

    pub fn len(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.mask == 0
    }

    pub fn is_full(&self) -> bool {
        self.mask == full_mask(self.m as usize)
    }

    pub fn contains(&self, j: usize) -> bool {
        self.mask >> j & 1 == 1
    }

    pub fn complement(&self) -> Coalition {
        Coalition { mask: !self.mask & full_mask(self.m as usize), m: self.m }
    }

    pub fn with(&self, j: usize) -> Coalition {
        Coalition { mask: self.mask | 1 << j, m: self.m }
    }

    /// Member indices in increasing order.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.m as usize).filter(|&j| self.contains(j)).collect()
    }
}

pub(crate) fn full_mask(m: usize) -> u32 {
    if m >= 32 {
        u32::MAX
    } else {
        (1u32 << m) - 1
    }
}

/// Contribution method whose coverage requirements drive the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapMethod {
    /// Conditional simulation: needs every conditioning set `S` as a prefix
    /// or suffix of some order.
    CondSim,
    /// Copula-density ratio: needs every marginal `S̄` with `|S̄| >= 2` as a
    /// contiguous block of some order.
    Ratio,
}

impl std::str::FromStr for ShapMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "condsim" => Ok(ShapMethod::CondSim),
            "ratio" => Ok(ShapMethod::Ratio),
            other => Err(Error::invalid(format!("unknown Shapley method '{other}' (condsim|ratio)"))),
        }
    }
}

/// How a D-vine order serves a coalition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "lowercase")]
pub enum Role {
    /// The first `len` variables of the order.
    Prefix { len: usize },
    /// The last `len` variables of the order.
    Suffix { len: usize },
    /// Order positions `start..=end`.
    Block { start: usize, end: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub order: usize,
    #[serde(flatten)]
    pub role: Role,
}

/// Set of orders plus, for each required set, which order serves it and how.
///
/// Keys of `assignment` are conditioning sets `S` for [`ShapMethod::CondSim`]
/// and marginal sets `S̄` for [`ShapMethod::Ratio`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverPlan {
    pub m: usize,
    pub method: ShapMethod,
    pub orders: Vec<Vec<usize>>,
    pub assignment: BTreeMap<u32, Assignment>,
}

impl CoverPlan {
    /// Assignment serving the contribution `v(S)`. `None` when the method
    /// needs no model for `S` (ratio method with `|S̄| <= 1`) or when `S` is
    /// not covered.
    pub fn lookup(&self, s: Coalition) -> Option<&Assignment> {
        let key = match self.method {
            ShapMethod::CondSim => s.mask,
            ShapMethod::Ratio => s.complement().mask,
        };
        self.assignment.get(&key)
    }

    /// A one-order plan covering everything for `m = 2`, or for callers that
    /// supply the plan by hand.
    pub fn from_orders(m: usize, method: ShapMethod, orders: Vec<Vec<usize>>) -> Result<Self> {
        let required: BTreeSet<u32> = required_sets(m, method)?.iter().map(|c| c.mask).collect();
        if orders.is_empty() {
            return Err(Error::invalid("a cover plan needs at least one order"));
        }
        let mut assignment = BTreeMap::new();
        for (idx, order) in orders.iter().enumerate() {
            validate_order(order, m)?;
            for (set, role) in covered_sets(order, method) {
                if required.contains(&set.mask) {
                    assignment.entry(set.mask).or_insert(Assignment { order: idx, role });
                }
            }
        }
        if let Some(missing) = required.iter().find(|k| !assignment.contains_key(k)) {
            return Err(Error::PlanCoverage(*missing as u64));
        }
        Ok(CoverPlan { m, method, orders, assignment })
    }
}

pub(crate) fn validate_order(order: &[usize], m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    if order.len() != m {
        return Err(Error::invalid(format!("order {order:?} has length {}, expected {m}", order.len())));
    }
    for &j in order {
        if j >= m || seen[j] {
            return Err(Error::invalid(format!("order {order:?} is not a permutation of 0..{m}")));
        }
        seen[j] = true;
    }
    Ok(())
}

/// Every set the method must be able to evaluate.
pub fn required_sets(m: usize, method: ShapMethod) -> Result<Vec<Coalition>> {
    if !(2..=MAX_FEATURES).contains(&m) {
        return Err(Error::invalid(format!("feature count {m} is outside 2..={MAX_FEATURES}")));
    }
    let full = full_mask(m);
    let sets = (1..full).map(|mask| Coalition::new(mask, m));
    Ok(match method {
        ShapMethod::CondSim => sets.collect(),
        ShapMethod::Ratio => sets.filter(|s| s.len() >= 2).collect(),
    })
}

/// Sets an order serves directly, with the role it plays for each.
pub fn covered_sets(order: &[usize], method: ShapMethod) -> Vec<(Coalition, Role)> {
    let m = order.len();
    let block = |start: usize, end: usize| Coalition::from_indices(&order[start..=end], m);
    let mut out = Vec::new();
    match method {
        ShapMethod::CondSim => {
            for len in 1..m {
                out.push((block(0, len - 1), Role::Prefix { len }));
            }
            for len in 1..m {
                out.push((block(m - len, m - 1), Role::Suffix { len }));
            }
        }
        ShapMethod::Ratio => {
            for len in 2..=m {
                for start in 0..=m - len {
                    out.push((block(start, start + len - 1), Role::Block { start, end: start + len - 1 }));
                }
            }
        }
    }
    let mut seen = BTreeSet::new();
    out.retain(|(c, _)| seen.insert(c.mask));
    out
}

/// Order that serves `set` directly: its members first (or as a leading
/// block), the rest after, both ascending.
fn order_covering(set: Coalition) -> Vec<usize> {
    let mut order = set.indices();
    order.extend(set.complement().indices());
    order
}

/// Greedy randomized cover: repeatedly draw `candidates` random orders and
/// keep the one covering the most remaining sets (ties go to the
/// lexicographically smallest order) until nothing remains.
pub fn greedy_cover<R: Rng + ?Sized>(
    m: usize,
    method: ShapMethod,
    candidates: usize,
    rng: &mut R,
) -> Result<CoverPlan> {
    if candidates == 0 {
        return Err(Error::invalid("the number of candidate orders must be at least 1"));
    }
    let mut remaining: BTreeSet<u32> = required_sets(m, method)?.iter().map(|c| c.mask).collect();
    let mut orders = Vec::new();
    let mut assignment = BTreeMap::new();
    let mut perm: Vec<usize> = (0..m).collect();
    while !remaining.is_empty() {
        let mut best: Option<(usize, Vec<usize>)> = None;
        for _ in 0..candidates {
            perm.shuffle(rng);
            let score = covered_sets(&perm, method).iter().filter(|(c, _)| remaining.contains(&c.mask)).count();
            let better = match &best {
                None => true,
                Some((s, p)) => score > *s || (score == *s && perm < *p),
            };
            if better {
                best = Some((score, perm.clone()));
            }
        }
        let (score, mut chosen) = best.expect("at least one candidate");
        if score == 0 {
            // every random candidate missed; build one that serves the
            // smallest remaining set
            let first = *remaining.iter().next().expect("non-empty");
            chosen = order_covering(Coalition::new(first, m));
        }
        let idx = orders.len();
        for (set, role) in covered_sets(&chosen, method) {
            if remaining.remove(&set.mask) {
                assignment.insert(set.mask, Assignment { order: idx, role });
            }
        }
        orders.push(chosen);
    }
    if orders.is_empty() {
        // the ratio method at M = 2 needs no marginal, but still needs one
        // vine for the joint density
        orders.push((0..m).collect());
    }
    Ok(CoverPlan { m, method, orders, assignment })
}
