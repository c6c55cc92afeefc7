//! Tensor-product spline basis of the m-th order highly adaptive lasso.
//!
//! A univariate piece of order `o` with knot `u` is `(x - u)_+^o / o!`, and
//! `I(x >= u)` for `o = 0`; repeated integration of the indicator produces
//! exactly this family, so the closed form and the integration recursion agree
//! without any rescaling. Basis functions are products of univariate pieces
//! over a coordinate subset, evaluated in shifted coordinates where every
//! column's observed minimum sits at the origin.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{HalError, Result};

/// Highest supported smoothness order.
pub const MAX_ORDER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnivariateSpline {
    pub order: u32,
    pub knot: f64,
}

impl UnivariateSpline {
    pub fn new(order: u32, knot: f64) -> Self {
        Self { order, knot }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        eval_univariate(self.order, self.knot, x)
    }
}

fn factorial(o: u32) -> f64 {
    (1..=o).map(f64::from).product()
}

/// `I(x >= knot)` for order 0, `(x - knot)_+^order / order!` otherwise.
#[inline]
pub fn eval_univariate(order: u32, knot: f64, x: f64) -> f64 {
    if x < knot {
        0.0
    } else if order == 0 {
        1.0
    } else {
        (x - knot).powi(order as i32) / factorial(order)
    }
}

/// A product of univariate splines over the coordinates in `terms`; the empty
/// product is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFunction {
    pub id: usize,
    pub terms: BTreeMap<usize, UnivariateSpline>,
}

impl BasisFunction {
    pub fn intercept() -> Self {
        Self {
            id: 0,
            terms: BTreeMap::new(),
        }
    }

    pub fn new(terms: BTreeMap<usize, UnivariateSpline>) -> Self {
        Self { id: 0, terms }
    }

    pub fn is_intercept(&self) -> bool {
        self.terms.is_empty()
    }

    /// Evaluation without bounds checks on `x`; callers guarantee the length.
    #[inline]
    fn eval_unchecked(&self, x: &[f64]) -> f64 {
        let mut v = 1.0;
        for (&j, s) in &self.terms {
            v *= s.eval(x[j]);
        }
        v
    }
}

/// Evaluates `b` at a point given in shifted (basis) coordinates.
pub fn eval_basis(b: &BasisFunction, x: &[f64]) -> Result<f64> {
    if let Some((&j, _)) = b.terms.iter().next_back() {
        if j >= x.len() {
            return Err(HalError::Dimension(format!(
                "basis uses coordinate {j} but point has {} coordinates",
                x.len()
            )));
        }
    }
    Ok(b.eval_unchecked(x))
}

/// Integrates `b` coordinate-wise over `(z_j, x_j]` for every `j` in
/// `smooth_set`, where `z_j` is `new_knots[j]` or 0 when absent.
///
/// For a piece with knot `u` and a lower limit `z <= u` the result keeps knot
/// `u` and gains one order. A lower limit above the knot is only representable
/// for an indicator, which becomes `(x - z)_+`. `upper[j]` bounds the admissible
/// knots for coordinate `j`.
pub fn integrate_basis(
    b: &BasisFunction,
    smooth_set: &[usize],
    new_knots: &BTreeMap<usize, f64>,
    upper: &[f64],
) -> Result<BasisFunction> {
    let mut out = b.clone();
    for &j in smooth_set {
        let term = out.terms.get_mut(&j).ok_or_else(|| {
            HalError::InvalidInput(format!("coordinate {j} is not an active coordinate of the basis"))
        })?;
        let z = new_knots.get(&j).copied().unwrap_or(0.0);
        let hi = *upper
            .get(j)
            .ok_or_else(|| HalError::Dimension(format!("no upper bound for coordinate {j}")))?;
        if !(0.0..=hi).contains(&z) {
            return Err(HalError::Domain(format!("knot {z} outside [0, {hi}] for coordinate {j}")));
        }
        if z <= term.knot {
            term.order += 1;
        } else if term.order == 0 {
            *term = UnivariateSpline::new(1, z);
        } else {
            return Err(HalError::Domain(format!(
                "lower limit {z} above knot {} of an order-{} piece is not a truncated power",
                term.knot, term.order
            )));
        }
    }
    if let Some(&j) = new_knots.keys().find(|j| !smooth_set.contains(j)) {
        return Err(HalError::InvalidInput(format!(
            "knot given for coordinate {j} which is not being smoothed"
        )));
    }
    Ok(out)
}

/// Caps and switches for [`enumerate_basis`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisCaps {
    pub max_interaction_degree: usize,
    /// `None` keeps every observed knot.
    pub max_knots_per_subset: Option<usize>,
    /// Shift each column so its observed minimum is the origin.
    #[serde(default = "default_true")]
    pub shift_to_origin: bool,
    /// Drop all-zero columns and columns identical on the data to an earlier one.
    #[serde(default = "default_true")]
    pub dedup: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BasisCaps {
    fn default() -> Self {
        Self {
            max_interaction_degree: usize::MAX,
            max_knots_per_subset: None,
            shift_to_origin: true,
            dedup: true,
        }
    }
}

impl BasisCaps {
    pub fn with_degree(mut self, d: usize) -> Self {
        self.max_interaction_degree = d;
        self
    }

    pub fn with_knots(mut self, knots: Option<usize>) -> Self {
        self.max_knots_per_subset = knots;
        self
    }
}

/// Ordered basis list with the coordinate frame it was built in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisDictionary {
    pub basis_list: Vec<BasisFunction>,
    pub order: usize,
    pub covariate_count: usize,
    /// Per-column origin subtracted before evaluation.
    pub origins: Vec<f64>,
    /// Per-column maximum in shifted coordinates.
    pub upper: Vec<f64>,
    pub knot_source: String,
}

impl BasisDictionary {
    pub fn len(&self) -> usize {
        self.basis_list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis_list.is_empty()
    }

    pub fn intercept_index(&self) -> Option<usize> {
        self.basis_list.iter().position(BasisFunction::is_intercept)
    }

    /// Maps a raw observation into basis coordinates.
    pub fn shift(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.origins).map(|(x, o)| x - o).collect()
    }

    /// Evaluates every basis function at one raw observation.
    pub fn eval_row(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.covariate_count {
            return Err(HalError::Dimension(format!(
                "point has {} coordinates, dictionary expects {}",
                raw.len(),
                self.covariate_count
            )));
        }
        let x = self.shift(raw);
        Ok(self.basis_list.iter().map(|b| b.eval_unchecked(&x)).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let dict: Self = serde_json::from_str(s)?;
        if dict.basis_list.iter().enumerate().any(|(i, b)| b.id != i) {
            return Err(HalError::InvalidInput("basis ids must equal positions".into()));
        }
        Ok(dict)
    }
}

/// Builds the m-th order dictionary with knots at observed points.
///
/// For every coordinate subset `s` (up to the interaction cap) the continuous
/// coordinates receive an order vector in `{1..m}^s` (order 0 when `m = 0`).
/// Coordinates at order `m` may carry a free knot taken jointly from one
/// observation `X_i`; all other coordinates are anchored at knot 0. Binary
/// columns only ever appear as the indicator of their upper level.
pub fn enumerate_basis(data: &Dataset, m: usize, caps: &BasisCaps) -> Result<BasisDictionary> {
    if data.n() == 0 {
        return Err(HalError::EmptyDataset);
    }
    if m > MAX_ORDER {
        return Err(HalError::UnsupportedOrder(m));
    }
    if caps.max_interaction_degree == 0 || caps.max_knots_per_subset == Some(0) {
        return Err(HalError::InvalidInput("basis caps must be positive".into()));
    }
    let k = data.k();
    let meta = data.column_meta();
    let origins: Vec<f64> = meta
        .iter()
        .map(|c| if caps.shift_to_origin { c.min } else { 0.0 })
        .collect();
    let upper: Vec<f64> = meta.iter().zip(&origins).map(|(c, o)| c.max - o).collect();
    let shifted: Vec<Vec<f64>> = (0..k)
        .map(|j| data.column(j).iter().map(|x| x - origins[j]).collect())
        .collect();

    let mut candidates = vec![BasisFunction::intercept()];
    let degree = caps.max_interaction_degree.min(k);
    for d in 1..=degree {
        for subset in combinations(k, d) {
            emit_subset(&subset, m, caps, data, &shifted, &upper, &mut candidates);
        }
    }

    let mut basis_list = if caps.dedup {
        dedup_on_data(candidates, &shifted, data.n())
    } else {
        candidates
    };
    for (i, b) in basis_list.iter_mut().enumerate() {
        b.id = i;
    }
    let knot_source = format!(
        "observed values (n = {}), max_knots_per_subset = {}, shift_to_origin = {}, dedup = {}",
        data.n(),
        caps.max_knots_per_subset
            .map_or_else(|| "all".to_string(), |c| c.to_string()),
        caps.shift_to_origin,
        caps.dedup
    );
    Ok(BasisDictionary {
        basis_list,
        order: m,
        covariate_count: k,
        origins,
        upper,
        knot_source,
    })
}

fn emit_subset(
    subset: &[usize],
    m: usize,
    caps: &BasisCaps,
    data: &Dataset,
    shifted: &[Vec<f64>],
    upper: &[f64],
    out: &mut Vec<BasisFunction>,
) {
    let meta = data.column_meta();
    // A constant column contributes nothing a smaller subset does not.
    if caps.dedup && subset.iter().any(|&j| meta[j].min == meta[j].max) {
        return;
    }
    let (binary, continuous): (Vec<usize>, Vec<usize>) =
        subset.iter().partition(|&&j| meta[j].is_binary);
    let mut fixed = BTreeMap::new();
    for &j in &binary {
        fixed.insert(j, UnivariateSpline::new(0, upper[j]));
    }
    // Observations at the upper level of every binary coordinate in the subset.
    let eligible: Vec<usize> = (0..data.n())
        .filter(|&i| binary.iter().all(|&j| shifted[j][i] == upper[j]))
        .collect();

    if continuous.is_empty() {
        out.push(BasisFunction::new(fixed));
        return;
    }

    let orders: Vec<Vec<u32>> = if m == 0 {
        vec![vec![0; continuous.len()]]
    } else {
        order_vectors(continuous.len(), m as u32)
    };
    for o in orders {
        let top: Vec<usize> = (0..continuous.len())
            .filter(|&t| m == 0 || o[t] == m as u32)
            .collect();
        // For m = 0 every coordinate carries a free knot; otherwise any subset
        // of the top-order coordinates may.
        let free_sets: Vec<Vec<usize>> = if m == 0 {
            vec![top.clone()]
        } else {
            power_set(&top)
        };
        for free in free_sets {
            let base: BTreeMap<usize, UnivariateSpline> = continuous
                .iter()
                .enumerate()
                .map(|(t, &j)| (j, UnivariateSpline::new(o[t], 0.0)))
                .chain(fixed.iter().map(|(&j, &s)| (j, s)))
                .collect();
            if free.is_empty() {
                out.push(BasisFunction::new(base));
                continue;
            }
            let free_cols: Vec<usize> = free.iter().map(|&t| continuous[t]).collect();
            let knots = candidate_knots(&free_cols, &eligible, shifted, m, caps.max_knots_per_subset);
            for kv in knots {
                let mut terms = base.clone();
                for (&j, &z) in free_cols.iter().zip(&kv) {
                    terms.insert(j, UnivariateSpline::new(o_for(m, &continuous, &o, j), z));
                }
                out.push(BasisFunction::new(terms));
            }
        }
    }
}

fn o_for(m: usize, continuous: &[usize], o: &[u32], j: usize) -> u32 {
    if m == 0 {
        0
    } else {
        o[continuous.iter().position(|&c| c == j).unwrap()]
    }
}

/// Unique knot vectors `X_i(cols)` over the eligible rows, thinned to `cap`
/// by taking evenly spaced ranks of the lexicographically sorted list.
fn candidate_knots(
    cols: &[usize],
    eligible: &[usize],
    shifted: &[Vec<f64>],
    m: usize,
    cap: Option<usize>,
) -> Vec<Vec<f64>> {
    let mut knots: Vec<Vec<f64>> = eligible
        .iter()
        .map(|&i| cols.iter().map(|&j| shifted[j][i]).collect::<Vec<f64>>())
        // For m >= 1 a zero knot coincides with the anchored piece.
        .filter(|kv: &Vec<f64>| m == 0 || kv.iter().all(|&z| z > 0.0))
        .collect();
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots.dedup();
    match cap {
        Some(c) if knots.len() > c => {
            let total = knots.len();
            (0..c)
                .map(|r| knots[((2 * r + 1) * total) / (2 * c)].clone())
                .collect()
        }
        _ => knots,
    }
}

fn dedup_on_data(candidates: Vec<BasisFunction>, shifted: &[Vec<f64>], n: usize) -> Vec<BasisFunction> {
    let columns: Vec<Vec<f64>> = candidates
        .par_iter()
        .map(|b| {
            let mut point = vec![0.0; shifted.len()];
            (0..n)
                .map(|i| {
                    for &j in b.terms.keys() {
                        point[j] = shifted[j][i];
                    }
                    b.eval_unchecked(&point)
                })
                .collect()
        })
        .collect();
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::with_capacity(candidates.len());
    let mut keep = Vec::with_capacity(candidates.len());
    for (b, col) in candidates.into_iter().zip(columns) {
        if !b.is_intercept() && col.iter().all(|&v| v == 0.0) {
            continue;
        }
        // +0.0 and -0.0 compare equal; normalize before hashing bits.
        let key: Vec<u64> = col.iter().map(|&v| (v + 0.0).to_bits()).collect();
        if let std::collections::hash_map::Entry::Vacant(e) = seen.entry(key) {
            e.insert(keep.len());
            keep.push(b);
        }
    }
    keep
}

fn combinations(k: usize, d: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(d);
    fn rec(start: usize, k: usize, d: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == d {
            out.push(cur.clone());
            return;
        }
        for j in start..k {
            cur.push(j);
            rec(j + 1, k, d, cur, out);
            cur.pop();
        }
    }
    rec(0, k, d, &mut cur, &mut out);
    out
}

fn order_vectors(len: usize, m: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|v| {
                (1..=m).map(move |o| {
                    let mut w = v.clone();
                    w.push(o);
                    w
                })
            })
            .collect();
    }
    out
}

fn power_set(items: &[usize]) -> Vec<Vec<usize>> {
    (0..(1usize << items.len()))
        .map(|mask| {
            items
                .iter()
                .enumerate()
                .filter(|(b, _)| mask & (1 << b) != 0)
                .map(|(_, &v)| v)
                .collect()
        })
        .collect()
}

/// Dense column-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
    intercept: Option<usize>,
}

impl DesignMatrix {
    pub fn from_columns(columns: Vec<Vec<f64>>, intercept: Option<usize>) -> Result<Self> {
        let n_cols = columns.len();
        let n_rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n_rows) {
            return Err(HalError::Dimension("ragged design columns".into()));
        }
        if intercept.is_some_and(|j| j >= n_cols) {
            return Err(HalError::Dimension("intercept index out of range".into()));
        }
        Ok(Self {
            n_rows,
            n_cols,
            data: columns.concat(),
            intercept,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Column holding the constant basis function, if any.
    pub fn intercept(&self) -> Option<usize> {
        self.intercept
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_rows..(j + 1) * self.n_rows]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.n_rows + i]
    }

    /// `X beta`.
    pub fn predict(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.n_cols {
            return Err(HalError::Dimension(format!(
                "coefficient vector has length {}, design has {} columns",
                beta.len(),
                self.n_cols
            )));
        }
        let mut out = vec![0.0; self.n_rows];
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (o, x) in out.iter_mut().zip(self.column(j)) {
                    *o += b * x;
                }
            }
        }
        Ok(out)
    }
}

/// Evaluates `dict` on every row of `data`; column `j` is basis id `j`.
pub fn design_matrix(data: &Dataset, dict: &BasisDictionary) -> Result<DesignMatrix> {
    if data.k() != dict.covariate_count {
        return Err(HalError::Dimension(format!(
            "dataset has {} covariates, dictionary expects {}",
            data.k(),
            dict.covariate_count
        )));
    }
    let n = data.n();
    let shifted: Vec<Vec<f64>> = (0..data.k())
        .map(|j| data.column(j).iter().map(|x| x - dict.origins[j]).collect())
        .collect();
    let columns: Vec<Vec<f64>> = dict
        .basis_list
        .par_iter()
        .map(|b| {
            let mut col = vec![1.0; n];
            for (&j, s) in &b.terms {
                for (c, &x) in col.iter_mut().zip(&shifted[j]) {
                    *c *= s.eval(x);
                }
            }
            col
        })
        .collect();
    DesignMatrix::from_columns(columns, dict.intercept_index())
}

/// L1 norm of the coefficients, i.e. the sectional variation norm of the
/// represented function; the intercept coefficient is skipped when
/// `exclude_intercept` is set.
pub fn sectional_variation_norm(beta: &[f64], intercept: Option<usize>, exclude_intercept: bool) -> f64 {
    beta.iter()
        .enumerate()
        .filter(|(j, _)| !(exclude_intercept && Some(*j) == intercept))
        .map(|(_, b)| b.abs())
        .sum()
}
