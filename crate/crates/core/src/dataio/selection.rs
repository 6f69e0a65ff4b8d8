//! Covariate selection for the fixed-effects design.
//!
//! Five steps, each recorded in a [`SelectionTrace`]:
//! 1. each positive continuous covariate is kept raw or logged, whichever
//!    correlates more strongly with the log price;
//! 2. continuous covariates with `|r| < r_min` are screened out;
//! 3. of any pair with `|r| > r_pair_max` the one less correlated with the
//!    response is dropped;
//! 4. exhaustive best subset by adjusted R² over the remaining units
//!    (continuous terms, binaries and whole categorical blocks);
//! 5. backward elimination of single columns by Freedman-Lane permutation
//!    t-tests until every p-value is at most `alpha`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{expand_block, numeric_values, Column, DesignSpec, NumericTerm, RawDataset, SECTIONS_BLOCK, YEAR_BLOCK};
use crate::error::{Error, Result};
use crate::rng::{scope_hash, stream, Substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionOptions {
    pub r_min: f64,
    pub r_pair_max: f64,
    pub n_perm: usize,
    pub alpha: f64,
    pub subset_cap: usize,
    pub seed: u64,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self { r_min: 0.4, r_pair_max: 0.8, n_perm: 200, alpha: 0.05, subset_cap: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformChoice {
    pub column: String,
    pub r_raw: f64,
    pub r_log: Option<f64>,
    pub log: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollinearDrop {
    pub dropped: String,
    pub kept: String,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationStep {
    pub p_values: Vec<(String, f64)>,
    pub removed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub transforms: Vec<TransformChoice>,
    pub screened_out: Vec<(String, f64)>,
    pub collinear_dropped: Vec<CollinearDrop>,
    pub units: Vec<String>,
    pub best_subset: Vec<String>,
    pub best_adj_r2: f64,
    pub elimination: Vec<EliminationStep>,
    /// Final design columns, intercept excluded.
    pub selected_columns: Vec<String>,
    pub spec: DesignSpec,
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone)]
enum UnitKind {
    Numeric(NumericTerm),
    Block(String),
}

#[derive(Debug, Clone)]
struct Unit {
    label: String,
    kind: UnitKind,
    columns: Vec<(String, Vec<f64>)>,
}

/// Run all five steps on `ds`.
pub fn select_variables(ds: &RawDataset, opts: &SelectionOptions) -> Result<SelectionTrace> {
    if opts.n_perm == 0 || !(0.0..1.0).contains(&opts.alpha) {
        return Err(Error::InvalidArgument("n_perm must be positive and alpha in [0, 1)".into()));
    }
    ds.validate()?;
    let y = &ds.log_price;

    let mut transforms = Vec::new();
    let mut continuous: Vec<(NumericTerm, Vec<f64>, f64)> = Vec::new();
    let mut units: Vec<Unit> = Vec::new();
    for (name, col) in &ds.covariates {
        match col {
            Column::Numeric(v) if ds.binary.contains(name) => {
                let term = NumericTerm::raw(name);
                units.push(Unit { label: name.clone(), kind: UnitKind::Numeric(term), columns: vec![(name.clone(), v.clone())] });
            }
            Column::Numeric(v) => {
                let r_raw = pearson(v, y);
                let r_log = v.iter().all(|x| *x > 0.0).then(|| {
                    let logged: Vec<f64> = v.iter().map(|x| x.ln()).collect();
                    pearson(&logged, y)
                });
                let log = r_log.is_some_and(|rl| rl.abs() > r_raw.abs());
                transforms.push(TransformChoice { column: name.clone(), r_raw, r_log, log });
                let term = NumericTerm { column: name.clone(), log };
                let values = numeric_values(ds, &term)?;
                continuous.push((term, values, if log { r_log.unwrap_or(0.0) } else { r_raw }));
            }
            Column::Categorical(_) => {}
        }
    }

    let mut screened_out = Vec::new();
    continuous.retain(|(t, _, r)| {
        let keep = r.abs() >= opts.r_min;
        if !keep {
            screened_out.push((t.design_name(), *r));
        }
        keep
    });

    // strongest first; a candidate too close to an already kept one goes
    continuous.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()));
    let mut kept: Vec<(NumericTerm, Vec<f64>, f64)> = Vec::new();
    let mut collinear_dropped = Vec::new();
    for cand in continuous {
        let clash = kept.iter().map(|k| (k, pearson(&k.1, &cand.1))).find(|(_, r)| r.abs() > opts.r_pair_max);
        match clash {
            Some((k, r)) => collinear_dropped.push(CollinearDrop { dropped: cand.0.design_name(), kept: k.0.design_name(), r }),
            None => kept.push(cand),
        }
    }
    for (term, values, _) in kept {
        let label = term.design_name();
        units.insert(0, Unit { label: label.clone(), kind: UnitKind::Numeric(term), columns: vec![(label, values)] });
    }
    // restore a stable order: continuous by dataset order first
    units.sort_by_key(|u| match &u.kind {
        UnitKind::Numeric(t) => ds.covariates.iter().position(|(n, _)| *n == t.column).unwrap_or(usize::MAX),
        UnitKind::Block(_) => usize::MAX,
    });
    let mut blocks = vec![SECTIONS_BLOCK.to_string()];
    blocks.extend(ds.covariates.iter().filter(|(_, c)| matches!(c, Column::Categorical(_))).map(|(n, _)| n.clone()));
    blocks.push(YEAR_BLOCK.to_string());
    for b in blocks {
        let columns = expand_block(ds, &b)?;
        if !columns.is_empty() {
            units.push(Unit { label: b.clone(), kind: UnitKind::Block(b), columns });
        }
    }
    if units.len() > opts.subset_cap {
        return Err(Error::Selection(format!(
            "{} candidate units exceed the exhaustive search cap of {}",
            units.len(),
            opts.subset_cap
        )));
    }

    let (mask, best_adj_r2) = best_subset(&units, y)?;
    let chosen: Vec<&Unit> = units.iter().enumerate().filter(|(k, _)| mask & (1 << k) != 0).map(|(_, u)| u).collect();

    let mut columns: Vec<(String, Vec<f64>)> = chosen.iter().flat_map(|u| u.columns.iter().cloned()).collect();
    let mut elimination = Vec::new();
    let scope = scope_hash("selection");
    for step in 0u64.. {
        if columns.is_empty() {
            break;
        }
        let data: Vec<Vec<f64>> = columns.iter().map(|(_, c)| c.clone()).collect();
        let p = permutation_p_values(&data, y, opts.n_perm, opts.seed, scope ^ (step << 40))?;
        let (worst, &pmax) = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).expect("nonempty");
        let named: Vec<(String, f64)> = columns.iter().map(|(n, _)| n.clone()).zip(p.iter().copied()).collect();
        if pmax > opts.alpha {
            let removed = columns.remove(worst).0;
            elimination.push(EliminationStep { p_values: named, removed: Some(removed) });
        } else {
            elimination.push(EliminationStep { p_values: named, removed: None });
            break;
        }
    }
    let selected_columns: Vec<String> = columns.iter().map(|(n, _)| n.clone()).collect();

    let mut spec = DesignSpec { intercept: true, numeric: Vec::new(), categorical: Vec::new(), drop: Vec::new() };
    for u in &chosen {
        let alive: Vec<&String> = u.columns.iter().map(|(n, _)| n).filter(|n| selected_columns.contains(n)).collect();
        if alive.is_empty() {
            continue;
        }
        match &u.kind {
            UnitKind::Numeric(t) => spec.numeric.push(t.clone()),
            UnitKind::Block(b) => {
                spec.categorical.push(b.clone());
                spec.drop.extend(u.columns.iter().map(|(n, _)| n).filter(|n| !selected_columns.contains(n)).cloned());
            }
        }
    }

    Ok(SelectionTrace {
        transforms,
        screened_out,
        collinear_dropped,
        units: units.iter().map(|u| u.label.clone()).collect(),
        best_subset: chosen.iter().map(|u| u.label.clone()).collect(),
        best_adj_r2,
        elimination,
        selected_columns,
        spec,
    })
}

/// Mask of the unit subset with the highest adjusted R², ties to the lower mask.
fn best_subset(units: &[Unit], y: &[f64]) -> Result<(u64, f64)> {
    let n = y.len();
    let cols: Vec<&Vec<f64>> = units.iter().flat_map(|u| u.columns.iter().map(|(_, c)| c)).collect();
    let q = cols.len();
    let mut owner = Vec::with_capacity(q);
    for (k, u) in units.iter().enumerate() {
        owner.extend(std::iter::repeat_n(k, u.columns.len()));
    }
    let centred: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / n as f64;
            c.iter().map(|x| x - m).collect()
        })
        .collect();
    let my = y.iter().sum::<f64>() / n as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - my).collect();
    let tss: f64 = yc.iter().map(|v| v * v).sum();
    if tss <= 0.0 {
        return Err(Error::Selection("response has no variation".into()));
    }
    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut cy = DVector::<f64>::zeros(q);
    for a in 0..q {
        cy[a] = crate::lmm::dot(&centred[a], &yc);
        for b in a..q {
            let v = crate::lmm::dot(&centred[a], &centred[b]);
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    let adj = |mask: u64| -> Option<f64> {
        let idx: Vec<usize> = (0..q).filter(|&j| mask & (1 << owner[j]) != 0).collect();
        let k = idx.len();
        if k + 1 >= n {
            return None;
        }
        let rss = if k == 0 {
            tss
        } else {
            let a = DMatrix::from_fn(k, k, |r, c| gram[(idx[r], idx[c])]);
            let b = DVector::from_fn(k, |r, _| cy[idx[r]]);
            let diag_max = (0..k).map(|r| a[(r, r)]).fold(0.0, f64::max);
            let chol = a.cholesky()?;
            let l = chol.l_dirty();
            if (0..k).any(|r| l[(r, r)] * l[(r, r)] < 1e-10 * diag_max) {
                return None;
            }
            tss - b.dot(&chol.solve(&b))
        };
        Some(1.0 - (rss / (n - k - 1) as f64) / (tss / (n - 1) as f64))
    };
    let total = 1u64 << units.len();
    (0..total)
        .into_par_iter()
        .filter_map(|m| adj(m).map(|a| (m, a)))
        .reduce_with(|x, y| if y.1 > x.1 || (y.1 == x.1 && y.0 < x.0) { y } else { x })
        .ok_or_else(|| Error::Selection("no estimable subset".into()))
}

/// Ordinary least squares pieces on norm-scaled columns plus an intercept.
struct Ols {
    x: DMatrix<f64>,
    ainv: DMatrix<f64>,
}

impl Ols {
    fn new(columns: &[&Vec<f64>], n: usize) -> Result<Self> {
        let p = columns.len() + 1;
        let mut x = DMatrix::<f64>::zeros(n, p);
        for i in 0..n {
            x[(i, 0)] = 1.0 / (n as f64).sqrt();
        }
        for (j, c) in columns.iter().enumerate() {
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::SingularDesign("all-zero column in selection".into()));
            }
            for i in 0..n {
                x[(i, j + 1)] = c[i] / norm;
            }
        }
        let ata = x.tr_mul(&x);
        let ainv = ata
            .cholesky()
            .ok_or_else(|| Error::SingularDesign("collinear columns in selection".into()))?
            .inverse();
        Ok(Self { x, ainv })
    }

    fn fitted(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.x * (&self.ainv * self.x.tr_mul(y))
    }
}

/// Freedman-Lane permutation p-values of every column in the model with an
/// intercept and all `columns`.
///
/// For column `j` the reduced-model residuals are permuted and added back to
/// the reduced fit; `p = (1 + #{|t*| >= |t|}) / (1 + n_perm)`.
pub fn permutation_p_values(columns: &[Vec<f64>], y: &[f64], n_perm: usize, seed: u64, scope: u64) -> Result<Vec<f64>> {
    let n = y.len();
    let p = columns.len() + 1;
    if p >= n {
        return Err(Error::InsufficientSample(format!("{n} records for {p} coefficients")));
    }
    let refs: Vec<&Vec<f64>> = columns.iter().collect();
    let full = Ols::new(&refs, n)?;
    let yv = DVector::from_column_slice(y);
    let df = (n - p) as f64;
    let t_stat = |yy: &DVector<f64>, j: usize| -> f64 {
        let xty = full.x.tr_mul(yy);
        let beta = &full.ainv * &xty;
        let rss = (yy.dot(yy) - beta.dot(&xty)).max(0.0);
        let se = (rss / df * full.ainv[(j, j)]).sqrt();
        if se > 0.0 { beta[j] / se } else { f64::INFINITY.copysign(beta[j]) }
    };
    (0..columns.len())
        .into_par_iter()
        .map(|j| {
            let others: Vec<&Vec<f64>> = columns.iter().enumerate().filter(|(k, _)| *k != j).map(|(_, c)| c).collect();
            let reduced = Ols::new(&others, n)?;
            let fit = reduced.fitted(&yv);
            let resid = &yv - &fit;
            let t_obs = t_stat(&yv, j + 1).abs();
            let mut rng = stream(seed, scope, j as u64, Substream::Permutation);
            let mut perm: Vec<usize> = (0..n).collect();
            let mut extreme = 0usize;
            let mut ystar = DVector::<f64>::zeros(n);
            for _ in 0..n_perm {
                perm.shuffle(&mut rng);
                for i in 0..n {
                    ystar[i] = fit[i] + resid[perm[i]];
                }
                if t_stat(&ystar, j + 1).abs() >= t_obs * (1.0 - 1e-12) {
                    extreme += 1;
                }
            }
            Ok((1 + extreme) as f64 / (1 + n_perm) as f64)
        })
        .collect()
}
