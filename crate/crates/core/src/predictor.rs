//! Future-period design and plug-in forecasts of dispersion measures.
//!
//! The future population is the most recent period's records, each repeated
//! `round(weight)` times (at least once). Unit predictions `x' beta + v_hat`
//! are back-transformed with `exp` and the measure is evaluated on the result.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmm::{dot, FittedModel};
use crate::measures::{MeasureKind, PriceVector, QuantileMethod};
use crate::panel::{Domain, TransactionPanel, UnitTags};

/// How each covariate is carried into the forecast period.
///
/// Every design column belongs to exactly one of the three groups.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariatePolicy {
    /// Lagged variables whose future values are already known, one value per region group.
    pub lagged_known: BTreeMap<String, Vec<f64>>,
    /// Held at the value of the latest observed record.
    pub frozen: Vec<String>,
    /// Copied from each last-period record.
    pub replicated: Vec<String>,
}

impl CovariatePolicy {
    /// Every column replicated from the last period.
    pub fn replicate_all(names: &[String]) -> Self {
        Self { replicated: names.to_vec(), ..Default::default() }
    }

    pub fn with_frozen(mut self, name: &str) -> Self {
        self.replicated.retain(|n| n != name);
        self.frozen.push(name.to_string());
        self
    }

    pub fn with_lagged(mut self, name: &str, per_group: Vec<f64>) -> Self {
        self.replicated.retain(|n| n != name);
        self.lagged_known.insert(name.to_string(), per_group);
        self
    }

    /// Check that the three lists partition `names`.
    pub fn validate(&self, names: &[String]) -> Result<()> {
        let mut seen = BTreeSet::new();
        let all = self
            .lagged_known
            .keys()
            .chain(self.frozen.iter())
            .chain(self.replicated.iter());
        for name in all {
            if !names.contains(name) {
                return Err(Error::InvalidArgument(format!("policy names unknown covariate `{name}`")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidArgument(format!("covariate `{name}` listed twice in policy")));
            }
        }
        if let Some(missing) = names.iter().find(|n| !seen.contains(n.as_str())) {
            return Err(Error::InvalidArgument(format!("covariate `{missing}` not covered by policy")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FutureRow {
    pub x: Vec<f64>,
    pub group: usize,
    pub tags: UnitTags,
    pub replication: usize,
}

/// Assumed covariates and replication counts for the forecast period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FutureFrame {
    pub covariate_names: Vec<String>,
    pub rows: Vec<FutureRow>,
    pub n_total: usize,
}

/// `round(w)` with a floor of one, so rare strata keep at least one unit.
pub fn replication_count(weight: f64) -> usize {
    (weight.round() as usize).max(1)
}

impl FutureFrame {
    pub fn new(covariate_names: Vec<String>, rows: Vec<FutureRow>) -> Result<Self> {
        let p = covariate_names.len();
        if let Some(r) = rows.iter().find(|r| r.x.len() != p) {
            return Err(Error::DimensionMismatch { expected: p, got: r.x.len() });
        }
        if rows.iter().any(|r| r.replication == 0) {
            return Err(Error::InvalidArgument("replication counts must be positive".into()));
        }
        let n_total = rows.iter().map(|r| r.replication).sum();
        Ok(Self { covariate_names, rows, n_total })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Repeat one value per row `replication` times, in row order.
    pub fn expand(&self, per_row: &[f64]) -> Vec<f64> {
        debug_assert_eq!(per_row.len(), self.rows.len());
        let mut out = Vec::with_capacity(self.n_total);
        for (row, &v) in self.rows.iter().zip(per_row) {
            out.extend(std::iter::repeat_n(v, row.replication));
        }
        out
    }

    /// Row index of every expanded unit.
    pub fn unit_rows(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_total);
        for (i, row) in self.rows.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, row.replication));
        }
        out
    }

    /// Expanded units count falling in a domain.
    pub fn domain_size(&self, domain: &Domain) -> usize {
        self.rows.iter().filter(|r| domain.contains(&r.tags)).map(|r| r.replication).sum()
    }

    /// Unit predictions on the log scale, one per row.
    pub fn predict_rows(&self, model: &FittedModel) -> Result<Vec<f64>> {
        if model.beta.len() != self.covariate_names.len() {
            return Err(Error::DimensionMismatch {
                expected: self.covariate_names.len(),
                got: model.beta.len(),
            });
        }
        self.rows.iter().map(|r| model.predict_unit(&r.x, r.group)).collect()
    }
}

/// One future row per last-period record, covariates carried per `policy`.
pub fn build_future_frame(panel: &TransactionPanel, policy: &CovariatePolicy) -> Result<FutureFrame> {
    let names = panel.design.names().to_vec();
    policy.validate(&names)?;
    let last = panel
        .last_year()
        .ok_or_else(|| Error::NoBasePeriod("panel has no records".into()))?;
    let base: Vec<usize> = (0..panel.len()).filter(|&i| panel.year[i] == last).collect();
    if base.is_empty() {
        return Err(Error::NoBasePeriod(format!("no records in year {last}")));
    }
    // latest record: highest month, ties resolved by row order
    let latest = *base
        .iter()
        .max_by_key(|&&i| (panel.month[i], i))
        .expect("base period is nonempty");

    let col = |name: &str| names.iter().position(|n| n == name).expect("validated");
    let frozen: Vec<(usize, f64)> = policy
        .frozen
        .iter()
        .map(|n| {
            let j = col(n);
            (j, panel.design.row(latest)[j])
        })
        .collect();
    let mut lagged = Vec::new();
    for (name, values) in &policy.lagged_known {
        if values.len() != panel.n_groups {
            return Err(Error::InvalidArgument(format!(
                "lagged covariate `{name}` has {} values for {} regions",
                values.len(),
                panel.n_groups
            )));
        }
        lagged.push((col(name), values));
    }

    let rows = base
        .iter()
        .map(|&i| {
            let mut x = panel.design.row(i).to_vec();
            let g = panel.group[i];
            for &(j, v) in &frozen {
                x[j] = v;
            }
            for (j, values) in &lagged {
                x[*j] = values[g];
            }
            FutureRow { x, group: g, tags: panel.tags[i], replication: replication_count(panel.weight[i]) }
        })
        .collect();
    FutureFrame::new(names, rows)
}

/// Measures for every (measure, domain) pair on one realisation of the future
/// log prices; `None` marks a missing cell.
///
/// `log_units` holds one value per expanded unit, in [`FutureFrame::unit_rows`] order.
/// The result is indexed `[measure][domain]`.
pub fn evaluate_cells(
    frame: &FutureFrame,
    log_units: &[f64],
    measures: &[MeasureKind],
    domains: &[Domain],
    method: QuantileMethod,
) -> Vec<Vec<Option<f64>>> {
    debug_assert_eq!(log_units.len(), frame.n_total);
    let mut out = vec![vec![None; domains.len()]; measures.len()];
    for (d, domain) in domains.iter().enumerate() {
        let mut prices = Vec::with_capacity(frame.domain_size(domain));
        let mut k = 0;
        for row in &frame.rows {
            let take = domain.contains(&row.tags);
            for _ in 0..row.replication {
                if take {
                    prices.push(log_units[k].exp());
                }
                k += 1;
            }
        }
        let Ok(pv) = PriceVector::new(prices) else { continue };
        for (m, kind) in measures.iter().enumerate() {
            out[m][d] = pv.measure(*kind, method).ok();
        }
    }
    out
}

/// Plug-in forecasts `theta(exp(Y_hat))` for every (measure, domain) pair.
pub fn plug_in_cells(
    model: &FittedModel,
    frame: &FutureFrame,
    measures: &[MeasureKind],
    domains: &[Domain],
    method: QuantileMethod,
) -> Result<Vec<Vec<Option<f64>>>> {
    let per_row = frame.predict_rows(model)?;
    Ok(evaluate_cells(frame, &frame.expand(&per_row), measures, domains, method))
}

/// Plug-in forecast of a single measure in a single domain.
pub fn plug_in_forecast(
    model: &FittedModel,
    frame: &FutureFrame,
    kind: MeasureKind,
    domain: &Domain,
    method: QuantileMethod,
) -> Result<f64> {
    let mut prices = Vec::new();
    for row in frame.rows.iter().filter(|r| domain.contains(&r.tags)) {
        let price = (dot(&row.x, &model.beta) + model.v_hat[row.group]).exp();
        prices.extend(std::iter::repeat_n(price, row.replication));
    }
    if prices.is_empty() {
        return Err(Error::EmptySample);
    }
    PriceVector::new(prices)?.measure(kind, method)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{Design, Region, Sections};

    fn model(p: usize, groups: usize) -> FittedModel {
        FittedModel {
            covariate_names: (0..p).map(|j| format!("x{j}")).collect(),
            beta: vec![0.0; p],
            sigma2_v: 0.0,
            sigma2_e: 1.0,
            v_hat: vec![0.0; groups],
            reml_loglik: 0.0,
            converged: true,
            at_boundary: false,
            iterations: 0,
            gradient: 0.0,
            objective_trace: vec![],
        }
    }

    fn toy_panel(weights: Vec<f64>) -> TransactionPanel {
        let n = weights.len() + 2;
        let names = vec!["one".to_string(), "ppi".to_string(), "income".to_string()];
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![1.0, 100.0 + i as f64, 10.0 * i as f64]).collect();
        let design = Design::from_rows(names, &rows).unwrap();
        let mut year = vec![2022, 2022];
        year.extend(std::iter::repeat_n(2023, weights.len()));
        let mut w = vec![1.0, 1.0];
        w.extend(weights);
        let tags = (0..n)
            .map(|i| UnitTags::market(if i % 2 == 0 { Region::South } else { Region::West }, Sections::Single, None).unwrap())
            .collect();
        let group = (0..n).map(|i| if i % 2 == 0 { 2 } else { 3 }).collect();
        TransactionPanel::new(design, vec![0.0; n], group, 5, year, w, tags).unwrap()
    }

    #[test]
    fn replication_rounding() {
        let frame = build_future_frame(
            &toy_panel(vec![2.4, 0.3, 1.5]),
            &CovariatePolicy::replicate_all(&["one".into(), "ppi".into(), "income".into()]),
        )
        .unwrap();
        let r: Vec<usize> = frame.rows.iter().map(|r| r.replication).collect();
        assert_eq!(r, vec![2, 1, 2]);
        assert_eq!(frame.n_total, 5);
    }

    #[test]
    fn unit_weights_give_last_period_count() {
        let frame = build_future_frame(
            &toy_panel(vec![1.0; 4]),
            &CovariatePolicy::replicate_all(&["one".into(), "ppi".into(), "income".into()]),
        )
        .unwrap();
        assert_eq!(frame.n_total, 4);
        assert!(frame.rows.iter().all(|r| r.replication == 1));
    }

    #[test]
    fn frozen_and_lagged_columns() {
        let names: Vec<String> = vec!["one".into(), "ppi".into(), "income".into()];
        let panel = toy_panel(vec![1.0; 3]);
        let policy = CovariatePolicy::replicate_all(&names)
            .with_frozen("ppi")
            .with_lagged("income", vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let frame = build_future_frame(&panel, &policy).unwrap();
        // last record of the last period is row 4 with ppi 104
        assert!(frame.rows.iter().all(|r| r.x[1] == 104.0));
        for r in &frame.rows {
            assert_eq!(r.x[2], [1.0, 2.0, 3.0, 4.0, 5.0][r.group]);
        }
    }

    #[test]
    fn policy_partition_is_enforced() {
        let names: Vec<String> = vec!["a".into(), "b".into()];
        assert!(CovariatePolicy::replicate_all(&names).validate(&names).is_ok());
        let twice = CovariatePolicy { frozen: vec!["a".into()], replicated: names.clone(), ..Default::default() };
        assert!(twice.validate(&names).is_err());
        let short = CovariatePolicy { replicated: vec!["a".into()], ..Default::default() };
        assert!(short.validate(&names).is_err());
        let unknown = CovariatePolicy::replicate_all(&names).with_frozen("c");
        assert!(unknown.validate(&names).is_err());
    }

    #[test]
    fn empty_last_period_rejected() {
        let design = Design::new(vec!["one".into()], vec![]).unwrap();
        let panel = TransactionPanel::simple(design, vec![], vec![], 1).unwrap();
        let err = build_future_frame(&panel, &CovariatePolicy::replicate_all(&["one".into()])).unwrap_err();
        assert!(matches!(err, Error::NoBasePeriod(_)));
    }

    #[test]
    fn zero_model_forecasts_unit_prices() {
        let frame = build_future_frame(
            &toy_panel(vec![3.0, 2.0]),
            &CovariatePolicy::replicate_all(&["one".into(), "ppi".into(), "income".into()]),
        )
        .unwrap();
        let m = model(3, 5);
        let method = QuantileMethod::LinearInterpolation;
        assert_eq!(plug_in_forecast(&m, &frame, MeasureKind::Sd, &Domain::Population, method).unwrap(), 0.0);
        assert_eq!(plug_in_forecast(&m, &frame, MeasureKind::Qdr, &Domain::Population, method).unwrap(), 1.0);
    }

    #[test]
    fn single_profile_replicated() {
        let tags = UnitTags::market(Region::Midwest, Sections::Double, None).unwrap();
        let frame = FutureFrame::new(
            vec!["a".into()],
            vec![FutureRow { x: vec![2.0], group: 1, tags, replication: 5 }],
        )
        .unwrap();
        let mut m = model(1, 5);
        m.beta = vec![1.3];
        m.v_hat[1] = 0.2;
        let cells = plug_in_cells(&m, &frame, &MeasureKind::ALL, &[Domain::Population], QuantileMethod::LeftInverse)
            .unwrap();
        for (k, kind) in MeasureKind::ALL.iter().enumerate() {
            let expected = if matches!(kind, MeasureKind::Qdr | MeasureKind::Ddr) { 1.0 } else { 0.0 };
            assert!((cells[k][0].unwrap() - expected).abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn empty_domain_is_missing() {
        let tags = UnitTags::market(Region::Midwest, Sections::Double, None).unwrap();
        let frame = FutureFrame::new(vec!["a".into()], vec![FutureRow { x: vec![2.0], group: 1, tags, replication: 2 }]).unwrap();
        let m = model(1, 5);
        let sub1 = "sub1".parse::<Domain>().unwrap();
        assert!(plug_in_forecast(&m, &frame, MeasureKind::Iqr, &sub1, QuantileMethod::LeftInverse).is_err());
        let cells = plug_in_cells(&m, &frame, &[MeasureKind::Iqr], &[sub1], QuantileMethod::LeftInverse).unwrap();
        assert_eq!(cells[0][0], None);
    }
}
