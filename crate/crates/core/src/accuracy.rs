//! RMSE and QAPE from bootstrap errors, and comparison against the shock-free reference.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bootstrap::ErrorPanel;
use crate::error::{Error, Result};
use crate::measures::{left_inverse_rank, MeasureKind};
use crate::panel::Domain;

/// `sqrt(mean(e^2))`; `None` for an empty vector.
pub fn rmse(errors: &[f64]) -> Option<f64> {
    if errors.is_empty() {
        return None;
    }
    Some((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

/// `inf{x : F(x) >= p}` for the ECDF `F` of `|e|`.
pub fn qape(errors: &[f64], p: f64) -> Option<f64> {
    if errors.is_empty() || !(p > 0.0 && p < 1.0) {
        return None;
    }
    let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    abs.sort_unstable_by(f64::total_cmp);
    Some(abs[left_inverse_rank(abs.len(), p) - 1])
}

/// QAPE at several orders sharing one sort.
pub fn qape_many(errors: &[f64], orders: &[f64]) -> Option<Vec<f64>> {
    if errors.is_empty() {
        return None;
    }
    let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    abs.sort_unstable_by(f64::total_cmp);
    Some(orders.iter().map(|&p| abs[left_inverse_rank(abs.len(), p) - 1]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Statistic {
    Rmse,
    Qape(f64),
}

impl Statistic {
    pub fn label(&self) -> String {
        match self {
            Statistic::Rmse => "RMSE".to_string(),
            Statistic::Qape(p) => format!("QAPE_{p}"),
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub scenario: String,
    pub measure: MeasureKind,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub rmse: f64,
    /// One value per report QAPE order.
    pub qape: Vec<f64>,
    pub n_effective: usize,
}

impl CellStats {
    pub fn get(&self, stat: Statistic, orders: &[f64]) -> Option<f64> {
        match stat {
            Statistic::Rmse => Some(self.rmse),
            Statistic::Qape(p) => orders.iter().position(|o| *o == p).map(|k| self.qape[k]),
        }
    }
}

/// Accuracy estimates per (scenario, measure, domain).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub reference: String,
    pub qape_orders: Vec<f64>,
    pub scenarios: Vec<String>,
    pub measures: Vec<MeasureKind>,
    pub domains: Vec<Domain>,
    pub cells: BTreeMap<CellKey, CellStats>,
}

impl AccuracyReport {
    pub fn statistics(&self) -> Vec<Statistic> {
        std::iter::once(Statistic::Rmse).chain(self.qape_orders.iter().map(|p| Statistic::Qape(*p))).collect()
    }

    pub fn cell(&self, scenario: &str, measure: MeasureKind, domain: Domain) -> Option<&CellStats> {
        self.cells.get(&CellKey { scenario: scenario.to_string(), measure, domain })
    }

    pub fn value(&self, scenario: &str, measure: MeasureKind, domain: Domain, stat: Statistic) -> Option<f64> {
        self.cell(scenario, measure, domain)?.get(stat, &self.qape_orders)
    }

    /// Cells in scenario, measure, domain order.
    pub fn ordered_keys(&self) -> Vec<CellKey> {
        let mut keys = Vec::new();
        for s in &self.scenarios {
            for &measure in &self.measures {
                for &domain in &self.domains {
                    let key = CellKey { scenario: s.clone(), measure, domain };
                    if self.cells.contains_key(&key) {
                        keys.push(key);
                    }
                }
            }
        }
        keys
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["scenario".to_string(), "measure".into(), "domain".into(), "n_effective".into(), "rmse".into()];
        header.extend(self.qape_orders.iter().map(|p| format!("qape_{p}")));
        out.write_record(&header)?;
        for key in self.ordered_keys() {
            let c = &self.cells[&key];
            let mut row = vec![
                key.scenario.clone(),
                key.measure.name().to_string(),
                key.domain.label(),
                c.n_effective.to_string(),
                c.rmse.to_string(),
            ];
            row.extend(c.qape.iter().map(|q| q.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Aggregate error panels into a report. Empty cells are left out.
pub fn aggregate(panels: &[ErrorPanel], qape_orders: &[f64], reference: &str) -> Result<AccuracyReport> {
    if qape_orders.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::InvalidArgument("QAPE orders must lie in (0, 1)".into()));
    }
    let first = panels.first().ok_or_else(|| Error::InvalidArgument("no error panels".into()))?;
    let mut cells = BTreeMap::new();
    for panel in panels {
        for (m, &measure) in panel.measures.iter().enumerate() {
            for (d, &domain) in panel.domains.iter().enumerate() {
                let errors = panel.cell_errors(m, d);
                let (Some(r), Some(q)) = (rmse(&errors), qape_many(&errors, qape_orders)) else { continue };
                cells.insert(
                    CellKey { scenario: panel.scenario.clone(), measure, domain },
                    CellStats { rmse: r, qape: q, n_effective: errors.len() },
                );
            }
        }
    }
    Ok(AccuracyReport {
        reference: reference.to_string(),
        qape_orders: qape_orders.to_vec(),
        scenarios: panels.iter().map(|p| p.scenario.clone()).collect(),
        measures: first.measures.clone(),
        domains: first.domains.clone(),
        cells,
    })
}

/// Ratio cut-offs for reading departures from the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub moderate: f64,
    pub high: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { moderate: 1.15, high: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Impact {
    Neutral,
    Moderate,
    High,
    /// No reference cell, or a zero reference with a nonzero value.
    Undefined,
}

impl Impact {
    pub fn name(self) -> &'static str {
        match self {
            Impact::Neutral => "neutral",
            Impact::Moderate => "moderate",
            Impact::High => "high",
            Impact::Undefined => "undefined",
        }
    }
}

impl Thresholds {
    /// Classify by `max(ratio, 1 / ratio)`, so drops count as departures too.
    pub fn classify(&self, ratio: Option<f64>) -> Impact {
        let Some(r) = ratio.filter(|r| r.is_finite() && *r > 0.0) else {
            return if ratio == Some(0.0) { Impact::High } else { Impact::Undefined };
        };
        let departure = r.max(1.0 / r);
        if departure <= self.moderate {
            Impact::Neutral
        } else if departure <= self.high {
            Impact::Moderate
        } else {
            Impact::High
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scenario: String,
    pub measure: MeasureKind,
    pub domain: Domain,
    pub statistic: Statistic,
    pub value: f64,
    pub reference: Option<f64>,
    pub ratio: Option<f64>,
    pub difference: Option<f64>,
    pub impact: Impact,
}

/// Ratio and difference of every statistic to the reference scenario's cell.
pub fn compare_to_reference(report: &AccuracyReport, thresholds: &Thresholds) -> Vec<ComparisonRow> {
    let mut rows = Vec::new();
    for key in report.ordered_keys() {
        let cell = &report.cells[&key];
        for stat in report.statistics() {
            let value = cell.get(stat, &report.qape_orders).expect("report statistic");
            let reference = report.value(&report.reference, key.measure, key.domain, stat);
            let ratio = reference.and_then(|r| {
                if r != 0.0 {
                    Some(value / r)
                } else if value == 0.0 {
                    Some(1.0)
                } else {
                    None
                }
            });
            rows.push(ComparisonRow {
                scenario: key.scenario.clone(),
                measure: key.measure,
                domain: key.domain,
                statistic: stat,
                value,
                reference,
                ratio,
                difference: reference.map(|r| value - r),
                impact: thresholds.classify(ratio),
            });
        }
    }
    rows
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scenario", "measure", "domain", "statistic", "value", "reference", "ratio", "difference", "impact"])?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.scenario.clone(),
            r.measure.name().to_string(),
            r.domain.label(),
            r.statistic.label(),
            r.value.to_string(),
            fmt(r.reference),
            fmt(r.ratio),
            fmt(r.difference),
            r.impact.name().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub scenario: String,
    pub measure: MeasureKind,
    pub domain: Domain,
    pub value: f64,
    pub reference: Option<f64>,
}

/// Long-format rows for one statistic: scenario on x, value on y, one series per measure.
pub fn plot_rows(report: &AccuracyReport, stat: Statistic) -> Vec<PlotRow> {
    report
        .ordered_keys()
        .into_iter()
        .filter_map(|key| {
            let value = report.cells[&key].get(stat, &report.qape_orders)?;
            Some(PlotRow {
                reference: report.value(&report.reference, key.measure, key.domain, stat),
                scenario: key.scenario,
                measure: key.measure,
                domain: key.domain,
                value,
            })
        })
        .collect()
}

pub fn write_plot_csv<W: Write>(rows: &[PlotRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scenario", "measure", "domain", "value", "reference"])?;
    for r in rows {
        out.write_record([
            r.scenario.clone(),
            r.measure.name().to_string(),
            r.domain.label(),
            r.value.to_string(),
            r.reference.map(|x| x.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
