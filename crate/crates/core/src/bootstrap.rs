//! Parametric bootstrap of forecast errors under shock-free and shocked futures.
//!
//! Iteration `b`:
//!
//! 1. draw region effects `v*` and residuals, regenerate the sample log prices
//!    `y* = X beta_hat + v* + e*`;
//! 2. refit the model on `y*` and rebuild the plug-in forecasts `theta_hat*`;
//! 3. generate future log prices `X_T beta_hat + v* + e*_T` with the same `v*`,
//!    apply the branch of each scenario drawn for `b`, and evaluate `theta*`;
//! 4. record `theta_hat* - theta*` per (measure, domain).
//!
//! Shocks enter step 3 only. The sample and future noise streams are keyed by
//! iteration alone, so `theta_hat*` is literally the same for every scenario and
//! all scenarios share the same shock-free future draw.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmm::{dot, FitOptions, FittedModel, ModelStructure};
use crate::measures::{MeasureKind, QuantileMethod};
use crate::panel::{Domain, TransactionPanel, UnitTags};
use crate::predictor::{evaluate_cells, plug_in_cells, FutureFrame};
use crate::rng::{scope_hash, stream, StreamRng, Substream};
use crate::scenarios::{apply_shock, branch_schedule, Branch, ShockScenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub iterations: usize,
    pub seed: u64,
    pub measures: Vec<MeasureKind>,
    pub domains: Vec<Domain>,
    pub qape_orders: Vec<f64>,
    pub quantile_method: QuantileMethod,
    /// Refit the variance components on every bootstrap sample. When false only
    /// the GLS coefficients and EBLUPs are recomputed at the original ratio.
    pub refit: bool,
    pub fit_options: FitOptions,
    /// Use the same region effects for sample and future. Switching this off
    /// exists only to measure what the coupling contributes.
    pub couple_region_effects: bool,
    /// Largest tolerated share of failed iterations.
    pub max_failure_rate: f64,
}

impl Default for BootstrapPlan {
    fn default() -> Self {
        Self {
            iterations: 2000,
            seed: 20_240_101,
            measures: MeasureKind::ALL.to_vec(),
            domains: Domain::standard(),
            qape_orders: vec![0.5, 0.99],
            quantile_method: QuantileMethod::LinearInterpolation,
            refit: true,
            fit_options: FitOptions::default(),
            couple_region_effects: true,
            max_failure_rate: 0.05,
        }
    }
}

impl BootstrapPlan {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("bootstrap needs at least one iteration".into()));
        }
        if self.measures.is_empty() || self.domains.is_empty() {
            return Err(Error::InvalidArgument("plan needs at least one measure and one domain".into()));
        }
        if self.qape_orders.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::InvalidArgument("QAPE orders must lie in (0, 1)".into()));
        }
        if self.qape_orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("QAPE orders must be strictly ascending".into()));
        }
        Ok(())
    }

    fn cells(&self) -> usize {
        self.measures.len() * self.domains.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IterationStatus {
    Ok,
    Failed(String),
}

/// One bootstrap iteration of one scenario; cells are `[measure * n_domains + domain]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub index: usize,
    pub branch: Branch,
    pub status: IterationStatus,
    pub theta_star: Vec<Option<f64>>,
    pub theta_hat_star: Vec<Option<f64>>,
}

impl IterationRecord {
    pub fn is_ok(&self) -> bool {
        self.status == IterationStatus::Ok
    }
}

/// Bootstrap errors of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorPanel {
    pub scenario: String,
    pub measures: Vec<MeasureKind>,
    pub domains: Vec<Domain>,
    pub iterations: Vec<IterationRecord>,
}

impl ErrorPanel {
    fn cell(&self, m: usize, d: usize) -> usize {
        m * self.domains.len() + d
    }

    /// `theta_hat* - theta*` of iteration `b`, `None` for missing cells and failed iterations.
    pub fn error(&self, b: usize, m: usize, d: usize) -> Option<f64> {
        let rec = &self.iterations[b];
        if !rec.is_ok() {
            return None;
        }
        let k = self.cell(m, d);
        Some(rec.theta_hat_star[k]? - rec.theta_star[k]?)
    }

    /// All available errors of a cell, in iteration order.
    pub fn cell_errors(&self, m: usize, d: usize) -> Vec<f64> {
        (0..self.iterations.len()).filter_map(|b| self.error(b, m, d)).collect()
    }

    pub fn failed(&self) -> usize {
        self.iterations.iter().filter(|r| !r.is_ok()).count()
    }

    /// Long-format CSV: iteration, branch, measure, domain, theta_star, theta_hat_star, error.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "branch", "measure", "domain", "theta_star", "theta_hat_star", "error"])?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (b, rec) in self.iterations.iter().enumerate() {
            let branch = match &rec.status {
                IterationStatus::Ok => rec.branch.to_string(),
                IterationStatus::Failed(_) => "failed".to_string(),
            };
            for (m, kind) in self.measures.iter().enumerate() {
                for (d, domain) in self.domains.iter().enumerate() {
                    let k = self.cell(m, d);
                    out.write_record([
                        rec.index.to_string(),
                        branch.clone(),
                        kind.name().to_string(),
                        domain.label(),
                        fmt(rec.theta_star[k]),
                        fmt(rec.theta_hat_star[k]),
                        fmt(self.error(b, m, d)),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Inverse of [`ErrorPanel::write_csv`].
    pub fn read_csv<R: Read>(scenario: &str, r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut measures: Vec<MeasureKind> = Vec::new();
        let mut domains: Vec<Domain> = Vec::new();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").to_string();
            let index: usize = field(0).parse().map_err(|_| Error::Data(format!("bad iteration `{}`", field(0))))?;
            let measure: MeasureKind = field(2).parse()?;
            let domain: Domain = field(3).parse()?;
            if !measures.contains(&measure) {
                measures.push(measure);
            }
            if !domains.contains(&domain) {
                domains.push(domain);
            }
            let num = |s: String| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| Error::Data(format!("bad number `{s}`")))
                }
            };
            rows.push((index, field(1), measure, domain, num(field(4))?, num(field(5))?));
        }
        let mut iterations: Vec<IterationRecord> = Vec::new();
        let cells = measures.len() * domains.len();
        for (index, branch, measure, domain, ts, ths) in rows {
            if iterations.last().is_none_or(|r| r.index != index) {
                let (branch, status) = match branch.as_str() {
                    "failed" => (Branch::ShockFree, IterationStatus::Failed("read from file".into())),
                    "none" => (Branch::ShockFree, IterationStatus::Ok),
                    s => {
                        let k: usize = s
                            .strip_prefix("sub")
                            .and_then(|k| k.parse().ok())
                            .filter(|k| *k >= 1)
                            .ok_or_else(|| Error::Data(format!("bad branch `{s}`")))?;
                        (Branch::Sub(k - 1), IterationStatus::Ok)
                    }
                };
                iterations.push(IterationRecord {
                    index,
                    branch,
                    status,
                    theta_star: vec![None; cells],
                    theta_hat_star: vec![None; cells],
                });
            }
            let m = measures.iter().position(|x| *x == measure).expect("seen");
            let d = domains.iter().position(|x| *x == domain).expect("seen");
            let rec = iterations.last_mut().expect("pushed");
            rec.theta_star[m * domains.len() + d] = ts;
            rec.theta_hat_star[m * domains.len() + d] = ths;
        }
        Ok(Self { scenario: scenario.to_string(), measures, domains, iterations })
    }
}

/// Bootstrap sample: regenerated log prices and the region effects behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStar {
    pub log_price: Vec<f64>,
    pub v_star: Vec<f64>,
}

/// Region effects `v* ~ N(0, sigma2_v)`, one per region.
pub fn draw_region_effects(model: &FittedModel, rng: &mut StreamRng) -> Vec<f64> {
    let sd = model.sigma2_v.max(0.0).sqrt();
    (0..model.v_hat.len()).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Regenerate sample log prices `x' beta_hat + v*[g] + e*`.
///
/// Draws `v*` first and then one residual per record, all from `rng`.
pub fn generate_sample_star(model: &FittedModel, panel: &TransactionPanel, rng: &mut StreamRng) -> SampleStar {
    let v_star = draw_region_effects(model, rng);
    let sd_e = model.sigma2_e.max(0.0).sqrt();
    let log_price = (0..panel.len())
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            dot(panel.design.row(i), &model.beta) + v_star[panel.group[i]] + sd_e * e
        })
        .collect();
    SampleStar { log_price, v_star }
}

/// Future log prices `x_T' beta_hat + v*[g] + e*_T`, one per expanded unit.
pub fn generate_future_star(model: &FittedModel, frame: &FutureFrame, v_star: &[f64], rng: &mut StreamRng) -> Vec<f64> {
    let mean: Vec<f64> = frame.rows.iter().map(|r| dot(&r.x, &model.beta)).collect();
    future_from_means(frame, &mean, v_star, model.sigma2_e, rng)
}

fn future_from_means(
    frame: &FutureFrame,
    row_mean: &[f64],
    v_star: &[f64],
    sigma2_e: f64,
    rng: &mut StreamRng,
) -> Vec<f64> {
    let sd_e = sigma2_e.max(0.0).sqrt();
    let mut out = Vec::with_capacity(frame.n_total);
    for (row, &mu) in frame.rows.iter().zip(row_mean) {
        let base = mu + v_star[row.group];
        for _ in 0..row.replication {
            let e: f64 = rng.sample(StandardNormal);
            out.push(base + sd_e * e);
        }
    }
    out
}

/// Unit tags of every expanded future unit.
pub fn unit_tags(frame: &FutureFrame) -> Vec<UnitTags> {
    frame.unit_rows().into_iter().map(|i| frame.rows[i].tags).collect()
}

struct Shared<'a> {
    plan: &'a BootstrapPlan,
    model: &'a FittedModel,
    panel: &'a TransactionPanel,
    frame: &'a FutureFrame,
    structure: ModelStructure,
    row_mean: Vec<f64>,
    unit_tags: Vec<UnitTags>,
    scenarios: &'a [ShockScenario],
    schedules: Vec<Vec<Branch>>,
}

impl Shared<'_> {
    fn iteration(&self, b: usize) -> Vec<IterationRecord> {
        let plan = self.plan;
        let seed = plan.seed;
        let cells = plan.cells();
        let failed = |reason: String| {
            self.scenarios
                .iter()
                .zip(&self.schedules)
                .map(|(_, sched)| IterationRecord {
                    index: b,
                    branch: sched[b],
                    status: IterationStatus::Failed(reason.clone()),
                    theta_star: vec![None; cells],
                    theta_hat_star: vec![None; cells],
                })
                .collect()
        };

        let mut sample_rng = stream(seed, 0, b as u64, Substream::SampleNoise);
        let star = generate_sample_star(self.model, self.panel, &mut sample_rng);
        let refit = if plan.refit {
            self.structure.fit(&star.log_price, &plan.fit_options)
        } else {
            self.structure.fit_fixed_ratio(&star.log_price, self.model.rho())
        };
        let refit = match refit {
            Ok(m) => m,
            Err(e) => return failed(e.to_string()),
        };
        let theta_hat = match plug_in_cells(&refit, self.frame, &plan.measures, &plan.domains, plan.quantile_method) {
            Ok(c) => flatten(c),
            Err(e) => return failed(e.to_string()),
        };

        let future_effects = if plan.couple_region_effects {
            star.v_star.clone()
        } else {
            draw_region_effects(self.model, &mut stream(seed, 0, b as u64, Substream::FutureEffects))
        };
        let mut future_rng = stream(seed, 0, b as u64, Substream::FutureNoise);
        let base_future =
            future_from_means(self.frame, &self.row_mean, &future_effects, self.model.sigma2_e, &mut future_rng);

        self.scenarios
            .iter()
            .zip(&self.schedules)
            .map(|(scenario, sched)| {
                let branch = sched[b];
                let mut future = base_future.clone();
                let mut shock_rng = stream(seed, scope_hash(&scenario.name), b as u64, Substream::Shock);
                apply_shock(&mut future, &self.unit_tags, scenario, branch, &mut shock_rng);
                let theta = flatten(evaluate_cells(
                    self.frame,
                    &future,
                    &plan.measures,
                    &plan.domains,
                    plan.quantile_method,
                ));
                IterationRecord {
                    index: b,
                    branch,
                    status: IterationStatus::Ok,
                    theta_star: theta,
                    theta_hat_star: theta_hat.clone(),
                }
            })
            .collect()
    }
}

fn flatten(cells: Vec<Vec<Option<f64>>>) -> Vec<Option<f64>> {
    cells.into_iter().flatten().collect()
}

/// Bootstrap one scenario.
pub fn run(
    plan: &BootstrapPlan,
    model: &FittedModel,
    panel: &TransactionPanel,
    frame: &FutureFrame,
    scenario: &ShockScenario,
) -> Result<ErrorPanel> {
    Ok(run_scenarios(plan, model, panel, frame, std::slice::from_ref(scenario))?.remove(0))
}

/// Bootstrap several scenarios over one shared set of iterations.
///
/// Runs on the current rayon pool; results do not depend on its size.
pub fn run_scenarios(
    plan: &BootstrapPlan,
    model: &FittedModel,
    panel: &TransactionPanel,
    frame: &FutureFrame,
    scenarios: &[ShockScenario],
) -> Result<Vec<ErrorPanel>> {
    plan.validate()?;
    if scenarios.is_empty() {
        return Err(Error::InvalidArgument("no scenarios to run".into()));
    }
    for s in scenarios {
        s.validate()?;
    }
    if model.beta.len() != panel.n_covariates() || frame.covariate_names.len() != panel.n_covariates() {
        return Err(Error::DimensionMismatch { expected: panel.n_covariates(), got: model.beta.len() });
    }
    let shared = Shared {
        plan,
        model,
        panel,
        frame,
        structure: ModelStructure::new(&panel.design, &panel.group, panel.n_groups)?,
        row_mean: frame.rows.iter().map(|r| dot(&r.x, &model.beta)).collect(),
        unit_tags: unit_tags(frame),
        scenarios,
        schedules: scenarios.iter().map(|s| branch_schedule(s, plan.iterations, plan.seed)).collect(),
    };
    let per_iteration: Vec<Vec<IterationRecord>> =
        (0..plan.iterations).into_par_iter().map(|b| shared.iteration(b)).collect();

    let mut panels: Vec<ErrorPanel> = scenarios
        .iter()
        .map(|s| ErrorPanel {
            scenario: s.name.clone(),
            measures: plan.measures.clone(),
            domains: plan.domains.clone(),
            iterations: Vec::with_capacity(plan.iterations),
        })
        .collect();
    for records in per_iteration {
        for (panel, rec) in panels.iter_mut().zip(records) {
            panel.iterations.push(rec);
        }
    }
    let failed = panels[0].failed();
    if failed as f64 > plan.max_failure_rate * plan.iterations as f64 {
        return Err(Error::TooManyFailures {
            failed,
            total: plan.iterations,
            limit: plan.max_failure_rate * 100.0,
        });
    }
    Ok(panels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Design;

    fn zero_noise_model() -> FittedModel {
        FittedModel {
            covariate_names: vec!["one".into(), "x".into()],
            beta: vec![1.0, 0.5],
            sigma2_v: 0.0,
            sigma2_e: 0.0,
            v_hat: vec![0.0; 2],
            reml_loglik: 0.0,
            converged: true,
            at_boundary: true,
            iterations: 0,
            gradient: 0.0,
            objective_trace: vec![],
        }
    }

    #[test]
    fn degenerate_noise_reproduces_mean() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64]).collect();
        let design = Design::from_rows(vec!["one".into(), "x".into()], &rows).unwrap();
        let panel = TransactionPanel::simple(design, vec![0.0; 6], vec![0, 0, 0, 1, 1, 1], 2).unwrap();
        let model = zero_noise_model();
        let star = generate_sample_star(&model, &panel, &mut stream(3, 0, 0, Substream::SampleNoise));
        for i in 0..6 {
            assert_eq!(star.log_price[i], 1.0 + 0.5 * i as f64);
        }
        assert_eq!(star.v_star, vec![0.0, 0.0]);
    }

    #[test]
    fn plan_validation() {
        let mut plan = BootstrapPlan::default();
        assert!(plan.validate().is_ok());
        plan.qape_orders = vec![0.99, 0.5];
        assert!(plan.validate().is_err());
        plan.qape_orders = vec![0.5];
        plan.iterations = 0;
        assert!(plan.validate().is_err());
    }
}
