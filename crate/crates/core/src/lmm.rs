//! Random-intercept linear mixed model fitted by REML.
//!
//! `y = X beta + v[g] + e`, with `v[g] ~ N(0, sigma2_v)` one per region and
//! `e ~ N(0, sigma2_e)`. The marginal covariance is block diagonal with
//! compound-symmetric blocks `sigma2_e (I + rho J)`, `rho = sigma2_v / sigma2_e`,
//! whose inverse is `(I - c_g J) / sigma2_e` with `c_g = rho / (1 + rho n_g)`.
//! Every quantity the restricted likelihood needs therefore reduces to per-region
//! sums: `n_g`, `X_g' 1`, `sum y_g`, plus the global `X'X`, `X'y` and `y'y`.
//!
//! The residual variance is profiled out and the restricted log-likelihood is
//! maximised over `rho` alone: a coarse grid on `u = rho / (1 + rho)`, golden
//! section inside the best bracket, then a Newton polish on the analytic score.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Design, TransactionPanel};

const GRID_POINTS: usize = 48;
const GOLDEN: f64 = 0.618_033_988_749_894_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Tolerance on the score with respect to `ln rho`.
    pub tol: f64,
    /// Cap on golden-section plus Newton iterations.
    pub max_iter: usize,
    /// Upper end of the variance-ratio search interval.
    pub rho_max: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_iter: 200, rho_max: 1e6 }
    }
}

/// REML estimates plus EBLUPs of the region effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub covariate_names: Vec<String>,
    pub beta: Vec<f64>,
    pub sigma2_v: f64,
    pub sigma2_e: f64,
    /// EBLUP of each region effect.
    pub v_hat: Vec<f64>,
    pub reml_loglik: f64,
    pub converged: bool,
    /// The variance ratio sits on an end of its search interval.
    pub at_boundary: bool,
    pub iterations: usize,
    /// Score `d loglik / d ln rho` at the solution (`d / d rho` at `rho = 0`).
    pub gradient: f64,
    /// Best objective after each accepted iteration.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

impl FittedModel {
    pub fn rho(&self) -> f64 {
        if self.sigma2_e > 0.0 {
            self.sigma2_v / self.sigma2_e
        } else {
            0.0
        }
    }

    /// Shrinkage factor `sigma2_v / (sigma2_v + sigma2_e / n)` for a region of size `n`.
    pub fn shrinkage(&self, n: usize) -> f64 {
        shrinkage(self.rho(), n)
    }

    /// Unit-level prediction `x' beta + v_hat[region]` on the log scale.
    pub fn predict_unit(&self, x: &[f64], region: usize) -> Result<f64> {
        if x.len() != self.beta.len() {
            return Err(Error::DimensionMismatch { expected: self.beta.len(), got: x.len() });
        }
        let v = self.v_hat.get(region).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("region {region} outside 0..{}", self.v_hat.len()))
        })?;
        Ok(dot(x, &self.beta) + v)
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        dot(x, &self.beta)
    }
}

fn shrinkage(rho: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let rn = rho * n as f64;
    rn / (1.0 + rn)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fit the model on a panel.
pub fn fit_reml(panel: &TransactionPanel, opts: &FitOptions) -> Result<FittedModel> {
    ModelStructure::new(&panel.design, &panel.group, panel.n_groups)?.fit(&panel.log_price, opts)
}

/// EBLUPs `gamma_g (ybar_g - xbar_g' beta)` recomputed from the panel.
pub fn eblup(model: &FittedModel, panel: &TransactionPanel) -> Result<Vec<f64>> {
    if panel.n_covariates() != model.beta.len() {
        return Err(Error::DimensionMismatch { expected: model.beta.len(), got: panel.n_covariates() });
    }
    let mut resid_sum = vec![0.0; panel.n_groups];
    let mut count = vec![0usize; panel.n_groups];
    for i in 0..panel.len() {
        let g = panel.group[i];
        resid_sum[g] += panel.log_price[i] - dot(panel.design.row(i), &model.beta);
        count[g] += 1;
    }
    Ok(resid_sum
        .iter()
        .zip(&count)
        .map(|(&r, &n)| if n == 0 { 0.0 } else { model.shrinkage(n) * r / n as f64 })
        .collect())
}

/// Design-dependent pieces of the likelihood, reusable across responses.
///
/// Bootstrap refits keep the design and regenerate only `y`, so the `O(n p^2)`
/// work happens once here and each refit costs `O(n p)`.
#[derive(Debug, Clone)]
pub struct ModelStructure {
    names: Vec<String>,
    n: usize,
    p: usize,
    group: Vec<usize>,
    group_size: Vec<usize>,
    /// Column scale `sqrt(diag(X'X))`; all matrices below are in scaled units.
    scale: Vec<f64>,
    xtx: DMatrix<f64>,
    group_colsum: Vec<DVector<f64>>,
    x: Vec<f64>,
}

/// Response-dependent sums.
struct ResponseStats {
    xty: DVector<f64>,
    group_sum: Vec<f64>,
    yty: f64,
}

/// Profile evaluation at a fixed ratio.
struct Profile {
    rho: f64,
    loglik: f64,
    sigma2_e: f64,
    beta_scaled: DVector<f64>,
    /// Residual sums per region at the GLS `beta`.
    resid_sum: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl ModelStructure {
    pub fn new(design: &Design, group: &[usize], n_groups: usize) -> Result<Self> {
        let n = design.nrows();
        let p = design.ncols();
        if group.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: group.len() });
        }
        if n < 2 || p >= n {
            return Err(Error::InsufficientSample(format!(
                "REML needs n > p and n >= 2 (n = {n}, p = {p})"
            )));
        }
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut group_colsum = vec![DVector::<f64>::zeros(p); n_groups];
        let mut group_size = vec![0usize; n_groups];
        for i in 0..n {
            let row = design.row(i);
            let g = group[i];
            if g >= n_groups {
                return Err(Error::InvalidArgument(format!("group {g} outside 0..{n_groups}")));
            }
            group_size[g] += 1;
            for a in 0..p {
                group_colsum[g][a] += row[a];
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..p {
                    xtx[(a, b)] += ra * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtx[(a, b)] = xtx[(b, a)];
            }
        }
        let scale: Vec<f64> = (0..p).map(|j| xtx[(j, j)].sqrt()).collect();
        if let Some(j) = scale.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::SingularDesign(format!(
                "column `{}` is identically zero",
                design.names()[j]
            )));
        }
        for a in 0..p {
            for b in 0..p {
                xtx[(a, b)] /= scale[a] * scale[b];
            }
        }
        for cs in &mut group_colsum {
            for j in 0..p {
                cs[j] /= scale[j];
            }
        }
        let chol = Cholesky::new(xtx.clone())
            .ok_or_else(|| Error::SingularDesign("X'X is not positive definite".into()))?;
        let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, &d| m.min(d));
        if min_pivot * min_pivot < 1e-11 {
            return Err(Error::SingularDesign(format!(
                "design is rank deficient (smallest scaled pivot {min_pivot:.3e})"
            )));
        }
        Ok(Self {
            names: design.names().to_vec(),
            n,
            p,
            group: group.to_vec(),
            group_size,
            scale,
            xtx,
            group_colsum,
            x: design.data().to_vec(),
        })
    }

    pub fn n_groups(&self) -> usize {
        self.group_size.len()
    }

    fn response_stats(&self, y: &[f64]) -> Result<ResponseStats> {
        if y.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: y.len() });
        }
        let p = self.p;
        let mut xty = DVector::<f64>::zeros(p);
        let mut group_sum = vec![0.0; self.n_groups()];
        let mut yty = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            let row = &self.x[i * p..(i + 1) * p];
            for j in 0..p {
                xty[j] += row[j] * yi;
            }
            group_sum[self.group[i]] += yi;
            yty += yi * yi;
        }
        for j in 0..p {
            xty[j] /= self.scale[j];
        }
        Ok(ResponseStats { xty, group_sum, yty })
    }

    fn profile(&self, stats: &ResponseStats, rho: f64) -> Result<Profile> {
        let mut a = self.xtx.clone();
        let mut b = stats.xty.clone();
        let mut yhy = stats.yty;
        let mut logdet_h = 0.0;
        for (g, &ng) in self.group_size.iter().enumerate() {
            if ng == 0 {
                continue;
            }
            let c = rho / (1.0 + rho * ng as f64);
            logdet_h += (rho * ng as f64).ln_1p();
            if c == 0.0 {
                continue;
            }
            let s = &self.group_colsum[g];
            let t = stats.group_sum[g];
            a.ger(-c, s, s, 1.0);
            b.axpy(-c * t, s, 1.0);
            yhy -= c * t * t;
        }
        let chol = Cholesky::new(a)
            .ok_or_else(|| Error::Numerical(format!("X'H^-1 X not positive definite at rho = {rho}")))?;
        let beta_scaled = chol.solve(&b);
        let q = yhy - beta_scaled.dot(&b);
        let df = (self.n - self.p) as f64;
        if !(q > 0.0) {
            return Err(Error::Numerical(format!("non-positive residual sum of squares {q:.3e}")));
        }
        let sigma2_e = q / df;
        let logdet_a_scaled: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let logdet_a = logdet_a_scaled + self.scale.iter().map(|s| 2.0 * s.ln()).sum::<f64>();
        let loglik = -0.5
            * (df * ((2.0 * std::f64::consts::PI).ln() + 1.0 + sigma2_e.ln()) + logdet_h + logdet_a);
        let resid_sum = self
            .group_colsum
            .iter()
            .zip(&stats.group_sum)
            .map(|(s, t)| t - s.dot(&beta_scaled))
            .collect();
        Ok(Profile { rho, loglik, sigma2_e, beta_scaled, resid_sum, chol })
    }

    /// Score of the profiled restricted log-likelihood with respect to `rho`.
    fn score(&self, pr: &Profile) -> f64 {
        let mut g = 0.0;
        for (gi, &ng) in self.group_size.iter().enumerate() {
            if ng == 0 {
                continue;
            }
            let nf = ng as f64;
            let denom = 1.0 + pr.rho * nf;
            let dc = 1.0 / (denom * denom);
            let s = &self.group_colsum[gi];
            let lev = s.dot(&pr.chol.solve(s));
            let r = pr.resid_sum[gi];
            g += dc * r * r / pr.sigma2_e - nf / denom + dc * lev;
        }
        0.5 * g
    }

    fn finish(&self, pr: &Profile, meta: FitMeta) -> FittedModel {
        let beta: Vec<f64> =
            pr.beta_scaled.iter().zip(&self.scale).map(|(b, s)| b / s).collect();
        let v_hat = self
            .group_size
            .iter()
            .zip(&pr.resid_sum)
            .map(|(&ng, &r)| if ng == 0 { 0.0 } else { shrinkage(pr.rho, ng) * r / ng as f64 })
            .collect();
        FittedModel {
            covariate_names: self.names.clone(),
            beta,
            sigma2_v: pr.rho * pr.sigma2_e,
            sigma2_e: pr.sigma2_e,
            v_hat,
            reml_loglik: pr.loglik,
            converged: meta.converged,
            at_boundary: meta.at_boundary,
            iterations: meta.iterations,
            gradient: meta.gradient,
            objective_trace: meta.trace,
        }
    }

    /// GLS fit with the variance ratio held fixed; no likelihood search.
    pub fn fit_fixed_ratio(&self, y: &[f64], rho: f64) -> Result<FittedModel> {
        let stats = self.response_stats(y)?;
        let pr = self.profile(&stats, rho.max(0.0))?;
        let gradient = self.score(&pr) * if rho > 0.0 { rho } else { 1.0 };
        let meta = FitMeta {
            converged: true,
            at_boundary: rho <= 0.0,
            iterations: 0,
            gradient,
            trace: vec![pr.loglik],
        };
        Ok(self.finish(&pr, meta))
    }

    /// Maximise the restricted likelihood for response `y`.
    pub fn fit(&self, y: &[f64], opts: &FitOptions) -> Result<FittedModel> {
        let stats = self.response_stats(y)?;
        let rho_of = |u: f64| u / (1.0 - u);
        let u_max = opts.rho_max / (1.0 + opts.rho_max);

        let mut grid = Vec::with_capacity(GRID_POINTS + 1);
        for k in 0..=GRID_POINTS {
            // denser near zero, where small between-region variance lives
            let t = k as f64 / GRID_POINTS as f64;
            let u = u_max * t * t;
            grid.push((u, self.profile(&stats, rho_of(u))?.loglik));
        }
        let (best_k, _) = grid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
            .map(|(k, g)| (k, g.1))
            .expect("grid is nonempty");

        let mut trace = vec![grid[best_k].1];
        let mut iterations = 0;
        let mut lo = grid[best_k.saturating_sub(1)].0;
        let mut hi = grid[(best_k + 1).min(GRID_POINTS)].0;
        let mut best = self.profile(&stats, rho_of(grid[best_k].0))?;
        let mut best_u = grid[best_k].0;

        // golden section on u within the bracket
        let mut x1 = hi - GOLDEN * (hi - lo);
        let mut x2 = lo + GOLDEN * (hi - lo);
        let mut f1 = self.profile(&stats, rho_of(x1))?;
        let mut f2 = self.profile(&stats, rho_of(x2))?;
        while hi - lo > 1e-13 * (1.0 + best_u) && iterations < opts.max_iter {
            iterations += 1;
            if f1.loglik >= f2.loglik {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - GOLDEN * (hi - lo);
                f1 = self.profile(&stats, rho_of(x1))?;
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + GOLDEN * (hi - lo);
                f2 = self.profile(&stats, rho_of(x2))?;
            }
            for (u, cand) in [(x1, &f1), (x2, &f2)] {
                if cand.loglik > best.loglik {
                    best = self.profile(&stats, cand.rho)?;
                    best_u = u;
                }
            }
            trace.push(best.loglik);
        }

        // boundary at rho = 0
        let at_zero = self.profile(&stats, 0.0)?;
        if at_zero.loglik >= best.loglik {
            best = at_zero;
        }

        let mut converged = false;
        let mut gradient;
        loop {
            if best.rho <= 0.0 {
                gradient = self.score(&best);
                if gradient <= opts.tol {
                    converged = true;
                    break;
                }
            } else {
                gradient = self.score(&best) * best.rho;
                if gradient.abs() <= opts.tol {
                    converged = true;
                    break;
                }
            }
            if iterations >= opts.max_iter {
                break;
            }
            iterations += 1;
            // Newton on the score in ln rho, derivative by central difference
            let rho = best.rho.max(1e-12);
            let h: f64 = 1e-5;
            let lo_pr = self.profile(&stats, rho * (-h).exp())?;
            let hi_pr = self.profile(&stats, rho * h.exp())?;
            let s_lo = self.score(&lo_pr) * lo_pr.rho;
            let s_hi = self.score(&hi_pr) * hi_pr.rho;
            let ds = (s_hi - s_lo) / (2.0 * h);
            let s0 = self.score(&best) * rho;
            let mut accepted = false;
            if ds < 0.0 {
                let mut step = -s0 / ds;
                for _ in 0..20 {
                    let cand_rho = (rho * step.exp()).min(opts.rho_max);
                    let cand = self.profile(&stats, cand_rho)?;
                    // near the optimum the likelihood is flat to rounding, so a
                    // smaller score decides among numerically equal values
                    let flat = 1e-11 * (1.0 + best.loglik.abs());
                    let s_cand = self.score(&cand) * cand.rho;
                    if cand.loglik > best.loglik + flat
                        || (cand.loglik >= best.loglik - flat && s_cand.abs() < s0.abs())
                    {
                        best = cand;
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                }
            }
            trace.push(best.loglik);
            if !accepted {
                // flat at machine precision: accept the golden-section point
                gradient = self.score(&best) * best.rho;
                converged = gradient.abs() <= opts.tol.max(1e-4);
                break;
            }
        }
        let at_boundary = best.rho <= 0.0 || best.rho >= opts.rho_max;
        if at_boundary {
            converged = true;
        }
        let meta = FitMeta { converged, at_boundary, iterations, gradient, trace };
        Ok(self.finish(&best, meta))
    }
}

struct FitMeta {
    converged: bool,
    at_boundary: bool,
    iterations: usize,
    gradient: f64,
    trace: Vec<f64>,
}
