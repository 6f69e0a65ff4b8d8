//! Synthetic manufactured-home transactions drawn from the random-intercept
//! model, standing in for survey data that cannot be redistributed.
//!
//! Record-level covariates: `LOG.SQFT`, `BEDROOMS`, `LOCATION`, `TITLED`,
//! `SECURED`. Region-year covariates: `HOUSEHOLDS`, `LOG.OWNER`, `INCOME`.
//! Month-level covariates: `PPI`, `FED`. Year and sections enter as
//! indicator blocks. `HOUSEHOLDS` has a zero coefficient by default.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{build_design, Column, DesignSpec, RawDataset};
use crate::error::{Error, Result};
use crate::panel::{Region, Sections};
use crate::rng::{scope_hash, stream, Substream};

pub const REGION_YEAR_COLUMNS: [&str; 3] = ["HOUSEHOLDS", "LOG.OWNER", "INCOME"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub start_year: i32,
    pub years: usize,
    pub sigma2_v: f64,
    pub sigma2_e: f64,
    /// Overrides of the default coefficients, keyed by design column name.
    pub beta: BTreeMap<String, f64>,
    /// Share of three-or-more section homes (region code 5).
    pub three_plus_share: f64,
    /// Shares of Northeast, Midwest, South, West among the other homes.
    pub region_shares: [f64; 4],
    pub double_share: f64,
    pub weight_log_mean: f64,
    pub weight_log_sd: f64,
    /// Extra pure-noise covariates `NOISE1`, `NOISE2`, ... with zero coefficients.
    pub noise_covariates: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 25_561,
            start_year: 2015,
            years: 9,
            sigma2_v: 0.04,
            sigma2_e: 0.09,
            beta: BTreeMap::new(),
            three_plus_share: 0.05,
            region_shares: [0.08, 0.22, 0.50, 0.20],
            double_share: 0.55,
            weight_log_mean: 1.0,
            weight_log_sd: 0.6,
            noise_covariates: 0,
        }
    }
}

/// Coefficients used when the spec does not override them.
pub fn default_beta(start_year: i32, years: usize) -> BTreeMap<String, f64> {
    let mut b: BTreeMap<String, f64> = [
        ("(Intercept)", 1.2),
        ("LOG.SQFT", 0.9),
        ("BEDROOMS", 0.02),
        ("HOUSEHOLDS", 0.0),
        ("LOG.OWNER", 0.25),
        ("INCOME", 0.004),
        ("PPI", 0.002),
        ("FED", -0.01),
        ("SECTIONS=single", -0.15),
        ("SECTIONS=three_plus", 0.10),
        ("LOCATION=outside", -0.05),
        ("TITLED=real_estate", 0.08),
        ("SECURED=secured", 0.03),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    for t in 1..years {
        // steady drift, then the post-2020 run-up
        let boost = if t >= 6 { 0.1 * (t - 5) as f64 } else { 0.0 };
        b.insert(format!("YEAR={}", start_year + t as i32), 0.02 * t as f64 + boost);
    }
    b
}

/// Parameters the data were drawn with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beta: BTreeMap<String, f64>,
    /// Region effects indexed by region code minus one.
    pub v: Vec<f64>,
    pub sigma2_v: f64,
    pub sigma2_e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub dataset: RawDataset,
    pub truth: GroundTruth,
    /// Region-year covariates for the year after the sample, one value per region.
    pub future_lagged: BTreeMap<String, Vec<f64>>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let shares_ok = self.region_shares.iter().all(|s| *s >= 0.0) && self.region_shares.iter().sum::<f64>() > 0.0;
        if self.n == 0
            || self.years == 0
            || !(self.sigma2_v >= 0.0 && self.sigma2_e > 0.0)
            || !(0.0..1.0).contains(&self.three_plus_share)
            || !(0.0..=1.0).contains(&self.double_share)
            || !shares_ok
            || !(self.weight_log_sd >= 0.0)
        {
            return Err(Error::Config("invalid synthetic spec".into()));
        }
        Ok(())
    }
}

fn fed_rate(year_offset: usize) -> f64 {
    const PATH: [f64; 9] = [0.13, 0.40, 1.00, 1.83, 2.16, 0.38, 0.08, 1.68, 5.02];
    PATH[year_offset.min(PATH.len() - 1)]
}

fn categorical<R: Rng>(rng: &mut R, p_second: f64, levels: [&str; 2]) -> String {
    levels[usize::from(rng.random::<f64>() < p_second)].to_string()
}

/// Draw a dataset; identical `(spec, seed)` give identical output.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = stream(seed, scope_hash("synthetic"), 0, Substream::Synthetic);
    let m = spec.years;
    let normal = |sd: f64| Normal::new(0.0, sd).expect("finite sd");

    let v: Vec<f64> = (0..Region::ALL.len()).map(|_| spec.sigma2_v.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();

    // region-year covariates, one extra year for the forecast period
    let base_households = [22.0, 27.0, 47.0, 28.0, 124.0];
    let price_factor = [1.35, 0.85, 0.95, 1.40, 1.0];
    let income_factor = [1.20, 0.95, 0.90, 1.15, 1.0];
    let mut region_year = vec![vec![[0.0f64; 3]; m + 1]; 5];
    for r in 0..5 {
        for t in 0..=m {
            let tf = t as f64;
            region_year[r][t] = [
                base_households[r] * (1.0 + 0.008 * tf) + normal(0.4).sample(&mut rng),
                (200_000.0 * price_factor[r] * (1.0 + 0.05 * tf)).ln() + normal(0.02).sample(&mut rng),
                65.0 * income_factor[r] * (1.0 + 0.03 * tf) + normal(1.0).sample(&mut rng),
            ];
        }
    }
    // month-level covariates
    let mut month_level = vec![[0.0f64; 2]; m * 12];
    for (k, slot) in month_level.iter_mut().enumerate() {
        *slot = [
            100.0 * (1.0 + 0.0025 * k as f64) + normal(0.5).sample(&mut rng),
            (fed_rate(k / 12) + normal(0.05).sample(&mut rng)).max(0.0),
        ];
    }

    let share_total: f64 = spec.region_shares.iter().sum();
    let weights = LogNormal::new(spec.weight_log_mean, spec.weight_log_sd).map_err(|e| Error::Config(e.to_string()))?;
    let n = spec.n;
    let mut ds = RawDataset {
        log_price: Vec::with_capacity(n),
        region: Vec::with_capacity(n),
        sections: Vec::with_capacity(n),
        year: Vec::with_capacity(n),
        month: Vec::with_capacity(n),
        weight: Vec::with_capacity(n),
        covariates: Vec::new(),
        binary: BTreeSet::new(),
    };
    let mut sqft = Vec::with_capacity(n);
    let mut bedrooms = Vec::with_capacity(n);
    let mut ry = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    let mut ppi = Vec::with_capacity(n);
    let mut fed = Vec::with_capacity(n);
    let mut location = Vec::with_capacity(n);
    let mut titled = Vec::with_capacity(n);
    let mut secured = Vec::with_capacity(n);
    let mut noise = vec![Vec::with_capacity(n); spec.noise_covariates];
    for _ in 0..n {
        let (region, sections) = if rng.random::<f64>() < spec.three_plus_share {
            (Region::National, Sections::ThreePlus)
        } else {
            let mut u = rng.random::<f64>() * share_total;
            let mut r = 3;
            for (k, s) in spec.region_shares.iter().enumerate() {
                if u < *s {
                    r = k;
                    break;
                }
                u -= s;
            }
            let sec = if rng.random::<f64>() < spec.double_share { Sections::Double } else { Sections::Single };
            (Region::ALL[r], sec)
        };
        let t = rng.random_range(0..m);
        let month = rng.random_range(1..=12u8);
        let size_shift = match sections {
            Sections::Single => 0.0,
            Sections::Double => 0.45,
            Sections::ThreePlus => 0.7,
        };
        let ls = 6.9 + size_shift + normal(0.18).sample(&mut rng);
        let beds = (ls.exp() / 450.0 + normal(0.5).sample(&mut rng)).round().clamp(1.0, 5.0);
        ds.region.push(region);
        ds.sections.push(sections);
        ds.year.push(spec.start_year + t as i32);
        ds.month.push(month);
        ds.weight.push(weights.sample(&mut rng));
        sqft.push(ls);
        bedrooms.push(beds);
        for (c, col) in ry.iter_mut().enumerate() {
            col.push(region_year[region.index()][t][c]);
        }
        let k = t * 12 + usize::from(month) - 1;
        ppi.push(month_level[k][0]);
        fed.push(month_level[k][1]);
        location.push(categorical(&mut rng, 0.7, ["inside", "outside"]));
        titled.push(categorical(&mut rng, 0.25, ["personal", "real_estate"]));
        secured.push(categorical(&mut rng, 0.8, ["not_secured", "secured"]));
        for col in noise.iter_mut() {
            col.push(rng.sample::<f64, _>(StandardNormal));
        }
    }
    let [households, owner, income] = ry;
    ds.covariates = vec![
        ("LOG.SQFT".to_string(), Column::Numeric(sqft)),
        ("BEDROOMS".to_string(), Column::Numeric(bedrooms)),
        ("HOUSEHOLDS".to_string(), Column::Numeric(households)),
        ("LOG.OWNER".to_string(), Column::Numeric(owner)),
        ("INCOME".to_string(), Column::Numeric(income)),
        ("PPI".to_string(), Column::Numeric(ppi)),
        ("FED".to_string(), Column::Numeric(fed)),
        ("LOCATION".to_string(), Column::Categorical(location)),
        ("TITLED".to_string(), Column::Categorical(titled)),
        ("SECURED".to_string(), Column::Categorical(secured)),
    ];
    for (k, col) in noise.into_iter().enumerate() {
        ds.covariates.push((format!("NOISE{}", k + 1), Column::Numeric(col)));
    }

    // the response needs the expanded design, so fill placeholder prices first
    ds.log_price = vec![0.0; n];
    let design = build_design(&ds, &DesignSpec::full(&ds))?;
    let mut beta = default_beta(spec.start_year, m);
    for (k, val) in &spec.beta {
        if design.column_index(k).is_none() {
            return Err(Error::Config(format!("beta names unknown design column `{k}`")));
        }
        beta.insert(k.clone(), *val);
    }
    let coef: Vec<f64> = design.names().iter().map(|c| beta.get(c).copied().unwrap_or(0.0)).collect();
    beta = design.names().iter().cloned().zip(coef.iter().copied()).collect();
    let e_sd = spec.sigma2_e.sqrt();
    for i in 0..n {
        let mean: f64 = design.row(i).iter().zip(&coef).map(|(x, b)| x * b).sum();
        ds.log_price[i] = mean + v[ds.region[i].index()] + e_sd * rng.sample::<f64, _>(StandardNormal);
    }

    let future_lagged = REGION_YEAR_COLUMNS
        .iter()
        .enumerate()
        .map(|(c, name)| (name.to_string(), (0..5).map(|r| region_year[r][m][c]).collect()))
        .collect();
    Ok(SyntheticData {
        dataset: ds,
        truth: GroundTruth { beta, v, sigma2_v: spec.sigma2_v, sigma2_e: spec.sigma2_e },
        future_lagged,
    })
}
