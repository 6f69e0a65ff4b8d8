//! Dispersion and inequality measures on a vector of prices.
//!
//! Eight measures in four families:
//!
//! - classical absolute: [`MeasureKind::Sd`] (n−1 denominator), [`MeasureKind::Aad`] (1/n);
//! - positional absolute: [`MeasureKind::Iqr`], [`MeasureKind::Mad`];
//! - relative, in percent: [`MeasureKind::Cv`], [`MeasureKind::Qcd`];
//! - quantile ratios: [`MeasureKind::Qdr`] (Q3/Q1), [`MeasureKind::Ddr`] (D9/D1).
//!
//! Every quantile used by a measure (quartiles, deciles, the median inside MAD)
//! goes through the same [`QuantileMethod`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Empirical quantile definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileMethod {
    /// `inf{x : F_n(x) >= p}`, the left-continuous inverse of the ECDF.
    LeftInverse,
    /// Linear interpolation between order statistics at `h = (n - 1) p`.
    #[default]
    LinearInterpolation,
}

/// One of the eight dispersion measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MeasureKind {
    Sd,
    Aad,
    Iqr,
    Mad,
    Cv,
    Qcd,
    Qdr,
    Ddr,
}

impl MeasureKind {
    pub const ALL: [MeasureKind; 8] = [
        MeasureKind::Sd,
        MeasureKind::Aad,
        MeasureKind::Iqr,
        MeasureKind::Mad,
        MeasureKind::Cv,
        MeasureKind::Qcd,
        MeasureKind::Qdr,
        MeasureKind::Ddr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MeasureKind::Sd => "SD",
            MeasureKind::Aad => "AAD",
            MeasureKind::Iqr => "IQR",
            MeasureKind::Mad => "MAD",
            MeasureKind::Cv => "CV",
            MeasureKind::Qcd => "QCD",
            MeasureKind::Qdr => "QDR",
            MeasureKind::Ddr => "DDR",
        }
    }

    /// True for the measures that need `n >= 2`.
    pub fn needs_two(self) -> bool {
        matches!(self, MeasureKind::Sd | MeasureKind::Cv)
    }
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MeasureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MeasureKind::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown measure `{s}`")))
    }
}

/// Strictly positive prices, kept sorted ascending.
///
/// Measures are invariant to the order of observations, so the vector is
/// sorted once at construction and every quantile is an index lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceVector {
    sorted: Vec<f64>,
}

impl PriceVector {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample);
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "prices must be finite and positive, found {bad}"
            )));
        }
        values.sort_unstable_by(f64::total_cmp);
        Ok(Self { sorted: values })
    }

    /// Back-transform log prices with `exp` and wrap them.
    pub fn from_log_prices(log_prices: &[f64]) -> Result<Self> {
        Self::new(log_prices.iter().map(|y| y.exp()).collect())
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn mean(&self) -> f64 {
        self.sorted.iter().sum::<f64>() / self.sorted.len() as f64
    }

    pub fn quantile(&self, p: f64, method: QuantileMethod) -> Result<f64> {
        quantile_sorted(&self.sorted, p, method)
    }

    pub fn measure(&self, kind: MeasureKind, method: QuantileMethod) -> Result<f64> {
        let v = &self.sorted;
        let n = v.len();
        if kind.needs_two() && n < 2 {
            return Err(Error::InsufficientSample(format!(
                "{kind} needs at least 2 observations, got {n}"
            )));
        }
        let q = |p| quantile_sorted(v, p, method);
        let value = match kind {
            MeasureKind::Sd => sample_sd(v),
            MeasureKind::Aad => {
                let mean = self.mean();
                v.iter().map(|y| (y - mean).abs()).sum::<f64>() / n as f64
            }
            MeasureKind::Iqr => q(0.75)? - q(0.25)?,
            MeasureKind::Mad => {
                let me = q(0.5)?;
                let mut dev: Vec<f64> = v.iter().map(|y| (y - me).abs()).collect();
                dev.sort_unstable_by(f64::total_cmp);
                quantile_sorted(&dev, 0.5, method)?
            }
            MeasureKind::Cv => sample_sd(v) / self.mean() * 100.0,
            MeasureKind::Qcd => {
                let (q1, q3) = (q(0.25)?, q(0.75)?);
                (q3 - q1) / (q3 + q1) * 100.0
            }
            MeasureKind::Qdr => q(0.75)? / q(0.25)?,
            MeasureKind::Ddr => q(0.9)? / q(0.1)?,
        };
        Ok(value)
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let ss: f64 = v.iter().map(|y| (y - mean) * (y - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Evaluate one measure on unsorted prices.
pub fn measure(values: &[f64], kind: MeasureKind, method: QuantileMethod) -> Result<f64> {
    PriceVector::new(values.to_vec())?.measure(kind, method)
}

/// Empirical quantile of an unsorted sample.
pub fn quantile(values: &[f64], p: f64, method: QuantileMethod) -> Result<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    quantile_sorted(&sorted, p, method)
}

/// Empirical quantile of an already sorted sample.
pub fn quantile_sorted(sorted: &[f64], p: f64, method: QuantileMethod) -> Result<f64> {
    let n = sorted.len();
    if n == 0 {
        return Err(Error::EmptySample);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile order must lie in (0, 1), got {p}"
        )));
    }
    match method {
        QuantileMethod::LeftInverse => Ok(sorted[left_inverse_rank(n, p) - 1]),
        QuantileMethod::LinearInterpolation => {
            let h = (n - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = h - lo as f64;
            Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
        }
    }
}

/// Smallest rank `k` in `1..=n` with `k / n >= p`.
///
/// The division is evaluated in floating point so that e.g. `p = 0.99`,
/// `n = 2000` lands on 1980 rather than on `ceil(1980.0000000000002)`.
pub fn left_inverse_rank(n: usize, p: f64) -> usize {
    let nf = n as f64;
    let mut k = ((nf * p).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / nf >= p {
        k -= 1;
    }
    while k < n && (k as f64 / nf) < p {
        k += 1;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn left_inverse_examples() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5, QuantileMethod::LeftInverse).unwrap(), 3.0);
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5, QuantileMethod::LeftInverse).unwrap(), 2.0);
        assert_eq!(left_inverse_rank(2000, 0.99), 1980);
        assert_eq!(left_inverse_rank(5, 0.99), 5);
        assert_eq!(left_inverse_rank(5, 0.2), 1);
        assert_eq!(left_inverse_rank(5, 0.21), 2);
    }

    #[test]
    fn linear_interpolation_matches_type_seven() {
        let v = [1.0, 2.0, 3.0, 4.0];
        // h = 3 * 0.25 = 0.75
        assert_relative_eq!(quantile(&v, 0.25, QuantileMethod::LinearInterpolation).unwrap(), 1.75);
        assert_relative_eq!(quantile(&v, 0.5, QuantileMethod::LinearInterpolation).unwrap(), 2.5);
    }

    #[test]
    fn empty_and_bad_order() {
        assert!(matches!(quantile(&[], 0.5, QuantileMethod::LeftInverse), Err(Error::EmptySample)));
        assert!(quantile(&[1.0], 1.0, QuantileMethod::LeftInverse).is_err());
        assert!(quantile(&[1.0], 0.0, QuantileMethod::LeftInverse).is_err());
        assert!(PriceVector::new(vec![]).is_err());
        assert!(PriceVector::new(vec![1.0, -2.0]).is_err());
    }

    #[test]
    fn constant_vector_has_zero_dispersion_profile() {
        for method in [QuantileMethod::LeftInverse, QuantileMethod::LinearInterpolation] {
            let pv = PriceVector::new(vec![7.5; 13]).unwrap();
            for kind in MeasureKind::ALL {
                let expected = match kind {
                    MeasureKind::Qdr | MeasureKind::Ddr => 1.0,
                    _ => 0.0,
                };
                assert_eq!(pv.measure(kind, method).unwrap(), expected, "{kind}");
            }
            assert_eq!(pv.quantile(0.37, method).unwrap(), 7.5);
        }
    }

    #[test]
    fn classical_measures_by_hand() {
        let pv = PriceVector::new(vec![5.0, 3.0, 1.0, 4.0, 2.0]).unwrap();
        let m = QuantileMethod::LinearInterpolation;
        assert_relative_eq!(pv.measure(MeasureKind::Sd, m).unwrap(), 2.5f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(pv.measure(MeasureKind::Aad, m).unwrap(), 1.2, max_relative = 1e-15);
        assert_relative_eq!(pv.measure(MeasureKind::Cv, m).unwrap(), 2.5f64.sqrt() / 3.0 * 100.0);
    }

    #[test]
    fn single_observation() {
        let pv = PriceVector::new(vec![3.0]).unwrap();
        let m = QuantileMethod::LinearInterpolation;
        assert!(matches!(pv.measure(MeasureKind::Sd, m), Err(Error::InsufficientSample(_))));
        assert!(pv.measure(MeasureKind::Cv, m).is_err());
        assert_eq!(pv.measure(MeasureKind::Iqr, m).unwrap(), 0.0);
        assert_eq!(pv.measure(MeasureKind::Qdr, m).unwrap(), 1.0);
        assert_eq!(pv.measure(MeasureKind::Mad, m).unwrap(), 0.0);
    }

    #[test]
    fn parse_measure_names() {
        assert_eq!("qcd".parse::<MeasureKind>().unwrap(), MeasureKind::Qcd);
        assert_eq!(" DDR".parse::<MeasureKind>().unwrap(), MeasureKind::Ddr);
        assert!("gini".parse::<MeasureKind>().is_err());
    }
}
