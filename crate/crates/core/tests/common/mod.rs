#![allow(dead_code)]

use exante::measures::{MeasureKind, QuantileMethod};
use exante::panel::{Design, TransactionPanel};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Quantile by literal ECDF enumeration or by interpolating order statistics.
pub fn brute_quantile(v: &[f64], p: f64, method: QuantileMethod) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    match method {
        QuantileMethod::LeftInverse => {
            for &x in &s {
                let ecdf = s.iter().filter(|&&y| y <= x).count() as f64 / n as f64;
                if ecdf >= p {
                    return x;
                }
            }
            s[n - 1]
        }
        QuantileMethod::LinearInterpolation => {
            let h = (n - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            s[lo] + (h - lo as f64) * (s[hi] - s[lo])
        }
    }
}

pub fn brute_measure(v: &[f64], kind: MeasureKind, method: QuantileMethod) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let q = |p| brute_quantile(v, p, method);
    match kind {
        MeasureKind::Sd => sd,
        MeasureKind::Aad => v.iter().map(|y| (y - mean).abs()).sum::<f64>() / n,
        MeasureKind::Iqr => q(0.75) - q(0.25),
        MeasureKind::Mad => {
            let me = q(0.5);
            let dev: Vec<f64> = v.iter().map(|y| (y - me).abs()).collect();
            brute_quantile(&dev, 0.5, method)
        }
        MeasureKind::Cv => sd / mean * 100.0,
        MeasureKind::Qcd => (q(0.75) - q(0.25)) / (q(0.75) + q(0.25)) * 100.0,
        MeasureKind::Qdr => q(0.75) / q(0.25),
        MeasureKind::Ddr => q(0.9) / q(0.1),
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

/// Dense GLS estimate of beta for known variance components.
pub fn dense_gls(panel: &TransactionPanel, sigma2_v: f64, sigma2_e: f64) -> Vec<f64> {
    let n = panel.len();
    let p = panel.n_covariates();
    let x = DMatrix::from_row_slice(n, p, panel.design.data());
    let y = DVector::from_column_slice(&panel.log_price);
    let mut v = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if panel.group[i] == panel.group[j] {
                v[(i, j)] = sigma2_v;
            }
        }
        v[(i, i)] += sigma2_e;
    }
    let vinv = v.cholesky().unwrap().inverse();
    let xtv = x.transpose() * &vinv;
    let beta = (&xtv * &x).cholesky().unwrap().solve(&(&xtv * y));
    beta.iter().copied().collect()
}

/// Balanced one-way layout: intercept only, `d` groups of `m`.
pub fn one_way<R: Rng>(rng: &mut R, d: usize, m: usize, sigma2_v: f64, sigma2_e: f64) -> TransactionPanel {
    let mut y = Vec::with_capacity(d * m);
    let mut group = Vec::with_capacity(d * m);
    for g in 0..d {
        let v = sigma2_v.sqrt() * rng.sample::<f64, _>(StandardNormal);
        for _ in 0..m {
            y.push(10.0 + v + sigma2_e.sqrt() * rng.sample::<f64, _>(StandardNormal));
            group.push(g);
        }
    }
    let design = Design::new(vec!["(Intercept)".into()], vec![1.0; d * m]).unwrap();
    TransactionPanel::simple(design, y, group, d).unwrap()
}

/// ANOVA estimators `(sigma2_v, sigma2_e)` for a balanced one-way layout.
pub fn anova(panel: &TransactionPanel, d: usize, m: usize) -> (f64, f64) {
    let mut means = vec![0.0; d];
    for (y, g) in panel.log_price.iter().zip(&panel.group) {
        means[*g] += y / m as f64;
    }
    let grand = means.iter().sum::<f64>() / d as f64;
    let ssw: f64 = panel.log_price.iter().zip(&panel.group).map(|(y, g)| (y - means[*g]).powi(2)).sum();
    let ssb: f64 = means.iter().map(|mu| m as f64 * (mu - grand).powi(2)).sum();
    let msw = ssw / (d * (m - 1)) as f64;
    let msb = ssb / (d - 1) as f64;
    ((msb - msw) / m as f64, msw)
}

pub struct World {
    pub panel: TransactionPanel,
    pub model: exante::lmm::FittedModel,
    pub frame: exante::predictor::FutureFrame,
}

/// Small synthetic market fitted and projected one year ahead.
pub fn world(n: usize, seed: u64, sigma2_e: f64) -> World {
    use exante::dataio::{generate_synthetic, tag_subpopulations, DesignSpec, SyntheticSpec};
    use exante::predictor::{build_future_frame, CovariatePolicy};
    let spec = SyntheticSpec { n, sigma2_e, ..Default::default() };
    let data = generate_synthetic(&spec, seed).unwrap();
    let panel = tag_subpopulations(&data.dataset, &DesignSpec::full(&data.dataset)).unwrap();
    let model = exante::lmm::fit_reml(&panel, &Default::default()).unwrap();
    let mut policy = CovariatePolicy::replicate_all(panel.design.names());
    for (name, values) in data.future_lagged {
        policy = policy.with_lagged(&name, values);
    }
    let frame = build_future_frame(&panel, &policy).unwrap();
    World { panel, model, frame }
}

/// Single-year corpus with `LOG.PRICE = 2 X1 + 0.5 B3 + noise`; `X2`, `B1`, `B2` are pure noise.
pub fn planted(n: usize, seed: u64) -> exante::dataio::RawDataset {
    use exante::dataio::{Column, RawDataset};
    use exante::panel::{Region, Sections};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let x1: Vec<f64> = (0..n).map(|_| 5.0 + normal(&mut rng)).collect();
    let x2: Vec<f64> = (0..n).map(|_| 5.0 + normal(&mut rng)).collect();
    let bits = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect() };
    let (b1, b2, b3) = (bits(&mut rng), bits(&mut rng), bits(&mut rng));
    let log_price = (0..n).map(|i| 1.0 + 2.0 * x1[i] + 0.5 * b3[i] + 0.5 * normal(&mut rng)).collect();
    let region = (0..n).map(|_| Region::ALL[rng.random_range(0..4)]).collect();
    RawDataset {
        log_price,
        region,
        sections: vec![Sections::Single; n],
        year: vec![2020; n],
        month: vec![6; n],
        weight: vec![1.0; n],
        covariates: vec![
            ("X1".into(), Column::Numeric(x1)),
            ("X2".into(), Column::Numeric(x2)),
            ("B1".into(), Column::Numeric(b1)),
            ("B2".into(), Column::Numeric(b2)),
            ("B3".into(), Column::Numeric(b3)),
        ],
        binary: ["B1", "B2", "B3"].iter().map(|s| s.to_string()).collect(),
    }
}
