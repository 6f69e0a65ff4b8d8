mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use exante::accuracy::{qape, qape_many, Statistic};
use exante::dataio::selection::{permutation_p_values, select_variables, SelectionOptions};
use exante::dataio::{generate_synthetic, tag_subpopulations, DesignSpec, SyntheticSpec};
use exante::lmm::{fit_reml, FitOptions};
use exante::measures::{measure, MeasureKind, QuantileMethod};
use exante::panel::{Domain, Region};
use exante::pipeline::{replay, run_pipeline, DataSource, RunConfig};
use exante::rng::{stream, Substream};
use exante::scenarios::{branch_schedule, builtin, parse_scenario, to_toml, Branch, DecreaseDistribution, Selector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const METHODS: [QuantileMethod; 2] = [QuantileMethod::LeftInverse, QuantileMethod::LinearInterpolation];

fn within(t: Instant, limit: Duration, what: &str) {
    let took = t.elapsed();
    assert!(took < limit, "{what} took {took:?}, limit {limit:?}");
}

fn measures_match_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.random_range(2..=500);
        let v: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 4.0).exp() * 1e3).collect();
        for method in METHODS {
            for kind in MeasureKind::ALL {
                let got = measure(&v, kind, method).unwrap();
                let want = common::brute_measure(&v, kind, method);
                assert!(common::rel_close(got, want, 1e-12), "{kind:?} {method:?}: {got} vs {want}");
            }
        }
    }
    for method in METHODS {
        let flat = vec![250_000.0; 37];
        for kind in MeasureKind::ALL {
            let want = match kind {
                MeasureKind::Qdr | MeasureKind::Ddr => 1.0,
                _ => 0.0,
            };
            assert_eq!(measure(&flat, kind, method).unwrap(), want, "{kind:?}");
        }
    }
    within(t, Duration::from_secs(10), "measures");
}

fn reml_correct_and_calibrated() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut compared = 0;
    for _ in 0..100 {
        let panel = common::one_way(&mut rng, 20, 50, 0.04, 0.09);
        let (sv, se) = common::anova(&panel, 20, 50);
        if sv < 0.0 {
            continue;
        }
        let fit = fit_reml(&panel, &FitOptions::default()).unwrap();
        assert!((fit.sigma2_v - sv).abs() < 1e-6, "{} vs {sv}", fit.sigma2_v);
        assert!((fit.sigma2_e - se).abs() < 1e-6, "{} vs {se}", fit.sigma2_e);
        compared += 1;
    }
    assert!(compared > 50);

    let reps = 200;
    let spec = SyntheticSpec { n: 5000, sigma2_v: 0.04, sigma2_e: 0.09, ..Default::default() };
    let mut est = Vec::with_capacity(reps);
    for r in 0..reps {
        let data = generate_synthetic(&spec, 1000 + r as u64).unwrap();
        let panel = tag_subpopulations(&data.dataset, &DesignSpec::full(&data.dataset)).unwrap();
        let fit = fit_reml(&panel, &FitOptions::default()).unwrap();
        est.push((fit.sigma2_v, fit.sigma2_e));
    }
    for (k, truth) in [(0, 0.04), (1, 0.09)] {
        let x: Vec<f64> = est.iter().map(|e| if k == 0 { e.0 } else { e.1 }).collect();
        let mean = x.iter().sum::<f64>() / reps as f64;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let covered = x.iter().filter(|v| (*v - truth).abs() <= 3.0 * sd).count() as f64 / reps as f64;
        eprintln!("  calibration component {k}: mean {mean:.5}, sd {sd:.5}, covered {covered:.3}");
        assert!(covered >= 0.95, "component {k} covered {covered}");
    }
    within(t, Duration::from_secs(300), "reml");
}

fn qape_definition() {
    let t = Instant::now();
    let e = [-3.0, -1.0, 0.0, 2.0, 4.0];
    assert_eq!(qape(&e, 0.5), Some(2.0));
    assert_eq!(qape(&e, 0.99), Some(4.0));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let orders: Vec<f64> = (1..100).map(|k| k as f64 / 100.0).collect();
    for _ in 0..10_000 {
        let n = rng.random_range(1..200);
        let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 1e3).collect();
        let q = qape_many(&e, &orders).unwrap();
        assert!(q.windows(2).all(|w| w[0] <= w[1]));
    }
    within(t, Duration::from_secs(10), "qape");
}

fn effect_params(d: &DecreaseDistribution) -> (f64, f64) {
    match *d {
        DecreaseDistribution::Normal { mean, sd } => (mean, sd),
        DecreaseDistribution::Uniform { .. } => panic!("expected a normal decrease"),
    }
}

fn scenarios_faithful() {
    let t = Instant::now();
    let parsed = |name: &str| parse_scenario(&to_toml(&builtin(name).unwrap())).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;

    let s1 = parsed("s1");
    assert_eq!(s1, builtin("s1").unwrap());
    assert!(close(s1.sub_scenarios[0].probability, 0.25));
    let want = [(Region::Northeast, 0.025), (Region::Midwest, 0.008), (Region::South, 0.006), (Region::West, 0.038)];
    assert_eq!(s1.sub_scenarios[0].effects.len(), 4);
    for (eff, (region, frac)) in s1.sub_scenarios[0].effects.iter().zip(want) {
        assert_eq!(eff.selector, Selector::region(region));
        assert!(close(eff.affected_fraction, frac));
        let (m, s) = effect_params(&eff.distribution);
        assert!(close(m, 0.175) && close(s, 0.175 / 3.0));
    }

    let s2 = parsed("s2");
    assert!(close(s2.sub_scenarios[0].probability, 0.9));
    let means: Vec<f64> = s2.sub_scenarios[0].effects.iter().map(|e| effect_params(&e.distribution).0).collect();
    assert_eq!(means, vec![0.11934, 0.024]);
    assert!(s2.sub_scenarios[0].effects.iter().all(|e| close(e.affected_fraction, 0.046)));

    let s3 = parsed("s3");
    assert!(close(s3.sub_scenarios[0].probability, 0.05));
    let (m, s) = effect_params(&s3.sub_scenarios[0].effects[0].distribution);
    assert!(close(m, 0.0688) && (s - 0.02293).abs() < 5e-6);
    assert!(close(s3.sub_scenarios[0].effects[0].affected_fraction, 1.0));

    let s4 = parsed("s4");
    let sched = branch_schedule(&s4, 2000, 42);
    let count = |b: Branch| sched.iter().filter(|x| **x == b).count();
    let got = [count(Branch::ShockFree), count(Branch::Sub(0)), count(Branch::Sub(1)), count(Branch::Sub(2))];
    assert_eq!([got[1], got[2], got[3], got[0]], [40, 1380, 160, 420]);

    let s31 = parsed("s31");
    let n = 100_000;
    let mut y = vec![200_000f64.ln(); n];
    let tags = vec![exante::panel::UnitTags::market(Region::West, exante::panel::Sections::Double, None).unwrap(); n];
    exante::scenarios::apply_shock(&mut y, &tags, &s31, Branch::Sub(0), &mut stream(4, 0, 0, Substream::Shock));
    let shift = y.iter().map(|v| v.exp()).sum::<f64>() / n as f64 / 200_000.0 - 1.0;
    eprintln!("  s31 mean shift {:.4}%", shift * 100.0);
    assert!((shift + 0.0688).abs() <= 0.005, "{shift}");
    within(t, Duration::from_secs(30), "scenarios");
}

fn end_to_end_ordering() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        data: DataSource::Synthetic { seed: 5, spec: SyntheticSpec::default() },
        scenarios: ["s0", "s1", "s11", "s21", "s31", "s41"].iter().map(|s| s.to_string()).collect(),
        iterations: 500,
        seed: 5,
        out_dir: dir.path().to_path_buf(),
        ..Default::default()
    };
    let summary = run_pipeline(&cfg).unwrap();
    let report = &summary.report;
    let stats = report.statistics();
    let hi = Statistic::Qape(0.99);
    let lo = Statistic::Qape(0.5);

    let mut a_bad = 0;
    for key in report.cells.keys() {
        let v = |s| report.value(&key.scenario, key.measure, key.domain, s).unwrap();
        if v(hi) < v(lo) {
            a_bad += 1;
        }
    }

    let mut b_worst: (f64, String) = (0.0, String::new());
    for s in ["s1", "s11"] {
        for &m in &report.measures {
            for &d in &report.domains {
                for &st in &stats {
                    let (Some(x), Some(r)) = (report.value(s, m, d, st), report.value("s0", m, d, st)) else { continue };
                    let dev = (x / r - 1.0).abs();
                    if dev > b_worst.0 {
                        b_worst = (dev, format!("{s} {m:?} {d} {st}"));
                    }
                }
            }
        }
    }

    let affected = |s: &str| -> Vec<Domain> {
        match s {
            "s41" => ["population", "sub1", "sub2", "sub5", "sub6"].iter().map(|d| d.parse().unwrap()).collect(),
            _ => report.domains.clone(),
        }
    };
    let (mut c_total, mut c_bad) = (0, Vec::new());
    for s in ["s21", "s31", "s41"] {
        let (mut lo_r, mut hi_r) = (f64::MAX, f64::MIN);
        for m in [MeasureKind::Sd, MeasureKind::Aad] {
            for d in affected(s) {
                for &st in &stats {
                    let r = report.value(s, m, d, st).unwrap() / report.value("s0", m, d, st).unwrap();
                    (lo_r, hi_r) = (lo_r.min(r), hi_r.max(r));
                }
            }
        }
        eprintln!("  (c) {s}: SD/AAD ratios to s0 in affected domains span [{lo_r:.3}, {hi_r:.3}]");
        for m in [MeasureKind::Sd, MeasureKind::Aad] {
            for d in affected(s) {
                for &st in &stats {
                    let x = report.value(s, m, d, st).unwrap();
                    let r = report.value("s0", m, d, st).unwrap();
                    c_total += 1;
                    if x <= r {
                        c_bad.push(format!("{s} {m:?} {d} {st} ratio {:.3}", x / r));
                    }
                }
            }
        }
    }
    eprintln!("  (a) cells with QAPE_0.99 < QAPE_0.5: {a_bad} of {}", report.cells.len());
    eprintln!("  (b) largest departure of s1/s11 from s0: {:.2}% at {}", b_worst.0 * 100.0, b_worst.1);
    eprintln!("  (c) affected SD/AAD cells not above s0: {} of {c_total}", c_bad.len());
    for line in c_bad.iter().take(6) {
        eprintln!("      {line}");
    }
    eprintln!("  runtime {:?}", t.elapsed());
    assert_eq!(a_bad, 0, "(a)");
    assert!(b_worst.0 <= 0.15, "(b)");
    assert!(c_bad.is_empty(), "(c)");
    within(t, Duration::from_secs(1800), "end to end");
}

fn determinism() {
    let first = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        data: DataSource::Synthetic { seed: 6, spec: SyntheticSpec { n: 5000, ..Default::default() } },
        iterations: 40,
        seed: 6,
        workers: Some(1),
        out_dir: first.path().to_path_buf(),
        ..Default::default()
    };
    let summary = run_pipeline(&cfg).unwrap();
    let manifest = first.path().join("manifest.jsonl");
    for workers in [Some(1), Some(4)] {
        let again = tempfile::tempdir().unwrap();
        let outcome = replay(&manifest, again.path(), workers).unwrap();
        assert!(outcome.identical(), "{workers:?}: {:?}", outcome.mismatched);
        for a in &summary.artifacts {
            let x = std::fs::read(first.path().join(&a.name)).unwrap();
            let y = std::fs::read(again.path().join(&a.name)).unwrap();
            assert!(x == y, "{} differs with {workers:?} workers", a.name);
        }
    }
}

fn selection_planted_and_calibrated() {
    let t = Instant::now();
    let ds = common::planted(400, 1);
    let trace = select_variables(&ds, &SelectionOptions::default()).unwrap();
    let kept = &trace.selected_columns;
    assert!(kept.iter().any(|c| c.ends_with("X1")) && kept.contains(&"B3".to_string()), "{kept:?}");
    assert!(!kept.iter().any(|c| c.ends_with("X2") || c == "B1" || c == "B2"), "{kept:?}");

    let reps = 500;
    let n = 100;
    let mut rejected = 0;
    for r in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + r);
        let x1: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x0: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x1.iter().map(|a| 2.0 * a + rng.sample::<f64, _>(StandardNormal)).collect();
        let p = permutation_p_values(&[x1, x0], &y, 200, r, 0).unwrap();
        if p[1] <= 0.05 {
            rejected += 1;
        }
    }
    let rate = rejected as f64 / reps as f64;
    eprintln!("  null rejection rate {rate:.3}");
    assert!((0.03..=0.07).contains(&rate), "{rate}");
    within(t, Duration::from_secs(600), "selection");
}

fn main() {
    let criteria: [(&str, fn()); 7] = [
        ("1 measures match the brute-force oracle", measures_match_oracle),
        ("2 REML matches ANOVA and is calibrated", reml_correct_and_calibrated),
        ("3 QAPE definition and monotonicity", qape_definition),
        ("4 built-in scenarios are faithful", scenarios_faithful),
        ("5 end-to-end ordering", end_to_end_ordering),
        ("6 replay is bit-identical across worker counts", determinism),
        ("7 selection keeps signal and is calibrated", selection_planted_and_calibrated),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    std::panic::set_hook(Box::new(|info| eprintln!("  {info}")));
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let ok = catch_unwind(AssertUnwindSafe(f)).is_ok();
        println!("criterion {name}: {}", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
