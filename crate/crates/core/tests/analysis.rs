mod common;

use monoimpute::analysis::{
    analyze_all, fit_analysis, rubin_pool, rubin_pool_one, simulate_scenario, two_sided_p, AnalysisFamily, AnalysisSpec, Fit,
    DF_CAP,
};
use monoimpute::data::pattern_counts;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use common::{integrate, mean};

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn std_normal(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Pattern probabilities of scenario 1 by quadrature over (y0, y1).
fn pattern_probs() -> [f64; 3] {
    let mut p = [0.0; 3];
    for g in [0.0, 1.0] {
        let p0 = integrate(|y0| std_normal(y0) * expit(0.3 * y0 - 3.0), -9.0, 9.0, 40);
        let p1 = integrate(
            |y0| {
                let mu = 0.5 + 0.5 * y0 + g;
                let inner = integrate(|y1| std_normal(y1 - mu) * expit(0.3 * y0 + y1 - 2.0), mu - 9.0, mu + 9.0, 30);
                std_normal(y0) * (1.0 - expit(0.3 * y0 - 3.0)) * inner
            },
            -9.0,
            9.0,
            40,
        );
        p[0] += 0.5 * p0;
        p[1] += 0.5 * p1;
    }
    p[2] = 1.0 - p[0] - p[1];
    p
}

#[test]
fn pattern_proportions() {
    let exact = pattern_probs();
    let reference = [0.0488, 0.3053, 0.6459];
    for (e, q) in exact.iter().zip(&reference) {
        assert!((e - q).abs() < 5e-4, "quadrature {e} vs {q}");
    }
    let n = 100_000;
    let sc = simulate_scenario(1, n, 2024).unwrap();
    let at_risk = pattern_counts(&sc.observed);
    let counts = [n - at_risk[0], at_risk[0] - at_risk[1], at_risk[1]];
    for k in 0..3 {
        let f = counts[k] as f64 / n as f64;
        assert!((f - reference[k]).abs() < 0.005, "pattern {k}: {f}");
        assert!((f - exact[k]).abs() < 4.0 * (exact[k] * (1.0 - exact[k]) / n as f64).sqrt(), "pattern {k}: {f} vs {}", exact[k]);
    }
    // One in five completers misses y1.
    let completers: Vec<_> = sc.observed.subjects.iter().filter(|s| s.s == 2).collect();
    let holes = completers.iter().filter(|s| !s.observed[0]).count() as f64 / completers.len() as f64;
    assert!((holes - 0.2).abs() < 4.0 * (0.16 / completers.len() as f64).sqrt(), "{holes}");
    assert!(sc.observed.subjects.iter().all(|s| s.observed[1] == (s.s == 2)));
}

#[test]
fn conditional_mean_of_the_first_visit() {
    let sc = simulate_scenario(1, 100_000, 5).unwrap();
    let f = fit_analysis(&sc.full, &AnalysisSpec::new("y1", AnalysisFamily::Linear)).unwrap();
    let plug = f.estimates[0] + f.estimates[2];
    let se = (f.variances[0] + f.variances[2]).sqrt() * 2.0;
    assert!((plug - 1.5).abs() < 4.0 * se, "{plug}");
    for (b, t) in f.estimates.iter().zip([0.5, 0.5, 1.0]) {
        assert!((b - t).abs() < 0.03, "{b} vs {t}");
    }
}

#[test]
fn second_scenario_is_right_skewed() {
    let sc = simulate_scenario(2, 100_000, 6).unwrap();
    let f = fit_analysis(&sc.full, &AnalysisSpec::new("y1", AnalysisFamily::Linear)).unwrap();
    let r: Vec<f64> = sc
        .full
        .subjects
        .iter()
        .map(|s| s.y[0] - f.estimates.iter().zip(&s.x).map(|(b, x)| b * x).sum::<f64>())
        .collect();
    let m = mean(&r);
    let m2 = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / r.len() as f64;
    let m3 = r.iter().map(|v| (v - m).powi(3)).sum::<f64>() / r.len() as f64;
    let skew = m3 / m2.powf(1.5);
    assert!(skew > 0.5, "skewness {skew}");
    assert!((f.estimates[1] - 0.5).abs() < 0.05 && (f.estimates[2] - 1.0).abs() < 0.05);
}

#[test]
fn equal_seeds_equal_trials() {
    let a = simulate_scenario(2, 300, 9).unwrap();
    let b = simulate_scenario(2, 300, 9).unwrap();
    let csv = |ds: &monoimpute::data::Dataset| {
        let mut buf = Vec::new();
        ds.write_csv(&mut buf, "NA").unwrap();
        buf
    };
    assert_eq!(csv(&a.observed), csv(&b.observed));
    assert_ne!(csv(&a.observed), csv(&simulate_scenario(2, 300, 10).unwrap().observed));
    assert_eq!(a.observed.subjects.iter().filter(|s| s.x[2] == 1.0).count(), 150);
}

#[test]
fn mle_gradients_vanish() {
    for seed in 0..5 {
        let sc = simulate_scenario(1, 2000, seed).unwrap();
        for (resp, fam) in [("y2", AnalysisFamily::Probit), ("y2", AnalysisFamily::Logistic), ("y1", AnalysisFamily::Linear)] {
            let f = fit_analysis(&sc.full, &AnalysisSpec::new(resp, fam)).unwrap();
            let norm = f.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
            assert!(norm < 1e-8 * 2000.0, "{fam:?}: {norm}");
        }
    }
}

#[test]
fn pooled_t_uses_the_t_reference() {
    let r = rubin_pool_one("b", &[1.0, 1.4, 0.7, 1.1], &[0.05, 0.06, 0.04, 0.05]).unwrap();
    let b = r.between.unwrap();
    let bt = 1.25 * b;
    assert!((r.df - 3.0 * (1.0 + r.within / bt).powi(2)).abs() < 1e-9 * r.df);
    let t = StudentsT::new(0.0, 1.0, r.df).unwrap();
    assert!((r.p - 2.0 * t.cdf(-r.t.abs())).abs() < 1e-10);
    assert!((two_sided_p(1.959963984540054, DF_CAP) - 0.05).abs() < 1e-9);
    assert_eq!(two_sided_p(f64::INFINITY, 5.0), 0.0);
}

#[test]
fn single_completed_set_has_no_between_variance() {
    let sc = simulate_scenario(1, 400, 3).unwrap();
    let spec = AnalysisSpec::new("y2", AnalysisFamily::Probit);
    let pooled = analyze_all(std::slice::from_ref(&sc.full), &spec).unwrap();
    assert_eq!(pooled.m, 1);
    let g = pooled.get("g").unwrap();
    assert!(g.between.is_none());
    let mut buf = Vec::new();
    pooled.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.lines().nth(3).unwrap().starts_with("g,") && text.lines().nth(3).unwrap().contains(",NA,"));
    assert!(analyze_all(&[], &spec).is_err());
    assert!(analyze_all(std::slice::from_ref(&sc.observed), &spec).is_err());
}

fn fits_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-5.0..5.0f64, 0.01..2.0f64), 2..12)
}

proptest! {
    #[test]
    fn pooling_ignores_imputation_order(qu in fits_strategy(), rot in 0usize..12) {
        let q: Vec<f64> = qu.iter().map(|v| v.0).collect();
        let u: Vec<f64> = qu.iter().map(|v| v.1).collect();
        let a = rubin_pool_one("b", &q, &u).unwrap();
        let k = rot % q.len();
        let mut q2 = q.clone();
        let mut u2 = u.clone();
        q2.rotate_left(k);
        u2.rotate_left(k);
        q2.reverse();
        u2.reverse();
        let b = rubin_pool_one("b", &q2, &u2).unwrap();
        for (x, y) in [(a.estimate, b.estimate), (a.within, b.within), (a.total, b.total), (a.df, b.df)] {
            prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }

    #[test]
    fn total_variance_dominates_within(qu in fits_strategy(), tie in any::<bool>()) {
        let q: Vec<f64> = if tie { vec![qu[0].0; qu.len()] } else { qu.iter().map(|v| v.0).collect() };
        let u: Vec<f64> = qu.iter().map(|v| v.1).collect();
        let r = rubin_pool_one("b", &q, &u).unwrap();
        prop_assert!(r.total >= r.within);
        let all_equal = q.windows(2).all(|w| w[0] == w[1]);
        prop_assert_eq!(r.total == r.within, all_equal);
        if all_equal {
            prop_assert_eq!(r.df, DF_CAP);
        }
    }

    #[test]
    fn pooling_fits_pools_each_coefficient(qu in fits_strategy()) {
        let fits: Vec<Fit> = qu
            .iter()
            .map(|&(q, u)| Fit {
                names: vec!["a".into(), "b".into()],
                estimates: vec![q, -q],
                variances: vec![u, 2.0 * u],
                gradient: vec![0.0, 0.0],
            })
            .collect();
        let r = rubin_pool(&fits).unwrap();
        let a = r.get("a").unwrap();
        let b = r.get("b").unwrap();
        prop_assert!((a.estimate + b.estimate).abs() < 1e-12);
        prop_assert!((2.0 * a.within - b.within).abs() < 1e-12 * b.within);
        prop_assert_eq!(a.between, b.between);
    }
}
