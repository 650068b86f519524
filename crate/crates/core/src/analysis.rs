//! Analysis models fitted to completed datasets, Rubin pooling and the
//! two simulation scenarios used for validation.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnRef, Dataset, SubjectRecord, VisitType, INTERCEPT};
use crate::numeric::{expit, ln_norm_cdf, norm_cdf, ln_norm_pdf, t_cdf};
use crate::samplers::RngStream;
use crate::{Error, Result};

/// Degrees of freedom used when the between-imputation variance vanishes.
pub const DF_CAP: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisFamily {
    Logistic,
    Probit,
    Linear,
}

/// Regression of one response visit on named columns. For binary
/// responses the event is level 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    pub response: String,
    pub family: AnalysisFamily,
    /// Covariate or visit names; defaults to all covariates.
    #[serde(default)]
    pub predictors: Vec<String>,
    /// Coefficient reported as the effect of interest; defaults to the treatment.
    #[serde(default)]
    pub coefficient: Option<String>,
}

impl AnalysisSpec {
    pub fn new(response: &str, family: AnalysisFamily) -> Self {
        AnalysisSpec { response: response.into(), family, predictors: Vec::new(), coefficient: None }
    }

    fn predictor_names(&self, ds: &Dataset) -> Vec<String> {
        if self.predictors.is_empty() {
            ds.covariate_names.clone()
        } else {
            self.predictors.clone()
        }
    }

    /// Name of the coefficient of interest.
    pub fn target(&self, ds: &Dataset) -> Option<String> {
        self.coefficient.clone().or_else(|| ds.treatment.map(|t| ds.covariate_names[t].clone()))
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let resp = match ds.column(&self.response) {
            Some(ColumnRef::Visit(j)) => j,
            _ => return Err(Error::config(format!("analysis.response: `{}` is not a visit", self.response))),
        };
        if self.family != AnalysisFamily::Linear && ds.visit_types[resp] != VisitType::Binary {
            return Err(Error::config(format!("analysis.family: `{}` is not binary", self.response)));
        }
        let names = self.predictor_names(ds);
        for n in &names {
            match ds.column(n) {
                None => return Err(Error::config(format!("analysis.predictors: unknown column `{n}`"))),
                Some(ColumnRef::Visit(j)) if j == resp => {
                    return Err(Error::config("analysis.predictors: response used as predictor"))
                }
                _ => {}
            }
        }
        if let Some(t) = self.target(ds) {
            if !names.contains(&t) {
                return Err(Error::config(format!("analysis.coefficient: `{t}` is not a predictor")));
            }
        }
        Ok(())
    }
}

/// Estimates and variances from one completed dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub variances: Vec<f64>,
    /// Log-likelihood gradient at the estimate.
    pub gradient: Vec<f64>,
}

fn design_matrix(ds: &Dataset, spec: &AnalysisSpec) -> Result<(DMatrix<f64>, DVector<f64>, Vec<String>)> {
    spec.validate(ds)?;
    let names = spec.predictor_names(ds);
    let cols: Vec<ColumnRef> = names.iter().map(|n| ds.column(n).unwrap()).collect();
    let Some(ColumnRef::Visit(resp)) = ds.column(&spec.response) else { unreachable!() };
    let binary = spec.family != AnalysisFamily::Linear;
    let n = ds.n();
    let mut x = DMatrix::zeros(n, names.len());
    let mut y = DVector::zeros(n);
    for (i, s) in ds.subjects.iter().enumerate() {
        for (c, col) in cols.iter().enumerate() {
            x[(i, c)] = match *col {
                ColumnRef::Covariate(k) => s.x[k],
                ColumnRef::Visit(j) => {
                    if !s.observed[j] {
                        return Err(Error::domain(format!("subject {}: `{}` is missing", s.id, names[c])));
                    }
                    s.y[j]
                }
            };
        }
        if !s.observed[resp] {
            return Err(Error::domain(format!("subject {}: response is missing", s.id)));
        }
        y[i] = if binary { f64::from(u8::from(s.y[resp] == 1.0)) } else { s.y[resp] };
    }
    Ok((x, y, names))
}

fn fit_error(reason: impl Into<String>) -> Error {
    Error::Fit { target: "analysis model".into(), reason: reason.into() }
}

/// Per-row log-likelihood, score weight and curvature in the linear predictor.
fn binary_terms(family: AnalysisFamily, eta: f64, y: f64) -> (f64, f64, f64) {
    match family {
        AnalysisFamily::Logistic => {
            let p = expit(eta);
            let ll = if y == 1.0 { crate::numeric::log_expit(eta) } else { crate::numeric::log_expit(-eta) };
            (ll, y - p, p * (1.0 - p))
        }
        _ => {
            // ∂/∂η ln Φ(±η) = ±φ/Φ(±η); minus second derivative m(m + ±η)
            let sgn = if y == 1.0 { 1.0 } else { -1.0 };
            let a = sgn * eta;
            let m = (ln_norm_pdf(a) - ln_norm_cdf(a)).exp();
            (ln_norm_cdf(a), sgn * m, m * (m + a))
        }
    }
}

/// Maximum-likelihood fit with variances from the inverse observed information.
pub fn fit_analysis(ds: &Dataset, spec: &AnalysisSpec) -> Result<Fit> {
    let (x, y, names) = design_matrix(ds, spec)?;
    let (n, k) = x.shape();
    if n <= k {
        return Err(fit_error(format!("{n} rows for {k} coefficients")));
    }
    let xtx = x.transpose() * &x;
    let Some(chol) = nalgebra::Cholesky::new(xtx.clone()) else {
        return Err(fit_error("singular design matrix"));
    };
    if chol.l().diagonal().iter().any(|&d| d < 1e-10 * xtx.diagonal().amax().sqrt()) {
        return Err(fit_error("singular design matrix"));
    }
    if spec.family == AnalysisFamily::Linear {
        let beta = chol.solve(&(x.transpose() * &y));
        let r = &y - &x * &beta;
        let s2 = r.norm_squared() / (n - k) as f64;
        let inv = chol.inverse();
        let grad = x.transpose() * &r;
        return Ok(Fit {
            names,
            estimates: beta.as_slice().to_vec(),
            variances: inv.diagonal().iter().map(|v| v * s2).collect(),
            gradient: grad.as_slice().to_vec(),
        });
    }
    let (ones, zeros) = (y.sum(), n as f64 - y.sum());
    if ones == 0.0 || zeros == 0.0 {
        return Err(fit_error("response has a single level"));
    }
    let eval = |b: &DVector<f64>| {
        let eta = &x * b;
        let mut ll = 0.0;
        let mut g = DVector::zeros(k);
        let mut h = DMatrix::zeros(k, k);
        for i in 0..n {
            let (l, s, w) = binary_terms(spec.family, eta[i], y[i]);
            ll += l;
            let xi = x.row(i).transpose();
            g += &xi * s;
            h.ger(w, &xi, &xi, 1.0);
        }
        (ll, g, h)
    };
    let mut beta = DVector::zeros(k);
    let (mut ll, mut g, mut h) = eval(&beta);
    let mut converged = false;
    for _ in 0..100 {
        let Some(c) = nalgebra::Cholesky::new(h.clone()) else { break };
        let step = c.solve(&g);
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let (l2, g2, h2) = eval(&cand);
            if l2.is_finite() && l2 >= ll - 1e-12 * ll.abs() {
                beta = cand;
                (ll, g, h) = (l2, g2, h2);
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                break;
            }
        }
        if g.amax() < 1e-11 * n as f64 || (&step * t).amax() < 1e-13 {
            converged = g.amax() < 1e-8 * n as f64;
            break;
        }
    }
    if !converged || beta.amax() > 50.0 {
        return Err(fit_error("no finite maximum; the binary response is (quasi-)separated"));
    }
    let inv = nalgebra::Cholesky::new(h).ok_or_else(|| fit_error("information matrix not positive definite"))?.inverse();
    Ok(Fit {
        names,
        estimates: beta.as_slice().to_vec(),
        variances: inv.diagonal().iter().copied().collect(),
        gradient: g.as_slice().to_vec(),
    })
}

/// Rubin's rules for one coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledCoefficient {
    pub name: String,
    pub estimate: f64,
    pub within: f64,
    /// Undefined for a single imputation.
    pub between: Option<f64>,
    pub total: f64,
    pub df: f64,
    pub t: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledResult {
    pub m: usize,
    pub coefficients: Vec<PooledCoefficient>,
}

/// Two-sided p-value from a t reference distribution.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { f64::NAN } else { 0.0 };
    }
    if df >= 1e7 {
        2.0 * norm_cdf(-t.abs())
    } else {
        2.0 * t_cdf(-t.abs(), df)
    }
}

pub fn rubin_pool_one(name: &str, q: &[f64], u: &[f64]) -> Result<PooledCoefficient> {
    let m = q.len();
    if m == 0 || u.len() != m {
        return Err(Error::config("pooling needs at least one imputation"));
    }
    let mf = m as f64;
    let qbar = q.iter().sum::<f64>() / mf;
    let w = u.iter().sum::<f64>() / mf;
    let (between, total, df) = if m == 1 {
        (None, w, DF_CAP)
    } else {
        let b = q.iter().map(|v| (v - qbar).powi(2)).sum::<f64>() / (mf - 1.0);
        let bt = (1.0 + 1.0 / mf) * b;
        let df = if bt > 0.0 { ((mf - 1.0) * (1.0 + w / bt).powi(2)).min(DF_CAP) } else { DF_CAP };
        (Some(b), w + bt, df)
    };
    let t = qbar / total.sqrt();
    Ok(PooledCoefficient { name: name.into(), estimate: qbar, within: w, between, total, df, t, p: two_sided_p(t, df) })
}

pub fn rubin_pool(fits: &[Fit]) -> Result<PooledResult> {
    let Some(first) = fits.first() else {
        return Err(Error::config("pooling needs at least one imputation"));
    };
    let coefficients = first
        .names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let q: Vec<f64> = fits.iter().map(|f| f.estimates[c]).collect();
            let u: Vec<f64> = fits.iter().map(|f| f.variances[c]).collect();
            rubin_pool_one(name, &q, &u)
        })
        .collect::<Result<_>>()?;
    Ok(PooledResult { m: fits.len(), coefficients })
}

impl PooledResult {
    pub fn get(&self, name: &str) -> Option<&PooledCoefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["coefficient", "estimate", "between", "within", "total", "df", "t", "p"])?;
        for c in &self.coefficients {
            wtr.write_record(&[
                c.name.clone(),
                c.estimate.to_string(),
                c.between.map_or_else(|| "NA".to_string(), |b| b.to_string()),
                c.within.to_string(),
                c.total.to_string(),
                c.df.to_string(),
                c.t.to_string(),
                c.p.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Fit every completed dataset and pool.
pub fn analyze_all(datasets: &[Dataset], spec: &AnalysisSpec) -> Result<PooledResult> {
    use rayon::prelude::*;
    let fits: Vec<Fit> = datasets.par_iter().map(|d| fit_analysis(d, spec)).collect::<Result<_>>()?;
    rubin_pool(&fits)
}

/// A simulated trial: the observed data and the complete data before
/// dropout and intermittent missingness were applied.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub observed: Dataset,
    pub full: Dataset,
}

pub const SCENARIO_SKEW_PSI: f64 = 2.0;
pub const SCENARIO_SKEW_NU: f64 = 10.0;
/// Noise sd of the visit-2 probit latent given `(y0, y1)`; the latent given `(y0, g)` then has unit variance in
/// scenario 1. Pass 1.0 to [`simulate_scenario_with`] for a unit-scale conditional probit.
pub const SCENARIO_LATENT_SD: f64 = 0.6;

/// Two-visit trial with baseline `y0`, treatment `g`, a continuous `y1`
/// (normal in scenario 1, skew-t in scenario 2) and a binary `y2`.
pub fn simulate_scenario(which: u8, n: usize, seed: u64) -> Result<Scenario> {
    simulate_scenario_with(which, n, seed, SCENARIO_LATENT_SD)
}

/// [`simulate_scenario`] with an explicit probit latent noise sd.
pub fn simulate_scenario_with(which: u8, n: usize, seed: u64, latent_sd: f64) -> Result<Scenario> {
    if !(which == 1 || which == 2) {
        return Err(Error::config(format!("unknown scenario {which}")));
    }
    if !(latent_sd.is_finite() && latent_sd > 0.0) {
        return Err(Error::config(format!("latent sd must be positive, got {latent_sd}")));
    }
    let mut rng = RngStream::new(seed).derive(&[0x5CE7, u64::from(which)]);
    let mut obs = Vec::with_capacity(n);
    let mut full = Vec::with_capacity(n);
    for i in 0..n {
        let g = f64::from(u8::from(i >= n / 2));
        let y0 = rng.normal();
        let y1 = if which == 1 {
            0.5 + 0.5 * y0 + g + rng.normal()
        } else {
            let nu = SCENARIO_SKEW_NU;
            let d = rng.gamma(0.5 * nu, 0.5 * nu);
            let w = crate::samplers::draw_positive_normal(0.0, 1.0 / d, &mut rng);
            let mu = 0.5 - 2.0 * (2.0 / std::f64::consts::PI).sqrt() + 0.5 * y0 + g;
            mu + SCENARIO_SKEW_PSI * w + rng.normal() / d.sqrt()
        };
        let pr = norm_cdf((-0.5 + 0.25 * y0 + 0.8 * y1) / latent_sd);
        let y2 = if rng.uniform() < pr { 1.0 } else { 2.0 };
        let s = if rng.uniform() < expit(0.3 * y0 - 3.0) {
            0
        } else if rng.uniform() < expit(0.3 * y0 + y1 - 2.0) {
            1
        } else {
            2
        };
        let y1_obs = match s {
            0 => None,
            1 => Some(y1),
            _ => (rng.uniform() >= 0.2).then_some(y1),
        };
        let y2_obs = (s == 2).then_some(y2);
        let id = format!("{}", i + 1);
        obs.push(SubjectRecord::new(id.clone(), vec![1.0, y0, g], vec![y1_obs, y2_obs]));
        full.push(SubjectRecord::new(id, vec![1.0, y0, g], vec![Some(y1), Some(y2)]));
    }
    let make = |subjects| {
        Dataset::new(
            vec![INTERCEPT.into(), "y0".into(), "g".into()],
            vec!["y1".into(), "y2".into()],
            vec![VisitType::Continuous, VisitType::Binary],
            subjects,
            Some(2),
        )
    };
    Ok(Scenario { observed: make(obs)?, full: make(full)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_ds(rows: &[(f64, f64)]) -> Dataset {
        let subjects = rows
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| SubjectRecord::new(i.to_string(), vec![1.0, x], vec![Some(y)]))
            .collect();
        Dataset::new(vec![INTERCEPT.into(), "x".into()], vec!["y".into()], vec![VisitType::Binary], subjects, Some(1))
            .unwrap()
    }

    #[test]
    fn rubin_arithmetic() {
        let r = rubin_pool_one("b", &[1.0, 3.0], &[1.0, 1.0]).unwrap();
        assert_eq!((r.estimate, r.within, r.between, r.total), (2.0, 1.0, Some(2.0), 4.0));
        let same = rubin_pool_one("b", &[1.5; 4], &[0.2; 4]).unwrap();
        assert_eq!(same.total, same.within);
        assert_eq!(same.df, DF_CAP);
        let single = rubin_pool_one("b", &[1.5], &[0.2]).unwrap();
        assert!(single.between.is_none());
        assert!(rubin_pool_one("b", &[], &[]).is_err());
    }

    #[test]
    fn linear_matches_normal_equations() {
        let subjects = (0..20)
            .map(|i| {
                let x = i as f64 / 3.0;
                SubjectRecord::new(i.to_string(), vec![1.0, x], vec![Some(1.0 + 2.0 * x + ((i * 7) % 5) as f64 * 0.1)])
            })
            .collect();
        let ds = Dataset::new(vec![INTERCEPT.into(), "x".into()], vec!["y".into()], vec![VisitType::Continuous], subjects, None)
            .unwrap();
        let f = fit_analysis(&ds, &AnalysisSpec::new("y", AnalysisFamily::Linear)).unwrap();
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for s in &ds.subjects {
            sx += s.x[1];
            sy += s.y[0];
            sxx += s.x[1] * s.x[1];
            sxy += s.x[1] * s.y[0];
        }
        let n = 20.0;
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let icpt = (sy - slope * sx) / n;
        assert!((f.estimates[1] - slope).abs() < 1e-10 && (f.estimates[0] - icpt).abs() < 1e-10);
    }

    #[test]
    fn logistic_balanced_intercept() {
        // x centered and balanced within each outcome: slope 0, intercept logit(mean)
        let mut rows = Vec::new();
        for _ in 0..3 {
            rows.extend([(1.0, 1.0), (-1.0, 1.0), (1.0, 2.0), (-1.0, 2.0), (1.0, 2.0), (-1.0, 2.0)]);
        }
        let f = fit_analysis(&binary_ds(&rows), &AnalysisSpec::new("y", AnalysisFamily::Logistic)).unwrap();
        assert!((f.estimates[0] - (1.0f64 / 2.0).ln()).abs() < 1e-9);
        assert!(f.estimates[1].abs() < 1e-9);
    }

    #[test]
    fn separation_is_named() {
        let rows: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, if i < 10 { 1.0 } else { 2.0 })).collect();
        let e = fit_analysis(&binary_ds(&rows), &AnalysisSpec::new("y", AnalysisFamily::Logistic)).unwrap_err();
        assert!(matches!(e, Error::Fit { .. }));
    }

    #[test]
    fn probit_logit_ratio() {
        let sc = simulate_scenario(1, 4000, 3).unwrap();
        let mut spec = AnalysisSpec::new("y2", AnalysisFamily::Probit);
        let p = fit_analysis(&sc.full, &spec).unwrap();
        spec.family = AnalysisFamily::Logistic;
        let l = fit_analysis(&sc.full, &spec).unwrap();
        let ratio = l.estimates[2] / p.estimates[2];
        assert!((1.5..1.9).contains(&ratio), "{ratio}");
        for g in p.gradient.iter().chain(&l.gradient) {
            assert!(g.abs() < 1e-8 * 4000.0);
        }
    }

    #[test]
    fn scenario_layout() {
        assert!(simulate_scenario(3, 10, 1).is_err());
        let e = simulate_scenario(1, 0, 1).unwrap();
        assert_eq!(e.observed.n(), 0);
        let sc = simulate_scenario(2, 10, 1).unwrap();
        assert_eq!(sc.observed.treatment, Some(2));
        assert!(sc.observed.subjects.iter().all(|s| s.x[0] == 1.0));
        assert_eq!(sc.full.missing_count(), 0);
    }

    #[test]
    fn full_data_probit_matches_marginal_latent_scale() {
        // Marginal over y1: coefficient on g is 0.8 / sqrt(sd^2 + 0.64).
        let spec = AnalysisSpec::new("y2", AnalysisFamily::Probit);
        for sd in [SCENARIO_LATENT_SD, 1.0] {
            let sc = simulate_scenario_with(1, 40_000, 11, sd).unwrap();
            let f = fit_analysis(&sc.full, &spec).unwrap();
            let target = 0.8 / (sd * sd + 0.64).sqrt();
            assert!((f.estimates[2] - target).abs() < 4.0 * f.variances[2].sqrt(), "{sd}: {} vs {target}", f.estimates[2]);
        }
        assert!(simulate_scenario_with(1, 5, 1, 0.0).is_err());
    }
}
