//! Fully conditional specification: variable-by-variable imputation of the
//! intermittent cells, then a draw from the sequential model on the monotone
//! completion and controlled imputation of post-dropout cells.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controlled::{generate_imputations, Mechanism};
use crate::data::Dataset;
use crate::design::Design;
use crate::family::{Family, FamilyKind, SliceTarget};
use crate::mda::{normal_gamma_matrix, ModelSpec, PosteriorDraw, PriorSpec};
use crate::numeric::mean;
use crate::samplers::{draw_normal_gamma, posterior_mode, GaussianPrior, GlmTarget, RngStream};
use crate::{Error, Result};

/// Fitted probability of the observed category above which every row
/// counts as perfectly predicted.
const SEPARATION_PROB: f64 = 1.0 - 1e-4;
const RETRY_RIDGE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcsVisit {
    pub family: FamilyKind,
    pub design: Design,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcsSpec {
    pub visits: Vec<FcsVisit>,
    /// Sweeps run from fresh fills before each imputation.
    pub sweeps: usize,
    /// Visit order within a sweep; natural order when empty.
    #[serde(default)]
    pub order: Vec<usize>,
}

impl FcsSpec {
    /// Each visit given all covariates and all other visits.
    pub fn default_for(ds: &Dataset) -> FcsSpec {
        FcsSpec {
            visits: (0..ds.p())
                .map(|j| FcsVisit { family: FamilyKind::default_for(ds.visit_types[j]), design: Design::all_others(ds, j) })
                .collect(),
            sweeps: 200,
            order: Vec::new(),
        }
    }

    pub fn order(&self) -> Vec<usize> {
        if self.order.is_empty() {
            (0..self.visits.len()).collect()
        } else {
            self.order.clone()
        }
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.visits.len() != ds.p() {
            return Err(Error::config(format!("fcs has {} visits, data has {}", self.visits.len(), ds.p())));
        }
        for (j, v) in self.visits.iter().enumerate() {
            if !v.family.compatible(ds.visit_types[j]) {
                return Err(Error::config(format!("fcs.visits[{j}].family: does not fit the visit type")));
            }
            if v.family.is_skew() {
                return Err(Error::config(format!("fcs.visits[{j}].family: skew families are not available in FCS")));
            }
            if v.design.references(j) {
                return Err(Error::config(format!("fcs.visits[{j}].design: uses the visit itself")));
            }
            if v.design.q != ds.q() {
                return Err(Error::config(format!("fcs.visits[{j}].design: covariate count mismatch")));
            }
        }
        let mut ord = self.order();
        ord.sort_unstable();
        if ord != (0..ds.p()).collect::<Vec<_>>() {
            return Err(Error::config("fcs.order: must be a permutation of the visits"));
        }
        Ok(())
    }
}

fn fit_error(name: &str, reason: impl Into<String>) -> Error {
    Error::Fit { target: format!("visit `{name}`"), reason: reason.into() }
}

enum MleFailure {
    Separation,
    Other(String),
}

/// Maximum-likelihood fit; returns the information matrix at the estimate.
fn mle(fam: &mut Family, y: &[f64], z: &[f64], ridge: f64) -> std::result::Result<DMatrix<f64>, MleFailure> {
    let k = fam.coef.len();
    let l = fam.dim_z();
    let flat = GaussianPrior::flat(k);
    let rounds = if fam.kind == FamilyKind::NegBinomial { 4 } else { 1 };
    for _ in 0..rounds {
        let snapshot = fam.clone();
        let target = SliceTarget { family: &snapshot, y, z };
        let (b, converged) = posterior_mode(&target, &DVector::from_vec(fam.coef.clone()), &flat, ridge, 200)
            .map_err(|e| MleFailure::Other(e.to_string()))?;
        if b.iter().any(|v| !v.is_finite()) {
            return Err(MleFailure::Other("estimates are not finite".into()));
        }
        fam.coef = b.as_slice().to_vec();
        let categorical = matches!(fam.kind, FamilyKind::Logistic | FamilyKind::PropOdds(_) | FamilyKind::MultiLogit(_));
        let all_above = |p: f64| {
            y.iter().enumerate().all(|(i, &yi)| fam.log_density_shifted(yi, &z[i * l..(i + 1) * l], 0.0, None) > p.ln())
        };
        if categorical && all_above(SEPARATION_PROB) {
            return Err(MleFailure::Separation);
        }
        if !converged || b.amax() > 1e3 {
            // Diverging estimates that already classify every row correctly.
            if categorical && ridge == 0.0 && all_above(0.5) {
                return Err(MleFailure::Separation);
            }
            return Err(MleFailure::Other("maximum-likelihood iterations did not converge".into()));
        }
        if fam.kind == FamilyKind::NegBinomial {
            fam.kappa = profile_kappa(fam, y, z).exp();
        }
    }
    let target = SliceTarget { family: fam, y, z };
    let mut g = DVector::zeros(k);
    let mut info = DMatrix::zeros(k, k);
    target.evaluate(&fam.coef, &mut g, &mut info);
    for d in 0..k {
        info[(d, d)] += ridge;
    }
    Ok(info)
}

fn nb_loglik(fam: &Family, y: &[f64], z: &[f64], log_kappa: f64) -> f64 {
    let mut f = fam.clone();
    f.kappa = log_kappa.exp();
    let l = f.dim_z();
    y.iter().enumerate().map(|(i, &yi)| f.log_density_shifted(yi, &z[i * l..(i + 1) * l], 0.0, None)).sum()
}

/// Golden-section maximum of the log-likelihood in `ln κ` on [-12, 6].
fn profile_kappa(fam: &Family, y: &[f64], z: &[f64]) -> f64 {
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (-12.0, 6.0);
    let f = |t: f64| nb_loglik(fam, y, z, t);
    let (mut c, mut d) = (b - phi * (b - a), a + phi * (b - a));
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-6 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Draw from the normal approximation of the posterior of one regression
/// (exact normal-gamma for the normal family), flat priors throughout.
pub fn draw_asymptotic(kind: FamilyKind, l: usize, y: &[f64], z: &[f64], name: &str, rng: &mut RngStream) -> Result<Family> {
    let mut fam = Family::new(kind, l);
    let n = y.len();
    match kind {
        FamilyKind::Normal => {
            if n <= l {
                return Err(fit_error(name, format!("{n} rows for {l} coefficients")));
            }
            let (dm, m) = normal_gamma_matrix(y, z, l, &GaussianPrior::flat(l), &PriorSpec::default());
            let (beta, gamma) = draw_normal_gamma(&dm, m, rng).map_err(|e| fit_error(name, e.to_string()))?;
            fam.coef = beta.as_slice().to_vec();
            fam.precision = gamma;
            Ok(fam)
        }
        k if k.is_skew() => Err(Error::config(format!("visit `{name}`: skew families are not available in FCS"))),
        _ => {
            if n == 0 {
                return Err(fit_error(name, "no observed rows"));
            }
            let start = fam.clone();
            let separation = "complete separation: every observed category is predicted with certainty";
            let info = match mle(&mut fam, y, z, 0.0) {
                Ok(info) => info,
                Err(MleFailure::Separation) => return Err(fit_error(name, separation)),
                Err(MleFailure::Other(first)) => {
                    log::debug!("visit `{name}`: {first}; retrying with ridge {RETRY_RIDGE}");
                    fam = start;
                    mle(&mut fam, y, z, RETRY_RIDGE).map_err(|e| match e {
                        MleFailure::Separation => fit_error(name, separation),
                        MleFailure::Other(r) => fit_error(name, r),
                    })?
                }
            };
            let chol = nalgebra::Cholesky::new(info).ok_or_else(|| fit_error(name, "information matrix singular"))?;
            let k = fam.coef.len();
            let e = DVector::from_iterator(k, (0..k).map(|_| rng.normal()));
            let step = chol.l().transpose().solve_upper_triangular(&e).ok_or_else(|| fit_error(name, "singular factor"))?;
            for (c, s) in fam.coef.iter_mut().zip(step.iter()) {
                *c += s;
            }
            if kind == FamilyKind::NegBinomial {
                let t0 = fam.kappa.ln();
                let h = 1e-3;
                let curv =
                    -(nb_loglik(&fam, y, z, t0 + h) - 2.0 * nb_loglik(&fam, y, z, t0) + nb_loglik(&fam, y, z, t0 - h)) / (h * h);
                if curv > 0.0 {
                    fam.kappa = (t0 + rng.normal() / curv.sqrt()).exp();
                }
            }
            Ok(fam)
        }
    }
}

/// Current fills of one FCS chain, in the dataset's subject order.
pub struct FcsState<'a> {
    ds: &'a Dataset,
    spec: &'a FcsSpec,
    pub values: Vec<Vec<f64>>,
    pub params: Vec<Option<Family>>,
}

impl<'a> FcsState<'a> {
    /// Fill every unobserved cell: visit mean for continuous visits, a draw
    /// from the observed values otherwise.
    pub fn new(ds: &'a Dataset, spec: &'a FcsSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate(ds)?;
        let q = ds.q();
        let mut values: Vec<Vec<f64>> = (0..ds.n()).map(|i| ds.row_values(i)).collect();
        for j in 0..ds.p() {
            let obs: Vec<f64> = ds.subjects.iter().filter(|s| s.observed[j]).map(|s| s.y[j]).collect();
            if obs.is_empty() {
                return Err(fit_error(&ds.visit_names[j], "no observed rows"));
            }
            let m = mean(&obs);
            for (i, s) in ds.subjects.iter().enumerate() {
                if !s.observed[j] {
                    values[i][q + j] = if ds.visit_types[j].is_discrete() { obs[rng.below(obs.len())] } else { m };
                }
            }
        }
        Ok(FcsState { ds, spec, values, params: vec![None; ds.p()] })
    }

    /// One pass over the visits: draw the conditional's parameters from the
    /// rows observing the visit, then redraw every unobserved cell of it.
    /// Post-dropout fills only serve as predictors and are discarded later.
    pub fn sweep(&mut self, rng: &mut RngStream) -> Result<()> {
        let q = self.ds.q();
        for j in self.spec.order() {
            let v = &self.spec.visits[j];
            let l = v.design.dim();
            let mut y = Vec::new();
            let mut z = Vec::new();
            for (i, s) in self.ds.subjects.iter().enumerate() {
                if s.observed[j] {
                    y.push(s.y[j]);
                    z.extend(v.design.eval(&self.values[i]));
                }
            }
            let fam = draw_asymptotic(v.family, l, &y, &z, &self.ds.visit_names[j], rng)?;
            for (i, s) in self.ds.subjects.iter().enumerate() {
                if !s.observed[j] {
                    let zi = v.design.eval(&self.values[i]);
                    self.values[i][q + j] = fam.sample_response(&zi, rng);
                }
            }
            self.params[j] = Some(fam);
        }
        Ok(())
    }

    /// Monotone completion: intermittent fills kept, post-dropout cells NaN.
    pub fn monotone_values(&self) -> Vec<Vec<f64>> {
        let q = self.ds.q();
        self.values
            .iter()
            .zip(&self.ds.subjects)
            .map(|(v, s)| {
                let mut v = v.clone();
                for j in s.s..self.ds.p() {
                    v[q + j] = f64::NAN;
                }
                v
            })
            .collect()
    }
}

/// Sequential-model parameters from the monotone completion (rows with
/// `s_i > j` for visit `j`).
pub fn draw_sequential(ds: &Dataset, seq: &ModelSpec, values: &[Vec<f64>], rng: &mut RngStream) -> Result<Vec<Family>> {
    let q = ds.q();
    (0..ds.p())
        .map(|j| {
            let vm = &seq.visits[j];
            let mut y = Vec::new();
            let mut z = Vec::new();
            for (i, s) in ds.subjects.iter().enumerate() {
                if s.s > j {
                    y.push(values[i][q + j]);
                    z.extend(vm.design.eval(&values[i]));
                }
            }
            draw_asymptotic(vm.family, vm.design.dim(), &y, &z, &ds.visit_names[j], rng)
        })
        .collect()
}

/// `m` independent restarts, each giving a monotone completion and a
/// sequential-model parameter draw.
pub fn fcs_draws(ds: &Dataset, fcs: &FcsSpec, seq: &ModelSpec, m: usize, seed: u64) -> Result<Vec<PosteriorDraw>> {
    if m == 0 {
        return Err(Error::config("fcs: number of imputations must be at least 1"));
    }
    fcs.validate(ds)?;
    seq.validate(ds)?;
    if let Some(j) = seq.visits.iter().position(|v| v.family.is_skew()) {
        return Err(Error::config(format!("model.visits[{j}].family: skew families are not available in FCS")));
    }
    let base = RngStream::new(seed).derive(&[0xFC5]);
    (0..m)
        .into_par_iter()
        .map(|k| {
            let mut rng = base.derive(&[k as u64]);
            let mut st = FcsState::new(ds, fcs, &mut rng)?;
            for _ in 0..fcs.sweeps {
                st.sweep(&mut rng)?;
            }
            let values = st.monotone_values();
            let params = draw_sequential(ds, seq, &values, &mut rng)?;
            Ok(PosteriorDraw { params, values })
        })
        .collect()
}

/// FCS for the intermittent cells, then controlled imputation after dropout.
pub fn fcs_mnar_pipeline(
    ds: &Dataset,
    fcs: &FcsSpec,
    seq: &ModelSpec,
    mechanism: &Mechanism,
    m: usize,
    seed: u64,
) -> Result<Vec<Dataset>> {
    mechanism.validate(ds)?;
    let draws = fcs_draws(ds, fcs, seq, m, seed)?;
    generate_imputations(ds, seq, &draws, mechanism, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SubjectRecord, VisitType, INTERCEPT};

    fn toy() -> Dataset {
        let mut rng = RngStream::new(11);
        let subjects = (0..80)
            .map(|i| {
                let x = rng.normal();
                let y1 = x + rng.normal();
                let y2 = 0.5 * y1 + rng.normal();
                let y = match i % 4 {
                    0 => vec![None, Some(y2)],
                    1 => vec![Some(y1), None],
                    _ => vec![Some(y1), Some(y2)],
                };
                SubjectRecord::new(i.to_string(), vec![1.0, x], y)
            })
            .collect();
        Dataset::new(
            vec![INTERCEPT.into(), "x".into()],
            vec!["y1".into(), "y2".into()],
            vec![VisitType::Continuous, VisitType::Continuous],
            subjects,
            Some(1),
        )
        .unwrap()
    }

    #[test]
    fn sweeps_keep_observed_cells() {
        let ds = toy();
        let spec = FcsSpec::default_for(&ds);
        let mut rng = RngStream::new(1);
        let mut st = FcsState::new(&ds, &spec, &mut rng).unwrap();
        for _ in 0..5 {
            st.sweep(&mut rng).unwrap();
        }
        for (i, s) in ds.subjects.iter().enumerate() {
            for j in 0..2 {
                if s.observed[j] {
                    assert_eq!(st.values[i][2 + j], s.y[j]);
                }
            }
        }
        let mono = st.monotone_values();
        assert!(mono[1][3].is_nan());
        assert!(mono[0][2].is_finite());
    }

    #[test]
    fn zero_imputations_rejected() {
        let ds = toy();
        let r = fcs_draws(&ds, &FcsSpec::default_for(&ds), &ModelSpec::default_for(&ds), 0, 1);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn separated_conditional_names_the_visit() {
        let y: Vec<f64> = (0..30).map(|i| if i < 15 { 1.0 } else { 2.0 }).collect();
        let z: Vec<f64> = (0..30).flat_map(|i| [1.0, i as f64 - 14.5]).collect();
        let e = draw_asymptotic(FamilyKind::Logistic, 2, &y, &z, "y7", &mut RngStream::new(1)).unwrap_err();
        match e {
            Error::Fit { target, .. } => assert!(target.contains("y7")),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn asymptotic_draw_centres_on_mle() {
        let mut rng = RngStream::new(5);
        let n = 400;
        let z: Vec<f64> = (0..n).flat_map(|_| [1.0, rng.normal()]).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| if rng.uniform() < crate::numeric::expit(0.3 + 0.8 * z[2 * i + 1]) { 1.0 } else { 2.0 })
            .collect();
        let draws: Vec<Family> =
            (0..400).map(|_| draw_asymptotic(FamilyKind::Logistic, 2, &y, &z, "y", &mut rng).unwrap()).collect();
        let mut fam = Family::new(FamilyKind::Logistic, 2);
        let info = mle(&mut fam, &y, &z, 0.0).ok().unwrap();
        let cov = info.try_inverse().unwrap();
        for c in 0..2 {
            let m = draws.iter().map(|d| d.coef[c]).sum::<f64>() / 400.0;
            assert!((m - fam.coef[c]).abs() < 4.0 * (cov[(c, c)] / 400.0).sqrt());
        }
    }

    #[test]
    fn skew_conditionals_rejected() {
        let ds = toy();
        let mut spec = FcsSpec::default_for(&ds);
        spec.visits[0].family = FamilyKind::SkewT;
        assert!(matches!(spec.validate(&ds), Err(Error::Config(_))));
    }
}
