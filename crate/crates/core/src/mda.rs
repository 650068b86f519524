//! Monotone data augmentation: per-visit parameter draws given the monotone
//! completed data, alternated with imputation of intermittent missing cells.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{classify_missingness, monotone_order, sort_monotone, Dataset, MissingnessPartition};
use crate::design::Design;
use crate::family::{Family, FamilyKind, Latent, LinearPredictorContext, SliceTarget};
use crate::numeric::{cholesky_ridge, mean};
use crate::samplers::{
    default_blocks, draw_normal_gamma, mh_update_beta, posterior_mode, rw_mh_lognu, GaussianPrior, MhTuning, RngStream,
};
use crate::skewt::{gibbs_cycle, GibbsOptions, PcPrior, SkewState, SkewTHyper, SkewVariant};
use crate::{Error, Result};

const MAX_COMBINATIONS: usize = 1_000_000;

/// Prior settings of one visit. Coefficient priors are Gaussian with the
/// given mean and diagonal precision (flat by default); for continuous
/// families they are conjugate, i.e. scaled by the precision `γ`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub coef_mean: Option<Vec<f64>>,
    pub coef_precision: Option<Vec<f64>>,
    /// Gamma prior on the normal precision; `(0, 0)` is `π(γ) ∝ 1/γ`.
    pub gamma_shape: f64,
    pub gamma_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitModel {
    pub family: FamilyKind,
    pub design: Design,
    pub prior: PriorSpec,
    pub skew: SkewTHyper,
}

impl VisitModel {
    pub fn n_coef(&self) -> usize {
        self.family.n_coef(self.design.dim())
    }

    pub fn coef_prior(&self) -> GaussianPrior {
        let k = self.n_coef();
        let mean = self.prior.coef_mean.clone().unwrap_or_else(|| vec![0.0; k]);
        let prec = self.prior.coef_precision.clone().unwrap_or_else(|| vec![0.0; k]);
        GaussianPrior {
            mean: DVector::from_vec(mean),
            precision: DMatrix::from_diagonal(&DVector::from_vec(prec)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub visits: Vec<VisitModel>,
}

impl ModelSpec {
    /// Main-effects designs with the default family for each visit type.
    pub fn default_for(ds: &Dataset) -> ModelSpec {
        let kinds: Vec<FamilyKind> = ds.visit_types.iter().map(|&v| FamilyKind::default_for(v)).collect();
        Self::with_families(ds, &kinds)
    }

    pub fn with_families(ds: &Dataset, kinds: &[FamilyKind]) -> ModelSpec {
        ModelSpec {
            visits: kinds
                .iter()
                .enumerate()
                .map(|(j, &family)| VisitModel {
                    family,
                    design: Design::main_effects(ds, j),
                    prior: PriorSpec::default(),
                    skew: SkewTHyper::default(),
                })
                .collect(),
        }
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.visits.len() != ds.p() {
            return Err(Error::config(format!("model has {} visits, data has {}", self.visits.len(), ds.p())));
        }
        for (j, v) in self.visits.iter().enumerate() {
            let path = format!("model.visits[{j}]");
            if !v.family.compatible(ds.visit_types[j]) {
                return Err(Error::config(format!(
                    "{path}.family: {:?} does not fit visit type {:?}",
                    v.family, ds.visit_types[j]
                )));
            }
            if v.design.q != ds.q() {
                return Err(Error::config(format!("{path}.design: covariate count mismatch")));
            }
            if v.design.max_visit().is_some_and(|m| m >= j) {
                return Err(Error::config(format!("{path}.design: predictors must precede the visit")));
            }
            let k = v.n_coef();
            for (name, vec) in [("coef_mean", &v.prior.coef_mean), ("coef_precision", &v.prior.coef_precision)] {
                if let Some(x) = vec {
                    if x.len() != k {
                        return Err(Error::config(format!("{path}.prior.{name}: expected {k} values")));
                    }
                    if x.iter().any(|a| !a.is_finite()) {
                        return Err(Error::config(format!("{path}.prior.{name}: non-finite value")));
                    }
                }
            }
            if v.prior.coef_precision.as_ref().is_some_and(|p| p.iter().any(|&a| a < 0.0)) {
                return Err(Error::config(format!("{path}.prior.coef_precision: negative value")));
            }
            if v.prior.gamma_shape < 0.0 || v.prior.gamma_rate < 0.0 {
                return Err(Error::config(format!("{path}.prior: negative gamma hyperparameter")));
            }
            if v.family.is_skew() {
                v.skew.validate().map_err(|e| Error::config(format!("{path}.skew: {e}")))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub burn_in: usize,
    pub thin: usize,
    pub draws: usize,
    pub seed: u64,
    /// Chain 0 supplies the draws; further chains feed the diagnostics.
    pub chains: usize,
    /// Parameter-expansion moves in skew visits.
    pub px: bool,
    /// Draw continuous cells exactly when their full conditional is Gaussian.
    pub exact_gaussian: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig { burn_in: 5000, thin: 50, draws: 50, seed: 1, chains: 1, px: true, exact_gaussian: true }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::config("mcmc.thin must be at least 1"));
        }
        if self.draws == 0 {
            return Err(Error::config("mcmc.draws must be at least 1"));
        }
        if self.chains == 0 {
            return Err(Error::config("mcmc.chains must be at least 1"));
        }
        Ok(())
    }
}

/// Acceptance counters of one chain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub beta_accepted: Vec<u64>,
    pub beta_proposed: Vec<u64>,
    pub cont_accepted: u64,
    pub cont_proposed: u64,
    pub cont_exact: u64,
    pub cont_fallback: u64,
}

/// Current state: parameters, skew latents and values (sorted subject order).
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub params: Vec<Family>,
    pub skew: Vec<Option<SkewState>>,
    pub values: Vec<Vec<f64>>,
}

/// One emitted posterior draw with values in the original subject order
/// (post-dropout cells NaN).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraw {
    pub params: Vec<Family>,
    pub values: Vec<Vec<f64>>,
}

pub struct Chain<'a> {
    ds: &'a Dataset,
    spec: &'a ModelSpec,
    cfg: McmcConfig,
    part: MissingnessPartition,
    priors: Vec<GaussianPrior>,
    pcs: Vec<Option<PcPrior>>,
    blocks: Vec<Vec<Range<usize>>>,
    state: ChainState,
    kappa_tuning: Vec<MhTuning>,
    rw_scale: Vec<f64>,
    zc: Vec<Vec<f64>>,
    yc: Vec<Vec<f64>>,
    rng_a1: Vec<RngStream>,
    rng_a2: RngStream,
    pub stats: ChainStats,
    pub iteration: usize,
}

fn variant_of(kind: FamilyKind) -> SkewVariant {
    match kind {
        FamilyKind::SkewT => SkewVariant::SkewT,
        _ => SkewVariant::SkewNormal,
    }
}

impl<'a> Chain<'a> {
    /// `ds` must already be in monotone order.
    pub fn new(ds: &'a Dataset, spec: &'a ModelSpec, cfg: &McmcConfig, chain: u64) -> Result<Self> {
        spec.validate(ds)?;
        if monotone_order(ds).iter().enumerate().any(|(a, &b)| a != b) {
            return Err(Error::domain("dataset must be sorted in monotone order"));
        }
        let part = classify_missingness(ds);
        let (q, p) = (ds.q(), ds.p());
        let base = RngStream::new(cfg.seed).derive(&[0x4D44_4100, chain]);
        let mut init_rng = base.derive(&[3]);

        let mut values: Vec<Vec<f64>> = (0..ds.n()).map(|i| ds.row_values(i)).collect();
        let mut rw_scale = vec![1.0; p];
        for j in 0..p {
            let obs: Vec<f64> =
                ds.subjects.iter().filter(|s| s.observed[j]).map(|s| s.y[j]).collect();
            if obs.len() > 1 {
                let m = mean(&obs);
                let sd = (obs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (obs.len() - 1) as f64).sqrt();
                rw_scale[j] = 0.5 * sd.max(1e-3);
            }
            for (i, cells) in part.subjects.iter().enumerate() {
                if cells.continuous.contains(&j) {
                    values[i][q + j] = if obs.is_empty() { 0.0 } else { mean(&obs) };
                } else if cells.discrete.contains(&j) {
                    values[i][q + j] = if obs.is_empty() {
                        ds.visit_types[j].levels().map_or(0.0, |_| 1.0)
                    } else {
                        obs[init_rng.below(obs.len())]
                    };
                }
            }
        }

        let priors: Vec<GaussianPrior> = spec.visits.iter().map(|v| v.coef_prior()).collect();
        let pcs = spec.visits.iter().map(|v| (v.family == FamilyKind::SkewT).then(|| PcPrior::new(&v.skew))).collect();
        let blocks = spec.visits.iter().map(|v| default_blocks(v.n_coef())).collect();
        let params: Vec<Family> = spec.visits.iter().map(|v| Family::new(v.family, v.design.dim())).collect();
        let mut chain = Chain {
            ds,
            spec,
            cfg: cfg.clone(),
            part,
            priors,
            pcs,
            blocks,
            state: ChainState { params, skew: vec![None; p], values },
            kappa_tuning: vec![MhTuning::default(); p],
            rw_scale,
            zc: vec![Vec::new(); p],
            yc: vec![Vec::new(); p],
            rng_a1: (0..p as u64).map(|j| base.derive(&[1, j])).collect(),
            rng_a2: base.derive(&[2]),
            stats: ChainStats { beta_accepted: vec![0; p], beta_proposed: vec![0; p], ..Default::default() },
            iteration: 0,
        };
        chain.rebuild_caches();
        chain.initialize_params(&mut init_rng)?;
        Ok(chain)
    }

    pub fn n_visit(&self, j: usize) -> usize {
        self.part.n[j]
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn partition(&self) -> &MissingnessPartition {
        &self.part
    }

    /// Replace values (sorted order) and parameters, e.g. for simulation-based checks.
    pub fn set_state(&mut self, state: ChainState) {
        self.state = state;
        self.rebuild_caches();
    }

    fn rebuild_caches(&mut self) {
        for j in 0..self.ds.p() {
            let n = self.part.n[j];
            let l = self.spec.visits[j].design.dim();
            self.zc[j] = vec![0.0; n * l];
            self.yc[j] = vec![0.0; n];
        }
        for i in 0..self.ds.n() {
            self.refresh_subject(i);
        }
    }

    fn refresh_subject(&mut self, i: usize) {
        let q = self.ds.q();
        let s = self.ds.subjects[i].s;
        for j in 0..s {
            let des = &self.spec.visits[j].design;
            let l = des.dim();
            des.eval_into(&self.state.values[i], &mut self.zc[j][i * l..(i + 1) * l]);
            self.yc[j][i] = self.state.values[i][q + j];
        }
    }

    fn initialize_params(&mut self, rng: &mut RngStream) -> Result<()> {
        for j in 0..self.ds.p() {
            let vm = &self.spec.visits[j];
            let n = self.part.n[j];
            let l = vm.design.dim();
            let (y, z) = (&self.yc[j], &self.zc[j]);
            match vm.family {
                FamilyKind::Normal => {}
                FamilyKind::SkewNormal | FamilyKind::SkewT => {
                    let (beta, prec) = least_squares(y, z, l);
                    let st = SkewState::initial(beta, prec, n, &vm.skew, variant_of(vm.family), rng);
                    self.state.params[j].coef.clone_from(&st.params.beta);
                    self.state.params[j].precision = st.params.precision;
                    self.state.params[j].nu = st.params.nu;
                    self.state.skew[j] = Some(st);
                }
                _ => {
                    if n == 0 {
                        continue;
                    }
                    let fam = self.state.params[j].clone();
                    let target = SliceTarget { family: &fam, y, z };
                    let start = DVector::from_vec(fam.coef.clone());
                    if let Ok((b, _)) = posterior_mode(&target, &start, &self.priors[j], 1e-6, 25) {
                        if b.iter().all(|v| v.is_finite()) {
                            self.state.params[j].coef = b.as_slice().to_vec();
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// One full iteration: parameter draws, then discrete and continuous cells.
    pub fn step(&mut self, adapt: bool) -> Result<()> {
        for j in 0..self.ds.p() {
            self.update_visit(j, adapt)?;
        }
        for i in 0..self.ds.n() {
            let changed_d = !self.part.subjects[i].discrete.is_empty();
            if changed_d {
                self.impute_discrete(i)?;
            }
            let changed_c = !self.part.subjects[i].continuous.is_empty();
            if changed_c {
                self.impute_continuous(i)?;
            }
            if changed_d || changed_c {
                self.refresh_subject(i);
            }
        }
        self.iteration += 1;
        #[cfg(debug_assertions)]
        self.assert_observed_intact();
        Ok(())
    }

    #[cfg(debug_assertions)]
    fn assert_observed_intact(&self) {
        let q = self.ds.q();
        for (i, s) in self.ds.subjects.iter().enumerate() {
            for j in 0..self.ds.p() {
                if s.observed[j] {
                    debug_assert_eq!(self.state.values[i][q + j].to_bits(), s.y[j].to_bits());
                }
            }
        }
    }

    /// Parameter update for visit `j` using rows `i < n_j`.
    pub fn update_visit(&mut self, j: usize, adapt: bool) -> Result<()> {
        let vm = &self.spec.visits[j];
        let n = self.part.n[j];
        if n == 0 {
            return Ok(());
        }
        let l = vm.design.dim();
        let y = &self.yc[j];
        let z = &self.zc[j];
        let rng = &mut self.rng_a1[j];
        match vm.family {
            FamilyKind::Normal => {
                let (dm, m) = normal_gamma_matrix(y, z, l, &self.priors[j], &vm.prior);
                let (beta, gamma) = draw_normal_gamma(&dm, m, rng).map_err(|e| match e {
                    Error::Domain(msg) => Error::numerical(format!("visit {}: {msg}", self.ds.visit_names[j])),
                    other => other,
                })?;
                let f = &mut self.state.params[j];
                f.coef.copy_from_slice(beta.as_slice());
                f.precision = gamma;
            }
            FamilyKind::SkewNormal | FamilyKind::SkewT => {
                let st = self.state.skew[j].as_mut().expect("skew state initialized");
                let pc = self.pcs[j].unwrap_or_else(|| PcPrior::new(&vm.skew));
                let mut opts = GibbsOptions::new(variant_of(vm.family));
                opts.px = self.cfg.px;
                let bp = (!self.priors[j].is_flat()).then_some(&self.priors[j]);
                gibbs_cycle(st, y, z, &vm.skew, &pc, bp, opts, adapt, rng)?;
                let f = &mut self.state.params[j];
                f.coef.clone_from(&st.params.beta);
                f.psi = st.params.psi;
                f.precision = st.params.precision;
                f.nu = st.params.nu;
            }
            _ => {
                let fam = self.state.params[j].clone();
                let target = SliceTarget { family: &fam, y, z };
                let beta = DVector::from_vec(fam.coef.clone());
                let (nb, out) = mh_update_beta(&target, &beta, &self.priors[j], &self.blocks[j], rng)?;
                self.stats.beta_accepted[j] += out.accepted as u64;
                self.stats.beta_proposed[j] += out.proposed as u64;
                self.state.params[j].coef = nb.as_slice().to_vec();
                if vm.family == FamilyKind::NegBinomial {
                    let mut f = self.state.params[j].clone();
                    let mut target_k = |kappa: f64| {
                        f.kappa = kappa;
                        let ll: f64 = (0..n).map(|i| f.log_density_shifted(y[i], &z[i * l..(i + 1) * l], 0.0, None)).sum();
                        let lk = kappa.ln();
                        ll - 0.5 * lk * lk / 100.0 - lk
                    };
                    let k0 = self.state.params[j].kappa;
                    let cur = target_k(k0);
                    let tun = &mut self.kappa_tuning[j];
                    let step = rw_mh_lognu(k0, cur, 0.0, f64::INFINITY, tun.scale, target_k, rng);
                    tun.record(step.accepted, adapt);
                    self.state.params[j].kappa = step.value;
                }
            }
        }
        Ok(())
    }

    fn latent(&self, j: usize, i: usize) -> Option<Latent> {
        self.state.skew[j].as_ref().map(|s| Latent { d: s.latents.d[i], w: s.latents.w[i] })
    }

    /// Visits whose density depends on any of `cells` for subject `i`.
    fn involved_visits(&self, i: usize, cells: &[usize]) -> Vec<usize> {
        let s = self.ds.subjects[i].s;
        let h = *cells.iter().min().unwrap();
        (h..s)
            .filter(|&j| cells.contains(&j) || cells.iter().any(|&c| self.spec.visits[j].design.references(c)))
            .collect()
    }

    fn log_joint(&self, i: usize, visits: &[usize], vals: &[f64]) -> f64 {
        let q = self.ds.q();
        visits
            .iter()
            .map(|&j| {
                let z = self.spec.visits[j].design.eval(vals);
                self.state.params[j].log_density_shifted(vals[q + j], &z, 0.0, self.latent(j, i))
            })
            .sum()
    }

    /// Full conditional of the subject's discrete intermittent cells: every
    /// combination (in the order of `partition().subjects[i].discrete`) and its
    /// normalized probability.
    pub fn discrete_conditional(&self, i: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let (combos, logw) = self.enumerate_discrete(i)?;
        let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = w.iter().sum();
        Ok((combos, w.into_iter().map(|v| v / total).collect()))
    }

    fn enumerate_discrete(&self, i: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let cells = &self.part.subjects[i].discrete;
        let q = self.ds.q();
        let visits = self.involved_visits(i, cells);
        let supports: Vec<Vec<f64>> = cells
            .iter()
            .map(|&c| match self.ds.visit_types[c].levels() {
                Some(k) => (1..=k).map(f64::from).collect(),
                None => {
                    let z = self.spec.visits[c].design.eval(&self.state.values[i]);
                    let kmax = self.state.params[c].count_support_bound(&z);
                    (0..=kmax).map(|v| v as f64).collect()
                }
            })
            .collect();
        let total = supports.iter().try_fold(1usize, |acc, s| acc.checked_mul(s.len()).filter(|&t| t <= MAX_COMBINATIONS));
        let Some(total) = total else {
            return Err(Error::config(format!(
                "subject {}: more than {MAX_COMBINATIONS} combinations of discrete cells; split them into blocks",
                self.ds.subjects[i].id
            )));
        };
        let mut vals = self.state.values[i].clone();
        let mut combos = Vec::with_capacity(total);
        let mut logw = Vec::with_capacity(total);
        let mut idx = vec![0usize; cells.len()];
        for _ in 0..total {
            let combo: Vec<f64> = idx.iter().zip(&supports).map(|(&k, s)| s[k]).collect();
            for (&c, &v) in cells.iter().zip(&combo) {
                vals[q + c] = v;
            }
            logw.push(self.log_joint(i, &visits, &vals));
            combos.push(combo);
            for a in (0..cells.len()).rev() {
                idx[a] += 1;
                if idx[a] < supports[a].len() {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok((combos, logw))
    }

    /// Enumerate all combinations of the subject's discrete intermittent cells.
    pub fn impute_discrete(&mut self, i: usize) -> Result<()> {
        if self.part.subjects[i].discrete.is_empty() {
            return Ok(());
        }
        let (combos, logw) = self.enumerate_discrete(i)?;
        let pick = self.rng_a2.categorical_log(&logw);
        let q = self.ds.q();
        for (&c, &v) in self.part.subjects[i].discrete.iter().zip(&combos[pick]) {
            self.state.values[i][q + c] = v;
        }
        Ok(())
    }

    /// Log density, gradient and curvature of the subject's terms in `cells`.
    fn block_terms(&self, i: usize, cells: &[usize], visits: &[usize], vals: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let q = self.ds.q();
        let k = cells.len();
        let mut lp = 0.0;
        let mut g = DVector::zeros(k);
        let mut h = DMatrix::zeros(k, k);
        for &j in visits {
            let own = cells.contains(&j).then_some(j);
            let ctx = LinearPredictorContext::from_design(&self.spec.visits[j].design, vals, cells, own);
            let f = &self.state.params[j];
            let lat = self.latent(j, i);
            let y = vals[q + j];
            lp += f.log_density_shifted(y, &ctx.z, 0.0, lat);
            g += DVector::from_vec(f.grad_yc(y, &ctx, lat));
            h += f.hess_yc(y, &ctx, lat);
        }
        (lp, g, h)
    }

    fn coupled(&self, visits: &[usize], a: usize, b: usize) -> bool {
        visits.iter().any(|&j| self.spec.visits[j].design.couples(a, b))
    }

    /// Split cells so that no block holds two cells multiplied together.
    fn colour_blocks(&self, cells: &[usize], visits: &[usize]) -> Vec<Vec<usize>> {
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        for &c in cells {
            match blocks.iter_mut().find(|b| b.iter().all(|&o| !self.coupled(visits, o, c))) {
                Some(b) => b.push(c),
                None => blocks.push(vec![c]),
            }
        }
        blocks
    }

    pub fn impute_continuous(&mut self, i: usize) -> Result<()> {
        let cells = self.part.subjects[i].continuous.clone();
        if cells.is_empty() {
            return Ok(());
        }
        let visits_all = self.involved_visits(i, &cells);
        for block in self.colour_blocks(&cells, &visits_all) {
            let visits = self.involved_visits(i, &block);
            let gaussian = visits.iter().all(|&j| self.spec.visits[j].family.is_gaussian_given_latents())
                && !block.iter().any(|&c| self.coupled(&visits, c, c));
            self.continuous_block(i, &block, &visits, gaussian && self.cfg.exact_gaussian)?;
        }
        Ok(())
    }

    /// Log acceptance ratio of the Newton-type move from `vals` to `cand`.
    fn newton_log_ratio(&self, i: usize, block: &[usize], visits: &[usize], vals: &[f64], cand: &[f64]) -> Option<f64> {
        let q = self.ds.q();
        let (lp0, g0, h0) = self.block_terms(i, block, visits, vals);
        let (lp1, g1, h1) = self.block_terms(i, block, visits, cand);
        let c0 = nalgebra::Cholesky::new(h0)?;
        let c1 = nalgebra::Cholesky::new(h1)?;
        let x0 = DVector::from_iterator(block.len(), block.iter().map(|&c| vals[q + c]));
        let x1 = DVector::from_iterator(block.len(), block.iter().map(|&c| cand[q + c]));
        let m0 = &x0 + c0.solve(&g0);
        let m1 = &x1 + c1.solve(&g1);
        let lq = |x: &DVector<f64>, m: &DVector<f64>, c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
            let r = c.l().transpose() * (x - m);
            c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() - 0.5 * r.norm_squared()
        };
        Some(lp1 - lp0 + lq(&x0, &m1, &c1) - lq(&x1, &m0, &c0))
    }

    fn continuous_block(&mut self, i: usize, block: &[usize], visits: &[usize], exact: bool) -> Result<()> {
        let q = self.ds.q();
        let vals = self.state.values[i].clone();
        let (_, g, h) = self.block_terms(i, block, visits, &vals);
        let k = block.len();
        let chol = if exact { Some(cholesky_ridge(&h)?) } else { nalgebra::Cholesky::new(h) };
        let Some(chol) = chol else {
            return self.random_walk_block(i, block, visits);
        };
        let x0 = DVector::from_iterator(k, block.iter().map(|&c| vals[q + c]));
        let mean = &x0 + chol.solve(&g);
        let zv = DVector::from_iterator(k, (0..k).map(|_| self.rng_a2.normal()));
        let step = chol.l().tr_solve_lower_triangular(&zv).ok_or_else(|| Error::numerical("singular curvature"))?;
        let x1 = mean + step;
        let mut cand = vals.clone();
        for (a, &c) in block.iter().enumerate() {
            cand[q + c] = x1[a];
        }
        self.stats.cont_proposed += 1;
        if exact {
            self.stats.cont_exact += 1;
            self.stats.cont_accepted += 1;
            self.state.values[i] = cand;
            return Ok(());
        }
        let accept = match self.newton_log_ratio(i, block, visits, &vals, &cand) {
            Some(la) if la.is_finite() => self.rng_a2.uniform().ln() < la,
            _ => false,
        };
        if accept {
            self.stats.cont_accepted += 1;
            self.state.values[i] = cand;
        }
        Ok(())
    }

    fn random_walk_block(&mut self, i: usize, block: &[usize], visits: &[usize]) -> Result<()> {
        let q = self.ds.q();
        for &c in block {
            self.stats.cont_fallback += 1;
            self.stats.cont_proposed += 1;
            let vals = self.state.values[i].clone();
            let mut cand = vals.clone();
            cand[q + c] += self.rw_scale[c] * self.rng_a2.normal();
            let la = self.log_joint(i, visits, &cand) - self.log_joint(i, visits, &vals);
            if la.is_finite() && self.rng_a2.uniform().ln() < la {
                self.stats.cont_accepted += 1;
                self.state.values[i] = cand;
            }
        }
        Ok(())
    }

    /// Log acceptance ratio the Newton-type move would have for a fresh
    /// proposal at subject `i`; exposed for checks of the Gaussian case.
    pub fn continuous_proposal_log_ratio(&mut self, i: usize) -> Option<f64> {
        let cells = self.part.subjects[i].continuous.clone();
        if cells.is_empty() {
            return None;
        }
        let q = self.ds.q();
        let visits = self.involved_visits(i, &cells);
        let vals = self.state.values[i].clone();
        let (_, g, h) = self.block_terms(i, &cells, &visits, &vals);
        let chol = nalgebra::Cholesky::new(h)?;
        let k = cells.len();
        let x0 = DVector::from_iterator(k, cells.iter().map(|&c| vals[q + c]));
        let zv = DVector::from_iterator(k, (0..k).map(|_| self.rng_a2.normal()));
        let x1 = &x0 + chol.solve(&g) + chol.l().tr_solve_lower_triangular(&zv)?;
        let mut cand = vals.clone();
        for (a, &c) in cells.iter().enumerate() {
            cand[q + c] = x1[a];
        }
        self.newton_log_ratio(i, &cells, &visits, &vals, &cand)
    }

    /// Scalar summaries of the parameters, for diagnostics.
    pub fn trace(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for f in &self.state.params {
            out.extend_from_slice(&f.coef);
            match f.kind {
                FamilyKind::Normal => out.push(f.precision.ln()),
                FamilyKind::SkewNormal => out.extend([f.precision.ln(), f.psi]),
                FamilyKind::SkewT => out.extend([f.precision.ln(), f.psi, (f.nu - 2.0).ln()]),
                FamilyKind::NegBinomial => out.push(f.kappa.ln()),
                _ => {}
            }
        }
        out
    }

    pub fn trace_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (j, (f, vm)) in self.state.params.iter().zip(&self.spec.visits).enumerate() {
            let v = &self.ds.visit_names[j];
            match f.kind {
                FamilyKind::PropOdds(k) => {
                    out.extend((2..k).map(|t| format!("{v}.d{t}")));
                    out.extend(vm.design.names.iter().map(|n| format!("{v}.{n}")));
                }
                FamilyKind::MultiLogit(k) => {
                    for c in 1..k {
                        out.extend(vm.design.names.iter().map(|n| format!("{v}.{n}#{c}")));
                    }
                }
                _ => out.extend(vm.design.names.iter().map(|n| format!("{v}.{n}"))),
            }
            match f.kind {
                FamilyKind::Normal => out.push(format!("{v}.log_precision")),
                FamilyKind::SkewNormal => out.extend([format!("{v}.log_precision"), format!("{v}.psi")]),
                FamilyKind::SkewT => {
                    out.extend([format!("{v}.log_precision"), format!("{v}.psi"), format!("{v}.log_nu_minus_2")])
                }
                FamilyKind::NegBinomial => out.push(format!("{v}.log_kappa")),
                _ => {}
            }
        }
        out
    }

    pub fn adaptation_scales(&self) -> Vec<f64> {
        self.state.skew.iter().flatten().map(|s| s.nu_tuning.scale).collect()
    }

    pub fn nu_acceptance(&self) -> Vec<f64> {
        self.state.skew.iter().flatten().map(|s| s.nu_tuning.acceptance_rate()).collect()
    }
}

/// Normal-gamma matrix and degrees for a normal visit.
pub(crate) fn normal_gamma_matrix(y: &[f64], z: &[f64], l: usize, prior: &GaussianPrior, ps: &PriorSpec) -> (DMatrix<f64>, f64) {
    let k = l + 1;
    let mut dm = DMatrix::<f64>::zeros(k, k);
    let mut row = vec![0.0; k];
    for (i, &yi) in y.iter().enumerate() {
        row[..l].copy_from_slice(&z[i * l..(i + 1) * l]);
        row[l] = yi;
        for a in 0..k {
            for b in a..k {
                dm[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            dm[(a, b)] = dm[(b, a)];
        }
    }
    let mut m = y.len() as f64 + 2.0 * ps.gamma_shape;
    if !prior.is_flat() {
        let rv = &prior.precision * &prior.mean;
        for a in 0..l {
            for b in 0..l {
                dm[(a, b)] += prior.precision[(a, b)];
            }
            dm[(a, l)] += rv[a];
            dm[(l, a)] += rv[a];
        }
        dm[(l, l)] += prior.mean.dot(&rv);
        m += prior.precision.diagonal().iter().filter(|&&v| v > 0.0).count() as f64;
    }
    dm[(l, l)] += 2.0 * ps.gamma_rate;
    (dm, m)
}

fn least_squares(y: &[f64], z: &[f64], l: usize) -> (Vec<f64>, f64) {
    let n = y.len();
    if n <= l {
        return (vec![0.0; l], 1.0);
    }
    let zm = DMatrix::from_row_slice(n, l, z);
    let yv = DVector::from_column_slice(y);
    let ztz = zm.transpose() * &zm;
    let zty = zm.transpose() * &yv;
    match cholesky_ridge(&ztz) {
        Ok(c) => {
            let b = c.solve(&zty);
            let r = &yv - &zm * &b;
            let s2 = (r.norm_squared() / (n - l) as f64).max(1e-12);
            (b.as_slice().to_vec(), 1.0 / s2)
        }
        Err(_) => (vec![0.0; l], 1.0),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub names: Vec<String>,
    /// Split R̂ over all chains.
    pub rhat: Vec<f64>,
    /// Lag-one autocorrelation of the thinned draws of chain 0.
    pub autocorr: Vec<f64>,
    pub beta_acceptance: Vec<f64>,
    pub continuous_acceptance: f64,
    pub nu_acceptance: Vec<f64>,
    pub chains: usize,
}

impl Diagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().cloned().filter(|v| v.is_finite()).fold(f64::NAN, f64::max)
    }
}

pub struct MdaOutput {
    pub draws: Vec<PosteriorDraw>,
    pub diagnostics: Diagnostics,
}

/// Split R̂ over a set of equally long traces.
pub fn split_rhat(traces: &[Vec<f64>]) -> f64 {
    let half = traces.iter().map(|t| t.len() / 2).min().unwrap_or(0);
    if half < 2 {
        return f64::NAN;
    }
    let mut seqs = Vec::new();
    for t in traces {
        seqs.push(&t[..half]);
        seqs.push(&t[t.len() - half..]);
    }
    let n = half as f64;
    let means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    let w = seqs
        .iter()
        .zip(&means)
        .map(|(s, m)| s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / seqs.len() as f64;
    let gm = mean(&means);
    let b = n * means.iter().map(|m| (m - gm).powi(2)).sum::<f64>() / (seqs.len() as f64 - 1.0);
    if w <= 0.0 {
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

pub fn lag1_autocorr(x: &[f64]) -> f64 {
    if x.len() < 3 {
        return f64::NAN;
    }
    let m = mean(x);
    let den: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    if den == 0.0 {
        return 0.0;
    }
    x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / den
}

struct ChainRun {
    draws: Vec<PosteriorDraw>,
    trace: Vec<Vec<f64>>,
    names: Vec<String>,
    stats: ChainStats,
    nu_acc: Vec<f64>,
}

fn run_chain(sorted: &Dataset, order: &[usize], spec: &ModelSpec, cfg: &McmcConfig, c: u64) -> Result<ChainRun> {
    let mut chain = Chain::new(sorted, spec, cfg, c)?;
    for _ in 0..cfg.burn_in {
        chain.step(true)?;
    }
    let mut draws = Vec::with_capacity(cfg.draws);
    let mut trace = Vec::with_capacity(cfg.draws);
    for _ in 0..cfg.draws {
        for _ in 0..cfg.thin {
            chain.step(false)?;
        }
        trace.push(chain.trace());
        if c == 0 {
            let mut values = vec![Vec::new(); sorted.n()];
            for (k, &orig) in order.iter().enumerate() {
                let mut v = chain.state.values[k].clone();
                let s = sorted.subjects[k].s;
                for j in s..sorted.p() {
                    v[sorted.q() + j] = f64::NAN;
                }
                values[orig] = v;
            }
            draws.push(PosteriorDraw { params: chain.state.params.clone(), values });
        }
    }
    Ok(ChainRun { draws, trace, names: chain.trace_names(), stats: chain.stats.clone(), nu_acc: chain.nu_acceptance() })
}

/// Run the sampler and collect `cfg.draws` thinned states from chain 0.
pub fn run_mda(ds: &Dataset, spec: &ModelSpec, cfg: &McmcConfig) -> Result<MdaOutput> {
    cfg.validate()?;
    spec.validate(ds)?;
    let order = monotone_order(ds);
    let (sorted, _) = sort_monotone(ds);
    let runs: Vec<ChainRun> = (0..cfg.chains as u64)
        .into_par_iter()
        .map(|c| run_chain(&sorted, &order, spec, cfg, c))
        .collect::<Result<_>>()?;
    let names = runs[0].names.clone();
    let k = names.len();
    let rhat = (0..k)
        .map(|t| split_rhat(&runs.iter().map(|r| r.trace.iter().map(|v| v[t]).collect()).collect::<Vec<_>>()))
        .collect();
    let autocorr = (0..k).map(|t| lag1_autocorr(&runs[0].trace.iter().map(|v| v[t]).collect::<Vec<_>>())).collect();
    let st = &runs[0].stats;
    let diagnostics = Diagnostics {
        names,
        rhat,
        autocorr,
        beta_acceptance: st
            .beta_accepted
            .iter()
            .zip(&st.beta_proposed)
            .map(|(&a, &p)| if p == 0 { f64::NAN } else { a as f64 / p as f64 })
            .collect(),
        continuous_acceptance: if st.cont_proposed == 0 { f64::NAN } else { st.cont_accepted as f64 / st.cont_proposed as f64 },
        nu_acceptance: runs[0].nu_acc.clone(),
        chains: cfg.chains,
    };
    let mut runs = runs;
    Ok(MdaOutput { draws: std::mem::take(&mut runs[0].draws), diagnostics })
}
