//! Regression families: densities, scores, Fisher information, curvature in
//! missing continuous predictors, and response simulation.
//!
//! The linear predictor scale is: log-odds of `y = 1` (logistic), `c_k + η`
//! inside the cumulative logit `Pr(y ≤ k)` (proportional odds), per-category
//! log-odds against the last category (multinomial), log-mean (Poisson, NB)
//! and the location (normal and skew families).

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::VisitType;
use crate::design::Design;
use crate::numeric::{expit, lgamma, ln_norm_cdf, ln_norm_pdf, ln_t_cdf, ln_t_pdf, log_diff_expit, log_expit, LN_2PI};
use crate::samplers::{draw_positive_normal, RngStream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Normal,
    Logistic,
    PropOdds(u32),
    MultiLogit(u32),
    Poisson,
    NegBinomial,
    SkewNormal,
    SkewT,
}

impl FamilyKind {
    pub fn default_for(vt: VisitType) -> FamilyKind {
        match vt {
            VisitType::Continuous => FamilyKind::Normal,
            VisitType::Binary => FamilyKind::Logistic,
            VisitType::Ordinal(k) => FamilyKind::PropOdds(k),
            VisitType::Nominal(k) => FamilyKind::MultiLogit(k),
            VisitType::Count => FamilyKind::Poisson,
        }
    }

    pub fn compatible(self, vt: VisitType) -> bool {
        use FamilyKind as F;
        match vt {
            VisitType::Continuous => matches!(self, F::Normal | F::SkewNormal | F::SkewT),
            VisitType::Binary => matches!(self, F::Logistic) || self == F::PropOdds(2) || self == F::MultiLogit(2),
            VisitType::Ordinal(k) => self == F::PropOdds(k) || self == F::MultiLogit(k),
            VisitType::Nominal(k) => self == F::MultiLogit(k),
            VisitType::Count => matches!(self, F::Poisson | F::NegBinomial),
        }
    }

    pub fn is_continuous(self) -> bool {
        matches!(self, FamilyKind::Normal | FamilyKind::SkewNormal | FamilyKind::SkewT)
    }

    pub fn is_skew(self) -> bool {
        matches!(self, FamilyKind::SkewNormal | FamilyKind::SkewT)
    }

    /// Normal given the latents (so conditionally Gaussian).
    pub fn is_gaussian_given_latents(self) -> bool {
        self.is_continuous()
    }

    pub fn n_coef(self, dim_z: usize) -> usize {
        match self {
            FamilyKind::PropOdds(k) => k as usize - 2 + dim_z,
            FamilyKind::MultiLogit(k) => (k as usize - 1) * dim_z,
            _ => dim_z,
        }
    }

    fn n_eta(self) -> usize {
        match self {
            FamilyKind::MultiLogit(k) => k as usize - 1,
            _ => 1,
        }
    }
}

/// Skew latents of one observation: mixing weight `d` and skew latent `w`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Latent {
    pub d: f64,
    pub w: f64,
}

impl Default for Latent {
    fn default() -> Self {
        Latent { d: 1.0, w: 0.0 }
    }
}

/// A family with its current parameters. Unused dispersion fields are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub kind: FamilyKind,
    /// `β`; `(d_2..d_{K-1}, β)` for proportional odds; stacked `β_1..β_{K-1}` for multinomial.
    pub coef: Vec<f64>,
    pub precision: f64,
    pub psi: f64,
    pub nu: f64,
    pub kappa: f64,
}

/// Predictor vector of one observation, and `∂z/∂y_c` for each missing
/// continuous cell `c`. `own` marks the cell that is this visit's response.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPredictorContext {
    pub z: Vec<f64>,
    pub jac: Vec<Vec<f64>>,
    pub own: Option<usize>,
}

impl LinearPredictorContext {
    /// Build from a design: `cells` are visit indices of the missing cells.
    pub fn from_design(design: &Design, values: &[f64], cells: &[usize], own_visit: Option<usize>) -> Self {
        LinearPredictorContext {
            z: design.eval(values),
            jac: cells.iter().map(|&c| design.derivative(values, c)).collect(),
            own: own_visit.and_then(|v| cells.iter().position(|&c| c == v)),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_outer(info: &mut DMatrix<f64>, w: f64, off: usize, z: &[f64]) {
    for (a, za) in z.iter().enumerate() {
        let s = w * za;
        for (b, zb) in z.iter().enumerate() {
            info[(off + a, off + b)] += s * zb;
        }
    }
}

fn ln_factorial(y: f64) -> f64 {
    lgamma(y + 1.0)
}

impl Family {
    pub fn new(kind: FamilyKind, dim_z: usize) -> Family {
        Family {
            kind,
            coef: vec![0.0; kind.n_coef(dim_z)],
            precision: 1.0,
            psi: 0.0,
            nu: if kind == FamilyKind::SkewT { 10.0 } else { f64::INFINITY },
            kappa: 0.1,
        }
    }

    pub fn dim_z(&self) -> usize {
        match self.kind {
            FamilyKind::PropOdds(k) => self.coef.len() + 2 - k as usize,
            FamilyKind::MultiLogit(k) => self.coef.len() / (k as usize - 1),
            _ => self.coef.len(),
        }
    }

    /// Coefficients multiplying `z` (all blocks for multinomial).
    pub fn beta(&self) -> &[f64] {
        match self.kind {
            FamilyKind::PropOdds(k) => &self.coef[k as usize - 2..],
            _ => &self.coef,
        }
    }

    /// `c_1..c_{K-1}` for proportional odds.
    pub fn cutpoints(&self) -> Vec<f64> {
        let FamilyKind::PropOdds(k) = self.kind else {
            return Vec::new();
        };
        let mut c = vec![0.0; k as usize - 1];
        for t in 1..c.len() {
            c[t] = c[t - 1] + self.coef[t - 1].exp();
        }
        c
    }

    pub fn support_contains(&self, y: f64) -> bool {
        if !y.is_finite() {
            return false;
        }
        match self.kind {
            FamilyKind::Logistic => y == 1.0 || y == 2.0,
            FamilyKind::PropOdds(k) | FamilyKind::MultiLogit(k) => {
                y.fract() == 0.0 && y >= 1.0 && y <= k as f64
            }
            FamilyKind::Poisson | FamilyKind::NegBinomial => y.fract() == 0.0 && y >= 0.0,
            _ => true,
        }
    }

    /// Linear predictors at `z` (one per non-reference category for multinomial).
    pub fn etas(&self, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let b = self.beta();
        match self.kind {
            FamilyKind::MultiLogit(k) => {
                let l = z.len();
                for c in 0..k as usize - 1 {
                    out.push(dot(&b[c * l..(c + 1) * l], z));
                }
            }
            _ => out.push(dot(b, z)),
        }
    }

    pub fn log_density(&self, y: f64, z: &[f64], latent: Option<Latent>) -> Result<f64> {
        if !self.support_contains(y) {
            return Err(Error::domain(format!("{y} outside the support of {:?}", self.kind)));
        }
        if z.len() != self.dim_z() {
            return Err(Error::domain("predictor length does not match coefficients"));
        }
        Ok(self.log_density_shifted(y, z, 0.0, latent))
    }

    /// Log density with `shift` added to every linear predictor; no checks.
    pub fn log_density_shifted(&self, y: f64, z: &[f64], shift: f64, latent: Option<Latent>) -> f64 {
        match self.kind {
            FamilyKind::MultiLogit(_) => {
                let mut e = Vec::new();
                self.etas(z, &mut e);
                e.iter_mut().for_each(|v| *v += shift);
                self.eta_loglik(y, &e, latent)
            }
            _ => self.eta_loglik(y, &[dot(self.beta(), z) + shift], latent),
        }
    }

    /// Log density as a function of the linear predictor(s).
    pub fn eta_loglik(&self, y: f64, etas: &[f64], latent: Option<Latent>) -> f64 {
        let eta = etas[0];
        match self.kind {
            FamilyKind::Normal => {
                let r = y - eta;
                0.5 * (self.precision.ln() - LN_2PI) - 0.5 * self.precision * r * r
            }
            FamilyKind::SkewNormal | FamilyKind::SkewT => match latent {
                Some(l) => {
                    let tau = l.d * self.precision;
                    let r = y - eta - self.psi * l.w;
                    0.5 * (tau.ln() - LN_2PI) - 0.5 * tau * r * r
                }
                None => self.marginal_skew_loglik(y - eta),
            },
            FamilyKind::Logistic => {
                if y == 1.0 {
                    log_expit(eta)
                } else {
                    log_expit(-eta)
                }
            }
            FamilyKind::PropOdds(k) => {
                let c = self.cutpoints();
                let yk = y as usize;
                if k == 1 {
                    0.0
                } else if yk == 1 {
                    log_expit(c[0] + eta)
                } else if yk == k as usize {
                    log_expit(-(c[yk - 2] + eta))
                } else {
                    log_diff_expit(c[yk - 1] + eta, c[yk - 2] + eta)
                }
            }
            FamilyKind::MultiLogit(k) => {
                let m = etas.iter().cloned().fold(0.0f64, f64::max);
                let lse = m + ((-m).exp() + etas.iter().map(|e| (e - m).exp()).sum::<f64>()).ln();
                let yk = y as usize;
                if yk == k as usize {
                    -lse
                } else {
                    etas[yk - 1] - lse
                }
            }
            FamilyKind::Poisson => y * eta - eta.exp() - ln_factorial(y),
            FamilyKind::NegBinomial => {
                let kappa = self.kappa;
                let mu = eta.exp();
                let l1 = (kappa * mu).ln_1p();
                let body = if y < 2000.0 {
                    (0..y as u64).map(|t| (kappa * t as f64).ln_1p() - l1).sum::<f64>()
                } else {
                    let r = 1.0 / kappa;
                    lgamma(y + r) - lgamma(r) - y * (r + mu).ln()
                };
                body - l1 / kappa + y * eta - ln_factorial(y)
            }
        }
    }

    fn marginal_skew_loglik(&self, r: f64) -> f64 {
        let omega = (1.0 / self.precision + self.psi * self.psi).sqrt();
        let lam = self.psi * self.precision.sqrt();
        let u = r / omega;
        if self.kind == FamilyKind::SkewNormal || self.nu.is_infinite() {
            std::f64::consts::LN_2 - omega.ln() + ln_norm_pdf(u) + ln_norm_cdf(lam * u)
        } else {
            let nu = self.nu;
            std::f64::consts::LN_2 - omega.ln()
                + ln_t_pdf(u, nu)
                + ln_t_cdf(lam * u * ((nu + 1.0) / (nu + u * u)).sqrt(), nu + 1.0)
        }
    }

    /// First derivative of the log density in each linear predictor and the
    /// matrix of minus second derivatives used for curvature in `y_c`.
    fn eta_derivs(&self, y: f64, etas: &[f64], latent: Option<Latent>) -> (Vec<f64>, DMatrix<f64>) {
        let eta = etas[0];
        let one = |g: f64, h: f64| (vec![g], DMatrix::from_element(1, 1, h));
        match self.kind {
            FamilyKind::Normal => one(self.precision * (y - eta), self.precision),
            FamilyKind::SkewNormal | FamilyKind::SkewT => {
                let l = latent.unwrap_or_default();
                let tau = l.d * self.precision;
                one(tau * (y - eta - self.psi * l.w), tau)
            }
            FamilyKind::Logistic => {
                let p = expit(eta);
                one(f64::from(u8::from(y == 1.0)) - p, p * (1.0 - p))
            }
            FamilyKind::PropOdds(k) => {
                let c = self.cutpoints();
                let yk = y as usize;
                let gk = if yk < k as usize { expit(c[yk - 1] + eta) } else { 1.0 };
                let gk1 = if yk > 1 { expit(c[yk - 2] + eta) } else { 0.0 };
                one(1.0 - gk - gk1, gk * (1.0 - gk) + gk1 * (1.0 - gk1))
            }
            FamilyKind::MultiLogit(_) => {
                let p = multilogit_probs(etas);
                let yk = y as usize;
                let g: Vec<f64> = (0..etas.len()).map(|c| f64::from(u8::from(yk == c + 1)) - p[c]).collect();
                let mut h = DMatrix::zeros(etas.len(), etas.len());
                for a in 0..etas.len() {
                    for b in 0..etas.len() {
                        h[(a, b)] = if a == b { p[a] } else { 0.0 } - p[a] * p[b];
                    }
                }
                (g, h)
            }
            FamilyKind::Poisson => {
                let mu = eta.exp();
                one(y - mu, mu)
            }
            FamilyKind::NegBinomial => {
                let mu = eta.exp();
                let k = self.kappa;
                let den = 1.0 + k * mu;
                one((y - mu) / den, (1.0 + k * y) * mu / (den * den))
            }
        }
    }

    /// Add this observation's score and expected information to `grad` and
    /// `info`; returns the log density.
    pub fn accumulate(
        &self,
        y: f64,
        z: &[f64],
        latent: Option<Latent>,
        grad: &mut DVector<f64>,
        info: &mut DMatrix<f64>,
    ) -> f64 {
        match self.kind {
            FamilyKind::PropOdds(k) => self.accumulate_po(k as usize, y, z, grad, info),
            FamilyKind::MultiLogit(_) => {
                let mut e = Vec::new();
                self.etas(z, &mut e);
                let p = multilogit_probs(&e);
                let l = z.len();
                let yk = y as usize;
                for a in 0..e.len() {
                    let ga = f64::from(u8::from(yk == a + 1)) - p[a];
                    for (t, zt) in z.iter().enumerate() {
                        grad[a * l + t] += ga * zt;
                    }
                    for b in 0..e.len() {
                        let w = if a == b { p[a] } else { 0.0 } - p[a] * p[b];
                        for (s, zs) in z.iter().enumerate() {
                            let ws = w * zs;
                            for (t, zt) in z.iter().enumerate() {
                                info[(a * l + s, b * l + t)] += ws * zt;
                            }
                        }
                    }
                }
                self.eta_loglik(y, &e, None)
            }
            _ => {
                let eta = dot(self.beta(), z);
                let (g, w) = match self.kind {
                    FamilyKind::Normal => (self.precision * (y - eta), self.precision),
                    FamilyKind::SkewNormal | FamilyKind::SkewT => {
                        let l = latent.unwrap_or_default();
                        let tau = l.d * self.precision;
                        (tau * (y - eta - self.psi * l.w), tau)
                    }
                    FamilyKind::Logistic => {
                        let p = expit(eta);
                        (f64::from(u8::from(y == 1.0)) - p, p * (1.0 - p))
                    }
                    FamilyKind::Poisson => {
                        let mu = eta.exp();
                        (y - mu, mu)
                    }
                    FamilyKind::NegBinomial => {
                        let mu = eta.exp();
                        let den = 1.0 + self.kappa * mu;
                        ((y - mu) / den, mu / den)
                    }
                    _ => unreachable!(),
                };
                for (gi, zi) in grad.iter_mut().zip(z) {
                    *gi += g * zi;
                }
                add_outer(info, w, 0, z);
                let lat = if self.kind.is_skew() { Some(latent.unwrap_or_default()) } else { None };
                self.eta_loglik(y, &[eta], lat)
            }
        }
    }

    fn accumulate_po(&self, k: usize, y: f64, z: &[f64], grad: &mut DVector<f64>, info: &mut DMatrix<f64>) -> f64 {
        let nd = k - 2;
        let dim = nd + z.len();
        let c = self.cutpoints();
        let eta = dot(self.beta(), z);
        // ∂γ_k/∂ς for k = 0..K
        let dgamma = |kk: usize| -> Vec<f64> {
            if kk == 0 || kk == k {
                return vec![0.0; dim];
            }
            let g = expit(c[kk - 1] + eta);
            let s = g * (1.0 - g);
            let mut v = vec![0.0; dim];
            for t in 0..nd {
                // d_{t+2} enters c_kk when t + 2 <= kk
                if t + 2 <= kk {
                    v[t] = s * self.coef[t].exp();
                }
            }
            for (a, za) in z.iter().enumerate() {
                v[nd + a] = s * za;
            }
            v
        };
        let gam = |kk: usize| -> f64 {
            if kk == 0 {
                0.0
            } else if kk == k {
                1.0
            } else {
                expit(c[kk - 1] + eta)
            }
        };
        let yk = y as usize;
        let dg: Vec<Vec<f64>> = (0..=k).map(dgamma).collect();
        for kk in 1..=k {
            let pi = (gam(kk) - gam(kk - 1)).max(1e-300);
            let dpi: Vec<f64> = (0..dim).map(|t| dg[kk][t] - dg[kk - 1][t]).collect();
            if kk == yk {
                for t in 0..dim {
                    grad[t] += dpi[t] / pi;
                }
            }
            for a in 0..dim {
                for b in 0..dim {
                    info[(a, b)] += dpi[a] * dpi[b] / pi;
                }
            }
        }
        self.eta_loglik(y, &[eta], None)
    }

    pub fn score_beta(&self, y: f64, z: &[f64], latent: Option<Latent>) -> Vec<f64> {
        let n = self.coef.len();
        let mut g = DVector::zeros(n);
        let mut i = DMatrix::zeros(n, n);
        self.accumulate(y, z, latent, &mut g, &mut i);
        g.as_slice().to_vec()
    }

    pub fn fisher_beta(&self, y: f64, z: &[f64], latent: Option<Latent>) -> DMatrix<f64> {
        let n = self.coef.len();
        let mut g = DVector::zeros(n);
        let mut i = DMatrix::zeros(n, n);
        self.accumulate(y, z, latent, &mut g, &mut i);
        i
    }

    // The β̃ sub-vectors: one row per linear predictor, one column per cell.
    fn cell_loadings(&self, ctx: &LinearPredictorContext) -> DMatrix<f64> {
        let b = self.beta();
        let l = ctx.z.len();
        let ne = self.kind.n_eta();
        let mut m = DMatrix::zeros(ne, ctx.jac.len());
        for e in 0..ne {
            let be = if ne > 1 { &b[e * l..(e + 1) * l] } else { b };
            for (c, jc) in ctx.jac.iter().enumerate() {
                m[(e, c)] = dot(be, jc);
            }
        }
        if let Some(o) = ctx.own {
            // response enters the residual with coefficient -1
            m[(0, o)] -= 1.0;
        }
        m
    }

    pub fn grad_yc(&self, y: f64, ctx: &LinearPredictorContext, latent: Option<Latent>) -> Vec<f64> {
        let mut e = Vec::new();
        self.etas(&ctx.z, &mut e);
        let (g, _) = self.eta_derivs(y, &e, latent);
        let b = self.cell_loadings(ctx);
        (b.transpose() * DVector::from_vec(g)).as_slice().to_vec()
    }

    pub fn hess_yc(&self, y: f64, ctx: &LinearPredictorContext, latent: Option<Latent>) -> DMatrix<f64> {
        let mut e = Vec::new();
        self.etas(&ctx.z, &mut e);
        let (_, h) = self.eta_derivs(y, &e, latent);
        let b = self.cell_loadings(ctx);
        b.transpose() * h * b
    }

    pub fn sample_response(&self, z: &[f64], rng: &mut RngStream) -> f64 {
        self.sample_response_shifted(z, 0.0, rng)
    }

    /// Draw with `shift` added to the linear predictor(s).
    pub fn sample_response_shifted(&self, z: &[f64], shift: f64, rng: &mut RngStream) -> f64 {
        let mut e = Vec::new();
        self.etas(z, &mut e);
        e.iter_mut().for_each(|v| *v += shift);
        self.sample_from_etas(&e, rng)
    }

    pub fn sample_from_etas(&self, e: &[f64], rng: &mut RngStream) -> f64 {
        let eta = e[0];
        match self.kind {
            FamilyKind::Normal => eta + rng.normal() / self.precision.sqrt(),
            FamilyKind::SkewNormal | FamilyKind::SkewT => {
                let l = self.draw_latent_prior(rng);
                eta + self.psi * l.w + rng.normal() / (l.d * self.precision).sqrt()
            }
            FamilyKind::Logistic => {
                if rng.uniform() < expit(eta) {
                    1.0
                } else {
                    2.0
                }
            }
            FamilyKind::PropOdds(k) => {
                let c = self.cutpoints();
                let u = rng.uniform();
                for (kk, ck) in c.iter().enumerate() {
                    if u < expit(ck + eta) {
                        return (kk + 1) as f64;
                    }
                }
                k as f64
            }
            FamilyKind::MultiLogit(_) => {
                let mut lw: Vec<f64> = e.to_vec();
                lw.push(0.0);
                (rng.categorical_log(&lw) + 1) as f64
            }
            FamilyKind::Poisson => poisson(eta.exp(), rng),
            FamilyKind::NegBinomial => {
                let mu = eta.exp();
                let r = 1.0 / self.kappa;
                let lam = rng.gamma(r, r / mu);
                poisson(lam, rng)
            }
        }
    }

    /// Draw `(d, w)` from their prior given `ν`.
    pub fn draw_latent_prior(&self, rng: &mut RngStream) -> Latent {
        let d = if self.kind == FamilyKind::SkewT && self.nu.is_finite() {
            rng.gamma(0.5 * self.nu, 0.5 * self.nu)
        } else {
            1.0
        };
        let w = if self.kind.is_skew() { draw_positive_normal(0.0, 1.0 / d, rng) } else { 0.0 };
        Latent { d, w }
    }

    /// Smallest `K` with `Pr(y > K) < 1e-8`, capped at 500.
    pub fn count_support_bound(&self, z: &[f64]) -> usize {
        let mut cdf = 0.0;
        for k in 0..=500usize {
            cdf += self.log_density_shifted(k as f64, z, 0.0, None).exp();
            if 1.0 - cdf < 1e-8 {
                return k;
            }
        }
        500
    }
}

fn poisson(lam: f64, rng: &mut RngStream) -> f64 {
    if !(lam > 0.0) {
        return 0.0;
    }
    match Poisson::new(lam) {
        Ok(p) => p.sample(rng),
        Err(_) => lam.round(),
    }
}

/// Category probabilities `π_1..π_{K-1}` with the last category as reference.
pub fn multilogit_probs(etas: &[f64]) -> Vec<f64> {
    let m = etas.iter().cloned().fold(0.0f64, f64::max);
    let ex: Vec<f64> = etas.iter().map(|e| (e - m).exp()).collect();
    let den = (-m).exp() + ex.iter().sum::<f64>();
    ex.iter().map(|e| e / den).collect()
}


/// Rows `(y_i, z_i)` of one visit, with `z` row-major. Implements the
/// likelihood interface used by the coefficient samplers.
pub struct SliceTarget<'a> {
    pub family: &'a Family,
    pub y: &'a [f64],
    pub z: &'a [f64],
}

impl crate::samplers::GlmTarget for SliceTarget<'_> {
    fn dim(&self) -> usize {
        self.family.coef.len()
    }

    fn evaluate(&self, coef: &[f64], grad: &mut DVector<f64>, info: &mut DMatrix<f64>) -> f64 {
        let mut f = self.family.clone();
        f.coef.copy_from_slice(coef);
        let l = f.dim_z();
        let mut ll = 0.0;
        for (i, &y) in self.y.iter().enumerate() {
            ll += f.accumulate(y, &self.z[i * l..(i + 1) * l], None, grad, info);
        }
        ll
    }
}
