//! Skew-normal and skew-t regression: density, PC prior on the degrees of
//! freedom, and the data-augmentation Gibbs cycle with parameter expansion.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::numeric::{digamma, lgamma, ln_norm_cdf, ln_norm_pdf, ln_t_cdf, ln_t_pdf, trigamma};
use crate::samplers::{draw_g_exp_inv, draw_normal_gamma, draw_positive_normal, rw_mh_lognu, GaussianPrior, MhTuning, RngStream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkewTHyper {
    pub n0: f64,
    pub a0: f64,
    pub p0: f64,
    pub nu0: f64,
    pub nu_lower: f64,
    pub nu_upper: f64,
}

impl Default for SkewTHyper {
    fn default() -> Self {
        SkewTHyper { n0: 2.0, a0: 1e5, p0: 0.7, nu0: 10.0, nu_lower: 2.0, nu_upper: 1000.0 }
    }
}

impl SkewTHyper {
    /// PC prior rate giving `Pr(ν < ν_0) = p_0` on the unbounded support.
    pub fn rate(&self) -> f64 {
        -self.p0.ln() / kl_d(self.nu0).expect("nu0 > 2")
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n0 > 0.0
            && self.a0 > 0.0
            && self.p0 > 0.0
            && self.p0 < 1.0
            && self.nu_lower >= 2.0
            && self.nu_lower < self.nu0
            && self.nu0 < self.nu_upper;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid skew-t hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewTParams {
    pub beta: Vec<f64>,
    pub psi: f64,
    pub precision: f64,
    pub nu: f64,
}

impl SkewTParams {
    pub fn omega2(&self) -> f64 {
        1.0 / self.precision + self.psi * self.psi
    }

    pub fn lambda(&self) -> f64 {
        self.psi * self.precision.sqrt()
    }

    /// Inverse of `(ψ, γ) → (ω², λ)`.
    pub fn psi_precision(omega2: f64, lambda: f64) -> (f64, f64) {
        let gamma = (1.0 + lambda * lambda) / omega2;
        (lambda / gamma.sqrt(), gamma)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkewTLatents {
    pub d: Vec<f64>,
    pub w: Vec<f64>,
    pub d_psi: f64,
    pub rho: f64,
}

impl SkewTLatents {
    pub fn ones(n: usize) -> Self {
        SkewTLatents { d: vec![1.0; n], w: vec![0.0; n], d_psi: 1.0, rho: 1.0 }
    }
}

/// Which pieces of the model are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewVariant {
    SkewT,
    SkewNormal,
    /// `ψ ≡ 0`.
    StudentT,
    /// `ψ ≡ 0`, `d ≡ 1`.
    Normal,
}

impl SkewVariant {
    fn has_skew(self) -> bool {
        matches!(self, SkewVariant::SkewT | SkewVariant::SkewNormal)
    }

    fn has_tails(self) -> bool {
        matches!(self, SkewVariant::SkewT | SkewVariant::StudentT)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GibbsOptions {
    pub variant: SkewVariant,
    pub px: bool,
    pub update_nu: bool,
}

impl GibbsOptions {
    pub fn new(variant: SkewVariant) -> Self {
        GibbsOptions { variant, px: true, update_nu: variant.has_tails() }
    }
}

/// Skew-t density; `ν = ∞` gives the skew-normal.
pub fn skewt_pdf(y: f64, mu: f64, omega2: f64, lambda: f64, nu: f64) -> f64 {
    skewt_ln_pdf(y, mu, omega2, lambda, nu).exp()
}

pub fn skewt_ln_pdf(y: f64, mu: f64, omega2: f64, lambda: f64, nu: f64) -> f64 {
    let omega = omega2.sqrt();
    let u = (y - mu) / omega;
    if nu.is_infinite() {
        return std::f64::consts::LN_2 - omega.ln() + ln_norm_pdf(u) + ln_norm_cdf(lambda * u);
    }
    std::f64::consts::LN_2 - omega.ln()
        + ln_t_pdf(u, nu)
        + ln_t_cdf(lambda * u * ((nu + 1.0) / (nu + u * u)).sqrt(), nu + 1.0)
}

fn kl_offset(nu: f64, offset: f64) -> f64 {
    let h = 0.5 * (nu + 1.0);
    let k = 0.5 * nu;
    0.5 * (1.0 + (2.0f64.ln() - offset.ln())) + lgamma(h) - lgamma(k) - h * (digamma(h) - digamma(k))
}

/// Distance `d(ν) = √(2 KL(ν))` from the standardized t to the normal.
pub fn kl_d(nu: f64) -> Result<f64> {
    if !(nu > 2.0) {
        return Err(Error::domain(format!("kl_d needs ν > 2, got {nu}")));
    }
    Ok(kl_d_offset(nu - 2.0))
}

/// `d(2 + δ)` evaluated without forming `2 + δ` in the singular term.
pub fn kl_d_offset(delta: f64) -> f64 {
    (2.0 * kl_offset(2.0 + delta, delta)).max(0.0).sqrt()
}

fn abs_d_prime(nu: f64, delta: f64) -> f64 {
    let h = 0.5 * (nu + 1.0);
    let k = 0.5 * nu;
    let num = 1.0 / delta + h * (trigamma(h) - trigamma(k));
    num.abs() / (2.0 * kl_d_offset(delta))
}

/// Unnormalized log PC prior density at `ν = 2 + δ`.
pub fn pc_prior_ln_unnorm_offset(delta: f64, rate: f64) -> f64 {
    let nu = 2.0 + delta;
    rate.ln() - rate * kl_d_offset(delta) + abs_d_prime(nu, delta).ln()
}

/// PC prior normalized on `(ν_l, ν_m]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcPrior {
    pub rate: f64,
    pub lower: f64,
    pub upper: f64,
    log_mass: f64,
}

impl PcPrior {
    pub fn new(hyper: &SkewTHyper) -> Self {
        Self::with_rate(hyper.rate(), hyper.nu_lower, hyper.nu_upper)
    }

    /// Mass on the interval is `exp(-ϱ d(ν_m)) - exp(-ϱ d(ν_l))` since
    /// `ϱ e^{-ϱ d}` is the density of `d`.
    pub fn with_rate(rate: f64, lower: f64, upper: f64) -> Self {
        let hi = (-rate * kl_d_offset(upper - 2.0)).exp();
        let lo = if lower <= 2.0 { 0.0 } else { (-rate * kl_d_offset(lower - 2.0)).exp() };
        PcPrior { rate, lower, upper, log_mass: (hi - lo).ln() }
    }

    pub fn ln_density(&self, nu: f64) -> f64 {
        if !(nu > self.lower && nu <= self.upper) {
            return f64::NEG_INFINITY;
        }
        pc_prior_ln_unnorm_offset(nu - 2.0, self.rate) - self.log_mass
    }

    pub fn density(&self, nu: f64) -> f64 {
        self.ln_density(nu).exp()
    }
}

/// Normalized PC prior density on `(2, 1000]`.
pub fn pc_prior(nu: f64, rate: f64) -> Result<f64> {
    if !(nu > 2.0) {
        return Err(Error::domain(format!("pc_prior needs ν > 2, got {nu}")));
    }
    Ok(PcPrior::with_rate(rate, 2.0, 1000.0).density(nu))
}

/// Log likelihood of `ν` with the latents integrated out.
pub fn nu_log_likelihood(nu: f64, y: &[f64], z: &[f64], beta: &[f64], psi: f64, gamma: f64) -> f64 {
    let l = beta.len();
    let omega2 = 1.0 / gamma + psi * psi;
    let lam = psi * gamma.sqrt();
    y.iter()
        .enumerate()
        .map(|(i, &yi)| {
            let mu: f64 = z[i * l..(i + 1) * l].iter().zip(beta).map(|(a, b)| a * b).sum();
            skewt_ln_pdf(yi, mu, omega2, lam, nu)
        })
        .sum()
}

pub fn nu_posterior_logdensity(
    nu: f64,
    y: &[f64],
    z: &[f64],
    beta: &[f64],
    psi: f64,
    gamma: f64,
    prior: &PcPrior,
) -> f64 {
    let lp = prior.ln_density(nu);
    if !lp.is_finite() {
        return lp;
    }
    lp + nu_log_likelihood(nu, y, z, beta, psi, gamma)
}

/// Per-visit state carried by the engine for a skew family.
#[derive(Clone, Debug, PartialEq)]
pub struct SkewState {
    pub params: SkewTParams,
    pub latents: SkewTLatents,
    pub nu_tuning: MhTuning,
}

impl SkewState {
    /// `ψ = 0`, `ν = ν_0`, latents drawn from their prior.
    pub fn initial(beta: Vec<f64>, precision: f64, n: usize, hyper: &SkewTHyper, variant: SkewVariant, rng: &mut RngStream) -> Self {
        let nu = if variant.has_tails() { hyper.nu0 } else { f64::INFINITY };
        let mut lat = SkewTLatents::ones(n);
        for i in 0..n {
            let d = if variant.has_tails() { rng.gamma(0.5 * nu, 0.5 * nu) } else { 1.0 };
            lat.d[i] = d;
            lat.w[i] = if variant.has_skew() { draw_positive_normal(0.0, 1.0 / d, rng) } else { 0.0 };
        }
        SkewState { params: SkewTParams { beta, psi: 0.0, precision, nu }, latents: lat, nu_tuning: MhTuning::default() }
    }
}

/// One Gibbs cycle, plus the two scale-expansion moves when enabled, on the rows `(y, z)`,
/// where `z` is row-major with `beta.len()` columns.
#[allow(clippy::too_many_arguments)]
pub fn gibbs_cycle(
    st: &mut SkewState,
    y: &[f64],
    z: &[f64],
    hyper: &SkewTHyper,
    prior: &PcPrior,
    beta_prior: Option<&GaussianPrior>,
    opts: GibbsOptions,
    adapt: bool,
    rng: &mut RngStream,
) -> Result<()> {
    let n = y.len();
    let l = st.params.beta.len();
    if st.latents.d.len() != n {
        return Err(Error::domain("latent vector length differs from data"));
    }
    let skew = opts.variant.has_skew();
    let tails = opts.variant.has_tails();
    let SkewState { params: p, latents: lat, nu_tuning } = st;
    let n0 = hyper.n0;

    // ρ | γ
    lat.rho = rng.gamma(0.5 * (n0 + 1.0), n0 * p.precision + 1.0 / (hyper.a0 * hyper.a0));
    // d_ψ | ψ, γ
    if skew {
        lat.d_psi = rng.gamma(0.75, 0.25 + 2.0 * p.precision * p.psi * p.psi / (PI * PI));
    } else {
        p.psi = 0.0;
    }

    // (ψ, β, γ) from the gamma-normal posterior
    let off = usize::from(skew);
    let k = off + l + 1;
    let mut dm = DMatrix::<f64>::zeros(k, k);
    let mut row = vec![0.0; k];
    for i in 0..n {
        if skew {
            row[0] = lat.w[i];
        }
        row[off..off + l].copy_from_slice(&z[i * l..(i + 1) * l]);
        row[k - 1] = y[i];
        let di = lat.d[i];
        for a in 0..k {
            let s = di * row[a];
            for b in a..k {
                dm[(a, b)] += s * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            dm[(a, b)] = dm[(b, a)];
        }
    }
    if skew {
        dm[(0, 0)] += 4.0 * lat.d_psi / (PI * PI);
    }
    dm[(k - 1, k - 1)] += 2.0 * n0 * lat.rho;
    let mut m = n as f64 + n0 + if skew { 1.0 } else { 0.0 };
    let mut proper_beta = 0.0;
    if let Some(bp) = beta_prior.filter(|b| !b.is_flat()) {
        let rv = &bp.precision * &bp.mean;
        for a in 0..l {
            for b in 0..l {
                dm[(off + a, off + b)] += bp.precision[(a, b)];
            }
            dm[(off + a, k - 1)] += rv[a];
            dm[(k - 1, off + a)] += rv[a];
        }
        dm[(k - 1, k - 1)] += bp.mean.dot(&rv);
        proper_beta = l as f64;
        m += proper_beta;
    }
    let (bstar, gamma) = draw_normal_gamma(&dm, m, rng)?;
    if skew {
        p.psi = bstar[0];
    }
    p.beta.copy_from_slice(&bstar.as_slice()[off..]);
    p.precision = gamma;

    // ν with the latents integrated out
    if tails && opts.update_nu {
        let cur = nu_posterior_logdensity(p.nu, y, z, &p.beta, p.psi, p.precision, prior);
        let (beta, psi, g) = (p.beta.clone(), p.psi, p.precision);
        let step = rw_mh_lognu(
            p.nu,
            cur,
            hyper.nu_lower,
            hyper.nu_upper,
            nu_tuning.scale,
            |nu| nu_posterior_logdensity(nu, y, z, &beta, psi, g, prior),
            rng,
        );
        p.nu = step.value;
        nu_tuning.record(step.accepted, adapt);
    }

    // latents (d, w)
    let (g, psi, nu) = (p.precision, p.psi, p.nu);
    for i in 0..n {
        let mu: f64 = z[i * l..(i + 1) * l].iter().zip(&p.beta).map(|(a, b)| a * b).sum();
        let r = y[i] - mu;
        match opts.variant {
            SkewVariant::SkewT => {
                let vw = g * psi * psi + 1.0;
                let mw = g * psi * r / vw;
                let ba = nu + 1.0;
                let bd = nu + g * r * r / vw;
                let dstar = rng.gamma(0.5 * ba, 0.5 * bd);
                let w = draw_positive_normal(mw, 1.0 / (dstar * vw), rng);
                let bds = bd + (w - mw) * (w - mw) * vw;
                lat.w[i] = w;
                lat.d[i] = rng.gamma(0.5 * (ba + 1.0), 0.5 * bds);
            }
            SkewVariant::SkewNormal => {
                let vw = g * psi * psi + 1.0;
                lat.w[i] = draw_positive_normal(g * psi * r / vw, 1.0 / vw, rng);
                lat.d[i] = 1.0;
            }
            SkewVariant::StudentT => {
                lat.d[i] = rng.gamma(0.5 * (nu + 1.0), 0.5 * (nu + g * r * r));
                lat.w[i] = 0.0;
            }
            SkewVariant::Normal => {
                lat.d[i] = 1.0;
                lat.w[i] = 0.0;
            }
        }
    }

    if !opts.px {
        return Ok(());
    }
    let quad_beta = match beta_prior.filter(|b| !b.is_flat()) {
        Some(bp) => {
            let r = DVector::from_column_slice(&p.beta) - &bp.mean;
            r.dot(&(&bp.precision * &r))
        }
        None => 0.0,
    };
    // (d, γ) → (g d, γ / g)
    if tails {
        let nf = n as f64;
        let (c, b, a) = if skew {
            (
                0.5 * (nf * (nu + 1.0) - (n0 + 1.0) - proper_beta),
                0.5 * (0..n).map(|i| lat.d[i] * (nu + lat.w[i] * lat.w[i])).sum::<f64>(),
                p.precision * (n0 * lat.rho + 2.0 * lat.d_psi * psi * psi / (PI * PI) + 0.5 * quad_beta),
            )
        } else {
            (
                0.5 * (nf * nu - n0 - proper_beta),
                0.5 * nu * lat.d.iter().sum::<f64>(),
                p.precision * (n0 * lat.rho + 0.5 * quad_beta),
            )
        };
        let gx = draw_g_exp_inv(c, b, a, rng)?;
        lat.d.iter_mut().for_each(|d| *d *= gx);
        p.precision /= gx;
    }
    // (w, ψ) → (h w, ψ / h)
    if skew && n >= 2 {
        let c = 0.5 * (n as f64 - 1.0);
        let b = 0.5 * (0..n).map(|i| lat.d[i] * lat.w[i] * lat.w[i]).sum::<f64>();
        let a = 2.0 * lat.d_psi * p.precision * p.psi * p.psi / (PI * PI);
        let hh = draw_g_exp_inv(c, b, a, rng)?;
        let h = hh.sqrt();
        lat.w.iter_mut().for_each(|w| *w *= h);
        p.psi /= h;
    }
    Ok(())
}
