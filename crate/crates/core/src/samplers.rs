//! Random number streams and the reusable sampling kernels.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numeric::{cholesky_ridge, norm_quantile};
use crate::{Error, Result};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A seeded ChaCha8 stream. Independent sub-streams are derived from keys,
/// so results do not depend on the order in which consumers are created.
#[derive(Clone, Debug)]
pub struct RngStream {
    rng: ChaCha8Rng,
    seed: u64,
    stream: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { rng, seed, stream }
    }

    /// Sub-stream identified by `key`, relative to this stream's identity.
    pub fn derive(&self, key: &[u64]) -> RngStream {
        let mut h = splitmix(self.stream ^ 0xA076_1D64_78BD_642F);
        for &k in key {
            h = splitmix(h ^ splitmix(k));
        }
        RngStream::with_stream(self.seed, h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Gamma variate with the given shape and rate.
    pub fn gamma(&mut self, shape: f64, rate: f64) -> f64 {
        Gamma::new(shape, 1.0 / rate)
            .expect("gamma parameters must be positive")
            .sample(&mut self.rng)
    }

    pub fn chi2(&mut self, k: f64) -> f64 {
        ChiSquared::new(k).expect("positive degrees of freedom").sample(&mut self.rng)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Index drawn with probability proportional to `exp(logw)`.
    pub fn categorical_log(&mut self, logw: &[f64]) -> usize {
        let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut u = self.uniform() * total;
        for (i, wi) in w.iter().enumerate() {
            u -= wi;
            if u < 0.0 {
                return i;
            }
        }
        w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Draw `(β, γ)` from the density proportional to
/// `γ^(m/2 - 1) exp(-γ β̃' D β̃ / 2)` with `β̃ = (-β', 1)'`.
///
/// `D` is `(l+1) × (l+1)` with the response in the last position; requires `m > l`.
pub fn draw_normal_gamma(d: &DMatrix<f64>, m: f64, rng: &mut RngStream) -> Result<(DVector<f64>, f64)> {
    let k = d.nrows();
    if k == 0 || d.ncols() != k {
        return Err(Error::domain("normal-gamma matrix must be square and non-empty"));
    }
    let l = k - 1;
    if !(m > l as f64) {
        return Err(Error::domain(format!("normal-gamma needs m > {l}, got {m}")));
    }
    let chol = cholesky_ridge(d)?;
    let mut t = DVector::zeros(k);
    for i in 0..l {
        t[i] = rng.normal();
    }
    t[l] = rng.chi2(m - l as f64).sqrt();
    let h = chol
        .l()
        .tr_solve_lower_triangular(&t)
        .ok_or_else(|| Error::numerical("singular normal-gamma factor"))?;
    let hl = h[l];
    let gamma = hl * hl;
    let beta = DVector::from_iterator(l, (0..l).map(|i| -h[i] / hl));
    Ok((beta, gamma))
}

/// Gaussian prior `N(mean, precision⁻¹)`; a zero precision is flat.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn flat(dim: usize) -> Self {
        GaussianPrior { mean: DVector::zeros(dim), precision: DMatrix::zeros(dim, dim) }
    }

    pub fn diffuse(dim: usize, variance: f64) -> Self {
        GaussianPrior {
            mean: DVector::zeros(dim),
            precision: DMatrix::identity(dim, dim) / variance,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, beta: &DVector<f64>) -> f64 {
        let r = beta - &self.mean;
        -0.5 * r.dot(&(&self.precision * &r))
    }

    pub fn is_flat(&self) -> bool {
        self.precision.iter().all(|&x| x == 0.0)
    }
}

/// Log likelihood with its score and Fisher information, as a function of
/// a coefficient vector.
pub trait GlmTarget {
    fn dim(&self) -> usize;
    fn evaluate(&self, coef: &[f64], grad: &mut DVector<f64>, info: &mut DMatrix<f64>) -> f64;
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MhOutcome {
    pub accepted: usize,
    pub proposed: usize,
}

struct Point {
    beta: DVector<f64>,
    ll: f64,
    grad: DVector<f64>,
    info: DMatrix<f64>,
}

fn eval_point<T: GlmTarget + ?Sized>(target: &T, beta: DVector<f64>) -> Point {
    let k = beta.len();
    let mut grad = DVector::zeros(k);
    let mut info = DMatrix::zeros(k, k);
    let ll = target.evaluate(beta.as_slice(), &mut grad, &mut info);
    Point { beta, ll, grad, info }
}

/// Partition of `0..dim` into contiguous blocks of at most 15 when `dim > 30`.
pub fn default_blocks(dim: usize) -> Vec<std::ops::Range<usize>> {
    if dim <= 30 {
        return vec![0..dim];
    }
    let nb = dim.div_ceil(15);
    let base = dim / nb;
    let extra = dim % nb;
    let mut out = Vec::with_capacity(nb);
    let mut start = 0;
    for b in 0..nb {
        let len = base + usize::from(b < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

// Local quadratic proposal for one block: mean and precision factor.
fn block_proposal(
    p: &Point,
    prior: &GaussianPrior,
    block: &std::ops::Range<usize>,
) -> Result<(DVector<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let k = block.len();
    let dev = &p.beta - &prior.mean;
    let prior_grad = &prior.precision * &dev;
    let mut prec = DMatrix::zeros(k, k);
    let mut u = DVector::zeros(k);
    for (a, i) in block.clone().enumerate() {
        u[a] = p.grad[i] - prior_grad[i];
        for (b, j) in block.clone().enumerate() {
            prec[(a, b)] = p.info[(i, j)] + prior.precision[(i, j)];
        }
    }
    let chol = cholesky_ridge(&prec)?;
    let step = chol.solve(&u);
    let mut mean = DVector::zeros(k);
    for (a, i) in block.clone().enumerate() {
        mean[a] = p.beta[i] + step[a];
    }
    Ok((mean, chol))
}

fn log_proposal(x: &DVector<f64>, mean: &DVector<f64>, chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let r = x - mean;
    let lt = chol.l().transpose() * &r;
    let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
    logdet - 0.5 * lt.norm_squared()
}

/// One Metropolis–Hastings update of GLM coefficients using a proposal
/// centred at a Fisher-scoring step with covariance `(I + R)⁻¹`.
pub fn mh_update_beta<T: GlmTarget + ?Sized>(
    target: &T,
    beta: &DVector<f64>,
    prior: &GaussianPrior,
    blocks: &[std::ops::Range<usize>],
    rng: &mut RngStream,
) -> Result<(DVector<f64>, MhOutcome)> {
    let mut cur = eval_point(target, beta.clone());
    let mut out = MhOutcome::default();
    for block in blocks {
        let (mean_f, chol_f) = block_proposal(&cur, prior, block)?;
        let z = DVector::from_iterator(block.len(), (0..block.len()).map(|_| rng.normal()));
        let step = chol_f
            .l()
            .tr_solve_lower_triangular(&z)
            .ok_or_else(|| Error::numerical("singular proposal factor"))?;
        let prop_block = &mean_f + step;
        let mut cand = cur.beta.clone();
        for (a, i) in block.clone().enumerate() {
            cand[i] = prop_block[a];
        }
        let cand = eval_point(target, cand);
        out.proposed += 1;
        if !cand.ll.is_finite() {
            continue;
        }
        let (mean_r, chol_r) = block_proposal(&cand, prior, block)?;
        let old_block = DVector::from_iterator(block.len(), block.clone().map(|i| cur.beta[i]));
        let log_alpha = cand.ll + prior.log_density(&cand.beta) - cur.ll - prior.log_density(&cur.beta)
            + log_proposal(&old_block, &mean_r, &chol_r)
            - log_proposal(&prop_block, &mean_f, &chol_f);
        if rng.uniform().ln() < log_alpha {
            cur = cand;
            out.accepted += 1;
        }
    }
    Ok((cur.beta, out))
}

/// Fisher scoring towards the posterior mode. Returns the point and whether
/// the iteration converged.
pub fn posterior_mode<T: GlmTarget + ?Sized>(
    target: &T,
    start: &DVector<f64>,
    prior: &GaussianPrior,
    ridge: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, bool)> {
    let k = target.dim();
    let mut beta = start.clone();
    let mut grad = DVector::zeros(k);
    let mut info = DMatrix::zeros(k, k);
    let obj = |b: &DVector<f64>, g: &mut DVector<f64>, i: &mut DMatrix<f64>| {
        g.fill(0.0);
        i.fill(0.0);
        target.evaluate(b.as_slice(), g, i) + prior.log_density(b) - 0.5 * ridge * b.norm_squared()
    };
    let mut cur = obj(&beta, &mut grad, &mut info);
    if !cur.is_finite() {
        return Err(Error::numerical("objective not finite at the starting point"));
    }
    for _ in 0..max_iter {
        let u = &grad - &prior.precision * (&beta - &prior.mean) - &beta * ridge;
        let mut h = &info + &prior.precision;
        for d in 0..k {
            h[(d, d)] += ridge;
        }
        let chol = match nalgebra::Cholesky::new(h) {
            Some(c) => c,
            None => return Ok((beta, false)),
        };
        let step = chol.solve(&u);
        let mut t = 1.0;
        let mut next;
        loop {
            next = &beta + &step * t;
            let val = obj(&next, &mut grad, &mut info);
            if val.is_finite() && val >= cur - 1e-10 * cur.abs().max(1.0) {
                cur = val;
                break;
            }
            t *= 0.5;
            if t < 1e-8 {
                obj(&beta, &mut grad, &mut info);
                return Ok((beta, false));
            }
        }
        beta = next;
        let size = (&step * t).amax();
        if size < 1e-10 * (1.0 + beta.amax()) {
            return Ok((beta, true));
        }
    }
    Ok((beta, false))
}

/// Random-walk step size with acceptance-rate adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhTuning {
    pub scale: f64,
    pub window: usize,
    pub lower: f64,
    pub upper: f64,
    #[serde(skip)]
    pub history: Vec<bool>,
    #[serde(skip)]
    pub accepted: u64,
    #[serde(skip)]
    pub proposed: u64,
}

impl Default for MhTuning {
    fn default() -> Self {
        MhTuning {
            scale: 1.0,
            window: 50,
            lower: 0.3,
            upper: 0.7,
            history: Vec::new(),
            accepted: 0,
            proposed: 0,
        }
    }
}

impl MhTuning {
    /// Record an outcome; during burn-in the scale adapts each full window.
    pub fn record(&mut self, accepted: bool, adapt: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
        if !adapt {
            return;
        }
        self.history.push(accepted);
        if self.history.len() >= self.window {
            let h = std::mem::take(&mut self.history);
            *self = adapt_tuning(self, &h);
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Rescale by 1.1 above the target acceptance band and by 0.9 below it.
pub fn adapt_tuning(tuning: &MhTuning, history: &[bool]) -> MhTuning {
    let mut t = tuning.clone();
    if history.is_empty() {
        return t;
    }
    let rate = history.iter().filter(|&&a| a).count() as f64 / history.len() as f64;
    if rate > t.upper {
        t.scale *= 1.1;
    } else if rate < t.lower {
        t.scale *= 0.9;
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RwStep {
    pub value: f64,
    pub log_target: f64,
    pub accepted: bool,
}

/// Random walk on `ln(x - lower)`, rejecting `x > upper`. `log_target` is
/// the log density in `x`; the change-of-variables factor is applied here.
pub fn rw_mh_lognu<F: FnMut(f64) -> f64>(
    x: f64,
    current_log_target: f64,
    lower: f64,
    upper: f64,
    scale: f64,
    mut log_target: F,
    rng: &mut RngStream,
) -> RwStep {
    let stay = RwStep { value: x, log_target: current_log_target, accepted: false };
    let cand = lower + ((x - lower).ln() + scale * rng.normal()).exp();
    if !(cand > lower) || cand > upper {
        return stay;
    }
    let lt = log_target(cand);
    if !lt.is_finite() {
        return stay;
    }
    let log_alpha = lt - current_log_target + (cand - lower).ln() - (x - lower).ln();
    if rng.uniform().ln() < log_alpha {
        RwStep { value: cand, log_target: lt, accepted: true }
    } else {
        stay
    }
}

/// Exact draw from the density proportional to `g^(c-1) exp(-b g - a/g)`,
/// returning the variate and the number of envelope proposals used.
pub fn draw_g_exp_inv_counted(c: f64, b: f64, a: f64, rng: &mut RngStream) -> Result<(f64, u32)> {
    if !(c > 0.0 && b > 0.0 && a >= 0.0) || !(c.is_finite() && b.is_finite() && a.is_finite()) {
        return Err(Error::domain(format!("draw_g_exp_inv needs c>0, b>0, a>=0 (c={c}, b={b}, a={a})")));
    }
    let e = (1.0 + 4.0 * a * b / (c * c)).sqrt();
    let d = 2.0 * b / (e + 1.0);
    let r = b * (e - 1.0) / (e + 1.0);
    let mut tries = 0;
    loop {
        tries += 1;
        let g = rng.gamma(c, d);
        if g <= 0.0 {
            continue;
        }
        let q = (r * g).sqrt() - (a / g).sqrt();
        if rng.uniform() < (-q * q).exp() {
            return Ok((g, tries));
        }
    }
}

pub fn draw_g_exp_inv(c: f64, b: f64, a: f64, rng: &mut RngStream) -> Result<f64> {
    draw_g_exp_inv_counted(c, b, a, rng).map(|(g, _)| g)
}

/// Draw from `N(mu, var)` truncated to the positive half-line.
pub fn draw_positive_normal(mu: f64, var: f64, rng: &mut RngStream) -> f64 {
    let sd = var.sqrt();
    let alpha = -mu / sd;
    if alpha <= 4.0 {
        // inverse CDF of the upper tail
        let p_pos = crate::numeric::norm_cdf(mu / sd);
        let u = rng.uniform_open();
        let z = -norm_quantile(u * p_pos);
        (mu + sd * z).max(f64::MIN_POSITIVE)
    } else {
        // exponential rejection in the far tail
        let lam = 0.5 * (alpha + (alpha * alpha + 4.0).sqrt());
        loop {
            let z = alpha - rng.uniform_open().ln() / lam;
            let rho = (-0.5 * (z - lam) * (z - lam)).exp();
            if rng.uniform() <= rho {
                return mu + sd * z;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_streams_are_distinct_and_reproducible() {
        let base = RngStream::new(7);
        let mut a = base.derive(&[1, 2]);
        let mut b = base.derive(&[1, 2]);
        let mut c = base.derive(&[2, 1]);
        let xa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..4).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn blocks_cover_range() {
        assert_eq!(default_blocks(30), vec![0..30]);
        let b = default_blocks(31);
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|r| r.len() <= 15));
        assert_eq!(b.last().unwrap().end, 31);
    }

    #[test]
    fn adapt_rule() {
        let t = MhTuning::default();
        assert!((adapt_tuning(&t, &[true; 10]).scale - 1.1).abs() < 1e-15);
        assert!((adapt_tuning(&t, &[false; 10]).scale - 0.9).abs() < 1e-15);
        let mid = [true, false];
        assert_eq!(adapt_tuning(&t, &mid).scale, 1.0);
    }

    #[test]
    fn g_draw_rejects_bad_parameters() {
        let mut rng = RngStream::new(1);
        assert!(draw_g_exp_inv(0.0, 1.0, 1.0, &mut rng).is_err());
        assert!(draw_g_exp_inv(1.0, -1.0, 1.0, &mut rng).is_err());
        assert!(draw_g_exp_inv(1.0, 1.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn positive_normal_is_positive() {
        let mut rng = RngStream::new(3);
        for &mu in &[-40.0, -5.0, -1.0, 0.0, 3.0] {
            for _ in 0..200 {
                assert!(draw_positive_normal(mu, 1.0, &mut rng) > 0.0);
            }
        }
    }
}
