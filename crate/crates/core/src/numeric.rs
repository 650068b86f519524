//! Special functions and small linear-algebra helpers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::function::{beta::beta_reg, erf::erfc, erf::erfc_inv, gamma::ln_gamma};

use crate::{Error, Result};

pub use statrs::function::gamma::{digamma, ln_gamma as lgamma};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_expit(x: f64) -> f64 {
    -softplus(-x)
}

/// `ln(expit(a) - expit(b))` for `a > b`.
pub fn log_diff_expit(a: f64, b: f64) -> f64 {
    debug_assert!(a >= b);
    b + (a - b).exp_m1().ln() - softplus(a) - softplus(b)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

pub fn ln_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        norm_cdf(x).ln()
    } else {
        // asymptotic Mills ratio
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * LN_2PI + (-1.0 / x2 + 2.5 / (x2 * x2)).ln_1p()
    }
}

pub fn ln_norm_pdf(x: f64) -> f64 {
    -0.5 * (LN_2PI + x * x)
}

pub fn norm_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

pub fn ln_t_pdf(x: f64, nu: f64) -> f64 {
    if nu.is_infinite() {
        return ln_norm_pdf(x);
    }
    ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln()
        - 0.5 * (nu + 1.0) * (x * x / nu).ln_1p()
}

pub fn t_cdf(x: f64, nu: f64) -> f64 {
    if nu.is_infinite() {
        return norm_cdf(x);
    }
    let tail = 0.5 * beta_reg(0.5 * nu, 0.5, nu / (nu + x * x));
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

pub fn ln_t_cdf(x: f64, nu: f64) -> f64 {
    if nu.is_infinite() {
        return ln_norm_cdf(x);
    }
    let t = nu / (nu + x * x);
    let tail = 0.5 * beta_reg(0.5 * nu, 0.5, t);
    if x > 0.0 {
        (-tail).ln_1p()
    } else {
        tail.ln()
    }
}

/// Second derivative of `ln Γ`.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    if x <= 0.0 && x == x.floor() {
        return f64::NAN;
    }
    if x < 0.0 {
        // reflection
        let s = (std::f64::consts::PI * x).sin();
        return -trigamma(1.0 - x) + (std::f64::consts::PI / s).powi(2);
    }
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    acc + 1.0 / x
        + r / 2.0
        + r / x
            * (1.0 / 6.0
                + r * (-1.0 / 30.0 + r * (1.0 / 42.0 + r * (-1.0 / 30.0 + r * (5.0 / 66.0)))))
}

/// Adaptive Gauss–Kronrod (7/15) quadrature on a finite interval.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
        const XK: [f64; 8] = [
            0.991_455_371_120_812_6,
            0.949_107_912_342_758_5,
            0.864_864_423_359_769_1,
            0.741_531_185_599_394_4,
            0.586_087_235_467_691_1,
            0.405_845_151_377_397_2,
            0.207_784_955_007_898_5,
            0.0,
        ];
        const WK: [f64; 8] = [
            0.022_935_322_010_529_22,
            0.063_092_092_629_978_55,
            0.104_790_010_322_250_2,
            0.140_653_259_715_525_9,
            0.169_004_726_639_267_9,
            0.190_350_578_064_785_4,
            0.204_432_940_075_298_9,
            0.209_482_141_084_728_0,
        ];
        const WG: [f64; 4] = [
            0.129_484_966_168_869_7,
            0.279_705_391_489_276_7,
            0.381_830_050_505_118_9,
            0.417_959_183_673_469_4,
        ];
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let fc = f(c);
        let mut k = WK[7] * fc;
        let mut g = WG[3] * fc;
        for i in 0..7 {
            let dx = h * XK[i];
            let s = f(c - dx) + f(c + dx);
            k += WK[i] * s;
            if i % 2 == 1 {
                g += WG[i / 2] * s;
            }
        }
        (k * h, ((k - g) * h).abs())
    }
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, err) = gk15(f, a, b);
        if err <= tol.max(1e-15 * v.abs()) || depth == 0 {
            return v;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, 0.5 * tol, depth - 1) + rec(f, m, b, 0.5 * tol, depth - 1)
    }
    rec(&f, a, b, tol, 40)
}

/// Cholesky factor of a symmetric matrix, adding a ridge of `1e-8` times the
/// mean diagonal (escalating) when the matrix is not numerically positive
/// definite.
pub fn cholesky_ridge(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let scale = (m.trace() / n.max(1) as f64).abs().max(1.0);
    let mut ridge = 1e-8 * scale;
    for _ in 0..8 {
        let mut r = m.clone();
        for i in 0..n {
            r[(i, i)] += ridge;
        }
        if let Some(c) = Cholesky::new(r) {
            log::debug!("cholesky: added ridge {ridge:e}");
            return Ok(c);
        }
        ridge *= 100.0;
    }
    Err(Error::numerical("matrix is not positive definite"))
}

/// Solve `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(cholesky_ridge(a)?.solve(b))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}
