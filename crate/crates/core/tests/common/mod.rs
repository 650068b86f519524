//! Oracles shared by the integration tests: quadrature, finite differences
//! and Monte-Carlo summaries. Nothing here calls into the crate.
#![allow(dead_code)]

use statrs::distribution::{Continuous, StudentsT};

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Composite 20-point Gauss-Legendre rule over `panels` equal panels.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let (x, w) = gauss_legendre(20);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        total += x.iter().zip(&w).map(|(xi, wi)| wi * f(mid + 0.5 * h * xi)).sum::<f64>() * 0.5 * h;
    }
    total
}

/// Integral over the real line through `x = centre + scale * sinh(t)`.
pub fn integrate_line<F: Fn(f64) -> f64>(f: F, centre: f64, scale: f64, t_max: f64, panels: usize) -> f64 {
    integrate(|t| f(centre + scale * t.sinh()) * scale * t.cosh(), -t_max, t_max, panels)
}

/// Central difference with one Richardson step.
pub fn derivative<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
    let h = 1e-3 * x.abs().max(1.0);
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * d(0.5 * h) - d(h)) / 3.0
}

/// Gradient of `f` at `x` by [`derivative`] along each coordinate.
pub fn gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            derivative(
                |v| {
                    let mut y = x.to_vec();
                    y[k] = v;
                    f(&y)
                },
                x[k],
            )
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Standard error of the mean of an autocorrelated series by batch means.
pub fn batch_se(x: &[f64], batches: usize) -> f64 {
    let b = x.len() / batches;
    let means: Vec<f64> = (0..batches).map(|k| mean(&x[k * b..(k + 1) * b])).collect();
    (var(&means) / batches as f64).sqrt()
}

/// Kolmogorov-Smirnov distance between a sample and a continuous CDF.
pub fn ks_stat<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_two(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut r = vec![0.0; x.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && x[idx[e + 1]] == x[idx[k]] {
            e += 1;
        }
        let avg = 0.5 * (k + e) as f64 + 1.0;
        for &t in &idx[k..=e] {
            r[t] = avg;
        }
        k = e + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let num: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let dx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let dy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    num / (dx * dy).sqrt()
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `erfc` by its continued fraction for |x| > 2 and the Maclaurin series otherwise.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.0 {
        let mut term = x;
        let mut sum = x;
        let mut k = 0.0;
        loop {
            k += 1.0;
            term *= -x * x / k;
            let add = term / (2.0 * k + 1.0);
            sum += add;
            if add.abs() <= 1e-17 * sum.abs() {
                break;
            }
        }
        1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
    } else {
        let mut f = 0.0;
        for k in (1..=60).rev() {
            f = 0.5 * k as f64 / (x + f);
        }
        (-x * x).exp() / std::f64::consts::PI.sqrt() / (x + f)
    }
}

pub fn ln_phi_density(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Moments of `g^(c-1) exp(-b g - a/g)` by quadrature in `ln g`.
pub fn g_moments(c: f64, b: f64, a: f64) -> (f64, f64) {
    let ln_f = |u: f64| c * u - b * u.exp() - a * (-u).exp();
    let mode = {
        let g = ((c - 1.0) + ((c - 1.0).powi(2) + 4.0 * a * b).sqrt()) / (2.0 * b);
        g.max(1e-3).ln()
    };
    let peak = ln_f(mode);
    let upper = (mode + 8.0).max(((c + 10.0 * c.sqrt() + 60.0) / b).ln());
    let m = |k: i32| integrate(|u| (ln_f(u) - peak).exp() * (k as f64 * u).exp(), mode - 30.0, upper, 400);
    let z = m(0);
    let m1 = m(1) / z;
    (m1, m(2) / z - m1 * m1)
}

/// KL from the unit-variance t to N(0, 1), integrated over `ln x` on the half-line.
pub fn numeric_kl(nu: f64) -> f64 {
    let t = StudentsT::new(0.0, ((nu - 2.0) / nu).sqrt(), nu).unwrap();
    2.0 * integrate(
        |u| {
            let x = u.exp();
            let lf = t.ln_pdf(x);
            (lf + u).exp() * (lf - ln_phi_density(x))
        },
        -40.0,
        150.0,
        6000,
    )
}
