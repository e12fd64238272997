//! One-sided t-tests with Student-t tails from the regularised incomplete beta function.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

const CF_TOLERANCE: f64 = 1e-15;
const CF_MAX_ITER: usize = 100_000;
const TINY: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub delta_mu: f64,
}

impl TTestResult {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p < alpha
    }
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut s = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        s += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < CF_TOLERANCE {
            break;
        }
    }
    h
}

/// I_x(a, b), taking `x` and `1 − x` separately to avoid cancellation near 1.
fn reg_inc_beta_split(x: f64, one_minus_x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if one_minus_x <= 0.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * one_minus_x.ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(one_minus_x, b, a) / b
    }
}

/// Regularised incomplete beta function I_x(a, b).
pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> f64 {
    reg_inc_beta_split(x.clamp(0.0, 1.0), (1.0 - x).clamp(0.0, 1.0), a, b)
}

/// Upper-tail probability P(T > t) for Student's t with `df` degrees of freedom.
pub fn t_tail(t: f64, df: f64) -> f64 {
    assert!(df > 0.0, "t_tail needs df > 0, got {df}");
    if t.is_nan() {
        return f64::NAN;
    }
    if t == f64::INFINITY {
        return 0.0;
    }
    if t == f64::NEG_INFINITY {
        return 1.0;
    }
    let t2 = t * t;
    let x = df / (df + t2);
    let half = 0.5 * reg_inc_beta_split(x, t2 / (df + t2), df / 2.0, 0.5);
    let p = if t >= 0.0 { half } else { 1.0 - half };
    p.clamp(0.0, 1.0)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn is_constant(xs: &[f64]) -> bool {
    xs.iter().all(|&x| x == xs[0])
}

fn check_sample(name: &str, xs: &[f64]) -> Result<()> {
    if xs.len() < 2 {
        return Err(Error::Parameter(format!("sample {name} needs at least 2 values, got {}", xs.len())));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Parameter(format!("sample {name} has non-finite entries")));
    }
    Ok(())
}

fn degenerate(delta_mu: f64, df: f64) -> TTestResult {
    let (t, p) = if delta_mu > 0.0 {
        (f64::INFINITY, 0.0)
    } else if delta_mu < 0.0 {
        (f64::NEG_INFINITY, 1.0)
    } else {
        (0.0, 1.0)
    };
    TTestResult { t, df, p, delta_mu }
}

/// Welch's unequal-variance t-test, one-sided with alternative mean(a) > mean(b).
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    check_sample("a", a)?;
    check_sample("b", b)?;
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let delta_mu = ma - mb;
    if is_constant(a) && is_constant(b) {
        return Ok(degenerate(delta_mu, na + nb - 2.0));
    }
    let se2 = sa + sb;
    let t = delta_mu / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(TTestResult {
        t,
        df,
        p: t_tail(t, df),
        delta_mu,
    })
}

/// One-sample t-test, one-sided with alternative mean(xs) > `mu0`.
pub fn one_sample_t(xs: &[f64], mu0: f64) -> Result<TTestResult> {
    check_sample("xs", xs)?;
    let (m, v) = mean_var(xs);
    let n = xs.len() as f64;
    let delta_mu = m - mu0;
    let df = n - 1.0;
    if is_constant(xs) {
        return Ok(degenerate(xs[0] - mu0, df));
    }
    let t = delta_mu / (v / n).sqrt();
    Ok(TTestResult {
        t,
        df,
        p: t_tail(t, df),
        delta_mu,
    })
}

/// Fraction of Welch tests rejecting at `alpha` when both samples are iid N(0, 1).
pub fn null_rejection_rate(sims: usize, n_a: usize, n_b: usize, alpha: f64, seed: u64) -> Result<f64> {
    if sims == 0 {
        return Err(Error::Parameter("need at least one simulation".into()));
    }
    let mut rng = seeded(seed, 0);
    let mut rejected = 0usize;
    for _ in 0..sims {
        let a: Vec<f64> = (0..n_a).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..n_b).map(|_| rng.sample(StandardNormal)).collect();
        if welch_t(&a, &b)?.p < alpha {
            rejected += 1;
        }
    }
    Ok(rejected as f64 / sims as f64)
}
