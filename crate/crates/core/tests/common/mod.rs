//! Shared oracles for the integration tests.
#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Neg, Sub};

use exlab_core::nn::{Architecture, Network};
use exlab_core::rng::seeded;
use rand::Rng;

/// Forward-mode dual number.
#[derive(Debug, Clone, Copy)]
pub struct D {
    pub v: f64,
    pub d: f64,
}

impl D {
    pub fn c(v: f64) -> Self {
        D { v, d: 0.0 }
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        D { v: e, d: e * self.d }
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        D { v: s, d: self.d / (2.0 * s) }
    }
}

impl Add for D {
    type Output = D;
    fn add(self, o: D) -> D {
        D { v: self.v + o.v, d: self.d + o.d }
    }
}
impl Sub for D {
    type Output = D;
    fn sub(self, o: D) -> D {
        D { v: self.v - o.v, d: self.d - o.d }
    }
}
impl Mul for D {
    type Output = D;
    fn mul(self, o: D) -> D {
        D { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}
impl Div for D {
    type Output = D;
    fn div(self, o: D) -> D {
        D { v: self.v / o.v, d: (self.d * o.v - self.v * o.d) / (o.v * o.v) }
    }
}
impl Neg for D {
    type Output = D;
    fn neg(self) -> D {
        D { v: -self.v, d: -self.d }
    }
}

fn dual_cos(a: &[D], b: &[D]) -> D {
    let dot = a.iter().zip(b).fold(D::c(0.0), |s, (x, y)| s + *x * *y);
    let na = a.iter().fold(D::c(0.0), |s, x| s + *x * *x).sqrt();
    let nb = b.iter().fold(D::c(0.0), |s, x| s + *x * *x).sqrt();
    dot / (na * nb)
}

/// `sim(a,b) − β·sim(c,d)` evaluated on duals, rebuilt from scratch.
pub fn dual_objective(f: &Network, g: &Network, x: &[f64], y_v: &[f64], y: &[D], target: usize, beta: f64) -> D {
    let n = y.len();
    let out = f.predict_one(x).unwrap();
    let jac = f.param_jacobian(x).unwrap();
    let resid = |t: &[D]| -> Vec<D> {
        (0..jac.cols())
            .map(|k| (0..n).fold(D::c(0.0), |s, i| s + D::c(jac.get(i, k)) * (D::c(out[i]) - t[i])) * D::c(-2.0 / n as f64))
            .collect()
    };
    let legit = |t: &[D]| -> Vec<D> {
        let layer = &g.layers()[0];
        let (w, bias) = (layer.weights(), layer.bias());
        let k = w.rows();
        let logits: Vec<D> = (0..k).map(|i| (0..n).fold(D::c(bias.data()[i]), |s, j| s + D::c(w.get(i, j)) * t[j])).collect();
        let m = logits.iter().map(|l| l.v).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<D> = logits.iter().map(|l| (*l - D::c(m)).exp()).collect();
        let z = e.iter().fold(D::c(0.0), |s, v| s + *v);
        let r: Vec<D> = (0..k).map(|i| D::c((i == target) as u8 as f64) - e[i] / z).collect();
        let mut grad = Vec::with_capacity(k * n + k);
        for ri in &r {
            for tj in t {
                grad.push(*ri * *tj);
            }
        }
        grad.extend(r);
        grad
    };
    let yv: Vec<D> = y_v.iter().map(|&v| D::c(v)).collect();
    dual_cos(&resid(&yv), &resid(y)) - D::c(beta) * dual_cos(&legit(&yv), &legit(y))
}

pub struct Toy {
    pub f: Network,
    pub g: Network,
    pub x: Vec<f64>,
    pub y_v: Vec<f64>,
}

/// Toy poisoning instance: f 16→16→8, linear g 8→4, y_v = f(x) plus small noise.
pub fn toy(seed: u64) -> Toy {
    let mut rng = seeded(seed, 60);
    let f = Network::new(&Architecture::mlp(&[16, 16, 8]), &mut rng).unwrap();
    let g = Network::new(&Architecture::mlp(&[8, 4]), &mut rng).unwrap();
    let x: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
    let y_v: Vec<f64> = f.predict_one(&x).unwrap().iter().map(|v| v + 0.3 * (rng.random::<f64>() - 0.5)).collect();
    Toy { f, g, x, y_v }
}
