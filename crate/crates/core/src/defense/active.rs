//! Output perturbation: additive Gaussian noise, noise replacement for
//! flagged queries, and prediction poisoning against a surrogate attacker.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::detect::Verdict;
use crate::error::{Error, Result};
use crate::nn::{Activation, Network};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub mean: f64,
    pub sigma: f64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite() && self.mean.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise needs finite mean and sigma ≥ 0, got mean {} sigma {}",
                self.mean, self.sigma
            )));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma == 0.0 {
            self.mean
        } else {
            Normal::new(self.mean, self.sigma).expect("validated noise").sample(rng)
        }
    }
}

/// `y + n` with `n` iid Normal(mean, σ²) per coordinate.
pub fn perturb_noise<R: Rng + ?Sized>(y: &[f64], cfg: &NoiseConfig, rng: &mut R) -> Vec<f64> {
    y.iter().map(|v| v + cfg.draw(rng)).collect()
}

/// Replaces `y` by a pure noise draw when the detector flagged this query.
pub fn perturb_if_similar<R: Rng + ?Sized>(y: &[f64], verdict: &Verdict, big_noise: &NoiseConfig, rng: &mut R) -> Vec<f64> {
    if verdict.flagged {
        y.iter().map(|_| big_noise.draw(rng)).collect()
    } else {
        y.to_vec()
    }
}

/// `a = −(2/n) Jᵀ (F(x) − target)`: the parameter-space direction an MSE
/// attacker would step along, with `J = ∂F(x)/∂θ` from forward-mode tangents.
pub fn attacker_grad(f: &Network, x: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    let out = f.predict_one(x)?;
    if out.len() != target.len() {
        return Err(Error::dim("attacker target", out.len(), target.len()));
    }
    let jac = f.param_jacobian(x)?;
    Ok(attacker_grad_from(&jac, &out, target))
}

fn attacker_grad_from(jac: &crate::nn::Tensor, out: &[f64], target: &[f64]) -> Vec<f64> {
    let n = out.len() as f64;
    let mut a = vec![0.0; jac.cols()];
    for (i, (o, t)) in out.iter().zip(target).enumerate() {
        let r = -(2.0 / n) * (o - t);
        for (acc, j) in a.iter_mut().zip(jac.row(i)) {
            *acc += r * j;
        }
    }
    a
}

fn linear_classifier(g: &Network) -> Result<(&crate::nn::Tensor, &crate::nn::Tensor)> {
    match g.layers() {
        [layer] if layer.activation() == Activation::Identity => Ok((layer.weights(), layer.bias())),
        _ => Err(Error::Parameter(
            "downstream surrogate must be a single linear layer producing logits".into(),
        )),
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `c = ∇_φ log softmax(G(y; φ))_t = [(e_t − p) yᵀ, (e_t − p)]`, flattened
/// like [`Network::flat_params`].
pub fn legit_grad(g: &Network, y: &[f64], target: usize) -> Result<Vec<f64>> {
    let (w, b) = linear_classifier(g)?;
    if y.len() != w.cols() {
        return Err(Error::dim("downstream surrogate input", w.cols(), y.len()));
    }
    if target >= w.rows() {
        return Err(Error::Parameter(format!("target label {target} outside [0, {})", w.rows())));
    }
    let logits: Vec<f64> = (0..w.rows())
        .map(|i| b.data()[i] + w.row(i).iter().zip(y).map(|(a, c)| a * c).sum::<f64>())
        .collect();
    let p = softmax(&logits);
    let r: Vec<f64> = (0..w.rows()).map(|i| (i == target) as u8 as f64 - p[i]).collect();
    let mut out = Vec::with_capacity(w.len() + b.len());
    for ri in &r {
        out.extend(y.iter().map(|yj| ri * yj));
    }
    out.extend_from_slice(&r);
    Ok(out)
}

/// Surrogates and budget for prediction poisoning.
#[derive(Debug, Clone)]
pub struct PoisonConfig {
    pub surrogate_attacker: Network,
    /// Single linear layer producing logits.
    pub surrogate_downstream: Network,
    pub target: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub steps: usize,
    /// Defaults to `epsilon / 20`.
    pub step_size: Option<f64>,
}

impl PoisonConfig {
    pub fn new(surrogate_attacker: Network, surrogate_downstream: Network, target: usize, epsilon: f64) -> Self {
        Self {
            surrogate_attacker,
            surrogate_downstream,
            target,
            epsilon,
            beta: 1.0,
            steps: 100,
            step_size: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Parameter(format!("poison budget must be > 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Parameter("poison needs at least one step".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Parameter("beta must be ≥ 0".into()));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::Parameter("step size must be > 0".into()));
            }
        }
        let (w, _) = linear_classifier(&self.surrogate_downstream)?;
        if self.target >= w.rows() {
            return Err(Error::Parameter(format!("target class {} outside [0, {})", self.target, w.rows())));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 20.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoisonOutcome {
    pub y_tilde: Vec<f64>,
    pub sim_ab: f64,
    pub sim_cd: f64,
    pub objective: f64,
    pub initial_objective: f64,
    /// ‖ỹ − y_v‖₂ after every step.
    pub radii: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// ∂cos(u, v)/∂v.
fn cosine_grad_wrt_second(u: &[f64], v: &[f64]) -> Vec<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return vec![0.0; v.len()];
    }
    let c = dot(u, v) / (nu * nv);
    u.iter().zip(v).map(|(a, b)| a / (nu * nv) - c * b / (nv * nv)).collect()
}

/// Precomputed pieces of the poisoning objective at a fixed query.
pub struct PoisonObjective<'a> {
    cfg: &'a PoisonConfig,
    jac: crate::nn::Tensor,
    out: Vec<f64>,
    a: Vec<f64>,
    c: Vec<f64>,
}

impl<'a> PoisonObjective<'a> {
    pub fn new(cfg: &'a PoisonConfig, x: &[f64], y_v: &[f64]) -> Result<Self> {
        let out = cfg.surrogate_attacker.predict_one(x)?;
        if out.len() != y_v.len() {
            return Err(Error::dim("served vector", out.len(), y_v.len()));
        }
        let jac = cfg.surrogate_attacker.param_jacobian(x)?;
        let a = attacker_grad_from(&jac, &out, y_v);
        let c = legit_grad(&cfg.surrogate_downstream, y_v, cfg.target)?;
        Ok(Self { cfg, jac, out, a, c })
    }

    /// `(sim(a,b), sim(c,d))` at `ỹ`.
    pub fn similarities(&self, y: &[f64]) -> Result<(f64, f64)> {
        let b = attacker_grad_from(&self.jac, &self.out, y);
        let d = legit_grad(&self.cfg.surrogate_downstream, y, self.cfg.target)?;
        Ok((cosine(&self.a, &b), cosine(&self.c, &d)))
    }

    pub fn value(&self, y: &[f64]) -> Result<f64> {
        let (ab, cd) = self.similarities(y)?;
        Ok(ab - self.cfg.beta * cd)
    }

    /// Closed-form ∂/∂ỹ of `sim(a,b) − β·sim(c,d)`.
    pub fn gradient(&self, y: &[f64]) -> Result<Vec<f64>> {
        let n = y.len();
        let b = attacker_grad_from(&self.jac, &self.out, y);
        let gb = cosine_grad_wrt_second(&self.a, &b);
        // b = a + (2/n) Jᵀ (ỹ − y_v), so ∂b/∂ỹ contributes (2/n) J·gb
        let mut grad: Vec<f64> = (0..n).map(|i| (2.0 / n as f64) * dot(self.jac.row(i), &gb)).collect();

        let (w, bias) = linear_classifier(&self.cfg.surrogate_downstream)?;
        let k = w.rows();
        let d = legit_grad(&self.cfg.surrogate_downstream, y, self.cfg.target)?;
        let gd = cosine_grad_wrt_second(&self.c, &d);
        let (gw, gbias) = gd.split_at(k * n);
        let logits: Vec<f64> = (0..k).map(|i| bias.data()[i] + dot(w.row(i), y)).collect();
        let p = softmax(&logits);
        let r: Vec<f64> = (0..k).map(|i| (i == self.cfg.target) as u8 as f64 - p[i]).collect();
        // u = G_W ỹ + g_b, then v = (diag(p) − ppᵀ) u
        let u: Vec<f64> = (0..k).map(|i| dot(&gw[i * n..(i + 1) * n], y) + gbias[i]).collect();
        let pu = dot(&p, &u);
        let v: Vec<f64> = (0..k).map(|i| p[i] * (u[i] - pu)).collect();
        for j in 0..n {
            let direct: f64 = (0..k).map(|i| gw[i * n + j] * r[i]).sum();
            let through_p: f64 = (0..k).map(|i| w.get(i, j) * v[i]).sum();
            grad[j] -= self.cfg.beta * (direct - through_p);
        }
        Ok(grad)
    }
}

/// Projected normalised-gradient descent on `sim(a,b) − β·sim(c,d)` inside
/// the ℓ2 ball of radius ε around `y_v`.
pub fn poison(y_v: &[f64], x: &[f64], cfg: &PoisonConfig) -> Result<PoisonOutcome> {
    cfg.validate()?;
    let obj = PoisonObjective::new(cfg, x, y_v)?;
    let initial_objective = obj.value(y_v)?;
    let step = cfg.step();
    let mut y = y_v.to_vec();
    let mut radii = Vec::with_capacity(cfg.steps);
    for s in 0..cfg.steps {
        let g = obj.gradient(&y)?;
        let gn = norm(&g);
        if !gn.is_finite() {
            return Err(Error::Numeric {
                step: s,
                what: "poison gradient is not finite".into(),
            });
        }
        if gn > 0.0 {
            for (yi, gi) in y.iter_mut().zip(&g) {
                *yi -= step * gi / gn;
            }
        }
        let delta: Vec<f64> = y.iter().zip(y_v).map(|(a, b)| a - b).collect();
        let r = norm(&delta);
        if r > cfg.epsilon {
            for ((yi, di), vi) in y.iter_mut().zip(&delta).zip(y_v) {
                *yi = vi + di * cfg.epsilon / r;
            }
        }
        radii.push(norm(&y.iter().zip(y_v).map(|(a, b)| a - b).collect::<Vec<_>>()));
    }
    let (sim_ab, sim_cd) = obj.similarities(&y)?;
    let objective = sim_ab - cfg.beta * sim_cd;
    if !objective.is_finite() {
        return Err(Error::Numeric {
            step: cfg.steps,
            what: "poison objective is not finite".into(),
        });
    }
    Ok(PoisonOutcome {
        y_tilde: y,
        sim_ab,
        sim_cd,
        objective,
        initial_objective,
        radii,
    })
}
