//! Loss functions with exact input gradients.
//!
//! Every loss returns a [`LossOutput`] whose `grads` line up with the input
//! batches in argument order. Inputs that are gradient-stopped (victim outputs,
//! SimSiam targets) get an all-zero gradient tensor.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const DEFAULT_INFO_NCE_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_SOFT_NN_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_BARLOW_LAMBDA: f64 = 5e-3;
const NORM_FLOOR: f64 = 1e-12;
const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

impl LossOutput {
    fn checked(value: f64, grads: Vec<Tensor>, what: &str) -> Result<Self> {
        if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                step: 0,
                what: format!("{what} produced a non-finite value or gradient"),
            });
        }
        Ok(Self { value, grads })
    }
}

fn check_matrix(ctx: &str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!("{ctx}: expected a [B×d] batch, got shape {:?}", t.shape())));
    }
    Ok(())
}

fn check_pair(ctx: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    check_matrix(ctx, a)?;
    check_matrix(ctx, b)?;
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{ctx}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row-wise ℓ2 normalisation; returns the unit rows and the original norms.
fn normalize_rows(x: &Tensor, ctx: &str) -> Result<(Tensor, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = norm(x.row(i));
        if n < NORM_FLOOR {
            return Err(Error::Numeric {
                step: i,
                what: format!("zero-norm row {i} in {ctx}"),
            });
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pulls a gradient on unit rows back to the raw rows.
fn normalize_backward(unit: &Tensor, norms: &[f64], d_unit: &Tensor) -> Tensor {
    let mut dx = d_unit.clone();
    for (i, &n) in norms.iter().enumerate() {
        let u = unit.row(i);
        let proj = dot(u, d_unit.row(i));
        for (g, &ui) in dx.row_mut(i).iter_mut().zip(u) {
            *g = (*g - ui * proj) / n;
        }
    }
    dx
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean squared error; `y_v` is constant.
pub fn mse(y_a: &Tensor, y_v: &Tensor) -> Result<LossOutput> {
    check_pair("mse", y_a, y_v)?;
    let n = y_a.len() as f64;
    let diff = y_a.sub(y_v)?;
    let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.scale(2.0 / n);
    LossOutput::checked(value, vec![grad, Tensor::zeros(y_v.shape())], "mse")
}

fn neg_cosine_half(p: &Tensor, z: &Tensor, batch: f64, ctx: &str) -> Result<(f64, Tensor)> {
    let mut grad = Tensor::zeros(p.shape());
    let mut value = 0.0;
    for i in 0..p.rows() {
        let (pr, zr) = (p.row(i), z.row(i));
        let (np, nz) = (norm(pr), norm(zr));
        if np < NORM_FLOOR || nz < NORM_FLOOR {
            return Err(Error::Numeric {
                step: i,
                what: format!("zero-norm row {i} in {ctx}"),
            });
        }
        let cos = dot(pr, zr) / (np * nz);
        value -= cos / (2.0 * batch);
        let scale = -1.0 / (2.0 * batch * np);
        for ((g, &pv), &zv) in grad.row_mut(i).iter_mut().zip(pr).zip(zr) {
            *g = scale * (zv / nz - cos * pv / np);
        }
    }
    Ok((value, grad))
}

/// Symmetrised negative cosine similarity with stop-gradient on the `z` inputs.
pub fn neg_cosine_sym(p1: &Tensor, z2: &Tensor, p2: &Tensor, z1: &Tensor) -> Result<LossOutput> {
    check_pair("neg_cosine_sym", p1, z2)?;
    check_pair("neg_cosine_sym", p2, z1)?;
    check_pair("neg_cosine_sym", p1, p2)?;
    let b = p1.rows() as f64;
    let (v1, g1) = neg_cosine_half(p1, z2, b, "neg_cosine_sym (p1, z2)")?;
    let (v2, g2) = neg_cosine_half(p2, z1, b, "neg_cosine_sym (p2, z1)")?;
    let zeros = Tensor::zeros(p1.shape());
    LossOutput::checked(v1 + v2, vec![g1, zeros.clone(), g2, zeros], "neg_cosine_sym")
}

/// Cross-entropy over cosine logits: anchor `i` against all other rows, with
/// `positives[i]` as the (averaged) targets. Returns the mean loss and ∂/∂h.
fn contrastive_core(h: &Tensor, positives: &[Vec<usize>], tau: f64) -> Result<(f64, Tensor)> {
    let n = h.rows();
    let sim = h.matmul_nt(h)?.scale(1.0 / tau);
    let mut coef = Tensor::zeros(&[n, n]);
    let mut value = 0.0;
    for i in 0..n {
        let row = sim.row(i);
        let lse = log_sum_exp((0..n).filter(|&k| k != i).map(|k| row[k]));
        let pos = &positives[i];
        let w = 1.0 / pos.len() as f64;
        value += lse - w * pos.iter().map(|&p| row[p]).sum::<f64>();
        let c = coef.row_mut(i);
        for k in (0..n).filter(|&k| k != i) {
            c[k] = (row[k] - lse).exp() / n as f64;
        }
        for &p in pos {
            c[p] -= w / n as f64;
        }
    }
    let sym = coef.add(&coef.transpose()?)?;
    let dh = sym.matmul(h)?.scale(1.0 / tau);
    Ok((value / n as f64, dh))
}

/// NT-Xent over the 2B pooled views. Row `i` of `z` is paired with row `i` of `z2`.
pub fn info_nce(z: &Tensor, z2: &Tensor, tau: f64) -> Result<LossOutput> {
    check_pair("info_nce", z, z2)?;
    check_temperature(tau)?;
    let b = z.rows();
    if b < 2 {
        return Err(Error::Parameter(format!("info_nce needs a batch of at least 2, got {b}")));
    }
    let (u1, n1) = normalize_rows(z, "info_nce first view")?;
    let (u2, n2) = normalize_rows(z2, "info_nce second view")?;
    let h = Tensor::vstack(&[&u1, &u2])?;
    let positives: Vec<Vec<usize>> = (0..2 * b).map(|i| vec![(i + b) % (2 * b)]).collect();
    let (value, dh) = contrastive_core(&h, &positives, tau)?;
    let g1 = normalize_backward(&u1, &n1, &dh.slice_rows(0, b)?);
    let g2 = normalize_backward(&u2, &n2, &dh.slice_rows(b, 2 * b)?);
    LossOutput::checked(value, vec![g1, g2], "info_nce")
}

/// Supervised contrastive loss; every other row with the same label is a positive.
pub fn sup_con(z: &Tensor, labels: &[usize], tau: f64) -> Result<LossOutput> {
    check_matrix("sup_con", z)?;
    check_temperature(tau)?;
    if labels.len() != z.rows() {
        return Err(Error::dim("sup_con labels", z.rows(), labels.len()));
    }
    let positives = same_group_sets(labels, "sup_con", "label")?;
    let (u, norms) = normalize_rows(z, "sup_con")?;
    let (value, du) = contrastive_core(&u, &positives, tau)?;
    LossOutput::checked(value, vec![normalize_backward(&u, &norms, &du)], "sup_con")
}

fn same_group_sets(groups: &[usize], ctx: &str, what: &str) -> Result<Vec<Vec<usize>>> {
    let mut members: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let pos: Vec<usize> = members[g].iter().copied().filter(|&j| j != i).collect();
            if pos.is_empty() {
                return Err(Error::Pairing(format!("{ctx}: row {i} has no other row with {what} {g}")));
            }
            Ok(pos)
        })
        .collect()
}

/// Soft nearest-neighbour loss on raw representations. Rows sharing a
/// `sources` id are positives of each other.
pub fn soft_nn(reps: &Tensor, sources: &[usize], tau: f64) -> Result<LossOutput> {
    check_matrix("soft_nn", reps)?;
    check_temperature(tau)?;
    let n = reps.rows();
    if sources.len() != n {
        return Err(Error::dim("soft_nn sources", n, sources.len()));
    }
    let positives = same_group_sets(sources, "soft_nn", "source")?;
    if let Some(i) = positives.iter().position(|p| p.len() + 1 == n) {
        return Err(Error::Pairing(format!("soft_nn: row {i} has no negative")));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = reps.row(i).iter().zip(reps.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
        }
    }
    let mut w = vec![0.0; n * n];
    let mut value = 0.0;
    for i in 0..n {
        let logit = |k: usize| -dist[i * n + k] / tau;
        let lse_all = log_sum_exp((0..n).filter(|&k| k != i).map(logit));
        let lse_pos = log_sum_exp(positives[i].iter().map(|&k| logit(k)));
        value += lse_all - lse_pos;
        for k in (0..n).filter(|&k| k != i) {
            w[i * n + k] -= (logit(k) - lse_all).exp() / (tau * n as f64);
        }
        for &k in &positives[i] {
            w[i * n + k] += (logit(k) - lse_pos).exp() / (tau * n as f64);
        }
    }
    let mut grad = Tensor::zeros(reps.shape());
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let m = 2.0 * (w[i * n + j] + w[j * n + i]);
            let (ri, rj) = (reps.row(i).to_vec(), reps.row(j));
            for ((g, a), b) in grad.row_mut(i).iter_mut().zip(ri).zip(rj) {
                *g += m * (a - b);
            }
        }
    }
    LossOutput::checked(value / n as f64, vec![grad], "soft_nn")
}

struct Standardized {
    values: Tensor,
    std: Vec<f64>,
    floored: Vec<bool>,
}

fn standardize_columns(x: &Tensor) -> Standardized {
    let (b, d) = (x.rows(), x.cols());
    let mut values = x.clone();
    let mut std = vec![0.0; d];
    let mut floored = vec![false; d];
    for c in 0..d {
        let mean = (0..b).map(|r| x.get(r, c)).sum::<f64>() / b as f64;
        let var = (0..b).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / b as f64;
        let s = var.sqrt();
        floored[c] = s < STD_FLOOR;
        std[c] = s.max(STD_FLOOR);
        for r in 0..b {
            values.set(r, c, (x.get(r, c) - mean) / std[c]);
        }
    }
    Standardized { values, std, floored }
}

fn standardize_backward(s: &Standardized, dn: &Tensor) -> Tensor {
    let (b, d) = (dn.rows(), dn.cols());
    let mut dx = Tensor::zeros(dn.shape());
    for c in 0..d {
        let mean_g = (0..b).map(|r| dn.get(r, c)).sum::<f64>() / b as f64;
        let mean_gn = if s.floored[c] {
            0.0
        } else {
            (0..b).map(|r| dn.get(r, c) * s.values.get(r, c)).sum::<f64>() / b as f64
        };
        for r in 0..b {
            dx.set(r, c, (dn.get(r, c) - mean_g - s.values.get(r, c) * mean_gn) / s.std[c]);
        }
    }
    dx
}

/// Barlow Twins redundancy-reduction loss on batch-standardised columns.
pub fn barlow(z: &Tensor, z2: &Tensor, lambda: f64) -> Result<LossOutput> {
    check_pair("barlow", z, z2)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("barlow lambda must be ≥ 0, got {lambda}")));
    }
    let b = z.rows();
    if b < 2 {
        return Err(Error::Parameter(format!("barlow needs a batch of at least 2, got {b}")));
    }
    let s1 = standardize_columns(z);
    let s2 = standardize_columns(z2);
    let c = s1.values.matmul_tn(&s2.values)?.scale(1.0 / b as f64);
    let d = c.rows();
    let mut value = 0.0;
    let mut gc = Tensor::zeros(c.shape());
    for i in 0..d {
        for j in 0..d {
            let cij = c.get(i, j);
            if i == j {
                value += (1.0 - cij).powi(2);
                gc.set(i, j, -2.0 * (1.0 - cij));
            } else {
                value += lambda * cij * cij;
                gc.set(i, j, 2.0 * lambda * cij);
            }
        }
    }
    let dn1 = s2.values.matmul_nt(&gc)?.scale(1.0 / b as f64);
    let dn2 = s1.values.matmul(&gc)?.scale(1.0 / b as f64);
    let g1 = standardize_backward(&s1, &dn1);
    let g2 = standardize_backward(&s2, &dn2);
    LossOutput::checked(value, vec![g1, g2], "barlow")
}

fn argsort_column(x: &Tensor, c: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.sort_by(|&a, &b| x.get(a, c).total_cmp(&x.get(b, c)));
    idx
}

/// Per-dimension 1-D Wasserstein-1 distance between the batch columns,
/// averaged over dimensions. `y_v` is constant.
pub fn wasserstein_1d(y_a: &Tensor, y_v: &Tensor) -> Result<LossOutput> {
    check_pair("wasserstein_1d", y_a, y_v)?;
    let (b, d) = (y_a.rows(), y_a.cols());
    if b == 0 || d == 0 {
        return Err(Error::Empty("wasserstein_1d: empty batch".into()));
    }
    let mut grad = Tensor::zeros(y_a.shape());
    let mut value = 0.0;
    let w = 1.0 / (b * d) as f64;
    for c in 0..d {
        let ia = argsort_column(y_a, c);
        let iv = argsort_column(y_v, c);
        for (&ra, &rv) in ia.iter().zip(&iv) {
            let diff = y_a.get(ra, c) - y_v.get(rv, c);
            value += w * diff.abs();
            grad.set(ra, c, w * diff.signum() * (diff != 0.0) as u8 as f64);
        }
    }
    LossOutput::checked(value, vec![grad, Tensor::zeros(y_v.shape())], "wasserstein_1d")
}

/// Row-wise softmax of `logits` [B×k].
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    check_matrix("softmax_rows", logits)?;
    let mut out = Tensor::zeros(logits.shape());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        for (o, &z) in out.row_mut(i).iter_mut().zip(row) {
            *o = (z - lse).exp();
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy of `logits` [B×k] against class indices.
/// Returns the value and ∂/∂logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    check_matrix("softmax_cross_entropy", logits)?;
    let (b, k) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::dim("cross-entropy labels", b, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Parameter(format!("label {bad} outside [0, {k})")));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut value = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        value += lse - row[label];
        for (g, &z) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (z - lse).exp() / b as f64;
        }
        grad.row_mut(i)[label] -= 1.0 / b as f64;
    }
    let value = value / b as f64;
    if !value.is_finite() || !grad.is_finite() {
        return Err(Error::Numeric {
            step: 0,
            what: "cross-entropy produced a non-finite value".into(),
        });
    }
    Ok((value, grad))
}

/// Loss selection for extraction objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    NegCosineSym,
    InfoNce { temperature: f64 },
    SoftNn { temperature: f64 },
    SupCon { temperature: f64 },
    Barlow { lambda: f64 },
    Wasserstein1d,
}

impl LossKind {
    pub fn info_nce() -> Self {
        LossKind::InfoNce {
            temperature: DEFAULT_INFO_NCE_TEMPERATURE,
        }
    }

    pub fn soft_nn() -> Self {
        LossKind::SoftNn {
            temperature: DEFAULT_SOFT_NN_TEMPERATURE,
        }
    }

    pub fn sup_con() -> Self {
        LossKind::SupCon {
            temperature: DEFAULT_INFO_NCE_TEMPERATURE,
        }
    }

    pub fn barlow() -> Self {
        LossKind::Barlow {
            lambda: DEFAULT_BARLOW_LAMBDA,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::NegCosineSym => "neg_cosine_sym",
            LossKind::InfoNce { .. } => "info_nce",
            LossKind::SoftNn { .. } => "soft_nn",
            LossKind::SupCon { .. } => "sup_con",
            LossKind::Barlow { .. } => "barlow",
            LossKind::Wasserstein1d => "wasserstein_1d",
        }
    }

    pub fn needs_labels(&self) -> bool {
        matches!(self, LossKind::SupCon { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::InfoNce { temperature } | LossKind::SoftNn { temperature } | LossKind::SupCon { temperature } => {
                check_temperature(temperature)
            }
            LossKind::Barlow { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                Err(Error::Parameter(format!("barlow lambda must be ≥ 0, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    /// Loss between attacker outputs `y_a` and constant victim outputs `y_v`
    /// (row `i` of each comes from the same input). Returns the value and ∂/∂y_a.
    pub fn extraction(&self, y_a: &Tensor, y_v: &Tensor, labels: Option<&[usize]>) -> Result<(f64, Tensor)> {
        check_pair(self.name(), y_a, y_v)?;
        let b = y_a.rows();
        let first = |out: LossOutput| -> Result<(f64, Tensor)> {
            let g = out.grads.into_iter().next().expect("at least one gradient");
            Ok((out.value, g.slice_rows(0, b)?))
        };
        match *self {
            LossKind::Mse => first(mse(y_a, y_v)?),
            LossKind::Wasserstein1d => first(wasserstein_1d(y_a, y_v)?),
            LossKind::NegCosineSym => first(neg_cosine_sym(y_a, y_v, y_a, y_v)?).map(|(v, g)| (v, g.scale(2.0))),
            LossKind::InfoNce { temperature } => first(info_nce(y_a, y_v, temperature)?),
            LossKind::Barlow { lambda } => first(barlow(y_a, y_v, lambda)?),
            LossKind::SoftNn { temperature } => {
                let pooled = Tensor::vstack(&[y_a, y_v])?;
                let sources: Vec<usize> = (0..2 * b).map(|i| i % b).collect();
                first(soft_nn(&pooled, &sources, temperature)?)
            }
            LossKind::SupCon { temperature } => {
                let labels = labels.ok_or_else(|| Error::Parameter("sup_con requires labels".into()))?;
                if labels.len() != b {
                    return Err(Error::dim("sup_con labels", b, labels.len()));
                }
                let pooled = Tensor::vstack(&[y_a, y_v])?;
                let doubled: Vec<usize> = labels.iter().chain(labels).copied().collect();
                first(sup_con(&pooled, &doubled, temperature)?)
            }
        }
    }
}
