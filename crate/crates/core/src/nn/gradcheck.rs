//! Central-difference gradient verification.

use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-12)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function at `x`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Parameter(format!("finite-difference eps {eps} outside (0, 1e-3]")));
    }
    Ok(())
}

/// Compares analytic parameter gradients of `loss_fn ∘ net` against central
/// differences. `loss_fn` maps the network output to `(loss, ∂loss/∂output)`.
pub fn finite_diff_check<F>(net: &Network, loss_fn: F, batch: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    finite_diff_check_with(net, loss_fn, |g| g.to_vec(), batch, eps)
}

/// Same check with a hook that may rewrite the analytic gradient before the
/// comparison (used to confirm the checker catches corrupted gradients).
pub fn finite_diff_check_with<F, G>(net: &Network, loss_fn: F, analytic: G, batch: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    check_eps(eps)?;
    let trace = net.forward(batch)?;
    let (_, out_grad) = loss_fn(trace.output())?;
    let (grads, _) = net.backward(&trace, &out_grad)?;
    let reported = analytic(&grads.flatten());

    let base = net.flat_params();
    let mut probe = net.clone();
    let mut params = base.clone();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        params[i] = base[i] + eps;
        let up = param_loss(&mut probe, &params, batch, &loss_fn)?;
        params[i] = base[i] - eps;
        let down = param_loss(&mut probe, &params, batch, &loss_fn)?;
        params[i] = base[i];
        numeric.push((up - down) / (2.0 * eps));
    }
    Ok(max_relative_error(&reported, &numeric))
}

fn param_loss<F>(net: &mut Network, params: &[f64], batch: &Tensor, loss_fn: &F) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    net.set_flat_params(params)?;
    Ok(loss_fn(&net.predict(batch)?)?.0)
}

/// Rejects a batch whose pre-activations sit within `margin` of a relu kink.
pub fn clear_of_kinks(net: &Network, batch: &Tensor, margin: f64) -> Result<bool> {
    use super::network::Activation;
    let trace = net.forward(batch)?;
    Ok(net
        .layers()
        .iter()
        .zip(trace.pre_activations())
        .filter(|(l, _)| l.activation() == Activation::Relu)
        .all(|(_, pre)| pre.data().iter().all(|v| v.abs() >= margin)))
}
