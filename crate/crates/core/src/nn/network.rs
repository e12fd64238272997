//! Fully connected networks with explicit forward traces and manual backprop.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation `x` and the activation value `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// `y = activation(x · Wᵀ + b)` with `W` stored as `[out × in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub(crate) weights: Tensor,
    pub(crate) bias: Tensor,
    pub(crate) activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::Shape(format!("weights must be rank 2, got {:?}", weights.shape())));
        }
        let out = weights.rows();
        if bias.shape() != [out] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {out} output units",
                bias.shape()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// He-uniform for relu layers, Xavier-uniform otherwise; zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = match activation {
            Activation::Relu => (6.0 / inputs as f64).sqrt(),
            _ => (6.0 / (inputs + outputs) as f64).sqrt(),
        };
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite init limit");
        let data = (0..inputs * outputs).map(|_| dist.sample(rng)).collect();
        Self {
            weights: Tensor::matrix(outputs, inputs, data).expect("init shape"),
            bias: Tensor::zeros(&[outputs]),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn pre_activation(&self, input: &Tensor) -> Result<Tensor> {
        let mut pre = input.matmul_nt(&self.weights)?;
        let out = self.out_dim();
        let b = self.bias.data();
        for row in pre.data_mut().chunks_mut(out) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(pre)
    }
}

/// Layer widths plus activations; enough to rebuild a network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[input, hidden..., output]`.
    pub widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Architecture {
    pub fn mlp(widths: &[usize]) -> Self {
        Self {
            widths: widths.to_vec(),
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated architecture")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Parameter("architecture needs at least input and output widths".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Parameter(format!("zero width in architecture {:?}", self.widths)));
        }
        Ok(())
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 2 == self.widths.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

#[derive(Debug)]
pub struct Network {
    layers: Vec<DenseLayer>,
    stamp: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            stamp: fresh_stamp(),
        }
    }
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Everything `backward` needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    stamp: u64,
    /// Input to each layer (`inputs[0]` is the batch).
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    output: Tensor,
}

impl ForwardTrace {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn into_output(self) -> Tensor {
        self.output
    }

    /// Pre-activations of every layer, in order.
    pub fn pre_activations(&self) -> &[Tensor] {
        &self.pre
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: Tensor::zeros(l.weights.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    /// Layer by layer, weights (row-major) then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.is_finite() && l.bias.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights = l.weights.scale(s);
            l.bias = l.bias.scale(s);
        }
    }

    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::dim("gradient layer count", self.layers.len(), other.layers.len()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights = a.weights.add(&b.weights)?;
            a.bias = a.bias.add(&b.bias)?;
        }
        Ok(())
    }
}

impl Network {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::init(w[0], w[1], arch.activation_for(i), rng))
            .collect();
        Ok(Self {
            layers,
            stamp: fresh_stamp(),
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(
                    format!("layer {} input (chained from layer {k})", k + 1),
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        Ok(Self {
            layers,
            stamp: fresh_stamp(),
        })
    }

    /// A single identity layer with `W = I`, `b = 0`.
    pub fn identity(dim: usize) -> Self {
        let layer = DenseLayer {
            weights: Tensor::eye(dim),
            bias: Tensor::zeros(&[dim]),
            activation: Activation::Identity,
        };
        Self {
            layers: vec![layer],
            stamp: fresh_stamp(),
        }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable access invalidates outstanding traces.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.stamp = fresh_stamp();
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty network").out_dim()
    }

    pub fn architecture(&self) -> Architecture {
        let mut widths = vec![self.input_dim()];
        widths.extend(self.layers.iter().map(|l| l.out_dim()));
        let n = self.layers.len();
        Architecture {
            widths,
            hidden_activation: if n > 1 {
                self.layers[0].activation
            } else {
                Activation::Relu
            },
            output_activation: self.layers[n - 1].activation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::dim("flat parameter vector", self.num_params(), params.len()));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let nw = l.weights.len();
            l.weights.data_mut().copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.data_mut().copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// SHA-256 over the little-endian parameter bytes and layer shapes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            h.update((l.in_dim() as u64).to_le_bytes());
            h.update((l.out_dim() as u64).to_le_bytes());
            h.update([l.activation.code()]);
            for v in l.weights.data().iter().chain(l.bias.data()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<ForwardTrace> {
        if batch.shape().len() != 2 || batch.rows() == 0 {
            return Err(Error::Shape(format!("batch must be [B × in] with B ≥ 1, got {:?}", batch.shape())));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            if current.cols() != layer.in_dim() {
                return Err(Error::dim(format!("layer {k} input"), layer.in_dim(), current.cols()));
            }
            let z = layer.pre_activation(&current)?;
            let a = z.map(|v| layer.activation.apply(v));
            inputs.push(std::mem::replace(&mut current, a));
            pre.push(z);
        }
        Ok(ForwardTrace {
            stamp: self.stamp,
            inputs,
            pre,
            output: current,
        })
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.shape().len() != 2 || batch.rows() == 0 {
            return Err(Error::Shape(format!("batch must be [B × in] with B ≥ 1, got {:?}", batch.shape())));
        }
        let mut current = batch.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            if current.cols() != layer.in_dim() {
                return Err(Error::dim(format!("layer {k} input"), layer.in_dim(), current.cols()));
            }
            let act = layer.activation;
            current = layer.pre_activation(&current)?.map(|v| act.apply(v));
        }
        Ok(current)
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.predict(&batch)?.into_data())
    }

    pub fn backward(&self, trace: &ForwardTrace, output_grad: &Tensor) -> Result<(ParamGrads, Tensor)> {
        if trace.stamp != self.stamp {
            return Err(Error::StaleTrace);
        }
        if output_grad.shape() != trace.output.shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                output_grad.shape(),
                trace.output.shape()
            )));
        }
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut upstream = output_grad.clone();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let post = if k + 1 < n {
                &trace.inputs[k + 1]
            } else {
                &trace.output
            };
            let mut delta = upstream;
            for ((d, &x), &y) in delta
                .data_mut()
                .iter_mut()
                .zip(trace.pre[k].data())
                .zip(post.data())
            {
                *d *= layer.activation.derivative(x, y);
            }
            let dw = delta.matmul_tn(&trace.inputs[k])?;
            let out = layer.out_dim();
            let mut db = vec![0.0; out];
            for row in delta.data().chunks(out) {
                for (acc, v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            upstream = delta.matmul(&layer.weights)?;
            grads.push(LayerGrads {
                weights: dw,
                bias: Tensor::vector(db)?,
            });
        }
        grads.reverse();
        Ok((ParamGrads { layers: grads }, upstream))
    }

    /// Jacobian `∂F(x)/∂θ` as an `[out × num_params]` matrix, computed by
    /// forward-mode tangent propagation (one tangent per parameter).
    pub fn param_jacobian(&self, x: &[f64]) -> Result<Tensor> {
        let batch = Tensor::matrix(1, x.len(), x.to_vec())?;
        let trace = self.forward(&batch)?;
        let n_layers = self.layers.len();
        let out_dim = self.output_dim();
        let total = self.num_params();
        let mut jac = Tensor::zeros(&[out_dim, total]);

        // Activation derivative of each layer at this input.
        let derivs: Vec<Vec<f64>> = (0..n_layers)
            .map(|k| {
                let post = if k + 1 < n_layers {
                    trace.inputs[k + 1].data()
                } else {
                    trace.output.data()
                };
                trace.pre[k]
                    .data()
                    .iter()
                    .zip(post)
                    .map(|(&z, &y)| self.layers[k].activation.derivative(z, y))
                    .collect()
            })
            .collect();

        let push_forward = |start: usize, mut dpre: Vec<f64>| -> Vec<f64> {
            for k in start..n_layers {
                let da: Vec<f64> = dpre.iter().zip(&derivs[k]).map(|(a, b)| a * b).collect();
                if k + 1 == n_layers {
                    return da;
                }
                let next = &self.layers[k + 1];
                dpre = (0..next.out_dim())
                    .map(|i| next.weights.row(i).iter().zip(&da).map(|(w, v)| w * v).sum())
                    .collect();
            }
            unreachable!("loop returns at the last layer")
        };

        let mut col = 0;
        for (k, layer) in self.layers.iter().enumerate() {
            let input = trace.inputs[k].data();
            let (out, inp) = (layer.out_dim(), layer.in_dim());
            for i in 0..out {
                for j in 0..inp {
                    let mut dpre = vec![0.0; out];
                    dpre[i] = input[j];
                    let t = push_forward(k, dpre);
                    for (r, v) in t.iter().enumerate() {
                        jac.set(r, col, *v);
                    }
                    col += 1;
                }
            }
            for i in 0..out {
                let mut dpre = vec![0.0; out];
                dpre[i] = 1.0;
                let t = push_forward(k, dpre);
                for (r, v) in t.iter().enumerate() {
                    jac.set(r, col + i, *v);
                }
            }
            col += out;
        }
        Ok(jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(w: Vec<Vec<f64>>, b: Vec<f64>, act: Activation) -> DenseLayer {
        DenseLayer::new(Tensor::from_rows(&w).unwrap(), Tensor::vector(b).unwrap(), act).unwrap()
    }

    #[test]
    fn identity_layer_passes_batch_through() {
        let net = Network::from_layers(vec![layer(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0], Activation::Identity)])
            .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(net.forward(&x).unwrap().output().data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_layer_clips_negatives() {
        let net = Network::from_layers(vec![layer(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0], Activation::Relu)])
            .unwrap();
        let x = Tensor::from_rows(&[vec![-1.0, 3.0]]).unwrap();
        assert_eq!(net.forward(&x).unwrap().output().data(), &[0.0, 3.0]);
    }

    #[test]
    fn two_layer_output_matches_matrix_oracle() {
        let w1 = vec![vec![0.5, -0.25, 0.1], vec![0.3, 0.2, -0.4]];
        let b1 = vec![0.05, -0.1];
        let w2 = vec![vec![1.5, -0.7]];
        let b2 = vec![0.2];
        let net = Network::from_layers(vec![
            layer(w1.clone(), b1.clone(), Activation::Tanh),
            layer(w2.clone(), b2.clone(), Activation::Identity),
        ])
        .unwrap();
        let x = [0.3, -1.2, 2.0];
        let h: Vec<f64> = (0..2)
            .map(|i| (w1[i].iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + b1[i]).tanh())
            .collect();
        let expect = w2[0][0] * h[0] + w2[0][1] * h[1] + b2[0];
        let got = net.predict_one(&x).unwrap();
        assert!((got[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn wrong_input_width_names_the_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::new(&Architecture::mlp(&[3, 4, 2]), &mut rng).unwrap();
        let err = net.forward(&Tensor::zeros(&[2, 5])).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn chained_widths_are_enforced() {
        let a = layer(vec![vec![1.0, 0.0]], vec![0.0], Activation::Relu);
        let b = layer(vec![vec![1.0, 0.0]], vec![0.0], Activation::Relu);
        assert!(Network::from_layers(vec![a, b]).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::new(&Architecture::mlp(&[4, 5, 3]), &mut rng).unwrap();
        let x = Tensor::matrix(2, 4, vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.0]).unwrap();
        let trace = net.forward(&x).unwrap();
        let (g, gin) = net.backward(&trace, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(gin.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_mse_grads_match_closed_form() {
        // L = (1/B) Σ_b ‖W x_b − t_b‖²  ⇒  ∂L/∂W = (2/B) Σ_b err_b x_bᵀ
        let w = vec![vec![0.2, -0.5], vec![0.7, 0.1]];
        let net = Network::from_layers(vec![layer(w.clone(), vec![0.0, 0.0], Activation::Identity)]).unwrap();
        let xs = [[1.0, 2.0], [-0.5, 0.25], [3.0, -1.0]];
        let ts = [[0.0, 1.0], [1.0, -1.0], [0.5, 0.5]];
        let bsz = xs.len() as f64;
        let x = Tensor::from_rows(&xs).unwrap();
        let trace = net.forward(&x).unwrap();
        let mut og = Tensor::zeros(&[3, 2]);
        let mut expect = [[0.0; 2]; 2];
        for b in 0..3 {
            for i in 0..2 {
                let y: f64 = w[i][0] * xs[b][0] + w[i][1] * xs[b][1];
                let err = y - ts[b][i];
                og.set(b, i, 2.0 * err / bsz);
                for j in 0..2 {
                    expect[i][j] += 2.0 / bsz * err * xs[b][j];
                }
            }
        }
        let (g, _) = net.backward(&trace, &og).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((g.layers[0].weights.get(i, j) - expect[i][j]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::new(&Architecture::mlp(&[2, 2]), &mut rng).unwrap();
        let trace = net.forward(&Tensor::zeros(&[1, 2])).unwrap();
        net.layers_mut()[0].bias.data_mut()[0] = 1.0;
        assert!(matches!(
            net.backward(&trace, &Tensor::zeros(&[1, 2])),
            Err(Error::StaleTrace)
        ));
        let clone = net.clone();
        let trace = net.forward(&Tensor::zeros(&[1, 2])).unwrap();
        assert!(matches!(
            clone.backward(&trace, &Tensor::zeros(&[1, 2])),
            Err(Error::StaleTrace)
        ));
    }

    #[test]
    fn jacobian_contracts_to_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::new(
            &Architecture {
                widths: vec![3, 5, 4],
                hidden_activation: Activation::Tanh,
                output_activation: Activation::Identity,
            },
            &mut rng,
        )
        .unwrap();
        let x = [0.4, -0.9, 1.3];
        let v = [0.5, -1.0, 2.0, 0.25];
        let jac = net.param_jacobian(&x).unwrap();
        let jtv = jac.matmul_tn(&Tensor::matrix(4, 1, v.to_vec()).unwrap()).unwrap();
        let trace = net.forward(&Tensor::matrix(1, 3, x.to_vec()).unwrap()).unwrap();
        let (g, _) = net.backward(&trace, &Tensor::matrix(1, 4, v.to_vec()).unwrap()).unwrap();
        for (a, b) in jtv.data().iter().zip(g.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Network::new(&Architecture::mlp(&[3, 4, 2]), &mut rng).unwrap();
        let p: Vec<f64> = (0..net.num_params()).map(|i| i as f64 * 0.01).collect();
        net.set_flat_params(&p).unwrap();
        assert_eq!(net.flat_params(), p);
    }
}
