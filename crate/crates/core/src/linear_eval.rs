//! Linear evaluation: a softmax probe trained on frozen encoder outputs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::GridImage;
use crate::error::{Error, Result};
use crate::losses::softmax_cross_entropy;
use crate::nn::{Activation, DenseLayer, Network, Optimizer, OptimizerConfig, Tensor};
use crate::rng::{seeded, streams};
use crate::synthdata::LabeledDataset;

const ENCODE_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Standardise each feature with training-set statistics before the linear map.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::adam(1e-2),
            epochs: 50,
            batch_size: 64,
            standardize: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// [classes × d]
    pub weights: Tensor,
    /// [classes]
    pub bias: Tensor,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LinearProbe {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    fn preprocess(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.input_dim() {
            return Err(Error::dim("probe input", self.input_dim(), features.cols()));
        }
        let mut out = features.clone();
        for i in 0..out.rows() {
            for ((v, s), k) in out.row_mut(i).iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - s) / k;
            }
        }
        Ok(out)
    }

    fn as_layer(&self) -> Result<DenseLayer> {
        DenseLayer::new(self.weights.clone(), self.bias.clone(), Activation::Identity)
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let net = Network::from_layers(vec![self.as_layer()?])?;
        net.predict(&self.preprocess(features)?)
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0)
            })
            .collect())
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::Empty("accuracy on an empty test set".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::dim("probe labels", features.rows(), labels.len()));
        }
        let pred = self.predict(features)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }
}

/// Encoder outputs for a list of images, one row per image.
pub fn encode(encoder: &Network, images: &[GridImage]) -> Result<Tensor> {
    if images.is_empty() {
        return Ok(Tensor::zeros(&[0, encoder.output_dim()]));
    }
    let mut parts = Vec::new();
    for chunk in images.chunks(ENCODE_CHUNK) {
        let refs: Vec<&GridImage> = chunk.iter().collect();
        parts.push(encoder.predict(&GridImage::batch(&refs)?)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::vstack(&refs)
}

fn feature_stats(features: &Tensor, standardize: bool) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (features.rows(), features.cols());
    if !standardize || n == 0 {
        return (vec![0.0; d], vec![1.0; d]);
    }
    let mut shift = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for c in 0..d {
        let mean = (0..n).map(|r| features.get(r, c)).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (features.get(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
        shift[c] = mean;
        scale[c] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
    }
    (shift, scale)
}

/// Trains a probe on precomputed features.
pub fn train_probe_on_features(
    features: &Tensor,
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("probe batch size must be ≥ 1".into()));
    }
    if labels.len() != features.rows() {
        return Err(Error::dim("probe labels", features.rows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("probe training set is empty".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Parameter(format!("label {bad} outside [0, {n_classes})")));
    }
    let d = features.cols();
    let (shift, scale) = feature_stats(features, cfg.standardize);
    let mut probe = LinearProbe {
        weights: Tensor::zeros(&[n_classes, d]),
        bias: Tensor::zeros(&[n_classes]),
        shift,
        scale,
    };
    let x = probe.preprocess(features)?;
    let mut net = Network::from_layers(vec![probe.as_layer()?])?;
    let mut opt = Optimizer::new(cfg.optimizer, &net)?;
    let mut rng = seeded(cfg.seed, streams::PROBE);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch = x.select_rows(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let trace = net.forward(&batch)?;
            let (_, grad) = softmax_cross_entropy(trace.output(), &y)?;
            let (grads, _) = net.backward(&trace, &grad)?;
            opt.step(&mut net, &grads)?;
        }
    }
    let layer = &net.layers()[0];
    probe.weights = layer.weights().clone();
    probe.bias = layer.bias().clone();
    Ok(probe)
}

/// Trains a linear probe on a frozen encoder. The encoder is only read.
pub fn train_probe(encoder: &Network, data: &LabeledDataset, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let before = encoder.param_hash();
    let features = encode(encoder, &data.images)?;
    let probe = train_probe_on_features(&features, &data.labels, data.n_classes, cfg)?;
    assert_eq!(before, encoder.param_hash(), "encoder parameters changed during probe training");
    Ok(probe)
}

/// Top-1 accuracy of `probe` on `encoder(test)`.
pub fn top1(probe: &LinearProbe, encoder: &Network, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("top1 on an empty test set".into()));
    }
    probe.accuracy(&encode(encoder, &test.images)?, &test.labels)
}

/// Train-then-score convenience used by evaluation reports.
pub fn probe_accuracy(encoder: &Network, train: &LabeledDataset, test: &LabeledDataset, cfg: &ProbeConfig) -> Result<f64> {
    let probe = train_probe(encoder, train, cfg)?;
    top1(&probe, encoder, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::Split;

    fn probe_from(weights: &[&[f64]], bias: Vec<f64>) -> LinearProbe {
        let w = Tensor::from_rows(weights).unwrap();
        let d = w.cols();
        LinearProbe {
            weights: w,
            bias: Tensor::vector(bias).unwrap(),
            shift: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    #[test]
    fn hand_counted_accuracy() {
        // class 0 iff x0 > x1
        let probe = probe_from(&[&[1.0, 0.0], &[0.0, 1.0]], vec![0.0, 0.0]);
        let rows: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 4.5]).collect();
        let labels = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1];
        // predicted class 0 only for i ≥ 5; of those, i = 5, 6, 7 carry label 0
        let acc = probe.accuracy(&Tensor::from_rows(&rows).unwrap(), &labels).unwrap();
        assert_eq!(acc, 0.3);
    }

    #[test]
    fn separable_features_reach_full_train_accuracy() {
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let c = i % 3;
                vec![c as f64 * 3.0 + (i as f64 * 0.01), -(c as f64) + 0.5 * (i % 2) as f64]
            })
            .collect();
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let probe = train_probe_on_features(&x, &labels, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(probe.accuracy(&x, &labels).unwrap(), 1.0);
    }

    #[test]
    fn encoder_is_untouched_and_labels_are_checked() {
        let enc = Network::identity(4);
        let img = GridImage::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let data = LabeledDataset::new(vec![img.clone(), img], vec![0, 1], 2, Split::Train).unwrap();
        let hash = enc.param_hash();
        train_probe(&enc, &data, &ProbeConfig { epochs: 3, ..Default::default() }).unwrap();
        assert_eq!(hash, enc.param_hash());
        let x = Tensor::from_rows(&[[1.0], [2.0]]).unwrap();
        assert!(train_probe_on_features(&x, &[0, 5], 2, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let probe = probe_from(&[&[1.0]], vec![0.0]);
        let empty = LabeledDataset::new(vec![], vec![], 1, Split::Test).unwrap();
        assert!(top1(&probe, &Network::identity(1), &empty).is_err());
    }
}
