use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_view, sample_view_pair, sample_watermark_pair, GridImage, ViewPolicy};
use crate::error::{Error, Result};
use crate::linear_eval::encode;
use crate::losses::{info_nce, softmax_cross_entropy, softmax_rows, DEFAULT_INFO_NCE_TEMPERATURE};
use crate::nn::{Architecture, Network, Optimizer, OptimizerConfig, Tensor};
use crate::rng::{seeded, streams};
use crate::synthdata::LabeledDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimConfig {
    /// `[input, hidden..., representation]`.
    pub encoder_widths: Vec<usize>,
    /// `[representation, hidden..., projection]`.
    pub head_widths: Vec<usize>,
    pub predictor_hidden: usize,
    pub policy: ViewPolicy,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub watermark_weight: f64,
    /// Gain folded into the encoder's last layer after training. Head and
    /// predictor absorb the inverse, so only served representations change.
    pub representation_scale: f64,
    pub seed: u64,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![256, 256, 64],
            head_widths: vec![64, 64, 32],
            predictor_hidden: 64,
            policy: ViewPolicy::contrastive(),
            optimizer: OptimizerConfig::adam(1e-3),
            epochs: 30,
            batch_size: 64,
            temperature: DEFAULT_INFO_NCE_TEMPERATURE,
            watermark_weight: 1.0,
            representation_scale: 10.0,
            seed: 0,
        }
    }
}

impl VictimConfig {
    pub fn encoder_arch(&self) -> Architecture {
        Architecture::mlp(&self.encoder_widths)
    }

    pub fn head_arch(&self) -> Architecture {
        Architecture::mlp(&self.head_widths)
    }

    pub fn predictor_arch(&self) -> Architecture {
        Architecture::mlp(&[self.representation_dim(), self.predictor_hidden, 2])
    }

    pub fn representation_dim(&self) -> usize {
        self.encoder_widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_arch().validate()?;
        self.head_arch().validate()?;
        if self.head_widths[0] != self.representation_dim() {
            return Err(Error::dim("head input", self.representation_dim(), self.head_widths[0]));
        }
        if self.predictor_hidden == 0 {
            return Err(Error::Parameter("predictor hidden width must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Parameter(format!("batch size must be ≥ 2, got {}", self.batch_size)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Parameter(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.watermark_weight >= 0.0 && self.watermark_weight.is_finite()) {
            return Err(Error::Parameter(format!("watermark weight must be ≥ 0, got {}", self.watermark_weight)));
        }
        if !(self.representation_scale > 0.0 && self.representation_scale.is_finite()) {
            return Err(Error::Parameter(format!(
                "representation scale must be > 0, got {}",
                self.representation_scale
            )));
        }
        self.policy.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VictimModel {
    pub encoder: Network,
    pub head: Network,
    pub aug_predictor: Option<Network>,
    pub config: VictimConfig,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl VictimModel {
    pub fn representation_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn represent(&self, batch: &Tensor) -> Result<Tensor> {
        self.encoder.predict(batch)
    }

    pub fn project(&self, batch: &Tensor) -> Result<Tensor> {
        self.head.predict(&self.encoder.predict(batch)?)
    }
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric { what, .. } => Error::Numeric { step, what },
        other => other,
    }
}

fn check_data(data: &LabeledDataset, cfg: &VictimConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("victim training set is empty".into()));
    }
    let pixels = data.images[0].pixels().len();
    if pixels != cfg.encoder_widths[0] {
        return Err(Error::dim("encoder input (image pixels)", cfg.encoder_widths[0], pixels));
    }
    Ok(())
}

fn rescale_representation(encoder: &mut Network, head: &mut Network, predictor: Option<&mut Network>, k: f64) {
    if k == 1.0 {
        return;
    }
    if let Some(last) = encoder.layers_mut().last_mut() {
        last.weights = last.weights.scale(k);
        last.bias = last.bias.scale(k);
    }
    for net in std::iter::once(head).chain(predictor) {
        if let Some(first) = net.layers_mut().first_mut() {
            first.weights = first.weights.scale(1.0 / k);
        }
    }
}

/// SimCLR-style contrastive training of encoder and head.
pub fn train_victim(data: &LabeledDataset, cfg: &VictimConfig) -> Result<VictimModel> {
    train(data, cfg, false)
}

/// Contrastive training plus the rotation-interval augmentation predictor.
pub fn train_victim_watermarked(data: &LabeledDataset, cfg: &VictimConfig) -> Result<VictimModel> {
    train(data, cfg, true)
}

fn train(data: &LabeledDataset, cfg: &VictimConfig, watermark: bool) -> Result<VictimModel> {
    cfg.validate()?;
    check_data(data, cfg)?;
    let mut init_rng = seeded(cfg.seed, streams::INIT);
    let mut encoder = Network::new(&cfg.encoder_arch(), &mut init_rng)?;
    let mut head = Network::new(&cfg.head_arch(), &mut init_rng)?;
    let mut predictor = if watermark {
        Some(Network::new(&cfg.predictor_arch(), &mut seeded(cfg.seed, streams::PREDICTOR_INIT))?)
    } else {
        None
    };
    let mut enc_opt = Optimizer::new(cfg.optimizer, &encoder)?;
    let mut head_opt = Optimizer::new(cfg.optimizer, &head)?;
    let mut pred_opt = predictor.as_ref().map(|p| Optimizer::new(cfg.optimizer, p)).transpose()?;
    let mut shuffle_rng = seeded(cfg.seed, streams::SHUFFLE);
    let mut view_rng = seeded(cfg.seed, streams::VIEWS);
    let mut wm_rng = seeded(cfg.seed, streams::WATERMARK);
    let lambda = cfg.watermark_weight;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let b = idx.len();
            let mut views: Vec<GridImage> = Vec::with_capacity(4 * b);
            let mut seconds = Vec::with_capacity(b);
            for &i in idx {
                let pair = sample_view_pair(&data.images[i], &cfg.policy, &mut view_rng)?;
                views.push(pair.first);
                seconds.push(pair.second);
            }
            views.extend(seconds);
            let mut wm_labels = Vec::new();
            if watermark {
                for &i in idx {
                    let wp = sample_watermark_pair(&data.images[i], &mut wm_rng);
                    let [v0, v1] = wp.views;
                    views.push(v0);
                    views.push(v1);
                    wm_labels.extend(wp.labels);
                }
            }
            let refs: Vec<&GridImage> = views.iter().collect();
            let x = GridImage::batch(&refs)?;

            let enc_trace = encoder.forward(&x)?;
            let y = enc_trace.output();
            let head_trace = head.forward(&y.slice_rows(0, 2 * b)?)?;
            let z = head_trace.output();
            let nce = info_nce(&z.slice_rows(0, b)?, &z.slice_rows(b, 2 * b)?, cfg.temperature)
                .map_err(|e| at_step(e, step))?;
            let mut loss = nce.value;
            let dz = Tensor::vstack(&[&nce.grads[0], &nce.grads[1]])?;
            let (head_grads, dy_contrastive) = head.backward(&head_trace, &dz)?;

            let mut dy = dy_contrastive;
            let mut pred_update = None;
            if let Some(pred) = predictor.as_ref() {
                let pred_trace = pred.forward(&y.slice_rows(2 * b, 4 * b)?)?;
                let (ce, dlogits) = softmax_cross_entropy(pred_trace.output(), &wm_labels).map_err(|e| at_step(e, step))?;
                loss += lambda * ce;
                let (mut pred_grads, dy_wm) = pred.backward(&pred_trace, &dlogits.scale(lambda))?;
                pred_grads.scale(lambda);
                dy = Tensor::vstack(&[&dy, &dy_wm])?;
                pred_update = Some(pred_grads);
            }
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    step,
                    what: format!("training loss is {loss}"),
                });
            }
            let (enc_grads, _) = encoder.backward(&enc_trace, &dy)?;
            enc_opt.step(&mut encoder, &enc_grads).map_err(|e| at_step(e, step))?;
            head_opt.step(&mut head, &head_grads).map_err(|e| at_step(e, step))?;
            if let (Some(pred), Some(opt), Some(g)) = (predictor.as_mut(), pred_opt.as_mut(), pred_update) {
                opt.step(pred, &g).map_err(|e| at_step(e, step))?;
            }
            total += loss;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(if batches > 0 { total / batches as f64 } else { f64::NAN });
    }
    rescale_representation(&mut encoder, &mut head, predictor.as_mut(), cfg.representation_scale);
    Ok(VictimModel {
        encoder,
        head,
        aug_predictor: predictor,
        config: cfg.clone(),
        epoch_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    /// Feature extractor widths; a linear classifier sits on top.
    pub body_widths: Vec<usize>,
    /// Training-time augmentation; identity trains on raw images.
    pub policy: ViewPolicy,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            body_widths: vec![256, 256, 64],
            policy: ViewPolicy::label_preserving(),
            optimizer: OptimizerConfig::adam(1e-3),
            epochs: 60,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Plain supervised classifier: `classifier(body(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedModel {
    pub body: Network,
    pub classifier: Network,
}

impl SupervisedModel {
    /// Class probabilities `softmax(classifier(body(x)))`, one row per image.
    pub fn probabilities(&self, images: &[GridImage]) -> Result<Tensor> {
        softmax_rows(&self.classifier.predict(&encode(&self.body, images)?)?)
    }
}

/// Cross-entropy training on labels, one fresh view per image per step.
pub fn train_supervised(data: &LabeledDataset, cfg: &SupervisedConfig) -> Result<SupervisedModel> {
    cfg.optimizer.validate()?;
    cfg.policy.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("supervised training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("batch size must be ≥ 1".into()));
    }
    let arch = Architecture::mlp(&cfg.body_widths);
    arch.validate()?;
    let mut rng = seeded(cfg.seed, streams::INIT);
    let mut body = Network::new(&arch, &mut rng)?;
    let mut classifier = Network::new(&Architecture::mlp(&[arch.output_dim(), data.n_classes]), &mut rng)?;
    let mut body_opt = Optimizer::new(cfg.optimizer, &body)?;
    let mut cls_opt = Optimizer::new(cfg.optimizer, &classifier)?;
    let mut shuffle = seeded(cfg.seed, streams::SHUFFLE);
    let mut view_rng = seeded(cfg.seed, streams::VIEWS);
    let augment = !cfg.policy.is_identity();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for idx in order.chunks(cfg.batch_size) {
            let views: Vec<GridImage> = if augment {
                idx.iter()
                    .map(|&i| sample_view(&data.images[i], &cfg.policy, &mut view_rng).map(|v| v.0))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let refs: Vec<&GridImage> = if augment {
                views.iter().collect()
            } else {
                idx.iter().map(|&i| &data.images[i]).collect()
            };
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let bt = body.forward(&GridImage::batch(&refs)?)?;
            let ct = classifier.forward(bt.output())?;
            let (_, dlogits) = softmax_cross_entropy(ct.output(), &labels).map_err(|e| at_step(e, step))?;
            let (cg, dh) = classifier.backward(&ct, &dlogits)?;
            let (bg, _) = body.backward(&bt, &dh)?;
            body_opt.step(&mut body, &bg).map_err(|e| at_step(e, step))?;
            cls_opt.step(&mut classifier, &cg).map_err(|e| at_step(e, step))?;
            step += 1;
        }
    }
    Ok(SupervisedModel { body, classifier })
}
