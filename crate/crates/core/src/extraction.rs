//! The attacker: direct representation matching, projection-head
//! recreation, and stealing through a head.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_view_pair, GridImage, ViewPolicy};
use crate::defense::reactive::rep_distance;
use crate::error::{Error, Result};
use crate::linear_eval::{probe_accuracy, ProbeConfig};
use crate::losses::{info_nce, LossKind, DEFAULT_INFO_NCE_TEMPERATURE};
use crate::nn::{Architecture, Network, Optimizer, OptimizerConfig, Tensor};
use crate::pow::solve;
use crate::rng::{seeded, streams};
use crate::synthdata::LabeledDataset;
use crate::victim::{input_hash, VictimServer};

/// Black-box access to served vectors.
pub trait RepresentationApi {
    fn query(&mut self, input: &GridImage) -> Result<Vec<f64>>;
    /// Successful queries so far.
    fn queries_spent(&self) -> usize;
}

/// One account on a [`VictimServer`]; solves proof-of-work puzzles when asked.
pub struct ApiClient<'a> {
    server: &'a VictimServer,
    account: String,
    max_pow_attempts: u64,
    spent: usize,
    pow_attempts: u64,
}

impl<'a> ApiClient<'a> {
    pub fn new(server: &'a VictimServer, account: &str) -> Self {
        server.register(account);
        Self {
            server,
            account: account.to_string(),
            max_pow_attempts: 1 << 24,
            spent: 0,
            pow_attempts: 0,
        }
    }

    pub fn with_max_pow_attempts(mut self, n: u64) -> Self {
        self.max_pow_attempts = n;
        self
    }

    /// Hash evaluations spent solving puzzles.
    pub fn pow_attempts(&self) -> u64 {
        self.pow_attempts
    }

    pub fn account(&self) -> &str {
        &self.account
    }
}

impl RepresentationApi for ApiClient<'_> {
    fn query(&mut self, input: &GridImage) -> Result<Vec<f64>> {
        let out = match self.server.serve_query(&self.account, input, None) {
            Err(Error::AccessDenied(puzzle)) => {
                let sol = solve(&puzzle, self.max_pow_attempts)?;
                self.pow_attempts += sol.attempts;
                self.server.serve_query(&self.account, input, Some(&sol.suffix))?
            }
            other => other?,
        };
        self.spent += 1;
        Ok(out)
    }

    fn queries_spent(&self) -> usize {
        self.spent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub loss: LossKind,
    pub budget: usize,
    pub policy: ViewPolicy,
    /// `[input, hidden..., representation]`.
    pub encoder_widths: Vec<usize>,
    /// Used by head recreation; the first width must equal the served dim.
    pub head_widths: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-pool-item labels, only for `sup_con`.
    #[serde(skip)]
    pub labels: Option<Vec<usize>>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Mse,
            budget: 1600,
            policy: ViewPolicy::identity(),
            encoder_widths: vec![256, 256, 64],
            head_widths: vec![64, 64, 32],
            optimizer: OptimizerConfig::adam(1e-3),
            epochs: 30,
            batch_size: 64,
            seed: 0,
            labels: None,
        }
    }
}

impl AttackConfig {
    pub fn encoder_arch(&self) -> Architecture {
        Architecture::mlp(&self.encoder_widths)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_arch().validate()?;
        self.loss.validate()?;
        self.policy.validate()?;
        self.optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Parameter(format!("attack batch size must be ≥ 2, got {}", self.batch_size)));
        }
        if self.loss.needs_labels() && self.labels.is_none() {
            return Err(Error::Parameter(format!("{} requires labels", self.loss.name())));
        }
        Ok(())
    }

    fn contrastive_temperature(&self) -> f64 {
        match self.loss {
            LossKind::InfoNce { temperature } => temperature,
            _ => DEFAULT_INFO_NCE_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StolenModel {
    pub encoder: Network,
    pub head: Option<Network>,
    pub queries_spent: usize,
    pub epoch_losses: Vec<f64>,
}

/// How served vectors are compared to `g(f_a(w))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Served `y` is passed through the same `g`.
    Recreated,
    /// Served vectors already are projections.
    AccessHead,
}

/// Trains a fresh encoder to match served representations.
pub fn steal_direct(api: &mut dyn RepresentationApi, pool: &[GridImage], cfg: &AttackConfig) -> Result<StolenModel> {
    steal(api, pool, cfg, None)
}

/// Stealing through a frozen head `g`.
pub fn steal_with_head(
    api: &mut dyn RepresentationApi,
    g: &Network,
    mode: HeadMode,
    pool: &[GridImage],
    cfg: &AttackConfig,
) -> Result<StolenModel> {
    if g.input_dim() != cfg.encoder_arch().output_dim() {
        return Err(Error::dim("head input", cfg.encoder_arch().output_dim(), g.input_dim()));
    }
    let mut stolen = steal(api, pool, cfg, Some((g, mode)))?;
    stolen.head = Some(g.clone());
    Ok(stolen)
}

fn check_labels(cfg: &AttackConfig, pool: &[GridImage]) -> Result<()> {
    if let Some(l) = &cfg.labels {
        if l.len() != pool.len() {
            return Err(Error::dim("attack labels", pool.len(), l.len()));
        }
    }
    Ok(())
}

fn steal(
    api: &mut dyn RepresentationApi,
    pool: &[GridImage],
    cfg: &AttackConfig,
    head: Option<(&Network, HeadMode)>,
) -> Result<StolenModel> {
    cfg.validate()?;
    check_labels(cfg, pool)?;
    if let Some(img) = pool.first() {
        if img.pixels().len() != cfg.encoder_widths[0] {
            return Err(Error::dim("attacker input (image pixels)", cfg.encoder_widths[0], img.pixels().len()));
        }
    }
    let mut encoder = Network::new(&cfg.encoder_arch(), &mut seeded(cfg.seed, streams::INIT))?;
    let start = api.queries_spent();
    let spent = |api: &dyn RepresentationApi| api.queries_spent() - start;
    let mut epoch_losses = Vec::new();
    if cfg.budget == 0 || pool.is_empty() {
        return Ok(StolenModel { encoder, head: None, queries_spent: 0, epoch_losses });
    }
    let expected_dim = match head {
        None => encoder.output_dim(),
        Some((g, HeadMode::Recreated)) => g.input_dim(),
        Some((g, HeadMode::AccessHead)) => g.output_dim(),
    };
    let mut opt = Optimizer::new(cfg.optimizer, &encoder)?;
    let mut shuffle = seeded(cfg.seed, streams::SHUFFLE);
    let mut view_rng = seeded(cfg.seed, streams::ATTACK);
    let mut cache: HashMap<String, Vec<f64>> = HashMap::new();
    let mut order: Vec<usize> = (0..pool.len().min(cfg.budget)).collect();
    let mut step = 0usize;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut exhausted = false;
        for idx in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(idx.len());
            let mut served = Vec::with_capacity(idx.len());
            let mut labels = Vec::with_capacity(idx.len());
            for &i in idx {
                let pair = sample_view_pair(&pool[i], &cfg.policy, &mut view_rng)?;
                let key = input_hash(&pair.second);
                let y = match cache.get(&key) {
                    Some(y) => y.clone(),
                    None if spent(api) < cfg.budget => {
                        let y = api.query(&pair.second)?;
                        if y.len() != expected_dim {
                            return Err(Error::dim("served vector", expected_dim, y.len()));
                        }
                        cache.insert(key, y.clone());
                        y
                    }
                    None => {
                        exhausted = true;
                        break;
                    }
                };
                inputs.push(pair.first);
                served.push(y);
                if let Some(l) = &cfg.labels {
                    labels.push(l[i]);
                }
            }
            if inputs.len() >= 2 {
                let loss = attack_step(&mut encoder, &mut opt, head, cfg, &inputs, &served, cfg.labels.as_ref().map(|_| labels.as_slice()), step)?;
                total += loss;
                batches += 1;
                step += 1;
            }
            if exhausted {
                if batches > 0 {
                    epoch_losses.push(total / batches as f64);
                }
                break 'epochs;
            }
        }
        epoch_losses.push(if batches > 0 { total / batches as f64 } else { f64::NAN });
    }
    Ok(StolenModel {
        encoder,
        head: None,
        queries_spent: spent(api),
        epoch_losses,
    })
}

#[allow(clippy::too_many_arguments)]
fn attack_step(
    encoder: &mut Network,
    opt: &mut Optimizer,
    head: Option<(&Network, HeadMode)>,
    cfg: &AttackConfig,
    inputs: &[GridImage],
    served: &[Vec<f64>],
    labels: Option<&[usize]>,
    step: usize,
) -> Result<f64> {
    let refs: Vec<&GridImage> = inputs.iter().collect();
    let x = GridImage::batch(&refs)?;
    let target = Tensor::from_rows(served)?;
    let trace = encoder.forward(&x)?;
    let (value, dy) = match head {
        None => cfg.loss.extraction(trace.output(), &target, labels)?,
        Some((g, mode)) => {
            let gt = g.forward(trace.output())?;
            let target = match mode {
                HeadMode::Recreated => g.predict(&target)?,
                HeadMode::AccessHead => target,
            };
            let (v, dz) = cfg.loss.extraction(gt.output(), &target, labels)?;
            (v, g.backward(&gt, &dz)?.1)
        }
    };
    if !value.is_finite() {
        return Err(Error::Numeric {
            step,
            what: format!("extraction loss is {value}"),
        });
    }
    let (grads, _) = encoder.backward(&trace, &dy)?;
    opt.step(encoder, &grads).map_err(|e| match e {
        Error::Numeric { what, .. } => Error::Numeric { step, what },
        other => other,
    })?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecreatedHead {
    pub head: Network,
    pub queries_spent: usize,
    pub epoch_losses: Vec<f64>,
}

/// Trains a projection head on served representations of two views per
/// input. Uses `min(pool, budget / 2)` inputs, two queries each.
pub fn recreate_head(api: &mut dyn RepresentationApi, pool: &[GridImage], cfg: &AttackConfig) -> Result<RecreatedHead> {
    if cfg.policy.is_identity() {
        return Err(Error::Parameter("head recreation needs a non-identity view policy".into()));
    }
    cfg.policy.validate()?;
    cfg.optimizer.validate()?;
    let arch = Architecture::mlp(&cfg.head_widths);
    arch.validate()?;
    if cfg.batch_size < 2 {
        return Err(Error::Parameter(format!("head batch size must be ≥ 2, got {}", cfg.batch_size)));
    }
    let mut head = Network::new(&arch, &mut seeded(cfg.seed, streams::HEAD_INIT))?;
    let start = api.queries_spent();
    let n = pool.len().min(cfg.budget / 2);
    let mut view_rng = seeded(cfg.seed, streams::ATTACK);
    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    for img in &pool[..n] {
        let pair = sample_view_pair(img, &cfg.policy, &mut view_rng)?;
        for (dst, view) in [(&mut first, &pair.first), (&mut second, &pair.second)] {
            let y = api.query(view)?;
            if y.len() != head.input_dim() {
                return Err(Error::dim("served vector", head.input_dim(), y.len()));
            }
            dst.push(y);
        }
    }
    let mut epoch_losses = Vec::new();
    if n >= 2 {
        let y1 = Tensor::from_rows(&first)?;
        let y2 = Tensor::from_rows(&second)?;
        let tau = cfg.contrastive_temperature();
        let mut opt = Optimizer::new(cfg.optimizer, &head)?;
        let mut shuffle = seeded(cfg.seed, streams::SHUFFLE);
        let mut order: Vec<usize> = (0..n).collect();
        let mut step = 0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle);
            let mut total = 0.0;
            let mut batches = 0;
            for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
                let b = idx.len();
                let y = Tensor::vstack(&[&y1.select_rows(idx)?, &y2.select_rows(idx)?])?;
                let trace = head.forward(&y)?;
                let z = trace.output();
                let out = info_nce(&z.slice_rows(0, b)?, &z.slice_rows(b, 2 * b)?, tau)?;
                if !out.value.is_finite() {
                    return Err(Error::Numeric {
                        step,
                        what: format!("head loss is {}", out.value),
                    });
                }
                let dz = Tensor::vstack(&[&out.grads[0], &out.grads[1]])?;
                let (grads, _) = head.backward(&trace, &dz)?;
                opt.step(&mut head, &grads)?;
                total += out.value;
                batches += 1;
                step += 1;
            }
            epoch_losses.push(if batches > 0 { total / batches as f64 } else { f64::NAN });
        }
    }
    Ok(RecreatedHead {
        head,
        queries_spent: api.queries_spent() - start,
        epoch_losses,
    })
}

#[derive(Debug, Clone)]
pub struct DownstreamTask {
    pub name: String,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskScore {
    pub task: String,
    pub victim_accuracy: f64,
    pub stolen_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StolenReport {
    pub tasks: Vec<TaskScore>,
    /// Mean ℓ2 to the victim over all test images; absent when widths differ.
    pub rep_distance: Option<f64>,
    pub queries_spent: usize,
}

impl StolenReport {
    /// Long format: `task,metric,value`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["task", "metric", "value"])?;
        for t in &self.tasks {
            w.write_record([t.task.as_str(), "victim_accuracy", &t.victim_accuracy.to_string()])?;
            w.write_record([t.task.as_str(), "stolen_accuracy", &t.stolen_accuracy.to_string()])?;
        }
        if let Some(d) = self.rep_distance {
            w.write_record(["all", "rep_distance", &d.to_string()])?;
        }
        w.write_record(["all", "queries_spent", &self.queries_spent.to_string()])?;
        w.flush()?;
        Ok(())
    }
}

pub fn evaluate_stolen(stolen: &StolenModel, victim: &Network, tasks: &[DownstreamTask], probe: &ProbeConfig) -> Result<StolenReport> {
    let mut scores = Vec::with_capacity(tasks.len());
    for t in tasks {
        scores.push(TaskScore {
            task: t.name.clone(),
            victim_accuracy: probe_accuracy(victim, &t.train, &t.test, probe)?,
            stolen_accuracy: probe_accuracy(&stolen.encoder, &t.train, &t.test, probe)?,
        });
    }
    let images: Vec<GridImage> = tasks.iter().flat_map(|t| t.test.images.iter().cloned()).collect();
    let rep = if victim.output_dim() == stolen.encoder.output_dim() && !images.is_empty() {
        Some(rep_distance(victim, &stolen.encoder, &images)?)
    } else {
        None
    };
    Ok(StolenReport {
        tasks: scores,
        rep_distance: rep,
        queries_spent: stolen.queries_spent,
    })
}
