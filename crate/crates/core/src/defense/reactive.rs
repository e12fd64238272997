//! Ownership verification after the fact: watermark success rate, dataset
//! inference on augmentation gaps, and representation distance.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_view, sample_watermark_pair, GridImage, ViewPolicy};
use crate::error::{Error, Result};
use crate::linear_eval::encode;
use crate::nn::{Activation, DenseLayer, Network, Tensor};
use crate::stats::{one_sample_t, welch_t, TTestResult};

pub const ALPHA: f64 = 0.05;
pub const MIN_BOOTSTRAP_RATES: usize = 20;
pub const DEFAULT_DI_AUGMENTATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Claim {
    Stolen,
    Inconclusive,
}

impl Claim {
    pub fn from_test(t: &TTestResult) -> Self {
        if t.significant(ALPHA) {
            Claim::Stolen
        } else {
            Claim::Inconclusive
        }
    }
}

/// One line of verdict output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub test: String,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub delta_mu: f64,
    pub claim: Claim,
}

impl VerdictRecord {
    pub fn new(test: &str, r: &TTestResult, claim: Claim) -> Self {
        Self {
            test: test.to_string(),
            t: r.t,
            df: r.df,
            p: r.p,
            delta_mu: r.delta_mu,
            claim,
        }
    }

    /// Non-finite numbers (degenerate tests) are written as `null`.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("verdict serialises")
    }
}

fn predictor_accuracy(suspect: &Network, predictor: &Network, views: &[GridImage], labels: &[usize]) -> Result<f64> {
    let reps = encode(suspect, views)?;
    let logits = predictor.predict(&reps)?;
    let hits = (0..logits.rows())
        .filter(|&i| {
            let r = logits.row(i);
            let arg = (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap_or(0);
            arg == labels[i]
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn watermark_views<R: Rng + ?Sized>(images: &[GridImage], n_pairs: usize, rng: &mut R) -> (Vec<GridImage>, Vec<usize>) {
    let mut views = Vec::with_capacity(2 * n_pairs);
    let mut labels = Vec::with_capacity(2 * n_pairs);
    for k in 0..n_pairs {
        let wp = sample_watermark_pair(&images[k % images.len()], rng);
        views.extend(wp.views);
        labels.extend(wp.labels);
    }
    (views, labels)
}

/// Augmentation-predictor accuracy on `2·n_pairs` rotated views read
/// through `suspect`. Images are used round-robin.
pub fn watermark_success_rate<R: Rng + ?Sized>(
    suspect: &Network,
    aug_predictor: &Network,
    images: &[GridImage],
    n_pairs: usize,
    rng: &mut R,
) -> Result<f64> {
    if suspect.output_dim() != aug_predictor.input_dim() {
        return Err(Error::AdapterRequired {
            suspect: suspect.output_dim(),
            expected: aug_predictor.input_dim(),
        });
    }
    if images.is_empty() || n_pairs == 0 {
        return Err(Error::Empty("watermark rate needs images and at least one pair".into()));
    }
    let (views, labels) = watermark_views(images, n_pairs, rng);
    predictor_accuracy(suspect, aug_predictor, &views, &labels)
}

/// Ridge map from `suspect` representations to `reference` representations,
/// fit on `images`, returned as `suspect` followed by a linear layer.
pub fn fit_ridge_adapter(suspect: &Network, reference: &Network, images: &[GridImage], lambda: f64) -> Result<Network> {
    if images.is_empty() {
        return Err(Error::Empty("adapter fit needs images".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("ridge λ must be ≥ 0, got {lambda}")));
    }
    let xs = encode(suspect, images)?;
    let ys = encode(reference, images)?;
    let (n, d_in, d_out) = (xs.rows(), xs.cols(), ys.cols());
    let x = DMatrix::from_fn(n, d_in + 1, |i, j| if j < d_in { xs.get(i, j) } else { 1.0 });
    let y = DMatrix::from_fn(n, d_out, |i, j| ys.get(i, j));
    let mut gram = x.transpose() * &x;
    for j in 0..d_in {
        gram[(j, j)] += lambda;
    }
    let rhs = x.transpose() * y;
    let beta = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or_else(|| Error::Numeric {
            step: 0,
            what: "ridge system is singular".into(),
        })?;
    let weights = Tensor::matrix(d_out, d_in, (0..d_out).flat_map(|o| (0..d_in).map(move |i| (o, i))).map(|(o, i)| beta[(i, o)]).collect())?;
    let bias = Tensor::vector((0..d_out).map(|o| beta[(d_in, o)]).collect())?;
    let mut layers = suspect.layers().to_vec();
    layers.push(DenseLayer::new(weights, bias, Activation::Identity)?);
    Network::from_layers(layers)
}

/// Rate on each of `subsets` disjoint slices of `images`.
pub fn bootstrap_rates<R: Rng + ?Sized>(
    suspect: &Network,
    aug_predictor: &Network,
    images: &[GridImage],
    subsets: usize,
    pairs_per_subset: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if subsets == 0 || images.len() < subsets {
        return Err(Error::Parameter(format!(
            "cannot split {} images into {subsets} disjoint subsets",
            images.len()
        )));
    }
    let per = images.len() / subsets;
    (0..subsets)
        .map(|s| watermark_success_rate(suspect, aug_predictor, &images[s * per..(s + 1) * per], pairs_per_subset, rng))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OwnershipTest {
    pub ttest: TTestResult,
    pub claim: Claim,
}

/// One-sided test of mean rate > `baseline`.
pub fn ownership_ttest(rates: &[f64], baseline: f64) -> Result<OwnershipTest> {
    if rates.len() < MIN_BOOTSTRAP_RATES {
        return Err(Error::Parameter(format!(
            "ownership test needs ≥ {MIN_BOOTSTRAP_RATES} rate estimates, got {}",
            rates.len()
        )));
    }
    let ttest = one_sample_t(rates, baseline)?;
    let claim = Claim::from_test(&ttest);
    Ok(OwnershipTest { ttest, claim })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkVerdict {
    pub success_rate: f64,
    pub rates: Vec<f64>,
    pub ttest: TTestResult,
    pub claim: Claim,
    /// A ridge adapter was fit because the suspect's width differed.
    pub adapted: bool,
}

impl WatermarkVerdict {
    pub fn record(&self) -> VerdictRecord {
        VerdictRecord::new("watermark", &self.ttest, self.claim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatermarkCheckConfig {
    pub subsets: usize,
    pub pairs_per_subset: usize,
    pub baseline: f64,
    pub ridge_lambda: f64,
}

impl Default for WatermarkCheckConfig {
    fn default() -> Self {
        Self {
            subsets: MIN_BOOTSTRAP_RATES,
            pairs_per_subset: 50,
            baseline: 0.5,
            ridge_lambda: 1e-3,
        }
    }
}

/// Full watermark verification. `adapter_set` and `victim_encoder` are only
/// used when the suspect's width differs from the predictor's input.
pub fn verify_watermark<R: Rng + ?Sized>(
    suspect: &Network,
    aug_predictor: &Network,
    probe_images: &[GridImage],
    adapter: Option<(&Network, &[GridImage])>,
    cfg: &WatermarkCheckConfig,
    rng: &mut R,
) -> Result<WatermarkVerdict> {
    let (net, adapted) = if suspect.output_dim() == aug_predictor.input_dim() {
        (suspect.clone(), false)
    } else {
        let (victim_encoder, fit_images) = adapter.ok_or(Error::AdapterRequired {
            suspect: suspect.output_dim(),
            expected: aug_predictor.input_dim(),
        })?;
        (fit_ridge_adapter(suspect, victim_encoder, fit_images, cfg.ridge_lambda)?, true)
    };
    let rates = bootstrap_rates(&net, aug_predictor, probe_images, cfg.subsets, cfg.pairs_per_subset, rng)?;
    let test = ownership_ttest(&rates, cfg.baseline)?;
    Ok(WatermarkVerdict {
        success_rate: rates.iter().sum::<f64>() / rates.len() as f64,
        rates,
        ttest: test.ttest,
        claim: test.claim,
        adapted,
    })
}

/// Per-point augmentation gaps on the private (training) and public sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DIScores {
    pub l_t: Vec<f64>,
    pub l_p: Vec<f64>,
}

impl DIScores {
    pub fn new(l_t: Vec<f64>, l_p: Vec<f64>) -> Result<Self> {
        if l_t.len() != l_p.len() {
            return Err(Error::dim("public scores", l_t.len(), l_p.len()));
        }
        Ok(Self { l_t, l_p })
    }
}

fn augmentation_gaps<F, R>(embed: &F, images: &[GridImage], n_aug: usize, policy: &ViewPolicy, rng: &mut R) -> Result<Vec<f64>>
where
    F: Fn(&[GridImage]) -> Result<Tensor>,
    R: Rng + ?Sized,
{
    let clean = embed(images)?;
    let mut totals = vec![0.0; images.len()];
    for _ in 0..n_aug {
        let views = images
            .iter()
            .map(|img| sample_view(img, policy, rng).map(|v| v.0))
            .collect::<Result<Vec<_>>>()?;
        let aug = embed(&views)?;
        for (i, t) in totals.iter_mut().enumerate() {
            *t += clean.row(i).iter().zip(aug.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        }
    }
    Ok(totals.into_iter().map(|t| t / n_aug as f64).collect())
}

/// Mean ℓ2 gap between `head(encoder(x))` and `head(encoder(t(x)))` over
/// `n_aug` random views, for each private and public point.
pub fn di_scores<R: Rng + ?Sized>(
    encoder: &Network,
    head: &Network,
    private: &[GridImage],
    public: &[GridImage],
    n_aug: usize,
    policy: &ViewPolicy,
    rng: &mut R,
) -> Result<DIScores> {
    let embed = |imgs: &[GridImage]| -> Result<Tensor> { head.predict(&encode(encoder, imgs)?) };
    di_scores_with(&embed, private, public, n_aug, policy, rng)
}

/// [`di_scores`] for an arbitrary scoring map, e.g. a classifier's class
/// probabilities.
pub fn di_scores_with<F, R>(
    embed: &F,
    private: &[GridImage],
    public: &[GridImage],
    n_aug: usize,
    policy: &ViewPolicy,
    rng: &mut R,
) -> Result<DIScores>
where
    F: Fn(&[GridImage]) -> Result<Tensor>,
    R: Rng + ?Sized,
{
    if n_aug == 0 {
        return Err(Error::Parameter("dataset inference needs at least one augmentation".into()));
    }
    if private.len() != public.len() {
        return Err(Error::dim("public sample size", private.len(), public.len()));
    }
    if private.is_empty() {
        return Err(Error::Empty("dataset inference needs samples".into()));
    }
    let l_t = augmentation_gaps(embed, private, n_aug, policy, rng)?;
    let l_p = augmentation_gaps(embed, public, n_aug, policy, rng)?;
    DIScores::new(l_t, l_p)
}

/// One-sided Welch test of `μ_p > μ_t`: a model that fits its private data
/// more tightly shows smaller gaps there.
pub fn di_test(scores: &DIScores) -> Result<OwnershipTest> {
    let ttest = welch_t(&scores.l_p, &scores.l_t)?;
    let claim = Claim::from_test(&ttest);
    Ok(OwnershipTest { ttest, claim })
}

/// Mean of `‖reference(x) − candidate(x)‖₂` over `images`.
pub fn rep_distance(reference: &Network, candidate: &Network, images: &[GridImage]) -> Result<f64> {
    if reference.output_dim() != candidate.output_dim() {
        return Err(Error::dim("candidate representation", reference.output_dim(), candidate.output_dim()));
    }
    if images.is_empty() {
        return Err(Error::Empty("rep distance needs images".into()));
    }
    let a = encode(reference, images)?;
    let b = encode(candidate, images)?;
    let total: f64 = (0..a.rows())
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .sum();
    Ok(total / a.rows() as f64)
}
