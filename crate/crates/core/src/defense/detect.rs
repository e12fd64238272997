//! Query-history similarity detection.

use std::collections::BTreeMap;

use petgraph::unionfind::UnionFind;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_view_pair, GridImage, ViewPolicy};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::victim::VictimModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L2,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Projection,
    Representation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub metric: Metric,
    /// l2 flags when distance < τ, cosine when similarity > τ.
    pub threshold: f64,
    pub space: Space,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            metric: Metric::L2,
            threshold: 1.0,
            space: Space::Projection,
        }
    }
}

impl Metric {
    /// ℓ2 distance or cosine similarity.
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na * nb)
                }
            }
        }
    }

    pub fn flags(self, score: f64, threshold: f64) -> bool {
        match self {
            Metric::L2 => score < threshold,
            Metric::Cosine => score > threshold,
        }
    }

    /// True when `a` is a closer match than `b`.
    fn closer(self, a: f64, b: f64) -> bool {
        match self {
            Metric::L2 => a < b,
            Metric::Cosine => a > b,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.metric {
            Metric::L2 => self.threshold >= 0.0 && !self.threshold.is_nan(),
            Metric::Cosine => !self.threshold.is_nan(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid detector threshold {}", self.threshold)))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Verdict {
    pub flagged: bool,
    pub best_match_id: Option<usize>,
    pub best_distance: Option<f64>,
}

/// Per-account, append-only record of served vectors.
#[derive(Debug, Clone, Default)]
pub struct HistoryStore {
    accounts: BTreeMap<String, Vec<Vec<f64>>>,
}

impl HistoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends and returns the per-account id.
    pub fn record(&mut self, account: &str, vec: &[f64]) -> Result<usize> {
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step: 0,
                what: "history vector is not finite".into(),
            });
        }
        let h = self.accounts.entry(account.to_string()).or_default();
        if let Some(first) = h.first() {
            if first.len() != vec.len() {
                return Err(Error::dim("history vector", first.len(), vec.len()));
            }
        }
        h.push(vec.to_vec());
        Ok(h.len() - 1)
    }

    pub fn history(&self, account: &str) -> &[Vec<f64>] {
        self.accounts.get(account).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn accounts(&self) -> impl Iterator<Item = &str> {
        self.accounts.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.accounts.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Nearest stored vector of `account` under the configured metric.
pub fn check_similar(store: &HistoryStore, account: &str, vec: &[f64], cfg: &DetectorConfig) -> Result<Verdict> {
    cfg.validate()?;
    let mut best: Option<(usize, f64)> = None;
    for (id, h) in store.history(account).iter().enumerate() {
        if h.len() != vec.len() {
            return Err(Error::dim("detector query", h.len(), vec.len()));
        }
        let s = cfg.metric.score(h, vec);
        if best.is_none_or(|(_, b)| cfg.metric.closer(s, b)) {
            best = Some((id, s));
        }
    }
    Ok(match best {
        None => Verdict::default(),
        Some((id, s)) => Verdict {
            flagged: cfg.metric.flags(s, cfg.threshold),
            best_match_id: Some(id),
            best_distance: Some(s),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rates {
    pub fpr: f64,
    pub fnr: f64,
}

impl Rates {
    pub fn total_error(&self) -> f64 {
        self.fpr + self.fnr
    }
}

/// Same-input view pairs and different-input view pairs.
#[derive(Debug, Clone)]
pub struct EvalPairs {
    pub paired: Vec<(GridImage, GridImage)>,
    pub distinct: Vec<(GridImage, GridImage)>,
}

/// One same-input pair per image and one pair with the next image (cyclic).
pub fn make_eval_pairs<R: Rng + ?Sized>(images: &[GridImage], policy: &ViewPolicy, rng: &mut R) -> Result<EvalPairs> {
    if images.len() < 2 {
        return Err(Error::Empty("need at least two images to form distinct pairs".into()));
    }
    let mut paired = Vec::with_capacity(images.len());
    let mut distinct = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let p = sample_view_pair(img, policy, rng)?;
        paired.push((p.first, p.second));
        let other = &images[(i + 1) % images.len()];
        let a = sample_view_pair(img, policy, rng)?.first;
        let b = sample_view_pair(other, policy, rng)?.second;
        distinct.push((a, b));
    }
    Ok(EvalPairs { paired, distinct })
}

fn embed(victim: &VictimModel, space: Space, images: &[&GridImage]) -> Result<Tensor> {
    let x = GridImage::batch(images)?;
    match space {
        Space::Projection => victim.project(&x),
        Space::Representation => victim.represent(&x),
    }
}

/// Metric scores of each pair in the given space.
pub fn pair_scores(victim: &VictimModel, space: Space, metric: Metric, pairs: &[(GridImage, GridImage)]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Empty("empty evaluation pair set".into()));
    }
    let a: Vec<&GridImage> = pairs.iter().map(|p| &p.0).collect();
    let b: Vec<&GridImage> = pairs.iter().map(|p| &p.1).collect();
    let ea = embed(victim, space, &a)?;
    let eb = embed(victim, space, &b)?;
    Ok((0..pairs.len()).map(|i| metric.score(ea.row(i), eb.row(i))).collect())
}

pub fn rates_from_scores(metric: Metric, threshold: f64, same: &[f64], different: &[f64]) -> Result<Rates> {
    if same.is_empty() || different.is_empty() {
        return Err(Error::Empty("empty evaluation pair set".into()));
    }
    let flagged = |s: &[f64]| s.iter().filter(|&&v| metric.flags(v, threshold)).count() as f64 / s.len() as f64;
    Ok(Rates {
        fpr: flagged(different),
        fnr: 1.0 - flagged(same),
    })
}

pub fn evaluate_rates(victim: &VictimModel, cfg: &DetectorConfig, pairs: &EvalPairs) -> Result<Rates> {
    cfg.validate()?;
    let same = pair_scores(victim, cfg.space, cfg.metric, &pairs.paired)?;
    let diff = pair_scores(victim, cfg.space, cfg.metric, &pairs.distinct)?;
    rates_from_scores(cfg.metric, cfg.threshold, &same, &diff)
}

/// Rates at each threshold, scoring the pairs once.
pub fn sweep(victim: &VictimModel, metric: Metric, space: Space, pairs: &EvalPairs, thresholds: &[f64]) -> Result<Vec<(f64, Rates)>> {
    let same = pair_scores(victim, space, metric, &pairs.paired)?;
    let diff = pair_scores(victim, space, metric, &pairs.distinct)?;
    thresholds
        .iter()
        .map(|&t| Ok((t, rates_from_scores(metric, t, &same, &diff)?)))
        .collect()
}

/// Candidate thresholds: midpoints between consecutive observed scores plus
/// the two extremes, so every achievable operating point is represented.
pub fn candidate_thresholds(same: &[f64], different: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = same.iter().chain(different).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut out = Vec::with_capacity(all.len() + 1);
    if let (Some(&lo), Some(&hi)) = (all.first(), all.last()) {
        out.push(lo - 1.0);
        out.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        out.push(hi + 1.0);
    }
    out
}

/// Threshold with the most detections subject to `FPR ≤ max_fpr`.
pub fn calibrate(victim: &VictimModel, metric: Metric, space: Space, pairs: &EvalPairs, max_fpr: f64) -> Result<DetectorConfig> {
    let same = pair_scores(victim, space, metric, &pairs.paired)?;
    let diff = pair_scores(victim, space, metric, &pairs.distinct)?;
    let mut best: Option<(f64, Rates)> = None;
    for t in candidate_thresholds(&same, &diff) {
        let r = rates_from_scores(metric, t, &same, &diff)?;
        if r.fpr <= max_fpr && best.is_none_or(|(_, b)| r.fnr < b.fnr) {
            best = Some((t, r));
        }
    }
    let (threshold, _) = best.ok_or_else(|| Error::Parameter(format!("no threshold reaches FPR ≤ {max_fpr}")))?;
    Ok(DetectorConfig { metric, threshold, space })
}

/// Lowest FPR + FNR over all thresholds.
pub fn best_total_error(victim: &VictimModel, metric: Metric, space: Space, pairs: &EvalPairs) -> Result<(f64, Rates)> {
    let same = pair_scores(victim, space, metric, &pairs.paired)?;
    let diff = pair_scores(victim, space, metric, &pairs.distinct)?;
    let mut best: Option<(f64, Rates)> = None;
    for t in candidate_thresholds(&same, &diff) {
        let r = rates_from_scores(metric, t, &same, &diff)?;
        if best.is_none_or(|(_, b)| r.total_error() < b.total_error()) {
            best = Some((t, r));
        }
    }
    best.ok_or_else(|| Error::Empty("no scores".into()))
}

/// Groups accounts linked by at least one flagged cross-account pair.
/// Groups are sorted, and listed by their first member.
pub fn cross_account_scan(store: &HistoryStore, cfg: &DetectorConfig) -> Result<Vec<Vec<String>>> {
    cfg.validate()?;
    let names: Vec<&str> = store.accounts().collect();
    let mut uf = UnionFind::<usize>::new(names.len());
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            if uf.equiv(i, j) {
                continue;
            }
            let linked = store.history(names[i]).iter().any(|a| {
                store.history(names[j]).iter().any(|b| a.len() == b.len() && cfg.metric.flags(cfg.metric.score(a, b), cfg.threshold))
            });
            if linked {
                uf.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, n) in names.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push(n.to_string());
    }
    let mut out: Vec<Vec<String>> = groups.into_values().collect();
    out.sort();
    Ok(out)
}
