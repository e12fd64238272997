//! Deterministic synthetic image datasets.
//!
//! `OrientedBars` draws a tapered ray from near the image centre in a
//! class-specific direction over a top-to-bottom brightness gradient. Both cues
//! are rotation-asymmetric, so a rotated image can be told apart from the
//! original. `BlobMixtures` places Gaussian blobs and serves as the
//! out-of-distribution family.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::GridImage;
use crate::error::{Error, Result};
use crate::rng::{seeded, streams, ChaCha8Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    OrientedBars,
    BlobMixtures,
}

impl Family {
    pub fn other(self) -> Self {
        match self {
            Family::OrientedBars => Family::BlobMixtures,
            Family::BlobMixtures => Family::OrientedBars,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub family: Family,
    pub noise: f64,
    /// Top-to-bottom brightness ramp of oriented bars.
    pub background: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            samples_per_class: 200,
            test_per_class: 200,
            size: 16,
            family: Family::OrientedBars,
            noise: 0.2,
            background: 0.2,
            seed: 0,
        }
    }
}

pub const FIRST_CLASS_ANGLE_DEG: f64 = 10.0;
pub const CLASS_ANGLE_STEP_DEG: f64 = 25.0;

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Parameter("need at least 2 classes".into()));
        }
        if self.samples_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Parameter("degenerate dataset: zero samples per class".into()));
        }
        if self.size < 4 {
            return Err(Error::Parameter(format!("image size {} too small (min 4)", self.size)));
        }
        if !(self.background >= 0.0 && self.background.is_finite()) {
            return Err(Error::Parameter("background must be a finite non-negative number".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Parameter("noise must be a finite non-negative number".into()));
        }
        if self.family == Family::OrientedBars {
            let angles = self.class_angles();
            for (i, a) in angles.iter().enumerate() {
                for b in &angles[i + 1..] {
                    let d = (a - b).rem_euclid(360.0);
                    if (d - 180.0).abs() < 1e-9 || d < 1e-9 {
                        return Err(Error::Parameter(format!(
                            "class angles {a}° and {b}° are rotation-symmetric"
                        )));
                    }
                }
            }
            if self.n_classes as f64 * CLASS_ANGLE_STEP_DEG > 360.0 {
                return Err(Error::Parameter(format!(
                    "at most {} oriented-bar classes fit on the circle",
                    (360.0 / CLASS_ANGLE_STEP_DEG) as usize
                )));
            }
        }
        Ok(())
    }

    /// Ray direction per class, counter-clockwise from +x.
    pub fn class_angles(&self) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| FIRST_CLASS_ANGLE_DEG + CLASS_ANGLE_STEP_DEG * c as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<GridImage>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Vec<GridImage>, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::dim("dataset labels", images.len(), labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Parameter(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Self {
            images,
            labels,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` samples (class-balanced when `n` is a multiple of the class count).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            n_classes: self.n_classes,
            split: self.split,
        }
    }

    pub fn relabel(&self, f: impl Fn(usize) -> usize, n_classes: usize) -> Result<Self> {
        Self::new(self.images.clone(), self.labels.iter().map(|&l| f(l)).collect(), n_classes, self.split)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// One row per sample: label followed by the H·W pixel values.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for (img, label) in self.images.iter().zip(&self.labels) {
            let mut rec = Vec::with_capacity(img.pixels().len() + 1);
            rec.push(label.to_string());
            rec.extend(img.pixels().iter().map(|p| format!("{p:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, size: usize, n_classes: usize, split: Split) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != size * size + 1 {
                return Err(Error::dim(format!("csv row {line} width"), size * size + 1, rec.len()));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parameter(format!("csv row {line}: {e}")))
            };
            labels.push(parse(&rec[0])? as usize);
            let px = rec.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?;
            images.push(GridImage::new(size, size, px)?);
        }
        Self::new(images, labels, n_classes, split)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

fn oriented_bar<R: Rng + ?Sized>(size: usize, angle_deg: f64, noise: f64, background: f64, rng: &mut R) -> GridImage {
    let n = size as f64;
    let center = (n - 1.0) / 2.0;
    let ox = center + rng.random_range(-0.75..0.75);
    let oy = center + rng.random_range(-0.75..0.75);
    let theta = (angle_deg + rng.random_range(-4.0..4.0)).to_radians();
    let (uy, ux) = theta.sin_cos();
    let length = n * rng.random_range(0.36..0.44);
    let width = 0.9;
    let noise_dist = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut px = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let x = c as f64 - ox;
            // y axis points up so angles read counter-clockwise
            let y = oy - r as f64;
            let t = x * ux + y * uy;
            let d = (x * uy - y * ux).abs();
            let along = if (0.0..=length).contains(&t) {
                1.0
            } else if t < 0.0 {
                (1.0 + t).max(0.0)
            } else {
                (1.0 - (t - length)).max(0.0)
            };
            let ray = (0.45 + 0.55 * (t / length).clamp(0.0, 1.0)) * (1.0 - d / width).max(0.0) * along;
            let ramp = background * r as f64 / (n - 1.0);
            let v = ramp.max(ray);
            px.push(v + if noise > 0.0 { noise_dist.sample(rng) } else { 0.0 });
        }
    }
    GridImage::new(size, size, px).expect("generated image shape")
}

fn blob_mixture<R: Rng + ?Sized>(size: usize, class: usize, n_classes: usize, noise: f64, rng: &mut R) -> GridImage {
    let n = size as f64;
    let center = (n - 1.0) / 2.0;
    let phi = (360.0 * class as f64 / n_classes as f64).to_radians();
    let radius = 0.28 * n;
    let mut blobs = vec![(
        center + radius * phi.cos() + rng.random_range(-0.5..0.5),
        center - radius * phi.sin() + rng.random_range(-0.5..0.5),
        rng.random_range(1.2..2.0),
        rng.random_range(0.6..1.0),
    )];
    for _ in 0..rng.random_range(1..=2) {
        blobs.push((
            rng.random_range(0.0..n),
            rng.random_range(0.0..n),
            rng.random_range(0.8..1.5),
            rng.random_range(0.2..0.4),
        ));
    }
    let noise_dist = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut px = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let v: f64 = blobs
                .iter()
                .map(|&(bx, by, s, a)| {
                    let d2 = (c as f64 - bx).powi(2) + (r as f64 - by).powi(2);
                    a * (-d2 / (2.0 * s * s)).exp()
                })
                .fold(0.0, f64::max);
            px.push(v + if noise > 0.0 { noise_dist.sample(rng) } else { 0.0 });
        }
    }
    GridImage::new(size, size, px).expect("generated image shape")
}

fn render(spec: &DatasetSpec, per_class: usize, split: Split, rng: &mut ChaCha8Rng) -> Result<LabeledDataset> {
    let angles = spec.class_angles();
    let total = per_class * spec.n_classes;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    // round-robin over classes keeps every prefix balanced
    for i in 0..total {
        let class = i % spec.n_classes;
        let img = match spec.family {
            Family::OrientedBars => oriented_bar(spec.size, angles[class], spec.noise, spec.background, rng),
            Family::BlobMixtures => blob_mixture(spec.size, class, spec.n_classes, spec.noise, rng),
        };
        images.push(img);
        labels.push(class);
    }
    LabeledDataset::new(images, labels, spec.n_classes, split)
}

pub fn generate(spec: &DatasetSpec) -> Result<DatasetSplits> {
    spec.validate()?;
    let mut train_rng = seeded(spec.seed, streams::TRAIN_DATA);
    let mut test_rng = seeded(spec.seed, streams::TEST_DATA);
    Ok(DatasetSplits {
        train: render(spec, spec.samples_per_class, Split::Train, &mut train_rng)?,
        test: render(spec, spec.test_per_class, Split::Test, &mut test_rng)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    InDistribution,
    OutDistribution,
}

/// Unlabelled attacker query pool. In-distribution pools are drawn from the
/// victim's test split; out-of-distribution pools come from the other family.
pub fn make_query_pool(
    spec: &DatasetSpec,
    splits: &DatasetSplits,
    mode: PoolMode,
    size: usize,
    seed: u64,
) -> Result<Vec<GridImage>> {
    let mut rng = seeded(seed, streams::POOL);
    match mode {
        PoolMode::InDistribution => {
            let available = splits.test.len();
            if size > available {
                return Err(Error::Parameter(format!(
                    "query pool of {size} exceeds the {available} available test images"
                )));
            }
            let mut idx: Vec<usize> = (0..available).collect();
            idx.shuffle(&mut rng);
            Ok(idx[..size].iter().map(|&i| splits.test.images[i].clone()).collect())
        }
        PoolMode::OutDistribution => {
            let per_class = size.div_ceil(spec.n_classes).max(1);
            let other = DatasetSpec {
                family: spec.family.other(),
                samples_per_class: per_class,
                test_per_class: per_class,
                seed: seed ^ 0x5eed_0f_0dd_u64,
                ..spec.clone()
            };
            let mut other_rng = seeded(other.seed, streams::TEST_DATA);
            let mut images = render(&other, per_class, Split::Test, &mut other_rng)?.images;
            images.shuffle(&mut rng);
            images.truncate(size);
            Ok(images)
        }
    }
}
