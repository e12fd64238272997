//! Augmentations over single-channel grid images, contrastive view sampling,
//! and the private rotation views used for watermarking.
//!
//! Every operator maps `[0,1]`-valued images to `[0,1]`-valued images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GridImage {
    /// Pixels are clamped into `[0,1]`.
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}×{width} image cannot hold {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Parameter("image pixels must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            pixels: pixels.into_iter().map(|p| p.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::matrix(self.height, self.width, self.pixels.clone()).expect("valid image shape")
    }

    /// Flattened images as a `[n × H·W]` batch.
    pub fn batch(images: &[&GridImage]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Empty("empty image batch".into()))?;
        let n = first.pixels.len();
        let mut data = Vec::with_capacity(images.len() * n);
        for img in images {
            if img.pixels.len() != n {
                return Err(Error::dim("image batch pixel count", n, img.pixels.len()));
            }
            data.extend_from_slice(&img.pixels);
        }
        Tensor::matrix(images.len(), n, data)
    }

    pub fn mean_abs_diff(&self, other: &GridImage) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.pixels.len() as f64
    }

    fn from_raw(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        Self {
            height,
            width,
            pixels: pixels.into_iter().map(|p| p.clamp(0.0, 1.0)).collect(),
        }
    }
}

/// Counter-clockwise rotation about the image center (angle in degrees,
/// reduced mod 360), nearest-neighbour sampling, zero fill outside the frame.
pub fn rotate(img: &GridImage, angle_deg: f64) -> GridImage {
    let angle = angle_deg.rem_euclid(360.0);
    if angle == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height, img.width);
    let theta = angle.to_radians();
    let (s, c) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        // y axis points up
        let y = cy - r as f64;
        for col in 0..w {
            let x = col as f64 - cx;
            let xs = x * c + y * s;
            let ys = -x * s + y * c;
            let src_c = (cx + xs).round();
            let src_r = (cy - ys).round();
            if src_r >= 0.0 && src_c >= 0.0 && (src_r as usize) < h && (src_c as usize) < w {
                out[r * w + col] = img.at(src_r as usize, src_c as usize);
            }
        }
    }
    GridImage::from_raw(h, w, out)
}

pub fn hflip(img: &GridImage) -> GridImage {
    let w = img.width;
    let mut out = Vec::with_capacity(img.pixels.len());
    for row in img.pixels.chunks(w) {
        out.extend(row.iter().rev());
    }
    GridImage::from_raw(img.height, w, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

/// Crops `bx` and resizes back to the input size with bilinear
/// interpolation (corner-aligned).
pub fn crop_resize(img: &GridImage, bx: CropBox) -> Result<GridImage> {
    let (h, w) = (img.height, img.width);
    if bx.h < 2 || bx.w < 2 || bx.top + bx.h > h || bx.left + bx.w > w {
        return Err(Error::Parameter(format!("crop box {bx:?} invalid for {h}×{w} image")));
    }
    if bx.top == 0 && bx.left == 0 && bx.h == h && bx.w == w {
        return Ok(img.clone());
    }
    let scale_y = if h > 1 { (bx.h - 1) as f64 / (h - 1) as f64 } else { 0.0 };
    let scale_x = if w > 1 { (bx.w - 1) as f64 / (w - 1) as f64 } else { 0.0 };
    let y_max = bx.top + bx.h - 1;
    let x_max = bx.left + bx.w - 1;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let sy = bx.top as f64 + r as f64 * scale_y;
        let y0 = (sy.floor() as usize).min(y_max);
        let y1 = (y0 + 1).min(y_max);
        let fy = sy - y0 as f64;
        for c in 0..w {
            let sx = bx.left as f64 + c as f64 * scale_x;
            let x0 = (sx.floor() as usize).min(x_max);
            let x1 = (x0 + 1).min(x_max);
            let fx = sx - x0 as f64;
            let top = img.at(y0, x0) * (1.0 - fx) + img.at(y0, x1) * fx;
            let bottom = img.at(y1, x0) * (1.0 - fx) + img.at(y1, x1) * fx;
            out[r * w + c] = top * (1.0 - fy) + bottom * fy;
        }
    }
    Ok(GridImage::from_raw(h, w, out))
}

/// Brightness/contrast jitter: `clamp(scale·p + shift)`.
pub fn jitter(img: &GridImage, scale: f64, shift: f64) -> Result<GridImage> {
    if !(scale > 0.0) || !shift.is_finite() {
        return Err(Error::Parameter(format!("jitter scale {scale} must be > 0")));
    }
    Ok(GridImage::from_raw(
        img.height,
        img.width,
        img.pixels.iter().map(|p| scale * p + shift).collect(),
    ))
}

/// Normalised 1-D Gaussian kernel truncated at `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with edge replication; `sigma = 0` is the identity.
pub fn gaussian_blur(img: &GridImage, sigma: f64) -> Result<GridImage> {
    if !(sigma >= 0.0) {
        return Err(Error::Parameter(format!("blur sigma {sigma} must be ≥ 0")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (img.height as i64, img.width as i64);
    let clampi = |v: i64, hi: i64| v.clamp(0, hi - 1) as usize;
    let mut tmp = vec![0.0; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[(y * w + x) as usize] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img.at(y as usize, clampi(x + i as i64 - r, w)))
                .sum();
        }
    }
    let mut out = vec![0.0; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            out[(y * w + x) as usize] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clampi(y + i as i64 - r, h) * w as usize + x as usize])
                .sum();
        }
    }
    Ok(GridImage::from_raw(img.height, img.width, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }

    fn check(&self, what: &str, lo: f64, hi: f64) -> Result<()> {
        if !(self.lo <= self.hi && self.lo >= lo && self.hi <= hi) {
            return Err(Error::Parameter(format!(
                "{what} range [{}, {}] must be non-empty and within [{lo}, {hi}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Which operators a view sampler may apply, and their parameter ranges.
/// Operators run in the order crop, flip, jitter, blur, rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ViewPolicy {
    /// Fraction of the image area kept by a square crop.
    pub crop_scale: Option<Range>,
    #[serde(default)]
    pub flip_prob: f64,
    pub jitter_scale: Option<Range>,
    pub jitter_shift: Option<Range>,
    pub blur_sigma: Option<Range>,
    pub rotation_deg: Option<Range>,
}

impl ViewPolicy {
    /// No augmentation at all: views equal the source image.
    pub fn identity() -> Self {
        Self::default()
    }

    /// Default contrastive policy (no rotation; rotation is reserved for the watermark).
    pub fn contrastive() -> Self {
        Self {
            crop_scale: Some(Range::new(0.5, 1.0)),
            flip_prob: 0.5,
            jitter_scale: Some(Range::new(0.7, 1.3)),
            jitter_shift: Some(Range::new(-0.15, 0.15)),
            blur_sigma: Some(Range::new(0.0, 1.0)),
            rotation_deg: None,
        }
    }

    /// Contrastive policy without flips and with gentler crops, so a bar's
    /// orientation (its class) survives.
    pub fn label_preserving() -> Self {
        Self { crop_scale: Some(Range::new(0.8, 1.0)), flip_prob: 0.0, ..Self::contrastive() }
    }

    pub fn is_identity(&self) -> bool {
        self.crop_scale.is_none()
            && self.flip_prob == 0.0
            && self.jitter_scale.is_none()
            && self.jitter_shift.is_none()
            && self.blur_sigma.is_none()
            && self.rotation_deg.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = &self.crop_scale {
            r.check("crop scale", f64::MIN_POSITIVE, 1.0)?;
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Parameter(format!("flip probability {} outside [0,1]", self.flip_prob)));
        }
        if let Some(r) = &self.jitter_scale {
            r.check("jitter scale", f64::MIN_POSITIVE, f64::MAX)?;
        }
        if let Some(r) = &self.jitter_shift {
            r.check("jitter shift", -1.0, 1.0)?;
        }
        if let Some(r) = &self.blur_sigma {
            r.check("blur sigma", 0.0, 10.0)?;
        }
        if let Some(r) = &self.rotation_deg {
            r.check("rotation", -360.0, 360.0)?;
        }
        Ok(())
    }
}

/// The sampled parameters of one augmentation chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ViewDescriptor {
    pub crop: Option<CropBox>,
    pub flipped: bool,
    pub jitter: Option<(f64, f64)>,
    pub blur_sigma: Option<f64>,
    pub rotation_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub first: GridImage,
    pub second: GridImage,
    pub first_desc: ViewDescriptor,
    pub second_desc: ViewDescriptor,
}

pub fn sample_view<R: Rng + ?Sized>(img: &GridImage, policy: &ViewPolicy, rng: &mut R) -> Result<(GridImage, ViewDescriptor)> {
    let mut desc = ViewDescriptor::default();
    let mut out = img.clone();
    if let Some(scale) = &policy.crop_scale {
        let frac = scale.sample(rng);
        let side_h = ((frac.sqrt() * img.height as f64).round() as usize).clamp(2.min(img.height), img.height);
        let side_w = ((frac.sqrt() * img.width as f64).round() as usize).clamp(2.min(img.width), img.width);
        let top = rng.random_range(0..=img.height - side_h);
        let left = rng.random_range(0..=img.width - side_w);
        let bx = CropBox {
            top,
            left,
            h: side_h,
            w: side_w,
        };
        out = crop_resize(&out, bx)?;
        desc.crop = Some(bx);
    }
    if policy.flip_prob > 0.0 && rng.random::<f64>() < policy.flip_prob {
        out = hflip(&out);
        desc.flipped = true;
    }
    if policy.jitter_scale.is_some() || policy.jitter_shift.is_some() {
        let s = policy.jitter_scale.map_or(1.0, |r| r.sample(rng));
        let b = policy.jitter_shift.map_or(0.0, |r| r.sample(rng));
        out = jitter(&out, s, b)?;
        desc.jitter = Some((s, b));
    }
    if let Some(r) = &policy.blur_sigma {
        let sigma = r.sample(rng);
        out = gaussian_blur(&out, sigma)?;
        desc.blur_sigma = Some(sigma);
    }
    if let Some(r) = &policy.rotation_deg {
        let a = r.sample(rng);
        out = rotate(&out, a);
        desc.rotation_deg = Some(a);
    }
    Ok((out, desc))
}

/// Two independently sampled views of `img`.
pub fn sample_view_pair<R: Rng + ?Sized>(img: &GridImage, policy: &ViewPolicy, rng: &mut R) -> Result<ViewPair> {
    let (first, first_desc) = sample_view(img, policy, rng)?;
    let (second, second_desc) = sample_view(img, policy, rng)?;
    Ok(ViewPair {
        first,
        second,
        first_desc,
        second_desc,
    })
}

/// One view rotated by an angle in `[0,180)` (label 0) and one in `[180,360)` (label 1).
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkPair {
    pub views: [GridImage; 2],
    pub angles: [f64; 2],
    pub labels: [usize; 2],
}

pub fn watermark_label(angle_deg: f64) -> usize {
    if angle_deg.rem_euclid(360.0) < 180.0 {
        0
    } else {
        1
    }
}

pub fn sample_watermark_pair<R: Rng + ?Sized>(img: &GridImage, rng: &mut R) -> WatermarkPair {
    let a0 = rng.random_range(0.0..180.0);
    let a1 = rng.random_range(180.0..360.0);
    WatermarkPair {
        views: [rotate(img, a0), rotate(img, a1)],
        angles: [a0, a1],
        labels: [0, 1],
    }
}
