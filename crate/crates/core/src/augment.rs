//! Stochastic views and positive-pair batches.

use ndarray::{Array2, ArrayViewMut1};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::InputShape;

/// One stochastic transform. Image transforms require image-shaped data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// Additive noise with per-feature standard deviation
    /// `scale * std(feature)` over the dataset.
    GaussianNoise { scale: f64 },
    /// Crop a random box covering `min_area..=max_area` of the image with
    /// aspect ratio in `min_ratio..=max_ratio`, resized back to full size.
    ResizedCrop {
        min_area: f64,
        max_area: f64,
        #[serde(default = "one")]
        min_ratio: f64,
        #[serde(default = "one")]
        max_ratio: f64,
    },
    /// Rotation by a uniform angle in `[-max_degrees, max_degrees]`, zero fill.
    Rotation { max_degrees: f64 },
    HorizontalFlip { p: f64 },
    /// Applied with probability `p`; factors are drawn from `[1-s, 1+s]`
    /// (hue shift from `[-hue, hue]` turns).
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
        p: f64,
    },
    RandomGrayscale { p: f64 },
}

fn one() -> f64 {
    1.0
}

impl Transform {
    fn validate(&self, shape: InputShape) -> Result<()> {
        let prob = |p: f64, name: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::config(format!("augmentation.{name}"), "probability must be in [0, 1]"))
            }
        };
        let image = !matches!(self, Transform::Identity | Transform::GaussianNoise { .. });
        if image && !matches!(shape, InputShape::Image { .. }) {
            return Err(Error::config("augmentation.transforms", "image transform applied to vector data"));
        }
        match *self {
            Transform::Identity => Ok(()),
            Transform::GaussianNoise { scale } => {
                if scale.is_finite() && scale >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::config("augmentation.scale", "must be finite and non-negative"))
                }
            }
            Transform::ResizedCrop {
                min_area,
                max_area,
                min_ratio,
                max_ratio,
            } => {
                if !(0.0 < min_area && min_area <= max_area && max_area <= 1.0) {
                    return Err(Error::config("augmentation.min_area", "need 0 < min_area <= max_area <= 1"));
                }
                if !(0.0 < min_ratio && min_ratio <= max_ratio) {
                    return Err(Error::config("augmentation.min_ratio", "need 0 < min_ratio <= max_ratio"));
                }
                Ok(())
            }
            Transform::Rotation { max_degrees } => {
                if max_degrees.is_finite() && max_degrees >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::config("augmentation.max_degrees", "must be finite and non-negative"))
                }
            }
            Transform::HorizontalFlip { p } => prob(p, "p"),
            Transform::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
                p,
            } => {
                if [brightness, contrast, saturation].iter().any(|s| !(0.0..=1.0).contains(s)) {
                    return Err(Error::config("augmentation.brightness", "jitter strengths must be in [0, 1]"));
                }
                if !(0.0..=0.5).contains(&hue) {
                    return Err(Error::config("augmentation.hue", "must be in [0, 0.5]"));
                }
                if !matches!(shape, InputShape::Image { channels: 3, .. }) {
                    return Err(Error::config("augmentation.transforms", "color jitter needs 3-channel images"));
                }
                prob(p, "p")
            }
            Transform::RandomGrayscale { p } => {
                if !matches!(shape, InputShape::Image { channels: 3, .. }) {
                    return Err(Error::config("augmentation.transforms", "random grayscale needs 3-channel images"));
                }
                prob(p, "p")
            }
        }
    }
}

/// Ordered transforms applied independently to each anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub transforms: Vec<Transform>,
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            transforms: vec![Transform::Identity],
        }
    }

    pub fn gaussian_noise(scale: f64) -> Self {
        Self {
            transforms: vec![Transform::GaussianNoise { scale }],
        }
    }

    /// Noise for vectors, crop and rotation for grayscale images and the
    /// usual contrastive color family for RGB images.
    pub fn default_for(shape: InputShape) -> Self {
        let transforms = match shape {
            InputShape::Vector { .. } => vec![Transform::GaussianNoise { scale: 0.1 }],
            InputShape::Image { channels: 3, .. } => vec![
                Transform::ResizedCrop {
                    min_area: 0.08,
                    max_area: 1.0,
                    min_ratio: 0.75,
                    max_ratio: 4.0 / 3.0,
                },
                Transform::HorizontalFlip { p: 0.5 },
                Transform::ColorJitter {
                    brightness: 0.4,
                    contrast: 0.4,
                    saturation: 0.4,
                    hue: 0.1,
                    p: 0.8,
                },
                Transform::RandomGrayscale { p: 0.2 },
            ],
            InputShape::Image { .. } => vec![
                Transform::ResizedCrop {
                    min_area: 0.8,
                    max_area: 1.0,
                    min_ratio: 1.0,
                    max_ratio: 1.0,
                },
                Transform::Rotation { max_degrees: 15.0 },
            ],
        };
        Self { transforms }
    }

    pub fn validate(&self, shape: InputShape) -> Result<()> {
        self.transforms.iter().try_for_each(|t| t.validate(shape))
    }

    /// Apply every transform in order to one sample in place.
    pub fn apply<R: Rng>(&self, x: ArrayViewMut1<'_, f64>, shape: InputShape, feature_std: &[f64], rng: &mut R) {
        let mut buf = x;
        for t in &self.transforms {
            apply_one(t, &mut buf, shape, feature_std, rng);
        }
    }
}

fn apply_one<R: Rng>(t: &Transform, x: &mut ArrayViewMut1<'_, f64>, shape: InputShape, feature_std: &[f64], rng: &mut R) {
    let (c, h, w) = match shape {
        InputShape::Image {
            channels,
            height,
            width,
        } => (channels, height, width),
        InputShape::Vector { dim } => (1, 1, dim),
    };
    match *t {
        Transform::Identity => {}
        Transform::GaussianNoise { scale } => {
            for (v, s) in x.iter_mut().zip(feature_std) {
                let z: f64 = StandardNormal.sample(rng);
                *v += scale * s * z;
            }
        }
        Transform::ResizedCrop {
            min_area,
            max_area,
            min_ratio,
            max_ratio,
        } => {
            let area = rng.random_range(min_area..=max_area);
            let ratio = (rng.random_range(min_ratio.ln()..=max_ratio.ln())).exp();
            // box size as fractions of the image; clipped to fit
            let bw = (area * ratio).sqrt().min(1.0);
            let bh = (area / ratio).sqrt().min(1.0);
            let x0 = rng.random_range(0.0..=1.0 - bw) * w as f64;
            let y0 = rng.random_range(0.0..=1.0 - bh) * h as f64;
            let (sx, sy) = (bw, bh);
            warp(x, c, h, w, |u, v| (x0 + (u + 0.5) * sx - 0.5, y0 + (v + 0.5) * sy - 0.5));
        }
        Transform::Rotation { max_degrees } => {
            let theta = rng.random_range(-max_degrees..=max_degrees).to_radians();
            let (sin, cos) = theta.sin_cos();
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            warp(x, c, h, w, |u, v| {
                let (du, dv) = (u - cx, v - cy);
                (cos * du + sin * dv + cx, -sin * du + cos * dv + cy)
            });
        }
        Transform::HorizontalFlip { p } => {
            if rng.random::<f64>() < p {
                for ch in 0..c {
                    for row in 0..h {
                        let base = (ch * h + row) * w;
                        for col in 0..w / 2 {
                            x.swap(base + col, base + w - 1 - col);
                        }
                    }
                }
            }
        }
        Transform::ColorJitter {
            brightness,
            contrast,
            saturation,
            hue,
            p,
        } => {
            if rng.random::<f64>() < p {
                let hw = h * w;
                let b = rng.random_range(1.0 - brightness..=1.0 + brightness);
                x.mapv_inplace(|v| (v * b).clamp(0.0, 1.0));
                let k = rng.random_range(1.0 - contrast..=1.0 + contrast);
                let mean = (0..hw).map(|i| luma(x, i, hw)).sum::<f64>() / hw as f64;
                x.mapv_inplace(|v| (mean + k * (v - mean)).clamp(0.0, 1.0));
                let s = rng.random_range(1.0 - saturation..=1.0 + saturation);
                for i in 0..hw {
                    let g = luma(x, i, hw);
                    for ch in 0..3 {
                        let v = &mut x[ch * hw + i];
                        *v = (g + s * (*v - g)).clamp(0.0, 1.0);
                    }
                }
                let shift = rng.random_range(-hue..=hue) * std::f64::consts::TAU;
                rotate_hue(x, hw, shift);
            }
        }
        Transform::RandomGrayscale { p } => {
            if rng.random::<f64>() < p {
                let hw = h * w;
                for i in 0..hw {
                    let g = luma(x, i, hw);
                    for ch in 0..3 {
                        x[ch * hw + i] = g;
                    }
                }
            }
        }
    }
}

fn luma(x: &ArrayViewMut1<'_, f64>, i: usize, hw: usize) -> f64 {
    0.299 * x[i] + 0.587 * x[hw + i] + 0.114 * x[2 * hw + i]
}

/// Hue rotation in YIQ space.
fn rotate_hue(x: &mut ArrayViewMut1<'_, f64>, hw: usize, angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (s, c) = angle.sin_cos();
    for i in 0..hw {
        let (r, g, b) = (x[i], x[hw + i], x[2 * hw + i]);
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let ii = 0.596 * r - 0.274 * g - 0.322 * b;
        let q = 0.211 * r - 0.523 * g + 0.312 * b;
        let (i2, q2) = (c * ii - s * q, s * ii + c * q);
        x[i] = (y + 0.956 * i2 + 0.621 * q2).clamp(0.0, 1.0);
        x[hw + i] = (y - 0.272 * i2 - 0.647 * q2).clamp(0.0, 1.0);
        x[2 * hw + i] = (y - 1.106 * i2 + 1.703 * q2).clamp(0.0, 1.0);
    }
}

/// Resample every channel: output pixel `(u, v)` reads the source at
/// `map(u, v)` (pixel-centre coordinates) with bilinear weights, zero
/// outside the image.
fn warp(x: &mut ArrayViewMut1<'_, f64>, c: usize, h: usize, w: usize, map: impl Fn(f64, f64) -> (f64, f64)) {
    let src = x.to_vec();
    let at = |ch: usize, r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
            0.0
        } else {
            src[(ch * h + r as usize) * w + col as usize]
        }
    };
    for v in 0..h {
        for u in 0..w {
            let (sx, sy) = map(u as f64, v as f64);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let top = at(ch, y0, x0) * (1.0 - fx) + at(ch, y0, x0 + 1) * fx;
                let bottom = at(ch, y0 + 1, x0) * (1.0 - fx) + at(ch, y0 + 1, x0 + 1) * fx;
                x[(ch * h + v) * w + u] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
}

/// `N` anchors and their views; row `j` of `views` derives from row `j` of
/// `anchors`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub anchors: Array2<f64>,
    pub views: Array2<f64>,
    pub indices: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Anchors stacked above views, `2N x D`.
    pub fn stacked(&self) -> Array2<f64> {
        ndarray::concatenate(ndarray::Axis(0), &[self.anchors.view(), self.views.view()])
            .expect("anchors and views share a width")
    }
}

/// Views for a fixed set of anchor indices. Each view uses its own RNG
/// stream, so results do not depend on how batches are scheduled.
pub fn pair_batch_from_indices(
    dataset: &Dataset,
    policy: &AugmentationPolicy,
    indices: Vec<usize>,
    seed: u64,
) -> Result<PairBatch> {
    if indices.len() < 2 {
        return Err(Error::invalid("a pair batch needs at least 2 anchors"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::invalid(format!("sample index {bad} out of range")));
    }
    let anchors = dataset.select(&indices);
    let mut views = anchors.clone();
    for (j, row) in views.rows_mut().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64 + 1);
        policy.apply(row, dataset.shape(), dataset.feature_std(), &mut rng);
    }
    if views.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("augmentation produced non-finite values".into()));
    }
    Ok(PairBatch {
        anchors,
        views,
        indices,
    })
}

/// Sample `n` distinct anchors and build their views.
pub fn make_pair_batch(dataset: &Dataset, policy: &AugmentationPolicy, n: usize, seed: u64) -> Result<PairBatch> {
    if n > dataset.len() {
        return Err(Error::invalid(format!(
            "batch size {n} exceeds dataset size {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = index::sample(&mut rng, dataset.len(), n).into_vec();
    pair_batch_from_indices(dataset, policy, indices, seed)
}

/// A seeded permutation of `0..len` cut into batches of `batch` indices.
/// A trailing remainder is kept when it has at least two samples.
pub fn epoch_batches(len: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = index::sample(&mut rng, len, len).into_vec();
    order
        .chunks(batch.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}
