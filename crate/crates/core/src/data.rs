//! Procedural dense-labeling scenes.
//!
//! A scene is a background (class 0) with up to `C - 1` rectangles and discs
//! of distinct foreground classes painted on top in random order. Each class
//! has a base color drawn around a fixed palette entry; pixels get Gaussian
//! color noise. Some scenes mark the pixels on class boundaries as ignored.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CirkdError, Result};
use crate::matrix::{LabelMap, DEFAULT_IGNORE};
use crate::nets::Tensor;
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Per-pixel color noise standard deviation.
    pub pixel_noise: f64,
    /// Per-scene, per-class shift of the base color (uniform half-width).
    pub color_jitter: f64,
    /// Lower bound of the per-scene brightness gain; the gain is uniform in `[min_gain, 1]`.
    pub min_gain: f64,
    /// Per-scene shift added to every color channel (uniform half-width).
    pub global_shift: f64,
    /// Probability that a scene marks its class boundaries as ignored.
    pub ignore_border_prob: f64,
    pub ignore_index: u8,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            pixel_noise: 0.05,
            color_jitter: 0.15,
            min_gain: 0.4,
            global_shift: 0.0,
            ignore_border_prob: 0.2,
            ignore_index: DEFAULT_IGNORE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// `H x W x 3` row-major RGB in `[0, 1]`.
    pub image: Vec<f64>,
    pub labels: LabelMap,
    pub seed: u64,
}

impl Scene {
    pub fn image_tensor(&self) -> Tensor {
        Tensor::from_data(1, self.height, self.width, 3, self.image.clone())
            .expect("scene image matches its shape")
    }
}

/// Stacks scene images into one NHWC batch.
pub fn batch_images(scenes: &[&Scene]) -> Result<Tensor> {
    let (h, w) = scenes
        .first()
        .map(|s| (s.height, s.width))
        .ok_or_else(|| CirkdError::Param("empty scene batch".into()))?;
    let mut data = Vec::with_capacity(scenes.len() * h * w * 3);
    for s in scenes {
        if (s.height, s.width) != (h, w) {
            return Err(CirkdError::shape("batch_images", "scenes differ in size"));
        }
        data.extend_from_slice(&s.image);
    }
    Tensor::from_data(scenes.len(), h, w, 3, data)
}

/// Base colors spread over the RGB cube; class `c` uses entry `c % len`.
const PALETTE: [[f64; 3]; 8] = [
    [0.45, 0.45, 0.45],
    [0.80, 0.25, 0.20],
    [0.25, 0.70, 0.30],
    [0.25, 0.35, 0.80],
    [0.80, 0.75, 0.25],
    [0.70, 0.30, 0.75],
    [0.25, 0.75, 0.75],
    [0.95, 0.60, 0.40],
];

pub fn generate_scene(seed: u64, height: usize, width: usize, num_classes: usize) -> Result<Scene> {
    generate_scene_with(seed, height, width, num_classes, &SceneParams::default())
}

pub fn generate_scene_with(
    seed: u64,
    height: usize,
    width: usize,
    num_classes: usize,
    params: &SceneParams,
) -> Result<Scene> {
    if num_classes < 2 {
        return Err(CirkdError::Param(format!("need at least 2 classes, got {num_classes}")));
    }
    if num_classes > params.ignore_index as usize {
        return Err(CirkdError::Param(format!(
            "{num_classes} classes collide with ignore index {}",
            params.ignore_index
        )));
    }
    if height < 8 || width < 8 {
        return Err(CirkdError::Param(format!("scene must be at least 8x8, got {height}x{width}")));
    }
    let mut rng = seeded(seed);

    let mut labels = vec![0u8; height * width];
    let mut classes: Vec<usize> = (1..num_classes).collect();
    classes.shuffle(&mut rng);
    let shapes = rng.gen_range(1..num_classes);
    // painting order is the shuffled order, so later classes occlude earlier ones
    for &cls in &classes[..shapes] {
        let min_side = (height.min(width) / 5).max(2);
        let max_side = (height.min(width) / 2).max(min_side + 1);
        if rng.gen_bool(0.5) {
            let sh = rng.gen_range(min_side..=max_side);
            let sw = rng.gen_range(min_side..=max_side);
            let top = rng.gen_range(0..=height - sh);
            let left = rng.gen_range(0..=width - sw);
            for h in top..top + sh {
                for w in left..left + sw {
                    labels[h * width + w] = cls as u8;
                }
            }
        } else {
            let r = rng.gen_range(min_side as f64 / 2.0..=max_side as f64 / 2.0);
            let cy = rng.gen_range(0.0..height as f64);
            let cx = rng.gen_range(0.0..width as f64);
            for h in 0..height {
                for w in 0..width {
                    let (dy, dx) = (h as f64 + 0.5 - cy, w as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= r * r {
                        labels[h * width + w] = cls as u8;
                    }
                }
            }
        }
    }

    let gain = if params.min_gain < 1.0 { rng.gen_range(params.min_gain..=1.0) } else { 1.0 };
    let shift: [f64; 3] = std::array::from_fn(|_| {
        if params.global_shift > 0.0 { rng.gen_range(-params.global_shift..=params.global_shift) } else { 0.0 }
    });
    let colors: Vec<[f64; 3]> = (0..num_classes)
        .map(|c| {
            let base = PALETTE[c % PALETTE.len()];
            std::array::from_fn(|k| {
                let jitter = rng.gen_range(-params.color_jitter..=params.color_jitter);
                gain * (base[k] + jitter) + shift[k]
            })
        })
        .collect();
    let mut image = vec![0.0; height * width * 3];
    for (px, &l) in image.chunks_exact_mut(3).zip(&labels) {
        for (v, base) in px.iter_mut().zip(colors[l as usize]) {
            let noise: f64 = rng.sample(StandardNormal);
            *v = (base + params.pixel_noise * noise).clamp(0.0, 1.0);
        }
    }

    if rng.gen_bool(params.ignore_border_prob) {
        let snapshot = labels.clone();
        for h in 0..height {
            for w in 0..width {
                let l = snapshot[h * width + w];
                let differs = |hh: usize, ww: usize| snapshot[hh * width + ww] != l;
                let edge = (h > 0 && differs(h - 1, w))
                    || (h + 1 < height && differs(h + 1, w))
                    || (w > 0 && differs(h, w - 1))
                    || (w + 1 < width && differs(h, w + 1));
                if edge {
                    labels[h * width + w] = params.ignore_index;
                }
            }
        }
    }

    Ok(Scene {
        height,
        width,
        image,
        labels: LabelMap::new(height, width, labels, params.ignore_index)?,
        seed,
    })
}

/// Nearest-neighbor downsampling that reads each output cell's center.
pub fn downsample_labels(labels: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    let (h, w) = (labels.height(), labels.width());
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(CirkdError::Param(format!(
            "cannot downsample {h}x{w} labels to {out_h}x{out_w}"
        )));
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let src_h = (2 * i + 1) * h / (2 * out_h);
        for j in 0..out_w {
            let src_w = (2 * j + 1) * w / (2 * out_w);
            out.push(labels.get(src_h, src_w));
        }
    }
    LabelMap::new(out_h, out_w, out, labels.ignore_index())
}

/// Nearest-neighbor upsampling of a coarse prediction to full resolution.
pub fn upsample_labels(labels: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    let (h, w) = (labels.height(), labels.width());
    if out_h < h || out_w < w {
        return Err(CirkdError::Param(format!("cannot upsample {h}x{w} labels to {out_h}x{out_w}")));
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        for j in 0..out_w {
            out.push(labels.get(i * h / out_h, j * w / out_w));
        }
    }
    LabelMap::new(out_h, out_w, out, labels.ignore_index())
}

/// Writes the image as binary PPM and the labels as one raw byte per pixel.
pub fn export_scene(scene: &Scene, image_path: &Path, label_path: &Path) -> Result<()> {
    let mut ppm = format!("P6\n{} {}\n255\n", scene.width, scene.height).into_bytes();
    ppm.extend(scene.image.iter().map(|v| (v * 255.0).round() as u8));
    fs::write(image_path, ppm).map_err(|e| CirkdError::io(image_path, e))?;
    fs::write(label_path, scene.labels.labels()).map_err(|e| CirkdError::io(label_path, e))
}
