//! Deterministic synthetic image-text world.
//!
//! Each class owns a smooth single-channel raster prototype and a unit caption
//! prototype. Samples are noisy copies of their class prototypes; sample `i`
//! of a split is a pure function of `(seed, split, i)`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{dot, norm};

/// Prototype draws attempted per class before giving up.
pub const MAX_PROTOTYPE_DRAWS: usize = 1000;
pub const IMAGE_SEPARATION: f64 = 0.5;
pub const CAPTION_SEPARATION: f64 = 0.3;
/// Mid-gray level subtracted before measuring image prototype similarity.
pub const MID_GRAY: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub image_side: usize,
    pub caption_dim: usize,
    pub pixel_noise_sigma: f64,
    pub caption_noise_sigma: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 16,
            image_side: 32,
            caption_dim: 24,
            pixel_noise_sigma: 0.8,
            caption_noise_sigma: 0.5,
            seed: 2024,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.image_side < 8 {
            return Err(Error::Config("image_side must be >= 8".into()));
        }
        if self.caption_dim < 2 {
            return Err(Error::Config("caption_dim must be >= 2".into()));
        }
        if !(self.pixel_noise_sigma >= 0.0 && self.caption_noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigmas must be >= 0".into()));
        }
        Ok(())
    }

    /// 64-bit hash of the canonical JSON form.
    pub fn fingerprint(&self) -> u64 {
        seed::hash64(&serde_json::to_vec(self).expect("world config serializes"))
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    TeacherFit,
}

impl Split {
    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Eval => 2,
            Split::TeacherFit => 3,
        }
    }

    pub fn sample_id(self, index: u64) -> u64 {
        (self.code() << 40) | index
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: u64,
    pub image: Vec<f32>,
    pub caption: Vec<f32>,
    pub class_id: usize,
}

#[derive(Clone, Debug)]
pub struct World {
    cfg: WorldConfig,
    image_prototypes: Vec<Vec<f32>>,
    caption_prototypes: Vec<Vec<f64>>,
}

impl World {
    pub fn build(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let image_prototypes = draw_separated(
            cfg.num_classes,
            IMAGE_SEPARATION,
            |class, attempt| {
                let mut rng = seed::rng_for(&[cfg.seed, seed::tag("proto-img"), class as u64, attempt as u64]);
                smooth_pattern(&mut rng, cfg.image_side)
            },
            |p| p.iter().map(|&v| v as f64 - MID_GRAY).collect(),
        )?;
        let caption_prototypes = draw_separated(
            cfg.num_classes,
            CAPTION_SEPARATION,
            |class, attempt| {
                let mut rng = seed::rng_for(&[cfg.seed, seed::tag("proto-txt"), class as u64, attempt as u64]);
                let v: Vec<f64> = (0..cfg.caption_dim).map(|_| rng.sample(StandardNormal)).collect();
                unit(v)
            },
            |p| p.clone(),
        )?;
        Ok(Self {
            cfg,
            image_prototypes,
            caption_prototypes,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn image_prototypes(&self) -> &[Vec<f32>] {
        &self.image_prototypes
    }

    pub fn caption_prototypes(&self) -> &[Vec<f64>] {
        &self.caption_prototypes
    }

    /// Zero-shot classification prompts: the noiseless caption prototypes.
    pub fn zero_shot_prompts(&self) -> Vec<Vec<f64>> {
        self.caption_prototypes.clone()
    }

    pub fn sample(&self, split: Split, index: u64) -> Sample {
        let cfg = &self.cfg;
        let mut rng = seed::rng_for(&[cfg.seed, split.code(), index]);
        let class_id = rng.random_range(0..cfg.num_classes);
        let image = self.image_prototypes[class_id]
            .iter()
            .map(|&p| {
                let noise: f64 = if cfg.pixel_noise_sigma > 0.0 {
                    cfg.pixel_noise_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                (p as f64 + noise).clamp(0.0, 1.0) as f32
            })
            .collect();
        let caption = self.caption_prototypes[class_id]
            .iter()
            .map(|&p| p + cfg.caption_noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect::<Vec<f64>>();
        let caption = unit(caption).into_iter().map(|v| v as f32).collect();
        Sample {
            sample_id: split.sample_id(index),
            image,
            caption,
            class_id,
        }
    }

    pub fn draw_samples(&self, split: Split, n: usize) -> Result<Vec<Sample>> {
        self.draw_range(split, 0, n)
    }

    pub fn draw_range(&self, split: Split, start: u64, n: usize) -> Result<Vec<Sample>> {
        if n == 0 {
            return Err(Error::Precondition("draw_samples requires n >= 1".into()));
        }
        Ok((0..n as u64).map(|i| self.sample(split, start + i)).collect())
    }
}

/// Rejection-samples `count` prototypes whose pairwise cosine (after `center`) stays below `max_cos`.
fn draw_separated<P>(
    count: usize,
    max_cos: f64,
    mut draw: impl FnMut(usize, usize) -> P,
    center: impl Fn(&P) -> Vec<f64>,
) -> Result<Vec<P>> {
    let mut accepted: Vec<P> = Vec::with_capacity(count);
    let mut centered: Vec<Vec<f64>> = Vec::with_capacity(count);
    for class in 0..count {
        let mut found = false;
        for attempt in 0..MAX_PROTOTYPE_DRAWS {
            let candidate = draw(class, attempt);
            let c = center(&candidate);
            let cn = norm(&c);
            if cn == 0.0 {
                continue;
            }
            if centered.iter().all(|o| dot(o, &c) / (norm(o) * cn) < max_cos) {
                accepted.push(candidate);
                centered.push(c);
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::Separation {
                draws: MAX_PROTOTYPE_DRAWS,
            });
        }
    }
    Ok(accepted)
}

/// Mid-gray plus a few low-frequency plane waves, clamped to `[0, 1]`.
fn smooth_pattern(rng: &mut impl Rng, side: usize) -> Vec<f32> {
    const WAVES: usize = 4;
    let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            (
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.08..0.2),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (x as f64 / side as f64, y as f64 / side as f64);
            let s: f64 = waves
                .iter()
                .map(|&(fx, fy, phase, amp)| amp * (2.0 * PI * (fx * u + fy * v) + phase).cos())
                .sum();
            out.push((MID_GRAY + s).clamp(0.0, 1.0) as f32);
        }
    }
    out
}

pub(crate) fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}
