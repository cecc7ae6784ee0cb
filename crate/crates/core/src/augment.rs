//! Random-resized-crop augmentation with exact replay from stored parameters.
//!
//! The resize is bilinear with half-pixel centers and edge clamping. For an
//! output pixel `(ox, oy)` on an `S x S` canvas and a crop `(x, y, w, h)`:
//!
//! ```text
//! u  = clamp((ox + 0.5) * w / S - 0.5, 0, w - 1)
//! v  = clamp((oy + 0.5) * h / S - 0.5, 0, h - 1)
//! x0 = floor(u), x1 = min(x0 + 1, w - 1), fx = u - x0   (same for y)
//! top    = p[y0][x0] + fx * (p[y0][x1] - p[y0][x0])
//! bottom = p[y1][x0] + fx * (p[y1][x1] - p[y1][x0])
//! out    = top + fy * (bottom - top)
//! ```
//!
//! Arithmetic is `f64`, coordinates are relative to the crop origin, and the
//! result is cast to `f32`. A horizontal flip mirrors output columns, then the
//! brightness factor multiplies every pixel and the result is clamped to `[0, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const SCALE_RANGE: (f64, f64) = (0.08, 1.0);
pub const RATIO_RANGE: (f64, f64) = (0.75, 1.33);
pub const BRIGHTNESS_RANGE: (f32, f32) = (0.8, 1.2);
pub const MAX_CROP_TRIES: usize = 10;
/// Size of one parameter record on the wire:
/// four `u16` crop fields, a flag byte, `f32` brightness, `u64` draw seed.
pub const WIRE_SIZE: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub crop_x: u16,
    pub crop_y: u16,
    pub crop_w: u16,
    pub crop_h: u16,
    pub hflip: bool,
    pub brightness: f32,
    pub draw_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedImage {
    pub pixels: Vec<f32>,
    pub params: AugmentationParams,
}

impl AugmentationParams {
    /// Full frame, no flip, unit brightness.
    pub fn identity(side: usize) -> Self {
        Self {
            crop_x: 0,
            crop_y: 0,
            crop_w: side as u16,
            crop_h: side as u16,
            hflip: false,
            brightness: 1.0,
            draw_seed: 0,
        }
    }

    /// Seed used for augmentation `aug_index` of `sample_id` in a world.
    pub fn seed_for(world_seed: u64, sample_id: u64, aug_index: u64) -> u64 {
        seed::derive(&[world_seed, seed::tag("augment"), sample_id, aug_index])
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        let (x, y, w, h) = (
            self.crop_x as usize,
            self.crop_y as usize,
            self.crop_w as usize,
            self.crop_h as usize,
        );
        if w == 0 || h == 0 || x + w > side || y + h > side {
            return Err(Error::CropOutOfBounds {
                crop: [x as u32, y as u32, w as u32, h as u32],
                side,
            });
        }
        if !(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1).contains(&self.brightness) {
            return Err(Error::Config(format!("brightness {} out of range", self.brightness)));
        }
        Ok(())
    }

    pub fn area_fraction(&self, side: usize) -> f64 {
        (self.crop_w as f64 * self.crop_h as f64) / (side * side) as f64
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.crop_x.to_le_bytes());
        out.extend_from_slice(&self.crop_y.to_le_bytes());
        out.extend_from_slice(&self.crop_w.to_le_bytes());
        out.extend_from_slice(&self.crop_h.to_le_bytes());
        out.push(self.hflip as u8);
        out.extend_from_slice(&self.brightness.to_le_bytes());
        out.extend_from_slice(&self.draw_seed.to_le_bytes());
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < WIRE_SIZE {
            return Err(Error::Corrupt("augmentation record too short".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let flags = bytes[8];
        if flags & !1 != 0 {
            return Err(Error::Corrupt(format!("unknown augmentation flags {flags:#04x}")));
        }
        Ok(Self {
            crop_x: u16_at(0),
            crop_y: u16_at(2),
            crop_w: u16_at(4),
            crop_h: u16_at(6),
            hflip: flags & 1 == 1,
            brightness: f32::from_le_bytes(bytes[9..13].try_into().unwrap()),
            draw_seed: u64::from_le_bytes(bytes[13..21].try_into().unwrap()),
        })
    }
}

pub fn draw_params(seed: u64, image_side: usize) -> Result<AugmentationParams> {
    draw_params_with_budget(seed, image_side, MAX_CROP_TRIES)
}

/// As [`draw_params`] with an explicit rejection budget before the full-frame fallback.
pub fn draw_params_with_budget(seed: u64, image_side: usize, max_tries: usize) -> Result<AugmentationParams> {
    if image_side < 8 {
        return Err(Error::Precondition("image_side must be >= 8".into()));
    }
    if image_side > u16::MAX as usize {
        return Err(Error::Precondition("image_side exceeds u16 crop coordinates".into()));
    }
    let mut rng = seed::rng_for(&[seed]);
    let side = image_side as f64;
    let area = side * side;
    let (log_lo, log_hi) = (RATIO_RANGE.0.ln(), RATIO_RANGE.1.ln());
    let mut crop = None;
    for _ in 0..max_tries {
        let target = area * rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let ratio = rng.random_range(log_lo..=log_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if crop_in_range(w, h, image_side) {
            let x = rng.random_range(0..=image_side - w);
            let y = rng.random_range(0..=image_side - h);
            crop = Some((x, y, w, h));
            break;
        }
    }
    let (x, y, w, h) = crop.unwrap_or((0, 0, image_side, image_side));
    let hflip = rng.random_bool(0.5);
    let brightness = rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1);
    Ok(AugmentationParams {
        crop_x: x as u16,
        crop_y: y as u16,
        crop_w: w as u16,
        crop_h: h as u16,
        hflip,
        brightness,
        draw_seed: seed,
    })
}

/// Realized integer crop must fit the frame and keep both ranges.
fn crop_in_range(w: usize, h: usize, side: usize) -> bool {
    if w == 0 || h == 0 || w > side || h > side {
        return false;
    }
    let frac = (w * h) as f64 / (side * side) as f64;
    let ratio = w as f64 / h as f64;
    (SCALE_RANGE.0..=SCALE_RANGE.1).contains(&frac) && (RATIO_RANGE.0..=RATIO_RANGE.1).contains(&ratio)
}

pub fn apply(image: &[f32], params: &AugmentationParams) -> Result<AugmentedImage> {
    let side = (image.len() as f64).sqrt() as usize;
    if side * side != image.len() || side == 0 {
        return Err(Error::Precondition(format!("image of {} pixels is not square", image.len())));
    }
    if params.crop_w == 0
        || params.crop_h == 0
        || params.crop_x as usize + params.crop_w as usize > side
        || params.crop_y as usize + params.crop_h as usize > side
    {
        return Err(Error::CropOutOfBounds {
            crop: [
                params.crop_x as u32,
                params.crop_y as u32,
                params.crop_w as u32,
                params.crop_h as u32,
            ],
            side,
        });
    }
    let (cx, cy) = (params.crop_x as usize, params.crop_y as usize);
    let (w, h) = (params.crop_w as usize, params.crop_h as usize);
    let src = |r: usize, c: usize| image[(cy + r) * side + cx + c] as f64;
    let sx = w as f64 / side as f64;
    let sy = h as f64 / side as f64;

    let brightness = params.brightness as f64;
    let mut pixels = vec![0f32; side * side];
    for oy in 0..side {
        let v = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = v.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = v - y0 as f64;
        for ox in 0..side {
            let u = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = u.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = u - x0 as f64;
            let top = src(y0, x0) + fx * (src(y0, x1) - src(y0, x0));
            let bottom = src(y1, x0) + fx * (src(y1, x1) - src(y1, x0));
            let value = top + fy * (bottom - top);
            let col = if params.hflip { side - 1 - ox } else { ox };
            pixels[oy * side + col] = (value * brightness).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(AugmentedImage {
        pixels,
        params: *params,
    })
}

/// Read-path entry point: regenerate a stored view without re-drawing parameters.
pub fn replay(image: &[f32], params: &AugmentationParams) -> Result<AugmentedImage> {
    apply(image, params)
}
