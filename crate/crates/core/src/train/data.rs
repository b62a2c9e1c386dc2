//! Procedural material scenes.
//!
//! A scene is painted from 2 to 6 regions (a full-bleed background, then
//! rectangles and ellipses). Each region carries one texture, and some
//! regions are cut by a straight line into two textures, so region outlines
//! and material boundaries do not coincide. The texture id of a pixel is its
//! material label.

use dbat_tensor::{Tensor, IGNORE_INDEX};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DbatError, Result};

/// Fixed palette; `color` concept ids index into it.
pub const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.15, 0.30, 0.90],
    [0.95, 0.85, 0.15],
    [0.80, 0.20, 0.80],
    [0.10, 0.80, 0.85],
    [0.95, 0.95, 0.95],
    [0.10, 0.10, 0.10],
];

pub const SHAPE_NAMES: [&str; 3] = ["background", "rectangle", "ellipse"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Texture `k` is a flat fill in palette color `k mod 8`.
    #[default]
    FlatColor,
    /// Texture `k` is a pattern family (stripes, checkerboard, value noise,
    /// flat) with per-region random colors, so color does not reveal the
    /// material.
    Textured,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub size: usize,
    /// `[3, size, size]` in [0, 1].
    pub image: Tensor,
    /// Material label per pixel, or [`IGNORE_INDEX`].
    pub labels: Vec<u8>,
    /// Texture id per pixel (no IGNORE).
    pub texture: Vec<u8>,
    /// Dominant palette color per pixel.
    pub color: Vec<u8>,
    /// Region shape kind per pixel, indexing [`SHAPE_NAMES`].
    pub shape: Vec<u8>,
}

#[derive(Clone, Copy, Debug)]
enum Outline {
    Full,
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Outline {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Outline::Full => true,
            Outline::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Outline::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
        }
    }

    fn kind(&self) -> u8 {
        match self {
            Outline::Full => 0,
            Outline::Rect { .. } => 1,
            Outline::Ellipse { .. } => 2,
        }
    }
}

/// A texture instance: id plus its rendering parameters.
#[derive(Clone, Copy, Debug)]
struct Fill {
    texture: u8,
    fg: u8,
    bg: u8,
    /// Stripe direction (radians), checker cell or noise cell, and phase.
    angle: f64,
    period: f64,
    phase: f64,
    noise_seed: u64,
}

impl Fill {
    fn draw(preset: Preset, texture: usize, rng: &mut ChaCha8Rng) -> Self {
        let (fg, bg) = match preset {
            Preset::FlatColor => ((texture % PALETTE.len()) as u8, (texture % PALETTE.len()) as u8),
            Preset::Textured => {
                let fg = rng.gen_range(0..PALETTE.len());
                let mut bg = rng.gen_range(0..PALETTE.len() - 1);
                if bg >= fg {
                    bg += 1;
                }
                (fg as u8, bg as u8)
            }
        };
        // families with higher ids get coarser patterns
        let scale = 1.0 + (texture / 4) as f64 * 0.75;
        Self {
            texture: texture as u8,
            fg,
            bg,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            period: rng.gen_range(4.0..7.0) * scale,
            phase: rng.gen_range(0.0..1.0),
            noise_seed: rng.gen(),
        }
    }

    /// Foreground weight in [0, 1] at a pixel.
    fn pattern(&self, preset: Preset, y: f64, x: f64) -> f64 {
        if preset == Preset::FlatColor {
            return 1.0;
        }
        match self.texture % 4 {
            0 => {
                let t = (x * self.angle.cos() + y * self.angle.sin()) / self.period + self.phase;
                if t.rem_euclid(1.0) < 0.5 { 1.0 } else { 0.0 }
            }
            1 => {
                let cell = (self.period * 0.5).max(2.0);
                let (cy, cx) = ((y / cell).floor() as i64, (x / cell).floor() as i64);
                if (cy + cx).rem_euclid(2) == 0 { 1.0 } else { 0.0 }
            }
            2 => value_noise(self.noise_seed, y / self.period, x / self.period),
            _ => 1.0,
        }
    }
}

fn hash2(seed: u64, y: i64, x: i64) -> f64 {
    let mut h = seed ^ (y as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (x as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h = splitmix(h);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (iy, ix) = (y0 as i64, x0 as i64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sy, sx) = (s(fy), s(fx));
    let top = hash2(seed, iy, ix) * (1.0 - sx) + hash2(seed, iy, ix + 1) * sx;
    let bot = hash2(seed, iy + 1, ix) * (1.0 - sx) + hash2(seed, iy + 1, ix + 1) * sx;
    top * (1.0 - sy) + bot * sy
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed for scene `index` of `step` in a run seeded with `seed`.
pub fn scene_seed(seed: u64, step: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ step) ^ index)
}

struct Region {
    outline: Outline,
    fills: [Fill; 2],
    /// Split line `a·y + b·x < c` selects `fills[1]`; `None` keeps one fill.
    split: Option<(f64, f64, f64)>,
}

/// Deterministic scene for `seed` with textures `0..num_classes`.
pub fn generate_scene(seed: u64, num_classes: usize, crop: usize, ignore_fraction: f64, preset: Preset) -> Result<SyntheticScene> {
    if !(2..=255).contains(&num_classes) {
        return Err(DbatError::Argument(format!("num_classes {num_classes} outside 2..=255")));
    }
    if !(0.0..=0.9).contains(&ignore_fraction) {
        return Err(DbatError::Argument(format!("ignore_fraction {ignore_fraction} outside [0, 0.9]")));
    }
    if crop == 0 {
        return Err(DbatError::Argument("crop must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = crop as f64;
    let count = rng.gen_range(2..=6);
    let mut regions = Vec::with_capacity(count);
    for r in 0..count {
        let outline = if r == 0 {
            Outline::Full
        } else if rng.gen_bool(0.5) {
            let (h, w) = (rng.gen_range(0.25..0.7) * size, rng.gen_range(0.25..0.7) * size);
            let (y0, x0) = (rng.gen_range(0.0..size - h), rng.gen_range(0.0..size - w));
            Outline::Rect { y0, x0, y1: y0 + h, x1: x0 + w }
        } else {
            Outline::Ellipse {
                cy: rng.gen_range(0.2..0.8) * size,
                cx: rng.gen_range(0.2..0.8) * size,
                ry: rng.gen_range(0.12..0.35) * size,
                rx: rng.gen_range(0.12..0.35) * size,
            }
        };
        let t0 = rng.gen_range(0..num_classes);
        let t1 = rng.gen_range(0..num_classes);
        let fills = [Fill::draw(preset, t0, &mut rng), Fill::draw(preset, t1, &mut rng)];
        let split = rng.gen_bool(0.4).then(|| {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (a, b) = (theta.sin(), theta.cos());
            let (py, px) = (rng.gen_range(0.3..0.7) * size, rng.gen_range(0.3..0.7) * size);
            (a, b, a * py + b * px)
        });
        regions.push(Region { outline, fills, split });
    }

    let n = crop * crop;
    let mut image = vec![0.0; 3 * n];
    let mut texture = vec![0u8; n];
    let mut color = vec![0u8; n];
    let mut shape = vec![0u8; n];
    for py in 0..crop {
        for px in 0..crop {
            let (y, x) = (py as f64 + 0.5, px as f64 + 0.5);
            let region = regions
                .iter()
                .rev()
                .find(|r| r.outline.contains(y, x))
                .expect("background covers every pixel");
            let fill = match region.split {
                Some((a, b, c)) if a * y + b * x < c => &region.fills[1],
                _ => &region.fills[0],
            };
            let t = fill.pattern(preset, y, x);
            let (fg, bg) = (PALETTE[fill.fg as usize], PALETTE[fill.bg as usize]);
            let p = py * crop + px;
            for c in 0..3 {
                image[c * n + p] = t * fg[c] + (1.0 - t) * bg[c];
            }
            texture[p] = fill.texture;
            color[p] = if t >= 0.5 { fill.fg } else { fill.bg };
            shape[p] = region.outline.kind();
        }
    }

    let mut labels = texture.clone();
    let ignored = (ignore_fraction * n as f64).round() as usize;
    for i in sample(&mut rng, n, ignored) {
        labels[i] = IGNORE_INDEX;
    }
    Ok(SyntheticScene {
        size: crop,
        image: Tensor::new([3, crop, crop], image)?,
        labels,
        texture,
        color,
        shape,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[N, 3, crop, crop]`.
    pub images: Tensor,
    /// `N·crop·crop` labels.
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn from_scenes(scenes: &[SyntheticScene]) -> Result<Self> {
        let Some(first) = scenes.first() else {
            return Err(DbatError::Argument("empty batch".into()));
        };
        let c = first.size;
        let mut images = Vec::with_capacity(scenes.len() * 3 * c * c);
        let mut labels = Vec::with_capacity(scenes.len() * c * c);
        for s in scenes {
            if s.size != c {
                return Err(DbatError::Argument("scenes of different sizes in one batch".into()));
            }
            images.extend_from_slice(s.image.data());
            labels.extend_from_slice(&s.labels);
        }
        Ok(Self {
            images: Tensor::new([scenes.len(), 3, c, c], images)?,
            labels,
        })
    }
}

/// Scene parameters shared by every scene of a stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub crop: usize,
    pub ignore_fraction: f64,
    pub preset: Preset,
}

/// Scenes `0..count` of `step`, generated in parallel and returned in
/// index order.
pub fn generate_scenes(seed: u64, step: u64, count: usize, spec: SceneSpec) -> Result<Vec<SyntheticScene>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(scene_seed(seed, step, i), spec.num_classes, spec.crop, spec.ignore_fraction, spec.preset))
        .collect()
}

/// The training batch used at `step`.
pub fn batch_at(seed: u64, step: u64, batch_size: usize, spec: SceneSpec) -> Result<Batch> {
    Batch::from_scenes(&generate_scenes(seed, step, batch_size, spec)?)
}
