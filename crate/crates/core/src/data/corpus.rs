//! Seeded procedural shapes standing in for natural-image frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Image;
use crate::error::{Error, Result};

pub const NOISE_SIGMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Disk,
    HollowSquare,
    Cross,
    Stripes,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Disk,
        ShapeClass::HollowSquare,
        ShapeClass::Cross,
        ShapeClass::Stripes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disk => "filled_disk",
            ShapeClass::HollowSquare => "hollow_square",
            ShapeClass::Cross => "diagonal_cross",
            ShapeClass::Stripes => "horizontal_stripes",
        }
    }
}

/// Placement of one shape. `scale` multiplies the class's base extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeParams {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub intensity: f64,
}

impl ShapeParams {
    pub fn centered(width: usize, height: usize) -> Self {
        Self {
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            scale: 1.0,
            intensity: 1.0,
        }
    }

    fn jittered(rng: &mut impl Rng, width: usize, height: usize) -> Self {
        let m = width.min(height) as f64;
        let shift = 0.1 * m;
        Self {
            cx: width as f64 / 2.0 + rng.random_range(-shift..=shift),
            cy: height as f64 / 2.0 + rng.random_range(-shift..=shift),
            scale: rng.random_range(0.85..=1.15),
            intensity: rng.random_range(0.7..=1.0),
        }
    }
}

/// Noise-free rendering; pixel `(x, y)` is sampled at its center.
pub fn render_shape(class: ShapeClass, p: &ShapeParams, width: usize, height: usize) -> Vec<f64> {
    let m = width.min(height) as f64;
    let thickness = (0.1 * m).max(1.0);
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let dx = x as f64 + 0.5 - p.cx;
            let dy = y as f64 + 0.5 - p.cy;
            let inside = match class {
                ShapeClass::Disk => {
                    let r = 0.3 * m * p.scale;
                    dx * dx + dy * dy <= r * r
                }
                ShapeClass::HollowSquare => {
                    let a = 0.32 * m * p.scale;
                    let inner = a - thickness;
                    dx.abs() <= a && dy.abs() <= a && !(dx.abs() < inner && dy.abs() < inner)
                }
                ShapeClass::Cross => {
                    let a = 0.36 * m * p.scale;
                    dx.abs() <= a
                        && dy.abs() <= a
                        && ((dx - dy).abs() <= thickness || (dx + dy).abs() <= thickness)
                }
                ShapeClass::Stripes => {
                    let a = 0.38 * m * p.scale;
                    let period = (0.2 * m * p.scale).max(2.0);
                    dx.abs() <= a && dy.abs() <= a && ((dy + a) / period).floor() as i64 % 2 == 0
                }
            };
            if inside {
                out[y * width + x] = p.intensity;
            }
        }
    }
    out
}

/// Derives an independent per-item seed (SplitMix64 finalizer over the pair).
pub fn child_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        ^ index
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Class-balanced labeled shapes: sample `i` has label `i % classes`.
pub fn procedural_corpus(
    seed: u64,
    count: usize,
    classes: usize,
    width: usize,
    height: usize,
) -> Result<Vec<(Image, usize)>> {
    if classes == 0 || classes > ShapeClass::ALL.len() {
        return Err(Error::BadConfig(format!(
            "classes must be in 1..={}, got {classes}",
            ShapeClass::ALL.len()
        )));
    }
    if count < classes {
        return Err(Error::BadConfig(format!(
            "count ({count}) must be at least the class count ({classes})"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::BadConfig(format!("bad image size {width}x{height}")));
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    (0..count)
        .map(|i| {
            let label = i % classes;
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, i as u64));
            let params = ShapeParams::jittered(&mut rng, width, height);
            let mut px = render_shape(ShapeClass::ALL[label], &params, width, height);
            for v in px.iter_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            Ok((Image::new(width, height, px)?, label))
        })
        .collect()
}
