//! Procedural RGB textures used as fixtures and toy training data.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::{ImagePair, SCALE};
use crate::data::image::Image;
use crate::error::Result;

/// Sum of random oriented gratings plus a few hard-edged discs, scaled into
/// `[0.05, 0.95]`.
pub fn synthetic_texture(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Grating {
        fx: f64,
        fy: f64,
        phase: f64,
        colour: [f64; 3],
    }
    let gratings: Vec<Grating> = (0..6)
        .map(|_| {
            let f = rng.gen_range(0.04..0.3);
            let angle = rng.gen_range(0.0..TAU);
            Grating {
                fx: f * angle.cos(),
                fy: f * angle.sin(),
                phase: rng.gen_range(0.0..TAU),
                colour: [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)],
            }
        })
        .collect();
    let discs: Vec<([f64; 2], f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                [rng.gen_range(0.0..width as f64), rng.gen_range(0.0..height as f64)],
                rng.gen_range(2.0..(width.min(height) as f64 / 3.0).max(3.0)),
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            )
        })
        .collect();
    let raw = Image::from_fn(width, height, 3, |x, y, c| {
        let (xf, yf) = (x as f64, y as f64);
        let mut v: f64 = gratings
            .iter()
            .map(|g| g.colour[c] * (TAU * (g.fx * xf + g.fy * yf) + g.phase).sin())
            .sum();
        for (centre, r, colour) in &discs {
            if (xf - centre[0]).hypot(yf - centre[1]) < *r {
                v += 1.5 * colour[c];
            }
        }
        v
    });
    let (lo, hi) = raw
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-12);
    Image {
        data: raw.data.iter().map(|v| 0.05 + 0.9 * (v - lo) / span).collect(),
        ..raw
    }
}

/// `count` self-referenced pairs of `4·lr_size`-pixel textures.
pub fn synthetic_pairs(count: usize, lr_size: usize, seed: u64) -> Result<Vec<ImagePair>> {
    (0..count)
        .map(|i| {
            let hr = synthetic_texture(SCALE * lr_size, SCALE * lr_size, seed.wrapping_add(i as u64));
            ImagePair::from_hr(format!("synth{i:03}"), hr.clone(), hr)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_is_deterministic_and_bounded() {
        let a = synthetic_texture(24, 16, 5);
        assert_eq!(a, synthetic_texture(24, 16, 5));
        assert_ne!(a, synthetic_texture(24, 16, 6));
        assert!(a.data.iter().all(|&v| (0.05 - 1e-12..=0.95 + 1e-12).contains(&v)));
    }
}
