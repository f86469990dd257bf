use crate::data::image::Image;
use crate::error::{ensure_arg, Result};

/// Cubic-convolution kernel parameter.
pub const CUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with parameter `a`, support `[-2, 2]`.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Normalised taps of one output sample along an axis.
#[derive(Clone, Debug)]
pub struct Taps {
    pub first: isize,
    pub weights: Vec<f64>,
}

/// Resampling taps for mapping `n_in` samples onto `n_out`, with pixel
/// centres aligned and the kernel widened by the reduction factor when
/// downsampling (antialiasing). Tap positions may fall outside the input;
/// callers clamp them to the border.
pub fn axis_taps(n_in: usize, n_out: usize) -> Vec<Taps> {
    let ratio = n_in as f64 / n_out as f64;
    let support = ratio.max(1.0);
    (0..n_out)
        .map(|o| {
            let centre = (o as f64 + 0.5) * ratio - 0.5;
            let first = (centre - 2.0 * support).floor() as isize;
            let last = (centre + 2.0 * support).ceil() as isize;
            let mut weights: Vec<f64> = (first..=last)
                .map(|i| cubic_kernel((i as f64 - centre) / support, CUBIC_A))
                .collect();
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            Taps { first, weights }
        })
        .collect()
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable bicubic resampling to `out_w × out_h`; output clamped to
/// `[0, 1]`.
pub fn bicubic_resize(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    let raw = bicubic_resize_raw(img, out_w, out_h)?;
    Ok(raw.clamp01())
}

/// [`bicubic_resize`] without the final clamp.
pub fn bicubic_resize_raw(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    ensure_arg!(
        out_w > 0 && out_h > 0,
        "resize target {out_w}x{out_h} must be positive"
    );
    ensure_arg!(
        img.width >= 1 && img.height >= 1,
        "cannot resize an empty image"
    );
    let c = img.channels;
    let xt = axis_taps(img.width, out_w);
    let yt = axis_taps(img.height, out_h);
    let mut tmp = vec![0.0; out_w * img.height * c];
    for y in 0..img.height {
        for (ox, t) in xt.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, &w) in t.weights.iter().enumerate() {
                    acc += w * img.at(clamp_index(t.first + j as isize, img.width), y, ch);
                }
                tmp[(y * out_w + ox) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; out_w * out_h * c];
    for (oy, t) in yt.iter().enumerate() {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, &w) in t.weights.iter().enumerate() {
                    let y = clamp_index(t.first + j as isize, img.height);
                    acc += w * tmp[(y * out_w + ox) * c + ch];
                }
                out[(oy * out_w + ox) * c + ch] = acc;
            }
        }
    }
    Image::new(out_w, out_h, c, out)
}

/// Bicubic interpolation of a single point (pixel-centre coordinates),
/// clamping taps at the border.
pub fn sample_bicubic(img: &Image, x: f64, y: f64, ch: usize) -> f64 {
    let (x0, y0) = (x.floor() as isize, y.floor() as isize);
    let mut acc = 0.0;
    for dy in -1..=2 {
        let wy = cubic_kernel(y - (y0 + dy) as f64, CUBIC_A);
        if wy == 0.0 {
            continue;
        }
        let yy = clamp_index(y0 + dy, img.height);
        for dx in -1..=2 {
            let wx = cubic_kernel(x - (x0 + dx) as f64, CUBIC_A);
            acc += wx * wy * img.at(clamp_index(x0 + dx, img.width), yy, ch);
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_kernel(0.0, CUBIC_A), 1.0);
        assert_eq!(cubic_kernel(1.0, CUBIC_A), 0.0);
        assert_eq!(cubic_kernel(2.0, CUBIC_A), 0.0);
        // a = -0.5 at x = 0.5: (1.5·0.5 − 2.5)·0.25 + 1
        assert!((cubic_kernel(0.5, CUBIC_A) - 0.5625).abs() < 1e-15);
        assert!((cubic_kernel(1.5, CUBIC_A) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn constant_is_preserved() {
        let img = Image::filled(12, 9, 3, 0.37);
        let out = bicubic_resize(&img, 5, 7).unwrap();
        assert!(out.data.iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn identity_extent_is_exact() {
        let img = Image::from_fn(7, 6, 1, |x, y, _| ((x * 3 + y * 5) % 7) as f64 / 7.0);
        let out = bicubic_resize(&img, 7, 6).unwrap();
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_target_is_rejected() {
        assert!(bicubic_resize(&Image::filled(4, 4, 1, 0.0), 0, 4).is_err());
    }

    #[test]
    fn point_sampling_hits_pixel_centres() {
        let img = Image::from_fn(5, 5, 1, |x, y, _| (x + 2 * y) as f64 / 20.0);
        assert!((sample_bicubic(&img, 2.0, 3.0, 0) - img.at(2, 3, 0)).abs() < 1e-15);
    }
}
