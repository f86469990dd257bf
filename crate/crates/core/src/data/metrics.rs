use serde::{Deserialize, Serialize};

use crate::data::image::Image;
use crate::error::{ensure_arg, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// BT.601 studio-range luma of a full-range RGB image.
pub fn rgb_to_y(img: &Image) -> Result<Image> {
    ensure_arg!(img.channels == 3, "luma needs an RGB image, got {} channels", img.channels);
    let data = img
        .data
        .chunks(3)
        .map(|p| (16.0 + 65.481 * p[0] + 128.553 * p[1] + 24.966 * p[2]) / 255.0)
        .collect();
    Image::new(img.width, img.height, 1, data)
}

/// `10·log10(peak²/MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    ensure_arg!(
        a.same_extent(b),
        "PSNR inputs {}x{}x{} and {}x{}x{} differ",
        a.width,
        a.height,
        a.channels,
        b.width,
        b.height,
        b.channels
    );
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalised 1-D Gaussian of `SSIM_WINDOW` taps.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable Gaussian filtering of a single-channel plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let n = SSIM_WINDOW;
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of two single-channel images over all valid
/// 11×11 Gaussian windows (σ = 1.5), for data in `[0, peak]`.
pub fn ssim(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    ensure_arg!(
        a.same_extent(b) && a.channels == 1,
        "SSIM needs two single-channel images of equal extent"
    );
    ensure_arg!(
        a.width >= SSIM_WINDOW && a.height >= SSIM_WINDOW,
        "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
        a.width,
        a.height
    );
    let g = gaussian_taps();
    let (w, h) = (a.width, a.height);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(&a.data, w, h, &g);
    let mu_b = filter_valid(&b.data, w, h, &g);
    let aa = filter_valid(&prod(&|x, _| x * x), w, h, &g);
    let bb = filter_valid(&prod(&|_, y| y * y), w, h, &g);
    let ab = filter_valid(&prod(&|x, y| x * y), w, h, &g);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// How SR outputs are compared against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    /// Pixels removed from every edge before scoring.
    pub border: usize,
    /// Score the luma channel rather than RGB.
    pub luma: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { border: 4, luma: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
}

/// Clamps `sr`, converts both images per `opts`, crops the border and scores.
pub fn score(sr: &Image, hr: &Image, opts: &MetricOptions) -> Result<Scores> {
    ensure_arg!(
        sr.same_extent(hr),
        "SR output {}x{} does not match ground truth {}x{}",
        sr.width,
        sr.height,
        hr.width,
        hr.height
    );
    let prep = |img: &Image| -> Result<Image> {
        let img = img.clamp01();
        let img = if opts.luma { rgb_to_y(&img)? } else { img };
        let b = opts.border;
        ensure_arg!(
            img.width > 2 * b && img.height > 2 * b,
            "border {b} leaves nothing of a {}x{} image",
            img.width,
            img.height
        );
        img.crop(b, b, img.width - 2 * b, img.height - 2 * b)
    };
    let (a, b) = (prep(sr)?, prep(hr)?);
    let p = psnr(&a, &b, 1.0)?;
    let s = if a.channels == 1 {
        ssim(&a, &b, 1.0)?
    } else {
        let mut acc = 0.0;
        for c in 0..a.channels {
            let pick = |img: &Image| Image::from_fn(img.width, img.height, 1, |x, y, _| img.at(x, y, c));
            acc += ssim(&pick(&a), &pick(&b), 1.0)?;
        }
        acc / a.channels as f64
    };
    Ok(Scores { psnr: p, ssim: s })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_endpoints() {
        let black = rgb_to_y(&Image::filled(1, 1, 3, 0.0)).unwrap();
        let white = rgb_to_y(&Image::filled(1, 1, 3, 1.0)).unwrap();
        assert!((black.data[0] - 16.0 / 255.0).abs() < 1e-12);
        assert!((white.data[0] - 235.0 / 255.0).abs() < 1e-12);
        let g = rgb_to_y(&Image::new(1, 1, 3, vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
        let b = rgb_to_y(&Image::new(1, 1, 3, vec![0.0, 0.0, 1.0]).unwrap()).unwrap();
        assert!(g.data[0] > b.data[0]);
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, 1, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, 1, 0.5 + 16.0 / 255.0);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 10.0 * (1.0 / (16.0f64 / 255.0).powi(2)).log10()).abs() < 1e-9);
        assert!((p - 24.048).abs() < 1e-3);
        let c = Image::filled(4, 4, 1, 0.5 + 8.0 / 255.0);
        assert!((psnr(&a, &c, 1.0).unwrap() - p - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert!(psnr(&a, &Image::filled(3, 4, 1, 0.0), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_size_guard() {
        let a = Image::from_fn(16, 16, 1, |x, y, _| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        let small = Image::filled(10, 16, 1, 0.0);
        assert!(ssim(&small, &small, 1.0).is_err());
    }

    #[test]
    fn gaussian_taps_sum_to_one() {
        let g = gaussian_taps();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
    }
}
