use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{ensure_arg, Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Interleaved (HWC) image with samples nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure_arg!(
            width > 0 && height > 0 && channels > 0,
            "image extents must be positive ({width}x{height}x{channels})"
        );
        ensure_arg!(
            data.len() == width * height * channels,
            "image {width}x{height}x{channels} needs {} samples, got {}",
            width * height * channels,
            data.len()
        );
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_extent(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        ensure_arg!(
            w > 0 && h > 0 && x0 + w <= self.width && y0 + h <= self.height,
            "crop ({x0},{y0}) {w}x{h} exceeds {}x{} image",
            self.width,
            self.height
        );
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(Image {
            width: w,
            height: h,
            channels: self.channels,
            data,
        })
    }

    pub fn clamp01(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.width, self.height, self.channels, |x, y, c| {
            self.at(self.width - 1 - x, y, c)
        })
    }

    /// Pixels as a `[height*width, channels]` token tensor.
    pub fn to_tokens<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![self.width * self.height, self.channels],
            self.data.iter().map(|&v| T::lit(v)).collect(),
        )
    }

    pub fn from_tokens<T: Scalar>(t: &Tensor<T>, width: usize, height: usize) -> Result<Image> {
        ensure_arg!(
            t.ndim() == 2 && t.rows() == width * height,
            "token tensor {:?} is not a {width}x{height} map",
            t.shape()
        );
        Image::new(width, height, t.cols(), t.data().iter().map(|v| v.as_f64()).collect())
    }

    /// Reads an 8-bit RGB or RGBA PNG (alpha dropped); gray images are
    /// expanded to three channels.
    pub fn read_png(path: &Path) -> Result<Image> {
        let img_err = |message: String| Error::Image {
            path: path.to_path_buf(),
            message,
        };
        let decoder = png::Decoder::new(File::open(path)?);
        let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(img_err(format!("unsupported bit depth {:?}", info.bit_depth)));
        }
        let src_ch = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            other => return Err(img_err(format!("unsupported color type {other:?}"))),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            let row = &buf[y * info.line_size..];
            for x in 0..w {
                let px = &row[x * src_ch..(x + 1) * src_ch];
                if src_ch >= 3 {
                    data.extend(px[..3].iter().map(|&v| v as f64 / 255.0));
                } else {
                    data.extend([px[0] as f64 / 255.0; 3]);
                }
            }
        }
        Image::new(w, h, 3, data)
    }

    /// Writes an 8-bit RGB (or gray, for one channel) PNG, rounding clamped
    /// samples to the nearest code value.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => {
                return Err(Error::Image {
                    path: path.to_path_buf(),
                    message: format!("cannot encode {c}-channel image"),
                })
            }
        };
        let mut encoder = png::Encoder::new(
            BufWriter::new(File::create(path)?),
            self.width as u32,
            self.height as u32,
        );
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let map = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut writer = encoder.write_header().map_err(map)?;
        writer.write_image_data(&bytes).map_err(map)?;
        writer.finish().map_err(map)?;
        Ok(())
    }

    /// Rounds every sample to the 8-bit grid, matching a PNG round trip.
    pub fn quantize_u8(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::from_fn(7, 5, 3, |x, y, c| ((x * 31 + y * 17 + c * 5) % 256) as f64 / 255.0);
        img.write_png(&path).unwrap();
        let back = Image::read_png(&path).unwrap();
        assert_eq!(back, img);
        let bytes = std::fs::read(&path).unwrap();
        back.write_png(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn crop_bounds() {
        let img = Image::filled(4, 4, 3, 0.5);
        assert!(img.crop(1, 1, 3, 3).is_ok());
        assert!(img.crop(2, 2, 3, 3).is_err());
    }
}
