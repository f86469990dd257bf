use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::Image;
use crate::data::resize::sample_bicubic;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    Scale,
    Rotation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    Small,
    Medium,
    Large,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Small, Level::Medium, Level::Large];

    fn index(self) -> usize {
        self as usize
    }
}

macro_rules! str_enum {
    ($ty:ty, $kind:literal, $($name:literal => $v:expr),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(Error::UnknownName {
                        kind: $kind,
                        name: s.to_string(),
                        expected: [$($name),+].join(", "),
                    }),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self {
                    $(x if *x == $v => $name,)+
                    _ => unreachable!(),
                };
                f.write_str(s)
            }
        }
    };
}

str_enum!(AugmentKind, "augmentation kind", "scale" => AugmentKind::Scale, "rotation" => AugmentKind::Rotation);
str_enum!(Level, "augmentation level", "small" => Level::Small, "medium" => Level::Medium, "large" => Level::Large);

/// Magnitudes of the small/medium/large transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LevelMagnitudes {
    pub scale: [f64; 3],
    pub rotation_deg: [f64; 3],
}

impl Default for LevelMagnitudes {
    fn default() -> Self {
        Self {
            scale: [0.95, 0.85, 0.7],
            rotation_deg: [5.0, 15.0, 30.0],
        }
    }
}

/// `p ↦ A·(p − c) + c + t` on pixel-centre coordinates `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: [[f64; 2]; 2],
    pub centre: [f64; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            a: [[1.0, 0.0], [0.0, 1.0]],
            centre: [0.0, 0.0],
            t: [0.0, 0.0],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            t: [dx, dy],
            ..Self::identity()
        }
    }

    pub fn rotation(theta: f64, centre: [f64; 2]) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            a: [[c, -s], [s, c]],
            centre,
            t: [0.0, 0.0],
        }
    }

    pub fn scaling(factor: f64, centre: [f64; 2]) -> Self {
        Self {
            a: [[factor, 0.0], [0.0, factor]],
            centre,
            t: [0.0, 0.0],
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let d = [p[0] - self.centre[0], p[1] - self.centre[1]];
        [
            self.a[0][0] * d[0] + self.a[0][1] * d[1] + self.centre[0] + self.t[0],
            self.a[1][0] * d[0] + self.a[1][1] * d[1] + self.centre[1] + self.t[1],
        ]
    }

    pub fn inverse(&self) -> Result<Self> {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return Err(Error::arg("affine map is singular"));
        }
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        // p = A⁻¹(q − c − t) + c
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Ok(Self {
            a: inv,
            centre: self.centre,
            t,
        })
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn after(&self, first: &Affine) -> Affine {
        let m = |x: [[f64; 2]; 2], y: [[f64; 2]; 2]| {
            [
                [x[0][0] * y[0][0] + x[0][1] * y[1][0], x[0][0] * y[0][1] + x[0][1] * y[1][1]],
                [x[1][0] * y[0][0] + x[1][1] * y[1][0], x[1][0] * y[0][1] + x[1][1] * y[1][1]],
            ]
        };
        let a = m(self.a, first.a);
        // Express the composite about the origin: p ↦ A p + b.
        let origin = self.apply(first.apply([0.0, 0.0]));
        Affine {
            a,
            centre: [0.0, 0.0],
            t: origin,
        }
    }
}

/// Ground-truth displacement `T(p) − p` at every pixel centre.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 2]; width * height],
        }
    }

    pub fn from_affine(t: &Affine, width: usize, height: usize) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let p = [x as f64, y as f64];
                let q = t.apply(p);
                data.push([q[0] - p[0], q[1] - p[1]]);
            }
        }
        Self { width, height, data }
    }

    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|d| d[0].hypot(d[1])).fold(0.0, f64::max)
    }
}

/// Image centre in pixel-centre coordinates.
pub fn image_centre(width: usize, height: usize) -> [f64; 2] {
    [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0]
}

/// The transform of a level about the image centre; `seed` picks the
/// rotation direction.
pub fn level_transform(
    kind: AugmentKind,
    level: Level,
    magnitudes: &LevelMagnitudes,
    width: usize,
    height: usize,
    seed: u64,
) -> Affine {
    let c = image_centre(width, height);
    match kind {
        AugmentKind::Scale => Affine::scaling(magnitudes.scale[level.index()], c),
        AugmentKind::Rotation => {
            let sign = if ChaCha8Rng::seed_from_u64(seed).gen::<bool>() { 1.0 } else { -1.0 };
            Affine::rotation(sign * magnitudes.rotation_deg[level.index()].to_radians(), c)
        }
    }
}

/// Resamples `img` so that content at `p` moves to `T(p)`: output pixel `q`
/// reads the input at `T⁻¹(q)` with bicubic interpolation and clamped
/// borders.
pub fn warp_affine(img: &Image, t: &Affine) -> Result<Image> {
    let inv = t.inverse()?;
    let mut out = Image::filled(img.width, img.height, img.channels, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = inv.apply([x as f64, y as f64]);
            for c in 0..img.channels {
                out.set(x, y, c, sample_bicubic(img, p[0], p[1], c));
            }
        }
    }
    Ok(out.clamp01())
}

/// Applies a level of scale or rotation and returns the transformed image
/// with its exact flow field.
pub fn affine_augment(
    img: &Image,
    level: Level,
    kind: AugmentKind,
    magnitudes: &LevelMagnitudes,
    seed: u64,
) -> Result<(Image, FlowField)> {
    let t = level_transform(kind, level, magnitudes, img.width, img.height, seed);
    Ok((warp_affine(img, &t)?, FlowField::from_affine(&t, img.width, img.height)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_flow() {
        let f = FlowField::from_affine(&Affine::identity(), 9, 7);
        assert_eq!(f, FlowField::zeros(9, 7));
        let img = Image::from_fn(9, 7, 3, |x, y, c| ((x + y + c) % 5) as f64 / 4.0);
        assert_eq!(warp_affine(&img, &Affine::identity()).unwrap(), img);
    }

    #[test]
    fn rotation_flow_is_closed_form() {
        let theta = 0.3f64;
        let c = image_centre(16, 16);
        let f = FlowField::from_affine(&Affine::rotation(theta, c), 16, 16);
        for y in 0..16 {
            for x in 0..16 {
                let p = [x as f64 - c[0], y as f64 - c[1]];
                let rp = [theta.cos() * p[0] - theta.sin() * p[1], theta.sin() * p[0] + theta.cos() * p[1]];
                let d = f.at(x, y);
                assert!((d[0] - (rp[0] - p[0])).abs() < 1e-9 && (d[1] - (rp[1] - p[1])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inverse_composes_to_identity() {
        let c = image_centre(20, 12);
        let t = Affine::rotation(0.4, c).after(&Affine::scaling(0.85, c));
        let id = t.inverse().unwrap().after(&t);
        let f = FlowField::from_affine(&id, 20, 12);
        assert!(f.max_norm() < 1e-9);
    }

    #[test]
    fn names_parse() {
        assert_eq!("medium".parse::<Level>().unwrap(), Level::Medium);
        assert_eq!(AugmentKind::Rotation.to_string(), "rotation");
        assert!("huge".parse::<Level>().is_err());
    }
}
