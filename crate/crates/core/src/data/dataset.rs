use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::Image;
use crate::data::resize::bicubic_resize;
use crate::error::{ensure_arg, Error, Result};

pub const SCALE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Degradation {
    pub factor: usize,
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bicubic-x{}", self.factor)
    }
}

impl FromStr for Degradation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix("bicubic-x")
            .and_then(|f| f.parse().ok())
            .map(|factor| Degradation { factor })
            .ok_or_else(|| Error::arg(format!("unrecognised degradation record `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub name: String,
    pub lr: Image,
    pub reference: Image,
    pub hr: Image,
    pub degradation: Degradation,
}

impl ImagePair {
    pub fn new(name: impl Into<String>, lr: Image, reference: Image, hr: Image, factor: usize) -> Result<Self> {
        let name = name.into();
        ensure_arg!(
            hr.width == factor * lr.width && hr.height == factor * lr.height,
            "pair `{name}`: HR {}x{} is not {factor}x LR {}x{}",
            hr.width,
            hr.height,
            lr.width,
            lr.height
        );
        Ok(Self {
            name,
            lr,
            reference,
            hr,
            degradation: Degradation { factor },
        })
    }

    /// Pair whose LR input is the bicubic reduction of `hr`.
    pub fn from_hr(name: impl Into<String>, hr: Image, reference: Image) -> Result<Self> {
        let lr = degrade(&hr, SCALE)?;
        Self::new(name, lr, reference, hr, SCALE)
    }
}

/// Bicubic ×`factor` reduction.
pub fn degrade(hr: &Image, factor: usize) -> Result<Image> {
    ensure_arg!(
        hr.width % factor == 0 && hr.height % factor == 0,
        "HR extent {}x{} is not divisible by {factor}",
        hr.width,
        hr.height
    );
    bicubic_resize(hr, hr.width / factor, hr.height / factor)
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub lr: PathBuf,
    pub reference: PathBuf,
    pub hr: PathBuf,
    pub degradation: Degradation,
    pub seed: u64,
    /// Source region kept from the original HR image, `x,y,w,h`, plus the
    /// resampled extent when it differs.
    pub crop: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_HEADER: &str = "name\tlr\tref\thr\tdegradation\tseed\tcrop";

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.name,
                e.lr.display(),
                e.reference.display(),
                e.hr.display(),
                e.degradation,
                e.seed,
                e.crop
            ));
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or_default();
        if header != MANIFEST_HEADER {
            return Err(Error::Config {
                location: format!("{}:1", origin.display()),
                message: format!("expected header `{MANIFEST_HEADER}`"),
            });
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Config {
                location: format!("{}:{}", origin.display(), i + 1),
                message,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 fields, found {}", f.len())));
            }
            entries.push(ManifestEntry {
                name: f[0].to_string(),
                lr: f[1].into(),
                reference: f[2].into(),
                hr: f[3].into(),
                degradation: f[4].parse().map_err(|e: Error| bad(e.to_string()))?,
                seed: f[5].parse().map_err(|_| bad(format!("seed `{}` is not an integer", f[5])))?,
                crop: f[6].to_string(),
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    /// Loads every pair, resolving paths against `root`.
    pub fn load_pairs(&self, root: &Path) -> Result<Vec<ImagePair>> {
        self.entries
            .iter()
            .map(|e| {
                ImagePair::new(
                    e.name.clone(),
                    Image::read_png(&root.join(&e.lr))?,
                    Image::read_png(&root.join(&e.reference))?,
                    Image::read_png(&root.join(&e.hr))?,
                    e.degradation.factor,
                )
            })
            .collect()
    }
}

/// How each HR image is paired with a reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefPolicy {
    /// The HR image is its own reference.
    #[serde(rename = "self")]
    SelfRef,
    /// A seeded derangement pairs each image with another one.
    Shuffle,
}

impl FromStr for RefPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Self::SelfRef),
            "shuffle" => Ok(Self::Shuffle),
            _ => Err(Error::UnknownName {
                kind: "reference policy",
                name: s.into(),
                expected: "self, shuffle".into(),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PrepareOptions {
    pub seed: u64,
    pub ref_policy: RefPolicy,
    /// Centre-crop to a square and resample so the LR side equals this.
    pub lr_size: Option<usize>,
}

#[derive(Debug)]
pub struct PrepareReport {
    pub manifest: Manifest,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Largest extent not exceeding `n` that is a multiple of `m`.
pub fn floor_multiple(n: usize, m: usize) -> usize {
    n - n % m
}

fn centre_crop(img: &Image, w: usize, h: usize) -> Result<(Image, String)> {
    let (x0, y0) = ((img.width - w) / 2, (img.height - h) / 2);
    Ok((img.crop(x0, y0, w, h)?, format!("{x0},{y0},{w},{h}")))
}

/// Reads every PNG in `hr_dir` (sorted by file name), crops it to a valid
/// extent, writes `hr/` and `lr/` images plus `manifest.tsv` into
/// `out_dir`. Unreadable images are skipped and reported.
pub fn prepare_dataset(hr_dir: &Path, out_dir: &Path, opts: &PrepareOptions) -> Result<PrepareReport> {
    let mut sources: Vec<PathBuf> = fs::read_dir(hr_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    sources.sort();
    ensure_arg!(!sources.is_empty(), "no PNG images in {}", hr_dir.display());
    fs::create_dir_all(out_dir.join("hr"))?;
    fs::create_dir_all(out_dir.join("lr"))?;
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for src in sources {
        let img = match Image::read_png(&src) {
            Ok(img) => img,
            Err(e) => {
                skipped.push((src, e.to_string()));
                continue;
            }
        };
        let prepared = match opts.lr_size {
            Some(n) => {
                let side = img.width.min(img.height);
                centre_crop(&img, side, side).and_then(|(c, region)| {
                    let target = n * SCALE;
                    if side == target {
                        Ok((c, region))
                    } else {
                        Ok((bicubic_resize(&c, target, target)?, format!("{region}->{target}x{target}")))
                    }
                })
            }
            None => {
                let (w, h) = (floor_multiple(img.width, SCALE), floor_multiple(img.height, SCALE));
                if w == 0 || h == 0 {
                    Err(Error::arg(format!("{}x{} is smaller than {SCALE}", img.width, img.height)))
                } else {
                    centre_crop(&img, w, h)
                }
            }
        };
        match prepared {
            Ok((hr, crop)) => {
                let name = src.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                kept.push((name, hr, crop));
            }
            Err(e) => skipped.push((src, e.to_string())),
        }
    }
    if kept.is_empty() {
        return Err(Error::arg(format!("none of the images in {} could be prepared", hr_dir.display())));
    }
    let refs: Vec<usize> = match opts.ref_policy {
        RefPolicy::SelfRef => (0..kept.len()).collect(),
        RefPolicy::Shuffle => derangement(kept.len(), opts.seed),
    };
    let mut entries = Vec::with_capacity(kept.len());
    for (name, hr, _) in &kept {
        let lr = degrade(hr, SCALE)?;
        hr.write_png(&out_dir.join("hr").join(format!("{name}.png")))?;
        lr.write_png(&out_dir.join("lr").join(format!("{name}.png")))?;
    }
    for (i, (name, _, crop)) in kept.iter().enumerate() {
        entries.push(ManifestEntry {
            name: name.clone(),
            lr: PathBuf::from("lr").join(format!("{name}.png")),
            reference: PathBuf::from("hr").join(format!("{}.png", kept[refs[i]].0)),
            hr: PathBuf::from("hr").join(format!("{name}.png")),
            degradation: Degradation { factor: SCALE },
            seed: opts.seed,
            crop: crop.clone(),
        });
    }
    let manifest = Manifest { entries };
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(PrepareReport { manifest, skipped })
}

/// Seeded permutation without fixed points (identity for a single item).
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    if n < 2 {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    // A cyclic successor over a random order never maps an item to itself.
    let mut out = vec![0; n];
    for i in 0..n {
        out[order[i]] = order[(i + 1) % n];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derangement_has_no_fixed_points() {
        for seed in 0..20 {
            let d = derangement(7, seed);
            assert!(d.iter().enumerate().all(|(i, &j)| i != j));
            let mut s = d.clone();
            s.sort();
            assert_eq!(s, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            entries: vec![ManifestEntry {
                name: "a".into(),
                lr: "lr/a.png".into(),
                reference: "hr/b.png".into(),
                hr: "hr/a.png".into(),
                degradation: Degradation { factor: 4 },
                seed: 9,
                crop: "1,0,64,64".into(),
            }],
        };
        assert_eq!(Manifest::parse(&m.to_tsv(), Path::new("m.tsv")).unwrap(), m);
        assert!(Manifest::parse("bad\n", Path::new("m.tsv")).is_err());
    }

    #[test]
    fn pair_extent_is_checked() {
        let lr = Image::filled(4, 4, 3, 0.0);
        assert!(ImagePair::new("x", lr.clone(), lr.clone(), Image::filled(15, 16, 3, 0.0), 4).is_err());
        assert!(ImagePair::new("x", lr.clone(), lr, Image::filled(16, 16, 3, 0.0), 4).is_ok());
    }
}
