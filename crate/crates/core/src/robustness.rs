//! Correspondence read-out and the AEE robustness harness.
//!
//! A reference is produced by warping the HR image with a known affine
//! transform, so every HR pixel `p` has its true reference position
//! `p + flow(p)`. Matchers predict that position; AEE is the mean Euclidean
//! distance between prediction and truth.

use std::collections::BTreeMap;
use std::fmt;

use crate::attention::{AttentionRecord, MixOnTape};
use crate::data::{
    affine_augment, score, AugmentKind, FlowField, Image, ImagePair, Level, LevelMagnitudes, MetricOptions,
};
use crate::error::{ensure_arg, Error, Result};
use crate::model::Model;

/// Inputs of one correspondence problem.
pub struct MatchQuery<'a> {
    /// Untransformed HR image; its pixels are the query points.
    pub source: &'a Image,
    pub lr: &'a Image,
    /// Transformed copy of `source`.
    pub reference: &'a Image,
    /// Ground truth from `source` to `reference` coordinates.
    pub flow: &'a FlowField,
}

pub trait Matcher: fmt::Debug {
    fn name(&self) -> &str;

    /// Predicted reference position of every source pixel, row-major.
    fn match_points(&self, q: &MatchQuery) -> Result<Vec<[f64; 2]>>;
}

/// Ground-truth attention restricted to the `window`×`window` cell holding
/// the query: the cell pixel nearest to the true position, ties to the
/// smallest row-major index.
#[derive(Clone, Copy, Debug)]
pub struct OracleMatcher {
    pub window: usize,
}

impl Matcher for OracleMatcher {
    fn name(&self) -> &str {
        "oracle"
    }

    fn match_points(&self, q: &MatchQuery) -> Result<Vec<[f64; 2]>> {
        let (w, h) = (q.source.width, q.source.height);
        ensure_arg!(self.window > 0, "oracle window must be positive");
        ensure_arg!(
            q.flow.width == w && q.flow.height == h,
            "flow field does not match the source extent"
        );
        let k = self.window;
        let (rw, rh) = (q.reference.width, q.reference.height);
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let f = q.flow.at(x, y);
                let target = [x as f64 + f[0], y as f64 + f[1]];
                let (cx, cy) = ((x / k) * k, (y / k) * k);
                let mut best = (f64::INFINITY, [0.0, 0.0]);
                for v in cy..(cy + k).min(rh) {
                    for u in cx..(cx + k).min(rw) {
                        let d = (u as f64 - target[0]).hypot(v as f64 - target[1]);
                        if d < best.0 {
                            best = (d, [u as f64, v as f64]);
                        }
                    }
                }
                ensure_arg!(best.0.is_finite(), "window cell at ({x}, {y}) lies outside the reference");
                out.push(best.1);
            }
        }
        Ok(out)
    }
}

/// Brute-force patch matching: the position within `search` pixels whose
/// `(2·half+1)²` neighbourhood has the smallest sum of squared differences
/// (clamped borders), ties to the smallest row-major index.
#[derive(Clone, Copy, Debug)]
pub struct PatchMatcher {
    pub search: usize,
    pub half: usize,
}

impl Default for PatchMatcher {
    fn default() -> Self {
        Self { search: 8, half: 2 }
    }
}

impl Matcher for PatchMatcher {
    fn name(&self) -> &str {
        "patch"
    }

    fn match_points(&self, q: &MatchQuery) -> Result<Vec<[f64; 2]>> {
        let (s, r) = (q.source, q.reference);
        ensure_arg!(s.channels == r.channels, "source and reference channel counts differ");
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let hf = self.half as isize;
        let ssd = |px: usize, py: usize, qx: usize, qy: usize| -> f64 {
            let mut acc = 0.0;
            for dy in -hf..=hf {
                for dx in -hf..=hf {
                    let (sx, sy) = (clamp(px as isize + dx, s.width), clamp(py as isize + dy, s.height));
                    let (tx, ty) = (clamp(qx as isize + dx, r.width), clamp(qy as isize + dy, r.height));
                    for c in 0..s.channels {
                        let d = s.at(sx, sy, c) - r.at(tx, ty, c);
                        acc += d * d;
                    }
                }
            }
            acc
        };
        let mut out = Vec::with_capacity(s.width * s.height);
        let rad = self.search as isize;
        for y in 0..s.height {
            for x in 0..s.width {
                let y0 = (y as isize - rad).max(0) as usize;
                let y1 = ((y as isize + rad) as usize).min(r.height - 1);
                let x0 = (x as isize - rad).max(0) as usize;
                let x1 = ((x as isize + rad) as usize).min(r.width - 1);
                let mut best = (f64::INFINITY, [x as f64, y as f64]);
                for v in y0..=y1 {
                    for u in x0..=x1 {
                        let d = ssd(x, y, u, v);
                        if d < best.0 {
                            best = (d, [u as f64, v as f64]);
                        }
                    }
                }
                out.push(best.1);
            }
        }
        Ok(out)
    }
}

/// Reads correspondences from the model's finest-stage cross-attention:
/// per-head window weights are averaged over heads into one score per
/// (query, key) token, and the query maps to its highest-scoring key (ties
/// to the smallest token index).
pub struct ModelMatcher<'m, T: MixOnTape> {
    pub model: &'m Model<T>,
}

impl<T: MixOnTape> fmt::Debug for ModelMatcher<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelMatcher").field("ablation", &self.model.config.ablation).finish()
    }
}

impl<'m, T: MixOnTape> ModelMatcher<'m, T> {
    pub fn new(model: &'m Model<T>) -> Result<Self> {
        if !model.mixer.uses_cross() {
            return Err(Error::UnsupportedMode(format!(
                "ablation `{}` has no cross-attention branch to read correspondences from",
                model.config.ablation
            )));
        }
        Ok(Self { model })
    }
}

/// Best key token per query token from head-averaged attention records.
pub fn attention_argmax(records: &[AttentionRecord], n_heads: usize) -> Result<Vec<usize>> {
    let first = records.first().ok_or_else(|| Error::arg("no attention was recorded"))?;
    let tokens = first.height * first.width;
    let mut scores: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); tokens];
    let inv = 1.0 / n_heads as f64;
    for rec in records {
        let l = rec.window * rec.window;
        let n_windows = tokens / l;
        let w = rec.weights.data();
        for hi in 0..rec.heads.len() {
            for win in 0..n_windows {
                for r in 0..l {
                    let qi = rec.token_of(win, r);
                    let base = ((hi * n_windows + win) * l + r) * l;
                    for c in 0..l {
                        *scores[qi].entry(rec.token_of(win, c)).or_insert(0.0) += inv * w[base + c];
                    }
                }
            }
        }
    }
    Ok(scores
        .iter()
        .map(|m| {
            m.iter()
                .fold((usize::MAX, f64::NEG_INFINITY), |best, (&k, &s)| if s > best.1 { (k, s) } else { best })
                .0
        })
        .collect())
}

impl<T: MixOnTape> Matcher for ModelMatcher<'_, T> {
    fn name(&self) -> &str {
        "model"
    }

    fn match_points(&self, q: &MatchQuery) -> Result<Vec<[f64; 2]>> {
        let m = self.model.config.output_extent();
        ensure_arg!(
            q.source.width == m && q.source.height == m,
            "source {}x{} does not match the model output extent {m}",
            q.source.width,
            q.source.height
        );
        let mut trace = Vec::new();
        let (_, geometry) = self.model.predict_traced(q.lr, q.reference, Some(&mut trace))?;
        let best = attention_argmax(&trace, self.model.config.num_heads)?;
        let g = geometry.last().expect("one crop per stage");
        Ok(best
            .into_iter()
            .map(|t| g.to_reference((t % m) as f64, (t / m) as f64))
            .collect())
    }
}

/// Mean distance between predicted and true reference positions.
pub fn correspondence_aee(matcher: &dyn Matcher, q: &MatchQuery) -> Result<f64> {
    let pred = matcher.match_points(q)?;
    let (w, h) = (q.source.width, q.source.height);
    ensure_arg!(pred.len() == w * h, "matcher returned {} points for {} pixels", pred.len(), w * h);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let f = q.flow.at(x, y);
            let p = pred[y * w + x];
            total += (p[0] - x as f64 - f[0]).hypot(p[1] - y as f64 - f[1]);
        }
    }
    Ok(total / (w * h) as f64)
}

/// `None` is the identity anchor (level 0).
pub type LevelChoice = Option<Level>;

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub kind: AugmentKind,
    /// 0 for the identity, 1..=3 for small/medium/large.
    pub level: usize,
    pub label: String,
    /// Scale factor or rotation angle in degrees.
    pub magnitude: f64,
    pub matcher: String,
    pub aee: f64,
    /// Mean Y-PSNR of the model with the transformed reference.
    pub psnr: Option<f64>,
}

pub const ROBUSTNESS_HEADER: &str = "kind\tlevel\tlabel\tmagnitude\tmatcher\taee\tpsnr";

impl RobustnessRow {
    pub fn to_tsv(&self) -> String {
        let psnr = self.psnr.map_or_else(|| "nan".to_string(), |p| format!("{p:.4}"));
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{psnr}",
            self.kind, self.level, self.label, self.magnitude, self.matcher, self.aee
        )
    }
}

pub struct RobustnessOptions<'a> {
    pub kinds: Vec<AugmentKind>,
    pub levels: Vec<Level>,
    pub magnitudes: &'a LevelMagnitudes,
    pub metrics: &'a MetricOptions,
    pub seed: u64,
}

/// AEE (and model PSNR when a model is given) per kind and level, with the
/// identity prepended as level 0. Every pair's HR image is the source and
/// its transformed copy the reference.
pub fn robustness<T: MixOnTape>(
    pairs: &[ImagePair],
    matchers: &[&dyn Matcher],
    model: Option<&Model<T>>,
    opts: &RobustnessOptions,
) -> Result<Vec<RobustnessRow>> {
    ensure_arg!(!pairs.is_empty(), "robustness needs at least one image pair");
    let mut rows = Vec::new();
    for &kind in &opts.kinds {
        let levels = std::iter::once(None).chain(opts.levels.iter().copied().map(Some));
        for level in levels {
            let mut aee = vec![0.0; matchers.len()];
            let mut psnr = 0.0;
            for (i, pair) in pairs.iter().enumerate() {
                let (reference, flow) = match level {
                    None => (pair.hr.clone(), FlowField::zeros(pair.hr.width, pair.hr.height)),
                    Some(l) => affine_augment(&pair.hr, l, kind, opts.magnitudes, opts.seed.wrapping_add(i as u64))?,
                };
                let q = MatchQuery {
                    source: &pair.hr,
                    lr: &pair.lr,
                    reference: &reference,
                    flow: &flow,
                };
                for (acc, m) in aee.iter_mut().zip(matchers) {
                    *acc += correspondence_aee(*m, &q)?;
                }
                if let Some(model) = model {
                    let sr = model.predict(&pair.lr, &reference)?;
                    psnr += score(&sr, &pair.hr, opts.metrics)?.psnr;
                }
            }
            let n = pairs.len() as f64;
            let (index, label, magnitude) = match level {
                None => (0, "identity".to_string(), if kind == AugmentKind::Scale { 1.0 } else { 0.0 }),
                Some(l) => {
                    let i = Level::ALL.iter().position(|x| *x == l).expect("known level");
                    let mag = match kind {
                        AugmentKind::Scale => opts.magnitudes.scale[i],
                        AugmentKind::Rotation => opts.magnitudes.rotation_deg[i],
                    };
                    (i + 1, l.to_string(), mag)
                }
            };
            for (m, total) in matchers.iter().zip(aee) {
                rows.push(RobustnessRow {
                    kind,
                    level: index,
                    label: label.clone(),
                    magnitude,
                    matcher: m.name().to_string(),
                    aee: total / n,
                    psnr: model.map(|_| psnr / n),
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_texture, warp_affine, Affine};

    fn query_parts(img: &Image, t: &Affine) -> (Image, FlowField) {
        (warp_affine(img, t).unwrap(), FlowField::from_affine(t, img.width, img.height))
    }

    #[test]
    fn oracle_is_exact_at_identity() {
        let img = synthetic_texture(32, 32, 1);
        let flow = FlowField::zeros(32, 32);
        let q = MatchQuery {
            source: &img,
            lr: &img,
            reference: &img,
            flow: &flow,
        };
        assert_eq!(correspondence_aee(&OracleMatcher { window: 8 }, &q).unwrap(), 0.0);
    }

    #[test]
    fn oracle_ties_go_to_the_smallest_index() {
        // Target exactly between columns 0 and 1 of the cell.
        let img = Image::filled(4, 4, 3, 0.5);
        let mut flow = FlowField::zeros(4, 4);
        flow.data[0] = [0.5, 0.0];
        let q = MatchQuery {
            source: &img,
            lr: &img,
            reference: &img,
            flow: &flow,
        };
        let p = OracleMatcher { window: 4 }.match_points(&q).unwrap();
        assert_eq!(p[0], [0.0, 0.0]);
    }

    #[test]
    fn patch_matcher_recovers_a_translation() {
        let img = synthetic_texture(32, 32, 9);
        let (reference, flow) = query_parts(&img, &Affine::translation(5.0, 0.0));
        let q = MatchQuery {
            source: &img,
            lr: &img,
            reference: &reference,
            flow: &flow,
        };
        let pts = PatchMatcher::default().match_points(&q).unwrap();
        // Only targets whose patch lies fully inside the reference are
        // recoverable.
        let mut err = 0.0;
        let mut n = 0;
        for y in 3..29 {
            for x in 3..24 {
                let p = pts[y * 32 + x];
                err += ((p[0] - (x as f64 + 5.0)).powi(2) + (p[1] - y as f64).powi(2)).sqrt();
                n += 1;
            }
        }
        assert!(err / (n as f64) < 0.1, "interior aee {}", err / n as f64);
    }

    #[test]
    fn attention_argmax_breaks_ties_low() {
        use crate::attention::Partition;
        use crate::numerics::Tensor;
        let k = 2;
        let rec = AttentionRecord {
            partition: Partition::Local,
            heads: vec![0],
            weights: Tensor::full([1, 4, 4, 4], 0.25),
            height: 4,
            width: 4,
            window: k,
        };
        let best = attention_argmax(&[rec.clone()], 1).unwrap();
        for (q, &b) in best.iter().enumerate() {
            let (x, y) = (q % 4, q / 4);
            assert_eq!(b, (y / k) * k * 4 + (x / k) * k);
        }
    }
}
