//! Scoring trained models against ground truth and the bicubic baseline.

use crate::attention::MixOnTape;
use crate::data::{bicubic_resize, score, ImagePair, MetricOptions, Scores};
use crate::error::Result;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct PairScores {
    pub name: String,
    pub model: Scores,
    pub bicubic: Scores,
}

/// Mean scores over a set of pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub pairs: Vec<PairScores>,
    pub model: Scores,
    pub bicubic: Scores,
}

impl EvalSummary {
    pub fn psnr_gain(&self) -> f64 {
        self.model.psnr - self.bicubic.psnr
    }
}

/// Bicubic ×`factor` upsampling of the LR input, scored against the HR.
pub fn bicubic_baseline(pair: &ImagePair, opts: &MetricOptions) -> Result<Scores> {
    let up = bicubic_resize(&pair.lr, pair.hr.width, pair.hr.height)?;
    score(&up, &pair.hr, opts)
}

fn mean(scores: impl Iterator<Item = Scores> + Clone) -> Scores {
    let n = scores.clone().count().max(1) as f64;
    let (p, s) = scores.fold((0.0, 0.0), |(p, s), x| (p + x.psnr, s + x.ssim));
    Scores {
        psnr: p / n,
        ssim: s / n,
    }
}

pub fn evaluate<T: MixOnTape>(model: &Model<T>, pairs: &[ImagePair], opts: &MetricOptions) -> Result<EvalSummary> {
    let rows = pairs
        .iter()
        .map(|p| {
            let sr = model.predict(&p.lr, &p.reference)?;
            Ok(PairScores {
                name: p.name.clone(),
                model: score(&sr, &p.hr, opts)?,
                bicubic: bicubic_baseline(p, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary {
        model: mean(rows.iter().map(|r| r.model)),
        bicubic: mean(rows.iter().map(|r| r.bicubic)),
        pairs: rows,
    })
}
