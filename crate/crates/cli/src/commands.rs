use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use refsr_core::attention::MixOnTape;
use refsr_core::data::{synthetic_texture, ImagePair, Manifest, MetricOptions, PrepareOptions};
use refsr_core::eval::{evaluate, EvalSummary};
use refsr_core::model::{count_parameters, Checkpoint, Model, ModelConfig, ParamReport};
use refsr_core::numerics::DType;
use refsr_core::robustness::{
    robustness, Matcher, ModelMatcher, OracleMatcher, PatchMatcher, RobustnessOptions, RobustnessRow,
    ROBUSTNESS_HEADER,
};
use refsr_core::training::{train_loop, Trainer};
use refsr_core::{Error, Result};

use crate::config::{Precision, RunConfig};

pub const EVAL_HEADER: &str = "image\tmethod\tpsnr\tssim";
pub const EVAL_FILE: &str = "eval.tsv";
pub const ROBUSTNESS_FILE: &str = "robustness.tsv";

pub fn load_manifest_pairs(manifest: &Path) -> Result<Vec<ImagePair>> {
    let m = Manifest::read(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    m.load_pairs(root)
}

/// Writes `count` synthetic HR textures of `size`×`size` pixels.
pub fn synth_data(out: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    (0..count)
        .map(|i| {
            let path = out.join(format!("synth{i:03}.png"));
            synthetic_texture(size, size, seed.wrapping_add(i as u64)).quantize_u8().write_png(&path)?;
            Ok(path)
        })
        .collect()
}

pub fn prepare_data(cfg: &RunConfig, hr_dir: &Path, out: &Path) -> Result<Manifest> {
    let opts = PrepareOptions {
        seed: cfg.seed,
        ref_policy: cfg.data.ref_policy,
        lr_size: cfg.data.lr_size,
    };
    let report = refsr_core::data::prepare_dataset(hr_dir, out, &opts)?;
    for (path, why) in &report.skipped {
        warn!("skipped {}: {why}", path.display());
    }
    cfg.write_resolved(out)?;
    info!("prepared {} pairs in {}", report.manifest.entries.len(), out.display());
    Ok(report.manifest)
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<PathBuf> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, resume),
        Precision::F64 => train_as::<f64>(cfg, resume),
    }
}

fn train_as<T: MixOnTape>(cfg: &RunConfig, resume: bool) -> Result<PathBuf> {
    let pairs = load_manifest_pairs(&cfg.data.manifest)?;
    cfg.write_resolved(&cfg.out)?;
    let ck_path = cfg.out.join(refsr_core::training::trainer::CHECKPOINT_FILE);
    let mut trainer = if resume && ck_path.exists() {
        let ck = Checkpoint::<T>::load(&ck_path)?;
        if ck.header.model != cfg.model {
            return Err(Error::Checkpoint(format!(
                "{} was written with a different model configuration",
                ck_path.display()
            )));
        }
        let t = Trainer::resume(&ck, pairs, cfg.train.clone())?;
        info!("resuming at step {}", t.step);
        t
    } else {
        Trainer::new(Model::<T>::new(cfg.model.clone(), cfg.seed)?, pairs, cfg.train.clone())?
    };
    let summary = train_loop(&mut trainer, &cfg.out)?;
    if let Some(last) = summary.records.last() {
        info!("step {} loss {:.5}", last.step, last.loss);
    }
    Ok(summary.checkpoint)
}

/// Precision recorded in a checkpoint header.
fn checkpoint_precision(path: &Path) -> Result<DType> {
    let ck = Checkpoint::<f64>::load(path)?;
    match ck.header.dtype.as_str() {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("{}: unknown dtype `{other}`", path.display()))),
    }
}

fn load_model<T: MixOnTape>(path: &Path) -> Result<Model<T>> {
    Model::from_checkpoint(&Checkpoint::<T>::load(path)?)
}

fn check_extents(config: &ModelConfig, pairs: &[ImagePair]) -> Result<()> {
    let n = config.lr_input_size;
    for p in pairs {
        if p.lr.width != n || p.lr.height != n {
            return Err(Error::Argument(format!(
                "pair `{}` has a {}x{} LR image, the checkpoint expects {n}x{n}",
                p.name, p.lr.width, p.lr.height
            )));
        }
    }
    Ok(())
}

pub fn eval(checkpoint: &Path, manifest: &Path, metrics: &MetricOptions) -> Result<EvalSummary> {
    let pairs = load_manifest_pairs(manifest)?;
    match checkpoint_precision(checkpoint)? {
        DType::F32 => eval_as(&load_model::<f32>(checkpoint)?, &pairs, metrics),
        DType::F64 => eval_as(&load_model::<f64>(checkpoint)?, &pairs, metrics),
    }
}

fn eval_as<T: MixOnTape>(model: &Model<T>, pairs: &[ImagePair], metrics: &MetricOptions) -> Result<EvalSummary> {
    check_extents(&model.config, pairs)?;
    evaluate(model, pairs, metrics)
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Per-image model and bicubic rows followed by the two means.
pub fn eval_rows(s: &EvalSummary) -> Vec<[String; 4]> {
    let mut rows = Vec::new();
    for p in &s.pairs {
        rows.push([p.name.clone(), "model".into(), fmt_db(p.model.psnr), format!("{:.4}", p.model.ssim)]);
        rows.push([p.name.clone(), "bicubic".into(), fmt_db(p.bicubic.psnr), format!("{:.4}", p.bicubic.ssim)]);
    }
    rows.push(["mean".into(), "model".into(), fmt_db(s.model.psnr), format!("{:.4}", s.model.ssim)]);
    rows.push(["mean".into(), "bicubic".into(), fmt_db(s.bicubic.psnr), format!("{:.4}", s.bicubic.ssim)]);
    rows
}

pub fn eval_tsv(s: &EvalSummary) -> String {
    let mut out = format!("{EVAL_HEADER}\n");
    for r in eval_rows(s) {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    out
}

/// Left-aligned text columns, right-aligned numbers.
pub fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let n = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let numeric = |c: &str| c.parse::<f64>().is_ok();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if numeric(c) {
                    format!("{c:>w$}", w = widths[i])
                } else {
                    format!("{c:<w$}", w = widths[i])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for r in rows {
        line(r.iter().take(n).map(String::as_str).collect(), &mut out);
    }
    out
}

pub fn eval_table(s: &EvalSummary) -> String {
    let header: Vec<&str> = EVAL_HEADER.split('\t').collect();
    let rows: Vec<Vec<String>> = eval_rows(s).into_iter().map(Vec::from).collect();
    aligned_table(&header, &rows)
}

pub fn robustness_cmd(cfg: &RunConfig, checkpoint: &Path, manifest: &Path) -> Result<Vec<RobustnessRow>> {
    let pairs = load_manifest_pairs(manifest)?;
    match checkpoint_precision(checkpoint)? {
        DType::F32 => robustness_as(cfg, &load_model::<f32>(checkpoint)?, &pairs),
        DType::F64 => robustness_as(cfg, &load_model::<f64>(checkpoint)?, &pairs),
    }
}

fn robustness_as<T: MixOnTape>(cfg: &RunConfig, model: &Model<T>, pairs: &[ImagePair]) -> Result<Vec<RobustnessRow>> {
    check_extents(&model.config, pairs)?;
    let model_matcher = ModelMatcher::new(model)?;
    let oracle = OracleMatcher {
        window: cfg.robustness.oracle_window,
    };
    let patch = PatchMatcher {
        search: cfg.robustness.patch_search,
        ..PatchMatcher::default()
    };
    let matchers: Vec<&dyn Matcher> = cfg
        .robustness
        .matchers
        .iter()
        .map(|name| -> &dyn Matcher {
            match name.as_str() {
                "oracle" => &oracle,
                "patch" => &patch,
                _ => &model_matcher,
            }
        })
        .collect();
    let opts = RobustnessOptions {
        kinds: cfg.robustness.kinds.clone(),
        levels: cfg.robustness.levels.clone(),
        magnitudes: &cfg.robustness.magnitudes,
        metrics: &cfg.metrics,
        seed: cfg.seed,
    };
    robustness(pairs, &matchers, Some(model), &opts)
}

pub fn robustness_tsv(rows: &[RobustnessRow]) -> String {
    let mut out = format!("{ROBUSTNESS_HEADER}\n");
    for r in rows {
        out.push_str(&r.to_tsv());
        out.push('\n');
    }
    out
}

pub fn param_count(model: &ModelConfig) -> Result<ParamReport> {
    count_parameters(model)
}
