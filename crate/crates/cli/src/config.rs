//! Run configuration: TOML file, `REFSR_` environment overrides, then
//! command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use refsr_core::data::{AugmentKind, Level, LevelMagnitudes, MetricOptions, RefPolicy};
use refsr_core::model::ModelConfig;
use refsr_core::training::TrainConfig;
use refsr_core::{Error, Result};

pub const ENV_PREFIX: &str = "REFSR_";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub ref_policy: RefPolicy,
    pub lr_size: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.tsv"),
            ref_policy: RefPolicy::SelfRef,
            lr_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub perceptual_weight: f64,
    pub adversarial_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            perceptual_weight: 1e-4,
            adversarial_weight: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub kinds: Vec<AugmentKind>,
    pub levels: Vec<Level>,
    pub matchers: Vec<String>,
    pub oracle_window: usize,
    pub patch_search: usize,
    pub magnitudes: LevelMagnitudes,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            kinds: vec![AugmentKind::Scale, AugmentKind::Rotation],
            levels: Level::ALL.to_vec(),
            matchers: vec!["oracle".into(), "model".into()],
            oracle_window: 8,
            patch_search: 8,
            magnitudes: LevelMagnitudes::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub metrics: MetricOptions,
    pub robustness: RobustnessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

/// Flag values that override the file and the environment.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub ablation: Option<String>,
    pub steps: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            out: PathBuf::from("runs/default"),
            model: match p {
                Preset::Desk => ModelConfig::desk(),
                Preset::Paper => ModelConfig::paper(),
            },
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            metrics: MetricOptions::default(),
            robustness: RobustnessConfig::default(),
        }
    }

    /// Parses TOML text; errors carry `origin:line:column`.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| toml_error(text, origin, &e))
    }

    /// Deserialises an already-merged table; positions are not available.
    fn from_table(table: toml::Table, origin: &str) -> Result<Self> {
        Self::deserialize(table).map_err(|e| Error::Config {
            location: origin.into(),
            message: e.message().to_string(),
        })
    }

    /// File (or desk defaults), then `REFSR_*` variables, then flags.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &Overrides,
    ) -> Result<Self> {
        let (text, origin) = match path {
            Some(p) => (std::fs::read_to_string(p)?, p.display().to_string()),
            None => (String::new(), "<defaults>".to_string()),
        };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| toml_error(&text, &origin, &e))?;
        let overridden = apply_env(&mut table, env)?;
        let mut cfg = if overridden {
            Self::from_table(table, &format!("{origin} with {ENV_PREFIX}* overrides"))?
        } else {
            Self::parse(&text, &origin)?
        };
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if let Some(a) = &flags.ablation {
            cfg.model = refsr_core::model::apply_ablation(&cfg.model, a)?;
        }
        if let Some(s) = flags.steps {
            cfg.train.steps = s;
        }
        if let Some(o) = &flags.out {
            cfg.out = o.clone();
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        for m in &self.robustness.matchers {
            if !MATCHERS.contains(&m.as_str()) {
                return Err(Error::UnknownName {
                    kind: "matcher",
                    name: m.clone(),
                    expected: MATCHERS.join(", "),
                });
            }
        }
        Ok(())
    }

    /// Commented TOML that parses back to `self`.
    pub fn to_commented_toml(&self) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| Error::Config {
            location: "<serialise>".into(),
            message: e.to_string(),
        })?;
        let mut out = String::from(
            "# refsr run configuration.\n\
             # Any key can be overridden with an environment variable named\n\
             # REFSR_<SECTION>__<KEY> (for example REFSR_TRAIN__STEPS=200 or\n\
             # REFSR_SEED=3); flags override both.\n",
        );
        let mut section = String::new();
        for line in body.lines() {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.to_string();
                out.push('\n');
                if let Some(c) = comment_for(&section, None) {
                    let _ = writeln!(out, "# {c}");
                }
            } else if let Some((key, _)) = line.split_once(" = ") {
                if let Some(c) = comment_for(&section, Some(key.trim())) {
                    let _ = writeln!(out, "# {c}");
                }
            }
            out.push_str(line);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_commented_toml()?)?;
        Ok(path)
    }
}

pub const MATCHERS: [&str; 3] = ["oracle", "patch", "model"];

fn comment_for(section: &str, key: Option<&str>) -> Option<&'static str> {
    Some(match (section, key) {
        ("", Some("seed")) => "Seeds weight initialisation, sample order and reference crops.",
        ("", Some("precision")) => "Arithmetic of training and inference: f32 or f64.",
        ("", Some("out")) => "Directory for checkpoints, logs and reports.",
        ("model", None) => "Architecture. The embedding width is 96 x num_heads.",
        ("model", Some("blocks_per_stage")) => "Dual-stream blocks (local + shifted sub-block pairs) per stage.",
        ("model", Some("lr_input_size")) => "LR input side; the output is 4x larger.",
        ("model", Some("fe_channels")) => "Width of the convolutional feature extractor.",
        ("model", Some("fe_blocks")) => "Residual blocks in the feature extractor.",
        ("model", Some("upsample_kernel")) => "Kernel of the convolution before each pixel shuffle.",
        ("model", Some("ablation")) => "Gate strategy: full, frozen-gate, self-only or cross-only.",
        ("model", Some("gating_level")) => "Mix head outputs (output) or attention matrices (matrix).",
        ("model", Some("global_skip")) => "Add the bicubic upsampling of the input to the output.",
        ("model", Some("ref_crop_ratio")) => "Inference reference crop side as a multiple of each stage extent.",
        ("train", None) => "Optimisation. Adam with a cosine one-cycle schedule.",
        ("train", Some("steps")) => "Schedule length and number of optimiser steps.",
        ("train", Some("max_lr")) => "Peak of the one-cycle schedule; it starts and ends at max_lr / 25.",
        ("train", Some("l1_weight")) => "Weight of the L1 reconstruction loss.",
        ("train", Some("clip_norm")) => "Global gradient norm cap.",
        ("train", Some("power_iterations")) => "Spectral-norm power iterations per step.",
        ("train", Some("checkpoint_every")) => "Checkpoint period in steps (0: final step only).",
        ("train", Some("threads")) => "Threads over batch elements; results are identical for any value.",
        ("train.adam", None) => "Adam moments.",
        ("loss", None) => "Perceptual and adversarial terms are not implemented. These weights are recorded but ignored.",
        ("data", None) => "Dataset written by `refsr prepare-data`.",
        ("data", Some("manifest")) => "Manifest path; image paths inside it are relative to its directory.",
        ("data", Some("ref_policy")) => "Reference pairing when preparing data: self or shuffle.",
        ("data", Some("lr_size")) => "Centre-crop and resample so the LR side equals this (optional).",
        ("metrics", None) => "Scoring: luma channel and a border crop in pixels.",
        ("robustness", None) => "Correspondence robustness under synthetic scale and rotation.",
        ("robustness", Some("matchers")) => "Any of oracle, patch and model.",
        ("robustness", Some("oracle_window")) => "Window side of the oracle matcher.",
        ("robustness", Some("patch_search")) => "Search radius of the patch matcher.",
        ("robustness.magnitudes", None) => "Scale factors and rotation angles (degrees) of small, medium and large.",
        _ => return None,
    })
}

fn toml_error(text: &str, origin: &str, e: &toml::de::Error) -> Error {
    let location = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
            format!("{origin}:{line}:{col}")
        }
        None => origin.to_string(),
    };
    Error::Config {
        location,
        message: e.message().to_string(),
    }
}

/// Applies `REFSR_A__B=value` as `a.b = value`; values parse as TOML and
/// fall back to strings. Returns whether anything changed.
pub fn apply_env(table: &mut toml::Table, env: impl IntoIterator<Item = (String, String)>) -> Result<bool> {
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    let changed = !vars.is_empty();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.iter().any(|s| s.is_empty()) {
            return Err(Error::Config {
                location: key.clone(),
                message: "empty key segment".into(),
            });
        }
        let value = parse_env_value(&raw);
        let mut node = &mut *table;
        for seg in &path[..path.len() - 1] {
            let entry = node
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry.as_table_mut().ok_or_else(|| Error::Config {
                location: key.clone(),
                message: format!("`{seg}` is not a section"),
            })?;
        }
        node.insert(path[path.len() - 1].clone(), value);
    }
    Ok(changed)
}

fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn commented_toml_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_commented_toml().unwrap();
        assert!(text.contains("# Weight of the L1 reconstruction loss."));
        assert_eq!(RunConfig::parse(&text, "x").unwrap(), cfg);
    }

    #[test]
    fn precedence_is_file_env_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 5\n[train]\nsteps = 10\nmax_lr = 2e-4\n").unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            env(&[("REFSR_TRAIN__STEPS", "20"), ("REFSR_MODEL__ABLATION", "self-only"), ("HOME", "/")]),
            &Overrides {
                steps: Some(30),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.train.seed, 5);
        assert_eq!(cfg.train.max_lr, 2e-4);
        assert_eq!(cfg.train.steps, 30);
        assert_eq!(cfg.model.ablation, "self-only");
    }

    #[test]
    fn parse_errors_point_at_the_line() {
        let err = RunConfig::parse("seed = 1\n[train]\nsteps = \"many\"\n", "run.toml").unwrap_err();
        let Error::Config { location, .. } = err else { panic!("{err}") };
        assert!(location.starts_with("run.toml:3:"), "{location}");
        let err = RunConfig::parse("[model]\nbogus = 1\n", "run.toml").unwrap_err();
        assert!(err.to_string().contains("run.toml:2"), "{err}");
    }

    #[test]
    fn bad_ablation_and_matcher_are_rejected() {
        let flags = Overrides {
            ablation: Some("none".into()),
            ..Overrides::default()
        };
        assert!(RunConfig::load(None, Vec::new(), &flags).is_err());
        let bad = env(&[("REFSR_ROBUSTNESS__MATCHERS", "[\"psychic\"]")]);
        assert!(RunConfig::load(None, bad, &Overrides::default()).is_err());
    }
}
