use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    AttentionRecord, BlockContext, BlockDims, DualStreamBlock, DynGateMixer, GateRegistry, MixOnTape,
};
use crate::data::resize::bicubic_resize;
use crate::data::Image;
use crate::error::{ensure_arg, Error, Result};
use crate::layers::{Conv, Init, Linear};
use crate::model::config::ModelConfig;
use crate::numerics::{spectral_normalize, Binder, ParamStore, Scalar, Tape, Tensor, Var};
use crate::windowing::{patch_embed, sinusoidal_encoding, GridVar, Stream};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Power iterations run on freshly initialised spectral states.
pub const SPECTRAL_WARMUP: usize = 200;

/// Residual convolutional feature extractor with spectrally normalised
/// kernels.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub entry: Conv,
    pub blocks: Vec<(Conv, Conv)>,
    /// Present when the extractor width differs from the embedding width.
    pub lift: Option<Conv>,
}

impl FeatureExtractor {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.fe_channels;
        let entry = Conv::new(store, "fe.entry", 3, 3, c, true, rng)?;
        let blocks = (0..cfg.fe_blocks)
            .map(|i| {
                Ok((
                    Conv::new(store, &format!("fe.res{i}.conv1"), 3, c, c, true, rng)?,
                    Conv::new(store, &format!("fe.res{i}.conv2"), 3, c, c, true, rng)?,
                ))
            })
            .collect::<Result<_>>()?;
        let lift = (c != cfg.dim())
            .then(|| Conv::new(store, "fe.lift", 3, c, cfg.dim(), true, rng))
            .transpose()?;
        Ok(Self { entry, blocks, lift })
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv> {
        std::iter::once(&self.entry)
            .chain(self.blocks.iter().flat_map(|(a, b)| [a, b]))
            .chain(self.lift.iter())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &mut Binder<T>, x: Var, h: usize, w: usize) -> Result<Var> {
        let mut f = self.entry.forward(tape, b, x, h, w)?;
        for (c1, c2) in &self.blocks {
            let r = c1.forward(tape, b, f, h, w)?;
            let r = tape.leaky_relu(r, LEAKY_SLOPE);
            let r = c2.forward(tape, b, r, h, w)?;
            f = tape.add(f, r)?;
        }
        match &self.lift {
            Some(l) => l.forward(tape, b, f, h, w),
            None => Ok(f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: Linear,
    pub blocks: Vec<DualStreamBlock>,
}

/// Where a reference crop came from: grid coordinate `u` of the stage maps
/// to reference coordinate `origin + (u + 0.5)·side/extent − 0.5`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropGeometry {
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
    pub extent: usize,
}

impl CropGeometry {
    pub fn to_reference(&self, u: f64, v: f64) -> [f64; 2] {
        let s = self.side as f64 / self.extent as f64;
        [self.x0 as f64 + (u + 0.5) * s - 0.5, self.y0 as f64 + (v + 0.5) * s - 0.5]
    }
}

/// How per-stage reference crops are chosen.
pub enum CropMode<'r> {
    /// Uniformly random stage-sized crops (training).
    Random(&'r mut ChaCha8Rng),
    /// Centre crops `ref_crop_ratio` times the stage extent (clipped to the
    /// reference), resampled to the stage extent (inference).
    Centre,
}

/// Per-module trainable parameter totals.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub groups: Vec<(String, usize)>,
    pub total: usize,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.groups.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
        for (name, n) in &self.groups {
            writeln!(f, "{name:<width$}  {n:>12}")?;
        }
        write!(f, "{:<width$}  {:>12}", "total", self.total)
    }
}

pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub mixer: Arc<dyn DynGateMixer>,
    pub fe: FeatureExtractor,
    pub stages: Vec<Stage>,
    pub upsamplers: Vec<Conv>,
    pub head: Linear,
}

impl<T: MixOnTape> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_registry(config, seed, &GateRegistry::with_builtins())
    }

    pub fn with_registry(config: ModelConfig, seed: u64, registry: &GateRegistry) -> Result<Self> {
        config.validate()?;
        let mixer = registry.get(&config.ablation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim();
        let fe = FeatureExtractor::new(&mut store, &config, &mut rng)?;
        let dims = BlockDims {
            dim: d,
            heads: config.num_heads,
            window: config.window,
            mlp_ratio: config.mlp_ratio,
        };
        let mut stages = Vec::new();
        let mut upsamplers = Vec::new();
        for s in 0..config.num_stages {
            let embed = Linear::new(&mut store, &format!("stage{s}.embed"), 3, d, Init::FanIn(3), true, &mut rng)?;
            let blocks = (0..config.blocks_per_stage)
                .map(|i| DualStreamBlock::new(&mut store, &format!("stage{s}.block{i}"), dims, &mut rng))
                .collect::<Result<_>>()?;
            stages.push(Stage { embed, blocks });
            if s + 1 < config.num_stages {
                upsamplers.push(Conv::new(
                    &mut store,
                    &format!("up{s}"),
                    config.upsample_kernel,
                    d,
                    4 * d,
                    false,
                    &mut rng,
                )?);
            }
        }
        let head = Linear::new(&mut store, "head", d, 3, Init::Zeros, true, &mut rng)?;
        let mut model = Self {
            config,
            store,
            mixer,
            fe,
            stages,
            upsamplers,
            head,
        };
        for p in model.store.iter_mut().filter(|p| p.spectral.is_some()) {
            spectral_normalize(p, SPECTRAL_WARMUP)?;
        }
        if !model.mixer.lambda_trainable() {
            for id in model.lambda_ids() {
                let p = model.store.get_mut(id);
                p.value = Tensor::zeros(p.value.shape().to_vec());
                p.trainable = false;
            }
        }
        Ok(model)
    }

    pub fn lambda_ids(&self) -> Vec<usize> {
        self.stages
            .iter()
            .flat_map(|s| s.blocks.iter().flat_map(|b| b.lambdas()))
            .collect()
    }

    /// Current gate logits keyed by parameter name.
    pub fn lambdas(&self) -> BTreeMap<String, Vec<f64>> {
        self.lambda_ids()
            .into_iter()
            .map(|id| {
                let p = self.store.get(id);
                (p.name.clone(), p.value.data().iter().map(|v| v.as_f64()).collect())
            })
            .collect()
    }

    /// One stage-sized crop of `reference` per stage.
    pub fn reference_crops(&self, reference: &Image, mode: CropMode) -> Result<Vec<(Image, CropGeometry)>> {
        ensure_arg!(reference.channels == 3, "reference must be RGB");
        let mut out = Vec::with_capacity(self.config.num_stages);
        let mut mode = mode;
        for s in 0..self.config.num_stages {
            let e = self.config.stage_extent(s);
            match &mut mode {
                CropMode::Random(rng) => {
                    ensure_arg!(
                        reference.width >= e && reference.height >= e,
                        "reference {}x{} is smaller than the stage {s} extent {e}",
                        reference.width,
                        reference.height
                    );
                    let x0 = rng.gen_range(0..=reference.width - e);
                    let y0 = rng.gen_range(0..=reference.height - e);
                    let g = CropGeometry {
                        x0,
                        y0,
                        side: e,
                        extent: e,
                    };
                    out.push((reference.crop(x0, y0, e, e)?, g));
                }
                CropMode::Centre => {
                    let want = (self.config.ref_crop_ratio * e as f64).round() as usize;
                    let side = want.min(reference.width).min(reference.height);
                    let (x0, y0) = ((reference.width - side) / 2, (reference.height - side) / 2);
                    let crop = reference.crop(x0, y0, side, side)?;
                    let crop = if side == e { crop } else { bicubic_resize(&crop, e, e)? };
                    out.push((crop, CropGeometry { x0, y0, side, extent: e }));
                }
            }
        }
        Ok(out)
    }

    /// Super-resolved tokens `[(4h)·(4w), 3]` for `lr` given one reference
    /// crop per stage. `trace` collects the cross-attention of the last
    /// sub-block of the finest stage.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<T>,
        lr: &Image,
        crops: &[Image],
        trace: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = cfg.lr_input_size;
        ensure_arg!(
            lr.width == n && lr.height == n && lr.channels == 3,
            "LR input {}x{}x{} does not match the configured {n}x{n}x3",
            lr.width,
            lr.height,
            lr.channels
        );
        ensure_arg!(
            crops.len() == cfg.num_stages,
            "{} reference crops for {} stages",
            crops.len(),
            cfg.num_stages
        );
        let x = tape.constant(lr.to_tokens());
        let feats = self.fe.forward(tape, b, x, n, n)?;
        check_finite(tape, feats, "feature extractor")?;
        let mut grid = GridVar {
            var: feats,
            height: n,
            width: n,
            dim: cfg.dim(),
            stream: Stream::Lr,
        };
        let mut trace = trace;
        let last_stage = cfg.num_stages - 1;
        for (s, stage) in self.stages.iter().enumerate() {
            let e = cfg.stage_extent(s);
            let (w, bias) = stage.embed.vars(tape, b);
            let mut reference = patch_embed(tape, &crops[s], e, w, bias.expect("embedding has a bias"))?;
            for (i, block) in stage.blocks.iter().enumerate() {
                let record = s == last_stage && i + 1 == stage.blocks.len();
                let mut ctx = BlockContext {
                    mixer: self.mixer.as_ref(),
                    level: cfg.gating_level,
                    trace: if record { trace.as_deref_mut() } else { None },
                };
                (grid, reference) = block.forward(tape, b, grid, reference, &mut ctx)?;
                check_finite(tape, grid.var, &format!("stage {s} block {i}"))?;
            }
            if let Some(up) = self.upsamplers.get(s) {
                let wide = up.forward(tape, b, grid.var, e, e)?;
                let shuffled = tape.pixel_shuffle(wide, e, e, 2)?;
                let spe = tape.constant(sinusoidal_encoding(2 * e, 2 * e, cfg.dim())?);
                grid = GridVar {
                    var: tape.add(shuffled, spe)?,
                    height: 2 * e,
                    width: 2 * e,
                    ..grid
                };
            }
        }
        let mut out = self.head.forward(tape, b, grid.var)?;
        if cfg.global_skip {
            let m = cfg.output_extent();
            let base = tape.constant(bicubic_resize(lr, m, m)?.to_tokens());
            out = tape.add(out, base)?;
        }
        check_finite(tape, out, "output head")?;
        Ok(out)
    }

    /// Inference with centre reference crops; the result is not clamped.
    pub fn predict(&self, lr: &Image, reference: &Image) -> Result<Image> {
        self.predict_traced(lr, reference, None).map(|(img, _)| img)
    }

    pub fn predict_traced(
        &self,
        lr: &Image,
        reference: &Image,
        trace: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<(Image, Vec<CropGeometry>)> {
        let (crops, geometry): (Vec<_>, Vec<_>) = self.reference_crops(reference, CropMode::Centre)?.into_iter().unzip();
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.store);
        let out = self.forward(&mut tape, &mut b, lr, &crops, trace)?;
        let m = self.config.output_extent();
        Ok((Image::from_tokens(tape.value(out), m, m)?, geometry))
    }

    /// Trainable scalars grouped by module.
    pub fn parameter_report(&self) -> ParamReport {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for p in self.store.iter().filter(|p| p.trainable) {
            let key = module_key(&p.name);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += p.value.len(),
                None => groups.push((key, p.value.len())),
            }
        }
        let total = groups.iter().map(|(_, n)| n).sum();
        ParamReport { groups, total }
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: MixOnTape>(&self) -> Result<Model<U>> {
        let mut m = Model::<U>::new(self.config.clone(), 0)?;
        for (dst, src) in m.store.iter_mut().zip(self.store.iter()) {
            dst.value = src.value.cast();
            dst.trainable = src.trainable;
            dst.spectral = src.spectral.as_ref().map(|s| crate::numerics::SpectralState {
                u: s.u.cast(),
                v: s.v.cast(),
            });
        }
        Ok(m)
    }
}

fn module_key(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    if first.starts_with("stage") {
        format!("{first}.{}", parts.next().unwrap_or_default())
    } else {
        first.to_string()
    }
}

fn check_finite<T: Scalar>(tape: &Tape<T>, v: Var, context: &str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: format!("activations after {context}"),
        })
    }
}

/// Trainable parameter report of the architecture described by `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> Result<ParamReport> {
    Ok(Model::<f32>::new(cfg.clone(), 0)?.parameter_report())
}
