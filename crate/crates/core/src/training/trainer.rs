use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::MixOnTape;
use crate::data::{ImagePair, Image};
use crate::error::{ensure_arg, Error, Result};
use crate::model::{Checkpoint, CropMode, Model, TrainingMeta};
use crate::numerics::{spectral_normalize, Binder, Tape, Tensor};
use crate::training::optim::{adam_step, clip_grad_norm, one_cycle_lr, AdamConfig, AdamState};

pub const ADAM_M_PREFIX: &str = "adam_m:";
pub const ADAM_V_PREFIX: &str = "adam_v:";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.tsv";
pub const TIMING_FILE: &str = "timing.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Length of the one-cycle schedule and of the run.
    pub steps: u64,
    pub batch_size: usize,
    pub max_lr: f64,
    pub l1_weight: f64,
    /// Global gradient norm cap.
    pub clip_norm: f64,
    /// Spectral-norm power iterations before every step.
    pub power_iterations: usize,
    pub adam: AdamConfig,
    /// Checkpoint period in steps; the final step is always checkpointed.
    pub checkpoint_every: u64,
    /// Worker threads over batch elements. Gradients are summed in sample
    /// order, so results do not depend on this.
    pub threads: usize,
    /// Seeds the sample order and reference crops; supplied by the run
    /// configuration rather than read from this section.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            max_lr: 1e-4,
            l1_weight: 10.0,
            clip_norm: 1.0,
            power_iterations: 1,
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            threads: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.steps > 0, "steps must be positive");
        ensure_arg!(self.batch_size > 0, "batch_size must be positive");
        ensure_arg!(self.max_lr > 0.0, "max_lr must be positive");
        ensure_arg!(self.clip_norm > 0.0, "clip_norm must be positive");
        ensure_arg!(self.threads > 0, "threads must be positive");
        ensure_arg!(
            (0.0..1.0).contains(&self.adam.beta1) && (0.0..1.0).contains(&self.adam.beta2),
            "Adam betas must lie in [0, 1)"
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

pub struct Trainer<T: MixOnTape> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub optimizer: AdamState<T>,
    /// Number of completed steps.
    pub step: u64,
    pairs: Vec<ImagePair>,
    targets: Vec<Tensor<T>>,
}

type SampleGrads<T> = (f64, Vec<(usize, Tensor<T>)>);

impl<T: MixOnTape> Trainer<T> {
    pub fn new(model: Model<T>, pairs: Vec<ImagePair>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        ensure_arg!(!pairs.is_empty(), "training needs at least one image pair");
        let n = model.config.lr_input_size;
        let m = model.config.output_extent();
        for p in &pairs {
            ensure_arg!(
                p.lr.width == n && p.lr.height == n && p.hr.width == m && p.hr.height == m,
                "pair `{}` is {}x{} -> {}x{}, the model expects {n}x{n} -> {m}x{m}",
                p.name,
                p.lr.width,
                p.lr.height,
                p.hr.width,
                p.hr.height
            );
            ensure_arg!(
                p.reference.width >= m && p.reference.height >= m,
                "reference of pair `{}` is smaller than the output extent {m}",
                p.name
            );
        }
        let targets = pairs.iter().map(|p| p.hr.to_tokens()).collect();
        let optimizer = AdamState::new(model.store.len());
        Ok(Self {
            model,
            config,
            optimizer,
            step: 0,
            pairs,
            targets,
        })
    }

    pub fn pairs(&self) -> &[ImagePair] {
        &self.pairs
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    /// Pair indices of the batch at `step`: consecutive slices of per-epoch
    /// shuffles of the dataset.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.pairs.len() as u64;
        let b = self.config.batch_size as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (0..b)
            .map(|j| {
                let pos = step * b + j;
                let epoch = pos / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                    rng.set_stream(2 * epoch + 1);
                    let mut perm: Vec<usize> = (0..self.pairs.len()).collect();
                    perm.shuffle(&mut rng);
                    cached = Some((epoch, perm));
                }
                cached.as_ref().expect("filled above").1[(pos % n) as usize]
            })
            .collect()
    }

    /// Loss and parameter gradients of one sample. `slot` is the sample's
    /// global position, which selects its reference crops.
    fn sample(&self, pair: usize, slot: u64, seed_grad: f64) -> Result<SampleGrads<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(2 * slot);
        let p = &self.pairs[pair];
        let crops: Vec<Image> = self
            .model
            .reference_crops(&p.reference, CropMode::Random(&mut rng))?
            .into_iter()
            .map(|c| c.0)
            .collect();
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.model.store);
        let out = self.model.forward(&mut tape, &mut b, &p.lr, &crops, None)?;
        let target = tape.constant(self.targets[pair].clone());
        let l1 = tape.l1_mean(out, target)?;
        let loss = tape.scale(l1, T::lit(self.config.l1_weight));
        let value = tape.value(loss).item().as_f64();
        let grads = tape.backward_with(loss, Tensor::scalar(T::lit(seed_grad)));
        Ok((value, grads.into_params()))
    }

    fn batch_grads(&self, indices: &[usize]) -> Result<Vec<SampleGrads<T>>> {
        let b = indices.len();
        let inv = 1.0 / b as f64;
        let slot = |j: usize| self.step * b as u64 + j as u64;
        if self.config.threads <= 1 || b == 1 {
            return indices.iter().enumerate().map(|(j, &i)| self.sample(i, slot(j), inv)).collect();
        }
        let workers = self.config.threads.min(b);
        let mut results: Vec<Option<Result<SampleGrads<T>>>> = (0..b).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        (w..b)
                            .step_by(workers)
                            .map(|j| (j, self.sample(indices[j], slot(j), inv)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (j, r) in h.join().expect("training worker panicked") {
                    results[j] = Some(r);
                }
            }
        });
        results.into_iter().map(|r| r.expect("every sample evaluated")).collect()
    }

    /// One optimisation step. Parameters are left untouched when the loss or
    /// any gradient is non-finite.
    pub fn step(&mut self) -> Result<StepRecord> {
        ensure_arg!(!self.is_done(), "training already finished {} steps", self.step);
        let step = self.step;
        let lr = one_cycle_lr(step, self.config.steps, self.config.max_lr)?;
        let saved: Vec<_> = self.model.store.iter().map(|p| p.spectral.clone()).collect();
        for p in self.model.store.iter_mut().filter(|p| p.spectral.is_some()) {
            spectral_normalize(p, self.config.power_iterations)?;
        }
        let indices = self.batch_indices(step);
        let outcome = self.batch_grads(&indices).and_then(|samples| {
            let inv = 1.0 / indices.len() as f64;
            let loss: f64 = samples.iter().map(|s| s.0).sum::<f64>() * inv;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at step {step}"),
                });
            }
            Ok((loss, samples))
        });
        let (loss, samples) = match outcome {
            Ok(v) => v,
            Err(e) => {
                self.restore_spectral(saved);
                return Err(e);
            }
        };
        self.model.store.zero_grads();
        for (_, grads) in samples {
            for (id, g) in grads {
                self.model.store.get_mut(id).accumulate_grad(&g);
            }
        }
        let grad_norm = clip_grad_norm(&mut self.model.store, self.config.clip_norm);
        if let Err(e) = adam_step(&mut self.model.store, &mut self.optimizer, &self.config.adam, lr) {
            self.model.store.zero_grads();
            self.restore_spectral(saved);
            return Err(e);
        }
        self.model.store.zero_grads();
        self.step += 1;
        Ok(StepRecord {
            step,
            lr,
            loss,
            grad_norm,
        })
    }

    fn restore_spectral(&mut self, saved: Vec<Option<crate::numerics::SpectralState<T>>>) {
        for (p, s) in self.model.store.iter_mut().zip(saved) {
            p.spectral = s;
        }
    }

    /// Weights, spectral state and optimiser moments.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ck = self.model.to_checkpoint(Some(TrainingMeta {
            step: self.step,
            optimizer_steps: self.optimizer.t,
            seed: self.config.seed,
            total_steps: self.config.steps,
        }));
        for (id, p) in self.model.store.iter().enumerate() {
            if let Some(m) = &self.optimizer.m[id] {
                ck.tensors.push((format!("{ADAM_M_PREFIX}{}", p.name), m.clone()));
            }
            if let Some(v) = &self.optimizer.v[id] {
                ck.tensors.push((format!("{ADAM_V_PREFIX}{}", p.name), v.clone()));
            }
        }
        ck
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint<T>, pairs: Vec<ImagePair>, config: TrainConfig) -> Result<Self> {
        let meta = ck
            .header
            .training
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        ensure_arg!(
            meta.seed == config.seed && meta.total_steps == config.steps,
            "checkpoint was written with seed {} over {} steps, resuming with seed {} over {}",
            meta.seed,
            meta.total_steps,
            config.seed,
            config.steps
        );
        let model = Model::from_checkpoint(ck)?;
        let mut trainer = Self::new(model, pairs, config)?;
        trainer.step = meta.step;
        trainer.optimizer.t = meta.optimizer_steps;
        for (id, p) in trainer.model.store.iter().enumerate() {
            for (prefix, slot) in [
                (ADAM_M_PREFIX, &mut trainer.optimizer.m[id]),
                (ADAM_V_PREFIX, &mut trainer.optimizer.v[id]),
            ] {
                if let Some(t) = ck.tensor(&format!("{prefix}{}", p.name)) {
                    if t.shape() != p.value.shape() {
                        return Err(Error::Checkpoint(format!(
                            "optimiser moment for `{}` has shape {:?}",
                            p.name,
                            t.shape()
                        )));
                    }
                    *slot = Some(t.clone());
                }
            }
        }
        Ok(trainer)
    }
}

/// Outcome of [`train_loop`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
}

/// Runs the trainer to completion, appending to `train_log.tsv` (step, lr,
/// loss) and `timing.tsv` (step, seconds) in `out_dir` and checkpointing
/// periodically. On failure the last written checkpoint is left in place.
pub fn train_loop<T: MixOnTape>(trainer: &mut Trainer<T>, out_dir: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir)?;
    let fresh = trainer.step == 0;
    let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
        let path = out_dir.join(name);
        let f = if fresh {
            let mut f = File::create(&path)?;
            writeln!(f, "{header}")?;
            f
        } else {
            OpenOptions::new().append(true).open(&path)?
        };
        Ok(BufWriter::new(f))
    };
    let mut log = open(LOG_FILE, "step\tlr\tloss")?;
    let mut timing = open(TIMING_FILE, "step\tseconds")?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let mut records = Vec::new();
    while !trainer.is_done() {
        let t0 = Instant::now();
        let r = trainer.step()?;
        writeln!(log, "{}\t{:e}\t{}", r.step, r.lr, r.loss)?;
        writeln!(timing, "{}\t{:.3}", r.step, t0.elapsed().as_secs_f64())?;
        records.push(r);
        let every = trainer.config.checkpoint_every;
        if trainer.is_done() || (every > 0 && trainer.step % every == 0) {
            log.flush()?;
            timing.flush()?;
            trainer.checkpoint().save(&ck_path)?;
        }
    }
    log.flush()?;
    timing.flush()?;
    Ok(TrainSummary {
        records,
        checkpoint: ck_path,
    })
}

/// Reads `(step, lr, loss)` rows back from a training log.
pub fn read_log(path: &Path) -> Result<Vec<(u64, f64, f64)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Config {
                location: format!("{}:{}", path.display(), i + 2),
                message: format!("malformed log row `{line}`"),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}
