//! Teacher-forced training with AdamW, step-decayed learning rate and
//! type-balanced clip sampling.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tptn_autodiff::{lit, ParamGrads, ParamStore, Real, Tape, Tensor};

use crate::checkpoint::Checkpoint;
use crate::data::{make_clip, ClipIndex, ClipRef, Dataset, CLIP_LEN};
use crate::error::{CoreError, Result};
use crate::losses::{objective, LossBreakdown, LossWeights};
use crate::model::{Mode, ModelConfig, Tptn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub base_stride: usize,
    pub clip_len: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 56,
            epochs: 2000,
            lr: 1e-4,
            lr_decay: 0.5,
            lr_decay_every: 500,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            base_stride: 4,
            clip_len: CLIP_LEN,
            noise_std: 0.05,
            seed: 0,
            checkpoint_every: 50,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.eps];
        if self.batch_size == 0
            || self.epochs == 0
            || self.lr_decay_every == 0
            || self.base_stride == 0
            || self.clip_len < 3
            || positive.iter().any(|v| !(*v > 0.0))
            || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.weight_decay >= 0.0)
            || !(self.noise_std >= 0.0)
        {
            return Err(CoreError::Config(format!(
                "invalid training config {self:?}"
            )));
        }
        self.weights.validate()
    }

    /// Learning rate for 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = epoch.saturating_sub(1) / self.lr_decay_every;
        self.lr * self.lr_decay.powi(k as i32)
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
        self.step += 1;
        let (b1, b2): (T, T) = (lit(self.beta1), lit(self.beta2));
        let one = T::one();
        let c1: T = lit(1.0 - self.beta1.powi(self.step as i32));
        let c2: T = lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr_t, eps, decay): (T, T, T) =
            (lit(lr), lit(self.eps), lit(1.0 - lr * self.weight_decay));
        for (id, p) in params.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let step = (mi / c1) / ((vi / c2).sqrt() + eps);
                w[i] = w[i] * decay - lr_t * step;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub clips: usize,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub clips: usize,
    pub seconds: f64,
    /// Mean over clips.
    pub loss: LossBreakdown,
}

/// What a run would do, without doing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub sequences: usize,
    pub frames: usize,
    pub skipped_sequences: usize,
    pub clips: usize,
    pub steps_per_epoch: usize,
    pub type_names: Vec<String>,
    pub type_frames: Vec<usize>,
    pub strides: Vec<usize>,
    pub clip_shares: Vec<f64>,
    pub parameters: usize,
    pub inference_parameters: usize,
    pub trl: usize,
}

pub fn plan(ds: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainPlan> {
    model.validate()?;
    cfg.validate()?;
    let index = ClipIndex::for_dataset(ds, cfg.base_stride, cfg.clip_len)?;
    let rows: Vec<&[usize]> = ds
        .sequences
        .iter()
        .map(|s| s.motion.types.as_slice())
        .collect();
    let params = Tptn::<f32>::new(model.clone(), 0)?;
    Ok(TrainPlan {
        sequences: ds.sequences.len(),
        frames: ds.total_frames(),
        skipped_sequences: index.skipped.len(),
        clips: index.len(),
        steps_per_epoch: index.len().div_ceil(cfg.batch_size),
        type_names: ds.type_names.clone(),
        type_frames: ds.type_counts(),
        strides: index.strides.clone(),
        clip_shares: index.type_shares(&rows, ds.n_types()),
        parameters: params.param_count(),
        inference_parameters: params.inference_param_count(),
        trl: model.trl(),
    })
}

/// Owns the model and optimizer for a run over one dataset.
pub struct Trainer<'d, T: Real> {
    pub model: Tptn<T>,
    pub cfg: TrainConfig,
    pub dataset: &'d Dataset,
    pub index: ClipIndex,
    opt: AdamW<T>,
    epoch: usize,
}

fn clip_rng(seed: u64, epoch: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | slot as u64);
    rng
}

impl<'d, T: Real> Trainer<'d, T> {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, dataset: &'d Dataset) -> Result<Self> {
        cfg.validate()?;
        if model_cfg.n_types != dataset.n_types() {
            return Err(CoreError::Config(format!(
                "model has {} motion types but the dataset has {}",
                model_cfg.n_types,
                dataset.n_types()
            )));
        }
        if cfg.clip_len - 1 > model_cfg.max_len {
            return Err(CoreError::Config(format!(
                "clip length {} exceeds the positional table ({})",
                cfg.clip_len, model_cfg.max_len
            )));
        }
        let model = Tptn::new(model_cfg, cfg.seed)?;
        Self::with_model(model, cfg, dataset)
    }

    pub fn with_model(model: Tptn<T>, cfg: TrainConfig, dataset: &'d Dataset) -> Result<Self> {
        if !model.has_consistency_modules() {
            return Err(CoreError::Config(
                "training needs the consistency modules".into(),
            ));
        }
        let index = ClipIndex::for_dataset(dataset, cfg.base_stride, cfg.clip_len)?;
        if index.is_empty() {
            return Err(CoreError::Invalid(format!(
                "no sequence is at least {} frames long; nothing to train on",
                cfg.clip_len
            )));
        }
        let opt = AdamW::new(&model.params, &cfg);
        Ok(Self {
            model,
            cfg,
            dataset,
            index,
            opt,
            epoch: 0,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Loss and gradients for one clip.
    fn clip_grads(
        &self,
        clip: ClipRef,
        rng: &mut ChaCha8Rng,
    ) -> Result<(LossBreakdown, ParamGrads<T>)> {
        let seq = &self.dataset.sequences[clip.sequence];
        let cfg = &self.model.config;
        let batch = make_clip::<T, _>(
            seq,
            &self.dataset.stats,
            &cfg.partition,
            clip.start,
            self.cfg.clip_len,
            self.cfg.noise_std,
            rng,
        )?;
        let mut tape = Tape::with_params(&self.model.params);
        let out = self
            .model
            .forward(&mut tape, &batch.input, Mode::Train(rng))?;
        let vars = objective(
            &mut tape,
            &self.model,
            &out,
            &batch.targets,
            &self.dataset.stats,
            &seq.skeleton,
            &self.cfg.weights,
        )?;
        let loss = vars.breakdown(&tape);
        let grads = tape.backward(vars.total)?.into_params();
        Ok((loss, grads))
    }

    /// Shuffle the clip index, then take one optimizer step per batch.
    /// A non-finite loss or gradient aborts before the parameters change.
    pub fn run_epoch(&mut self, on_step: &mut dyn FnMut(&StepLog)) -> Result<EpochLog> {
        let epoch = self.epoch + 1;
        let lr = self.cfg.lr_at(epoch);
        let started = Instant::now();
        let mut order = self.index.clips.clone();
        order.shuffle(&mut clip_rng(self.cfg.seed ^ 0x5eed, epoch, 0));
        let mut total = LossBreakdown::default();
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let first = b * self.cfg.batch_size;
            let results: Vec<Result<(LossBreakdown, ParamGrads<T>)>> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, &clip)| {
                    self.clip_grads(clip, &mut clip_rng(self.cfg.seed, epoch, first + i))
                })
                .collect();
            let n = chunk.len();
            let scale: T = lit(1.0 / n as f64);
            let mut grads = ParamGrads::empty(self.model.params.len());
            let mut batch_loss = LossBreakdown::default();
            for r in results {
                let (loss, g) = r?;
                if !loss.total.is_finite() || !g.all_finite() {
                    return Err(CoreError::NonFinite(format!(
                        "loss at epoch {epoch}, batch {b}: {loss:?}"
                    )));
                }
                batch_loss.accumulate(&loss, 1.0 / n as f64);
                grads.accumulate(&g, scale);
            }
            self.opt.update(&mut self.model.params, &grads, lr);
            total.accumulate(&batch_loss, n as f64);
            seen += n;
            on_step(&StepLog {
                epoch,
                step: self.opt.steps(),
                lr,
                clips: n,
                grad_norm: grads.global_norm().to_f64_lossy(),
                loss: batch_loss,
            });
        }
        let mut loss = LossBreakdown::default();
        loss.accumulate(&total, 1.0 / seen as f64);
        self.epoch = epoch;
        Ok(EpochLog {
            epoch,
            lr,
            clips: seen,
            seconds: started.elapsed().as_secs_f64(),
            loss,
        })
    }

    /// Mean loss over every clip in index order, without dropout or noise.
    pub fn evaluate_loss(&self) -> Result<LossBreakdown> {
        let mut total = LossBreakdown::default();
        for &clip in &self.index.clips {
            let seq = &self.dataset.sequences[clip.sequence];
            let mut rng = clip_rng(0, 0, 0);
            let batch = make_clip::<T, _>(
                seq,
                &self.dataset.stats,
                &self.model.config.partition,
                clip.start,
                self.cfg.clip_len,
                0.0,
                &mut rng,
            )?;
            let mut tape = Tape::with_params(&self.model.params).without_grad();
            let out = self.model.forward(&mut tape, &batch.input, Mode::Eval)?;
            let vars = objective(
                &mut tape,
                &self.model,
                &out,
                &batch.targets,
                &self.dataset.stats,
                &seq.skeleton,
                &self.cfg.weights,
            )?;
            total.accumulate(&vars.breakdown(&tape), 1.0 / self.index.len() as f64);
        }
        Ok(total)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::new(
            self.model.clone(),
            self.dataset.stats.clone(),
            self.dataset.type_names.clone(),
            self.dataset.sequences[0].skeleton.clone(),
            self.dataset.fps,
            self.epoch,
        )
    }
}

/// Where a run writes its checkpoints.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn epoch_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch-{epoch:05}.tptn"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.tptn")
    }
}

/// Full run: every `checkpoint_every` epochs and at the end a checkpoint is
/// written. On a non-finite loss the error is returned and previously
/// written checkpoints are left as they were.
pub fn train<T: Real>(
    trainer: &mut Trainer<'_, T>,
    out: &RunOutput,
    on_step: &mut dyn FnMut(&StepLog),
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint<T>> {
    std::fs::create_dir_all(&out.dir)?;
    while trainer.epoch() < trainer.cfg.epochs {
        let log = trainer.run_epoch(on_step)?;
        on_epoch(&log);
        let e = trainer.epoch();
        if trainer.cfg.checkpoint_every > 0 && e % trainer.cfg.checkpoint_every == 0 {
            let mut ck = trainer.checkpoint();
            ck.meta.loss = Some(log.loss);
            ck.save(&out.epoch_path(e))?;
        }
    }
    let ck = trainer.checkpoint();
    ck.save(&out.final_path())?;
    Ok(ck)
}
