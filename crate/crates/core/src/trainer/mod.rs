//! Loss aggregation, AdamW, the resumable training loop and checkpoints.

mod loss;
mod optim;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use loss::{matching_loss, total_loss, LossBreakdown, BCE_EPS};
pub use optim::{adamw_step, clip_grad_norm, grad_norm, AdamState, AdamWConfig};

use crate::data::{make_batches, sha256_hex, DialogueSample};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, MetricsReport};
use crate::model::{ModelConfig, StickerModel};
use crate::nn::{Bound, ForwardCtx, ParamStore};
use crate::numcore::{
    grad_check, mix_seed, stream, GradCheckOptions, GradCheckReport, Tape, TapeObjective, Var,
};

const SHUFFLE_TAG: u64 = 0x7368_7566;
const STEP_TAG: u64 = 0x7374_6570;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the knowledge-selection emotion loss.
    pub w_knowledge: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Learning-rate multiplier for single-element parameters (the score
    /// mixing weights), which otherwise move far slower than the network.
    pub scalar_lr_scale: f64,
    /// Stops after this many optimizer steps in total.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: a.lr,
            epochs: 5,
            batch_size: 16,
            seed: 42,
            w_knowledge: 0.5,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            clip_norm: Some(5.0),
            scalar_lr_scale: 50.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.w_knowledge >= 0.0) {
            return Err(Error::Config("train.w_knowledge must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0)
        {
            return Err(Error::Config("optimizer betas must lie in [0, 1) and eps > 0".into()));
        }
        if !(self.scalar_lr_scale > 0.0 && self.scalar_lr_scale.is_finite()) {
            return Err(Error::Config("train.scalar_lr_scale must be > 0".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("train.clip_norm must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

impl StepRecord {
    pub const TSV_HEADER: &'static str =
        "step\tepoch\ttotal\titm\tinter\tintra\tknowledge\ti2t\tt2i\temotion\tintention\tgrad_norm";

    pub fn tsv(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.epoch,
            l.total,
            l.itm,
            l.inter,
            l.intra,
            l.knowledge,
            l.i2t,
            l.t2i,
            l.inter_emotion,
            l.inter_intention,
            self.grad_norm
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub val: Option<MetricsReport>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: u64,
    pub epoch: usize,
    /// Next batch within the current epoch.
    pub cursor: usize,
    pub epoch_loss_sum: f64,
    pub epoch_steps: u64,
    pub best_val_map: Option<f64>,
    pub best_params: Option<ParamStore>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Hash of the configuration that determines the training trajectory.
    pub config_hash: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

/// Hash over everything except the stopping point, so a run may be resumed
/// with a larger step or epoch budget.
pub fn trajectory_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let key = TrainConfig {
        epochs: 0,
        max_steps: None,
        ..train.clone()
    };
    let bytes = serde_json::to_vec(&(model, key)).expect("configs serialize");
    sha256_hex(&bytes)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(ckpt).expect("checkpoint serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_val_map: Option<f64>,
    pub best_params: Option<ParamStore>,
}

/// Forward/backward on one batch: loss breakdown and flattened gradients.
pub fn batch_gradients(
    model: &StickerModel,
    params: &ParamStore,
    batch: &[&DialogueSample],
    w_knowledge: f64,
    ctx: &mut ForwardCtx,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let fwd = model.forward_batch(&mut tape, &p, ctx, batch)?;
    let (loss, breakdown) = total_loss(&mut tape, &fwd, &model.cfg.alignment, w_knowledge)?;
    let grads = tape.backward(loss)?;
    let flat = p
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
        .collect();
    Ok((breakdown, flat))
}

/// Training-mode context for one step; noise depends only on seed and step.
pub fn step_context(model: &StickerModel, seed: u64, step: u64) -> ForwardCtx {
    ForwardCtx::train(
        mix_seed(seed, &[STEP_TAG, step]),
        model.cfg.encoder.dropout_rate,
        model.cfg.fusion.drop_path_rate,
    )
}

/// Finite-difference check of the full training loss on one batch, with
/// every dropout and stochastic-depth draw fixed by `noise_seed`.
pub fn model_grad_check(
    model: &StickerModel,
    params: &ParamStore,
    batch: &[&DialogueSample],
    w_knowledge: f64,
    noise_seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut objective = TapeObjective(|tape: &mut Tape, vars: &[Var]| {
        let p = Bound::from_vars(vars.to_vec());
        let mut ctx = step_context(model, noise_seed, 0);
        let fwd = model.forward_batch(tape, &p, &mut ctx, batch)?;
        Ok(total_loss(tape, &fwd, &model.cfg.alignment, w_knowledge)?.0)
    });
    grad_check(&mut objective, params.names(), params.tensors(), opts)
}

pub struct Trainer<'a> {
    model: &'a StickerModel,
    cfg: TrainConfig,
    train: &'a [DialogueSample],
    val: &'a [DialogueSample],
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a StickerModel,
        params: ParamStore,
        cfg: TrainConfig,
        train: &'a [DialogueSample],
        val: &'a [DialogueSample],
    ) -> Result<Self> {
        cfg.validate()?;
        model.check_compatible(train)?;
        model.check_compatible(val)?;
        if train.is_empty() && cfg.epochs > 0 {
            return Err(Error::Config("no training samples".into()));
        }
        let adam = AdamState::new(params.tensors());
        Ok(Self {
            model,
            cfg,
            train,
            val,
            state: TrainState {
                params,
                adam,
                step: 0,
                epoch: 0,
                cursor: 0,
                epoch_loss_sum: 0.0,
                epoch_steps: 0,
                best_val_map: None,
                best_params: None,
                epochs: Vec::new(),
            },
        })
    }

    /// Continues from `ckpt`; `cfg` may differ only in its stopping point.
    pub fn resume(
        model: &'a StickerModel,
        ckpt: Checkpoint,
        cfg: TrainConfig,
        train: &'a [DialogueSample],
        val: &'a [DialogueSample],
    ) -> Result<Self> {
        if ckpt.config_hash != trajectory_hash(&model.cfg, &cfg) {
            return Err(Error::Config(
                "checkpoint was written under a different model or training configuration".into(),
            ));
        }
        let mut t = Self::new(model, ckpt.state.params.clone(), cfg, train, val)?;
        t.state = ckpt.state;
        Ok(t)
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: trajectory_hash(&self.model.cfg, &self.cfg),
            model: self.model.cfg.clone(),
            train: self.cfg.clone(),
            state: self.state.clone(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
            || self.cfg.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// Batches of `epoch`, from a shuffle keyed on the seed and epoch.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut stream(self.cfg.seed, &[SHUFFLE_TAG, epoch as u64]));
        make_batches(&order, self.cfg.batch_size).expect("batch size validated")
    }

    /// One optimizer step; `None` once the budget is spent.
    pub fn step(&mut self) -> Result<Option<StepRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        let batches = self.epoch_batches(self.state.epoch);
        let batch: Vec<&DialogueSample> = batches[self.state.cursor]
            .iter()
            .map(|&i| &self.train[i])
            .collect();
        let mut ctx = step_context(self.model, self.cfg.seed, self.state.step);
        let (loss, mut grads) = batch_gradients(
            self.model,
            &self.state.params,
            &batch,
            self.cfg.w_knowledge,
            &mut ctx,
        )?;
        let norm = match self.cfg.clip_norm {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => grad_norm(&grads),
        };
        let scales: Vec<f64> = self
            .state
            .params
            .tensors()
            .iter()
            .map(|t| if t.numel() == 1 { self.cfg.scalar_lr_scale } else { 1.0 })
            .collect();
        adamw_step(
            self.state.params.tensors_mut(),
            &grads,
            &mut self.state.adam,
            &self.cfg.optimizer(),
            &scales,
        )?;
        let record = StepRecord {
            step: self.state.step,
            epoch: self.state.epoch,
            loss,
            grad_norm: norm,
        };
        self.state.step += 1;
        self.state.cursor += 1;
        self.state.epoch_loss_sum += loss.total;
        self.state.epoch_steps += 1;
        if self.state.cursor == batches.len() {
            self.finish_epoch()?;
        }
        Ok(Some(record))
    }

    fn finish_epoch(&mut self) -> Result<()> {
        let val = if self.val.is_empty() {
            None
        } else {
            Some(evaluate(self.model, &self.state.params, self.val)?.0)
        };
        if let Some(v) = &val {
            if self.state.best_val_map.is_none_or(|b| v.map > b) {
                self.state.best_val_map = Some(v.map);
                self.state.best_params = Some(self.state.params.clone());
            }
        }
        let s = &mut self.state;
        s.epochs.push(EpochRecord {
            epoch: s.epoch,
            steps: s.epoch_steps,
            mean_loss: s.epoch_loss_sum / s.epoch_steps.max(1) as f64,
            val,
        });
        s.epoch += 1;
        s.cursor = 0;
        s.epoch_loss_sum = 0.0;
        s.epoch_steps = 0;
        Ok(())
    }

    /// Steps until the budget is spent, calling `on_step` after each.
    pub fn run_with<F: FnMut(&Self, &StepRecord) -> Result<()>>(
        &mut self,
        mut on_step: F,
    ) -> Result<FitReport> {
        let mut steps = Vec::new();
        while let Some(r) = self.step()? {
            on_step(self, &r)?;
            steps.push(r);
        }
        Ok(FitReport {
            steps,
            epochs: self.state.epochs.clone(),
            best_val_map: self.state.best_val_map,
            best_params: self.state.best_params.clone(),
        })
    }

    pub fn run(&mut self) -> Result<FitReport> {
        self.run_with(|_, _| Ok(()))
    }
}
