//! Optimization machinery and the two-phase training protocol: Adam with L2
//! weight decay, early stopping on a held-out validation split, phase 1
//! (base model), phase 2 (residual mixture with the base frozen), and the
//! from-scratch mixture ablation.

use crate::data::{targets_of, EventVocabulary, WindowedSequence};
use crate::layers::{param_hash, Parameters};
use crate::models::{BaseModel, MoeModel, MoeParams, RmoeModel};
use crate::tensor::{derive_seed, Rng};
use std::fmt::Write as _;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("frozen base parameters changed during epoch {epoch}")]
    FreezeViolated { epoch: usize },
    #[error("invalid training setup: {0}")]
    Invalid(String),
}

/// Training hyperparameters. Defaults follow the base-model settings; the
/// residual phase conventionally runs with lr 0.0005 and a much larger λ.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// false = classic coupled L2 (decay added to the gradient before the
    /// moments); true = decoupled decay applied directly to the weights.
    pub decoupled_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            l2: 1e-5,
            max_epochs: 100,
            patience: 5,
            batch_size: 1,
            seed: 42,
            val_fraction: 0.1,
            decoupled_decay: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TrainError::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(TrainError::Invalid("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Invalid("batch_size must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TrainError::Invalid(format!(
                "val_fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        if self.l2 < 0.0 || !self.l2.is_finite() {
            return Err(TrainError::Invalid(format!("l2 must be non-negative, got {}", self.l2)));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS_ADAM: f64 = 1e-8;

/// Adam moment state, flat and aligned with the parameter visit order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. With coupled decay the gradient becomes g + λ·θ before
/// the moment update; with decoupled decay the weights shrink by lr·λ·θ
/// after the Adam step.
pub fn adam_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    lr: f64,
    l2: f64,
    decoupled: bool,
) {
    let gflat = grads.flatten();
    assert_eq!(
        gflat.len(),
        state.m.len(),
        "adam: {} gradients but state for {}",
        gflat.len(),
        state.m.len()
    );
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    let mut off = 0;
    params.visit_mut(&mut |_, _, slice| {
        for (i, theta) in slice.iter_mut().enumerate() {
            let idx = off + i;
            let g = if decoupled {
                gflat[idx]
            } else {
                gflat[idx] + l2 * *theta
            };
            state.m[idx] = BETA1 * state.m[idx] + (1.0 - BETA1) * g;
            state.v[idx] = BETA2 * state.v[idx] + (1.0 - BETA2) * g * g;
            let m_hat = state.m[idx] / bc1;
            let v_hat = state.v[idx] / bc2;
            let mut next = *theta - lr * m_hat / (v_hat.sqrt() + EPS_ADAM);
            if decoupled {
                next -= lr * l2 * *theta;
            }
            *theta = next;
        }
        off += slice.len();
    });
    assert_eq!(off, gflat.len());
}

/// True iff the minimum validation loss lies more than `patience` epochs in
/// the past (ties resolve to the earliest epoch).
pub fn early_stop_check(val_losses: &[f64], patience: usize) -> bool {
    assert!(!val_losses.is_empty(), "early_stop_check on empty history");
    let mut best = 0;
    for (i, &v) in val_losses.iter().enumerate() {
        if v < val_losses[best] {
            best = i;
        }
    }
    val_losses.len() - 1 - best >= patience
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

/// Per-epoch record of one training run. `best_epoch` is 1-based; 0 means no
/// epoch ran.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for (i, e) in self.epochs.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.3}",
                i + 1,
                e.train_loss,
                e.val_loss,
                e.seconds
            );
        }
        out
    }
}

/// A model one training phase can fit: exposes per-sequence loss/gradients
/// over its trainable parameter set, plus an optional frozen-part hash the
/// loop re-checks every epoch.
trait Trainee {
    type Trainable: Parameters + Clone;
    fn loss_grads(&self, seq: &WindowedSequence, targets: &[Vec<u8>]) -> (f64, Self::Trainable);
    fn seq_loss(&self, seq: &WindowedSequence, targets: &[Vec<u8>]) -> f64;
    fn trainable(&self) -> &Self::Trainable;
    fn trainable_mut(&mut self) -> &mut Self::Trainable;
    fn frozen_hash(&self) -> Option<u64> {
        None
    }
}

impl Trainee for BaseModel {
    type Trainable = BaseModel;
    fn loss_grads(&self, seq: &WindowedSequence, targets: &[Vec<u8>]) -> (f64, BaseModel) {
        self.seq_loss_grads(seq, targets)
    }
    fn seq_loss(&self, seq: &WindowedSequence, targets: &[Vec<u8>]) -> f64 {
        BaseModel::seq_loss(self, seq, targets)
    }
    fn trainable(&self) -> &BaseModel {
        self
    }
    fn trainable_mut(&mut self) -> &mut BaseModel {
        self
    }
}

impl Trainee for MoeModel {
    type Trainable = MoeModel;
    fn loss_grads(&self, seq: &WindowedSequence, targets: &[Vec<u8>]) -> (f64, MoeModel) {
        self.seq_loss_grads(seq, targets)
    }
    fn seq_loss(&self, seq: &WindowedSequence, targets: &[Vec<u8>]) -> f64 {
        MoeModel::seq_loss(self, seq, targets)
    }
    fn trainable(&self) -> &MoeModel {
        self
    }
    fn trainable_mut(&mut self) -> &mut MoeModel {
        self
    }
}

impl Trainee for RmoeModel {
    type Trainable = MoeParams;
    fn loss_grads(&self, seq: &WindowedSequence, targets: &[Vec<u8>]) -> (f64, MoeParams) {
        self.seq_loss_grads(seq, targets)
    }
    fn seq_loss(&self, seq: &WindowedSequence, targets: &[Vec<u8>]) -> f64 {
        RmoeModel::seq_loss(self, seq, targets)
    }
    fn trainable(&self) -> &MoeParams {
        &self.moe
    }
    fn trainable_mut(&mut self) -> &mut MoeParams {
        &mut self.moe
    }
    fn frozen_hash(&self) -> Option<u64> {
        Some(param_hash(&self.base))
    }
}

struct PreparedData<'a> {
    fit: Vec<(&'a WindowedSequence, Vec<Vec<u8>>)>,
    val: Vec<(&'a WindowedSequence, Vec<Vec<u8>>)>,
}

/// Stable shuffle of the training sequences under the seed; the tail
/// val_fraction becomes the internal validation set.
fn prepare<'a>(
    data: &'a [WindowedSequence],
    vocab: &EventVocabulary,
    cfg: &TrainConfig,
) -> Result<PreparedData<'a>, TrainError> {
    if data.len() < 2 {
        return Err(TrainError::Invalid(format!(
            "need at least 2 training sequences, got {}",
            data.len()
        )));
    }
    for seq in data {
        if seq.windows.len() < 2 {
            return Err(TrainError::Invalid(format!(
                "sequence {} has {} windows, need at least 2",
                seq.id,
                seq.windows.len()
            )));
        }
        if seq.windows[0].len() != vocab.n_events() {
            return Err(TrainError::Invalid(format!(
                "sequence {} has {} event slots but vocabulary has {}",
                seq.id,
                seq.windows[0].len(),
                vocab.n_events()
            )));
        }
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::new(derive_seed(cfg.seed, 0x5AB1)).shuffle(&mut order);
    let n_val = ((data.len() as f64 * cfg.val_fraction).floor() as usize).clamp(1, data.len() - 1);
    let (fit_idx, val_idx) = order.split_at(data.len() - n_val);
    let with_targets = |idx: &[usize]| -> Vec<(&WindowedSequence, Vec<Vec<u8>>)> {
        idx.iter()
            .map(|&i| (&data[i], targets_of(&data[i], vocab)))
            .collect()
    };
    Ok(PreparedData {
        fit: with_targets(fit_idx),
        val: with_targets(val_idx),
    })
}

/// Shared epoch loop: shuffled batches, Adam, per-epoch validation, early
/// stopping, best-checkpoint restore, freeze re-check.
fn fit<T: Trainee>(
    model: &mut T,
    prepared: &PreparedData<'_>,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    let frozen_hash = model.frozen_hash();
    let mut adam = AdamState::new(model.trainable().param_count());
    let mut history = TrainHistory::default();
    let mut val_losses: Vec<f64> = Vec::new();
    let mut best: Option<(f64, T::Trainable)> = None;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..prepared.fit.len()).collect();
        Rng::new(derive_seed(cfg.seed, 0xE40C + epoch as u64)).shuffle(&mut order);

        let mut train_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<T::Trainable> = None;
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let (seq, targets) = &prepared.fit[i];
                let (loss, grads) = model.loss_grads(seq, targets);
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { epoch });
                }
                train_loss += loss;
                match acc.as_mut() {
                    None => {
                        let mut g = grads;
                        if batch.len() > 1 {
                            scale_params(&mut g, inv);
                        }
                        acc = Some(g);
                    }
                    Some(a) => add_params(a, &grads, inv),
                }
            }
            let grads = acc.expect("non-empty batch");
            adam_step(
                model.trainable_mut(),
                &grads,
                &mut adam,
                cfg.lr,
                cfg.l2,
                cfg.decoupled_decay,
            );
        }
        train_loss /= prepared.fit.len() as f64;

        let mut val_loss = 0.0;
        for (seq, targets) in &prepared.val {
            val_loss += model.seq_loss(seq, targets);
        }
        val_loss /= prepared.val.len() as f64;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }

        if let Some(expected) = frozen_hash {
            let now = model.frozen_hash().expect("frozen part still present");
            if now != expected {
                return Err(TrainError::FreezeViolated { epoch });
            }
        }

        history.epochs.push(EpochStats {
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        val_losses.push(val_loss);
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, model.trainable().clone()));
            history.best_epoch = epoch;
        }
        if early_stop_check(&val_losses, cfg.patience) {
            break;
        }
    }

    if let Some((_, snapshot)) = best {
        *model.trainable_mut() = snapshot;
    }
    debug_assert!(history.epochs_run() <= history.best_epoch + cfg.patience + 1);
    Ok(history)
}

fn scale_params<P: Parameters>(p: &mut P, factor: f64) {
    p.visit_mut(&mut |_, _, s| {
        for v in s {
            *v *= factor;
        }
    });
}

fn add_params<P: Parameters>(acc: &mut P, other: &P, factor: f64) {
    let flat = other.flatten();
    let mut off = 0;
    acc.visit_mut(&mut |_, _, s| {
        let len = s.len();
        for (a, b) in s.iter_mut().zip(&flat[off..off + len]) {
            *a += factor * b;
        }
        off += len;
    });
}

/// Phase 1: train the population-wide base model from scratch. The returned
/// model is the best-validation checkpoint, not the last epoch's.
pub fn train_base(
    data: &[WindowedSequence],
    vocab: &EventVocabulary,
    cfg: &TrainConfig,
    emb_dim: usize,
    hidden_dim: usize,
) -> Result<(BaseModel, TrainHistory), TrainError> {
    cfg.validate()?;
    let prepared = prepare(data, vocab, cfg)?;
    let mut model = BaseModel::new(
        vocab.n_events(),
        vocab.n_targets(),
        emb_dim,
        hidden_dim,
        &mut Rng::new(derive_seed(cfg.seed, 0x1411)),
    );
    let history = fit(&mut model, &prepared, cfg)?;
    Ok((model, history))
}

/// Phase 2: freeze the trained base and fit the mixture on the residual
/// signal. Only expert and gating parameters receive updates; a hash of the
/// base parameters is re-checked every epoch.
pub fn train_rmoe(
    base: BaseModel,
    data: &[WindowedSequence],
    vocab: &EventVocabulary,
    cfg: &TrainConfig,
    n_experts: usize,
    expert_hidden: usize,
    combine: crate::models::Combine,
) -> Result<(RmoeModel, TrainHistory), TrainError> {
    cfg.validate()?;
    let prepared = prepare(data, vocab, cfg)?;
    let mut model = RmoeModel::new(
        base,
        n_experts,
        expert_hidden,
        &mut Rng::new(derive_seed(cfg.seed, 0x2412)),
    );
    model.combine = combine;
    model.freeze_base();
    let history = fit(&mut model, &prepared, cfg)?;
    Ok((model, history))
}

/// Ablation: the mixture of experts trained end-to-end as the sole
/// predictor, with its own fresh embedding.
pub fn train_moe(
    data: &[WindowedSequence],
    vocab: &EventVocabulary,
    cfg: &TrainConfig,
    emb_dim: usize,
    n_experts: usize,
    expert_hidden: usize,
) -> Result<(MoeModel, TrainHistory), TrainError> {
    cfg.validate()?;
    let prepared = prepare(data, vocab, cfg)?;
    let mut model = MoeModel::new(
        vocab.n_events(),
        vocab.n_targets(),
        emb_dim,
        n_experts,
        expert_hidden,
        &mut Rng::new(derive_seed(cfg.seed, 0x3413)),
    );
    let history = fit(&mut model, &prepared, cfg)?;
    Ok((model, history))
}
