//! Staged training: ASR pretraining, summarization fine-tuning and augmented
//! fine-tuning, with Adam, Noam or plateau schedules and modality-pure batches.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BpeModel, Modality, Role, Utterance};
use crate::error::{Error, Result};
use crate::model::{frame_target, CheckpointMeta, Example, ForwardOptions, Model, ModelInput};
use crate::seed::derive_seed;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Asr,
    Ssum,
    Augmented,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Asr => "asr",
            StageKind::Ssum => "ssum",
            StageKind::Augmented => "augmented",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetField {
    Transcript,
    Summary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    NoamWarmup,
    Plateau,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchRule {
    FixedCount,
    MaxTotalLength,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: StageKind,
    pub dataset_roles: Vec<Role>,
    pub target_field: TargetField,
    pub base_lr: f64,
    /// Absolute learning rates for whole modules; `0` freezes a module.
    #[serde(default)]
    pub per_module_lr: BTreeMap<String, f64>,
    pub scheduler: Scheduler,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default = "default_factor")]
    pub plateau_factor: f64,
    #[serde(default)]
    pub plateau_patience: usize,
    pub batch_rule: BatchRule,
    pub batch_size_or_cap: usize,
    #[serde(default)]
    pub weight_decay: f64,
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Start from fresh optimizer moments instead of those handed in.
    #[serde(default = "default_true")]
    pub reset_moments: bool,
    /// Stops the stage early once this many updates ran.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

fn default_factor() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

impl StageConfig {
    /// Stage (i) at full scale: Noam, peak 2e-3, 40k warmup, batches of 512.
    pub fn asr_full() -> Self {
        StageConfig {
            stage: StageKind::Asr,
            dataset_roles: vec![Role::Asr],
            target_field: TargetField::Transcript,
            base_lr: 2e-3,
            per_module_lr: BTreeMap::new(),
            scheduler: Scheduler::NoamWarmup,
            warmup_steps: 40_000,
            plateau_factor: 0.5,
            plateau_patience: 0,
            batch_rule: BatchRule::FixedCount,
            batch_size_or_cap: 512,
            weight_decay: 1e-5,
            max_epochs: 100,
            seed: 1,
            reset_moments: true,
            max_steps: None,
        }
    }

    /// Stage (ii) at full scale: lr 1e-4 halved on plateau, batches of 30.
    pub fn ssum_full() -> Self {
        StageConfig {
            stage: StageKind::Ssum,
            dataset_roles: vec![Role::Sum],
            target_field: TargetField::Summary,
            base_lr: 1e-4,
            scheduler: Scheduler::Plateau,
            warmup_steps: 0,
            batch_size_or_cap: 30,
            ..Self::asr_full()
        }
    }

    /// Stage (iii) at full scale: decoder and phoneme pre-encoder at 1e-3, at most
    /// 300,000 input frames per batch.
    pub fn augmented_full() -> Self {
        StageConfig {
            stage: StageKind::Augmented,
            dataset_roles: vec![Role::Sum, Role::Ext],
            per_module_lr: [("decoder".to_string(), 1e-3), ("phoneme_preencoder".to_string(), 1e-3)].into(),
            batch_rule: BatchRule::MaxTotalLength,
            batch_size_or_cap: 300_000,
            ..Self::ssum_full()
        }
    }

    pub fn asr_toy() -> Self {
        StageConfig {
            base_lr: 2e-3,
            warmup_steps: 400,
            batch_size_or_cap: 16,
            max_epochs: 6,
            ..Self::asr_full()
        }
    }

    pub fn ssum_toy() -> Self {
        StageConfig {
            base_lr: 5e-4,
            batch_size_or_cap: 16,
            max_epochs: 4,
            ..Self::ssum_full()
        }
    }

    pub fn augmented_toy() -> Self {
        StageConfig {
            batch_size_or_cap: 1_000,
            max_epochs: 4,
            ..Self::augmented_full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "asr" | "asr_toy" => Ok(Self::asr_toy()),
            "ssum" | "ssum_toy" => Ok(Self::ssum_toy()),
            "augmented" | "augmented_toy" => Ok(Self::augmented_toy()),
            "asr_full" => Ok(Self::asr_full()),
            "ssum_full" => Ok(Self::ssum_full()),
            "augmented_full" => Ok(Self::augmented_full()),
            other => Err(Error::Config(format!("unknown stage preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr {} must be positive", self.base_lr));
        }
        for (module, lr) in &self.per_module_lr {
            if !crate::model::params::MODULES.contains(&module.as_str()) {
                return fail(format!("per_module_lr names unknown module {module:?}"));
            }
            if !(*lr >= 0.0 && lr.is_finite()) {
                return fail(format!("learning rate {lr} for {module} must be non-negative"));
            }
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail(format!("plateau_factor {} must lie in (0, 1)", self.plateau_factor));
        }
        if self.batch_size_or_cap == 0 {
            return fail("batch_size_or_cap must be positive".into());
        }
        if self.scheduler == Scheduler::NoamWarmup && self.warmup_steps == 0 {
            return fail("noam_warmup needs warmup_steps > 0".into());
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative".into());
        }
        let mut roles = self.dataset_roles.clone();
        roles.sort_by_key(|r| *r as u8);
        roles.dedup();
        let (want_roles, want_target): (&[Role], TargetField) = match self.stage {
            StageKind::Asr => (&[Role::Asr], TargetField::Transcript),
            StageKind::Ssum => (&[Role::Sum], TargetField::Summary),
            StageKind::Augmented => (&[Role::Sum, Role::Ext], TargetField::Summary),
        };
        if roles != want_roles || self.target_field != want_target {
            return fail(format!(
                "stage {} needs roles {:?} with {:?} targets, got {:?} with {:?}",
                self.stage.name(),
                want_roles,
                want_target,
                self.dataset_roles,
                self.target_field
            ));
        }
        Ok(())
    }
}

/// Peak-normalized Noam schedule: linear warmup to `peak_lr`, then inverse square root.
pub fn noam_lr(step: u64, peak_lr: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak_lr * (s / w).min((w / s).sqrt())
}

/// Reduce-on-plateau state tracking the best validation metric so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    bad_epochs: usize,
    pub scale: f64,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Plateau {
            factor,
            patience,
            best: None,
            bad_epochs: 0,
            scale: 1.0,
        }
    }

    /// Records one epoch's metric and returns the learning-rate multiplier.
    pub fn observe(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(b) if metric <= b => {
                self.bad_epochs += 1;
                if self.bad_epochs > self.patience {
                    self.scale *= self.factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
            }
        }
        self.scale
    }
}

/// Learning rate after replaying `history` through the plateau rule.
pub fn plateau_lr(history: &[f64], lr: f64, factor: f64, patience: usize) -> f64 {
    let mut p = Plateau::new(factor, patience);
    history.iter().fold(1.0, |_, &m| p.observe(m)) * lr
}

/// Adam with coupled L2 weight decay (`g + wd * theta`).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &[Mat], weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; `lrs[i]` is the learning rate of tensor `i`. Tensors with rate 0
    /// or an all-zero gradient (not reached by the batch) are left untouched, so
    /// weight decay cannot drift modules of the other modality.
    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat], lrs: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if lrs[i] == 0.0 || grads[i].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let p = params[i].data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g[j] + self.weight_decay * p[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lrs[i] * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// What batching needs to know about one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub len: usize,
    pub modality: Modality,
    pub real: bool,
}

impl From<&Utterance> for BatchItem {
    fn from(u: &Utterance) -> Self {
        BatchItem {
            len: u.num_frames(),
            modality: u.modality(),
            real: u.role.is_real(),
        }
    }
}

/// Groups items by (modality, origin), sorts each group by length and packs it,
/// then shuffles the batch order. Returns indices into `items`.
pub fn make_batches(items: &[BatchItem], rule: BatchRule, cap_or_count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(u8, bool), Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        groups.entry((it.modality as u8, it.real)).or_default().push(i);
    }
    let cap = cap_or_count.max(1);
    let mut batches = Vec::new();
    for (_, mut idx) in groups {
        idx.sort_by_key(|&i| (items[i].len, i));
        match rule {
            BatchRule::FixedCount => batches.extend(idx.chunks(cap).map(<[usize]>::to_vec)),
            BatchRule::MaxTotalLength => {
                let mut cur: Vec<usize> = Vec::new();
                let mut total = 0;
                for i in idx {
                    let len = items[i].len;
                    if !cur.is_empty() && total + len > cap {
                        batches.push(std::mem::take(&mut cur));
                        total = 0;
                    }
                    cur.push(i);
                    total += len;
                }
                if !cur.is_empty() {
                    batches.push(cur);
                }
            }
        }
    }
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batches
}

/// Tokenizes the target field of each utterance, framed and clipped to what the
/// decoder can take.
pub fn targets_for(utts: &[Utterance], field: TargetField, bpe: &BpeModel, max_target_len: usize) -> Vec<Vec<u32>> {
    utts.iter()
        .map(|u| {
            let words = match field {
                TargetField::Transcript => &u.transcript,
                TargetField::Summary => &u.summary,
            };
            let mut ids = bpe.encode(words);
            ids.truncate(max_target_len.saturating_sub(1));
            frame_target(&ids)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    pub n_tokens: usize,
}

/// Teacher-forced loss and token accuracy pooled over all target tokens.
pub fn evaluate_accuracy(model: &Model, utts: &[Utterance], targets: &[Vec<u32>], batch: usize) -> Result<EvalStats> {
    if utts.is_empty() {
        return Err(Error::Data("no validation utterances".into()));
    }
    let (mut loss, mut correct, mut tokens) = (0.0, 0, 0);
    let idx: Vec<usize> = (0..utts.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let ex: Vec<Example> = chunk
            .iter()
            .map(|&i| Example {
                input: ModelInput::from(&utts[i]),
                target: &targets[i],
            })
            .collect();
        let s = model.forward_loss(&ex)?;
        loss += s.loss * s.n_tokens as f64;
        correct += s.n_correct;
        tokens += s.n_tokens;
    }
    Ok(EvalStats {
        loss: loss / tokens as f64,
        accuracy: correct as f64 / tokens as f64,
        n_tokens: tokens,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainCheckpoint {
    pub model: Model,
    pub stage: StageKind,
    pub epoch: usize,
    pub step: u64,
    pub validation_accuracy: f64,
}

impl TrainCheckpoint {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            stage: self.stage.name().into(),
            epoch: self.epoch,
            step: self.step,
            val_metric: Some(self.validation_accuracy),
        }
    }
}

/// Highest validation accuracy; the earliest epoch wins ties.
pub fn select_checkpoint(history: &[TrainCheckpoint]) -> Result<&TrainCheckpoint> {
    let mut best: Option<&TrainCheckpoint> = None;
    for c in history {
        if best.map_or(true, |b| c.validation_accuracy > b.validation_accuracy) {
            best = Some(c);
        }
    }
    best.ok_or_else(|| Error::Data("no checkpoints to select from".into()))
}

pub struct StageData<'a> {
    pub train: &'a [Utterance],
    pub valid: &'a [Utterance],
    pub bpe: &'a BpeModel,
}

pub struct StageOutcome {
    /// Parameters after the last epoch.
    pub last: TrainCheckpoint,
    /// Best validation accuracy over the epochs (earliest on ties).
    pub best: TrainCheckpoint,
    pub history: Vec<EpochRecord>,
    pub optimizer: Adam,
}

fn check_roles(utts: &[Utterance], stage: &StageConfig, split: &str) -> Result<()> {
    if let Some(u) = utts.iter().find(|u| !stage.dataset_roles.contains(&u.role)) {
        return Err(Error::Config(format!(
            "{split} utterance {} has role {:?}, stage {} takes {:?}",
            u.id,
            u.role,
            stage.stage.name(),
            stage.dataset_roles
        )));
    }
    Ok(())
}

/// Runs one stage. Validation uses the stage's target field on `data.valid`.
/// `log` receives one tab-separated record per epoch.
pub fn train_stage(
    model: Model,
    optimizer: Option<Adam>,
    stage: &StageConfig,
    data: &StageData,
    mut log: Option<&mut dyn Write>,
) -> Result<StageOutcome> {
    stage.validate()?;
    check_roles(data.train, stage, "train")?;
    if data.train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let max_len = model.config.max_target_len;
    let train_targets = targets_for(data.train, stage.target_field, data.bpe, max_len);
    let valid_targets = targets_for(data.valid, stage.target_field, data.bpe, max_len);
    let items: Vec<BatchItem> = data.train.iter().map(BatchItem::from).collect();

    let module_lr: Vec<f64> = (0..model.layout.len())
        .map(|i| {
            let module = model.layout.module_of(i);
            *stage.per_module_lr.get(module).unwrap_or(&stage.base_lr)
        })
        .collect();
    let mut opt = match optimizer {
        Some(o) if !stage.reset_moments => Adam {
            weight_decay: stage.weight_decay,
            ..o
        },
        _ => Adam::new(&model.params, stage.weight_decay),
    };
    let mut plateau = Plateau::new(stage.plateau_factor, stage.plateau_patience);
    let dropout = model.config.dropout;
    let mut model = model;
    let mut step: u64 = 0;
    let mut history = Vec::new();

    let snapshot = |model: &Model, epoch, step, acc| TrainCheckpoint {
        model: model.clone(),
        stage: stage.stage,
        epoch,
        step,
        validation_accuracy: acc,
    };
    let initial_acc = if data.valid.is_empty() {
        0.0
    } else {
        evaluate_accuracy(&model, data.valid, &valid_targets, 16)?.accuracy
    };
    let mut best = snapshot(&model, 0, 0, initial_acc);
    let mut best_is_initial = true;

    'epochs: for epoch in 1..=stage.max_epochs {
        let batches = make_batches(
            &items,
            stage.batch_rule,
            stage.batch_size_or_cap,
            derive_seed(stage.seed, &format!("batches/{epoch}")),
        );
        let (mut loss_sum, mut tok_sum) = (0.0, 0usize);
        let mut lr_now = stage.base_lr;
        for batch in batches {
            if stage.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            step += 1;
            let ex: Vec<Example> = batch
                .iter()
                .map(|&i| Example {
                    input: ModelInput::from(&data.train[i]),
                    target: &train_targets[i],
                })
                .collect();
            let opts = ForwardOptions {
                dropout,
                seed: derive_seed(stage.seed, &format!("dropout/{step}")),
            };
            let (stats, grads) = model.loss_and_grads(&ex, opts)?;
            let scale = match stage.scheduler {
                Scheduler::NoamWarmup => noam_lr(step, 1.0, stage.warmup_steps),
                Scheduler::Plateau => plateau.scale,
            };
            let lrs: Vec<f64> = module_lr.iter().map(|lr| lr * scale).collect();
            lr_now = stage.base_lr * scale;
            opt.step(&mut model.params, &grads, &lrs);
            if model.params.iter().any(|p| !p.all_finite()) {
                return Err(Error::Numerical(format!("non-finite parameters after step {step}")));
            }
            loss_sum += stats.loss * stats.n_tokens as f64;
            tok_sum += stats.n_tokens;
        }
        if tok_sum == 0 {
            break 'epochs;
        }
        let val = if data.valid.is_empty() {
            EvalStats {
                loss: f64::NAN,
                accuracy: 0.0,
                n_tokens: 0,
            }
        } else {
            evaluate_accuracy(&model, data.valid, &valid_targets, 16)?
        };
        if stage.scheduler == Scheduler::Plateau {
            plateau.observe(val.accuracy);
        }
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / tok_sum as f64,
            val_accuracy: val.accuracy,
            val_loss: val.loss,
            lr: lr_now,
            steps: step,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(
                w,
                "epoch={}\tloss={:.6}\tval_accuracy={:.6}\tlr={:.3e}",
                rec.epoch, rec.loss, rec.val_accuracy, rec.lr
            )
            .map_err(|e| Error::Data(format!("writing training log: {e}")))?;
        }
        if best_is_initial || val.accuracy > best.validation_accuracy {
            best = snapshot(&model, epoch, step, val.accuracy);
            best_is_initial = false;
        }
        history.push(rec);
    }
    let last_acc = history.last().map_or(initial_acc, |r| r.val_accuracy);
    let last = snapshot(&model, history.len(), step, last_acc);
    Ok(StageOutcome {
        last,
        best,
        history,
        optimizer: opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{train_bpe, FeatureMatrix, UtteranceInput};
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn noam_shape() {
        assert_eq!(noam_lr(400, 2e-3, 400), 2e-3);
        assert!((noam_lr(200, 2e-3, 400) - 1e-3).abs() < 1e-15);
        assert!((noam_lr(1600, 2e-3, 400) - 1e-3).abs() < 1e-15);
        for s in 1..400 {
            assert!(noam_lr(s, 1.0, 400) < noam_lr(s + 1, 1.0, 400));
        }
        for s in 400..2000 {
            assert!(noam_lr(s, 1.0, 400) > noam_lr(s + 1, 1.0, 400));
        }
    }

    #[test]
    fn plateau_rule() {
        assert_eq!(plateau_lr(&[0.1, 0.2, 0.3], 1e-4, 0.5, 0), 1e-4);
        assert_eq!(plateau_lr(&[0.5, 0.5, 0.5], 1.0, 0.5, 0), 0.25);
        assert_eq!(plateau_lr(&[0.5, 0.5, 0.5], 1.0, 0.5, 1), 0.5);
        assert_eq!(plateau_lr(&[0.5, 0.4, 0.6, 0.6], 1.0, 0.5, 0), 0.25);
        assert_eq!(StageConfig::ssum_full().plateau_factor, 0.5);
    }

    #[test]
    fn adam_single_parameter() {
        let mut p = vec![Mat::filled(1, 1, 1.0)];
        let mut opt = Adam::new(&p, 0.0);
        opt.step(&mut p, &[Mat::filled(1, 1, 0.5)], &[0.1]);
        // m = 0.05, v = 0.005; bias-corrected 0.5 and 0.25.
        let want = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-9);
        assert!((p[0].get(0, 0) - want).abs() < 1e-12);
        opt.step(&mut p, &[Mat::filled(1, 1, -0.2)], &[0.1]);
        let m: f64 = 0.9 * 0.05 + 0.1 * -0.2;
        let v: f64 = 0.98 * 0.005 + 0.02 * 0.04;
        let want2 = want - 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.98f64.powi(2))).sqrt() + 1e-9);
        assert!((p[0].get(0, 0) - want2).abs() < 1e-12);
    }

    #[test]
    fn adam_weight_decay_is_coupled() {
        let mut p = vec![Mat::filled(1, 1, 2.0)];
        let mut opt = Adam::new(&p, 0.1);
        opt.step(&mut p, &[Mat::filled(1, 1, 0.1)], &[0.01]);
        // g' = 0.1 + 0.1 * 2 = 0.3; a first Adam step moves by lr.
        assert!((p[0].get(0, 0) - (2.0 - 0.01 * 0.3 / (0.3 + 1e-9))).abs() < 1e-12);
        let before = p[0].clone();
        opt.step(&mut p, &[Mat::filled(1, 1, 0.0)], &[0.01]);
        assert_eq!(p[0], before);
    }

    #[test]
    fn packing_examples() {
        let it = |len| BatchItem {
            len,
            modality: Modality::Speech,
            real: true,
        };
        let items = [it(150), it(100), it(100)];
        let mut b = make_batches(&items, BatchRule::MaxTotalLength, 250, 3);
        b.sort();
        assert_eq!(b, vec![vec![0], vec![1, 2]]);
        let b = make_batches(&[it(900)], BatchRule::MaxTotalLength, 250, 3);
        assert_eq!(b, vec![vec![0]]);
    }

    #[test]
    fn select_checkpoint_ties_go_early() {
        let m = Model::new(ModelConfig::tiny(), 1).unwrap();
        let ck = |epoch, acc| TrainCheckpoint {
            model: m.clone(),
            stage: StageKind::Ssum,
            epoch,
            step: 0,
            validation_accuracy: acc,
        };
        assert_eq!(select_checkpoint(&[ck(1, 0.3)]).unwrap().epoch, 1);
        assert_eq!(select_checkpoint(&[ck(1, 0.6), ck(2, 0.9), ck(3, 0.9)]).unwrap().epoch, 2);
        assert_eq!(select_checkpoint(&[ck(1, 0.6), ck(2, 0.9), ck(3, 0.8)]).unwrap().epoch, 2);
        assert!(matches!(select_checkpoint(&[]), Err(Error::Data(_))));
    }

    #[test]
    fn stage_role_checks() {
        for s in [StageConfig::asr_toy(), StageConfig::ssum_toy(), StageConfig::augmented_toy()] {
            s.validate().unwrap();
        }
        let mut s = StageConfig::ssum_toy();
        s.target_field = TargetField::Transcript;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = StageConfig::asr_toy();
        s.dataset_roles = vec![Role::Asr, Role::Ext];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let a = StageConfig::augmented_full();
        assert_eq!(a.base_lr, 1e-4);
        assert_eq!(a.per_module_lr["decoder"], 1e-3);
        assert_eq!(a.batch_size_or_cap, 300_000);
    }

    fn tiny_data(n: usize, seed: u64) -> (Vec<Utterance>, BpeModel) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = ["ab", "ba", "aab"];
        let utts: Vec<Utterance> = (0..n)
            .map(|i| {
                let frames = rng.gen_range(8..16);
                let f = FeatureMatrix::new(frames, 5, (0..frames * 5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
                let w: Vec<String> = (0..2).map(|_| words[rng.gen_range(0..3)].to_string()).collect();
                Utterance {
                    id: format!("u{i}"),
                    input: UtteranceInput::Speech(f),
                    transcript: w.clone(),
                    summary: w,
                    role: Role::Sum,
                }
            })
            .collect();
        let bpe = train_bpe(&[vec!["ab", "ba", "aab"]], 8).unwrap();
        (utts, bpe)
    }

    fn tiny_stage() -> StageConfig {
        StageConfig {
            base_lr: 1e-3,
            batch_size_or_cap: 4,
            max_epochs: 1,
            ..StageConfig::ssum_toy()
        }
    }

    #[test]
    fn zero_epochs_leave_parameters_alone() {
        let (utts, bpe) = tiny_data(4, 1);
        let m = Model::new(ModelConfig::tiny(), 2).unwrap();
        let stage = StageConfig {
            max_epochs: 0,
            ..tiny_stage()
        };
        let data = StageData {
            train: &utts,
            valid: &utts,
            bpe: &bpe,
        };
        let out = train_stage(m.clone(), None, &stage, &data, None).unwrap();
        assert_eq!(out.last.model, m);
        assert!(out.history.is_empty());
    }

    #[test]
    fn single_step_descends() {
        for seed in 0..5 {
            let (utts, bpe) = tiny_data(3, seed);
            let m = Model::new(ModelConfig::tiny(), seed).unwrap();
            let targets = targets_for(&utts, TargetField::Summary, &bpe, 16);
            let before = evaluate_accuracy(&m, &utts, &targets, 8).unwrap().loss;
            let stage = StageConfig {
                base_lr: 1e-4,
                batch_size_or_cap: 8,
                ..tiny_stage()
            };
            let data = StageData {
                train: &utts,
                valid: &utts,
                bpe: &bpe,
            };
            let out = train_stage(m, None, &stage, &data, None).unwrap();
            assert_eq!(out.history[0].steps, 1);
            let after = evaluate_accuracy(&out.last.model, &utts, &targets, 8).unwrap().loss;
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn frozen_module_is_bit_identical() {
        let (utts, bpe) = tiny_data(4, 3);
        let m = Model::new(ModelConfig::tiny(), 3).unwrap();
        let mut stage = tiny_stage();
        stage.per_module_lr.insert("encoder".into(), 0.0);
        let data = StageData {
            train: &utts,
            valid: &utts,
            bpe: &bpe,
        };
        let out = train_stage(m.clone(), None, &stage, &data, None).unwrap();
        for i in 0..m.layout.len() {
            let same = m.params[i] == out.last.model.params[i];
            assert_eq!(same, m.layout.module_of(i) == "encoder" || m.layout.module_of(i) == "phoneme_preencoder", "{}", m.layout.specs[i].name);
        }
    }

    #[test]
    fn wrong_role_is_config_error() {
        let (utts, bpe) = tiny_data(2, 3);
        let data = StageData {
            train: &utts,
            valid: &utts,
            bpe: &bpe,
        };
        let m = Model::new(ModelConfig::tiny(), 3).unwrap();
        let stage = StageConfig {
            batch_size_or_cap: 4,
            ..StageConfig::asr_toy()
        };
        assert!(matches!(train_stage(m, None, &stage, &data, None), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn batches_are_pure_and_capped(
            spec in prop::collection::vec((1usize..400, any::<bool>(), any::<bool>()), 1..40),
            cap in 1usize..600,
            seed in any::<u64>(),
        ) {
            let items: Vec<BatchItem> = spec
                .iter()
                .map(|&(len, sp, real)| BatchItem {
                    len,
                    modality: if sp { Modality::Speech } else { Modality::Phoneme },
                    real,
                })
                .collect();
            let batches = make_batches(&items, BatchRule::MaxTotalLength, cap, seed);
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort();
            prop_assert_eq!(seen, (0..items.len()).collect::<Vec<_>>());
            for b in &batches {
                let first = items[b[0]];
                prop_assert!(b.iter().all(|&i| items[i].modality == first.modality && items[i].real == first.real));
                let total: usize = b.iter().map(|&i| items[i].len).sum();
                prop_assert!(total <= cap || b.len() == 1);
            }
            prop_assert_eq!(&batches, &make_batches(&items, BatchRule::MaxTotalLength, cap, seed));
        }
    }
}
