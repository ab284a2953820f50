//! Training and evaluation loop.

pub mod checkpoint;
mod optim;

pub use optim::{adamw_step, AdamWParams, OptState};

use std::fmt::Write as _;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataprep::Texture;
use crate::dataset::{LabeledCase, Split};
use crate::diffcore::{ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::hloss::{dilatation_score, h2_probs, predict_with, DecisionRule, EvolutionLabel, HLossConfig};
use crate::metrics::{EvalReport, ScoredCase};
use crate::model::{Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub warmup_start: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            batch: 16,
            warmup_epochs: 5,
            total_epochs: 60,
            warmup_start: 1e-6,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            alpha: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 || self.total_epochs == 0 {
            return bad("batch and total_epochs must be at least 1".into());
        }
        if self.warmup_epochs >= self.total_epochs {
            return bad(format!(
                "warmup_epochs {} must be below total_epochs {}",
                self.warmup_epochs, self.total_epochs
            ));
        }
        let rates = [self.base_lr, self.warmup_start, self.weight_decay, self.alpha];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("learning rates, weight decay and alpha must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        Ok(())
    }

    /// `base_lr * batch / 64`
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch as f64 / 64.0
    }

    pub fn hloss(&self) -> HLossConfig {
        HLossConfig {
            alpha: self.alpha,
            ..HLossConfig::default()
        }
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Learning rate at fractional epoch `t`: linear from `warmup_start` to the
/// peak over the warmup, then cosine down to 0 at `total_epochs`.
pub fn lr_at(t: f64, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr();
    let w = cfg.warmup_epochs as f64;
    let total = cfg.total_epochs as f64;
    if t < w {
        cfg.warmup_start + (peak - cfg.warmup_start) * t / w
    } else {
        let x = ((t - w) / (total - w)).clamp(0.0, 1.0);
        peak * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
    }
}

/// Everything needed to rebuild a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseScore {
    pub id: String,
    pub label: EvolutionLabel,
    pub texture: Texture,
    pub score_h1: f64,
    pub probs_h2: [f64; 3],
    pub pred: EvolutionLabel,
}

impl CaseScore {
    pub fn scored(&self) -> ScoredCase {
        ScoredCase {
            label: self.label,
            texture: self.texture,
            score_h1: self.score_h1,
            probs_h2: self.probs_h2,
            pred: self.pred,
        }
    }
}

pub const SCORES_CSV_HEADER: &str = "id,label,texture,score_h1,p_stability,p_dilatation,p_shrinkage,pred";

pub fn scores_csv(scores: &[CaseScore]) -> String {
    let mut out = String::from(SCORES_CSV_HEADER);
    out.push('\n');
    for s in scores {
        let _ = writeln!(
            out,
            "{},{},{},{:e},{:e},{:e},{:e},{}",
            s.id, s.label, s.texture, s.score_h1, s.probs_h2[0], s.probs_h2[1], s.probs_h2[2], s.pred
        );
    }
    out
}

/// Forward pass over `cases` with scores and predictions under `rule`.
pub fn score_cases(model: &Model, store: &ParamStore<f32>, cases: &[&LabeledCase], rule: DecisionRule) -> Result<Vec<CaseScore>> {
    cases
        .par_iter()
        .map(|c| {
            let out = model.forward(store, &c.roi_t1, c.roi_t0.as_ref())?;
            Ok(CaseScore {
                id: c.id.clone(),
                label: c.label,
                texture: c.texture,
                score_h1: dilatation_score(&out, rule),
                probs_h2: h2_probs(&out),
                pred: predict_with(&out, rule),
            })
        })
        .collect()
}

/// Report over scored cases; AUC terms lacking a class are NaN.
pub fn report_from_scores(scores: &[CaseScore]) -> Result<EvalReport> {
    let scored: Vec<ScoredCase> = scores.iter().map(CaseScore::scored).collect();
    EvalReport::from_scored(&scored)
}

/// Evaluates `cases`, which must contain every evolution class.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, cases: &[&LabeledCase], rule: DecisionRule) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let absent: Vec<&str> = EvolutionLabel::ALL
        .iter()
        .filter(|l| !cases.iter().any(|c| c.label == **l))
        .map(|l| l.name())
        .collect();
    if !absent.is_empty() {
        return Err(Error::Data(format!("evaluation split lacks classes: {}", absent.join(", "))));
    }
    report_from_scores(&score_cases(model, store, cases, rule)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's cases.
    pub loss: f64,
    pub report: Option<EvalReport>,
}

pub const METRICS_CSV_HEADER: &str = "epoch,loss,auc_h1,auc_h2,auc_h2_d,acc,kappa";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let metrics = match &self.report {
            Some(r) => r.csv_row(),
            None => "NaN,NaN,NaN,NaN,NaN".into(),
        };
        format!("{},{:.6},{}", self.epoch, self.loss, metrics)
    }
}

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch with the best validation AUC@H1, if any epoch had one.
    pub best_epoch: Option<usize>,
    /// Parameters of the best epoch, or of the last epoch without validation.
    pub best_params: ParamStore<f32>,
}

type ParamGrads = Vec<(ParamId, Tensor<f32>)>;

/// Summed loss and per-case gradients of one batch.
fn batch_gradients(
    model: &Model,
    store: &ParamStore<f32>,
    batch: &[&LabeledCase],
    hcfg: &HLossConfig,
) -> Result<(f64, Vec<ParamGrads>)> {
    let per_case: Vec<(f64, ParamGrads)> = batch
        .par_iter()
        .map(|c| {
            let mut tape = Tape::new();
            let loss = model.loss_tape(store, &mut tape, &c.roi_t1, c.roi_t0.as_ref(), c.label, hcfg)?;
            let value = tape.value(loss).item()? as f64;
            Ok((value, tape.gradients(loss)?.into_param_grads()))
        })
        .collect::<Result<_>>()?;
    let total = per_case.iter().map(|(l, _)| l).sum();
    Ok((total, per_case.into_iter().map(|(_, g)| g).collect()))
}

pub fn train(model: &Model, store: &mut ParamStore<f32>, cases: &[LabeledCase], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, store, cases, cfg, |_| ControlFlow::Continue(()))
}

/// Trains on the train split and validates on the val split after every
/// epoch. `on_epoch` sees each record as it is produced and may stop the
/// run early; the schedule still spans `total_epochs`.
pub fn train_with(
    model: &Model,
    store: &mut ParamStore<f32>,
    cases: &[LabeledCase],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set: Vec<&LabeledCase> = cases.iter().filter(|c| c.split == Split::Train).collect();
    let val_set: Vec<&LabeledCase> = cases.iter().filter(|c| c.split == Split::Val).collect();
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let hcfg = cfg.hloss();
    let rule = hcfg.decision_rule();
    let hp = cfg.adamw();
    let mut state = OptState::new(store);
    let batches = train_set.len().div_ceil(cfg.batch);

    let mut history = Vec::with_capacity(cfg.total_epochs);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    for epoch in 0..cfg.total_epochs {
        let mut order = train_set.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            let lr = lr_at(epoch as f64 + b as f64 / batches as f64, cfg);
            let (loss_sum, grads) = batch_gradients(model, store, batch, &hcfg)?;
            let mean = loss_sum / batch.len() as f64;
            if !mean.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b + 1,
                    loss: mean,
                });
            }
            epoch_loss += loss_sum;
            store.zero_grad();
            let scale = 1.0 / batch.len() as f32;
            for case_grads in &grads {
                for (pid, g) in case_grads {
                    let slot = store.slot_mut(*pid);
                    if slot.trainable {
                        slot.grad.add_scaled(g, scale)?;
                    }
                }
            }
            adamw_step(store, &mut state, lr, &hp)?;
        }

        let report = if val_set.is_empty() {
            None
        } else {
            Some(report_from_scores(&score_cases(model, store, &val_set, rule)?)?)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: epoch_loss / train_set.len() as f64,
            report,
        };
        if let Some(auc) = record.report.as_ref().map(|r| r.auc_h1).filter(|a| !a.is_nan()) {
            if best.as_ref().is_none_or(|(_, b, _)| auc > *b) {
                best = Some((record.epoch, auc, store.clone()));
            }
        }
        let flow = on_epoch(&record);
        history.push(record);
        if flow.is_break() {
            break;
        }
    }
    let (best_epoch, best_params) = match best {
        Some((e, _, p)) => (Some(e), p),
        None => (None, store.clone()),
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_params,
    })
}
