//! Mini-batch training with Adam on binary cross-entropy, and evaluation.
//!
//! Every random choice is drawn from a ChaCha stream derived from the run seed
//! and the epoch number, so a run resumed from a checkpoint continues exactly
//! as an uninterrupted run would.

mod checkpoint;
mod metrics;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use metrics::{auc, class_scores, macro_f1, ClassScores, Confusion};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::ForwardCtx;
use crate::chunkformer::{attention_footprint, AttentionFootprint, Batch};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{adam_step, sigmoid, AdamConfig, Tape, Tensor};
use crate::pipeline::{Example, GroupedDataset, Split};

fn default_lr() -> f64 {
    5e-4
}

fn default_epochs() -> usize {
    10
}

fn default_batch_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Log the running loss every this many batches; 0 logs once per epoch.
    #[serde(default)]
    pub log_every: usize,
    /// Multiplier on the positive-class loss term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_weight: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            log_every: 0,
            pos_weight: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(w) = self.pos_weight {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("pos_weight must be positive, got {w}")));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate)
    }
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

fn stream(seed: u64, purpose: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | epoch as u64);
    rng
}

/// Metrics of a model on one set of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    /// Number of scored predictions; equals `examples` unless predicting per position.
    pub predictions: usize,
    pub positives: usize,
    pub loss: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub macro_f1: f64,
    pub classes: ClassScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub footprint: Option<AttentionFootprint>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let auc = self.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "examples      {}", self.examples);
        let _ = writeln!(s, "predictions   {} ({} positive)", self.predictions, self.positives);
        let _ = writeln!(s, "loss          {:.6}", self.loss);
        let _ = writeln!(s, "auc           {auc}");
        let _ = writeln!(s, "macro_f1      {:.4}", self.macro_f1);
        for c in 0..2 {
            let _ = writeln!(
                s,
                "class {c}       precision {:.4}  recall {:.4}  f1 {:.4}",
                self.classes.precision[c], self.classes.recall[c], self.classes.f1[c]
            );
        }
        if let Some(fp) = &self.footprint {
            let _ = writeln!(
                s,
                "attention     peak {} score elements per head (full attention {})",
                fp.peak, fp.full_attention
            );
        }
        s
    }
}

/// One line of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub val: Option<EvalReport>,
    pub best: bool,
}

/// Human-readable table of an epoch history.
pub fn history_table(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch  train_loss  val_loss  val_auc  val_macro_f1\n");
    for r in history {
        let (loss, auc, f1) = match &r.val {
            Some(v) => (
                format!("{:.5}", v.loss),
                v.auc.map_or("n/a".into(), |a| format!("{a:.4}")),
                format!("{:.4}", v.macro_f1),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let _ = writeln!(
            s,
            "{:>5}  {:>10.5}  {:>8}  {:>7}  {:>12}{}",
            r.epoch,
            r.train_loss,
            loss,
            auc,
            f1,
            if r.best { "  *" } else { "" }
        );
    }
    s
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// State after the final epoch, for resuming.
    pub last: Checkpoint,
    /// Epoch with the highest validation macro F1, or the last epoch when
    /// there is no validation split.
    pub best: Checkpoint,
}

fn batch_of(model: &Model, examples: &[&Example]) -> Result<Batch> {
    let features = model.inputs().len();
    Batch::from_steps(
        examples.iter().map(|e| (e.steps.as_slice(), e.targets.as_slice())),
        model.seq_len(),
        features,
    )
}

/// Logits and matching labels of `examples`, evaluated without dropout.
pub fn predict(model: &Model, examples: &[Example], batch_size: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    let mode = model.prediction_mode();
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = batch_of(model, &refs)?;
        let mut tape = Tape::inference();
        let pv = model.params().register(&mut tape);
        let out = model.forward_batch(&mut tape, &pv, &batch, &mut ForwardCtx::eval())?;
        let (targets, weights) = mode.targets(&batch);
        for ((&z, t), w) in tape.value(out).data().iter().zip(targets).zip(weights) {
            if w > 0.0 {
                logits.push(z);
                labels.push(t);
            }
        }
    }
    Ok((logits, labels))
}

/// Loss, AUC on sigmoid scores, and macro F1 with logits thresholded at 0.
pub fn evaluate_examples(model: &Model, examples: &[Example], batch_size: usize) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::UndefinedMetric("no examples to evaluate".into()));
    }
    let (logits, labels) = predict(model, examples, batch_size)?;
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("model produced non-finite logits".into()));
    }
    let loss = crate::numerics::bce_with_logits(
        &Tensor::vector(logits.clone())?,
        &Tensor::vector(labels.clone())?,
    )?;
    let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let auc = match metrics::auc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let preds: Vec<f64> = logits.iter().map(|&z| if z > 0.0 { 1.0 } else { 0.0 }).collect();
    let footprint = match model {
        Model::ChunkFormer(m) => Some(attention_footprint(&m.config)),
        Model::MeanPool(_) => None,
    };
    Ok(EvalReport {
        examples: examples.len(),
        predictions: logits.len(),
        positives: labels.iter().filter(|&&l| l == 1.0).count(),
        loss,
        auc,
        macro_f1: metrics::macro_f1(&preds, &labels)?,
        classes: metrics::class_scores(&preds, &labels)?,
        footprint,
    })
}

/// Evaluates `checkpoint` on one split of a dataset encoded with `schema_hash`.
pub fn evaluate(
    checkpoint: &Checkpoint,
    schema_hash: &str,
    dataset: &GroupedDataset,
    split: Split,
) -> Result<EvalReport> {
    checkpoint.check_schema(schema_hash)?;
    let examples = dataset.examples(split, checkpoint.model.window_len());
    evaluate_examples(&checkpoint.model, &examples, checkpoint.train.batch_size)
}

/// Trains a freshly built model.
pub fn train(
    model: Model,
    schema_hash: &str,
    dataset: &GroupedDataset,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let start = Checkpoint::new(model, schema_hash, config.clone());
    run(start, None, schema_hash, dataset, config, on_epoch)
}

/// Continues from `last` until `config.epochs` epochs are done in total.
pub fn resume(
    last: Checkpoint,
    best: Option<Checkpoint>,
    schema_hash: &str,
    dataset: &GroupedDataset,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    last.check_schema(schema_hash)?;
    if last.train.seed != config.seed || last.train.batch_size != config.batch_size {
        log::warn!("resuming with a different seed or batch size than the checkpoint was trained with");
    }
    run(last, best, schema_hash, dataset, config, on_epoch)
}

fn run(
    mut state: Checkpoint,
    mut best: Option<Checkpoint>,
    schema_hash: &str,
    dataset: &GroupedDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let adam = config.adam();
    let window = state.model.window_len();
    let train_examples = dataset.examples(Split::Train, window);
    let val_examples = dataset.examples(Split::Val, window);
    if train_examples.is_empty() {
        return Err(Error::Config("training split has no examples".into()));
    }
    log::info!(
        "training on {} examples, validating on {}",
        train_examples.len(),
        val_examples.len()
    );
    let mode = state.model.prediction_mode();
    let pos_weight = config.pos_weight.unwrap_or(1.0);
    let mut history = Vec::new();

    for epoch in state.epochs_done..config.epochs {
        let mut order: Vec<usize> = (0..train_examples.len()).collect();
        order.shuffle(&mut stream(config.seed, SHUFFLE_STREAM, epoch));
        let mut ctx = ForwardCtx::train(stream(config.seed, DROPOUT_STREAM, epoch));
        let (mut loss_sum, mut weight_sum) = (0.0, 0.0);

        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&Example> = idx.iter().map(|&i| &train_examples[i]).collect();
            let batch = batch_of(&state.model, &refs)?;
            let mut tape = Tape::new();
            let pv = state.model.params().register(&mut tape);
            let logits = state.model.forward_batch(&mut tape, &pv, &batch, &mut ctx)?;
            let (targets, weights) = mode.targets(&batch);
            let loss = tape.weighted_bce_with_logits(logits, &targets, Some(&weights), pos_weight)?;
            let loss_value = tape.value(loss).item()?;
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = pv.all().iter().map(|&v| grads.wrt(&tape, v)).collect();
            let grad_norm = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
            if !loss_value.is_finite() || !grad_norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {loss_value} at epoch {epoch}, batch {b} \
                     (learning rate {}, gradient norm {grad_norm}, optimizer step {})",
                    config.learning_rate, state.optimizer.step
                )));
            }
            let mut params = state.model.params().tensors();
            adam_step(&mut params, &grads, &mut state.optimizer, &adam)?;
            for (p, new) in state.model.params_mut().params_mut().iter_mut().zip(params) {
                if p.trainable {
                    p.tensor = new;
                }
            }
            let w: f64 = weights.iter().sum();
            loss_sum += loss_value * w;
            weight_sum += w;
            if config.log_every > 0 && (b + 1) % config.log_every == 0 {
                log::info!("epoch {epoch} batch {} loss {:.6}", b + 1, loss_sum / weight_sum);
            }
        }

        let val = if val_examples.is_empty() {
            None
        } else {
            Some(evaluate_examples(&state.model, &val_examples, config.batch_size)?)
        };
        state.epochs_done = epoch + 1;
        let score = val.as_ref().map(|v| v.macro_f1);
        let improved = match (score, state.best_val_macro_f1) {
            (Some(s), Some(b)) => s > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            state.best_val_macro_f1 = score.or(state.best_val_macro_f1);
        }
        state.schema_hash = schema_hash.to_string();
        state.train = config.clone();
        if improved {
            best = Some(state.clone());
        }
        let record = EpochRecord {
            epoch,
            steps: state.optimizer.step,
            train_loss: loss_sum / weight_sum,
            val,
            best: improved,
        };
        log::info!(
            "epoch {epoch}: train loss {:.6}{}",
            record.train_loss,
            record
                .val
                .as_ref()
                .map(|v| format!(", val macro F1 {:.4}", v.macro_f1))
                .unwrap_or_default()
        );
        on_epoch(&record)?;
        history.push(record);
    }
    let best = best.unwrap_or_else(|| state.clone());
    Ok(TrainOutcome {
        history,
        last: state,
        best,
    })
}
