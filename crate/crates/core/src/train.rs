//! Supervised teacher training and held-out accuracy.

use serde::{Deserialize, Serialize};

use crate::autodiff::CrossEntropyTarget;
use crate::data::{stream, Batch, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Trainable};
use crate::model::{ForwardOptions, Model};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub task: TaskSpec,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub warmup_fraction: f32,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    pub tokens_seen: u64,
    pub grad_norm: f32,
}

/// Masked next-token cross-entropy of `model` on `batch`.
pub fn lm_loss(g: &mut Graph, model: &Model, batch: &Batch) -> Result<crate::autodiff::Var> {
    let logits = model.forward(g, &batch.tokens, batch.batch, None, ForwardOptions::default())?;
    let (targets, weights) = batch.next_token_targets();
    g.tape.cross_entropy(logits, CrossEntropyTarget::Indices(targets, Some(weights)))
}

/// Trains every parameter of `model` on the task's train split.
pub fn train_teacher(
    model: &mut Model,
    cfg: &TeacherTrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    let schedule = LrSchedule::new(cfg.lr, cfg.steps, cfg.warmup_fraction)?;
    let data = stream(&cfg.task, cfg.batch)?;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut log = Vec::with_capacity(cfg.steps);
    let mut tokens = 0u64;
    for (step, batch) in data.take(cfg.steps).enumerate() {
        let mut g = Graph::new(Trainable::All);
        let loss = lm_loss(&mut g, model, &batch)?;
        let value = g.tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch: batch.index,
                loss: value,
            });
        }
        let grads = g.param_grads(loss)?;
        drop(g);
        let lr = schedule.lr_at(step);
        let grad_norm = opt.step(model, &grads, lr);
        tokens += batch.n_tokens() as u64;
        model.tokens_trained += batch.n_tokens() as u64;
        let rec = StepRecord {
            step,
            loss: value,
            lr,
            tokens_seen: tokens,
            grad_norm,
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// Fraction of scored positions whose previous-position argmax equals the
/// token.
pub fn accuracy(model: &Model, samples: &[Sample], batch: usize, opts: ForwardOptions) -> Result<f64> {
    score_answers(model, samples, batch, opts, |row, target| {
        let argmax = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (j, &x)| if x > best.1 { (j, x) } else { best })
            .0;
        (argmax == target) as u8 as f64
    })
}

/// Mean probability assigned to the correct token at scored positions, i.e.
/// the accuracy expected when answers are sampled rather than taken greedily.
/// Unlike [`accuracy`] it does not saturate once every argmax is right.
pub fn expected_accuracy(model: &Model, samples: &[Sample], batch: usize, opts: ForwardOptions) -> Result<f64> {
    score_answers(model, samples, batch, opts, |row, target| {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
        (row[target] as f64 - max).exp() / sum
    })
}

fn score_answers(
    model: &Model,
    samples: &[Sample],
    batch: usize,
    opts: ForwardOptions,
    score: impl Fn(&[f32], usize) -> f64,
) -> Result<f64> {
    let (mut acc, mut total) = (0.0f64, 0usize);
    let v = model.config.vocab_size;
    for chunk in samples.chunks(batch.max(1)) {
        let b = Batch::from_samples(0, chunk);
        let z = model.logits_with(&b.tokens, b.batch, opts)?;
        for r in 0..b.batch {
            for i in 1..b.seq_len {
                let pos = r * b.seq_len + i;
                if b.answer_mask[pos] {
                    acc += score(&z.data()[(pos - 1) * v..pos * v], b.tokens[pos] as usize);
                    total += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Config("evaluation set has no scored positions".into()));
    }
    Ok(acc / total as f64)
}
