//! Logit distillation of a hybrid student against a frozen teacher, and the
//! staged conversion loop that alternates importance estimation,
//! replacement and distillation.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardCtx, Var};
use crate::data::{generate, stream, Batch, Split, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Trainable};
use crate::hybridize::replace_layers;
use crate::importance::{loo_importance, mmr_importance, select_least_important, Ablation, ImportanceMethod, ImportanceReport, LooMetric};
use crate::layout::{InitMethod, MixerKind, Provenance};
use crate::model::{layer_prefix, ForwardOptions, Model};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::train::StepRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// `KL(p_student ‖ p_teacher)`
    Reverse,
    /// `KL(p_teacher ‖ p_student)`
    Forward,
}

fn scaled_log_softmax(z: &[f32], v: usize, tau: f32) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(v) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max / tau as f64
            + row
                .iter()
                .map(|&x| ((x as f64 - max) / tau as f64).exp())
                .sum::<f64>()
                .ln();
        out.extend(row.iter().map(|&x| x as f64 / tau as f64 - lse));
    }
    out
}

/// Mean over rows of the KL divergence between temperature-scaled softmax
/// distributions. `teacher` is a constant; the gradient reaches `student`
/// only.
pub fn kl_loss(g: &mut Graph, student: Var, teacher: &Tensor, tau: f32, direction: KlDirection) -> Result<Var> {
    let zs = g.tape.value(student);
    if zs.shape() != teacher.shape() {
        return Err(Error::shape("kl_loss", zs.shape(), teacher.shape()));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("kl_loss", format!("temperature must be positive, got {tau}")));
    }
    let v = zs.last_dim();
    let rows = zs.numel() / v.max(1);
    let ls = scaled_log_softmax(zs.data(), v, tau);
    let lt = scaled_log_softmax(teacher.data(), v, tau);
    let inv_rows = 1.0 / rows as f64;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; ls.len()];
    for r in 0..rows {
        let (s, t) = (&ls[r * v..(r + 1) * v], &lt[r * v..(r + 1) * v]);
        match direction {
            KlDirection::Reverse => {
                let kl: f64 = s.iter().zip(t).map(|(a, b)| a.exp() * (a - b)).sum();
                loss += kl;
                for i in 0..v {
                    let p = s[i].exp();
                    grad[r * v + i] = (inv_rows * p * ((s[i] - t[i]) - kl) / tau as f64) as f32;
                }
            }
            KlDirection::Forward => {
                loss += s.iter().zip(t).map(|(a, b)| b.exp() * (b - a)).sum::<f64>();
                for i in 0..v {
                    grad[r * v + i] = (inv_rows * (s[i].exp() - t[i].exp()) / tau as f64) as f32;
                }
            }
        }
    }
    // Rounding can leave a tiny negative value; NaN must pass through.
    let mean = loss * inv_rows;
    let value = Tensor::scalar(if mean < 0.0 { 0.0 } else { mean as f32 });
    Ok(g.tape.push_op(
        value,
        &[student],
        Box::new(move |ctx: &BackwardCtx| {
            let up = ctx.grad[0];
            vec![Some(grad.iter().map(|d| d * up).collect())]
        }),
    ))
}

/// [`kl_loss`] on plain tensors.
pub fn kl_value(student: &Tensor, teacher: &Tensor, tau: f32, direction: KlDirection) -> Result<f32> {
    let mut g = Graph::inference();
    let s = g.tape.leaf(student.clone());
    let l = kl_loss(&mut g, s, teacher, tau, direction)?;
    Ok(g.tape.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainScope {
    /// Parameters of SSM mixers plus every normalization gain.
    #[default]
    MambaAndNorms,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRunConfig {
    pub temperature: f32,
    pub direction: KlDirection,
    pub lr: f32,
    pub warmup_fraction: f32,
    /// Overrides `warmup_fraction` with a fixed number of steps.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    pub batch: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub seed: u64,
    pub task: TaskKind,
    /// Held-out sequences used for the reported initial and final losses.
    pub eval_sequences: usize,
    #[serde(default)]
    pub scope: TrainScope,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

impl Default for DistillRunConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            direction: KlDirection::Reverse,
            lr: 5e-5,
            warmup_fraction: 0.05,
            warmup_steps: None,
            batch: 16,
            seq_len: 256,
            steps: 500,
            seed: 0,
            task: TaskKind::Copy,
            eval_sequences: 64,
            scope: TrainScope::MambaAndNorms,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl DistillRunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.batch == 0 || self.seq_len < 2 || self.eval_sequences == 0 {
            return Err(Error::Config("batch, eval_sequences must be positive and seq_len ≥ 2".into()));
        }
        LrSchedule::new(self.lr, self.steps, self.warmup_fraction).map(|_| ())
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        let s = LrSchedule::new(self.lr, self.steps, self.warmup_fraction)?;
        Ok(match self.warmup_steps {
            Some(w) => LrSchedule::with_warmup_steps(self.lr, self.steps, w),
            None => s,
        })
    }

    /// Training stream (depends on the seed).
    pub fn train_spec(&self, vocab_size: usize) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            vocab_size,
            seq_len: self.seq_len,
            count: 0,
            seed: derive_seed(self.seed, "distill-data", 0),
            split: Split::Train,
        }
    }

    /// Held-out evaluation batch (independent of the seed, so runs with
    /// different seeds are scored on the same sequences).
    pub fn eval_batch(&self, vocab_size: usize) -> Result<Batch> {
        let spec = TaskSpec {
            kind: self.task,
            vocab_size,
            seq_len: self.seq_len,
            count: self.eval_sequences,
            seed: derive_seed(0, "distill-eval", 0),
            split: Split::HeldOut,
        };
        Ok(Batch::from_samples(0, &generate(&spec)?))
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.batch * self.seq_len) as u64
    }
}

/// Which parameter names a distillation run updates.
pub fn trainable_for(model: &Model, scope: TrainScope) -> Trainable {
    match scope {
        TrainScope::All => Trainable::All,
        TrainScope::MambaAndNorms => {
            let mut p: Vec<String> = model
                .layout()
                .layers_of(MixerKind::Mamba)
                .into_iter()
                .map(|l| format!("{}.mamba.", layer_prefix(l)))
                .collect();
            p.extend(model.norm_param_names());
            Trainable::Prefixes(p)
        }
    }
}

/// KD loss of `student` against `teacher` on `batch`, no gradients.
pub fn eval_kd_loss(teacher: &Model, student: &Model, batch: &Batch, tau: f32, direction: KlDirection) -> Result<f32> {
    let zt = teacher.logits(&batch.tokens, batch.batch)?;
    let zs = student.logits(&batch.tokens, batch.batch)?;
    kl_value(&zs, &zt, tau, direction)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: Option<usize>,
    pub layout: String,
    pub h: usize,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: u64,
    /// Held-out KD loss before the first and after the last step.
    pub eval_initial: f32,
    pub eval_final: f32,
    pub records: Vec<StepRecord>,
}

impl StageLog {
    pub fn initial_train_loss(&self) -> Option<f32> {
        self.records.first().map(|r| r.loss)
    }

    pub fn final_train_loss(&self) -> Option<f32> {
        self.records.last().map(|r| r.loss)
    }

    /// One JSON object per step.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub stages: Vec<StageLog>,
}

#[derive(Serialize)]
struct StageRow<'a> {
    stage: Option<usize>,
    layout: &'a str,
    h: usize,
    steps: usize,
    tokens: u64,
    eval_initial: f32,
    eval_final: f32,
    final_train_loss: Option<f32>,
}

impl RunLog {
    pub fn total_tokens(&self) -> u64 {
        self.stages.iter().map(|s| s.tokens).sum()
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for s in &self.stages {
            w.serialize(StageRow {
                stage: s.stage,
                layout: &s.layout,
                h: s.h,
                steps: s.steps,
                tokens: s.tokens,
                eval_initial: s.eval_initial,
                eval_final: s.eval_final,
                final_train_loss: s.final_train_loss(),
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `cfg.steps` optimizer steps on `student` against the frozen
/// `teacher` and returns the updated student with its log.
pub fn distill_stage(teacher: &Model, mut student: Model, cfg: &DistillRunConfig) -> Result<(Model, StageLog)> {
    cfg.validate()?;
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(Error::Config(format!(
            "teacher vocab {} differs from student vocab {}",
            teacher.config.vocab_size, student.config.vocab_size
        )));
    }
    let vocab = student.config.vocab_size;
    let schedule = cfg.schedule()?;
    let eval = cfg.eval_batch(vocab)?;
    let eval_initial = eval_kd_loss(teacher, &student, &eval, cfg.temperature, cfg.direction)?;
    let trainable = trainable_for(&student, cfg.scope);
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut records = Vec::with_capacity(cfg.steps);
    let mut tokens = 0u64;
    for (step, batch) in stream(&cfg.train_spec(vocab), cfg.batch)?.take(cfg.steps).enumerate() {
        let zt = teacher.logits(&batch.tokens, batch.batch)?;
        let mut g = Graph::new(trainable.clone());
        let zs = student.forward(&mut g, &batch.tokens, batch.batch, None, ForwardOptions::default())?;
        let loss = kl_loss(&mut g, zs, &zt, cfg.temperature, cfg.direction)?;
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
        let grad_norm = opt.step(&mut student, &grads, lr);
        tokens += batch.n_tokens() as u64;
        student.tokens_trained += batch.n_tokens() as u64;
        records.push(StepRecord {
            step,
            loss: value,
            lr,
            tokens_seen: tokens,
            grad_norm,
        });
    }
    let eval_final = eval_kd_loss(teacher, &student, &eval, cfg.temperature, cfg.direction)?;
    if !eval_final.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: cfg.steps,
            batch: eval.index,
            loss: eval_final,
        });
    }
    let layout = student.layout();
    let log = StageLog {
        stage: None,
        layout: layout.name(),
        h: layout.n_mamba(),
        steps: cfg.steps,
        batch: cfg.batch,
        seq_len: cfg.seq_len,
        tokens,
        eval_initial,
        eval_final,
        records,
    };
    Ok((student, log))
}

/// Reference replaced-layer counts for a 50-layer teacher.
pub const REFERENCE_SCHEDULE_L50: [usize; 6] = [25, 27, 30, 34, 37, 40];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    /// Cumulative replaced-layer counts, strictly increasing.
    pub targets: Vec<usize>,
    /// Importance method per stage; defaults to leave-one-out for the first
    /// stage and replacement scoring afterwards.
    pub methods: Vec<ImportanceMethod>,
}

impl StageSchedule {
    pub fn new(targets: Vec<usize>) -> Self {
        let methods = (0..targets.len())
            .map(|i| if i == 0 { ImportanceMethod::Loo } else { ImportanceMethod::Mmr })
            .collect();
        Self { targets, methods }
    }

    pub fn validate(&self, n_layers: usize, already_replaced: usize) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("stage schedule is empty".into()));
        }
        if self.methods.len() != self.targets.len() {
            return Err(Error::Config(format!(
                "{} importance methods for {} stages",
                self.methods.len(),
                self.targets.len()
            )));
        }
        let mut prev = already_replaced;
        for &h in &self.targets {
            if h <= prev {
                return Err(Error::Config(format!(
                    "stage targets must be strictly increasing from {already_replaced}, got {:?}",
                    self.targets
                )));
            }
            prev = h;
        }
        if prev > n_layers {
            return Err(Error::Config(format!("final target {prev} exceeds {n_layers} layers")));
        }
        Ok(())
    }
}

/// Settings shared by every stage of a staged conversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagedConfig {
    pub distill: DistillRunConfig,
    /// Steps of each candidate run when scoring by replacement.
    pub mmr_steps: usize,
    pub mmr_warmup_steps: usize,
    /// Learning rate of the candidate runs; the distillation rate if unset.
    #[serde(default)]
    pub mmr_lr: Option<f32>,
    /// Held-out sequences for leave-one-out accuracy.
    pub loo_sequences: usize,
    pub loo_ablation: Ablation,
    #[serde(default)]
    pub loo_metric: LooMetric,
    pub init: InitMethod,
}

impl Default for StagedConfig {
    fn default() -> Self {
        Self {
            distill: DistillRunConfig::default(),
            mmr_steps: 100,
            mmr_warmup_steps: 10,
            mmr_lr: None,
            loo_sequences: 128,
            loo_ablation: Ablation::Block,
            loo_metric: LooMetric::default(),
            init: InitMethod::Mil,
        }
    }
}

impl StagedConfig {
    /// Distillation settings of stage `stage`, with its own derived seed.
    pub fn stage_distill(&self, stage: usize) -> DistillRunConfig {
        DistillRunConfig {
            seed: derive_seed(self.distill.seed, "stage", stage as u64),
            ..self.distill.clone()
        }
    }

    pub fn mmr_config(&self, stage: usize) -> DistillRunConfig {
        DistillRunConfig {
            steps: self.mmr_steps,
            warmup_steps: Some(self.mmr_warmup_steps),
            lr: self.mmr_lr.unwrap_or(self.distill.lr),
            seed: derive_seed(self.distill.seed, "mmr", stage as u64),
            ..self.distill.clone()
        }
    }

    pub fn loo_eval(&self, vocab_size: usize, stage: usize) -> Result<Vec<crate::data::Sample>> {
        generate(&TaskSpec {
            kind: self.distill.task,
            vocab_size,
            seq_len: self.distill.seq_len,
            count: self.loo_sequences,
            seed: derive_seed(self.distill.seed, "loo-eval", stage as u64),
            split: Split::HeldOut,
        })
    }
}

pub struct StageOutcome {
    pub model: Model,
    pub log: StageLog,
    pub report: ImportanceReport,
    pub replaced: Vec<usize>,
}

/// One stage: score the current model's attention layers, replace the
/// least important ones up to `target` SSM layers, distill.
pub fn run_stage(
    teacher: &Model,
    current: &Model,
    stage: usize,
    target: usize,
    method: ImportanceMethod,
    cfg: &StagedConfig,
) -> Result<StageOutcome> {
    let layout = current.layout();
    let have = layout.n_mamba();
    if target <= have {
        return Err(Error::Config(format!("stage {stage} target {target} does not exceed current {have}")));
    }
    let candidates = layout.layers_of(MixerKind::Mha);
    let report = match method {
        ImportanceMethod::Loo => {
            let eval = cfg.loo_eval(current.config.vocab_size, stage)?;
            loo_importance(current, &eval, &candidates, cfg.loo_ablation, cfg.loo_metric, 64)?
        }
        ImportanceMethod::Mmr => mmr_importance(current, &candidates, &cfg.mmr_config(stage))?,
    };
    let already: BTreeSet<usize> = layout.layers_of(MixerKind::Mamba).into_iter().collect();
    let chosen = select_least_important(&report, target - have, &already)?;
    let (mut next, _) = replace_layers(current, &chosen, cfg.init, derive_seed(cfg.distill.seed, "stage-init", stage as u64))?;
    for &l in &chosen {
        next.provenance[l] = Some(Provenance {
            stage: Some(stage),
            init: cfg.init,
            method: Some(method.as_str().to_string()),
            score: report.score_of(l),
        });
    }
    let (model, mut log) = distill_stage(teacher, next, &cfg.stage_distill(stage))?;
    log.stage = Some(stage);
    Ok(StageOutcome {
        model,
        log,
        report,
        replaced: chosen,
    })
}

pub struct StagedResult {
    pub model: Model,
    pub log: RunLog,
    pub reports: Vec<ImportanceReport>,
    /// Model after every stage.
    pub intermediates: Vec<Model>,
}

/// Runs every stage of `schedule` starting from `teacher`. `on_stage` sees
/// each finished stage (e.g. to write a checkpoint).
pub fn staged_pipeline(
    teacher: &Model,
    schedule: &StageSchedule,
    cfg: &StagedConfig,
    on_stage: &mut dyn FnMut(usize, &StageOutcome) -> Result<()>,
) -> Result<StagedResult> {
    cfg.distill.validate()?;
    schedule.validate(teacher.config.n_layers, teacher.layout().n_mamba())?;
    let mut current = teacher.clone();
    let mut log = RunLog::default();
    let mut reports = Vec::new();
    let mut intermediates = Vec::new();
    for (stage, (&target, &method)) in schedule.targets.iter().zip(&schedule.methods).enumerate() {
        let out = run_stage(teacher, &current, stage, target, method, cfg)?;
        on_stage(stage, &out)?;
        current = out.model;
        log.stages.push(out.log);
        reports.push(out.report);
        intermediates.push(current.clone());
    }
    Ok(StagedResult {
        model: current,
        log,
        reports,
        intermediates,
    })
}
