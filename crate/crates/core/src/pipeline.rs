//! End-to-end runs driven by one JSON config: teacher training, staged
//! hybridization, evaluation and benchmarking, with artifacts named from
//! the config alone so that an interrupted run resumes where it stopped.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{emit_report, run_decode_bench, BenchResult, BenchScenario};
use crate::checkpoint;
use crate::data::{generate, Split, TaskKind, TaskSpec};
use crate::distill::{run_stage, RunLog, StageLog, StageSchedule, StagedConfig};
use crate::error::{Error, Result};
use crate::importance::ImportanceReport;
use crate::layout::{HybridLayout, MixerKind};
use crate::model::{ForwardOptions, Model};
use crate::rng::derive_seed;
use crate::train::{accuracy, expected_accuracy, train_teacher, StepRecord, TeacherTrainConfig};
use crate::transformer::ModelConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "H1_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub warmup_fraction: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub prompt_tokens: usize,
    pub generate_tokens: usize,
    pub repeats: usize,
    pub warmup: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Every random choice of the run derives from this value.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub teacher: TeacherConfig,
    /// Held-out sequences for the accuracy report.
    pub eval_sequences: usize,
    pub schedule: StageSchedule,
    /// Distillation and importance settings. Seed, task and sequence length
    /// are taken from the fields above.
    pub staged: StagedConfig,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
}

impl PipelineConfig {
    /// Reads and validates a config file. Unreadable or malformed files are
    /// configuration errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.teacher_train().task.validate()?;
        self.staged_resolved().distill.validate()?;
        self.schedule.validate(self.model.n_layers, 0)?;
        if self.eval_sequences == 0 {
            return Err(Error::Config("eval_sequences must be positive".into()));
        }
        if let Some(b) = &self.bench {
            self.scenario(b, "check").validate()?;
        }
        Ok(())
    }

    /// `output_dir`, unless the environment overrides it.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn teacher_train(&self) -> TeacherTrainConfig {
        TeacherTrainConfig {
            task: TaskSpec {
                kind: self.task.kind,
                vocab_size: self.model.vocab_size,
                seq_len: self.task.seq_len,
                count: 0,
                seed: derive_seed(self.seed, "teacher-data", 0),
                split: Split::Train,
            },
            steps: self.teacher.steps,
            batch: self.teacher.batch,
            lr: self.teacher.lr,
            warmup_fraction: self.teacher.warmup_fraction,
            optimizer: Default::default(),
        }
    }

    pub fn teacher_init_seed(&self) -> u64 {
        derive_seed(self.seed, "teacher-init", 0)
    }

    pub fn staged_resolved(&self) -> StagedConfig {
        let mut s = self.staged.clone();
        s.distill.seed = derive_seed(self.seed, "distill", 0);
        s.distill.task = self.task.kind;
        s.distill.seq_len = self.task.seq_len;
        s
    }

    pub fn eval_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task.kind,
            vocab_size: self.model.vocab_size,
            seq_len: self.task.seq_len,
            count: self.eval_sequences,
            seed: derive_seed(self.seed, "eval", 0),
            split: Split::HeldOut,
        }
    }

    pub fn scenario(&self, b: &BenchConfig, layout: &str) -> BenchScenario {
        BenchScenario {
            layout: layout.to_string(),
            prompt_tokens: b.prompt_tokens,
            generate_tokens: b.generate_tokens,
            repeats: b.repeats,
            warmup: b.warmup,
            memory_budget: None,
        }
    }

    /// Stage `s` ends with this many replaced layers.
    pub fn stage_layout_stem(&self, stage: usize) -> String {
        format!("H1-{}-{}", self.schedule.targets[stage], self.model.n_layers)
    }
}

/// Artifact file names, a pure function of the config and the stage.
pub mod artifacts {
    pub fn checkpoint(stem: &str) -> String {
        format!("{stem}.ckpt")
    }
    pub fn teacher_log() -> &'static str {
        "teacher.trainlog.jsonl"
    }
    pub fn importance(stage: usize) -> String {
        format!("stage{stage}.importance.json")
    }
    pub fn runlog(stage: usize) -> String {
        format!("stage{stage}.runlog.jsonl")
    }
    pub fn stage_summary(stage: usize) -> String {
        format!("stage{stage}.summary.json")
    }
    pub fn run_summary() -> &'static str {
        "summary.csv"
    }
    pub fn eval() -> &'static str {
        "eval.csv"
    }
    pub fn bench_stem() -> &'static str {
        "bench"
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Recompute and overwrite artifacts that already exist.
    pub force: bool,
    /// Stop after this stage has been written (simulates an interruption).
    pub stop_after_stage: Option<usize>,
    /// Skip the evaluation and bench phases.
    pub skip_reports: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub layout: String,
    pub h: usize,
    pub accuracy: f64,
    pub expected_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub output_dir: PathBuf,
    pub teacher: Model,
    /// Model after each completed stage.
    pub stages: Vec<Model>,
    pub reports: Vec<ImportanceReport>,
    pub log: RunLog,
    /// Stages loaded from disk instead of recomputed.
    pub resumed_stages: Vec<usize>,
    pub teacher_resumed: bool,
    pub eval: Vec<EvalRow>,
    pub bench: Vec<BenchResult>,
}

fn write_records(path: &Path, records: &[StepRecord]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Trains the teacher described by `cfg`, or loads it if its checkpoint
/// exists and `force` is off. Returns the model and whether it was loaded.
pub fn ensure_teacher(cfg: &PipelineConfig, dir: &Path, force: bool) -> Result<(Model, bool)> {
    let path = dir.join(artifacts::checkpoint(&HybridLayout::all_mha(cfg.model.n_layers).file_stem()));
    if path.exists() && !force {
        return Ok((checkpoint::load(&path)?, true));
    }
    let mut model = Model::new(cfg.model.clone(), cfg.teacher_init_seed())?;
    let records = train_teacher(&mut model, &cfg.teacher_train(), &mut |_| {})?;
    write_records(&dir.join(artifacts::teacher_log()), &records)?;
    checkpoint::save(&model, &path)?;
    Ok((model, false))
}

pub fn evaluate(model: &Model, spec: &TaskSpec) -> Result<EvalRow> {
    let samples = generate(spec)?;
    let layout = model.layout();
    Ok(EvalRow {
        layout: layout.name(),
        h: layout.count(MixerKind::Mamba),
        accuracy: accuracy(model, &samples, 64, ForwardOptions::default())?,
        expected_accuracy: expected_accuracy(model, &samples, 64, ForwardOptions::default())?,
    })
}

pub fn write_eval_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Runs (or resumes) the whole pipeline described by `cfg`.
pub fn run_pipeline(cfg: &PipelineConfig, opts: RunOptions) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&dir)?;
    let (teacher, teacher_resumed) = ensure_teacher(cfg, &dir, opts.force)?;
    if teacher.config != cfg.model || teacher.layout().n_mamba() != 0 {
        return Err(Error::Config(format!(
            "teacher checkpoint in {} does not match the configured model",
            dir.display()
        )));
    }
    let staged = cfg.staged_resolved();
    let mut current = teacher.clone();
    let mut stages = Vec::new();
    let mut reports = Vec::new();
    let mut log = RunLog::default();
    let mut resumed_stages = Vec::new();
    for (stage, (&target, &method)) in cfg.schedule.targets.iter().zip(&cfg.schedule.methods).enumerate() {
        let ckpt = dir.join(artifacts::checkpoint(&cfg.stage_layout_stem(stage)));
        let report_path = dir.join(artifacts::importance(stage));
        let runlog_path = dir.join(artifacts::runlog(stage));
        let summary_path = dir.join(artifacts::stage_summary(stage));
        let complete = [&ckpt, &report_path, &runlog_path, &summary_path].iter().all(|p| p.exists());
        let (model, report, stage_log) = if complete && !opts.force {
            let model = checkpoint::load(&ckpt)?;
            if model.layout().n_mamba() != target {
                return Err(Error::Checkpoint(format!(
                    "{} holds {} replaced layers, stage {stage} expects {target}",
                    ckpt.display(),
                    model.layout().n_mamba()
                )));
            }
            let stage_log: StageLog = serde_json::from_slice(&std::fs::read(&summary_path)?)?;
            resumed_stages.push(stage);
            (model, ImportanceReport::load(&report_path)?, stage_log)
        } else {
            let out = run_stage(&teacher, &current, stage, target, method, &staged)?;
            out.report.save(&report_path)?;
            out.log.write_jsonl(&runlog_path)?;
            std::fs::write(&summary_path, serde_json::to_vec_pretty(&out.log)?)?;
            checkpoint::save(&out.model, &ckpt)?;
            (out.model, out.report, out.log)
        };
        current = model.clone();
        stages.push(model);
        reports.push(report);
        log.stages.push(stage_log);
        if opts.stop_after_stage == Some(stage) {
            break;
        }
    }
    log.write_summary_csv(&dir.join(artifacts::run_summary()))?;

    let finished = stages.len() == cfg.schedule.targets.len();
    let mut eval = Vec::new();
    let mut bench = Vec::new();
    if finished && !opts.skip_reports {
        let spec = cfg.eval_spec();
        for m in std::iter::once(&teacher).chain(&stages) {
            eval.push(evaluate(m, &spec)?);
        }
        write_eval_csv(&eval, &dir.join(artifacts::eval()))?;
        if let Some(b) = &cfg.bench {
            for (m, row) in std::iter::once(&teacher).chain(&stages).zip(&eval) {
                let mut r = run_decode_bench(m, &cfg.scenario(b, &row.layout))?;
                r.accuracy = Some(row.accuracy);
                bench.push(r);
            }
            emit_report(&bench, &dir, artifacts::bench_stem())?;
        }
    }
    Ok(PipelineOutcome {
        output_dir: dir,
        teacher,
        stages,
        reports,
        log,
        resumed_stages,
        teacher_resumed,
        eval,
        bench,
    })
}
