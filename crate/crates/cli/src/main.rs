//! `hdistill`: train a teacher, score layers, hybridize, distill, run the
//! staged pipeline, benchmark and evaluate.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 3 for
//! failures during computation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hybrid_distill::bench::{emit_report, run_decode_bench, BenchScenario};
use hybrid_distill::checkpoint;
use hybrid_distill::data::{generate, Split, TaskKind, TaskSpec};
use hybrid_distill::distill::distill_stage;
use hybrid_distill::hybridize::replace_layers;
use hybrid_distill::importance::{loo_importance, mmr_importance, select_least_important, ImportanceReport};
use hybrid_distill::layout::{InitMethod, MixerKind};
use hybrid_distill::model::Model;
use hybrid_distill::pipeline::{
    ensure_teacher, evaluate, read_eval_csv, run_pipeline, write_eval_csv, PipelineConfig, RunOptions,
    OUTPUT_DIR_ENV,
};
use hybrid_distill::rng::derive_seed;
use hybrid_distill::Error;

#[derive(Parser)]
#[command(name = "hdistill", version, about = "Attention to attention/SSM hybrid distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the all-attention teacher described by a pipeline config.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score the attention layers of a checkpoint.
    Importance {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Stage index used to derive the evaluation seed.
        #[arg(long, default_value_t = 0)]
        stage: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Replace attention mixers by SSM mixers.
    Hybridize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        which: Which,
        /// Importance report that `--replace` selects from.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Init::Mil)]
        init: Init,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Distill a student checkpoint against a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the per-step log (JSONL).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run or resume the full staged pipeline.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
        /// Stop once this stage's artifacts are written.
        #[arg(long)]
        stop_after_stage: Option<usize>,
    },
    /// Measure decode throughput and memory.
    Bench {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        prompt: usize,
        #[arg(long, default_value_t = 1024)]
        gen: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Abort once cache plus state exceed this many bytes.
        #[arg(long)]
        memory_budget: Option<usize>,
        /// Accuracy CSV from `eval`, attached to the plot.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long, env = OUTPUT_DIR_ENV)]
        out_dir: PathBuf,
    },
    /// Held-out accuracy of one or more checkpoints.
    Eval {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Task::Copy)]
        task: Task,
        #[arg(long, default_value_t = 18)]
        seq_len: usize,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV to write; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Which {
    /// Replace the k least important layers of `--report`.
    #[arg(long)]
    replace: Option<usize>,
    /// Replace exactly these layers (comma separated).
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Loo,
    Mmr,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Mil,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Copy,
    Reverse,
    AssociativeRecall,
    ModularArithmetic,
    CharLm,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Copy => TaskKind::Copy,
            Task::Reverse => TaskKind::Reverse,
            Task::AssociativeRecall => TaskKind::AssociativeRecall,
            Task::ModularArithmetic => TaskKind::ModularArithmetic,
            Task::CharLm => TaskKind::CharLm,
        }
    }
}

fn fresh(path: &Path, force: bool) -> Result<(), Error> {
    if path.exists() && !force {
        return Err(Error::ArtifactExists(path.display().to_string()));
    }
    Ok(())
}

fn load(path: &Path) -> Result<Model, Error> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    checkpoint::load(path)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TrainTeacher { config, force } => {
            let cfg = PipelineConfig::load(&config)?;
            let dir = cfg.resolved_output_dir();
            std::fs::create_dir_all(&dir)?;
            let (model, resumed) = ensure_teacher(&cfg, &dir, force)?;
            let row = evaluate(&model, &cfg.eval_spec())?;
            let verb = if resumed { "kept existing" } else { "trained" };
            println!("{verb} teacher in {}: held-out accuracy {:.4}", dir.display(), row.accuracy);
        }
        Command::Importance {
            method,
            checkpoint: path,
            config,
            stage,
            out,
            force,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            fresh(&out, force)?;
            let model = load(&path)?;
            let staged = cfg.staged_resolved();
            let candidates = model.layout().layers_of(MixerKind::Mha);
            let report = match method {
                Method::Loo => {
                    let eval = staged.loo_eval(model.config.vocab_size, stage)?;
                    loo_importance(&model, &eval, &candidates, staged.loo_ablation, staged.loo_metric, 64)?
                }
                Method::Mmr => mmr_importance(&model, &candidates, &staged.mmr_config(stage))?,
            };
            report.save(&out)?;
            println!("ranking (least important first): {:?}", report.ranking);
        }
        Command::Hybridize {
            checkpoint: path,
            which,
            report,
            init,
            seed,
            out,
            force,
        } => {
            fresh(&out, force)?;
            let model = load(&path)?;
            let layers = match (which.replace, which.layers) {
                (_, Some(layers)) => layers,
                (Some(k), None) => {
                    let report = report
                        .ok_or_else(|| Error::Config("--replace needs --report".into()))
                        .and_then(|p| ImportanceReport::load(&p).map_err(|e| Error::Config(e.to_string())))?;
                    let already: BTreeSet<usize> = model.layout().layers_of(MixerKind::Mamba).into_iter().collect();
                    select_least_important(&report, k, &already)?
                }
                (None, None) => unreachable!("clap requires one of --replace/--layers"),
            };
            let init = match init {
                Init::Mil => InitMethod::Mil,
                Init::Random => InitMethod::Random,
            };
            let (hybrid, _) = replace_layers(&model, &layers, init, seed)?;
            checkpoint::save(&hybrid, &out)?;
            println!("{}", hybrid.layout());
        }
        Command::Distill {
            teacher,
            student,
            config,
            out,
            log,
            force,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            fresh(&out, force)?;
            let (teacher, student) = (load(&teacher)?, load(&student)?);
            let run = cfg.staged_resolved().distill;
            let (trained, stage_log) = distill_stage(&teacher, student, &run)?;
            checkpoint::save(&trained, &out)?;
            if let Some(log) = log {
                stage_log.write_jsonl(&log)?;
            }
            println!(
                "{}: KD loss {:.5} -> {:.5} over {} tokens",
                stage_log.layout, stage_log.eval_initial, stage_log.eval_final, stage_log.tokens
            );
        }
        Command::Pipeline {
            config,
            force,
            stop_after_stage,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let outcome = run_pipeline(
                &cfg,
                RunOptions {
                    force,
                    stop_after_stage,
                    skip_reports: false,
                },
            )?;
            for (stage, s) in outcome.log.stages.iter().enumerate() {
                let how = if outcome.resumed_stages.contains(&stage) { "resumed" } else { "ran" };
                println!("stage {stage} ({how}): {} KD loss {:.5} -> {:.5}", s.layout, s.eval_initial, s.eval_final);
            }
            for row in &outcome.eval {
                println!("{}: accuracy {:.4}", row.layout, row.accuracy);
            }
            println!("artifacts in {}", outcome.output_dir.display());
        }
        Command::Bench {
            checkpoint: paths,
            prompt,
            gen,
            repeats,
            warmup,
            memory_budget,
            eval,
            out_dir,
        } => {
            let accuracies = match eval {
                Some(p) => read_eval_csv(&p).map_err(|e| Error::Config(e.to_string()))?,
                None => Vec::new(),
            };
            std::fs::create_dir_all(&out_dir)?;
            let mut results = Vec::new();
            for path in &paths {
                let model = load(path)?;
                let name = model.layout().name();
                let scenario = BenchScenario {
                    layout: name.clone(),
                    prompt_tokens: prompt,
                    generate_tokens: gen,
                    repeats,
                    warmup,
                    memory_budget,
                };
                scenario.validate()?;
                let mut r = run_decode_bench(&model, &scenario)?;
                r.accuracy = accuracies.iter().find(|a| a.layout == name).map(|a| a.accuracy);
                println!(
                    "{name}: {:.1} tokens/s (IQR {:.1}), peak {} bytes, latency exponent {:.3}",
                    r.tokens_per_sec_median, r.tokens_per_sec_iqr, r.peak_bytes, r.growth.exponent
                );
                results.push(r);
            }
            emit_report(&results, &out_dir, "bench")?;
        }
        Command::Eval {
            checkpoint: paths,
            task,
            seq_len,
            count,
            seed,
            out,
        } => {
            let mut rows = Vec::new();
            for path in &paths {
                let model = load(path)?;
                let spec = TaskSpec {
                    kind: task.into(),
                    vocab_size: model.config.vocab_size,
                    seq_len,
                    count,
                    seed: derive_seed(seed, "eval", 0),
                    split: Split::HeldOut,
                };
                spec.validate()?;
                generate(&spec)?;
                rows.push(evaluate(&model, &spec)?);
            }
            match out {
                Some(p) => write_eval_csv(&rows, &p)?,
                None => {
                    for r in &rows {
                        println!("{},{},{:.6},{:.6}", r.layout, r.h, r.accuracy, r.expected_accuracy);
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
    }
}
