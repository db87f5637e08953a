//! Layer importance: leave-one-out ablation and short single-layer
//! replacement runs, with least-important selection.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::distill::{distill_stage, DistillRunConfig};
use crate::error::{Error, Result};
use crate::hybridize::replace_layers;
use crate::layout::InitMethod;
use crate::model::{ForwardOptions, Mixer, Model};
use crate::rng::derive_seed;
use crate::train::{accuracy, expected_accuracy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceMethod {
    /// Leave-one-out: metric lost when the layer is ablated.
    Loo,
    /// Final distillation loss after replacing only this layer.
    Mmr,
}

impl ImportanceMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ImportanceMethod::Loo => "loo",
            ImportanceMethod::Mmr => "mmr",
        }
    }
}

/// Downstream metric behind leave-one-out scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LooMetric {
    /// Mean probability of the correct answer token.
    #[default]
    ExpectedAccuracy,
    /// Greedy answer accuracy; saturates on a perfect teacher, leaving
    /// every score at zero.
    Accuracy,
}

/// What leave-one-out removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// The whole residual block (mixer and MLP).
    #[default]
    Block,
    /// The mixer only; the block keeps its MLP.
    Mixer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub method: ImportanceMethod,
    /// One entry per scored layer, in layer order.
    pub scores: Vec<LayerScore>,
    /// Unablated metric value (leave-one-out only).
    pub baseline: Option<f64>,
    /// Layer ids from least to most important.
    pub ranking: Vec<usize>,
    pub eval_set: String,
    /// Distillation steps per candidate (replacement scoring only).
    pub steps: Option<usize>,
    /// Scores before any distillation step (replacement scoring only).
    pub initial_scores: Option<Vec<LayerScore>>,
    pub initial_ranking: Option<Vec<usize>>,
    /// With zero steps the scores are plain initial losses.
    pub zero_step: bool,
    pub seed: u64,
    pub ablation: Option<Ablation>,
    #[serde(default)]
    pub metric: Option<LooMetric>,
}

/// Layer ids sorted by ascending score, ties broken by lower layer id.
pub fn rank_ascending(scores: &[LayerScore]) -> Vec<usize> {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.layer.cmp(&b.layer)));
    s.into_iter().map(|x| x.layer).collect()
}

/// Pairs `(a, b)` whose relative order differs between two rankings of the
/// same layers.
pub fn ranking_crossovers(before: &[usize], after: &[usize]) -> Vec<(usize, usize)> {
    let pos = |r: &[usize], l: usize| r.iter().position(|&x| x == l);
    let mut out = Vec::new();
    for (i, &a) in before.iter().enumerate() {
        for &b in &before[i + 1..] {
            if let (Some(pa), Some(pb)) = (pos(after, a), pos(after, b)) {
                if pa > pb {
                    out.push((a, b));
                }
            }
        }
    }
    out
}

impl ImportanceReport {
    pub fn score_of(&self, layer: usize) -> Option<f64> {
        self.scores.iter().find(|s| s.layer == layer).map(|s| s.score)
    }

    /// Rank flips between the zero-step and final replacement scores.
    pub fn crossovers(&self) -> Vec<(usize, usize)> {
        match &self.initial_ranking {
            Some(init) => ranking_crossovers(init, &self.ranking),
            None => Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Metric drop on `eval` when each of `layers` is ablated in turn. The
/// model itself is never modified.
pub fn loo_importance(
    model: &Model,
    eval: &[Sample],
    layers: &[usize],
    ablation: Ablation,
    metric: LooMetric,
    batch: usize,
) -> Result<ImportanceReport> {
    let measure = |m: &Model, opts: ForwardOptions| match metric {
        LooMetric::ExpectedAccuracy => expected_accuracy(m, eval, batch, opts),
        LooMetric::Accuracy => accuracy(m, eval, batch, opts),
    };
    if eval.is_empty() {
        return Err(Error::Config("leave-one-out needs a nonempty evaluation set".into()));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= model.blocks.len()) {
        return Err(Error::Layout(format!("layer {l} does not exist")));
    }
    let baseline = measure(model, ForwardOptions::default())?;
    let mut scores = Vec::with_capacity(layers.len());
    for &l in layers {
        let ablated = match ablation {
            Ablation::Block => measure(model, ForwardOptions { skip_block: Some(l) })?,
            Ablation::Mixer => {
                let mut m = model.clone();
                m.blocks[l].mixer = Mixer::Identity;
                measure(&m, ForwardOptions::default())?
            }
        };
        scores.push(LayerScore {
            layer: l,
            score: baseline - ablated,
        });
    }
    Ok(ImportanceReport {
        method: ImportanceMethod::Loo,
        ranking: rank_ascending(&scores),
        scores,
        baseline: Some(baseline),
        eval_set: format!("{} held-out sequences of length {}", eval.len(), eval[0].tokens.len()),
        steps: None,
        initial_scores: None,
        initial_ranking: None,
        zero_step: false,
        seed: 0,
        ablation: Some(ablation),
        metric: Some(metric),
    })
}

/// For each candidate, replaces only that layer, distills the result against
/// the unmodified `model` for `cfg.steps` steps and scores the layer by the
/// final held-out KD loss. Each candidate's randomness depends only on
/// `(cfg.seed, layer)`.
pub fn mmr_importance(model: &Model, layers: &[usize], cfg: &DistillRunConfig) -> Result<ImportanceReport> {
    if layers.is_empty() {
        return Err(Error::Config("replacement scoring needs at least one attention layer".into()));
    }
    let mut scores = Vec::with_capacity(layers.len());
    let mut initial = Vec::with_capacity(layers.len());
    for &l in layers {
        let seed = derive_seed(cfg.seed, "mmr-candidate", l as u64);
        let (candidate, _) = replace_layers(model, &[l], InitMethod::Mil, seed)?;
        let (_, log) = distill_stage(model, candidate, cfg)?;
        initial.push(LayerScore {
            layer: l,
            score: log.eval_initial as f64,
        });
        scores.push(LayerScore {
            layer: l,
            score: log.eval_final as f64,
        });
    }
    Ok(ImportanceReport {
        method: ImportanceMethod::Mmr,
        ranking: rank_ascending(&scores),
        initial_ranking: Some(rank_ascending(&initial)),
        scores,
        initial_scores: Some(initial),
        baseline: None,
        eval_set: format!("{} held-out sequences of length {}", cfg.eval_sequences, cfg.seq_len),
        steps: Some(cfg.steps),
        zero_step: cfg.steps == 0,
        seed: cfg.seed,
        ablation: None,
        metric: None,
    })
}

/// The `k` least important layers not yet replaced, least important first.
pub fn select_least_important(
    report: &ImportanceReport,
    k: usize,
    already_replaced: &BTreeSet<usize>,
) -> Result<Vec<usize>> {
    let remaining: Vec<usize> = report
        .ranking
        .iter()
        .copied()
        .filter(|l| !already_replaced.contains(l))
        .collect();
    if k > remaining.len() {
        return Err(Error::Config(format!(
            "cannot select {k} layers, only {} candidates remain",
            remaining.len()
        )));
    }
    Ok(remaining[..k].to_vec())
}
