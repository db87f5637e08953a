//! Deterministic synthetic token tasks.
//!
//! Ids `0..4` are reserved (`BOS`, `SEP`, `QUERY`, `PAD`); task symbols use
//! the rest of the vocabulary. Every sample is a pure function of
//! `(seed, split, index)`. Train and held-out samples are additionally
//! partitioned by a content hash, so the two splits can never share a
//! sequence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BOS: u32 = 0;
pub const SEP: u32 = 1;
pub const QUERY: u32 = 2;
pub const PAD: u32 = 3;
pub const N_SPECIAL: usize = 4;

const CHARSET: &str = "abcdefghijklmnopqrstuvwxyz ";
const WORDS: &[&str] = &[
    "the", "a", "cat", "dog", "bird", "sees", "likes", "finds", "small", "red", "old", "tree", "river",
    "stone", "runs", "sleeps", "near", "under", "over", "and", "quick", "slow", "house", "field",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// `BOS s₁…sₙ SEP s₁…sₙ`
    Copy,
    /// `BOS s₁…sₙ SEP sₙ…s₁`
    Reverse,
    /// `BOS k₁ v₁ … kₚ vₚ QUERY k v k v …`, every query answered by the value
    /// bound to its key.
    AssociativeRecall,
    /// Repeated `a b QUERY (a+b mod m) SEP` with `m` the number of symbols.
    ModularArithmetic,
    /// Windows of generated lowercase word text.
    CharLm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    HeldOut,
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeldOut => "held-out",
        }
    }

    fn parity(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::HeldOut => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub count: usize,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub tokens: Vec<u32>,
    /// `answer_mask[i]` marks `tokens[i]` as a scored prediction target.
    pub answer_mask: Vec<bool>,
}

impl TaskSpec {
    pub fn n_symbols(&self) -> usize {
        self.vocab_size.saturating_sub(N_SPECIAL)
    }

    /// Copy of this spec on the other side of the split.
    pub fn with_split(&self, split: Split) -> Self {
        Self { split, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.n_symbols();
        let l = self.seq_len;
        let need = |ok: bool, what: String| if ok { Ok(()) } else { Err(Error::Config(what)) };
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => {
                need(s >= 2, format!("{:?} needs at least 2 symbols, vocab {} has {s}", self.kind, self.vocab_size))?;
                need(l >= 4, format!("{:?} needs seq_len ≥ 4, got {l}", self.kind))
            }
            TaskKind::AssociativeRecall => {
                let pairs = recall_pairs(l);
                need(l >= 6, format!("associative recall needs seq_len ≥ 6, got {l}"))?;
                need(
                    s / 2 >= pairs && s >= 4,
                    format!("associative recall with {pairs} pairs needs {} symbols, vocab {} has {s}", 2 * pairs.max(2), self.vocab_size),
                )
            }
            TaskKind::ModularArithmetic => {
                need(s >= 2, format!("modular arithmetic needs at least 2 symbols, vocab {} has {s}", self.vocab_size))?;
                need(l >= 6, format!("modular arithmetic needs seq_len ≥ 6, got {l}"))
            }
            TaskKind::CharLm => {
                need(
                    s >= CHARSET.len(),
                    format!("char-lm needs {} symbols, vocab {} has {s}", CHARSET.len(), self.vocab_size),
                )?;
                need(l >= 2, format!("char-lm needs seq_len ≥ 2, got {l}"))
            }
        }
    }

    /// Sample `index` of this split.
    pub fn sample(&self, index: u64) -> Sample {
        let mut attempt = 0u64;
        loop {
            let mut rng = Rng::derive(self.seed, self.split.label(), index.wrapping_mul(1 << 20) + attempt);
            let s = match self.kind {
                TaskKind::Copy => copy_like(self, &mut rng, false),
                TaskKind::Reverse => copy_like(self, &mut rng, true),
                TaskKind::AssociativeRecall => recall(self, &mut rng),
                TaskKind::ModularArithmetic => modular(self, &mut rng),
                TaskKind::CharLm => char_lm(self, &mut rng),
            };
            if partition_bit(&s.tokens) == self.split.parity() {
                return s;
            }
            attempt += 1;
        }
    }
}

/// Which split may hold `tokens`. FNV-1a alone is not enough: its low bit
/// is the parity of the token ids, which some tasks fix by construction.
pub fn partition_bit(tokens: &[u32]) -> u64 {
    crate::rng::derive_seed(content_hash(tokens), "split", 0) >> 63
}

/// FNV-1a over the token ids.
pub fn content_hash(tokens: &[u32]) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    for t in tokens {
        h.write_u32(*t);
    }
    h.finish()
}

fn sym(i: usize) -> u32 {
    (N_SPECIAL + i) as u32
}

fn padded(spec: &TaskSpec, mut tokens: Vec<u32>, mut mask: Vec<bool>) -> Sample {
    tokens.resize(spec.seq_len, PAD);
    mask.resize(spec.seq_len, false);
    Sample { tokens, answer_mask: mask }
}

fn copy_like(spec: &TaskSpec, rng: &mut Rng, reverse: bool) -> Sample {
    let n = (spec.seq_len - 2) / 2;
    let src: Vec<u32> = (0..n).map(|_| sym(rng.below(spec.n_symbols()))).collect();
    let mut tokens = vec![BOS];
    tokens.extend(&src);
    tokens.push(SEP);
    let mut mask = vec![false; tokens.len()];
    if reverse {
        tokens.extend(src.iter().rev());
    } else {
        tokens.extend(&src);
    }
    mask.resize(tokens.len(), true);
    padded(spec, tokens, mask)
}

fn recall_pairs(seq_len: usize) -> usize {
    ((seq_len - 2) / 4).max(1)
}

fn recall(spec: &TaskSpec, rng: &mut Rng) -> Sample {
    let pairs = recall_pairs(spec.seq_len);
    let half = spec.n_symbols() / 2;
    let mut keys: Vec<usize> = (0..half).collect();
    for i in 0..pairs {
        let j = i + rng.below(half - i);
        keys.swap(i, j);
    }
    let keys = &keys[..pairs];
    let values: Vec<usize> = (0..pairs).map(|_| half + rng.below(spec.n_symbols() - half)).collect();
    let mut tokens = vec![BOS];
    for (k, v) in keys.iter().zip(&values) {
        tokens.push(sym(*k));
        tokens.push(sym(*v));
    }
    tokens.push(QUERY);
    let mut mask = vec![false; tokens.len()];
    while tokens.len() + 2 <= spec.seq_len {
        let q = rng.below(pairs);
        tokens.push(sym(keys[q]));
        tokens.push(sym(values[q]));
        mask.extend([false, true]);
    }
    padded(spec, tokens, mask)
}

fn modular(spec: &TaskSpec, rng: &mut Rng) -> Sample {
    let m = spec.n_symbols();
    let mut tokens = vec![BOS];
    let mut mask = vec![false];
    while tokens.len() + 5 <= spec.seq_len {
        let (a, b) = (rng.below(m), rng.below(m));
        tokens.extend([sym(a), sym(b), QUERY, sym((a + b) % m), SEP]);
        mask.extend([false, false, false, true, false]);
    }
    padded(spec, tokens, mask)
}

fn char_lm(spec: &TaskSpec, rng: &mut Rng) -> Sample {
    let mut text = String::new();
    while text.len() < spec.seq_len - 1 {
        text.push_str(WORDS[rng.below(WORDS.len())]);
        text.push(' ');
    }
    let mut tokens = vec![BOS];
    tokens.extend(
        text.chars()
            .take(spec.seq_len - 1)
            .map(|c| sym(CHARSET.find(c).expect("charset"))),
    );
    let mut mask = vec![true; tokens.len()];
    mask[0] = false;
    Sample { tokens, answer_mask: mask }
}

/// All `spec.count` samples of the split.
pub fn generate(spec: &TaskSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.count as u64).map(|i| spec.sample(i)).collect())
}

/// A batch of equal-length samples laid out batch-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub index: u64,
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<u32>,
    pub answer_mask: Vec<bool>,
}

impl Batch {
    pub fn from_samples(index: u64, samples: &[Sample]) -> Self {
        let seq_len = samples.first().map_or(0, |s| s.tokens.len());
        Self {
            index,
            batch: samples.len(),
            seq_len,
            tokens: samples.iter().flat_map(|s| s.tokens.iter().copied()).collect(),
            answer_mask: samples.iter().flat_map(|s| s.answer_mask.iter().copied()).collect(),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Per-position next-token targets and weights: row `(b, i)` predicts
    /// `tokens[b, i+1]` with weight 1 when that token is scored.
    pub fn next_token_targets(&self) -> (Vec<u32>, Vec<f32>) {
        let mut targets = vec![0u32; self.tokens.len()];
        let mut weights = vec![0f32; self.tokens.len()];
        for b in 0..self.batch {
            for i in 0..self.seq_len.saturating_sub(1) {
                let r = b * self.seq_len + i;
                targets[r] = self.tokens[r + 1];
                weights[r] = if self.answer_mask[r + 1] { 1.0 } else { 0.0 };
            }
        }
        (targets, weights)
    }
}

/// Endless batches; batch `k` holds samples `k·batch .. (k+1)·batch`.
#[derive(Clone, Debug)]
pub struct Stream {
    spec: TaskSpec,
    batch: usize,
    next: u64,
}

pub fn stream(spec: &TaskSpec, batch: usize) -> Result<Stream> {
    spec.validate()?;
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(Stream {
        spec: spec.clone(),
        batch,
        next: 0,
    })
}

impl Stream {
    pub fn batch_at(&self, index: u64) -> Batch {
        let start = index * self.batch as u64;
        let samples: Vec<Sample> = (start..start + self.batch as u64).map(|i| self.spec.sample(i)).collect();
        Batch::from_samples(index, &samples)
    }

    /// Resumes so that the next batch returned is `index`.
    pub fn seek(&mut self, index: u64) {
        self.next = index;
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }
}

impl Iterator for Stream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let b = self.batch_at(self.next);
        self.next += 1;
        Some(b)
    }
}

const EXPORT_MAGIC: &[u8; 8] = b"HDTOKv1\n";

/// Writes `samples` as magic, a `u64` header length, the `TaskSpec` as JSON, and
/// the token ids as little-endian `u32`.
pub fn export_binary(path: &Path, spec: &TaskSpec, samples: &[Sample]) -> Result<()> {
    let header = serde_json::to_vec(spec)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EXPORT_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for s in samples {
        for t in &s.tokens {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`export_binary`]; returns the `TaskSpec` and one token
/// vector per sample.
pub fn import_binary(path: &Path) -> Result<(TaskSpec, Vec<Vec<u32>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != EXPORT_MAGIC {
        return Err(Error::Checkpoint("not a token export file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let spec: TaskSpec = serde_json::from_slice(&header)?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() % (4 * spec.seq_len.max(1)) != 0 {
        return Err(Error::Checkpoint("token export body is truncated".into()));
    }
    let ids: Vec<u32> = body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let rows = ids.chunks(spec.seq_len).map(<[u32]>::to_vec).collect();
    Ok((spec, rows))
}
