//! Decode throughput and memory measurement, growth-law fits and reports.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::BOS;
use crate::error::{Error, Result};
use crate::layout::MixerKind;
use crate::model::{InferenceCache, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchScenario {
    pub layout: String,
    pub prompt_tokens: usize,
    pub generate_tokens: usize,
    pub repeats: usize,
    pub warmup: usize,
    /// Cache plus state bytes allowed before the run is aborted.
    #[serde(default)]
    pub memory_budget: Option<usize>,
}

impl BenchScenario {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 3 {
            return Err(Error::Config(format!("bench needs at least 3 repeats, got {}", self.repeats)));
        }
        if self.warmup < 1 {
            return Err(Error::Config("bench needs at least one warm-up iteration".into()));
        }
        if self.prompt_tokens == 0 || self.generate_tokens == 0 {
            return Err(Error::Config("prompt and generation lengths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    /// Slope of log latency against log context length.
    pub exponent: f64,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    /// The curve was constant; the exponent is reported as 0.
    pub degenerate: bool,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub layout: String,
    pub h: usize,
    pub n_layers: usize,
    pub prompt_tokens: usize,
    pub generate_tokens: usize,
    /// Generation throughput of every measured repeat.
    pub tokens_per_sec: Vec<f64>,
    pub tokens_per_sec_median: f64,
    pub tokens_per_sec_iqr: f64,
    /// Context length at each generated token.
    pub positions: Vec<usize>,
    /// Median latency (seconds) across repeats at each position.
    pub latency: Vec<f64>,
    /// Cache plus state bytes after each generated token.
    pub bytes: Vec<usize>,
    pub peak_bytes: usize,
    pub growth: GrowthFit,
    /// Held-out accuracy of the benchmarked model, when known.
    #[serde(default)]
    pub accuracy: Option<f64>,
}

impl BenchResult {
    /// IQR over median above 25% is flagged as unstable timing.
    pub fn unstable(&self) -> bool {
        self.tokens_per_sec_iqr / self.tokens_per_sec_median > 0.25
    }

    pub fn summary(&self) -> BenchSummary {
        BenchSummary {
            layout: self.layout.clone(),
            h: self.h,
            l: self.n_layers,
            prompt: self.prompt_tokens,
            gen: self.generate_tokens,
            tokens_per_sec_median: self.tokens_per_sec_median,
            iqr: self.tokens_per_sec_iqr,
            peak_bytes: self.peak_bytes,
            exponent: self.growth.exponent,
        }
    }
}

/// One CSV row of a bench report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub layout: String,
    pub h: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub prompt: usize,
    pub gen: usize,
    pub tokens_per_sec_median: f64,
    pub iqr: f64,
    pub peak_bytes: usize,
    pub exponent: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Greedy batch-1 decode: feeds the prompt, then generates one token at a
/// time, timing each generation step. Only generation is timed.
pub fn run_decode_bench(model: &Model, scenario: &BenchScenario) -> Result<BenchResult> {
    scenario.validate()?;
    let total = scenario.prompt_tokens + scenario.generate_tokens;
    if total > model.config.max_seq {
        return Err(Error::Config(format!(
            "scenario needs {total} positions, model allows {}",
            model.config.max_seq
        )));
    }
    let vocab = model.config.vocab_size as usize;
    let prompt: Vec<u32> = (0..scenario.prompt_tokens)
        .map(|i| if i == 0 { BOS } else { 4 + (i as u32 % (vocab as u32 - 4).max(1)) })
        .collect();
    let gen = scenario.generate_tokens;
    let start_stream = || -> Result<(InferenceCache, u32)> {
        let mut cache = InferenceCache::new(model, 1);
        let logits = model.decode(&mut cache, &prompt)?;
        let next = argmax_last(logits.data(), vocab);
        Ok((cache, next))
    };
    // One timed generation step; returns latency and cache bytes afterwards.
    let step = |cache: &mut InferenceCache, next: &mut u32| -> Result<(f64, usize)> {
        let t0 = Instant::now();
        let logits = model.decode(cache, &[*next])?;
        *next = argmax_last(logits.data(), vocab);
        let dt = t0.elapsed().as_secs_f64();
        let b = cache.byte_size();
        if let Some(budget) = scenario.memory_budget {
            if b > budget {
                return Err(Error::OutOfMemory {
                    position: cache.position(),
                    bytes: b,
                    budget,
                });
            }
        }
        Ok((dt, b))
    };

    let mut bytes = Vec::with_capacity(gen);
    let mut per_repeat = Vec::with_capacity(scenario.repeats);
    for iteration in 0..scenario.warmup + scenario.repeats {
        let (mut cache, mut next) = start_stream()?;
        let mut lat = Vec::with_capacity(gen);
        for _ in 0..gen {
            let (dt, b) = step(&mut cache, &mut next)?;
            if iteration == 0 {
                bytes.push(b);
            }
            lat.push(dt);
        }
        if iteration >= scenario.warmup {
            per_repeat.push(lat);
        }
    }
    let tokens_per_sec: Vec<f64> = per_repeat
        .iter()
        .map(|lat| gen as f64 / lat.iter().sum::<f64>())
        .collect();
    let latency: Vec<f64> = (0..gen)
        .map(|i| {
            let s = sorted(&per_repeat.iter().map(|r| r[i]).collect::<Vec<_>>());
            quantile(&s, 0.5)
        })
        .collect();
    let positions: Vec<usize> = (0..gen).map(|i| scenario.prompt_tokens + i + 1).collect();
    let growth = if gen >= 16 {
        fit_growth(&positions, &latency)?
    } else {
        GrowthFit {
            exponent: f64::NAN,
            residual: f64::NAN,
            degenerate: true,
            points: gen,
        }
    };
    let tps = sorted(&tokens_per_sec);
    let layout = model.layout();
    Ok(BenchResult {
        layout: scenario.layout.clone(),
        h: layout.count(MixerKind::Mamba),
        n_layers: layout.n_layers(),
        prompt_tokens: scenario.prompt_tokens,
        generate_tokens: gen,
        tokens_per_sec_median: quantile(&tps, 0.5),
        tokens_per_sec_iqr: quantile(&tps, 0.75) - quantile(&tps, 0.25),
        tokens_per_sec,
        positions,
        latency,
        peak_bytes: bytes.iter().copied().max().unwrap_or(0),
        bytes,
        growth,
        accuracy: None,
    })
}

fn argmax_last(logits: &[f32], vocab: usize) -> u32 {
    let row = &logits[logits.len() - vocab..];
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Least-squares slope of `ln latency` against `ln position` over the tail
/// half of the curve.
pub fn fit_growth(positions: &[usize], latency: &[f64]) -> Result<GrowthFit> {
    if positions.len() != latency.len() {
        return Err(Error::invalid(
            "fit_growth",
            format!("{} positions for {} latencies", positions.len(), latency.len()),
        ));
    }
    if positions.len() < 16 {
        return Err(Error::invalid(
            "fit_growth",
            format!("need at least 16 points, got {}", positions.len()),
        ));
    }
    if positions.iter().any(|&p| p == 0) || latency.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::invalid("fit_growth", "positions and latencies must be positive"));
    }
    let tail = positions.len() / 2;
    let xs: Vec<f64> = positions[tail..].iter().map(|&p| (p as f64).ln()).collect();
    let ys: Vec<f64> = latency[tail..].iter().map(|l| l.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if syy <= 1e-24 * n || sxx == 0.0 {
        return Ok(GrowthFit {
            exponent: 0.0,
            residual: 0.0,
            degenerate: true,
            points: xs.len(),
        });
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(GrowthFit {
        exponent: slope,
        residual: (rss / n).sqrt(),
        degenerate: false,
        points: xs.len(),
    })
}

/// Writes `<stem>.csv` (one row per result, sorted by h) and `<stem>.svg`
/// (throughput against held-out accuracy) into `dir`.
pub fn emit_report(results: &[BenchResult], dir: &Path, stem: &str) -> Result<Vec<BenchSummary>> {
    if results.is_empty() {
        return Err(Error::Config("no bench results to report".into()));
    }
    let mut rows: Vec<&BenchResult> = results.iter().collect();
    rows.sort_by(|a, b| a.h.cmp(&b.h).then(a.layout.cmp(&b.layout)));
    let summaries: Vec<BenchSummary> = rows.iter().map(|r| r.summary()).collect();
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    for s in &summaries {
        w.serialize(s)?;
    }
    w.flush()?;
    std::fs::write(dir.join(format!("{stem}.svg")), render_svg(&rows))?;
    Ok(summaries)
}

pub fn read_report(path: &Path) -> Result<Vec<BenchSummary>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn render_svg(rows: &[&BenchResult]) -> String {
    let (w, h, m) = (640.0, 420.0, 60.0);
    let xmax = rows.iter().map(|r| r.tokens_per_sec_median).fold(0.0, f64::max).max(1e-9) * 1.1;
    let x = |v: f64| m + (w - 2.0 * m) * v / xmax;
    let y = |v: f64| h - m - (h - 2.0 * m) * v;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m,
        h - m
    );
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">decode throughput (tokens/s)</text>"#,
        w / 2.0,
        h - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {})">held-out accuracy</text>"#,
        h / 2.0,
        h / 2.0
    );
    for tick in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{tick:.1}</text>"#,
            m - 6.0,
            y(tick) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{:.0}</text>"#,
        x(xmax),
        h - m + 16.0,
        xmax
    );
    for r in rows {
        let (cx, cy) = (x(r.tokens_per_sec_median), y(r.accuracy.unwrap_or(0.0).clamp(0.0, 1.0)));
        let label = match r.accuracy {
            Some(a) => format!("{} ({a:.3})", r.layout),
            None => format!("{} (accuracy n/a)", r.layout),
        };
        let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="5" fill="steelblue"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
            cx + 8.0,
            cy - 6.0,
            escape(&label)
        );
    }
    s.push_str("</svg>\n");
    s
}
