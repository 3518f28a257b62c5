//! Episode metrics, seeker-call distributions and decoding dynamics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::vocab;
use crate::error::{Error, Result};
use crate::runtime::{EpisodeRecord, Outcome, TraceLine};
use crate::training::{csv_err, Regime};

/// `x` as a percentage with one decimal.
pub fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub regime: Regime,
    pub episodes: usize,
    pub accuracy: f64,
    pub mean_tool_calls: f64,
    pub mean_turns: f64,
    /// Fraction of episodes with at least one unparsable span.
    pub invalid_action_rate: f64,
    /// Fraction of decoded spans that parsed.
    pub valid_span_rate: f64,
    pub mean_seeker_calls: f64,
    pub seeker_histogram: BTreeMap<usize, usize>,
    pub outcomes: BTreeMap<String, usize>,
    pub decode_steps: usize,
    pub decoded_tokens: usize,
    pub spans: usize,
    pub wall_ms: f64,
}

impl MetricsReport {
    /// Committed tokens per decoding step; 0 when nothing was decoded by a
    /// model.
    pub fn tokens_per_step(&self) -> f64 {
        if self.decode_steps == 0 {
            0.0
        } else {
            self.decoded_tokens as f64 / self.decode_steps as f64
        }
    }

    pub fn steps_per_span(&self) -> f64 {
        if self.spans == 0 {
            0.0
        } else {
            self.decode_steps as f64 / self.spans as f64
        }
    }
}

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::AnsweredCorrect => "answered_correct",
        Outcome::AnsweredWrong => "answered_wrong",
        Outcome::BudgetExhausted => "budget_exhausted",
        Outcome::Fallback => "fallback",
    }
}

fn single_regime(records: &[EpisodeRecord]) -> Result<Regime> {
    let first = records.first().ok_or_else(|| Error::arg("no episode records"))?.regime;
    if records.iter().any(|r| r.regime != first) {
        return Err(Error::arg("records mix regimes"));
    }
    Ok(first)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeekerDistribution {
    /// Seeker calls per episode -> number of episodes.
    pub histogram: BTreeMap<usize, usize>,
    pub mean: f64,
}

pub fn seeker_distribution(records: &[EpisodeRecord]) -> SeekerDistribution {
    let mut histogram = BTreeMap::new();
    for r in records {
        *histogram.entry(r.consumed.seeker_calls).or_insert(0) += 1;
    }
    let total: usize = records.iter().map(|r| r.consumed.seeker_calls).sum();
    SeekerDistribution {
        histogram,
        mean: if records.is_empty() {
            0.0
        } else {
            total as f64 / records.len() as f64
        },
    }
}

pub fn episode_metrics(records: &[EpisodeRecord]) -> Result<MetricsReport> {
    let regime = single_regime(records)?;
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&EpisodeRecord) -> usize| records.iter().map(f).sum::<usize>() as f64 / n;
    let mut outcomes = BTreeMap::new();
    for r in records {
        *outcomes.entry(outcome_name(r.outcome).to_string()).or_insert(0) += 1;
    }
    let attempts = || records.iter().flat_map(EpisodeRecord::attempts);
    let spans = attempts().filter(|a| a.trace.is_some()).count();
    let seekers = seeker_distribution(records);
    Ok(MetricsReport {
        regime,
        episodes: records.len(),
        accuracy: mean(&|r| usize::from(r.outcome == Outcome::AnsweredCorrect)),
        mean_tool_calls: mean(&|r| r.consumed.tool_calls),
        mean_turns: mean(&|r| r.consumed.rounds),
        invalid_action_rate: mean(&|r| usize::from(r.has_invalid_span())),
        valid_span_rate: {
            let all = attempts().count();
            attempts().filter(|a| a.parse_error.is_none()).count() as f64 / all.max(1) as f64
        },
        mean_seeker_calls: seekers.mean,
        seeker_histogram: seekers.histogram,
        outcomes,
        decode_steps: attempts().map(|a| a.decode_steps).sum(),
        decoded_tokens: attempts().filter(|a| a.trace.is_some()).map(|a| a.raw.len()).sum(),
        spans,
        wall_ms: records.iter().map(|r| r.wall_ms).sum(),
    })
}

/// Writes `metrics.csv`, `seeker.csv`, `timing.csv` and `metrics.json` into
/// `dir`. The CSVs other than `timing.csv` never depend on wall clock.
pub fn write_metrics(dir: &Path, m: &MetricsReport) -> Result<()> {
    crate::data::write_json(&dir.join("metrics.json"), m)?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv")).map_err(csv_err)?;
    let outcome = |k: Outcome| m.outcomes.get(outcome_name(k)).copied().unwrap_or(0).to_string();
    w.write_record([
        "regime",
        "episodes",
        "accuracy",
        "tool_calls",
        "turns",
        "invalid_action_rate",
        "valid_span_rate",
        "seeker_calls",
        "decode_steps",
        "decoded_tokens",
        "spans",
        "tokens_per_step",
        "answered_correct",
        "answered_wrong",
        "budget_exhausted",
        "fallback",
    ])
    .map_err(csv_err)?;
    w.write_record([
        m.regime.to_string(),
        m.episodes.to_string(),
        m.accuracy.to_string(),
        m.mean_tool_calls.to_string(),
        m.mean_turns.to_string(),
        m.invalid_action_rate.to_string(),
        m.valid_span_rate.to_string(),
        m.mean_seeker_calls.to_string(),
        m.decode_steps.to_string(),
        m.decoded_tokens.to_string(),
        m.spans.to_string(),
        m.tokens_per_step().to_string(),
        outcome(Outcome::AnsweredCorrect),
        outcome(Outcome::AnsweredWrong),
        outcome(Outcome::BudgetExhausted),
        outcome(Outcome::Fallback),
    ])
    .map_err(csv_err)?;
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("seeker.csv")).map_err(csv_err)?;
    w.write_record(["seeker_calls", "episodes"]).map_err(csv_err)?;
    for (k, v) in &m.seeker_histogram {
        w.write_record([k.to_string(), v.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("timing.csv")).map_err(csv_err)?;
    w.write_record(["regime", "episodes", "wall_ms"]).map_err(csv_err)?;
    w.write_record([m.regime.to_string(), m.episodes.to_string(), m.wall_ms.to_string()])
        .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

pub fn read_metrics(dir: &Path) -> Result<MetricsReport> {
    crate::data::read_json(&dir.join("metrics.json"))
}

/// Side-by-side table of the headline episode metrics.
pub fn compare_table(rows: &[(&str, &MetricsReport)]) -> String {
    let header = ["Run", "Regime", "Accuracy (%)", "Tool Calls", "Turns Used", "Invalid Action Rate (%)"];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for (name, m) in rows {
        cells.push(vec![
            name.to_string(),
            m.regime.to_string(),
            pct(m.accuracy),
            format!("{:.1}", m.mean_tool_calls),
            format!("{:.1}", m.mean_turns),
            pct(m.invalid_action_rate),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let line = |r: &[String]| {
        let body: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        format!("| {} |", body.join(" | "))
    };
    let rule = format!(
        "|{}|",
        widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")
    );
    let mut out = vec![line(&cells[0]), rule];
    out.extend(cells[1..].iter().map(|r| line(r)));
    out.join("\n") + "\n"
}

/// Dynamics of one decoded block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDynamics {
    pub key: String,
    pub block: usize,
    pub span: usize,
    /// 1-based step at which each block position was committed.
    pub order: Vec<usize>,
    /// Masked positions before each step.
    pub remaining: Vec<usize>,
    pub tokens: Vec<usize>,
    /// Mean entropy of the positions still masked at each step.
    pub entropy: Vec<f64>,
}

impl BlockDynamics {
    pub fn steps(&self) -> usize {
        self.tokens.len()
    }

    /// Commit step of each position scaled to `(0, 1]` by the block's step
    /// count.
    pub fn relative_order(&self) -> Vec<f64> {
        let n = self.steps() as f64;
        self.order.iter().map(|s| *s as f64 / n).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    /// 1-based step within a block.
    pub step: usize,
    pub blocks: usize,
    pub mean_entropy: f64,
    pub mean_remaining: f64,
    pub mean_tokens: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBucket {
    pub lo: f64,
    pub hi: f64,
    /// Masked positions observed in this bucket at the start of a step.
    pub candidates: usize,
    pub committed: usize,
}

impl ConfidenceBucket {
    /// Per-step probability of committing a position in this bucket.
    pub fn probability(&self) -> Option<f64> {
        (self.candidates > 0).then(|| self.committed as f64 / self.candidates as f64)
    }
}

pub const CONFIDENCE_BUCKETS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    pub regime: Option<Regime>,
    pub blocks: Vec<BlockDynamics>,
    pub series: Vec<SeriesPoint>,
    pub confidence: Vec<ConfidenceBucket>,
}

impl DynamicsReport {
    pub fn total_steps(&self) -> usize {
        self.blocks.iter().map(BlockDynamics::steps).sum()
    }

    pub fn total_tokens(&self) -> usize {
        self.blocks.iter().map(|b| b.span).sum()
    }

    pub fn tokens_per_step(&self) -> f64 {
        self.total_tokens() as f64 / self.total_steps().max(1) as f64
    }
}

/// Splits a trace into blocks and checks its conservation laws: each
/// position is committed once, remaining counts fall by exactly the
/// committed count and reach zero, and entropies lie in `[0, ln V]`.
pub fn trace_blocks(line: &TraceLine) -> std::result::Result<Vec<BlockDynamics>, String> {
    let max_entropy = (vocab::SIZE as f64).ln() + 1e-9;
    let mut out: Vec<BlockDynamics> = Vec::new();
    let mut start = 0usize;
    for (i, s) in line.trace.steps.iter().enumerate() {
        if s.regime != line.regime {
            return Err(format!("step {i} regime {} differs from trace regime", s.regime));
        }
        let new_block = out.last().is_none_or(|b| b.block != s.block);
        if new_block {
            if let Some(b) = out.last() {
                close_block(b)?;
            }
            start = s.block_start;
            if s.block_span == 0 {
                return Err(format!("step {i} has an empty block"));
            }
            out.push(BlockDynamics {
                key: line.key.clone(),
                block: s.block,
                span: s.block_span,
                order: vec![0; s.block_span],
                remaining: Vec::new(),
                tokens: Vec::new(),
                entropy: Vec::new(),
            });
        }
        let b = out.last_mut().expect("pushed above");
        let expected_remaining = b.span - b.tokens.iter().sum::<usize>();
        if s.step_in_block != b.steps() + 1 {
            return Err(format!("step {i} has step_in_block {} but follows {} steps", s.step_in_block, b.steps()));
        }
        if s.remaining_before != expected_remaining {
            return Err(format!(
                "step {i} reports {} remaining, expected {expected_remaining}",
                s.remaining_before
            ));
        }
        if s.committed_positions.is_empty() || s.committed_positions.len() != s.committed_tokens.len() {
            return Err(format!("step {i} commits nothing or misaligned tokens"));
        }
        for &p in &s.committed_positions {
            let slot = p
                .checked_sub(start)
                .and_then(|o| b.order.get_mut(o))
                .ok_or_else(|| format!("step {i} commits position {p} outside its block"))?;
            if *slot != 0 {
                return Err(format!("step {i} recommits position {p}"));
            }
            *slot = s.step_in_block;
        }
        let mut h = 0.0;
        for c in &s.candidates {
            if !(0.0..=max_entropy).contains(&c.entropy) {
                return Err(format!("step {i} entropy {} outside [0, ln V]", c.entropy));
            }
            if !(0.0..=1.0 + 1e-9).contains(&c.confidence) {
                return Err(format!("step {i} confidence {} outside [0, 1]", c.confidence));
            }
            h += c.entropy;
        }
        if s.candidates.is_empty() {
            return Err(format!("step {i} lists no candidates"));
        }
        b.remaining.push(s.remaining_before);
        b.tokens.push(s.committed_positions.len());
        b.entropy.push(h / s.candidates.len() as f64);
    }
    if let Some(b) = out.last() {
        close_block(b)?;
    }
    Ok(out)
}

fn close_block(b: &BlockDynamics) -> std::result::Result<(), String> {
    if b.tokens.iter().sum::<usize>() != b.span {
        return Err(format!("block {} commits {} of {} positions", b.block, b.tokens.iter().sum::<usize>(), b.span));
    }
    Ok(())
}

fn bucket(conf: f64) -> usize {
    ((conf * CONFIDENCE_BUCKETS as f64).floor() as usize).min(CONFIDENCE_BUCKETS - 1)
}

pub fn decode_dynamics(traces: &[TraceLine]) -> Result<DynamicsReport> {
    let mut blocks = Vec::new();
    for t in traces {
        blocks.extend(trace_blocks(t).map_err(|m| Error::arg(format!("trace {}: {m}", t.key)))?);
    }
    let regime = match traces.first() {
        Some(f) if traces.iter().all(|t| t.regime == f.regime) => Some(f.regime),
        _ => None,
    };
    let mut confidence: Vec<ConfidenceBucket> = (0..CONFIDENCE_BUCKETS)
        .map(|i| ConfidenceBucket {
            lo: i as f64 / CONFIDENCE_BUCKETS as f64,
            hi: (i + 1) as f64 / CONFIDENCE_BUCKETS as f64,
            ..ConfidenceBucket::default()
        })
        .collect();
    for s in traces.iter().flat_map(|t| &t.trace.steps) {
        for c in &s.candidates {
            let b = &mut confidence[bucket(c.confidence)];
            b.candidates += 1;
            b.committed += usize::from(c.committed);
        }
    }
    let longest = blocks.iter().map(BlockDynamics::steps).max().unwrap_or(0);
    let series = (0..longest)
        .map(|k| {
            let live: Vec<&BlockDynamics> = blocks.iter().filter(|b| b.steps() > k).collect();
            let n = live.len() as f64;
            SeriesPoint {
                step: k + 1,
                blocks: live.len(),
                mean_entropy: live.iter().map(|b| b.entropy[k]).sum::<f64>() / n,
                mean_remaining: live.iter().map(|b| b.remaining[k] as f64).sum::<f64>() / n,
                mean_tokens: live.iter().map(|b| b.tokens[k] as f64).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(DynamicsReport {
        regime,
        blocks,
        series,
        confidence,
    })
}

pub fn write_dynamics(dir: &Path, d: &DynamicsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("dynamics_order.csv")).map_err(csv_err)?;
    w.write_record(["trace", "block", "position", "step", "relative"]).map_err(csv_err)?;
    for b in &d.blocks {
        for (p, (s, r)) in b.order.iter().zip(b.relative_order()).enumerate() {
            w.write_record([b.key.clone(), b.block.to_string(), p.to_string(), s.to_string(), r.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;

    // Heatmap source: one row per block, one column per block position.
    let width = d.blocks.iter().map(|b| b.span).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(dir.join("dynamics_order_matrix.csv")).map_err(csv_err)?;
    let mut header = vec!["trace".to_string(), "block".to_string()];
    header.extend((0..width).map(|p| format!("p{p}")));
    w.write_record(&header).map_err(csv_err)?;
    for b in &d.blocks {
        let rel = b.relative_order();
        let mut row = vec![b.key.clone(), b.block.to_string()];
        row.extend((0..width).map(|p| rel.get(p).map(f64::to_string).unwrap_or_default()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("dynamics_steps.csv")).map_err(csv_err)?;
    w.write_record(["trace", "block", "step", "remaining", "tokens", "mean_entropy"])
        .map_err(csv_err)?;
    for b in &d.blocks {
        for k in 0..b.steps() {
            w.write_record([
                b.key.clone(),
                b.block.to_string(),
                (k + 1).to_string(),
                b.remaining[k].to_string(),
                b.tokens[k].to_string(),
                b.entropy[k].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("dynamics_series.csv")).map_err(csv_err)?;
    for p in &d.series {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("dynamics_confidence.csv")).map_err(csv_err)?;
    w.write_record(["lo", "hi", "candidates", "committed", "probability"]).map_err(csv_err)?;
    for c in &d.confidence {
        w.write_record([
            format!("{:.1}", c.lo),
            format!("{:.1}", c.hi),
            c.candidates.to_string(),
            c.committed.to_string(),
            c.probability().map(|p| p.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSONL file, naming the 1-based line of the first bad record.
pub fn read_jsonl_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Input {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<EpisodeRecord>> {
    read_jsonl_lines(path)
}

/// Reads and validates decode traces; a conservation violation is reported
/// against its line.
pub fn read_traces(path: &Path) -> Result<Vec<TraceLine>> {
    let traces: Vec<TraceLine> = read_jsonl_lines(path)?;
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .collect();
    for (t, line) in traces.iter().zip(lines) {
        trace_blocks(t).map_err(|msg| Error::Input {
            path: path.to_path_buf(),
            line,
            msg,
        })?;
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::{Candidate, DecodeTrace, TraceStep};

    fn step(regime: Regime, block: usize, start: usize, span: usize, k: usize, remaining: usize, pos: &[usize], conf: f64) -> TraceStep {
        TraceStep {
            regime,
            block,
            block_start: start,
            block_span: span,
            step_in_block: k,
            remaining_before: remaining,
            committed_positions: pos.to_vec(),
            committed_tokens: pos.iter().map(|_| vocab::PAD).collect(),
            candidates: pos
                .iter()
                .map(|&p| Candidate {
                    position: p,
                    token: vocab::PAD,
                    confidence: conf,
                    entropy: 0.5,
                    committed: true,
                })
                .collect(),
            wall_ms: 0.0,
        }
    }

    fn line(regime: Regime, steps: Vec<TraceStep>) -> TraceLine {
        TraceLine {
            key: "t/r1/a0".into(),
            task_id: "t".into(),
            regime,
            round: 1,
            attempt: 0,
            trace: DecodeTrace { steps },
        }
    }

    #[test]
    fn diffusion_block_series() {
        let d = Regime::Diffusion;
        let t = line(
            d,
            vec![
                step(d, 0, 0, 6, 1, 6, &[0, 2, 5], 0.95),
                step(d, 0, 0, 6, 2, 3, &[1, 4], 0.95),
                step(d, 0, 0, 6, 3, 1, &[3], 0.4),
            ],
        );
        let r = decode_dynamics(&[t]).unwrap();
        let b = &r.blocks[0];
        assert_eq!(b.tokens, vec![3, 2, 1]);
        assert_eq!(b.remaining, vec![6, 3, 1]);
        assert_eq!(b.order, vec![1, 2, 1, 3, 2, 1]);
        assert_eq!(r.tokens_per_step(), 2.0);
        assert_eq!(r.confidence[9].probability(), Some(1.0));
        assert_eq!(r.confidence[4].candidates, 1);
        assert_eq!(r.confidence[0].probability(), None);
    }

    #[test]
    fn ar_order_is_identity() {
        let a = Regime::Ar;
        let n = 5;
        let t = line(a, (0..n).map(|i| step(a, 0, 0, n, i + 1, n - i, &[i], 1.0)).collect());
        let r = decode_dynamics(&[t]).unwrap();
        assert_eq!(r.blocks[0].order, (1..=n).collect::<Vec<_>>());
        assert_eq!(r.tokens_per_step(), 1.0);
        assert!(r.series.iter().all(|p| p.mean_tokens == 1.0));
        // Every candidate sits in the top bucket.
        assert_eq!(r.confidence[9].probability(), Some(1.0));
        assert!(r.confidence[..9].iter().all(|c| c.probability().is_none()));
    }

    #[test]
    fn conservation_violations_are_rejected() {
        let d = Regime::Diffusion;
        let recommit = line(d, vec![step(d, 0, 0, 2, 1, 2, &[0], 1.0), step(d, 0, 0, 2, 2, 1, &[0], 1.0)]);
        assert!(trace_blocks(&recommit).is_err());
        let short = line(d, vec![step(d, 0, 0, 3, 1, 3, &[0], 1.0)]);
        assert!(trace_blocks(&short).is_err());
        let mut hot = step(d, 0, 0, 1, 1, 1, &[0], 1.0);
        hot.candidates[0].entropy = 6.0;
        assert!(trace_blocks(&line(d, vec![hot])).is_err());
    }

    #[test]
    fn bad_trace_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.jsonl");
        let d = Regime::Diffusion;
        let good = serde_json::to_string(&line(d, vec![step(d, 0, 0, 1, 1, 1, &[0], 1.0)])).unwrap();
        let bad = serde_json::to_string(&line(d, vec![step(d, 0, 0, 2, 1, 2, &[0], 1.0)])).unwrap();
        std::fs::write(&path, format!("{good}\n{good}\n{bad}\n")).unwrap();
        match read_traces(&path) {
            Err(Error::Input { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        match read_traces(&path) {
            Err(Error::Input { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn percentages_round_to_one_decimal() {
        assert_eq!(pct(7.0 / 110.0), "6.4");
        assert_eq!(pct(0.155), "15.5");
        assert_eq!(pct(1.0), "100.0");
    }
}
