//! Action-span generation: confidence-gated block denoising and greedy
//! left-to-right decoding, both with per-step traces.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{TokenId, END_ACTION, MASK};
use crate::error::{Error, Result};
use crate::masks::{block_decode_mask, causal_mask, AttentionMask};
use crate::model::{Float, Matrix, Parameters, RowCache};
use crate::training::Regime;

/// Anything that scores the token at a target position.
pub trait Predictor {
    fn vocab(&self) -> usize;

    /// Max sequence length the predictor accepts.
    fn max_len(&self) -> usize;

    /// Starts scoring one sequence as it is decoded.
    fn session(&self) -> Box<dyn Session + '_>;
}

pub trait Session {
    /// Raw scores over the vocabulary for each absolute position in
    /// `targets`, given `tokens` (with `MASK` at undecided positions). The
    /// first `frozen` tokens never change again within the session and
    /// their rows attend only inside that prefix.
    fn score(&mut self, tokens: &[TokenId], mask: &AttentionMask, frozen: usize, targets: &[usize]) -> Result<Vec<Vec<f64>>>;
}

impl<F: Float> Predictor for Parameters<F> {
    fn vocab(&self) -> usize {
        self.config.vocab
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn session(&self) -> Box<dyn Session + '_> {
        Box::new(RowCache::new(self))
    }
}

fn key_list(mask: &AttentionMask, row: usize) -> Vec<u32> {
    mask.row(row)
        .iter()
        .enumerate()
        .filter(|(_, a)| **a)
        .map(|(j, _)| j as u32)
        .collect()
}

/// Shifted prediction: position `p` is scored from row `p - 1`.
impl<F: Float> Session for RowCache<'_, F> {
    fn score(&mut self, tokens: &[TokenId], mask: &AttentionMask, frozen: usize, targets: &[usize]) -> Result<Vec<Vec<f64>>> {
        if mask.len() != tokens.len() || frozen > tokens.len() {
            return Err(Error::Shape("mask, tokens and frozen prefix disagree".into()));
        }
        if targets.iter().any(|&t| t == 0 || t > tokens.len()) {
            return Err(Error::arg("target without a predecessor row"));
        }
        if self.len() > frozen {
            return Err(Error::arg("frozen prefix shrank within a session"));
        }
        let base = self.len();
        let keys: Vec<Vec<u32>> = (base..frozen).map(|r| key_list(mask, r)).collect();
        if keys.iter().flatten().any(|&j| j as usize >= frozen) {
            return Err(Error::arg("a frozen row attends past the frozen prefix"));
        }
        self.run(&tokens[base..frozen], &keys, true)?;
        let fresh = if targets.iter().any(|&t| t - 1 >= frozen) {
            let keys: Vec<Vec<u32>> = (frozen..tokens.len()).map(|r| key_list(mask, r)).collect();
            Some(self.run(&tokens[frozen..], &keys, false)?)
        } else {
            None
        };
        let mut rows = Matrix::zeros(targets.len(), self.width());
        for (i, &t) in targets.iter().enumerate() {
            let r = t - 1;
            let src = match &fresh {
                Some(f) if r >= frozen => f.row(r - frozen),
                _ => self.hidden(r),
            };
            rows.row_mut(i).copy_from_slice(src);
        }
        let z = self.logits(&rows)?;
        Ok((0..targets.len())
            .map(|i| z.row(i).iter().map(|x| x.f64()).collect())
            .collect())
    }
}

/// Fixed scores per action-span offset, ignoring the input. Used to test the
/// decoding rules in isolation.
#[derive(Debug, Clone)]
pub struct ScriptedLogits {
    pub ctx_len: usize,
    pub rows: Vec<Vec<f64>>,
    pub max_len: usize,
}

impl Predictor for ScriptedLogits {
    fn vocab(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn session(&self) -> Box<dyn Session + '_> {
        Box::new(self)
    }
}

impl Session for &ScriptedLogits {
    fn score(&mut self, _tokens: &[TokenId], _mask: &AttentionMask, _frozen: usize, targets: &[usize]) -> Result<Vec<Vec<f64>>> {
        targets
            .iter()
            .map(|&t| {
                t.checked_sub(self.ctx_len)
                    .and_then(|o| self.rows.get(o))
                    .cloned()
                    .ok_or_else(|| Error::arg(format!("no scripted row for position {t}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub tau: f64,
    pub block_len: usize,
    pub max_action_len: usize,
    pub max_steps_per_block: usize,
    pub regime: Regime,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            tau: 0.9,
            block_len: 32,
            max_action_len: 64,
            max_steps_per_block: 32,
            regime: Regime::Diffusion,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.block_len == 0 || self.max_action_len == 0 {
            return Err(Error::Config("block_len and max_action_len must be positive".into()));
        }
        if self.regime == Regime::Diffusion {
            if self.max_action_len % self.block_len != 0 {
                return Err(Error::Config("max_action_len must be a multiple of block_len".into()));
            }
            if self.max_steps_per_block < self.block_len {
                return Err(Error::Config("max_steps_per_block must be at least block_len".into()));
            }
        }
        Ok(())
    }
}

/// One still-masked position as seen at the start of a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Offset within the action span.
    pub position: usize,
    pub token: TokenId,
    pub confidence: f64,
    pub entropy: f64,
    pub committed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub regime: Regime,
    pub block: usize,
    /// Span offset of the block's first position.
    pub block_start: usize,
    /// Positions the block covers.
    pub block_span: usize,
    /// 1-based step index within the block.
    pub step_in_block: usize,
    pub remaining_before: usize,
    pub committed_positions: Vec<usize>,
    pub committed_tokens: Vec<TokenId>,
    pub candidates: Vec<Candidate>,
    pub wall_ms: f64,
}

impl TraceStep {
    pub fn tokens_committed(&self) -> usize {
        self.committed_positions.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<TraceStep>,
}

impl DecodeTrace {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    /// Checks the per-trace invariants: every decoded position is committed
    /// exactly once and remaining counts fall strictly within each block.
    pub fn check(&self, span_len: usize) -> Result<()> {
        let mut seen = vec![false; span_len];
        for (i, s) in self.steps.iter().enumerate() {
            for &p in &s.committed_positions {
                match seen.get_mut(p) {
                    Some(slot) if !*slot => *slot = true,
                    _ => return Err(Error::arg(format!("step {i} recommits or overruns position {p}"))),
                }
            }
            if s.committed_positions.is_empty() {
                return Err(Error::arg(format!("step {i} commits nothing")));
            }
            if let Some(next) = self.steps.get(i + 1) {
                if next.block == s.block && next.remaining_before != s.remaining_before - s.tokens_committed() {
                    return Err(Error::arg(format!("step {i} remaining count does not fall by its commits")));
                }
            }
        }
        if seen.iter().any(|x| !x) {
            return Err(Error::arg("some decoded position was never committed"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    /// Every committed token, including any block tail after `END_ACTION`.
    pub raw: Vec<TokenId>,
    pub trace: DecodeTrace,
    /// No `END_ACTION` within `max_action_len`.
    pub truncated: bool,
}

impl DecodeOutput {
    /// Tokens up to and including the first `END_ACTION`.
    pub fn action(&self) -> &[TokenId] {
        match self.raw.iter().position(|t| *t == END_ACTION) {
            Some(i) => &self.raw[..=i],
            None => &self.raw,
        }
    }
}

/// Shannon entropy (nats) of a non-negative weight vector after normalizing.
pub fn entropy(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::arg("weights must be finite and non-negative"));
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::arg("weights sum to zero"));
    }
    let h: f64 = weights
        .iter()
        .filter(|w| **w > 0.0)
        .map(|w| {
            let p = w / sum;
            -p * p.ln()
        })
        .sum();
    Ok(h.max(0.0))
}

/// Argmax, confidence and entropy of the softmax over `scores` with `MASK`
/// excluded. Ties go to the lowest token id.
fn summarize(scores: &[f64]) -> Result<(TokenId, f64, f64)> {
    let mut best = None;
    let mut max = f64::NEG_INFINITY;
    for (i, s) in scores.iter().enumerate() {
        if i == MASK.index() {
            continue;
        }
        if *s > max {
            max = *s;
            best = Some(i);
        }
    }
    let best = best.ok_or_else(|| Error::arg("no scorable token"))?;
    if !max.is_finite() {
        return Err(Error::arg("non-finite scores"));
    }
    let weights: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| if i == MASK.index() { 0.0 } else { (s - max).exp() })
        .collect();
    let sum: f64 = weights.iter().sum();
    Ok((TokenId(best as u16), 1.0 / sum, entropy(&weights)?))
}

fn check_len(model: &impl Predictor, ctx: &[TokenId], cfg: &DecodeConfig) -> Result<()> {
    cfg.validate()?;
    if ctx.is_empty() {
        return Err(Error::arg("decoding needs a non-empty context"));
    }
    if ctx.len() + cfg.max_action_len > model.max_len() {
        return Err(Error::arg(format!(
            "context {} + max_action_len {} exceeds max_len {}",
            ctx.len(),
            cfg.max_action_len,
            model.max_len()
        )));
    }
    Ok(())
}

pub fn decode(model: &impl Predictor, context: &[TokenId], cfg: &DecodeConfig) -> Result<DecodeOutput> {
    match cfg.regime {
        Regime::Diffusion => decode_diffusion(model, context, cfg),
        Regime::Ar => decode_ar(model, context, cfg),
    }
}

/// Block-wise confidence-gated denoising. Each step commits every masked
/// position whose confidence exceeds `tau`, or the single most confident
/// one if none does. A block always runs to completion; no further block is
/// started once `END_ACTION` has been committed.
pub fn decode_diffusion(model: &impl Predictor, context: &[TokenId], cfg: &DecodeConfig) -> Result<DecodeOutput> {
    check_len(model, context, cfg)?;
    let c = context.len();
    let bl = cfg.block_len;
    let mut seq = context.to_vec();
    let mut trace = DecodeTrace::default();
    let mut session = model.session();
    let mut ended = false;
    let mut block = 0;
    while !ended && seq.len() - c < cfg.max_action_len {
        let start = seq.len();
        seq.resize(start + bl, MASK);
        let mask = block_decode_mask(c, start, bl)?;
        let mut remaining: Vec<usize> = (start..start + bl).collect();
        let mut step_in_block = 0;
        while !remaining.is_empty() {
            if step_in_block >= cfg.max_steps_per_block {
                return Err(Error::arg("block exceeded max_steps_per_block"));
            }
            step_in_block += 1;
            let t0 = Instant::now();
            let scores = session.score(&seq, &mask, start, &remaining)?;
            let mut candidates = Vec::with_capacity(remaining.len());
            for (p, s) in remaining.iter().zip(&scores) {
                let (token, confidence, entropy) = summarize(s)?;
                candidates.push(Candidate {
                    position: p - c,
                    token,
                    confidence,
                    entropy,
                    committed: confidence > cfg.tau,
                });
            }
            if !candidates.iter().any(|x| x.committed) {
                // Highest confidence; `max_by` keeps the last maximum, so
                // scan in reverse to prefer the lowest position on ties.
                let best = candidates
                    .iter()
                    .enumerate()
                    .rev()
                    .max_by(|a, b| a.1.confidence.total_cmp(&b.1.confidence))
                    .map(|(i, _)| i)
                    .expect("non-empty");
                candidates[best].committed = true;
            }
            let mut committed_positions = Vec::new();
            let mut committed_tokens = Vec::new();
            for cand in candidates.iter().filter(|x| x.committed) {
                seq[c + cand.position] = cand.token;
                committed_positions.push(cand.position);
                committed_tokens.push(cand.token);
            }
            let remaining_before = remaining.len();
            remaining.retain(|p| seq[*p] == MASK);
            trace.steps.push(TraceStep {
                regime: Regime::Diffusion,
                block,
                block_start: start - c,
                block_span: bl,
                step_in_block,
                remaining_before,
                committed_positions,
                committed_tokens,
                candidates,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        }
        ended = seq[start..].contains(&END_ACTION);
        block += 1;
    }
    let raw = seq[c..].to_vec();
    Ok(DecodeOutput {
        truncated: !raw.contains(&END_ACTION),
        raw,
        trace,
    })
}

/// Greedy left-to-right decoding, one token per step.
pub fn decode_ar(model: &impl Predictor, context: &[TokenId], cfg: &DecodeConfig) -> Result<DecodeOutput> {
    check_len(model, context, cfg)?;
    let c = context.len();
    let mut seq = context.to_vec();
    let mut session = model.session();
    let mut steps = Vec::new();
    loop {
        let n = seq.len();
        let t0 = Instant::now();
        seq.push(MASK);
        let scores = session.score(&seq, &causal_mask(n + 1), n, &[n])?;
        let (token, confidence, entropy) = summarize(&scores[0])?;
        seq[n] = token;
        steps.push(TraceStep {
            regime: Regime::Ar,
            block: 0,
            block_start: 0,
            block_span: 0,
            step_in_block: n - c + 1,
            remaining_before: 0,
            committed_positions: vec![n - c],
            committed_tokens: vec![token],
            candidates: vec![Candidate {
                position: n - c,
                token,
                confidence,
                entropy,
                committed: true,
            }],
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        if token == END_ACTION || seq.len() - c >= cfg.max_action_len {
            break;
        }
    }
    // The whole action is one left-to-right block.
    let span = steps.len();
    for (i, s) in steps.iter_mut().enumerate() {
        s.block_span = span;
        s.remaining_before = span - i;
    }
    let raw = seq[c..].to_vec();
    Ok(DecodeOutput {
        truncated: raw.last() != Some(&END_ACTION),
        raw,
        trace: DecodeTrace { steps },
    })
}
