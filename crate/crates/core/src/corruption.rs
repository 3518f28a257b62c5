//! Noise-level-indexed masking operator `C_k`.
//!
//! Each position in scope is independently replaced by `MASK` with
//! probability `k / K`. The context-clean variant restricts the scope to the
//! action span, so the history prefix is always copied verbatim.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::{TokenId, MASK};
use crate::data::TrainingExample;
use crate::error::{Error, Result};

pub const DEFAULT_LEVELS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseLevel {
    k: usize,
    max: usize,
}

impl NoiseLevel {
    pub fn new(k: usize, max: usize) -> Result<Self> {
        if max == 0 || k == 0 || k > max {
            return Err(Error::arg(format!("noise level {k} outside 1..={max}")));
        }
        Ok(NoiseLevel { k, max })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn max(&self) -> usize {
        self.max
    }

    /// Linear schedule `k / K`.
    pub fn rate(&self) -> f64 {
        self.k as f64 / self.max as f64
    }
}

/// `k ~ U({1..K})`.
pub fn sample_level(max: usize, seed: u64) -> Result<NoiseLevel> {
    if max == 0 {
        return Err(Error::arg("K must be at least 1"));
    }
    let k = ChaCha8Rng::seed_from_u64(seed).random_range(1..=max);
    NoiseLevel::new(k, max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionScope {
    /// Context-clean: only `I_loss` is eligible.
    ActionSpan,
    /// Naive whole-sequence corruption, kept for ablations.
    WholeSequence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    /// Ascending positions that were replaced by `MASK`.
    pub masked_positions: Vec<usize>,
    pub level: NoiseLevel,
    pub rng_seed: u64,
}

/// Context-clean corruption of `example` at `level`.
pub fn corrupt(example: &TrainingExample, level: NoiseLevel, seed: u64) -> Result<(Vec<TokenId>, CorruptionPlan)> {
    corrupt_with(example, level, seed, CorruptionScope::ActionSpan)
}

pub fn corrupt_with(
    example: &TrainingExample,
    level: NoiseLevel,
    seed: u64,
    scope: CorruptionScope,
) -> Result<(Vec<TokenId>, CorruptionPlan)> {
    NoiseLevel::new(level.k, level.max)?;
    let layout = example.layout;
    layout.validate()?;
    if layout.ctx_len != example.context.len() || layout.span_len() != example.action.len() {
        return Err(Error::arg("layout does not match example tokens"));
    }
    let mut tokens = example.tokens();
    let eligible = match scope {
        CorruptionScope::ActionSpan => layout.loss(),
        CorruptionScope::WholeSequence => 0..layout.total_len,
    };
    let rate = level.rate();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked_positions = Vec::new();
    for i in eligible {
        if rng.random::<f64>() < rate {
            tokens[i] = MASK;
            masked_positions.push(i);
        }
    }
    Ok((
        tokens,
        CorruptionPlan {
            masked_positions,
            level,
            rng_seed: seed,
        },
    ))
}
