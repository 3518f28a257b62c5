//! Denoising and next-token objectives over packed batches.
//!
//! Both heads use shifted prediction: the logits row of position `p - 1`
//! scores the token at position `p`. The first action token is therefore
//! always scored from the last context row.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt_with, CorruptionScope, NoiseLevel};
use crate::data::vocab::TokenId;
use crate::data::TrainingExample;
use crate::error::{Error, Result};
use crate::masks::{naive_block_mask, span_aware_mask};
use crate::model::{logits_node, Float, Graph, ModelConfig, NodeId, Packed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Diffusion,
    Ar,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Diffusion => "diffusion",
            Regime::Ar => "ar",
        })
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" | "dllm" => Ok(Regime::Diffusion),
            "ar" => Ok(Regime::Ar),
            other => Err(Error::arg(format!("unknown regime {other:?}"))),
        }
    }
}

/// Ablation switches for the denoising term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub context_clean: bool,
    pub span_aware: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags {
            context_clean: true,
            span_aware: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub regime: Regime,
    pub lambda: f64,
    pub flags: Flags,
    /// Action spans are padded to a multiple of this before corruption.
    pub block_len: usize,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            regime: Regime::Diffusion,
            lambda: 0.5,
            flags: Flags::default(),
            block_len: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mdm: f64,
    pub l_ar: f64,
    pub lambda: f64,
    pub l_total: f64,
    pub n_loss_tokens: usize,
}

/// One example with its sampled noise.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub example: &'a TrainingExample,
    pub level: NoiseLevel,
    pub seed: u64,
}

pub struct BatchLoss {
    pub total: NodeId,
    pub mdm: NodeId,
    pub ar: NodeId,
    pub n_masked: usize,
}

#[derive(Default)]
struct Assembly {
    seq: Vec<usize>,
    positions: Vec<usize>,
    keys: Vec<Vec<u32>>,
    mdm_rows: Vec<usize>,
    mdm_targets: Vec<usize>,
    mdm_weights: Vec<f64>,
    ar_rows: Vec<usize>,
    ar_targets: Vec<usize>,
    ar_weights: Vec<f64>,
}

impl Assembly {
    fn base(&self) -> usize {
        self.seq.len()
    }

    fn push_row(&mut self, token: TokenId, position: usize, keys: impl IntoIterator<Item = usize>) {
        self.seq.push(token.index());
        self.positions.push(position);
        self.keys.push(keys.into_iter().map(|k| k as u32).collect());
    }

    /// Causal `[context, action]` segment; records next-token targets over
    /// the action span.
    fn push_clean(&mut self, ex: &TrainingExample, weight: f64) {
        let b = self.base();
        let c = ex.context.len();
        for (i, t) in ex.tokens().into_iter().enumerate() {
            self.push_row(t, i, b..=b + i);
        }
        for (i, t) in ex.action.iter().enumerate() {
            self.ar_rows.push(b + c + i - 1);
            self.ar_targets.push(t.index());
            self.ar_weights.push(weight);
        }
    }
}

fn check(ex: &TrainingExample, max_len: usize, block_len: usize) -> Result<()> {
    ex.layout.validate()?;
    if ex.context.is_empty() {
        return Err(Error::arg("training example has an empty context"));
    }
    if ex.action.is_empty() {
        return Err(Error::arg("training example has an empty action span"));
    }
    let span = ex.action.len().div_ceil(block_len) * block_len;
    if ex.context.len() + span > max_len {
        return Err(Error::arg(format!(
            "example of {} tokens exceeds max_len {max_len}",
            ex.context.len() + span
        )));
    }
    Ok(())
}

/// Records the batch objective on `g`.
///
/// Per example: the denoising loss is the mean NLL over masked action
/// positions and the next-token loss the mean NLL over action positions.
/// Each is then averaged over the examples that contribute to it; examples
/// with nothing masked carry zero weight.
pub fn batch_loss<F: Float>(
    g: &mut Graph<F>,
    nodes: &[NodeId],
    model: &ModelConfig,
    obj: &Objective,
    items: &[BatchItem<'_>],
) -> Result<BatchLoss> {
    if items.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    if obj.block_len == 0 {
        return Err(Error::arg("block_len must be positive"));
    }
    let mut asm = Assembly::default();
    let ar_weight = 1.0 / items.len() as f64;
    let mut denoised = Vec::new();
    for item in items {
        let ex = item.example;
        check(ex, model.max_len, obj.block_len)?;
        let c = ex.context.len();
        let a = ex.action.len();
        if obj.regime == Regime::Ar {
            asm.push_clean(ex, ar_weight / a as f64);
            continue;
        }
        let padded = ex.padded(obj.block_len);
        let s = padded.action.len();
        let scope = if obj.flags.context_clean {
            CorruptionScope::ActionSpan
        } else {
            CorruptionScope::WholeSequence
        };
        let (noisy, plan) = corrupt_with(&padded, item.level, item.seed, scope)?;
        let masked: Vec<usize> = plan.masked_positions.iter().copied().filter(|&p| p >= c).collect();
        denoised.push((asm.base(), masked, padded.tokens()));
        let b = asm.base();
        if obj.flags.context_clean && obj.flags.span_aware {
            // Shared context: [context | noisy span | clean action]. Context
            // rows never see either span, so both heads read the same
            // context states.
            for i in 0..c {
                asm.push_row(noisy[i], i, b..=b + i);
            }
            for i in 0..s {
                asm.push_row(noisy[c + i], c + i, b..b + c + s);
            }
            let clean = b + c + s;
            for (i, t) in ex.action.iter().enumerate() {
                asm.push_row(*t, c + i, (b..b + c).chain(clean..=clean + i));
            }
            for (i, t) in ex.action.iter().enumerate() {
                asm.ar_rows.push(if i == 0 { b + c - 1 } else { clean + i - 1 });
                asm.ar_targets.push(t.index());
                asm.ar_weights.push(ar_weight / a as f64);
            }
        } else {
            let mask = if obj.flags.span_aware {
                span_aware_mask(&padded.layout)?
            } else {
                naive_block_mask(c + s, obj.block_len)?
            };
            for (i, t) in noisy.iter().enumerate() {
                asm.push_row(*t, i, mask.row(i).iter().enumerate().filter(|(_, a)| **a).map(|(j, _)| b + j));
            }
            asm.push_clean(ex, ar_weight / a as f64);
        }
    }
    let contributing = denoised.iter().filter(|d| !d.1.is_empty()).count();
    let mut n_masked = 0;
    for (b, masked, clean) in &denoised {
        if masked.is_empty() {
            continue;
        }
        n_masked += masked.len();
        let w = 1.0 / (masked.len() * contributing) as f64;
        for &p in masked {
            asm.mdm_rows.push(b + p - 1);
            asm.mdm_targets.push(clean[p].index());
            asm.mdm_weights.push(w);
        }
    }

    let packed = Packed {
        tokens: asm.seq,
        positions: asm.positions,
        keys: Arc::new(asm.keys),
    };
    let m = asm.mdm_rows.len();
    let mut rows = asm.mdm_rows;
    rows.extend_from_slice(&asm.ar_rows);
    let logits = logits_node(g, nodes, model, &packed, Some(&rows))?;
    let zero = || crate::model::Matrix::zeros(1, 1);
    let mdm = if m > 0 {
        let z = g.select_rows(logits, &(0..m).collect::<Vec<_>>())?;
        let w: Vec<F> = asm.mdm_weights.iter().map(|x| F::of(*x)).collect();
        g.cross_entropy(z, &asm.mdm_targets, &w)?
    } else {
        g.leaf(zero())
    };
    let ar = if !asm.ar_rows.is_empty() {
        let z = g.select_rows(logits, &(m..rows.len()).collect::<Vec<_>>())?;
        let w: Vec<F> = asm.ar_weights.iter().map(|x| F::of(*x)).collect();
        g.cross_entropy(z, &asm.ar_targets, &w)?
    } else {
        g.leaf(zero())
    };
    let total = match obj.regime {
        Regime::Ar => ar,
        Regime::Diffusion => {
            let scaled = g.scale(ar, F::of(obj.lambda));
            g.add(mdm, scaled)?
        }
    };
    Ok(BatchLoss {
        total,
        mdm,
        ar,
        n_masked,
    })
}

impl BatchLoss {
    pub fn breakdown<F: Float>(&self, g: &Graph<F>, obj: &Objective) -> LossBreakdown {
        let v = |n: NodeId| g.value(n).data[0].f64();
        LossBreakdown {
            l_mdm: v(self.mdm),
            l_ar: v(self.ar),
            lambda: match obj.regime {
                Regime::Ar => 1.0,
                Regime::Diffusion => obj.lambda,
            },
            l_total: v(self.total),
            n_loss_tokens: self.n_masked,
        }
    }
}

/// Loss values for one batch without gradients.
pub fn evaluate<F: Float>(
    params: &crate::model::Parameters<F>,
    obj: &Objective,
    items: &[BatchItem<'_>],
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let nodes = params.bind(&mut g);
    let loss = batch_loss(&mut g, &nodes, &params.config, obj, items)?;
    Ok(loss.breakdown(&g, obj))
}

/// Denoising loss of one example at a fixed noise draw.
pub fn loss_mdm<F: Float>(
    params: &crate::model::Parameters<F>,
    example: &TrainingExample,
    level: NoiseLevel,
    seed: u64,
    flags: Flags,
    block_len: usize,
) -> Result<LossBreakdown> {
    let obj = Objective {
        regime: Regime::Diffusion,
        lambda: 0.0,
        flags,
        block_len,
    };
    let mut b = evaluate(params, &obj, &[BatchItem { example, level, seed }])?;
    b.l_ar = 0.0;
    b.l_total = b.l_mdm;
    Ok(b)
}

/// Teacher-forced next-token loss over the action span.
pub fn loss_ar<F: Float>(params: &crate::model::Parameters<F>, example: &TrainingExample) -> Result<LossBreakdown> {
    let obj = Objective {
        regime: Regime::Ar,
        lambda: 1.0,
        flags: Flags::default(),
        block_len: 1,
    };
    let level = NoiseLevel::new(1, 1)?;
    evaluate(params, &obj, &[BatchItem { example, level, seed: 0 }])
}
