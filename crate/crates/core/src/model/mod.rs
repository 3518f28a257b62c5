//! A small pre-norm transformer whose attention pattern is supplied per call,
//! so the same weights serve causal prediction and span denoising.

pub mod checkpoint;
pub mod graph;
pub mod infer;
pub mod tensor;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use graph::{Graph, NodeId};
pub use infer::RowCache;
pub use tensor::{Float, Matrix};

use crate::data::vocab::{self, TokenId};
use crate::error::{Error, Result};
use crate::masks::AttentionMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: vocab::SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

/// Named weight arrays in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    pub config: ModelConfig,
    names: Vec<String>,
    arrays: Vec<Matrix<F>>,
}

// Per-layer slot offsets inside `arrays`.
const TOK: usize = 0;
const POS: usize = 1;
const PER_LAYER: usize = 8;
const ATTN_NORM: usize = 0;
const WQ: usize = 1;
const WK: usize = 2;
const WV: usize = 3;
const WO: usize = 4;
const FFN_NORM: usize = 5;
const W1: usize = 6;
const W2: usize = 7;

fn layer_slot(layer: usize, which: usize) -> usize {
    2 + layer * PER_LAYER + which
}

impl<F: Float> Parameters<F> {
    /// Gaussian init with std 0.02; norm gains start at 1.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut gaussian = |r: usize, c: usize| Matrix {
            rows: r,
            cols: c,
            data: (0..r * c).map(|_| F::of(normal.sample(&mut rng))).collect(),
        };
        let ones = |c: usize| Matrix {
            rows: 1,
            cols: c,
            data: vec![F::one(); c],
        };
        let (d, ff) = (config.d_model, config.d_ff());
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        let mut arrays = vec![gaussian(config.vocab, d), gaussian(config.max_len, d)];
        for l in 0..config.n_layers {
            for (name, m) in [
                ("attn_norm", ones(d)),
                ("wq", gaussian(d, d)),
                ("wk", gaussian(d, d)),
                ("wv", gaussian(d, d)),
                ("wo", gaussian(d, d)),
                ("ffn_norm", ones(d)),
                ("w1", gaussian(d, ff)),
                ("w2", gaussian(ff, d)),
            ] {
                names.push(format!("layers.{l}.{name}"));
                arrays.push(m);
            }
        }
        names.push("final_norm".into());
        arrays.push(ones(d));
        names.push("lm_head".into());
        arrays.push(gaussian(d, config.vocab));
        Ok(Parameters { config, names, arrays })
    }

    pub fn from_parts(config: ModelConfig, names: Vec<String>, arrays: Vec<Matrix<F>>) -> Result<Self> {
        let reference = Parameters::<F>::init(ModelConfig { seed: 0, ..config })?;
        if names != reference.names {
            return Err(Error::Checkpoint("parameter names do not match the config".into()));
        }
        for ((n, a), b) in names.iter().zip(&arrays).zip(&reference.arrays) {
            if (a.rows, a.cols) != (b.rows, b.cols) || a.data.len() != a.rows * a.cols {
                return Err(Error::Checkpoint(format!("{n} has shape {}x{}", a.rows, a.cols)));
            }
        }
        let p = Parameters { config, names, arrays };
        if let Some(name) = p.first_non_finite() {
            return Err(Error::Checkpoint(format!("{name} holds non-finite values")));
        }
        Ok(p)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Matrix<F>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Matrix<F>] {
        &mut self.arrays
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<F>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.arrays[i])
    }

    pub fn count(&self) -> usize {
        self.arrays.iter().map(Matrix::len).sum()
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.names
            .iter()
            .zip(&self.arrays)
            .find(|(_, a)| !a.all_finite())
            .map(|(n, _)| n.as_str())
    }

    pub fn cast<G: Float>(&self) -> Parameters<G> {
        Parameters {
            config: self.config,
            names: self.names.clone(),
            arrays: self.arrays.iter().map(Matrix::cast).collect(),
        }
    }

    /// Puts every array on the tape as a leaf.
    pub fn bind(&self, g: &mut Graph<F>) -> Vec<NodeId> {
        self.arrays.iter().map(|a| g.leaf(a.clone())).collect()
    }
}

/// One or more sequences packed into a single row stack. Each row carries
/// its own position id and the rows it may attend to.
#[derive(Debug, Clone)]
pub struct Packed {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub keys: Arc<Vec<Vec<u32>>>,
}

impl Packed {
    pub fn single(tokens: &[TokenId], mask: &AttentionMask) -> Result<Self> {
        if mask.len() != tokens.len() {
            return Err(Error::Shape(format!(
                "mask of size {} for {} tokens",
                mask.len(),
                tokens.len()
            )));
        }
        Ok(Packed {
            tokens: tokens.iter().map(|t| t.index()).collect(),
            positions: (0..tokens.len()).collect(),
            keys: Arc::new(mask.key_lists()),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends another packed sequence, offsetting its key indices.
    pub fn extend(&mut self, other: &Packed) {
        let off = self.tokens.len() as u32;
        self.tokens.extend_from_slice(&other.tokens);
        self.positions.extend_from_slice(&other.positions);
        let keys = Arc::make_mut(&mut self.keys);
        keys.extend(other.keys.iter().map(|ks| ks.iter().map(|k| k + off).collect::<Vec<u32>>()));
    }

    pub fn empty() -> Self {
        Packed {
            tokens: Vec::new(),
            positions: Vec::new(),
            keys: Arc::new(Vec::new()),
        }
    }
}

/// Records the network on `g` and returns the logits node for `rows` (all
/// rows when `None`). `p` must come from `params.bind(g)`.
pub fn logits_node<F: Float>(
    g: &mut Graph<F>,
    p: &[NodeId],
    config: &ModelConfig,
    seq: &Packed,
    rows: Option<&[usize]>,
) -> Result<NodeId> {
    if seq.keys.len() != seq.len() || seq.positions.len() != seq.len() {
        return Err(Error::Shape("packed sequence fields disagree".into()));
    }
    if let Some(&pos) = seq.positions.iter().max() {
        if pos >= config.max_len {
            return Err(Error::arg(format!("position {pos} exceeds max_len {}", config.max_len)));
        }
    }
    if let Some(&t) = seq.tokens.iter().max() {
        if t >= config.vocab {
            return Err(Error::arg(format!("token {t} outside vocabulary")));
        }
    }
    let tok = g.gather(p[TOK], &seq.tokens)?;
    let pos = g.gather(p[POS], &seq.positions)?;
    let mut x = g.add(tok, pos)?;
    for l in 0..config.n_layers {
        let w = |which| p[layer_slot(l, which)];
        let h = g.rms_norm(x, w(ATTN_NORM))?;
        let q = g.matmul(h, w(WQ))?;
        let k = g.matmul(h, w(WK))?;
        let v = g.matmul(h, w(WV))?;
        let a = g.attention(q, k, v, config.n_heads, seq.keys.clone())?;
        let o = g.matmul(a, w(WO))?;
        x = g.add(x, o)?;
        let h = g.rms_norm(x, w(FFN_NORM))?;
        let u = g.matmul(h, w(W1))?;
        let u = g.gelu(u);
        let f = g.matmul(u, w(W2))?;
        x = g.add(x, f)?;
        if !g.value(x).all_finite() {
            return Err(Error::NonFiniteActivation { layer: l });
        }
    }
    let x = match rows {
        Some(r) => g.select_rows(x, r)?,
        None => x,
    };
    let final_norm = p[p.len() - 2];
    let lm_head = p[p.len() - 1];
    let h = g.rms_norm(x, final_norm)?;
    let logits = g.matmul(h, lm_head)?;
    if !g.value(logits).all_finite() {
        return Err(Error::NonFiniteActivation { layer: config.n_layers });
    }
    Ok(logits)
}

/// Raw scores over the vocabulary, one row per requested position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch<F> {
    pub positions: Vec<usize>,
    pub scores: Matrix<F>,
}

impl<F: Float> LogitsBatch<F> {
    pub fn row(&self, i: usize) -> &[F] {
        self.scores.row(i)
    }

    /// Softmax of row `i` in 64-bit.
    pub fn softmax(&self, i: usize) -> Vec<f64> {
        softmax(self.row(i))
    }
}

pub fn softmax<F: Float>(row: &[F]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(b.f64()));
    let mut out: Vec<f64> = row.iter().map(|x| (x.f64() - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    out
}

/// Logits at every position of `tokens` under `mask`.
pub fn forward<F: Float>(params: &Parameters<F>, tokens: &[TokenId], mask: &AttentionMask) -> Result<LogitsBatch<F>> {
    forward_rows(params, tokens, mask, &(0..tokens.len()).collect::<Vec<_>>())
}

/// Logits at the listed positions only.
pub fn forward_rows<F: Float>(
    params: &Parameters<F>,
    tokens: &[TokenId],
    mask: &AttentionMask,
    rows: &[usize],
) -> Result<LogitsBatch<F>> {
    if tokens.len() > params.config.max_len {
        return Err(Error::arg(format!(
            "{} tokens exceed max_len {}",
            tokens.len(),
            params.config.max_len
        )));
    }
    let seq = Packed::single(tokens, mask)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let z = logits_node(&mut g, &p, &params.config, &seq, Some(rows))?;
    Ok(LogitsBatch {
        positions: rows.to_vec(),
        scores: g.value(z).clone(),
    })
}

/// Per-parameter gradients of the scalar built by `loss`.
pub struct Gradients<F> {
    pub loss: F,
    pub arrays: Vec<Matrix<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn global_norm(&self) -> f64 {
        self.arrays.iter().map(|a| a.sum_squares().f64()).sum::<f64>().sqrt()
    }
}

/// Reverse-mode gradients of `loss` with respect to every parameter array.
/// `loss` receives the tape and the bound parameter nodes and returns a
/// `1×1` node.
pub fn grad<F: Float>(
    params: &Parameters<F>,
    loss: impl FnOnce(&mut Graph<F>, &[NodeId]) -> Result<NodeId>,
) -> Result<Gradients<F>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let root = loss(&mut g, &p)?;
    let value = g.value(root).data.first().copied().unwrap_or_else(F::zero);
    let mut all = g.backward(root)?;
    let mut arrays = Vec::with_capacity(p.len());
    for (i, node) in p.iter().enumerate() {
        let a = &params.arrays[i];
        let gm = all[node.0].take().unwrap_or_else(|| Matrix::zeros(a.rows, a.cols));
        if !gm.all_finite() {
            return Err(Error::NonFiniteGradient {
                param: params.names[i].clone(),
            });
        }
        arrays.push(gm);
    }
    Ok(Gradients { loss: value, arrays })
}
