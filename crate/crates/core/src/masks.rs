//! Attention-mask construction.
//!
//! `allow[i][j]` means query `i` may attend to key `j`. Masks are plain
//! boolean matrices; sequences here stay well under a few thousand tokens.

use serde::{Deserialize, Serialize};

use crate::data::SpanLayout;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Causal,
    SpanAware,
    BlockDecode,
    /// Bidirectional within fixed blocks tiled from position 0, causal across
    /// blocks: the unaligned training mask used for ablations.
    NaiveBlock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allow: Vec<bool>,
    kind: MaskKind,
}

impl AttentionMask {
    pub fn from_fn(n: usize, kind: MaskKind, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                allow.push(f(i, j));
            }
        }
        AttentionMask { n, allow, kind }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.n + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allow[query * self.n..(query + 1) * self.n]
    }

    /// Allowed keys per query row, ascending.
    pub fn key_lists(&self) -> Vec<Vec<u32>> {
        (0..self.n)
            .map(|i| {
                self.row(i)
                    .iter()
                    .enumerate()
                    .filter_map(|(j, a)| a.then_some(j as u32))
                    .collect()
            })
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.allow.iter().filter(|a| **a).count()
    }

    /// Compact debug form: one `0`/`1` string per query row.
    pub fn to_row_bitmap(&self) -> RowBitmap {
        RowBitmap {
            kind: self.kind,
            n: self.n,
            rows: (0..self.n)
                .map(|i| self.row(i).iter().map(|a| if *a { '1' } else { '0' }).collect())
                .collect(),
        }
    }

    pub fn from_row_bitmap(b: &RowBitmap) -> Result<Self> {
        if b.rows.len() != b.n || b.rows.iter().any(|r| r.len() != b.n) {
            return Err(Error::arg("row bitmap is not square"));
        }
        let mut allow = Vec::with_capacity(b.n * b.n);
        for r in &b.rows {
            for c in r.chars() {
                match c {
                    '0' => allow.push(false),
                    '1' => allow.push(true),
                    other => return Err(Error::arg(format!("bad bitmap character {other:?}"))),
                }
            }
        }
        Ok(AttentionMask {
            n: b.n,
            allow,
            kind: b.kind,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowBitmap {
    pub kind: MaskKind,
    pub n: usize,
    pub rows: Vec<String>,
}

pub fn causal_mask(n: usize) -> AttentionMask {
    AttentionMask::from_fn(n, MaskKind::Causal, |i, j| j <= i)
}

/// Action-span queries see every earlier context key and the whole span;
/// context queries stay causal and never see the span.
pub fn span_aware_mask(layout: &SpanLayout) -> Result<AttentionMask> {
    layout.validate()?;
    let l = *layout;
    Ok(AttentionMask::from_fn(l.total_len, MaskKind::SpanAware, |i, j| {
        if l.is_loss(i) {
            (l.is_ctx(j) && j < i) || l.is_loss(j)
        } else {
            l.is_ctx(j) && j <= i
        }
    }))
}

/// Mask for denoising the block `[block_start, block_start + block_len)`.
///
/// Context rows are causal. Already committed action blocks (tiled by
/// `block_len` from `ctx_len`) see the context and every block up to their
/// own. The active block sees everything before it and itself.
pub fn block_decode_mask(ctx_len: usize, block_start: usize, block_len: usize) -> Result<AttentionMask> {
    if block_start < ctx_len || block_len == 0 || (block_start - ctx_len) % block_len != 0 {
        return Err(Error::arg(format!(
            "block [{block_start}, +{block_len}) is not aligned after context {ctx_len}"
        )));
    }
    let n = block_start + block_len;
    let block_of = |p: usize| (p - ctx_len) / block_len;
    Ok(AttentionMask::from_fn(n, MaskKind::BlockDecode, |i, j| {
        if i < ctx_len {
            j <= i
        } else {
            j < ctx_len || block_of(j) <= block_of(i)
        }
    }))
}

pub fn naive_block_mask(n: usize, block_len: usize) -> Result<AttentionMask> {
    if block_len == 0 {
        return Err(Error::arg("block length must be positive"));
    }
    Ok(AttentionMask::from_fn(n, MaskKind::NaiveBlock, |i, j| {
        j / block_len <= i / block_len
    }))
}

/// Cells where the two masks disagree.
pub fn mismatch_edges(a: &AttentionMask, b: &AttentionMask) -> Result<usize> {
    if a.n != b.n {
        return Err(Error::Shape(format!("masks of size {} and {}", a.n, b.n)));
    }
    Ok(a.allow.iter().zip(&b.allow).filter(|(x, y)| x != y).count())
}
