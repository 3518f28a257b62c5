//! Tape-free forward pass that keeps per-row keys, values and final hidden
//! states, so rows whose attention never reaches later positions are
//! computed once.

use super::graph::{gelu, RMS_EPS};
use super::tensor::{matmul, Float, Matrix};
use super::{layer_slot, Parameters, ATTN_NORM, FFN_NORM, POS, TOK, W1, W2, WK, WO, WQ, WV};
use crate::data::vocab::TokenId;
use crate::error::{Error, Result};

pub struct RowCache<'p, F> {
    params: &'p Parameters<F>,
    len: usize,
    k: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    hidden: Vec<F>,
}

fn rms_norm<F: Float>(x: &Matrix<F>, gain: &[F]) -> Matrix<F> {
    let d = F::of(x.cols as f64);
    let eps = F::of(RMS_EPS);
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let ms = row.iter().fold(F::zero(), |a, v| a + *v * *v) / d;
        let s = F::one() / (ms + eps).sqrt();
        for ((o, v), g) in out.row_mut(r).iter_mut().zip(row).zip(gain) {
            *o = *v * s * *g;
        }
    }
    out
}

fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (x, y)| s + *x * *y)
}

impl<'p, F: Float> RowCache<'p, F> {
    pub fn new(params: &'p Parameters<F>) -> Self {
        let layers = params.config.n_layers;
        RowCache {
            params,
            len: 0,
            k: vec![Vec::new(); layers],
            v: vec![Vec::new(); layers],
            hidden: Vec::new(),
        }
    }

    /// Rows held so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.params.config.d_model
    }

    /// Final residual stream of cached row `i`.
    pub fn hidden(&self, i: usize) -> &[F] {
        let d = self.params.config.d_model;
        &self.hidden[i * d..(i + 1) * d]
    }

    /// Computes rows `len..len + tokens.len()`. `keys[i]` lists the absolute
    /// positions row `len + i` attends to. With `commit` the rows join the
    /// cache; otherwise they are dropped after the pass. Returns their final
    /// residual stream.
    pub fn run(&mut self, tokens: &[TokenId], keys: &[Vec<u32>], commit: bool) -> Result<Matrix<F>> {
        let cfg = &self.params.config;
        let (m, d, base) = (tokens.len(), cfg.d_model, self.len);
        if keys.len() != m {
            return Err(Error::Shape("one key list per new row".into()));
        }
        if base + m > cfg.max_len {
            return Err(Error::arg(format!("{} rows exceed max_len {}", base + m, cfg.max_len)));
        }
        if keys.iter().flatten().any(|&j| j as usize >= base + m) {
            return Err(Error::Shape("attention key out of range".into()));
        }
        let a = self.params.arrays();
        let mut x = Matrix::zeros(m, d);
        for (i, t) in tokens.iter().enumerate() {
            if t.index() >= cfg.vocab {
                return Err(Error::arg(format!("token {} outside vocabulary", t.0)));
            }
            for ((o, e), p) in x.row_mut(i).iter_mut().zip(a[TOK].row(t.index())).zip(a[POS].row(base + i)) {
                *o = *e + *p;
            }
        }
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        for l in 0..cfg.n_layers {
            let w = |which| &a[layer_slot(l, which)];
            let h = rms_norm(&x, &w(ATTN_NORM).data);
            let q = matmul(&h, false, w(WQ), false);
            self.k[l].extend_from_slice(&matmul(&h, false, w(WK), false).data);
            self.v[l].extend_from_slice(&matmul(&h, false, w(WV), false).data);
            let (kl, vl) = (&self.k[l], &self.v[l]);
            let mut att = Matrix::zeros(m, d);
            let mut probs = Vec::new();
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                for (i, ks) in keys.iter().enumerate() {
                    if ks.is_empty() {
                        continue;
                    }
                    let qi = &q.row(i)[cols.clone()];
                    probs.clear();
                    let mut max = F::neg_infinity();
                    for &j in ks {
                        let j = j as usize;
                        let s = dot(qi, &kl[j * d..(j + 1) * d][cols.clone()]) * scale;
                        max = max.max(s);
                        probs.push(s);
                    }
                    let mut sum = F::zero();
                    for p in &mut probs {
                        *p = (*p - max).exp();
                        sum += *p;
                    }
                    let oi = &mut att.row_mut(i)[cols.clone()];
                    for (p, &j) in probs.iter().zip(ks) {
                        let p = *p / sum;
                        let j = j as usize;
                        for (o, v) in oi.iter_mut().zip(&vl[j * d..(j + 1) * d][cols.clone()]) {
                            *o += p * *v;
                        }
                    }
                }
            }
            x.add_assign(&matmul(&att, false, w(WO), false));
            let h = rms_norm(&x, &w(FFN_NORM).data);
            let mut u = matmul(&h, false, w(W1), false);
            for e in &mut u.data {
                *e = gelu(*e);
            }
            x.add_assign(&matmul(&u, false, w(W2), false));
            if !x.all_finite() {
                self.truncate_layers(base);
                return Err(Error::NonFiniteActivation { layer: l });
            }
        }
        if commit {
            self.hidden.extend_from_slice(&x.data);
            self.len += m;
        } else {
            self.truncate_layers(base);
        }
        Ok(x)
    }

    fn truncate_layers(&mut self, rows: usize) {
        let d = self.params.config.d_model;
        for l in 0..self.k.len() {
            self.k[l].truncate(rows * d);
            self.v[l].truncate(rows * d);
        }
    }

    /// Vocabulary scores for residual rows.
    pub fn logits(&self, hidden: &Matrix<F>) -> Result<Matrix<F>> {
        let a = self.params.arrays();
        let h = rms_norm(hidden, &a[a.len() - 2].data);
        let z = matmul(&h, false, &a[a.len() - 1], false);
        if !z.all_finite() {
            return Err(Error::NonFiniteActivation {
                layer: self.params.config.n_layers,
            });
        }
        Ok(z)
    }
}
