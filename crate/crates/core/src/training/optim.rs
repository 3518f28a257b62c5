use serde::{Deserialize, Serialize};

use crate::model::{Float, Gradients, Matrix, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

/// Cosine decay from `start` to `end` over `total` steps; `step` is 0-based.
pub fn cosine_lr(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * t).cos())
}

pub struct Optimizer<F> {
    kind: OptimizerKind,
    m: Vec<Matrix<F>>,
    v: Vec<Matrix<F>>,
    t: u64,
}

impl<F: Float> Optimizer<F> {
    pub fn new(kind: OptimizerKind, params: &Parameters<F>) -> Self {
        let zeros = || params.arrays().iter().map(|a| Matrix::zeros(a.rows, a.cols)).collect();
        let v = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer { kind, m: zeros(), v, t: 0 }
    }

    /// Applies one update. Gradients are rescaled first so their global
    /// norm is at most `clip` (when positive). Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut Parameters<F>, grads: &Gradients<F>, lr: f64, clip: f64) -> f64 {
        let norm = grads.global_norm();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let lr_f = F::of(lr);
        let scale_f = F::of(scale);
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let mu = F::of(momentum);
                for ((p, g), m) in params.arrays_mut().iter_mut().zip(&grads.arrays).zip(&mut self.m) {
                    for ((w, gr), vel) in p.data.iter_mut().zip(&g.data).zip(&mut m.data) {
                        *vel = mu * *vel + *gr * scale_f;
                        *w -= lr_f * *vel;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2) = (F::of(beta1), F::of(beta2));
                let c1 = F::of(1.0 - beta1.powi(self.t as i32));
                let c2 = F::of(1.0 - beta2.powi(self.t as i32));
                let eps = F::of(eps);
                let one = F::one();
                for (((p, g), m), v) in params
                    .arrays_mut()
                    .iter_mut()
                    .zip(&grads.arrays)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    for (((w, gr), mm), vv) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                        let gs = *gr * scale_f;
                        *mm = b1 * *mm + (one - b1) * gs;
                        *vv = b2 * *vv + (one - b2) * gs * gs;
                        let mhat = *mm / c1;
                        let vhat = *vv / c2;
                        *w -= lr_f * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        norm
    }
}
