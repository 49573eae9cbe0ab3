use std::f64::consts::PI;

use crate::model::ModelParams;

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to 0
/// at `total`. Steps are 0-based.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    if span == 0 {
        return peak;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * peak * (1.0 + (PI * progress).cos())
}

/// Adam with decoupled weight decay. Decay applies to matrices only; biases,
/// norm scales and the learnable embeddings are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ModelParams,
    v: ModelParams,
    t: u32,
}

impl AdamW {
    pub fn new(params: &ModelParams, betas: (f64, f64), weight_decay: f64) -> Self {
        AdamW {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let shapes: Vec<usize> = grad.tensors().iter().map(|(_, s, _)| s.len()).collect();
        let grads = grad.tensors();
        for ((((_, p), (_, m)), (_, v)), ((_, _, g), ndim)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads.iter().zip(shapes))
        {
            let decay = if ndim >= 2 { self.weight_decay } else { 0.0 };
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.iter()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *pi -= lr * (update + decay * *pi);
            }
        }
    }
}
