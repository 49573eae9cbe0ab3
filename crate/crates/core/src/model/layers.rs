//! Transformer building blocks with explicit forward caches and hand-written
//! backward passes. Activations are `T×D` row-major matrices, one token per
//! row. Backward functions accumulate parameter gradients into a gradient
//! value of the same type and return the gradient with respect to the input.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

const LN_EPS: f64 = 1e-6;
const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn xavier<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite xavier bound");
        Linear {
            weight: Array2::from_shape_simple_fn((input, output), || dist.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.outer_iter_mut().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * *r);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &r) in dx
            .outer_iter_mut()
            .zip(dxhat.outer_iter())
            .zip(cache.xhat.outer_iter())
            .zip(cache.rstd.iter())
        {
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            for ((o, &gi), &xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = r / d * (d * gi - sum_g - xi * sum_gx);
            }
        }
        dx
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Pre-norm transformer block: multi-head self-attention then a two-layer
/// GELU feed-forward, each wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    norm1: LayerNormCache,
    normed1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    norm2: LayerNormCache,
    normed2: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl Block {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Block {
            norm1: LayerNorm::new(dim),
            qkv: Linear::xavier(dim, 3 * dim, rng),
            proj: Linear::xavier(dim, dim, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::xavier(dim, MLP_RATIO * dim, rng),
            fc2: Linear::xavier(MLP_RATIO * dim, dim, rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Block {
            norm1: LayerNorm::zeros(dim),
            qkv: Linear::zeros(dim, 3 * dim),
            proj: Linear::zeros(dim, dim),
            norm2: LayerNorm::zeros(dim),
            fc1: Linear::zeros(dim, MLP_RATIO * dim),
            fc2: Linear::zeros(MLP_RATIO * dim, dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, heads: usize) -> (Array2<f64>, BlockCache) {
        let (t, d) = x.dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (normed1, norm1) = self.norm1.forward(x);
        let qkv = self.qkv.forward(&normed1);
        let mut attn = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut p = q.dot(&k.t()) * scale;
            softmax_rows(&mut p);
            attn.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let x1 = x + &self.proj.forward(&attn);

        let (normed2, norm2) = self.norm2.forward(&x1);
        let hidden_pre = self.fc1.forward(&normed2);
        let hidden = hidden_pre.mapv(gelu);
        let out = &x1 + &self.fc2.forward(&hidden);
        let cache = BlockCache {
            norm1,
            normed1,
            qkv,
            probs,
            attn,
            norm2,
            normed2,
            hidden_pre,
            hidden,
        };
        (out, cache)
    }

    pub fn backward(
        &self,
        cache: &BlockCache,
        dout: &Array2<f64>,
        heads: usize,
        grad: &mut Block,
    ) -> Array2<f64> {
        let d = dout.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // feed-forward branch
        let dhidden = self.fc2.backward(&cache.hidden, dout, &mut grad.fc2);
        let mut dpre = dhidden;
        dpre.zip_mut_with(&cache.hidden_pre, |g, &x| *g *= gelu_grad(x));
        let dnormed2 = self.fc1.backward(&cache.normed2, &dpre, &mut grad.fc1);
        let dx1 = dout + &self.norm2.backward(&cache.norm2, &dnormed2, &mut grad.norm2);

        // attention branch
        let dattn = self.proj.backward(&cache.attn, &dx1, &mut grad.proj);
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let (qs, ks, vs) = (h * dh, d + h * dh, 2 * d + h * dh);
            let q = cache.qkv.slice(s![.., qs..qs + dh]);
            let k = cache.qkv.slice(s![.., ks..ks + dh]);
            let v = cache.qkv.slice(s![.., vs..vs + dh]);
            let dout_h = dattn.slice(s![.., qs..qs + dh]);
            let dp = dout_h.dot(&v.t());
            dqkv.slice_mut(s![.., vs..vs + dh]).assign(&p.t().dot(&dout_h));
            let mut ds = p * &dp;
            for (mut row, prow) in ds.outer_iter_mut().zip(p.outer_iter()) {
                let total = row.sum();
                row.zip_mut_with(&prow, |g, &pv| *g -= pv * total);
            }
            ds.mapv_inplace(|v| v * scale);
            dqkv.slice_mut(s![.., qs..qs + dh]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., ks..ks + dh]).assign(&ds.t().dot(&q));
        }
        let dnormed1 = self.qkv.backward(&cache.normed1, &dqkv, &mut grad.qkv);
        dx1 + self.norm1.backward(&cache.norm1, &dnormed1, &mut grad.norm1)
    }
}
