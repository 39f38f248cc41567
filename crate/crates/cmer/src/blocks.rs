//! Shared transformer machinery: parameter initialization, linear layers with
//! optional low-rank adapters, multi-head attention, and the pre-norm encoder
//! block used by both towers.
//!
//! Every parameter tensor is created exactly once and handed around by
//! reference-counted handle, so the named map returned by `collect` aliases
//! the live training state rather than copying it.

use std::collections::BTreeMap;

use cmer_autodiff::ops;
use cmer_autodiff::{Tape, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation of the truncated normal used for weight init.
pub const INIT_STD: f64 = 0.02;

/// Named parameter handles, ordered by name for deterministic iteration.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Samples a truncated normal: values beyond two standard deviations are
/// redrawn, so the tail never enters the initial weights.
pub fn trunc_normal(rng: &mut ChaCha8Rng, numel: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    (0..numel)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

fn weight(rng: &mut ChaCha8Rng, shape: &[usize], trainable: bool) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = trunc_normal(rng, numel, INIT_STD);
    if trainable {
        Tensor::param(data, shape).expect("weight shape matches sampled data")
    } else {
        Tensor::from_vec(data, shape).expect("weight shape matches sampled data")
    }
}

fn filled(value: f64, shape: &[usize], trainable: bool) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = vec![value; numel];
    if trainable {
        Tensor::param(data, shape).expect("constant shape matches data")
    } else {
        Tensor::from_vec(data, shape).expect("constant shape matches data")
    }
}

/// Low-rank adapter attached to a frozen projection: the effective weight is
/// `W + (alpha/rank) * A B`, with `A` drawn from the usual init and `B` zero
/// so training starts from the frozen behaviour exactly.
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraPair {
    pub fn new(rng: &mut ChaCha8Rng, width: usize, rank: usize, alpha: f64) -> LoraPair {
        LoraPair {
            a: weight(rng, &[width, rank], true),
            b: filled(0.0, &[rank, width], true),
            rank,
            alpha,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamMap) {
        out.insert(format!("{prefix}.a"), self.a.clone());
        out.insert(format!("{prefix}.b"), self.b.clone());
    }
}

/// `x W + b`. The bias is optional so attention score paths can stay bare.
pub fn linear(tape: &mut Tape, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut y = ops::matmul(tape, x, w)?;
    if let Some(b) = b {
        y = ops::add(tape, &y, b)?;
    }
    Ok(y)
}

/// Linear layer with an optional low-rank delta:
/// `x W + b + (alpha/rank) * (x A) B`.
///
/// The delta is computed as two thin matmuls rather than by materializing
/// `A B`, which keeps the saved activations proportional to the rank.
pub fn lora_linear(
    tape: &mut Tape,
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    lora: Option<&LoraPair>,
) -> Result<Tensor> {
    let mut y = ops::matmul(tape, x, w)?;
    if let Some(pair) = lora {
        let xa = ops::matmul(tape, x, &pair.a)?;
        let xab = ops::matmul(tape, &xa, &pair.b)?;
        let delta = ops::scalar_mul(tape, &xab, pair.scale())?;
        y = ops::add(tape, &y, &delta)?;
    }
    if let Some(b) = b {
        y = ops::add(tape, &y, b)?;
    }
    Ok(y)
}

/// Scaled dot-product attention over already-projected `q`, `k`, `v`, each
/// `[n, width]` with `width` split evenly across `heads`. Rows attend to all
/// rows; per-head contexts are concatenated back to `[n, width]`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let width = q.shape()[1];
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let start = h * head_dim;
        let qh = ops::slice(tape, q, 1, start, head_dim)?;
        let kh = ops::slice(tape, k, 1, start, head_dim)?;
        let vh = ops::slice(tape, v, 1, start, head_dim)?;
        let kt = ops::transpose(tape, &kh)?;
        let scores = ops::matmul(tape, &qh, &kt)?;
        let scores = ops::scalar_mul(tape, &scores, scale)?;
        let probs = ops::softmax(tape, &scores, 1)?;
        contexts.push(ops::matmul(tape, &probs, &vh)?);
    }
    let refs: Vec<&Tensor> = contexts.iter().collect();
    Ok(ops::concat(tape, &refs, 1)?)
}

/// Parameters of one pre-norm encoder block. Base weights may be frozen;
/// the optional adapters on the query and value projections are always
/// trainable when present.
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub lora_q: Option<LoraPair>,
    pub lora_v: Option<LoraPair>,
    pub heads: usize,
}

impl BlockParams {
    /// Builds one block. `lora` carries `(rank, alpha)` and injects adapters
    /// into the query and value projections only.
    pub fn new(
        rng: &mut ChaCha8Rng,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        trainable: bool,
        lora: Option<(usize, f64)>,
    ) -> BlockParams {
        let hidden = width * mlp_ratio;
        BlockParams {
            ln1_gamma: filled(1.0, &[width], trainable),
            ln1_beta: filled(0.0, &[width], trainable),
            wq: weight(rng, &[width, width], trainable),
            bq: filled(0.0, &[width], trainable),
            wk: weight(rng, &[width, width], trainable),
            bk: filled(0.0, &[width], trainable),
            wv: weight(rng, &[width, width], trainable),
            bv: filled(0.0, &[width], trainable),
            wo: weight(rng, &[width, width], trainable),
            bo: filled(0.0, &[width], trainable),
            ln2_gamma: filled(1.0, &[width], trainable),
            ln2_beta: filled(0.0, &[width], trainable),
            w1: weight(rng, &[width, hidden], trainable),
            b1: filled(0.0, &[hidden], trainable),
            w2: weight(rng, &[hidden, width], trainable),
            b2: filled(0.0, &[width], trainable),
            lora_q: lora.map(|(r, a)| LoraPair::new(rng, width, r, a)),
            lora_v: lora.map(|(r, a)| LoraPair::new(rng, width, r, a)),
            heads,
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamMap) {
        let pairs: [(&str, &Tensor); 16] = [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ];
        for (name, t) in pairs {
            out.insert(format!("{prefix}.{name}"), (*t).clone());
        }
        if let Some(l) = &self.lora_q {
            l.collect(&format!("{prefix}.lora_q"), out);
        }
        if let Some(l) = &self.lora_v {
            l.collect(&format!("{prefix}.lora_v"), out);
        }
    }
}

/// One pre-norm encoder step:
/// `x + MSA(LN(x))` followed by `x + FFN(LN(x))` with a gelu hidden layer.
pub fn block_forward(tape: &mut Tape, x: &Tensor, p: &BlockParams) -> Result<Tensor> {
    let hn = ops::layer_norm(tape, x, &p.ln1_gamma, &p.ln1_beta, LN_EPS)?;
    let q = lora_linear(tape, &hn, &p.wq, Some(&p.bq), p.lora_q.as_ref())?;
    let k = linear(tape, &hn, &p.wk, Some(&p.bk))?;
    let v = lora_linear(tape, &hn, &p.wv, Some(&p.bv), p.lora_v.as_ref())?;
    let ctx = multi_head_attention(tape, &q, &k, &v, p.heads)?;
    let attn = linear(tape, &ctx, &p.wo, Some(&p.bo))?;
    let x = ops::add(tape, x, &attn)?;
    let hn2 = ops::layer_norm(tape, &x, &p.ln2_gamma, &p.ln2_beta, LN_EPS)?;
    let m = linear(tape, &hn2, &p.w1, Some(&p.b1))?;
    let m = ops::gelu(tape, &m)?;
    let m = linear(tape, &m, &p.w2, Some(&p.b2))?;
    Ok(ops::add(tape, &x, &m)?)
}
