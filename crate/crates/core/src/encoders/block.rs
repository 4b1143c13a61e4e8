//! Pre-norm single-head transformer block with an optional locality path.

use rand::Rng;

use super::params::{normal_tensor, Bound, ParamStore};
use crate::diff::{DiffError, Graph, Real, Tensor, Var};

pub(crate) struct BlockVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BlockVars {
    pub(crate) fn new(b: &Bound, prefix: &str) -> Self {
        let v = |s: &str| b.var(&format!("{prefix}.{s}"));
        Self {
            ln1_g: v("ln1.g"),
            ln1_b: v("ln1.b"),
            wq: v("wq"),
            wk: v("wk"),
            wv: v("wv"),
            wo: v("wo"),
            ln2_g: v("ln2.g"),
            ln2_b: v("ln2.b"),
            w1: v("mlp.w1"),
            b1: v("mlp.b1"),
            w2: v("mlp.w2"),
            b2: v("mlp.b2"),
        }
    }
}

pub(crate) fn init_block<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    hidden: usize,
    rng: &mut R,
) {
    let std = 1.0 / (width as f64).sqrt();
    store.insert(format!("{prefix}.ln1.g"), Tensor::filled(&[1, width], 1.0));
    store.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[1, width]));
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.{w}"), normal_tensor(rng, &[width, width], std));
    }
    store.insert(format!("{prefix}.ln2.g"), Tensor::filled(&[1, width], 1.0));
    store.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[1, width]));
    store.insert(
        format!("{prefix}.mlp.w1"),
        normal_tensor(rng, &[width, hidden], std),
    );
    store.insert(format!("{prefix}.mlp.b1"), Tensor::zeros(&[1, hidden]));
    store.insert(
        format!("{prefix}.mlp.w2"),
        normal_tensor(rng, &[hidden, width], 1.0 / (hidden as f64).sqrt()),
    );
    store.insert(format!("{prefix}.mlp.b2"), Tensor::zeros(&[1, width]));
}

pub(crate) fn layer_norm_affine<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    gain: Var,
    bias: Var,
) -> Result<Var, DiffError> {
    let n = g.layer_norm(x)?;
    let s = g.mul(n, gain)?;
    g.add(s, bias)
}

/// x · σ(1.702 x)
pub(crate) fn quick_gelu<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var, DiffError> {
    let s = g.scale(x, 1.702)?;
    let s = g.sigmoid(s)?;
    g.mul(x, s)
}

pub(crate) fn linear<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Var,
) -> Result<Var, DiffError> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Outputs of one block. `local` is the locality path's residual output
/// (`input + masked attention`), present only when a mask was supplied.
pub struct BlockOutput {
    pub global: Var,
    pub attn_global: Var,
    pub local: Option<Var>,
    pub local_update: Option<Var>,
    pub attn_local: Option<Var>,
}

/// softmax((QKᵀ + M) / √d_k)
fn attention_weights<T: Real>(
    g: &mut Graph<T>,
    scores: Var,
    mask: Option<Var>,
    d_k: usize,
) -> Result<Var, DiffError> {
    let s = match mask {
        Some(m) => g.masked_add(scores, m)?,
        None => scores,
    };
    let s = g.scale(s, 1.0 / (d_k as f64).sqrt())?;
    g.softmax(s)
}

pub(crate) fn block_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &BlockVars,
    mask: Option<Var>,
) -> Result<BlockOutput, DiffError> {
    let d_k = g.shape(p.wq)[1];
    let h = layer_norm_affine(g, x, p.ln1_g, p.ln1_b)?;
    let q = g.matmul(h, p.wq)?;
    let k = g.matmul(h, p.wk)?;
    let v = g.matmul(h, p.wv)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;

    let attn_global = attention_weights(g, scores, None, d_k)?;
    let ctx = g.matmul(attn_global, v)?;
    let out = g.matmul(ctx, p.wo)?;
    let x1 = g.add(x, out)?;
    let h2 = layer_norm_affine(g, x1, p.ln2_g, p.ln2_b)?;
    let m = linear(g, h2, p.w1, p.b1)?;
    let m = quick_gelu(g, m)?;
    let m = linear(g, m, p.w2, p.b2)?;
    let global = g.add(x1, m)?;

    let (local, local_update, attn_local) = match mask {
        Some(mask) => {
            let a = attention_weights(g, scores, Some(mask), d_k)?;
            let ctx = g.matmul(a, v)?;
            let upd = g.matmul(ctx, p.wo)?;
            let local = g.add(x, upd)?;
            (Some(local), Some(upd), Some(a))
        }
        None => (None, None, None),
    };
    Ok(BlockOutput {
        global,
        attn_global,
        local,
        local_update,
        attn_local,
    })
}
