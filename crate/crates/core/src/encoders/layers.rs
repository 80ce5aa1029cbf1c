//! Building blocks shared by both towers.

use rand::Rng;

use crate::encoders::params::{Binder, ParamStore, Role};
use crate::error::Result;
use crate::numerics::{Graph, NodeId, Tensor};

/// `x · W + b` over the last axis of `x`.
pub(crate) fn linear(g: &mut Graph, b: &mut Binder, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = b.get(g, &format!("{prefix}.w"))?;
    let bias = b.get(g, &format!("{prefix}.b"))?;
    let shape = g.shape(x).to_vec();
    let (din, dout) = (g.shape(w)[0], g.shape(w)[1]);
    let rows = shape.iter().product::<usize>() / din;
    let flat = g.reshape(x, &[rows, din])?;
    let y = g.matmul(flat, w)?;
    let y = g.add_row(y, bias)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("linear input has rank >= 1") = dout;
    g.reshape(y, &out_shape)
}

/// Layer normalization with learned gain and shift.
pub(crate) fn layer_norm(g: &mut Graph, b: &mut Binder, prefix: &str, x: NodeId, eps: f64) -> Result<NodeId> {
    let gain = b.get(g, &format!("{prefix}.g"))?;
    let shift = b.get(g, &format!("{prefix}.b"))?;
    let n = g.layer_norm(x, eps)?;
    let n = g.mul_row(n, gain)?;
    g.add_row(n, shift)
}

/// Repeats `x` (any shape) `n` times along a new leading axis.
pub(crate) fn broadcast(g: &mut Graph, x: NodeId, n: usize) -> Result<NodeId> {
    let mut shape = vec![n];
    shape.extend_from_slice(g.shape(x));
    let len: usize = shape.iter().product();
    let zeros = g.constant(&shape, vec![0.0; len])?;
    g.add_row(zeros, x)
}

/// Pre-norm transformer block: `x + MHSA(LN(x))` then `x + MLP(LN(x))`.
pub(crate) fn transformer_block(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x: NodeId,
    heads: usize,
    eps: f64,
) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let (bs, n, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;

    let h = layer_norm(g, b, &format!("{prefix}.ln1"), x, eps)?;
    let qkv = linear(g, b, &format!("{prefix}.attn.qkv"), h)?;
    let qkv = g.reshape(qkv, &[bs, n, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3, bs * heads, n, dh])?;
    let mut parts = [x; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let s = g.slice(qkv, 0, i, i + 1)?;
        *part = g.reshape(s, &[bs * heads, n, dh])?;
    }
    let [q, k, v] = parts;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(scores)?;
    let ctx = g.batch_matmul(attn, v, false)?;
    let ctx = g.reshape(ctx, &[bs, heads, n, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[bs, n, d])?;
    let out = linear(g, b, &format!("{prefix}.attn.out"), ctx)?;
    let x = g.add(x, out)?;

    let h = layer_norm(g, b, &format!("{prefix}.ln2"), x, eps)?;
    let h = linear(g, b, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, b, &format!("{prefix}.mlp.fc2"), h)?;
    g.add(x, h)
}

pub(crate) fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    din: usize,
    dout: usize,
    std: f64,
    role: Role,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), role, Tensor::randn(&[din, dout], std, rng))?;
    store.insert(format!("{prefix}.b"), role, Tensor::zeros(&[dout]))
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize, role: Role) -> Result<()> {
    store.insert(format!("{prefix}.g"), role, Tensor::full(&[d], 1.0))?;
    store.insert(format!("{prefix}.b"), role, Tensor::zeros(&[d]))
}

pub(crate) fn init_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    mlp_ratio: usize,
    rng: &mut R,
) -> Result<()> {
    let role = Role::Backbone;
    let std = 1.0 / (d as f64).sqrt();
    init_layer_norm(store, &format!("{prefix}.ln1"), d, role)?;
    init_linear(store, &format!("{prefix}.attn.qkv"), d, 3 * d, std, role, rng)?;
    init_linear(store, &format!("{prefix}.attn.out"), d, d, std, role, rng)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), d, role)?;
    init_linear(store, &format!("{prefix}.mlp.fc1"), d, mlp_ratio * d, std, role, rng)?;
    init_linear(store, &format!("{prefix}.mlp.fc2"), mlp_ratio * d, d, std / (mlp_ratio as f64).sqrt(), role, rng)
}
