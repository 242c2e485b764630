//! Pre-layer-norm transformer block shared by the language model and the mappers.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParameterTree, Tensor, Var};

pub(crate) fn init_linear<R: Rng>(
    tree: &mut ParameterTree,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    frozen: bool,
    rng: &mut R,
) -> Result<()> {
    tree.insert(format!("{prefix}.weight"), Tensor::xavier(fan_in, fan_out, rng), frozen)?;
    tree.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]), frozen)
}

pub(crate) fn init_layer_norm(tree: &mut ParameterTree, prefix: &str, d: usize, frozen: bool) -> Result<()> {
    tree.insert(format!("{prefix}.weight"), Tensor::filled(&[d], 1.0), frozen)?;
    tree.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]), frozen)
}

pub(crate) fn init_block<R: Rng>(
    tree: &mut ParameterTree,
    prefix: &str,
    d: usize,
    frozen: bool,
    rng: &mut R,
) -> Result<()> {
    init_layer_norm(tree, &format!("{prefix}.ln1"), d, frozen)?;
    init_linear(tree, &format!("{prefix}.attn.qkv"), d, 3 * d, frozen, rng)?;
    init_linear(tree, &format!("{prefix}.attn.proj"), d, d, frozen, rng)?;
    init_layer_norm(tree, &format!("{prefix}.ln2"), d, frozen)?;
    init_linear(tree, &format!("{prefix}.mlp.fc"), d, 4 * d, frozen, rng)?;
    init_linear(tree, &format!("{prefix}.mlp.proj"), 4 * d, d, frozen, rng)
}

pub(crate) fn linear(g: &mut Graph, tree: &ParameterTree, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param_from(tree, &format!("{prefix}.weight"))?;
    let b = g.param_from(tree, &format!("{prefix}.bias"))?;
    Ok(g.linear(x, w, b))
}

pub(crate) fn layer_norm(g: &mut Graph, tree: &ParameterTree, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param_from(tree, &format!("{prefix}.weight"))?;
    let b = g.param_from(tree, &format!("{prefix}.bias"))?;
    Ok(g.layer_norm(x, w, b))
}

/// `x + attn(ln1(x))`, then `+ mlp(ln2(·))`.
pub(crate) fn block(
    g: &mut Graph,
    tree: &ParameterTree,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let h = layer_norm(g, tree, &format!("{prefix}.ln1"), x)?;
    let qkv = linear(g, tree, &format!("{prefix}.attn.qkv"), h)?;
    let a = g.attention(qkv, heads, causal);
    let a = linear(g, tree, &format!("{prefix}.attn.proj"), a)?;
    let x = g.add(x, a);
    let h = layer_norm(g, tree, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, tree, &format!("{prefix}.mlp.fc"), h)?;
    let h = g.gelu(h);
    let h = linear(g, tree, &format!("{prefix}.mlp.proj"), h)?;
    Ok(g.add(x, h))
}
