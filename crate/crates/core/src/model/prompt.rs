//! Darkness-clue prompt blocks and gated prompt aggregation.
//!
//! Per layer `l` the prompter reads the foundation tokens `H` entering that
//! layer and produces
//!
//! ```text
//! H_E = em1(H)
//! H_U = un(H_E)
//! P   = beta * H_E + em2(H_U - alpha * H_E)
//! ```
//!
//! Each block is `Dec(gelu(Enc(x) +/- offset))` with 3x3 convolutions, run on
//! the template and search grids separately with shared weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::backbone::{trunc_normal, INIT_STD};
use crate::model::config::BackboneConfig;
use crate::params::{ModelParams, ModuleTag};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Offset added after the encoder.
    Emphasize,
    /// Offset subtracted after the encoder.
    Undermine,
}

pub const BLOCKS: [(&str, BlockKind); 3] = [
    ("em1", BlockKind::Emphasize),
    ("un", BlockKind::Undermine),
    ("em2", BlockKind::Emphasize),
];

pub fn dcp_prefix(l: usize) -> String {
    format!("dcp.{l}")
}

pub fn chain_gate_name(l: usize) -> String {
    format!("gfa.{l}.chain")
}

pub fn token_gate_name(l: usize) -> String {
    format!("gfa.{l}.tokens")
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Splits `[M, D]` tokens into `[D, s_z, s_z]` and `[D, s_x, s_x]` grids.
pub fn tokens_to_spatial(g: &mut Graph, tokens: NodeId, split: usize) -> Result<(NodeId, NodeId)> {
    let shape = g.value(tokens).shape().to_vec();
    if shape.len() != 2 || split > shape[0] {
        return Err(Error::shape(format!(
            "tokens_to_spatial: tokens {shape:?}, split {split}"
        )));
    }
    let (m, d) = (shape[0], shape[1]);
    let (sz, sx) = match (exact_sqrt(split), exact_sqrt(m - split)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::shape(format!(
                "token counts {split} and {} are not both positive squares",
                m - split
            )))
        }
    };
    let mut grid = |start: usize, side: usize| -> Result<NodeId> {
        let part = g.slice(tokens, 0, start, side * side)?;
        let t = g.transpose(part)?;
        g.reshape(t, &[d, side, side])
    };
    let z = grid(0, sz)?;
    let x = grid(split, sx)?;
    Ok((z, x))
}

/// Inverse of [`tokens_to_spatial`].
pub fn spatial_to_tokens(g: &mut Graph, z: NodeId, x: NodeId) -> Result<NodeId> {
    let mut flat = |grid: NodeId| -> Result<NodeId> {
        let s = g.value(grid).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("spatial_to_tokens: grid {s:?}")));
        }
        let r = g.reshape(grid, &[s[0], s[1] * s[2]])?;
        g.transpose(r)
    };
    let zt = flat(z)?;
    let xt = flat(x)?;
    g.concat(&[zt, xt], 0)
}

/// `Dec(gelu(Enc(x) +/- offset))` on a `[D, s, s]` grid.
pub fn enc_dec(g: &mut Graph, params: &ModelParams, grid: NodeId, prefix: &str, kind: BlockKind) -> Result<NodeId> {
    let we = g.param(params, &format!("{prefix}.enc.weight"))?;
    let be = g.param(params, &format!("{prefix}.enc.bias"))?;
    let off = g.param(params, &format!("{prefix}.offset"))?;
    let wd = g.param(params, &format!("{prefix}.dec.weight"))?;
    let bd = g.param(params, &format!("{prefix}.dec.bias"))?;
    let h = g.conv2d(grid, we, 1)?;
    let h = g.add_bias(h, be, 0)?;
    let off = match kind {
        BlockKind::Emphasize => off,
        BlockKind::Undermine => g.scale(off, -1.0)?,
    };
    let h = g.add_bias(h, off, 0)?;
    let h = g.gelu(h)?;
    let h = g.conv2d(h, wd, 1)?;
    g.add_bias(h, bd, 0)
}

pub fn emphasize(g: &mut Graph, params: &ModelParams, grid: NodeId, prefix: &str) -> Result<NodeId> {
    enc_dec(g, params, grid, prefix, BlockKind::Emphasize)
}

pub fn undermine(g: &mut Graph, params: &ModelParams, grid: NodeId, prefix: &str) -> Result<NodeId> {
    enc_dec(g, params, grid, prefix, BlockKind::Undermine)
}

fn dcp_grid(g: &mut Graph, params: &ModelParams, grid: NodeId, pre: &str, alpha: NodeId, beta: NodeId) -> Result<NodeId> {
    let he = emphasize(g, params, grid, &format!("{pre}.em1"))?;
    let hu = undermine(g, params, he, &format!("{pre}.un"))?;
    let ahe = g.scalar_mul(alpha, he)?;
    let diff = g.sub(hu, ahe)?;
    let e = emphasize(g, params, diff, &format!("{pre}.em2"))?;
    let bhe = g.scalar_mul(beta, he)?;
    g.add(bhe, e)
}

/// Prompt `P^l` (`[M, D]`) from the foundation tokens entering layer `l`.
pub fn dcp_forward(g: &mut Graph, params: &ModelParams, h_prev: NodeId, split: usize, l: usize) -> Result<NodeId> {
    let pre = dcp_prefix(l);
    let alpha = g.param(params, &format!("{pre}.alpha"))?;
    let beta = g.param(params, &format!("{pre}.beta"))?;
    let (z, x) = tokens_to_spatial(g, h_prev, split)?;
    let pz = dcp_grid(g, params, z, &pre, alpha, beta)?;
    let px = dcp_grid(g, params, x, &pre, alpha, beta)?;
    spatial_to_tokens(g, pz, px)
}

/// `g * p + (1 - g) * prev` with `g = sigmoid(gamma)`, evaluated as
/// `prev + g * (p - prev)`.
pub fn chain(g: &mut Graph, p: NodeId, prev: NodeId, gamma: NodeId) -> Result<NodeId> {
    let gate = g.sigmoid(gamma)?;
    let diff = g.sub(p, prev)?;
    let step = g.scalar_mul(gate, diff)?;
    g.add(prev, step)
}

/// `h[i] + sigmoid(gamma[i]) * prompt[i]` per token; with `gamma = None` the
/// gate is fixed at 1.
pub fn inject(g: &mut Graph, h: NodeId, prompt: NodeId, gamma: Option<NodeId>) -> Result<NodeId> {
    let Some(gamma) = gamma else {
        return g.add(h, prompt);
    };
    let shape = g.value(h).shape().to_vec();
    let m = g.value(gamma).numel();
    if shape.len() != 2 || m != shape[0] {
        return Err(Error::shape(format!(
            "inject: {m} gate logits for tokens {shape:?}"
        )));
    }
    let gates = g.sigmoid(gamma)?;
    let col = g.reshape(gates, &[m, 1])?;
    let ones = g.input(Tensor::full([1, shape[1]], 1.0));
    let wide = g.matmul(col, ones)?;
    let gated = g.mul(wide, prompt)?;
    g.add(h, gated)
}

/// Adds prompter parameters for layers `1..=N`: random encoders, zero
/// offsets, `alpha = 1`, `beta = 0` and a zero final decoder so every prompt
/// starts at exactly zero.
pub fn init_dcp(params: &mut ModelParams, cfg: &BackboneConfig, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, c) = (cfg.embed_dim, cfg.prompt_dim());
    let tag = ModuleTag::Dcp;
    for l in 1..=cfg.num_layers {
        let pre = dcp_prefix(l);
        for (block, _) in BLOCKS {
            let b = format!("{pre}.{block}");
            params.insert(format!("{b}.enc.weight"), tag, trunc_normal(&mut rng, &[c, d, 3, 3], INIT_STD))?;
            params.insert(format!("{b}.enc.bias"), tag, Tensor::zeros([c]))?;
            params.insert(format!("{b}.offset"), tag, Tensor::zeros([c]))?;
            let dec = if block == "em2" {
                Tensor::zeros([d, c, 3, 3])
            } else {
                trunc_normal(&mut rng, &[d, c, 3, 3], INIT_STD)
            };
            params.insert(format!("{b}.dec.weight"), tag, dec)?;
            params.insert(format!("{b}.dec.bias"), tag, Tensor::zeros([d]))?;
        }
        params.insert(format!("{pre}.alpha"), tag, Tensor::scalar(1.0))?;
        params.insert(format!("{pre}.beta"), tag, Tensor::scalar(0.0))?;
    }
    Ok(())
}

/// Chain gate logits for layers `2..=N` and/or token gate logits for every
/// layer, all zero.
pub fn init_gfa(params: &mut ModelParams, cfg: &BackboneConfig, chain: bool, tokens: bool) -> Result<()> {
    for l in 1..=cfg.num_layers {
        if chain && l >= 2 {
            params.insert(chain_gate_name(l), ModuleTag::Gfa, Tensor::scalar(0.0))?;
        }
        if tokens {
            params.insert(token_gate_name(l), ModuleTag::Gfa, Tensor::zeros([cfg.tokens()]))?;
        }
    }
    Ok(())
}
