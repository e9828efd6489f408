//! One-stream foundation tracker: patch embedding, joint encoder, corner head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::model::config::BackboneConfig;
use crate::params::{ModelParams, ModuleTag};
use crate::tensor::{Graph, NodeId, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Template,
    Search,
}

/// Token matrix `[M, D]` in the graph plus the template/search split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenState {
    pub tokens: NodeId,
    /// Number of template tokens; search tokens follow.
    pub split: usize,
    pub layer: usize,
}

/// Normal draws with resampling outside two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn layer_prefix(l: usize) -> String {
    format!("layers.{l}")
}

/// Randomly initialized backbone and head parameters.
pub fn init_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    let d = cfg.embed_dim;
    let hidden = d * cfg.mlp_ratio;
    let bb = ModuleTag::Backbone;
    let mut w = |p: &mut ModelParams, name: String, shape: &[usize], tag: ModuleTag| {
        p.insert(name, tag, trunc_normal(&mut rng, shape, INIT_STD))
    };

    w(&mut p, "patch_embed.weight".into(), &[cfg.patch_dim(), d], bb)?;
    p.insert("patch_embed.bias", bb, Tensor::zeros([d]))?;
    w(&mut p, "pos_template".into(), &[cfg.template_tokens(), d], bb)?;
    w(&mut p, "pos_search".into(), &[cfg.search_tokens(), d], bb)?;

    for l in 1..=cfg.num_layers {
        let pre = layer_prefix(l);
        for ln in ["ln1", "ln2"] {
            p.insert(format!("{pre}.{ln}.gamma"), bb, Tensor::full([d], 1.0))?;
            p.insert(format!("{pre}.{ln}.beta"), bb, Tensor::zeros([d]))?;
        }
        for proj in ["q", "k", "v", "proj"] {
            w(&mut p, format!("{pre}.attn.{proj}.weight"), &[d, d], bb)?;
            p.insert(format!("{pre}.attn.{proj}.bias"), bb, Tensor::zeros([d]))?;
        }
        w(&mut p, format!("{pre}.mlp.fc1.weight"), &[d, hidden], bb)?;
        p.insert(format!("{pre}.mlp.fc1.bias"), bb, Tensor::zeros([hidden]))?;
        w(&mut p, format!("{pre}.mlp.fc2.weight"), &[hidden, d], bb)?;
        p.insert(format!("{pre}.mlp.fc2.bias"), bb, Tensor::zeros([d]))?;
    }
    p.insert("norm.gamma", bb, Tensor::full([d], 1.0))?;
    p.insert("norm.beta", bb, Tensor::zeros([d]))?;

    let hc = cfg.head_channels;
    for branch in ["tl", "br"] {
        let h = ModuleTag::Head;
        w(&mut p, format!("head.{branch}.conv1.weight"), &[hc, d, 3, 3], h)?;
        p.insert(format!("head.{branch}.conv1.bias"), h, Tensor::zeros([hc]))?;
        w(&mut p, format!("head.{branch}.conv2.weight"), &[1, hc, 1, 1], h)?;
        p.insert(format!("head.{branch}.conv2.bias"), h, Tensor::zeros([1]))?;
    }
    Ok(p)
}

/// Splits an image into non-overlapping `patch x patch` blocks, one row per
/// block in raster order, each row laid out as `(py, px, channel)`.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || img.width % patch != 0 || img.height % patch != 0 {
        return Err(Error::shape(format!(
            "{}x{} image is not divisible into {patch}px patches",
            img.width, img.height
        )));
    }
    let (gw, gh) = (img.width / patch, img.height / patch);
    let row = 3 * patch * patch;
    let mut data = Vec::with_capacity(gw * gh * row);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * img.width + gx * patch) * 3;
                data.extend_from_slice(&img.data[start..start + patch * 3]);
            }
        }
    }
    Tensor::new([gw * gh, row], data)
}

/// Linear patch projection plus the region's positional table.
pub fn patch_embed(
    g: &mut Graph,
    params: &ModelParams,
    cfg: &BackboneConfig,
    img: &Image,
    region: Region,
) -> Result<NodeId> {
    let (size, pos) = match region {
        Region::Template => (cfg.template_size, "pos_template"),
        Region::Search => (cfg.search_size, "pos_search"),
    };
    if img.width != size || img.height != size {
        return Err(Error::shape(format!(
            "{region:?} image is {}x{}, expected {size}x{size}",
            img.width, img.height
        )));
    }
    let patches = g.input(patchify(img, cfg.patch_size)?);
    let w = g.param(params, "patch_embed.weight")?;
    let b = g.param(params, "patch_embed.bias")?;
    let pos = g.param(params, pos)?;
    let x = g.matmul(patches, w)?;
    let x = g.add_bias(x, b, 1)?;
    g.add(x, pos)
}

/// Template tokens first, then search tokens.
pub fn concat_tokens(g: &mut Graph, z: NodeId, x: NodeId) -> Result<TokenState> {
    let (sz, sx) = (g.value(z).shape().to_vec(), g.value(x).shape().to_vec());
    if sz.len() != 2 || sx.len() != 2 || sz[1] != sx[1] {
        return Err(Error::shape(format!("concat_tokens: {sz:?} and {sx:?}")));
    }
    Ok(TokenState {
        tokens: g.concat(&[z, x], 0)?,
        split: sz[0],
        layer: 0,
    })
}

fn linear(g: &mut Graph, params: &ModelParams, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = g.param(params, &format!("{prefix}.weight"))?;
    let b = g.param(params, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b, 1)
}

fn layer_norm(g: &mut Graph, params: &ModelParams, x: NodeId, prefix: &str, eps: f64) -> Result<NodeId> {
    let gamma = g.param(params, &format!("{prefix}.gamma"))?;
    let beta = g.param(params, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, eps)
}

/// Output of one encoder layer plus the per-head attention matrices.
pub struct LayerOutput {
    pub state: TokenState,
    pub attention: Vec<NodeId>,
}

/// Pre-norm layer: `x + MHSA(LN(x))`, then `+ MLP(LN(.))`. `input` is the
/// token matrix entering layer `l` (already prompted, if prompting is on).
pub fn encoder_layer(
    g: &mut Graph,
    params: &ModelParams,
    cfg: &BackboneConfig,
    input: TokenState,
    l: usize,
) -> Result<LayerOutput> {
    if l == 0 || l > cfg.num_layers {
        return Err(Error::Contract(format!(
            "layer index {l} outside 1..={}",
            cfg.num_layers
        )));
    }
    let pre = layer_prefix(l);
    let x = input.tokens;
    let h = layer_norm(g, params, x, &format!("{pre}.ln1"), cfg.ln_eps)?;
    let q = linear(g, params, h, &format!("{pre}.attn.q"))?;
    let k = linear(g, params, h, &format!("{pre}.attn.k"))?;
    let v = linear(g, params, h, &format!("{pre}.attn.v"))?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut attention = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let qh = g.slice(q, 1, head * dh, dh)?;
        let kh = g.slice(k, 1, head * dh, dh)?;
        let vh = g.slice(v, 1, head * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let a = g.softmax(scores)?;
        attention.push(a);
        heads.push(g.matmul(a, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat(&heads, 1)?
    };
    let attn_out = linear(g, params, merged, &format!("{pre}.attn.proj"))?;
    let x = g.add(x, attn_out)?;

    let h = layer_norm(g, params, x, &format!("{pre}.ln2"), cfg.ln_eps)?;
    let h = linear(g, params, h, &format!("{pre}.mlp.fc1"))?;
    let h = g.gelu(h)?;
    let h = linear(g, params, h, &format!("{pre}.mlp.fc2"))?;
    let x = g.add(x, h)?;
    Ok(LayerOutput {
        state: TokenState {
            tokens: x,
            split: input.split,
            layer: l,
        },
        attention,
    })
}

pub fn final_norm(g: &mut Graph, params: &ModelParams, cfg: &BackboneConfig, state: TokenState) -> Result<TokenState> {
    Ok(TokenState {
        tokens: layer_norm(g, params, state.tokens, "norm", cfg.ln_eps)?,
        ..state
    })
}

/// Normalized cell centers `((j + 0.5) / s, (i + 0.5) / s)` in raster order, `[s*s, 2]`.
pub fn grid_coords(s: usize) -> Tensor {
    let mut data = Vec::with_capacity(s * s * 2);
    for i in 0..s {
        for j in 0..s {
            data.push((j as f64 + 0.5) / s as f64);
            data.push((i as f64 + 0.5) / s as f64);
        }
    }
    Tensor::new([s * s, 2], data).expect("grid shape")
}

/// Spatial softmax over `[1, s*s]` logits followed by the expected cell
/// center. Returns `[1, 2]` as `(x, y)`.
pub fn soft_argmax(g: &mut Graph, logits: NodeId, s: usize) -> Result<NodeId> {
    let prob = g.softmax(logits)?;
    let coords = g.input(grid_coords(s));
    g.matmul(prob, coords)
}

/// Corner head over the final search tokens. Returns the raw normalized box
/// `[x1, y1, x2, y2]` as a `[4]` node.
pub fn corner_head(g: &mut Graph, params: &ModelParams, cfg: &BackboneConfig, state: TokenState) -> Result<NodeId> {
    let s = cfg.search_grid();
    let mx = cfg.search_tokens();
    let search = g.slice(state.tokens, 0, state.split, mx)?;
    let chw = g.transpose(search)?;
    let chw = g.reshape(chw, &[cfg.embed_dim, s, s])?;
    let mut corners = Vec::with_capacity(2);
    for branch in ["tl", "br"] {
        let pre = format!("head.{branch}");
        let w1 = g.param(params, &format!("{pre}.conv1.weight"))?;
        let b1 = g.param(params, &format!("{pre}.conv1.bias"))?;
        let w2 = g.param(params, &format!("{pre}.conv2.weight"))?;
        let b2 = g.param(params, &format!("{pre}.conv2.bias"))?;
        let h = g.conv2d(chw, w1, 1)?;
        let h = g.add_bias(h, b1, 0)?;
        let h = g.gelu(h)?;
        let h = g.conv2d(h, w2, 0)?;
        let h = g.add_bias(h, b2, 0)?;
        let logits = g.reshape(h, &[1, s * s])?;
        corners.push(soft_argmax(g, logits, s)?);
    }
    let both = g.concat(&corners, 1)?;
    g.reshape(both, &[4])
}
