//! Plain-loop reimplementation of the full prompted forward pass on the tiny
//! configuration, compared against the graph implementation.

use nightprompt::data::Image;
use nightprompt::model::{AblationProfile, BackboneConfig, Tracker};
use nightprompt::params::ModelParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn p<'a>(params: &'a ModelParams, name: &str) -> &'a [f64] {
    params.get(name).unwrap_or_else(|| panic!("missing {name}")).value.data()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x @ w + b` with `w` stored row-major as `[din, dout]`.
fn linear(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let dout = b.len();
    let din = w.len() / dout;
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| b[o] + (0..din).map(|i| row[i] * w[i * dout + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Zero-padded convolution, `grid[c][y][x]`, weight `[co, ci, k, k]`.
fn conv(grid: &[Mat], w: &[f64], bias: &[f64], k: usize) -> Vec<Mat> {
    let ci = grid.len();
    let s = grid[0].len();
    let co = bias.len();
    let pad = k / 2;
    (0..co)
        .map(|o| {
            (0..s)
                .map(|y| {
                    (0..s)
                        .map(|x| {
                            let mut acc = bias[o];
                            for c in 0..ci {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let yy = y as isize + ky as isize - pad as isize;
                                        let xx = x as isize + kx as isize - pad as isize;
                                        if yy < 0 || xx < 0 || yy >= s as isize || xx >= s as isize {
                                            continue;
                                        }
                                        acc += w[((o * ci + c) * k + ky) * k + kx] * grid[c][yy as usize][xx as usize];
                                    }
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn to_grid(tokens: &[Vec<f64>], side: usize) -> Vec<Mat> {
    let d = tokens[0].len();
    (0..d)
        .map(|c| (0..side).map(|y| (0..side).map(|x| tokens[y * side + x][c]).collect()).collect())
        .collect()
}

fn from_grid(grid: &[Mat]) -> Mat {
    let s = grid[0].len();
    (0..s * s).map(|t| grid.iter().map(|ch| ch[t / s][t % s]).collect()).collect()
}

fn map_grid(grid: &[Mat], f: impl Fn(usize, f64) -> f64) -> Vec<Mat> {
    grid.iter()
        .enumerate()
        .map(|(c, ch)| ch.iter().map(|row| row.iter().map(|v| f(c, *v)).collect()).collect())
        .collect()
}

fn block(params: &ModelParams, grid: &[Mat], pre: &str, sign: f64) -> Vec<Mat> {
    let h = conv(grid, p(params, &format!("{pre}.enc.weight")), p(params, &format!("{pre}.enc.bias")), 3);
    let off = p(params, &format!("{pre}.offset"));
    let h = map_grid(&h, |c, v| gelu(v + sign * off[c]));
    conv(&h, p(params, &format!("{pre}.dec.weight")), p(params, &format!("{pre}.dec.bias")), 3)
}

fn dcp_grid(params: &ModelParams, grid: &[Mat], l: usize) -> Vec<Mat> {
    let pre = format!("dcp.{l}");
    let alpha = p(params, &format!("{pre}.alpha"))[0];
    let beta = p(params, &format!("{pre}.beta"))[0];
    let he = block(params, grid, &format!("{pre}.em1"), 1.0);
    let hu = block(params, &he, &format!("{pre}.un"), -1.0);
    let diff: Vec<Mat> = hu
        .iter()
        .zip(&he)
        .map(|(a, b)| a.iter().zip(b).map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x - alpha * y).collect()).collect())
        .collect();
    let e = block(params, &diff, &format!("{pre}.em2"), 1.0);
    e.iter()
        .zip(&he)
        .map(|(a, b)| a.iter().zip(b).map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + beta * y).collect()).collect())
        .collect()
}

fn patch_tokens(params: &ModelParams, img: &Image, patch: usize, pos: &str) -> Mat {
    let g = img.width / patch;
    let w = p(params, "patch_embed.weight");
    let b = p(params, "patch_embed.bias");
    let pos = p(params, pos);
    let d = b.len();
    let mut rows = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let mut v = Vec::new();
            for py in 0..patch {
                for px in 0..patch {
                    v.extend(img.pixel(gx * patch + px, gy * patch + py));
                }
            }
            rows.push(v);
        }
    }
    let mut out = linear(&rows, w, b);
    for (t, row) in out.iter_mut().enumerate() {
        for j in 0..d {
            row[j] += pos[t * d + j];
        }
    }
    out
}

fn encoder(params: &ModelParams, cfg: &BackboneConfig, x: &Mat, l: usize) -> Mat {
    let pre = format!("layers.{l}");
    let q = |n: &str| p(params, &format!("{pre}.{n}"));
    let h = layer_norm(x, q("ln1.gamma"), q("ln1.beta"), cfg.ln_eps);
    let qm = linear(&h, q("attn.q.weight"), q("attn.q.bias"));
    let km = linear(&h, q("attn.k.weight"), q("attn.k.bias"));
    let vm = linear(&h, q("attn.v.weight"), q("attn.v.bias"));
    let dh = cfg.embed_dim / cfg.num_heads;
    let m = x.len();
    let mut merged = vec![vec![0.0; cfg.embed_dim]; m];
    for head in 0..cfg.num_heads {
        let o = head * dh;
        for i in 0..m {
            let scores: Vec<f64> = (0..m)
                .map(|j| (0..dh).map(|c| qm[i][o + c] * km[j][o + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for c in 0..dh {
                merged[i][o + c] = (0..m).map(|j| a[j] * vm[j][o + c]).sum();
            }
        }
    }
    let attn = linear(&merged, q("attn.proj.weight"), q("attn.proj.bias"));
    let x: Mat = x.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
    let h = layer_norm(&x, q("ln2.gamma"), q("ln2.beta"), cfg.ln_eps);
    let h = linear(&h, q("mlp.fc1.weight"), q("mlp.fc1.bias"));
    let h: Mat = h.iter().map(|r| r.iter().map(|v| gelu(*v)).collect()).collect();
    let h = linear(&h, q("mlp.fc2.weight"), q("mlp.fc2.bias"));
    x.iter().zip(&h).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect()
}

fn oracle_forward(t: &Tracker, template: &Image, search: &Image) -> [f64; 4] {
    let (cfg, params, prof) = (&t.config, &t.params, t.profile);
    let mut h = patch_tokens(params, template, cfg.patch_size, "pos_template");
    let split = h.len();
    h.extend(patch_tokens(params, search, cfg.patch_size, "pos_search"));
    let (sz, sx) = (cfg.template_size / cfg.patch_size, cfg.search_size / cfg.patch_size);
    let mut prev: Option<Mat> = None;
    for l in 1..=cfg.num_layers {
        let mut input = h.clone();
        if prof.enable_dcp {
            let pz = from_grid(&dcp_grid(params, &to_grid(&h[..split], sz), l));
            let px = from_grid(&dcp_grid(params, &to_grid(&h[split..], sx), l));
            let mut prompt: Mat = pz.into_iter().chain(px).collect();
            if let (true, Some(pv)) = (prof.enable_gfa_pp, &prev) {
                let g = sigmoid(p(params, &format!("gfa.{l}.chain"))[0]);
                for (row, prow) in prompt.iter_mut().zip(pv) {
                    for (v, pvv) in row.iter_mut().zip(prow) {
                        *v = g * *v + (1.0 - g) * pvv;
                    }
                }
            }
            for (i, row) in input.iter_mut().enumerate() {
                let gate = if prof.enable_gfa_pb {
                    sigmoid(p(params, &format!("gfa.{l}.tokens"))[i])
                } else {
                    1.0
                };
                for (v, pv) in row.iter_mut().zip(&prompt[i]) {
                    *v += gate * pv;
                }
            }
            prev = Some(prompt);
        }
        h = encoder(params, cfg, &input, l);
    }
    let h = layer_norm(&h, p(params, "norm.gamma"), p(params, "norm.beta"), cfg.ln_eps);
    let grid = to_grid(&h[split..], sx);
    let mut out = [0.0; 4];
    for (k, branch) in ["tl", "br"].iter().enumerate() {
        let pre = format!("head.{branch}");
        let c1 = conv(&grid, p(params, &format!("{pre}.conv1.weight")), p(params, &format!("{pre}.conv1.bias")), 3);
        let c1 = map_grid(&c1, |_, v| gelu(v));
        let c2 = conv(&c1, p(params, &format!("{pre}.conv2.weight")), p(params, &format!("{pre}.conv2.bias")), 1);
        let logits: Vec<f64> = c2[0].iter().flatten().cloned().collect();
        let prob = softmax(&logits);
        for (idx, w) in prob.iter().enumerate() {
            let (i, j) = (idx / sx, idx % sx);
            out[2 * k] += w * (j as f64 + 0.5) / sx as f64;
            out[2 * k + 1] += w * (i as f64 + 0.5) / sx as f64;
        }
    }
    out
}

fn randomized(profile: AblationProfile, seed: u64) -> Tracker {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::foundation(BackboneConfig::tiny(), seed)
        .unwrap()
        .with_prompts(profile, seed + 1)
        .unwrap();
    let names: Vec<String> = t.params.iter().map(|p| p.name.clone()).collect();
    for n in names {
        let scale = if n.starts_with("head.") { 2.0 } else { 0.3 };
        for v in t.params.value_mut(&n).unwrap().data_mut() {
            *v = if n.ends_with("gamma") && !n.starts_with("gfa") {
                1.0 + rng.random_range(-0.2..0.2)
            } else {
                rng.random_range(-scale..scale)
            };
        }
    }
    t
}

fn image(size: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(size, size, (0..size * size * 3).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn graph_forward_matches_loop_oracle_for_every_profile() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (k, profile) in AblationProfile::LADDER.into_iter().enumerate() {
        for trial in 0..3 {
            let t = randomized(profile, 10 * k as u64 + trial);
            let (z, x) = (image(16, &mut rng), image(32, &mut rng));
            let got = t.predict(&z, &x).unwrap().corners();
            let want = oracle_forward(&t, &z, &x);
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() < 1e-10, "{profile}: graph {got:?} vs oracle {want:?}");
            }
        }
    }
}

#[test]
fn oracle_is_sensitive_to_every_prompt_stage() {
    // guards against a vacuous comparison: switching the profile on the same
    // parameters changes the oracle's answer
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = randomized(AblationProfile::FULL, 3);
    let (z, x) = (image(16, &mut rng), image(32, &mut rng));
    let outs: Vec<[f64; 4]> = AblationProfile::LADDER
        .into_iter()
        .map(|profile| oracle_forward(&Tracker { profile, ..t.clone() }, &z, &x))
        .collect();
    for i in 0..outs.len() {
        for j in i + 1..outs.len() {
            assert_ne!(outs[i], outs[j]);
        }
    }
}
