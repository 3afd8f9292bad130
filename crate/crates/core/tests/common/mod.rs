#![allow(dead_code)]

use dash_core::advantage::GroupIndex;
use dash_core::policy::{sample, Architecture, PolicyParams, TokenId, Trajectory};
use dash_core::rng::rng_from;
use dash_core::updates::{Rollout, RolloutBatch};
use rand::Rng;

/// 221 parameters.
pub fn small_arch() -> Architecture {
    Architecture { vocab_size: 5, embed_dim: 4, n_heads: 2, ff_dim: 8, context: 8, n_layers: 1 }
}

/// Two layers, still under 500 parameters.
pub fn two_layer_arch() -> Architecture {
    Architecture { vocab_size: 5, embed_dim: 4, n_heads: 2, ff_dim: 4, context: 6, n_layers: 2 }
}

fn tensor<'a>(p: &'a PolicyParams, name: &str) -> &'a [f64] {
    p.tensor(name).unwrap_or_else(|| panic!("missing tensor {name}"))
}

fn rmsnorm(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(v, gi)| gi * v / r).collect()
}

/// `W x` with `W` stored row-major as `[rows, x.len()]`.
fn apply(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks(x.len()).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn gelu(u: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * u * (1.0 + (c * (u + 0.044715 * u.powi(3))).tanh())
}

/// Logits at every position of `tokens`, recomputed from scratch over the
/// whole sequence with explicit causal attention.
pub fn reference_logits(p: &PolicyParams, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    let a = *p.arch();
    let (d, hd) = (a.embed_dim, a.embed_dim / a.n_heads);
    let tok = tensor(p, "tok_emb");
    let pos = tensor(p, "pos_emb");
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|i| tok[id as usize * d + i] + pos[t * d + i]).collect())
        .collect();
    for l in 0..a.n_layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| rmsnorm(x, tensor(p, &name("attn_norm")))).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|x| apply(tensor(p, &name("wq")), x)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|x| apply(tensor(p, &name("wk")), x)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| apply(tensor(p, &name("wv")), x)).collect();
        for t in 0..xs.len() {
            let mut o = vec![0.0; d];
            for h in 0..a.n_heads {
                let r = h * hd..(h + 1) * hd;
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        q[t][r.clone()].iter().zip(&k[s][r.clone()]).map(|(x, y)| x * y).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for (s, sc) in scores.iter().enumerate() {
                    for i in r.clone() {
                        o[i] += sc.exp() / z * v[s][i];
                    }
                }
            }
            let proj = apply(tensor(p, &name("wo")), &o);
            for i in 0..d {
                xs[t][i] += proj[i];
            }
        }
        for x in xs.iter_mut() {
            let b = rmsnorm(x, tensor(p, &name("ff_norm")));
            let mut u = apply(tensor(p, &name("w1")), &b);
            for (ui, bi) in u.iter_mut().zip(tensor(p, &name("b1"))) {
                *ui = gelu(*ui + bi);
            }
            let y = apply(tensor(p, &name("w2")), &u);
            for i in 0..d {
                x[i] += y[i] + tensor(p, &name("b2"))[i];
            }
        }
    }
    xs.iter()
        .map(|x| {
            let c = rmsnorm(x, tensor(p, "final_norm"));
            apply(tensor(p, "w_out"), &c).iter().zip(tensor(p, "b_out")).map(|(z, b)| z + b).collect()
        })
        .collect()
}

pub fn reference_log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Per-token log-probs of the completion under the reference forward pass.
pub fn reference_log_probs(p: &PolicyParams, traj: &Trajectory) -> Vec<f64> {
    let mut tokens = traj.prompt.clone();
    tokens.extend(&traj.completion);
    let logits = reference_logits(p, &tokens);
    let pl = traj.prompt.len();
    traj.completion.iter().enumerate().map(|(j, &y)| reference_log_softmax(&logits[pl - 1 + j])[y as usize]).collect()
}

/// Central difference of `f` along coordinate `i`.
pub fn central_diff(f: &impl Fn(&PolicyParams) -> f64, p: &PolicyParams, i: usize, h: f64) -> f64 {
    let mut plus = p.clone();
    plus.as_mut_slice()[i] += h;
    let mut minus = p.clone();
    minus.as_mut_slice()[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor of the per-coordinate relative error.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Largest per-coordinate relative error between `analytic` and central
/// differences of `f`.
pub fn fd_max_rel_err(f: impl Fn(&PolicyParams) -> f64, p: &PolicyParams, analytic: &[f64]) -> f64 {
    (0..p.len()).map(|i| rel_err(analytic[i], central_diff(&f, p, i, FD_STEP))).fold(0.0, f64::max)
}

/// A completion of uniformly random non-eos tokens, with log-probs recorded
/// under `p`.
pub fn random_trajectory(p: &PolicyParams, seed: u64, prompt_len: usize, completion_len: usize) -> Trajectory {
    let mut rng = rng_from(seed);
    let v = p.arch().vocab_size as TokenId;
    let prompt: Vec<TokenId> = (0..prompt_len).map(|_| rng.random_range(0..v)).collect();
    let completion: Vec<TokenId> = (0..completion_len).map(|_| rng.random_range(0..v)).collect();
    let mut traj = Trajectory { prompt, completion, log_probs: vec![0.0; completion_len] };
    traj.log_probs = dash_core::policy::log_prob(p, &traj).unwrap().per_token;
    traj
}

/// `groups` groups of `g` completions sampled from `p`, with rewards from `reward`.
pub fn sampled_batch(
    p: &PolicyParams,
    seed: u64,
    groups: usize,
    g: usize,
    prompt_len: usize,
    max_len: usize,
    reward: impl Fn(&Trajectory) -> f64,
) -> RolloutBatch {
    let mut rng = rng_from(seed);
    let v = p.arch().vocab_size as TokenId;
    let mut items = Vec::with_capacity(groups * g);
    for _ in 0..groups {
        let prompt: Vec<TokenId> = (0..prompt_len).map(|_| rng.random_range(0..v)).collect();
        for _ in 0..g {
            let traj = sample(p, &prompt, max_len, 1.0, 1, rng.random()).unwrap();
            let r = reward(&traj);
            items.push(Rollout { traj, reward: r });
        }
    }
    RolloutBatch::new(items, GroupIndex::uniform(groups, g).unwrap(), p.fingerprint()).unwrap()
}
