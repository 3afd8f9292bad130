//! Forward and reverse-mode passes over the fixed architecture.
//!
//! The forward pass is incremental: [`Forward::push`] appends one position and
//! computes its activations from the cached keys and values of earlier
//! positions. Scoring a trajectory and sampling one run the same per-position
//! code, so log-probs recorded while sampling are bit-identical to log-probs
//! recomputed later from the same parameters.

use rand::Rng;

use super::{Architecture, GradientVector, ParamLayout, PolicyParams, TokenId, Trajectory};
use crate::error::{input, Error, Result};
use crate::rng::rng_from;

const NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone, PartialEq)]
pub struct LogProb {
    /// Sum of `per_token`, in nats.
    pub total: f64,
    pub per_token: Vec<f64>,
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (SQRT_2_OVER_PI * (u + GELU_C * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (SQRT_2_OVER_PI * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * u * u)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = W x` for row-major `W` of shape `[out.len(), x.len()]`.
fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

/// `dx += Wᵀ dy`.
fn matvec_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    for (g, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if *g != 0.0 {
            for (d, wv) in dx.iter_mut().zip(row) {
                *d += g * wv;
            }
        }
    }
}

/// `dW += dy ⊗ x`.
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (g, row) in dy.iter().zip(dw.chunks_exact_mut(cols)) {
        if *g != 0.0 {
            for (d, xv) in row.iter_mut().zip(x) {
                *d += g * xv;
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Writes `g ⊙ x / rms(x)` into `out` and returns `rms(x)`.
fn rmsnorm(x: &[f64], gain: &[f64], out: &mut [f64]) -> f64 {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + NORM_EPS).sqrt();
    for ((o, xv), g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * xv / rms;
    }
    rms
}

fn rmsnorm_backward(x: &[f64], gain: &[f64], rms: f64, dy: &[f64], dx: &mut [f64], dgain: &mut [f64]) {
    let d = x.len() as f64;
    let mut proj = 0.0;
    for i in 0..x.len() {
        let xhat = x[i] / rms;
        dgain[i] += dy[i] * xhat;
        proj += dy[i] * gain[i] * xhat;
    }
    proj /= d;
    for i in 0..x.len() {
        dx[i] += (dy[i] * gain[i] - x[i] / rms * proj) / rms;
    }
}

#[derive(Default)]
struct LayerActs {
    x_in: Vec<f64>,
    a: Vec<f64>,
    a_rms: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per position `t`: `n_heads` rows of `t + 1` attention weights.
    probs: Vec<Vec<f64>>,
    o: Vec<f64>,
    x_mid: Vec<f64>,
    b: Vec<f64>,
    b_rms: Vec<f64>,
    u: Vec<f64>,
    h: Vec<f64>,
}

/// Cached activations of a causal forward pass.
pub(crate) struct Forward<'a> {
    arch: Architecture,
    p: &'a [f64],
    layout: ParamLayout,
    tokens: Vec<TokenId>,
    layers: Vec<LayerActs>,
    x_final: Vec<f64>,
    c: Vec<f64>,
    c_rms: Vec<f64>,
    logits: Vec<f64>,
}

impl<'a> Forward<'a> {
    pub(crate) fn new(params: &'a PolicyParams) -> Self {
        let arch = *params.arch();
        Self {
            arch,
            p: params.as_slice(),
            layout: arch.layout(),
            tokens: Vec::new(),
            layers: (0..arch.n_layers).map(|_| LayerActs::default()).collect(),
            x_final: Vec::new(),
            c: Vec::new(),
            c_rms: Vec::new(),
            logits: Vec::new(),
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.tokens.len()
    }

    pub(crate) fn logits_at(&self, t: usize) -> &[f64] {
        let v = self.arch.vocab_size;
        &self.logits[t * v..(t + 1) * v]
    }

    pub(crate) fn last_logits(&self) -> &[f64] {
        self.logits_at(self.len() - 1)
    }

    /// Appends one token and computes its position's activations.
    pub(crate) fn push(&mut self, token: TokenId) {
        let Architecture { vocab_size: nv, embed_dim: d, n_heads, ff_dim: f, .. } = self.arch;
        let t = self.tokens.len();
        debug_assert!(t < self.arch.context && (token as usize) < nv);
        let hd = self.arch.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let p = self.p;
        let lay = &self.layout;

        let tok = token as usize;
        let mut x: Vec<f64> = p[lay.tok_emb + tok * d..lay.tok_emb + (tok + 1) * d]
            .iter()
            .zip(&p[lay.pos_emb + t * d..lay.pos_emb + (t + 1) * d])
            .map(|(a, b)| a + b)
            .collect();

        let mut a = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut o = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let mut u = vec![0.0; f];
        for (acts, off) in self.layers.iter_mut().zip(&lay.layers) {
            acts.x_in.extend_from_slice(&x);
            let r = rmsnorm(&x, &p[off.attn_norm..off.attn_norm + d], &mut a);
            acts.a.extend_from_slice(&a);
            acts.a_rms.push(r);
            matvec(&p[off.wq..off.wq + d * d], &a, &mut q);
            matvec(&p[off.wk..off.wk + d * d], &a, &mut k);
            matvec(&p[off.wv..off.wv + d * d], &a, &mut v);
            acts.q.extend_from_slice(&q);
            acts.k.extend_from_slice(&k);
            acts.v.extend_from_slice(&v);

            let mut probs = vec![0.0; n_heads * (t + 1)];
            o.fill(0.0);
            for h in 0..n_heads {
                let hs = h * hd..(h + 1) * hd;
                let row = &mut probs[h * (t + 1)..(h + 1) * (t + 1)];
                for (s, score) in row.iter_mut().enumerate() {
                    *score = dot(&q[hs.clone()], &acts.k[s * d + hs.start..s * d + hs.end]) * scale;
                }
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for w in row.iter_mut() {
                    *w = (*w - m).exp();
                    z += *w;
                }
                for (s, w) in row.iter_mut().enumerate() {
                    *w /= z;
                    let vs = &acts.v[s * d + hs.start..s * d + hs.end];
                    for (oi, vi) in o[hs.clone()].iter_mut().zip(vs) {
                        *oi += *w * vi;
                    }
                }
            }
            acts.probs.push(probs);
            acts.o.extend_from_slice(&o);
            matvec(&p[off.wo..off.wo + d * d], &o, &mut tmp);
            add_assign(&mut x, &tmp);
            acts.x_mid.extend_from_slice(&x);

            let r = rmsnorm(&x, &p[off.ff_norm..off.ff_norm + d], &mut a);
            acts.b.extend_from_slice(&a);
            acts.b_rms.push(r);
            matvec(&p[off.w1..off.w1 + f * d], &a, &mut u);
            add_assign(&mut u, &p[off.b1..off.b1 + f]);
            acts.u.extend_from_slice(&u);
            u.iter_mut().for_each(|x| *x = gelu(*x));
            acts.h.extend_from_slice(&u);
            matvec(&p[off.w2..off.w2 + d * f], &u, &mut tmp);
            add_assign(&mut x, &tmp);
            add_assign(&mut x, &p[off.b2..off.b2 + d]);
        }

        self.x_final.extend_from_slice(&x);
        let r = rmsnorm(&x, &p[lay.final_norm..lay.final_norm + d], &mut a);
        self.c.extend_from_slice(&a);
        self.c_rms.push(r);
        let mut logits = vec![0.0; nv];
        matvec(&p[lay.w_out..lay.w_out + nv * d], &a, &mut logits);
        add_assign(&mut logits, &p[lay.b_out..lay.b_out + nv]);
        self.logits.extend_from_slice(&logits);
        self.tokens.push(token);
    }

    /// Accumulates into `grad` the gradient of `Σ_t dlogits[t] · logits[t]`.
    pub(crate) fn backward(&self, dlogits: &[f64], grad: &mut [f64]) {
        let Architecture { vocab_size: nv, embed_dim: d, n_heads, ff_dim: f, .. } = self.arch;
        let hd = self.arch.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let n = self.len();
        let p = self.p;
        let lay = &self.layout;
        debug_assert_eq!(dlogits.len(), n * nv);

        let mut dx = vec![0.0; n * d];
        let mut dvec = vec![0.0; d];
        for t in 0..n {
            let dl = &dlogits[t * nv..(t + 1) * nv];
            if dl.iter().all(|&g| g == 0.0) {
                continue;
            }
            let ct = &self.c[t * d..(t + 1) * d];
            outer_acc(&mut grad[lay.w_out..lay.w_out + nv * d], dl, ct);
            add_assign(&mut grad[lay.b_out..lay.b_out + nv], dl);
            dvec.fill(0.0);
            matvec_t_acc(&p[lay.w_out..lay.w_out + nv * d], dl, &mut dvec);
            rmsnorm_backward(
                &self.x_final[t * d..(t + 1) * d],
                &p[lay.final_norm..lay.final_norm + d],
                self.c_rms[t],
                &dvec,
                &mut dx[t * d..(t + 1) * d],
                &mut grad[lay.final_norm..lay.final_norm + d],
            );
        }

        let mut dh = vec![0.0; f];
        let mut dout = vec![0.0; d];
        for (acts, off) in self.layers.iter().zip(&lay.layers).rev() {
            // feedforward: x_out = x_mid + W2 gelu(W1 norm(x_mid) + b1) + b2
            let mut dmid = dx.clone();
            for t in 0..n {
                let dy = &dx[t * d..(t + 1) * d];
                add_assign(&mut grad[off.b2..off.b2 + d], dy);
                outer_acc(&mut grad[off.w2..off.w2 + d * f], dy, &acts.h[t * f..(t + 1) * f]);
                dh.fill(0.0);
                matvec_t_acc(&p[off.w2..off.w2 + d * f], dy, &mut dh);
                for (g, u) in dh.iter_mut().zip(&acts.u[t * f..(t + 1) * f]) {
                    *g *= gelu_grad(*u);
                }
                add_assign(&mut grad[off.b1..off.b1 + f], &dh);
                outer_acc(&mut grad[off.w1..off.w1 + f * d], &dh, &acts.b[t * d..(t + 1) * d]);
                dvec.fill(0.0);
                matvec_t_acc(&p[off.w1..off.w1 + f * d], &dh, &mut dvec);
                rmsnorm_backward(
                    &acts.x_mid[t * d..(t + 1) * d],
                    &p[off.ff_norm..off.ff_norm + d],
                    acts.b_rms[t],
                    &dvec,
                    &mut dmid[t * d..(t + 1) * d],
                    &mut grad[off.ff_norm..off.ff_norm + d],
                );
            }

            // attention: x_mid = x_in + Wo attn(norm(x_in))
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            for t in 0..n {
                let dy = &dmid[t * d..(t + 1) * d];
                outer_acc(&mut grad[off.wo..off.wo + d * d], dy, &acts.o[t * d..(t + 1) * d]);
                dout.fill(0.0);
                matvec_t_acc(&p[off.wo..off.wo + d * d], dy, &mut dout);
                let probs = &acts.probs[t];
                for h in 0..n_heads {
                    let (h0, h1) = (h * hd, (h + 1) * hd);
                    let row = &probs[h * (t + 1)..(h + 1) * (t + 1)];
                    let dp: Vec<f64> = (0..=t).map(|s| dot(&dout[h0..h1], &acts.v[s * d + h0..s * d + h1])).collect();
                    let mean = dot(row, &dp);
                    for s in 0..=t {
                        let w = row[s];
                        for i in h0..h1 {
                            dv[s * d + i] += w * dout[i];
                        }
                        let ds = w * (dp[s] - mean) * scale;
                        if ds != 0.0 {
                            for i in h0..h1 {
                                dq[t * d + i] += ds * acts.k[s * d + i];
                                dk[s * d + i] += ds * acts.q[t * d + i];
                            }
                        }
                    }
                }
            }
            let mut din = dmid.clone();
            for t in 0..n {
                let at = &acts.a[t * d..(t + 1) * d];
                let (dqt, dkt, dvt) = (&dq[t * d..(t + 1) * d], &dk[t * d..(t + 1) * d], &dv[t * d..(t + 1) * d]);
                outer_acc(&mut grad[off.wq..off.wq + d * d], dqt, at);
                outer_acc(&mut grad[off.wk..off.wk + d * d], dkt, at);
                outer_acc(&mut grad[off.wv..off.wv + d * d], dvt, at);
                dvec.fill(0.0);
                matvec_t_acc(&p[off.wq..off.wq + d * d], dqt, &mut dvec);
                matvec_t_acc(&p[off.wk..off.wk + d * d], dkt, &mut dvec);
                matvec_t_acc(&p[off.wv..off.wv + d * d], dvt, &mut dvec);
                rmsnorm_backward(
                    &acts.x_in[t * d..(t + 1) * d],
                    &p[off.attn_norm..off.attn_norm + d],
                    acts.a_rms[t],
                    &dvec,
                    &mut din[t * d..(t + 1) * d],
                    &mut grad[off.attn_norm..off.attn_norm + d],
                );
            }
            dx = din;
        }

        for (t, &tok) in self.tokens.iter().enumerate() {
            let tok = tok as usize;
            let dxt = &dx[t * d..(t + 1) * d];
            add_assign(&mut grad[lay.tok_emb + tok * d..lay.tok_emb + (tok + 1) * d], dxt);
            add_assign(&mut grad[lay.pos_emb + t * d..lay.pos_emb + (t + 1) * d], dxt);
        }
    }
}

fn check_tokens(arch: &Architecture, tokens: &[TokenId], what: &str) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= arch.vocab_size) {
        Some(t) => input(format!("{what} token {t} is outside a vocab of {}", arch.vocab_size)),
        None => Ok(()),
    }
}

/// Positions fed to the model to score `completion_len` tokens after `prompt_len`.
fn inputs_needed(prompt_len: usize, completion_len: usize) -> usize {
    prompt_len + completion_len.saturating_sub(1)
}

fn check_fits(arch: &Architecture, prompt_len: usize, completion_len: usize) -> Result<()> {
    if prompt_len == 0 {
        return input("prompt must contain at least the <bos> token");
    }
    let needed = inputs_needed(prompt_len, completion_len);
    if needed > arch.context {
        return Err(Error::Capacity(format!(
            "{needed} positions needed (prompt {prompt_len}, completion {completion_len}), context is {}",
            arch.context
        )));
    }
    Ok(())
}

/// Forward pass over a trajectory plus its log-likelihood.
pub(crate) struct TrajectoryPass<'a> {
    fwd: Forward<'a>,
    traj: &'a Trajectory,
    pub log_prob: LogProb,
}

impl<'a> TrajectoryPass<'a> {
    pub(crate) fn new(params: &'a PolicyParams, traj: &'a Trajectory) -> Result<Self> {
        let arch = params.arch();
        check_tokens(arch, &traj.prompt, "prompt")?;
        check_tokens(arch, &traj.completion, "completion")?;
        check_fits(arch, traj.prompt.len(), traj.completion.len())?;
        let mut fwd = Forward::new(params);
        let n = inputs_needed(traj.prompt.len(), traj.completion.len());
        for &tok in traj.prompt.iter().chain(&traj.completion).take(n) {
            fwd.push(tok);
        }
        let per_token: Vec<f64> = traj
            .completion
            .iter()
            .enumerate()
            .map(|(j, &y)| log_softmax(fwd.logits_at(traj.prompt.len() - 1 + j))[y as usize])
            .collect();
        let total = per_token.iter().sum();
        Ok(Self { fwd, traj, log_prob: LogProb { total, per_token } })
    }

    fn completion_positions(&self) -> impl Iterator<Item = (usize, TokenId)> + '_ {
        let p0 = self.traj.prompt.len() - 1;
        self.traj.completion.iter().enumerate().map(move |(j, &y)| (p0 + j, y))
    }

    /// `grad += scale · ∇ log π(completion | prompt)`.
    pub(crate) fn backward(&self, scale: f64, grad: &mut [f64]) {
        if self.traj.completion.is_empty() || scale == 0.0 {
            return;
        }
        let nv = self.fwd.arch.vocab_size;
        let mut dlogits = vec![0.0; self.fwd.len() * nv];
        for (pos, y) in self.completion_positions() {
            let probs = softmax(self.fwd.logits_at(pos));
            let row = &mut dlogits[pos * nv..(pos + 1) * nv];
            for (g, pr) in row.iter_mut().zip(&probs) {
                *g = -scale * pr;
            }
            row[y as usize] += scale;
        }
        self.fwd.backward(&dlogits, grad);
    }
}

pub(crate) fn model_pass<'a>(params: &'a PolicyParams, traj: &'a Trajectory) -> Result<TrajectoryPass<'a>> {
    TrajectoryPass::new(params, traj)
}

pub fn log_prob(params: &PolicyParams, traj: &Trajectory) -> Result<LogProb> {
    Ok(TrajectoryPass::new(params, traj)?.log_prob)
}

pub fn grad_log_prob(params: &PolicyParams, traj: &Trajectory) -> Result<GradientVector> {
    Ok(log_prob_with_grad(params, traj)?.1)
}

pub fn log_prob_with_grad(params: &PolicyParams, traj: &Trajectory) -> Result<(LogProb, GradientVector)> {
    let mut grad = GradientVector::zeros_like(params);
    let pass = TrajectoryPass::new(params, traj)?;
    pass.backward(1.0, grad.as_mut_slice());
    Ok((pass.log_prob, grad))
}

pub(crate) fn accumulate_grad_log_prob(
    params: &PolicyParams,
    traj: &Trajectory,
    scale: f64,
    grad: &mut [f64],
) -> Result<LogProb> {
    let pass = TrajectoryPass::new(params, traj)?;
    pass.backward(scale, grad);
    Ok(pass.log_prob)
}

/// Per-token KL(π_base ‖ π_θ) over the trajectory's completion contexts,
/// summed. Adds `scale · ∇_θ KL` into `grad` and returns the KL value.
pub(crate) fn accumulate_kl(
    params: &PolicyParams,
    base: &PolicyParams,
    traj: &Trajectory,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    base.check_same_arch(params.arch())?;
    let pass = TrajectoryPass::new(params, traj)?;
    let base_pass = TrajectoryPass::new(base, traj)?;
    let nv = params.arch().vocab_size;
    let mut dlogits = vec![0.0; pass.fwd.len() * nv];
    let mut kl = 0.0;
    for (pos, _) in pass.completion_positions() {
        let lp = log_softmax(pass.fwd.logits_at(pos));
        let lb = log_softmax(base_pass.fwd.logits_at(pos));
        let row = &mut dlogits[pos * nv..(pos + 1) * nv];
        for i in 0..nv {
            let pb = lb[i].exp();
            if pb > 0.0 {
                kl += pb * (lb[i] - lp[i]);
            }
            row[i] = scale * (lp[i].exp() - pb);
        }
    }
    if scale != 0.0 && !traj.completion.is_empty() {
        pass.fwd.backward(&dlogits, grad);
    }
    Ok(kl)
}

pub fn kl_term(params: &PolicyParams, base: &PolicyParams, traj: &Trajectory) -> Result<(f64, GradientVector)> {
    let mut grad = GradientVector::zeros_like(params);
    let kl = accumulate_kl(params, base, traj, 1.0, grad.as_mut_slice())?;
    Ok((kl, grad))
}

/// Logits for the token following `context`.
pub fn next_token_logits(params: &PolicyParams, context: &[TokenId]) -> Result<Vec<f64>> {
    let arch = params.arch();
    check_tokens(arch, context, "context")?;
    check_fits(arch, context.len(), 1)?;
    let mut fwd = Forward::new(params);
    context.iter().for_each(|&t| fwd.push(t));
    Ok(fwd.last_logits().to_vec())
}

fn decode(
    params: &PolicyParams,
    prompt: &[TokenId],
    max_len: usize,
    eos: TokenId,
    mut choose: impl FnMut(&[f64]) -> TokenId,
) -> Result<Trajectory> {
    let arch = params.arch();
    check_tokens(arch, prompt, "prompt")?;
    check_tokens(arch, &[eos], "eos")?;
    check_fits(arch, prompt.len(), max_len)?;
    let mut fwd = Forward::new(params);
    prompt.iter().for_each(|&t| fwd.push(t));
    let mut completion = Vec::new();
    let mut log_probs = Vec::new();
    for step in 0..max_len {
        let logits = fwd.last_logits();
        let tok = choose(logits);
        log_probs.push(log_softmax(logits)[tok as usize]);
        completion.push(tok);
        if tok == eos {
            break;
        }
        if step + 1 < max_len {
            fwd.push(tok);
        }
    }
    Ok(Trajectory { prompt: prompt.to_vec(), completion, log_probs })
}

/// Samples a completion from `softmax(logits / temperature)`, stopping at
/// `eos` or after `max_len` tokens. Recorded log-probs are at temperature 1.
pub fn sample(
    params: &PolicyParams,
    prompt: &[TokenId],
    max_len: usize,
    temperature: f64,
    eos: TokenId,
    seed: u64,
) -> Result<Trajectory> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return input(format!("temperature must be positive, got {temperature}"));
    }
    let mut rng = rng_from(seed);
    decode(params, prompt, max_len, eos, |logits| {
        let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
        let probs = softmax(&scaled);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > 0.0 {
                last = i;
                acc += p;
                if u < acc {
                    return i as TokenId;
                }
            }
        }
        last as TokenId
    })
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy(params: &PolicyParams, prompt: &[TokenId], max_len: usize, eos: TokenId) -> Result<Trajectory> {
    decode(params, prompt, max_len, eos, |logits| {
        let mut best = 0;
        for (i, z) in logits.iter().enumerate() {
            if *z > logits[best] {
                best = i;
            }
        }
        best as TokenId
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Architecture;

    fn arch(vocab: usize) -> Architecture {
        Architecture { vocab_size: vocab, embed_dim: 4, n_heads: 2, ff_dim: 6, context: 10, n_layers: 1 }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[1000.0, -1000.0, 3.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|x| x.is_finite()));
        let lp = log_softmax(&[1e300, 0.0]);
        assert_eq!(lp[0], 0.0);
    }

    #[test]
    fn uniform_policy_log_prob() {
        let params = PolicyParams::zeros(arch(4)).unwrap();
        let traj = Trajectory { prompt: vec![0], completion: vec![1, 2, 3], log_probs: vec![0.0; 3] };
        let lp = log_prob(&params, &traj).unwrap();
        assert!((lp.total + 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((lp.total - -4.1589).abs() < 1e-4);
    }

    #[test]
    fn empty_completion() {
        let params = PolicyParams::random(arch(5), 1, 0.5).unwrap();
        let traj = Trajectory { prompt: vec![0, 3], completion: vec![], log_probs: vec![] };
        let lp = log_prob(&params, &traj).unwrap();
        assert_eq!(lp.total, 0.0);
        assert!(lp.per_token.is_empty());
        assert!(grad_log_prob(&params, &traj).unwrap().is_zero());
    }

    #[test]
    fn errors() {
        let params = PolicyParams::random(arch(5), 1, 0.5).unwrap();
        let bad_tok = Trajectory { prompt: vec![0], completion: vec![7], log_probs: vec![-1.0] };
        assert!(matches!(log_prob(&params, &bad_tok), Err(Error::Input(_))));
        let long = Trajectory { prompt: vec![0; 5], completion: vec![1; 7], log_probs: vec![-1.0; 7] };
        assert!(matches!(log_prob(&params, &long), Err(Error::Capacity(_))));
        assert!(matches!(sample(&params, &[0], 3, 0.0, 1, 0), Err(Error::Input(_))));
        assert!(matches!(sample(&params, &[0], 3, -1.0, 1, 0), Err(Error::Input(_))));
        assert!(matches!(sample(&params, &[0; 4], 8, 1.0, 1, 0), Err(Error::Capacity(_))));
        let other = PolicyParams::zeros(arch(6)).unwrap();
        let t = Trajectory { prompt: vec![0], completion: vec![1], log_probs: vec![-1.0] };
        assert!(matches!(kl_term(&params, &other, &t), Err(Error::Input(_))));
    }

    #[test]
    fn forced_token_is_repeated_until_max_len() {
        let mut params = PolicyParams::zeros(arch(5)).unwrap();
        params.tensor_mut("b_out").unwrap()[3] = 1e3;
        let traj = sample(&params, &[0], 7, 1.0, 1, 42).unwrap();
        assert_eq!(traj.completion, vec![3; 7]);
        assert!(traj.log_probs.iter().all(|&lp| lp == 0.0));
    }

    #[test]
    fn sampling_is_seeded() {
        let params = PolicyParams::random(arch(5), 2, 0.7).unwrap();
        let a = sample(&params, &[0, 2], 6, 1.0, 1, 9).unwrap();
        let b = sample(&params, &[0, 2], 6, 1.0, 1, 9).unwrap();
        assert_eq!(a, b);
        let differs = (10..30).any(|s| sample(&params, &[0, 2], 6, 1.0, 1, s).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn recorded_log_probs_replay_bit_exact() {
        let params = PolicyParams::random(arch(6), 5, 0.8).unwrap();
        for seed in 0..50 {
            let traj = sample(&params, &[0, 4, 2], 7, 1.0, 1, seed).unwrap();
            let lp = log_prob(&params, &traj).unwrap();
            assert_eq!(lp.per_token, traj.log_probs);
        }
    }

    #[test]
    fn kl_is_zero_at_base_and_nonnegative() {
        let params = PolicyParams::random(arch(6), 5, 0.8).unwrap();
        let traj = sample(&params, &[0, 4], 6, 1.0, 1, 3).unwrap();
        let (kl, grad) = kl_term(&params, &params, &traj).unwrap();
        assert_eq!(kl, 0.0);
        assert!(grad.is_zero());
        let other = PolicyParams::random(arch(6), 6, 0.8).unwrap();
        let (kl, _) = kl_term(&other, &params, &traj).unwrap();
        assert!(kl > 0.0);
    }

    #[test]
    fn greedy_prefers_lowest_id_on_ties() {
        let params = PolicyParams::zeros(arch(5)).unwrap();
        let traj = greedy(&params, &[0], 3, 1).unwrap();
        assert_eq!(traj.completion, vec![0, 0, 0]);
    }
}
