//! Tiny autoregressive categorical policy.
//!
//! The policy is a pre-norm causal transformer (RMSNorm, multi-head
//! attention, GELU feedforward) small enough that every gradient can be
//! checked against finite differences. Parameters live in one flat `f64`
//! buffer; [`ParamLayout`] names the tensors inside it.

mod checkpoint;
mod model;

use std::collections::HashMap;
use std::fmt;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::rng::rng_from;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub(crate) use model::{accumulate_grad_log_prob, accumulate_kl, model_pass};
pub use model::{
    grad_log_prob, greedy, kl_term, log_prob, log_prob_with_grad, log_softmax, next_token_logits, sample, softmax,
    LogProb,
};

pub type TokenId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const DELIM: &str = "#";

/// Token alphabet with the three special tokens every task needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    bos: TokenId,
    eos: TokenId,
    delim: TokenId,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 {
            return input(format!("vocab needs at least 3 tokens, got {}", tokens.len()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return input(format!("duplicate token {t:?}"));
            }
        }
        let find = |name: &str| {
            index.get(name).copied().ok_or_else(|| Error::Input(format!("vocab is missing special token {name:?}")))
        };
        let (bos, eos, delim) = (find(BOS)?, find(EOS)?, find(DELIM)?);
        Ok(Self { tokens, index, bos, eos, delim })
    }

    /// `<bos>`, `<eos>`, `#`, then one token per char of `symbols`.
    pub fn with_symbols(symbols: &str) -> Result<Self> {
        let mut tokens = vec![BOS.to_string(), EOS.to_string(), DELIM.to_string()];
        tokens.extend(symbols.chars().map(String::from));
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn delim(&self) -> TokenId {
        self.delim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Encodes text one char per token.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut buf = [0u8; 4];
        text.chars()
            .map(|c| {
                self.id(c.encode_utf8(&mut buf))
                    .ok_or_else(|| Error::Input(format!("symbol {c:?} is not in the vocab")))
            })
            .collect()
    }

    /// Concatenates token strings; `<eos>` is dropped, unknown ids render as `?`.
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter().filter(|&&id| id != self.eos).map(|&id| self.token(id).unwrap_or("?")).collect()
    }
}

/// Shape descriptor shared by every parameter buffer of one policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub context: usize,
    pub n_layers: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let Architecture { vocab_size, embed_dim, n_heads, ff_dim, context, n_layers } = *self;
        if vocab_size < 3 || embed_dim == 0 || n_heads == 0 || ff_dim == 0 || context < 2 {
            return input(format!("degenerate architecture {self:?}"));
        }
        if embed_dim % n_heads != 0 {
            return input(format!("embed_dim {embed_dim} is not divisible by n_heads {n_heads}"));
        }
        if n_layers == 0 {
            return input("architecture needs at least one layer");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }

    pub fn num_params(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ff_norm: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Named tensors inside the flat parameter buffer, in storage order.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    total: usize,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) final_norm: usize,
    pub(crate) w_out: usize,
    pub(crate) b_out: usize,
}

impl ParamLayout {
    fn new(arch: &Architecture) -> Self {
        let (v, d, f, c) = (arch.vocab_size, arch.embed_dim, arch.ff_dim, arch.context);
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorSpec { name, shape, offset });
            offset
        };
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![c, d]);
        let layers = (0..arch.n_layers)
            .map(|l| LayerOffsets {
                attn_norm: push(format!("layers.{l}.attn_norm"), vec![d]),
                wq: push(format!("layers.{l}.wq"), vec![d, d]),
                wk: push(format!("layers.{l}.wk"), vec![d, d]),
                wv: push(format!("layers.{l}.wv"), vec![d, d]),
                wo: push(format!("layers.{l}.wo"), vec![d, d]),
                ff_norm: push(format!("layers.{l}.ff_norm"), vec![d]),
                w1: push(format!("layers.{l}.w1"), vec![f, d]),
                b1: push(format!("layers.{l}.b1"), vec![f]),
                w2: push(format!("layers.{l}.w2"), vec![d, f]),
                b2: push(format!("layers.{l}.b2"), vec![d]),
            })
            .collect();
        let final_norm = push("final_norm".into(), vec![d]);
        let w_out = push("w_out".into(), vec![v, d]);
        let b_out = push("b_out".into(), vec![v]);
        Self { tensors, total, tok_emb, pos_emb, layers, final_norm, w_out, b_out }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn is_norm_gain(name: &str) -> bool {
        name.ends_with("norm")
    }

    fn is_bias(name: &str) -> bool {
        name.starts_with("b_") || name.ends_with(".b1") || name.ends_with(".b2")
    }
}

/// Policy parameters θ. Snapshots (θ_old) and the frozen base (θ_base) are
/// plain clones; [`PolicyParams::fingerprint`] identifies a snapshot.
#[derive(Clone, PartialEq)]
pub struct PolicyParams {
    arch: Architecture,
    data: Vec<f64>,
}

impl fmt::Debug for PolicyParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PolicyParams")
            .field("arch", &self.arch)
            .field("num_params", &self.data.len())
            .field("fingerprint", &format_args!("{:016x}", self.fingerprint()))
            .finish()
    }
}

impl PolicyParams {
    /// All-zero parameters: every logit is zero, so the policy is uniform.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self { data: vec![0.0; arch.num_params()], arch })
    }

    /// Training initialization: unit norm gains, zero biases, embeddings and
    /// the output projection drawn with `init_std`, hidden weights scaled by
    /// fan-in. Output logits start close to uniform.
    pub fn init(arch: Architecture, seed: u64, init_std: f64) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        let mut rng = rng_from(seed);
        let layout = arch.layout();
        for spec in layout.tensors() {
            let slice = &mut params.data[spec.range()];
            if ParamLayout::is_norm_gain(&spec.name) {
                slice.fill(1.0);
            } else if ParamLayout::is_bias(&spec.name) {
                continue;
            } else {
                let std = match spec.name.as_str() {
                    "tok_emb" | "pos_emb" | "w_out" => init_std,
                    _ => 1.0 / (spec.shape[1] as f64).sqrt(),
                };
                for x in slice.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x = z * std;
                }
            }
        }
        Ok(params)
    }

    /// Every coordinate perturbed (gains around 1, everything else around 0)
    /// with standard deviation `scale`. Used for gradient checks, where no
    /// coordinate should sit at a special value.
    pub fn random(arch: Architecture, seed: u64, scale: f64) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        let mut rng = rng_from(seed);
        for spec in arch.layout().tensors() {
            let base = if ParamLayout::is_norm_gain(&spec.name) { 1.0 } else { 0.0 };
            for x in &mut params.data[spec.range()] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = base + scale * z;
            }
        }
        Ok(params)
    }

    pub fn from_vec(arch: Architecture, data: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if data.len() != arch.num_params() {
            return input(format!("expected {} parameters for {arch:?}, got {}", arch.num_params(), data.len()));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return input(format!("parameter {i} is not finite"));
        }
        Ok(Self { arch, data })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let spec = self.arch.layout().get(name)?.clone();
        Some(&self.data[spec.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let spec = self.arch.layout().get(name)?.clone();
        Some(&mut self.data[spec.range()])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Content hash over the architecture and the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let a = &self.arch;
        let header = [a.vocab_size, a.embed_dim, a.n_heads, a.ff_dim, a.context, a.n_layers];
        let words = header.iter().map(|&x| x as u64).chain(self.data.iter().map(|x| x.to_bits()));
        crate::rng::derive_seed(0x5eed, &words.collect::<Vec<_>>())
    }

    pub(crate) fn check_same_arch(&self, other: &Architecture) -> Result<()> {
        if &self.arch != other {
            return input(format!("architecture mismatch: {:?} vs {other:?}", self.arch));
        }
        Ok(())
    }
}

/// Gradient with the same layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    arch: Architecture,
    data: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(arch: Architecture) -> Self {
        Self { data: vec![0.0; arch.num_params()], arch }
    }

    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self::zeros(params.arch)
    }

    pub fn from_vec(arch: Architecture, data: Vec<f64>) -> Result<Self> {
        if data.len() != arch.num_params() {
            return input(format!("gradient has {} entries, expected {}", data.len(), arch.num_params()));
        }
        Ok(Self { arch, data })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let spec = self.arch.layout().get(name)?.clone();
        Some(&self.data[spec.range()])
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &GradientVector) {
        assert_eq!(self.arch, other.arch, "gradient architecture mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest coordinate-wise difference relative to `max(1, max |other|)`.
    pub fn max_rel_diff(&self, other: &GradientVector) -> f64 {
        let scale = other.data.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
    }
}

/// A prompt and a sampled (or expert) completion.
///
/// `completion` includes the terminating `<eos>` when one was produced.
/// `log_probs[t]` is log π(completion[t] | prompt, completion[..t]) under
/// the generating snapshot at temperature 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Vec<TokenId>,
    pub completion: Vec<TokenId>,
    pub log_probs: Vec<f64>,
}

impl Trajectory {
    pub fn new(prompt: Vec<TokenId>, completion: Vec<TokenId>, log_probs: Vec<f64>) -> Result<Self> {
        let t = Self { prompt, completion, log_probs };
        t.validate(usize::MAX)?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.completion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completion.is_empty()
    }

    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        if self.log_probs.len() != self.completion.len() {
            return input(format!(
                "{} log-probs for a completion of length {}",
                self.log_probs.len(),
                self.completion.len()
            ));
        }
        if self.completion.len() > max_len {
            return input(format!("completion length {} exceeds {max_len}", self.completion.len()));
        }
        if let Some(lp) = self.log_probs.iter().find(|lp| !(**lp <= 0.0)) {
            return input(format!("log-prob {lp} is not a log-probability"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_arch() -> Architecture {
        Architecture { vocab_size: 6, embed_dim: 4, n_heads: 2, ff_dim: 6, context: 8, n_layers: 1 }
    }

    #[test]
    fn layout_is_contiguous_and_named() {
        let arch = tiny_arch();
        let layout = arch.layout();
        let mut next = 0;
        for t in layout.tensors() {
            assert_eq!(t.offset, next, "{}", t.name);
            next += t.len();
        }
        assert_eq!(next, layout.total());
        assert!(layout.get("layers.0.wq").is_some());
        assert!(arch.num_params() <= 500);
    }

    #[test]
    fn vocab_rejects_duplicates_and_missing_specials() {
        assert!(Vocab::with_symbols("ab").is_ok());
        assert!(Vocab::with_symbols("aa").is_err());
        assert!(Vocab::new(vec!["a".into(), "b".into(), "c".into()]).is_err());
        assert!(Vocab::new(vec![BOS.into(), EOS.into()]).is_err());
    }

    #[test]
    fn vocab_encode_render() {
        let v = Vocab::with_symbols("0123456789+=").unwrap();
        let ids = v.encode("47+35=").unwrap();
        assert_eq!(v.render(&ids), "47+35=");
        assert!(v.encode("x").is_err());
        let mut with_eos = v.encode("#82").unwrap();
        with_eos.push(v.eos());
        assert_eq!(v.render(&with_eos), "#82");
    }

    #[test]
    fn init_is_finite_and_seeded() {
        let a = PolicyParams::init(tiny_arch(), 3, 0.02).unwrap();
        let b = PolicyParams::init(tiny_arch(), 3, 0.02).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert_eq!(a.tensor("final_norm").unwrap(), &[1.0; 4]);
        assert_ne!(a.fingerprint(), PolicyParams::init(tiny_arch(), 4, 0.02).unwrap().fingerprint());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let arch = tiny_arch();
        let mut data = vec![0.0; arch.num_params()];
        data[3] = f64::NAN;
        assert!(PolicyParams::from_vec(arch, data).is_err());
        assert!(PolicyParams::from_vec(arch, vec![0.0; 2]).is_err());
    }

    #[test]
    fn trajectory_validation() {
        assert!(Trajectory::new(vec![0], vec![1, 2], vec![-0.1, -0.2]).is_ok());
        assert!(Trajectory::new(vec![0], vec![1, 2], vec![-0.1]).is_err());
        assert!(Trajectory::new(vec![0], vec![1], vec![0.5]).is_err());
        assert!(Trajectory::new(vec![0], vec![1], vec![f64::NAN]).is_err());
    }
}
