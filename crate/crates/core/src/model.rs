//! Tiny decoder-only language model and scalar reward head.
//!
//! Pre-norm transformer: learned token and position embeddings, `n_layers`
//! blocks of causal multi-head attention and a ReLU MLP of width
//! `4 * d_model`, a final layer norm and an untied output projection.
//!
//! A sequence `(prompt, response)` is fed as `[BOS] ++ prompt ++ response`
//! without the final EOS, so row `len(prompt) + t` of the logits predicts
//! response token `t` and the model needs `len(prompt) + len(response)`
//! positions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_row, softmax_row, Graph, NodeId, ParamMap};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;

const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e9;
const INIT_STD: f64 = 0.02;

pub const REWARD_WEIGHT: &str = "reward_head.weight";
pub const REWARD_BIAS: &str = "reward_head.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { vocab_size: 32, d_model: 32, n_layers: 2, n_heads: 2, max_seq_len: 24 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.max_seq_len];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("model dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig(String::from("vocabulary must hold BOS and EOS")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every trunk parameter with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v, h) = (self.d_model, self.vocab_size, self.head_dim());
        let mut out = vec![
            (String::from("tok_emb"), vec![v, d]),
            (String::from("pos_emb"), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            out.push((format!("layers.{l}.ln1.gain"), vec![1, d]));
            out.push((format!("layers.{l}.ln1.bias"), vec![1, d]));
            for hd in 0..self.n_heads {
                for w in ["q", "k", "v"] {
                    out.push((format!("layers.{l}.attn.{w}.{hd}"), vec![d, h]));
                }
            }
            out.push((format!("layers.{l}.attn.out"), vec![d, d]));
            out.push((format!("layers.{l}.ln2.gain"), vec![1, d]));
            out.push((format!("layers.{l}.ln2.bias"), vec![1, d]));
            out.push((format!("layers.{l}.mlp.w1"), vec![d, 4 * d]));
            out.push((format!("layers.{l}.mlp.b1"), vec![1, 4 * d]));
            out.push((format!("layers.{l}.mlp.w2"), vec![4 * d, d]));
            out.push((format!("layers.{l}.mlp.b2"), vec![1, d]));
        }
        out.push((String::from("ln_f.gain"), vec![1, d]));
        out.push((String::from("ln_f.bias"), vec![1, d]));
        out.push((String::from("lm_head"), vec![d, v]));
        out
    }

    /// Recovers the configuration from trunk parameter shapes.
    pub fn infer(params: &ParamMap) -> Result<Self> {
        let shape = |name: &str| {
            params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
        };
        let tok = shape("tok_emb")?;
        let pos = shape("pos_emb")?;
        if tok.len() != 2 || pos.len() != 2 {
            return Err(Error::Checkpoint(String::from("embeddings must be rank 2")));
        }
        let n_layers = (0..).take_while(|l| params.contains_key(&format!("layers.{l}.attn.out"))).count();
        let n_heads = (0..).take_while(|h| params.contains_key(&format!("layers.0.attn.q.{h}"))).count();
        let cfg = ModelConfig {
            vocab_size: tok[0],
            d_model: tok[1],
            n_layers,
            n_heads: n_heads.max(1),
            max_seq_len: pos[0],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Immutable parameter set of the language model.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    config: ModelConfig,
    params: ParamMap,
    fingerprint: u64,
}

impl PolicySnapshot {
    /// Validates shapes and finiteness against `config`. Extra parameters
    /// (e.g. a reward head) are rejected.
    pub fn new(config: ModelConfig, params: ParamMap) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in &shapes {
            let t = params.get(name).ok_or_else(|| Error::UnboundParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::InvalidConfig(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { context: format!("parameter `{name}`") });
            }
        }
        let fingerprint = fnv1a(&crate::checkpoint::encode_body(&params));
        Ok(PolicySnapshot { config, params, fingerprint })
    }

    pub fn from_params(params: ParamMap) -> Result<Self> {
        Self::new(ModelConfig::infer(&params)?, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn into_params(self) -> ParamMap {
        self.params
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

/// Scaled-normal init (std 0.02); layer-norm gains 1, biases and the
/// output projection 0.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<PolicySnapshot> {
    config.validate()?;
    let mut rng = Rng::stream(seed, crate::rng::Stream::Init);
    let mut params = ParamMap::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".gain") {
            vec![1.0; n]
        } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") || name == "lm_head" {
            vec![0.0; n]
        } else {
            (0..n).map(|_| INIT_STD * rng.normal()).collect()
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    PolicySnapshot::new(*config, params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardHead {
    pub projection: Tensor,
    pub bias: f64,
}

impl RewardHead {
    pub fn zeros(d_model: usize) -> Self {
        RewardHead { projection: Tensor::zeros(&[d_model, 1]), bias: 0.0 }
    }

    pub fn from_params(params: &ParamMap) -> Result<Self> {
        let w = params.get(REWARD_WEIGHT).ok_or_else(|| Error::UnboundParameter(String::from(REWARD_WEIGHT)))?;
        let b = params.get(REWARD_BIAS).ok_or_else(|| Error::UnboundParameter(String::from(REWARD_BIAS)))?;
        if w.shape().len() != 2 || w.shape()[1] != 1 || !b.is_scalar() {
            return Err(Error::InvalidConfig(String::from("reward head must be [d,1] plus a scalar bias")));
        }
        if !w.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite { context: String::from("reward head") });
        }
        Ok(RewardHead { projection: w.clone(), bias: b.item() })
    }

    pub fn insert_into(&self, params: &mut ParamMap) {
        params.insert(String::from(REWARD_WEIGHT), self.projection.clone());
        params.insert(String::from(REWARD_BIAS), Tensor::scalar(self.bias));
    }
}

/// Node handles produced by [`build_forward`].
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Final normalized hidden states, `[len, d_model]`.
    pub hidden: NodeId,
    /// Next-token logits, `[len, vocab_size]`.
    pub logits: NodeId,
}

/// Appends the transformer forward pass over `input` to `g`.
pub fn build_forward(g: &mut Graph, cfg: &ModelConfig, input: &[u32]) -> Result<Forward> {
    let len = input.len();
    if len == 0 {
        return Err(Error::EmptyInput("model input"));
    }
    if len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len, max: cfg.max_seq_len });
    }
    let ids: Vec<usize> = input
        .iter()
        .map(|&t| {
            if (t as usize) < cfg.vocab_size {
                Ok(t as usize)
            } else {
                Err(Error::TokenOutOfRange { token: t, vocab: cfg.vocab_size })
            }
        })
        .collect::<Result<_>>()?;
    let ones = g.constant(Tensor::filled(&[len, 1], 1.0));
    let tok = g.param("tok_emb");
    let pos = g.param("pos_emb");
    let te = g.gather(tok, ids);
    let pe = g.gather(pos, (0..len).collect());
    let mut x = g.add(te, pe);
    let scale = 1.0 / libm::sqrt(cfg.head_dim() as f64);
    for l in 0..cfg.n_layers {
        let h = norm_affine(g, x, ones, &format!("layers.{l}.ln1"));
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let wq = g.param(&format!("layers.{l}.attn.q.{hd}"));
            let wk = g.param(&format!("layers.{l}.attn.k.{hd}"));
            let wv = g.param(&format!("layers.{l}.attn.v.{hd}"));
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scores = g.scale(scores, scale);
            let masked = g.causal_mask(scores, MASK_FILL);
            let attn = g.softmax(masked);
            heads.push(g.matmul(attn, v));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat(heads, 1) };
        let wo = g.param(&format!("layers.{l}.attn.out"));
        let o = g.matmul(cat, wo);
        x = g.add(x, o);

        let h2 = norm_affine(g, x, ones, &format!("layers.{l}.ln2"));
        let w1 = g.param(&format!("layers.{l}.mlp.w1"));
        let b1 = g.param(&format!("layers.{l}.mlp.b1"));
        let w2 = g.param(&format!("layers.{l}.mlp.w2"));
        let b2 = g.param(&format!("layers.{l}.mlp.b2"));
        let pre = g.matmul(h2, w1);
        let b1r = g.matmul(ones, b1);
        let pre = g.add(pre, b1r);
        let act = g.relu(pre);
        let m = g.matmul(act, w2);
        let b2r = g.matmul(ones, b2);
        let m = g.add(m, b2r);
        x = g.add(x, m);
    }
    let hidden = norm_affine(g, x, ones, "ln_f");
    let head = g.param("lm_head");
    let logits = g.matmul(hidden, head);
    Ok(Forward { hidden, logits })
}

fn norm_affine(g: &mut Graph, x: NodeId, ones: NodeId, prefix: &str) -> NodeId {
    let n = g.layer_norm(x, LN_EPS);
    let gain = g.param(&format!("{prefix}.gain"));
    let bias = g.param(&format!("{prefix}.bias"));
    let gr = g.matmul(ones, gain);
    let br = g.matmul(ones, bias);
    let scaled = g.mul(n, gr);
    g.add(scaled, br)
}

/// Model input for scoring `response` after `prompt`, checked against the
/// positional table.
pub fn lm_input(cfg: &ModelConfig, prompt: &[u32], response: &[u32]) -> Result<Vec<u32>> {
    if response.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let len = prompt.len() + response.len();
    if len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len, max: cfg.max_seq_len });
    }
    let mut input = Vec::with_capacity(len);
    input.push(BOS);
    input.extend_from_slice(prompt);
    input.extend_from_slice(&response[..response.len() - 1]);
    Ok(input)
}

/// Graph nodes for the log-probabilities of each response token.
#[derive(Debug, Clone, Copy)]
pub struct ResponseNodes {
    /// `[len(response)]` per-token log-probabilities.
    pub token_log_probs: NodeId,
    /// `[len(prompt) + len(response), vocab]` log-softmax rows.
    pub log_probs: NodeId,
    /// Row of `log_probs` predicting the first response token.
    pub first_row: usize,
}

pub fn build_response_log_probs(g: &mut Graph, cfg: &ModelConfig, prompt: &[u32], response: &[u32]) -> Result<ResponseNodes> {
    let input = lm_input(cfg, prompt, response)?;
    if let Some(&t) = response.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
    }
    let fwd = build_forward(g, cfg, &input)?;
    let lp = g.log_softmax(fwd.logits);
    let v = cfg.vocab_size;
    let flat = g.reshape(lp, vec![input.len() * v]);
    let first = prompt.len();
    let idx = response.iter().enumerate().map(|(t, &tok)| (first + t) * v + tok as usize).collect();
    let token_log_probs = g.index_select(flat, idx);
    Ok(ResponseNodes { token_log_probs, log_probs: lp, first_row: first })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
}

/// `log pi(response | prompt)` with its per-token decomposition.
pub fn sequence_log_prob(policy: &PolicySnapshot, prompt: &[u32], response: &[u32]) -> Result<SequenceLogProb> {
    let mut g = Graph::new();
    let nodes = build_response_log_probs(&mut g, policy.config(), prompt, response)?;
    g.evaluate(policy.params())?;
    let per_token = g.value(nodes.token_log_probs)?.data().to_vec();
    Ok(SequenceLogProb { total: per_token.iter().sum(), per_token })
}

/// Full-vocabulary log-probability rows at each response position.
pub fn response_distributions(policy: &PolicySnapshot, prompt: &[u32], response: &[u32]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let nodes = build_response_log_probs(&mut g, policy.config(), prompt, response)?;
    g.evaluate(policy.params())?;
    let lp = g.value(nodes.log_probs)?;
    Ok((0..response.len()).map(|t| lp.row(nodes.first_row + t).to_vec()).collect())
}

/// Next-token logits after `[BOS] ++ prompt ++ generated`.
pub fn next_token_logits(policy: &PolicySnapshot, prompt: &[u32], generated: &[u32]) -> Result<Vec<f64>> {
    let mut input = Vec::with_capacity(1 + prompt.len() + generated.len());
    input.push(BOS);
    input.extend_from_slice(prompt);
    input.extend_from_slice(generated);
    let mut g = Graph::new();
    let fwd = build_forward(&mut g, policy.config(), &input)?;
    g.evaluate(policy.params())?;
    Ok(g.value(fwd.logits)?.row(input.len() - 1).to_vec())
}

/// Value-only incremental forward pass used for decoding. Keys and values
/// of earlier positions are cached, so each appended token costs one row.
struct Decoder<'a> {
    cfg: &'a ModelConfig,
    p: &'a ParamMap,
    /// Per layer and head: cached key and value rows.
    keys: Vec<Vec<Vec<Vec<f64>>>>,
    values: Vec<Vec<Vec<Vec<f64>>>>,
}

fn row_times(x: &[f64], w: &Tensor) -> Vec<f64> {
    let n = w.cols();
    let mut out = vec![0.0; n];
    for (p, &xp) in x.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(w.row(p)) {
            *o += xp * wv;
        }
    }
    out
}

fn norm_row(x: &[f64], gain: &Tensor, bias: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv = 1.0 / libm::sqrt(var + LN_EPS);
    x.iter().zip(gain.data()).zip(bias.data()).map(|((v, g), b)| (v - mu) * inv * g + b).collect()
}

impl<'a> Decoder<'a> {
    fn new(policy: &'a PolicySnapshot) -> Self {
        let cfg = policy.config();
        let empty = || vec![vec![Vec::new(); cfg.n_heads]; cfg.n_layers];
        Decoder { cfg, p: policy.params(), keys: empty(), values: empty() }
    }

    fn get(&self, name: &str) -> Result<&'a Tensor> {
        self.p.get(name).ok_or_else(|| Error::UnboundParameter(String::from(name)))
    }

    /// Appends `token` and returns the next-token logits.
    fn push(&mut self, token: u32) -> Result<Vec<f64>> {
        let pos = self.keys.first().map_or(0, |l| l[0].len());
        if pos >= self.cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: pos + 1, max: self.cfg.max_seq_len });
        }
        if token as usize >= self.cfg.vocab_size {
            return Err(Error::TokenOutOfRange { token, vocab: self.cfg.vocab_size });
        }
        let tok = self.get("tok_emb")?.row(token as usize);
        let mut x: Vec<f64> = tok.iter().zip(self.get("pos_emb")?.row(pos)).map(|(a, b)| a + b).collect();
        let scale = 1.0 / libm::sqrt(self.cfg.head_dim() as f64);
        for l in 0..self.cfg.n_layers {
            let pre = |s: &str| format!("layers.{l}.{s}");
            let h = norm_row(&x, self.get(&pre("ln1.gain"))?, self.get(&pre("ln1.bias"))?);
            let mut cat = Vec::with_capacity(self.cfg.d_model);
            for hd in 0..self.cfg.n_heads {
                let q = row_times(&h, self.get(&pre(&format!("attn.q.{hd}")))?);
                let k = row_times(&h, self.get(&pre(&format!("attn.k.{hd}")))?);
                let v = row_times(&h, self.get(&pre(&format!("attn.v.{hd}")))?);
                self.keys[l][hd].push(k);
                self.values[l][hd].push(v);
                let mut scores: Vec<f64> = self.keys[l][hd]
                    .iter()
                    .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                softmax_row(&mut scores);
                let mut out = vec![0.0; q.len()];
                for (w, v) in scores.iter().zip(&self.values[l][hd]) {
                    for (o, vv) in out.iter_mut().zip(v) {
                        *o += w * vv;
                    }
                }
                cat.extend(out);
            }
            let o = row_times(&cat, self.get(&pre("attn.out"))?);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h2 = norm_row(&x, self.get(&pre("ln2.gain"))?, self.get(&pre("ln2.bias"))?);
            let mut hid = row_times(&h2, self.get(&pre("mlp.w1"))?);
            for (a, b) in hid.iter_mut().zip(self.get(&pre("mlp.b1"))?.data()) {
                *a = (*a + b).max(0.0);
            }
            let m = row_times(&hid, self.get(&pre("mlp.w2"))?);
            for ((a, b), c) in x.iter_mut().zip(&m).zip(self.get(&pre("mlp.b2"))?.data()) {
                *a += b + c;
            }
        }
        let hidden = norm_row(&x, self.get("ln_f.gain")?, self.get("ln_f.bias")?);
        Ok(row_times(&hidden, self.get("lm_head")?))
    }

    /// Feeds `[BOS] ++ prompt` and returns the logits for the first response token.
    fn start(&mut self, prompt: &[u32]) -> Result<Vec<f64>> {
        let mut logits = self.push(BOS)?;
        for &t in prompt {
            logits = self.push(t)?;
        }
        Ok(logits)
    }
}

fn check_decode_budget(cfg: &ModelConfig, prompt: &[u32], max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::InvalidConfig(String::from("max_len must be at least 1")));
    }
    if prompt.len() + max_len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: prompt.len() + max_len, max: cfg.max_seq_len });
    }
    Ok(())
}

/// Lowest index among the maximal entries.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding. `max_len` bounds the response length including EOS;
/// EOS is appended if the bound is hit.
pub fn greedy_decode(policy: &PolicySnapshot, prompt: &[u32], max_len: usize) -> Result<Vec<u32>> {
    check_decode_budget(policy.config(), prompt, max_len)?;
    let mut dec = Decoder::new(policy);
    let mut logits = dec.start(prompt)?;
    let mut out = Vec::with_capacity(max_len);
    while out.len() + 1 < max_len {
        let tok = argmax(&logits) as u32;
        out.push(tok);
        if tok == EOS {
            return Ok(out);
        }
        if out.len() + 1 < max_len {
            logits = dec.push(tok)?;
        }
    }
    out.push(EOS);
    Ok(out)
}

/// Temperature sampling by inverse CDF; temperature 0 is greedy decoding.
pub fn sample_response(policy: &PolicySnapshot, prompt: &[u32], max_len: usize, temperature: f64, seed: u64) -> Result<Vec<u32>> {
    let mut rng = Rng::stream(seed, crate::rng::Stream::Sampling);
    sample_with(policy, prompt, max_len, temperature, &mut rng)
}

pub fn sample_with(policy: &PolicySnapshot, prompt: &[u32], max_len: usize, temperature: f64, rng: &mut Rng) -> Result<Vec<u32>> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidConfig(format!("temperature must be >= 0, got {temperature}")));
    }
    if temperature == 0.0 {
        return greedy_decode(policy, prompt, max_len);
    }
    check_decode_budget(policy.config(), prompt, max_len)?;
    let mut dec = Decoder::new(policy);
    let mut logits = dec.start(prompt)?;
    let mut out = Vec::with_capacity(max_len);
    while out.len() + 1 < max_len {
        let mut probs: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
        softmax_row(&mut probs);
        let tok = rng.categorical(&probs) as u32;
        out.push(tok);
        if tok == EOS {
            return Ok(out);
        }
        if out.len() + 1 < max_len {
            logits = dec.push(tok)?;
        }
    }
    out.push(EOS);
    Ok(out)
}

/// Reward model input `[BOS] ++ prompt ++ response` and the rows covering
/// the response.
fn rm_input(cfg: &ModelConfig, prompt: &[u32], response: &[u32]) -> Result<(Vec<u32>, core::ops::Range<usize>)> {
    if response.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let len = 1 + prompt.len() + response.len();
    if len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len, max: cfg.max_seq_len });
    }
    let mut input = Vec::with_capacity(len);
    input.push(BOS);
    input.extend_from_slice(prompt);
    input.extend_from_slice(response);
    Ok((input, (1 + prompt.len())..len))
}

/// Scalar reward node `[1]`: the head applied to the mean of the final
/// hidden states over response positions.
pub fn build_reward(g: &mut Graph, cfg: &ModelConfig, prompt: &[u32], response: &[u32]) -> Result<NodeId> {
    let (input, rows) = rm_input(cfg, prompt, response)?;
    let fwd = build_forward(g, cfg, &input)?;
    let n = rows.len() as f64;
    let mut pool = vec![0.0; input.len()];
    for r in rows {
        pool[r] = 1.0 / n;
    }
    let pool = g.constant(Tensor::matrix(1, input.len(), pool)?);
    let pooled = g.matmul(pool, fwd.hidden);
    let w = g.param(REWARD_WEIGHT);
    let b = g.param(REWARD_BIAS);
    let s = g.matmul(pooled, w);
    let s = g.reshape(s, vec![1]);
    Ok(g.add(s, b))
}

pub fn rm_params(trunk: &PolicySnapshot, head: &RewardHead) -> ParamMap {
    let mut params = trunk.params().clone();
    head.insert_into(&mut params);
    params
}

pub fn rm_score(trunk: &PolicySnapshot, head: &RewardHead, prompt: &[u32], response: &[u32]) -> Result<f64> {
    if head.projection.shape() != [trunk.config().d_model, 1] {
        return Err(Error::InvalidConfig(String::from("reward head width does not match trunk")));
    }
    let mut g = Graph::new();
    let r = build_reward(&mut g, trunk.config(), prompt, response)?;
    g.evaluate(&rm_params(trunk, head))?;
    g.scalar_value(r)
}

/// Mean-pooled final hidden state over the response rows, for inspection.
pub fn pooled_hidden(trunk: &PolicySnapshot, prompt: &[u32], response: &[u32]) -> Result<Vec<f64>> {
    let (input, rows) = rm_input(trunk.config(), prompt, response)?;
    let mut g = Graph::new();
    let fwd = build_forward(&mut g, trunk.config(), &input)?;
    g.evaluate(trunk.params())?;
    let h = g.value(fwd.hidden)?;
    let d = h.cols();
    let n = rows.len() as f64;
    let mut acc = vec![0.0; d];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(h.row(r)) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Log-softmax of a logit row, re-exported for KL computations.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mut r = logits.to_vec();
    log_softmax_row(&mut r);
    r
}
