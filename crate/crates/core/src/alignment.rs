//! Training objectives and the step loop.
//!
//! Four methods share one trainer: supervised fine-tuning, pairwise reward
//! model fitting, DPO against a frozen reference, and a value-free PPO whose
//! per-token reward carries the KL shaping toward the pre-aligned policy.
//! DPO and PPO steps optionally add the focal flip penalty from
//! [`crate::flipguard`]. Every step is a deterministic function of the
//! configuration, seed and data.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::data::{PreferenceExample, SftExample, TokenSequence};
use crate::error::{Error, Result};
use crate::eval::{kl_row, Scorer};
use crate::flipguard::{
    build_penalty, flip_indicator, select_focal_target, Characterization, ConstraintMode, FlipGuardConfig, Method,
};
use crate::model::{
    build_response_log_probs, build_reward, greedy_decode, response_distributions, rm_params, sample_with,
    ModelConfig, PolicySnapshot, RewardHead, ResponseNodes,
};
use crate::numerics::{Graph, NodeId, ParamMap};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMethod {
    Sft,
    Rm,
    Dpo,
    Ppo,
}

impl AlignMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignMethod::Sft => "sft",
            AlignMethod::Rm => "rm",
            AlignMethod::Dpo => "dpo",
            AlignMethod::Ppo => "ppo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sft" => Some(AlignMethod::Sft),
            "rm" => Some(AlignMethod::Rm),
            "dpo" => Some(AlignMethod::Dpo),
            "ppo" => Some(AlignMethod::Ppo),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardSource {
    Gold,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    pub method: AlignMethod,
    pub beta: f64,
    pub kl_coeff: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub rollouts_per_prompt: usize,
    pub clip_ratio: f64,
    pub seed: u64,
    pub reward_source: RewardSource,
    /// Sampling temperature for PPO rollouts.
    pub temperature: f64,
    /// Response budget (EOS included) for rollouts and reference decodes.
    pub max_new_tokens: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            method: AlignMethod::Dpo,
            beta: 0.1,
            kl_coeff: 0.1,
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 2000,
            rollouts_per_prompt: 4,
            clip_ratio: 0.2,
            seed: 0,
            reward_source: RewardSource::Gold,
            temperature: 1.0,
            max_new_tokens: 13,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if !(self.beta > 0.0) {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if !(self.kl_coeff >= 0.0) {
            return bad(format!("kl_coeff must be >= 0, got {}", self.kl_coeff));
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio <= 1.0) {
            return bad(format!("clip_ratio must be in (0, 1], got {}", self.clip_ratio));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.rollouts_per_prompt == 0 || self.max_new_tokens == 0 {
            return bad(format!("batch_size, rollouts_per_prompt and max_new_tokens must be positive: {self:?}"));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("rollout temperature must be > 0, got {}", self.temperature));
        }
        Ok(())
    }

    /// Trajectories per PPO step hold `batch_size` samples:
    /// `batch_size / rollouts_per_prompt` prompts (at least one).
    pub fn ppo_prompts_per_step(&self) -> usize {
        (self.batch_size / self.rollouts_per_prompt).max(1)
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: ParamMap,
    v: ParamMap,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamMap) -> Self {
        let zeros: ParamMap = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
    }
}

pub fn grad_norm(grads: &ParamMap) -> f64 {
    libm::sqrt(grads.values().map(Tensor::sum_squares).sum())
}

// ---------------------------------------------------------------------------
// Loss graphs

/// Mean over examples of the mean per-token NLL of the target.
pub fn build_sft(g: &mut Graph, cfg: &ModelConfig, batch: &[SftExample]) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("SFT batch"));
    }
    let mut acc = None;
    for e in batch {
        let nodes = build_response_log_probs(g, cfg, e.prompt.tokens(), e.target.tokens())?;
        let m = g.mean(nodes.token_log_probs);
        acc = Some(match acc {
            None => m,
            Some(a) => g.add(a, m),
        });
    }
    Ok(g.scale(acc.unwrap(), -1.0 / batch.len() as f64))
}

pub struct RmNodes {
    pub loss: NodeId,
    /// Chosen-minus-rejected score per example.
    pub gaps: Vec<NodeId>,
}

/// Mean of `-log sigmoid(r(x, y_c) - r(x, y_r))`.
pub fn build_rm(g: &mut Graph, cfg: &ModelConfig, batch: &[PreferenceExample]) -> Result<RmNodes> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("reward-model batch"));
    }
    let mut acc = None;
    let mut gaps = Vec::with_capacity(batch.len());
    for e in batch {
        let rc = build_reward(g, cfg, e.prompt.tokens(), e.chosen.tokens())?;
        let rr = build_reward(g, cfg, e.prompt.tokens(), e.rejected.tokens())?;
        let gap = g.sub(rc, rr);
        gaps.push(gap);
        let s = g.logistic(gap);
        let ls = g.log(s);
        acc = Some(match acc {
            None => ls,
            Some(a) => g.add(a, ls),
        });
    }
    Ok(RmNodes { loss: g.scale(acc.unwrap(), -1.0 / batch.len() as f64), gaps })
}

/// Reference sequence log-probabilities of one preference pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefLogProbs {
    pub chosen: f64,
    pub rejected: f64,
}

pub struct DpoNodes {
    pub loss: NodeId,
    pub chosen: Vec<ResponseNodes>,
    pub rejected: Vec<ResponseNodes>,
    /// Summed chosen log-probability per example.
    pub chosen_totals: Vec<NodeId>,
    /// `beta * (delta_w - delta_l)` per example.
    pub logits: Vec<NodeId>,
}

/// Mean of `-log sigmoid(beta * [(log pi(y_w) - log ref(y_w)) - (log pi(y_l) - log ref(y_l))])`.
pub fn build_dpo(
    g: &mut Graph,
    cfg: &ModelConfig,
    batch: &[PreferenceExample],
    reference: &[RefLogProbs],
    beta: f64,
) -> Result<DpoNodes> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("DPO batch"));
    }
    let mut out = DpoNodes { loss: 0, chosen: Vec::new(), rejected: Vec::new(), chosen_totals: Vec::new(), logits: Vec::new() };
    let mut acc = None;
    for (e, r) in batch.iter().zip(reference) {
        let cw = build_response_log_probs(g, cfg, e.prompt.tokens(), e.chosen.tokens())?;
        let cl = build_response_log_probs(g, cfg, e.prompt.tokens(), e.rejected.tokens())?;
        let sw = g.sum(cw.token_log_probs);
        let sl = g.sum(cl.token_log_probs);
        let d = g.sub(sw, sl);
        let offset = g.scalar(-(r.chosen - r.rejected));
        let d = g.add(d, offset);
        let z = g.scale(d, beta);
        let s = g.logistic(z);
        let ls = g.log(s);
        acc = Some(match acc {
            None => ls,
            Some(a) => g.add(a, ls),
        });
        out.chosen.push(cw);
        out.rejected.push(cl);
        out.chosen_totals.push(sw);
        out.logits.push(z);
    }
    out.loss = g.scale(acc.unwrap(), -1.0 / batch.len() as f64);
    Ok(out)
}

/// One sampled response with its per-token bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt_id: usize,
    pub prompt: TokenSequence,
    pub response: TokenSequence,
    /// Log-probabilities under the sampling snapshot.
    pub old_log_probs: Vec<f64>,
    /// Log-probabilities under the pre-aligned policy.
    pub ref_log_probs: Vec<f64>,
    /// Shaped reward per token: KL penalty everywhere plus the terminal
    /// reward on the final (EOS) token.
    pub rewards: Vec<f64>,
    pub terminal_reward: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
    /// Mean full-vocabulary `KL(sampling || pre)` over all response positions.
    pub mean_token_kl: f64,
}

/// Longest response that still fits the positional table for both the
/// language model and the reward model.
pub fn response_budget(cfg: &ModelConfig, prompt: &[u32], max_new_tokens: usize) -> usize {
    max_new_tokens.min(cfg.max_seq_len.saturating_sub(prompt.len() + 1)).max(1)
}

/// Samples `rollouts_per_prompt` responses per prompt from `policy` and
/// attaches per-token log-probs, shaped rewards and returns.
pub fn ppo_rollout(
    policy: &PolicySnapshot,
    pre_policy: &PolicySnapshot,
    scorer: &dyn Scorer,
    prompts: &[(usize, TokenSequence)],
    config: &AlignConfig,
    rng: &mut Rng,
) -> Result<TrajectoryBatch> {
    let mut trajectories = Vec::with_capacity(prompts.len() * config.rollouts_per_prompt);
    let (mut kl_total, mut kl_count) = (0.0, 0usize);
    for (id, prompt) in prompts {
        let p = prompt.tokens();
        let budget = response_budget(policy.config(), p, config.max_new_tokens);
        for _ in 0..config.rollouts_per_prompt {
            let response = sample_with(policy, p, budget, config.temperature, rng)?;
            let cur = response_distributions(policy, p, &response)?;
            let pre = response_distributions(pre_policy, p, &response)?;
            let old_log_probs: Vec<f64> = cur.iter().zip(&response).map(|(row, &t)| row[t as usize]).collect();
            let ref_log_probs: Vec<f64> = pre.iter().zip(&response).map(|(row, &t)| row[t as usize]).collect();
            for (a, b) in cur.iter().zip(&pre) {
                kl_total += kl_row(a, b);
                kl_count += 1;
            }
            let terminal_reward = scorer.score(p, &response).map_err(|e| match e {
                Error::Scorer(m) => Error::Scorer(m),
                other => Error::Scorer(format!("{other}")),
            })?;
            let mut rewards: Vec<f64> =
                old_log_probs.iter().zip(&ref_log_probs).map(|(o, r)| -config.kl_coeff * (o - r)).collect();
            *rewards.last_mut().unwrap() += terminal_reward;
            let ret = rewards.iter().sum();
            trajectories.push(Trajectory {
                prompt_id: *id,
                prompt: prompt.clone(),
                response: TokenSequence(response),
                old_log_probs,
                ref_log_probs,
                rewards,
                terminal_reward,
                ret,
            });
        }
    }
    let mean_token_kl = if kl_count == 0 { 0.0 } else { kl_total / kl_count as f64 };
    Ok(TrajectoryBatch { trajectories, mean_token_kl })
}

/// `(ret - mean) / (std + 1e-8)` with the population standard deviation.
pub fn standardized_advantages(trajectories: &[Trajectory]) -> Result<Vec<f64>> {
    if trajectories.len() < 2 {
        return Err(Error::SingleTrajectory);
    }
    let n = trajectories.len() as f64;
    let mean = trajectories.iter().map(|t| t.ret).sum::<f64>() / n;
    let var = trajectories.iter().map(|t| (t.ret - mean) * (t.ret - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    Ok(trajectories.iter().map(|t| (t.ret - mean) / (std + 1e-8)).collect())
}

pub struct PpoNodes {
    pub loss: NodeId,
    /// Current-policy token log-prob node per trajectory.
    pub token_log_probs: Vec<NodeId>,
}

/// Clipped surrogate: `-mean_traj mean_token min(rho*A, clip(rho, 1-c, 1+c)*A)`
/// with `rho = exp(log pi - log pi_old)`.
pub fn build_ppo(
    g: &mut Graph,
    cfg: &ModelConfig,
    trajectories: &[Trajectory],
    advantages: &[f64],
    clip_ratio: f64,
) -> Result<PpoNodes> {
    if trajectories.is_empty() {
        return Err(Error::EmptyInput("trajectory batch"));
    }
    let mut acc = None;
    let mut token_log_probs = Vec::with_capacity(trajectories.len());
    for (t, &adv) in trajectories.iter().zip(advantages) {
        let nodes = build_response_log_probs(g, cfg, t.prompt.tokens(), t.response.tokens())?;
        let old = g.constant(Tensor::vector(t.old_log_probs.clone()));
        let diff = g.sub(nodes.token_log_probs, old);
        let ratio = g.exp(diff);
        let a = g.scalar(adv);
        let s1 = g.mul(ratio, a);
        let clipped = g.clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio);
        let s2 = g.mul(clipped, a);
        let m = g.minimum(s1, s2);
        let per = g.mean(m);
        acc = Some(match acc {
            None => per,
            Some(x) => g.add(x, per),
        });
        token_log_probs.push(nodes.token_log_probs);
    }
    Ok(PpoNodes { loss: g.scale(acc.unwrap(), -1.0 / trajectories.len() as f64), token_log_probs })
}

// ---------------------------------------------------------------------------
// Value-level losses

pub fn sft_loss(policy: &PolicySnapshot, batch: &[SftExample]) -> Result<f64> {
    let mut g = Graph::new();
    let loss = build_sft(&mut g, policy.config(), batch)?;
    g.evaluate(policy.params())?;
    g.scalar_value(loss)
}

pub fn rm_pair_loss(trunk: &PolicySnapshot, head: &RewardHead, batch: &[PreferenceExample]) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = build_rm(&mut g, trunk.config(), batch)?;
    g.evaluate(&rm_params(trunk, head))?;
    g.scalar_value(nodes.loss)
}

pub fn reference_log_probs(reference: &PolicySnapshot, e: &PreferenceExample) -> Result<RefLogProbs> {
    let c = crate::model::sequence_log_prob(reference, e.prompt.tokens(), e.chosen.tokens())?;
    let r = crate::model::sequence_log_prob(reference, e.prompt.tokens(), e.rejected.tokens())?;
    Ok(RefLogProbs { chosen: c.total, rejected: r.total })
}

pub fn dpo_loss(policy: &PolicySnapshot, reference: &PolicySnapshot, batch: &[PreferenceExample], beta: f64) -> Result<f64> {
    let refs = batch.iter().map(|e| reference_log_probs(reference, e)).collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let nodes = build_dpo(&mut g, policy.config(), batch, &refs, beta)?;
    g.evaluate(policy.params())?;
    g.scalar_value(nodes.loss)
}

pub fn ppo_surrogate_loss(batch: &TrajectoryBatch, policy: &PolicySnapshot, config: &AlignConfig) -> Result<f64> {
    let adv = standardized_advantages(&batch.trajectories)?;
    let mut g = Graph::new();
    let nodes = build_ppo(&mut g, policy.config(), &batch.trajectories, &adv, config.clip_ratio)?;
    g.evaluate(policy.params())?;
    g.scalar_value(nodes.loss)
}

// ---------------------------------------------------------------------------
// Trainer

/// One metrics record per optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub method: AlignMethod,
    /// Total optimized loss (alignment loss plus penalty).
    pub loss: f64,
    pub align_loss: f64,
    pub focal_term: f64,
    pub trigger_rate: f64,
    pub mean_token_kl: f64,
    /// DPO: mean implicit reward margin; PPO: mean terminal reward;
    /// RM: mean chosen-minus-rejected score; SFT: 0.
    pub mean_reward: f64,
    pub grad_norm: f64,
}

/// Per-example flip audit entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRecord {
    pub step: usize,
    pub example_id: usize,
    pub delta: f64,
    pub triggered: bool,
    pub prompt: TokenSequence,
    pub focal_target: TokenSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub metrics: StepMetrics,
    pub triggers: Vec<TriggerRecord>,
}

pub enum TrainData {
    Sft(Vec<SftExample>),
    Rm(Vec<PreferenceExample>),
    Dpo(Vec<PreferenceExample>),
    /// Prompts for on-policy rollouts plus the reward used to score them.
    Ppo { prompts: Vec<TokenSequence>, scorer: Box<dyn Scorer> },
}

impl TrainData {
    fn len(&self) -> usize {
        match self {
            TrainData::Sft(v) => v.len(),
            TrainData::Rm(v) | TrainData::Dpo(v) => v.len(),
            TrainData::Ppo { prompts, .. } => prompts.len(),
        }
    }

    fn method(&self) -> AlignMethod {
        match self {
            TrainData::Sft(_) => AlignMethod::Sft,
            TrainData::Rm(_) => AlignMethod::Rm,
            TrainData::Dpo(_) => AlignMethod::Dpo,
            TrainData::Ppo { .. } => AlignMethod::Ppo,
        }
    }
}

struct DpoCache {
    log_probs: RefLogProbs,
    chosen_rows: Vec<Vec<f64>>,
    rejected_rows: Vec<Vec<f64>>,
}

pub struct Trainer {
    align: AlignConfig,
    guard: FlipGuardConfig,
    model: ModelConfig,
    params: ParamMap,
    adam: Adam,
    step: usize,
    reference: Option<PolicySnapshot>,
    data: TrainData,
    order: Vec<usize>,
    cursor: usize,
    batch_rng: Rng,
    sample_rng: Rng,
    dpo_cache: BTreeMap<usize, DpoCache>,
    /// Greedy pre-aligned response and its score per prompt.
    ref_responses: BTreeMap<usize, (TokenSequence, f64)>,
}

impl Trainer {
    /// `initial` is the starting policy; for DPO and PPO it is also the
    /// frozen pre-aligned/reference policy. `head` is required for RM
    /// fitting and ignored otherwise.
    pub fn new(
        align: AlignConfig,
        guard: FlipGuardConfig,
        initial: PolicySnapshot,
        head: Option<RewardHead>,
        data: TrainData,
    ) -> Result<Self> {
        align.validate()?;
        guard.validate()?;
        if data.method() != align.method {
            return Err(Error::InvalidConfig(format!(
                "data prepared for {} but method is {}",
                data.method().as_str(),
                align.method.as_str()
            )));
        }
        if data.len() == 0 {
            return Err(Error::EmptyInput("training data"));
        }
        if guard.active() {
            let expected = match align.method {
                AlignMethod::Dpo => Some(Characterization::Implicit),
                AlignMethod::Ppo => Some(Characterization::Explicit),
                _ => None,
            };
            match expected {
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "flip constraint applies to dpo/ppo, not {}",
                        align.method.as_str()
                    )))
                }
                Some(c) if c != guard.characterization => {
                    return Err(Error::InvalidConfig(format!(
                        "{} requires the {:?} reward characterization",
                        align.method.as_str(),
                        c
                    )))
                }
                _ => {}
            }
        }
        if align.method == AlignMethod::Ppo && align.batch_size < 2 {
            return Err(Error::SingleTrajectory);
        }
        let model = *initial.config();
        let mut params = initial.params().clone();
        if align.method == AlignMethod::Rm {
            let head = head.unwrap_or_else(|| RewardHead::zeros(model.d_model));
            head.insert_into(&mut params);
        }
        let reference = match align.method {
            AlignMethod::Dpo | AlignMethod::Ppo => Some(initial),
            _ => None,
        };
        Ok(Trainer {
            adam: Adam::new(align.learning_rate, &params),
            batch_rng: Rng::stream(align.seed, Stream::Batching),
            sample_rng: Rng::stream(align.seed, Stream::Sampling),
            align,
            guard,
            model,
            params,
            step: 0,
            reference,
            data,
            order: Vec::new(),
            cursor: 0,
            dpo_cache: BTreeMap::new(),
            ref_responses: BTreeMap::new(),
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    /// Current language-model trunk.
    pub fn snapshot(&self) -> Result<PolicySnapshot> {
        let mut trunk = self.params.clone();
        trunk.remove(crate::model::REWARD_WEIGHT);
        trunk.remove(crate::model::REWARD_BIAS);
        PolicySnapshot::new(self.model, trunk)
    }

    pub fn reward_head(&self) -> Option<RewardHead> {
        RewardHead::from_params(&self.params).ok()
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let len = self.data.len();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor >= self.order.len() {
                self.order = self.batch_rng.permutation(len);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let report = match self.align.method {
            AlignMethod::Sft => self.sft_step()?,
            AlignMethod::Rm => self.rm_step()?,
            AlignMethod::Dpo => self.dpo_step()?,
            AlignMethod::Ppo => self.ppo_step()?,
        };
        self.step += 1;
        Ok(report)
    }

    fn finish(&mut self, g: &Graph, total: NodeId, mut metrics: StepMetrics) -> Result<StepMetrics> {
        metrics.loss = g.scalar_value(total)?;
        if !metrics.loss.is_finite() {
            return Err(Error::Diverged { step: self.step, loss: metrics.loss });
        }
        let grads = g.gradients(total)?;
        metrics.grad_norm = grad_norm(&grads);
        self.adam.step(&mut self.params, &grads);
        Ok(metrics)
    }

    fn blank_metrics(&self) -> StepMetrics {
        StepMetrics {
            step: self.step,
            method: self.align.method,
            loss: 0.0,
            align_loss: 0.0,
            focal_term: 0.0,
            trigger_rate: 0.0,
            mean_token_kl: 0.0,
            mean_reward: 0.0,
            grad_norm: 0.0,
        }
    }

    fn sft_step(&mut self) -> Result<StepReport> {
        let idx = self.next_batch(self.align.batch_size);
        let TrainData::Sft(examples) = &self.data else { unreachable!() };
        let batch: Vec<SftExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        let mut g = Graph::new();
        let loss = build_sft(&mut g, &self.model, &batch)?;
        g.evaluate(&self.params).map_err(|e| self.diverged_or(e))?;
        let mut m = self.blank_metrics();
        m.align_loss = g.scalar_value(loss)?;
        let metrics = self.finish(&g, loss, m)?;
        Ok(StepReport { metrics, triggers: Vec::new() })
    }

    fn rm_step(&mut self) -> Result<StepReport> {
        let idx = self.next_batch(self.align.batch_size);
        let TrainData::Rm(examples) = &self.data else { unreachable!() };
        let batch: Vec<PreferenceExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        let mut g = Graph::new();
        let nodes = build_rm(&mut g, &self.model, &batch)?;
        g.evaluate(&self.params).map_err(|e| self.diverged_or(e))?;
        let mut m = self.blank_metrics();
        m.align_loss = g.scalar_value(nodes.loss)?;
        let gaps: f64 = nodes.gaps.iter().map(|&n| g.scalar_value(n)).sum::<Result<f64>>()?;
        m.mean_reward = gaps / batch.len() as f64;
        let metrics = self.finish(&g, nodes.loss, m)?;
        Ok(StepReport { metrics, triggers: Vec::new() })
    }

    fn diverged_or(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { .. } => Error::Diverged { step: self.step, loss: f64::NAN },
            other => other,
        }
    }

    fn dpo_step(&mut self) -> Result<StepReport> {
        let idx = self.next_batch(self.align.batch_size);
        let TrainData::Dpo(examples) = &self.data else { unreachable!() };
        let reference = self.reference.as_ref().expect("dpo reference");
        for &i in &idx {
            if let alloc::collections::btree_map::Entry::Vacant(slot) = self.dpo_cache.entry(i) {
                let e = &examples[i];
                let chosen_rows = response_distributions(reference, e.prompt.tokens(), e.chosen.tokens())?;
                let rejected_rows = response_distributions(reference, e.prompt.tokens(), e.rejected.tokens())?;
                let total = |rows: &[Vec<f64>], seq: &TokenSequence| -> f64 {
                    rows.iter().zip(seq.tokens()).map(|(r, &t)| r[t as usize]).sum()
                };
                let log_probs = RefLogProbs {
                    chosen: total(&chosen_rows, &e.chosen),
                    rejected: total(&rejected_rows, &e.rejected),
                };
                slot.insert(DpoCache { log_probs, chosen_rows, rejected_rows });
            }
        }
        let batch: Vec<PreferenceExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        let refs: Vec<RefLogProbs> = idx.iter().map(|i| self.dpo_cache[i].log_probs).collect();

        let mut g = Graph::new();
        let nodes = build_dpo(&mut g, &self.model, &batch, &refs, self.align.beta)?;
        g.evaluate(&self.params).map_err(|e| self.diverged_or(e))?;

        // Implicit characterization: log pi_0(y_w|x) - log pi(y_w|x).
        let mut triggers = Vec::with_capacity(batch.len());
        for (k, (&i, e)) in idx.iter().zip(&batch).enumerate() {
            let current = g.scalar_value(nodes.chosen_totals[k])?;
            let delta = refs[k].chosen - current;
            triggers.push(TriggerRecord {
                step: self.step,
                example_id: i,
                delta,
                triggered: flip_indicator(delta, self.guard.epsilon) == 1,
                prompt: e.prompt.clone(),
                focal_target: select_focal_target(false, Method::Dpo, Some(&e.chosen), None, None)?,
            });
        }
        let terms: Vec<(NodeId, bool)> = nodes
            .chosen
            .iter()
            .zip(&triggers)
            .map(|(c, t)| (c.token_log_probs, self.weight(t.triggered)))
            .collect();
        let total = self.compose(&mut g, nodes.loss, &terms, batch.len())?;

        let mut m = self.blank_metrics();
        m.align_loss = g.scalar_value(nodes.loss)?;
        m.focal_term = total.1;
        m.trigger_rate = triggers.iter().filter(|t| t.triggered).count() as f64 / batch.len() as f64;
        let z: f64 = nodes.logits.iter().map(|&n| g.scalar_value(n)).sum::<Result<f64>>()?;
        m.mean_reward = z / batch.len() as f64;
        let (mut kl, mut count) = (0.0, 0usize);
        for (k, &i) in idx.iter().enumerate() {
            let cache = &self.dpo_cache[&i];
            for (resp, rows) in [(&nodes.chosen[k], &cache.chosen_rows), (&nodes.rejected[k], &cache.rejected_rows)] {
                let lp = g.value(resp.log_probs)?;
                for (t, q) in rows.iter().enumerate() {
                    kl += kl_row(lp.row(resp.first_row + t), q);
                    count += 1;
                }
            }
        }
        m.mean_token_kl = kl / count as f64;
        let metrics = self.finish(&g, total.0, m)?;
        Ok(StepReport { metrics, triggers })
    }

    fn weight(&self, triggered: bool) -> bool {
        match self.guard.mode {
            ConstraintMode::Off => false,
            ConstraintMode::Kd => true,
            ConstraintMode::FlipGuard => triggered,
        }
    }

    /// Adds the penalty (if any term is active) and evaluates the new nodes.
    /// Returns the node to differentiate and the penalty value.
    fn compose(&self, g: &mut Graph, align: NodeId, terms: &[(NodeId, bool)], batch: usize) -> Result<(NodeId, f64)> {
        match build_penalty(g, terms, self.guard.gamma, self.guard.norm, batch) {
            None => Ok((align, 0.0)),
            Some(p) => {
                let total = g.add(align, p);
                g.evaluate_pending(&self.params).map_err(|e| self.diverged_or(e))?;
                Ok((total, g.scalar_value(p)?))
            }
        }
    }

    fn ppo_step(&mut self) -> Result<StepReport> {
        let idx = self.next_batch(self.align.ppo_prompts_per_step());
        let sampling = PolicySnapshot::new(self.model, self.params.clone())?;
        let reference = self.reference.as_ref().expect("ppo reference");
        let TrainData::Ppo { prompts, scorer } = &self.data else { unreachable!() };
        let batch_prompts: Vec<(usize, TokenSequence)> = idx.iter().map(|&i| (i, prompts[i].clone())).collect();
        for (i, p) in &batch_prompts {
            if !self.ref_responses.contains_key(i) {
                let budget = response_budget(&self.model, p.tokens(), self.align.max_new_tokens);
                let y_ref = greedy_decode(reference, p.tokens(), budget)?;
                let score = scorer.score(p.tokens(), &y_ref)?;
                self.ref_responses.insert(*i, (TokenSequence(y_ref), score));
            }
        }
        let mut step_rng = self.sample_rng.fork(self.step as u64);
        let rollout = ppo_rollout(&sampling, reference, scorer.as_ref(), &batch_prompts, &self.align, &mut step_rng)?;
        let trajs = &rollout.trajectories;
        let adv = standardized_advantages(trajs)?;

        // Explicit characterization: R(x, y_ref) - R(x, y_pol).
        let mut triggers = Vec::with_capacity(trajs.len());
        for t in trajs {
            let (y_ref, ref_score) = &self.ref_responses[&t.prompt_id];
            let delta = ref_score - t.terminal_reward;
            let triggered = flip_indicator(delta, self.guard.epsilon) == 1;
            triggers.push(TriggerRecord {
                step: self.step,
                example_id: t.prompt_id,
                delta,
                triggered,
                prompt: t.prompt.clone(),
                focal_target: select_focal_target(triggered, Method::Ppo, None, Some(y_ref), Some(&t.response))?,
            });
        }

        let mut g = Graph::new();
        let nodes = build_ppo(&mut g, &self.model, trajs, &adv, self.align.clip_ratio)?;
        let mut terms = Vec::with_capacity(trajs.len());
        for ((t, trig), &lp) in trajs.iter().zip(&triggers).zip(&nodes.token_log_probs) {
            let w = self.weight(trig.triggered);
            if !w {
                terms.push((lp, false));
            } else if trig.focal_target == t.response {
                terms.push((lp, true));
            } else {
                let n = build_response_log_probs(&mut g, &self.model, t.prompt.tokens(), trig.focal_target.tokens())?;
                terms.push((n.token_log_probs, true));
            }
        }
        g.evaluate(&self.params).map_err(|e| self.diverged_or(e))?;
        let total = self.compose(&mut g, nodes.loss, &terms, trajs.len())?;

        let mut m = self.blank_metrics();
        m.align_loss = g.scalar_value(nodes.loss)?;
        m.focal_term = total.1;
        m.trigger_rate = triggers.iter().filter(|t| t.triggered).count() as f64 / trajs.len() as f64;
        m.mean_reward = trajs.iter().map(|t| t.terminal_reward).sum::<f64>() / trajs.len() as f64;
        m.mean_token_kl = rollout.mean_token_kl;
        let metrics = self.finish(&g, total.0, m)?;
        Ok(StepReport { metrics, triggers })
    }
}
