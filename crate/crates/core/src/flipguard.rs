//! Focal negative-flip constraint.
//!
//! A training example is flagged as a negative flip when the pre-aligned
//! policy's reward characterization beats the current policy's by more than
//! `epsilon`:
//!
//! * implicit (DPO): `log pi_0(y_w|x) - log pi(y_w|x)` on the chosen response;
//! * explicit (PPO): `R(x, y_ref) - R(x, y_pol)` with `y_ref` the cached
//!   greedy decode of the pre-aligned policy.
//!
//! Flagged examples receive a cross-entropy pull toward their focal target,
//! weighted by `gamma` and averaged over the whole batch. Gaps and the
//! indicator are plain numbers computed outside the graph, so no gradient
//! flows through them.

use alloc::format;
use alloc::vec::Vec;

use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::model::{build_response_log_probs, sequence_log_prob, PolicySnapshot};
use crate::numerics::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintMode {
    Off,
    /// Unconditional CE toward the focal target (indicator forced to 1).
    Kd,
    FlipGuard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Characterization {
    Implicit,
    Explicit,
}

/// Length normalization of the focal log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FocalNorm {
    #[default]
    TokenMean,
    SequenceSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipGuardConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub mode: ConstraintMode,
    pub characterization: Characterization,
    pub norm: FocalNorm,
}

impl Default for FlipGuardConfig {
    fn default() -> Self {
        FlipGuardConfig {
            gamma: 0.01,
            epsilon: 0.1,
            mode: ConstraintMode::FlipGuard,
            characterization: Characterization::Implicit,
            norm: FocalNorm::TokenMean,
        }
    }
}

impl FlipGuardConfig {
    pub fn off() -> Self {
        FlipGuardConfig { mode: ConstraintMode::Off, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Whether the penalty enters the loss at all.
    pub fn active(&self) -> bool {
        self.mode != ConstraintMode::Off
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Dpo,
    Ppo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlipTrigger {
    pub example_id: usize,
    pub delta: f64,
    pub triggered: bool,
    pub prompt: TokenSequence,
    pub focal_target: TokenSequence,
}

/// `log pi_pre(target|x) - log pi_current(target|x)`, sequence sums. The
/// partition function of the implied reward cancels and is never formed.
pub fn implicit_reward_gap(pre: &PolicySnapshot, current: &PolicySnapshot, prompt: &[u32], target: &[u32]) -> Result<f64> {
    Ok(sequence_log_prob(pre, prompt, target)?.total - sequence_log_prob(current, prompt, target)?.total)
}

/// `R(x, y_ref) - R(x, y_pol)`.
pub fn explicit_reward_gap(scorer: &dyn Scorer, prompt: &[u32], y_ref: &[u32], y_pol: &[u32]) -> Result<f64> {
    Ok(scorer.score(prompt, y_ref)? - scorer.score(prompt, y_pol)?)
}

/// 1 iff `delta > epsilon` (strict).
pub fn flip_indicator(delta: f64, epsilon: f64) -> u8 {
    u8::from(delta > epsilon)
}

/// DPO always targets the chosen response. PPO targets the reference
/// response when the flip fired and the policy response otherwise.
pub fn select_focal_target(
    triggered: bool,
    method: Method,
    y_chosen: Option<&TokenSequence>,
    y_ref: Option<&TokenSequence>,
    y_pol: Option<&TokenSequence>,
) -> Result<TokenSequence> {
    match method {
        Method::Dpo => y_chosen.cloned().ok_or(Error::EmptyInput("chosen response")),
        Method::Ppo if triggered => y_ref.cloned().ok_or(Error::MissingReference),
        Method::Ppo => {
            if y_ref.is_none() {
                return Err(Error::MissingReference);
            }
            y_pol.cloned().ok_or(Error::EmptyInput("policy response"))
        }
    }
}

/// Appends `gamma * (1/batch) * sum_i w_i * (-norm(log pi(target_i|x_i)))`
/// where each term is `(token log-prob node, weight)`. Zero-weight terms
/// are left out of the graph. Returns `None` when nothing contributes, which includes `gamma == 0`.
pub fn build_penalty(g: &mut Graph, terms: &[(NodeId, bool)], gamma: f64, norm: FocalNorm, batch: usize) -> Option<NodeId> {
    if gamma == 0.0 {
        return None;
    }
    let mut acc: Option<NodeId> = None;
    for &(lp, weight) in terms {
        if !weight {
            continue;
        }
        let term = match norm {
            FocalNorm::TokenMean => g.mean(lp),
            FocalNorm::SequenceSum => g.sum(lp),
        };
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    acc.map(|a| g.scale(a, -gamma / batch as f64))
}

fn penalty_value(policy: &PolicySnapshot, triggers: &[FlipTrigger], gamma: f64, norm: FocalNorm, force: bool) -> Result<f64> {
    if triggers.is_empty() {
        return Err(Error::EmptyInput("trigger batch"));
    }
    let mut g = Graph::new();
    let mut terms = Vec::with_capacity(triggers.len());
    for t in triggers {
        let weight = force || t.triggered;
        if weight {
            let nodes = build_response_log_probs(&mut g, policy.config(), t.prompt.tokens(), t.focal_target.tokens())?;
            terms.push((nodes.token_log_probs, true));
        }
    }
    let Some(p) = build_penalty(&mut g, &terms, gamma, norm, triggers.len()) else {
        return Ok(0.0);
    };
    g.evaluate(policy.params())?;
    g.scalar_value(p)
}

/// `gamma * mean over the batch of [triggered * (-mean token log pi(target|x))]`.
pub fn focal_penalty(policy: &PolicySnapshot, triggers: &[FlipTrigger], gamma: f64) -> Result<f64> {
    penalty_value(policy, triggers, gamma, FocalNorm::TokenMean, false)
}

pub fn focal_penalty_with(policy: &PolicySnapshot, triggers: &[FlipTrigger], gamma: f64, norm: FocalNorm) -> Result<f64> {
    penalty_value(policy, triggers, gamma, norm, false)
}

/// The focal penalty with every indicator forced to 1.
pub fn kd_penalty(policy: &PolicySnapshot, triggers: &[FlipTrigger], gamma: f64) -> Result<f64> {
    penalty_value(policy, triggers, gamma, FocalNorm::TokenMean, true)
}

pub fn flipguard_total_loss(align_loss: f64, penalty: f64) -> Result<f64> {
    if !align_loss.is_finite() || !penalty.is_finite() {
        return Err(Error::NonFinite { context: format!("loss components {align_loss} + {penalty}") });
    }
    Ok(align_loss + penalty)
}
