//! Regression audit: pairwise judging with a dead zone, flip statistics and
//! token-level KL between policies.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::data::{gold_reward_with, TokenSequence, WorldSpec};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, response_distributions, rm_score, PolicySnapshot, RewardHead};

/// Scores a response to a prompt.
pub trait Scorer {
    fn score(&self, prompt: &[u32], response: &[u32]) -> Result<f64>;
}

/// The programmatic gold reward.
#[derive(Debug, Clone, Default)]
pub struct GoldScorer {
    pub world: WorldSpec,
}

impl Scorer for GoldScorer {
    fn score(&self, _prompt: &[u32], response: &[u32]) -> Result<f64> {
        gold_reward_with(&self.world, response)
    }
}

/// A trained reward model.
#[derive(Debug, Clone)]
pub struct LearnedScorer {
    pub trunk: PolicySnapshot,
    pub head: RewardHead,
}

impl Scorer for LearnedScorer {
    fn score(&self, prompt: &[u32], response: &[u32]) -> Result<f64> {
        rm_score(&self.trunk, &self.head, prompt, response).map_err(|e| Error::Scorer(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum JudgeVerdict {
    PreBetter,
    PostBetter,
    Tie,
}

impl JudgeVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            JudgeVerdict::PreBetter => "PRE_BETTER",
            JudgeVerdict::PostBetter => "POST_BETTER",
            JudgeVerdict::Tie => "TIE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "PRE_BETTER" => Some(JudgeVerdict::PreBetter),
            "POST_BETTER" => Some(JudgeVerdict::PostBetter),
            "TIE" => Some(JudgeVerdict::Tie),
            _ => None,
        }
    }
}

/// Score changes no larger than `dead_zone` in either direction are ties.
pub fn judge_pair(score_pre: f64, score_post: f64, dead_zone: f64) -> JudgeVerdict {
    if score_pre - score_post > dead_zone {
        JudgeVerdict::PreBetter
    } else if score_post - score_pre > dead_zone {
        JudgeVerdict::PostBetter
    } else {
        JudgeVerdict::Tie
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub prompt_id: usize,
    pub prompt: TokenSequence,
    pub pre_response: TokenSequence,
    pub post_response: TokenSequence,
    pub pre_score: f64,
    pub post_score: f64,
    pub verdict: JudgeVerdict,
}

/// Greedy-decodes both policies on every prompt and judges the pair.
/// Records come back in the order of `prompts`.
pub fn evaluate_policy_pair(
    pre: &PolicySnapshot,
    post: &PolicySnapshot,
    prompts: &[(usize, TokenSequence)],
    judge: &dyn Scorer,
    dead_zone: f64,
    max_len: usize,
) -> Result<Vec<EvalRecord>> {
    if !(dead_zone >= 0.0) {
        return Err(Error::InvalidConfig(format!("dead zone must be >= 0, got {dead_zone}")));
    }
    prompts
        .iter()
        .map(|(id, prompt)| {
            let at = |e: Error| Error::InvalidConfig(format!("prompt {id}: {e}"));
            let p = prompt.tokens();
            let budget = max_len.min(pre.config().max_seq_len.saturating_sub(p.len() + 1)).max(1);
            let pre_response = greedy_decode(pre, p, budget).map_err(at)?;
            let post_response = greedy_decode(post, p, budget).map_err(at)?;
            let pre_score = judge.score(p, &pre_response).map_err(at)?;
            let post_score = judge.score(p, &post_response).map_err(at)?;
            Ok(EvalRecord {
                prompt_id: *id,
                prompt: prompt.clone(),
                pre_response: TokenSequence(pre_response),
                post_response: TokenSequence(post_response),
                pre_score,
                post_score,
                verdict: judge_pair(pre_score, post_score, dead_zone),
            })
        })
        .collect()
}

/// Verdict counts over an evaluation. Rates are count ratios; the counts
/// always partition `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipStats {
    pub n: usize,
    pub pre_better: usize,
    pub post_better: usize,
    pub ties: usize,
    pub nfr: f64,
    pub win_rate: f64,
    pub tie_rate: f64,
}

impl FlipStats {
    pub fn from_counts(pre_better: usize, post_better: usize, ties: usize) -> Result<Self> {
        let n = pre_better + post_better + ties;
        if n == 0 {
            return Err(Error::EmptyInput("evaluation records"));
        }
        let d = n as f64;
        let nfr = pre_better as f64 / d;
        let win_rate = post_better as f64 / d;
        // Taking the tie rate as the complement makes `(nfr + win_rate) +
        // tie_rate` exactly 1; it is within an ulp of `ties / n`.
        let tie_rate = 1.0 - (nfr + win_rate);
        Ok(FlipStats { n, pre_better, post_better, ties, nfr, win_rate, tie_rate })
    }
}

pub fn flip_stats(records: &[EvalRecord]) -> Result<FlipStats> {
    flip_stats_from_verdicts(records.iter().map(|r| r.verdict))
}

pub fn flip_stats_from_verdicts(verdicts: impl IntoIterator<Item = JudgeVerdict>) -> Result<FlipStats> {
    let (mut pre, mut post, mut tie) = (0, 0, 0);
    for v in verdicts {
        match v {
            JudgeVerdict::PreBetter => pre += 1,
            JudgeVerdict::PostBetter => post += 1,
            JudgeVerdict::Tie => tie += 1,
        }
    }
    FlipStats::from_counts(pre, post, tie)
}

/// `sum_v p(v) * (log p(v) - log q(v))` for one position, from log-probs.
pub fn kl_row(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p.iter().zip(log_q).map(|(lp, lq)| libm::exp(*lp) * (lp - lq)).sum()
}

/// Mean over every response position of `KL(current || reference)` over
/// the full vocabulary.
pub fn mean_token_kl(
    current: &PolicySnapshot,
    reference: &PolicySnapshot,
    items: &[(TokenSequence, TokenSequence)],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (prompt, response) in items {
        let p = response_distributions(current, prompt.tokens(), response.tokens())?;
        let q = response_distributions(reference, prompt.tokens(), response.tokens())?;
        for (pr, qr) in p.iter().zip(&q) {
            total += kl_row(pr, qr);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("KL positions"));
    }
    Ok(total / count as f64)
}
