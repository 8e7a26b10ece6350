//! Synthetic preference world.
//!
//! Token ids: 0 = BOS, 1 = EOS, 2..=15 helpful, 16..=23 neutral,
//! 24..=31 harmful. The gold reward of a response is the mean class weight
//! of its tokens before EOS, so it is length invariant and bounded by the
//! extreme weights.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::EOS;
use crate::rng::{Rng, Stream};

pub const VOCAB_SIZE: usize = 32;
pub const HELPFUL: core::ops::RangeInclusive<u32> = 2..=15;
pub const NEUTRAL: core::ops::RangeInclusive<u32> = 16..=23;
pub const HARMFUL: core::ops::RangeInclusive<u32> = 24..=31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TokenClass {
    Special,
    Helpful,
    Neutral,
    Harmful,
}

pub fn token_class(token: u32) -> TokenClass {
    if HELPFUL.contains(&token) {
        TokenClass::Helpful
    } else if NEUTRAL.contains(&token) {
        TokenClass::Neutral
    } else if HARMFUL.contains(&token) {
        TokenClass::Harmful
    } else {
        TokenClass::Special
    }
}

/// A run of token ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        TokenSequence(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Prompts hold no EOS and only in-vocabulary ids.
    pub fn validate_prompt(&self, vocab: usize) -> Result<()> {
        self.check_vocab(vocab)?;
        if self.0.contains(&EOS) {
            return Err(Error::InvalidConfig(format!("prompt contains EOS: {:?}", self.0)));
        }
        Ok(())
    }

    /// Responses end with exactly one EOS.
    pub fn validate_response(&self, vocab: usize) -> Result<()> {
        self.check_vocab(vocab)?;
        match self.0.split_last() {
            Some((&EOS, body)) if !body.contains(&EOS) => Ok(()),
            Some(_) => Err(Error::MissingEos),
            None => Err(Error::EmptyResponse),
        }
    }

    fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab) {
            Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        TokenSequence(v)
    }
}

impl AsRef<[u32]> for TokenSequence {
    fn as_ref(&self) -> &[u32] {
        &self.0
    }
}

/// Class mixture for one response generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMix {
    pub helpful: f64,
    pub neutral: f64,
    pub harmful: f64,
}

impl ClassMix {
    fn weights(&self) -> [f64; 3] {
        [self.helpful, self.neutral, self.harmful]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub helpful_weight: f64,
    pub neutral_weight: f64,
    pub harmful_weight: f64,
    /// Inclusive prompt length range.
    pub prompt_len: (usize, usize),
    /// Inclusive response length range, EOS excluded.
    pub response_len: (usize, usize),
    pub min_margin: f64,
    pub chosen_mix: ClassMix,
    pub rejected_mix: ClassMix,
    /// Probability that a response token takes its class from a uniformly
    /// drawn prompt token instead of from the class mixture.
    pub copy_prob: f64,
    /// Probability that a token of a given class is the prompt's anchor for
    /// that class rather than a uniform draw within the class.
    pub anchor_prob: f64,
    pub max_resamples: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            helpful_weight: 1.0,
            neutral_weight: 0.0,
            harmful_weight: -2.0,
            prompt_len: (4, 8),
            response_len: (3, 12),
            min_margin: 0.2,
            chosen_mix: ClassMix { helpful: 0.6, neutral: 0.3, harmful: 0.1 },
            rejected_mix: ClassMix { helpful: 0.4, neutral: 0.2, harmful: 0.4 },
            copy_prob: 0.3,
            anchor_prob: 1.0,
            max_resamples: 1000,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.helpful_weight, self.neutral_weight, self.harmful_weight];
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(Error::InvalidConfig(format!("class weights must be finite: {weights:?}")));
        }
        if !(self.min_margin > 0.0) {
            return Err(Error::InvalidConfig(format!("min margin must be positive, got {}", self.min_margin)));
        }
        let ranges_ok = self.prompt_len.0 >= 1
            && self.prompt_len.0 <= self.prompt_len.1
            && self.response_len.0 <= self.response_len.1;
        if !ranges_ok {
            return Err(Error::InvalidConfig(format!(
                "bad length ranges: prompt {:?}, response {:?}",
                self.prompt_len, self.response_len
            )));
        }
        for mix in [self.chosen_mix, self.rejected_mix] {
            let w = mix.weights();
            if w.iter().any(|p| !(*p >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidConfig(format!("bad class mixture {mix:?}")));
            }
        }
        for (name, p) in [("copy_prob", self.copy_prob), ("anchor_prob", self.anchor_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} {p} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn class_weight(&self, token: u32) -> f64 {
        match token_class(token) {
            TokenClass::Helpful => self.helpful_weight,
            TokenClass::Neutral => self.neutral_weight,
            TokenClass::Harmful => self.harmful_weight,
            TokenClass::Special => 0.0,
        }
    }

    /// Longest response a generator can emit, EOS included.
    pub fn max_response_tokens(&self) -> usize {
        self.response_len.1 + 1
    }
}

/// Mean class weight of the tokens before EOS; 0 for an EOS-only response.
/// Special tokens other than EOS count with weight 0.
pub fn gold_reward_with(world: &WorldSpec, response: &[u32]) -> Result<f64> {
    let (&last, body) = response.split_last().ok_or(Error::EmptyResponse)?;
    if last != EOS {
        return Err(Error::MissingEos);
    }
    if body.is_empty() {
        return Ok(0.0);
    }
    Ok(body.iter().map(|&t| world.class_weight(t)).sum::<f64>() / body.len() as f64)
}

/// Gold reward under the default world weights. The prompt does not enter
/// the score.
pub fn gold_reward(_prompt: &[u32], response: &[u32]) -> Result<f64> {
    gold_reward_with(&WorldSpec::default(), response)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceExample {
    pub prompt: TokenSequence,
    pub chosen: TokenSequence,
    pub rejected: TokenSequence,
    pub gold_margin: f64,
}

/// Supervised example: the chosen response only.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub prompt: TokenSequence,
    pub target: TokenSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub sft: usize,
    pub rm: usize,
    pub align: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    /// The 2:4:4 SFT/RM/alignment ratio plus a held-out test split.
    fn default() -> Self {
        SplitSizes { sft: 800, rm: 1600, align: 1600, test: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sft: Vec<SftExample>,
    pub rm: Vec<PreferenceExample>,
    pub align: Vec<PreferenceExample>,
    pub test: Vec<PreferenceExample>,
}

const CLASSES: [TokenClass; 3] = [TokenClass::Helpful, TokenClass::Neutral, TokenClass::Harmful];

fn class_range(class: TokenClass) -> core::ops::RangeInclusive<u32> {
    match class {
        TokenClass::Helpful => HELPFUL,
        TokenClass::Neutral => NEUTRAL,
        _ => HARMFUL,
    }
}

/// The prompt's representative token for `class`: its first token of that
/// class, or the lowest id of the class when the prompt has none.
pub fn anchor_token(prompt: &[u32], class: TokenClass) -> u32 {
    prompt.iter().copied().find(|&t| token_class(t) == class).unwrap_or(*class_range(class).start())
}

fn draw_response(world: &WorldSpec, prompt: &[u32], mix: ClassMix, rng: &mut Rng) -> Vec<u32> {
    let len = rng.range_inclusive(world.response_len.0, world.response_len.1);
    let weights = mix.weights();
    let mut out = Vec::with_capacity(len + 1);
    for _ in 0..len {
        let class = if world.copy_prob > 0.0 && rng.uniform() < world.copy_prob {
            token_class(prompt[rng.below(prompt.len())])
        } else {
            CLASSES[rng.categorical(&weights)]
        };
        let tok = if world.anchor_prob >= 1.0 || rng.uniform() < world.anchor_prob {
            anchor_token(prompt, class)
        } else {
            let r = class_range(class);
            rng.range_inclusive(*r.start() as usize, *r.end() as usize) as u32
        };
        out.push(tok);
    }
    out.push(EOS);
    out
}

fn draw_prompt(world: &WorldSpec, rng: &mut Rng) -> Vec<u32> {
    let len = rng.range_inclusive(world.prompt_len.0, world.prompt_len.1);
    // Uniform over the non-special ids.
    (0..len).map(|_| (2 + rng.below(VOCAB_SIZE - 2)) as u32).collect()
}

/// Draws a (chosen, rejected) pair for `prompt`, resampling both until the
/// gold margin is reached.
pub fn draw_pair(world: &WorldSpec, prompt: &[u32], rng: &mut Rng) -> Result<PreferenceExample> {
    for _ in 0..world.max_resamples {
        let chosen = draw_response(world, prompt, world.chosen_mix, rng);
        let rejected = draw_response(world, prompt, world.rejected_mix, rng);
        let margin = gold_reward_with(world, &chosen)? - gold_reward_with(world, &rejected)?;
        if margin >= world.min_margin {
            return Ok(PreferenceExample {
                prompt: TokenSequence(prompt.to_vec()),
                chosen: TokenSequence(chosen),
                rejected: TokenSequence(rejected),
                gold_margin: margin,
            });
        }
    }
    Err(Error::MarginUnreachable { attempts: world.max_resamples })
}

/// Deterministic SFT/RM/alignment/test splits with pairwise-disjoint
/// prompts.
pub fn generate_dataset(world: &WorldSpec, sizes: SplitSizes, seed: u64) -> Result<Dataset> {
    world.validate()?;
    if sizes.sft == 0 || sizes.rm == 0 || sizes.align == 0 || sizes.test == 0 {
        return Err(Error::InvalidConfig(format!("split sizes must be positive: {sizes:?}")));
    }
    let mut rng = Rng::stream(seed, Stream::Data);
    let mut seen: BTreeSet<Vec<u32>> = BTreeSet::new();
    let mut split = |n: usize, rng: &mut Rng| -> Result<Vec<PreferenceExample>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let prompt = draw_prompt(world, rng);
            if !seen.insert(prompt.clone()) {
                continue;
            }
            out.push(draw_pair(world, &prompt, rng)?);
        }
        Ok(out)
    };
    let sft = split(sizes.sft, &mut rng)?
        .into_iter()
        .map(|e| SftExample { prompt: e.prompt, target: e.chosen })
        .collect();
    let rm = split(sizes.rm, &mut rng)?;
    let align = split(sizes.align, &mut rng)?;
    let test = split(sizes.test, &mut rng)?;
    Ok(Dataset { sft, rm, align, test })
}

/// Checks every sequence of an example against the vocabulary and the
/// prompt/response conventions.
pub fn validate_example(e: &PreferenceExample, vocab: usize) -> Result<()> {
    e.prompt.validate_prompt(vocab)?;
    e.chosen.validate_response(vocab)?;
    e.rejected.validate_response(vocab)?;
    if !e.gold_margin.is_finite() {
        return Err(Error::NonFinite { context: format!("gold margin {}", e.gold_margin) });
    }
    Ok(())
}
