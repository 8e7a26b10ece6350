//! Flat `key = value` run configuration: defaults, then a file, then
//! command-line overrides, later sources winning.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use flipguard_core::alignment::{AlignConfig, AlignMethod, RewardSource};
use flipguard_core::data::{SplitSizes, WorldSpec, VOCAB_SIZE};
use flipguard_core::flipguard::{Characterization, ConstraintMode, FlipGuardConfig, FocalNorm};
use flipguard_core::model::ModelConfig;

use crate::error::{Error, Result};

/// A value type that can appear on the right of `key = value`.
pub trait ConfigValue: Sized {
    const EXPECTED: &'static str;
    fn parse_value(raw: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl ConfigValue for u64 {
    const EXPECTED: &'static str = "a non-negative integer";
    fn parse_value(raw: &str) -> Option<Self> {
        raw.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for usize {
    const EXPECTED: &'static str = "a non-negative integer";
    fn parse_value(raw: &str) -> Option<Self> {
        raw.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    const EXPECTED: &'static str = "a finite number";
    fn parse_value(raw: &str) -> Option<Self> {
        raw.parse().ok().filter(|x: &f64| x.is_finite())
    }
    // Display prints the shortest string that parses back to the same bits.
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    const EXPECTED: &'static str = "true or false";
    fn parse_value(raw: &str) -> Option<Self> {
        raw.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for AlignMethod {
    const EXPECTED: &'static str = "one of dpo, ppo";
    fn parse_value(raw: &str) -> Option<Self> {
        AlignMethod::parse(raw).filter(|m| matches!(m, AlignMethod::Dpo | AlignMethod::Ppo))
    }
    fn render(&self) -> String {
        self.as_str().to_string()
    }
}

impl ConfigValue for RewardSource {
    const EXPECTED: &'static str = "one of gold, learned";
    fn parse_value(raw: &str) -> Option<Self> {
        match raw {
            "gold" => Some(RewardSource::Gold),
            "learned" => Some(RewardSource::Learned),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            RewardSource::Gold => "gold",
            RewardSource::Learned => "learned",
        }
        .to_string()
    }
}

impl ConfigValue for ConstraintMode {
    const EXPECTED: &'static str = "one of none, kd, flipguard";
    fn parse_value(raw: &str) -> Option<Self> {
        match raw {
            "none" | "off" => Some(ConstraintMode::Off),
            "kd" => Some(ConstraintMode::Kd),
            "flipguard" => Some(ConstraintMode::FlipGuard),
            _ => None,
        }
    }
    fn render(&self) -> String {
        constraint_name(*self).to_string()
    }
}

impl ConfigValue for FocalNorm {
    const EXPECTED: &'static str = "one of token_mean, sequence_sum";
    fn parse_value(raw: &str) -> Option<Self> {
        match raw {
            "token_mean" => Some(FocalNorm::TokenMean),
            "sequence_sum" => Some(FocalNorm::SequenceSum),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            FocalNorm::TokenMean => "token_mean",
            FocalNorm::SequenceSum => "sequence_sum",
        }
        .to_string()
    }
}

pub fn constraint_name(mode: ConstraintMode) -> &'static str {
    match mode {
        ConstraintMode::Off => "none",
        ConstraintMode::Kd => "kd",
        ConstraintMode::FlipGuard => "flipguard",
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident: $ty:ty = $default:expr,)*) => {
        /// Every tunable of a run. All keys always hold a value.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        pub const KEYS: &[&str] = &[$(stringify!($key),)*];

        impl RunConfig {
            /// Parses `raw` into the slot named `key`.
            pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_value(raw).ok_or_else(|| Error::ConfigType {
                            key: key.to_string(),
                            expected: <$ty as ConfigValue>::EXPECTED,
                            value: raw.to_string(),
                        })?;
                    })*
                    _ => return Err(unknown_key(key)),
                }
                Ok(())
            }

            /// `(key, rendered value)` for every key, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), ConfigValue::render(&self.$key)),)*]
            }
        }
    };
}

run_config! {
    seed: u64 = 0,
    d_model: usize = 32,
    n_layers: usize = 2,
    n_heads: usize = 2,
    max_seq_len: usize = 24,
    sft_size: usize = 800,
    rm_size: usize = 1600,
    align_size: usize = 1600,
    test_size: usize = 200,
    /// Chance a response token copies the class of a prompt token.
    copy_prob: f64 = 0.3,
    /// Chance a response token is its class's prompt anchor.
    anchor_prob: f64 = 1.0,
    min_margin: f64 = 0.2,
    sft_steps: usize = 2000,
    rm_steps: usize = 2000,
    /// Alignment steps.
    steps: usize = 2000,
    method: AlignMethod = AlignMethod::Dpo,
    learning_rate: f64 = 1e-3,
    batch_size: usize = 16,
    beta: f64 = 0.1,
    kl_coeff: f64 = 0.1,
    rollouts_per_prompt: usize = 4,
    clip_ratio: f64 = 0.2,
    temperature: f64 = 1.0,
    max_new_tokens: usize = 13,
    reward_source: RewardSource = RewardSource::Gold,
    constraint: ConstraintMode = ConstraintMode::FlipGuard,
    gamma: f64 = 0.01,
    epsilon: f64 = 0.1,
    focal_norm: FocalNorm = FocalNorm::TokenMean,
    dead_zone: f64 = 0.1,
    judge: RewardSource = RewardSource::Gold,
    /// Write the per-example flip audit beside the metrics log.
    dump_triggers: bool = false,
}

fn unknown_key(key: &str) -> Error {
    let suggestion = KEYS
        .iter()
        .map(|k| (strsim::levenshtein(key, k), *k))
        .filter(|(d, k)| *d <= 2.max(k.len() / 3))
        .min()
        .map(|(_, k)| k.to_string());
    Error::UnknownKey { key: key.to_string(), suggestion }
}

impl fmt::Display for RunConfig {
    /// Renders the config in its own file syntax.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Rebuilds a config from a rendered map, e.g. one stored in a manifest.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// One-line `key=value;...` dump for error messages.
    pub fn one_line(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn world(&self) -> WorldSpec {
        WorldSpec {
            copy_prob: self.copy_prob,
            anchor_prob: self.anchor_prob,
            min_margin: self.min_margin,
            ..WorldSpec::default()
        }
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes { sft: self.sft_size, rm: self.rm_size, align: self.align_size, test: self.test_size }
    }

    /// Optimizer settings for `method`; the step count follows the stage.
    pub fn align(&self, method: AlignMethod) -> AlignConfig {
        AlignConfig {
            method,
            beta: self.beta,
            kl_coeff: self.kl_coeff,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            steps: match method {
                AlignMethod::Sft => self.sft_steps,
                AlignMethod::Rm => self.rm_steps,
                AlignMethod::Dpo | AlignMethod::Ppo => self.steps,
            },
            rollouts_per_prompt: self.rollouts_per_prompt,
            clip_ratio: self.clip_ratio,
            seed: self.seed,
            reward_source: self.reward_source,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
        }
    }

    /// The constraint for the configured alignment method; the reward
    /// characterization follows the method.
    pub fn guard(&self) -> FlipGuardConfig {
        FlipGuardConfig {
            gamma: self.gamma,
            epsilon: self.epsilon,
            mode: self.constraint,
            characterization: match self.method {
                AlignMethod::Ppo => Characterization::Explicit,
                _ => Characterization::Implicit,
            },
            norm: self.focal_norm,
        }
    }

    /// Cross-key validation beyond per-key types.
    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.world().validate()?;
        self.align(self.method).validate()?;
        self.guard().validate()?;
        if self.dead_zone.is_nan() || self.dead_zone < 0.0 {
            return Err(Error::ConfigType { key: "dead_zone".into(), expected: "a number >= 0", value: self.dead_zone.to_string() });
        }
        let s = self.sizes();
        if s.sft == 0 || s.rm == 0 || s.align == 0 || s.test == 0 {
            return Err(Error::ConfigType { key: "*_size".into(), expected: "a positive integer", value: "0".into() });
        }
        Ok(())
    }
}

/// Splits `key=value` (whitespace around either side allowed).
pub fn split_assignment(text: &str) -> Option<(&str, &str)> {
    let (k, v) = text.split_once('=')?;
    let (k, v) = (k.trim(), v.trim());
    (!k.is_empty()).then_some((k, v))
}

/// Defaults, then `path` (if any), then `overrides` in order.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    load_config_over(RunConfig::default(), path, overrides)
}

/// As [`load_config`] but layered over `base` instead of the defaults.
pub fn load_config_over(base: RunConfig, path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = split_assignment(body).ok_or_else(|| Error::ConfigSyntax {
                path: path.to_path_buf(),
                line: i + 1,
                text: line.trim_end_matches('\r').to_string(),
            })?;
            cfg.set(k, v)?;
        }
    }
    for o in overrides {
        let (k, v) = split_assignment(o).ok_or_else(|| Error::Usage(format!("override must be key=value, got {o:?}")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
