//! Line-delimited JSON record files and checkpoint files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use flipguard_core::alignment::{StepMetrics, TriggerRecord};
use flipguard_core::checkpoint;
use flipguard_core::data::{validate_example, PreferenceExample, SftExample, TokenSequence, VOCAB_SIZE};
use flipguard_core::eval::{EvalRecord, JudgeVerdict};
use flipguard_core::model::{rm_params, PolicySnapshot, RewardHead, REWARD_BIAS, REWARD_WEIGHT};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairLine {
    prompt: Vec<u32>,
    chosen: Vec<u32>,
    rejected: Vec<u32>,
    gold_margin: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SftLine {
    prompt: Vec<u32>,
    chosen: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricLine {
    step: usize,
    method: String,
    loss: f64,
    align_loss: f64,
    focal_term: f64,
    trigger_rate: f64,
    mean_token_kl: f64,
    mean_reward: f64,
    grad_norm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TriggerLine {
    step: usize,
    example_id: usize,
    delta: f64,
    triggered: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    prompt_id: usize,
    prompt: Vec<u32>,
    pre_response: Vec<u32>,
    post_response: Vec<u32>,
    pre_score: f64,
    post_score: f64,
    verdict: String,
}

/// A metrics-log entry as read back from disk; `method` stays a string so
/// logs from any stage can be inspected.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedStep {
    pub step: usize,
    pub method: String,
    pub loss: f64,
    pub align_loss: f64,
    pub focal_term: f64,
    pub trigger_rate: f64,
    pub mean_token_kl: f64,
    pub mean_reward: f64,
    pub grad_norm: f64,
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes one JSON object per line with LF endings.
fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses every non-blank line, tolerating CRLF endings. `check` sees the
/// parsed line and its 1-based number.
fn read_lines<T: DeserializeOwned, U>(path: &Path, mut check: impl FnMut(T) -> Result<U, String>) -> Result<Vec<U>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.trim_end_matches('\r');
        if text.trim().is_empty() {
            continue;
        }
        let at = |message: String| Error::Record { path: path.to_path_buf(), line: i + 1, message };
        let parsed: T = serde_json::from_str(text).map_err(|e| at(e.to_string()))?;
        out.push(check(parsed).map_err(at)?);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, examples: &[PreferenceExample]) -> Result<()> {
    write_lines(
        path,
        examples.iter().map(|e| PairLine {
            prompt: e.prompt.0.clone(),
            chosen: e.chosen.0.clone(),
            rejected: e.rejected.0.clone(),
            gold_margin: e.gold_margin,
        }),
    )
}

pub fn load_dataset(path: &Path) -> Result<Vec<PreferenceExample>> {
    read_lines(path, |l: PairLine| {
        let e = PreferenceExample {
            prompt: TokenSequence(l.prompt),
            chosen: TokenSequence(l.chosen),
            rejected: TokenSequence(l.rejected),
            gold_margin: l.gold_margin,
        };
        validate_example(&e, VOCAB_SIZE).map_err(|e| e.to_string())?;
        Ok(e)
    })
}

pub fn save_sft(path: &Path, examples: &[SftExample]) -> Result<()> {
    write_lines(path, examples.iter().map(|e| SftLine { prompt: e.prompt.0.clone(), chosen: e.target.0.clone() }))
}

pub fn load_sft(path: &Path) -> Result<Vec<SftExample>> {
    read_lines(path, |l: SftLine| {
        let e = SftExample { prompt: TokenSequence(l.prompt), target: TokenSequence(l.chosen) };
        e.prompt.validate_prompt(VOCAB_SIZE).map_err(|e| e.to_string())?;
        e.target.validate_response(VOCAB_SIZE).map_err(|e| e.to_string())?;
        Ok(e)
    })
}

pub fn save_policy(path: &Path, policy: &PolicySnapshot) -> Result<()> {
    write_bytes(path, &checkpoint::encode(policy.params()))
}

pub fn load_policy(path: &Path) -> Result<PolicySnapshot> {
    let params = checkpoint::decode(&read_bytes(path)?).map_err(|e| at_path(path, e))?;
    PolicySnapshot::from_params(params).map_err(|e| at_path(path, e))
}

/// Trunk and head in one checkpoint.
pub fn save_reward_model(path: &Path, trunk: &PolicySnapshot, head: &RewardHead) -> Result<()> {
    write_bytes(path, &checkpoint::encode(&rm_params(trunk, head)))
}

pub fn load_reward_model(path: &Path) -> Result<(PolicySnapshot, RewardHead)> {
    let mut params = checkpoint::decode(&read_bytes(path)?).map_err(|e| at_path(path, e))?;
    let head = RewardHead::from_params(&params).map_err(|e| at_path(path, e))?;
    params.remove(REWARD_WEIGHT);
    params.remove(REWARD_BIAS);
    let trunk = PolicySnapshot::from_params(params).map_err(|e| at_path(path, e))?;
    Ok((trunk, head))
}

fn at_path(path: &Path, source: flipguard_core::Error) -> Error {
    Error::Artifact { path: path.to_path_buf(), source }
}

/// Appends metrics and trigger lines as training proceeds.
pub struct TrainLog {
    metrics: (PathBuf, BufWriter<File>),
    triggers: Option<(PathBuf, BufWriter<File>)>,
}

impl TrainLog {
    pub fn create(metrics: &Path, triggers: Option<&Path>) -> Result<Self> {
        Ok(TrainLog {
            metrics: (metrics.to_path_buf(), create(metrics)?),
            triggers: match triggers {
                Some(p) => Some((p.to_path_buf(), create(p)?)),
                None => None,
            },
        })
    }

    pub fn record(&mut self, m: &StepMetrics, triggers: &[TriggerRecord]) -> Result<()> {
        let line = MetricLine {
            step: m.step,
            method: m.method.as_str().to_string(),
            loss: m.loss,
            align_loss: m.align_loss,
            focal_term: m.focal_term,
            trigger_rate: m.trigger_rate,
            mean_token_kl: m.mean_token_kl,
            mean_reward: m.mean_reward,
            grad_norm: m.grad_norm,
        };
        let (path, w) = &mut self.metrics;
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
        if let Some((path, w)) = &mut self.triggers {
            for t in triggers {
                let line = TriggerLine { step: t.step, example_id: t.example_id, delta: t.delta, triggered: t.triggered };
                serde_json::to_writer(&mut *w, &line)?;
                w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        let (path, w) = &mut self.metrics;
        w.flush().map_err(|e| Error::io(&*path, e))?;
        if let Some((path, w)) = &mut self.triggers {
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }
}

pub fn load_metrics(path: &Path) -> Result<Vec<LoggedStep>> {
    read_lines(path, |l: MetricLine| {
        Ok(LoggedStep {
            step: l.step,
            method: l.method,
            loss: l.loss,
            align_loss: l.align_loss,
            focal_term: l.focal_term,
            trigger_rate: l.trigger_rate,
            mean_token_kl: l.mean_token_kl,
            mean_reward: l.mean_reward,
            grad_norm: l.grad_norm,
        })
    })
}

pub fn save_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    write_lines(
        path,
        records.iter().map(|r| RecordLine {
            prompt_id: r.prompt_id,
            prompt: r.prompt.0.clone(),
            pre_response: r.pre_response.0.clone(),
            post_response: r.post_response.0.clone(),
            pre_score: r.pre_score,
            post_score: r.post_score,
            verdict: r.verdict.as_str().to_string(),
        }),
    )
}

pub fn load_records(path: &Path) -> Result<Vec<EvalRecord>> {
    read_lines(path, |l: RecordLine| {
        let verdict = JudgeVerdict::parse(&l.verdict).ok_or_else(|| format!("unknown verdict {:?}", l.verdict))?;
        Ok(EvalRecord {
            prompt_id: l.prompt_id,
            prompt: TokenSequence(l.prompt),
            pre_response: TokenSequence(l.pre_response),
            post_response: TokenSequence(l.post_response),
            pre_score: l.pre_score,
            post_score: l.post_score,
            verdict,
        })
    })
}
