//! Pipeline stages. Each stage writes into its own directory
//! `<root>/<command>-<seed>-<fingerprint>` and leaves a manifest there; the
//! fingerprint hashes the command, the resolved config and the contents of
//! every input, so identical work lands in an identically named directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flipguard_core::alignment::{AlignMethod, RewardSource, StepMetrics, StepReport, TrainData, Trainer};
use flipguard_core::data::{generate_dataset, gold_reward_with, TokenSequence};
use flipguard_core::eval::{evaluate_policy_pair, flip_stats, mean_token_kl, GoldScorer, LearnedScorer, Scorer};
use flipguard_core::flipguard::FlipGuardConfig;
use flipguard_core::model::{fnv1a, init_params, PolicySnapshot};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{self, TrainLog};
use crate::manifest::{RunManifest, CODE_FINGERPRINT};
use crate::report;

pub const SFT_DATA: &str = "sft.jsonl";
pub const RM_DATA: &str = "rm.jsonl";
pub const ALIGN_DATA: &str = "align.jsonl";
pub const TEST_DATA: &str = "test.jsonl";
pub const POLICY_FILE: &str = "policy.fgck";
pub const REWARD_FILE: &str = "reward.fgck";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRIGGERS_FILE: &str = "triggers.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";

/// Called before every optimizer step's parameters change: sees the
/// policy the step was computed at and the step's report.
pub type StepObserver<'a> = &'a mut dyn FnMut(&PolicySnapshot, &StepReport);

/// A directory is taken to hold `file`; anything else is the file itself.
pub fn artifact(path: &Path, file: &str, what: &'static str) -> Result<PathBuf> {
    let p = if path.is_dir() { path.join(file) } else { path.to_path_buf() };
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact { path: p, what })
    }
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Steps `trainer` `steps` times, logging every step, and returns the last
/// step's metrics. A non-finite loss aborts with the step number and the
/// full config.
pub fn run_training(
    trainer: &mut Trainer,
    steps: usize,
    log: &mut TrainLog,
    cfg: &RunConfig,
    mut observer: Option<StepObserver<'_>>,
) -> Result<Option<StepMetrics>> {
    let mut last = None;
    for _ in 0..steps {
        let before = match observer {
            Some(_) => Some(trainer.snapshot()?),
            None => None,
        };
        let report = trainer.step().map_err(|e| match e {
            flipguard_core::Error::Diverged { step, loss } => Error::Diverged { step, loss, config: cfg.one_line() },
            other => other.into(),
        })?;
        log.record(&report.metrics, &report.triggers)?;
        if let (Some(f), Some(before)) = (observer.as_mut(), before.as_ref()) {
            f(before, &report);
        }
        last = Some(report.metrics);
    }
    Ok(last)
}

type StageOutput = (Vec<(&'static str, PathBuf)>, BTreeMap<String, f64>);

pub struct Pipeline {
    pub root: PathBuf,
    /// Recorded verbatim in every manifest this pipeline writes.
    pub argv: Vec<String>,
}

impl Pipeline {
    pub fn new(root: impl Into<PathBuf>, argv: Vec<String>) -> Self {
        Pipeline { root: root.into(), argv }
    }

    /// Hashes, creates the run directory, runs `body` in it and writes the
    /// manifest. `hashed` are the files whose contents identify the run.
    fn run(
        &self,
        command: &str,
        cfg: &RunConfig,
        inputs: Vec<(String, PathBuf)>,
        hashed: &[PathBuf],
        body: impl FnOnce(&Path) -> Result<StageOutput>,
    ) -> Result<RunManifest> {
        let start = Instant::now();
        let mut id_bytes = format!("{command}\n{cfg}").into_bytes();
        for p in hashed {
            id_bytes.extend_from_slice(&fnv1a(&io::read_bytes(p)?).to_le_bytes());
        }
        let run_id = format!("{command}-{}-{:08x}", cfg.seed, fnv1a(&id_bytes) >> 32);
        let dir = self.root.join(&run_id);
        io::create_dir(&dir)?;
        let dir = dir.canonicalize().map_err(|e| Error::io(&dir, e))?;
        let (outputs, metrics) = body(&dir)?;
        let manifest = RunManifest {
            run_id,
            command: command.to_string(),
            argv: self.argv.clone(),
            config: cfg.to_map(),
            seeds: BTreeMap::from([("seed".to_string(), cfg.seed)]),
            inputs: inputs.into_iter().map(|(k, p)| (k, display(&p))).collect(),
            outputs: outputs.into_iter().map(|(k, p)| (k.to_string(), display(&p))).collect(),
            code_fingerprint: CODE_FINGERPRINT.to_string(),
            duration_secs: start.elapsed().as_secs_f64(),
            metrics,
        };
        manifest.save(&dir)?;
        Ok(manifest)
    }

    pub fn gen_data(&self, cfg: &RunConfig) -> Result<RunManifest> {
        self.run("gen-data", cfg, Vec::new(), &[], |dir| {
            let ds = generate_dataset(&cfg.world(), cfg.sizes(), cfg.seed)?;
            let files = [(SFT_DATA, "sft"), (RM_DATA, "rm"), (ALIGN_DATA, "align"), (TEST_DATA, "test")];
            let paths: Vec<PathBuf> = files.iter().map(|(f, _)| dir.join(f)).collect();
            io::save_sft(&paths[0], &ds.sft)?;
            io::save_dataset(&paths[1], &ds.rm)?;
            io::save_dataset(&paths[2], &ds.align)?;
            io::save_dataset(&paths[3], &ds.test)?;
            let outputs = files.iter().zip(paths).map(|((_, role), p)| (*role, p)).collect();
            Ok((outputs, BTreeMap::new()))
        })
    }

    pub fn sft(&self, cfg: &RunConfig, data: &Path) -> Result<RunManifest> {
        let data = artifact(data, SFT_DATA, "SFT split")?;
        self.run("sft", cfg, vec![("data".into(), data.clone())], std::slice::from_ref(&data), |dir| {
            let examples = io::load_sft(&data)?;
            let init = init_params(&cfg.model(), cfg.seed)?;
            let align = cfg.align(AlignMethod::Sft);
            let mut trainer = Trainer::new(align, FlipGuardConfig::off(), init, None, TrainData::Sft(examples))?;
            let metrics = train_into(dir, &mut trainer, align.steps, cfg, false, None)?;
            let policy = dir.join(POLICY_FILE);
            io::save_policy(&policy, &trainer.snapshot()?)?;
            Ok((vec![("policy", policy), ("metrics", dir.join(METRICS_FILE))], metrics))
        })
    }

    pub fn train_rm(&self, cfg: &RunConfig, data: &Path, sft: &Path) -> Result<RunManifest> {
        let data = artifact(data, RM_DATA, "reward-model split")?;
        let sft = artifact(sft, POLICY_FILE, "SFT checkpoint")?;
        let hashed = [data.clone(), sft.clone()];
        self.run("train-rm", cfg, vec![("data".into(), data.clone()), ("sft".into(), sft.clone())], &hashed, |dir| {
            let examples = io::load_dataset(&data)?;
            let trunk = io::load_policy(&sft)?;
            let align = cfg.align(AlignMethod::Rm);
            let mut trainer = Trainer::new(align, FlipGuardConfig::off(), trunk, None, TrainData::Rm(examples))?;
            let metrics = train_into(dir, &mut trainer, align.steps, cfg, false, None)?;
            let head = trainer.reward_head().ok_or(flipguard_core::Error::InvalidConfig("reward head missing after training".into()))?;
            let path = dir.join(REWARD_FILE);
            io::save_reward_model(&path, &trainer.snapshot()?, &head)?;
            Ok((vec![("reward_model", path), ("metrics", dir.join(METRICS_FILE))], metrics))
        })
    }

    /// Aligns the SFT policy with the configured method and constraint.
    /// `rm` is required when the configured reward source is learned.
    pub fn align(&self, cfg: &RunConfig, data: &Path, sft: &Path, rm: Option<&Path>) -> Result<RunManifest> {
        self.align_observed(cfg, data, sft, rm, None)
    }

    pub fn align_observed(
        &self,
        cfg: &RunConfig,
        data: &Path,
        sft: &Path,
        rm: Option<&Path>,
        observer: Option<StepObserver<'_>>,
    ) -> Result<RunManifest> {
        let data = artifact(data, ALIGN_DATA, "alignment split")?;
        let sft = artifact(sft, POLICY_FILE, "SFT checkpoint (align starts from the SFT policy)")?;
        let mut inputs = vec![("data".to_string(), data.clone()), ("sft".to_string(), sft.clone())];
        let rm = match (cfg.method, cfg.reward_source, rm) {
            (AlignMethod::Ppo, RewardSource::Learned, None) => {
                return Err(Error::Usage("ppo with reward_source = learned needs --rm".into()))
            }
            (AlignMethod::Ppo, RewardSource::Learned, Some(p)) => {
                let p = artifact(p, REWARD_FILE, "reward model checkpoint")?;
                inputs.push(("rm".into(), p.clone()));
                Some(p)
            }
            _ => None,
        };
        let hashed: Vec<PathBuf> = inputs.iter().map(|(_, p)| p.clone()).collect();
        self.run("align", cfg, inputs, &hashed, |dir| {
            let examples = io::load_dataset(&data)?;
            let pre = io::load_policy(&sft)?;
            let train = match cfg.method {
                AlignMethod::Ppo => {
                    let scorer: Box<dyn Scorer> = match &rm {
                        Some(p) => {
                            let (trunk, head) = io::load_reward_model(p)?;
                            Box::new(LearnedScorer { trunk, head })
                        }
                        None => Box::new(GoldScorer { world: cfg.world() }),
                    };
                    TrainData::Ppo { prompts: examples.into_iter().map(|e| e.prompt).collect(), scorer }
                }
                _ => TrainData::Dpo(examples),
            };
            let align = cfg.align(cfg.method);
            let mut trainer = Trainer::new(align, cfg.guard(), pre, None, train)?;
            let metrics = train_into(dir, &mut trainer, align.steps, cfg, cfg.dump_triggers, observer)?;
            let policy = dir.join(POLICY_FILE);
            io::save_policy(&policy, &trainer.snapshot()?)?;
            let mut outputs = vec![("policy", policy), ("metrics", dir.join(METRICS_FILE))];
            if cfg.dump_triggers {
                outputs.push(("triggers", dir.join(TRIGGERS_FILE)));
            }
            Ok((outputs, metrics))
        })
    }

    /// Judges the aligned policy against the SFT policy on the test split.
    pub fn eval(&self, cfg: &RunConfig, data: &Path, sft: &Path, policy: &Path, rm: Option<&Path>) -> Result<RunManifest> {
        let data = artifact(data, TEST_DATA, "test split")?;
        let sft = artifact(sft, POLICY_FILE, "SFT checkpoint")?;
        let policy = artifact(policy, POLICY_FILE, "aligned checkpoint")?;
        let mut inputs = vec![("data".to_string(), data.clone()), ("sft".to_string(), sft.clone()), ("policy".to_string(), policy.clone())];
        let rm = match (cfg.judge, rm) {
            (RewardSource::Learned, None) => return Err(Error::Usage("judge = learned needs --rm".into())),
            (RewardSource::Learned, Some(p)) => {
                let p = artifact(p, REWARD_FILE, "reward model checkpoint")?;
                inputs.push(("rm".into(), p.clone()));
                Some(p)
            }
            (RewardSource::Gold, _) => None,
        };
        let hashed: Vec<PathBuf> = inputs.iter().map(|(_, p)| p.clone()).collect();
        self.run("eval", cfg, inputs, &hashed, |dir| {
            let test = io::load_dataset(&data)?;
            let pre = io::load_policy(&sft)?;
            let post = io::load_policy(&policy)?;
            let judge: Box<dyn Scorer> = match &rm {
                Some(p) => {
                    let (trunk, head) = io::load_reward_model(p)?;
                    Box::new(LearnedScorer { trunk, head })
                }
                None => Box::new(GoldScorer { world: cfg.world() }),
            };
            let prompts: Vec<(usize, TokenSequence)> = test.into_iter().enumerate().map(|(i, e)| (i, e.prompt)).collect();
            let records = evaluate_policy_pair(&pre, &post, &prompts, judge.as_ref(), cfg.dead_zone, cfg.max_new_tokens)?;
            let path = dir.join(RECORDS_FILE);
            io::save_records(&path, &records)?;

            let stats = flip_stats(&records)?;
            let items: Vec<_> = records.iter().map(|r| (r.prompt.clone(), r.post_response.clone())).collect();
            let world = cfg.world();
            let gold = |rs: &mut dyn Iterator<Item = &TokenSequence>| -> Result<f64> {
                let v: Vec<f64> = rs.map(|r| gold_reward_with(&world, r.tokens())).collect::<Result<_, _>>()?;
                Ok(v.iter().sum::<f64>() / v.len() as f64)
            };
            let metrics = BTreeMap::from([
                ("n".to_string(), stats.n as f64),
                ("nfr".to_string(), stats.nfr),
                ("win_rate".to_string(), stats.win_rate),
                ("tie_rate".to_string(), stats.tie_rate),
                ("mean_token_kl".to_string(), mean_token_kl(&post, &pre, &items)?),
                ("mean_gold_reward".to_string(), gold(&mut records.iter().map(|r| &r.post_response))?),
                ("pre_mean_gold_reward".to_string(), gold(&mut records.iter().map(|r| &r.pre_response))?),
            ]);
            Ok((vec![("records", path)], metrics))
        })
    }

    /// Combined report over evaluation runs (directories or manifest files).
    pub fn report(&self, cfg: &RunConfig, evals: &[PathBuf]) -> Result<RunManifest> {
        let mut sources = Vec::new();
        for p in evals {
            let m = RunManifest::load(p)?;
            if m.command != "eval" {
                return Err(Error::Usage(format!("{} is a {} run, report takes eval runs", p.display(), m.command)));
            }
            let file = if p.is_dir() { p.join(crate::manifest::MANIFEST_FILE) } else { p.clone() };
            sources.push((m, file));
        }
        sources.sort_by(|a, b| a.0.run_id.cmp(&b.0.run_id));
        let mut hashed = Vec::new();
        for (m, _) in &sources {
            hashed.push(m.output("records")?.to_path_buf());
            if let Some(log) = report::metrics_log_for(m) {
                hashed.push(log);
            }
        }
        let inputs = sources.iter().map(|(m, f)| (format!("eval:{}", m.run_id), f.clone())).collect();
        let manifests: Vec<RunManifest> = sources.into_iter().map(|(m, _)| m).collect();
        // Only the seed names a report; no other key affects its contents.
        let cfg = RunConfig { seed: cfg.seed, ..RunConfig::default() };
        self.run("report", &cfg, inputs, &hashed, |dir| {
            let files = report::emit_report(&manifests, dir)?;
            Ok((files, BTreeMap::from([("runs".to_string(), manifests.len() as f64)])))
        })
    }

    /// Re-executes a stage from its manifest alone.
    pub fn replay(&self, manifest: &RunManifest) -> Result<RunManifest> {
        let cfg = RunConfig::from_map(&manifest.config)?;
        let need = |role: &str| {
            manifest
                .input(role)
                .ok_or_else(|| Error::MissingArtifact { path: format!("{}:{role}", manifest.run_id).into(), what: "manifest input" })
        };
        match manifest.command.as_str() {
            "gen-data" => self.gen_data(&cfg),
            "sft" => self.sft(&cfg, need("data")?),
            "train-rm" => self.train_rm(&cfg, need("data")?, need("sft")?),
            "align" => self.align(&cfg, need("data")?, need("sft")?, manifest.input("rm")),
            "eval" => self.eval(&cfg, need("data")?, need("sft")?, need("policy")?, manifest.input("rm")),
            "report" => {
                let evals: Vec<PathBuf> = manifest.inputs.values().map(PathBuf::from).collect();
                self.report(&cfg, &evals)
            }
            other => Err(Error::Usage(format!("cannot replay command {other:?}"))),
        }
    }

    /// Full pipeline for every seed and every (gamma, epsilon) pair, then
    /// one combined report. Returns the evaluation manifests and the report.
    pub fn sweep(&self, cfg: &RunConfig, seeds: &[u64], gammas: &[f64], epsilons: &[f64]) -> Result<(Vec<RunManifest>, RunManifest)> {
        let needs_rm = cfg.judge == RewardSource::Learned || (cfg.method == AlignMethod::Ppo && cfg.reward_source == RewardSource::Learned);
        let mut evals = Vec::new();
        let mut eval_dirs = Vec::new();
        for &seed in seeds {
            let base = RunConfig { seed, ..cfg.clone() };
            let data = self.gen_data(&base)?;
            let data_dir = self.root.join(&data.run_id);
            let sft = self.sft(&base, &data_dir)?;
            let sft_path = PathBuf::from(sft.output("policy")?);
            let rm = if needs_rm { Some(PathBuf::from(self.train_rm(&base, &data_dir, &sft_path)?.output("reward_model")?)) } else { None };
            for &gamma in gammas {
                for &epsilon in epsilons {
                    let run = RunConfig { gamma, epsilon, ..base.clone() };
                    let aligned = self.align(&run, &data_dir, &sft_path, rm.as_deref())?;
                    let ev = self.eval(&run, &data_dir, &sft_path, aligned.output("policy")?, rm.as_deref())?;
                    eval_dirs.push(self.root.join(&ev.run_id));
                    evals.push(ev);
                }
            }
        }
        let report = self.report(cfg, &eval_dirs)?;
        Ok((evals, report))
    }
}

/// Trains and writes the metrics (and optionally trigger) log into `dir`.
fn train_into(
    dir: &Path,
    trainer: &mut Trainer,
    steps: usize,
    cfg: &RunConfig,
    triggers: bool,
    observer: Option<StepObserver<'_>>,
) -> Result<BTreeMap<String, f64>> {
    let triggers_path = dir.join(TRIGGERS_FILE);
    let mut log = TrainLog::create(&dir.join(METRICS_FILE), triggers.then_some(triggers_path.as_path()))?;
    let result = run_training(trainer, steps, &mut log, cfg, observer);
    log.finish()?;
    Ok(result?.map(|m| BTreeMap::from([("final_loss".to_string(), m.loss)])).unwrap_or_default())
}
