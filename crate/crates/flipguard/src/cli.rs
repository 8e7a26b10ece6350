use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, load_config_over, RunConfig};
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::pipeline::Pipeline;

/// Root for run directories when neither `--out` nor the environment names one.
pub const DEFAULT_ROOT: &str = "runs";
pub const OUT_ENV: &str = "FLIPGUARD_OUT";

#[derive(Debug, Parser)]
#[command(name = "flipguard", version, about = "Flip-guarded preference alignment on a synthetic token world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` config file layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; defaults to $FLIPGUARD_OUT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Objective {
    /// dpo or ppo.
    #[arg(long)]
    method: Option<String>,
    /// none, kd or flipguard.
    #[arg(long)]
    constraint: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    steps: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the SFT, reward-model, alignment and test splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised fine-tuning from a fresh initialization.
    Sft {
        #[command(flatten)]
        common: Common,
        /// gen-data run directory or SFT split file.
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit a Bradley-Terry reward model on top of the SFT trunk.
    TrainRm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// sft run directory or checkpoint.
        #[arg(long)]
        sft: PathBuf,
    },
    /// Align the SFT policy with DPO or PPO, optionally flip-constrained.
    Align {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        objective: Objective,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sft: PathBuf,
        /// train-rm run directory or checkpoint, for learned rewards.
        #[arg(long)]
        rm: Option<PathBuf>,
        /// Write the per-example flip audit.
        #[arg(long)]
        dump_triggers: bool,
    },
    /// Judge an aligned policy against its SFT policy on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// align run directory or checkpoint.
        #[arg(long)]
        policy: PathBuf,
        /// Defaults to the data the aligned run used.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to the SFT checkpoint the aligned run started from.
        #[arg(long)]
        sft: Option<PathBuf>,
        #[arg(long)]
        rm: Option<PathBuf>,
        #[arg(long)]
        dead_zone: Option<String>,
        /// gold or learned.
        #[arg(long)]
        judge: Option<String>,
    },
    /// Full pipeline over a grid of gamma/epsilon values and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        constraint: Option<String>,
        /// Comma-separated gamma grid.
        #[arg(long, default_value = "0,0.005,0.01,0.02,0.05")]
        gamma: String,
        /// Comma-separated epsilon grid; defaults to the configured epsilon.
        #[arg(long)]
        epsilon: Option<String>,
        /// `a..b` (inclusive) or a comma-separated list.
        #[arg(long, default_value = "0..4")]
        seeds: String,
        #[arg(long)]
        steps: Option<String>,
    },
    /// Summary, scatter and curve files over evaluation runs.
    Report {
        #[command(flatten)]
        common: Common,
        /// eval run directories or manifests; a directory without a
        /// manifest contributes every eval run directly inside it.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

fn push(overrides: &mut Vec<String>, key: &str, value: &Option<String>) {
    if let Some(v) = value {
        overrides.push(format!("{key}={v}"));
    }
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut out = self.set.clone();
        if let Some(seed) = self.seed {
            out.push(format!("seed={seed}"));
        }
        out
    }

    fn resolve(&self, extra: &[String]) -> Result<RunConfig> {
        let mut o = self.overrides();
        o.extend_from_slice(extra);
        load_config(self.config.as_deref(), &o)
    }

    fn root(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT))
    }
}

impl Objective {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        push(&mut o, "method", &self.method);
        push(&mut o, "constraint", &self.constraint);
        push(&mut o, "gamma", &self.gamma);
        push(&mut o, "epsilon", &self.epsilon);
        push(&mut o, "steps", &self.steps);
        o
    }
}

/// `0..4` is inclusive of both ends, matching how seed grids are written.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::Usage(format!("seeds must look like 0..4 or 0,1,2; got {text:?}"));
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

pub fn parse_grid(key: &'static str, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim().parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::ConfigType {
                key: key.to_string(),
                expected: "a comma-separated list of numbers",
                value: text.to_string(),
            })
        })
        .collect()
}

/// Eval runs named by `paths`, expanding plain directories one level.
fn collect_eval_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() && !p.join(crate::manifest::MANIFEST_FILE).exists() {
            let entries = std::fs::read_dir(p).map_err(|e| Error::io(p, e))?;
            let mut found: Vec<PathBuf> = entries
                .flatten()
                .map(|e| e.path())
                .filter(|d| RunManifest::load(d).is_ok_and(|m| m.command == "eval"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("no eval runs found".into()));
    }
    Ok(out)
}

fn run(command: Command, argv: Vec<String>) -> Result<Vec<RunManifest>> {
    match command {
        Command::GenData { common } => {
            let cfg = common.resolve(&[])?;
            Ok(vec![Pipeline::new(common.root(), argv).gen_data(&cfg)?])
        }
        Command::Sft { common, data } => {
            let cfg = common.resolve(&[])?;
            Ok(vec![Pipeline::new(common.root(), argv).sft(&cfg, &data)?])
        }
        Command::TrainRm { common, data, sft } => {
            let cfg = common.resolve(&[])?;
            Ok(vec![Pipeline::new(common.root(), argv).train_rm(&cfg, &data, &sft)?])
        }
        Command::Align { common, objective, data, sft, rm, dump_triggers } => {
            let mut extra = objective.overrides();
            if dump_triggers {
                extra.push("dump_triggers=true".into());
            }
            let cfg = common.resolve(&extra)?;
            Ok(vec![Pipeline::new(common.root(), argv).align(&cfg, &data, &sft, rm.as_deref())?])
        }
        Command::Eval { common, policy, data, sft, rm, dead_zone, judge } => {
            // The evaluation inherits the aligned run's config so reports can
            // label it; flags and files still override.
            let policy_dir = if policy.is_dir() { policy.clone() } else { policy.parent().map(Path::to_path_buf).unwrap_or_default() };
            let aligned = RunManifest::load(&policy_dir).ok();
            let base = match &aligned {
                Some(m) => RunConfig::from_map(&m.config)?,
                None => RunConfig::default(),
            };
            let mut o = common.overrides();
            push(&mut o, "dead_zone", &dead_zone);
            push(&mut o, "judge", &judge);
            let cfg = load_config_over(base, common.config.as_deref(), &o)?;
            let from_aligned = |role: &str| aligned.as_ref().and_then(|m| m.input(role)).map(Path::to_path_buf);
            let sft = sft.or_else(|| from_aligned("sft")).ok_or_else(|| Error::Usage("eval needs --sft".into()))?;
            let data = data
                .or_else(|| from_aligned("data").and_then(|p| p.parent().map(Path::to_path_buf)))
                .ok_or_else(|| Error::Usage("eval needs --data".into()))?;
            Ok(vec![Pipeline::new(common.root(), argv).eval(&cfg, &data, &sft, &policy, rm.as_deref())?])
        }
        Command::Sweep { common, method, constraint, gamma, epsilon, seeds, steps } => {
            let mut extra = Vec::new();
            push(&mut extra, "method", &method);
            push(&mut extra, "constraint", &constraint);
            push(&mut extra, "steps", &steps);
            let cfg = common.resolve(&extra)?;
            let gammas = parse_grid("gamma", &gamma)?;
            let epsilons = match epsilon {
                Some(e) => parse_grid("epsilon", &e)?,
                None => vec![cfg.epsilon],
            };
            let seeds = parse_seeds(&seeds)?;
            let (mut evals, report) = Pipeline::new(common.root(), argv).sweep(&cfg, &seeds, &gammas, &epsilons)?;
            evals.push(report);
            Ok(evals)
        }
        Command::Report { common, runs } => {
            let cfg = common.resolve(&[])?;
            let evals = collect_eval_runs(&runs)?;
            Ok(vec![Pipeline::new(common.root(), argv).report(&cfg, &evals)?])
        }
    }
}

/// Runs one subcommand. Success prints each written run directory; failure
/// prints a single JSON error line to stderr.
pub fn execute<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    execute_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`execute`] with explicit output streams.
pub fn execute_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 2;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    let recorded = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli.command, recorded) {
        Ok(manifests) => {
            for m in manifests {
                let dir = m.outputs.values().next().and_then(|p| Path::new(p).parent().map(Path::to_path_buf));
                let _ = writeln!(out, "{}\t{}", m.run_id, dir.map(|d| d.display().to_string()).unwrap_or_default());
            }
            0
        }
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            let _ = writeln!(err, "{line}");
            1
        }
    }
}
