//! End-to-end acceptance suite. Runs every criterion at its stated
//! tolerance on the default configuration and prints one PASS/FAIL line
//! per criterion; exits non-zero if any fails.
//!
//! Positional arguments select criteria by number (`3`, `criterion_3`);
//! any other positional filter selects none, so `cargo test <name>` aimed
//! at another target skips this suite.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use flipguard::config::RunConfig;
use flipguard::core::alignment::*;
use flipguard::core::data::*;
use flipguard::core::eval::{flip_stats, mean_token_kl, GoldScorer};
use flipguard::core::flipguard::{build_penalty, flip_indicator, implicit_reward_gap, ConstraintMode, FocalNorm};
use flipguard::core::model::*;
use flipguard::core::numerics::{finite_difference_check, FdReport, Graph, NodeId, ParamMap};
use flipguard::core::rng::Rng;
use flipguard::core::Tensor;
use flipguard::io;
use flipguard::manifest::RunManifest;
use flipguard::pipeline::StepObserver;
use flipguard::Pipeline;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;
type Criterion = (u8, fn(&mut Lab) -> Outcome);

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
/// Alignment length for the degeneration, monotonicity and replay checks.
const SHORT_STEPS: usize = 300;

fn main() {
    let selected = selection();
    if selected.is_empty() {
        return;
    }
    let scratch = tempfile::tempdir().expect("scratch directory");
    let mut lab = Lab::new(scratch.path());
    let mut verdicts: BTreeMap<u8, (bool, String)> = BTreeMap::new();

    // The alignment sweep also carries the per-step ledger and KL checks,
    // so 4 and 8 are read off its runs; 6 covers every evaluation made.
    let plan: [Criterion; 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (5, criterion_5),
        (9, criterion_9),
        (7, criterion_7),
        (6, criterion_6),
    ];
    lab.want_ledger = selected.contains(&4);
    let need_sweep = selected.iter().any(|c| [4, 7, 8].contains(c));
    for (id, f) in plan {
        let run = selected.contains(&id) || (id == 7 && need_sweep);
        if !run {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut lab)));
        let verdict = match outcome {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => (false, format!("panicked: {}", panic_text(&p))),
        };
        eprintln!("  criterion {id} finished in {:.1}s", start.elapsed().as_secs_f64());
        verdicts.insert(id, verdict);
        if id == 7 {
            if let Some(v) = lab.ledger_verdict() {
                verdicts.insert(4, v);
            }
            if let Some(v) = lab.kl_verdict() {
                verdicts.insert(8, v);
            }
        }
    }

    println!();
    let mut failed = 0;
    for id in selected {
        let (pass, detail) = verdicts
            .remove(&id)
            .unwrap_or((false, "not evaluated: the alignment sweep did not complete".to_string()));
        failed += usize::from(!pass);
        println!("criterion {id}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("\n{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn selection() -> Vec<u8> {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        return Vec::new();
    }
    if filters.is_empty() {
        return (1..=9).collect();
    }
    let mut out: Vec<u8> = filters
        .iter()
        .filter_map(|f| f.strip_prefix("criterion_").unwrap_or(f).parse().ok())
        .filter(|n| (1..=9).contains(n))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Shared state

struct Lab {
    pipe: Pipeline,
    /// Per seed: gen-data and SFT run directories.
    bases: BTreeMap<u64, (PathBuf, PathBuf)>,
    /// Every evaluation run this suite produced.
    evals: Vec<RunManifest>,
    /// Criterion 3's constraint-off DPO policy, reused as a fixed aligned
    /// snapshot.
    short_dpo_policy: Option<PathBuf>,
    want_ledger: bool,
    /// Worst ledger residual and steps checked.
    ledger: Option<(f64, usize)>,
    /// DPO (off, flipguard) test-split KL per seed.
    dpo_kl: Vec<(u64, f64, f64)>,
}

fn run_dir(m: &RunManifest) -> PathBuf {
    let any = m.outputs.values().next().expect("run has outputs");
    Path::new(any).parent().expect("output inside run dir").to_path_buf()
}

fn config(seed: u64, overrides: &[(&str, &str)]) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    for (k, v) in overrides {
        cfg.set(k, v).expect("valid override");
    }
    cfg.validate().expect("valid config");
    cfg
}

impl Lab {
    fn new(root: &Path) -> Self {
        Lab {
            pipe: Pipeline::new(root.join("runs"), vec!["acceptance".into()]),
            bases: BTreeMap::new(),
            evals: Vec::new(),
            short_dpo_policy: None,
            want_ledger: false,
            ledger: None,
            dpo_kl: Vec::new(),
        }
    }

    /// Data and SFT run directories for `seed` under the default config.
    fn base(&mut self, seed: u64) -> flipguard::Result<(PathBuf, PathBuf)> {
        if let Some(b) = self.bases.get(&seed) {
            return Ok(b.clone());
        }
        let cfg = config(seed, &[]);
        let data = run_dir(&self.pipe.gen_data(&cfg)?);
        let sft = run_dir(&self.pipe.sft(&cfg, &data)?);
        self.bases.insert(seed, (data.clone(), sft.clone()));
        Ok((data, sft))
    }

    fn align(&mut self, cfg: &RunConfig, check_ledger: bool) -> flipguard::Result<RunManifest> {
        let (data, sft) = self.base(cfg.seed)?;
        if !check_ledger {
            return self.pipe.align(cfg, &data, &sft, None);
        }
        let gamma = cfg.gamma;
        let (mut worst, mut steps) = self.ledger.unwrap_or((0.0, 0));
        let mut observe = |before: &PolicySnapshot, r: &StepReport| {
            let residual = r.metrics.loss - r.metrics.align_loss - independent_penalty(before, r, gamma);
            worst = worst.max(residual.abs());
            steps += 1;
        };
        let observer: StepObserver<'_> = &mut observe;
        let m = self.pipe.align_observed(cfg, &data, &sft, None, Some(observer))?;
        self.ledger = Some((worst, steps));
        Ok(m)
    }

    fn eval(&mut self, cfg: &RunConfig, aligned: &RunManifest) -> flipguard::Result<RunManifest> {
        let (data, sft) = self.base(cfg.seed)?;
        let m = self.pipe.eval(cfg, &data, &sft, &run_dir(aligned), None)?;
        self.evals.push(m.clone());
        Ok(m)
    }

    fn ledger_verdict(&self) -> Option<(bool, String)> {
        let (worst, steps) = self.ledger?;
        let pass = steps > 0 && worst <= 1e-9;
        Some((pass, format!("max |loss - align_loss - penalty| = {worst:.3e} over {steps} logged steps of the flip-guarded DPO and PPO runs (tol 1e-9)")))
    }

    fn kl_verdict(&self) -> Option<(bool, String)> {
        if self.dpo_kl.len() < SEEDS.len() {
            return None;
        }
        let ok = self.dpo_kl.iter().filter(|(_, off, fg)| fg <= off).count();
        let per: Vec<String> = self.dpo_kl.iter().map(|(s, off, fg)| format!("s{s} {fg:.3}/{off:.3}")).collect();
        Some((ok >= 4, format!("DPO KL flipguard <= off in {ok}/5 seeds (fg/off: {})", per.join(", "))))
    }
}

/// `gamma * mean over the batch of [triggered * (-mean token log pi(target|x))]`,
/// recomputed from the step's audit with plain sequence log-probabilities.
fn independent_penalty(policy: &PolicySnapshot, report: &StepReport, gamma: f64) -> f64 {
    if report.triggers.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for t in report.triggers.iter().filter(|t| t.triggered) {
        let lp = sequence_log_prob(policy, t.prompt.tokens(), t.focal_target.tokens()).expect("audit target scores");
        acc += -lp.per_token.iter().sum::<f64>() / lp.per_token.len() as f64;
    }
    gamma * acc / report.triggers.len() as f64
}

// ---------------------------------------------------------------------------
// 1: gradients

fn perturbed(seed: u64, std: f64) -> PolicySnapshot {
    let cfg = ModelConfig::default();
    let mut params = init_params(&cfg, seed).unwrap().into_params();
    let mut rng = Rng::from_seed(seed ^ 0x5eed);
    for t in params.values_mut() {
        for x in t.data_mut() {
            *x += std * rng.normal();
        }
    }
    PolicySnapshot::new(cfg, params).unwrap()
}

/// Finite-difference check of the scalar built by `build`. The graph is
/// built once and re-evaluated per probe; only the first evaluation (at the
/// unperturbed point) runs the backward pass.
fn fd(build: impl FnOnce(&mut Graph) -> flipguard::core::Result<NodeId>, params: &ParamMap) -> flipguard::core::Result<FdReport> {
    let mut g = Graph::new();
    let loss = build(&mut g)?;
    let g = RefCell::new(g);
    let first = Cell::new(true);
    finite_difference_check(
        |p| {
            let mut g = g.borrow_mut();
            g.evaluate(p)?;
            let grads = if first.replace(false) { g.gradients(loss)? } else { ParamMap::new() };
            Ok((g.scalar_value(loss)?, grads))
        },
        params,
        FD_STEP,
    )
}

fn shortest<T: Clone>(items: &[T], len: impl Fn(&T) -> usize, n: usize) -> Vec<T> {
    let mut v: Vec<T> = items.to_vec();
    v.sort_by_key(|e| len(e));
    v.truncate(n);
    v
}

fn criterion_1(_: &mut Lab) -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let ds = generate_dataset(&WorldSpec::default(), SplitSizes { sft: 32, rm: 32, align: 32, test: 8 }, 11)?;
    let policy = perturbed(21, 0.1);
    let mut reports: Vec<(&str, FdReport)> = Vec::new();

    let sft = shortest(&ds.sft, |e| e.prompt.len() + e.target.len(), 1);
    reports.push(("sft", fd(|g| build_sft(g, &cfg, &sft), policy.params())?));

    let pairs = shortest(&ds.rm, |e| e.prompt.len() + e.chosen.len() + e.rejected.len(), 1);
    let mut rng = Rng::from_seed(7);
    let head = RewardHead { projection: Tensor::matrix(cfg.d_model, 1, (0..cfg.d_model).map(|_| 0.3 * rng.normal()).collect())?, bias: 0.1 };
    reports.push(("rm", fd(|g| Ok(build_rm(g, &cfg, &pairs)?.loss), &rm_params(&policy, &head))?));

    let reference = perturbed(22, 0.1);
    let refs: Vec<RefLogProbs> = pairs.iter().map(|e| reference_log_probs(&reference, e)).collect::<Result<_, _>>()?;
    reports.push(("dpo", fd(|g| Ok(build_dpo(g, &cfg, &pairs, &refs, 0.1)?.loss), policy.params())?));

    // Roll out from one snapshot and differentiate at a nearby one, so
    // every ratio sits strictly inside the clip interval.
    let align = AlignConfig { rollouts_per_prompt: 2, max_new_tokens: 6, ..AlignConfig::default() };
    let prompts = vec![(0, shortest(&ds.align, |e| e.prompt.len(), 1)[0].prompt.clone())];
    let batch = ppo_rollout(&reference, &perturbed(23, 0.1), &GoldScorer::default(), &prompts, &align, &mut Rng::from_seed(3))?;
    let adv = standardized_advantages(&batch.trajectories)?;
    let near = {
        let mut p = reference.params().clone();
        let mut rng = Rng::from_seed(9);
        for t in p.values_mut() {
            for x in t.data_mut() {
                *x += 1e-3 * rng.normal();
            }
        }
        p
    };
    reports.push(("ppo", fd(|g| Ok(build_ppo(g, &cfg, &batch.trajectories, &adv, align.clip_ratio)?.loss), &near)?));

    // One triggered target in a batch of two; untriggered terms never
    // enter the graph.
    let focal = |g: &mut Graph| {
        let e = &pairs[0];
        let lp = build_response_log_probs(g, &cfg, e.prompt.tokens(), e.chosen.tokens())?;
        Ok(build_penalty(g, &[(lp.token_log_probs, true)], 0.01, FocalNorm::TokenMean, 2).expect("one term is triggered"))
    };
    reports.push(("focal", fd(focal, policy.params())?));

    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let entries = reports[0].1.entries;
    let pass = worst < FD_TOL && secs < 120.0 && reports.iter().all(|(_, r)| r.entries >= entries);
    let detail: Vec<String> = reports
        .iter()
        .map(|(n, r)| {
            let at = r.worst.as_ref().map(|(p, i)| format!(" at {p}[{i}]")).unwrap_or_default();
            format!("{n} {:.1e}{at}", r.max_rel_error)
        })
        .collect();
    Ok((pass, format!("max rel. error over {entries} trunk entries: {} (tol 1e-4); {secs:.0}s (limit 120s)", detail.join(", "))))
}

// ---------------------------------------------------------------------------
// 2: analytic anchors

fn criterion_2(_: &mut Lab) -> Outcome {
    let ds = generate_dataset(&WorldSpec::default(), SplitSizes { sft: 64, rm: 64, align: 64, test: 8 }, 12)?;
    let pi = perturbed(31, 0.3);
    let dpo = dpo_loss(&pi, &pi, &ds.align[..16], 0.1)?;
    let rm = rm_pair_loss(&perturbed(32, 0.3), &RewardHead::zeros(32), &ds.rm[..16])?;
    let sft = sft_loss(&init_params(&ModelConfig::default(), 33)?, &ds.sft[..16])?;
    let errs = [(dpo - LN_2).abs(), (rm - LN_2).abs(), (sft - 32f64.ln()).abs()];
    let pass = errs.iter().all(|e| *e <= 1e-9);
    Ok((pass, format!("|dpo - ln2| = {:.1e}, |rm - ln2| = {:.1e}, |sft - ln32| = {:.1e} (tol 1e-9)", errs[0], errs[1], errs[2])))
}

// ---------------------------------------------------------------------------
// 3: degeneration

fn criterion_3(lab: &mut Lab) -> Outcome {
    let steps = SHORT_STEPS.to_string();
    let mut notes = Vec::new();
    let mut pass = true;
    for method in ["dpo", "ppo"] {
        let run = |lab: &mut Lab, extra: &[(&str, &str)]| -> flipguard::Result<RunManifest> {
            let mut o = vec![("method", method), ("steps", steps.as_str())];
            o.extend_from_slice(extra);
            lab.align(&config(0, &o), false)
        };
        let off = run(lab, &[("constraint", "none")])?;
        let zero = run(lab, &[("constraint", "flipguard"), ("gamma", "0")])?;
        let wide = run(lab, &[("constraint", "flipguard"), ("epsilon", "1e9")])?;
        if method == "dpo" {
            lab.short_dpo_policy = Some(run_dir(&off));
        }
        let bytes = |m: &RunManifest| io::read_bytes(m.output("metrics").unwrap());
        let identical = bytes(&off)? == bytes(&zero)?;
        let a = io::load_metrics(off.output("metrics")?)?;
        let b = io::load_metrics(wide.output("metrics")?)?;
        let mut worst: f64 = 0.0;
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in [(x.loss, y.loss), (x.align_loss, y.align_loss), (x.focal_term, y.focal_term)] {
                worst = worst.max((u - v).abs());
            }
        }
        let ok = identical && a.len() == SHORT_STEPS && b.len() == SHORT_STEPS && worst <= 1e-12;
        pass &= ok;
        notes.push(format!("{method}: gamma=0 log {} , eps=1e9 max loss diff {worst:.1e}", if identical { "bit-identical" } else { "DIFFERS" }));
    }
    Ok((pass, format!("{} over {SHORT_STEPS} steps (tol 1e-12)", notes.join("; "))))
}

// ---------------------------------------------------------------------------
// 5: indicator monotonicity

fn criterion_5(lab: &mut Lab) -> Outcome {
    let (data, sft) = lab.base(0)?;
    let aligned = match &lab.short_dpo_policy {
        Some(p) => p.clone(),
        None => run_dir(&lab.align(&config(0, &[("steps", &SHORT_STEPS.to_string()), ("constraint", "none")]), false)?),
    };
    let start = Instant::now();
    let pre = io::load_policy(&sft.join(flipguard::pipeline::POLICY_FILE))?;
    let cur = io::load_policy(&aligned.join(flipguard::pipeline::POLICY_FILE))?;
    let examples = io::load_dataset(&data.join(flipguard::pipeline::ALIGN_DATA))?;
    let deltas: Vec<f64> = examples
        .iter()
        .map(|e| implicit_reward_gap(&pre, &cur, e.prompt.tokens(), e.chosen.tokens()))
        .collect::<Result<_, _>>()?;
    let counts: Vec<usize> =
        [0.0, 0.05, 0.1, 0.2].iter().map(|&eps| deltas.iter().filter(|&&d| flip_indicator(d, eps) == 1).count()).collect();
    let secs = start.elapsed().as_secs_f64();
    let pass = counts.windows(2).all(|w| w[0] >= w[1]) && secs < 60.0;
    Ok((pass, format!("trigger counts over eps 0/0.05/0.1/0.2 on {} pairs: {counts:?}; {secs:.1}s (limit 60s)", deltas.len())))
}

// ---------------------------------------------------------------------------
// 6: metric identities

fn criterion_6(lab: &mut Lab) -> Outcome {
    let mut sum_ok = 0;
    let mut recount_ok = 0;
    for m in &lab.evals {
        let (nfr, win, tie) = (m.metrics["nfr"], m.metrics["win_rate"], m.metrics["tie_rate"]);
        sum_ok += usize::from(nfr + win + tie == 1.0);
        let cfg = RunConfig::from_map(&m.config)?;
        let raw = std::fs::read_to_string(m.output("records")?)?;
        let (mut pre, mut post, mut ties, mut consistent) = (0usize, 0usize, 0usize, true);
        for line in raw.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            let (a, b) = (v["pre_score"].as_f64().unwrap_or(f64::NAN), v["post_score"].as_f64().unwrap_or(f64::NAN));
            let expect = if a - b > cfg.dead_zone {
                "PRE_BETTER"
            } else if b - a > cfg.dead_zone {
                "POST_BETTER"
            } else {
                "TIE"
            };
            match v["verdict"].as_str() {
                Some("PRE_BETTER") => pre += 1,
                Some("POST_BETTER") => post += 1,
                Some("TIE") => ties += 1,
                _ => consistent = false,
            }
            consistent &= v["verdict"].as_str() == Some(expect);
        }
        let n = (pre + post + ties) as f64;
        let stats = flip_stats(&io::load_records(m.output("records")?)?)?;
        let agrees = consistent
            && (stats.pre_better, stats.post_better, stats.ties) == (pre, post, ties)
            && stats.nfr == pre as f64 / n
            && stats.win_rate == post as f64 / n
            && (stats.nfr, stats.win_rate, stats.tie_rate) == (nfr, win, tie)
            && (stats.tie_rate - ties as f64 / n).abs() <= f64::EPSILON;
        recount_ok += usize::from(agrees);
    }

    let ds = generate_dataset(&WorldSpec::default(), SplitSizes { sft: 8, rm: 8, align: 8, test: 8 }, 13)?;
    let mut rng = Rng::from_seed(61);
    let (mut self_zero, mut nonneg, mut min_kl) = (0, 0, f64::INFINITY);
    for i in 0..100u64 {
        let p = perturbed(1000 + i, 0.05 + 0.3 * rng.uniform());
        let q = perturbed(2000 + i, 0.05 + 0.3 * rng.uniform());
        let items: Vec<(TokenSequence, TokenSequence)> = ds
            .test
            .iter()
            .take(3)
            .map(|e| Ok((e.prompt.clone(), TokenSequence(sample_response(&p, e.prompt.tokens(), 8, 1.0, i)?))))
            .collect::<flipguard::core::Result<_>>()?;
        self_zero += usize::from(mean_token_kl(&p, &p, &items)? == 0.0);
        let kl = mean_token_kl(&p, &q, &items)?;
        min_kl = min_kl.min(kl);
        nonneg += usize::from(kl >= 0.0);
    }
    let n = lab.evals.len();
    let pass = n > 0 && sum_ok == n && recount_ok == n && self_zero == 100 && nonneg == 100;
    Ok((
        pass,
        format!(
            "rates sum to exactly 1 on {sum_ok}/{n} evaluations; record-file recount agrees on {recount_ok}/{n}; KL(p,p) = 0 on {self_zero}/100, KL(p,q) >= 0 on {nonneg}/100 (min {min_kl:.3e})"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 7 (with 4 and 8): the default-config sweep

struct Arm {
    nfr: [f64; 5],
    win: [f64; 5],
}

fn criterion_7(lab: &mut Lab) -> Outcome {
    let mut arms: BTreeMap<(&str, &str), Arm> = BTreeMap::new();
    let mut slowest: f64 = 0.0;
    for (i, &seed) in SEEDS.iter().enumerate() {
        let mut kl = (0.0, 0.0);
        for method in ["dpo", "ppo"] {
            for constraint in ["none", "flipguard"] {
                let cfg = config(seed, &[("method", method), ("constraint", constraint)]);
                let guarded = cfg.constraint == ConstraintMode::FlipGuard;
                let aligned = lab.align(&cfg, guarded && lab.want_ledger)?;
                slowest = slowest.max(aligned.duration_secs);
                let eval = lab.eval(&cfg, &aligned)?;
                eprintln!(
                    "  seed {seed} {method}+{constraint}: nfr {:.3} win {:.3} kl {:.3} ({:.0}s)",
                    eval.metrics["nfr"], eval.metrics["win_rate"], eval.metrics["mean_token_kl"], aligned.duration_secs
                );
                let arm = arms.entry((method, constraint)).or_insert(Arm { nfr: [0.0; 5], win: [0.0; 5] });
                arm.nfr[i] = eval.metrics["nfr"];
                arm.win[i] = eval.metrics["win_rate"];
                if method == "dpo" {
                    if guarded {
                        kl.1 = eval.metrics["mean_token_kl"];
                    } else {
                        kl.0 = eval.metrics["mean_token_kl"];
                    }
                }
            }
        }
        lab.dpo_kl.push((seed, kl.0, kl.1));
    }

    let mut pass = slowest < 600.0;
    let mut notes = Vec::new();
    for method in ["dpo", "ppo"] {
        let off = &arms[&(method, "none")];
        let fg = &arms[&(method, "flipguard")];
        let lower = off.nfr.iter().zip(&fg.nfr).filter(|(o, f)| f < o).count();
        let mean = |xs: &[f64; 5]| xs.iter().sum::<f64>() / 5.0;
        let drop = mean(&off.win) - mean(&fg.win);
        let ok = lower >= 4 && drop < 0.02;
        pass &= ok;
        notes.push(format!(
            "{method}: NFR lower in {lower}/5 seeds (mean {:.3} -> {:.3}), win rate {:.3} -> {:.3} (drop {:+.1}pp){}",
            mean(&off.nfr),
            mean(&fg.nfr),
            mean(&off.win),
            mean(&fg.win),
            100.0 * drop,
            if ok { "" } else { " [fails]" }
        ));
    }
    Ok((pass, format!("{}; slowest run {slowest:.0}s (limit 600s)", notes.join("; "))))
}

// ---------------------------------------------------------------------------
// 9: replay

fn output_bytes(m: &RunManifest) -> flipguard::Result<BTreeMap<String, Vec<u8>>> {
    m.outputs.iter().map(|(role, p)| Ok((role.clone(), io::read_bytes(Path::new(p))?))).collect()
}

fn criterion_9(lab: &mut Lab) -> Outcome {
    let (data, sft) = lab.base(0)?;
    let steps = SHORT_STEPS.to_string();
    let mut runs = vec![
        RunManifest::load(&data)?,
        RunManifest::load(&sft)?,
        lab.pipe.train_rm(&config(0, &[("rm_steps", &steps)]), &data, &sft)?,
    ];
    let mut evals = Vec::new();
    for method in ["dpo", "ppo"] {
        let cfg = config(0, &[("method", method), ("steps", &steps), ("dump_triggers", "true")]);
        let aligned = lab.align(&cfg, false)?;
        let eval = lab.eval(&cfg, &aligned)?;
        evals.push(run_dir(&eval));
        runs.extend([aligned, eval]);
    }
    runs.push(lab.pipe.report(&config(0, &[]), &evals)?);

    let replayer = Pipeline::new(lab.pipe.root.with_file_name("replay"), vec!["replay".into()]);
    let mut files = 0;
    let mut mismatched = Vec::new();
    for m in &runs {
        let again = replayer.replay(&RunManifest::load(&run_dir(m))?)?;
        let (a, b) = (output_bytes(m)?, output_bytes(&again)?);
        files += a.len();
        if a != b || again.run_id != m.run_id {
            mismatched.push(m.run_id.clone());
        }
    }
    let pass = mismatched.is_empty() && files > 0;
    Ok((
        pass,
        format!(
            "{} runs ({files} files: data, checkpoints, metric and trigger logs, records, reports) replayed from manifests; mismatches: {}",
            runs.len(),
            if mismatched.is_empty() { "none".to_string() } else { mismatched.join(", ") }
        ),
    ))
}
