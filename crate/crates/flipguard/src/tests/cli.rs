use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cli::{execute, execute_with};
use crate::config::load_config;
use crate::{Pipeline, RunManifest};

const TINY: &str = "\
sft_size = 16
rm_size = 16
align_size = 16
test_size = 10
sft_steps = 6
rm_steps = 4
steps = 4
batch_size = 4
";

struct Sandbox {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn sandbox() -> Sandbox {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.cfg");
    fs::write(&config, TINY).unwrap();
    Sandbox { root: dir.path().join("runs"), config, _dir: dir }
}

impl Sandbox {
    fn run(&self, args: &[&str]) -> i32 {
        let mut argv = vec!["flipguard".to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        argv.extend(["--out".into(), self.root.display().to_string(), "--config".into(), self.config.display().to_string()]);
        execute(argv)
    }

    /// The single run directory whose name starts with `prefix-`.
    fn only(&self, prefix: &str) -> PathBuf {
        let found = self.all(prefix);
        assert_eq!(found.len(), 1, "{prefix}: {found:?}");
        found[0].clone()
    }

    fn all(&self, prefix: &str) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = fs::read_dir(&self.root)
            .unwrap()
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(&format!("{prefix}-")))
            .collect();
        v.sort();
        v
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_in(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .flatten()
        .filter(|e| e.file_name() != "manifest.json")
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect()
}

/// Class weights written out independently of the library.
fn weight(token: u64) -> f64 {
    match token {
        2..=15 => 1.0,
        16..=23 => 0.0,
        24..=31 => -2.0,
        t => panic!("unexpected response token {t}"),
    }
}

fn recount_gold(response: &serde_json::Value) -> f64 {
    let ids: Vec<u64> = response.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(*ids.last().unwrap(), 1, "response must end with EOS");
    let body = &ids[..ids.len() - 1];
    if body.is_empty() {
        0.0
    } else {
        body.iter().map(|&t| weight(t)).sum::<f64>() / body.len() as f64
    }
}

#[test]
fn gen_data_is_byte_deterministic() {
    let a = sandbox();
    assert_eq!(a.run(&["gen-data", "--seed", "7"]), 0);
    assert_eq!(a.run(&["gen-data", "--seed", "7"]), 0);
    let first = a.only("gen-data");
    let b = sandbox();
    assert_eq!(b.run(&["gen-data", "--seed", "7"]), 0);
    let second = b.only("gen-data");
    assert_eq!(first.file_name(), second.file_name());
    let (x, y) = (files_in(&first), files_in(&second));
    assert_eq!(x.keys().collect::<Vec<_>>(), ["align.jsonl", "rm.jsonl", "sft.jsonl", "test.jsonl"]);
    assert_eq!(x, y);
    assert_eq!(b.run(&["gen-data", "--seed", "8"]), 0);
    assert_eq!(b.all("gen-data").len(), 2);
    assert_ne!(files_in(&b.all("gen-data")[0]), files_in(&b.all("gen-data")[1]));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    std::env::set_var(crate::cli::OUT_ENV, dir.path().join("env-root"));
    let code = execute(["flipguard", "gen-data", "--seed", "3", "--config", s(&cfg)]);
    std::env::remove_var(crate::cli::OUT_ENV);
    assert_eq!(code, 0);
    let runs: Vec<_> = fs::read_dir(dir.path().join("env-root")).unwrap().flatten().collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].file_name().to_string_lossy().into_owned();
    assert!(name.starts_with("gen-data-3-") && name.len() == "gen-data-3-".len() + 8, "{name}");
}

#[test]
fn chosen_outscores_rejected_on_an_independent_recount() {
    let sb = sandbox();
    assert_eq!(sb.run(&["gen-data", "--seed", "11", "--set", "rm_size=300", "--set", "align_size=300"]), 0);
    let dir = sb.only("gen-data");
    for split in ["rm.jsonl", "align.jsonl", "test.jsonl"] {
        let (mut chosen, mut rejected, mut n) = (0.0, 0.0, 0usize);
        for line in fs::read_to_string(dir.join(split)).unwrap().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let (c, r) = (recount_gold(&v["chosen"]), recount_gold(&v["rejected"]));
            assert!(c - r >= 0.2 - 1e-12, "{split}: margin {}", c - r);
            assert!((v["gold_margin"].as_f64().unwrap() - (c - r)).abs() < 1e-12);
            let prompt = v["prompt"].as_array().unwrap();
            assert!((4..=8).contains(&prompt.len()));
            assert!(prompt.iter().all(|t| (2..=31).contains(&t.as_u64().unwrap())));
            chosen += c;
            rejected += r;
            n += 1;
        }
        assert!(chosen / n as f64 > rejected / n as f64, "{split}");
    }
}

#[test]
fn align_needs_an_sft_checkpoint() {
    let sb = sandbox();
    assert_eq!(sb.run(&["gen-data"]), 0);
    let data = sb.only("gen-data");
    assert_eq!(sb.run(&["align", "--data", s(&data)]), 2, "missing --sft is a usage error");
    assert_eq!(sb.run(&["align", "--data", s(&data), "--sft", s(&data)]), 1, "a data directory is not a checkpoint");
    assert!(sb.all("align").is_empty());
}

#[test]
fn gamma_zero_degenerates_to_constraint_off() {
    let sb = sandbox();
    assert_eq!(sb.run(&["gen-data", "--seed", "2"]), 0);
    let data = sb.only("gen-data");
    assert_eq!(sb.run(&["sft", "--seed", "2", "--data", s(&data)]), 0);
    let sft = sb.only("sft");
    for method in ["dpo", "ppo"] {
        let base = ["align", "--seed", "2", "--data", s(&data), "--sft", s(&sft), "--method", method];
        let before: Vec<PathBuf> = sb.all("align");
        assert_eq!(sb.run(&[&base[..], &["--constraint", "flipguard", "--gamma", "0"]].concat()), 0);
        assert_eq!(sb.run(&[&base[..], &["--constraint", "none"]].concat()), 0);
        assert_eq!(sb.run(&[&base[..], &["--constraint", "kd", "--gamma", "0.5"]].concat()), 0);
        let new: Vec<PathBuf> = sb.all("align").into_iter().filter(|p| !before.contains(p)).collect();
        assert_eq!(new.len(), 3);
        let by_constraint: BTreeMap<String, PathBuf> = new
            .into_iter()
            .map(|d| (RunManifest::load(&d).unwrap().config["constraint"].clone(), d))
            .collect();
        let log = |c: &str| fs::read(by_constraint[c].join("metrics.jsonl")).unwrap();
        assert_eq!(log("flipguard"), log("none"), "{method}");
        assert_ne!(log("kd"), log("none"), "{method}");
    }
}

#[test]
fn sweep_writes_every_run_and_one_report() {
    let sb = sandbox();
    let code = sb.run(&["sweep", "--gamma", "0,0.005,0.01,0.02,0.05", "--seeds", "0..4", "--steps", "2"]);
    assert_eq!(code, 0);
    let evals = sb.all("eval");
    assert_eq!(evals.len(), 25);
    assert_eq!(sb.all("align").len(), 25);
    let report = sb.only("report");
    let manifest = RunManifest::load(&report).unwrap();
    assert_eq!(manifest.inputs.len(), 25);

    let summary = fs::read_to_string(report.join("summary.csv")).unwrap();
    assert!(!summary.contains('\r'));
    let mut rows = summary.lines();
    assert_eq!(
        rows.next().unwrap(),
        "run_id,method,constraint,gamma,epsilon,seed,nfr,win_rate,tie_rate,mean_token_kl,mean_gold_reward"
    );
    let rows: Vec<Vec<&str>> = rows.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 25);

    let scatter = fs::read_to_string(report.join("scatter.jsonl")).unwrap();
    let mut points: BTreeMap<String, usize> = BTreeMap::new();
    for line in scatter.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        *points.entry(v["run_id"].as_str().unwrap().to_string()).or_default() += 1;
    }
    assert_eq!(points.len(), 25);
    assert!(points.values().all(|&n| n == 10));

    let mut gammas = BTreeMap::new();
    for row in &rows {
        let eval_dir = sb.root.join(row[0]);
        // Recount verdicts straight from the record file.
        let records = fs::read_to_string(eval_dir.join("records.jsonl")).unwrap();
        let (mut pre, mut post, mut n) = (0usize, 0usize, 0usize);
        let mut gold = 0.0;
        for line in records.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            match v["verdict"].as_str().unwrap() {
                "PRE_BETTER" => pre += 1,
                "POST_BETTER" => post += 1,
                "TIE" => {}
                other => panic!("{other}"),
            }
            gold += recount_gold(&v["post_response"]);
            n += 1;
        }
        assert_eq!(row[6].parse::<f64>().unwrap(), pre as f64 / n as f64);
        assert_eq!(row[7].parse::<f64>().unwrap(), post as f64 / n as f64);
        let rates: f64 = row[6..9].iter().map(|x| x.parse::<f64>().unwrap()).sum();
        assert_eq!(rates, 1.0);
        assert!((row[10].parse::<f64>().unwrap() - gold / n as f64).abs() < 1e-12);
        assert!(row[9].parse::<f64>().unwrap() >= 0.0);
        *gammas.entry(row[3].to_string()).or_insert(0) += 1;
    }
    assert_eq!(gammas, BTreeMap::from([("0".into(), 5), ("0.005".into(), 5), ("0.01".into(), 5), ("0.02".into(), 5), ("0.05".into(), 5)]));

    let curves = fs::read_to_string(report.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 25 * 2);

    // Re-running the report is a no-op on its outputs.
    let before = files_in(&report);
    assert_eq!(sb.run(&["report", "--runs", s(&sb.root)]), 0);
    assert_eq!(sb.only("report"), report);
    assert_eq!(files_in(&report), before);
}

#[test]
fn manifests_replay_bit_identically() {
    let sb = sandbox();
    assert_eq!(sb.run(&["gen-data", "--seed", "5"]), 0);
    let data = sb.only("gen-data");
    assert_eq!(sb.run(&["sft", "--seed", "5", "--data", s(&data)]), 0);
    let sft = sb.only("sft");
    assert_eq!(sb.run(&["train-rm", "--seed", "5", "--data", s(&data), "--sft", s(&sft)]), 0);
    let rm = sb.only("train-rm");
    assert_eq!(sb.run(&["align", "--seed", "5", "--data", s(&data), "--sft", s(&sft), "--method", "ppo", "--set", "reward_source=learned", "--rm", s(&rm), "--dump-triggers"]), 0);
    let aligned = sb.only("align");
    assert_eq!(sb.run(&["eval", "--policy", s(&aligned), "--set", "judge=learned", "--rm", s(&rm)]), 0);
    let eval = sb.only("eval");
    assert_eq!(sb.run(&["report", "--runs", s(&eval)]), 0);
    let report = sb.only("report");

    let elsewhere = tempfile::tempdir().unwrap();
    let replay = Pipeline::new(elsewhere.path(), vec!["replay".into()]);
    for dir in [&data, &sft, &rm, &aligned, &eval] {
        let original = RunManifest::load(dir).unwrap();
        let again = replay.replay(&original).unwrap();
        assert_eq!(again.run_id, original.run_id);
        assert_eq!(again.config, original.config);
        assert_eq!(files_in(&elsewhere.path().join(&again.run_id)), files_in(dir), "{}", original.run_id);
    }
    let original = RunManifest::load(&report).unwrap();
    let again = replay.replay(&original).unwrap();
    assert_eq!(files_in(&elsewhere.path().join(&again.run_id)), files_in(&report));

    let aligned_manifest = RunManifest::load(&aligned).unwrap();
    assert!(Path::new(aligned_manifest.output("triggers").unwrap()).is_file());
    assert_eq!(aligned_manifest.config["reward_source"], "learned");
    let eval_manifest = RunManifest::load(&eval).unwrap();
    assert_eq!(eval_manifest.config["method"], "ppo", "eval inherits the aligned run's labels");
    assert_eq!(eval_manifest.config.len(), crate::config::KEYS.len());
    assert!(eval_manifest.duration_secs >= 0.0);
    assert_eq!(eval_manifest.code_fingerprint, crate::manifest::CODE_FINGERPRINT);
    let cfg = load_config(None, &[]).unwrap();
    assert_ne!(cfg.to_map(), eval_manifest.config);
}

#[test]
fn failures_print_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = execute_with(["flipguard", "gen-data", "--set", "gama=0.01", "--out", s(dir.path())], &mut out, &mut err);
    assert_eq!(code, 1);
    let stderr = String::from_utf8(err).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(v["error"], "unknown_key");
    assert!(v["message"].as_str().unwrap().contains("gamma"));
    assert!(out.is_empty());

    let mut err = Vec::new();
    assert_eq!(execute_with(["flipguard", "sft"], &mut Vec::new(), &mut err), 2);
    assert!(String::from_utf8(err).unwrap().contains("Usage:"));
}

#[test]
fn seed_lists_parse() {
    use crate::cli::parse_seeds;
    assert_eq!(parse_seeds("0..4").unwrap(), vec![0, 1, 2, 3, 4]);
    assert_eq!(parse_seeds("0..=2").unwrap(), vec![0, 1, 2]);
    assert_eq!(parse_seeds("3, 9").unwrap(), vec![3, 9]);
    assert!(parse_seeds("4..0").is_err());
    assert!(parse_seeds("x").is_err());
}
