use std::fs;

use crate::core::alignment::{AlignMethod, StepMetrics, TriggerRecord};
use crate::core::data::{generate_dataset, SplitSizes, TokenSequence, WorldSpec};
use crate::core::model::{init_params, ModelConfig, RewardHead};
use crate::core::Tensor;
use crate::io::*;
use crate::Error;

fn small() -> crate::core::data::Dataset {
    generate_dataset(&WorldSpec::default(), SplitSizes { sft: 12, rm: 12, align: 12, test: 12 }, 3).unwrap()
}

#[test]
fn datasets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small();
    let p = dir.path().join("pairs.jsonl");
    save_dataset(&p, &ds.align).unwrap();
    assert_eq!(load_dataset(&p).unwrap(), ds.align);
    let s = dir.path().join("sft.jsonl");
    save_sft(&s, &ds.sft).unwrap();
    assert_eq!(load_sft(&s).unwrap(), ds.sft);
    let text = fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert!(!text.contains('\r'));
    assert!(text.lines().all(|l| l.starts_with("{\"prompt\":[")));
}

#[test]
fn out_of_vocabulary_token_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    let good = r#"{"prompt":[2,3,4,5],"chosen":[2,1],"rejected":[24,1],"gold_margin":3.0}"#;
    let bad = r#"{"prompt":[2,3,99,5],"chosen":[2,1],"rejected":[24,1],"gold_margin":3.0}"#;
    fs::write(&p, format!("{good}\n{good}\n{bad}\n")).unwrap();
    match load_dataset(&p) {
        Err(Error::Record { line, message, .. }) => {
            assert_eq!(line, 3);
            assert!(message.contains("99"), "{message}");
        }
        other => panic!("expected a record error, got {other:?}"),
    }
}

#[test]
fn malformed_json_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    fs::write(&p, "{\"prompt\":[2,3,4,5],\"chosen\":[2,1],\"rejected\":[24,1],\"gold_margin\":3.0}\n{\"prompt\":[2,3\n").unwrap();
    assert!(matches!(load_dataset(&p), Err(Error::Record { line: 2, .. })));
    fs::write(&p, "{\"prompt\":[2,3,4,5],\"chosen\":[2],\"rejected\":[24,1],\"gold_margin\":3.0}\n").unwrap();
    assert!(matches!(load_dataset(&p), Err(Error::Record { line: 1, .. })), "missing EOS must be rejected");
}

#[test]
fn crlf_files_parse_like_lf() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small();
    let lf = dir.path().join("lf.jsonl");
    save_dataset(&lf, &ds.test).unwrap();
    let crlf = dir.path().join("crlf.jsonl");
    fs::write(&crlf, fs::read_to_string(&lf).unwrap().replace('\n', "\r\n")).unwrap();
    assert_eq!(load_dataset(&crlf).unwrap(), load_dataset(&lf).unwrap());
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = init_params(&ModelConfig::default(), 9).unwrap();
    let path = dir.path().join("policy.fgck");
    save_policy(&path, &p).unwrap();
    let back = load_policy(&path).unwrap();
    assert_eq!(back.fingerprint(), p.fingerprint());

    let head = RewardHead { projection: Tensor::matrix(32, 1, (0..32).map(|i| i as f64 / 7.0).collect()).unwrap(), bias: -0.5 };
    let rm = dir.path().join("reward.fgck");
    save_reward_model(&rm, &p, &head).unwrap();
    let (trunk, h) = load_reward_model(&rm).unwrap();
    assert_eq!(trunk.params(), p.params());
    assert_eq!(h, head);
    assert!(load_reward_model(&path).is_err(), "a policy checkpoint has no reward head");

    let mut bytes = fs::read(&path).unwrap();
    bytes[40] ^= 1;
    fs::write(&path, bytes).unwrap();
    assert!(matches!(load_policy(&path), Err(Error::Artifact { .. })));
}

#[test]
fn metric_and_trigger_logs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (m, t) = (dir.path().join("m.jsonl"), dir.path().join("t.jsonl"));
    let mut log = TrainLog::create(&m, Some(&t)).unwrap();
    let metrics = StepMetrics {
        step: 4,
        method: AlignMethod::Dpo,
        loss: 0.1 + 0.2,
        align_loss: 0.25,
        focal_term: 0.30000000000000004 - 0.25,
        trigger_rate: 0.5,
        mean_token_kl: 1e-17,
        mean_reward: -3.25,
        grad_norm: 7.0,
    };
    let trig = TriggerRecord {
        step: 4,
        example_id: 11,
        delta: 0.125,
        triggered: true,
        prompt: TokenSequence(vec![2, 3]),
        focal_target: TokenSequence(vec![4, 1]),
    };
    log.record(&metrics, &[trig.clone(), TriggerRecord { triggered: false, ..trig }]).unwrap();
    log.finish().unwrap();
    let back = load_metrics(&m).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].method, "dpo");
    assert_eq!(back[0].loss.to_bits(), metrics.loss.to_bits());
    assert_eq!(back[0].focal_term.to_bits(), metrics.focal_term.to_bits());
    assert_eq!(back[0].mean_token_kl, 1e-17);
    let keys: Vec<String> = {
        let v: serde_json::Value = serde_json::from_str(fs::read_to_string(&m).unwrap().trim()).unwrap();
        v.as_object().unwrap().keys().cloned().collect()
    };
    let mut expected =
        ["step", "method", "loss", "align_loss", "focal_term", "trigger_rate", "mean_token_kl", "mean_reward", "grad_norm"].map(String::from).to_vec();
    expected.sort();
    assert_eq!(keys, expected);
    let triggers = fs::read_to_string(&t).unwrap();
    assert_eq!(triggers, "{\"step\":4,\"example_id\":11,\"delta\":0.125,\"triggered\":true}\n{\"step\":4,\"example_id\":11,\"delta\":0.125,\"triggered\":false}\n");
}
