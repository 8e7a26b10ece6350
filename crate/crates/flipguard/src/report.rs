//! Summary, scatter and curve files over a set of evaluation runs. The
//! output depends only on the manifests and the record and metric files
//! they point to.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use flipguard_core::data::gold_reward_with;
use flipguard_core::eval::flip_stats;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::manifest::RunManifest;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SCATTER_FILE: &str = "scatter.jsonl";
pub const CURVES_FILE: &str = "curves.csv";

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "run_id",
    "method",
    "constraint",
    "gamma",
    "epsilon",
    "seed",
    "nfr",
    "win_rate",
    "tie_rate",
    "mean_token_kl",
    "mean_gold_reward",
];

pub const CURVE_COLUMNS: [&str; 9] =
    ["run_id", "step", "loss", "align_loss", "focal_term", "trigger_rate", "mean_token_kl", "mean_reward", "grad_norm"];

#[derive(Serialize)]
struct ScatterPoint<'a> {
    run_id: &'a str,
    prompt_id: usize,
    pre_score: f64,
    post_score: f64,
    verdict: &'a str,
}

/// The metrics log of the aligned run an evaluation judged, found through
/// the manifest beside the aligned checkpoint.
pub fn metrics_log_for(eval: &RunManifest) -> Option<PathBuf> {
    let dir = eval.input("policy")?.parent()?;
    let aligned = RunManifest::load(dir).ok()?;
    aligned.output("metrics").ok().map(Path::to_path_buf)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

/// Writes the three report files into `out_dir` and returns them by role.
/// Flip statistics and gold reward are recomputed from each record file.
pub fn emit_report(manifests: &[RunManifest], out_dir: &Path) -> Result<Vec<(&'static str, PathBuf)>> {
    io::create_dir(out_dir)?;
    let summary_path = out_dir.join(SUMMARY_FILE);
    let scatter_path = out_dir.join(SCATTER_FILE);
    let curves_path = out_dir.join(CURVES_FILE);

    let mut summary = csv_writer(&summary_path)?;
    summary.write_record(SUMMARY_COLUMNS)?;
    let mut curves = csv_writer(&curves_path)?;
    curves.write_record(CURVE_COLUMNS)?;
    let mut scatter = BufWriter::new(File::create(&scatter_path).map_err(|e| Error::io(&scatter_path, e))?);

    for m in manifests {
        let cfg = RunConfig::from_map(&m.config)?;
        let records = io::load_records(m.output("records")?)?;
        let stats = flip_stats(&records)?;
        let world = cfg.world();
        let gold: f64 = records
            .iter()
            .map(|r| gold_reward_with(&world, r.post_response.tokens()))
            .collect::<Result<Vec<f64>, _>>()?
            .iter()
            .sum::<f64>()
            / records.len() as f64;
        let kl = m.metrics.get("mean_token_kl").copied().unwrap_or(f64::NAN);
        let entries = cfg.to_map();
        let cell = |k: &str| entries[k].clone();
        summary.write_record([
            m.run_id.clone(),
            cell("method"),
            cell("constraint"),
            cell("gamma"),
            cell("epsilon"),
            cell("seed"),
            stats.nfr.to_string(),
            stats.win_rate.to_string(),
            stats.tie_rate.to_string(),
            kl.to_string(),
            gold.to_string(),
        ])?;

        for r in &records {
            let point = ScatterPoint {
                run_id: &m.run_id,
                prompt_id: r.prompt_id,
                pre_score: r.pre_score,
                post_score: r.post_score,
                verdict: r.verdict.as_str(),
            };
            serde_json::to_writer(&mut scatter, &point)?;
            scatter.write_all(b"\n").map_err(|e| Error::io(&scatter_path, e))?;
        }

        if let Some(log) = metrics_log_for(m) {
            for s in io::load_metrics(&log)? {
                curves.write_record([
                    m.run_id.clone(),
                    s.step.to_string(),
                    s.loss.to_string(),
                    s.align_loss.to_string(),
                    s.focal_term.to_string(),
                    s.trigger_rate.to_string(),
                    s.mean_token_kl.to_string(),
                    s.mean_reward.to_string(),
                    s.grad_norm.to_string(),
                ])?;
            }
        }
    }
    summary.flush().map_err(|e| Error::io(&summary_path, e))?;
    curves.flush().map_err(|e| Error::io(&curves_path, e))?;
    scatter.flush().map_err(|e| Error::io(&scatter_path, e))?;
    Ok(vec![("summary", summary_path), ("scatter", scatter_path), ("curves", curves_path)])
}
