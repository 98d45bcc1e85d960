//! Result files. Records are deterministic; wall-clock time and the
//! completion timestamp go only into a `timing.json` sidecar. Every CSV
//! starts with a `# config` comment line echoing the full config.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;

use crate::ablate::AblationRecord;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::metrics::Metrics;
use crate::train::{ExperimentResult, RunStatus};

pub const RESULT_JSON: &str = "result.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const EPOCHS_CSV: &str = "epochs.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const TIMING_JSON: &str = "timing.json";

pub const ABLATION_COLUMNS: [&str; 11] = [
    "row", "grid", "modules", "components", "wiring", "status", "accuracy", "macro_f1", "auc", "params", "macs",
];

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn config_line(cfg: &ExperimentConfig) -> String {
    format!("# config {}\n", serde_json::to_string(cfg).expect("config serializes"))
}

fn auc_field(m: &Metrics) -> String {
    m.auc.map(|a| a.to_string()).unwrap_or_default()
}

pub fn status_label(s: &RunStatus) -> &'static str {
    match s {
        RunStatus::Completed => "completed",
        RunStatus::Diverged { .. } => "diverged",
    }
}

pub fn metrics_csv(r: &ExperimentResult) -> String {
    let mut s = config_line(&r.config);
    s.push_str("task,modality,accuracy,macro_f1,auc\n");
    for h in &r.test {
        let modality = h.modality.map(|m| m.to_string()).unwrap_or_else(|| "fused".into());
        let m = &h.metrics;
        writeln!(s, "{},{modality},{},{},{}", h.task, m.accuracy, m.macro_f1, auc_field(m)).unwrap();
    }
    s
}

pub fn epochs_csv(r: &ExperimentResult) -> String {
    let mut s = config_line(&r.config);
    s.push_str("epoch,train_loss,val_loss,val_accuracy\n");
    for e in &r.epochs {
        writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.val_accuracy).unwrap();
    }
    s
}

pub fn ablation_csv(base: &ExperimentConfig, records: &[AblationRecord]) -> String {
    let mut s = config_line(base);
    s.push_str(&ABLATION_COLUMNS.join(","));
    s.push('\n');
    for rec in records {
        let row = &rec.row;
        let grid = serde_json::to_value(row.grid).expect("grid serializes");
        let wiring = serde_json::to_value(row.wiring).expect("wiring serializes");
        let head = format!(
            "{},{},{},{},{}",
            row.id,
            grid.as_str().unwrap_or_default(),
            row.module_bits(),
            row.component_bits(),
            wiring.as_str().unwrap_or_default()
        );
        match &rec.result {
            Some(r) => {
                let m = &r.summary;
                writeln!(
                    s,
                    "{head},{},{},{},{},{},{}",
                    status_label(&r.status),
                    m.accuracy,
                    m.macro_f1,
                    auc_field(m),
                    r.params,
                    r.macs
                )
                .unwrap();
            }
            None => writeln!(s, "{head},failed,,,,,").unwrap(),
        }
    }
    s
}

/// Text table with aligned columns, for terminal output.
pub fn ablation_table(records: &[AblationRecord]) -> String {
    let mut s = format!(
        "{:<20} {:<8} {:<10} {:>8} {:>8} {:>8} {:>9} {:>10}\n",
        "row", "modules", "components", "acc", "f1", "auc", "params", "macs"
    );
    for rec in records {
        let r = &rec.row;
        match &rec.result {
            Some(x) => {
                let m = &x.summary;
                let auc = m.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
                writeln!(
                    s,
                    "{:<20} {:<8} {:<10} {:>8.4} {:>8.4} {:>8} {:>9} {:>10}",
                    r.id,
                    r.module_bits(),
                    r.component_bits(),
                    m.accuracy,
                    m.macro_f1,
                    auc,
                    x.params,
                    x.macs
                )
                .unwrap();
            }
            None => writeln!(
                s,
                "{:<20} {:<8} {:<10} failed: {}",
                r.id,
                r.module_bits(),
                r.component_bits(),
                rec.error.as_deref().unwrap_or("")
            )
            .unwrap(),
        }
    }
    s
}

pub fn write_timing(dir: &Path, wall_clock_seconds: f64, extra: serde_json::Value) -> Result<()> {
    let unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &dir.join(TIMING_JSON),
        &json!({
            "wall_clock_seconds": wall_clock_seconds,
            "finished_unix_seconds": unix,
            "rows": extra,
        }),
    )
}

pub fn write_train_outputs(dir: &Path, r: &ExperimentResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join(RESULT_JSON), r)?;
    std::fs::write(dir.join(METRICS_CSV), metrics_csv(r))?;
    std::fs::write(dir.join(EPOCHS_CSV), epochs_csv(r))?;
    write_timing(dir, r.wall_clock_seconds, serde_json::Value::Null)
}

pub fn write_ablation_outputs(
    dir: &Path,
    base: &ExperimentConfig,
    records: &[AblationRecord],
    wall_clock_seconds: f64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(
        &dir.join(ABLATION_JSON),
        &json!({ "config_digest": base.digest(), "config": base, "rows": records }),
    )?;
    std::fs::write(dir.join(ABLATION_CSV), ablation_csv(base, records))?;
    let per_row: serde_json::Map<String, serde_json::Value> = records
        .iter()
        .filter_map(|r| r.result.as_ref().map(|x| (r.row.id.clone(), json!(x.wall_clock_seconds))))
        .collect();
    write_timing(dir, wall_clock_seconds, serde_json::Value::Object(per_row))
}
