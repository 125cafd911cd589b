use std::path::Path;

use ndarray::Array2;

use super::protocols::Showcase;
use super::report::RunReport;
use crate::data::TransformLog;
use crate::error::{Result, TsnetError};
use crate::training::{Checkpoint, Predictions, TrainHistory};

pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const MODEL_FILE: &str = "model.json";

pub const HISTORY_HEADER: [&str; 9] = [
    "epoch",
    "loss_total",
    "loss_cl",
    "loss_kl",
    "loss_hmse",
    "val_mse",
    "val_mae",
    "val_nll",
    "wall_secs",
];

fn csv_err(path: &Path, e: csv::Error) -> TsnetError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => TsnetError::io(path, io),
        other => TsnetError::Schema(format!("{}: {other:?}", path.display())),
    }
}

/// `feature names..., mu_<target>..., var_<target>..., k_d`.
pub fn predictions_header(features: &[String], targets: &[String]) -> Vec<String> {
    features
        .iter()
        .cloned()
        .chain(targets.iter().map(|t| format!("mu_{t}")))
        .chain(targets.iter().map(|t| format!("var_{t}")))
        .chain(std::iter::once("k_d".to_string()))
        .collect()
}

/// Writes one row per evaluation point of `sc`.
pub fn write_predictions(path: &Path, sc: &Showcase) -> Result<()> {
    write_prediction_table(path, &sc.model.transform_log, &sc.eval_x, &sc.predictions)
}

/// Writes `x` and its predictions under the column names in `log`. Floats
/// use Rust's shortest round-trip formatting.
pub fn write_prediction_table(path: &Path, log: &TransformLog, x: &Array2<f64>, p: &Predictions) -> Result<()> {
    if x.nrows() != p.mean.nrows() || x.nrows() != p.k_d.len() {
        return Err(TsnetError::shape("write_prediction_table", "row counts differ"));
    }
    let features: Vec<String> = log.features.iter().map(|c| c.name.clone()).collect();
    let targets: Vec<String> = log.targets.iter().map(|c| c.name.clone()).collect();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(predictions_header(&features, &targets))
        .map_err(|e| csv_err(path, e))?;
    for (i, row) in x.rows().into_iter().enumerate() {
        let rec: Vec<String> = row
            .iter()
            .chain(p.mean.row(i).iter())
            .chain(p.var.row(i).iter())
            .chain(std::iter::once(&p.k_d[i]))
            .map(|v| v.to_string())
            .collect();
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| TsnetError::io(path, e))
}

pub fn write_history(path: &Path, h: &TrainHistory) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(HISTORY_HEADER).map_err(|e| csv_err(path, e))?;
    for r in &h.records {
        let vals = [
            r.loss_total,
            r.loss_cl,
            r.loss_kl,
            r.loss_hmse,
            r.val.mse,
            r.val.mae,
            r.val.nll,
            r.wall_secs,
        ];
        let rec: Vec<String> = std::iter::once(r.epoch.to_string())
            .chain(vals.iter().map(|v| v.to_string()))
            .collect();
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| TsnetError::io(path, e))
}

/// Writes the showcase files (predictions, history, model checkpoint) and
/// then `metrics.json`, listing every file in `report.files`.
pub fn emit_outputs(out_dir: &Path, report: &mut RunReport, showcase: Option<&Showcase>) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| TsnetError::io(out_dir, e))?;
    report.files.clear();
    if let Some(sc) = showcase {
        write_predictions(&out_dir.join(PREDICTIONS_FILE), sc)?;
        write_history(&out_dir.join(HISTORY_FILE), &sc.history)?;
        Checkpoint::new(sc.train_config.clone(), sc.seed, sc.model.clone()).save(&out_dir.join(MODEL_FILE))?;
        report.files.extend([PREDICTIONS_FILE, HISTORY_FILE, MODEL_FILE].map(String::from));
    }
    report.files.push(METRICS_FILE.to_string());
    let path = out_dir.join(METRICS_FILE);
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(&path, text).map_err(|e| TsnetError::io(&path, e))
}

/// Reads a `metrics.json` back.
pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).map_err(|e| TsnetError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
