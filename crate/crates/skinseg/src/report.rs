//! Report, curve, grid and training-history files.

use std::fmt::Write as _;
use std::path::Path;

use skinseg_core::metrics::{ComparisonRow, CurveRow, EvalReport};
use skinseg_core::training::History;

use crate::error::Result;
use crate::io::{read_text, write_text};

pub fn report_json(report: &EvalReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_text(path, &report_json(report)?)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("threshold,mean_iou,precision,recall\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.threshold, r.mean_iou, r.precision, r.recall);
    }
    s
}

pub fn grid_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("method,mean_iou,top1_percent,mean_precision,mean_recall\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.method, r.mean_iou, r.top1_percent, r.mean_precision, r.mean_recall);
    }
    s
}

/// Fixed-width table for terminals.
pub fn grid_table(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$}  {:>7}  {:>7}  {:>9}  {:>7}\n", "method", "IoU", "Top-1", "precision", "recall");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>7.2}  {:>7.2}  {:>9.2}  {:>7.2}",
            r.method,
            100.0 * r.mean_iou,
            r.top1_percent,
            100.0 * r.mean_precision,
            100.0 * r.mean_recall
        );
    }
    s
}

/// One JSON object per epoch.
pub fn history_jsonl(history: &History) -> Result<String> {
    let mut s = String::new();
    for e in &history.epochs {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    Ok(s)
}

/// Per-epoch validation curves for plotting.
pub fn history_csv(history: &History) -> String {
    let mut s = String::from("epoch,phase,loss_total,loss_ce,loss_crf,loss_wce,val_skin_iou,val_body_iou\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in &history.epochs {
        let phase = serde_json::to_value(e.phase).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            e.epoch,
            phase,
            e.loss_total,
            e.loss_ce,
            e.loss_crf,
            e.loss_wce,
            opt(e.val_skin_iou),
            opt(e.val_body_iou)
        );
    }
    s
}
