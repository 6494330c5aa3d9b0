//! Decoder ablation: the four ASPP/OCR toggle combinations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::Result;
use crate::metrics::{percent, MeanPolicy, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::profiler::count_params;
use crate::train::{confusion_on, train_on, DataConfig, TrainConfig};

/// (label, use_aspp, use_ocr) in table order.
pub const ABLATION_ROWS: [(&str, bool, bool); 4] = [
    ("Baseline", false, false),
    ("Baseline + ASPP", true, false),
    ("Baseline + OCR", false, true),
    ("Baseline + ASPP + OCR", true, true),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub use_aspp: bool,
    pub use_ocr: bool,
    pub params: usize,
    pub report: MetricReport,
}

/// Builds, trains and evaluates each toggle combination from the same seed.
pub fn run_ablation(
    base: &ModelConfig,
    train: &[Sample],
    val: &[Sample],
    data: &DataConfig,
    cfg: &TrainConfig,
    class_names: &[String],
) -> Result<Vec<AblationRow>> {
    ABLATION_ROWS
        .iter()
        .map(|&(label, aspp, ocr)| {
            let mut model = Model::new(&base.clone().with_ablation(aspp, ocr), cfg.seed)?;
            train_on(&mut model, train, val, data, cfg, None, None)?;
            let report = confusion_on(&model, val, data, cfg.batch_size)?
                .report(class_names, MeanPolicy::IncludeAsZero)?;
            Ok(AblationRow {
                label: label.to_string(),
                use_aspp: aspp,
                use_ocr: ocr,
                params: count_params(&model),
                report,
            })
        })
        .collect()
}

/// Aligned text table: Method, Overall Accuracy, Mean F1-Score, mIoU.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let headers = ["Method", "Overall Accuracy", "Mean F1-Score", "mIoU"];
    let body: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                percent(r.report.overall_accuracy),
                percent(r.report.mean_f1),
                percent(r.report.mean_iou),
            ]
        })
        .collect();
    let mut width = headers.map(str::len);
    for row in &body {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, cells: [&str; 4]| {
        let _ = writeln!(
            s,
            "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}",
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            w0 = width[0],
            w1 = width[1],
            w2 = width[2],
            w3 = width[3]
        );
    };
    line(&mut s, headers);
    for row in &body {
        line(&mut s, [&row[0], &row[1], &row[2], &row[3]]);
    }
    s
}
