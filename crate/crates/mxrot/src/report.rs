//! JSON and CSV report writers.
//!
//! Every JSON report is one object:
//!
//! ```json
//! { "report_type": "...", "params": { ... }, "<scalar fields>": ..., "arrays": { "name": [numbers] } }
//! ```
//!
//! Non-finite numbers (an exact reconstruction's `+∞` QSNR, `log10(0)`) are
//! written as `null`. CSV tables carry one row per block, threshold, dim or
//! sample point with a header line.

use std::path::Path;

use mxrot_core::analysis::{BlockLabel, BlockReport, LossDelta, ThresholdCurve};
use mxrot_core::pipeline::LayerResult;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_type: String,
    pub params: Map<String, Value>,
    #[serde(flatten)]
    pub fields: Map<String, Value>,
    pub arrays: Map<String, Value>,
}

/// `v` as a JSON number, or `null` when not finite.
pub fn number(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

impl Report {
    pub fn new(report_type: &str) -> Self {
        Self {
            report_type: report_type.into(),
            params: Map::new(),
            fields: Map::new(),
            arrays: Map::new(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Serialize) -> Self {
        self.params.insert(
            key.into(),
            serde_json::to_value(value).expect("serializable param"),
        );
        self
    }

    pub fn field(mut self, key: &str, value: impl Serialize) -> Self {
        self.fields.insert(
            key.into(),
            serde_json::to_value(value).expect("serializable field"),
        );
        self
    }

    pub fn number(mut self, key: &str, value: f64) -> Self {
        self.fields.insert(key.into(), number(value));
        self
    }

    pub fn array(mut self, key: &str, values: impl IntoIterator<Item = f64>) -> Self {
        self.arrays.insert(
            key.into(),
            Value::Array(values.into_iter().map(number).collect()),
        );
        self
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        write_atomic(path, self.to_json_string().as_bytes())
    }
}

/// One matrix cell as written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub method: String,
    pub act_format: String,
    pub weight_format: String,
    pub mse: f64,
    pub qsnr_db: Option<f64>,
    pub flops: FlopRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopRecord {
    pub rotation: u64,
    pub matmul: u64,
}

impl From<&LayerResult> for LayerRecord {
    fn from(r: &LayerResult) -> Self {
        Self {
            method: r.method.clone(),
            act_format: r.act_format.clone(),
            weight_format: r.weight_format.clone(),
            mse: r.mse,
            qsnr_db: r.qsnr_db.is_finite().then_some(r.qsnr_db),
            flops: FlopRecord {
                rotation: r.flops.rotation,
                matmul: r.flops.matmul,
            },
        }
    }
}

/// A CSV table held in memory until written.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn cell(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(cell).unwrap_or_default()
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> csv::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| e.into_error().into())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let bytes = self.to_bytes().map_err(std::io::Error::other)?;
        write_atomic(path, &bytes)
    }
}

fn label_name(l: BlockLabel) -> &'static str {
    match l {
        BlockLabel::Regular => "regular",
        BlockLabel::Outlier => "outlier",
    }
}

pub fn block_table(rep: &BlockReport) -> Table {
    let mut t = Table::new(&[
        "index",
        "row",
        "block",
        "amax",
        "label",
        "mse",
        "max_abs_error",
        "relative_error_max",
        "baseline_mse",
        "baseline_relative_error_max",
        "mse_ratio",
    ]);
    for b in &rep.blocks {
        t.push(vec![
            b.index.to_string(),
            b.row.to_string(),
            b.block.to_string(),
            cell(b.amax as f64),
            label_name(b.label).into(),
            cell(b.mse),
            cell(b.max_abs_error),
            cell(b.relative_error_max),
            opt_cell(b.baseline_mse),
            opt_cell(b.baseline_relative_error_max),
            opt_cell(b.mse_ratio()),
        ]);
    }
    t
}

pub fn block_report_json(rep: &BlockReport) -> Report {
    let mut r = Report::new("blocks")
        .param("format", rep.config.to_string())
        .param("block_size", rep.config.block_size)
        .param("baseline", rep.baseline.map(|b| b.to_string()))
        .number("outlier_threshold", rep.threshold as f64)
        .field("regular_count", rep.regular_count)
        .field("outlier_count", rep.outlier_count)
        .field("mean_regular_mse", rep.mean_regular_mse.map(number))
        .field(
            "log10_mean_regular_mse",
            rep.log10_mean_regular_mse.map(number),
        )
        .field("mean_outlier_mse", rep.mean_outlier_mse.map(number))
        .array("amax", rep.blocks.iter().map(|b| b.amax as f64))
        .array(
            "outlier",
            rep.blocks
                .iter()
                .map(|b| (b.label == BlockLabel::Outlier) as u8 as f64),
        )
        .array("mse", rep.blocks.iter().map(|b| b.mse))
        .array(
            "relative_error_max",
            rep.blocks.iter().map(|b| b.relative_error_max),
        );
    if rep.baseline.is_some() {
        r = r
            .array(
                "baseline_mse",
                rep.blocks
                    .iter()
                    .map(|b| b.baseline_mse.unwrap_or(f64::NAN)),
            )
            .array(
                "baseline_relative_error_max",
                rep.blocks
                    .iter()
                    .map(|b| b.baseline_relative_error_max.unwrap_or(f64::NAN)),
            );
    }
    r
}

/// Exceedance curve, optionally against the same tensor after a rotation.
pub fn threshold_table(before: &ThresholdCurve, after: Option<&ThresholdCurve>) -> Table {
    let mut t = match after {
        Some(_) => Table::new(&["threshold", "fraction_before", "fraction_after"]),
        None => Table::new(&["threshold", "fraction"]),
    };
    for (i, &th) in before.thresholds.iter().enumerate() {
        let mut row = vec![cell(th), cell(before.fractions[i])];
        if let Some(a) = after {
            row.push(cell(a.fractions[i]));
        }
        t.push(row);
    }
    t
}

pub fn loss_delta_json(d: &LossDelta) -> Report {
    Report::new("loss_delta")
        .number("threshold_pre", d.threshold_pre as f64)
        .number("threshold_post", d.threshold_post as f64)
        .number("log10_before", d.before)
        .number("log10_after", d.after)
        .number("log10_after_own_threshold", d.after_own_threshold)
        .number("growth", d.growth())
        .field("regular_before", d.regular_before)
        .field("regular_after", d.regular_after)
        .field("regular_after_own", d.regular_after_own)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_shape() {
        let r = Report::new("sweep")
            .param("seed", 3)
            .number("best", 0.5)
            .number("inf", f64::INFINITY)
            .array("x", [1.0, f64::NAN]);
        let v: Value = serde_json::from_str(&r.to_json_string()).unwrap();
        assert_eq!(v["report_type"], "sweep");
        assert_eq!(v["params"]["seed"], 3);
        assert_eq!(v["best"], 0.5);
        assert!(v["inf"].is_null());
        assert_eq!(v["arrays"]["x"][0], 1.0);
        assert!(v["arrays"]["x"][1].is_null());
        let back: Report = serde_json::from_value(v).unwrap();
        assert_eq!(back.report_type, "sweep");
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut t = Table::new(&["dim", "mse"]);
        t.push(vec!["32".into(), cell(0.25)]);
        t.push(vec!["64".into(), cell(f64::NAN)]);
        assert_eq!(
            String::from_utf8(t.to_bytes().unwrap()).unwrap(),
            "dim,mse\n32,0.25\n64,\n"
        );
    }
}
