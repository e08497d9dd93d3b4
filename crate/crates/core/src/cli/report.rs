//! Report rows and their CSV, JSON and text renderings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::CorpusReport;

pub const COLUMN_TITLES: [&str; 5] = ["Method", "Rouge-1", "Rouge-2", "Rouge-L", "BLEU"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu: f64,
}

impl ReportRow {
    pub fn new(method: impl Into<String>, r: &CorpusReport) -> Self {
        ReportRow {
            method: method.into(),
            rouge1: r.rouge1,
            rouge2: r.rouge2,
            rouge_l: r.rouge_l,
            bleu: r.bleu,
        }
    }

    fn cells(&self) -> [String; 5] {
        [
            self.method.clone(),
            format!("{:.2}", self.rouge1),
            format!("{:.2}", self.rouge2),
            format!("{:.2}", self.rouge_l),
            format!("{:.2}", self.bleu),
        ]
    }
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("row serializes");
    }
    if rows.is_empty() {
        w.write_record(["method", "rouge1", "rouge2", "rougeL", "bleu"]).expect("header writes");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| format!("{}: {e}", path.display())))
        .collect()
}

pub fn to_json(rows: &[ReportRow]) -> String {
    let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
    s.push('\n');
    s
}

/// Rows as `Method & 30.21 & 13.45 & 24.91 & 34.03`, two decimals, after a
/// title line in the same shape.
pub fn to_ampersand_table(rows: &[ReportRow]) -> String {
    let mut out = COLUMN_TITLES.join(" & ");
    out.push('\n');
    for r in rows {
        out.push_str(&r.cells().join(" & "));
        out.push('\n');
    }
    out
}

/// Space-padded columns: method left-aligned, scores right-aligned.
pub fn to_aligned_table(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 5]> = rows.iter().map(ReportRow::cells).collect();
    let mut width = COLUMN_TITLES.map(str::len);
    for c in &cells {
        for (w, s) in width.iter_mut().zip(c) {
            *w = (*w).max(s.chars().count());
        }
    }
    let line = |c: [&str; 5]| {
        let mut s = format!("{:<w$}", c[0], w = width[0]);
        for i in 1..5 {
            s.push_str(&format!("  {:>w$}", c[i], w = width[i]));
        }
        s.push('\n');
        s
    };
    let mut out = line(COLUMN_TITLES);
    let total: usize = width.iter().sum::<usize>() + 2 * 4;
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for c in &cells {
        out.push_str(&line([&c[0], &c[1], &c[2], &c[3], &c[4]]));
    }
    out
}
