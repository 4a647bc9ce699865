//! Output artifacts: evaluation and manipulation reports, the loss curve.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use transporter_core::gradcheck::CheckRow;
use transporter_core::manip::{EpisodeResult, ManipMetrics};
use transporter_core::metrics::{Aggregate, PairReport};
use transporter_core::train::StepRecord;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub tau: f64,
    pub per_pair: Vec<PairReport>,
    pub aggregate: Aggregate,
    pub config_echo: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipReport {
    pub scene: String,
    /// `oracle` or the checkpoint path.
    pub source: String,
    pub seed: u64,
    pub aggregate: ManipMetrics,
    /// Episode log files relative to the report.
    pub episodes: Vec<String>,
    pub config_echo: Value,
}

pub const LOSS_HEADER: [&str; 6] = ["step", "L_occ_t", "L_occ_s", "L_corr", "L_axis", "total"];

/// Step-by-step loss curve; inactive terms are left empty. Each row is
/// flushed so an interrupted run keeps its curve.
pub struct LossCsv {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl LossCsv {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(file),
        };
        w.row(LOSS_HEADER.map(String::from))?;
        Ok(w)
    }

    fn row(&mut self, fields: [String; 6]) -> Result<()> {
        let err = |e: csv::Error| Error::Format(format!("{}: {e}", self.path.display()));
        self.writer.write_record(&fields).map_err(err)?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn push(&mut self, r: &StepRecord) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.row([
            r.step.to_string(),
            r.parts.occ_t.to_string(),
            r.parts.occ_s.to_string(),
            opt(r.parts.corr),
            opt(r.parts.axis),
            r.total.to_string(),
        ])
    }
}

/// One loss-curve row read back.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub occ_t: f64,
    pub occ_s: f64,
    pub corr: Option<f64>,
    pub axis: Option<f64>,
    pub total: f64,
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(LOSS_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| bad(format!("bad number `{s}`")))
    };
    let opt = |s: &str| {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        rows.push(LossRow {
            step: rec[0]
                .parse()
                .map_err(|_| bad(format!("bad step `{}`", &rec[0])))?,
            occ_t: num(&rec[1])?,
            occ_s: num(&rec[2])?,
            corr: opt(&rec[3])?,
            axis: opt(&rec[4])?,
            total: num(&rec[5])?,
        });
    }
    Ok(rows)
}

pub fn read_episode(path: &Path) -> Result<EpisodeResult> {
    crate::dataset::read_json(path)
}

/// Fixed-width pass/fail table.
pub fn grad_check_table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!(
        "{:<width$}  {:<9}  {:>7}  {:>10}  result\n",
        "case", "kind", "entries", "max_error"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<width$}  {:<9}  {:>7}  {:>10.3e}  {}\n",
            r.name,
            format!("{:?}", r.kind).to_lowercase(),
            r.entries,
            r.max_error,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    s
}
