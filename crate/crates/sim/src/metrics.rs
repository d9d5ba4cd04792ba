//! Per-round metrics as CSV and as JSON lines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fedmac_core::config::ExperimentConfig;
use fedmac_core::federation::RoundRecord;
use serde::Serialize;

use crate::Error;

pub const CSV_FILE: &str = "metrics.csv";
pub const JSONL_FILE: &str = "metrics.jsonl";
pub const CSV_HEADER: [&str; 7] = [
    "round",
    "accuracy",
    "task_loss",
    "shared_loss",
    "sim_loss",
    "total_loss",
    "seconds",
];
pub const FORMAT: &str = "fedmac-metrics/1";

#[derive(Serialize)]
struct Header<'a> {
    kind: &'static str,
    format: &'static str,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct Row<'a> {
    kind: &'static str,
    #[serde(flatten)]
    record: &'a RoundRecord,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_row(r: &RoundRecord) -> [String; 7] {
    [
        r.round.to_string(),
        cell(r.accuracy),
        cell(r.task_loss),
        cell(r.shared_loss),
        cell(r.sim_loss),
        cell(r.total_loss),
        r.seconds.to_string(),
    ]
}

/// Streams records to `metrics.csv` and `metrics.jsonl` in one directory.
/// Loss cells left empty mean "not computed": round 0 has no training and
/// zero-imputation methods have no contrastive terms.
pub struct MetricsWriter {
    dir: PathBuf,
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(dir: &Path, config: &ExperimentConfig) -> Result<Self, Error> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(CSV_FILE);
        let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| Error::Runtime(format!("{}: {e}", csv_path.display())))?;
        csv.write_record(CSV_HEADER)
            .map_err(|e| Error::Runtime(format!("{}: {e}", csv_path.display())))?;
        let jsonl_path = dir.join(JSONL_FILE);
        let file = File::create(&jsonl_path).map_err(|e| Error::io(&jsonl_path, e))?;
        let mut w = Self {
            dir: dir.into(),
            csv,
            jsonl: BufWriter::new(file),
        };
        w.json_line(&Header {
            kind: "header",
            format: FORMAT,
            config,
        })?;
        Ok(w)
    }

    fn json_line<T: Serialize>(&mut self, value: &T) -> Result<(), Error> {
        let path = self.dir.join(JSONL_FILE);
        serde_json::to_writer(&mut self.jsonl, value).map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
        self.jsonl.write_all(b"\n").map_err(|e| Error::io(&path, e))
    }

    pub fn write(&mut self, record: &RoundRecord) -> Result<(), Error> {
        let path = self.dir.join(CSV_FILE);
        self.csv
            .write_record(csv_row(record))
            .map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
        self.json_line(&Row { kind: "round", record })
    }

    pub fn finish(mut self) -> Result<(), Error> {
        let csv_path = self.dir.join(CSV_FILE);
        self.csv.flush().map_err(|e| Error::io(&csv_path, e))?;
        let jsonl_path = self.dir.join(JSONL_FILE);
        self.jsonl.flush().map_err(|e| Error::io(&jsonl_path, e))
    }
}

/// The config echoed in a JSONL header.
pub fn header_config(jsonl: &str) -> Result<ExperimentConfig, Error> {
    let first = jsonl.lines().next().ok_or_else(|| Error::Runtime("empty metrics file".into()))?;
    let value: serde_json::Value = serde_json::from_str(first).map_err(|e| Error::Runtime(e.to_string()))?;
    serde_json::from_value(value["config"].clone()).map_err(|e| Error::Config(e.to_string()))
}
