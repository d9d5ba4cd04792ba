//! Grid of runs over missing statistics and methods.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::ValueEnum;
use fedmac_core::config::{ExperimentConfig, Method, MissingStats};
use fedmac_core::federation::ClientExecutor;

use crate::runner::run_experiment;
use crate::Error;

pub const LONG_FILE: &str = "sweep.csv";
pub const TABLE_FILE: &str = "sweep_table.csv";

/// Which data the axis statistics are applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Side {
    #[default]
    Both,
    Client,
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setting {
    pub p_m: f64,
    pub p_s: f64,
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once('/')
            .ok_or_else(|| format!("expected p_m/p_s, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
        Ok(Setting {
            p_m: parse(a)?,
            p_s: parse(b)?,
        })
    }
}

/// Comma-separated `p_m/p_s` pairs, e.g. `1.0/0.1,0.8/0.5`.
pub fn parse_axis(s: &str) -> Result<Vec<Setting>, Error> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(Error::Usage))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: Method,
    pub setting: Setting,
    pub final_accuracy: f64,
    pub dir: PathBuf,
}

fn run_dir(out: &Path, method: Method, s: &Setting) -> PathBuf {
    out.join(method.name()).join(format!("pm{}_ps{}", s.p_m, s.p_s))
}

/// One run per (setting, method); writes a long CSV and a settings-by-method table.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: &[Setting],
    methods: &[Method],
    side: Side,
    out: &Path,
    executor: &dyn ClientExecutor,
) -> Result<Vec<SweepRow>, Error> {
    if axis.is_empty() {
        return Err(Error::Usage("sweep axis is empty".into()));
    }
    if methods.is_empty() {
        return Err(Error::Usage("no methods to sweep".into()));
    }
    let mut configs = Vec::new();
    for s in axis {
        for &method in methods {
            let mut cfg = base.clone();
            cfg.method.method = method;
            let stats = MissingStats { p_m: s.p_m, p_s: s.p_s };
            if side != Side::Server {
                cfg.missing.client = stats;
            }
            if side != Side::Client {
                cfg.missing.server = stats;
            }
            let dir = run_dir(out, method, s);
            cfg.output.dir = dir.to_string_lossy().into_owned();
            cfg.validate()?;
            configs.push((method, *s, dir, cfg));
        }
    }
    let mut rows = Vec::new();
    for (method, setting, dir, cfg) in configs {
        let summary = run_experiment(&cfg, &dir, executor)?;
        rows.push(SweepRow {
            method,
            setting,
            final_accuracy: summary.final_accuracy().unwrap_or(f64::NAN),
            dir,
        });
    }
    write_outputs(out, axis, methods, &rows)?;
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Runtime(format!("{}: {e}", path.display()))
}

fn write_outputs(out: &Path, axis: &[Setting], methods: &[Method], rows: &[SweepRow]) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(LONG_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["method", "p_m", "p_s", "final_accuracy"]).map_err(|e| csv_err(&path, e))?;
    for r in rows {
        w.write_record([
            r.method.name().to_string(),
            r.setting.p_m.to_string(),
            r.setting.p_s.to_string(),
            r.final_accuracy.to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join(TABLE_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut header = vec!["p_m".to_string(), "p_s".to_string()];
    header.extend(methods.iter().map(|m| m.name().to_string()));
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for (i, s) in axis.iter().enumerate() {
        let mut rec = vec![s.p_m.to_string(), s.p_s.to_string()];
        rec.extend(rows[i * methods.len()..(i + 1) * methods.len()].iter().map(|r| r.final_accuracy.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
