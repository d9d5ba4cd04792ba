//! Full experiment runs: setup, rounds, metrics files and the final checkpoint.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fedmac_core::config::{DataSource, ExperimentConfig};
use fedmac_core::federation::{ClientExecutor, Experiment, RoundRecord};

use crate::files::{self, CHECKPOINT_FILE};
use crate::metrics::MetricsWriter;
use crate::Error;

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub history: Vec<RoundRecord>,
}

impl RunSummary {
    /// Accuracy of the last evaluated round.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.history.iter().rev().find_map(|r| r.accuracy)
    }
}

/// Builds the experiment, loading the dataset file when the config asks for one.
pub fn setup(cfg: &ExperimentConfig) -> Result<Experiment, Error> {
    cfg.validate()?;
    let data = match (cfg.data.source, &cfg.data.path) {
        (DataSource::File, Some(p)) => Some(files::load_dataset(Path::new(p))?),
        _ => None,
    };
    Ok(Experiment::setup(cfg, data)?)
}

/// Runs every round of `cfg`, writing metrics and `final.fmc1` into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, executor: &dyn ClientExecutor) -> Result<RunSummary, Error> {
    let resolved = cfg.resolved();
    let mut exp = setup(&resolved)?;
    let mut out = MetricsWriter::create(dir, &resolved)?;
    let timed = resolved.output.record_seconds;

    let start = Instant::now();
    let mut record = exp.initial_record()?;
    if timed {
        record.seconds = start.elapsed().as_secs_f64();
    }
    out.write(&record)?;
    while exp.server.round < resolved.federation.rounds {
        let start = Instant::now();
        let mut record = exp.run_round(executor)?;
        if timed {
            record.seconds = start.elapsed().as_secs_f64();
            if let Some(last) = exp.server.history.last_mut() {
                last.seconds = record.seconds;
            }
        }
        out.write(&record)?;
    }
    out.finish()?;
    files::save_checkpoint(&dir.join(CHECKPOINT_FILE), &exp.server.params)?;
    Ok(RunSummary {
        dir: dir.into(),
        history: exp.server.history,
    })
}
