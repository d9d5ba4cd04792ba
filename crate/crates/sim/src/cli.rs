//! `fedmac` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use fedmac_core::config::{ExperimentConfig, Method, Scheme};
use fedmac_core::datagen::{apply_missing, make_missing_matrix, synth_generate, SynthSpec};
use fedmac_core::federation::evaluate;
use fedmac_core::model::Model;
use fedmac_core::rng::{derive_seed, stream};

use crate::executor::executor;
use crate::files::{self, DATASET_FILE, MASK_FILE};
use crate::gradcheck::{self, GradcheckOptions};
use crate::runner::{self, run_experiment};
use crate::sweep::{self, Side};
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "fedmac", version, about = "Federated multi-modal learning simulator")]
pub struct Cli {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for client training.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Published settings with IID clients.
    PublishedIid,
    /// Published settings with Dirichlet label skew.
    PublishedDirichlet,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write metrics plus the final checkpoint.
    Run {
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        preset: Option<Preset>,
    },
    /// Write a synthetic dataset (and optionally its missing mask) as FMD1/FMM1.
    GenData {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 12)]
        modalities: usize,
        #[arg(long, default_value_t = 16)]
        d_in: usize,
        #[arg(long, default_value_t = 0.3)]
        noise_std: f64,
        /// Fraction of modalities removed from each affected sample.
        #[arg(long, requires = "p_s")]
        p_m: Option<f64>,
        /// Fraction of samples affected.
        #[arg(long, requires = "p_m")]
        p_s: Option<f64>,
    },
    /// Compare backward gradients of the training objective with central differences.
    Gradcheck {
        /// Defaults to a tiny model: 3 modalities, d_h = 8, lambda 0.1.
        config: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        jitter: f64,
    },
    /// Final accuracies over a grid of missing statistics and methods.
    Sweep {
        config: Option<PathBuf>,
        /// Comma-separated p_m/p_s pairs, e.g. 1.0/0.1,0.8/0.5.
        #[arg(long)]
        axis: String,
        #[arg(long, default_value = "fedmac,zero_impute")]
        methods: String,
        #[arg(long, value_enum, default_value_t = Side::Both)]
        side: Side,
    },
    /// Evaluate a checkpoint on the configured server test set or a dataset file.
    Eval {
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the resolved config as TOML.
    Config {
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        preset: Option<Preset>,
    },
}

impl Cli {
    fn base_config(&self, path: Option<&Path>, preset: Option<Preset>) -> Result<ExperimentConfig, Error> {
        let mut cfg = match (path, preset) {
            (Some(p), _) => files::load_config(p)?,
            (None, Some(Preset::PublishedIid)) => ExperimentConfig::published(Scheme::Iid),
            (None, Some(Preset::PublishedDirichlet)) => ExperimentConfig::published(Scheme::Dirichlet),
            (None, None) => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.to_string_lossy().into_owned();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from(ExperimentConfig::default().output.dir))
    }
}

fn parse_method(s: &str) -> Result<Method, Error> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        Error::Usage(format!("unknown method `{s}`; expected one of {}", names.join(", ")))
    })
}

/// Runs a parsed command, writing human-readable output to `stdout`.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<(), Error> {
    if cli.threads == 0 {
        return Err(Error::Usage("--threads must be >= 1".into()));
    }
    let say = |stdout: &mut dyn Write, text: String| -> Result<(), Error> {
        stdout
            .write_all(text.as_bytes())
            .map_err(|e| Error::Runtime(format!("stdout: {e}")))
    };
    match &cli.command {
        Command::Run { config, preset } => {
            let cfg = cli.base_config(config.as_deref(), *preset)?;
            let dir = PathBuf::from(&cfg.output.dir);
            let summary = run_experiment(&cfg, &dir, executor(cli.threads)?.as_ref())?;
            let acc = summary.final_accuracy().map(|a| format!("{a:.4}")).unwrap_or_default();
            say(
                stdout,
                format!("{} rounds, final accuracy {acc}, output in {}\n", cfg.federation.rounds, dir.display()),
            )
        }
        Command::GenData {
            samples,
            classes,
            modalities,
            d_in,
            noise_std,
            p_m,
            p_s,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let data = synth_generate(
                &SynthSpec {
                    num_samples: *samples,
                    num_classes: *classes,
                    num_modalities: *modalities,
                    d_in: *d_in,
                    noise_std: *noise_std,
                },
                derive_seed(seed, &[stream::DATA]),
            )
            .map_err(|e| Error::Usage(e.to_string()))?;
            let dir = cli.out_dir();
            let data = match (p_m, p_s) {
                (Some(p_m), Some(p_s)) => {
                    let mask = make_missing_matrix(data.len(), *modalities, *p_m, *p_s, derive_seed(seed, &[stream::CLIENT_MASK]))
                        .map_err(|e| Error::Usage(e.to_string()))?;
                    files::save_mask(&dir.join(MASK_FILE), &mask)?;
                    apply_missing(&data, &mask).map_err(|e| Error::Runtime(e.to_string()))?
                }
                _ => data,
            };
            files::save_dataset(&dir.join(DATASET_FILE), &data)?;
            say(stdout, format!("wrote {} samples to {}\n", data.len(), dir.join(DATASET_FILE).display()))
        }
        Command::Gradcheck {
            config,
            method,
            tolerance,
            epsilon,
            batch_size,
            jitter,
        } => {
            let mut cfg = match config {
                Some(p) => files::load_config(p)?,
                None => gradcheck::tiny_config(),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(m) = method {
                cfg.method.method = parse_method(m)?;
            }
            let opts = GradcheckOptions {
                batch_size: *batch_size,
                epsilon: *epsilon,
                tolerance: *tolerance,
                jitter: *jitter,
            };
            let report = gradcheck::run(&cfg, &opts)?;
            say(stdout, gradcheck::format_report(&report))?;
            if report.pass {
                Ok(())
            } else {
                Err(Error::Runtime(format!(
                    "gradient check failed: max rel error {:.3e} > {:.1e}",
                    report.max_rel_error(),
                    tolerance
                )))
            }
        }
        Command::Sweep {
            config,
            axis,
            methods,
            side,
        } => {
            let cfg = cli.base_config(config.as_deref(), None)?;
            let axis = sweep::parse_axis(axis)?;
            for s in &axis {
                if !(0.0..=1.0).contains(&s.p_m) || !(0.0..=1.0).contains(&s.p_s) {
                    return Err(Error::Usage(format!("axis value {}/{} outside [0, 1]", s.p_m, s.p_s)));
                }
            }
            let methods = methods
                .split(',')
                .map(str::trim)
                .filter(|m| !m.is_empty())
                .map(parse_method)
                .collect::<Result<Vec<_>, _>>()?;
            let out = PathBuf::from(&cfg.output.dir);
            let rows = sweep::run_sweep(&cfg, &axis, &methods, *side, &out, executor(cli.threads)?.as_ref())?;
            let mut text = String::new();
            for r in &rows {
                text.push_str(&format!(
                    "{:<20} {}/{}  {:.4}\n",
                    r.method.name(),
                    r.setting.p_m,
                    r.setting.p_s,
                    r.final_accuracy
                ));
            }
            text.push_str(&format!("wrote {}\n", out.join(sweep::LONG_FILE).display()));
            say(stdout, text)
        }
        Command::Eval {
            config,
            checkpoint,
            data,
        } => {
            let cfg = cli.base_config(config.as_deref(), None)?;
            let params = files::load_checkpoint(checkpoint)?;
            let model = Model::new(cfg.model_config(), cfg.method.method.architecture())
                .map_err(|e| Error::Runtime(e.to_string()))?;
            for spec in model.param_specs() {
                match params.get(&spec.name) {
                    Some(t) if t.shape() == spec.shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Runtime(format!(
                            "checkpoint `{}` has shape {:?}, model expects {:?}",
                            spec.name,
                            t.shape(),
                            spec.shape
                        )))
                    }
                    None => return Err(Error::Runtime(format!("checkpoint lacks `{}`", spec.name))),
                }
            }
            let test = match data {
                Some(p) => files::load_dataset(p)?,
                None => runner::setup(&cfg)?.server.test,
            };
            let r = evaluate(
                &model,
                &params,
                &test,
                cfg.method.tau,
                cfg.federation.eval_mode,
                cfg.federation.batch_size,
            )?;
            say(stdout, format!("{}\n", serde_json::json!({"accuracy": r.accuracy, "task_loss": r.task_loss, "samples": test.len()})))
        }
        Command::Config { config, preset } => {
            let cfg = cli.base_config(config.as_deref(), *preset)?;
            say(stdout, files::config_to_toml(&cfg.resolved()))
        }
    }
}

/// Parses arguments, runs the command and maps failures to exit codes
/// (0 success, 1 runtime failure, 2 config or usage error).
pub fn main_with_args<'a, I, T>(args: I, stdout: &'a mut dyn Write, stderr: &'a mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let target = if code == 0 { stdout } else { stderr };
            let _ = write!(target, "{}", e.render());
            return code as u8;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
