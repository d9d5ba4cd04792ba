//! Finite-difference check of the full training objective.

use fedmac_core::config::ExperimentConfig;
use fedmac_core::datagen::{apply_missing, make_missing_matrix, synth_generate, SynthSpec};
use fedmac_core::federation::MethodConfig;
use fedmac_core::gradcheck::{grad_check, GradCheckReport};
use fedmac_core::losses::objective;
use fedmac_core::model::{Batch, Model};
use fedmac_core::params::perturb;
use fedmac_core::rng::{derive_seed, stream};

use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub batch_size: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Uniform jitter added to the initial parameters. Zero biases put ReLUs
    /// and zero-norm rows exactly on kinks, where central differences are
    /// meaningless.
    pub jitter: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epsilon: 1e-5,
            tolerance: 1e-4,
            jitter: 0.1,
        }
    }
}

/// Three modalities, 8-d shared space, lambda 0.1, temperature 1.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.num_modalities = 3;
    cfg.data.num_classes = 3;
    cfg.data.d_in = 5;
    cfg.model.d_h = 8;
    cfg.method.lambda = Some(0.1);
    cfg.method.tau = 1.0;
    cfg
}

/// Checks the configured method's objective on one masked synthetic batch.
pub fn run(cfg: &ExperimentConfig, opts: &GradcheckOptions) -> Result<GradCheckReport, Error> {
    cfg.validate()?;
    if opts.batch_size == 0 {
        return Err(Error::Usage("batch size must be >= 1".into()));
    }
    let d = &cfg.data;
    let data = synth_generate(
        &SynthSpec {
            num_samples: opts.batch_size.max(2 * d.num_classes),
            num_classes: d.num_classes,
            num_modalities: d.num_modalities,
            d_in: d.d_in,
            noise_std: d.noise_std,
        },
        derive_seed(cfg.seed, &[stream::DATA]),
    )
    .map_err(|e| Error::Runtime(e.to_string()))?;
    let data = data.subset(&(0..opts.batch_size).collect::<Vec<_>>());
    let mask = make_missing_matrix(
        data.len(),
        d.num_modalities,
        cfg.missing.client.p_m,
        cfg.missing.client.p_s,
        derive_seed(cfg.seed, &[stream::CLIENT_MASK, 0]),
    )
    .map_err(|e| Error::Runtime(e.to_string()))?;
    let data = apply_missing(&data, &mask).map_err(|e| Error::Runtime(e.to_string()))?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let batch = Batch::from_indices(&data, &indices).map_err(|e| Error::Runtime(e.to_string()))?;

    let model = Model::new(cfg.model_config(), cfg.method.method.architecture())
        .map_err(|e| Error::Runtime(e.to_string()))?;
    let init = model
        .init(derive_seed(cfg.seed, &[stream::INIT]))
        .map_err(|e| Error::Runtime(e.to_string()))?;
    let params = perturb(&init, opts.jitter, derive_seed(cfg.seed, &[stream::GRADCHECK]));
    let loss = MethodConfig::from_experiment(cfg).loss();
    grad_check(
        |g, p| Ok(objective(&model, g, p, &batch, &loss)?.total),
        &params,
        opts.epsilon,
        opts.tolerance,
    )
    .map_err(|e| Error::Runtime(e.to_string()))
}

pub fn format_report(report: &GradCheckReport) -> String {
    let mut out = String::new();
    for p in &report.params {
        out.push_str(&format!(
            "{:<24} max_rel_err {:.3e}  (index {}, analytic {:.6e}, numeric {:.6e})\n",
            p.name, p.max_rel_error, p.worst_index, p.analytic, p.numeric
        ));
    }
    out.push_str(&format!(
        "max rel error {:.3e} (tolerance {:.1e}): {}\n",
        report.max_rel_error(),
        report.tolerance,
        if report.pass { "PASS" } else { "FAIL" }
    ));
    out
}
