//! Experiment configuration: defaults, the published-scale preset and validation.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{default_lambda, PairReduction};
use crate::model::{Architecture, ModelConfig, NormMode};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

fn bad(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset file, used when `source = "file"`.
    pub path: Option<String>,
    pub num_samples: usize,
    pub num_classes: usize,
    pub num_modalities: usize,
    pub d_in: usize,
    pub noise_std: f64,
    /// Fraction of the data kept for clients; the rest is the server test set.
    pub client_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            num_samples: 1000,
            num_classes: 5,
            num_modalities: 12,
            d_in: 16,
            noise_std: 0.3,
            client_ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Each test instance is its own batch, so accuracy ignores test-set order.
    #[default]
    PerInstance,
    /// Consecutive test instances share batches of the training batch size.
    Batched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub participation: f64,
    pub scheme: Scheme,
    pub dirichlet_alpha: f64,
    pub eval_interval: usize,
    pub eval_mode: EvalMode,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 8,
            rounds: 60,
            local_epochs: 3,
            batch_size: 32,
            learning_rate: 0.01,
            participation: 1.0,
            scheme: Scheme::Iid,
            dirichlet_alpha: 0.9,
            eval_interval: 1,
            eval_mode: EvalMode::PerInstance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingStats {
    pub p_m: f64,
    pub p_s: f64,
}

impl MissingStats {
    pub fn degree(&self) -> f64 {
        self.p_m * self.p_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingConfig {
    pub client: MissingStats,
    pub server: MissingStats,
    pub min_present_modalities: usize,
}

impl Default for MissingConfig {
    fn default() -> Self {
        let stats = MissingStats { p_m: 0.8, p_s: 0.5 };
        Self {
            client: stats,
            server: stats,
            min_present_modalities: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedmac,
    /// No cross-modal aggregation or fusion.
    Fedc,
    /// No contrastive regularisation.
    Fedma,
    ZeroImpute,
    FedproxZeroImpute,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Fedmac,
        Method::Fedc,
        Method::Fedma,
        Method::ZeroImpute,
        Method::FedproxZeroImpute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fedmac => "fedmac",
            Method::Fedc => "fedc",
            Method::Fedma => "fedma",
            Method::ZeroImpute => "zero_impute",
            Method::FedproxZeroImpute => "fedprox_zero_impute",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn architecture(self) -> Architecture {
        match self {
            Method::Fedmac | Method::Fedma => Architecture::Full,
            Method::Fedc => Architecture::WithoutAggregator,
            Method::ZeroImpute | Method::FedproxZeroImpute => Architecture::ZeroImpute,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSection {
    pub method: Method,
    /// Contrastive weight; omitted means the missing-degree rule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub tau: f64,
    /// Proximal coefficient, used by `fedprox_zero_impute` only.
    pub mu: f64,
    pub pair_reduction: PairReduction,
    pub contrast_imputed: bool,
}

impl Default for MethodSection {
    fn default() -> Self {
        Self {
            method: Method::Fedmac,
            lambda: None,
            tau: 1.0,
            mu: 0.01,
            pair_reduction: PairReduction::Mean,
            contrast_imputed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_h: usize,
    /// Defaults to `d_h`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor_hidden: Option<usize>,
    /// Defaults to `d_h`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proj_hidden: Option<usize>,
    pub norm_mode: NormMode,
    pub per_modality_extractor: bool,
    pub embedding_sources: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_h: 16,
            extractor_hidden: None,
            proj_hidden: None,
            norm_mode: NormMode::Query,
            per_modality_extractor: false,
            embedding_sources: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    /// Wall-clock seconds per round in the metrics; off keeps files byte-reproducible.
    pub record_seconds: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "runs/default".into(),
            record_seconds: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub missing: MissingConfig,
    pub method: MethodSection,
    pub model: ModelSection,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            federation: FederationConfig::default(),
            missing: MissingConfig::default(),
            method: MethodSection::default(),
            model: ModelSection::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Published settings: 32 clients, 3 local epochs, batch 32, 128-d
    /// shared space, temperature 1, 1000 rounds; learning rate 0.01 for IID
    /// and 0.008 for label-skewed data, Dirichlet concentration 0.9.
    pub fn published(scheme: Scheme) -> Self {
        let mut cfg = Self::default();
        cfg.federation.clients = 32;
        cfg.federation.local_epochs = 3;
        cfg.federation.batch_size = 32;
        cfg.federation.rounds = 1000;
        cfg.federation.scheme = scheme;
        cfg.federation.dirichlet_alpha = 0.9;
        cfg.federation.learning_rate = match scheme {
            Scheme::Iid => 0.01,
            Scheme::Dirichlet => 0.008,
        };
        cfg.model.d_h = 128;
        cfg.method.tau = 1.0;
        cfg.method.lambda = None;
        cfg
    }

    /// The contrastive weight actually used by the configured method.
    pub fn effective_lambda(&self) -> f64 {
        match self.method.method {
            Method::Fedma | Method::ZeroImpute | Method::FedproxZeroImpute => 0.0,
            Method::Fedmac | Method::Fedc => self
                .method
                .lambda
                .unwrap_or_else(|| default_lambda(self.missing.client.p_m, self.missing.client.p_s)),
        }
    }

    /// Fills every defaulted-by-rule field with its concrete value.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.method.lambda = Some(self.method.lambda.unwrap_or_else(|| {
            default_lambda(self.missing.client.p_m, self.missing.client.p_s)
        }));
        cfg.model.extractor_hidden = Some(self.model.extractor_hidden.unwrap_or(self.model.d_h));
        cfg.model.proj_hidden = Some(self.model.proj_hidden.unwrap_or(self.model.d_h));
        cfg
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_in: self.data.d_in,
            d_h: self.model.d_h,
            num_modalities: self.data.num_modalities,
            num_classes: self.data.num_classes,
            extractor_hidden: self.model.extractor_hidden.unwrap_or(self.model.d_h),
            proj_hidden: self.model.proj_hidden.unwrap_or(self.model.d_h),
            per_modality_extractor: self.model.per_modality_extractor,
            norm_mode: self.model.norm_mode,
            embedding_sources: self.model.embedding_sources,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        if d.source == DataSource::File && d.path.as_deref().is_none_or(str::is_empty) {
            return Err(bad("data.path", "required when data.source = \"file\""));
        }
        at_least("data.num_samples", d.num_samples, 1)?;
        at_least("data.num_classes", d.num_classes, 2)?;
        at_least("data.num_modalities", d.num_modalities, 2)?;
        at_least("data.d_in", d.d_in, 1)?;
        if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
            return Err(bad("data.noise_std", format!("must be >= 0, got {}", d.noise_std)));
        }
        if !(d.client_ratio > 0.0 && d.client_ratio < 1.0) {
            return Err(bad("data.client_ratio", format!("must be in (0, 1), got {}", d.client_ratio)));
        }

        let f = &self.federation;
        at_least("federation.clients", f.clients, 1)?;
        at_least("federation.local_epochs", f.local_epochs, 1)?;
        at_least("federation.batch_size", f.batch_size, 1)?;
        at_least("federation.eval_interval", f.eval_interval, 1)?;
        if !(f.learning_rate > 0.0 && f.learning_rate.is_finite()) {
            return Err(bad("federation.learning_rate", format!("must be > 0, got {}", f.learning_rate)));
        }
        if !(f.participation > 0.0 && f.participation <= 1.0) {
            return Err(bad("federation.participation", format!("must be in (0, 1], got {}", f.participation)));
        }
        if !(f.dirichlet_alpha > 0.0 && f.dirichlet_alpha.is_finite()) {
            return Err(bad("federation.dirichlet_alpha", format!("must be > 0, got {}", f.dirichlet_alpha)));
        }

        for (side, stats) in [("client", &self.missing.client), ("server", &self.missing.server)] {
            for (name, p) in [("p_m", stats.p_m), ("p_s", stats.p_s)] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(bad(&format!("missing.{side}.{name}"), format!("must be in [0, 1], got {p}")));
                }
            }
        }
        if self.missing.min_present_modalities > d.num_modalities {
            return Err(bad(
                "missing.min_present_modalities",
                format!("cannot exceed data.num_modalities = {}", d.num_modalities),
            ));
        }

        let m = &self.method;
        if let Some(l) = m.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(bad("method.lambda", format!("must be >= 0, got {l}")));
            }
        }
        if !(m.tau > 0.0 && m.tau.is_finite()) {
            return Err(bad("method.tau", format!("must be > 0, got {}", m.tau)));
        }
        if !(m.mu >= 0.0 && m.mu.is_finite()) {
            return Err(bad("method.mu", format!("must be >= 0, got {}", m.mu)));
        }

        at_least("model.d_h", self.model.d_h, 1)?;
        if let Some(h) = self.model.extractor_hidden {
            at_least("model.extractor_hidden", h, 1)?;
        }
        if let Some(h) = self.model.proj_hidden {
            at_least("model.proj_hidden", h, 1)?;
        }
        if self.output.dir.is_empty() {
            return Err(bad("output.dir", "must not be empty"));
        }
        Ok(())
    }
}

fn at_least(path: &str, value: usize, min: usize) -> Result<(), ConfigError> {
    if value < min {
        Err(bad(path, format!("must be >= {min}, got {value}")))
    } else {
        Ok(())
    }
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::parse(s).ok_or_else(|| format!("unknown method `{s}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::published(Scheme::Iid).validate().unwrap();
    }

    #[test]
    fn errors_name_the_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.missing.client.p_s = 1.5;
        assert_eq!(cfg.validate().unwrap_err().path, "missing.client.p_s");
        let mut cfg = ExperimentConfig::default();
        cfg.federation.learning_rate = 0.0;
        assert_eq!(cfg.validate().unwrap_err().path, "federation.learning_rate");
        let mut cfg = ExperimentConfig::default();
        cfg.data.source = DataSource::File;
        assert_eq!(cfg.validate().unwrap_err().path, "data.path");
    }

    #[test]
    fn published_preset_values() {
        let cfg = ExperimentConfig::published(Scheme::Iid).resolved();
        assert_eq!(
            (cfg.federation.clients, cfg.federation.local_epochs, cfg.federation.batch_size, cfg.model.d_h),
            (32, 3, 32, 128)
        );
        assert_eq!(cfg.method.tau, 1.0);
        assert_eq!(cfg.method.lambda, Some(0.1));
        assert_eq!(ExperimentConfig::published(Scheme::Dirichlet).federation.learning_rate, 0.008);
    }

    #[test]
    fn lambda_follows_method_and_missing_degree() {
        let mut cfg = ExperimentConfig::default();
        cfg.missing.client = MissingStats { p_m: 0.8, p_s: 0.8 };
        assert_eq!(cfg.effective_lambda(), 0.2);
        cfg.method.method = Method::Fedma;
        assert_eq!(cfg.effective_lambda(), 0.0);
        cfg.method.method = Method::Fedmac;
        cfg.method.lambda = Some(0.05);
        assert_eq!(cfg.effective_lambda(), 0.05);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("fedavg".parse::<Method>().is_err());
    }
}
