//! Rounds of broadcast, local SGD, sample-weighted averaging and evaluation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, DataSource, EvalMode, ExperimentConfig, Method, Scheme};
use crate::datagen::{
    apply_missing, make_missing_matrix, partition_dirichlet, partition_iid, split_server, synth_generate, DataError,
    Dataset, SynthSpec,
};
use crate::graph::{Graph, NodeId, ParamNodes};
use crate::losses::{objective, LossBreakdown, LossConfig, PairReduction};
use crate::model::{Batch, Model};
use crate::params::{sgd_step_in_place, ModelParams};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FederationError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violated: {0}")]
    Contract(String),
}

/// Local-training settings shared by every client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub lambda: f64,
    pub tau: f64,
    pub mu: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub reduction: PairReduction,
    pub contrast_imputed: bool,
}

impl MethodConfig {
    pub fn from_experiment(cfg: &ExperimentConfig) -> Self {
        Self {
            method: cfg.method.method,
            lambda: cfg.effective_lambda(),
            tau: cfg.method.tau,
            mu: cfg.method.mu,
            epochs: cfg.federation.local_epochs,
            batch_size: cfg.federation.batch_size,
            lr: cfg.federation.learning_rate,
            reduction: cfg.method.pair_reduction,
            contrast_imputed: cfg.method.contrast_imputed,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            tau: self.tau,
            reduction: self.reduction,
            contrast_imputed: self.contrast_imputed,
        }
    }

    fn proximal(&self) -> Option<f64> {
        (self.method == Method::FedproxZeroImpute && self.mu > 0.0).then_some(self.mu)
    }

    fn validate(&self) -> Result<(), FederationError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(FederationError::Contract("local epochs and batch size must be >= 1".into()));
        }
        if !(self.mu >= 0.0) || !(self.lr >= 0.0) || !(self.lambda >= 0.0) {
            return Err(FederationError::Contract("mu, lr and lambda must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    /// Experiment seed; per-round streams are derived from it and the id.
    pub seed: u64,
}

impl ClientState {
    pub fn num_samples(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    pub num_samples: usize,
    /// Mean over the client's mini-batches.
    pub losses: LossBreakdown,
}

/// `mu/2 * ||w - w_global||^2` over every parameter.
fn proximal_term(g: &mut Graph, p: &ParamNodes, global: &ModelParams, mu: f64) -> Result<NodeId, TensorError> {
    let mut acc: Option<NodeId> = None;
    for (name, t) in global.iter() {
        let anchor = g.constant(t.clone());
        let diff = g.sub(p.get(name)?, anchor)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq)?;
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    let total = acc.ok_or_else(|| TensorError::Contract("proximal term: no parameters".into()))?;
    g.scale(total, mu / 2.0)
}

/// One SGD step on `batch`; returns the loss breakdown before the step.
pub fn train_step(
    model: &Model,
    params: &mut ModelParams,
    batch: &Batch,
    cfg: &MethodConfig,
    anchor: Option<&ModelParams>,
) -> Result<LossBreakdown, TensorError> {
    let loss_cfg = cfg.loss();
    let mut g = Graph::new();
    let p = g.register(params);
    let obj = objective(model, &mut g, &p, batch, &loss_cfg)?;
    let mut breakdown = obj.breakdown(&g, &loss_cfg);
    let mut total = obj.total;
    if let (Some(mu), Some(anchor)) = (cfg.proximal(), anchor) {
        let prox = proximal_term(&mut g, &p, anchor, mu)?;
        total = g.add(total, prox)?;
        breakdown.total = g.value(total).item();
    }
    let grads = g.backward(total)?;
    sgd_step_in_place(params, &grads, cfg.lr)?;
    Ok(breakdown)
}

/// Shuffle seed of one local epoch of `client_id` in `round` (rounds count from 1).
pub fn epoch_seed(seed: u64, client_id: usize, round: usize, epoch: usize) -> u64 {
    derive_seed(seed, &[stream::CLIENT_TRAIN, client_id as u64, round as u64, epoch as u64])
}

/// Mini-batch order for one epoch: a fresh shuffle, last partial batch kept.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed));
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Copies `global`, runs `E` epochs of mini-batch SGD on the client's data
/// and returns the local parameters with the client's sample count.
pub fn client_local_train(
    model: &Model,
    global: &ModelParams,
    client: &ClientState,
    cfg: &MethodConfig,
    round: usize,
) -> Result<ClientUpdate, FederationError> {
    cfg.validate()?;
    if client.data.is_empty() {
        return Err(FederationError::Contract(format!("client {} has no data", client.id)));
    }
    let mut params = global.clone();
    let mut sums = [0.0; 4];
    let mut steps = 0usize;
    for epoch in 0..cfg.epochs {
        let shuffle = epoch_seed(client.seed, client.id, round, epoch);
        for idx in epoch_batches(client.data.len(), cfg.batch_size, shuffle) {
            let batch = Batch::from_indices(&client.data, &idx)?;
            let b = train_step(model, &mut params, &batch, cfg, Some(global))?;
            for (s, v) in sums.iter_mut().zip([b.task, b.shared, b.sim, b.total]) {
                *s += v;
            }
            steps += 1;
        }
    }
    let n = steps as f64;
    Ok(ClientUpdate {
        client_id: client.id,
        params,
        num_samples: client.data.len(),
        losses: LossBreakdown {
            task: sums[0] / n,
            shared: sums[1] / n,
            sim: sums[2] / n,
            total: sums[3] / n,
            lambda: cfg.lambda,
            tau: cfg.tau,
        },
    })
}

/// Weighted mean `sum_k (N_k / N) w_k`, computed per entry as
/// `lo + sum_k (N_k / N) (w_k - lo)` with the terms summed in sorted order.
/// The result does not depend on client order, equals the common value when
/// all clients agree and never leaves the clients' `[lo, hi]` range.
pub fn fedavg_aggregate(updates: &[(&ModelParams, usize)]) -> Result<ModelParams, FederationError> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| FederationError::Contract("fedavg: no client updates".into()))?;
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(FederationError::Contract("fedavg: clients hold no samples".into()));
    }
    for (k, (p, _)) in updates.iter().enumerate() {
        if p.len() != first.len() {
            return Err(FederationError::Contract(format!(
                "fedavg: client 0 has {} parameters, client {k} has {}",
                first.len(),
                p.len()
            )));
        }
        for (name, t) in first.iter() {
            match p.get(name) {
                Some(u) if u.shape() == t.shape() => {}
                Some(u) => {
                    return Err(FederationError::Contract(format!(
                        "fedavg: `{name}` has shape {:?} in client 0 but {:?} in client {k}",
                        t.shape(),
                        u.shape()
                    )))
                }
                None => {
                    return Err(FederationError::Contract(format!("fedavg: `{name}` missing from client {k}")))
                }
            }
        }
    }
    let weights: Vec<f64> = updates.iter().map(|(_, n)| *n as f64 / total as f64).collect();
    let mut terms = vec![0.0; updates.len()];
    let mut out = ModelParams::new();
    for (name, t) in first.iter() {
        let tensors: Vec<&Tensor> = updates.iter().map(|(p, _)| p.get(name).expect("checked")).collect();
        let data = (0..t.len())
            .map(|i| {
                let column = tensors.iter().map(|t| t.data()[i]);
                let lo = column.clone().fold(f64::INFINITY, f64::min);
                let hi = column.fold(f64::NEG_INFINITY, f64::max);
                if lo == hi {
                    return tensors[0].data()[i];
                }
                for ((term, tensor), w) in terms.iter_mut().zip(&tensors).zip(&weights) {
                    *term = w * (tensor.data()[i] - lo);
                }
                terms.sort_unstable_by(f64::total_cmp);
                (lo + terms.iter().sum::<f64>()).clamp(lo, hi)
            })
            .collect();
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub task_loss: f64,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Accuracy and mean cross-entropy on `test`, without gradients.
pub fn evaluate(
    model: &Model,
    params: &ModelParams,
    test: &Dataset,
    tau: f64,
    mode: EvalMode,
    batch_size: usize,
) -> Result<EvalResult, FederationError> {
    if test.is_empty() {
        return Err(FederationError::Contract("evaluate: empty test set".into()));
    }
    let chunk = match mode {
        EvalMode::PerInstance => 1,
        EvalMode::Batched => batch_size.max(1),
    };
    let mut correct = 0usize;
    let mut loss = 0.0;
    let all: Vec<usize> = (0..test.len()).collect();
    for idx in all.chunks(chunk) {
        let batch = Batch::from_indices(test, idx)?;
        let logits = model.predict_logits(params, &batch, tau)?;
        let c = logits.shape()[1];
        for (r, &y) in batch.labels.iter().enumerate() {
            let row = logits.row(r);
            if argmax(row) == y {
                correct += 1;
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + libm::log(row.iter().map(|v| libm::exp(v - mx)).sum::<f64>());
            loss += lse - row[y];
            debug_assert!(y < c);
        }
    }
    let n = test.len() as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        task_loss: loss / n,
    })
}

/// Metrics of one communication round. Round 0 describes the initial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub accuracy: Option<f64>,
    pub eval_loss: Option<f64>,
    /// Sample-weighted means of the participating clients' training losses.
    pub task_loss: Option<f64>,
    pub shared_loss: Option<f64>,
    pub sim_loss: Option<f64>,
    pub total_loss: Option<f64>,
    pub seconds: f64,
    pub participants: Vec<usize>,
    pub client_samples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub params: ModelParams,
    pub round: usize,
    pub test: Dataset,
    pub history: Vec<RoundRecord>,
}

/// Work item handed to an executor.
pub struct ClientJob<'a> {
    pub model: &'a Model,
    pub global: &'a ModelParams,
    pub client: &'a ClientState,
    pub cfg: &'a MethodConfig,
    pub round: usize,
}

impl ClientJob<'_> {
    pub fn run(&self) -> Result<ClientUpdate, FederationError> {
        client_local_train(self.model, self.global, self.client, self.cfg, self.round)
    }
}

/// Runs a round's client jobs. Results must come back in job order.
pub trait ClientExecutor {
    fn run_all(&self, jobs: &[ClientJob<'_>]) -> Vec<Result<ClientUpdate, FederationError>>;
}

pub struct Sequential;

impl ClientExecutor for Sequential {
    fn run_all(&self, jobs: &[ClientJob<'_>]) -> Vec<Result<ClientUpdate, FederationError>> {
        jobs.iter().map(ClientJob::run).collect()
    }
}

/// Everything needed to run rounds.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: Model,
    pub method: MethodConfig,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
}

impl Experiment {
    /// Builds data, clients and the initial model from a validated config.
    /// `data` replaces the synthetic generator when the config reads a file.
    pub fn setup(config: &ExperimentConfig, data: Option<Dataset>) -> Result<Self, FederationError> {
        config.validate()?;
        let seed = config.seed;
        let dc = &config.data;
        let data = match (dc.source, data) {
            (_, Some(d)) => d,
            (DataSource::Synthetic, None) => synth_generate(
                &SynthSpec {
                    num_samples: dc.num_samples,
                    num_classes: dc.num_classes,
                    num_modalities: dc.num_modalities,
                    d_in: dc.d_in,
                    noise_std: dc.noise_std,
                },
                derive_seed(seed, &[stream::DATA]),
            )?,
            (DataSource::File, None) => {
                return Err(FederationError::Contract("data.source = \"file\" but no dataset was loaded".into()))
            }
        };
        if (data.num_modalities, data.num_classes, data.d_in) != (dc.num_modalities, dc.num_classes, dc.d_in) {
            return Err(ConfigError {
                path: "data".into(),
                message: format!(
                    "dataset has M={}, C={}, d_in={} but config says M={}, C={}, d_in={}",
                    data.num_modalities, data.num_classes, data.d_in, dc.num_modalities, dc.num_classes, dc.d_in
                ),
            }
            .into());
        }
        let (pool, test) = split_server(&data, dc.client_ratio, derive_seed(seed, &[stream::SPLIT]))?;
        let fc = &config.federation;
        let part_seed = derive_seed(seed, &[stream::PARTITION]);
        let partition = match fc.scheme {
            Scheme::Iid => partition_iid(&pool, fc.clients, part_seed)?,
            Scheme::Dirichlet => partition_dirichlet(&pool, fc.clients, fc.dirichlet_alpha, part_seed)?,
        };
        let mc = &config.missing;
        let m = data.num_modalities;
        let mut clients = Vec::with_capacity(fc.clients);
        for (id, idx) in partition.client_indices.iter().enumerate() {
            let local = pool.subset(idx);
            let mask = make_missing_matrix(
                local.len(),
                m,
                mc.client.p_m,
                mc.client.p_s,
                derive_seed(seed, &[stream::CLIENT_MASK, id as u64]),
            )?;
            let mut local = apply_missing(&local, &mask)?;
            local.retain_min_present(mc.min_present_modalities);
            if local.is_empty() {
                return Err(FederationError::Contract(format!(
                    "client {id} is empty after missing.min_present_modalities filtering"
                )));
            }
            clients.push(ClientState { id, data: local, seed });
        }
        let mask = make_missing_matrix(
            test.len(),
            m,
            mc.server.p_m,
            mc.server.p_s,
            derive_seed(seed, &[stream::SERVER_MASK]),
        )?;
        let mut test = apply_missing(&test, &mask)?;
        test.retain_min_present(mc.min_present_modalities);
        if test.is_empty() {
            return Err(FederationError::Contract("server test set is empty".into()));
        }
        let model = Model::new(config.model_config(), config.method.method.architecture())?;
        let params = model.init(derive_seed(seed, &[stream::INIT]))?;
        Ok(Self {
            config: config.clone(),
            model,
            method: MethodConfig::from_experiment(config),
            clients,
            server: ServerState {
                params,
                round: 0,
                test,
                history: Vec::new(),
            },
        })
    }

    pub fn evaluate(&self) -> Result<EvalResult, FederationError> {
        evaluate(
            &self.model,
            &self.server.params,
            &self.server.test,
            self.method.tau,
            self.config.federation.eval_mode,
            self.method.batch_size,
        )
    }

    /// Record for the untrained model.
    pub fn initial_record(&mut self) -> Result<RoundRecord, FederationError> {
        let eval = self.evaluate()?;
        let record = RoundRecord {
            round: 0,
            accuracy: Some(eval.accuracy),
            eval_loss: Some(eval.task_loss),
            task_loss: None,
            shared_loss: None,
            sim_loss: None,
            total_loss: None,
            seconds: 0.0,
            participants: Vec::new(),
            client_samples: self.clients.iter().map(ClientState::num_samples).collect(),
        };
        self.server.history.push(record.clone());
        Ok(record)
    }

    /// Clients taking part in `round`, in id order.
    pub fn participants(&self, round: usize) -> Vec<usize> {
        let k = self.clients.len();
        let q = self.config.federation.participation;
        if q >= 1.0 {
            return (0..k).collect();
        }
        let count = (libm::round(q * k as f64) as usize).clamp(1, k);
        let mut rng = rng_from(derive_seed(self.config.seed, &[stream::PARTICIPATION, round as u64]));
        let mut chosen = index::sample(&mut rng, k, count).into_vec();
        chosen.sort_unstable();
        chosen
    }

    /// Broadcast, local training, FedAvg and (on evaluation rounds) evaluation.
    pub fn run_round(&mut self, executor: &dyn ClientExecutor) -> Result<RoundRecord, FederationError> {
        let round = self.server.round + 1;
        let chosen = self.participants(round);
        let jobs: Vec<ClientJob<'_>> = chosen
            .iter()
            .map(|&k| ClientJob {
                model: &self.model,
                global: &self.server.params,
                client: &self.clients[k],
                cfg: &self.method,
                round,
            })
            .collect();
        let updates = executor
            .run_all(&jobs)
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let pairs: Vec<(&ModelParams, usize)> = updates.iter().map(|u| (&u.params, u.num_samples)).collect();
        let aggregated = fedavg_aggregate(&pairs)?;

        let total: usize = updates.iter().map(|u| u.num_samples).sum();
        let mean = |f: fn(&LossBreakdown) -> f64| -> f64 {
            let mut terms: Vec<f64> = updates
                .iter()
                .map(|u| u.num_samples as f64 / total as f64 * f(&u.losses))
                .collect();
            terms.sort_unstable_by(f64::total_cmp);
            terms.iter().sum()
        };
        let has_contrastive = self.model.arch != crate::model::Architecture::ZeroImpute;
        self.server.params = aggregated;
        self.server.round = round;
        let evaluate_now =
            round % self.config.federation.eval_interval == 0 || round == self.config.federation.rounds;
        let eval = if evaluate_now { Some(self.evaluate()?) } else { None };
        let record = RoundRecord {
            round,
            accuracy: eval.map(|e| e.accuracy),
            eval_loss: eval.map(|e| e.task_loss),
            task_loss: Some(mean(|l| l.task)),
            shared_loss: has_contrastive.then(|| mean(|l| l.shared)),
            sim_loss: has_contrastive.then(|| mean(|l| l.sim)),
            total_loss: Some(mean(|l| l.total)),
            seconds: 0.0,
            participants: chosen,
            client_samples: updates.iter().map(|u| u.num_samples).collect(),
        };
        self.server.history.push(record.clone());
        Ok(record)
    }

    /// Runs every configured round after the initial evaluation.
    pub fn run(&mut self, executor: &dyn ClientExecutor) -> Result<&[RoundRecord], FederationError> {
        if self.server.history.is_empty() {
            self.initial_record()?;
        }
        while self.server.round < self.config.federation.rounds {
            self.run_round(executor)?;
        }
        Ok(&self.server.history)
    }

    /// Per-client class histograms, for diagnostics.
    pub fn client_class_counts(&self) -> BTreeMap<usize, Vec<usize>> {
        self.clients.iter().map(|c| (c.id, c.data.class_counts())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new([1], vec![v]).unwrap());
        p
    }

    #[test]
    fn fedavg_examples() {
        let a = scalar(0.0);
        let b = scalar(4.0);
        let avg = fedavg_aggregate(&[(&a, 1), (&b, 3)]).unwrap();
        assert_eq!(avg.get("w").unwrap().data(), &[3.0]);
        let neg = scalar(-4.0);
        assert_eq!(fedavg_aggregate(&[(&b, 5), (&neg, 5)]).unwrap().get("w").unwrap().data(), &[0.0]);
        let z = scalar(-0.0);
        let one = fedavg_aggregate(&[(&z, 7)]).unwrap();
        assert_eq!(one.get("w").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn fedavg_rejects_mismatched_shapes() {
        let a = scalar(1.0);
        let mut b = ModelParams::new();
        b.insert("w", Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let err = fedavg_aggregate(&[(&a, 1), (&b, 1)]).unwrap_err();
        assert!(matches!(err, FederationError::Contract(msg) if msg.contains("`w`") && msg.contains("client 1")));
        assert!(fedavg_aggregate(&[]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn epoch_batches_keep_partial_batch() {
        let b = epoch_batches(10, 4, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }
}
