//! The client network: shared extractor, imputation embeddings, per-modality
//! projection, similarity-driven aggregation, gated fusion and a linear head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, ModalSample};
use crate::graph::{Graph, NodeId, ParamNodes};
use crate::ops::OpKind;
use crate::params::{init_params, Init, ModelParams, ParamSpec};
use crate::tensor::{Tensor, TensorError};

/// Channel widths of the three fusion convolutions.
pub const FUSION_CHANNELS: [usize; 4] = [2, 4, 4, 1];
const KERNEL: usize = 3;

/// Denominator used by the aggregation softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Normalise over the target's own similarity row (standard attention).
    #[default]
    Query,
    /// Normalise each source by its own row sum, then renormalise per target.
    Literal,
}

/// Which parts of the network are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Full,
    /// Embeddings and projections, but the head reads `H` directly.
    WithoutAggregator,
    /// Missing inputs stay zero and pass through the extractor; no embeddings.
    ZeroImpute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_h: usize,
    pub num_modalities: usize,
    pub num_classes: usize,
    pub extractor_hidden: usize,
    pub proj_hidden: usize,
    pub per_modality_extractor: bool,
    pub norm_mode: NormMode,
    /// Whether the embedding pseudo-instance rows are aggregation sources.
    pub embedding_sources: bool,
}

impl ModelConfig {
    pub fn new(d_in: usize, d_h: usize, num_modalities: usize, num_classes: usize) -> Self {
        Self {
            d_in,
            d_h,
            num_modalities,
            num_classes,
            extractor_hidden: d_h,
            proj_hidden: d_h,
            per_modality_extractor: false,
            norm_mode: NormMode::Query,
            embedding_sources: true,
        }
    }
}

/// A mini-batch laid out slot-major: slot `i * M + m` is modality `m` of instance `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub num_modalities: usize,
    pub d_in: usize,
    pub features: Vec<f64>,
    pub presence: Vec<bool>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a ModalSample>,
        num_modalities: usize,
        d_in: usize,
    ) -> Result<Self, TensorError> {
        let mut b = Batch {
            size: 0,
            num_modalities,
            d_in,
            features: Vec::new(),
            presence: Vec::new(),
            labels: Vec::new(),
        };
        for s in samples {
            if s.modalities.len() != num_modalities || s.presence.len() != num_modalities {
                return Err(TensorError::Contract(format!(
                    "batch: sample has {} modalities, expected {num_modalities}",
                    s.modalities.len()
                )));
            }
            for x in &s.modalities {
                if x.len() != d_in {
                    return Err(TensorError::Dimension {
                        op: "extract_shared",
                        shapes: vec![vec![x.len()], vec![d_in]],
                    });
                }
                b.features.extend_from_slice(x);
            }
            b.presence.extend_from_slice(&s.presence);
            b.labels.push(s.label);
            b.size += 1;
        }
        if b.size == 0 {
            return Err(TensorError::Contract("batch: empty".into()));
        }
        Ok(b)
    }

    pub fn from_indices(data: &Dataset, indices: &[usize]) -> Result<Self, TensorError> {
        Self::from_samples(indices.iter().map(|&i| &data.samples[i]), data.num_modalities, data.d_in)
    }

    pub fn slots(&self) -> usize {
        self.size * self.num_modalities
    }

    fn slot_features(&self, slot: usize) -> &[f64] {
        &self.features[slot * self.d_in..(slot + 1) * self.d_in]
    }
}

/// Where a similarity-space row comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowMeta {
    /// `None` for the embedding pseudo-instance.
    pub instance: Option<usize>,
    pub modality: usize,
    /// True when the row was extracted from observed data.
    pub extracted: bool,
}

/// `H` for every batch slot followed, when embeddings exist, by one
/// pseudo-instance holding the raw embeddings.
#[derive(Debug, Clone)]
pub struct SpaceSharedFeatures {
    pub rows: NodeId,
    pub batch_size: usize,
    pub num_modalities: usize,
    /// Per batch slot: true when taken from the extractor, false for an embedding.
    pub source_mask: Vec<bool>,
    pub with_pseudo_instance: bool,
}

impl SpaceSharedFeatures {
    pub fn row_meta(&self) -> Vec<RowMeta> {
        let m = self.num_modalities;
        let mut meta: Vec<RowMeta> = self
            .source_mask
            .iter()
            .enumerate()
            .map(|(slot, &extracted)| RowMeta {
                instance: Some(slot / m),
                modality: slot % m,
                extracted,
            })
            .collect();
        if self.with_pseudo_instance {
            meta.extend((0..m).map(|modality| RowMeta {
                instance: None,
                modality,
                extracted: false,
            }));
        }
        meta
    }

    pub fn num_rows(&self) -> usize {
        (self.batch_size + usize::from(self.with_pseudo_instance)) * self.num_modalities
    }
}

/// Projected rows, one per row of [`SpaceSharedFeatures`], in the same order.
#[derive(Debug, Clone)]
pub struct ModalityWiseReps {
    pub z: NodeId,
    pub row_index: Vec<RowMeta>,
}

#[derive(Debug, Clone, Copy)]
pub struct Aggregation {
    /// `[B*M, sources]` attention weights.
    pub weights: NodeId,
    pub h_tilde: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// `[B*M, d_h]` gate values in (0, 1).
    pub alpha: NodeId,
    /// `[B*M, d_h]` fused features.
    pub g: NodeId,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: NodeId,
    pub shared: SpaceSharedFeatures,
    pub reps: Option<ModalityWiseReps>,
    pub similarity: Option<NodeId>,
    pub aggregation: Option<Aggregation>,
    pub fusion: Option<FusionOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub arch: Architecture,
}

fn extractor_prefix(per_modality: bool, modality: usize) -> String {
    if per_modality {
        format!("extractor.{modality}")
    } else {
        "extractor".into()
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, arch: Architecture) -> Result<Self, TensorError> {
        let dims = [
            ("d_in", cfg.d_in),
            ("d_h", cfg.d_h),
            ("num_modalities", cfg.num_modalities),
            ("num_classes", cfg.num_classes),
            ("extractor_hidden", cfg.extractor_hidden),
            ("proj_hidden", cfg.proj_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(TensorError::Contract(format!("model: {name} must be positive")));
        }
        Ok(Self { cfg, arch })
    }

    fn has_embeddings(&self) -> bool {
        self.arch != Architecture::ZeroImpute
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.cfg;
        let mut specs = Vec::new();
        let mut mlp = |prefix: &str, din: usize, hidden: usize, dout: usize| {
            specs.push(ParamSpec::weight(format!("{prefix}.w1"), din, hidden));
            specs.push(ParamSpec::bias(format!("{prefix}.b1"), hidden));
            specs.push(ParamSpec::weight(format!("{prefix}.w2"), hidden, dout));
            specs.push(ParamSpec::bias(format!("{prefix}.b2"), dout));
        };
        let extractors = if c.per_modality_extractor { c.num_modalities } else { 1 };
        for m in 0..extractors {
            mlp(&extractor_prefix(c.per_modality_extractor, m), c.d_in, c.extractor_hidden, c.d_h);
        }
        if self.has_embeddings() {
            for m in 0..c.num_modalities {
                mlp(&format!("proj.{m}"), c.d_h, c.proj_hidden, c.d_h);
            }
            specs.push(ParamSpec::new("embeddings", [c.num_modalities, c.d_h], Init::Embedding { dim: c.d_h }));
        }
        if self.arch == Architecture::Full {
            for (l, w) in FUSION_CHANNELS.windows(2).enumerate() {
                let (cin, cout) = (w[0], w[1]);
                specs.push(ParamSpec::new(
                    format!("fusion.conv{}.w", l + 1),
                    [cout, cin, KERNEL],
                    Init::Xavier {
                        fan_in: cin * KERNEL,
                        fan_out: cout * KERNEL,
                    },
                ));
                specs.push(ParamSpec::bias(format!("fusion.conv{}.b", l + 1), cout));
            }
        }
        specs.push(ParamSpec::weight("decoder.w", c.num_modalities * c.d_h, c.num_classes));
        specs.push(ParamSpec::bias("decoder.b", c.num_classes));
        specs
    }

    pub fn init(&self, seed: u64) -> Result<ModelParams, TensorError> {
        init_params(&self.param_specs(), seed)
    }

    fn mlp(&self, g: &mut Graph, p: &ParamNodes, prefix: &str, x: NodeId) -> Result<NodeId, TensorError> {
        let w1 = p.get(&format!("{prefix}.w1"))?;
        let b1 = p.get(&format!("{prefix}.b1"))?;
        let w2 = p.get(&format!("{prefix}.w2"))?;
        let b2 = p.get(&format!("{prefix}.b2"))?;
        let hidden = g.linear(x, w1, b1)?;
        let hidden = g.relu(hidden)?;
        g.linear(hidden, w2, b2)
    }

    /// `γ(x)` for a `[n, d_in]` block of inputs from one modality (or any
    /// modalities when the extractor is shared).
    pub fn extract_shared(&self, g: &mut Graph, p: &ParamNodes, x: NodeId, modality: usize) -> Result<NodeId, TensorError> {
        let prefix = extractor_prefix(self.cfg.per_modality_extractor, modality);
        self.mlp(g, p, &prefix, x)
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), TensorError> {
        if batch.num_modalities != self.cfg.num_modalities || batch.d_in != self.cfg.d_in {
            return Err(TensorError::Dimension {
                op: "extract_shared",
                shapes: vec![
                    vec![batch.num_modalities, batch.d_in],
                    vec![self.cfg.num_modalities, self.cfg.d_in],
                ],
            });
        }
        if batch.size == 0 {
            return Err(TensorError::Contract("batch: empty".into()));
        }
        Ok(())
    }

    /// Builds `H`: extracted features for observed slots, `e^m` otherwise,
    /// plus the embedding pseudo-instance.
    pub fn impute(&self, g: &mut Graph, p: &ParamNodes, batch: &Batch) -> Result<SpaceSharedFeatures, TensorError> {
        self.check_batch(batch)?;
        let m = self.cfg.num_modalities;
        let slots = batch.slots();
        if !self.has_embeddings() {
            let rows = self.extract_groups(g, p, batch, |_| true)?.expect("batch is non-empty");
            let rows = g.gather_rows(rows.0, rows.1)?;
            return Ok(SpaceSharedFeatures {
                rows,
                batch_size: batch.size,
                num_modalities: m,
                source_mask: batch.presence.clone(),
                with_pseudo_instance: false,
            });
        }
        let emb = p.get("embeddings")?;
        let extracted = self.extract_groups(g, p, batch, |slot| batch.presence[slot])?;
        let rows = match extracted {
            None => {
                let idx = (0..slots + m).map(|r| r % m).collect();
                g.gather_rows(emb, idx)?
            }
            Some((block, mut idx)) => {
                let n = g.value(block).shape()[0];
                for (slot, r) in idx.iter_mut().enumerate() {
                    if !batch.presence[slot] {
                        *r = n + slot % m;
                    }
                }
                idx.extend(n..n + m);
                let all = g.concat(&[block, emb], 0)?;
                g.gather_rows(all, idx)?
            }
        };
        Ok(SpaceSharedFeatures {
            rows,
            batch_size: batch.size,
            num_modalities: m,
            source_mask: batch.presence.clone(),
            with_pseudo_instance: true,
        })
    }

    /// Runs the extractor on every slot accepted by `keep`. Returns the
    /// stacked outputs and, per slot, its row in that block (unspecified for
    /// rejected slots).
    fn extract_groups(
        &self,
        g: &mut Graph,
        p: &ParamNodes,
        batch: &Batch,
        keep: impl Fn(usize) -> bool,
    ) -> Result<Option<(NodeId, Vec<usize>)>, TensorError> {
        let (m, d_in) = (self.cfg.num_modalities, self.cfg.d_in);
        let slots = batch.slots();
        let groups: Vec<Vec<usize>> = if self.cfg.per_modality_extractor {
            (0..m)
                .map(|mm| (0..batch.size).map(|i| i * m + mm).filter(|&s| keep(s)).collect())
                .collect()
        } else {
            vec![(0..slots).filter(|&s| keep(s)).collect()]
        };
        let mut blocks = Vec::new();
        let mut index = vec![0; slots];
        let mut offset = 0;
        for (gi, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let mut data = Vec::with_capacity(group.len() * d_in);
            for (k, &slot) in group.iter().enumerate() {
                data.extend_from_slice(batch.slot_features(slot));
                index[slot] = offset + k;
            }
            let x = g.constant(Tensor::new([group.len(), d_in], data)?);
            blocks.push(self.extract_shared(g, p, x, gi)?);
            offset += group.len();
        }
        Ok(match blocks.len() {
            0 => None,
            1 => Some((blocks[0], index)),
            _ => Some((g.concat(&blocks, 0)?, index)),
        })
    }

    /// `z = MLP_m(h)` for every row, each with its own modality's MLP.
    pub fn project_modality(&self, g: &mut Graph, p: &ParamNodes, shared: &SpaceSharedFeatures) -> Result<ModalityWiseReps, TensorError> {
        let m = self.cfg.num_modalities;
        let groups = shared.num_rows() / m;
        let mut blocks = Vec::with_capacity(m);
        for mm in 0..m {
            let rows = g.gather_rows(shared.rows, (0..groups).map(|i| i * m + mm).collect())?;
            blocks.push(self.mlp(g, p, &format!("proj.{mm}"), rows)?);
        }
        let stacked = g.concat(&blocks, 0)?;
        let order = (0..groups * m).map(|r| (r % m) * groups + r / m).collect();
        let z = g.gather_rows(stacked, order)?;
        Ok(ModalityWiseReps {
            z,
            row_index: shared.row_meta(),
        })
    }

    pub fn similarity_matrix(&self, g: &mut Graph, z: NodeId) -> Result<NodeId, TensorError> {
        g.cosine_similarity(z)
    }

    /// `h~` for each of the `targets` leading rows as a softmax-weighted sum
    /// of every other source row.
    pub fn cross_modal_aggregate(
        &self,
        g: &mut Graph,
        h_rows: NodeId,
        s: NodeId,
        targets: usize,
        tau: f64,
    ) -> Result<Aggregation, TensorError> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(TensorError::Contract(format!(
                "cross_modal_aggregate: temperature must be positive, got {tau}"
            )));
        }
        let rows = g.value(s).shape()[0];
        let d_h = g.value(h_rows).shape()[1];
        let (s, src) = if self.cfg.embedding_sources || rows == targets {
            (s, h_rows)
        } else {
            (g.slice(s, 0..targets, 0..targets)?, g.slice(h_rows, 0..targets, 0..d_h)?)
        };
        let sources = g.value(s).shape()[0];
        if sources < 2 {
            return Err(TensorError::Contract("cross_modal_aggregate: need at least two rows".into()));
        }
        let weights = match self.cfg.norm_mode {
            NormMode::Query => {
                let w = g.row_softmax(s, tau, true)?;
                if sources == targets {
                    w
                } else {
                    g.slice(w, 0..targets, 0..sources)?
                }
            }
            NormMode::Literal => g.apply(OpKind::SourceNormalizedSoftmax { tau, targets }, &[s])?,
        };
        let h_tilde = g.matmul(weights, src)?;
        Ok(Aggregation { weights, h_tilde })
    }

    /// `alpha = sigmoid(conv(relu(conv(relu(conv([h; h~]))))))`, `g = alpha*h + (1-alpha)*h~`.
    pub fn global_fusion(&self, g: &mut Graph, p: &ParamNodes, h: NodeId, h_tilde: NodeId) -> Result<FusionOutput, TensorError> {
        let (n, d_h) = g.value(h).dims2().ok_or_else(|| TensorError::Contract("global_fusion: H must be 2-D".into()))?;
        let stacked = g.concat(&[h, h_tilde], 1)?;
        let mut x = g.reshape(stacked, [n, 2, d_h])?;
        let layers = FUSION_CHANNELS.len() - 1;
        for l in 1..=layers {
            let w = p.get(&format!("fusion.conv{l}.w"))?;
            let b = p.get(&format!("fusion.conv{l}.b"))?;
            x = g.conv1d(x, w, b)?;
            x = if l < layers { g.relu(x)? } else { g.sigmoid(x)? };
        }
        let alpha = g.reshape(x, [n, d_h])?;
        let diff = g.sub(h, h_tilde)?;
        let gated = g.mul(alpha, diff)?;
        let fused = g.add(h_tilde, gated)?;
        Ok(FusionOutput { alpha, g: fused })
    }

    /// Linear head over the per-instance concatenation of `[B*M, d_h]` features.
    pub fn decode(&self, g: &mut Graph, p: &ParamNodes, features: NodeId, batch_size: usize) -> Result<NodeId, TensorError> {
        let width = self.cfg.num_modalities * self.cfg.d_h;
        let flat = g.reshape(features, [batch_size, width])?;
        let w = p.get("decoder.w")?;
        let b = p.get("decoder.b")?;
        g.linear(flat, w, b)
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamNodes, batch: &Batch, tau: f64) -> Result<ForwardOutput, TensorError> {
        let shared = self.impute(g, p, batch)?;
        let slots = batch.slots();
        let h = if shared.with_pseudo_instance {
            g.slice(shared.rows, 0..slots, 0..self.cfg.d_h)?
        } else {
            shared.rows
        };
        let mut out = ForwardOutput {
            logits: h,
            shared,
            reps: None,
            similarity: None,
            aggregation: None,
            fusion: None,
        };
        if self.arch == Architecture::ZeroImpute {
            out.logits = self.decode(g, p, h, batch.size)?;
            return Ok(out);
        }
        let reps = self.project_modality(g, p, &out.shared)?;
        let s = self.similarity_matrix(g, reps.z)?;
        out.reps = Some(reps);
        out.similarity = Some(s);
        let features = if self.arch == Architecture::Full {
            let agg = self.cross_modal_aggregate(g, out.shared.rows, s, slots, tau)?;
            let fusion = self.global_fusion(g, p, h, agg.h_tilde)?;
            out.aggregation = Some(agg);
            out.fusion = Some(fusion);
            fusion.g
        } else {
            h
        };
        out.logits = self.decode(g, p, features, batch.size)?;
        Ok(out)
    }

    /// Inference-only logits as plain values.
    pub fn predict_logits(&self, params: &ModelParams, batch: &Batch, tau: f64) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let p = g.constants(params);
        let out = self.forward(&mut g, &p, batch, tau)?;
        Ok(g.value(out.logits).clone())
    }
}

/// Sets every `MLP_m` to the identity map. Needs `proj_hidden == 2 * d_h`:
/// `relu(h) - relu(-h) = h`.
pub fn set_identity_projections(model: &Model, params: &mut ModelParams) -> Result<(), TensorError> {
    let d = model.cfg.d_h;
    if model.cfg.proj_hidden != 2 * d {
        return Err(TensorError::Contract("identity projection needs proj_hidden = 2 * d_h".into()));
    }
    let mut w1 = vec![0.0; d * 2 * d];
    let mut w2 = vec![0.0; 2 * d * d];
    for i in 0..d {
        w1[i * 2 * d + i] = 1.0;
        w1[i * 2 * d + d + i] = -1.0;
        w2[i * d + i] = 1.0;
        w2[(d + i) * d + i] = -1.0;
    }
    for m in 0..model.cfg.num_modalities {
        let set = |params: &mut ModelParams, name: String, t: Tensor| -> Result<(), TensorError> {
            match params.get_mut(&name) {
                Some(slot) => {
                    *slot = t;
                    Ok(())
                }
                None => Err(TensorError::Contract(format!("unknown parameter `{name}`"))),
            }
        };
        set(params, format!("proj.{m}.w1"), Tensor::new([d, 2 * d], w1.clone())?)?;
        set(params, format!("proj.{m}.b1"), Tensor::zeros([2 * d]))?;
        set(params, format!("proj.{m}.w2"), Tensor::new([2 * d, d], w2.clone())?)?;
        set(params, format!("proj.{m}.b2"), Tensor::zeros([d]))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(mods: &[&[f64]], presence: &[bool], label: usize) -> ModalSample {
        ModalSample {
            modalities: mods.iter().map(|x| x.to_vec()).collect(),
            presence: presence.to_vec(),
            label,
        }
    }

    fn model(arch: Architecture) -> Model {
        let mut cfg = ModelConfig::new(3, 4, 2, 3);
        cfg.proj_hidden = 8;
        Model::new(cfg, arch).unwrap()
    }

    fn batch(samples: &[ModalSample]) -> Batch {
        Batch::from_samples(samples, 2, 3).unwrap()
    }

    #[test]
    fn parameter_sets_follow_architecture() {
        let full: Vec<String> = model(Architecture::Full).param_specs().into_iter().map(|s| s.name).collect();
        assert!(full.iter().any(|n| n == "fusion.conv3.w"));
        let fedc: Vec<String> = model(Architecture::WithoutAggregator).param_specs().into_iter().map(|s| s.name).collect();
        assert!(fedc.iter().all(|n| !n.starts_with("fusion")));
        assert!(fedc.iter().any(|n| n == "embeddings"));
        let zero: Vec<String> = model(Architecture::ZeroImpute).param_specs().into_iter().map(|s| s.name).collect();
        assert!(zero.iter().all(|n| n.starts_with("extractor") || n.starts_with("decoder")));
    }

    #[test]
    fn zero_extractor_gives_zero_features() {
        let m = model(Architecture::Full);
        let mut params = m.init(1).unwrap();
        for name in ["extractor.w1", "extractor.b1", "extractor.w2", "extractor.b2"] {
            params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = g.constants(&params);
        let x = g.constant(Tensor::new([2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 9.0]).unwrap());
        let h = m.extract_shared(&mut g, &p, x, 0).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_slots_take_embeddings() {
        let m = model(Architecture::Full);
        let params = m.init(2).unwrap();
        let b = batch(&[
            sample(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]], &[true, true], 0),
            sample(&[&[0.0; 3], &[0.0; 3]], &[false, false], 1),
        ]);
        let mut g = Graph::new();
        let p = g.constants(&params);
        let shared = m.impute(&mut g, &p, &b).unwrap();
        let rows = g.value(shared.rows).clone();
        assert_eq!(rows.shape(), &[6, 4]);
        let emb = params.get("embeddings").unwrap();
        // Identical inputs on different modalities share the extractor.
        assert_eq!(rows.row(0), rows.row(1));
        for r in 2..6 {
            assert_eq!(rows.row(r), emb.row(r % 2));
        }
        assert_eq!(shared.source_mask, vec![true, true, false, false]);
    }

    #[test]
    fn identity_projection_and_row_count() {
        let mut cfg = ModelConfig::new(3, 4, 4, 3);
        cfg.proj_hidden = 8;
        let m = Model::new(cfg, Architecture::Full).unwrap();
        let mut params = m.init(3).unwrap();
        set_identity_projections(&m, &mut params).unwrap();
        let samples: Vec<ModalSample> = (0..8)
            .map(|i| ModalSample {
                modalities: (0..4).map(|j| vec![i as f64, j as f64, 1.0]).collect(),
                presence: (0..4).map(|j| (i + j) % 3 != 0).collect(),
                label: i % 3,
            })
            .collect();
        let b = Batch::from_samples(&samples, 4, 3).unwrap();
        let mut g = Graph::new();
        let p = g.constants(&params);
        let shared = m.impute(&mut g, &p, &b).unwrap();
        let reps = m.project_modality(&mut g, &p, &shared).unwrap();
        assert_eq!(g.value(reps.z).shape(), &[36, 4]);
        for (a, b) in g.value(reps.z).data().iter().zip(g.value(shared.rows).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_other_source_gets_all_weight() {
        for mode in [NormMode::Query, NormMode::Literal] {
            let mut cfg = ModelConfig::new(1, 2, 2, 2);
            cfg.norm_mode = mode;
            let m = Model::new(cfg, Architecture::Full).unwrap();
            let mut g = Graph::new();
            let h = g.constant(Tensor::new([2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap());
            let z = g.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.3, 0.7]).unwrap());
            let s = g.cosine_similarity(z).unwrap();
            let agg = m.cross_modal_aggregate(&mut g, h, s, 2, 1.0).unwrap();
            assert_eq!(g.value(agg.h_tilde).data(), &[-3.0, 0.5, 1.0, 2.0]);
        }
    }

    #[test]
    fn equal_similarities_average_the_sources() {
        for mode in [NormMode::Query, NormMode::Literal] {
            let mut cfg = ModelConfig::new(1, 1, 2, 2);
            cfg.norm_mode = mode;
            let m = Model::new(cfg, Architecture::Full).unwrap();
            let mut g = Graph::new();
            let h = g.constant(Tensor::new([4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
            let s = g.constant(Tensor::new([4, 4], vec![0.5; 16]).unwrap());
            let agg = m.cross_modal_aggregate(&mut g, h, s, 1, 1.0).unwrap();
            assert!((g.value(agg.h_tilde).item() - 11.0 / 3.0).abs() < 1e-12);
            assert!(m.cross_modal_aggregate(&mut g, h, s, 1, 0.0).is_err());
        }
    }

    fn set_conv3(params: &mut ModelParams, bias: f64) {
        params.get_mut("fusion.conv3.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        params.get_mut("fusion.conv3.b").unwrap().data_mut()[0] = bias;
    }

    #[test]
    fn fusion_gate_limits() {
        let m = model(Architecture::Full);
        let mut params = m.init(4).unwrap();
        let (hv, tv) = (vec![1.0, -2.0, 3.0, 0.5], vec![0.0, 4.0, -1.0, 2.5]);
        let run = |params: &ModelParams, t: &[f64]| {
            let mut g = Graph::new();
            let p = g.constants(params);
            let h = g.constant(Tensor::new([1, 4], hv.clone()).unwrap());
            let ht = g.constant(Tensor::new([1, 4], t.to_vec()).unwrap());
            let f = m.global_fusion(&mut g, &p, h, ht).unwrap();
            (g.value(f.alpha).clone(), g.value(f.g).clone())
        };
        let (_, same) = run(&params, &hv);
        for (a, b) in same.data().iter().zip(&hv) {
            assert!((a - b).abs() < 1e-15);
        }
        set_conv3(&mut params, 0.0);
        let (alpha, fused) = run(&params, &tv);
        assert!(alpha.data().iter().all(|&a| a == 0.5));
        for ((f, h), t) in fused.data().iter().zip(&hv).zip(&tv) {
            assert!((f - (h + t) / 2.0).abs() < 1e-15);
        }
        set_conv3(&mut params, 50.0);
        let (_, fused) = run(&params, &tv);
        for (f, h) in fused.data().iter().zip(&hv) {
            assert!((f - h).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_decoder_gives_zero_logits() {
        let m = model(Architecture::Full);
        let mut params = m.init(5).unwrap();
        params.get_mut("decoder.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let b = batch(&[sample(&[&[1.0, 2.0, 3.0], &[0.0; 3]], &[true, false], 2)]);
        let logits = m.predict_logits(&params, &b, 1.0).unwrap();
        assert_eq!(logits.shape(), &[1, 3]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        for arch in [Architecture::Full, Architecture::WithoutAggregator, Architecture::ZeroImpute] {
            let m = model(arch);
            let params = m.init(6).unwrap();
            let b = batch(&[
                sample(&[&[1.0, 2.0, 3.0], &[0.0; 3]], &[true, false], 0),
                sample(&[&[0.1, 0.2, 0.3], &[3.0, 2.0, 1.0]], &[true, true], 1),
                sample(&[&[0.0; 3], &[0.0; 3]], &[false, false], 2),
            ]);
            let a = m.predict_logits(&params, &b, 1.0).unwrap();
            assert_eq!(a.shape(), &[3, 3]);
            assert_eq!(a, m.predict_logits(&params, &b, 1.0).unwrap());
        }
    }

    #[test]
    fn wrong_input_width_is_a_dimension_error() {
        let s = sample(&[&[1.0, 2.0], &[1.0, 2.0]], &[true, true], 0);
        assert!(matches!(
            Batch::from_samples([&s], 2, 3),
            Err(TensorError::Dimension { .. })
        ));
    }
}
