//! Multi-modal classification data: synthetic generation, the server/client
//! split, client partitioning and partial-modality masking.

mod format;
mod missing;
mod partition;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::codec::FormatError;
use crate::rng::rng_from;

pub use format::{decode_dataset, encode_dataset, DATASET_MAGIC, MISSING_MAGIC};
pub use missing::{apply_missing, make_missing_matrix, MissingMatrix};
pub use partition::{partition_dirichlet, partition_iid, Partition, PartitionScheme};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("cannot stratify: class {class} has {count} sample(s), need at least 2")]
    Stratification { class: usize, count: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
}

fn contract(msg: impl Into<String>) -> DataError {
    DataError::Contract(msg.into())
}

/// One instance: a feature vector per modality, which of them are present,
/// and the class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalSample {
    pub modalities: Vec<Vec<f64>>,
    pub presence: Vec<bool>,
    pub label: usize,
}

impl ModalSample {
    pub fn num_present(&self) -> usize {
        self.presence.iter().filter(|&&p| p).count()
    }
}

/// A labelled multi-modal dataset with uniform modality width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub num_modalities: usize,
    pub d_in: usize,
    pub samples: Vec<ModalSample>,
}

impl Dataset {
    pub fn empty(num_classes: usize, num_modalities: usize, d_in: usize) -> Self {
        Self {
            num_classes,
            num_modalities,
            d_in,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// A new dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..Self::empty(self.num_classes, self.num_modalities, self.d_in)
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Drops samples with fewer than `min_present` present modalities.
    pub fn retain_min_present(&mut self, min_present: usize) {
        self.samples.retain(|s| s.num_present() >= min_present);
    }

    /// Checks the structural invariants of every sample.
    pub fn validate(&self) -> Result<(), DataError> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.modalities.len() != self.num_modalities || s.presence.len() != self.num_modalities {
                return Err(contract(format!("sample {i}: expected {} modalities", self.num_modalities)));
            }
            if s.label >= self.num_classes {
                return Err(contract(format!("sample {i}: label {} out of range", s.label)));
            }
            for (m, (x, &present)) in s.modalities.iter().zip(&s.presence).enumerate() {
                if x.len() != self.d_in {
                    return Err(contract(format!("sample {i} modality {m}: width {} != {}", x.len(), self.d_in)));
                }
                if !present && x.iter().any(|&v| v != 0.0) {
                    return Err(contract(format!("sample {i} modality {m}: absent but non-zero")));
                }
            }
        }
        Ok(())
    }
}

/// Shape and noise of a synthetic task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub num_samples: usize,
    pub num_classes: usize,
    pub num_modalities: usize,
    pub d_in: usize,
    pub noise_std: f64,
}

/// Every modality is a random linear view of a per-class latent code plus
/// isotropic noise: `x^m = A_m c_y + N(0, noise_std^2 I)`. Labels cycle
/// through the classes, so class sizes differ by at most one.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset, DataError> {
    let SynthSpec {
        num_samples,
        num_classes,
        num_modalities,
        d_in,
        noise_std,
    } = *spec;
    if num_classes < 2 {
        return Err(contract("synth_generate: need at least 2 classes"));
    }
    if num_modalities < 2 {
        return Err(contract("synth_generate: need at least 2 modalities"));
    }
    if d_in < 1 {
        return Err(contract("synth_generate: d_in must be at least 1"));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(contract(format!("synth_generate: invalid noise_std {noise_std}")));
    }
    let mut rng = rng_from(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mixing = Normal::new(0.0, libm::sqrt(1.0 / d_in as f64)).expect("valid normal");

    let codes: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..d_in).map(|_| std_normal.sample(&mut rng)).collect())
        .collect();
    // views[m] is a row-major d_in x d_in matrix.
    let views: Vec<Vec<f64>> = (0..num_modalities)
        .map(|_| (0..d_in * d_in).map(|_| mixing.sample(&mut rng)).collect())
        .collect();
    let clean: Vec<Vec<Vec<f64>>> = codes
        .iter()
        .map(|c| {
            views
                .iter()
                .map(|a| {
                    (0..d_in)
                        .map(|r| a[r * d_in..(r + 1) * d_in].iter().zip(c).map(|(x, y)| x * y).sum())
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let label = i % num_classes;
        let modalities = clean[label]
            .iter()
            .map(|x| {
                x.iter()
                    .map(|&v| if noise_std > 0.0 { v + noise_std * std_normal.sample(&mut rng) } else { v })
                    .collect()
            })
            .collect();
        samples.push(ModalSample {
            modalities,
            presence: vec![true; num_modalities],
            label,
        });
    }
    Ok(Dataset {
        num_classes,
        num_modalities,
        d_in,
        samples,
    })
}

/// Stratified split into `(client_pool, server_test)` with the pool holding
/// `ratio` of the data. Per-class test quotas use largest remainders so the
/// test size is `round((1 - ratio) * N)` and each class is within one sample
/// of its proportional share.
pub fn split_server(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(contract(format!("split_server: ratio must be in (0, 1), got {ratio}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() == 1 {
            return Err(DataError::Stratification { class, count: 1 });
        }
    }
    let test_frac = 1.0 - ratio;
    let target = libm::round(test_frac * dataset.len() as f64) as usize;
    let quotas: Vec<f64> = by_class.iter().map(|c| test_frac * c.len() as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| libm::floor(*q) as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - libm::floor(quotas[a]), quotas[b] - libm::floor(quotas[b]));
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(counts.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if counts[c] < by_class[c].len() {
            counts[c] += 1;
            missing -= 1;
        }
    }

    let mut rng = rng_from(seed);
    let mut test = Vec::with_capacity(target);
    let mut pool = Vec::with_capacity(dataset.len() - target);
    for (idx, &n_test) in by_class.iter_mut().zip(&counts) {
        idx.shuffle(&mut rng);
        test.extend_from_slice(&idx[..n_test]);
        pool.extend_from_slice(&idx[n_test..]);
    }
    test.sort_unstable();
    pool.sort_unstable();
    Ok((dataset.subset(&pool), dataset.subset(&test)))
}
