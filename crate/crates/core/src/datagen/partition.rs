use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use super::{contract, DataError, Dataset};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionScheme {
    Iid,
    Dirichlet { alpha: f64 },
}

/// Disjoint client index lists covering a client pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub scheme: PartitionScheme,
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }
}

fn check_k(pool: &Dataset, k: usize) -> Result<(), DataError> {
    if k == 0 || k > pool.len() {
        return Err(contract(format!(
            "partition: need 1 <= K <= pool size, got K={k} for {} samples",
            pool.len()
        )));
    }
    Ok(())
}

/// Shuffles the pool and cuts it into `k` contiguous chunks whose sizes differ by at most one.
pub fn partition_iid(pool: &Dataset, k: usize, seed: u64) -> Result<Partition, DataError> {
    check_k(pool, k)?;
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut rng_from(seed));
    let (base, extra) = (pool.len() / k, pool.len() % k);
    let mut clients = Vec::with_capacity(k);
    let mut start = 0;
    for c in 0..k {
        let len = base + usize::from(c < extra);
        let mut chunk = idx[start..start + len].to_vec();
        chunk.sort_unstable();
        clients.push(chunk);
        start += len;
    }
    Ok(Partition {
        client_indices: clients,
        scheme: PartitionScheme::Iid,
        seed,
    })
}

/// Label-skewed partition: each class is spread over the clients with
/// proportions drawn from `Dirichlet(alpha * 1_K)`. Clients left empty
/// take one sample from the currently largest client.
pub fn partition_dirichlet(pool: &Dataset, k: usize, alpha: f64, seed: u64) -> Result<Partition, DataError> {
    check_k(pool, k)?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(contract(format!("partition: alpha must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| contract(format!("partition: {e}")))?;
    let mut rng = rng_from(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); pool.num_classes];
    for (i, s) in pool.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); k];
    for idx in by_class.iter_mut() {
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            // Every draw underflowed: the whole class lands on one client.
            let c = rng.random_range(0..k);
            clients[c].extend_from_slice(idx);
            continue;
        }
        let n = idx.len() as f64;
        let mut cum = 0.0;
        let mut start = 0;
        for (c, d) in draws.iter().enumerate() {
            cum += d / total;
            let end = if c + 1 == k { idx.len() } else { (libm::round(cum * n) as usize).min(idx.len()) };
            let end = end.max(start);
            clients[c].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let largest = (0..k).fold(0, |best, c| if clients[c].len() > clients[best].len() { c } else { best });
        let moved = clients[largest].pop().expect("pool has at least K samples");
        clients[empty].push(moved);
    }
    for c in clients.iter_mut() {
        c.sort_unstable();
    }
    Ok(Partition {
        client_indices: clients,
        scheme: PartitionScheme::Dirichlet { alpha },
        seed,
    })
}
