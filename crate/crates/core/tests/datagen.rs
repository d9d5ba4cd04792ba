use fedmac_core::datagen::{
    apply_missing, decode_dataset, encode_dataset, make_missing_matrix, partition_dirichlet, partition_iid,
    split_server, synth_generate, Dataset, MissingMatrix, Partition, SynthSpec,
};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn synth(n: usize, c: usize, m: usize, d_in: usize, noise_std: f64, seed: u64) -> Dataset {
    synth_generate(
        &SynthSpec {
            num_samples: n,
            num_classes: c,
            num_modalities: m,
            d_in,
            noise_std,
        },
        seed,
    )
    .unwrap()
}

#[test]
fn missing_statistics_are_exact_on_ten_thousand_rows() {
    for (p_m, p_s) in [(1.0, 0.5), (0.5, 0.5), (0.8, 0.8)] {
        let mask = make_missing_matrix(10_000, 12, p_m, p_s, 3).unwrap();
        let expected_rows = (p_s * 10_000f64).round() as usize;
        let expected_zeros = (p_m * 12f64).round() as usize;
        assert_eq!(mask.affected_rows(), expected_rows);
        for r in 0..10_000 {
            let z = mask.zeros_in_row(r);
            assert!(z == 0 || z == expected_zeros, "row {r}: {z} zeros");
        }
        let zero_bits = (expected_rows * expected_zeros) as f64;
        assert!((mask.missing_degree() - zero_bits / 120_000.0).abs() < 1e-12);
    }
}

#[test]
fn centroid_classifier_separates_low_noise_data() {
    let d = synth(1000, 5, 12, 16, 0.1, 21);
    let dim = 12 * 16;
    let flat = |i: usize| -> Vec<f64> { d.samples[i].modalities.concat() };
    let mut centroids = vec![vec![0.0; dim]; 5];
    let counts = d.class_counts();
    for (i, s) in d.samples.iter().enumerate() {
        for (c, v) in centroids[s.label].iter_mut().zip(flat(i)) {
            *c += v / counts[s.label] as f64;
        }
    }
    let correct = (0..d.len())
        .filter(|&i| {
            let x = flat(i);
            let dist = |c: &Vec<f64>| x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..5).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == d.samples[i].label
        })
        .count();
    assert!(correct as f64 / d.len() as f64 > 0.95, "{correct}/1000");
}

#[test]
fn zero_noise_collapses_each_class() {
    let d = synth(40, 2, 3, 4, 0.0, 5);
    for s in &d.samples {
        let first = d.samples.iter().find(|t| t.label == s.label).unwrap();
        assert_eq!(s.modalities, first.modalities);
    }
    assert_eq!(d.class_counts(), vec![20, 20]);
}

fn chi_square(p: &Partition, pool: &Dataset) -> (f64, f64) {
    let c = pool.num_classes;
    let k = p.num_clients();
    let mut table = vec![vec![0.0; c]; k];
    for (client, idx) in p.client_indices.iter().enumerate() {
        for &i in idx {
            table[client][pool.samples[i].label] += 1.0;
        }
    }
    let n = pool.len() as f64;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..c).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut stat = 0.0;
    for (r, row) in table.iter().enumerate() {
        for (j, obs) in row.iter().enumerate() {
            let e = rows[r] * cols[j] / n;
            stat += (obs - e).powi(2) / e;
        }
    }
    let critical = ChiSquared::new(((k - 1) * (c - 1)) as f64).unwrap().inverse_cdf(0.999);
    (stat, critical)
}

#[test]
fn iid_class_histograms_pass_chi_square() {
    let pool = synth(10_000, 5, 2, 1, 0.1, 1);
    for seed in 0..5 {
        let (stat, critical) = chi_square(&partition_iid(&pool, 8, seed).unwrap(), &pool);
        assert!(stat < critical, "seed {seed}: {stat} >= {critical}");
    }
}

#[test]
fn huge_alpha_dirichlet_looks_iid() {
    let pool = synth(10_000, 5, 2, 1, 0.1, 2);
    for seed in 0..5 {
        let p = partition_dirichlet(&pool, 8, 1e6, seed).unwrap();
        let (stat, critical) = chi_square(&p, &pool);
        assert!(stat < critical, "seed {seed}: {stat} >= {critical}");
        let sizes = p.sizes();
        assert!(sizes.iter().all(|&s| (s as f64 - 1250.0).abs() < 100.0), "{sizes:?}");
    }
}

#[test]
fn tiny_alpha_dirichlet_makes_single_class_clients() {
    let pool = synth(2000, 2, 2, 1, 0.1, 3);
    let mut shares = Vec::new();
    for seed in 0..10 {
        let p = partition_dirichlet(&pool, 10, 0.01, seed).unwrap();
        for idx in &p.client_indices {
            let ones = idx.iter().filter(|&&i| pool.samples[i].label == 1).count();
            shares.push(ones.max(idx.len() - ones) as f64 / idx.len() as f64);
        }
    }
    let mean = shares.iter().sum::<f64>() / shares.len() as f64;
    assert!(mean > 0.9, "mean max class share {mean}");
}

#[test]
fn mild_alpha_dirichlet_skews_classes() {
    let pool = synth(10_000, 5, 2, 1, 0.1, 4);
    let p = partition_dirichlet(&pool, 8, 0.9, 0).unwrap();
    let (stat, critical) = chi_square(&p, &pool);
    assert!(stat > critical, "alpha 0.9 should be visibly non-IID: {stat}");
}

#[test]
fn server_split_is_stratified() {
    let d = synth(100, 5, 2, 2, 0.1, 6);
    let (pool, test) = split_server(&d, 0.8, 7).unwrap();
    assert_eq!((pool.len(), test.len()), (80, 20));
    assert_eq!(test.class_counts(), vec![4; 5]);
    let (a, b) = split_server(&synth(10, 2, 2, 2, 0.1, 6), 0.5, 8).unwrap();
    assert_eq!((a.len(), b.len()), (5, 5));
    assert_eq!(split_server(&d, 0.8, 7).unwrap(), (pool, test));
}

#[test]
fn empty_dataset_file_round_trips() {
    let d = Dataset::empty(3, 4, 5);
    let bytes = encode_dataset(&d);
    assert_eq!(bytes.len(), 20);
    assert_eq!(decode_dataset(&bytes).unwrap(), d);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partitions_are_disjoint_covers(n in 10usize..300, k in 1usize..10, alpha in 0.05f64..10.0, seed: u64) {
        let pool = synth(n, 3, 2, 1, 0.1, seed);
        for p in [partition_iid(&pool, k, seed).unwrap(), partition_dirichlet(&pool, k, alpha, seed).unwrap()] {
            let mut all: Vec<usize> = p.client_indices.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(p.sizes().iter().all(|&s| s >= 1));
        }
        let sizes = partition_iid(&pool, k, seed).unwrap().sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn missing_matrix_counts_and_idempotence(
        n in 1usize..80, m in 1usize..14, p_m in 0.0f64..=1.0, p_s in 0.0f64..=1.0, seed: u64,
    ) {
        let mask = make_missing_matrix(n, m, p_m, p_s, seed).unwrap();
        let zeros = (p_m * m as f64).round() as usize;
        let rows = (p_s * n as f64).round() as usize;
        let affected = (0..n).filter(|&r| mask.zeros_in_row(r) > 0).count();
        prop_assert_eq!(affected, if zeros == 0 { 0 } else { rows });
        prop_assert!((0..n).all(|r| mask.zeros_in_row(r) == 0 || mask.zeros_in_row(r) == zeros));

        let d = synth(n.max(2), 2, m.max(2), 3, 0.5, seed);
        let mask = make_missing_matrix(d.len(), d.num_modalities, p_m, p_s, seed).unwrap();
        let once = apply_missing(&d, &mask).unwrap();
        prop_assert_eq!(apply_missing(&once, &mask).unwrap(), once.clone());
        for (s, orig) in once.samples.iter().zip(&d.samples) {
            prop_assert_eq!(s.label, orig.label);
            for (mi, present) in s.presence.iter().enumerate() {
                if *present {
                    prop_assert_eq!(&s.modalities[mi], &orig.modalities[mi]);
                } else {
                    prop_assert!(s.modalities[mi].iter().all(|v| *v == 0.0));
                }
            }
        }
        prop_assert_eq!(MissingMatrix::decode(&mask.encode()).unwrap(), mask);
    }

    #[test]
    fn dataset_files_round_trip(n in 0usize..30, m in 2usize..5, seed: u64) {
        let d = if n < 2 { Dataset::empty(2, m, 3) } else { synth(n, 2, m, 3, 0.5, seed) };
        let mask = make_missing_matrix(d.len(), m, 0.5, 0.5, seed).unwrap();
        let d = apply_missing(&d, &mask).unwrap();
        let bytes = encode_dataset(&d);
        prop_assert_eq!(bytes.len(), 20 + d.len() * (4 + m + m * 3 * 8));
        prop_assert_eq!(decode_dataset(&bytes).unwrap(), d);
    }

    #[test]
    fn generators_are_pure(seed: u64) {
        prop_assert_eq!(synth(30, 3, 3, 2, 0.2, seed), synth(30, 3, 3, 2, 0.2, seed));
        prop_assert_eq!(
            make_missing_matrix(30, 4, 0.5, 0.5, seed).unwrap(),
            make_missing_matrix(30, 4, 0.5, 0.5, seed).unwrap()
        );
    }
}
