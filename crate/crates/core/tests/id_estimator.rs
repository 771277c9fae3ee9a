use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfapprox::id_estimator::*;
use tfapprox::Error;

fn random_cloud(n: usize, dim: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen()).collect()).collect();
    PointCloud::new(&rows, "random").unwrap()
}

/// Sorted `(d², index)` neighbors by full enumeration.
fn enumerate_neighbors(cloud: &PointCloud, i: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..cloud.len())
        .filter(|&j| j != i)
        .map(|j| (cloud.row(i).iter().zip(cloud.row(j)).map(|(a, b)| (a - b) * (a - b)).sum(), j))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|p| p.1).collect()
}

#[test]
fn mle_by_hand() {
    // K = 3: mean of ln(4/1) and ln(4/2) is 1.5 ln 2.
    let m = mle_local_dim(&[1.0, 2.0, 4.0]).unwrap();
    assert!((m - 1.0 / (1.5 * 2f64.ln())).abs() < 1e-15);
    // T_j = a^j gives mean ln a · K/2.
    let a: f64 = 1.1;
    let prof: Vec<f64> = (1..=20).map(|j| a.powi(j)).collect();
    assert!((mle_local_dim(&prof).unwrap() - 2.0 / (20.0 * a.ln())).abs() < 1e-12);
}

#[test]
fn mle_errors() {
    assert!(matches!(mle_local_dim(&[1.0]), Err(Error::InsufficientData(_))));
    assert!(matches!(mle_local_dim(&[1.0, 1.0, 1.0]), Err(Error::ZeroDenominator(_))));
    assert!(matches!(mle_local_dim(&[0.0, 1.0]), Err(Error::Domain(_))));
    assert!(matches!(mle_local_dim(&[2.0, 1.0]), Err(Error::Domain(_))));
}

#[test]
fn tree_and_brute_agree_on_a_large_cloud() {
    let cloud = random_cloud(3000, 4, 1);
    let tree = NeighborIndex::tree(&cloud);
    let brute = NeighborIndex::brute(&cloud);
    for i in (0..3000).step_by(97) {
        assert_eq!(tree.neighbors(i, 20).unwrap(), brute.neighbors(i, 20).unwrap());
    }
}

#[test]
fn uniform_square_estimate() {
    let cloud = sample_synthetic_manifold(&SamplerSpec::Cube { d: 2 }, 3000, 6, 4).unwrap();
    let est = estimate_id(&cloud, &IdOptions::new(1)).unwrap();
    assert!((1.7..=2.3).contains(&est.value), "{}", est.value);
    assert_eq!(est.n_used, 3000);
}

#[test]
fn estimate_is_invariant_under_similarity() {
    let cloud = sample_synthetic_manifold(&SamplerSpec::Sphere { d: 2 }, 1500, 5, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = random_orthonormal(5, 5, &mut rng).unwrap();
    let moved = cloud.transformed(&q, 3.7, &[1.0, -2.0, 0.5, 4.0, 0.0]).unwrap();
    let opts = IdOptions::new(5);
    let a = estimate_id(&cloud, &opts).unwrap().value;
    let b = estimate_id(&moved, &opts).unwrap().value;
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}

#[test]
fn single_batch_estimate_ignores_row_order() {
    let cloud = random_cloud(800, 3, 6);
    let mut idx: Vec<usize> = (0..800).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let shuffled = cloud.select(&idx).unwrap();
    let opts = IdOptions::new(0);
    assert_eq!(estimate_id(&cloud, &opts).unwrap().value, estimate_id(&shuffled, &opts).unwrap().value);
}

#[test]
fn duplicates_are_removed_first() {
    let base = random_cloud(200, 3, 8);
    let mut rows: Vec<Vec<f64>> = base.rows().map(|r| r.to_vec()).collect();
    rows.extend(rows[..30].to_vec());
    let cloud = PointCloud::new(&rows, "dups").unwrap();
    let (clean, removed) = cloud.dedup().unwrap();
    assert_eq!((clean.len(), removed), (200, 30));
    assert!(matches!(NeighborIndex::build(&cloud).profile(0, 5), Err(Error::DuplicatePoint(_))));
    let est = estimate_id(&cloud, &IdOptions::new(1)).unwrap();
    assert_eq!(est.n_deduped, 30);
}

#[test]
fn batches_and_parameters() {
    let cloud = random_cloud(1000, 2, 10);
    let opts = IdOptions { k: 10, batch_size: 300, seed: 4, aggregation: Aggregation::Arithmetic };
    let est = estimate_id(&cloud, &opts).unwrap();
    // 1000 = 3·300 + 100; the 100-point tail has more than K points and is kept.
    assert_eq!(est.per_batch.len(), 4);
    assert_eq!(est.n_used, 1000);
    let tail = IdOptions { batch_size: 495, ..opts.clone() };
    assert_eq!(estimate_id(&cloud, &tail).unwrap().n_used, 990);
    assert!(estimate_id(&cloud, &IdOptions { k: 1, ..opts.clone() }).is_err());
    assert!(estimate_id(&cloud, &IdOptions { batch_size: 5, ..opts.clone() }).is_err());
    let h = estimate_id(&cloud, &IdOptions { aggregation: Aggregation::Harmonic, ..opts }).unwrap();
    assert!(h.value <= est.value + 1e-12);
}

#[test]
fn estimate_json_uses_capital_k() {
    let cloud = random_cloud(100, 2, 11);
    let est = estimate_id(&cloud, &IdOptions { k: 5, batch_size: 50, seed: 1, aggregation: Aggregation::Arithmetic }).unwrap();
    let v = serde_json::to_value(&est).unwrap();
    assert_eq!(v["K"], 5);
}

#[test]
fn csv_round_trip_is_exact() {
    let cloud = sample_synthetic_manifold(&SamplerSpec::Torus, 50, 4, 2).unwrap();
    let mut buf = Vec::new();
    cloud.write_csv(&mut buf).unwrap();
    let back = PointCloud::read_csv(buf.as_slice(), "back").unwrap();
    assert_eq!(back.len(), 50);
    for i in 0..50 {
        assert_eq!(back.row(i), cloud.row(i));
    }
    assert!(PointCloud::read_csv("1,2\n3\n".as_bytes(), "ragged").is_err());
}

#[test]
fn samplers_are_isometric_embeddings() {
    let s = sample_synthetic_manifold(&SamplerSpec::Sphere { d: 3 }, 100, 9, 1).unwrap();
    for r in s.rows() {
        assert!((r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }
    assert!(matches!(sample_synthetic_manifold(&SamplerSpec::SwissRoll, 10, 2, 1), Err(Error::Dimension(_))));
    assert_eq!(SamplerSpec::Torus.intrinsic_dim(), 2);
    let a = sample_synthetic_manifold(&SamplerSpec::SwissRoll, 10, 5, 3).unwrap();
    let b = sample_synthetic_manifold(&SamplerSpec::SwissRoll, 10, 5, 3).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tree_matches_enumeration(n in 30usize..200, dim in 1usize..6, k in 1usize..12, seed in any::<u64>()) {
        // Coarse coordinates force distance ties.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(0..6) as f64).collect()).collect();
        let cloud = PointCloud::new(&rows, "grid").unwrap();
        let tree = NeighborIndex::tree(&cloud);
        for i in (0..n).step_by(7) {
            let got: Vec<usize> = tree.neighbors(i, k).unwrap().into_iter().map(|p| p.0).collect();
            prop_assert_eq!(got, enumerate_neighbors(&cloud, i, k));
        }
    }

    #[test]
    fn mle_is_scale_free(c in 1e-3f64..1e3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prof: Vec<f64> = (0..15).map(|_| rng.gen_range(0.1..2.0)).collect();
        prof.sort_by(f64::total_cmp);
        let scaled: Vec<f64> = prof.iter().map(|t| t * c).collect();
        let (a, b) = (mle_local_dim(&prof).unwrap(), mle_local_dim(&scaled).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a);
    }
}
