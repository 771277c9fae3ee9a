use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfapprox::blocks::psi;
use tfapprox::synthesis::*;
use tfapprox::Error;

/// `Σ_n f_n Π_i ψ(3(N−1)(x^i − g_n^i))` over every grid point, no pruning.
fn brute_pou(grid: &GridApprox, x: &[f64]) -> f64 {
    let a = 3.0 * (grid.n - 1) as f64;
    (0..grid.len())
        .map(|k| {
            let c = grid.center(k);
            grid.values[k] * x.iter().zip(&c).map(|(xi, ci)| psi(a * (xi - ci))).product::<f64>()
        })
        .sum()
}

fn net_for(name: &str, d: usize, n: usize) -> (HolderTarget, GridApprox, tfapprox::runtime::TransformerNet) {
    let b = Budget::default();
    let t = HolderTarget::registry(name, d).unwrap();
    let g = build_grid(&t, d, n, &b).unwrap();
    let net = synthesize_cube_approximator(&g, t.sup_bound, &b).unwrap();
    (t, g, net)
}

#[test]
fn linear_1d_error_is_a_third_of_the_spacing() {
    let (t, g, net) = net_for("linear", 1, 11);
    let pts = default_scan(1, 11, 2000, SCAN_SEED, &Budget::default()).unwrap();
    let r = sup_error_over(&pts, |x| net.forward(x), |x| t.eval(x)).unwrap();
    assert!((r.sup_error - 1.0 / 30.0).abs() < 1e-12, "{}", r.sup_error);
    let o = sup_error_over(&pts, |x| Ok(pou_oracle(&g, x)), |x| t.eval(x)).unwrap();
    assert!((o.sup_error - 1.0 / 30.0).abs() < 1e-12);
    assert_eq!(cube_error_bound(1, 11, t.holder, t.beta), 0.2);
}

#[test]
fn cube_nets_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (d, n) in [(1, 3), (1, 9), (2, 3), (2, 5), (3, 3)] {
        for name in ["linear", "sines", "bump", "radial", "polynomial"] {
            let (t, g, net) = net_for(name, d, n);
            let tol = net.tolerance();
            for _ in 0..40 {
                let x: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
                let y = net.forward(&x).unwrap();
                assert!((y - pou_oracle(&g, &x)).abs() <= tol, "{name} d={d} N={n}");
            }
            let r = sup_error_scan(|x| net.forward(x), &t, d, 6 * (n - 1) + 1, &Budget::default()).unwrap();
            assert!(r.sup_error <= cube_error_bound(d, n, t.holder, t.beta));
        }
    }
}

#[test]
fn cube_layout_sizes() {
    for (d, n) in [(1, 4), (2, 3), (3, 3), (4, 3)] {
        let (_, _, net) = net_for("sines", d, n);
        assert_eq!(net.token_count as u128, cube_token_count(d, n));
        assert_eq!(net.depth(), product_levels(d) + 4);
        assert_eq!(padded_dim(d), d.next_power_of_two());
    }
}

#[test]
fn zero_target_gives_zero_net() {
    let (_, _, net) = net_for("zero", 2, 4);
    for x in [[0.0, 0.0], [0.3, 0.7], [1.0, 0.5]] {
        assert_eq!(net.forward(&x).unwrap(), 0.0);
    }
}

#[test]
fn grid_points_are_reproduced() {
    let t = HolderTarget::registry("bump", 2).unwrap();
    let g = build_grid(&t, 2, 5, &Budget::default()).unwrap();
    for k in 0..g.len() {
        let c = g.center(k);
        assert!((pou_oracle(&g, &c) - t.eval(&c)).abs() < 1e-15);
    }
}

#[test]
fn choose_n_is_minimal() {
    for (eps, d) in [(0.1, 1), (0.3, 2), (0.05, 1), (0.5, 3)] {
        let n = choose_n(eps, d, 1.0, 1.0).unwrap();
        assert!(cube_error_bound(d, n, 1.0, 1.0) <= eps * (1.0 + 1e-12));
        if n > 2 {
            assert!(cube_error_bound(d, n - 2, 1.0, 1.0) > eps);
        }
    }
    assert_eq!(choose_n(0.2, 1, 1.0, 1.0).unwrap(), 11);
    assert!(choose_n(0.0, 1, 1.0, 1.0).is_err());
    assert!(choose_n(0.1, 1, 1.0, 1.5).is_err());
}

#[test]
fn budgets_are_enforced() {
    let tight = Budget { max_evaluations: 100, max_tokens: 50 };
    let t = HolderTarget::registry("linear", 3).unwrap();
    assert!(matches!(build_grid(&t, 3, 5, &tight), Err(Error::Resource { .. })));
    let g = build_grid(&t, 3, 3, &Budget::default()).unwrap();
    assert!(matches!(synthesize_cube_approximator(&g, 1.0, &tight), Err(Error::Resource { .. })));
    assert!(matches!(scan_points(3, 10, 0, 1, &tight), Err(Error::Resource { .. })));
}

#[test]
fn target_errors() {
    assert!(matches!(HolderTarget::registry("nope", 2), Err(Error::Config(_))));
    assert!(HolderTarget::registry("linear", 0).is_err());
    let t = HolderTarget::registry("linear", 2).unwrap();
    assert!(matches!(build_grid(&t, 3, 3, &Budget::default()), Err(Error::Dimension(_))));
}

#[test]
fn scan_is_deterministic() {
    let b = Budget::default();
    let a = default_scan(2, 5, 500, 7, &b).unwrap();
    assert_eq!(a, default_scan(2, 5, 500, 7, &b).unwrap());
    assert_eq!(a.len(), 500);
    assert_ne!(a, default_scan(2, 5, 500, 8, &b).unwrap());
}

#[test]
fn circle_atlas_covers_and_sums_to_one() {
    let atlas = make_atlas(Shape::Circle, 16, &AtlasParams::default()).unwrap();
    atlas.validate().unwrap();
    assert!(atlas.overlap() >= 2);
    for x in atlas.sample(500, 3) {
        assert!(((x[0] * x[0] + x[1] * x[1]).sqrt() - 1.0).abs() < 1e-12);
        let s: f64 = (0..16).map(|n| atlas.pou(n, &x)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert!(matches!(make_atlas(Shape::Circle, 4, &AtlasParams::default()).and_then(|a| a.validate()), Err(Error::Coverage { .. })));
}

#[test]
fn chart_projection_matches_closed_form() {
    let atlas = make_atlas(Shape::Circle, 16, &AtlasParams::default()).unwrap();
    let layout = tfapprox::blocks::StructuredLayout::new(3, 2.0).unwrap();
    for chart in &atlas.charts {
        let block = synthesize_chart_projection(chart, &layout).unwrap();
        for x in atlas.sample(20, 9) {
            let h = layout.embed_row1(&[x[0], x[1], 0.0]);
            let out = tfapprox::runtime::block_forward(&block, &h).unwrap();
            let phi = chart.project(&x)[0];
            assert!((out.get(0, 2) - phi).abs() < 1e-12);
            assert_eq!(out.get(1, 2), 0.0);
        }
    }
}

#[test]
fn default_ramp_keeps_indicator_error_in_budget() {
    let atlas = make_atlas(Shape::Circle, 16, &AtlasParams::default()).unwrap();
    let target = HolderTarget::new(TargetSpec::Linear { a: vec![0.0, 1.0], b: 0.0 }, 2).unwrap();
    for eps in [0.05, 0.1, 0.3, 0.6] {
        let m = prepare_manifold(&atlas, &target, eps, &ManifoldOptions { resolution: Some(8), ..Default::default() }).unwrap();
        assert!(m.ramp_error <= 0.5 * eps);
        assert_eq!(m.ramp_error, ramp_error(&atlas, &target, m.ramp_width));
    }
}

#[test]
fn circle_manifold_net_end_to_end() {
    let atlas = make_atlas(Shape::Circle, 16, &AtlasParams::default()).unwrap();
    let target = HolderTarget::new(TargetSpec::Linear { a: vec![0.0, 1.0], b: 0.0 }, 2).unwrap();
    let syn = synthesize_manifold_approximator(&atlas, &target, 0.3, &ManifoldOptions::default()).unwrap();
    assert_eq!(syn.net.depth(), 7 + product_levels(1));
    let tol = syn.net.tolerance();
    for x in atlas.sample(200, 5) {
        let y = syn.net.forward(&x).unwrap();
        assert!((y - target.eval(&x)).abs() <= 0.3);
        assert!((y - manifold_oracle(&syn.model, &x)).abs() <= tol);
    }
    for x in atlas.sample(20, 6) {
        assert!(syn.projection_gap(&x).unwrap() <= tol);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_sum_to_one_on_the_cube(x in proptest::collection::vec(0.0f64..=1.0, 1..4), n in 2usize..9) {
        let s = pou_weight_sum(x.len(), n, &x);
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pruned_oracle_equals_full_sum(x in proptest::collection::vec(-0.2f64..=1.2, 1..3), n in 2usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = x.len();
        let g = GridApprox::new(d, n, (0..n.pow(d as u32)).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        prop_assert!((pou_oracle(&g, &x) - brute_pou(&g, &x)).abs() < 1e-12);
    }

    #[test]
    fn registry_constants_hold(name in prop::sample::select(vec!["linear", "sines", "bump", "radial", "polynomial"]),
                               d in 1usize..4, seed in any::<u64>()) {
        let t = HolderTarget::registry(name, d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let x: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
            let r = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            prop_assert!((t.eval(&x) - t.eval(&y)).abs() <= t.holder * r.powf(t.beta) * (1.0 + 1e-9) + 1e-15);
            prop_assert!(t.eval(&x).abs() <= t.sup_bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn interpolant_within_bound(x in proptest::collection::vec(0.0f64..=1.0, 2), n in 2usize..10) {
        let t = HolderTarget::registry("sines", 2).unwrap();
        let g = build_grid(&t, 2, n, &Budget::default()).unwrap();
        prop_assert!((pou_oracle(&g, &x) - t.eval(&x)).abs() <= cube_error_bound(2, n, t.holder, t.beta));
    }
}
