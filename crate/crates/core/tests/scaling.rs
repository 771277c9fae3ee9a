use proptest::prelude::*;
use tfapprox::scaling::*;
use tfapprox::synthesis::{cube_token_count, padded_dim, product_levels};
use tfapprox::Error;

fn ones() -> ArchParams {
    ArchParams { l_t: 1, l_ff: 1, w_ff: 1, l: 1, d_embd: 1, m: 1, kappa: 1.0, big_m: 1.0, r: 1.0, big_d: 1.0, delta: 1.0 }
}

#[test]
fn exponents_for_d2() {
    let p = predict_exponents(2.0, 1.0).unwrap();
    assert_eq!((p.alpha_d, p.alpha_n), (0.5, 1.0));
    let v = serde_json::to_value(p).unwrap();
    assert_eq!(v["alpha_D"], 0.5);
    assert_eq!(v["alpha_N"], 1.0);
    assert!(predict_exponents(0.0, 1.0).is_err());
    assert!(predict_exponents(2.0, 1.5).is_err());
}

#[test]
fn conversion_by_hand() {
    assert_eq!(convert_exponents(Known::AlphaN, 1.0).unwrap(), 0.5);
    assert_eq!(convert_exponents(Known::AlphaD, 0.5).unwrap(), 1.0);
    assert!(matches!(convert_exponents(Known::AlphaD, 1.0), Err(Error::Domain(_))));
    assert!(convert_exponents(Known::AlphaN, -0.1).is_err());
}

#[test]
fn noiseless_fit_is_exact() {
    let pts = synthetic_loss_curve(3.0, 0.37, (1e2, 1e8), 20, 0.0, 0).unwrap();
    let f = fit_power_law(&pts, FitMode::Plain).unwrap();
    assert!((f.exponent - 0.37).abs() < 1e-10);
    assert!((f.coefficient - 3.0).abs() < 1e-8);
    assert!(f.residual < 1e-12);
}

#[test]
fn offset_fit_recovers_the_floor() {
    let pts: Vec<(f64, f64)> = (0..30).map(|i| 10f64.powf(2.0 + 0.2 * i as f64)).map(|n| (n, 1.5 + 4.0 * n.powf(-0.3))).collect();
    let plain = fit_power_law(&pts, FitMode::Plain).unwrap();
    let off = fit_power_law(&pts, FitMode::Offset).unwrap();
    assert!(off.residual < plain.residual);
    let e = off.offset.unwrap();
    assert!((e - 1.5).abs() < 0.05, "{e}");
    assert!((off.exponent - 0.3).abs() < 0.05);
}

#[test]
fn fit_errors() {
    assert!(matches!(fit_power_law(&[(1.0, 1.0), (2.0, 0.5)], FitMode::Plain), Err(Error::InsufficientData(_))));
    assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.0), (3.0, 0.2)], FitMode::Plain).is_err());
    assert!(fit_power_law(&[(2.0, 1.0), (1.0, 0.5), (3.0, 0.2)], FitMode::Plain).is_err());
}

#[test]
fn loss_csv_reader() {
    let pts = read_loss_csv("n,loss\n10, 0.5\n100,0.25\n".as_bytes()).unwrap();
    assert_eq!(pts, vec![(10.0, 0.5), (100.0, 0.25)]);
    assert!(read_loss_csv("n,loss\n10,x\n".as_bytes()).is_err());
}

#[test]
fn covering_all_ones() {
    let v = log_covering_number(&ones()).unwrap();
    assert!((v - 16.0 * 2f64.ln()).abs() < 1e-12);
    assert_eq!(ones().covering_prefactor(), 8.0);
}

#[test]
fn covering_by_hand() {
    let p = ArchParams { l_t: 2, l_ff: 3, w_ff: 4, l: 5, d_embd: 5, m: 6, kappa: 7.0, big_m: 8.0, r: 1.0, big_d: 3.0, delta: 0.1 };
    let pf = 4.0 * 25.0 * 16.0 * 3.0 * 9.0 * 2.0;
    let br = 5.0 * 2f64.ln() + 3f64.ln() + 6.0 * 8f64.ln() + 72.0 * 5f64.ln() + 216.0 * 4f64.ln() + 72.0 * 7f64.ln()
        + 4.0 * 6f64.ln()
        + 4.0 * 5f64.ln()
        + 10f64.ln();
    let v = log_covering_number(&p).unwrap();
    assert!((v - pf * br).abs() <= 1e-12 * v);
}

#[test]
fn covering_parameter_errors() {
    assert!(log_covering_number(&ArchParams { l_t: 0, ..ones() }).is_err());
    assert!(log_covering_number(&ArchParams { delta: 1.5, ..ones() }).is_err());
    assert!(log_covering_number(&ArchParams { kappa: 0.0, ..ones() }).is_err());
}

#[test]
fn rate_curve_slope() {
    let ns: Vec<f64> = (0..10).map(|i| 10f64.powi(i + 2)).collect();
    let c = generalization_rate_curve(4.0, 1.0, 10.0, &ns).unwrap();
    let f = fit_power_law(&c, FitMode::Plain).unwrap();
    assert!((f.exponent - 1.0 / 3.0).abs() < 1e-12);
    assert!((c[0].1 - 160.0 * 100f64.powf(-1.0 / 3.0)).abs() < 1e-12);
    assert!(generalization_rate_curve(4.0, 1.0, 10.0, &[0.0]).is_err());
}

#[test]
fn architecture_matches_the_synthesizer_layout() {
    let a = predicted_architecture(ArchMode::Approximation { eps: 0.2, holder: 1.0 }, 1, 1.0, 1.0).unwrap();
    assert_eq!(a.n_grid, 11);
    assert_eq!(a.params.l as u128, cube_token_count(1, 11));
    assert_eq!(a.params.l_t as usize, product_levels(1) + 4);
    assert_eq!(a.d_pad, padded_dim(1));
    assert_eq!(a.params.delta, 0.2);
    let e = predicted_architecture(ArchMode::Estimation { n: 1e4 }, 2, 1.0, 1.0).unwrap();
    assert_eq!(e.params.delta, 1e-4);
    assert!((e.drivers.grid - 1e4f64.powf(0.5)).abs() < 1e-9);
}

#[test]
fn architecture_matches_a_built_net() {
    use tfapprox::synthesis::{build_grid, synthesize_cube_approximator, Budget, HolderTarget};
    for d in [1, 2, 3] {
        let a = predicted_architecture(ArchMode::Approximation { eps: 0.9, holder: 0.3 }, d, 1.0, 1.0).unwrap();
        let t = HolderTarget::registry("bump", d).unwrap();
        let g = build_grid(&t, d, a.n_grid, &Budget::default()).unwrap();
        let net = synthesize_cube_approximator(&g, 1.0, &Budget::default()).unwrap();
        assert_eq!(a.params.l as usize, net.token_count);
        assert_eq!(a.params.l_t as usize, net.depth());
        assert_eq!(a.params.m as usize, net.max_heads());
        assert_eq!(a.params.l_ff as usize, net.max_ffn_depth());
        assert_eq!(a.params.w_ff as usize, net.max_ffn_width());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conversion_round_trip(a in 1e-3f64..0.999) {
        let n = convert_exponents(Known::AlphaD, a).unwrap();
        let back = convert_exponents(Known::AlphaN, n).unwrap();
        prop_assert!((back - a).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn predicted_pair_is_consistent(d in 0.5f64..64.0, beta in 0.05f64..=1.0) {
        let p = predict_exponents(d, beta).unwrap();
        prop_assert!((convert_exponents(Known::AlphaN, p.alpha_n).unwrap() - p.alpha_d).abs() < 1e-12);
    }

    #[test]
    fn covering_is_linear_in_log_delta(k in 1u64..5, a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let p = ArchParams { l_t: k, l_ff: 2, w_ff: 3, l: 10, d_embd: 5, m: 4, kappa: 2.0, big_m: 3.0, r: 1.0, big_d: 2.0, delta: a };
        let q = ArchParams { delta: b, ..p };
        let (va, vb) = (log_covering_number(&p).unwrap(), log_covering_number(&q).unwrap());
        let expect = p.covering_prefactor() * (b.ln() - a.ln());
        prop_assert!((va - vb - expect).abs() <= 1e-9 * va.abs().max(vb.abs()));
    }

    #[test]
    fn fit_is_exact_on_power_laws(e in 0.01f64..2.0, c in 0.1f64..10.0) {
        let pts = synthetic_loss_curve(c, e, (10.0, 1e6), 12, 0.0, 0).unwrap();
        let f = fit_power_law(&pts, FitMode::Plain).unwrap();
        prop_assert!((f.exponent - e).abs() < 1e-10);
    }
}
