//! One test per acceptance criterion. Each prints a single PASS or FAIL line
//! with the measured value and the tolerance it was judged against.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfapprox::blocks::*;
use tfapprox::id_estimator::*;
use tfapprox::runtime::*;
use tfapprox::scaling::*;
use tfapprox::synthesis::*;

fn verdict(id: u32, pass: bool, detail: String) {
    println!("{} criterion {id:>2}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id}: {detail}");
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

#[test]
fn c01_interaction_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let (mut off_target, mut worst_ratio) = (0usize, 0.0f64);
    for _ in 0..1000 {
        let l = rng.gen_range(2..=64);
        let m = rng.gen_range(0.05..=2.0);
        let layout = StructuredLayout::new(l, m).unwrap();
        let kappa = rng.gen_range(0.05..=1.0);
        let mut qb = [[0.0; 5]; 2];
        let mut kb = [[0.0; 5]; 2];
        for r in 0..2 {
            for c in 0..5 {
                qb[r][c] = rng.gen_range(-kappa..=kappa);
                kb[r][c] = rng.gen_range(-kappa..=kappa);
            }
        }
        let kern = DataKernelPair::new(qb, kb, kappa).unwrap();
        let (t1, t2, row) = (rng.gen_range(1..=l), rng.gen_range(1..=l), rng.gen_range(1..=5));
        let (head, c) = make_interaction_head(t1, t2, row, &kern, &layout).unwrap();
        let mut h = layout.positional();
        for t in 0..l {
            for r in 0..2 {
                h.set(r, t, rng.gen_range(-m..=m));
            }
        }
        let out = attention_forward(&head, &h).unwrap();
        // Scalar kernel formula, computed from the two token columns alone.
        let expect = relu(kern.score(h.column(t1 - 1), h.column(t2 - 1)));
        let tol = 10.0 * c * f64::EPSILON;
        for t in 0..l {
            for r in 0..5 {
                let v = out.get(r, t);
                if (t, r) == (t1 - 1, row - 1) {
                    worst_ratio = worst_ratio.max((v - expect).abs() / tol);
                } else if v != 0.0 {
                    off_target += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        off_target == 0 && worst_ratio <= 1.0 && secs < 10.0,
        format!(
            "1000 heads: {off_target} nonzero off-target entries (need 0), worst target error {worst_ratio:.3e} x 10*C*eps (need <= 1), {secs:.2}s (need < 10s)"
        ),
    )
}

struct CubeCase {
    d: usize,
    n: usize,
    target: &'static str,
    oracle_gap: f64,
    tolerance: f64,
    sup_error: f64,
    bound: f64,
}

/// Every (d, N, target) net of criteria 2 and 3, scanned once.
fn cube_cases() -> &'static (Vec<CubeCase>, Duration) {
    static CASES: OnceLock<(Vec<CubeCase>, Duration)> = OnceLock::new();
    CASES.get_or_init(|| {
        let start = Instant::now();
        let b = Budget::default();
        let mut cases = Vec::new();
        for d in [1, 2, 4] {
            for n in [3, 5, 9] {
                let pts = default_scan(d, n, 2000, SCAN_SEED, &b).unwrap();
                for target in ["linear", "sines", "bump", "radial"] {
                    let t = HolderTarget::registry(target, d).unwrap();
                    let g = build_grid(&t, d, n, &b).unwrap();
                    let net = synthesize_cube_approximator(&g, t.sup_bound, &b).unwrap();
                    let ys = net.forward_many(&pts).unwrap();
                    let (mut gap, mut sup) = (0.0f64, 0.0f64);
                    for (x, y) in pts.iter().zip(&ys) {
                        gap = gap.max((y - pou_oracle(&g, x)).abs());
                        sup = sup.max((y - t.eval(x)).abs());
                    }
                    cases.push(CubeCase {
                        d,
                        n,
                        target,
                        oracle_gap: gap,
                        tolerance: 10.0 * net.cancellation_scale() * f64::EPSILON,
                        sup_error: sup,
                        bound: cube_error_bound(d, n, t.holder, t.beta),
                    });
                }
            }
        }
        (cases, start.elapsed())
    })
}

#[test]
fn c02_cube_net_matches_oracle() {
    let (cases, took) = cube_cases();
    let bad: Vec<String> = cases
        .iter()
        .filter(|c| c.oracle_gap > c.tolerance)
        .map(|c| format!("{} d={} N={}", c.target, c.d, c.n))
        .collect();
    let worst = cases.iter().map(|c| c.oracle_gap).fold(0.0, f64::max);
    let worst_ratio = cases.iter().map(|c| c.oracle_gap / c.tolerance).fold(0.0, f64::max);
    let secs = took.as_secs_f64();
    verdict(
        2,
        bad.is_empty() && worst <= 1e-6 && secs < 120.0,
        format!(
            "{} nets x 2000 points: max |net - oracle| = {worst:.3e} (need <= 10*C_max*eps and <= 1e-6; worst ratio {worst_ratio:.3e}), failures {bad:?}, {secs:.1}s (need < 120s)",
            cases.len()
        ),
    )
}

#[test]
fn c03_cube_error_bound() {
    let (cases, _) = cube_cases();
    let bad: Vec<String> = cases
        .iter()
        .filter(|c| c.sup_error > c.bound)
        .map(|c| format!("{} d={} N={}: {:.4} > {:.4}", c.target, c.d, c.n, c.sup_error, c.bound))
        .collect();
    let tightest = cases.iter().map(|c| c.sup_error / c.bound).fold(0.0, f64::max);

    let b = Budget::default();
    let t = HolderTarget::registry("linear", 1).unwrap();
    let g = build_grid(&t, 1, 11, &b).unwrap();
    let net = synthesize_cube_approximator(&g, t.sup_bound, &b).unwrap();
    let pts = default_scan(1, 11, 2000, SCAN_SEED, &b).unwrap();
    let linear = sup_error_over(&pts, |x| net.forward(x), |x| t.eval(x)).unwrap().sup_error;
    let linear_ok = (linear - 0.033333).abs() <= 1e-4;
    verdict(
        3,
        bad.is_empty() && linear_ok,
        format!(
            "sup error <= 2^d d^b H/(N-1)^b in {}/{} cases (largest ratio {tightest:.3}), violations {bad:?}; d=1 N=11 f(x)=x sup error {linear:.6} (need 0.033333 +- 1e-4)",
            cases.len() - bad.len(),
            cases.len()
        ),
    )
}

#[test]
fn c04_width_error_slope() {
    let start = Instant::now();
    let b = Budget::default();
    let t = HolderTarget::registry("sines", 2).unwrap();
    let mut pts = Vec::new();
    for n in [5, 9, 17, 33] {
        let g = build_grid(&t, 2, n, &b).unwrap();
        let net = synthesize_cube_approximator(&g, t.sup_bound, &b).unwrap();
        let scan = default_scan(2, n, 2000, SCAN_SEED, &b).unwrap();
        let sup = sup_error_over(&scan, |x| net.forward(x), |x| t.eval(x)).unwrap().sup_error;
        pts.push((net.token_count as f64, sup));
    }
    let slope = -fit_power_law(&pts, FitMode::Plain).unwrap().exponent;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        (slope + 0.5).abs() <= 0.15 && secs < 300.0,
        format!("d=2 sines, N in {{5,9,17,33}}: slope of log sup error vs log l = {slope:.4} (need -0.5 +- 0.15), {secs:.1}s (need < 300s)"),
    )
}

#[test]
fn c05_depth_independent_of_eps() {
    let b = Budget::default();
    let d = 2;
    let t = HolderTarget::registry("sines", d).unwrap();
    let expected = product_levels(d) + 4;
    let mut depths = Vec::new();
    for eps in [0.8, 0.4, 0.2, 0.1] {
        let n = choose_n(eps, d, t.holder, t.beta).unwrap();
        let g = build_grid(&t, d, n, &b).unwrap();
        let net = synthesize_cube_approximator(&g, t.sup_bound, &b).unwrap();
        depths.push((eps, n, net.depth()));
    }
    let ok = depths.iter().all(|&(_, _, l)| l == expected);
    verdict(5, ok, format!("d={d}, (eps, N, blocks) = {depths:?}; need every block count = log2(d_pad)+4 = {expected}"))
}

#[test]
fn c06_manifold_end_to_end() {
    let start = Instant::now();
    let atlas = make_atlas(Shape::Circle, 16, &AtlasParams::default()).unwrap();
    atlas.validate().unwrap();
    let target = HolderTarget::new(TargetSpec::Linear { a: vec![1.0, 0.0], b: 0.0 }, 2).unwrap();
    let syn = synthesize_manifold_approximator(&atlas, &target, 0.1, &ManifoldOptions::default()).unwrap();
    let xs = atlas.sample(10_000, 20240601);
    let ys = syn.net.forward_many(&xs).unwrap();
    let sup = xs.iter().zip(&ys).map(|(x, y)| (y - target.eval(x)).abs()).fold(0.0, f64::max);
    let tol = syn.net.tolerance();
    let proj = xs.iter().take(200).map(|x| syn.projection_gap(x).unwrap()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        6,
        sup <= 0.1 && proj <= tol && secs < 120.0,
        format!(
            "circle, 16 charts, f(x)=x1, eps=0.1: sup error over 1e4 samples {sup:.4} (need <= 0.1); chart projection gap {proj:.3e} (need <= {tol:.3e}); {secs:.1}s (need < 120s)"
        ),
    )
}

#[test]
fn c07_id_estimator() {
    let start = Instant::now();
    let opts = IdOptions { k: 20, batch_size: 4096, seed: 7, aggregation: Aggregation::Arithmetic };
    let mut parts = Vec::new();
    let mut ok = true;
    for d in [2usize, 5, 10] {
        let cloud = sample_synthetic_manifold(&SamplerSpec::Cube { d }, 8192, 20, 100 + d as u64).unwrap();
        let v = estimate_id(&cloud, &opts).unwrap().value;
        let (lo, hi) = (0.85 * d as f64, 1.15 * d as f64);
        ok &= (lo..=hi).contains(&v);
        parts.push(format!("cube d={d}: {v:.3} in [{lo:.2}, {hi:.2}]"));
    }
    let roll = sample_synthetic_manifold(&SamplerSpec::SwissRoll, 8192, 20, 42).unwrap();
    let base = estimate_id(&roll, &opts).unwrap().value;
    ok &= (1.6..=2.4).contains(&base);
    parts.push(format!("swiss roll: {base:.3} in [1.6, 2.4]"));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = random_orthonormal(20, 20, &mut rng).unwrap();
    let shift: Vec<f64> = (0..20).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let origin = vec![0.0; 20];
    let mut worst = 0.0f64;
    for (scale, shift) in [(1.0, &shift), (3.5, &origin), (0.2, &shift)] {
        let moved = roll.transformed(&q, scale, shift).unwrap();
        worst = worst.max((estimate_id(&moved, &opts).unwrap().value - base).abs());
    }
    ok &= worst < 1e-9;
    parts.push(format!("isometry/scale delta {worst:.3e} (need < 1e-9)"));
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 60.0;
    verdict(7, ok, format!("n=8192 in R^20, K=20: {}; {secs:.1}s (need < 60s)", parts.join("; ")))
}

#[test]
fn c08_table_conversions() {
    // Table rows convert a known exponent into the other one.
    let a = convert_exponents(Known::AlphaN, 0.076).unwrap();
    let b = convert_exponents(Known::AlphaD, 0.095).unwrap();
    let chin = convert_exponents(Known::AlphaN, 0.34).unwrap();
    let row_a = round3(a) == 0.070;
    let row_b = round3(b) == 0.106;
    let row_c = (chin * 100.0).round() / 100.0 == 0.25;
    let row_28 = convert_exponents(Known::AlphaD, 0.28).unwrap();
    verdict(
        8,
        row_a && row_b && row_c,
        format!(
            "0.076 -> {a:.4} ({:.3}, need 0.070); 0.095 -> {b:.4} ({:.3}, need 0.106); Chinchilla 0.34 -> {chin:.4} (need 0.25); 0.28 row -> {row_28:.4}, documented only",
            round3(a),
            round3(b)
        ),
    )
}

#[test]
fn c09_exponent_band() {
    let ds: Vec<f64> = (0..=47).map(|i| 13.3 + 0.1 * i as f64).map(|d: f64| d.min(18.0)).collect();
    let alphas: Vec<(f64, f64)> = ds.iter().map(|&d| (d, predict_exponents(d, 1.0).unwrap().alpha_d)).collect();
    let outside: Vec<String> = alphas
        .iter()
        .filter(|(_, a)| !(*a > 0.10 && *a < 0.13))
        .map(|(d, a)| format!("d={d:.1}: {a:.5}"))
        .collect();
    let in_observed_band = alphas.iter().all(|(_, a)| *a > 0.10 && *a < 0.15);
    let (lo, hi) = (alphas.last().unwrap().1, alphas[0].1);
    verdict(
        9,
        outside.is_empty(),
        format!(
            "beta=1, d in [13.3, 18]: alpha_D spans [{lo:.5}, {hi:.5}], need inside (0.10, 0.13); outside: {outside:?}; inside (0.1, 0.15) everywhere: {in_observed_band}"
        ),
    )
}

#[test]
fn c10_fitter_accuracy() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/");
    let read = |name: &str| read_loss_csv(std::fs::File::open(format!("{dir}{name}")).unwrap()).unwrap();
    let clean = synthetic_loss_curve(2.0, 0.5, (1e3, 1e9), 25, 0.0, 0).unwrap();
    let e_clean = fit_power_law(&clean, FitMode::Plain).unwrap().exponent;
    let e_file = fit_power_law(&read("loss_sqrt.csv"), FitMode::Plain).unwrap().exponent;
    let e_noisy = fit_power_law(&read("loss_noisy.csv"), FitMode::Plain).unwrap().exponent;
    let worst_clean = (e_clean - 0.5).abs().max((e_file - 0.5).abs());
    verdict(
        10,
        worst_clean <= 1e-10 && (e_noisy - 0.113).abs() <= 0.005,
        format!("noiseless error {worst_clean:.3e} (need <= 1e-10); 1% noise fixture {e_noisy:.6} (need 0.113 +- 0.005)"),
    )
}

#[test]
fn c11_covering_calculator() {
    let ones = ArchParams { l_t: 1, l_ff: 1, w_ff: 1, l: 1, d_embd: 1, m: 1, kappa: 1.0, big_m: 1.0, r: 1.0, big_d: 1.0, delta: 1.0 };
    let v = log_covering_number(&ones).unwrap();
    let expect = 16.0 * 2f64.ln();
    let p = ArchParams { l_t: 7, l_ff: 3, w_ff: 12, l: 2500, d_embd: 5, m: 9, kappa: 4.0, big_m: 2.0, r: 1.0, big_d: 20.0, delta: 1.0 };
    let base = log_covering_number(&p).unwrap();
    let mut worst = 0.0f64;
    for k in 1..=12 {
        let delta = 10f64.powi(-k);
        let slope = (log_covering_number(&ArchParams { delta, ..p }).unwrap() - base) / -delta.ln();
        worst = worst.max((slope - p.covering_prefactor()).abs() / p.covering_prefactor());
    }
    verdict(
        11,
        (v - expect).abs() <= 1e-12 && worst <= 1e-9,
        format!("all-ones, delta=1: {v:.6} (need 16 ln 2 = {expect:.6}); slope in -ln delta vs P relative deviation {worst:.3e} (need <= 1e-9)"),
    )
}
