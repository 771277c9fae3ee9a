use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfapprox::runtime::*;
use tfapprox::synthesis::*;
use tfapprox::Error;

type M = Vec<Vec<f64>>;

fn mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> M {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn mul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for r in 0..k {
                c[i][j] += a[i][r] * b[r][j];
            }
        }
    }
    c
}

fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// `V H σ((QH)ᵀ KH)ᵀ`, written as whole-matrix products.
fn attention_oracle(q: &M, k: &M, v: &M, h: &M) -> M {
    let scores = mul(&transpose(&mul(q, h)), &mul(k, h));
    let gated: M = scores.iter().map(|r| r.iter().map(|s| s.max(0.0)).collect()).collect();
    mul(&mul(v, h), &transpose(&gated))
}

fn ffn_oracle(layers: &[(M, Vec<f64>)], h: &M) -> M {
    let mut z = h.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        z = mul(w, &z);
        for (r, bias) in z.iter_mut().zip(b) {
            for x in r.iter_mut() {
                *x += bias;
                if i + 1 < layers.len() {
                    *x = x.max(0.0);
                }
            }
        }
    }
    z
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn max_diff(a: &M, b: &EmbeddingMatrix) -> f64 {
    let mut m = 0.0f64;
    for (r, row) in a.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            m = m.max((v - b.get(r, t)).abs());
        }
    }
    m
}

fn random_head(d: usize, rng: &mut ChaCha8Rng) -> (AttentionHead, [M; 3]) {
    let (q, k, v) = (mat(d, d, rng), mat(d, d, rng), mat(d, d, rng));
    let head = AttentionHead::new(
        Matrix::from_rows(&q).unwrap(),
        Matrix::from_rows(&k).unwrap(),
        Matrix::from_rows(&v).unwrap(),
    )
    .unwrap();
    (head, [q, k, v])
}

#[test]
fn attention_matches_matrix_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (d, l) = (rng.gen_range(1..6), rng.gen_range(1..9));
        let h = mat(d, l, &mut rng);
        let (head, [q, k, v]) = random_head(d, &mut rng);
        let out = attention_forward(&head, &EmbeddingMatrix::from_rows(&h).unwrap()).unwrap();
        assert!(max_diff(&attention_oracle(&q, &k, &v, &h), &out) < 1e-12);
    }
}

#[test]
fn block_matches_matrix_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let (d, l) = (rng.gen_range(1..6), rng.gen_range(1..7));
        let h = mat(d, l, &mut rng);
        let heads: Vec<_> = (0..rng.gen_range(0..4)).map(|_| random_head(d, &mut rng)).collect();
        let width = rng.gen_range(1..8);
        let layers = vec![
            (mat(width, d, &mut rng), mat(1, width, &mut rng).remove(0)),
            (mat(d, width, &mut rng), mat(1, d, &mut rng).remove(0)),
        ];
        let ffn = FeedForward::from_parts(
            layers.iter().map(|(w, b)| (Matrix::from_rows(w).unwrap(), b.clone())).collect(),
        )
        .unwrap();
        let block = TransformerBlock::new(heads.iter().map(|(h, _)| h.clone()).collect(), ffn);
        let out = block_forward(&block, &EmbeddingMatrix::from_rows(&h).unwrap()).unwrap();

        let mut y = h.clone();
        for (_, [q, k, v]) in &heads {
            y = add(&y, &attention_oracle(q, k, v, &h));
        }
        let expect = add(&y, &ffn_oracle(&layers, &y));
        assert!(max_diff(&expect, &out) < 1e-11);
    }
}

#[test]
fn empty_block_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = EmbeddingMatrix::from_rows(&mat(5, 6, &mut rng)).unwrap();
    assert_eq!(block_forward(&TransformerBlock::identity(), &h).unwrap(), h);
    assert_eq!(mha_forward(&[], &h).unwrap(), EmbeddingMatrix::zeros(5, 6));
}

#[test]
fn dimension_errors() {
    let h = EmbeddingMatrix::zeros(5, 3);
    let head = AttentionHead::zeros(4);
    assert!(matches!(attention_forward(&head, &h), Err(Error::Dimension(_))));
    assert!(Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    assert!(FeedForward::from_parts(vec![(Matrix::zeros(3, 5), vec![0.0; 2])]).is_err());
}

fn small_net(d: usize, n: usize, name: &str) -> (TransformerNet, GridApprox) {
    let b = Budget::default();
    let t = HolderTarget::registry(name, d).unwrap();
    let g = build_grid(&t, d, n, &b).unwrap();
    (synthesize_cube_approximator(&g, t.sup_bound, &b).unwrap(), g)
}

#[test]
fn shortcut_equals_dense_path_bitwise() {
    for (d, n) in [(1, 5), (2, 3), (3, 3)] {
        let (net, _) = small_net(d, n, "sines");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let x: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
            assert_eq!(net.forward(&x).unwrap().to_bits(), net.forward_dense(&x).unwrap().to_bits());
            let fast = net.embedding_after(&x, net.depth()).unwrap();
            assert_eq!(fast, net.final_embedding(&x).unwrap());
        }
    }
}

#[test]
fn forward_many_keeps_order() {
    let (net, _) = small_net(2, 3, "bump");
    let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 19.0, 1.0 - i as f64 / 19.0]).collect();
    let many = net.forward_many(&xs).unwrap();
    for (x, y) in xs.iter().zip(&many) {
        assert_eq!(net.forward(x).unwrap(), *y);
    }
}

#[test]
fn input_errors() {
    let (net, _) = small_net(2, 3, "linear");
    assert!(matches!(net.forward(&[0.5]), Err(Error::Dimension(_))));
    assert!(matches!(net.forward(&[0.5, f64::NAN]), Err(Error::Input(_))));
}

#[test]
fn overflow_is_reported_with_block() {
    let big = Matrix::from_rows(&vec![vec![1e200; 2]; 2]).unwrap();
    let head = AttentionHead::new(big.clone(), big.clone(), big).unwrap();
    let block = TransformerBlock::new(vec![head], FeedForward::empty());
    let pos = EmbeddingMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
    let net = TransformerNet::new(Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(), pos, vec![block], 1.0).unwrap();
    let r = net.forward(&[1.0]);
    assert!(matches!(r, Err(Error::Overflow { block: 0 })), "{r:?}");
}

#[test]
fn json_round_trip_is_exact() {
    let (net, _) = small_net(2, 3, "radial");
    let text = net.to_json().unwrap();
    let back = TransformerNet::from_json(&text).unwrap();
    for (a, b) in back.blocks.iter().zip(&net.blocks) {
        assert_eq!((&a.heads, &a.ffn), (&b.heads, &b.ffn));
    }
    assert_eq!(back.to_json().unwrap(), text);
    let x = [0.3, 0.8];
    assert_eq!(back.forward(&x).unwrap(), net.forward(&x).unwrap());
    assert!(text.contains("\"provenance\""));
}

#[test]
fn model_size_counts_weights() {
    let (net, _) = small_net(1, 3, "linear");
    let s = net.model_size();
    let m = net.max_heads() as u64;
    let lff = net.max_ffn_depth() as u64;
    assert_eq!(s.formula, net.depth() as u64 * 25 * (3 * m + lff));
    let heads = net.head_count() as u64 * 3 * 25;
    let ffn: u64 = net.blocks.iter().map(|b| b.ffn.param_count() as u64).sum();
    assert_eq!(s.learnable, heads + ffn);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_is_linear_in_v(seed in any::<u64>(), c in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = EmbeddingMatrix::from_rows(&mat(3, 4, &mut rng)).unwrap();
        let (head, _) = random_head(3, &mut rng);
        let scaled = AttentionHead::new(head.q.clone(), head.k.clone(), head.v.scaled(c)).unwrap();
        let a = attention_forward(&head, &h).unwrap();
        let b = attention_forward(&scaled, &h).unwrap();
        for r in 0..3 {
            for t in 0..4 {
                prop_assert!((b.get(r, t) - c * a.get(r, t)).abs() < 1e-12 * (1.0 + a.get(r, t).abs()));
            }
        }
    }

    #[test]
    fn shortcut_matches_dense_on_random_inputs(x in proptest::collection::vec(0.0f64..=1.0, 2)) {
        let (net, _) = small_net(2, 3, "sines");
        prop_assert_eq!(net.forward(&x).unwrap().to_bits(), net.forward_dense(&x).unwrap().to_bits());
    }
}
