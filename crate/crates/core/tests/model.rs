mod common;

use common::{permuted_sample, random_tree};
use ndarray::{arr1, arr2};
use proptest::prelude::*;
use relblend::model::{outer_product_head, ModelConfig, ModelParams, ModelSession, PairTarget};
use relblend::objectives::LossPositions;
use relblend::train::{pretrain_sample, Prepared, Record};

fn loss_pair(seed: u64, n: usize, config: &ModelConfig) -> (f64, f64) {
    let mol = random_tree(seed, n);
    let record = Record {
        id: "m".into(),
        molecule: mol.clone(),
    };
    let prep = Prepared::new(&record, config.max_spd);
    let sample = pretrain_sample::<f64>(&prep, config, seed, 1, 0, 0).unwrap();
    let perm = common::random_permutation(seed ^ 0xabc, n);
    let moved = permuted_sample(&sample, &mol, &perm, config.max_spd);
    let params = ModelParams::<f64>::init(config, seed).unwrap();
    let a = ModelSession::new(&params, config)
        .forward_pretrain(&sample)
        .unwrap()
        .0
        .total;
    let b = ModelSession::new(&params, config)
        .forward_pretrain(&moved)
        .unwrap()
        .0
        .total;
    (a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pretrain_loss_is_permutation_invariant(seed in any::<u64>(), n in 2usize..=9, hidden in any::<bool>(), width3 in any::<bool>()) {
        let config = ModelConfig {
            loss_positions: if hidden { LossPositions::Hidden } else { LossPositions::All },
            dist_head_dim: if width3 { 3 } else { 1 },
            ..ModelConfig::gradcheck()
        };
        let (a, b) = loss_pair(seed, n, &config);
        prop_assert!(a.is_finite());
        prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
    }
}

#[test]
fn outer_product_head_scalar_oracle() {
    let config = ModelConfig {
        hidden: 4,
        heads: 2,
        head_dim: 2,
        ..ModelConfig::gradcheck()
    };
    let mut p = ModelParams::<f64>::zeros(&config);
    p.head.left = arr2(&[[0.2, -0.5, 1.0, 0.3], [-0.7, 0.4, 0.1, 0.9]]);
    p.head.right = arr2(&[[0.6, 0.6, -0.2, -1.0], [0.1, -0.3, 0.8, 0.5]]);
    p.head.ln_gain = arr1(&[1.2, 0.7]);
    p.head.ln_bias = arr1(&[0.1, -0.3]);
    p.head.dist = arr2(&[[0.5, -1.0, 2.0, 0.25]]);
    let x = arr2(&[[0.3, -1.1, 0.8, 0.2], [1.4, 0.5, -0.6, -0.9]]);
    let z = outer_product_head(&x, PairTarget::Dist, &p);
    // Z[i,j] = W . vec(G(W_l x_i) (x) G(W_r x_j)), G = LayerNorm o GELU, computed independently
    let want = [
        0.8649885308925431,
        -0.20500093024455768,
        0.2058648354485348,
        -0.8741112483616514,
    ];
    for (k, w) in want.iter().enumerate() {
        assert!(
            (z[[k / 2, k % 2, 0]] - w).abs() < 1e-13,
            "{k}: {} vs {w}",
            z[[k / 2, k % 2, 0]]
        );
    }
}

#[test]
fn f32_and_f64_forward_agree() {
    let config = ModelConfig::gradcheck();
    let record = Record {
        id: "m".into(),
        molecule: random_tree(3, 6),
    };
    let prep = Prepared::new(&record, config.max_spd);
    let p64 = ModelParams::<f64>::init(&config, 1).unwrap();
    let p32: ModelParams<f32> = p64.cast(&config);
    let s64 = pretrain_sample::<f64>(&prep, &config, 1, 1, 0, 0).unwrap();
    let s32 = pretrain_sample::<f32>(&prep, &config, 1, 1, 0, 0).unwrap();
    let a = ModelSession::new(&p64, &config)
        .forward_pretrain(&s64)
        .unwrap()
        .0
        .total;
    let b = ModelSession::new(&p32, &config)
        .forward_pretrain(&s32)
        .unwrap()
        .0
        .total;
    assert!((a - b).abs() / a.abs() < 1e-4, "{a} vs {b}");
}
