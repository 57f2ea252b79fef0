//! Finite-difference oracle runs: elementwise pooling oracle plus the full
//! gradcheck suite on a couple of fixed seeds (the acceptance suite sweeps
//! five).

use sinet_core::gradcheck::{run_all, DEFAULT_TOL};
use sinet_core::rng::Rng;
use sinet_core::tape::Tape;
use sinet_core::tensor::Tensor;

/// Brute-force sum/(h*w) oracle for global average pooling.
#[test]
fn gap_matches_bruteforce_oracle() {
    let mut rng = Rng::new(21);
    let (n, c, h, w) = (2, 5, 3, 3);
    let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.uniform(-4.0, 4.0)).collect();

    let mut expect = vec![0.0; n * c];
    for i in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for q in 0..h * w {
                acc += data[(i * c + ch) * h * w + q];
            }
            expect[i * c + ch] = acc / (h * w) as f64;
        }
    }

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![n, c, h, w], data).unwrap());
    let y = tape.global_avg_pool(x).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gradcheck_suite_two_seeds() {
    for seed in [11, 1213] {
        for r in run_all(seed, DEFAULT_TOL) {
            assert!(
                r.pass,
                "seed {seed}: {} failed with {}",
                r.name, r.max_rel_err
            );
        }
    }
}

#[test]
fn gradcheck_covers_the_composed_paths() {
    let names: Vec<String> = run_all(1, DEFAULT_TOL)
        .into_iter()
        .map(|r| r.name)
        .collect();
    for required in [
        "conv2d_g1",
        "conv2d_g2",
        "conv2d_depthwise",
        "conv2d_stride2",
        "batchnorm_train",
        "composite_h",
        "si_unit",
        "dense_funnel",
        "attention_weight",
        "joint_decision",
        "plain_decision",
    ] {
        assert!(
            names.iter().any(|n| n == required),
            "missing check {required}"
        );
    }
}
