mod common;

use common::gaussian_tensor;
use mxrot_core::analysis::{
    block_error_report, block_scale_distribution, classify_blocks, threshold_fractions, BlockLabel,
};
use mxrot_core::{QuantConfig, Tensor};
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..5, any::<u64>())
        .prop_map(|(rows, blocks, seed)| gaussian_tensor(rows, blocks * 32, 2.0, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exceedance_is_nonincreasing(t in tensor(), mut th in prop::collection::vec(0.0f64..8.0, 1..20)) {
        th.sort_by(f64::total_cmp);
        let curve = threshold_fractions(&t, &th).unwrap();
        for w in curve.fractions.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        for (&f, &x) in curve.fractions.iter().zip(&th) {
            let exact = t.data().iter().filter(|v| v.abs() as f64 > x).count() as f64 / t.len() as f64;
            prop_assert_eq!(f, exact);
        }
    }

    #[test]
    fn labels_follow_block_preserving_permutations(t in tensor(), shift in 0usize..32) {
        let a = classify_blocks(&t, 32, 0.01).unwrap();
        // Rotate elements within every block.
        let p = Tensor::from_fn(t.rows(), t.cols(), |r, c| {
            let base = c / 32 * 32;
            t.get(r, base + (c - base + shift) % 32)
        })
        .unwrap();
        let b = classify_blocks(&p, 32, 0.01).unwrap();
        prop_assert_eq!(a.labels, b.labels);
        prop_assert_eq!(a.threshold, b.threshold);
    }

    #[test]
    fn outlier_iff_above_threshold(t in tensor(), q in 0.0f64..0.2) {
        let c = classify_blocks(&t, 32, q).unwrap();
        for (i, label) in c.labels.iter().enumerate() {
            let (r, b) = (i / (t.cols() / 32), i % (t.cols() / 32));
            let any = t.row(r)[b * 32..(b + 1) * 32].iter().any(|v| v.abs() > c.threshold);
            prop_assert_eq!(*label == BlockLabel::Outlier, any);
        }
    }

    #[test]
    fn scale_distribution_ignores_signs(t in tensor(), flips in prop::collection::vec(any::<bool>(), 160)) {
        let f = Tensor::from_fn(t.rows(), t.cols(), |r, c| {
            let v = t.get(r, c);
            if flips[(r * t.cols() + c) % flips.len()] { -v } else { v }
        })
        .unwrap();
        prop_assert_eq!(block_scale_distribution(&t, 32).unwrap(), block_scale_distribution(&f, 32).unwrap());
    }

    #[test]
    fn reports_are_deterministic(t in tensor()) {
        let c = classify_blocks(&t, 32, 0.001).unwrap();
        let a = block_error_report(&t, &QuantConfig::MXFP4, &c, Some(&QuantConfig::BFP4)).unwrap();
        let b = block_error_report(&t, &QuantConfig::MXFP4, &c, Some(&QuantConfig::BFP4)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn one_spike_in_a_thousand_marks_one_block() {
    let mut v: Vec<f32> = (0..1024).map(|i| 0.5 + (i % 97) as f32 * 1e-3).collect();
    v[517] = 60.0;
    let t = Tensor::new(1, 1024, v).unwrap();
    let c = classify_blocks(&t, 32, 0.001).unwrap();
    assert_eq!(c.count(BlockLabel::Outlier), 1);
    assert_eq!(c.labels[517 / 32], BlockLabel::Outlier);
}
