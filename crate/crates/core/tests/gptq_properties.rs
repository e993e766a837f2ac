mod common;

use common::gaussian_tensor;
use mxrot_core::gptq::{
    accumulate_hessian, gptq_quantize, quantize_weights, GptqParams, HessianAccumulator,
};
use mxrot_core::linalg::cholesky_lower;
use mxrot_core::{QuantConfig, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn hessian_of(x: &Tensor) -> HessianAccumulator {
    accumulate_hessian(HessianAccumulator::new(x.cols()), x).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hessian_is_symmetric_psd(rows in 1usize..24, cols in 1usize..24, seed in any::<u64>()) {
        let x = gaussian_tensor(rows, cols, 1.5, seed);
        let acc = hessian_of(&x);
        let h = DMatrix::from_row_slice(cols, cols, acc.hessian());
        prop_assert!((&h - h.transpose()).abs().max() == 0.0);
        let eig = h.symmetric_eigen();
        let top = eig.eigenvalues.max().max(1.0);
        prop_assert!(eig.eigenvalues.min() >= -1e-9 * top, "{}", eig.eigenvalues.min());
    }

    #[test]
    fn damped_hessian_factorizes(rows in 1usize..8, cols in 2usize..24, frac in 1e-4f64..0.1, seed in any::<u64>()) {
        // Fewer samples than columns: H is singular before damping.
        let x = gaussian_tensor(rows, cols, 1.0, seed);
        let acc = hessian_of(&x);
        let mut h = acc.hessian().to_vec();
        let mean = (0..cols).map(|i| h[i * cols + i]).sum::<f64>() / cols as f64;
        for i in 0..cols {
            if h[i * cols + i] == 0.0 {
                h[i * cols + i] = 1.0;
            }
            h[i * cols + i] += frac * mean;
        }
        prop_assert!(cholesky_lower(&mut h, cols).is_ok());
    }

    #[test]
    fn gptq_is_deterministic(seed in any::<u64>()) {
        let x = gaussian_tensor(64, 32, 1.0, seed);
        let w = gaussian_tensor(32, 8, 0.2, seed ^ 3);
        let acc = hessian_of(&x);
        let a = gptq_quantize(&w, &acc, &QuantConfig::MXFP4, &GptqParams::default()).unwrap();
        let b = gptq_quantize(&w, &acc, &QuantConfig::MXFP4, &GptqParams::default()).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn scaled_identity_hessian_reduces_to_round_to_nearest() {
    // X = c·I gives H = 2c²·I.
    for (_, cfg) in QuantConfig::PRESETS {
        let x = Tensor::from_fn(64, 64, |r, c| if r == c { 3.0 } else { 0.0 }).unwrap();
        let w = gaussian_tensor(64, 48, 0.3, 9);
        let q = gptq_quantize(&w, &hessian_of(&x), &cfg, &GptqParams::default()).unwrap();
        assert_eq!(q, quantize_weights(&w, &cfg).unwrap(), "{cfg}");
    }
}
