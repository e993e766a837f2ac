#![allow(dead_code)]

use mxrot_core::formats::ElementFormat;
use mxrot_core::rng::Stream;
use mxrot_core::{generate_synthetic, SyntheticSpec, Tensor};

/// Nearest signed code by exhaustive search over all 15 codes, measuring the
/// distance in the value domain. Ties go to the even magnitude index.
pub fn oracle_code(x: f32, scale: f32, element: ElementFormat) -> i8 {
    let mut best = 0i8;
    let mut best_d = f64::INFINITY;
    for c in -7i8..=7 {
        let v = element.code_value(c) as f64 * scale as f64;
        let d = (v - x as f64).abs();
        let better = d < best_d
            || (d == best_d && c.unsigned_abs() % 2 == 0 && best.unsigned_abs() % 2 == 1);
        if better {
            best = c;
            best_d = d;
        }
    }
    best
}

/// A heavy-tailed block: Gaussian values scaled per element by `exp(σ·N(0,1))`.
pub fn heavy_tailed_block(stream: &mut Stream, len: usize, sigma: f64) -> Vec<f32> {
    (0..len)
        .map(|_| {
            let g = stream.gaussian();
            let s = (sigma * stream.gaussian()).exp();
            (g * s) as f32
        })
        .collect()
}

pub fn gaussian_tensor(rows: usize, cols: usize, std: f32, seed: u64) -> Tensor {
    generate_synthetic(&SyntheticSpec {
        rows,
        cols,
        base_std: std,
        outlier_channel_fraction: 0.0,
        outlier_gain: 1.0,
        seed,
    })
    .unwrap()
}

/// Layer weights `W ~ N(0, 1/N)` (`N × N`) for the standard suite.
pub fn standard_weights(n: usize, seed: u64) -> Tensor {
    gaussian_tensor(
        n,
        n,
        (1.0 / n as f64).sqrt() as f32,
        seed.wrapping_add(0x5EED_0000),
    )
}

/// `‖a − b‖_F / ‖b‖_F` in binary64.
pub fn rel_frobenius(a: &Tensor, b: &Tensor) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        num += (x as f64 - y as f64).powi(2);
        den += (y as f64).powi(2);
    }
    (num / den).sqrt()
}
