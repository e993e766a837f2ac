//! GPTQ: column-sequential weight quantization with second-order error
//! compensation.
//!
//! Weights follow the `Y = X·W` convention (`W` is `in × out`). Quantization
//! blocks run along the input (reduction) dimension, so the returned
//! [`QuantizedTensor`] is laid out as `Wᵀ` (`out × in`), the same layout
//! [`quantize_weights`] produces for round-to-nearest.

use alloc::format;
use alloc::vec::Vec;

use crate::formats::{quantize, quantize_value, scale_for_amax, QuantConfig, QuantizedTensor};
use crate::linalg::{cholesky_upper, gemm_f32, gemm_f64, spd_inverse, MatMut, MatRef};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Running `H = Σ 2·XᵀX` over calibration batches, in binary64.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianAccumulator {
    width: usize,
    h: Vec<f64>,
    n_samples: usize,
}

impl HessianAccumulator {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            h: alloc::vec![0.0; width * width],
            n_samples: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Row-major `width × width`.
    pub fn hessian(&self) -> &[f64] {
        &self.h
    }

    pub fn accumulate(&mut self, x: &Tensor) -> Result<()> {
        let (rows, n) = x.shape();
        if n != self.width {
            return Err(Error::ShapeMismatch(format!(
                "calibration width {n} vs Hessian width {}",
                self.width
            )));
        }
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let xs = MatRef::row_major(&x64, rows, n);
        gemm_f64(2.0, xs.t(), xs, 1.0, MatMut::row_major(&mut self.h, n, n));
        crate::linalg::symmetrize(&mut self.h, n);
        self.n_samples += rows;
        Ok(())
    }
}

/// Adds a calibration batch to `acc`.
pub fn accumulate_hessian(
    mut acc: HessianAccumulator,
    x_batch: &Tensor,
) -> Result<HessianAccumulator> {
    acc.accumulate(x_batch)?;
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GptqParams {
    /// `λ = damping_fraction · mean(diag H)` is added to the diagonal.
    pub damping_fraction: f64,
    /// Columns per lazy batch; rounded up to a multiple of the block size.
    pub lazy_block: usize,
    /// Process input dimensions by descending `diag H`. Block scales are then
    /// fixed up front from the uncompensated weights (static groups).
    pub act_order: bool,
}

impl Default for GptqParams {
    fn default() -> Self {
        Self {
            damping_fraction: 0.01,
            lazy_block: 128,
            act_order: false,
        }
    }
}

/// Round-to-nearest weight quantization in the same `Wᵀ` layout as GPTQ.
pub fn quantize_weights(w: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    quantize(&w.transpose(), cfg)
}

/// Dequantizes a `Wᵀ`-layout result back to an `in × out` weight matrix.
pub fn dequantize_weights(q: &QuantizedTensor) -> Tensor {
    q.dequantize().transpose()
}

/// Quantizes `w` (`in × out`) with GPTQ against the calibration Hessian.
///
/// A block's shared scale is computed when the sweep reaches the block's
/// first input dimension, from the already-compensated weights, and stays
/// fixed for the rest of the block.
pub fn gptq_quantize(
    w: &Tensor,
    acc: &HessianAccumulator,
    cfg: &QuantConfig,
    params: &GptqParams,
) -> Result<QuantizedTensor> {
    cfg.validate()?;
    let (n, m) = w.shape();
    if n != acc.width {
        return Err(Error::ShapeMismatch(format!(
            "weight input dimension {n} vs Hessian width {}",
            acc.width
        )));
    }
    if acc.n_samples == 0 {
        return Err(Error::InvalidArgument(
            "Hessian has no calibration samples".into(),
        ));
    }
    if !(params.damping_fraction > 0.0 && params.damping_fraction.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "damping fraction must be positive, got {}",
            params.damping_fraction
        )));
    }
    let bs = cfg.block_size;
    let per_row = n.div_ceil(bs);
    let lazy = params.lazy_block.max(1).div_ceil(bs) * bs;

    // Working copy of Wᵀ (out × in).
    let mut wt = w.transpose().into_data();
    let mut h = acc.h.clone();
    for i in 0..n {
        if h[i * n + i] == 0.0 {
            h[i * n + i] = 1.0;
            for r in 0..m {
                wt[r * n + i] = 0.0;
            }
        }
    }
    let mean_diag = (0..n).map(|i| h[i * n + i]).sum::<f64>() / n as f64;
    let damp = params.damping_fraction * mean_diag;
    for i in 0..n {
        h[i * n + i] += damp;
    }

    let mut scales = alloc::vec![0.0f32; m * per_row];
    let order: Vec<usize> = if params.act_order {
        for r in 0..m {
            for (b, chunk) in wt[r * n..(r + 1) * n].chunks(bs).enumerate() {
                let amax = chunk.iter().fold(0.0f32, |a, v| a.max(v.abs()));
                scales[r * per_row + b] = scale_for_amax(amax, cfg);
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| h[b * n + b].total_cmp(&h[a * n + a]));
        order
    } else {
        (0..n).collect()
    };
    if params.act_order {
        h = permute_symmetric(&h, n, &order);
        wt = permute_columns(&wt, m, n, &order);
    }

    let hinv = cholesky_upper(&spd_inverse(&h, n)?, n)?;
    let hinv32: Vec<f32> = hinv.iter().map(|&v| v as f32).collect();

    let mut codes = alloc::vec![0i8; m * n];
    let mut err = Vec::new();
    let mut i1 = 0;
    while i1 < n {
        let i2 = (i1 + lazy).min(n);
        let cnt = i2 - i1;
        err.clear();
        err.resize(m * cnt, 0.0f32);
        for i in 0..cnt {
            let col = i1 + i;
            let orig = order[col];
            if !params.act_order && col % bs == 0 {
                let end = (col + bs).min(n);
                for r in 0..m {
                    let amax = wt[r * n + col..r * n + end]
                        .iter()
                        .fold(0.0f32, |a, v| a.max(v.abs()));
                    scales[r * per_row + col / bs] = scale_for_amax(amax, cfg);
                }
            }
            let d = hinv32[col * n + col];
            let hrow = &hinv32[col * n + col + 1..col * n + i2];
            for r in 0..m {
                let row = &mut wt[r * n..(r + 1) * n];
                let x = row[col];
                let scale = scales[r * per_row + orig / bs];
                let code = quantize_value(x, scale, cfg.element);
                codes[r * n + orig] = code;
                let e = (x - cfg.element.code_value(code) * scale) / d;
                err[r * cnt + i] = e;
                for (wv, &hv) in row[col + 1..i2].iter_mut().zip(hrow) {
                    *wv -= e * hv;
                }
            }
        }
        if i2 < n {
            gemm_f32(
                -1.0,
                MatRef::row_major(&err, m, cnt),
                MatRef::block(&hinv32, n, i1, i2, cnt, n - i2),
                1.0,
                MatMut::block(&mut wt, n, 0, i2, m, n - i2),
            );
        }
        i1 = i2;
    }

    Ok(QuantizedTensor {
        config: *cfg,
        rows: m,
        cols: n,
        codes,
        scales,
    })
}

fn permute_symmetric(h: &[f64], n: usize, order: &[usize]) -> Vec<f64> {
    let mut out = alloc::vec![0.0; n * n];
    for (i, &oi) in order.iter().enumerate() {
        for (j, &oj) in order.iter().enumerate() {
            out[i * n + j] = h[oi * n + oj];
        }
    }
    out
}

fn permute_columns(w: &[f32], rows: usize, n: usize, order: &[usize]) -> Vec<f32> {
    let mut out = alloc::vec![0.0; rows * n];
    for r in 0..rows {
        for (j, &oj) in order.iter().enumerate() {
            out[r * n + j] = w[r * n + oj];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{fake_quantize, QuantConfig};
    use crate::tensor::{generate_synthetic, SyntheticSpec};

    fn gaussian(rows: usize, cols: usize, std: f32, seed: u64) -> Tensor {
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

    #[test]
    fn one_hot_row_hits_one_diagonal_entry() {
        let x = Tensor::from_fn(1, 5, |_, c| if c == 3 { 1.0 } else { 0.0 }).unwrap();
        let acc = accumulate_hessian(HessianAccumulator::new(5), &x).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let e = if (i, j) == (3, 3) { 2.0 } else { 0.0 };
                assert_eq!(acc.hessian()[i * 5 + j], e);
            }
        }
        assert_eq!(acc.n_samples(), 1);
    }

    #[test]
    fn batches_add_up() {
        let a = Tensor::from_fn(3, 4, |r, c| r as f32 - c as f32).unwrap();
        let b = Tensor::from_fn(2, 4, |r, c| (r * c) as f32 - 1.0).unwrap();
        let both = Tensor::new(5, 4, [a.data(), b.data()].concat()).unwrap();
        let split = accumulate_hessian(
            accumulate_hessian(HessianAccumulator::new(4), &a).unwrap(),
            &b,
        )
        .unwrap();
        let joint = accumulate_hessian(HessianAccumulator::new(4), &both).unwrap();
        assert_eq!(split, joint);
        assert!(HessianAccumulator::new(3).accumulate(&a).is_err());
    }

    #[test]
    fn grid_weights_are_a_fixed_point() {
        // Wᵀ rows hold MXFP4 grid values with block amax 6 (scale 1).
        let grid = [6.0f32, -1.5, 0.5, 3.0, -4.0, 0.0, 2.0, -6.0];
        let wt = Tensor::from_fn(8, 64, |r, c| {
            grid[(r * 3 + c * 5) % 8] * if c % 32 == 0 { 0.0 } else { 1.0 }
                + if c % 32 == 0 { 6.0 } else { 0.0 }
        })
        .unwrap();
        let w = wt.transpose();
        let x = gaussian(128, 64, 1.0, 3);
        let acc = accumulate_hessian(HessianAccumulator::new(64), &x).unwrap();
        let q = gptq_quantize(&w, &acc, &QuantConfig::MXFP4, &GptqParams::default()).unwrap();
        assert_eq!(dequantize_weights(&q), w);
    }

    #[test]
    fn identity_hessian_is_rtn() {
        let w = gaussian(64, 8, 0.3, 4);
        let acc = accumulate_hessian(HessianAccumulator::new(64), &Tensor::identity(64)).unwrap();
        for (_, cfg) in QuantConfig::PRESETS {
            let q = gptq_quantize(&w, &acc, &cfg, &GptqParams::default()).unwrap();
            let rtn = quantize_weights(&w, &cfg).unwrap();
            assert_eq!(q.codes, rtn.codes);
            assert_eq!(q.scales, rtn.scales);
        }
    }

    #[test]
    fn beats_rtn_on_layer_loss() {
        let x = gaussian(256, 64, 1.0, 10);
        let w = gaussian(64, 64, 0.125, 11);
        let acc = accumulate_hessian(HessianAccumulator::new(64), &x).unwrap();
        let y = x.matmul(&w).unwrap();
        for (_, cfg) in QuantConfig::PRESETS {
            let g =
                dequantize_weights(&gptq_quantize(&w, &acc, &cfg, &GptqParams::default()).unwrap());
            let r = fake_quantize(&w.transpose(), &cfg).unwrap().transpose();
            let lg = x.matmul(&g).unwrap().mse(&y).unwrap();
            let lr = x.matmul(&r).unwrap().mse(&y).unwrap();
            assert!(lg <= lr, "{cfg}: gptq {lg} rtn {lr}");
        }
    }

    #[test]
    fn act_order_runs_and_helps() {
        let x = generate_synthetic(&SyntheticSpec {
            rows: 256,
            cols: 64,
            base_std: 1.0,
            outlier_channel_fraction: 0.1,
            outlier_gain: 8.0,
            seed: 2,
        })
        .unwrap();
        let w = gaussian(64, 32, 0.125, 12);
        let acc = accumulate_hessian(HessianAccumulator::new(64), &x).unwrap();
        let params = GptqParams {
            act_order: true,
            ..GptqParams::default()
        };
        let q = gptq_quantize(&w, &acc, &QuantConfig::BINT4, &params).unwrap();
        let y = x.matmul(&w).unwrap();
        let lg = x.matmul(&dequantize_weights(&q)).unwrap().mse(&y).unwrap();
        let lr = x
            .matmul(&dequantize_weights(
                &quantize_weights(&w, &QuantConfig::BINT4).unwrap(),
            ))
            .unwrap()
            .mse(&y)
            .unwrap();
        assert!(lg < lr);
    }

    #[test]
    fn deterministic_codes() {
        let x = gaussian(64, 32, 1.0, 20);
        let w = gaussian(32, 16, 0.2, 21);
        let acc = accumulate_hessian(HessianAccumulator::new(32), &x).unwrap();
        let a = gptq_quantize(&w, &acc, &QuantConfig::MXFP4, &GptqParams::default()).unwrap();
        let b = gptq_quantize(&w, &acc, &QuantConfig::MXFP4, &GptqParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn argument_errors() {
        let w = gaussian(32, 4, 1.0, 1);
        let empty = HessianAccumulator::new(32);
        assert!(gptq_quantize(&w, &empty, &QuantConfig::MXFP4, &GptqParams::default()).is_err());
        let acc =
            accumulate_hessian(HessianAccumulator::new(16), &gaussian(8, 16, 1.0, 2)).unwrap();
        assert!(matches!(
            gptq_quantize(&w, &acc, &QuantConfig::MXFP4, &GptqParams::default()),
            Err(Error::ShapeMismatch(_))
        ));
        let acc =
            accumulate_hessian(HessianAccumulator::new(32), &gaussian(8, 32, 1.0, 2)).unwrap();
        let bad = GptqParams {
            damping_fraction: 0.0,
            ..GptqParams::default()
        };
        assert!(gptq_quantize(&w, &acc, &QuantConfig::MXFP4, &bad).is_err());
    }

    #[test]
    fn rank_deficient_hessian_is_damped() {
        // 8 samples for 32 dims: H is singular until damped.
        let x = gaussian(8, 32, 1.0, 5);
        let w = gaussian(32, 4, 0.3, 6);
        let acc = accumulate_hessian(HessianAccumulator::new(32), &x).unwrap();
        assert!(gptq_quantize(&w, &acc, &QuantConfig::MXFP4, &GptqParams::default()).is_ok());
    }
}
