//! Cayley gradient steps on (block-diagonal) rotations.
//!
//! The objective is the fake-quantization error of the rotated activations,
//! `‖Q(X·R) − X·R‖²_F / numel`. Each diagonal block `R_i` is updated with
//!
//! ```text
//! A   = G·R_iᵀ − R_i·Gᵀ                       (skew-symmetric)
//! R_i ← (I + η/2·A)⁻¹ (I − η/2·A) R_i
//! ```
//!
//! which stays on the orthogonal group up to solve error. `G` is the
//! Euclidean gradient of the loss with respect to `R_i`, with the quantizer
//! differentiated by one of two [`GradientEstimator`]s.

use alloc::format;
use alloc::vec::Vec;

use crate::formats::{scale_for_amax, QuantConfig};
use crate::linalg::{gemm_f32, solve, MatMut, MatRef};
use crate::tensor::Tensor;
use crate::transforms::{rotate_activations, RotationMatrix};
use crate::{Error, Result};

/// Step size used when none is given. The raw loss gradient is small
/// (order `1e-5` on unit-variance data), so steps well above `0.1` are safe.
pub const DEFAULT_STEP_SIZE: f64 = 1.0;

/// How the loss is differentiated through the quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientEstimator {
    /// Codes and block scales are held fixed: `∂Q/∂Z = 0`. This is the exact
    /// derivative of the loss wherever no rounding boundary is crossed, and
    /// pulls each rotated value toward its assigned grid point.
    #[default]
    FrozenCodes,
    /// `∂Q/∂Z = 1` inside the representable range and `0` where the element
    /// clipped. For this objective only clipped elements then carry gradient.
    StraightThrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CayleyState {
    pub rotation: RotationMatrix,
    pub step_size: f64,
    pub iteration: usize,
    /// Loss before each step (and, after [`optimize`], the final loss).
    pub loss_history: Vec<f64>,
    pub estimator: GradientEstimator,
}

impl CayleyState {
    pub fn new(rotation: RotationMatrix, step_size: f64) -> Self {
        Self {
            rotation,
            step_size,
            iteration: 0,
            loss_history: Vec::new(),
            estimator: GradientEstimator::default(),
        }
    }
}

/// Per-element fake-quantization of `z` (row-major `rows × cols`) returning
/// `Q(z) − z` and the clip mask.
fn quant_residual(z: &[f32], cols: usize, cfg: &QuantConfig) -> (Vec<f32>, Vec<bool>) {
    let mut resid = Vec::with_capacity(z.len());
    let mut clipped = Vec::with_capacity(z.len());
    let top = cfg.element.max_code_value() as f64;
    let mags = cfg.element.magnitudes();
    for row in z.chunks_exact(cols) {
        for block in row.chunks(cfg.block_size) {
            let amax = block.iter().fold(0.0f32, |a, v| a.max(v.abs()));
            let scale = scale_for_amax(amax, cfg);
            for &v in block {
                let scaled = v.abs() as f64 / scale as f64;
                let q = mags[cfg.element.encode_magnitude(scaled) as usize].copysign(v) * scale;
                resid.push(q - v);
                clipped.push(scaled > top);
            }
        }
    }
    (resid, clipped)
}

fn check_shapes(x: &Tensor, r: &RotationMatrix) -> Result<()> {
    if x.cols() != r.width() {
        return Err(Error::ShapeMismatch(format!(
            "activation width {} vs rotation width {}",
            x.cols(),
            r.width()
        )));
    }
    Ok(())
}

/// `‖Q(X·R) − X·R‖²_F / numel`.
pub fn quant_loss(x: &Tensor, r: &RotationMatrix, cfg: &QuantConfig) -> Result<f64> {
    check_shapes(x, r)?;
    cfg.validate()?;
    let z = rotate_activations(x, r)?;
    let (resid, _) = quant_residual(z.data(), z.cols(), cfg);
    Ok(resid.iter().map(|&e| (e as f64) * (e as f64)).sum::<f64>() / resid.len() as f64)
}

/// Loss and per-block Euclidean gradient (`dim × dim`, row-major, binary64).
pub fn loss_and_gradient(
    x: &Tensor,
    r: &RotationMatrix,
    cfg: &QuantConfig,
    estimator: GradientEstimator,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_shapes(x, r)?;
    cfg.validate()?;
    let (rows, n) = x.shape();
    let z = rotate_activations(x, r)?;
    let (resid, clipped) = quant_residual(z.data(), n, cfg);
    let numel = resid.len() as f64;
    let loss = resid.iter().map(|&e| (e as f64) * (e as f64)).sum::<f64>() / numel;

    // dL/dZ = 2(Q − Z)(∂Q/∂Z − 1) / numel
    let coeff = (-2.0 / numel) as f32;
    let dz: Vec<f32> = match estimator {
        GradientEstimator::FrozenCodes => resid.iter().map(|&e| coeff * e).collect(),
        GradientEstimator::StraightThrough => resid
            .iter()
            .zip(&clipped)
            .map(|(&e, &c)| if c { coeff * e } else { 0.0 })
            .collect(),
    };

    let g = r.dim();
    let grads = (0..r.num_blocks())
        .map(|bi| {
            let mut gb = alloc::vec![0.0f32; g * g];
            gemm_f32(
                1.0,
                MatRef::block(x.data(), n, 0, bi * g, rows, g).t(),
                MatRef::block(&dz, n, 0, bi * g, rows, g),
                0.0,
                MatMut::row_major(&mut gb, g, g),
            );
            gb.into_iter().map(f64::from).collect()
        })
        .collect();
    Ok((loss, grads))
}

/// One Cayley update of a single `g×g` block.
pub fn cayley_update(block: &[f32], grad: &[f64], g: usize, step_size: f64) -> Result<Vec<f32>> {
    let r: Vec<f64> = block.iter().map(|&v| v as f64).collect();
    // A = G Rᵀ − R Gᵀ
    let mut a = alloc::vec![0.0f64; g * g];
    for i in 0..g {
        for j in 0..g {
            let mut s = 0.0;
            for k in 0..g {
                s += grad[i * g + k] * r[j * g + k] - r[i * g + k] * grad[j * g + k];
            }
            a[i * g + j] = s;
        }
    }
    let half = 0.5 * step_size;
    let mut lhs = alloc::vec![0.0f64; g * g];
    let mut rhs_op = alloc::vec![0.0f64; g * g];
    for i in 0..g {
        for j in 0..g {
            let eye = if i == j { 1.0 } else { 0.0 };
            lhs[i * g + j] = eye + half * a[i * g + j];
            rhs_op[i * g + j] = eye - half * a[i * g + j];
        }
    }
    let mut rhs = alloc::vec![0.0f64; g * g];
    for i in 0..g {
        for k in 0..g {
            let f = rhs_op[i * g + k];
            if f != 0.0 {
                for j in 0..g {
                    rhs[i * g + j] += f * r[k * g + j];
                }
            }
        }
    }
    let next = solve(&lhs, &rhs, g, g).ok_or(Error::StepTooLarge)?;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::StepTooLarge);
    }
    Ok(next.into_iter().map(|v| v as f32).collect())
}

/// One Cayley step on every block of the state's rotation. The loss at the
/// pre-step rotation is appended to the history.
pub fn cayley_step(state: &CayleyState, x: &Tensor, cfg: &QuantConfig) -> Result<CayleyState> {
    if !(state.step_size > 0.0 && state.step_size.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {}",
            state.step_size
        )));
    }
    let (loss, grads) = loss_and_gradient(x, &state.rotation, cfg, state.estimator)?;
    let g = state.rotation.dim();
    let blocks = state
        .rotation
        .blocks()
        .iter()
        .zip(&grads)
        .map(|(block, grad)| {
            if grad.iter().all(|&v| v == 0.0) {
                Ok(block.clone())
            } else {
                cayley_update(block, grad, g, state.step_size)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss_history = state.loss_history.clone();
    loss_history.push(loss);
    Ok(CayleyState {
        rotation: RotationMatrix::from_blocks(*state.rotation.spec(), blocks)?,
        step_size: state.step_size,
        iteration: state.iteration + 1,
        loss_history,
        estimator: state.estimator,
    })
}

/// Runs `steps` Cayley steps from `init`; the history ends with the loss of
/// the final rotation, so it holds `steps + 1` entries.
pub fn optimize(
    x: &Tensor,
    init: RotationMatrix,
    cfg: &QuantConfig,
    steps: usize,
    step_size: f64,
    estimator: GradientEstimator,
) -> Result<CayleyState> {
    let mut state = CayleyState {
        estimator,
        ..CayleyState::new(init, step_size)
    };
    for _ in 0..steps {
        state = cayley_step(&state, x, cfg)?;
    }
    let last = quant_loss(x, &state.rotation, cfg)?;
    state.loss_history.push(last);
    Ok(state)
}
