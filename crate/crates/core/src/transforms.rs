//! Equivalent transformations of a linear layer `Y = X·W`.
//!
//! * Rotations: `X ← X·R`, `W ← Rᵀ·W` with `R` orthogonal. `R` is either one
//!   randomized Hadamard matrix over the full width (global) or a
//!   block-diagonal `diag(R_1, …, R_B)` of independent `g×g` randomized
//!   Hadamard blocks. Each block is `H_g·D_i / √g`, with `H_g` the Sylvester
//!   Hadamard matrix and `D_i` a seed-derived ±1 diagonal.
//! * SmoothQuant scaling: `X ← X·diag(s)⁻¹`, `W ← diag(s)·W`.
//!
//! Rotations are materialized as dense blocks and applied with plain
//! binary32 products.

use alloc::format;
use alloc::vec::Vec;

use crate::linalg::{gemm_f32, gemm_f64, MatMut, MatRef};
use crate::rng::{streams, Stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RotationScope {
    Global,
    BlockDiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RotationSpec {
    pub scope: RotationScope,
    /// Full width `N` for global rotations, block width `g` otherwise.
    pub dim: usize,
    pub seed: u64,
    /// Multiply each Hadamard block by a random ±1 diagonal.
    pub randomized: bool,
}

impl RotationSpec {
    pub fn global(width: usize, seed: u64) -> Self {
        Self {
            scope: RotationScope::Global,
            dim: width,
            seed,
            randomized: true,
        }
    }

    pub fn block(dim: usize, seed: u64) -> Self {
        Self {
            scope: RotationScope::BlockDiagonal,
            dim,
            seed,
            randomized: true,
        }
    }

    pub fn deterministic(self) -> Self {
        Self {
            randomized: false,
            ..self
        }
    }

    /// Checks the spec against a tensor width.
    pub fn validate(&self, width: usize) -> Result<()> {
        if !self.dim.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(self.dim));
        }
        match self.scope {
            RotationScope::Global if self.dim != width => Err(Error::ShapeMismatch(format!(
                "global rotation of dim {} applied to width {width}",
                self.dim
            ))),
            RotationScope::BlockDiagonal if width % self.dim != 0 => Err(Error::ShapeMismatch(
                format!("rotation block {} does not divide width {width}", self.dim),
            )),
            _ => Ok(()),
        }
    }
}

/// Order-`n` Sylvester Hadamard matrix (entries ±1), row-major.
pub fn hadamard(n: usize) -> Result<Vec<f64>> {
    if !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    let mut h = alloc::vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            // H[i][j] = (-1)^popcount(i & j)
            h[i * n + j] = if (i & j).count_ones() % 2 == 0 {
                1.0
            } else {
                -1.0
            };
        }
    }
    Ok(h)
}

/// A block-diagonal orthogonal matrix stored as its dense diagonal blocks.
/// A global rotation is the single-block case.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMatrix {
    spec: RotationSpec,
    dim: usize,
    blocks: Vec<Vec<f32>>,
}

/// Builds the rotation described by `spec` for tensors of width `width`.
pub fn build_rotation(spec: &RotationSpec, width: usize) -> Result<RotationMatrix> {
    spec.validate(width)?;
    let g = spec.dim;
    let h = hadamard(g)?;
    let norm = 1.0 / libm::sqrt(g as f64);
    let blocks = (0..width / g)
        .map(|i| {
            let mut signs = Stream::new(spec.seed, streams::ROTATION_SIGNS + i as u64);
            let d: Vec<f64> = (0..g)
                .map(|_| {
                    if spec.randomized {
                        signs.sign() as f64
                    } else {
                        1.0
                    }
                })
                .collect();
            let mut block = alloc::vec![0.0f32; g * g];
            for a in 0..g {
                for b in 0..g {
                    block[a * g + b] = (h[a * g + b] * d[b] * norm) as f32;
                }
            }
            block
        })
        .collect();
    Ok(RotationMatrix {
        spec: *spec,
        dim: g,
        blocks,
    })
}

impl RotationMatrix {
    /// Exact identity, laid out as `width / dim` identity blocks.
    pub fn identity(width: usize, dim: usize) -> Result<Self> {
        let spec = RotationSpec {
            scope: if dim == width {
                RotationScope::Global
            } else {
                RotationScope::BlockDiagonal
            },
            dim,
            seed: 0,
            randomized: false,
        };
        if dim == 0 || width % dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "block {dim} does not divide width {width}"
            )));
        }
        let eye = Tensor::identity(dim).into_data();
        Ok(Self {
            spec,
            dim,
            blocks: alloc::vec![eye; width / dim],
        })
    }

    /// Wraps explicit blocks (each `dim×dim`, row-major). Orthogonality is the
    /// caller's responsibility; see [`orthogonality_error`](Self::orthogonality_error).
    pub fn from_blocks(spec: RotationSpec, blocks: Vec<Vec<f32>>) -> Result<Self> {
        let dim = spec.dim;
        if blocks.is_empty() || blocks.iter().any(|b| b.len() != dim * dim) {
            return Err(Error::ShapeMismatch(format!(
                "rotation blocks must be non-empty {dim}x{dim} matrices"
            )));
        }
        if let Some(b) = blocks.iter().position(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "rotation block {b} has non-finite entries"
            )));
        }
        Ok(Self { spec, dim, blocks })
    }

    pub fn spec(&self) -> &RotationSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.dim * self.blocks.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, i: usize) -> &[f32] {
        &self.blocks[i]
    }

    pub fn blocks(&self) -> &[Vec<f32>] {
        &self.blocks
    }

    /// The full `width×width` matrix with zeros off the diagonal blocks.
    pub fn to_dense(&self) -> Tensor {
        let (n, g) = (self.width(), self.dim);
        let mut out = alloc::vec![0.0f32; n * n];
        for (bi, block) in self.blocks.iter().enumerate() {
            for a in 0..g {
                let dst = (bi * g + a) * n + bi * g;
                out[dst..dst + g].copy_from_slice(&block[a * g..(a + 1) * g]);
            }
        }
        Tensor::from_parts(n, n, out)
    }

    /// `max_i ‖R_iᵀR_i − I‖_max`, evaluated in binary64.
    pub fn orthogonality_error(&self) -> f64 {
        let g = self.dim;
        let mut worst = 0.0f64;
        let mut gram = alloc::vec![0.0f64; g * g];
        for block in &self.blocks {
            let r: Vec<f64> = block.iter().map(|&v| v as f64).collect();
            let a = MatRef::row_major(&r, g, g);
            gemm_f64(1.0, a.t(), a, 0.0, MatMut::row_major(&mut gram, g, g));
            for (i, v) in gram.iter().enumerate() {
                let target = if i / g == i % g { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }
}

fn check_width(width: usize, r: &RotationMatrix, what: &str) -> Result<()> {
    if width != r.width() {
        return Err(Error::ShapeMismatch(format!(
            "{what} dimension {width} does not match rotation width {}",
            r.width()
        )));
    }
    Ok(())
}

/// `X·R`, row by row. Row L2 norms are preserved.
pub fn rotate_activations(x: &Tensor, r: &RotationMatrix) -> Result<Tensor> {
    let (rows, n) = x.shape();
    check_width(n, r, "activation width")?;
    let g = r.dim;
    let mut out = alloc::vec![0.0f32; rows * n];
    for (bi, block) in r.blocks.iter().enumerate() {
        gemm_f32(
            1.0,
            MatRef::block(x.data(), n, 0, bi * g, rows, g),
            MatRef::row_major(block, g, g),
            0.0,
            MatMut::block(&mut out, n, 0, bi * g, rows, g),
        );
    }
    Ok(Tensor::from_parts(rows, n, out))
}

/// `Rᵀ·W` for a weight matrix whose rows are input features, so that
/// `(X·R)(Rᵀ·W) = X·W`.
pub fn rotate_weights(w: &Tensor, r: &RotationMatrix) -> Result<Tensor> {
    let (n, out_features) = w.shape();
    check_width(n, r, "weight input")?;
    let g = r.dim;
    let mut out = alloc::vec![0.0f32; n * out_features];
    for (bi, block) in r.blocks.iter().enumerate() {
        gemm_f32(
            1.0,
            MatRef::row_major(block, g, g).t(),
            MatRef::block(w.data(), out_features, bi * g, 0, g, out_features),
            0.0,
            MatMut::block(&mut out, out_features, bi * g, 0, g, out_features),
        );
    }
    Ok(Tensor::from_parts(n, out_features, out))
}

/// Dense multiply cost of applying the rotation to one token of width `n`:
/// `2N²` for a global rotation, `2N·g` for a block-diagonal one.
pub fn online_rotation_flops(n: u64, scope: RotationScope, g: u64) -> u64 {
    match scope {
        RotationScope::Global => 2 * n * n,
        RotationScope::BlockDiagonal => 2 * n * g,
    }
}

/// Per-channel SmoothQuant factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothSpec {
    pub alpha: f32,
    pub scales: Vec<f32>,
}

impl SmoothSpec {
    pub const DEFAULT_ALPHA: f32 = 0.85;
}

/// `s_j = max|X_:,j|^α / max|W_j,:|^(1−α)`; channels where either maximum
/// is zero get `s_j = 1`.
pub fn smooth_scales(x_calib: &Tensor, w: &Tensor, alpha: f32) -> Result<SmoothSpec> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in [0,1], got {alpha}"
        )));
    }
    let n = x_calib.cols();
    if w.rows() != n {
        return Err(Error::ShapeMismatch(format!(
            "activation width {n} vs weight input dimension {}",
            w.rows()
        )));
    }
    let mut x_max = alloc::vec![0.0f32; n];
    for r in 0..x_calib.rows() {
        for (m, v) in x_max.iter_mut().zip(x_calib.row(r)) {
            *m = m.max(v.abs());
        }
    }
    let scales = (0..n)
        .map(|j| {
            let w_max = w.row(j).iter().fold(0.0f32, |m, v| m.max(v.abs()));
            if x_max[j] == 0.0 || w_max == 0.0 {
                return 1.0;
            }
            let s = libm::pow(x_max[j] as f64, alpha as f64)
                / libm::pow(w_max as f64, 1.0 - alpha as f64);
            let s = s as f32;
            if s.is_finite() && s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    Ok(SmoothSpec { alpha, scales })
}

/// `X·diag(s)⁻¹`.
pub fn smooth_activations(x: &Tensor, s: &SmoothSpec) -> Result<Tensor> {
    let n = x.cols();
    if s.scales.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} smoothing scales for width {n}",
            s.scales.len()
        )));
    }
    let data = x
        .data()
        .chunks_exact(n)
        .flat_map(|row| row.iter().zip(&s.scales).map(|(v, s)| v / s))
        .collect();
    Tensor::new(x.rows(), n, data)
}

/// `diag(s)·W`.
pub fn smooth_weights(w: &Tensor, s: &SmoothSpec) -> Result<Tensor> {
    let (n, m) = w.shape();
    if s.scales.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} smoothing scales for {n} weight rows",
            s.scales.len()
        )));
    }
    let data = w
        .data()
        .chunks_exact(m)
        .zip(&s.scales)
        .flat_map(|(row, s)| row.iter().map(move |v| v * s))
        .collect();
    Tensor::new(n, m, data)
}
