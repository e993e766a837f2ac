//! Fake-quantized linear-layer experiments.
//!
//! A method is a chain of equivalent transformations followed by activation
//! and weight quantization:
//!
//! ```text
//! smoothing fold → rotation fusion (X·R, Rᵀ·W) → quantize X → quantize W (RTN | GPTQ)
//! ```
//!
//! The output `dequant(X_q)·dequant(W_q)` is compared against `X·W` computed
//! once on the untransformed inputs.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::formats::{fake_quantize, qsnr, ElementFormat, QuantConfig, ScaleFormat};
use crate::gptq::{
    accumulate_hessian, dequantize_weights, gptq_quantize, GptqParams, HessianAccumulator,
};
use crate::rotopt::{optimize, GradientEstimator};
use crate::tensor::Tensor;
use crate::transforms::{
    build_rotation, online_rotation_flops, rotate_activations, rotate_weights, smooth_activations,
    smooth_scales, smooth_weights, RotationScope, RotationSpec, SmoothSpec,
};
use crate::{Error, Result};

/// How one operand of the layer is quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantScheme {
    /// No quantization (16-bit passthrough).
    None,
    /// A block format along the reduction axis.
    Block(QuantConfig),
    /// Symmetric INT4 with one scale per row (per token for activations, per
    /// output channel for weights), `scale = amax / 7` held in binary16.
    PerRowInt4,
}

impl QuantScheme {
    /// The block config this scheme uses on rows of width `width`.
    pub fn config_for_width(&self, width: usize) -> Option<QuantConfig> {
        match self {
            QuantScheme::None => None,
            QuantScheme::Block(cfg) => Some(*cfg),
            QuantScheme::PerRowInt4 => Some(QuantConfig::new(
                ElementFormat::Int4,
                ScaleFormat::Fp16,
                width,
            )),
        }
    }

    /// Fake-quantizes `t` along its rows.
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        match self.config_for_width(t.cols()) {
            None => Ok(t.clone()),
            Some(cfg) => fake_quantize(t, &cfg),
        }
    }

    pub fn name(&self) -> String {
        match self {
            QuantScheme::None => "none".into(),
            QuantScheme::Block(cfg) => cfg.to_string(),
            QuantScheme::PerRowInt4 => "int4".into(),
        }
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for QuantScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(QuantScheme::None),
            "int4" => Ok(QuantScheme::PerRowInt4),
            other => other
                .parse::<QuantConfig>()
                .map(QuantScheme::Block)
                .map_err(|_| {
                    Error::InvalidArgument(format!(
                    "unknown format '{s}'; valid formats: mxfp4, mxint4, bfp4, bint4, int4, none"
                ))
                }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Compensator {
    Rtn,
    Gptq(GptqParams),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RotationChoice {
    /// Randomized Hadamard over the full width.
    Global { seed: u64 },
    /// Block-diagonal randomized Hadamard with `dim`-wide blocks.
    Block { dim: usize, seed: u64 },
    /// Block rotation initialized randomly, then refined with Cayley steps
    /// on the activation quantization loss.
    OptimizedBlock {
        dim: usize,
        seed: u64,
        steps: usize,
        step_size: f64,
    },
}

impl RotationChoice {
    fn scope_and_dim(&self, width: usize) -> (RotationScope, usize) {
        match *self {
            RotationChoice::Global { .. } => (RotationScope::Global, width),
            RotationChoice::Block { dim, .. } | RotationChoice::OptimizedBlock { dim, .. } => {
                (RotationScope::BlockDiagonal, dim)
            }
        }
    }
}

/// Named method presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Rtn,
    SmoothQuant,
    Gptq,
    QuaRot,
    QuaRotPlus,
    Brq,
    BrqSpin,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Rtn,
        Method::SmoothQuant,
        Method::Gptq,
        Method::QuaRot,
        Method::QuaRotPlus,
        Method::Brq,
        Method::BrqSpin,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Rtn => "rtn",
            Method::SmoothQuant => "smoothquant",
            Method::Gptq => "gptq",
            Method::QuaRot => "quarot",
            Method::QuaRotPlus => "quarot+",
            Method::Brq => "brq",
            Method::BrqSpin => "brq_spin",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let key = match lower.as_str() {
            "quarot_plus" | "quarotplus" => "quarot+",
            "brqspin" | "brq-spin" => "brq_spin",
            other => other,
        };
        Method::ALL.iter().find(|m| m.name() == key).copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown method '{s}'; valid methods: rtn, smoothquant, gptq, quarot, quarot+, brq, brq_spin"
            ))
        })
    }
}

/// Defaults of the desk-scale Cayley refinement used by BRQ_Spin.
pub const SPIN_STEPS: usize = 50;
pub const SPIN_STEP_SIZE: f64 = crate::rotopt::DEFAULT_STEP_SIZE;
pub const BRQ_BLOCK_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub name: String,
    pub rotation: Option<RotationChoice>,
    /// SmoothQuant migration strength α; scales are fitted on the layer input.
    pub smoothing: Option<f32>,
    pub compensator: Compensator,
    pub act: QuantScheme,
    pub weight: QuantScheme,
}

impl MethodSpec {
    pub fn preset(method: Method, act: QuantScheme, weight: QuantScheme, seed: u64) -> Self {
        let gptq = Compensator::Gptq(GptqParams::default());
        let (rotation, smoothing, compensator) = match method {
            Method::Rtn => (None, None, Compensator::Rtn),
            Method::SmoothQuant => (None, Some(SmoothSpec::DEFAULT_ALPHA), Compensator::Rtn),
            Method::Gptq => (None, None, gptq),
            Method::QuaRot => (
                Some(RotationChoice::Global { seed }),
                None,
                Compensator::Rtn,
            ),
            Method::QuaRotPlus => (Some(RotationChoice::Global { seed }), None, gptq),
            Method::Brq => (
                Some(RotationChoice::Block {
                    dim: BRQ_BLOCK_DIM,
                    seed,
                }),
                None,
                gptq,
            ),
            Method::BrqSpin => (
                Some(RotationChoice::OptimizedBlock {
                    dim: BRQ_BLOCK_DIM,
                    seed,
                    steps: SPIN_STEPS,
                    step_size: SPIN_STEP_SIZE,
                }),
                None,
                gptq,
            ),
        };
        Self {
            name: method.name().into(),
            rotation,
            smoothing,
            compensator,
            act,
            weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopCounts {
    /// Online activation rotation over all tokens.
    pub rotation: u64,
    /// The layer product itself.
    pub matmul: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    pub method: String,
    pub act_format: String,
    pub weight_format: String,
    /// Output MSE against the unquantized, untransformed `X·W` (binary64).
    pub mse: f64,
    pub qsnr_db: f64,
    pub flops: FlopCounts,
}

/// Runs one method on the layer `Y = X·W` (`X`: tokens × in, `W`: in × out).
pub fn run_layer(x: &Tensor, w: &Tensor, method: &MethodSpec) -> Result<LayerResult> {
    let reference = x.matmul(w)?;
    run_layer_with_reference(x, w, method, &reference)
}

fn run_layer_with_reference(
    x: &Tensor,
    w: &Tensor,
    method: &MethodSpec,
    reference: &Tensor,
) -> Result<LayerResult> {
    let (tokens, width) = x.shape();
    if w.rows() != width {
        return Err(Error::ShapeMismatch(format!(
            "activation width {width} vs weight rows {}",
            w.rows()
        )));
    }
    let mut xs = x.clone();
    let mut ws = w.clone();

    if let Some(alpha) = method.smoothing {
        let s = smooth_scales(&xs, &ws, alpha)?;
        xs = smooth_activations(&xs, &s)?;
        ws = smooth_weights(&ws, &s)?;
    }

    let mut rotation_flops = 0;
    if let Some(choice) = method.rotation {
        let (scope, dim) = choice.scope_and_dim(width);
        let spec = match choice {
            RotationChoice::Global { seed } => RotationSpec::global(width, seed),
            RotationChoice::Block { dim, seed }
            | RotationChoice::OptimizedBlock { dim, seed, .. } => RotationSpec::block(dim, seed),
        };
        spec.validate(width)
            .map_err(|e| Error::InvalidSpec(format!("method {}: {e}", method.name)))?;
        let mut r = build_rotation(&spec, width)?;
        if let RotationChoice::OptimizedBlock {
            steps, step_size, ..
        } = choice
        {
            if let Some(cfg) = method.act.config_for_width(width) {
                r = optimize(
                    &xs,
                    r,
                    &cfg,
                    steps,
                    step_size,
                    GradientEstimator::FrozenCodes,
                )?
                .rotation;
            }
        }
        xs = rotate_activations(&xs, &r)?;
        ws = rotate_weights(&ws, &r)?;
        rotation_flops = tokens as u64 * online_rotation_flops(width as u64, scope, dim as u64);
    }

    let xq = method.act.apply(&xs)?;
    let wq = match (method.compensator, method.weight.config_for_width(width)) {
        (_, None) => ws,
        (Compensator::Rtn, Some(cfg)) => fake_quantize(&ws.transpose(), &cfg)?.transpose(),
        (Compensator::Gptq(params), Some(cfg)) => {
            let acc = accumulate_hessian(HessianAccumulator::new(width), &xs)?;
            dequantize_weights(&gptq_quantize(&ws, &acc, &cfg, &params)?)
        }
    };

    let y = xq.matmul(&wq)?;
    Ok(LayerResult {
        method: method.name.clone(),
        act_format: method.act.name(),
        weight_format: method.weight.name(),
        mse: y.mse(reference)?,
        qsnr_db: qsnr(reference, &y)?,
        flops: FlopCounts {
            rotation: rotation_flops,
            matmul: 2 * (tokens * width * w.cols()) as u64,
        },
    })
}

/// Every (method, format) cell, with the format used for both activations
/// and weights. Results are ordered method-major.
pub fn run_matrix(
    x: &Tensor,
    w: &Tensor,
    methods: &[Method],
    formats: &[QuantScheme],
    seed: u64,
) -> Result<Vec<LayerResult>> {
    if methods.is_empty() || formats.is_empty() {
        return Ok(Vec::new());
    }
    let reference = x.matmul(w)?;
    let mut out = Vec::with_capacity(methods.len() * formats.len());
    for &m in methods {
        for &f in formats {
            let spec = MethodSpec::preset(m, f, f, seed);
            out.push(run_layer_with_reference(x, w, &spec, &reference)?);
        }
    }
    Ok(out)
}

/// The (method, format) cells of [`run_matrix`] in order, for callers that
/// evaluate cells independently.
pub fn matrix_cells(methods: &[Method], formats: &[QuantScheme], seed: u64) -> Vec<MethodSpec> {
    methods
        .iter()
        .flat_map(|&m| {
            formats
                .iter()
                .map(move |&f| MethodSpec::preset(m, f, f, seed))
        })
        .collect()
}

/// [`run_layer`] against a precomputed reference `X·W`.
pub fn run_layer_against(
    x: &Tensor,
    w: &Tensor,
    method: &MethodSpec,
    reference: &Tensor,
) -> Result<LayerResult> {
    if reference.shape() != (x.rows(), w.cols()) {
        return Err(Error::ShapeMismatch("reference output shape".into()));
    }
    run_layer_with_reference(x, w, method, reference)
}
