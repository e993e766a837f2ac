//! 4-bit element codecs with shared block scales.
//!
//! Four block formats are covered, all with 32-element blocks laid along the
//! column (reduction) axis of each row:
//!
//! | preset | elements      | scale                         |
//! |--------|---------------|-------------------------------|
//! | MXFP4  | FP4 E2M1      | E8M0 power of two (OCP MX)    |
//! | MXINT4 | INT4 in ±7    | E8M0 power of two             |
//! | BFP4   | FP4 E2M1      | binary16                      |
//! | BINT4  | INT4 in ±7    | binary16                      |
//!
//! Power-of-two scales follow the OCP rule `2^(⌊log2 amax⌋ − emax)` with
//! `emax = 2` for both element types. The top of the element range can
//! therefore clip (amax in `[6, 8)·scale` saturates to `6·scale` for E2M1);
//! that clipping is part of the format and is kept. binary16 scales are
//! `amax / max_code` rounded to nearest even. Element rounding is nearest,
//! ties to the even code.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use half::f16;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Magnitudes of the eight non-negative E2M1 codes, indexed by `EEM` bits.
const E2M1_MAGNITUDES: [f32; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];
const INT4_MAGNITUDES: [f32; 8] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
/// Rounding boundaries between consecutive magnitudes (exact in binary64).
const E2M1_MIDPOINTS: [f64; 7] = [0.25, 0.75, 1.25, 1.75, 2.5, 3.5, 5.0];
const INT4_MIDPOINTS: [f64; 7] = [0.5, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5];

/// Smallest and largest E8M0 exponents produced (the NaN code is never used).
pub const E8M0_MIN_EXP: i32 = -127;
pub const E8M0_MAX_EXP: i32 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementFormat {
    /// 1 sign, 2 exponent (bias 1), 1 mantissa bit.
    Fp4E2M1,
    /// Symmetric integers in `[-7, 7]`.
    Int4,
}

impl ElementFormat {
    pub const fn max_code_value(self) -> f32 {
        match self {
            ElementFormat::Fp4E2M1 => 6.0,
            ElementFormat::Int4 => 7.0,
        }
    }

    /// `⌊log2 max_code⌋`, the exponent offset in the power-of-two scale rule.
    pub const fn emax(self) -> i32 {
        2
    }

    /// Non-negative representable magnitudes, ascending, indexed by
    /// magnitude code.
    pub fn magnitudes(self) -> &'static [f32; 8] {
        match self {
            ElementFormat::Fp4E2M1 => &E2M1_MAGNITUDES,
            ElementFormat::Int4 => &INT4_MAGNITUDES,
        }
    }

    /// Value of a signed code (sign × magnitude index, in `-7..=7`).
    #[inline]
    pub fn code_value(self, code: i8) -> f32 {
        let m = self.magnitudes()[code.unsigned_abs() as usize];
        if code < 0 {
            -m
        } else {
            m
        }
    }

    /// Storage nibble: `S EE M` for E2M1, two's complement for INT4.
    pub fn nibble(self, code: i8) -> u8 {
        match self {
            ElementFormat::Fp4E2M1 => {
                let sign = if code < 0 { 0b1000 } else { 0 };
                sign | code.unsigned_abs()
            }
            ElementFormat::Int4 => (code as u8) & 0x0f,
        }
    }

    /// Inverse of [`nibble`](Self::nibble). Returns `None` for the INT4 `-8`
    /// pattern, which the symmetric range never uses.
    pub fn code_from_nibble(self, nibble: u8) -> Option<i8> {
        let nibble = nibble & 0x0f;
        match self {
            ElementFormat::Fp4E2M1 => {
                let mag = (nibble & 0b0111) as i8;
                Some(if nibble & 0b1000 != 0 { -mag } else { mag })
            }
            ElementFormat::Int4 => {
                let v = ((nibble << 4) as i8) >> 4;
                (v != -8).then_some(v)
            }
        }
    }

    /// Nearest magnitude code for a non-negative scaled magnitude, ties to
    /// the even code, saturating at the top code.
    #[inline]
    pub fn encode_magnitude(self, scaled: f64) -> u8 {
        let mids = match self {
            ElementFormat::Fp4E2M1 => &E2M1_MIDPOINTS,
            ElementFormat::Int4 => &INT4_MIDPOINTS,
        };
        let i = mids.iter().map(|&m| (scaled > m) as usize).sum::<usize>();
        if i < 7 && scaled == mids[i] && i % 2 == 1 {
            (i + 1) as u8
        } else {
            i as u8
        }
    }
}

/// Decodes an E2M1 nibble from its bit fields: exponent bias 1, one
/// subnormal step at exponent field 0.
pub fn e2m1_decode(nibble: u8) -> f32 {
    let sign = if nibble & 0b1000 != 0 { -1.0 } else { 1.0 };
    let exp = ((nibble >> 1) & 0b11) as i32;
    let mantissa = (nibble & 1) as f32;
    let magnitude = if exp == 0 {
        0.5 * mantissa
    } else {
        libm::ldexpf(1.0 + 0.5 * mantissa, exp - 1)
    };
    sign * magnitude
}

/// All sixteen E2M1 values in code order (`0b0000..=0b1111`).
pub fn e2m1_values() -> [f32; 16] {
    let mut out = [0.0f32; 16];
    for (nibble, v) in out.iter_mut().enumerate() {
        // −0 collapses to 0.
        *v = e2m1_decode(nibble as u8) + 0.0;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScaleFormat {
    /// Exponent-only power of two, `2^e` with `e ∈ [-127, 127]`.
    PotE8M0,
    /// Positive finite IEEE binary16.
    Fp16,
}

impl ScaleFormat {
    /// Biased E8M0 code of a power-of-two scale; `None` if `scale` is not an
    /// exact power of two in range.
    pub fn e8m0_code(scale: f32) -> Option<u8> {
        if !(scale > 0.0) || !scale.is_finite() {
            return None;
        }
        let e = libm::ilogbf(scale);
        (libm::ldexpf(1.0, e) == scale && (E8M0_MIN_EXP..=E8M0_MAX_EXP).contains(&e))
            .then(|| (e + 127) as u8)
    }
}

/// Element format × scale format × block size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantConfig {
    pub element: ElementFormat,
    pub scale: ScaleFormat,
    pub block_size: usize,
}

impl QuantConfig {
    pub const MXFP4: QuantConfig =
        QuantConfig::new(ElementFormat::Fp4E2M1, ScaleFormat::PotE8M0, 32);
    pub const MXINT4: QuantConfig = QuantConfig::new(ElementFormat::Int4, ScaleFormat::PotE8M0, 32);
    pub const BFP4: QuantConfig = QuantConfig::new(ElementFormat::Fp4E2M1, ScaleFormat::Fp16, 32);
    pub const BINT4: QuantConfig = QuantConfig::new(ElementFormat::Int4, ScaleFormat::Fp16, 32);

    pub const PRESETS: [(&'static str, QuantConfig); 4] = [
        ("mxfp4", Self::MXFP4),
        ("mxint4", Self::MXINT4),
        ("bfp4", Self::BFP4),
        ("bint4", Self::BINT4),
    ];

    pub const fn new(element: ElementFormat, scale: ScaleFormat, block_size: usize) -> Self {
        Self {
            element,
            scale,
            block_size,
        }
    }

    pub const fn with_block_size(self, block_size: usize) -> Self {
        Self { block_size, ..self }
    }

    /// Preset name when this is one of the four presets at block size 32.
    pub fn preset_name(&self) -> Option<&'static str> {
        Self::PRESETS
            .iter()
            .find(|(_, c)| c == self)
            .map(|(n, _)| *n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::InvalidSpec("block_size must be positive".into()));
        }
        Ok(())
    }
}

impl fmt::Display for QuantConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.preset_name() {
            Some(name) => f.write_str(name),
            None => write!(f, "{:?}/{:?}/{}", self.element, self.scale, self.block_size),
        }
    }
}

impl FromStr for QuantConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Self::PRESETS
            .iter()
            .find(|(n, _)| *n == lower)
            .map(|(_, c)| *c)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown format '{s}'; valid presets: mxfp4, mxint4, bfp4, bint4"
                ))
            })
    }
}

fn amax_of(block: &[f32]) -> Result<f32> {
    let mut amax = 0.0f32;
    for (i, v) in block.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        amax = amax.max(v.abs());
    }
    Ok(amax)
}

/// Scale for a block whose largest magnitude is `amax` (finite, ≥ 0).
pub fn scale_for_amax(amax: f32, cfg: &QuantConfig) -> f32 {
    match cfg.scale {
        ScaleFormat::PotE8M0 => {
            if amax == 0.0 {
                return libm::ldexpf(1.0, E8M0_MIN_EXP);
            }
            let e = (libm::ilogbf(amax) - cfg.element.emax()).clamp(E8M0_MIN_EXP, E8M0_MAX_EXP);
            libm::ldexpf(1.0, e)
        }
        ScaleFormat::Fp16 => {
            let s = f16::from_f64(amax as f64 / cfg.element.max_code_value() as f64);
            if amax == 0.0 || s == f16::ZERO {
                f16::from_bits(1).to_f32()
            } else if s.is_infinite() {
                f16::MAX.to_f32()
            } else {
                s.to_f32()
            }
        }
    }
}

/// Shared scale of one block (at most `block_size` elements).
pub fn block_scale(block: &[f32], cfg: &QuantConfig) -> Result<f32> {
    cfg.validate()?;
    if block.len() > cfg.block_size {
        return Err(Error::InvalidArgument(format!(
            "block of {} elements exceeds block size {}",
            block.len(),
            cfg.block_size
        )));
    }
    Ok(scale_for_amax(amax_of(block)?, cfg))
}

/// Signed code of `x` under a fixed block scale.
#[inline]
pub fn quantize_value(x: f32, scale: f32, element: ElementFormat) -> i8 {
    let mag = element.encode_magnitude(x.abs() as f64 / scale as f64) as i8;
    if x < 0.0 {
        -mag
    } else {
        mag
    }
}

/// Per-block codes and scales of a quantized 2-D tensor. Blocks tile each
/// row contiguously along the columns; the last block of a row may be short.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub config: QuantConfig,
    pub rows: usize,
    pub cols: usize,
    /// Signed code per element (sign × magnitude index), row-major.
    pub codes: Vec<i8>,
    /// One scale per block, row-major over `rows × blocks_per_row`.
    pub scales: Vec<f32>,
}

impl QuantizedTensor {
    pub fn blocks_per_row(&self) -> usize {
        self.cols.div_ceil(self.config.block_size)
    }

    pub fn scale(&self, row: usize, col: usize) -> f32 {
        self.scales[row * self.blocks_per_row() + col / self.config.block_size]
    }

    pub fn value(&self, row: usize, col: usize) -> f32 {
        self.config
            .element
            .code_value(self.codes[row * self.cols + col])
            * self.scale(row, col)
    }

    pub fn dequantize(&self) -> Tensor {
        dequantize(self)
    }
}

/// Quantizes every block of `t` to nearest representable values under its
/// own shared scale.
pub fn quantize(t: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    cfg.validate()?;
    let (rows, cols) = t.shape();
    let bs = cfg.block_size;
    let per_row = cols.div_ceil(bs);
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows * per_row);
    for r in 0..rows {
        for block in t.row(r).chunks(bs) {
            let scale = scale_for_amax(amax_of(block)?, cfg);
            scales.push(scale);
            codes.extend(block.iter().map(|&x| quantize_value(x, scale, cfg.element)));
        }
    }
    Ok(QuantizedTensor {
        config: *cfg,
        rows,
        cols,
        codes,
        scales,
    })
}

/// `code_value × scale` per element, in binary32.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let bs = q.config.block_size;
    let per_row = q.blocks_per_row();
    let mut data = Vec::with_capacity(q.rows * q.cols);
    for r in 0..q.rows {
        let codes = &q.codes[r * q.cols..(r + 1) * q.cols];
        for (b, block) in codes.chunks(bs).enumerate() {
            let scale = q.scales[r * per_row + b];
            data.extend(
                block
                    .iter()
                    .map(|&c| q.config.element.code_value(c) * scale),
            );
        }
    }
    Tensor::from_parts(q.rows, q.cols, data)
}

/// Quantize-then-dequantize.
pub fn fake_quantize(t: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    Ok(dequantize(&quantize(t, cfg)?))
}

/// `10·log10(Σx² / Σ(x − x̂)²)` in dB; `+∞` when the error is exactly zero.
pub fn qsnr(reference: &Tensor, reconstructed: &Tensor) -> Result<f64> {
    reference.check_same_shape(reconstructed)?;
    let (mut signal, mut noise) = (0.0f64, 0.0f64);
    for (&x, &y) in reference.data().iter().zip(reconstructed.data()) {
        let (x, y) = (x as f64, y as f64);
        signal += x * x;
        noise += (x - y) * (x - y);
    }
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(signal / noise))
}

/// Relative error of snapping `x > 0` to the nearest power of two.
pub fn pot_relative_error(x: f64) -> f64 {
    let lo = libm::exp2(libm::floor(libm::log2(x)));
    // log2 can land one ulp off at exact powers of two.
    let lo = if lo > x {
        lo * 0.5
    } else if 2.0 * lo <= x {
        lo * 2.0
    } else {
        lo
    };
    let hi = 2.0 * lo;
    (x - lo).min(hi - x) / x
}

/// `(x, relative error)` at `n_points` log-spaced points of `[x_min, x_max]`.
/// The curve is zero at powers of two and peaks at 1/3 at `1.5·2^k`.
pub fn pot_rounding_error_curve(
    x_min: f64,
    x_max: f64,
    n_points: usize,
) -> Result<Vec<(f64, f64)>> {
    if !(x_min > 0.0 && x_min.is_finite() && x_max.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "bounds must be positive and finite, got [{x_min}, {x_max}]"
        )));
    }
    if !(x_min < x_max) {
        return Err(Error::InvalidArgument(format!(
            "x_min {x_min} must be below x_max {x_max}"
        )));
    }
    if n_points < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    let (a, b) = (libm::log2(x_min), libm::log2(x_max));
    Ok((0..n_points)
        .map(|i| {
            let x = libm::exp2(a + (b - a) * i as f64 / (n_points - 1) as f64);
            (x, pot_relative_error(x))
        })
        .collect())
}
