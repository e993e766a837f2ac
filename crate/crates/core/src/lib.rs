//! Microscaling 4-bit quantization and the rotations that interact with it.
//!
//! The crate is `no_std` (with `alloc`) and holds every numeric piece of the
//! toolkit: the MXFP4 / MXINT4 / BFP4 / BINT4 codecs, randomized Hadamard
//! rotations (global and block-diagonal), SmoothQuant scaling, GPTQ
//! compensation, Cayley-step rotation optimization, the block-level
//! diagnostics and the fake-quantized linear-layer pipeline. File formats,
//! reports and the command line live in the `mxrot` companion crate.
//!
//! Enable the `std` feature to let the matmul backend pick SIMD kernels at
//! runtime.
#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod analysis;
mod error;
pub mod formats;
pub mod gptq;
pub mod linalg;
pub mod pipeline;
pub mod rng;
pub mod rotopt;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
pub use formats::{dequantize, quantize, ElementFormat, QuantConfig, QuantizedTensor, ScaleFormat};
pub use tensor::{generate_synthetic, SyntheticSpec, Tensor};
pub use transforms::{build_rotation, RotationMatrix, RotationScope, RotationSpec};
