//! File formats, reports and the command line for `mxrot-core`.
//!
//! - [`io`]: the MXTB tensor file format and atomic writes.
//! - [`report`]: JSON report envelopes and CSV tables.
//! - [`cli`]: the `mxrot` subcommands.

pub mod cli;
pub mod io;
pub mod report;

pub use mxrot_core;
