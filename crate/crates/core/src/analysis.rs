//! Block-level diagnostics of how rotations interact with block scaling.
//!
//! Outliers are the top `q` fraction of magnitudes (`q = 0.001` by default)
//! under a nearest-rank rule: with `n` elements, the threshold is the
//! `(⌊q·n⌋ + 1)`-th largest magnitude, so exactly the `⌊q·n⌋` largest lie
//! strictly above it when magnitudes are distinct. A block is an outlier
//! block iff it holds at least one element strictly above the threshold.
//! "Loss" is elementwise MSE between a tensor and its fake quantization.

use alloc::format;
use alloc::vec::Vec;

use crate::formats::{fake_quantize, QuantConfig};
use crate::tensor::Tensor;
use crate::transforms::{build_rotation, rotate_activations, RotationMatrix, RotationSpec};
use crate::{Error, Result};

pub const DEFAULT_OUTLIER_QUANTILE: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockLabel {
    Regular,
    Outlier,
}

/// Block labels of a tensor against a magnitude threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockClassification {
    pub rows: usize,
    pub cols: usize,
    pub block_size: usize,
    pub threshold: f32,
    /// Row-major over `rows × ⌈cols / block_size⌉`.
    pub labels: Vec<BlockLabel>,
    pub amax: Vec<f32>,
}

impl BlockClassification {
    pub fn count(&self, label: BlockLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Magnitude threshold leaving the top `⌊quantile·n⌋` elements strictly
/// above it (for distinct magnitudes).
pub fn outlier_threshold(t: &Tensor, quantile: f64) -> Result<f32> {
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::InvalidArgument(format!(
            "quantile must be in [0,1], got {quantile}"
        )));
    }
    let n = t.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty tensor".into()));
    }
    // Guard against q·n landing a hair above an integer.
    let k = (libm::floor(quantile * n as f64 + 1e-9) as usize).min(n - 1);
    let mut mags: Vec<f32> = t.data().iter().map(|v| v.abs()).collect();
    let (_, kth, _) = mags.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
    Ok(*kth)
}

/// Nearest-rank `p`-th percentile of `|t|`, `p ∈ [0, 1]`.
pub fn abs_percentile(t: &Tensor, p: f64) -> Result<f32> {
    outlier_threshold(t, 1.0 - p)
}

/// Labels blocks against a fixed threshold.
pub fn classify_with_threshold(
    t: &Tensor,
    block_size: usize,
    threshold: f32,
) -> Result<BlockClassification> {
    if block_size == 0 {
        return Err(Error::InvalidArgument("block size must be positive".into()));
    }
    let (rows, cols) = t.shape();
    let mut labels = Vec::with_capacity(rows * cols.div_ceil(block_size));
    let mut amax = Vec::with_capacity(labels.capacity());
    for r in 0..rows {
        for block in t.row(r).chunks(block_size) {
            let m = block.iter().fold(0.0f32, |a, v| a.max(v.abs()));
            amax.push(m);
            labels.push(if m > threshold {
                BlockLabel::Outlier
            } else {
                BlockLabel::Regular
            });
        }
    }
    Ok(BlockClassification {
        rows,
        cols,
        block_size,
        threshold,
        labels,
        amax,
    })
}

/// Labels blocks against the tensor's own top-`quantile` threshold.
pub fn classify_blocks(
    t: &Tensor,
    block_size: usize,
    quantile: f64,
) -> Result<BlockClassification> {
    classify_with_threshold(t, block_size, outlier_threshold(t, quantile)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockStat {
    pub index: usize,
    pub row: usize,
    pub block: usize,
    pub amax: f32,
    pub label: BlockLabel,
    pub mse: f64,
    pub max_abs_error: f64,
    /// `max |x − x̂|` over the block divided by the block's amax (0 for an
    /// all-zero block).
    pub relative_error_max: f64,
    pub baseline_mse: Option<f64>,
    pub baseline_relative_error_max: Option<f64>,
}

impl BlockStat {
    /// This block's MSE over the baseline's, when a baseline ran and erred.
    pub fn mse_ratio(&self) -> Option<f64> {
        self.baseline_mse.filter(|&b| b > 0.0).map(|b| self.mse / b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub config: QuantConfig,
    pub baseline: Option<QuantConfig>,
    pub threshold: f32,
    pub blocks: Vec<BlockStat>,
    pub regular_count: usize,
    pub outlier_count: usize,
    /// `None` when no block carries the label.
    pub mean_regular_mse: Option<f64>,
    pub log10_mean_regular_mse: Option<f64>,
    pub mean_outlier_mse: Option<f64>,
}

struct BlockErrors {
    mse: Vec<f64>,
    max_abs: Vec<f64>,
    rel_max: Vec<f64>,
}

fn block_errors(t: &Tensor, cfg: &QuantConfig) -> Result<BlockErrors> {
    let q = fake_quantize(t, cfg)?;
    let bs = cfg.block_size;
    let mut out = BlockErrors {
        mse: Vec::new(),
        max_abs: Vec::new(),
        rel_max: Vec::new(),
    };
    for r in 0..t.rows() {
        for (xb, qb) in t.row(r).chunks(bs).zip(q.row(r).chunks(bs)) {
            let (mut sq, mut max_abs, mut amax) = (0.0f64, 0.0f64, 0.0f64);
            for (&x, &y) in xb.iter().zip(qb) {
                let e = (x as f64 - y as f64).abs();
                sq += e * e;
                max_abs = max_abs.max(e);
                amax = amax.max((x as f64).abs());
            }
            out.mse.push(sq / xb.len() as f64);
            out.max_abs.push(max_abs);
            out.rel_max
                .push(if amax > 0.0 { max_abs / amax } else { 0.0 });
        }
    }
    Ok(out)
}

fn mean_over(values: &[f64], labels: &[BlockLabel], want: BlockLabel) -> Option<f64> {
    let (sum, count) = values
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == want)
        .fold((0.0, 0usize), |(s, c), (&v, _)| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Per-block quantization error of `t` under `cfg`, optionally alongside a
/// baseline config (e.g. MXFP4 against BFP4).
pub fn block_error_report(
    t: &Tensor,
    cfg: &QuantConfig,
    classification: &BlockClassification,
    baseline: Option<&QuantConfig>,
) -> Result<BlockReport> {
    if classification.block_size != cfg.block_size
        || classification.rows != t.rows()
        || classification.cols != t.cols()
    {
        return Err(Error::ShapeMismatch(format!(
            "classification ({}x{}, block {}) does not match tensor {}x{} with block {}",
            classification.rows,
            classification.cols,
            classification.block_size,
            t.rows(),
            t.cols(),
            cfg.block_size
        )));
    }
    if let Some(b) = baseline {
        if b.block_size != cfg.block_size {
            return Err(Error::InvalidArgument("baseline block size differs".into()));
        }
    }
    let errs = block_errors(t, cfg)?;
    let base = baseline.map(|b| block_errors(t, b)).transpose()?;
    let per_row = t.cols().div_ceil(cfg.block_size);
    let blocks = (0..errs.mse.len())
        .map(|i| BlockStat {
            index: i,
            row: i / per_row,
            block: i % per_row,
            amax: classification.amax[i],
            label: classification.labels[i],
            mse: errs.mse[i],
            max_abs_error: errs.max_abs[i],
            relative_error_max: errs.rel_max[i],
            baseline_mse: base.as_ref().map(|b| b.mse[i]),
            baseline_relative_error_max: base.as_ref().map(|b| b.rel_max[i]),
        })
        .collect();
    let mean_regular_mse = mean_over(&errs.mse, &classification.labels, BlockLabel::Regular);
    Ok(BlockReport {
        config: *cfg,
        baseline: baseline.copied(),
        threshold: classification.threshold,
        blocks,
        regular_count: classification.count(BlockLabel::Regular),
        outlier_count: classification.count(BlockLabel::Outlier),
        mean_regular_mse,
        log10_mean_regular_mse: mean_regular_mse.map(libm::log10),
        mean_outlier_mse: mean_over(&errs.mse, &classification.labels, BlockLabel::Outlier),
    })
}

/// Share of elements whose magnitude exceeds each threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
}

pub fn threshold_fractions(t: &Tensor, thresholds: &[f64]) -> Result<ThresholdCurve> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) || thresholds.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument(
            "thresholds must be ascending".into(),
        ));
    }
    let mut mags: Vec<f64> = t.data().iter().map(|v| v.abs() as f64).collect();
    mags.sort_by(f64::total_cmp);
    let n = mags.len() as f64;
    let fractions = thresholds
        .iter()
        .map(|&th| {
            let at_or_below = mags.partition_point(|&m| m <= th);
            (mags.len() - at_or_below) as f64 / n
        })
        .collect();
    Ok(ThresholdCurve {
        thresholds: thresholds.to_vec(),
        fractions,
    })
}

/// Regular-block loss before and after a rotation, as log10 of the mean
/// block MSE.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDelta {
    pub threshold_pre: f32,
    pub threshold_post: f32,
    pub before: f64,
    /// Rotated blocks that are regular under the pre-rotation threshold.
    pub after: f64,
    /// Rotated blocks that are regular under the rotated tensor's own threshold.
    pub after_own_threshold: f64,
    pub regular_before: usize,
    pub regular_after: usize,
    pub regular_after_own: usize,
}

impl LossDelta {
    pub fn growth(&self) -> f64 {
        self.after - self.before
    }
}

pub fn regular_block_loss_delta(
    t: &Tensor,
    cfg: &QuantConfig,
    rotation: &RotationMatrix,
    quantile: f64,
) -> Result<LossDelta> {
    let bs = cfg.block_size;
    let pre = classify_blocks(t, bs, quantile)?;
    let rotated = rotate_activations(t, rotation)?;
    let post_pre = classify_with_threshold(&rotated, bs, pre.threshold)?;
    let post_own = classify_blocks(&rotated, bs, quantile)?;

    let before_err = block_errors(t, cfg)?;
    let after_err = block_errors(&rotated, cfg)?;
    let no_regular = || Error::InvalidArgument("no regular blocks found".into());
    let before =
        mean_over(&before_err.mse, &pre.labels, BlockLabel::Regular).ok_or_else(no_regular)?;
    let after =
        mean_over(&after_err.mse, &post_pre.labels, BlockLabel::Regular).ok_or_else(no_regular)?;
    let after_own =
        mean_over(&after_err.mse, &post_own.labels, BlockLabel::Regular).ok_or_else(no_regular)?;
    Ok(LossDelta {
        threshold_pre: pre.threshold,
        threshold_post: post_own.threshold,
        before: libm::log10(before),
        after: libm::log10(after),
        after_own_threshold: libm::log10(after_own),
        regular_before: pre.count(BlockLabel::Regular),
        regular_after: post_pre.count(BlockLabel::Regular),
        regular_after_own: post_own.count(BlockLabel::Regular),
    })
}

/// Convenience wrapper building the rotation from a spec.
pub fn regular_block_loss_delta_for(
    t: &Tensor,
    cfg: &QuantConfig,
    spec: &RotationSpec,
    quantile: f64,
) -> Result<LossDelta> {
    regular_block_loss_delta(t, cfg, &build_rotation(spec, t.cols())?, quantile)
}

/// Max magnitude of every block, row-major.
pub fn block_scale_distribution(t: &Tensor, block_size: usize) -> Result<Vec<f32>> {
    Ok(classify_with_threshold(t, block_size, f32::INFINITY)?.amax)
}

/// Number of blocks whose amax grew by more than `ratio` (0.25 = 25%).
pub fn scale_inflation_count(before: &[f32], after: &[f32], ratio: f32) -> usize {
    before
        .iter()
        .zip(after)
        .filter(|(&b, &a)| a > b * (1.0 + ratio))
        .count()
}

/// Quantization MSE of `t·R_g` for block rotations of each width `g`.
pub fn rotation_dim_sweep(
    t: &Tensor,
    cfg: &QuantConfig,
    dims: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    dims.iter()
        .map(|&g| {
            let r = build_rotation(&RotationSpec::block(g, seed), t.cols())?;
            let rotated = rotate_activations(t, &r)?;
            Ok((g, fake_quantize(&rotated, cfg)?.mse(&rotated)?))
        })
        .collect()
}
