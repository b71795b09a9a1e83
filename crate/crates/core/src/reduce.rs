//! Batched row reductions: softmax, one-pass layernorm, and a model of the
//! lane-shuffle tree reduction a GPU warp performs.
//!
//! Element-wise arithmetic runs at the element precision `F`; reductions
//! accumulate in 64-bit floats so the algorithmic identities under test are
//! not confounded by accumulation noise. The [`reference`] submodule holds
//! independent double-precision oracles.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

/// Scalar element type of a batch: `f32` or `f64`.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + std::fmt::Debug + std::fmt::Display {}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReduceError {
    #[error("data length {len} does not equal rows*cols = {expected}")]
    ShapeMismatch { len: usize, expected: usize },
    #[error("input contains a non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },
    #[error("{name} length {len} does not match cols {cols}")]
    VectorLength { name: &'static str, len: usize, cols: usize },
    #[error("eps must be positive")]
    NonPositiveEps,
    #[error("lanes_per_group must be a power of two, got {0}")]
    LanesNotPowerOfTwo(usize),
    #[error("rows_per_block must be at least 1")]
    ZeroRowsPerBlock,
}

/// A batch of rows stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch2D<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Batch2D<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, ReduceError> {
        if data.len() != rows * cols {
            return Err(ReduceError::ShapeMismatch { len: data.len(), expected: rows * cols });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn check_finite(&self) -> Result<(), ReduceError> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(ReduceError::NonFinite { row: i / self.cols, col: i % self.cols });
            }
        }
        Ok(())
    }
}

fn widen<F: Scalar>(v: F) -> f64 {
    v.to_f64().expect("float widens to f64")
}

fn narrow<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("f64 narrows to element type")
}

/// Row-wise numerically stable softmax: subtract the row max, exponentiate,
/// divide by the row sum. Rejects non-finite input.
pub fn batched_softmax<F: Scalar>(x: &Batch2D<F>) -> Result<Batch2D<F>, ReduceError> {
    x.check_finite()?;
    let mut out = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        let row = x.row(r);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().map(|&e| widen(e)).sum();
        out.extend(exps.iter().map(|&e| narrow::<F>(widen(e) / sum)));
    }
    Batch2D::new(x.rows, x.cols, out)
}

/// Row-wise layernorm computing mean and E(x^2) in a single reduction pass;
/// the variance comes from the algebraic identity E(x^2) - E(x)^2, clamped
/// at zero since the subtraction can go slightly negative in finite
/// precision.
pub fn batched_layernorm_onepass<F: Scalar>(
    x: &Batch2D<F>,
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> Result<Batch2D<F>, ReduceError> {
    if gamma.len() != x.cols {
        return Err(ReduceError::VectorLength { name: "gamma", len: gamma.len(), cols: x.cols });
    }
    if beta.len() != x.cols {
        return Err(ReduceError::VectorLength { name: "beta", len: beta.len(), cols: x.cols });
    }
    if !(eps > F::zero()) {
        return Err(ReduceError::NonPositiveEps);
    }
    let n = x.cols as f64;
    let eps = widen(eps);
    let mut out = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        let row = x.row(r);
        // One pass: both moments reduce together.
        let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
        for &v in row {
            let v = widen(v);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0);
        let inv_std = 1.0 / (var + eps).sqrt();
        for (i, &v) in row.iter().enumerate() {
            let normed = (widen(v) - mean) * inv_std;
            out.push(narrow::<F>(widen(gamma[i]) * normed + widen(beta[i])));
        }
    }
    Batch2D::new(x.rows, x.cols, out)
}

/// Two-reduction layernorm: mean first, then E((x - mean)^2). The other side
/// of the variance identity; kept as a separate code path so the two routes
/// can be compared.
pub fn batched_layernorm_twopass<F: Scalar>(
    x: &Batch2D<F>,
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> Result<Batch2D<F>, ReduceError> {
    if gamma.len() != x.cols {
        return Err(ReduceError::VectorLength { name: "gamma", len: gamma.len(), cols: x.cols });
    }
    if beta.len() != x.cols {
        return Err(ReduceError::VectorLength { name: "beta", len: beta.len(), cols: x.cols });
    }
    if !(eps > F::zero()) {
        return Err(ReduceError::NonPositiveEps);
    }
    let n = x.cols as f64;
    let eps = widen(eps);
    let mut out = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().map(|&v| widen(v)).sum::<f64>() / n;
        let var = row
            .iter()
            .map(|&v| {
                let d = widen(v) - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (i, &v) in row.iter().enumerate() {
            let normed = (widen(v) - mean) * inv_std;
            out.push(narrow::<F>(widen(gamma[i]) * normed + widen(beta[i])));
        }
    }
    Batch2D::new(x.rows, x.cols, out)
}

/// Row sums computed with the pairwise association order of a lane-shuffle
/// tree reduction.
///
/// Each row is zero-padded to a multiple of `lanes_per_group`; every group
/// reduces by halving strides (lane i adds lane i + stride), group partials
/// then reduce the same way until one value remains. `rows_per_block` rows
/// are stepped through the schedule together, which reorders instructions
/// but never changes any row's association order, so results are bitwise
/// independent of it.
pub fn simulated_block_reduce<F: Scalar>(
    x: &Batch2D<F>,
    lanes_per_group: usize,
    rows_per_block: usize,
) -> Result<Vec<F>, ReduceError> {
    if lanes_per_group == 0 || !lanes_per_group.is_power_of_two() {
        return Err(ReduceError::LanesNotPowerOfTwo(lanes_per_group));
    }
    if rows_per_block == 0 {
        return Err(ReduceError::ZeroRowsPerBlock);
    }
    let mut results = vec![F::zero(); x.rows];
    for block_start in (0..x.rows).step_by(rows_per_block) {
        let block_end = (block_start + rows_per_block).min(x.rows);
        // Interleaved registers: one working vector per row in the block.
        let mut regs: Vec<Vec<F>> =
            (block_start..block_end).map(|r| x.row(r).to_vec()).collect();
        loop {
            let mut done = true;
            for reg in regs.iter_mut() {
                if reg.len() > 1 {
                    done = false;
                }
            }
            if done {
                break;
            }
            // Reduce one group level across all rows of the block in step.
            for reg in regs.iter_mut() {
                if reg.len() <= 1 {
                    continue;
                }
                let padded = reg.len().div_ceil(lanes_per_group) * lanes_per_group;
                reg.resize(padded, F::zero());
                let mut partials = Vec::with_capacity(padded / lanes_per_group);
                for group in reg.chunks_mut(lanes_per_group) {
                    let mut stride = lanes_per_group / 2;
                    while stride > 0 {
                        for i in 0..stride {
                            group[i] = group[i] + group[i + stride];
                        }
                        stride /= 2;
                    }
                    partials.push(group[0]);
                }
                *reg = partials;
            }
        }
        for (offset, reg) in regs.into_iter().enumerate() {
            results[block_start + offset] = if reg.is_empty() { F::zero() } else { reg[0] };
        }
    }
    Ok(results)
}

/// Independent double-precision oracles for the kernels above.
pub mod reference {
    use super::{widen, Batch2D, Scalar};

    /// Naive per-row softmax entirely in f64.
    pub fn softmax_rows_f64<F: Scalar>(x: &Batch2D<F>) -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|r| {
                let row: Vec<f64> = x.row(r).iter().map(|&v| widen(v)).collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                exps.iter().map(|e| e / sum).collect()
            })
            .collect()
    }

    /// Two-pass layernorm entirely in f64: mean, then E((x - mean)^2).
    pub fn layernorm_twopass_f64<F: Scalar>(
        x: &Batch2D<F>,
        gamma: &[F],
        beta: &[F],
        eps: f64,
    ) -> Vec<Vec<f64>> {
        let n = x.cols() as f64;
        (0..x.rows())
            .map(|r| {
                let row: Vec<f64> = x.row(r).iter().map(|&v| widen(v)).collect();
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv_std = 1.0 / (var + eps).sqrt();
                row.iter()
                    .enumerate()
                    .map(|(i, v)| widen(gamma[i]) * (v - mean) * inv_std + widen(beta[i]))
                    .collect()
            })
            .collect()
    }

    /// Plain left-to-right summation per row.
    pub fn sequential_row_sums<F: Scalar>(x: &Batch2D<F>) -> Vec<F> {
        (0..x.rows())
            .map(|r| x.row(r).iter().fold(F::zero(), |acc, &v| acc + v))
            .collect()
    }
}
