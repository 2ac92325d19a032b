//! Gradient and forward-pass quantizers.
//!
//! * [`nsd_quantize`]: non-subtractive dithered quantization of a
//!   preactivation gradient with step `Δ = s·σ`.
//! * [`meprop_topk`]: the deterministic top-k baseline.
//! * [`quantize_8bit`]: symmetric per-tensor 8-bit forward quantization.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::sparse::{SparseGrad, SparseValues};
use crate::tensor::{std_dev, Matrix, Rng};

/// Arithmetic operations charged per element for NSD (std-dev, dither
/// sampling and rounding).
pub const NSD_OPS_PER_ELEMENT: u64 = 9;

/// Settings of the dithered quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsdConfig {
    /// Global scale factor `s` in `Δ = s·σ`.
    pub scale: f64,
    /// Relative floor under which σ counts as degenerate and the gradient is
    /// passed through unquantized.
    pub sigma_floor: f64,
}

impl NsdConfig {
    pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-12;

    pub fn new(scale: f64) -> Result<Self> {
        let cfg = Self {
            scale,
            sigma_floor: Self::DEFAULT_SIGMA_FLOOR,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(config_err(format!("scale factor must be a positive real, got {}", self.scale)));
        }
        if !(self.sigma_floor >= 0.0) {
            return Err(config_err(format!("sigma_floor must be >= 0, got {}", self.sigma_floor)));
        }
        Ok(())
    }
}

/// Statistics of one quantized gradient tensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantStats {
    /// Fraction of zero entries.
    pub sparsity: f64,
    pub max_abs_level: u32,
    /// Bits for the largest level magnitude plus a sign bit; 64 for
    /// full-precision nonzero payloads.
    pub nonzero_bitwidth: u32,
    /// Step size used; 0 when the tensor was not quantized.
    pub delta: f64,
}

/// Bitwidth needed for the nonzero levels, sign included; 0 if all are zero.
pub fn bitwidth_of(levels: &[i32]) -> u32 {
    let max = levels.iter().map(|l| l.unsigned_abs()).max().unwrap_or(0);
    level_bitwidth(max)
}

fn level_bitwidth(max_abs_level: u32) -> u32 {
    if max_abs_level == 0 {
        0
    } else {
        // ceil(log2(m + 1)) is the bit length of m.
        (32 - max_abs_level.leading_zeros()) + 1
    }
}

/// Stats of an arbitrary sparse gradient as it will be fed to the products.
pub fn stats_of(g: &SparseGrad) -> QuantStats {
    match g.values() {
        SparseValues::Levels { delta, levels } => {
            let max_abs_level = levels.iter().map(|l| l.unsigned_abs()).max().unwrap_or(0);
            QuantStats {
                sparsity: g.sparsity(),
                max_abs_level,
                nonzero_bitwidth: level_bitwidth(max_abs_level),
                delta: *delta,
            }
        }
        SparseValues::Real(v) => QuantStats {
            sparsity: g.sparsity(),
            max_abs_level: 0,
            nonzero_bitwidth: if v.is_empty() { 0 } else { 64 },
            delta: 0.0,
        },
    }
}

/// The mid-tread quantizer applied to a dithered input:
/// `⌊(x + ν)/Δ + 1/2⌋`, returned as an integer level.
#[inline]
pub fn nsd_level(x: f64, dither: f64, delta: f64) -> i64 {
    ((x + dither) / delta + 0.5).floor() as i64
}

/// Dithered quantization of a scalar: `Δ·⌊(x + ν)/Δ + 1/2⌋` with a fresh
/// `ν ~ U(−Δ/2, Δ/2)`.
pub fn nsd_scalar(x: f64, delta: f64, rng: &mut Rng) -> f64 {
    let nu = rng.uniform_unchecked(-0.5 * delta, 0.5 * delta);
    nsd_level(x, nu, delta) as f64 * delta
}

/// Quantizes a preactivation gradient with step `Δ = s·std(g)`.
///
/// Each element receives an independent dither draw. When σ is degenerate
/// (`σ ≤ sigma_floor·max|g|`, including the all-zero tensor) the gradient
/// is returned unchanged as a full-precision passthrough.
pub fn nsd_quantize(g: &Matrix, cfg: &NsdConfig, rng: &mut Rng) -> Result<(SparseGrad, QuantStats)> {
    cfg.validate()?;
    let sigma = std_dev(g);
    let max_abs = g.max_abs();
    if max_abs == 0.0 || sigma <= cfg.sigma_floor * max_abs {
        let out = SparseGrad::from_dense_real(g);
        let stats = stats_of(&out);
        return Ok((out, stats));
    }
    let delta = cfg.scale * sigma;
    let half = 0.5 * delta;
    let (rows, cols) = g.shape();
    let mut row_ptr = Vec::with_capacity(rows + 1);
    let mut col_idx = Vec::new();
    let mut levels = Vec::new();
    let mut max_abs_level = 0u32;
    row_ptr.push(0);
    for i in 0..rows {
        for (j, &x) in g.row(i).iter().enumerate() {
            // x = 0 always lands on level 0 since |ν| < Δ/2.
            if x == 0.0 {
                continue;
            }
            let nu = rng.uniform_unchecked(-half, half);
            let level = nsd_level(x, nu, delta);
            if level != 0 {
                let level = i32::try_from(level)
                    .map_err(|_| config_err(format!("quantization level {level} overflows; scale factor too small")))?;
                max_abs_level = max_abs_level.max(level.unsigned_abs());
                col_idx.push(j as u32);
                levels.push(level);
            }
        }
        row_ptr.push(col_idx.len());
    }
    let out = SparseGrad::from_parts_trusted(rows, cols, row_ptr, col_idx, SparseValues::Levels { delta, levels });
    let stats = QuantStats {
        sparsity: out.sparsity(),
        max_abs_level,
        nonzero_bitwidth: level_bitwidth(max_abs_level),
        delta,
    };
    Ok((out, stats))
}

/// Keeps, per column (sample), the `k` entries of largest magnitude at full
/// precision and zeroes the rest. Ties go to the lower row index.
pub fn meprop_topk(g: &Matrix, k: usize) -> Result<SparseGrad> {
    let (rows, cols) = g.shape();
    if k < 1 || k > rows {
        return Err(config_err(format!("top-k requires 1 <= k <= {rows}, got {k}")));
    }
    let mut keep = vec![false; rows * cols];
    let mut order: Vec<usize> = Vec::with_capacity(rows);
    for j in 0..cols {
        order.clear();
        order.extend(0..rows);
        if k < rows {
            let by_rank = |&a: &usize, &b: &usize| {
                g[(b, j)]
                    .abs()
                    .total_cmp(&g[(a, j)].abs())
                    .then(a.cmp(&b))
            };
            order.select_nth_unstable_by(k - 1, by_rank);
        }
        for &i in &order[..k] {
            keep[i * cols + j] = true;
        }
    }
    let mut row_ptr = Vec::with_capacity(rows + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for i in 0..rows {
        for (j, &x) in g.row(i).iter().enumerate() {
            if keep[i * cols + j] && x != 0.0 {
                col_idx.push(j as u32);
                values.push(x);
            }
        }
        row_ptr.push(col_idx.len());
    }
    Ok(SparseGrad::from_parts_trusted(rows, cols, row_ptr, col_idx, SparseValues::Real(values)))
}

/// Per-layer top-k count for a target keep fraction: `max(1, round(f·rows))`.
pub fn topk_for_fraction(rows: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * rows as f64).round() as usize).clamp(1, rows)
}

/// Symmetric mid-tread 8-bit quantization with `Δ₈ = max|x|/127`.
pub fn quantize_8bit(x: &Matrix) -> Matrix {
    let max_abs = x.max_abs();
    if max_abs == 0.0 {
        return x.clone();
    }
    let step = max_abs / 127.0;
    x.map(|v| ((v / step + 0.5).floor()).clamp(-127.0, 127.0) * step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    #[test]
    fn zeros_bypass() {
        let mut rng = Rng::new(0);
        let (g, st) = nsd_quantize(&Matrix::zeros(4, 3), &NsdConfig::new(3.0).unwrap(), &mut rng).unwrap();
        assert_eq!(g.nnz(), 0);
        assert_eq!(st.sparsity, 1.0);
        assert_eq!(st.nonzero_bitwidth, 0);
    }

    #[test]
    fn constant_gradient_bypasses() {
        // σ = 0 < floor·max: returned verbatim.
        let g = Matrix::filled(2, 2, 0.7);
        let mut rng = Rng::new(0);
        let (q, st) = nsd_quantize(&g, &NsdConfig::new(2.0).unwrap(), &mut rng).unwrap();
        assert!(q.is_passthrough());
        assert_eq!(q.to_dense(), g);
        assert_eq!(st.sparsity, 0.0);
    }

    #[test]
    fn scalar_rounding_without_dither() {
        assert_eq!(nsd_level(0.73, 0.0, 1.0), 1);
        assert_eq!(nsd_level(0.49, 0.0, 1.0), 0);
        // half rounds up
        assert_eq!(nsd_level(0.5, 0.0, 1.0), 1);
        assert_eq!(nsd_level(-0.5, 0.0, 1.0), 0);
        assert_eq!(nsd_level(-0.51, 0.0, 1.0), -1);
    }

    #[test]
    fn scalar_is_unbiased() {
        let mut rng = Rng::new(99);
        let n = 1_000_000;
        let mean = (0..n).map(|_| nsd_scalar(0.3, 1.0, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.3).abs() < 5.0 * 0.5 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn scale_factor_must_be_positive() {
        assert!(NsdConfig::new(0.0).is_err());
        assert!(NsdConfig::new(-1.0).is_err());
        assert!(NsdConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn reconstructions_are_bounded_and_on_grid() {
        let mut rng = Rng::new(5);
        let g = Matrix::from_fn(20, 30, |_, _| rng.normal());
        let mut qrng = Rng::new(6);
        let (q, st) = nsd_quantize(&g, &NsdConfig::new(1.0).unwrap(), &mut qrng).unwrap();
        let d = q.to_dense();
        for (x, y) in g.data().iter().zip(d.data()) {
            assert!((x - y).abs() <= st.delta, "{x} -> {y}");
            let l = y / st.delta;
            assert!((l - l.round()).abs() < 1e-12);
        }
        assert_eq!(st.nonzero_bitwidth, bitwidth_of(q.levels().unwrap()));
    }

    #[test]
    fn sparsity_grows_with_scale() {
        let mut sparsities = Vec::new();
        for s in [1.0, 2.0, 3.0, 4.0, 6.0, 8.0] {
            let mut total = 0.0;
            for seed in 0..20u64 {
                let mut rng = Rng::new(seed);
                let g = Matrix::from_fn(50, 40, |_, _| rng.normal());
                let mut qrng = Rng::stream(seed, 1);
                total += nsd_quantize(&g, &NsdConfig::new(s).unwrap(), &mut qrng).unwrap().1.sparsity;
            }
            sparsities.push(total / 20.0);
        }
        assert!(sparsities.windows(2).all(|w| w[0] <= w[1]), "{sparsities:?}");
    }

    #[test]
    fn bitwidth_cases() {
        assert_eq!(bitwidth_of(&[0, 1, -1]), 2);
        assert_eq!(bitwidth_of(&[0]), 0);
        assert_eq!(bitwidth_of(&[]), 0);
        let dense: Vec<i32> = (-127..=127).collect();
        assert_eq!(bitwidth_of(&dense), 8);
        assert_eq!(bitwidth_of(&[128]), 9);
    }

    #[test]
    fn topk_single_column() {
        let g = Matrix::from_rows(&[[3.0], [-5.0], [1.0]]);
        assert_eq!(meprop_topk(&g, 1).unwrap().to_dense(), Matrix::from_rows(&[[0.0], [-5.0], [0.0]]));
    }

    #[test]
    fn topk_full_k_is_identity() {
        let mut rng = Rng::new(8);
        let g = Matrix::random_uniform(6, 4, -1.0, 1.0, &mut rng);
        assert_eq!(meprop_topk(&g, 6).unwrap().to_dense(), g);
    }

    #[test]
    fn topk_ties_prefer_low_rows() {
        let g = Matrix::from_rows(&[[1.0], [-1.0], [1.0]]);
        assert_eq!(meprop_topk(&g, 2).unwrap().to_dense(), Matrix::from_rows(&[[1.0], [-1.0], [0.0]]));
    }

    #[test]
    fn topk_rejects_bad_k() {
        let g = Matrix::zeros(3, 2);
        assert!(meprop_topk(&g, 0).is_err());
        assert!(meprop_topk(&g, 4).is_err());
    }

    #[test]
    fn topk_matches_sort_oracle() {
        let mut rng = Rng::new(17);
        let g = Matrix::random_uniform(50, 8, -1.0, 1.0, &mut rng);
        let k = 5;
        let out = meprop_topk(&g, k).unwrap().to_dense();
        for j in 0..8 {
            let mut idx: Vec<usize> = (0..50).collect();
            idx.sort_by(|&a, &b| g[(b, j)].abs().partial_cmp(&g[(a, j)].abs()).unwrap().then(a.cmp(&b)));
            for (rank, &i) in idx.iter().enumerate() {
                let expect = if rank < k { g[(i, j)] } else { 0.0 };
                assert_eq!(out[(i, j)], expect);
            }
        }
    }

    #[test]
    fn topk_fraction_mapping() {
        assert_eq!(topk_for_fraction(500, 0.05), 25);
        assert_eq!(topk_for_fraction(10, 0.01), 1);
        assert_eq!(topk_for_fraction(10, 2.0), 10);
    }

    #[test]
    fn eight_bit_exact_cases() {
        let x = Matrix::from_rows(&[[127.0, -3.0, 0.0, 64.0]]);
        assert_eq!(quantize_8bit(&x), x);
        assert_eq!(quantize_8bit(&Matrix::zeros(2, 2)), Matrix::zeros(2, 2));
    }

    #[test]
    fn eight_bit_error_bound() {
        let mut rng = Rng::new(21);
        let x = Matrix::random_uniform(30, 30, -4.0, 2.5, &mut rng);
        let q = quantize_8bit(&x);
        let step = x.max_abs() / 127.0;
        for (a, b) in x.data().iter().zip(q.data()) {
            assert!((a - b).abs() <= step / 2.0 * (1.0 + 1e-12));
            let l = (b / step).round();
            assert!(l.abs() <= 127.0);
        }
    }

    proptest! {
        #[test]
        fn topk_is_idempotent(rows in 1usize..12, cols in 1usize..6, k in 1usize..12, seed in any::<u64>()) {
            let k = k.min(rows);
            let mut rng = Rng::new(seed);
            let g = Matrix::random_uniform(rows, cols, -1.0, 1.0, &mut rng);
            let once = meprop_topk(&g, k).unwrap().to_dense();
            let twice = meprop_topk(&once, k).unwrap().to_dense();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn nsd_error_never_exceeds_step(seed in any::<u64>(), scale in 0.5f64..10.0) {
            let mut rng = Rng::new(seed);
            let g = Matrix::from_fn(8, 8, |_, _| rng.normal() * 3.0);
            let (q, st) = nsd_quantize(&g, &NsdConfig::new(scale).unwrap(), &mut rng).unwrap();
            prop_assert!(q.check_invariants().is_ok());
            let d = q.to_dense();
            for (x, y) in g.data().iter().zip(d.data()) {
                prop_assert!((x - y).abs() <= st.delta);
            }
        }
    }
}
