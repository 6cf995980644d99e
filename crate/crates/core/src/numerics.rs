// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense kernels shared by every other module.
//!
//! All kernels are pure functions over immutable inputs. Values are stored as
//! `f64`; [`Precision::F32`] emulates single precision by rounding kernel
//! outputs through `f32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "matrix data",
                format!("{rows}x{cols}={}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dims(format!("matrix row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Naive `self · rhs` (i-k-j loop order).
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dims("matmul inner dimension", self.cols, rhs.rows));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Cache-blocked `self · rhs`. Accumulation order over `k` matches
    /// [`Matrix::matmul`], so results are bit-identical.
    pub fn matmul_blocked(&self, rhs: &Matrix, block: usize) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dims("matmul inner dimension", self.cols, rhs.rows));
        }
        let block = block.max(1);
        let (n, m, p) = (self.rows, self.cols, rhs.cols);
        let mut out = Matrix::zeros(n, p);
        for i0 in (0..n).step_by(block) {
            for k0 in (0..m).step_by(block) {
                for j0 in (0..p).step_by(block) {
                    for i in i0..(i0 + block).min(n) {
                        for k in k0..(k0 + block).min(m) {
                            let a = self.data[i * m + k];
                            if a == 0.0 {
                                continue;
                            }
                            for j in j0..(j0 + block).min(p) {
                                out.data[i * p + j] += a * rhs.data[k * p + j];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }
}

/// `x · m` for a row vector `x`.
pub fn vec_mat(x: &[f64], m: &Matrix) -> Vec<f64> {
    debug_assert_eq!(x.len(), m.rows());
    let mut out = vec![0.0; m.cols()];
    for (k, &a) in x.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, b) in out.iter_mut().zip(m.row(k)) {
            *o += a * b;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Softmax with optional mask. `mask[i] == true` removes entry `i`
/// (treated as a score of −∞, output exactly 0).
pub fn softmax(scores: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if let Some(m) = mask {
        if m.len() != scores.len() {
            return Err(Error::dims("softmax mask", scores.len(), m.len()));
        }
    }
    let masked = |i: usize| mask.is_some_and(|m| m[i]);
    let max = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| !masked(i))
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySupport);
    }
    let mut out: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| if masked(i) { 0.0 } else { (s - max).exp() })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Log-softmax of a full (unmasked) row.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    scores.iter().map(|s| s - lse).collect()
}

/// Per-row LayerNorm statistics, kept so attribution can freeze them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LnStats {
    pub mean: f64,
    pub inv_std: f64,
}

/// `(x − mean) · inv_std ⊙ gamma + beta` with `inv_std = 1/√(var + eps)`.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<(Vec<f64>, LnStats)> {
    if gamma.len() != x.len() {
        return Err(Error::dims("layer_norm gamma", x.len(), gamma.len()));
    }
    if beta.len() != x.len() {
        return Err(Error::dims("layer_norm beta", x.len(), beta.len()));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Invalid(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mu = mean(x);
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.len() as f64;
    let inv_std = 1.0 / (var + eps).sqrt();
    let out = x
        .iter()
        .zip(gamma)
        .zip(beta)
        .map(|((v, g), b)| (v - mu) * inv_std * g + b)
        .collect();
    Ok((out, LnStats { mean: mu, inv_std }))
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximation GELU.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| gelu_scalar(v)).collect()
}

/// 0-based rank of `token`: the number of tokens with a strictly greater
/// logit, plus tokens with an equal logit and a lower id.
pub fn rank_of(logits: &[f64], token: usize) -> Result<usize> {
    let Some(&target) = logits.get(token) else {
        return Err(Error::TokenOutOfRange {
            token,
            vocab_size: logits.len(),
        });
    };
    Ok(logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < token))
        .count())
}

/// Index of the top entry under the same tie rule as [`rank_of`].
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Numeric mode of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Kernel outputs are rounded through `f32`.
    F32,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F64 => v,
            Precision::F32 => v as f32 as f64,
        }
    }

    pub fn round_slice(self, v: &mut [f64]) {
        if self == Precision::F32 {
            v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    /// Absolute tolerance the decomposition identities are held to.
    pub fn identity_tolerance(self) -> f64 {
        match self {
            Precision::F64 => 1e-6,
            Precision::F32 => 1e-3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric_pair() {
        assert_eq!(softmax(&[0.0, 0.0], None).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_large_scores_do_not_overflow() {
        let p = softmax(&[1000.0, 1000.0, 1000.0], None).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln2() {
        // e^{ln 2} = 2, e^0 = 1, normalizer 3.
        let p = softmax(&[std::f64::consts::LN_2, 0.0], None).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_mask_zeroes_and_renormalizes() {
        let p = softmax(&[1.0, 5.0, 1.0], Some(&[false, true, false])).unwrap();
        assert_eq!(p[1], 0.0);
        assert!((p[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_all_masked_errors() {
        let err = softmax(&[1.0, 2.0], Some(&[true, true])).unwrap_err();
        assert!(matches!(err, Error::EmptySupport));
        assert!(err.to_string().contains("empty support"));
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let (y, _) = layer_norm(&[3.0; 4], &[1.5; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_unit_pair() {
        // mean 0, var 1, so output = input as eps → 0.
        let (y, s) = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-14).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);
        assert_eq!(s.mean, 0.0);
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let beta = [0.3, -2.0, 7.0];
        let (y, _) = layer_norm(&[1.0, 4.0, -9.0], &[0.0; 3], &beta, 1e-5).unwrap();
        assert_eq!(y, beta.to_vec());
    }

    #[test]
    fn layer_norm_dim_mismatch() {
        assert!(matches!(
            layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(30.0) - 30.0).abs() < 1e-12);
        // Independent evaluation: 0.5 (1 + tanh(sqrt(2/pi) * 1.044715)).
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let expected = 0.5 * (1.0 + (c * 1.044_715).tanh());
        assert!((gelu_scalar(1.0) - expected).abs() < 1e-15);
        assert!((gelu_scalar(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of(&[0.1, 5.0, 2.0], 1).unwrap(), 0);
        let uniform = [1.0; 6];
        assert_eq!(rank_of(&uniform, 0).unwrap(), 0);
        assert_eq!(rank_of(&uniform, 4).unwrap(), 4);
        assert_eq!(rank_of(&[3.0, 1.0, 2.0], 2).unwrap(), 1);
        assert!(matches!(rank_of(&[1.0], 3), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn blocked_matmul_matches_naive() {
        let a = Matrix::from_vec(5, 7, (0..35).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = Matrix::from_vec(7, 3, (0..21).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let naive = a.matmul(&b).unwrap();
        for block in [1, 2, 3, 8] {
            assert_eq!(a.matmul_blocked(&b, block).unwrap(), naive);
        }
        let x: Vec<f64> = a.row(2).to_vec();
        assert_eq!(vec_mat(&x, &b), naive.row(2).to_vec());
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(a.matmul(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn f32_rounding() {
        assert_eq!(Precision::F32.round(0.1), 0.1f32 as f64);
        assert_eq!(Precision::F64.round(0.1), 0.1);
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let p = softmax(&v, None).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn layer_norm_shift_invariant(
            v in prop::collection::vec(-10.0f64..10.0, 2..32),
            shift in -100.0f64..100.0,
        ) {
            let n = v.len();
            let gamma: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 * 0.1).collect();
            let beta: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let (a, _) = layer_norm(&v, &gamma, &beta, 1e-5).unwrap();
            let (b, _) = layer_norm(&shifted, &gamma, &beta, 1e-5).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
            }
        }

        #[test]
        fn ranks_are_a_permutation(v in prop::collection::hash_set(-1_000_000i64..1_000_000, 1..50)) {
            let logits: Vec<f64> = v.into_iter().map(|x| x as f64).collect();
            let mut ranks: Vec<usize> = (0..logits.len()).map(|t| rank_of(&logits, t).unwrap()).collect();
            ranks.sort_unstable();
            prop_assert_eq!(ranks, (0..logits.len()).collect::<Vec<_>>());
        }
    }
}
