//! Small dense f64 helpers. Matrices are tiny (channels x states or a probe
//! Gram matrix), so everything is a flat row-major `Vec<f64>`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![1.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = f(r, c);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Elementwise product, in place.
    pub fn hadamard_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        let mut out = self.clone();
        for a in out.data.iter_mut() {
            *a *= s;
        }
        out
    }

    pub fn frob_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Matrix-vector product (self is rows x cols, v has len cols).
    pub fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, x) in row.iter().zip(v) {
                acc += w * x;
            }
            out[r] = acc;
        }
        out
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn vec_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn vec_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn max_abs_diff_vec(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Standard layer normalization with learned-style scale/offset.
pub fn layer_norm(v: &[f64], scale: &[f64], offset: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
    v.iter()
        .zip(scale.iter().zip(offset))
        .map(|(x, (s, o))| (x - mean) * inv * s + o)
        .collect()
}

/// SplitMix64 step, used for deterministic seed derivation.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a purpose-specific seed from a global one. Purpose indices are
/// fixed small counters so the derivation is reproducible and documented.
pub fn derive_seed(global: u64, purpose: u64) -> u64 {
    let mut state = global;
    let mut out = 0;
    for _ in 0..=purpose {
        out = splitmix64(&mut state);
    }
    out
}

/// Deterministic stream cipher RNG; all seeded construction goes through this.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in (-s, s).
pub fn uniform_sym(rng: &mut ChaCha8Rng, s: f64) -> f64 {
    (rng.random::<f64>() * 2.0 - 1.0) * s
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

/// Solve A x = b for symmetric positive-definite A via Cholesky, b has k
/// right-hand sides (columns). Used by the ridge probe.
pub fn solve_spd(a: &Mat, b: &Mat) -> Result<Mat> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dim("solve_spd square matrix", n, a.cols()));
    }
    if b.rows() != n {
        return Err(Error::dim("solve_spd rhs rows", n, b.rows()));
    }
    // Lower-triangular factor L with A = L L^T.
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a[(i, j)];
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if acc <= 0.0 {
                    return Err(Error::RejectedInput(
                        "matrix not positive definite (lambda must be > 0)",
                    ));
                }
                l[(i, j)] = libm::sqrt(acc);
            } else {
                l[(i, j)] = acc / l[(j, j)];
            }
        }
    }
    let k = b.cols();
    let mut x = b.clone();
    // Forward substitution L y = b.
    for col in 0..k {
        for i in 0..n {
            let mut acc = x[(i, col)];
            for j in 0..i {
                acc -= l[(i, j)] * x[(j, col)];
            }
            x[(i, col)] = acc / l[(i, i)];
        }
        // Back substitution L^T x = y.
        for i in (0..n).rev() {
            let mut acc = x[(i, col)];
            for j in i + 1..n {
                acc -= l[(j, i)] * x[(j, col)];
            }
            x[(i, col)] = acc / l[(i, i)];
        }
    }
    Ok(x)
}

/// Least-squares line fit y = slope * x + intercept.
/// Returns (slope, intercept, r_squared).
pub fn line_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Some((slope, intercept, r2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_known_values() {
        assert!((softplus(0.0) - core::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(1.0) - 1.3132616875182228).abs() < 1e-12);
        // Large arguments must not overflow.
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn spd_solve_matches_hand_inverse() {
        // 2x2 system solved by hand.
        let a = Mat::from_fn(2, 2, |i, j| if i == j { 4.0 } else { 1.0 });
        let b = Mat::from_fn(2, 1, |i, _| if i == 0 { 9.0 } else { 6.0 });
        let x = solve_spd(&a, &b).unwrap();
        // inv([[4,1],[1,4]]) = 1/15 [[4,-1],[-1,4]]
        assert!((x[(0, 0)] - (4.0 * 9.0 - 6.0) / 15.0).abs() < 1e-12);
        assert!((x[(1, 0)] - (4.0 * 6.0 - 9.0) / 15.0).abs() < 1e-12);
    }

    #[test]
    fn line_fit_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        let (slope, intercept, r2) = line_fit(&xs, &ys).unwrap();
        assert!((slope - 2.0).abs() < 1e-12);
        assert!((intercept - 1.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn derive_seed_is_stable_and_distinct() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        assert_eq!(a, derive_seed(42, 0));
        assert_ne!(a, b);
    }
}
