//! Dense linear algebra, elementwise math and seeded randomness.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`. Matrices are row-major
//! [`Matrix`] values. All sums accumulate left to right in index order so
//! that naive reference loops reproduce results bit-for-bit.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                context: "Matrix::from_vec",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Dimension {
                    context: "Matrix::from_rows",
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Computes `W·x + b`, checking shapes.
pub fn affine(x: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.cols {
        return Err(Error::Dimension {
            context: "affine input",
            expected: w.cols,
            found: x.len(),
        });
    }
    if b.len() != w.rows {
        return Err(Error::Dimension {
            context: "affine bias",
            expected: w.rows,
            found: b.len(),
        });
    }
    let mut out = vec![0.0; w.rows];
    affine_into(x, w, b, &mut out);
    Ok(out)
}

/// Unchecked-shape hot path of [`affine`]; panics on mismatch.
///
/// Each output starts from the bias and adds `w[r][c] * x[c]` for increasing
/// `c`. Terms with `x[c] == 0` are skipped, which leaves every finite sum
/// unchanged.
pub fn affine_into(x: &[f64], w: &Matrix, b: &[f64], out: &mut [f64]) {
    assert_eq!(x.len(), w.cols, "affine input length");
    assert_eq!(b.len(), w.rows, "affine bias length");
    assert_eq!(out.len(), w.rows, "affine output length");
    let nonzero: Vec<usize> = (0..x.len()).filter(|&c| x[c] != 0.0).collect();
    if nonzero.len() * 2 < x.len() {
        for (r, o) in out.iter_mut().enumerate() {
            let row = w.row(r);
            let mut acc = b[r];
            for &c in &nonzero {
                acc += row[c] * x[c];
            }
            *o = acc;
        }
    } else {
        for (r, o) in out.iter_mut().enumerate() {
            let row = w.row(r);
            let mut acc = b[r];
            for (wc, xc) in row.iter().zip(x) {
                if *xc != 0.0 {
                    acc += wc * xc;
                }
            }
            *o = acc;
        }
    }
}

/// Computes `Wᵀ·v` (length `w.cols()`), accumulating rows in order.
pub fn transpose_matvec(w: &Matrix, v: &[f64]) -> Vec<f64> {
    assert_eq!(v.len(), w.rows, "transpose_matvec length");
    let mut out = vec![0.0; w.cols];
    for (r, &vr) in v.iter().enumerate() {
        if vr == 0.0 {
            continue;
        }
        for (o, wrc) in out.iter_mut().zip(w.row(r)) {
            *o += wrc * vr;
        }
    }
    out
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "softmax of empty vector");
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−Σ target_j · ln(max(probs_j, LOG_CLAMP))`.
pub fn cross_entropy(target: &[f64], probs: &[f64]) -> f64 {
    assert_eq!(target.len(), probs.len(), "cross_entropy lengths");
    let mut loss = 0.0;
    for (&t, &p) in target.iter().zip(probs) {
        if t != 0.0 {
            loss -= t * p.max(LOG_CLAMP).ln();
        }
    }
    loss
}

/// Logistic sigmoid, evaluated on the branch that avoids overflow.
#[inline]
pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Index of the maximum entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(class: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[class] = 1.0;
    v
}

/// Glorot/Xavier uniform init on `[−√(6/(rows+cols)), +√(6/(rows+cols))]`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    assert!(
        rows >= 1 && cols >= 1,
        "glorot_uniform needs a non-empty shape"
    );
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.uniform(-limit, limit))
        .collect();
    Matrix { rows, cols, data }
}

/// Deterministic, platform-independent random source.
///
/// Backed by ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`), seeded
/// through `SeedableRng::seed_from_u64`. Independent sub-streams are derived
/// with [`derive_seed`], so every consumer can be re-created from the
/// 64-bit run seed alone.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A fresh generator for the named purpose under this generator's seed.
    pub fn substream(&self, tag: &str) -> SeededRng {
        SeededRng::new(derive_seed(self.seed, tag))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on `[lo, hi)`, built from 53 random mantissa bits.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let unit = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * unit
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        use rand_distr::{Distribution, Normal};
        Normal::new(mean, std)
            .expect("finite non-negative std")
            .sample(&mut self.inner)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// Mixes a string tag into a seed with the SplitMix64 finalizer.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &byte in tag.as_bytes() {
        h = splitmix(h ^ u64::from(byte));
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
