//! Dense double-precision linear algebra, elementwise nonlinearities, and a
//! seeded deterministic PRNG. Everything here is f64 and row-major; model
//! sizes are small enough that simplicity wins over BLAS.

use serde::{Deserialize, Serialize};

/// Row-major dense matrix of f64.
///
/// Shape mismatches panic with both shapes in the message; they are
/// programming errors, not recoverable conditions. Deserialization is the
/// exception: it validates shape and finiteness and returns an error, since
/// serialized matrices arrive from untrusted files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        struct Raw {
            rows: usize,
            cols: usize,
            data: Vec<f64>,
        }
        let raw = Raw::deserialize(deserializer)?;
        let expect = raw
            .rows
            .checked_mul(raw.cols)
            .ok_or_else(|| serde::de::Error::custom("matrix shape overflows"))?;
        if expect != raw.data.len() {
            return Err(serde::de::Error::custom(format!(
                "matrix data length {} does not match {}x{}",
                raw.data.len(),
                raw.rows,
                raw.cols
            )));
        }
        if !raw.data.iter().all(|v| v.is_finite()) {
            return Err(serde::de::Error::custom("non-finite matrix entry"));
        }
        Ok(Matrix {
            rows: raw.rows,
            cols: raw.cols,
            data: raw.data,
        })
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            assert_eq!(r.len(), ncols, "ragged rows: {} vs {}", r.len(), ncols);
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols: ncols,
            data,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "add_scaled: {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

/// W·x + b. Panics on dimension mismatch, naming both shapes.
pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(
        w.cols,
        x.len(),
        "affine: W is {}x{} but x has length {}",
        w.rows,
        w.cols,
        x.len()
    );
    assert_eq!(
        w.rows,
        b.len(),
        "affine: W is {}x{} but b has length {}",
        w.rows,
        w.cols,
        b.len()
    );
    let mut out = b.to_vec();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w.data[r * w.cols..(r + 1) * w.cols];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *o += acc;
    }
    out
}

/// `out += Wᵀ·x`; the row-major-friendly transpose product used by backward passes.
pub fn add_tmatvec(w: &Matrix, x: &[f64], out: &mut [f64]) {
    assert_eq!(
        w.rows,
        x.len(),
        "add_tmatvec: W is {}x{} but x has length {}",
        w.rows,
        w.cols,
        x.len()
    );
    assert_eq!(
        w.cols,
        out.len(),
        "add_tmatvec: W is {}x{} but out has length {}",
        w.rows,
        w.cols,
        out.len()
    );
    for (r, &xv) in x.iter().enumerate() {
        let row = &w.data[r * w.cols..(r + 1) * w.cols];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += wv * xv;
        }
    }
}

/// Rank-1 accumulation `W += a ⊗ b` (a indexes rows, b indexes columns).
pub fn add_outer(w: &mut Matrix, a: &[f64], b: &[f64]) {
    assert_eq!(
        (w.rows, w.cols),
        (a.len(), b.len()),
        "add_outer: W is {}x{} but a⊗b is {}x{}",
        w.rows,
        w.cols,
        a.len(),
        b.len()
    );
    for (r, &av) in a.iter().enumerate() {
        let row = &mut w.data[r * w.cols..(r + 1) * w.cols];
        for (wv, bv) in row.iter_mut().zip(b) {
            *wv += av * bv;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    // Split on sign so exp never overflows; saturates instead of NaN.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic sigmoid; outputs in (0,1), finite for any finite input.
pub fn sigmoid_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid(v)).collect()
}

/// Elementwise tanh.
pub fn tanh_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.tanh()).collect()
}

/// Numerically stable softmax (max-subtraction). Entries positive, sum 1.
pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    assert!(!x.is_empty(), "softmax of empty vector");
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

/// Deterministic PRNG: xoshiro256++ with SplitMix64 seeding.
///
/// The algorithm is fixed so the same seed yields the same stream on every
/// platform; datasets and initializations must never depend on the platform
/// default RNG.
#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed from (seed, stream). Used to give each
/// generated sequence or sweep cell its own stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut s = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let a = splitmix64(&mut s);
    splitmix64(&mut s) ^ a.rotate_left(17)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        Rng {
            state: [
                splitmix64(&mut s),
                splitmix64(&mut s),
                splitmix64(&mut s),
                splitmix64(&mut s),
            ],
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform integer in [0, n). n must be > 0.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Multiply-shift rejection-free mapping is fine here; streams are not
        // adversarial and n is tiny relative to 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle, deterministic under the seed.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Draw an index from a discrete distribution (weights need not be normalized).
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "categorical with non-positive total weight");
        let mut u = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            u -= w;
            if u < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}

/// Glorot/Xavier uniform init: i.i.d. on (−√(6/(rows+cols)), +√(6/(rows+cols))).
pub fn glorot_init(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    assert!(rows >= 1 && cols >= 1, "glorot_init: empty shape {rows}x{cols}");
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Matrix { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity() {
        let w = Matrix::identity(2);
        let out = affine(&w, &[3.0, -1.0], &[0.0, 0.0]);
        assert_eq!(out, vec![3.0, -1.0]);
    }

    #[test]
    fn affine_hand_arithmetic() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        let out = affine(&w, &[1.0, 1.0], &[1.0, 0.0]);
        assert_eq!(out, vec![4.0, 1.0]);
    }

    // Independent oracle: naive triple-loop matvec.
    fn matvec_reference(w: &Matrix, x: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.rows()];
        for r in 0..w.rows() {
            out[r] = b[r];
            for c in 0..w.cols() {
                out[r] += w.get(r, c) * x[c];
            }
        }
        out
    }

    #[test]
    fn affine_matches_reference() {
        let mut rng = Rng::new(7);
        let w = glorot_init(5, 7, &mut rng);
        let x: Vec<f64> = (0..7).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let got = affine(&w, &x, &b);
        let want = matvec_reference(&w, &x, &b);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn affine_is_linear() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let w = glorot_init(4, 6, &mut rng);
            let x: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let y: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
            let zero = vec![0.0; 4];
            let mixed: Vec<f64> = x.iter().zip(&y).map(|(xv, yv)| a * xv + b * yv).collect();
            let lhs = affine(&w, &mixed, &zero);
            let fx = affine(&w, &x, &zero);
            let fy = affine(&w, &y, &zero);
            for i in 0..4 {
                assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() < 1e-10);
            }
        }
    }

    #[test]
    #[should_panic(expected = "affine: W is 2x2 but x has length 3")]
    fn affine_shape_mismatch_panics() {
        let w = Matrix::identity(2);
        affine(&w, &[1.0, 2.0, 3.0], &[0.0, 0.0]);
    }

    #[test]
    fn sigmoid_basics() {
        assert_eq!(sigmoid_vec(&[0.0, 0.0]), vec![0.5, 0.5]);
        let v = sigmoid_vec(&[3.0f64.ln()]);
        assert!((v[0] - 0.75).abs() < 1e-15);
        let sat = sigmoid_vec(&[1000.0, -1000.0]);
        assert!(sat[0].is_finite() && sat[1].is_finite());
        assert!(sat[0] > 1.0 - 1e-12 && sat[1] < 1e-12);
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        for c in [-7.5, 0.0, 3.25, 1000.0] {
            let g = softmax_vec(&[c, c, c, c]);
            for v in &g {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
        let g = softmax_vec(&[0.0, 3.0f64.ln()]);
        assert!((g[0] - 0.25).abs() < 1e-12);
        assert!((g[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.uniform(-4.0, 4.0)).collect();
            let k = rng.uniform(-100.0, 100.0);
            let shifted: Vec<f64> = x.iter().map(|v| v + k).collect();
            let a = softmax_vec(&x);
            let b = softmax_vec(&shifted);
            let sum: f64 = a.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(a.iter().all(|&v| v > 0.0));
            for (av, bv) in a.iter().zip(&b) {
                assert!((av - bv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tanh_reference_and_saturation() {
        assert_eq!(tanh_vec(&[0.0]), vec![0.0]);
        let v = tanh_vec(&[100.0]);
        assert!(v[0].is_finite() && (v[0] - 1.0).abs() < 1e-12);
        // exp-based reference: tanh(x) = (e^2x - 1)/(e^2x + 1)
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let x = rng.uniform(-3.0, 3.0);
            let want = ((2.0 * x).exp() - 1.0) / ((2.0 * x).exp() + 1.0);
            let got = tanh_vec(&[x])[0];
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn glorot_range_and_determinism() {
        let bound = (6.0 / (30 + 20) as f64).sqrt();
        let m1 = glorot_init(30, 20, &mut Rng::new(99));
        let m2 = glorot_init(30, 20, &mut Rng::new(99));
        assert!(m1.data().iter().all(|v| v.abs() < bound));
        assert_eq!(m1, m2);
    }

    #[test]
    fn glorot_sample_mean() {
        // mean of n=10^6 uniform(−b,b) draws has sd b/√(3n); allow 3 sigma.
        let m = glorot_init(1000, 1000, &mut Rng::new(2024));
        let bound = (6.0 / 2000.0f64).sqrt();
        let mean: f64 = m.data().iter().sum::<f64>() / 1e6;
        assert!(mean.abs() < 3.0 * bound / (3.0e6f64).sqrt(), "mean={mean}");
    }

    #[test]
    fn no_nan_inf_from_finite_inputs() {
        let mut rng = Rng::new(12);
        for _ in 0..20 {
            let x: Vec<f64> = (0..8).map(|_| rng.uniform(-1e6, 1e6)).collect();
            assert!(sigmoid_vec(&x).iter().all(|v| v.is_finite()));
            assert!(tanh_vec(&x).iter().all(|v| v.is_finite()));
            assert!(softmax_vec(&x).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rng_stream_is_seed_stable() {
        let mut a = Rng::new(123);
        let mut b = Rng::new(123);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(124);
        assert_ne!(Rng::new(123).next_u64(), c.next_u64());
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(42, 0));
    }

    #[test]
    fn categorical_respects_weights() {
        let mut rng = Rng::new(8);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[rng.categorical(&[0.2, 0.3, 0.5])] += 1;
        }
        assert!((counts[0] as f64 / 30_000.0 - 0.2).abs() < 0.02);
        assert!((counts[2] as f64 / 30_000.0 - 0.5).abs() < 0.02);
    }
}
