//! Small dense linear algebra: a row-major matrix type, products, and the
//! ridge least-squares solver used to fit cascade stages.
//!
//! Everything is `f64`. Matrices here are at most a few hundred wide, so a
//! plain Cholesky factorization on the normal equations is all we need.

use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite matrix entry {} at ({}, {})",
                data[i],
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    /// Builds a matrix whose rows are the given slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Mat::new(rows.len(), cols, data)
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Squared Frobenius norm.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `m · v`.
pub fn mat_vec(m: &Mat, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != m.cols {
        return Err(Error::dim(format!(
            "mat_vec: matrix has {} columns, vector has {} entries",
            m.cols,
            v.len()
        )));
    }
    Ok((0..m.rows).map(|r| dot(m.row(r), v)).collect())
}

/// `mᵀ · v`.
pub fn mat_t_vec(m: &Mat, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != m.rows {
        return Err(Error::dim(format!(
            "mat_t_vec: matrix has {} rows, vector has {} entries",
            m.rows,
            v.len()
        )));
    }
    let mut out = vec![0.0; m.cols];
    for (r, &vr) in v.iter().enumerate() {
        for (o, &a) in out.iter_mut().zip(m.row(r)) {
            *o += a * vr;
        }
    }
    Ok(out)
}

/// `a · b`.
pub fn mat_mul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::dim(format!(
            "mat_mul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for (o, &bkj) in out.row_mut(i).iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Output of [`ridge_fit`]: a linear map `x ↦ W·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    /// `d × K`.
    pub weights: Mat,
    /// Length `d`.
    pub bias: Vec<f64>,
}

impl RidgeFit {
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = mat_vec(&self.weights, x)?;
        for (yi, bi) in y.iter_mut().zip(&self.bias) {
            *yi += bi;
        }
        Ok(y)
    }
}

/// Ridge regression of `targets` (n×d) on `features` (n×K) with an
/// unpenalized bias.
///
/// Minimizes `Σᵢ ‖yᵢ − W·xᵢ − b‖² + λ‖W‖²_F` by centering both sides and
/// solving `(XcᵀXc + λI) Wᵀ = XcᵀYc` with a Cholesky factorization. If the
/// factorization fails a diagonal jitter of `1e-10·tr/K` is added and
/// raised tenfold until `1e-4·tr/K`, after which the fit gives up.
pub fn ridge_fit(features: &Mat, targets: &Mat, lambda: f64) -> Result<RidgeFit> {
    let n = features.rows;
    let k = features.cols;
    let d = targets.cols;
    if n == 0 {
        return Err(Error::dim("ridge_fit: no samples"));
    }
    if targets.rows != n {
        return Err(Error::dim(format!(
            "ridge_fit: {n} feature rows but {} target rows",
            targets.rows
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "ridge_fit: lambda must be finite and >= 0, got {lambda}"
        )));
    }

    let x_mean = column_means(features);
    let y_mean = column_means(targets);

    // Gram matrix and cross products of the centered data.
    let mut gram = Mat::zeros(k, k);
    let mut cross = Mat::zeros(k, d);
    let mut xc = vec![0.0; k];
    let mut yc = vec![0.0; d];
    for i in 0..n {
        for (c, v) in xc.iter_mut().enumerate() {
            *v = features.get(i, c) - x_mean[c];
        }
        for (c, v) in yc.iter_mut().enumerate() {
            *v = targets.get(i, c) - y_mean[c];
        }
        for a in 0..k {
            let xa = xc[a];
            if xa == 0.0 {
                continue;
            }
            for b in a..k {
                gram.data[a * k + b] += xa * xc[b];
            }
            for (cc, &yv) in yc.iter().enumerate() {
                cross.data[a * d + cc] += xa * yv;
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            gram.data[a * k + b] = gram.data[b * k + a];
        }
        gram.data[a * k + a] += lambda;
    }

    let factor = cholesky_with_jitter(&gram)?;
    let solution = factor.solve(&cross); // K × d, this is Wᵀ
    let weights = solution.transpose();
    let bias: Vec<f64> = (0..d)
        .map(|r| y_mean[r] - dot(weights.row(r), &x_mean))
        .collect();

    if !weights.is_finite() || bias.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "ridge_fit produced non-finite weights".into(),
        ));
    }
    Ok(RidgeFit { weights, bias })
}

/// Value of the ridge objective for a candidate `(W, b)`.
pub fn ridge_objective(
    features: &Mat,
    targets: &Mat,
    weights: &Mat,
    bias: &[f64],
    lambda: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..features.rows {
        let pred = mat_vec(weights, features.row(i))?;
        for ((p, b), y) in pred.iter().zip(bias).zip(targets.row(i)) {
            let r = y - p - b;
            total += r * r;
        }
    }
    Ok(total + lambda * weights.frobenius_sq())
}

fn column_means(m: &Mat) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (acc, v) in mean.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    let inv = 1.0 / m.rows as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    mean
}

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Mat,
}

impl Cholesky {
    /// Factorizes a symmetric matrix. Returns `None` when a pivot is not
    /// positive relative to the largest diagonal entry.
    pub fn factor(a: &Mat) -> Option<Self> {
        let n = a.rows;
        debug_assert_eq!(n, a.cols);
        let max_diag = (0..n).map(|i| a.get(i, i).abs()).fold(0.0_f64, f64::max);
        let floor = 1e-13 * max_diag.max(f64::MIN_POSITIVE);
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut diag = a.get(j, j);
            for p in 0..j {
                diag -= l.get(j, p) * l.get(j, p);
            }
            if !(diag > floor) || !diag.is_finite() {
                return None;
            }
            let ljj = diag.sqrt();
            l.set(j, j, ljj);
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for p in 0..j {
                    s -= l.get(i, p) * l.get(j, p);
                }
                l.set(i, j, s / ljj);
            }
        }
        Some(Cholesky { lower: l })
    }

    /// Solves `A·X = B` column by column.
    pub fn solve(&self, b: &Mat) -> Mat {
        let n = self.lower.rows;
        let mut x = b.clone();
        for c in 0..b.cols {
            // forward: L·z = b
            for i in 0..n {
                let mut s = x.get(i, c);
                for p in 0..i {
                    s -= self.lower.get(i, p) * x.get(p, c);
                }
                x.set(i, c, s / self.lower.get(i, i));
            }
            // backward: Lᵀ·x = z
            for i in (0..n).rev() {
                let mut s = x.get(i, c);
                for p in (i + 1)..n {
                    s -= self.lower.get(p, i) * x.get(p, c);
                }
                x.set(i, c, s / self.lower.get(i, i));
            }
        }
        x
    }

    pub fn lower(&self) -> &Mat {
        &self.lower
    }
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

fn cholesky_with_jitter(a: &Mat) -> Result<Cholesky> {
    if let Some(f) = Cholesky::factor(a) {
        return Ok(f);
    }
    let n = a.rows;
    let trace: f64 = (0..n).map(|i| a.get(i, i)).sum();
    // An all-zero system (e.g. a single sample) still deserves a scale.
    let base = if trace > 0.0 { trace / n as f64 } else { 1.0 };
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let mut jittered = a.clone();
        for i in 0..n {
            jittered.data[i * n + i] += rel * base;
        }
        if let Some(f) = Cholesky::factor(&jittered) {
            return Ok(f);
        }
        rel *= 10.0;
    }
    Err(Error::Numerical(format!(
        "normal equations of size {n} not positive definite after jitter up to {:e}",
        JITTER_MAX * base
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Gaussian elimination with partial pivoting on the augmented system
    /// `[X | 1]`, penalizing only the first K unknowns.
    fn brute_force_ridge(x: &Mat, y: &Mat, lambda: f64) -> (Mat, Vec<f64>) {
        let n = x.rows();
        let k = x.cols();
        let d = y.cols();
        let m = k + 1;
        let aug = |i: usize, c: usize| if c < k { x.get(i, c) } else { 1.0 };
        let mut a = vec![vec![0.0; m + d]; m];
        for r in 0..m {
            for c in 0..m {
                a[r][c] = (0..n).map(|i| aug(i, r) * aug(i, c)).sum();
            }
            if r < k {
                a[r][r] += lambda;
            }
            for c in 0..d {
                a[r][m + c] = (0..n).map(|i| aug(i, r) * y.get(i, c)).sum();
            }
        }
        for col in 0..m {
            let piv = (col..m)
                .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for r in 0..m {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..m + d {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let w = Mat::from_fn(d, k, |r, c| a[c][m + r] / a[c][c]);
        let b = (0..d).map(|r| a[k][m + r] / a[k][k]).collect();
        (w, b)
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn mat_vec_examples() {
        assert_eq!(
            mat_vec(&Mat::identity(2), &[3.0, 4.0]).unwrap(),
            vec![3.0, 4.0]
        );
        assert_eq!(
            mat_vec(&Mat::zeros(3, 2), &[1.0, 1.0]).unwrap(),
            vec![0.0; 3]
        );
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(mat_vec(&m, &[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn mat_vec_rejects_bad_length() {
        let err = mat_vec(&Mat::identity(2), &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn construction_rejects_nan_and_bad_length() {
        assert!(matches!(
            Mat::new(2, 2, vec![0.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Mat::new(1, 2, vec![0.0, f64::NAN]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn transpose_products() {
        let m = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(mat_t_vec(&m, &[1.0, -1.0]).unwrap(), vec![-3.0, -3.0, -3.0]);
        let p = mat_mul(&m, &m.transpose()).unwrap();
        assert_eq!(p.as_slice(), &[14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn ridge_identity_reproduces_targets() {
        // n = 2 points with K = 2 features and a bias: the augmented system is
        // rank deficient, so only the predictions are determined.
        let x = Mat::identity(2);
        let y = Mat::identity(2);
        let fit = ridge_fit(&x, &y, 0.0).unwrap();
        for i in 0..2 {
            let p = fit.predict(x.row(i)).unwrap();
            for c in 0..2 {
                assert!((p[c] - y.get(i, c)).abs() < 1e-8, "{p:?}");
            }
        }
    }

    #[test]
    fn ridge_zero_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_mat(&mut rng, 6, 3);
        let fit = ridge_fit(&x, &Mat::zeros(6, 2), 0.0).unwrap();
        assert!(fit.weights.as_slice().iter().all(|&v| v == 0.0));
        assert!(fit.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ridge_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_mat(&mut rng, 5, 3);
        let y = random_mat(&mut rng, 5, 2);
        let fit = ridge_fit(&x, &y, 0.1).unwrap();
        let (w, b) = brute_force_ridge(&x, &y, 0.1);
        assert!(rel_err(fit.weights.as_slice(), w.as_slice()) <= 1e-10);
        assert!(rel_err(&fit.bias, &b) <= 1e-10);
    }

    #[test]
    fn ridge_single_sample_is_mean() {
        let x = Mat::from_rows(&[vec![0.3, 0.7]]).unwrap();
        let y = Mat::from_rows(&[vec![2.0, -1.0]]).unwrap();
        for lambda in [0.0, 1.0] {
            let fit = ridge_fit(&x, &y, lambda).unwrap();
            assert!(fit.weights.frobenius_sq() < 1e-20);
            assert!((fit.bias[0] - 2.0).abs() < 1e-12 && (fit.bias[1] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ridge_collinear_features_survive_with_jitter() {
        // Two identical columns with lambda = 0 make the Gram matrix singular.
        let x = Mat::from_fn(8, 2, |r, _| r as f64);
        let y = Mat::from_fn(8, 1, |r, _| 2.0 * r as f64 + 1.0);
        let fit = ridge_fit(&x, &y, 0.0).unwrap();
        for r in 0..8 {
            let p = fit.predict(x.row(r)).unwrap()[0];
            assert!((p - y.get(r, 0)).abs() < 1e-4);
        }
    }

    #[test]
    fn ridge_rejects_mismatch_and_bad_lambda() {
        let x = Mat::zeros(3, 2);
        assert!(matches!(
            ridge_fit(&x, &Mat::zeros(2, 1), 0.0),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            ridge_fit(&Mat::zeros(0, 2), &Mat::zeros(0, 1), 0.0),
            Err(Error::Dimension(_))
        ));
        assert!(ridge_fit(&x, &Mat::zeros(3, 1), -1.0).is_err());
    }

    #[test]
    fn ridge_norm_shrinks_with_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = random_mat(&mut rng, 20, 5);
        let y = random_mat(&mut rng, 20, 3);
        let norms: Vec<f64> = [0.0, 0.1, 1.0, 10.0]
            .iter()
            .map(|&l| ridge_fit(&x, &y, l).unwrap().weights.frobenius_sq())
            .collect();
        for w in norms.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "{norms:?}");
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(Cholesky::factor(&a).is_none());
        let spd = Mat::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = Cholesky::factor(&spd).unwrap();
        let back = mat_mul(l.lower(), &l.lower().transpose()).unwrap();
        for (a, b) in back.as_slice().iter().zip(spd.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Mat, Mat, f64)> {
            (
                2usize..12,
                1usize..5,
                1usize..4,
                0u64..1000,
                prop_oneof![Just(0.0), Just(0.5), Just(3.0)],
            )
                .prop_map(|(n, k, d, seed, lambda)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let x = random_mat(&mut rng, n, k);
                    let y = random_mat(&mut rng, n, d);
                    (x, y, lambda)
                })
        }

        proptest! {
            #[test]
            fn fit_beats_mean_and_zero((x, y, lambda) in instance()) {
                let fit = ridge_fit(&x, &y, lambda).unwrap();
                let obj = ridge_objective(&x, &y, &fit.weights, &fit.bias, lambda).unwrap();
                let zero_w = Mat::zeros(y.cols(), x.cols());
                let ybar = column_means(&y);
                let mean_obj = ridge_objective(&x, &y, &zero_w, &ybar, lambda).unwrap();
                let zero_obj = ridge_objective(&x, &y, &zero_w, &vec![0.0; y.cols()], lambda).unwrap();
                prop_assert!(obj <= mean_obj * (1.0 + 1e-9) + 1e-12);
                prop_assert!(mean_obj <= zero_obj * (1.0 + 1e-12) + 1e-12);
            }

            #[test]
            fn fit_invariant_under_row_permutation((x, y, lambda) in instance(), shift in 1usize..7) {
                let n = x.rows();
                let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).rev().collect();
                let xp = Mat::from_fn(n, x.cols(), |r, c| x.get(perm[r], c));
                let yp = Mat::from_fn(n, y.cols(), |r, c| y.get(perm[r], c));
                let a = ridge_fit(&x, &y, lambda).unwrap();
                let b = ridge_fit(&xp, &yp, lambda).unwrap();
                // Rank-deficient unregularized systems have a jitter-chosen
                // solution; compare predictions, which are unique.
                for r in 0..n {
                    let pa = a.predict(x.row(r)).unwrap();
                    let pb = b.predict(x.row(r)).unwrap();
                    prop_assert!(rel_err(&pb, &pa) <= 1e-8 || pa.iter().all(|v| v.abs() < 1e-12));
                }
                if lambda > 0.0 {
                    prop_assert!(rel_err(b.weights.as_slice(), a.weights.as_slice()) <= 1e-8
                        || a.weights.frobenius_sq() < 1e-24);
                }
            }
        }
    }
}
