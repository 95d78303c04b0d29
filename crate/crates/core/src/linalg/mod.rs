//! Dense linear-algebra kernel shared by every other module.
//!
//! Everything is `f64` and row-major. Operations are pure; nothing here is
//! tuned for speed beyond a cache-friendly loop order in [`matmul`].

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::SeededRng;

use crate::error::{Error, Result};

/// Standard matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Matrix::from_vec(n, m, out)
}

/// Row-wise softmax with max subtraction.
///
/// `-inf` entries are treated as masked and come out as exactly zero. A row
/// with no finite entry is an error.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        if let Some(bad) = row.iter().find(|x| x.is_nan() || **x == f64::INFINITY) {
            return Err(Error::param(format!("softmax row {r} contains {bad}")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::MaskedRow { row: r });
        }
        let orow = out.row_mut(r);
        let mut sum = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            let e = if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() };
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Euclidean norm of every column.
pub fn col_l2_norms(m: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (a, x) in acc.iter_mut().zip(m.row(r)) {
            *a += x * x;
        }
    }
    acc.into_iter().map(f64::sqrt).collect()
}

/// Euclidean norm of every row.
pub fn row_l2_norms(m: &Matrix) -> Vec<f64> {
    (0..m.rows())
        .map(|r| {
            let mut acc = 0.0;
            for x in m.row(r) {
                acc += x * x;
            }
            acc.sqrt()
        })
        .collect()
}

/// Mean of each column over the rows.
pub fn col_means(m: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (a, x) in acc.iter_mut().zip(m.row(r)) {
            *a += x;
        }
    }
    let n = m.rows() as f64;
    acc.into_iter().map(|s| s / n).collect()
}

/// Population variance of each column over the rows.
pub fn col_variances(m: &Matrix) -> Vec<f64> {
    let means = col_means(m);
    let mut acc = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for ((a, x), mu) in acc.iter_mut().zip(m.row(r)).zip(&means) {
            *a += (x - mu) * (x - mu);
        }
    }
    let n = m.rows() as f64;
    acc.into_iter().map(|s| s / n).collect()
}

/// 1-D average pooling with stride 1 and an odd kernel.
///
/// At the edges the window shrinks to the valid neighbours, so entry `i` is the
/// mean over `[i - k/2, i + k/2]` clipped to the vector bounds.
pub fn avg_pool_1d(scores: &[f64], kernel: usize) -> Result<Vec<f64>> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::param(format!(
            "pooling kernel must be odd and positive, got {kernel}"
        )));
    }
    let half = kernel / 2;
    let n = scores.len();
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let window = &scores[lo..=hi];
            window.iter().sum::<f64>() / window.len() as f64
        })
        .collect())
}

/// RMS normalization of each row, without a learned gain.
pub fn rms_norm_rows(m: &Matrix, eps: f64) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len().max(1) as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        row.iter_mut().for_each(|x| *x *= inv);
    }
    out
}

/// Cosine similarity of two equally shaped matrices, viewed as flat vectors.
///
/// Two all-zero inputs count as identical (1.0); one zero input gives 0.0.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let (na, nb) = (a.frobenius_norm(), b.frobenius_norm());
    if na == 0.0 && nb == 0.0 {
        return Ok(1.0);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `‖a − b‖_F / ‖b‖_F`, or the absolute gap when `b` is zero.
pub fn relative_frobenius(a: &Matrix, b: &Matrix) -> Result<f64> {
    let gap = a.sub(b)?.frobenius_norm();
    let denom = b.frobenius_norm();
    Ok(if denom > 0.0 { gap / denom } else { gap })
}
