//! Small dense helpers shared by the numeric modules.
//!
//! Everything is `f64`; packs are widened on load and narrowed on save.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Scales every row to unit Euclidean norm in place.
pub fn normalize_rows_mut(m: &mut Mat) -> Result<()> {
    for i in 0..m.nrows() {
        let norm = m.row(i).norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroRow(i));
        }
        m.row_mut(i).unscale_mut(norm);
    }
    Ok(())
}

/// Row-wise softmax of `scale * scores`, with max subtraction.
pub fn softmax_rows(scores: &Mat, scale: f64) -> Mat {
    let mut out = scores * scale;
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row.unscale_mut(sum);
    }
    out
}

/// Backward pass of a row softmax: given `p = softmax(z)` and `dL/dp`,
/// returns `dL/dz`.
pub fn softmax_rows_backward(p: &Mat, grad_p: &Mat) -> Mat {
    let mut out = p.component_mul(grad_p);
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let dot = row.sum();
        for (j, v) in row.iter_mut().enumerate() {
            *v -= p[(i, j)] * dot;
        }
    }
    out
}

/// Eigen-decomposition of a symmetric matrix with eigenpairs sorted by
/// descending eigenvalue and eigenvector signs fixed so the entry of largest
/// magnitude is positive.
pub fn sorted_symmetric_eigen(m: &Mat) -> (Vector, Mat) {
    let eig = SymmetricEigen::new(m.clone());
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let values = Vector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = Mat::zeros(m.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).clone_owned();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

pub fn column_means(m: &Mat) -> Vector {
    let n = m.nrows().max(1) as f64;
    Vector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Subtracts `mean` from every row.
pub fn center_rows(m: &Mat, mean: &Vector) -> Mat {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        row -= mean.transpose();
    }
    out
}

/// Sample covariance with divisor `n` of the rows of `m` about their mean.
pub fn covariance(m: &Mat) -> Mat {
    let centered = center_rows(m, &column_means(m));
    centered.tr_mul(&centered) / m.nrows() as f64
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest absolute deviation of `m * m^T` from the identity.
pub fn orthogonality_error(m: &Mat) -> f64 {
    let gram = m * m.transpose();
    max_abs_diff(&gram, &Mat::identity(m.nrows(), m.nrows()))
}

/// Index of the row maximum, ties broken toward the lowest index.
pub fn argmax_row(m: &Mat, row: usize) -> usize {
    let mut best = 0;
    for j in 1..m.ncols() {
        if m[(row, j)] > m[(row, best)] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -500.0, 0.0, 500.0]);
        let p = softmax_rows(&m, 1.0);
        for i in 0..2 {
            assert!((p.row(i).sum() - 1.0).abs() < 1e-12);
        }
        assert!((p[(1, 2)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_sorted_descending() {
        let m = Mat::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0]);
        let (vals, vecs) = sorted_symmetric_eigen(&m);
        assert_eq!(vals.as_slice(), &[5.0, 3.0, 1.0]);
        assert_eq!(vecs[(1, 0)], 1.0);
        assert_eq!(vecs[(2, 1)], 1.0);
    }

    #[test]
    fn argmax_ties_prefer_low_index() {
        let m = Mat::from_row_slice(1, 3, &[2.0, 2.0, 1.0]);
        assert_eq!(argmax_row(&m, 0), 0);
    }

    #[test]
    fn zero_row_rejected() {
        let mut m = Mat::from_row_slice(2, 2, &[3.0, 4.0, 0.0, 0.0]);
        assert!(matches!(normalize_rows_mut(&mut m), Err(Error::ZeroRow(1))));
    }
}
