//! Numeric rank via one-sided Jacobi SVD.

use serde::Serialize;

use crate::numcore::Value;

/// Singular-value summary of a matrix with the rank implied by a relative
/// tolerance: rank = #{σᵢ > rel_tol · σ₁}.
#[derive(Debug, Clone, Serialize)]
pub struct RankReport {
    pub rows: usize,
    pub cols: usize,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub rel_tol: f64,
}

/// Singular values of a row-major `rows × cols` matrix, descending.
///
/// One-sided Jacobi (Hestenes): orthogonalize column pairs with plane
/// rotations until all pairwise column dot products are negligible; the
/// singular values are then the column norms. Quadratically convergent and
/// accurate for the small singular values the rank threshold depends on.
pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return vec![];
    }
    // Work on the transpose when it is taller than wide so the rotated
    // matrix has the fewer columns.
    let (m, n, mut w) = if rows >= cols {
        (rows, cols, a.to_vec())
    } else {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        (cols, rows, t)
    };

    let col = |w: &[f64], j: usize, i: usize| w[i * n + j];
    let tol = 1e-15;
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let x = col(&w, p, i);
                    let y = col(&w, q, i);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let x = w[i * n + p];
                    let y = w[i * n + q];
                    w[i * n + p] = c * x - s * y;
                    w[i * n + q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| col(&w, j, i).powi(2)).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Numeric rank of a 2-D `Value` at a relative tolerance in (0, 1):
/// the count of singular values above `rel_tol · σ₁` (rank 0 when σ₁ = 0).
pub fn numeric_rank(m: &Value, rel_tol: f64) -> RankReport {
    assert!(
        rel_tol > 0.0 && rel_tol < 1.0,
        "rel_tol must be in (0,1), got {rel_tol}"
    );
    assert_eq!(m.ndim(), 2, "numeric_rank expects a matrix");
    let rows = m.shape()[0];
    let cols = m.shape()[1];
    let sv = singular_values(&m.data(), rows, cols);
    RankReport::from_singular_values(rows, cols, sv, rel_tol)
}

/// Rank of a raw row-major buffer (diagnostics work on captured matrices).
pub fn numeric_rank_slice(a: &[f64], rows: usize, cols: usize, rel_tol: f64) -> RankReport {
    assert!(rel_tol > 0.0 && rel_tol < 1.0);
    let sv = singular_values(a, rows, cols);
    RankReport::from_singular_values(rows, cols, sv, rel_tol)
}

impl RankReport {
    fn from_singular_values(rows: usize, cols: usize, sv: Vec<f64>, rel_tol: f64) -> RankReport {
        let s1 = sv.first().copied().unwrap_or(0.0);
        let rank = if s1 == 0.0 {
            0
        } else {
            sv.iter().filter(|&&s| s > rel_tol * s1).count()
        };
        RankReport {
            rows,
            cols,
            singular_values: sv,
            rank,
            rel_tol,
        }
    }
}
