//! Independent reference computations used only by unit tests.

use crate::linalg::{DenseMatrix, Vector};

/// Solves `A X = B` by Gaussian elimination with partial pivoting.
pub fn gaussian_elimination_solve(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let n = a.nrows();
    let k = b.ncols();
    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .unwrap();
        m.swap_rows(col, pivot);
        x.swap_rows(col, pivot);
        for row in (col + 1)..n {
            let f = m[(row, col)] / m[(col, col)];
            for c in col..n {
                m[(row, c)] -= f * m[(col, c)];
            }
            for c in 0..k {
                x[(row, c)] -= f * x[(col, c)];
            }
        }
    }
    for c in 0..k {
        for row in (0..n).rev() {
            let mut acc = x[(row, c)];
            for j in (row + 1)..n {
                acc -= m[(row, j)] * x[(j, c)];
            }
            x[(row, c)] = acc / m[(row, row)];
        }
    }
    x
}

/// Dense elimination solve of `H x = v` followed by iterative refinement
/// against the unassembled operator `apply`. Assembling `H` rounds away
/// directions whose eigenvalues are near `eps·‖H‖`; refinement recovers them.
pub fn refined_dense_solve(h: &DenseMatrix, apply: impl Fn(&Vector) -> Vector, v: &Vector) -> Vector {
    let n = v.len();
    let solve = |rhs: &Vector| -> Vector {
        gaussian_elimination_solve(h, &DenseMatrix::from_column_slice(n, 1, rhs.as_slice()))
            .column(0)
            .into_owned()
    };
    let mut x = solve(v);
    for _ in 0..5 {
        let residual = v - apply(&x);
        x += solve(&residual);
    }
    x
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn jacobi_eigenvalues(a: &DenseMatrix) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m[(i, j)] * m[(i, j)];
                }
            }
        }
        if off.sqrt() < 1e-15 * m.norm().max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient(f: impl Fn(&Vector) -> f64, w: &Vector) -> Vector {
    let mut g = Vector::zeros(w.len());
    for i in 0..w.len() {
        let h = 1e-6 * (1.0 + w[i].abs());
        let mut plus = w.clone();
        plus[i] += h;
        let mut minus = w.clone();
        minus[i] -= h;
        g[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalizes_known_matrix() {
        let a = DenseMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let ev = jacobi_eigenvalues(&a);
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }
}
