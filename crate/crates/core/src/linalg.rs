//! Dense and matrix-free linear algebra shared by every optimizer.
//!
//! Matrices are [`nalgebra::DMatrix`] values and therefore stored
//! **column-major**. Feature matrices `Z` (n × m) are accessed column by
//! column, which is why that layout was kept.
//!
//! All tolerances in this module are relative to a reference norm unless that
//! norm is below `1e-300`, in which case they are absolute.

use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::{Accum, MatMut, MatRef, Par};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type DenseMatrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Reference norms below this are treated as zero and tolerances become absolute.
pub const TINY_NORM: f64 = 1e-300;

/// Default relative rank cutoff for [`pseudo_inverse_psd`].
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-10;
const CHOLESKY_BLOCK: usize = 96;
const POWER_MAX_ITER: usize = 100_000;
const POWER_STABLE_STEPS: usize = 3;

/// Name of the environment variable forcing the sequential numeric mode.
pub const DETERMINISTIC_ENV: &str = "KERNEL_NEWTON_DETERMINISTIC";

/// True when `KERNEL_NEWTON_DETERMINISTIC=1` asks for strictly sequential
/// numerics. Row-parallel assemblies in this crate produce identical bits in
/// both modes; the switch additionally disables thread pools for runs.
pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).map(|v| v == "1").unwrap_or(false)
}

/// A symmetric linear map applied matrix-free.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &Vector) -> Vector;
}

impl LinearOperator for DenseMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, v: &Vector) -> Vector {
        self * v
    }
}

/// Wraps a closure as a [`LinearOperator`].
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&Vector) -> Vector> FnOperator<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&Vector) -> Vector> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &Vector) -> Vector {
        (self.f)(v)
    }
}

fn reference(norm: f64) -> f64 {
    if norm < TINY_NORM {
        1.0
    } else {
        norm
    }
}

/// Largest `|a_ij - a_ji|`.
pub fn max_asymmetry(a: &DenseMatrix) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(a: &DenseMatrix) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            context: "square matrix",
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    let scale = reference(a.amax());
    let asym = max_asymmetry(a);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Overwrites the strict upper triangle with the lower one.
pub fn mirror_lower(a: &mut DenseMatrix) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            a[(j, i)] = a[(i, j)];
        }
    }
}

/// `B Bᵀ`.
pub fn outer_gram(b: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(b.nrows(), b.nrows());
    outer_gram_accumulate(&mut out, b);
    out
}

/// `acc += B Bᵀ` for symmetric `acc`. Only the lower triangle is computed,
/// by `faer`'s triangular product, then mirrored.
pub fn outer_gram_accumulate(acc: &mut DenseMatrix, b: &DenseMatrix) {
    let n = b.nrows();
    assert_eq!(acc.shape(), (n, n), "outer_gram_accumulate shape");
    if n == 0 || b.ncols() == 0 {
        return;
    }
    let lhs = MatRef::from_column_major_slice(b.as_slice(), n, b.ncols());
    let out = MatMut::from_column_major_slice_mut(acc.as_mut_slice(), n, n);
    triangular::matmul(
        out,
        BlockStructure::TriangularLower,
        Accum::Add,
        lhs,
        BlockStructure::Rectangular,
        lhs.transpose(),
        BlockStructure::Rectangular,
        1.0,
        Par::Seq,
    );
    mirror_lower(acc);
}

/// `Bᵀ B`, lower triangle by `faer`'s triangular product, then mirrored.
pub fn inner_gram(b: &DenseMatrix) -> DenseMatrix {
    let m = b.ncols();
    let mut out = DenseMatrix::zeros(m, m);
    if m == 0 || b.nrows() == 0 {
        return out;
    }
    let rhs = MatRef::from_column_major_slice(b.as_slice(), b.nrows(), m);
    triangular::matmul(
        MatMut::from_column_major_slice_mut(out.as_mut_slice(), m, m),
        BlockStructure::TriangularLower,
        Accum::Replace,
        rhs.transpose(),
        BlockStructure::Rectangular,
        rhs,
        BlockStructure::Rectangular,
        1.0,
        Par::Seq,
    );
    mirror_lower(&mut out);
    out
}

/// `Aᵀ B` without materializing the transpose. `nalgebra`'s own `tr_mul`
/// takes one dot product per entry and is an order of magnitude slower.
pub fn transpose_product(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.nrows(), b.nrows(), "transpose_product shape");
    let mut out = DenseMatrix::zeros(a.ncols(), b.ncols());
    if out.is_empty() || a.nrows() == 0 {
        return out;
    }
    let lhs = MatRef::from_column_major_slice(a.as_slice(), a.nrows(), a.ncols());
    let rhs = MatRef::from_column_major_slice(b.as_slice(), b.nrows(), b.ncols());
    faer::linalg::matmul::matmul(
        MatMut::from_column_major_slice_mut(out.as_mut_slice(), a.ncols(), b.ncols()),
        Accum::Replace,
        lhs.transpose(),
        rhs,
        1.0,
        Par::Seq,
    );
    out
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(a: &DenseMatrix) -> Vector {
    let mut ev = SymmetricEigen::new(a.clone()).eigenvalues;
    ev.as_mut_slice().sort_by(|x, y| x.total_cmp(y));
    ev
}

/// A lower Cholesky factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DenseMatrix,
}

impl Cholesky {
    /// Factors a symmetric positive-definite matrix.
    pub fn new(a: &DenseMatrix) -> Result<Self> {
        check_symmetric(a)?;
        Self::new_unchecked(a.clone())
    }

    /// Factors without the symmetry check; only the lower triangle is read.
    pub fn new_unchecked(mut a: DenseMatrix) -> Result<Self> {
        let n = a.nrows();
        let mut k = 0;
        while k < n {
            let nb = CHOLESKY_BLOCK.min(n - k);
            factor_panel(&mut a, k, nb)?;
            let rest = n - k - nb;
            if rest > 0 {
                let panel = a.view((k + nb, k), (rest, nb)).clone_owned();
                let mut start = 0;
                while start < rest {
                    let width = CHOLESKY_BLOCK.min(rest - start);
                    let lower = panel.rows(start, rest - start);
                    let block_t = panel.rows(start, width).transpose();
                    a.view_mut((k + nb + start, k + nb + start), (rest - start, width))
                        .gemm(-1.0, &lower, &block_t, 1.0);
                    start += width;
                }
            }
            k += nb;
        }
        for j in 0..n {
            for i in 0..j {
                a[(i, j)] = 0.0;
            }
        }
        Ok(Self { l: a })
    }

    pub fn l(&self) -> &DenseMatrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L y = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        let l = self.l.as_slice();
        for j in 0..n {
            let col = &l[j * n..(j + 1) * n];
            let yj = b[j] / col[j];
            b[j] = yj;
            if yj != 0.0 {
                for i in (j + 1)..n {
                    b[i] -= yj * col[i];
                }
            }
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        let l = self.l.as_slice();
        for j in (0..n).rev() {
            let col = &l[j * n..(j + 1) * n];
            let mut acc = b[j];
            for i in (j + 1)..n {
                acc -= col[i] * b[i];
            }
            b[j] = acc / col[j];
        }
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        let mut x = b.clone();
        self.forward_in_place(x.as_mut_slice());
        self.backward_in_place(x.as_mut_slice());
        x
    }

    pub fn solve(&self, b: &DenseMatrix) -> DenseMatrix {
        let mut x = b.clone();
        let n = self.dim();
        for j in 0..x.ncols() {
            let col = &mut x.as_mut_slice()[j * n..(j + 1) * n];
            self.forward_in_place(col);
            self.backward_in_place(col);
        }
        x
    }
}

fn factor_panel(a: &mut DenseMatrix, k: usize, nb: usize) -> Result<()> {
    let n = a.nrows();
    let data = a.as_mut_slice();
    for j in k..k + nb {
        for p in k..j {
            let ljp = data[j + p * n];
            if ljp == 0.0 {
                continue;
            }
            let (head, tail) = data.split_at_mut(j * n);
            let src = &head[p * n..p * n + n];
            let dst = &mut tail[..n];
            for i in j..n {
                dst[i] -= ljp * src[i];
            }
        }
        let pivot = data[j + j * n];
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: pivot });
        }
        let d = pivot.sqrt();
        let col = &mut data[j * n..(j + 1) * n];
        col[j] = d;
        let inv = 1.0 / d;
        for v in &mut col[j + 1..] {
            *v *= inv;
        }
    }
    Ok(())
}

/// Solves `A X = B` for symmetric positive-definite `A`.
pub fn cholesky_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if b.nrows() != a.nrows() {
        return Err(Error::DimensionMismatch {
            context: "cholesky_solve right-hand side",
            expected: a.nrows(),
            found: b.nrows(),
        });
    }
    Ok(Cholesky::new(a)?.solve(b))
}

/// Outcome of [`conjugate_gradient`].
#[derive(Debug, Clone)]
pub struct CgReport {
    pub solution: Vector,
    pub iterations: usize,
    /// `‖A x − b‖ / ‖b‖`, recomputed from the returned solution.
    pub relative_residual: f64,
    /// False when `max_iter` was reached before the tolerance.
    pub converged: bool,
}

/// Unpreconditioned conjugate gradient from `x = 0`.
///
/// Reaching `max_iter` is not an error; it is reported through
/// [`CgReport::converged`]. The returned residual is the true residual of
/// the returned solution, not the recursively updated one.
pub fn conjugate_gradient(op: &dyn LinearOperator, b: &Vector, tol: f64, max_iter: usize) -> Result<CgReport> {
    if b.len() != op.dim() {
        return Err(Error::DimensionMismatch {
            context: "conjugate_gradient right-hand side",
            expected: op.dim(),
            found: b.len(),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::ArgumentOutOfRange(format!("cg tolerance {tol}")));
    }
    let b_norm = b.norm();
    if !b_norm.is_finite() {
        return Err(Error::NonFiniteEncountered("conjugate_gradient rhs"));
    }
    let scale = reference(b_norm);
    let mut x = Vector::zeros(b.len());
    if b_norm < TINY_NORM {
        return Ok(CgReport {
            solution: x,
            iterations: 0,
            relative_residual: b_norm,
            converged: true,
        });
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let mut iterations = 0;
    loop {
        if iterations >= max_iter {
            let residual = (b - op.apply(&x)).norm() / scale;
            return Ok(CgReport {
                solution: x,
                iterations,
                relative_residual: residual,
                converged: residual <= tol,
            });
        }
        let ap = op.apply(&p);
        let pap = p.dot(&ap);
        if !pap.is_finite() {
            return Err(Error::NonFiniteEncountered("conjugate_gradient"));
        }
        if pap <= 0.0 {
            // Breakdown: the operator is numerically singular along p.
            let residual = (b - op.apply(&x)).norm() / scale;
            return Ok(CgReport {
                solution: x,
                iterations,
                relative_residual: residual,
                converged: residual <= tol,
            });
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        iterations += 1;
        let rr_new = r.dot(&r);
        if rr_new.sqrt() <= tol * scale {
            let true_r = b - op.apply(&x);
            let residual = true_r.norm() / scale;
            if residual <= tol {
                return Ok(CgReport {
                    solution: x,
                    iterations,
                    relative_residual: residual,
                    converged: true,
                });
            }
            // The recursive residual drifted; restart from the true one.
            r = true_r;
            rr = r.dot(&r);
            p = r.clone();
            continue;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        p.axpy(1.0, &r, beta);
    }
}

fn start_vector(n: usize) -> Vector {
    let mut v = Vector::from_element(n, 1.0);
    v[0] += 1e-3;
    let norm = v.norm();
    v / norm
}

/// Power iteration returning the Rayleigh quotient of the dominant
/// eigenvector. Converged when the relative change of the quotient stays
/// within `tol` for three consecutive steps.
fn power_iteration(apply: impl Fn(&Vector) -> Vector, n: usize, tol: f64, max_iter: usize) -> Result<f64> {
    if n == 0 {
        return Ok(0.0);
    }
    let mut v = start_vector(n);
    let mut previous = f64::NAN;
    let mut stable = 0;
    for _ in 0..max_iter {
        let w = apply(&v);
        let quotient = v.dot(&w);
        let norm = w.norm();
        if !norm.is_finite() || !quotient.is_finite() {
            return Err(Error::NonFiniteEncountered("power iteration"));
        }
        if norm == 0.0 {
            return Ok(0.0);
        }
        if previous.is_finite() {
            let change = (quotient - previous).abs() / reference(quotient.abs());
            if change <= tol {
                stable += 1;
                if stable >= POWER_STABLE_STEPS {
                    return Ok(quotient);
                }
            } else {
                stable = 0;
            }
        }
        previous = quotient;
        v = w / norm;
    }
    Err(Error::Stagnation { iterations: max_iter })
}

/// Largest and smallest eigenvalue of a symmetric positive-semidefinite
/// operator by power iteration on `op` and on `λ_max·I − op`.
pub fn extremal_eigs(op: &dyn LinearOperator, tol: f64, max_iter: usize) -> Result<(f64, f64)> {
    let n = op.dim();
    let lambda_max = power_iteration(|v| op.apply(v), n, tol, max_iter)?;
    let shifted_top = power_iteration(
        |v| {
            let mut out = op.apply(v);
            out.axpy(lambda_max, v, -1.0);
            out
        },
        n,
        tol,
        max_iter,
    )?;
    Ok((lambda_max, lambda_max - shifted_top))
}

/// `‖A − B‖₂` for symmetric `A`, `B`, by power iteration on `(A − B)²`.
pub fn spectral_norm_sym_diff(a: &DenseMatrix, b: &DenseMatrix, tol: f64) -> Result<f64> {
    if a.shape() != b.shape() || a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            context: "spectral_norm_sym_diff",
            expected: a.nrows(),
            found: b.nrows(),
        });
    }
    let diff = a - b;
    if diff.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let squared = power_iteration(|v| &diff * (&diff * v), a.nrows(), tol, POWER_MAX_ITER)?;
    Ok(squared.max(0.0).sqrt())
}

/// Moore–Penrose pseudo-inverse of a symmetric positive-semidefinite matrix.
/// Eigenvalues at or below `rank_tol · λ_max` are treated as zero.
pub fn pseudo_inverse_psd(a: &DenseMatrix, rank_tol: f64) -> Result<DenseMatrix> {
    check_symmetric(a)?;
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let mut out = DenseMatrix::zeros(n, n);
    if top <= 0.0 {
        return Ok(out);
    }
    let cutoff = rank_tol * top;
    let mut kept = Vec::new();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > cutoff {
            kept.push((k, lambda));
        }
    }
    let mut scaled = DenseMatrix::zeros(n, kept.len());
    let mut basis = DenseMatrix::zeros(n, kept.len());
    for (c, &(k, lambda)) in kept.iter().enumerate() {
        let col = eig.eigenvectors.column(k);
        basis.set_column(c, &col);
        scaled.set_column(c, &(col / lambda));
    }
    out.gemm(1.0, &scaled, &basis.transpose(), 0.0);
    let sym = (&out + out.transpose()) * 0.5;
    Ok(sym)
}

/// Factorized `(Z C Zᵀ + μI)⁻¹` via the matrix inversion lemma.
///
/// With `C = L Lᵀ` and `U = Z L` the inverse is
/// `(1/μ)[I − U (μI + UᵀU)⁻¹ Uᵀ]`, algebraically the same as
/// `(1/μ)[I − Z(μC⁻¹ + ZᵀZ)⁻¹Zᵀ]` but without forming `C⁻¹`.
/// Setup is `O(m²n + m³)`; each solve is `O(mn)`. The n × n matrix is never
/// formed.
#[derive(Debug, Clone)]
pub struct WoodburySolver {
    u: DenseMatrix,
    route: WoodburyRoute,
    mu: f64,
}

/// `m < n` factors the m × m capacitance matrix `μI + UᵀU`; otherwise the
/// n × n matrix `UUᵀ + μI` is factored directly, which is both cheaper and
/// free of the cancellation in the identity.
#[derive(Debug, Clone)]
enum WoodburyRoute {
    Capacitance(Cholesky),
    Direct(Cholesky),
}

impl WoodburySolver {
    pub fn new(z: &DenseMatrix, c: &DenseMatrix, mu: f64) -> Result<Self> {
        if c.nrows() != z.ncols() {
            return Err(Error::DimensionMismatch {
                context: "woodbury core matrix",
                expected: z.ncols(),
                found: c.nrows(),
            });
        }
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::ArgumentOutOfRange(format!("mu = {mu}")));
        }
        let c_factor = Cholesky::new(c)?;
        let u = z * c_factor.l();
        let route = if u.ncols() < u.nrows() {
            let mut inner = inner_gram(&u);
            for i in 0..inner.nrows() {
                inner[(i, i)] += mu;
            }
            WoodburyRoute::Capacitance(Cholesky::new_unchecked(inner)?)
        } else {
            let mut full = outer_gram(&u);
            for i in 0..full.nrows() {
                full[(i, i)] += mu;
            }
            WoodburyRoute::Direct(Cholesky::new_unchecked(full)?)
        };
        Ok(Self { u, route, mu })
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    fn apply_operator(&self, x: &Vector) -> Vector {
        let mut out = &self.u * self.u.tr_mul(x);
        out.axpy(self.mu, x, 1.0);
        out
    }

    fn solve_once(&self, v: &Vector) -> Vector {
        match &self.route {
            WoodburyRoute::Capacitance(inner) => {
                let coeffs = inner.solve_vec(&self.u.tr_mul(v));
                let mut x = v.clone();
                x.gemv(-1.0, &self.u, &coeffs, 1.0);
                x / self.mu
            }
            WoodburyRoute::Direct(full) => full.solve_vec(v),
        }
    }

    /// `(UUᵀ + μI)⁻¹ v` with one step of iterative refinement.
    pub fn solve(&self, v: &Vector) -> Vector {
        let mut x = self.solve_once(v);
        let residual = v - self.apply_operator(&x);
        x += self.solve_once(&residual);
        x
    }
}

/// `(Z C Zᵀ + μI)⁻¹ v` without forming the n × n matrix.
pub fn woodbury_inverse_apply(z: &DenseMatrix, c: &DenseMatrix, mu: f64, v: &Vector) -> Result<Vector> {
    if v.len() != z.nrows() {
        return Err(Error::DimensionMismatch {
            context: "woodbury_inverse_apply vector",
            expected: z.nrows(),
            found: v.len(),
        });
    }
    Ok(WoodburySolver::new(z, c, mu)?.solve(v))
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cholesky_residual_small(seed in any::<u64>(), n in 1usize..40) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let a = m.tr_mul(&m) + DenseMatrix::identity(n, n) * 1e-2;
            let b = DenseMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
            let x = cholesky_solve(&a, &b).unwrap();
            prop_assert!((&a * &x - &b).norm() / b.norm() <= 1e-9);
        }

        #[test]
        fn woodbury_residual_small(seed in any::<u64>(), n in 2usize..100, m in 1usize..20, mu_exp in -8i32..1) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let z = DenseMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
            let g = DenseMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
            let c = g.tr_mul(&g) + DenseMatrix::identity(m, m);
            let v = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let mu = 10f64.powi(mu_exp);
            let x = woodbury_inverse_apply(&z, &c, mu, &v).unwrap();
            let h = &z * &c * z.transpose() + DenseMatrix::identity(n, n) * mu;
            let reference = crate::oracle::refined_dense_solve(&h, |y| &z * (&c * z.tr_mul(y)) + y * mu, &v);
            prop_assert!((&x - &reference).norm() / reference.norm() <= 1e-8);
        }
    }
}
