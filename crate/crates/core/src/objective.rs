//! Regularized kernel empirical risk
//!
//! ```text
//! F(w) = c_loss · Σᵢ ℓ(yᵢ, (Kw)ᵢ) + (c_reg / 2) · wᵀKw
//! ∇F(w) = K (c_loss · r(w) + c_reg · w),      rᵢ = ∂ℓ/∂t (yᵢ, (Kw)ᵢ)
//! H(w)  = c_loss · K D(w) K + c_reg · K,      D(w)ᵢᵢ = ∂²ℓ/∂t² (yᵢ, (Kw)ᵢ)
//! ```
//!
//! plus the two approximate Hessian operators used by the randomized
//! optimizers.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{gram_matrix, GaussianKernel, NystromFactors};
use crate::linalg::{outer_gram, transpose_product, Cholesky, DenseMatrix, LinearOperator, Vector, WoodburySolver};

/// Default upper bound on `n` for materializing n × n Hessians.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// A twice-differentiable loss `ℓ(y, t)` in the margin `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `log(1 + exp(−y t))`.
    Logistic,
    /// `(t − y)² / 2`.
    Quadratic,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Loss {
    pub fn value(self, y: f64, t: f64) -> f64 {
        match self {
            Loss::Logistic => {
                let yt = y * t;
                (-yt.abs()).exp().ln_1p() + (-yt).max(0.0)
            }
            Loss::Quadratic => 0.5 * (t - y) * (t - y),
        }
    }

    pub fn d1(self, y: f64, t: f64) -> f64 {
        match self {
            Loss::Logistic => -y * sigmoid(-y * t),
            Loss::Quadratic => t - y,
        }
    }

    pub fn d2(self, y: f64, t: f64) -> f64 {
        match self {
            Loss::Logistic => sigmoid(y * t) * sigmoid(-y * t),
            Loss::Quadratic => 1.0,
        }
    }

    /// Upper bound on `d2` over all inputs.
    pub fn curvature_bound(self) -> f64 {
        match self {
            Loss::Logistic => 0.25,
            Loss::Quadratic => 1.0,
        }
    }
}

/// Weights of the loss sum and of the quadratic regularizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    pub c_loss: f64,
    pub c_reg: f64,
}

impl Scaling {
    pub fn new(c_loss: f64, c_reg: f64) -> Result<Self> {
        if !(c_loss > 0.0 && c_loss.is_finite() && c_reg > 0.0 && c_reg.is_finite()) {
            return Err(Error::ArgumentOutOfRange(format!("scaling ({c_loss}, {c_reg})")));
        }
        Ok(Self { c_loss, c_reg })
    }
}

/// How `(c_loss, c_reg)` derive from `λ` and `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingPreset {
    /// Summed loss with `(λ/2)‖f‖²`: `(1, λ)`.
    Theory,
    /// Averaged loss with `λ‖w‖²_K`: `(1/n, 2λ)`.
    #[default]
    Experiment,
}

impl ScalingPreset {
    pub fn resolve(self, lambda: f64, n: usize) -> Result<Scaling> {
        match self {
            ScalingPreset::Theory => Scaling::new(1.0, lambda),
            ScalingPreset::Experiment => Scaling::new(1.0 / n as f64, 2.0 * lambda),
        }
    }
}

/// A Hessian approximation usable as a Newton-system operator.
pub trait HessianOperator: LinearOperator {
    /// `H⁻¹ v` when a direct inverse is available.
    fn inverse_apply(&self, _v: &Vector) -> Option<Vector> {
        None
    }
}

/// Which Hessian to build at a point.
#[derive(Debug, Clone)]
pub enum HessianVariant {
    ExactDense,
    RfnWoodbury {
        z: DenseMatrix,
        mu: f64,
    },
    SsnNystrom {
        factors: NystromFactors,
        mu: f64,
        rescale: bool,
    },
}

/// The exact Hessian with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct DenseHessian {
    pub matrix: DenseMatrix,
    factor: Option<Cholesky>,
}

impl LinearOperator for DenseHessian {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, v: &Vector) -> Vector {
        &self.matrix * v
    }
}

impl HessianOperator for DenseHessian {
    fn inverse_apply(&self, v: &Vector) -> Option<Vector> {
        self.factor.as_ref().map(|f| f.solve_vec(v))
    }
}

/// `Z [c_loss ZᵀD Z + c_reg I] Zᵀ + μI` with a Woodbury inverse.
#[derive(Debug, Clone)]
pub struct RfnHessian {
    z: DenseMatrix,
    core: DenseMatrix,
    mu: f64,
    solver: WoodburySolver,
}

impl RfnHessian {
    pub fn core(&self) -> &DenseMatrix {
        &self.core
    }

    pub fn solve(&self, v: &Vector) -> Vector {
        self.solver.solve(v)
    }

    /// Dense n × n assembly, for diagnostics and tests.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = &self.z * &self.core * self.z.transpose();
        for i in 0..out.nrows() {
            out[(i, i)] += self.mu;
        }
        out
    }
}

impl LinearOperator for RfnHessian {
    fn dim(&self) -> usize {
        self.z.nrows()
    }

    fn apply(&self, v: &Vector) -> Vector {
        let inner = &self.core * self.z.tr_mul(v);
        let mut out = &self.z * inner;
        out.axpy(self.mu, v, 1.0);
        out
    }
}

impl HessianOperator for RfnHessian {
    fn inverse_apply(&self, v: &Vector) -> Option<Vector> {
        Some(self.solver.solve(v))
    }
}

/// `s·c_loss Σ_{i∈I} Dᵢᵢ K(:,i)K(i,:) + c_reg K(V,I)K(I,I)†K(I,V) + μI`.
#[derive(Debug, Clone)]
pub struct SsnHessian {
    k_vi: DenseMatrix,
    k_ii_pinv: DenseMatrix,
    weights: Vector,
    c_reg: f64,
    mu: f64,
}

impl LinearOperator for SsnHessian {
    fn dim(&self) -> usize {
        self.k_vi.nrows()
    }

    fn apply(&self, v: &Vector) -> Vector {
        let projected = self.k_vi.tr_mul(v);
        let mut inner = &self.k_ii_pinv * &projected;
        inner *= self.c_reg;
        inner += self.weights.component_mul(&projected);
        let mut out = &self.k_vi * inner;
        out.axpy(self.mu, v, 1.0);
        out
    }
}

impl HessianOperator for SsnHessian {}

/// Gram matrix, labels, loss and regularization of one training problem.
#[derive(Debug, Clone)]
pub struct Problem {
    gram: DenseMatrix,
    labels: Vector,
    inputs: Option<DenseMatrix>,
    kernel: Option<GaussianKernel>,
    loss: Loss,
    lambda: f64,
    scaling: Scaling,
    dense_cap: usize,
}

impl Problem {
    pub fn new(data: &Dataset, kernel: GaussianKernel, loss: Loss, lambda: f64, preset: ScalingPreset) -> Result<Self> {
        let gram = gram_matrix(&data.x, &kernel)?;
        let scaling = preset.resolve(lambda, data.len())?;
        let mut problem = Self::from_gram(gram, data.y.clone(), loss, lambda, scaling)?;
        problem.inputs = Some(data.x.clone());
        problem.kernel = Some(kernel);
        Ok(problem)
    }

    /// A problem over an arbitrary symmetric PSD gram matrix. Random-feature
    /// methods need inputs and a kernel and will refuse such a problem.
    pub fn from_gram(gram: DenseMatrix, labels: Vector, loss: Loss, lambda: f64, scaling: Scaling) -> Result<Self> {
        if gram.nrows() != gram.ncols() || gram.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "gram matrix vs labels",
                expected: labels.len(),
                found: gram.nrows(),
            });
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::ArgumentOutOfRange(format!("lambda = {lambda}")));
        }
        Ok(Self {
            gram,
            labels,
            inputs: None,
            kernel: None,
            loss,
            lambda,
            scaling,
            dense_cap: DEFAULT_DENSE_CAP,
        })
    }

    pub fn with_dense_cap(mut self, cap: usize) -> Self {
        self.dense_cap = cap;
        self
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn gram(&self) -> &DenseMatrix {
        &self.gram
    }

    pub fn labels(&self) -> &Vector {
        &self.labels
    }

    pub fn inputs(&self) -> Option<&DenseMatrix> {
        self.inputs.as_ref()
    }

    pub fn kernel(&self) -> Option<&GaussianKernel> {
        self.kernel.as_ref()
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }

    pub fn dense_cap(&self) -> usize {
        self.dense_cap
    }

    fn check_dim(&self, w: &Vector) -> Result<()> {
        if w.len() != self.n() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: self.n(),
                found: w.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_dense_cap(&self) -> Result<()> {
        if self.n() > self.dense_cap {
            return Err(Error::DenseCapExceeded {
                n: self.n(),
                cap: self.dense_cap,
            });
        }
        Ok(())
    }

    /// `K w`.
    pub fn margins(&self, w: &Vector) -> Vector {
        &self.gram * w
    }

    /// `F(w)` given the precomputed margins `K w`.
    pub fn objective_from_margins(&self, w: &Vector, kw: &Vector) -> f64 {
        let loss: f64 = self
            .labels
            .iter()
            .zip(kw.iter())
            .map(|(&y, &t)| self.loss.value(y, t))
            .sum();
        self.scaling.c_loss * loss + 0.5 * self.scaling.c_reg * w.dot(kw)
    }

    pub fn objective_value(&self, w: &Vector) -> Result<f64> {
        self.check_dim(w)?;
        let value = self.objective_from_margins(w, &self.margins(w));
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFiniteResult("objective"))
        }
    }

    pub fn gradient_from_margins(&self, w: &Vector, kw: &Vector) -> Result<Vector> {
        let Scaling { c_loss, c_reg } = self.scaling;
        let combined = Vector::from_fn(self.n(), |i, _| {
            c_loss * self.loss.d1(self.labels[i], kw[i]) + c_reg * w[i]
        });
        let g = &self.gram * combined;
        if g.iter().all(|v| v.is_finite()) {
            Ok(g)
        } else {
            Err(Error::NonFiniteResult("gradient"))
        }
    }

    pub fn gradient(&self, w: &Vector) -> Result<Vector> {
        self.check_dim(w)?;
        self.gradient_from_margins(w, &self.margins(w))
    }

    pub fn d_from_margins(&self, kw: &Vector) -> Result<Vector> {
        let d = Vector::from_fn(self.n(), |i, _| self.loss.d2(self.labels[i], kw[i]));
        if d.iter().all(|v| v.is_finite()) {
            Ok(d)
        } else {
            Err(Error::NonFiniteResult("loss curvature"))
        }
    }

    /// Diagonal of `D(w)`.
    pub fn d_diagonal(&self, w: &Vector) -> Result<Vector> {
        self.check_dim(w)?;
        self.d_from_margins(&self.margins(w))
    }

    /// `c_loss·K D K + c_reg·K` given `D(w)`.
    pub fn hessian_from_d(&self, d: &Vector) -> Result<DenseMatrix> {
        self.check_dense_cap()?;
        let c_loss = self.scaling.c_loss;
        let mut scaled = self.gram.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= (c_loss * d[j]).sqrt();
        }
        let mut h = outer_gram(&scaled);
        h.zip_apply(&self.gram, |hij, kij| *hij += self.scaling.c_reg * kij);
        if h.iter().all(|v| v.is_finite()) {
            Ok(h)
        } else {
            Err(Error::NonFiniteResult("hessian"))
        }
    }

    pub fn hessian_dense(&self, w: &Vector) -> Result<DenseMatrix> {
        let d = self.d_diagonal(w)?;
        self.hessian_from_d(&d)
    }

    /// The random-feature Hessian at `w` for feature matrix `z`. `D(w)` uses
    /// the exact gram matrix.
    pub fn hessian_rfn(&self, w: &Vector, z: &DenseMatrix, mu: f64) -> Result<RfnHessian> {
        let d = self.d_diagonal(w)?;
        self.hessian_rfn_from_d(&d, z, mu)
    }

    pub fn hessian_rfn_from_d(&self, d: &Vector, z: &DenseMatrix, mu: f64) -> Result<RfnHessian> {
        if z.nrows() != self.n() {
            return Err(Error::DimensionMismatch {
                context: "feature matrix rows",
                expected: self.n(),
                found: z.nrows(),
            });
        }
        let Scaling { c_loss, c_reg } = self.scaling;
        let scale = d * c_loss;
        let mut weighted = z.clone();
        for mut col in weighted.column_iter_mut() {
            col.component_mul_assign(&scale);
        }
        let mut core = transpose_product(z, &weighted);
        for i in 0..core.nrows() {
            core[(i, i)] += c_reg;
        }
        crate::linalg::mirror_lower(&mut core);
        let solver = WoodburySolver::new(z, &core, mu)?;
        Ok(RfnHessian {
            z: z.clone(),
            core,
            mu,
            solver,
        })
    }

    /// The Nyström sub-sampled Hessian. With `rescale` the data term is
    /// multiplied by `n/|I|`, making it unbiased for `c_loss·KDK`.
    pub fn hessian_ssn(&self, w: &Vector, factors: &NystromFactors, mu: f64, rescale: bool) -> Result<SsnHessian> {
        let d = self.d_diagonal(w)?;
        self.hessian_ssn_from_d(&d, factors, mu, rescale)
    }

    pub fn hessian_ssn_from_d(
        &self,
        d: &Vector,
        factors: &NystromFactors,
        mu: f64,
        rescale: bool,
    ) -> Result<SsnHessian> {
        if !(mu > 0.0) {
            return Err(Error::ArgumentOutOfRange(format!("mu = {mu}")));
        }
        if factors.k_vi.nrows() != self.n() {
            return Err(Error::DimensionMismatch {
                context: "Nyström factors",
                expected: self.n(),
                found: factors.k_vi.nrows(),
            });
        }
        let s = if rescale {
            self.n() as f64 / factors.subset.len() as f64
        } else {
            1.0
        };
        let c_loss = self.scaling.c_loss;
        let weights = Vector::from_iterator(factors.subset.len(), factors.subset.iter().map(|&i| s * c_loss * d[i]));
        Ok(SsnHessian {
            k_vi: factors.k_vi.clone(),
            k_ii_pinv: factors.k_ii_pinv.clone(),
            weights,
            c_reg: self.scaling.c_reg,
            mu,
        })
    }

    /// Builds the requested Hessian variant at `w`.
    pub fn hessian(&self, w: &Vector, variant: &HessianVariant) -> Result<Box<dyn HessianOperator>> {
        Ok(match variant {
            HessianVariant::ExactDense => {
                let matrix = self.hessian_dense(w)?;
                let factor = Cholesky::new_unchecked(matrix.clone()).ok();
                Box::new(DenseHessian { matrix, factor })
            }
            HessianVariant::RfnWoodbury { z, mu } => Box::new(self.hessian_rfn(w, z, *mu)?),
            HessianVariant::SsnNystrom { factors, mu, rescale } => {
                Box::new(self.hessian_ssn(w, factors, *mu, *rescale)?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_two_gaussians;
    use crate::kernel::nystrom_factors;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(n: usize, seed: u64) -> Problem {
        let ds = synth_two_gaussians(n, 3, 2.0, seed).unwrap();
        Problem::new(
            &ds,
            GaussianKernel::new(0.7).unwrap(),
            Loss::Logistic,
            1e-2,
            ScalingPreset::Experiment,
        )
        .unwrap()
    }

    fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vector {
        Vector::from_fn(n, |_, _| rng.random_range(-scale..scale))
    }

    fn rel(a: &Vector, b: &Vector) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn logistic_is_stable_at_extremes() {
        let l = Loss::Logistic;
        assert!((l.value(1.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(l.value(1.0, -800.0).is_finite() && (l.value(1.0, -800.0) - 800.0).abs() < 1e-9);
        assert!(l.value(1.0, 800.0) >= 0.0 && l.value(1.0, 800.0) < 1e-300);
        assert!(l.d2(1.0, 50.0) < 1e-20 && l.d2(-1.0, 50.0) < 1e-20);
        assert_eq!(l.d2(1.0, 0.0), 0.25);
    }

    #[test]
    fn loss_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for loss in [Loss::Logistic, Loss::Quadratic] {
            for _ in 0..200 {
                let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let t: f64 = rng.random_range(-6.0..6.0);
                let h = 1e-6 * (1.0 + t.abs());
                let fd1 = (loss.value(y, t + h) - loss.value(y, t - h)) / (2.0 * h);
                let fd2 = (loss.d1(y, t + h) - loss.d1(y, t - h)) / (2.0 * h);
                assert!((fd1 - loss.d1(y, t)).abs() <= 1e-5 * loss.d1(y, t).abs().max(1e-3));
                assert!((fd2 - loss.d2(y, t)).abs() <= 1e-5 * loss.d2(y, t).abs().max(1e-3));
            }
        }
    }

    #[test]
    fn curvature_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
            worst = worst.max(Loss::Logistic.d2(y, rng.random_range(-40.0..40.0)));
        }
        assert!(worst <= 0.25 + 1e-15);
    }

    #[test]
    fn scaling_presets() {
        assert_eq!(
            ScalingPreset::Theory.resolve(0.1, 10).unwrap(),
            Scaling {
                c_loss: 1.0,
                c_reg: 0.1
            }
        );
        assert_eq!(
            ScalingPreset::Experiment.resolve(0.1, 10).unwrap(),
            Scaling {
                c_loss: 0.1,
                c_reg: 0.2
            }
        );
        assert!(Scaling::new(0.0, 1.0).is_err());
        assert!(Scaling::new(1.0, f64::NAN).is_err());
    }

    #[test]
    fn objective_at_zero_is_log_two() {
        let p = instance(20, 3);
        let f = p.objective_value(&Vector::zeros(20)).unwrap();
        assert!((f - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn objective_matches_naive_sum() {
        let p = instance(50, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_vector(&mut rng, 50, 1.0);
        let k = p.gram();
        let mut loss = 0.0;
        let mut reg = 0.0;
        for i in 0..50 {
            let mut t = 0.0;
            for j in 0..50 {
                t += k[(i, j)] * w[j];
                reg += w[i] * k[(i, j)] * w[j];
            }
            loss += (1.0 + (-p.labels()[i] * t).exp()).ln();
        }
        let naive = loss / 50.0 + 1e-2 * reg;
        assert!((p.objective_value(&w).unwrap() - naive).abs() <= 1e-12 * naive.abs());
    }

    #[test]
    fn objective_dominated_by_regularizer_for_huge_lambda() {
        let ds = synth_two_gaussians(20, 2, 1.0, 5).unwrap();
        let p = Problem::new(
            &ds,
            GaussianKernel::new(1.0).unwrap(),
            Loss::Logistic,
            1e6,
            ScalingPreset::Experiment,
        )
        .unwrap();
        let w = Vector::from_element(20, 0.1);
        let reg = 1e6 * w.dot(&(p.gram() * &w));
        let f = p.objective_value(&w).unwrap();
        assert!((f - reg).abs() / reg < 1e-6);
    }

    #[test]
    fn gradient_at_zero_is_half_k_y() {
        let p = instance(30, 6);
        let g = p.gradient(&Vector::zeros(30)).unwrap();
        let expected = p.gram() * p.labels() * (-0.5 / 30.0);
        assert!(rel(&g, &expected) < 1e-14);
    }

    #[test]
    fn gradient_pairs_under_label_symmetry() {
        let x = DenseMatrix::from_row_slice(4, 1, &[-2.0, -1.0, 1.0, 2.0]);
        let y = Vector::from_vec(vec![-1.0, -1.0, 1.0, 1.0]);
        let ds = Dataset::new(x, y, "sym", "test").unwrap();
        let p = Problem::new(
            &ds,
            GaussianKernel::new(1.0).unwrap(),
            Loss::Logistic,
            0.1,
            ScalingPreset::Theory,
        )
        .unwrap();
        let g = p.gradient(&Vector::zeros(4)).unwrap();
        assert!((g[0] + g[3]).abs() < 1e-15 && (g[1] + g[2]).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = instance(40, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_vector(&mut rng, 40, 2.0);
        let fd = oracle::fd_gradient(|v| p.objective_value(v).unwrap(), &w);
        assert!(rel(&p.gradient(&w).unwrap(), &fd) <= 1e-5);
    }

    #[test]
    fn d_diagonal_cases() {
        let p = instance(10, 8);
        assert!(p.d_diagonal(&Vector::zeros(10)).unwrap().iter().all(|&d| d == 0.25));
        assert!(matches!(
            p.d_diagonal(&Vector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn hessian_matches_finite_differences_of_gradient() {
        let p = instance(40, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_vector(&mut rng, 40, 2.0);
        let h = p.hessian_dense(&w).unwrap();
        let mut fd = DenseMatrix::zeros(40, 40);
        for j in 0..40 {
            let step = 1e-6 * (1.0 + w[j].abs());
            let mut plus = w.clone();
            plus[j] += step;
            let mut minus = w.clone();
            minus[j] -= step;
            let col = (p.gradient(&plus).unwrap() - p.gradient(&minus).unwrap()) / (2.0 * step);
            fd.set_column(j, &col);
        }
        assert!((&h - &fd).norm() / h.norm() <= 1e-4);
        assert!(crate::linalg::max_asymmetry(&h) == 0.0);
        assert!(oracle::jacobi_eigenvalues(&h)[0] >= -1e-10);
    }

    #[test]
    fn hessian_degenerate_cases() {
        let n = 6;
        let y = Vector::from_vec(vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let scaling = Scaling::new(0.5, 0.3).unwrap();
        let p = Problem::from_gram(DenseMatrix::identity(n, n), y.clone(), Loss::Logistic, 0.15, scaling).unwrap();
        let w = Vector::from_fn(n, |i, _| i as f64 - 2.5);
        let d = p.d_diagonal(&w).unwrap();
        let expected = DenseMatrix::from_diagonal(&d.map(|v| 0.5 * v)) + DenseMatrix::identity(n, n) * 0.3;
        assert!((p.hessian_dense(&w).unwrap() - expected).amax() < 1e-15);

        let k = instance(n, 10).gram().clone();
        let p = Problem::from_gram(k.clone(), y, Loss::Logistic, 0.15, scaling).unwrap();
        let h = p.hessian_from_d(&Vector::zeros(n)).unwrap();
        assert!((h - &k * 0.3).amax() < 1e-15);
    }

    #[test]
    fn dense_cap_is_enforced() {
        let p = instance(10, 11).with_dense_cap(5);
        assert!(matches!(
            p.hessian_dense(&Vector::zeros(10)),
            Err(Error::DenseCapExceeded { n: 10, cap: 5 })
        ));
    }

    #[test]
    fn strong_convexity_floor() {
        let p = instance(30, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = random_vector(&mut rng, 30, 3.0);
        let kmin = oracle::jacobi_eigenvalues(p.gram())[0];
        let hmin = oracle::jacobi_eigenvalues(&p.hessian_dense(&w).unwrap())[0];
        assert!(hmin >= p.scaling().c_reg * kmin - 1e-10);
    }

    fn probe(op: &dyn LinearOperator) -> DenseMatrix {
        let n = op.dim();
        let mut out = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = Vector::zeros(n);
            e[j] = 1.0;
            out.set_column(j, &op.apply(&e));
        }
        out
    }

    fn random_features(p: &Problem, m: usize, seed: u64) -> DenseMatrix {
        let bundle = crate::kernel::sample_features(p.kernel().unwrap(), p.inputs().unwrap().ncols(), m, seed).unwrap();
        crate::kernel::feature_matrix(p.inputs().unwrap(), &bundle).unwrap()
    }

    #[test]
    fn rfn_inverse_contract() {
        let p = instance(80, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = random_vector(&mut rng, 80, 1.0);
        let z = random_features(&p, 10, 13);
        let h = p.hessian_rfn(&w, &z, 1e-3).unwrap();
        let v = random_vector(&mut rng, 80, 1.0);
        let back = h.apply(&h.inverse_apply(&v).unwrap());
        assert!(rel(&back, &v) <= 1e-8);
    }

    #[test]
    fn rfn_zero_features_is_scaled_identity() {
        let p = instance(12, 14);
        let z = DenseMatrix::zeros(12, 3);
        let h = p.hessian_rfn(&Vector::zeros(12), &z, 0.5).unwrap();
        let v = Vector::from_fn(12, |i, _| i as f64);
        assert!(rel(&h.apply(&v), &(&v * 0.5)) < 1e-15);
        assert!(rel(&h.inverse_apply(&v).unwrap(), &(&v * 2.0)) < 1e-15);
    }

    #[test]
    fn rfn_dense_assembly_matches_probes() {
        let p = instance(26, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w = random_vector(&mut rng, 26, 1.0);
        let z = random_features(&p, 7, 15);
        let h = p.hessian_rfn(&w, &z, 1e-2).unwrap();
        let d = p.d_diagonal(&w).unwrap();
        let s = p.scaling();
        let core =
            z.transpose() * DenseMatrix::from_diagonal(&d) * &z * s.c_loss + DenseMatrix::identity(7, 7) * s.c_reg;
        let assembled = &z * core * z.transpose() + DenseMatrix::identity(26, 26) * 1e-2;
        assert!((probe(&h) - &assembled).amax() <= 1e-10);
        assert!((h.to_dense() - assembled).amax() <= 1e-10);
    }

    #[test]
    fn ssn_full_subset_recovers_exact_hessian() {
        let p = instance(30, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let w = random_vector(&mut rng, 30, 1.0);
        let all: Vec<usize> = (0..30).collect();
        let factors = nystrom_factors(p.gram(), &all, 1e-14).unwrap();
        let h = p.hessian_ssn(&w, &factors, 1e-3, false).unwrap();
        let v = random_vector(&mut rng, 30, 1.0);
        let exact = p.hessian_dense(&w).unwrap() * &v + &v * 1e-3;
        assert!(rel(&h.apply(&v), &exact) <= 1e-8);

        let hd = p.hessian_ssn_from_d(&Vector::zeros(30), &factors, 1e-3, true).unwrap();
        let expected = p.gram() * &v * p.scaling().c_reg + &v * 1e-3;
        assert!(rel(&hd.apply(&v), &expected) <= 1e-8);
    }

    #[test]
    fn ssn_probe_is_symmetric_psd() {
        let p = instance(40, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = random_vector(&mut rng, 40, 1.0);
        let factors = nystrom_factors(p.gram(), &[1, 5, 9, 22, 31], 1e-10).unwrap();
        for rescale in [false, true] {
            let h = p.hessian_ssn(&w, &factors, 1e-4, rescale).unwrap();
            let dense = probe(&h);
            assert!(crate::linalg::max_asymmetry(&dense) <= 1e-10);
            assert!(oracle::jacobi_eigenvalues(&dense)[0] >= -1e-10);
        }
        assert!(p.hessian_ssn(&w, &factors, 0.0, true).is_err());
    }

    #[test]
    fn variant_dispatch() {
        let p = instance(16, 18);
        let w = Vector::from_element(16, 0.1);
        let v = Vector::from_element(16, 1.0);
        let exact = p.hessian(&w, &HessianVariant::ExactDense).unwrap();
        let x = exact.inverse_apply(&v).unwrap();
        assert!(rel(&exact.apply(&x), &v) < 1e-6);
        let z = random_features(&p, 4, 18);
        let rfn = p.hessian(&w, &HessianVariant::RfnWoodbury { z, mu: 1e-2 }).unwrap();
        assert!(rfn.inverse_apply(&v).is_some());
        let factors = nystrom_factors(p.gram(), &[0, 3], 1e-10).unwrap();
        let ssn = p
            .hessian(
                &w,
                &HessianVariant::SsnNystrom {
                    factors,
                    mu: 1e-2,
                    rescale: true,
                },
            )
            .unwrap();
        assert!(ssn.inverse_apply(&v).is_none());
    }
}
