//! Gaussian kernel, gram matrices, random Fourier features and Nyström
//! factors.
//!
//! The Gaussian kernel here is `k(x, x') = exp(-σ²‖x − x'‖²/2)`, i.e. `σ`
//! multiplies the inputs rather than dividing them. Its spectral density is
//! a zero-mean Gaussian with covariance `σ²I`, so with
//! `φ(x, ω) = √2 cos(ωᵀx + b)` and `b ~ U[0, 2π)` the estimator
//! `(1/m) Σ φ(x, ω_s) φ(x', ω_s)` is unbiased for `k(x, x')`.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{deterministic_mode, outer_gram_accumulate, pseudo_inverse_psd, DenseMatrix};
use crate::rng::{self, Purpose, StreamRng};

/// A positive-definite kernel on `R^d`.
pub trait Kernel: Sync {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64;
}

/// Shift-invariant kernels whose spectral measure can be sampled.
pub trait RandomFeatureKernel: Kernel {
    /// Draws one frequency vector into `omega`.
    fn sample_frequency<R: Rng + ?Sized>(&self, rng: &mut R, omega: &mut [f64]);
}

/// `exp(-σ²‖x − x'‖²/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    sigma: f64,
}

impl GaussianKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::ArgumentOutOfRange(format!("bandwidth sigma = {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

impl Kernel for GaussianKernel {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        (-0.5 * self.sigma * self.sigma * sq).exp()
    }
}

impl RandomFeatureKernel for GaussianKernel {
    fn sample_frequency<R: Rng + ?Sized>(&self, rng: &mut R, omega: &mut [f64]) {
        for o in omega {
            let z: f64 = StandardNormal.sample(rng);
            *o = self.sigma * z;
        }
    }
}

fn rows_of(x: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

fn check_finite(x: &DenseMatrix) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput("input matrix"))
    }
}

/// `K_ij = k(x_i, x_j)` for the rows of `x`.
pub fn gram_matrix<K: Kernel>(x: &DenseMatrix, kernel: &K) -> Result<DenseMatrix> {
    check_finite(x)?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::ArgumentOutOfRange("gram matrix of zero points".into()));
    }
    let rows = rows_of(x);
    let column = |j: usize| -> Vec<f64> {
        (0..n)
            .map(|i| if i == j { 1.0 } else { kernel.eval(&rows[i], &rows[j]) })
            .collect()
    };
    let columns: Vec<Vec<f64>> = if deterministic_mode() {
        (0..n).map(column).collect()
    } else {
        (0..n).into_par_iter().map(column).collect()
    };
    let mut k = DenseMatrix::zeros(n, n);
    for (j, col) in columns.into_iter().enumerate() {
        k.column_mut(j).copy_from_slice(&col);
    }
    // Pairwise evaluation is symmetric up to summation order; make it exact.
    crate::linalg::mirror_lower(&mut k);
    Ok(k)
}

/// Sampled frequencies and phases defining a feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// `m × d`, one frequency per row.
    pub frequencies: DenseMatrix,
    /// Phases in `[0, 2π)`.
    pub phases: Vec<f64>,
    pub sigma: f64,
    pub seed: u64,
}

impl FeatureBundle {
    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.frequencies.ncols()
    }
}

/// Draws `m` features for inputs of dimension `d`. Each feature consumes its
/// `d` frequency coordinates and then its phase from `rng`, so drawing in
/// chunks yields the same features as drawing all at once.
pub fn sample_features_with<R: Rng + ?Sized>(
    kernel: &GaussianKernel,
    d: usize,
    m: usize,
    rng: &mut R,
    seed: u64,
) -> Result<FeatureBundle> {
    if m == 0 || d == 0 {
        return Err(Error::ArgumentOutOfRange(format!("features m = {m}, d = {d}")));
    }
    let mut frequencies = DenseMatrix::zeros(m, d);
    let mut phases = Vec::with_capacity(m);
    let mut omega = vec![0.0; d];
    for s in 0..m {
        kernel.sample_frequency(rng, &mut omega);
        for (c, &o) in omega.iter().enumerate() {
            frequencies[(s, c)] = o;
        }
        phases.push(rng.random_range(0.0..2.0 * PI));
    }
    Ok(FeatureBundle {
        frequencies,
        phases,
        sigma: kernel.sigma(),
        seed,
    })
}

/// Draws `m` features from the general-purpose stream of `seed`.
pub fn sample_features(kernel: &GaussianKernel, d: usize, m: usize, seed: u64) -> Result<FeatureBundle> {
    let mut rng = rng::stream(seed, Purpose::General, 0);
    sample_features_with(kernel, d, m, &mut rng, seed)
}

/// `Z_is = √(2/m) cos(ω_sᵀ x_i + b_s)`, an n × m matrix with `Z Zᵀ ≈ K`.
pub fn feature_matrix(x: &DenseMatrix, bundle: &FeatureBundle) -> Result<DenseMatrix> {
    feature_block(x, bundle, bundle.len())
}

/// Feature columns of `bundle` scaled as if the full bundle had `total` features.
fn feature_block(x: &DenseMatrix, bundle: &FeatureBundle, total: usize) -> Result<DenseMatrix> {
    if x.ncols() != bundle.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "feature_matrix input dimension",
            expected: bundle.input_dim(),
            found: x.ncols(),
        });
    }
    let n = x.nrows();
    let m = bundle.len();
    let scale = SQRT_2 / (total as f64).sqrt();
    // A general product packs both operands, which costs more than the
    // product itself when d is small; column axpys touch each entry once.
    let direct = x.ncols() <= DIRECT_PROJECTION_MAX_DIM;
    let mut z = if direct {
        DenseMatrix::zeros(n, m)
    } else {
        x * bundle.frequencies.transpose()
    };
    let fill = |(s, col): (usize, &mut [f64])| {
        let b = bundle.phases[s];
        if direct {
            col.fill(b);
            for j in 0..x.ncols() {
                let o = bundle.frequencies[(s, j)];
                for (v, xi) in col.iter_mut().zip(x.column(j).iter()) {
                    *v += o * xi;
                }
            }
        } else {
            for v in col.iter_mut() {
                *v += b;
            }
        }
        cos_in_place(col);
        for v in col.iter_mut() {
            *v *= scale;
        }
    };
    if deterministic_mode() {
        z.as_mut_slice().chunks_mut(n).enumerate().for_each(fill);
    } else {
        z.as_mut_slice().par_chunks_mut(n).enumerate().for_each(fill);
    }
    debug_assert_eq!(z.ncols(), m);
    Ok(z)
}

/// Input dimensions up to this build the projection `XΩᵀ` column by column.
const DIRECT_PROJECTION_MAX_DIM: usize = 8;

/// Arguments beyond this magnitude fall back to `f64::cos`; below it the
/// three-term reduction constant times the quotient is exact.
const FAST_COS_LIMIT: f64 = 1e6;

/// `2π` split so that `k·TWO_PI_HI` and `k·TWO_PI_MID` are exact for
/// `|k| < 2²³`.
const TWO_PI_HI: f64 = 6.283185303211212;
const TWO_PI_MID: f64 = 3.9683743166540886e-09;
const TWO_PI_LO: f64 = 2.068073192717642e-18;

/// Taylor coefficients `(−1)ʲ/(2j)!` of `cos` on `[−π, π]`; the first omitted
/// term is below `3e-20` there.
const COS_TAYLOR: [f64; 15] = [
    1.0,
    -0.5,
    0.041666666666666664,
    -0.001388888888888889,
    2.48015873015873e-05,
    -2.755731922398589e-07,
    2.08767569878681e-09,
    -1.1470745597729725e-11,
    4.779477332387385e-14,
    -1.5619206968586225e-16,
    4.110317623312165e-19,
    -8.896791392450574e-22,
    1.6117375710961184e-24,
    -2.4795962632247976e-27,
    3.279889237069838e-30,
];

/// `cos` over a slice, written branch-free so the loop vectorizes. Feature
/// construction is dominated by `n·m` cosines and scalar libm calls are
/// several times slower. Absolute error is a few ulp of 1. On x86-64 with
/// AVX-512, or AVX2 and FMA, a fused-multiply-add build of the same loop is
/// selected at run time, so the last bit may differ between machines but
/// never between runs on one machine.
fn cos_in_place(values: &mut [f64]) {
    if values.iter().any(|v| !(v.abs() < FAST_COS_LIMIT)) {
        values.iter_mut().for_each(|v| *v = v.cos());
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required target feature was detected above.
            unsafe { cos_fused_wide(values) };
            return;
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required target features were detected above.
            unsafe { cos_fused(values) };
            return;
        }
    }
    cos_kernel::<false>(values);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn cos_fused(values: &mut [f64]) {
    cos_kernel::<true>(values);
}

/// Same arithmetic as [`cos_fused`] in 512-bit lanes, so the results agree
/// bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
unsafe fn cos_fused_wide(values: &mut [f64]) {
    cos_kernel::<true>(values);
}

#[inline(always)]
fn cos_kernel<const FUSED: bool>(values: &mut [f64]) {
    const ROUND: f64 = 6755399441055744.0;
    const INV_TWO_PI: f64 = 0.15915494309189535;
    #[inline(always)]
    fn madd<const FUSED: bool>(a: f64, b: f64, c: f64) -> f64 {
        if FUSED {
            a.mul_add(b, c)
        } else {
            a * b + c
        }
    }
    let c = &COS_TAYLOR;
    for v in values.iter_mut() {
        let x = *v;
        let k = (x * INV_TWO_PI + ROUND) - ROUND;
        let r = ((x - k * TWO_PI_HI) - k * TWO_PI_MID) - k * TWO_PI_LO;
        let r2 = r * r;
        // Two interleaved Horner chains keep the dependency depth short.
        let mut high = c[14];
        for &ci in c[7..14].iter().rev() {
            high = madd::<FUSED>(high, r2, ci);
        }
        let mut low = c[6];
        for &ci in c[..6].iter().rev() {
            low = madd::<FUSED>(low, r2, ci);
        }
        let r4 = r2 * r2;
        let r14 = r4 * r4 * r4 * r2;
        *v = madd::<FUSED>(high, r14, low);
    }
}

/// `Z Zᵀ` for `m` fresh features drawn from `rng`, accumulated in chunks so
/// that `Z` itself is never stored. Useful when `m` is far larger than `n`.
pub fn streamed_feature_gram(
    x: &DenseMatrix,
    kernel: &GaussianKernel,
    m: usize,
    rng: &mut StreamRng,
) -> Result<DenseMatrix> {
    const CHUNK: usize = 4096;
    let n = x.nrows();
    let d = x.ncols();
    let mut acc = DenseMatrix::zeros(n, n);
    let mut done = 0;
    while done < m {
        let take = CHUNK.min(m - done);
        let bundle = sample_features_with(kernel, d, take, rng, 0)?;
        let z = feature_block(x, &bundle, m)?;
        outer_gram_accumulate(&mut acc, &z);
        done += take;
    }
    Ok(acc)
}

/// Nyström factors `K(V, I)` and `K(I, I)†` for a column subset `I`.
#[derive(Debug, Clone)]
pub struct NystromFactors {
    pub subset: Vec<usize>,
    /// n × |I|.
    pub k_vi: DenseMatrix,
    /// |I| × |I|.
    pub k_ii_pinv: DenseMatrix,
}

impl NystromFactors {
    /// Dense `K(V,I) K(I,I)† K(I,V)`.
    pub fn approximation(&self) -> DenseMatrix {
        let left = &self.k_vi * &self.k_ii_pinv;
        let mut out = &left * self.k_vi.transpose();
        let sym = (&out + out.transpose()) * 0.5;
        out.copy_from(&sym);
        out
    }
}

pub fn nystrom_factors(k: &DenseMatrix, subset: &[usize], rank_tol: f64) -> Result<NystromFactors> {
    let n = k.nrows();
    if subset.is_empty() {
        return Err(Error::ArgumentOutOfRange("empty Nyström subset".into()));
    }
    let mut seen = vec![false; n];
    for &i in subset {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        if seen[i] {
            return Err(Error::DuplicateIndex(i));
        }
        seen[i] = true;
    }
    let s = subset.len();
    let k_vi = DenseMatrix::from_fn(n, s, |r, c| k[(r, subset[c])]);
    let k_ii = DenseMatrix::from_fn(s, s, |r, c| k[(subset[r], subset[c])]);
    let k_ii_pinv = pseudo_inverse_psd(&k_ii, rank_tol)?;
    Ok(NystromFactors {
        subset: subset.to_vec(),
        k_vi,
        k_ii_pinv,
    })
}
