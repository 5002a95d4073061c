//! Dense symmetric matrix kernels: eigendecomposition, matrix exponential,
//! the finite-training-time solution operator, condition numbers.
//!
//! Every matrix function here goes through the symmetric eigendecomposition.
//! The matrices are small PSD Gram matrices, so the eigen route is numerically
//! clean and shares one code path. The solver is the classic Householder
//! tridiagonalization + implicit-shift QL pair.

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Symmetric dense matrix. Construction validates finiteness and symmetry
/// (1e-10 relative), then stores the symmetrized (M + M^T)/2.
#[derive(Debug, Clone)]
pub struct SymMatrix {
    mat: Mat,
}

pub const SYMMETRY_RTOL: f64 = 1e-10;

impl SymMatrix {
    pub fn new(mat: Mat) -> Result<Self> {
        if mat.rows() != mat.cols() {
            return Err(Error::DimMismatch {
                context: "SymMatrix",
                expected: mat.rows(),
                got: mat.cols(),
            });
        }
        mat.ensure_finite("SymMatrix")?;
        let scale = mat.max_abs().max(f64::MIN_POSITIVE);
        let mut max_asym = 0.0_f64;
        for i in 0..mat.rows() {
            for j in (i + 1)..mat.cols() {
                max_asym = max_asym.max((mat.get(i, j) - mat.get(j, i)).abs());
            }
        }
        if max_asym > SYMMETRY_RTOL * scale {
            return Err(Error::NotSymmetric { max_asym: max_asym / scale });
        }
        Ok(SymMatrix { mat: mat.symmetrized() })
    }

    /// For matrices symmetric by construction (spectral rebuilds, mirrored
    /// block assembly). Still symmetrizes to kill roundoff.
    pub(crate) fn from_symmetric_parts(mat: Mat) -> Self {
        SymMatrix { mat: mat.symmetrized() }
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn mat(&self) -> &Mat {
        &self.mat
    }

    pub fn into_mat(self) -> Mat {
        self.mat
    }

    pub fn add_diag(&self, c: f64) -> SymMatrix {
        SymMatrix { mat: self.mat.add_diag(c) }
    }

    pub fn identity(n: usize) -> SymMatrix {
        SymMatrix { mat: Mat::identity(n) }
    }
}

/// Eigendecomposition of a symmetric matrix: ascending eigenvalues and
/// orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

const MAX_QL_ITERS: usize = 60;

/// Symmetric eigendecomposition (tred2 + tql2).
pub fn eig_sym(m: &SymMatrix) -> Result<EigenPair> {
    let n = m.dim();
    let mut v = m.mat().clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    if n == 0 {
        return Ok(EigenPair { values: d, vectors: v });
    }
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e)?;
    Ok(EigenPair { values: d, vectors: v })
}

/// Householder reduction to tridiagonal form with accumulated transformations.
fn tred2(v: &mut Mat, d: &mut [f64], e: &mut [f64]) {
    let n = v.rows();
    for j in 0..n {
        d[j] = v.get(n - 1, j);
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for item in d.iter().take(i) {
            scale += item.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v.get(i - 1, j);
                v.set(i, j, 0.0);
                v.set(j, i, 0.0);
            }
        } else {
            for item in d.iter_mut().take(i) {
                *item /= scale;
                h += *item * *item;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for item in e.iter_mut().take(i) {
                *item = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v.set(j, i, f);
                g = e[j] + v.get(j, j) * f;
                for k in (j + 1)..i {
                    g += v.get(k, j) * d[k];
                    e[k] += v.get(k, j) * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    let t = v.get(k, j) - (f * e[k] + g * d[k]);
                    v.set(k, j, t);
                }
                d[j] = v.get(i - 1, j);
                v.set(i, j, 0.0);
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        v.set(n - 1, i, v.get(i, i));
        v.set(i, i, 1.0);
        let h = d[i + 1];
        if h != 0.0 {
            for (k, item) in d.iter_mut().enumerate().take(i + 1) {
                *item = v.get(k, i + 1) / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v.get(k, i + 1) * v.get(k, j);
                }
                for k in 0..=i {
                    let t = v.get(k, j) - g * d[k];
                    v.set(k, j, t);
                }
            }
        }
        for k in 0..=i {
            v.set(k, i + 1, 0.0);
        }
    }
    for j in 0..n {
        d[j] = v.get(n - 1, j);
        v.set(n - 1, j, 0.0);
    }
    v.set(n - 1, n - 1, 1.0);
    e[0] = 0.0;
}

/// Implicit-shift QL iteration on the tridiagonal form, eigenvalues sorted
/// ascending and vectors permuted to match.
fn tql2(v: &mut Mat, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = v.rows();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0_f64;
    let mut tst1 = 0.0_f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_QL_ITERS {
                    return Err(Error::EigFailed { iterations: iter });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for item in d.iter_mut().take(n).skip(l + 2) {
                    *item -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v.get(k, i + 1);
                        v.set(k, i + 1, s * v.get(k, i) + c * h);
                        v.set(k, i, c * v.get(k, i) - s * h);
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }

    // selection sort, ascending, vectors follow
    for i in 0..n.saturating_sub(1) {
        let mut k = i;
        let mut p = d[i];
        for j in (i + 1)..n {
            if d[j] < p {
                k = j;
                p = d[j];
            }
        }
        if k != i {
            d[k] = d[i];
            d[i] = p;
            for r in 0..n {
                let t = v.get(r, i);
                v.set(r, i, v.get(r, k));
                v.set(r, k, t);
            }
        }
    }
    Ok(())
}

/// Rebuilds V diag(f(w)) V^T from an eigendecomposition.
fn spectral_rebuild(pair: &EigenPair, f: impl Fn(f64) -> f64) -> SymMatrix {
    let n = pair.values.len();
    let mut vd = pair.vectors.clone();
    for i in 0..n {
        for j in 0..n {
            vd.set(i, j, vd.get(i, j) * f(pair.values[j]));
        }
    }
    SymMatrix::from_symmetric_parts(vd.matmul_bt(&pair.vectors))
}

/// e^{-s M} via the spectral map. `s = inf` is the projector limit and is
/// defined only when all eigenvalues are strictly positive.
pub fn exp_neg(m: &SymMatrix, s: f64) -> Result<SymMatrix> {
    if s.is_nan() || s < 0.0 {
        return Err(Error::NegativeTime(s));
    }
    let pair = eig_sym(m)?;
    if s.is_infinite() {
        if pair.values.iter().any(|&w| w <= 0.0) {
            return Err(Error::ExponentUndefined("exponent limit undefined"));
        }
        return Ok(SymMatrix { mat: Mat::zeros(m.dim(), m.dim()) });
    }
    Ok(spectral_rebuild(&pair, |w| (-s * w).exp()))
}

/// Training-time parameterization of the solution operator.
///
/// `Continuous` is indexed by the product of rate and time (may be infinite);
/// `Discrete` is the exact tau-step gradient-descent analogue at rate
/// `lambda`. Rates here act on the width-normalized kernel; a rate
/// `lambda_p` applied to raw network parameters of width `l` corresponds to
/// `lambda = l * lambda_p` at this level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeMode {
    Continuous { lambda_tau: f64 },
    Discrete { lambda: f64, tau: u32 },
}

impl TimeMode {
    pub fn continuous(lambda_tau: f64) -> Result<Self> {
        if lambda_tau.is_nan() || lambda_tau < 0.0 {
            return Err(Error::NegativeTime(lambda_tau));
        }
        Ok(TimeMode::Continuous { lambda_tau })
    }

    pub fn discrete(lambda: f64, tau: u32) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::NegativeTime(lambda));
        }
        if tau == 0 {
            return Err(Error::InvalidConfig("discrete time needs tau >= 1".into()));
        }
        Ok(TimeMode::Discrete { lambda, tau })
    }
}

const PSD_RTOL: f64 = 1e-8;
const SINGULAR_RTOL: f64 = 1e-12;

/// The adaptation operator: (K + ridge I)^{-1} (I - e^{-lt (K + ridge I)}) in
/// continuous mode, its exact tau-step analogue in discrete mode, and the
/// plain inverse at lt = inf.
pub fn t_tilde(k: &SymMatrix, mode: TimeMode, ridge: f64) -> Result<SymMatrix> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("ridge must be >= 0, got {ridge}")));
    }
    let a = k.add_diag(ridge);
    let pair = eig_sym(&a)?;
    let w_max_k = pair.values.iter().fold(f64::NEG_INFINITY, |m, &w| m.max(w)) - ridge;
    let w_min_k = pair.values.iter().fold(f64::INFINITY, |m, &w| m.min(w)) - ridge;
    if w_min_k < -PSD_RTOL * w_max_k.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd { lambda_min: w_min_k, lambda_max: w_max_k });
    }
    match mode {
        TimeMode::Continuous { lambda_tau } if lambda_tau.is_infinite() => {
            let w_max = w_max_k + ridge;
            let floor = SINGULAR_RTOL * w_max.max(0.0);
            if pair.values.iter().any(|&w| w <= floor) {
                return Err(Error::SingularKernel("singular kernel, set ridge".into()));
            }
            Ok(spectral_rebuild(&pair, |w| 1.0 / w))
        }
        TimeMode::Continuous { lambda_tau } => {
            if lambda_tau.is_nan() || lambda_tau < 0.0 {
                return Err(Error::NegativeTime(lambda_tau));
            }
            Ok(spectral_rebuild(&pair, |w| {
                if w == 0.0 {
                    lambda_tau
                } else {
                    -(-lambda_tau * w).exp_m1() / w
                }
            }))
        }
        TimeMode::Discrete { lambda, tau } => {
            Ok(spectral_rebuild(&pair, |w| {
                let u = lambda * w;
                if w == 0.0 {
                    lambda * tau as f64
                } else if u < 1.0 {
                    // 1 - (1-u)^tau via logs, stable for tiny u
                    -(tau as f64 * (-u).ln_1p()).exp_m1() / w
                } else {
                    (1.0 - (1.0 - u).powi(tau as i32)) / w
                }
            }))
        }
    }
}

/// lambda_max / lambda_min of K + ridge I.
pub fn condition_number(k: &SymMatrix, ridge: f64) -> Result<f64> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("ridge must be >= 0, got {ridge}")));
    }
    let pair = eig_sym(&k.add_diag(ridge))?;
    let w_min = pair.values.first().copied().unwrap_or(0.0);
    let w_max = pair.values.last().copied().unwrap_or(0.0);
    if w_min <= 0.0 {
        return Err(Error::SingularKernel(format!(
            "condition number undefined: lambda_min {w_min:.3e} after ridge {ridge:.3e}"
        )));
    }
    Ok(w_max / w_min)
}
