//! Dense symmetric linear-algebra primitives.
//!
//! Everything geometric in this crate reduces to the symmetric
//! eigendecomposition: matrix exp/log/sqrt are computed by applying the
//! scalar function to the eigenvalues, and their directional derivatives
//! come from the same decomposition through the Loewner (divided
//! difference) matrix. One backend, one code path for forward and
//! backward.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetry acceptance tolerance: |A[i,j] - A[j,i]| <= SYM_TOL * max(1, |A[i,j]|).
pub const SYM_TOL: f64 = 1e-12;
/// Smallest eigenvalue accepted as strictly positive definite.
pub const SPD_EIG_FLOOR: f64 = 1e-10;
/// Eigenvalue gap below which the Loewner divided difference switches to
/// the analytic derivative at the midpoint.
pub const LOEWNER_GAP: f64 = 1e-8;
/// Iteration cap handed to the symmetric eigensolver.
pub const EIG_MAX_ITER: usize = 500;

/// A dense real symmetric matrix (the tangent-space element of SPD geometry).
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    mat: DMatrix<f64>,
}

impl SymMatrix {
    /// Validates symmetry within [`SYM_TOL`] and wraps the matrix.
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() || mat.nrows() == 0 {
            return Err(Error::InvalidDimension(format!(
                "expected square non-empty matrix, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let mut max_dev = 0.0f64;
        for i in 0..mat.nrows() {
            for j in (i + 1)..mat.ncols() {
                let dev = (mat[(i, j)] - mat[(j, i)]).abs() / f64::max(1.0, mat[(i, j)].abs());
                max_dev = max_dev.max(dev);
            }
        }
        if max_dev > SYM_TOL {
            return Err(Error::NotSymmetric { max_dev });
        }
        Ok(SymMatrix { mat })
    }

    /// Wraps `(m + m^T)/2`, forcing exact symmetry.
    pub fn symmetrize(m: &DMatrix<f64>) -> Self {
        SymMatrix {
            mat: (m + m.transpose()) * 0.5,
        }
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            mat: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn mat(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.mat
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.mat.norm()
    }
}

/// A symmetric strictly positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    mat: DMatrix<f64>,
}

impl SpdMatrix {
    /// Validates symmetry and positive definiteness (smallest eigenvalue
    /// >= [`SPD_EIG_FLOOR`]).
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        let sym = SymMatrix::new(mat)?;
        let decomp = sym_eig(&sym)?;
        let min_eig = decomp.eigenvalues[0];
        if min_eig < SPD_EIG_FLOOR {
            return Err(Error::NotPositiveDefinite { min_eig });
        }
        Ok(SpdMatrix { mat: sym.mat })
    }

    /// Wraps without validation. Caller guarantees the invariants
    /// (used on outputs that are SPD by construction, e.g. `expm`).
    pub(crate) fn from_unchecked(mat: DMatrix<f64>) -> Self {
        SpdMatrix { mat }
    }

    pub fn identity(n: usize) -> Self {
        SpdMatrix {
            mat: DMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn mat(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.mat
    }

    pub fn as_sym(&self) -> SymMatrix {
        SymMatrix {
            mat: self.mat.clone(),
        }
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted ascending.
#[derive(Debug, Clone)]
pub struct EigDecomp {
    /// Eigenvalues in ascending order.
    pub eigenvalues: DVector<f64>,
    /// Orthogonal matrix whose columns are the matching eigenvectors.
    pub eigenvectors: DMatrix<f64>,
}

impl EigDecomp {
    /// Reassembles `Q diag(f(lambda)) Q^T`.
    pub fn apply_scalar<F: Fn(f64) -> f64>(&self, f: F) -> DMatrix<f64> {
        let n = self.eigenvalues.len();
        let mut scaled = self.eigenvectors.clone();
        for j in 0..n {
            let fj = f(self.eigenvalues[j]);
            for i in 0..n {
                scaled[(i, j)] *= fj;
            }
        }
        let m = &scaled * self.eigenvectors.transpose();
        (&m + m.transpose()) * 0.5
    }
}

/// Symmetric eigendecomposition with ascending eigenvalue order.
pub fn sym_eig(a: &SymMatrix) -> Result<EigDecomp> {
    let eig = a
        .mat
        .clone()
        .try_symmetric_eigen(f64::EPSILON, EIG_MAX_ITER)
        .ok_or(Error::EigenNonConvergence {
            norm: a.frobenius_norm(),
            cap: EIG_MAX_ITER,
        })?;
    let n = a.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let mut eigenvalues = DVector::zeros(n);
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues[dst] = eig.eigenvalues[src];
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(EigDecomp {
        eigenvalues,
        eigenvectors,
    })
}

/// Matrix exponential of a symmetric matrix. Always SPD.
pub fn spd_expm(v: &SymMatrix) -> Result<SpdMatrix> {
    let decomp = sym_eig(v)?;
    Ok(SpdMatrix::from_unchecked(decomp.apply_scalar(f64::exp)))
}

/// Matrix logarithm of an SPD matrix.
pub fn spd_logm(p: &SpdMatrix) -> Result<SymMatrix> {
    let decomp = sym_eig(&p.as_sym())?;
    check_positive(&decomp)?;
    Ok(SymMatrix {
        mat: decomp.apply_scalar(f64::ln),
    })
}

/// Principal square root of an SPD matrix.
pub fn spd_sqrtm(p: &SpdMatrix) -> Result<SpdMatrix> {
    let decomp = sym_eig(&p.as_sym())?;
    check_positive(&decomp)?;
    Ok(SpdMatrix::from_unchecked(decomp.apply_scalar(f64::sqrt)))
}

/// Inverse square root of an SPD matrix.
pub fn spd_invsqrtm(p: &SpdMatrix) -> Result<SpdMatrix> {
    let decomp = sym_eig(&p.as_sym())?;
    check_positive(&decomp)?;
    Ok(SpdMatrix::from_unchecked(
        decomp.apply_scalar(|x| 1.0 / x.sqrt()),
    ))
}

fn check_positive(decomp: &EigDecomp) -> Result<()> {
    let min_eig = decomp.eigenvalues[0];
    if min_eig < SPD_EIG_FLOOR {
        return Err(Error::NotPositiveDefinite { min_eig });
    }
    Ok(())
}

/// Directional derivative of the matrix function `A -> Q f(Lambda) Q^T`
/// in direction `h`, via the Loewner matrix
/// `L[i,j] = (f(l_i) - f(l_j)) / (l_i - l_j)`, with the divided difference
/// replaced by `df` at the midpoint when the gap is below [`LOEWNER_GAP`].
pub fn dsym_apply<F, G>(decomp: &EigDecomp, f: F, df: G, direction: &SymMatrix) -> SymMatrix
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let n = decomp.eigenvalues.len();
    let q = &decomp.eigenvectors;
    let rotated = q.transpose() * direction.mat() * q;
    let mut scaled = DMatrix::zeros(n, n);
    for i in 0..n {
        let li = decomp.eigenvalues[i];
        for j in 0..n {
            let lj = decomp.eigenvalues[j];
            let coeff = if (li - lj).abs() < LOEWNER_GAP {
                df(0.5 * (li + lj))
            } else {
                (f(li) - f(lj)) / (li - lj)
            };
            scaled[(i, j)] = coeff * rotated[(i, j)];
        }
    }
    SymMatrix::symmetrize(&(q * scaled * q.transpose()))
}

/// Scalar functions the differentiation engine applies through
/// eigendecompositions, with their analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScalarFn {
    Exp,
    Log,
    Sqrt,
    InvSqrt,
}

impl ScalarFn {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ScalarFn::Exp => x.exp(),
            ScalarFn::Log => x.ln(),
            ScalarFn::Sqrt => x.sqrt(),
            ScalarFn::InvSqrt => 1.0 / x.sqrt(),
        }
    }

    pub fn deriv(self, x: f64) -> f64 {
        match self {
            ScalarFn::Exp => x.exp(),
            ScalarFn::Log => 1.0 / x,
            ScalarFn::Sqrt => 0.5 / x.sqrt(),
            ScalarFn::InvSqrt => -0.5 / (x * x.sqrt()),
        }
    }

    /// Whether the function requires strictly positive eigenvalues.
    pub fn needs_positive(self) -> bool {
        !matches!(self, ScalarFn::Exp)
    }
}
