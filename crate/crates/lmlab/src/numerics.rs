//! Dense symmetric linear algebra shared by every other module: cyclic Jacobi
//! eigendecomposition, PSD pseudo-inverse square root, and principal angles
//! between row spans.

use crate::error::{Error, Result};
use crate::mat::{dot, norm2, Mat};

/// Threshold (relative to the Frobenius norm of the input) at which the
/// off-diagonal mass is considered converged.
pub const JACOBI_OFF_TOL: f64 = 1e-12;
/// Hard cap on Jacobi sweeps; quadratic convergence makes this generous.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Default relative eigenvalue cutoff for pseudo-inverses. Separates
/// numerical-zero eigenvalues of rank-deficient covariances.
pub const DEFAULT_REL_CUTOFF: f64 = 1e-10;

/// Symmetric matrix; `entries[i][j] == entries[j][i]` exactly, enforced at
/// construction by mirroring the upper triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    m: Mat,
}

impl SymMatrix {
    /// Build from a generator evaluated once per unordered pair, so symmetry
    /// is exact by construction.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let x = f(i, j);
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        SymMatrix { m }
    }

    /// Wrap a square matrix, mirroring the upper triangle into the lower.
    pub fn from_mat_upper(m: &Mat) -> Self {
        assert_eq!(m.rows(), m.cols(), "SymMatrix needs a square matrix");
        SymMatrix::from_fn(m.rows(), |i, j| m[(i, j)])
    }

    /// Symmetrize an arbitrary square matrix as (M + M^T)/2.
    pub fn symmetrize(m: &Mat) -> Self {
        assert_eq!(m.rows(), m.cols());
        SymMatrix::from_fn(m.rows(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
    }

    pub fn n(&self) -> usize {
        self.m.rows()
    }

    pub fn mat(&self) -> &Mat {
        &self.m
    }

    pub fn trace(&self) -> f64 {
        (0..self.n()).map(|i| self.m[(i, i)]).sum()
    }

    /// x^T M x
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(&self.m.matvec(x), x)
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, ij: (usize, usize)) -> &f64 {
        &self.m[ij]
    }
}

/// Eigendecomposition of a symmetric matrix: `values` sorted descending,
/// `vectors` orthonormal columns in matching order.
#[derive(Clone, Debug)]
pub struct EigDecomp {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

impl EigDecomp {
    /// Reassemble V diag(g(lambda)) V^T with exact output symmetry.
    pub fn rebuild(&self, g: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.values.len();
        let mapped: Vec<f64> = self.values.iter().map(|&l| g(l)).collect();
        SymMatrix::from_fn(n, |i, j| {
            (0..n).map(|k| mapped[k] * self.vectors[(i, k)] * self.vectors[(j, k)]).sum()
        })
    }

    /// The top-k eigenvectors as a n x k block.
    pub fn top_vectors(&self, k: usize) -> Mat {
        let n = self.vectors.rows();
        Mat::from_fn(n, k, |i, j| self.vectors[(i, j)])
    }
}

/// Eigendecomposition by cyclic Jacobi rotations. Deterministic: fixed sweep
/// order, descending sort, and a sign convention (largest-magnitude component
/// of each eigenvector positive, ties broken by lowest index).
pub fn sym_eig(m: &SymMatrix) -> Result<EigDecomp> {
    if !m.mat().is_finite() {
        return Err(Error::NonFinite("sym_eig input"));
    }
    let n = m.n();
    let mut a = m.mat().clone();
    let mut v = Mat::identity(n);
    let norm0 = a.frob_norm();
    let tol = JACOBI_OFF_TOL * norm0;

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                let app = a[(p, p)];
                let aqq = a[(q, q)];
                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    if k != p && k != q {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(p, k)] = a[(k, p)];
                        a[(k, q)] = s * akp + c * akq;
                        a[(q, k)] = a[(k, q)];
                    }
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());

    let values: Vec<f64> = order.iter().map(|&k| a[(k, k)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        let mut col: Vec<f64> = (0..n).map(|i| v[(i, old_col)]).collect();
        let mut best = 0usize;
        for i in 1..n {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            for x in &mut col {
                *x = -*x;
            }
        }
        vectors.set_col(new_col, &col);
    }
    Ok(EigDecomp { values, vectors })
}

/// Spectral norm (largest |eigenvalue|) of a symmetric matrix.
pub fn spectral_norm(m: &SymMatrix) -> Result<f64> {
    let d = sym_eig(m)?;
    Ok(d.values.iter().fold(0.0f64, |acc, &l| acc.max(l.abs())))
}

fn check_psd(values: &[f64]) -> Result<f64> {
    let lambda_max = values.iter().cloned().fold(0.0f64, f64::max);
    let min_eig = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-10 * lambda_max.max(1e-300) {
        return Err(Error::NotPsd { min_eig, lambda_max });
    }
    Ok(lambda_max)
}

/// Pseudo-inverse square root of a PSD matrix: eigenvalues at or above
/// `rel_cutoff * lambda_max` map to lambda^{-1/2}, the rest to zero.
pub fn psd_inv_sqrt(m: &SymMatrix, rel_cutoff: f64) -> Result<SymMatrix> {
    let d = sym_eig(m)?;
    let lambda_max = check_psd(&d.values)?;
    let cut = rel_cutoff * lambda_max;
    Ok(d.rebuild(|l| if l >= cut && l > 0.0 { 1.0 / l.sqrt() } else { 0.0 }))
}

/// Pseudo-inverse of a PSD matrix with the same cutoff rule.
pub fn psd_pinv(m: &SymMatrix, rel_cutoff: f64) -> Result<SymMatrix> {
    let d = sym_eig(m)?;
    let lambda_max = check_psd(&d.values)?;
    let cut = rel_cutoff * lambda_max;
    Ok(d.rebuild(|l| if l >= cut && l > 0.0 { 1.0 / l } else { 0.0 }))
}

/// Symmetric square root of a PSD matrix (used to sample correlated
/// Gaussians); negative round-off eigenvalues clamp to zero.
pub fn psd_sqrt(m: &SymMatrix, rel_cutoff: f64) -> Result<SymMatrix> {
    let d = sym_eig(m)?;
    let lambda_max = check_psd(&d.values)?;
    let cut = rel_cutoff * lambda_max;
    Ok(d.rebuild(|l| if l >= cut && l > 0.0 { l.sqrt() } else { 0.0 }))
}

/// Orthonormalize the rows of `a` by modified Gram-Schmidt with one
/// re-orthogonalization pass. Errors if the rows are rank deficient.
pub fn orthonormal_rows(a: &Mat) -> Result<Mat> {
    if !a.is_finite() {
        return Err(Error::NonFinite("orthonormal_rows input"));
    }
    let d = a.rows();
    let scale = a.frob_norm();
    if scale == 0.0 {
        return Err(Error::DegenerateSpan);
    }
    let mut rows: Vec<Vec<f64>> = (0..d).map(|i| a.row(i).to_vec()).collect();
    for i in 0..d {
        for _pass in 0..2 {
            for j in 0..i {
                let c = dot(&rows[i], &rows[j]);
                let rj = rows[j].clone();
                crate::mat::axpy(&mut rows[i], -c, &rj);
            }
        }
        let n = norm2(&rows[i]);
        if n <= 1e-12 * scale.max(1.0) {
            return Err(Error::DegenerateSpan);
        }
        for x in &mut rows[i] {
            *x /= n;
        }
    }
    let mut q = Mat::zeros(d, a.cols());
    for i in 0..d {
        q.row_mut(i).copy_from_slice(&rows[i]);
    }
    Ok(q)
}

/// Principal angles between the row spans of `a` and `b` (both d x n, full
/// row rank). Returns d angles in [0, pi/2], ascending; the zero vector iff
/// the spans coincide.
pub fn principal_angles(a: &Mat, b: &Mat) -> Result<Vec<f64>> {
    assert_eq!(a.rows(), b.rows(), "principal_angles: row counts differ");
    assert_eq!(a.cols(), b.cols(), "principal_angles: ambient dims differ");
    let qa = orthonormal_rows(a)?;
    let qb = orthonormal_rows(b)?;
    let m = qa.matmul(&qb.transpose()); // d x d, singular values = cos(theta)
    let g = SymMatrix::symmetrize(&m.transpose().matmul(&m));
    let d = sym_eig(&g)?;
    let mut angles: Vec<f64> = d
        .values
        .iter()
        .map(|&l| {
            let sigma = l.max(0.0).sqrt().min(1.0);
            sigma.acos()
        })
        .collect();
    angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(angles)
}
