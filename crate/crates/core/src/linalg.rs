//! Small dense linear-algebra helpers shared across the estimation code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Kronecker product `a (x) b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij != 0.0 {
                let mut block = out.view_mut((i * br, j * bc), (br, bc));
                block.copy_from(&(b * aij));
            }
        }
    }
    out
}

/// Cholesky with a single retry after adding `jitter` to the diagonal.
pub fn cholesky_with_jitter(
    mat: &DMatrix<f64>,
    jitter: f64,
    what: &str,
) -> Result<Cholesky<f64, Dyn>> {
    if let Some(ch) = mat.clone().cholesky() {
        return Ok(ch);
    }
    let n = mat.nrows();
    let mut jittered = mat.clone();
    for i in 0..n {
        jittered[(i, i)] += jitter;
    }
    jittered
        .cholesky()
        .ok_or_else(|| Error::linalg(format!("{what} not positive definite (after {jitter} jitter)")))
}

pub fn logdet_from_cholesky(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Symmetric eigendecomposition returning `(Q, lambda)` with `A = Q diag(lambda) Q^T`.
pub fn sym_eigen(mat: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let eig = mat.clone().symmetric_eigen();
    (eig.eigenvectors, eig.eigenvalues)
}
