//! Shift-invert Arnoldi for grids too large for the dense eigensolver.

use faer::linalg::solvers::Solve;
use faer::Mat;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

pub struct ArnoldiResult {
    /// Ritz values mapped back to eigenvalues of the operator.
    pub eigenvalues: Vec<C64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigenvalues of `a` closest to the real `shift`, which lie near the right edge of the spectrum.
pub fn rightmost(a: &Mat<f64>, shift: f64, krylov_dim: usize) -> Result<ArnoldiResult> {
    let n = a.nrows();
    let k = krylov_dim.min(n);
    let shifted = Mat::from_fn(n, n, |i, j| a[(i, j)] - if i == j { shift } else { 0.0 });
    let lu = shifted.partial_piv_lu();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    let start: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let s = norm(&start);
    basis.push(start.iter().map(|v| v / s).collect());
    let mut h = Mat::<f64>::zeros(k + 1, k);
    let mut m = k;
    for j in 0..k {
        let mut w = Mat::from_fn(n, 1, |i, _| basis[j][i]);
        lu.solve_in_place(w.as_mut());
        let mut w: Vec<f64> = (0..n).map(|i| w[(i, 0)]).collect();
        for _ in 0..2 {
            for (i, q) in basis.iter().enumerate() {
                let c = dot(&w, q);
                h[(i, j)] += c;
                w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let beta = norm(&w);
        h[(j + 1, j)] = beta;
        if beta < 1e-14 {
            m = j + 1;
            break;
        }
        basis.push(w.iter().map(|v| v / beta).collect());
    }
    let hm = Mat::from_fn(m, m, |i, j| h[(i, j)]);
    let ritz = hm
        .as_ref()
        .eigenvalues()
        .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
    let eigenvalues = ritz
        .into_iter()
        .filter(|r| r.norm() > 0.0)
        .map(|r| C64::new(shift, 0.0) + C64::new(1.0, 0.0) / r)
        .collect();
    Ok(ArnoldiResult { eigenvalues })
}

/// Right and left null vectors near the real eigenvalue `lambda0`, by inverse iteration from `guess`.
pub fn null_vectors(a: &Mat<f64>, lambda0: f64, guess: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = a.nrows();
    let shift = lambda0 + 1e-7 * (1.0 + lambda0.abs());
    let shifted = Mat::from_fn(n, n, |i, j| a[(i, j)] - if i == j { shift } else { 0.0 });
    let lu = shifted.partial_piv_lu();
    let iterate = |transpose: bool| -> Result<Vec<f64>> {
        let mut x = Mat::from_fn(n, 1, |i, _| guess[i]);
        for _ in 0..4 {
            if transpose {
                lu.solve_transpose_in_place(x.as_mut());
            } else {
                lu.solve_in_place(x.as_mut());
            }
            let s = (0..n).map(|i| x[(i, 0)] * x[(i, 0)]).sum::<f64>().sqrt();
            if !s.is_finite() || s == 0.0 {
                return Err(Error::LinearAlgebra("inverse iteration broke down".into()));
            }
            x = Mat::from_fn(n, 1, |i, _| x[(i, 0)] / s);
        }
        Ok((0..n).map(|i| x[(i, 0)]).collect())
    };
    Ok((iterate(false)?, iterate(true)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_eigenvalues_near_shift() {
        let diag = [-3.0, -1.0, -0.5, 0.0, -2.0, -7.0];
        let a = Mat::from_fn(6, 6, |i, j| if i == j { diag[i] } else if j == i + 1 { 0.1 } else { 0.0 });
        let res = rightmost(&a, 0.05, 6).unwrap();
        for d in diag {
            assert!(res.eigenvalues.iter().any(|l| (l - C64::new(d, 0.0)).norm() < 1e-8), "{d}");
        }
    }

    #[test]
    fn null_vector_of_singular_matrix() {
        let a = Mat::from_fn(3, 3, |i, j| [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 1.0, -1.0]][i][j]);
        let (r, l) = null_vectors(&a, 0.0, &[1.0, 1.0, 1.0]).unwrap();
        let ar: f64 = (0..3).map(|i| (0..3).map(|j| a[(i, j)] * r[j]).sum::<f64>().powi(2)).sum();
        let la: f64 = (0..3).map(|j| (0..3).map(|i| l[i] * a[(i, j)]).sum::<f64>().powi(2)).sum();
        assert!(ar.sqrt() < 1e-6 && la.sqrt() < 1e-6);
    }
}
