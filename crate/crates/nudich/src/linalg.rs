//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    m.singular_values().max()
}

/// Smallest and largest singular values.
pub fn singular_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let sv = m.singular_values();
    (sv.min(), sv.max())
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let (lo, hi) = singular_extremes(m);
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let s = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn max_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    *sym_eigenvalues(m).last().expect("nonempty matrix")
}

pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

/// Orthonormal basis (columns) of the range of a rank-`r` matrix.
pub fn range_basis(m: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let n = m.nrows();
    if r == 0 {
        return DMatrix::zeros(n, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    DMatrix::from_fn(n, r, |i, j| u[(i, idx[j])])
}

/// Numerical rank with relative threshold.
pub fn rank(m: &DMatrix<f64>, rel: f64) -> usize {
    let sv = m.singular_values();
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel * top).count()
}

/// Largest principal angle (radians) between the column spaces of two
/// matrices with orthonormal columns of equal count.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 {
        return 0.0;
    }
    let c = a.transpose() * b;
    let smin = c.singular_values().min().clamp(0.0, 1.0);
    // arcsin of the residual is better conditioned for small angles
    let resid = b - a * (a.transpose() * b);
    let s = spectral_norm(&resid).clamp(0.0, 1.0);
    if smin > 0.7 {
        s.asin()
    } else {
        smin.acos()
    }
}

pub fn identity(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

/// `max |a - b|` normalized by `max(1, |b|)` in spectral norm.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    spectral_norm(&(a - b)) / spectral_norm(b).max(1.0)
}

pub fn vec_norm(v: &DVector<f64>) -> f64 {
    v.norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norms() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -4.0]);
        assert!((spectral_norm(&m) - 4.0).abs() < 1e-14);
        assert!((condition_number(&m) - 4.0 / 3.0).abs() < 1e-14);
        assert_eq!(spectral_norm(&DMatrix::zeros(2, 2)), 0.0);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let ev = sym_eigenvalues(&s);
        assert!((ev[0] - 0.0).abs() < 1e-14 && (ev[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn angles() {
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let th = 0.3f64;
        let b = DMatrix::from_column_slice(2, 1, &[th.cos(), th.sin()]);
        assert!((max_principal_angle(&a, &b) - th).abs() < 1e-12);
        let th = 1.2f64;
        let b = DMatrix::from_column_slice(2, 1, &[th.cos(), th.sin()]);
        assert!((max_principal_angle(&a, &b) - th).abs() < 1e-12);
    }

    #[test]
    fn range_of_oblique_projection() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let r = range_basis(&p, 1);
        assert!((r[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert_eq!(rank(&p, 1e-10), 1);
    }
}
