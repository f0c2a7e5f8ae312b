//! Small dense linear-algebra helpers shared by the solver layers.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use num_complex::Complex64;

pub type RMat = DMatrix<f64>;
pub type CMat = DMatrix<Complex64>;
pub type RVec = DVector<f64>;

pub const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
pub const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

pub fn complexify(m: &RMat) -> CMat {
    m.map(|x| Complex64::new(x, 0.0))
}

pub fn real_part(m: &CMat) -> RMat {
    m.map(|z| z.re)
}

pub fn max_imag(m: &CMat) -> f64 {
    m.iter().fold(0.0_f64, |acc, z| acc.max(z.im.abs()))
}

pub fn is_finite_c(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

pub fn is_finite_r(m: &RMat) -> bool {
    m.iter().all(|x| x.is_finite())
}

pub fn symmetrize(m: &RMat) -> RMat {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `m - m^T`.
pub fn asymmetry(m: &RMat) -> f64 {
    (m - m.transpose()).amax()
}

/// 2-norm condition number from singular values; `inf` for singular input.
pub fn condition_r(m: &RMat) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = SVD::new(m.clone(), false, false).singular_values;
    ratio(sv.max(), sv.min())
}

pub fn condition_c(m: &CMat) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = SVD::new(m.clone(), false, false).singular_values;
    ratio(sv.max(), sv.min())
}

fn ratio(max: f64, min: f64) -> f64 {
    if !max.is_finite() || !min.is_finite() || min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Smallest eigenvalue of a real symmetric matrix.
pub fn min_eigenvalue(m: &RMat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Smallest eigenvalue of the Hermitian part of a complex matrix.
pub fn min_eigenvalue_hermitian(m: &CMat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    SymmetricEigen::new(h).eigenvalues.min()
}

pub fn block_diag_r(blocks: &[&RMat]) -> RMat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = RMat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn block_diag_c(blocks: &[&CMat]) -> CMat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = CMat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn hcat_r(blocks: &[&RMat], rows: usize) -> RMat {
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = RMat::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

pub fn hcat_c(blocks: &[&CMat], rows: usize) -> CMat {
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = CMat::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

pub fn vcat_c(blocks: &[&CMat], cols: usize) -> CMat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = CMat::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// Row block `k` (of height `h`) of a vertically stacked matrix.
pub fn row_block(m: &CMat, k: usize, h: usize) -> CMat {
    m.rows(k * h, h).into_owned()
}

/// Inverse guarded by a condition-number cap. Returns the inverse and the
/// measured condition number, or `None` if the cap is exceeded.
pub fn guarded_inverse_c(m: &CMat, cap: f64) -> Option<(CMat, f64)> {
    let cond = condition_c(m);
    if !(cond < cap) {
        return None;
    }
    m.clone().try_inverse().map(|inv| (inv, cond))
}

pub fn guarded_inverse_r(m: &RMat, cap: f64) -> Option<(RMat, f64)> {
    let cond = condition_r(m);
    if !(cond < cap) {
        return None;
    }
    m.clone().try_inverse().map(|inv| (inv, cond))
}

/// Least-squares / minimum-norm solve of `a x = b` via SVD.
pub fn lstsq_c(a: &CMat, b: &CMat) -> Option<CMat> {
    let svd = SVD::new(a.clone(), true, true);
    let tol = svd.singular_values.max() * 1e-13 * (a.nrows().max(a.ncols()) as f64);
    svd.solve(b, tol.max(f64::MIN_POSITIVE)).ok()
}

/// Column-major flattening of a matrix into a vector.
pub fn vec_c(m: &CMat) -> Vec<Complex64> {
    m.iter().copied().collect()
}

pub fn unvec_c(v: &[Complex64], rows: usize, cols: usize) -> CMat {
    CMat::from_column_slice(rows, cols, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_of_identity_is_one() {
        assert!((condition_r(&RMat::identity(3, 3)) - 1.0).abs() < 1e-12);
        assert!((condition_c(&CMat::identity(2, 2)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_has_infinite_condition() {
        let m = RMat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(condition_r(&m) > 1e15);
        assert!(guarded_inverse_r(&m, 1e8).is_none());
    }

    #[test]
    fn block_diag_places_blocks() {
        let a = RMat::from_element(1, 1, 2.0);
        let b = RMat::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 3.0]);
        let d = block_diag_r(&[&a, &b]);
        assert_eq!(d.shape(), (3, 3));
        assert_eq!(d[(0, 0)], 2.0);
        assert_eq!(d[(2, 1)], 0.5);
        assert_eq!(d[(0, 2)], 0.0);
    }

    #[test]
    fn lstsq_solves_square_system() {
        let a = complexify(&RMat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]));
        let b = complexify(&RMat::from_row_slice(2, 1, &[3.0, 5.0]));
        let x = lstsq_c(&a, &b).unwrap();
        assert!((&a * &x - &b).norm() < 1e-12);
    }
}
