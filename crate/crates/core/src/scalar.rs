//! Scalar plumbing shared by every module.
//!
//! All numerics are generic over [`Real`] (any `nalgebra::RealField` that is
//! `Copy`, in practice `f32` or `f64`). Spectral parameters and frames live in
//! the complexification, so most matrices are [`CMatrix`].

use nalgebra::{Complex, DMatrix, DVector, RealField};

/// Real scalar type the library is generic over.
pub trait Real: RealField + Copy + Send + Sync {}
impl<T: RealField + Copy + Send + Sync> Real for T {}

pub type CMatrix<T> = DMatrix<Complex<T>>;
pub type CVector<T> = DVector<Complex<T>>;

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

/// `x`, floored at a small multiple of machine epsilon so that
/// validation thresholds stay meaningful in single precision.
#[inline]
pub fn tol<T: Real>(x: f64) -> T {
    lit::<T>(x).max(T::default_epsilon() * lit(64.0))
}

#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    nalgebra::try_convert::<T, f64>(x).unwrap_or(f64::NAN)
}

#[inline]
pub fn cplx<T: Real>(re: T, im: T) -> Complex<T> {
    Complex::new(re, im)
}

#[inline]
pub fn creal<T: Real>(re: T) -> Complex<T> {
    Complex::new(re, T::zero())
}

#[inline]
pub fn cabs<T: Real>(z: Complex<T>) -> T {
    z.re.hypot(z.im)
}

pub fn complexify<T: Real>(m: &DMatrix<T>) -> CMatrix<T> {
    m.map(creal)
}

pub fn complexify_vec<T: Real>(v: &DVector<T>) -> CVector<T> {
    v.map(creal)
}

pub fn real_part<T: Real>(m: &CMatrix<T>) -> DMatrix<T> {
    m.map(|z| z.re)
}

pub fn imag_part<T: Real>(m: &CMatrix<T>) -> DMatrix<T> {
    m.map(|z| z.im)
}

/// Entrywise max-modulus of a complex matrix.
pub fn cmax_abs<T: Real>(m: &CMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, z| acc.max(cabs(*z)))
}

/// Entrywise max-abs of a real matrix.
pub fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

pub fn vmax_abs<T: Real>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

/// Max row-sum (operator infinity) norm.
pub fn cinf_norm<T: Real>(m: &CMatrix<T>) -> T {
    (0..m.nrows()).fold(T::zero(), |acc, i| {
        let row = m.row(i).iter().fold(T::zero(), |s, z| s + cabs(*z));
        acc.max(row)
    })
}

pub fn conj_matrix<T: Real>(m: &CMatrix<T>) -> CMatrix<T> {
    m.map(|z| z.conj())
}

/// Median of a slice, `None` when empty. NaNs sort last.
pub fn median<T: Real>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Greater));
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        Some(v[mid])
    } else {
        Some((v[mid - 1] + v[mid]) * lit(0.5))
    }
}

/// Percentile by nearest rank on sorted data (p in [0, 100]).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * (sorted.len() as f64 - 1.0)).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Generalized cross product: the vector orthogonal to the `n` columns of an
/// `(n+1) x n` matrix, with components given by signed maximal minors.
pub fn generalized_cross<T: Real>(tangents: &DMatrix<T>) -> DVector<T> {
    let rows = tangents.nrows();
    debug_assert_eq!(rows, tangents.ncols() + 1);
    let mut out = DVector::zeros(rows);
    for a in 0..rows {
        let minor = tangents.clone().remove_row(a);
        let det = minor.determinant();
        let sign = if (a + rows + 1).is_multiple_of(2) { T::one() } else { -T::one() };
        out[a] = sign * det;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_product_matches_r3() {
        let t = DMatrix::<f64>::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let n = generalized_cross(&t);
        assert!((n[2] - 1.0).abs() < 1e-15 && n[0].abs() < 1e-15 && n[1].abs() < 1e-15);
        // orthogonality in R^4
        let t = DMatrix::<f64>::from_column_slice(4, 3, &[1.0, 2.0, 0.5, -1.0, 0.0, 1.0, 3.0, 2.0, 1.0, 1.0, 1.0, 1.0]);
        let n = generalized_cross(&t);
        for j in 0..3 {
            assert!(n.dot(&t.column(j)).abs() < 1e-12);
        }
    }

    #[test]
    fn median_and_percentile() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median::<f64>(&[]), None);
        assert_eq!(percentile_sorted(&[1.0, 2.0, 3.0], 100.0), 3.0);
    }
}
