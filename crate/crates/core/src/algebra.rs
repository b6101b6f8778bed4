//! Indefinite-form linear algebra for the `O(2n+1-k,k)` and `O(2n-k,k)`
//! symmetric spaces.
//!
//! Index convention (0-based): rows/columns `0..p` are the `O(p)` block with
//! `p = n + 1` (hypersurface) or `p = n` (coordinate system); rows/columns
//! `p..p+n` are the `O(n-k,k)` block. The signature is `J = diag(eps)` with
//! the `+1` entries first.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cmax_abs, complexify, conj_matrix, max_abs, CMatrix, CVector, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Guichard_k orthogonal coordinate systems, ambient size `2n`.
    Coordinate,
    /// Isothermic_k hypersurfaces in `R^{n+1}`, ambient size `2n+1`.
    Hypersurface,
}

/// Dimensions `(n, k)` and variant of the `U/K`-system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemShape {
    pub n: usize,
    pub k: usize,
    pub variant: Variant,
}

impl SystemShape {
    pub fn new(n: usize, k: usize, variant: Variant) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidShape(format!("n = {n} must be at least 2")));
        }
        if k < 1 || k > n - 1 {
            return Err(Error::InvalidShape(format!("k = {k} must satisfy 1 <= k <= n-1 = {}", n - 1)));
        }
        Ok(Self { n, k, variant })
    }

    pub fn hypersurface(n: usize, k: usize) -> Result<Self> {
        Self::new(n, k, Variant::Hypersurface)
    }

    pub fn coordinate(n: usize, k: usize) -> Result<Self> {
        Self::new(n, k, Variant::Coordinate)
    }

    /// Size of the `O(p)` block.
    pub fn p(&self) -> usize {
        match self.variant {
            Variant::Coordinate => self.n,
            Variant::Hypersurface => self.n + 1,
        }
    }

    /// Ambient matrix size `p + n`.
    pub fn ambient_dim(&self) -> usize {
        self.p() + self.n
    }

    pub fn has_gamma(&self) -> bool {
        self.variant == Variant::Hypersurface
    }

    /// `eps_i = +1` for `i < n-k`, `-1` otherwise.
    pub fn epsilon(&self, i: usize) -> i32 {
        if i < self.n - self.k {
            1
        } else {
            -1
        }
    }

    pub fn eps<T: Real>(&self, i: usize) -> T {
        if self.epsilon(i) > 0 {
            T::one()
        } else {
            -T::one()
        }
    }

    pub fn epsilons(&self) -> Vec<i32> {
        (0..self.n).map(|i| self.epsilon(i)).collect()
    }

    /// `J = I_{n-k,k}`.
    pub fn j_matrix<T: Real>(&self) -> DMatrix<T> {
        DMatrix::from_diagonal(&DVector::from_fn(self.n, |i, _| self.eps::<T>(i)))
    }

    /// `(x, y)_k = x^T J y`.
    pub fn form_k<T: Real>(&self, x: &DVector<T>, y: &DVector<T>) -> T {
        (0..self.n).fold(T::zero(), |acc, i| acc + self.eps::<T>(i) * x[i] * y[i])
    }
}

/// The bilinear form `G = diag(I_p, J)` and the involution `rho = diag(I_p, -I_n)`.
#[derive(Clone, Debug)]
pub struct AmbientForm<T: Real> {
    pub shape: SystemShape,
    pub g: DMatrix<T>,
    pub rho: DMatrix<T>,
}

impl<T: Real> AmbientForm<T> {
    pub fn new(shape: SystemShape) -> Self {
        let p = shape.p();
        let m = shape.ambient_dim();
        let g = DMatrix::from_diagonal(&DVector::from_fn(m, |a, _| {
            if a < p {
                T::one()
            } else {
                shape.eps::<T>(a - p)
            }
        }));
        let rho = DMatrix::from_diagonal(&DVector::from_fn(m, |a, _| if a < p { T::one() } else { -T::one() }));
        let form = Self { shape, g, rho };
        // the p-block shape must be G-skew; checked on the abelian basis
        for i in 0..shape.n {
            let a = basis_element::<T>(&shape, i).expect("index in range");
            let skew = a.transpose() * &form.g + &form.g * &a;
            assert!(max_abs(&skew) == T::zero(), "basis element a_{i} is not G-skew");
        }
        form
    }

    pub fn g_complex(&self) -> CMatrix<T> {
        complexify(&self.g)
    }

    /// `sigma(M) = rho M rho^{-1}`.
    pub fn sigma(&self, m: &CMatrix<T>) -> CMatrix<T> {
        let r = complexify(&self.rho);
        &r * m * &r
    }

    pub fn sigma_real(&self, m: &DMatrix<T>) -> DMatrix<T> {
        &self.rho * m * &self.rho
    }

    /// Complex bilinear (not sesquilinear) pairing `x^T G y`.
    pub fn pair(&self, x: &CVector<T>, y: &CVector<T>) -> Complex<T> {
        let m = x.len();
        let mut acc = Complex::new(T::zero(), T::zero());
        for a in 0..m {
            acc += x[a] * y[a] * self.g[(a, a)];
        }
        acc
    }

    pub fn rho_vec(&self, x: &CVector<T>) -> CVector<T> {
        let p = self.shape.p();
        DVector::from_fn(x.len(), |a, _| if a < p { x[a] } else { -x[a] })
    }

    /// Inverse of a group element via `M^{-1} = G^{-1} M^T G`.
    pub fn group_inverse(&self, m: &CMatrix<T>) -> CMatrix<T> {
        let g = self.g_complex();
        &g * m.transpose() * &g
    }
}

/// A point of `a^perp ∩ p`: `xi = (F, gamma)` with `F` having zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentDatum<T: Real> {
    pub f: DMatrix<T>,
    pub gamma: Option<DVector<T>>,
}

impl<T: Real> TangentDatum<T> {
    pub fn zero(shape: &SystemShape) -> Self {
        Self {
            f: DMatrix::zeros(shape.n, shape.n),
            gamma: shape.has_gamma().then(|| DVector::zeros(shape.n)),
        }
    }

    /// The `n x p` matrix `xi`, with `gamma` as the last column for hypersurfaces.
    pub fn xi(&self) -> DMatrix<T> {
        let n = self.f.nrows();
        match &self.gamma {
            None => self.f.clone(),
            Some(g) => {
                let mut xi = DMatrix::zeros(n, n + 1);
                xi.view_mut((0, 0), (n, n)).copy_from(&self.f);
                xi.set_column(n, g);
                xi
            }
        }
    }

    pub fn from_xi(shape: &SystemShape, xi: &DMatrix<T>) -> Self {
        let n = shape.n;
        let f = xi.view((0, 0), (n, n)).into_owned();
        let gamma = shape.has_gamma().then(|| xi.column(n).into_owned());
        Self { f, gamma }
    }

    /// Largest absolute diagonal entry of `F` (zero for valid data).
    pub fn diagonal_defect(&self) -> T {
        (0..self.f.nrows()).fold(T::zero(), |acc, i| acc.max(self.f[(i, i)].abs()))
    }

    pub fn max_abs(&self) -> T {
        let g = self.gamma.as_ref().map_or(T::zero(), |g| g.iter().fold(T::zero(), |a, x| a.max(x.abs())));
        max_abs(&self.f).max(g)
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            f: &self.f - &other.f,
            gamma: match (&self.gamma, &other.gamma) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            },
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self { f: &self.f * s, gamma: self.gamma.as_ref().map(|g| g * s) }
    }
}

/// `a_i` with `A_i = e_ii` (coordinate) or `(e_ii, 0)` (hypersurface); `i` is 0-based.
pub fn basis_element<T: Real>(shape: &SystemShape, i: usize) -> Result<DMatrix<T>> {
    if i >= shape.n {
        return Err(Error::IndexOutOfRange { index: i, max: shape.n - 1 });
    }
    let p = shape.p();
    let mut a = DMatrix::zeros(shape.ambient_dim(), shape.ambient_dim());
    a[(p + i, i)] = T::one();
    a[(i, p + i)] = -shape.eps::<T>(i);
    Ok(a)
}

/// Embeds `xi` as `[[0, -xi^T J], [xi, 0]]`.
pub fn embed_p<T: Real>(shape: &SystemShape, xi: &TangentDatum<T>) -> DMatrix<T> {
    embed_xi(shape, &xi.xi())
}

pub fn embed_xi<T: Real>(shape: &SystemShape, xi: &DMatrix<T>) -> DMatrix<T> {
    let p = shape.p();
    let n = shape.n;
    let m = shape.ambient_dim();
    let mut out = DMatrix::zeros(m, m);
    for r in 0..n {
        for c in 0..p {
            out[(p + r, c)] = xi[(r, c)];
            out[(c, p + r)] = -xi[(r, c)] * shape.eps::<T>(r);
        }
    }
    out
}

/// Reads `xi` off the lower-left block and projects away from `a`
/// (zeroes the diagonal of `F`).
pub fn project_offdiag<T: Real>(shape: &SystemShape, m: &DMatrix<T>) -> Result<TangentDatum<T>> {
    let p = shape.p();
    let n = shape.n;
    let dim = shape.ambient_dim();
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::Dimension(format!("expected {dim}x{dim}, got {}x{}", m.nrows(), m.ncols())));
    }
    let top = max_abs(&m.view((0, 0), (p, p)).into_owned());
    let bottom = max_abs(&m.view((p, p), (n, n)).into_owned());
    let defect = top.max(bottom);
    let scale = T::one() + max_abs(m);
    if defect > scale * T::default_epsilon() * crate::scalar::lit(16.0) {
        return Err(Error::BlockShape { norm: crate::scalar::to_f64(defect) });
    }
    let xi = m.view((p, 0), (n, p)).into_owned();
    let mut datum = TangentDatum::from_xi(shape, &xi);
    for i in 0..n {
        datum.f[(i, i)] = T::zero();
    }
    Ok(datum)
}

/// Matrix commutator `[a, b]`.
pub fn bracket<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    a * b - b * a
}

pub fn cbracket<T: Real>(a: &CMatrix<T>, b: &CMatrix<T>) -> CMatrix<T> {
    a * b - b * a
}

/// Defects of a (complex) matrix with respect to the group and, for a
/// family, the reality condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupResiduals<T> {
    /// `|M^T G M - G|_inf`.
    pub form: T,
    /// `|conj(M(conj l)) - M(l)|_inf` over the sampled family.
    pub conjugation: Option<T>,
    /// `|sigma(M(-l)) - M(l)|_inf` over the sampled family.
    pub involution: Option<T>,
}

pub fn group_residuals<T: Real>(form: &AmbientForm<T>, m: &CMatrix<T>) -> GroupResiduals<T> {
    let g = form.g_complex();
    let defect = m.transpose() * &g * m - &g;
    GroupResiduals { form: cmax_abs(&defect), conjugation: None, involution: None }
}

/// Residuals of a `lambda`-family at the given spectral samples.
pub fn family_residuals<T, F>(form: &AmbientForm<T>, family: F, lambdas: &[Complex<T>]) -> GroupResiduals<T>
where
    T: Real,
    F: Fn(Complex<T>) -> CMatrix<T>,
{
    let mut out = GroupResiduals { form: T::zero(), conjugation: Some(T::zero()), involution: Some(T::zero()) };
    for &l in lambdas {
        let m = family(l);
        out.form = out.form.max(group_residuals(form, &m).form);
        let conj = conj_matrix(&family(l.conj())) - &m;
        let inv = form.sigma(&family(-l)) - &m;
        out.conjugation = out.conjugation.map(|c| c.max(cmax_abs(&conj)));
        out.involution = out.involution.map(|c| c.max(cmax_abs(&inv)));
    }
    out
}
