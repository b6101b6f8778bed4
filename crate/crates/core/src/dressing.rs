//! Simple elements `p_{alpha,L}`, dressing of solutions and frames,
//! Ribaucour transforms (from frames and from the linear ODE), the Lie
//! scaling transform, and the two commutation checks.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{group_residuals, AmbientForm, SystemShape, TangentDatum};
use crate::error::{Error, Result};
use crate::frames::FrameSheet;
use crate::geometry::{fd_normal, singular_mask, synthesize_sheet, CombescureSequence, ImmersionSheet, NullBasis};
use crate::grid::GridSpec;
use crate::scalar::{cabs, cmax_abs, complexify_vec, lit, to_f64, tol, CMatrix, CVector, Real};
use crate::system::{LaxParts, ResidualField, SolutionSource, SourceKind};

/// Spectral values closer than this to `+-alpha` are rejected.
pub const POLE_TOLERANCE: f64 = 1e-6;
/// Relative size of `(y, rho y)` below which a line counts as degenerate.
pub const DEGENERACY_TOLERANCE: f64 = 1e-10;

/// The pole `alpha`, real or purely imaginary (`Imaginary(t)` is `i t`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Alpha<T> {
    Real(T),
    Imaginary(T),
}

impl<T: Real> Alpha<T> {
    pub fn value(&self) -> Complex<T> {
        match *self {
            Alpha::Real(a) => Complex::new(a, T::zero()),
            Alpha::Imaginary(t) => Complex::new(T::zero(), t),
        }
    }

    pub fn is_real(&self) -> bool {
        matches!(self, Alpha::Real(_))
    }

    /// Magnitude with sign: `a` or `t`.
    pub fn coefficient(&self) -> T {
        match *self {
            Alpha::Real(a) | Alpha::Imaginary(a) => a,
        }
    }

    /// `alpha / r`.
    pub fn divided(&self, r: T) -> Self {
        match *self {
            Alpha::Real(a) => Alpha::Real(a / r),
            Alpha::Imaginary(t) => Alpha::Imaginary(t / r),
        }
    }
}

impl Alpha<f64> {
    /// Parses `"1.5"`, `"i*0.5"` or `"-i*2"`.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        let bad = || Error::InvalidElement(format!("cannot parse alpha `{s}`"));
        let value = if let Some(rest) = t.strip_prefix("i*") {
            Alpha::Imaginary(rest.trim().parse().map_err(|_| bad())?)
        } else if let Some(rest) = t.strip_prefix("-i*") {
            Alpha::Imaginary(-rest.trim().parse::<f64>().map_err(|_| bad())?)
        } else {
            Alpha::Real(t.parse().map_err(|_| bad())?)
        };
        if value.coefficient() == 0.0 || !value.coefficient().is_finite() {
            return Err(Error::InvalidElement("alpha must be finite and nonzero".into()));
        }
        Ok(value)
    }
}

impl<T: Real> fmt::Display for Alpha<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::Real(a) => write!(f, "{}", to_f64(*a)),
            Alpha::Imaginary(t) => write!(f, "i*{}", to_f64(*t)),
        }
    }
}

/// The rational loop `p(l) = (l-a)/(l+a) pi_L + pi_perp + (l+a)/(l-a) pi_rhoL`.
#[derive(Clone, Debug)]
pub struct SimpleElement<T: Real> {
    pub shape: SystemShape,
    pub form: AmbientForm<T>,
    pub alpha: Alpha<T>,
    /// Spanning vector of the isotropic line `L`.
    pub v: CVector<T>,
    pub pi_l: CMatrix<T>,
    pub pi_rho_l: CMatrix<T>,
    pub pi_perp: CMatrix<T>,
}

impl<T: Real> SimpleElement<T> {
    /// Validates isotropy, `rho L != L`, the reality type of `(alpha, v)` and
    /// group membership of `p(l)` at a few sample points.
    pub fn new(shape: SystemShape, alpha: Alpha<T>, v: CVector<T>) -> Result<Self> {
        if v.len() != shape.ambient_dim() {
            return Err(Error::Dimension(format!("v has length {}, expected {}", v.len(), shape.ambient_dim())));
        }
        if alpha.coefficient() == T::zero() {
            return Err(Error::InvalidElement("alpha must be nonzero".into()));
        }
        let p = shape.p();
        let scale = v.iter().fold(T::zero(), |a, z| a + z.norm_sqr());
        let tiny = tol::<T>(1e-14) * scale.sqrt();
        let type_ok = match alpha {
            Alpha::Real(_) => v.iter().all(|z| z.im.abs() <= tiny),
            Alpha::Imaginary(_) => v.iter().enumerate().all(|(a, z)| if a < p { z.im.abs() <= tiny } else { z.re.abs() <= tiny }),
        };
        if !type_ok {
            return Err(Error::InvalidElement(match alpha {
                Alpha::Real(_) => "real alpha needs a real line".into(),
                Alpha::Imaginary(_) => "imaginary alpha needs a line in R^p + i R^{n-k,k}".into(),
            }));
        }
        let form = AmbientForm::<T>::new(shape);
        let iso = form.pair(&v, &v);
        if cabs(iso) > tol::<T>(1e-9) * scale {
            return Err(Error::InvalidElement(format!("line is not isotropic: (v, v) = {:e}", to_f64(cabs(iso)))));
        }
        let element = Self::from_vector_unchecked(shape, alpha, v)?;
        for l in [Complex::new(lit(0.37), lit(0.21)), Complex::new(lit(-1.3), T::zero()), Complex::new(T::zero(), lit(2.1))] {
            if let Ok(m) = element.evaluate(l) {
                let bound = tol::<T>(1e-8) * (T::one() + cmax_abs(&m)).powi(2);
                if group_residuals(&element.form, &m).form > bound {
                    return Err(Error::InvalidElement("p(lambda) is not in the group".into()));
                }
            }
        }
        Ok(element)
    }

    /// Real `alpha` with a real line.
    pub fn real(shape: SystemShape, alpha: T, v: &DVector<T>) -> Result<Self> {
        Self::new(shape, Alpha::Real(alpha), complexify_vec(v))
    }

    /// `alpha = i t` with `v = (q, i z)`.
    pub fn imaginary(shape: SystemShape, t: T, q: &DVector<T>, z: &DVector<T>) -> Result<Self> {
        let v = CVector::from_iterator(
            q.len() + z.len(),
            q.iter().map(|x| Complex::new(*x, T::zero())).chain(z.iter().map(|x| Complex::new(T::zero(), *x))),
        );
        Self::new(shape, Alpha::Imaginary(t), v)
    }

    /// Builds the projectors from `v` without the isotropy and type checks.
    pub fn from_vector_unchecked(shape: SystemShape, alpha: Alpha<T>, v: CVector<T>) -> Result<Self> {
        let form = AmbientForm::<T>::new(shape);
        let rv = form.rho_vec(&v);
        let d = form.pair(&rv, &v);
        let scale = v.iter().fold(T::zero(), |a, z| a + z.norm_sqr());
        if cabs(d) <= lit::<T>(DEGENERACY_TOLERANCE) * scale {
            return Err(Error::Degenerate { at: "line".into(), reason: "rho L = L ((v, rho v) vanishes)".into() });
        }
        let g = form.g_complex();
        let pi_l = &v * (rv.transpose() * &g) / d;
        let pi_rho_l = &rv * (v.transpose() * &g) / d;
        let m = shape.ambient_dim();
        let pi_perp = CMatrix::<T>::identity(m, m) - &pi_l - &pi_rho_l;
        Ok(Self { shape, form, alpha, v, pi_l, pi_rho_l, pi_perp })
    }

    fn factors(&self, lambda: Complex<T>) -> Result<(Complex<T>, Complex<T>)> {
        let a = self.alpha.value();
        let d = cabs(lambda - a).min(cabs(lambda + a));
        if d < lit(POLE_TOLERANCE) {
            return Err(Error::PoleProximity { lambda: format!("{lambda}"), alpha: format!("{a}"), distance: to_f64(d) });
        }
        Ok(((lambda - a) / (lambda + a), (lambda + a) / (lambda - a)))
    }

    pub fn evaluate(&self, lambda: Complex<T>) -> Result<CMatrix<T>> {
        let (down, up) = self.factors(lambda)?;
        Ok(&self.pi_l * down + &self.pi_perp + &self.pi_rho_l * up)
    }

    /// `p(lambda)^{-1}`: the same projectors with the factors swapped.
    pub fn evaluate_inverse(&self, lambda: Complex<T>) -> Result<CMatrix<T>> {
        let (down, up) = self.factors(lambda)?;
        Ok(&self.pi_l * up + &self.pi_perp + &self.pi_rho_l * down)
    }

    /// The same line with pole `alpha / r`.
    pub fn with_alpha(&self, alpha: Alpha<T>) -> Self {
        Self { alpha, ..self.clone() }
    }
}

/// Which kind of pole a random element gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Real,
    Imaginary,
}

/// Draws a valid element. For hypersurfaces the last `O(p)` component of
/// the line is kept away from zero, which keeps vacuum dressing regular.
pub fn random_element<R: Rng>(shape: SystemShape, regime: Regime, alpha: f64, rng: &mut R) -> Result<SimpleElement<f64>> {
    let n = shape.n;
    let p = shape.p();
    let m = n - shape.k;
    loop {
        let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        // dominant block: negative part for real alpha, positive part for imaginary alpha
        let (dominant, other) = match regime {
            Regime::Real => (m..n, 0..m),
            Regime::Imaginary => (0..m, m..n),
        };
        for i in other {
            b[i] *= 0.5;
        }
        let pos: f64 = b[..m].iter().map(|x| x * x).sum();
        let neg: f64 = b[m..].iter().map(|x| x * x).sum();
        let target = match regime {
            Regime::Real => neg - pos,
            Regime::Imaginary => pos - neg,
        };
        let dom: f64 = b[dominant].iter().map(|x| x * x).sum();
        if target < 0.2 * dom || target < 0.05 {
            continue;
        }
        let mut a: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        if shape.has_gamma() {
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            a[p - 1] = s * rng.random_range(0.6..1.0);
        }
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = target.sqrt() / na;
        let q = DVector::from_iterator(p, a.iter().map(|x| x * scale));
        let z = DVector::from_vec(b);
        return match regime {
            Regime::Real => {
                let v = DVector::from_iterator(p + n, q.iter().chain(z.iter()).copied());
                SimpleElement::real(shape, alpha, &v)
            }
            Regime::Imaginary => SimpleElement::imaginary(shape, alpha, &q, &z),
        };
    }
}

/// Normalized `(Q, Z)` with `(Q, Q)_0 = 2`, `(Z, Z)_k = -2`. For imaginary
/// `alpha`, `z` holds `Z / i` so that everything stays real.
#[derive(Clone, Debug, PartialEq)]
pub struct RibaucourData<T: Real> {
    pub q: DVector<T>,
    pub z: DVector<T>,
    pub alpha: Alpha<T>,
}

impl<T: Real> RibaucourData<T> {
    pub fn from_vector(shape: &SystemShape, alpha: Alpha<T>, y: &CVector<T>, at: impl FnOnce() -> String) -> Result<Self> {
        let p = shape.p();
        let n = shape.n;
        let scale = y.iter().fold(T::zero(), |a, z| a + z.norm_sqr());
        let y1 = DVector::from_fn(p, |a, _| y[a].re);
        let y2 = DVector::from_fn(n, |i, _| if alpha.is_real() { y[p + i].re } else { y[p + i].im });
        let qq = y1.norm_squared();
        if qq <= lit::<T>(DEGENERACY_TOLERANCE) * scale {
            return Err(Error::Degenerate { at: at(), reason: "(Q, Q)_0 vanishes on the transported line".into() });
        }
        let s = (lit::<T>(2.0) / qq).sqrt();
        let mut q = y1 * s;
        let mut z = y2 * s;
        let zz = shape.form_k(&z, &z);
        let expected = if alpha.is_real() { lit::<T>(-2.0) } else { lit::<T>(2.0) };
        if (zz - expected).abs() > tol(1e-8) {
            return Err(Error::Degenerate { at: at(), reason: format!("(Z, Z)_k = {:e} after normalization", to_f64(zz)) });
        }
        let lead = q.iamax();
        if q[lead] < T::zero() {
            q = -q;
            z = -z;
        }
        Ok(Self { q, z, alpha })
    }

    /// Real factor with `alpha Z Q^T = kappa z q^T`.
    pub fn kappa(&self) -> T {
        match self.alpha {
            Alpha::Real(a) => a,
            Alpha::Imaginary(t) => -t,
        }
    }

    /// `Z / alpha` as a real vector.
    pub fn z_over_alpha(&self) -> DVector<T> {
        &self.z / self.alpha.coefficient()
    }

    /// Sign with `Z Z^T = s z z^T`.
    pub fn zz_sign(&self) -> T {
        if self.alpha.is_real() {
            T::one()
        } else {
            -T::one()
        }
    }

    /// `(Q, Q)_0 - 2` and `(Z, Z)_k + 2` in the complex sense.
    pub fn normalization_defect(&self, shape: &SystemShape) -> T {
        let qq = self.q.norm_squared() - lit(2.0);
        let zz = self.zz_sign() * shape.form_k(&self.z, &self.z) + lit(2.0);
        qq.abs().max(zz.abs())
    }

    /// Distance to `other` up to the common sign of `(Q, Z)`.
    pub fn distance(&self, other: &Self) -> T {
        let plus = (&self.q - &other.q).amax().max((&self.z - &other.z).amax());
        let minus = (&self.q + &other.q).amax().max((&self.z + &other.z).amax());
        plus.min(minus)
    }
}

/// Applies `E -> E p~^{-1}` with `p~ = p_{alpha, E_alpha(x)^{-1} L}`.
#[derive(Clone, Debug)]
pub struct FrameTransformer<T: Real> {
    pub parent: Arc<SolutionSource<T>>,
    pub element: SimpleElement<T>,
}

impl<T: Real> FrameTransformer<T> {
    pub fn data(&self, x: &[T]) -> Result<RibaucourData<T>> {
        self.parent.dressing_data(&self.element, x)
    }

    pub fn transform(&self, x: &[T], lambda: Complex<T>, frame: &CMatrix<T>) -> Result<CMatrix<T>> {
        let y = self.parent.transported_line(&self.element, x)?;
        let local = SimpleElement::from_vector_unchecked(self.element.shape, self.element.alpha, y)?;
        Ok(frame * local.evaluate_inverse(lambda)?)
    }
}

#[derive(Clone, Debug)]
pub struct Dressing<T: Real> {
    pub source: Arc<SolutionSource<T>>,
    pub transformer: FrameTransformer<T>,
}

/// Dresses a closed-form source: the new source evaluates
/// `xi + alpha Z Q^T` (diagonal of `F` removed) pointwise.
pub fn dress<T: Real>(parent: Arc<SolutionSource<T>>, element: SimpleElement<T>) -> Result<Dressing<T>> {
    if !parent.has_closed_form() {
        return Err(Error::Unsupported("dressing needs a vacuum or dressed-vacuum parent; use ribaucour_ode for tables".into()));
    }
    if parent.shape != element.shape {
        return Err(Error::Dimension("element and source shapes differ".into()));
    }
    let source = Arc::new(SolutionSource { shape: parent.shape, kind: SourceKind::Dressed { parent: parent.clone(), element: element.clone() } });
    Ok(Dressing { source, transformer: FrameTransformer { parent, element } })
}

/// Nodes where the transported line is degenerate.
pub fn degenerate_nodes<T: Real>(dressing: &Dressing<T>, grid: &GridSpec) -> Vec<bool> {
    (0..grid.len()).into_par_iter().map(|f| dressing.transformer.data(&grid.coords_t::<T>(f)).is_err()).collect()
}

/// A frame sheet transformed by a simple element, with the per-node data.
#[derive(Clone, Debug)]
pub struct RibaucourFrame<T: Real> {
    pub sheet: FrameSheet<T>,
    /// `None` at degenerate nodes (the original values are kept there).
    pub data: Vec<Option<RibaucourData<T>>>,
}

impl<T: Real> RibaucourFrame<T> {
    pub fn degenerate(&self) -> Vec<bool> {
        self.data.iter().map(Option::is_none).collect()
    }
}

/// `E~ = E p~^{-1}` on every node for the sheet's spectral values away from
/// `+-alpha`; `Y~ = Y - g1 Q (Z/alpha)^T J g2^{-1}`, `xi~ = xi + alpha Z Q^T`.
/// Needs `alpha` among the sheet's spectral values.
pub fn ribaucour_frame<T: Real>(sheet: &FrameSheet<T>, element: &SimpleElement<T>) -> Result<RibaucourFrame<T>> {
    let shape = sheet.shape;
    let alpha = element.alpha.value();
    let la = sheet.lambda_index(alpha)?;
    let keep: Vec<usize> = (0..sheet.lambdas.len())
        .filter(|&l| {
            let z = sheet.lambdas[l];
            cabs(z - alpha).min(cabs(z + alpha)) >= lit(POLE_TOLERANCE)
        })
        .collect();
    let form = element.form.clone();
    let j = shape.j_matrix::<T>();
    let n = shape.n;
    type NodeOut<T> = (Vec<CMatrix<T>>, DMatrix<T>, TangentDatum<T>, Option<RibaucourData<T>>);
    let rows: Vec<NodeOut<T>> = (0..sheet.grid.len())
        .into_par_iter()
        .map(|node| {
            let originals = || keep.iter().map(|&l| sheet.frames[l][node].clone()).collect::<Vec<_>>();
            let y = form.group_inverse(&sheet.frames[la][node]) * &element.v;
            let data = RibaucourData::from_vector(&shape, element.alpha, &y, || format!("node {node}"));
            let local = data.as_ref().ok().and_then(|_| SimpleElement::from_vector_unchecked(shape, element.alpha, y.clone()).ok());
            match (data, local) {
                (Ok(d), Some(local)) => {
                    let frames = keep
                        .iter()
                        .map(|&l| Ok(&sheet.frames[l][node] * local.evaluate_inverse(sheet.lambdas[l])?))
                        .collect::<Result<Vec<_>>>()?;
                    let g1 = &sheet.g1[node];
                    let g2inv = &j * sheet.g2[node].transpose() * &j;
                    let y_new = &sheet.y[node] - g1 * &d.q * d.z_over_alpha().transpose() * &j * g2inv;
                    let mut xi = sheet.xi[node].xi() + &d.z * d.q.transpose() * d.kappa();
                    for i in 0..n {
                        xi[(i, i)] = T::zero();
                    }
                    Ok((frames, y_new, TangentDatum::from_xi(&shape, &xi), Some(d)))
                }
                _ => Ok((originals(), sheet.y[node].clone(), sheet.xi[node].clone(), None)),
            }
        })
        .collect::<Result<_>>()?;
    let mut frames = vec![Vec::with_capacity(rows.len()); keep.len()];
    let mut ys = Vec::with_capacity(rows.len());
    let mut xis = Vec::with_capacity(rows.len());
    let mut data = Vec::with_capacity(rows.len());
    for (fs, y, xi, d) in rows {
        for (l, f) in fs.into_iter().enumerate() {
            frames[l].push(f);
        }
        ys.push(y);
        xis.push(xi);
        data.push(d);
    }
    let source = match &sheet.source {
        Some(parent) if parent.has_closed_form() => {
            Some(Arc::new(SolutionSource { shape, kind: SourceKind::Dressed { parent: parent.clone(), element: element.clone() } }))
        }
        _ => None,
    };
    let mut out = FrameSheet {
        shape,
        grid: sheet.grid.clone(),
        lambdas: keep.iter().map(|&l| sheet.lambdas[l]).collect(),
        frames,
        g1: Vec::new(),
        g2: Vec::new(),
        y: ys,
        y_discrepancy: None,
        xi: xis,
        source,
        normalized: false,
        substep_bound: sheet.substep_bound,
    };
    if out.lambda_index(Complex::new(T::zero(), T::zero())).is_err() {
        return Err(Error::MissingLambda("0".into()));
    }
    out.fill_blocks();
    Ok(RibaucourFrame { sheet: out, data })
}

/// Transformed sequence and the identity checks of the Ribaucour transform.
#[derive(Clone, Debug)]
pub struct RibaucourResult<T: Real> {
    pub seq: CombescureSequence<T>,
    pub frame: RibaucourFrame<T>,
    /// Synthesized `f~` vs `f - (Z^T u / alpha) g1 Q`.
    pub formula_residual: T,
    /// `|(f~ + r_i e~_i) - (f + r_i e_i)| / (1 + |r_i|)` with `r_i = Z^T u / (alpha q_i)`, per node.
    pub equidistance: ResidualField<T>,
    /// `max | |f - m| - |r| |, | |f~ - m| - |r| |` with `m = f + r_{n+1} e_{n+1}`.
    pub sphere_radius: T,
    /// Sine between `f~ - m` and the finite-difference normal of `f~`.
    pub sphere_alignment: Option<ResidualField<T>>,
    /// Spread of `r_{n+1} / (zeta^T c_l)` over members, `zeta = J g2 Z / (alpha q_{n+1})`.
    pub radius_covector: T,
}

/// `f~ = f - (Z^T u / alpha) g1 Q` with frame `e (I - Q Q^T)` and
/// `u~ = u + s J Z (Z^T u)`, straight from the per-node data.
pub fn ribaucour_explicit<T: Real>(seq: &CombescureSequence<T>, data: &[Option<RibaucourData<T>>]) -> CombescureSequence<T> {
    let sheets = seq
        .sheets
        .iter()
        .map(|s| {
            let shape = s.shape;
            let j = shape.j_matrix::<T>();
            let mut out = s.clone();
            for node in 0..s.f.len() {
                if let Some(d) = &data[node] {
                    let u = &s.u[node];
                    let w = d.z_over_alpha().dot(u);
                    // geometric frame is -g1, so g1 Q = -frame Q
                    let g1q = -(&s.frame[node] * &d.q);
                    out.f[node] = &s.f[node] - g1q * w;
                    let p = shape.p();
                    out.frame[node] = &s.frame[node] * (DMatrix::<T>::identity(p, p) - &d.q * d.q.transpose());
                    out.u[node] = u + &j * &d.z * (d.z.dot(u) * d.zz_sign());
                } else {
                    out.mask[node] = true;
                }
            }
            out.second_form = None;
            let mask = singular_mask(&out.u);
            for (m, extra) in out.mask.iter_mut().zip(mask) {
                *m |= extra;
            }
            out
        })
        .collect();
    CombescureSequence { sheets, vectors: seq.vectors.clone() }
}

/// Ribaucour transform of a sequence synthesized from `sheet`.
pub fn ribaucour_apply<T: Real>(seq: &CombescureSequence<T>, sheet: &FrameSheet<T>, element: &SimpleElement<T>) -> Result<RibaucourResult<T>> {
    let rf = ribaucour_frame(sheet, element)?;
    let degenerate = rf.degenerate();
    let sheets: Vec<ImmersionSheet<T>> = seq
        .vectors
        .iter()
        .map(|c| {
            let mut s = synthesize_sheet(&rf.sheet, c);
            for (m, d) in s.mask.iter_mut().zip(&degenerate) {
                *m |= *d;
            }
            s
        })
        .collect();
    let new_seq = CombescureSequence { sheets, vectors: seq.vectors.clone() };
    let explicit = ribaucour_explicit(seq, &rf.data);
    let shape = sheet.shape;
    let n = shape.n;
    let p = shape.p();
    let grid = &sheet.grid;
    let mut formula = T::zero();
    let mut radius = T::zero();
    let mut covector = T::zero();
    let mut eq_values = vec![T::zero(); grid.len()];
    let mut align_values = vec![T::zero(); grid.len()];
    let j = shape.j_matrix::<T>();
    for (l, (old, new)) in seq.sheets.iter().zip(&new_seq.sheets).enumerate() {
        let ex = &explicit.sheets[l];
        for node in 0..grid.len() {
            let Some(d) = &rf.data[node] else { continue };
            formula = formula.max((&new.f[node] - &ex.f[node]).amax());
            let w = d.z_over_alpha().dot(&old.u[node]);
            for i in 0..p {
                if d.q[i].abs() < lit(1e-6) {
                    continue;
                }
                let r = w / d.q[i];
                let lhs = &new.f[node] + new.frame[node].column(i) * r;
                let rhs = &old.f[node] + old.frame[node].column(i) * r;
                let e = (lhs - rhs).amax() / (T::one() + r.abs());
                eq_values[node] = eq_values[node].max(e);
            }
            if shape.has_gamma() && d.q[n].abs() >= lit(1e-6) {
                let r = w / d.q[n];
                let center = &old.f[node] + old.frame[node].column(n) * r;
                let scale = T::one() + r.abs();
                radius = radius.max(((&old.f[node] - &center).norm() - r.abs()).abs() / scale);
                radius = radius.max(((&new.f[node] - &center).norm() - r.abs()).abs() / scale);
                let zeta = &j * &sheet.g2[node] * &d.z_over_alpha() / d.q[n];
                let c = &seq.vectors[l];
                covector = covector.max((r - zeta.dot(c)).abs() / scale);
                if !new.mask[node] {
                    let t: Vec<DVector<T>> = (0..n).map(|a| grid.d1::<T, DVector<T>>(&new.f, node, a)).collect();
                    let normal = fd_normal(&t);
                    let chord = &new.f[node] - &center;
                    let cn = chord.norm();
                    if cn > T::zero() {
                        let s = (&chord - &normal * chord.dot(&normal)).norm() / cn;
                        align_values[node] = align_values[node].max(s);
                    }
                }
            }
        }
    }
    Ok(RibaucourResult {
        seq: new_seq,
        frame: rf,
        formula_residual: formula,
        equidistance: ResidualField { values: eq_values },
        sphere_radius: radius,
        sphere_alignment: shape.has_gamma().then_some(ResidualField { values: align_values }),
        radius_covector: covector,
    })
}

/// Solution of `dy = -theta_alpha y`, `y(0) = v`, along the staircase.
#[derive(Clone, Debug)]
pub struct OdeRibaucour<T: Real> {
    pub y: Vec<CVector<T>>,
    pub data: Vec<Option<RibaucourData<T>>>,
    /// `max |(y, y) - (v, v)|` over the grid.
    pub conservation: T,
}

/// Integrates the linear system for the transported line with RK4 (any
/// source, including tables) and normalizes it to `(Q, Z)`.
pub fn ribaucour_ode<T: Real>(
    source: &SolutionSource<T>,
    grid: &GridSpec,
    alpha: Alpha<T>,
    v: &CVector<T>,
    substep_bound: f64,
) -> Result<OdeRibaucour<T>> {
    let shape = source.shape;
    let a = alpha.value();
    let parts_at = |x: &[T]| -> Result<LaxParts<T>> { Ok(LaxParts::new(&shape, &source.eval(x)?)) };
    let rate = |parts: &LaxParts<T>, axis: usize, y: &CVector<T>| -> CVector<T> { -(parts.theta_axis(axis, a) * y) };
    let edge = |x0: &[T], axis: usize, step: T, start: &LaxParts<T>, y: &mut CVector<T>| -> Result<LaxParts<T>> {
        let mut x1 = x0.to_vec();
        x1[axis] += step;
        let end = parts_at(&x1)?;
        let norm = crate::scalar::cinf_norm(&start.theta_axis(axis, a)).max(crate::scalar::cinf_norm(&end.theta_axis(axis, a)));
        let m = ((to_f64(norm) * to_f64(step.abs()) / substep_bound).ceil() as usize).max(1);
        let hs = step / lit::<T>(m as f64);
        let c = |s: T| Complex::new(s, T::zero());
        let mut here = start.clone();
        let mut t = x0.to_vec();
        for sub in 0..m {
            let mut tm = t.clone();
            tm[axis] += hs * lit(0.5);
            let mid = parts_at(&tm)?;
            let next = if sub + 1 == m {
                end.clone()
            } else {
                let mut tn = t.clone();
                tn[axis] += hs;
                parts_at(&tn)?
            };
            let k1 = rate(&here, axis, y);
            let k2 = rate(&mid, axis, &(&*y + &k1 * c(hs * lit(0.5))));
            let k3 = rate(&mid, axis, &(&*y + &k2 * c(hs * lit(0.5))));
            let k4 = rate(&next, axis, &(&*y + &k3 * c(hs)));
            *y += (k1 + (k2 + k3) * c(lit(2.0)) + k4) * c(hs / lit(6.0));
            here = next;
            t[axis] += hs;
        }
        Ok(end)
    };
    let origin = grid.origin_index();
    let mut ys: Vec<Option<(CVector<T>, LaxParts<T>)>> = vec![None; grid.len()];
    ys[grid.origin_flat()] = Some((v.clone(), parts_at(&vec![T::zero(); shape.n])?));
    for axis in 0..shape.n {
        let seeds: Vec<usize> = (0..grid.len())
            .filter(|&f| {
                let idx = grid.multi(f);
                (axis..shape.n).all(|b| idx[b] == origin[b])
            })
            .collect();
        let lines: Vec<Vec<(usize, CVector<T>, LaxParts<T>)>> = seeds
            .par_iter()
            .map(|&seed| {
                let (y0, p0) = ys[seed].clone().expect("seed reached");
                let mut out = Vec::new();
                for dir in [1isize, -1] {
                    let (mut y, mut parts, mut node) = (y0.clone(), p0.clone(), seed);
                    while let Some(next) = grid.shift(node, axis, dir) {
                        let step = lit::<T>(grid.h(axis) * dir as f64);
                        parts = edge(&grid.coords_t::<T>(node), axis, step, &parts, &mut y)?;
                        node = next;
                        out.push((node, y.clone(), parts.clone()));
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        for line in lines {
            for (node, y, parts) in line {
                ys[node] = Some((y, parts));
            }
        }
    }
    let form = AmbientForm::<T>::new(shape);
    let v0 = form.pair(v, v);
    let ys: Vec<CVector<T>> = ys.into_iter().map(|s| s.expect("every node reached").0).collect();
    let conservation = ys.iter().fold(T::zero(), |acc, y| acc.max(cabs(form.pair(y, y) - v0)));
    let data = ys
        .iter()
        .enumerate()
        .map(|(node, y)| RibaucourData::from_vector(&shape, alpha, y, || format!("node {node}")).ok())
        .collect();
    Ok(OdeRibaucour { y: ys, data, conservation })
}

/// Frame-based `(Q, Z)` from `E(x, alpha)^{-1} v` on every node of a sheet.
pub fn frame_ribaucour_data<T: Real>(sheet: &FrameSheet<T>, element: &SimpleElement<T>) -> Result<Vec<Option<RibaucourData<T>>>> {
    let la = sheet.lambda_index(element.alpha.value())?;
    Ok((0..sheet.grid.len())
        .map(|node| {
            let y = element.form.group_inverse(&sheet.frames[la][node]) * &element.v;
            RibaucourData::from_vector(&sheet.shape, element.alpha, &y, String::new).ok()
        })
        .collect())
}

/// `S_r`: `f~(x) = r f(x / r)`. The output lives on the grid scaled by `r`
/// (same node counts and origin index), so no resampling is needed:
/// `f~` at node `i` is `r f` at node `i`, `u~ = u`, and `II~ = II / r`.
pub fn lie_transform<T: Real>(seq: &CombescureSequence<T>, r: T) -> Result<CombescureSequence<T>> {
    if r <= T::zero() {
        return Err(Error::InvalidElement("the Lie transform needs r > 0".into()));
    }
    let sheets = seq
        .sheets
        .iter()
        .map(|s| ImmersionSheet {
            shape: s.shape,
            grid: s.grid.scaled(to_f64(r)),
            f: s.f.iter().map(|v| v * r).collect(),
            u: s.u.clone(),
            frame: s.frame.clone(),
            second_form: s.second_form.as_ref().map(|k| k.iter().map(|v| v / r).collect()),
            mask: s.mask.clone(),
        })
        .collect();
    Ok(CombescureSequence { sheets, vectors: seq.vectors.clone() })
}

/// The frame-level scaling `E~(x, l) = E(x / r, r l)`: grid scaled by `r`,
/// stored spectral values divided by `r`, `Y~ = r Y`, `xi~ = xi / r`.
pub fn lie_transform_sheet<T: Real>(sheet: &FrameSheet<T>, r: T) -> Result<FrameSheet<T>> {
    if r <= T::zero() {
        return Err(Error::InvalidElement("the Lie transform needs r > 0".into()));
    }
    Ok(FrameSheet {
        shape: sheet.shape,
        grid: sheet.grid.scaled(to_f64(r)),
        lambdas: sheet.lambdas.iter().map(|l| l / r).collect(),
        frames: sheet.frames.clone(),
        g1: sheet.g1.clone(),
        g2: sheet.g2.clone(),
        y: sheet.y.iter().map(|y| y * r).collect(),
        y_discrepancy: sheet.y_discrepancy.clone(),
        xi: sheet.xi.iter().map(|x| x.scale(T::one() / r)).collect(),
        source: None,
        normalized: sheet.normalized,
        substep_bound: sheet.substep_bound,
    })
}

/// Re-expresses a sequence in another basis by linear recombination of its
/// members: `f_b = sum_l a_l f_{c_l}` where `b = sum_l a_l c_l`.
pub fn recombine<T: Real>(seq: &CombescureSequence<T>, to: &NullBasis<T>) -> Result<CombescureSequence<T>> {
    let c = DMatrix::from_columns(&seq.vectors);
    let cinv = c.try_inverse().ok_or_else(|| Error::InvalidBasis("sequence vectors are not a basis".into()))?;
    let first = &seq.sheets[0];
    let sheets = to
        .vectors
        .iter()
        .map(|b| {
            let a = &cinv * b;
            let mut out = first.clone();
            for node in 0..first.f.len() {
                let mut f = DVector::zeros(first.f[node].len());
                let mut u = DVector::zeros(first.u[node].len());
                for (l, s) in seq.sheets.iter().enumerate() {
                    f += &s.f[node] * a[l];
                    u += &s.u[node] * a[l];
                }
                out.f[node] = f;
                out.u[node] = u;
            }
            out.second_form = None;
            out.mask = seq.sheets.iter().fold(singular_mask(&out.u), |m, s| m.iter().zip(&s.mask).map(|(a, b)| *a || *b).collect());
            out
        })
        .collect();
    Ok(CombescureSequence { sheets, vectors: to.vectors.clone() })
}

#[derive(Clone, Debug)]
pub struct ConjugationReport<T> {
    /// `C_B R` vs `R C_B`, max over unmasked nodes of all members.
    pub christoffel_ribaucour: T,
    /// `S_r R_{alpha,L} S_{1/r}` vs `R_{alpha/r, L}` on the common grid.
    pub lie: T,
}

fn max_sequence_gap<T: Real>(a: &CombescureSequence<T>, b: &CombescureSequence<T>) -> T {
    let mut gap = T::zero();
    for (x, y) in a.sheets.iter().zip(&b.sheets) {
        for node in 0..x.f.len() {
            if x.mask[node] || y.mask[node] {
                continue;
            }
            gap = gap.max((&x.f[node] - &y.f[node]).amax());
        }
    }
    gap
}

/// Both commutation identities, measured pointwise. `sheet` must carry the
/// spectral values `alpha` and `alpha / r`.
pub fn conjugation_check<T: Real>(
    seq: &CombescureSequence<T>,
    sheet: &FrameSheet<T>,
    element: &SimpleElement<T>,
    to: &NullBasis<T>,
    r: T,
) -> Result<ConjugationReport<T>> {
    let rf = ribaucour_frame(sheet, element)?;
    let lhs = recombine(&ribaucour_explicit(seq, &rf.data), to)?;
    let rhs = ribaucour_explicit(&recombine(seq, to)?, &rf.data);
    let christoffel_ribaucour = max_sequence_gap(&lhs, &rhs);

    let scaled_sheet = lie_transform_sheet(sheet, T::one() / r)?;
    let scaled_seq = lie_transform(seq, T::one() / r)?;
    let inner = ribaucour_apply(&scaled_seq, &scaled_sheet, element)?;
    let route_a = lie_transform(&inner.seq, r)?;
    let direct = ribaucour_apply(seq, sheet, &element.with_alpha(element.alpha.divided(r)))?;
    let lie = max_sequence_gap(&route_a, &direct.seq);
    Ok(ConjugationReport { christoffel_ribaucour, lie })
}

/// A dressing recipe entry: `alpha` as `"1.0"` or `"i*0.5"`, and the line
/// `v`. For imaginary `alpha` the last `n` components are multiplied by `i`.
/// The flag `"complete"` rescales the first `p` components to make `v`
/// isotropic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DressingRecord {
    pub alpha: String,
    pub v: Vec<f64>,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl DressingRecord {
    pub fn to_element(&self, shape: SystemShape) -> Result<SimpleElement<f64>> {
        let alpha = Alpha::parse(&self.alpha)?;
        let p = shape.p();
        if self.v.len() != shape.ambient_dim() {
            return Err(Error::InvalidElement(format!("v has {} components, expected {}", self.v.len(), shape.ambient_dim())));
        }
        let mut q = DVector::from_column_slice(&self.v[..p]);
        let z = DVector::from_column_slice(&self.v[p..]);
        if self.flags.iter().any(|f| f == "complete") {
            let zz = shape.form_k(&z, &z);
            let target = if alpha.is_real() { -zz } else { zz };
            if target <= 0.0 || q.norm() == 0.0 {
                return Err(Error::InvalidElement("cannot complete v to an isotropic line".into()));
            }
            q *= target.sqrt() / q.norm();
        }
        match alpha {
            Alpha::Real(a) => {
                let v = DVector::from_iterator(p + shape.n, q.iter().chain(z.iter()).copied());
                SimpleElement::real(shape, a, &v)
            }
            Alpha::Imaginary(t) => SimpleElement::imaginary(shape, t, &q, &z),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::family_residuals;
    use crate::system::vacuum;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hyp21() -> SystemShape {
        SystemShape::hypersurface(2, 1).unwrap()
    }

    fn element() -> SimpleElement<f64> {
        // (0.6, 0, 0.8 | 0, 1): |q|^2 = 1 = -(z, z)_k
        SimpleElement::real(hyp21(), 1.0, &DVector::from_vec(vec![0.6, 0.0, 0.8, 0.0, 1.0])).unwrap()
    }

    #[test]
    fn alpha_parsing() {
        assert_eq!(Alpha::parse("1.5").unwrap(), Alpha::Real(1.5));
        assert_eq!(Alpha::parse("i*0.5").unwrap(), Alpha::Imaginary(0.5));
        assert_eq!(Alpha::parse("-i*2").unwrap(), Alpha::Imaginary(-2.0));
        assert!(Alpha::parse("0").is_err());
        assert!(Alpha::parse("x").is_err());
        assert_eq!(Alpha::Imaginary(0.5).to_string(), "i*0.5");
    }

    #[test]
    fn projector_axioms() {
        let p = element();
        let id = CMatrix::<f64>::identity(5, 5);
        assert!(cmax_abs(&(&p.pi_l * &p.pi_l - &p.pi_l)) < 1e-14);
        assert!(cmax_abs(&DMatrix::from_column_slice(5, 1, (&p.pi_l * &p.v - &p.v).as_slice())) < 1e-14);
        assert!(cmax_abs(&(&p.pi_l + &p.pi_rho_l + &p.pi_perp - &id)) < 1e-15);
        assert!(cmax_abs(&(&p.pi_l * &p.pi_rho_l)) < 1e-14);
    }

    #[test]
    fn evaluation_examples() {
        let p = element();
        let id = CMatrix::<f64>::identity(5, 5);
        let far = p.evaluate(Complex::new(1e8, 0.0)).unwrap();
        assert!(cmax_abs(&(far - &id)) < 1e-7);
        let at0 = p.evaluate(Complex::new(0.0, 0.0)).unwrap();
        assert!(cmax_abs(&(at0 - (&p.pi_perp - &p.pi_l - &p.pi_rho_l))) < 1e-14);
        let l = Complex::new(0.3, -0.8);
        let prod = p.evaluate(l).unwrap() * p.evaluate_inverse(l).unwrap();
        assert!(cmax_abs(&(prod - id)) < 1e-13);
        assert!(matches!(p.evaluate(Complex::new(1.0, 0.0)), Err(Error::PoleProximity { .. })));
        assert!(matches!(p.evaluate(Complex::new(-1.0, 0.0)), Err(Error::PoleProximity { .. })));
    }

    #[test]
    fn reality_and_group_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for regime in [Regime::Real, Regime::Imaginary] {
            let p = random_element(SystemShape::hypersurface(3, 1).unwrap(), regime, 0.8, &mut rng).unwrap();
            let ls = [Complex::new(0.3, 0.4), Complex::new(-1.7, 0.0), Complex::new(0.2, -2.0)];
            let r = family_residuals(&p.form, |l| p.evaluate(l).unwrap(), &ls);
            assert!(r.form < 1e-9 && r.conjugation.unwrap() < 1e-10 && r.involution.unwrap() < 1e-10, "{r:?}");
        }
    }

    #[test]
    fn invalid_lines_are_rejected() {
        let s = hyp21();
        let not_iso = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.5]);
        assert!(matches!(SimpleElement::real(s, 1.0, &not_iso), Err(Error::InvalidElement(_))));
        // (v, rho v) = |q|^2 - (z, z)_k vanishes only for v = 0 among isotropic real lines
        let zero = DVector::zeros(5);
        assert!(SimpleElement::real(s, 1.0, &zero).is_err());
        let complex_v = CVector::from_vec(vec![
            Complex::new(0.6, 0.1),
            Complex::new(0.0, 0.0),
            Complex::new(0.8, 0.0),
            Complex::new(0.0, 0.0),
            Complex::new(1.0, 0.0),
        ]);
        assert!(SimpleElement::new(s, Alpha::Real(1.0), complex_v).is_err());
    }

    #[test]
    fn normalization_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = SystemShape::hypersurface(3, 2).unwrap();
        for regime in [Regime::Real, Regime::Imaginary] {
            let p = random_element(s, regime, 1.0, &mut rng).unwrap();
            let d = RibaucourData::from_vector(&s, p.alpha, &p.v, String::new).unwrap();
            assert!(d.normalization_defect(&s) < 1e-12);
            assert!(d.q[d.q.iamax()] > 0.0);
        }
    }

    #[test]
    fn dressed_vacuum_is_real_and_recovers_the_line_at_origin() {
        let s = hyp21();
        let d = dress(Arc::new(vacuum::<f64>(s)), element()).unwrap();
        let data = d.transformer.data(&[0.0, 0.0]).unwrap();
        let direct = RibaucourData::from_vector(&s, Alpha::Real(1.0), &element().v, String::new).unwrap();
        assert!(data.distance(&direct) < 1e-15);
        let xi = d.source.eval(&[0.3, -0.4]).unwrap();
        assert_eq!(xi.f[(0, 0)], 0.0);
        assert_eq!(xi.f[(1, 1)], 0.0);
        // normalized closed-form frame is the identity at the origin
        let e = d.source.closed_form_frame(&[0.0, 0.0], Complex::new(0.4, 0.3)).unwrap();
        assert!(cmax_abs(&(e - CMatrix::identity(5, 5))) < 1e-14);
        let based = d.source.based_frame(&[0.0, 0.0], Complex::new(0.4, 0.3)).unwrap();
        let expected = element().evaluate_inverse(Complex::new(0.4, 0.3)).unwrap();
        assert!(cmax_abs(&(based - expected)) < 1e-14);
    }

    #[test]
    fn tabulated_parents_are_refused() {
        let s = hyp21();
        let grid = GridSpec::cube(2, 1.0, 5).unwrap();
        let table = SolutionSource::tabulated(
            s,
            crate::system::Tabulated { grid: grid.clone(), values: vec![TangentDatum::zero(&s); grid.len()] },
        )
        .unwrap();
        assert!(matches!(dress(Arc::new(table), element()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn record_completion() {
        let rec = DressingRecord { alpha: "2".into(), v: vec![1.0, 0.0, 1.0, 0.0, 1.0], flags: vec!["complete".into()] };
        let e = rec.to_element(hyp21()).unwrap();
        assert!(cabs(e.form.pair(&e.v, &e.v)) < 1e-15);
        let rec = DressingRecord { alpha: "i*0.5".into(), v: vec![0.0, 0.0, 1.0, 1.0, 0.0], flags: vec![] };
        let e = rec.to_element(hyp21()).unwrap();
        assert_eq!(e.v[3], Complex::new(0.0, 1.0));
        let bad = DressingRecord { alpha: "1".into(), v: vec![1.0, 0.0, 0.0, 0.0, 0.5], flags: vec![] };
        assert!(bad.to_element(hyp21()).is_err());
    }
}
