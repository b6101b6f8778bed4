//! Combescure sequences of isothermic_k hypersurfaces and Guichard_k
//! coordinate systems: synthesis from frames, verification from `f` alone,
//! inversion back to `(F, gamma)`, and the Christoffel transform.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::algebra::{SystemShape, TangentDatum, Variant};
use crate::error::{Error, Result};
use crate::frames::FrameSheet;
use crate::grid::GridSpec;
use crate::scalar::{generalized_cross, lit, median, to_f64, Real};
use crate::system::{ResidualField, SolutionSource, Tabulated};

/// Nodes with `min_i |u_i| < MASK_RATIO * median |u|` are treated as singular.
pub const MASK_RATIO: f64 = 1e-6;
/// Metric fields count as independent while `s_min / s_max >= RANK_THRESHOLD`.
pub const RANK_THRESHOLD: f64 = 1e-8;

/// Null vectors `c_1..c_n` of `(x, y)_k` forming a basis.
#[derive(Clone, Debug, PartialEq)]
pub struct NullBasis<T: Real> {
    pub vectors: Vec<DVector<T>>,
}

impl<T: Real> NullBasis<T> {
    pub fn new(shape: &SystemShape, vectors: Vec<DVector<T>>) -> Result<Self> {
        let n = shape.n;
        if vectors.len() != n || vectors.iter().any(|v| v.len() != n) {
            return Err(Error::InvalidBasis(format!("need {n} vectors of length {n}")));
        }
        for (i, v) in vectors.iter().enumerate() {
            let q = shape.form_k(v, v);
            if q.abs() > crate::scalar::tol::<T>(1e-12) * v.norm_squared() {
                return Err(Error::InvalidBasis(format!("c_{} is not null: (c, c)_k = {:e}", i + 1, to_f64(q))));
            }
        }
        let det = Self::matrix_of(&vectors).determinant();
        let scale = vectors.iter().fold(T::one(), |a, v| a * v.norm());
        if det.abs() <= crate::scalar::tol::<T>(1e-12) * scale {
            return Err(Error::InvalidBasis(format!("vectors are linearly dependent (det = {:e})", to_f64(det))));
        }
        Ok(Self { vectors })
    }

    fn matrix_of(vectors: &[DVector<T>]) -> DMatrix<T> {
        DMatrix::from_columns(vectors)
    }

    /// Columns `c_1..c_n`.
    pub fn matrix(&self) -> DMatrix<T> {
        Self::matrix_of(&self.vectors)
    }
}

/// Integer null basis, with seeded sign flips; falls back to random null
/// vectors when the integer construction is not a null basis.
pub fn make_null_basis<T: Real>(shape: &SystemShape, seed: Option<u64>) -> Result<NullBasis<T>> {
    let n = shape.n;
    let k = shape.k;
    let m = n - k;
    let mut vectors = Vec::with_capacity(n);
    for j in 1..=n {
        let mut c = DVector::<T>::zeros(n);
        if j <= m {
            c[j - 1] = T::one();
            c[m + (j - 1) % k] += T::one();
        } else {
            c[j - m - 1] += T::one();
            c[j - 1] -= T::one();
        }
        vectors.push(c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    if seed.is_some() {
        for v in vectors.iter_mut() {
            if rng.random::<bool>() {
                *v = -v.clone();
            }
        }
    }
    if let Ok(b) = NullBasis::new(shape, vectors) {
        return Ok(b);
    }
    for _ in 0..1000 {
        let vectors: Vec<DVector<T>> = (0..n)
            .map(|_| {
                let a: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                DVector::from_iterator(n, a.into_iter().chain(b.into_iter().map(|x| x * na / nb)).map(lit::<T>))
            })
            .collect();
        let det = NullBasis::matrix_of(&vectors).determinant();
        let scale = vectors.iter().fold(T::one(), |a, v| a * v.norm());
        if det.abs() > lit::<T>(1e-3) * scale {
            return NullBasis::new(shape, vectors);
        }
    }
    Err(Error::InvalidBasis("could not draw a well-conditioned null basis".into()))
}

/// A grid-sampled map with its metric field, frame and (hypersurfaces)
/// second fundamental form.
#[derive(Clone, Debug)]
pub struct ImmersionSheet<T: Real> {
    pub shape: SystemShape,
    pub grid: GridSpec,
    /// Values in `R^{n+1}` (hypersurface) or `R^n` (coordinate system).
    pub f: Vec<DVector<T>>,
    /// Metric field with `f_{x_i} = u_i e_i`.
    pub u: Vec<DVector<T>>,
    /// Columns `e_1..e_n` (and the unit normal `e_{n+1}` for hypersurfaces).
    pub frame: Vec<DMatrix<T>>,
    /// Coefficients of `II = sum_i kappa_i dx_i^2` with respect to `e_{n+1}`.
    pub second_form: Option<Vec<DVector<T>>>,
    /// `true` where the node is singular.
    pub mask: Vec<bool>,
}

impl<T: Real> ImmersionSheet<T> {
    pub fn unmasked(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.f.len()).filter(|&i| !self.mask[i])
    }

    pub fn normal(&self, node: usize) -> Option<DVector<T>> {
        (self.shape.variant == Variant::Hypersurface).then(|| self.frame[node].column(self.shape.n).into_owned())
    }
}

/// Singular mask from the metric field.
pub fn singular_mask<T: Real>(u: &[DVector<T>]) -> Vec<bool> {
    let norms: Vec<T> = u.iter().map(|v| v.norm()).collect();
    let med = median(&norms).unwrap_or(T::zero());
    let threshold = med * lit(MASK_RATIO);
    u.iter().map(|v| v.iter().fold(T::max_value().unwrap_or(T::one()), |a, x| a.min(x.abs())) < threshold).collect()
}

/// `n` sheets sharing a grid and a frame field.
#[derive(Clone, Debug)]
pub struct CombescureSequence<T: Real> {
    pub sheets: Vec<ImmersionSheet<T>>,
    /// The vectors `c_l` the sheets were built from.
    pub vectors: Vec<DVector<T>>,
}

/// `f = Y c`, `u = J g2^{-1} c`, frame `-g1`, `II = sum eps_i gamma_i u_i dx_i^2`.
pub fn synthesize_sheet<T: Real>(sheet: &FrameSheet<T>, c: &DVector<T>) -> ImmersionSheet<T> {
    let shape = sheet.shape;
    let j = shape.j_matrix::<T>();
    let f: Vec<DVector<T>> = sheet.y.iter().map(|y| y * c).collect();
    let u: Vec<DVector<T>> = sheet.g2.iter().map(|g2| g2.transpose() * &j * c).collect();
    let frame: Vec<DMatrix<T>> = sheet.g1.iter().map(|g1| -g1).collect();
    let second_form = shape.has_gamma().then(|| {
        sheet
            .xi
            .iter()
            .zip(&u)
            .map(|(xi, u)| {
                let g = xi.gamma.as_ref().expect("hypersurface data has gamma");
                DVector::from_fn(shape.n, |i, _| shape.eps::<T>(i) * g[i] * u[i])
            })
            .collect()
    });
    let mask = singular_mask(&u);
    ImmersionSheet { shape, grid: sheet.grid.clone(), f, u, frame, second_form, mask }
}

pub fn synthesize_sequence<T: Real>(sheet: &FrameSheet<T>, basis: &NullBasis<T>) -> Result<CombescureSequence<T>> {
    let seq = CombescureSequence {
        sheets: basis.vectors.iter().map(|c| synthesize_sheet(sheet, c)).collect(),
        vectors: basis.vectors.clone(),
    };
    let (ratio, node) = stored_rank(&seq);
    if ratio < lit(RANK_THRESHOLD) {
        return Err(Error::RankDeficient { node, ratio: to_f64(ratio) });
    }
    Ok(seq)
}

fn singular_ratio<T: Real>(m: DMatrix<T>) -> T {
    let sv = m.singular_values();
    let max = sv.iter().fold(T::zero(), |a, x| a.max(*x));
    let min = sv.iter().fold(max, |a, x| a.min(*x));
    if max == T::zero() {
        T::zero()
    } else {
        min / max
    }
}

/// Worst `s_min / s_max` of the stored `(u_1 .. u_n)` over unmasked nodes.
fn stored_rank<T: Real>(seq: &CombescureSequence<T>) -> (T, usize) {
    let first = &seq.sheets[0];
    let mut worst = (T::one(), 0);
    for node in 0..first.f.len() {
        if seq.sheets.iter().any(|s| s.mask[node]) {
            continue;
        }
        let m = DMatrix::from_columns(&seq.sheets.iter().map(|s| s.u[node].clone()).collect::<Vec<_>>());
        let r = singular_ratio(m);
        if r < worst.0 {
            worst = (r, node);
        }
    }
    worst
}

/// Residual fields of [`verify_isothermic`]; masked nodes hold zero.
#[derive(Clone, Debug)]
pub struct IsothermicReport<T> {
    /// `max_{i<j} |<f_i, f_j>| / (|f_i| |f_j|)`.
    pub diagonality: ResidualField<T>,
    /// `|sum_i eps_i |f_i|^2| / sum_i |f_i|^2`.
    pub nullity: ResidualField<T>,
    /// `max_{i<j} |<f_ij, N>| / (|f_i| |f_j|)` with the finite-difference normal.
    pub curvature_line: Option<ResidualField<T>>,
    /// `max_i | |<f_ii, N>| - |kappa_i| |` against the stored second form.
    pub second_form: Option<ResidualField<T>>,
    /// `max_i | |f_i|^2 - u_i^2 | / |u|^2` against the stored metric field.
    pub metric: ResidualField<T>,
}

impl<T: Real> IsothermicReport<T> {
    pub fn fields(&self) -> Vec<(&'static str, &ResidualField<T>)> {
        let mut out = vec![("diagonality", &self.diagonality), ("nullity", &self.nullity), ("metric", &self.metric)];
        if let Some(c) = &self.curvature_line {
            out.push(("curvature_line", c));
        }
        if let Some(s) = &self.second_form {
            out.push(("second_form", s));
        }
        out
    }
}

fn tangents<T: Real>(grid: &GridSpec, f: &[DVector<T>], node: usize) -> Vec<DVector<T>> {
    (0..grid.dim()).map(|j| grid.d1::<T, DVector<T>>(f, node, j)).collect()
}

/// Unit normal of the tangent space spanned by finite-difference tangents.
pub fn fd_normal<T: Real>(tangents: &[DVector<T>]) -> DVector<T> {
    let t = DMatrix::from_columns(tangents);
    let n = generalized_cross(&t);
    let norm = n.norm();
    n / norm
}

/// Checks the defining conditions using only the values of `f`.
pub fn verify_isothermic<T: Real>(sheet: &ImmersionSheet<T>) -> IsothermicReport<T> {
    let grid = &sheet.grid;
    let n = sheet.shape.n;
    let hyp = sheet.shape.variant == Variant::Hypersurface;
    type Row<T> = (T, T, T, T, T);
    let rows: Vec<Row<T>> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let zero = T::zero();
            if sheet.mask[node] {
                return (zero, zero, zero, zero, zero);
            }
            let t = tangents(grid, &sheet.f, node);
            let norms: Vec<T> = t.iter().map(|v| v.norm()).collect();
            let mut diag = zero;
            for i in 0..n {
                for j in i + 1..n {
                    diag = diag.max(t[i].dot(&t[j]).abs() / (norms[i] * norms[j]));
                }
            }
            let sq: Vec<T> = norms.iter().map(|x| *x * *x).collect();
            let total = sq.iter().fold(zero, |a, x| a + *x);
            let signed = (0..n).fold(zero, |a, i| a + sheet.shape.eps::<T>(i) * sq[i]);
            let nullity = signed.abs() / total;
            let u = &sheet.u[node];
            let usq = u.norm_squared();
            let metric = (0..n).fold(zero, |a, i| a.max((sq[i] - u[i] * u[i]).abs() / usq));
            let (mut curv, mut second) = (zero, zero);
            if hyp {
                let normal = fd_normal(&t);
                for i in 0..n {
                    for j in i + 1..n {
                        let fij = grid.d2::<T, DVector<T>>(&sheet.f, node, i, j);
                        curv = curv.max(fij.dot(&normal).abs() / (norms[i] * norms[j]));
                    }
                }
                if let Some(kappa) = &sheet.second_form {
                    for i in 0..n {
                        let fii = grid.d2::<T, DVector<T>>(&sheet.f, node, i, i);
                        second = second.max((fii.dot(&normal).abs() - kappa[node][i].abs()).abs());
                    }
                }
            }
            (diag, nullity, curv, second, metric)
        })
        .collect();
    let col = |k: usize| ResidualField {
        values: rows
            .iter()
            .map(|r| match k {
                0 => r.0,
                1 => r.1,
                2 => r.2,
                3 => r.3,
                _ => r.4,
            })
            .collect(),
    };
    IsothermicReport {
        diagonality: col(0),
        nullity: col(1),
        curvature_line: hyp.then(|| col(2)),
        second_form: (hyp && sheet.second_form.is_some()).then(|| col(3)),
        metric: col(4),
    }
}

#[derive(Clone, Debug)]
pub struct CombescureReport<T> {
    /// Sine of the angle between `(f_l)_{x_j}` and `(f_1)_{x_j}`, maximized per node.
    pub parallelism: ResidualField<T>,
    /// Worst `s_min / s_max` of the metric fields recovered from `f`.
    pub rank_ratio: T,
    pub rank_node: usize,
    pub near_degenerate: bool,
}

fn sine_between<T: Real>(a: &DVector<T>, b: &DVector<T>) -> T {
    let bn = b.norm();
    let an = a.norm();
    if an == T::zero() || bn == T::zero() {
        return T::zero();
    }
    let b_hat = b / bn;
    let perp = a - &b_hat * a.dot(&b_hat);
    perp.norm() / an
}

/// Parallelism of coordinate directions and independence of the metric
/// fields, both recovered from the values of `f`.
pub fn verify_combescure<T: Real>(seq: &CombescureSequence<T>) -> Result<CombescureReport<T>> {
    if seq.sheets.len() < 2 {
        return Err(Error::Dimension("a Combescure check needs at least two sheets".into()));
    }
    let first = &seq.sheets[0];
    let grid = &first.grid;
    let n = first.shape.n;
    let rows: Vec<(T, Option<T>)> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            if seq.sheets.iter().any(|s| s.mask[node]) {
                return (T::zero(), None);
            }
            let t1 = tangents(grid, &first.f, node);
            let mut par = T::zero();
            let mut u = DMatrix::zeros(seq.sheets.len(), n);
            for (l, s) in seq.sheets.iter().enumerate() {
                let t = tangents(grid, &s.f, node);
                for j in 0..n {
                    par = par.max(sine_between(&t[j], &t1[j]));
                    u[(l, j)] = t[j].dot(&t1[j]) / t1[j].norm();
                }
            }
            (par, Some(singular_ratio(u)))
        })
        .collect();
    let mut rank = (T::one(), 0);
    for (node, r) in rows.iter().enumerate() {
        if let Some(r) = r.1 {
            if r < rank.0 {
                rank = (r, node);
            }
        }
    }
    Ok(CombescureReport {
        parallelism: ResidualField { values: rows.iter().map(|r| r.0).collect() },
        rank_ratio: rank.0,
        rank_node: rank.1,
        near_degenerate: rank.0 < lit(RANK_THRESHOLD),
    })
}

/// Result of [`invert_sequence`].
#[derive(Clone, Debug)]
pub struct Inversion<T: Real> {
    pub source: SolutionSource<T>,
    /// `max |F from sheet 1 - F from sheet 2|` (zero for a single sheet).
    pub cross_sheet: T,
}

fn invert_sheet<T: Real>(sheet: &ImmersionSheet<T>) -> Result<Vec<TangentDatum<T>>> {
    let shape = sheet.shape;
    let grid = &sheet.grid;
    let n = shape.n;
    if let Some(node) = sheet.mask.iter().position(|m| *m) {
        return Err(Error::Degenerate { at: format!("node {node}"), reason: "metric field below the singular threshold".into() });
    }
    let out = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let u = &sheet.u[node];
            let du: Vec<DVector<T>> = (0..n).map(|j| grid.d1::<T, DVector<T>>(&sheet.u, node, j)).collect();
            let mut f = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        f[(i, j)] = -shape.eps::<T>(i) * du[j][i] / u[j];
                    }
                }
            }
            let gamma = sheet.normal(node).map(|nu| {
                DVector::from_fn(n, |i, _| {
                    let fii = grid.d2::<T, DVector<T>>(&sheet.f, node, i, i);
                    shape.eps::<T>(i) * fii.dot(&nu) / u[i]
                })
            });
            TangentDatum { f, gamma }
        })
        .collect();
    Ok(out)
}

/// Recovers `f_ij = -eps_i (u_i)_{x_j} / u_j` and `gamma_i = eps_i II_ii / u_i`
/// from the first sheet, checking the second sheet gives the same `F`.
pub fn invert_sequence<T: Real>(seq: &CombescureSequence<T>) -> Result<Inversion<T>> {
    let first = &seq.sheets[0];
    let values = invert_sheet(first)?;
    let cross_sheet = match seq.sheets.get(1) {
        Some(second) => {
            let other = invert_sheet(second)?;
            values.iter().zip(&other).fold(T::zero(), |a, (x, y)| a.max(x.sub(y).max_abs()))
        }
        None => T::zero(),
    };
    let source = SolutionSource::tabulated(first.shape, Tabulated { grid: first.grid.clone(), values })?;
    Ok(Inversion { source, cross_sheet })
}

/// Classical Christoffel diagnostics for `n = 2, k = 1` between the first
/// sheets of two sequences.
#[derive(Clone, Debug)]
pub struct ClassicalChristoffel<T> {
    /// Sine of the angle between `f_{x_i}` and `f~_{x_i}` (finite differences).
    pub parallelism: ResidualField<T>,
    /// Determinant of the change of frame from `df` to `df~` coefficients.
    pub orientation: Vec<T>,
    /// `max_i |u_i u~_i - eps_i|` from the stored metric fields.
    pub dual_metric: T,
}

#[derive(Clone, Debug)]
pub struct ChristoffelPair<T: Real> {
    pub from: CombescureSequence<T>,
    pub to: CombescureSequence<T>,
    pub classical: Option<ClassicalChristoffel<T>>,
}

/// Synthesizes the sequences for two null bases from one frame.
pub fn christoffel_transform<T: Real>(sheet: &FrameSheet<T>, from: &NullBasis<T>, to: &NullBasis<T>) -> Result<ChristoffelPair<T>> {
    let a = synthesize_sequence(sheet, from)?;
    let b = synthesize_sequence(sheet, to)?;
    let shape = sheet.shape;
    let classical = (shape.n == 2 && shape.k == 1).then(|| classical_christoffel(&a.sheets[0], &b.sheets[0]));
    Ok(ChristoffelPair { from: a, to: b, classical })
}

pub fn classical_christoffel<T: Real>(f: &ImmersionSheet<T>, g: &ImmersionSheet<T>) -> ClassicalChristoffel<T> {
    let grid = &f.grid;
    let rows: Vec<(T, T)> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            if f.mask[node] || g.mask[node] {
                return (T::zero(), T::zero());
            }
            let a = tangents(grid, &f.f, node);
            let b = tangents(grid, &g.f, node);
            let par = sine_between(&a[0], &b[0]).max(sine_between(&a[1], &b[1]));
            let am = DMatrix::from_columns(&a);
            let bm = DMatrix::from_columns(&b);
            let gram = am.transpose() * &am;
            let m = gram.try_inverse().map(|gi| gi * am.transpose() * bm);
            (par, m.map_or(T::zero(), |m| m.determinant()))
        })
        .collect();
    let mut dual = T::zero();
    for node in 0..grid.len() {
        if f.mask[node] || g.mask[node] {
            continue;
        }
        for i in 0..2 {
            dual = dual.max((f.u[node][i] * g.u[node][i] - f.shape.eps::<T>(i)).abs());
        }
    }
    ClassicalChristoffel {
        parallelism: ResidualField { values: rows.iter().map(|r| r.0).collect() },
        orientation: rows.iter().map(|r| r.1).collect(),
        dual_metric: dual,
    }
}
