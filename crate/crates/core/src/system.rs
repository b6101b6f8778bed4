//! Pointwise solution sources `xi(x) = (F, gamma)(x)`, the Lax pair, and
//! finite-difference residuals of the PDE system and of flatness.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{Complex, DMatrix};
use rayon::prelude::*;

use crate::algebra::{basis_element, bracket, embed_p, SystemShape, TangentDatum, Variant};
use crate::dressing::{RibaucourData, SimpleElement};
use crate::error::{Error, Result};
use crate::frames::vacuum_frame;
use crate::grid::GridSpec;
use crate::scalar::{lit, max_abs, percentile_sorted, to_f64, CMatrix, CVector, Real};

/// Values of `xi` on the nodes of a grid.
#[derive(Clone, Debug)]
pub struct Tabulated<T: Real> {
    pub grid: GridSpec,
    pub values: Vec<TangentDatum<T>>,
}

#[derive(Clone, Debug)]
pub enum SourceKind<T: Real> {
    Vacuum,
    Dressed { parent: Arc<SolutionSource<T>>, element: SimpleElement<T> },
    Tabulated(Tabulated<T>),
}

/// A solution of the `U/K`-system that can be evaluated at any point of
/// its domain.
#[derive(Clone, Debug)]
pub struct SolutionSource<T: Real> {
    pub shape: SystemShape,
    pub kind: SourceKind<T>,
}

pub fn vacuum<T: Real>(shape: SystemShape) -> SolutionSource<T> {
    SolutionSource { shape, kind: SourceKind::Vacuum }
}

impl<T: Real> SolutionSource<T> {
    pub fn tabulated(shape: SystemShape, table: Tabulated<T>) -> Result<Self> {
        if table.grid.dim() != shape.n || table.values.len() != table.grid.len() {
            return Err(Error::Dimension(format!(
                "table has {} values on a {}-dimensional grid of {} nodes, shape n = {}",
                table.values.len(),
                table.grid.dim(),
                table.grid.len(),
                shape.n
            )));
        }
        Ok(Self { shape, kind: SourceKind::Tabulated(table) })
    }

    /// Number of dressing layers above the vacuum (0 for vacuum and tables).
    pub fn depth(&self) -> usize {
        match &self.kind {
            SourceKind::Dressed { parent, .. } => 1 + parent.depth(),
            _ => 0,
        }
    }

    /// Closed-form sources can produce their normalized frame pointwise.
    pub fn has_closed_form(&self) -> bool {
        match &self.kind {
            SourceKind::Vacuum => true,
            SourceKind::Dressed { parent, .. } => parent.has_closed_form(),
            SourceKind::Tabulated(_) => false,
        }
    }

    pub fn eval(&self, x: &[T]) -> Result<TangentDatum<T>> {
        match &self.kind {
            SourceKind::Vacuum => Ok(TangentDatum::zero(&self.shape)),
            SourceKind::Tabulated(t) => t.interpolate(x),
            SourceKind::Dressed { parent, element } => {
                let base = parent.eval(x)?;
                let data = parent.dressing_data(element, x)?;
                let mut xi = base.xi() + data.z.clone() * data.q.transpose() * data.kappa();
                for i in 0..self.shape.n {
                    xi[(i, i)] = T::zero();
                }
                Ok(TangentDatum::from_xi(&self.shape, &xi))
            }
        }
    }

    /// `E(x, lambda)^{-1} v` for the normalized frame of this source.
    pub fn transported_line(&self, element: &SimpleElement<T>, x: &[T]) -> Result<CVector<T>> {
        let e = self.closed_form_frame(x, element.alpha.value())?;
        Ok(element.form.group_inverse(&e) * &element.v)
    }

    /// Normalized `(Q, Z)` of the line `E_alpha(x)^{-1} L`.
    pub fn dressing_data(&self, element: &SimpleElement<T>, x: &[T]) -> Result<RibaucourData<T>> {
        let y = self.transported_line(element, x)?;
        RibaucourData::from_vector(&self.shape, element.alpha, &y, || format!("{:?}", x.iter().map(|v| to_f64(*v)).collect::<Vec<_>>()))
    }

    /// Normalized extended frame `E(x, lambda)` with `E(0, lambda) = I`,
    /// available for vacuum and dressed-vacuum sources.
    pub fn closed_form_frame(&self, x: &[T], lambda: Complex<T>) -> Result<CMatrix<T>> {
        match &self.kind {
            SourceKind::Vacuum => Ok(vacuum_frame(&self.shape, x, lambda)),
            SourceKind::Tabulated(_) => Err(Error::Unsupported("tabulated sources have no closed-form frame".into())),
            SourceKind::Dressed { parent, element } => {
                let e = parent.closed_form_frame(x, lambda)?;
                let y = parent.transported_line(element, x)?;
                let local = SimpleElement::from_vector_unchecked(self.shape, element.alpha, y)?;
                Ok(element.evaluate(lambda)? * e * local.evaluate_inverse(lambda)?)
            }
        }
    }

    /// Frame based at the parent's normalized frame, `E_parent p~^{-1}`,
    /// without re-normalization; equal to the normalized frame for vacuum.
    pub fn based_frame(&self, x: &[T], lambda: Complex<T>) -> Result<CMatrix<T>> {
        match &self.kind {
            SourceKind::Dressed { parent, element } => {
                let e = parent.closed_form_frame(x, lambda)?;
                let y = parent.transported_line(element, x)?;
                let local = SimpleElement::from_vector_unchecked(self.shape, element.alpha, y)?;
                Ok(e * local.evaluate_inverse(lambda)?)
            }
            _ => self.closed_form_frame(x, lambda),
        }
    }

    /// The dressing elements from the innermost layer outwards.
    pub fn elements(&self) -> Vec<&SimpleElement<T>> {
        match &self.kind {
            SourceKind::Dressed { parent, element } => {
                let mut v = parent.elements();
                v.push(element);
                v
            }
            _ => Vec::new(),
        }
    }

    /// Evaluates on every node of `grid` (in parallel). Tabulated sources on
    /// their own grid return the stored values unchanged.
    pub fn sample(&self, grid: &GridSpec) -> Result<Vec<TangentDatum<T>>> {
        if let SourceKind::Tabulated(t) = &self.kind {
            if &t.grid == grid {
                return Ok(t.values.clone());
            }
        }
        (0..grid.len()).into_par_iter().map(|f| self.eval(&grid.coords_t::<T>(f))).collect()
    }
}

impl<T: Real> Tabulated<T> {
    /// Multilinear interpolation; points outside the box are rejected.
    pub fn interpolate(&self, x: &[T]) -> Result<TangentDatum<T>> {
        let xf: Vec<f64> = x.iter().map(|v| to_f64(*v)).collect();
        if !self.grid.contains(&xf) {
            return Err(Error::OutsideDomain { point: xf });
        }
        let n = self.grid.dim();
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0; n];
        let origin = self.grid.origin_index();
        for j in 0..n {
            let t = xf[j] / self.grid.h(j) + origin[j] as f64;
            let i0 = (t.floor().max(0.0) as usize).min(self.grid.nodes[j] - 2);
            base[j] = i0;
            frac[j] = (t - i0 as f64).clamp(0.0, 1.0);
        }
        let shape_xi = self.values[0].xi();
        let mut acc = DMatrix::<T>::zeros(shape_xi.nrows(), shape_xi.ncols());
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut idx = base.clone();
            for j in 0..n {
                if corner >> j & 1 == 1 {
                    idx[j] += 1;
                    w *= frac[j];
                } else {
                    w *= 1.0 - frac[j];
                }
            }
            if w != 0.0 {
                acc += self.values[self.grid.flat(&idx)].xi() * lit::<T>(w);
            }
        }
        let mut out = TangentDatum { f: acc.columns(0, self.values[0].f.ncols()).into_owned(), gamma: None };
        if self.values[0].gamma.is_some() {
            out.gamma = Some(acc.column(acc.ncols() - 1).into_owned());
        }
        Ok(out)
    }
}

/// The Lax pair coefficients `theta_j(x, lambda) = lambda a_j + [a_j, X(x)]`.
pub fn lax_pair<T: Real>(source: &SolutionSource<T>, x: &[T], lambda: Complex<T>) -> Result<Vec<CMatrix<T>>> {
    let xi = source.eval(x)?;
    let parts = LaxParts::new(&source.shape, &xi);
    Ok(parts.theta(lambda))
}

/// `theta_j = lambda a_j + c_j` split into its constant and `xi`-dependent parts.
#[derive(Clone, Debug)]
pub struct LaxParts<T: Real> {
    pub a: Vec<DMatrix<T>>,
    pub c: Vec<DMatrix<T>>,
}

impl<T: Real> LaxParts<T> {
    pub fn new(shape: &SystemShape, xi: &TangentDatum<T>) -> Self {
        let x = embed_p(shape, xi);
        let a: Vec<DMatrix<T>> = (0..shape.n).map(|j| basis_element(shape, j).expect("in range")).collect();
        let c = a.iter().map(|aj| bracket(aj, &x)).collect();
        Self { a, c }
    }

    pub fn theta_axis(&self, j: usize, lambda: Complex<T>) -> CMatrix<T> {
        let a = &self.a[j];
        let c = &self.c[j];
        CMatrix::from_fn(a.nrows(), a.ncols(), |r, s| lambda * a[(r, s)] + Complex::new(c[(r, s)], T::zero()))
    }

    pub fn theta(&self, lambda: Complex<T>) -> Vec<CMatrix<T>> {
        (0..self.a.len()).map(|j| self.theta_axis(j, lambda)).collect()
    }
}

/// Per-node residual values with summary statistics.
#[derive(Clone, Debug)]
pub struct ResidualField<T> {
    pub values: Vec<T>,
}

impl<T: Real> ResidualField<T> {
    pub fn max(&self) -> T {
        self.values.iter().fold(T::zero(), |a, v| a.max(*v))
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Max over the nodes selected by `keep`.
    pub fn max_where(&self, keep: impl Fn(usize) -> bool) -> T {
        self.values.iter().enumerate().filter(|(i, _)| keep(*i)).fold(T::zero(), |a, (_, v)| a.max(*v))
    }

    pub fn percentiles(&self, ps: &[f64]) -> Vec<f64> {
        let mut sorted: Vec<f64> = self.values.iter().map(|v| to_f64(*v)).collect();
        sorted.sort_by(|a, b| a.total_cmp(b));
        ps.iter().map(|p| percentile_sorted(&sorted, *p)).collect()
    }
}

fn check_grid(shape: &SystemShape, grid: &GridSpec) -> Result<()> {
    if grid.dim() != shape.n {
        return Err(Error::Dimension(format!("grid has {} axes, shape n = {}", grid.dim(), shape.n)));
    }
    if grid.nodes.iter().any(|&m| m < crate::grid::MIN_NODES) {
        return Err(Error::GridTooSmall(format!("{:?}", grid.nodes)));
    }
    Ok(())
}

/// Max over all equation instances of the `U/K`-system at each node.
///
/// With `xi = (F, gamma)` and `w_c` ranging over all columns of `xi`:
///
/// ```text
/// e_i d_j f_ij + e_j d_i f_ji - e_i e_j sum_c xi_ic xi_jc = 0   (i != j)
/// d_i f_ij + d_j f_ji - sum_a e_a f_ai f_aj = 0                  (i != j)
/// d_k f_ij + e_k f_ik f_kj = 0                                   (i, j, k distinct)
/// d_j gamma_i + e_j f_ij gamma_j = 0                             (i != j)
/// ```
pub fn pde_residual<T: Real>(source: &SolutionSource<T>, grid: &GridSpec) -> Result<ResidualField<T>> {
    check_grid(&source.shape, grid)?;
    let xis: Vec<DMatrix<T>> = source.sample(grid)?.iter().map(|d| d.xi()).collect();
    Ok(pde_residual_of_samples(&source.shape, grid, &xis))
}

pub fn pde_residual_of_samples<T: Real>(shape: &SystemShape, grid: &GridSpec, xis: &[DMatrix<T>]) -> ResidualField<T> {
    let n = shape.n;
    let p = shape.p();
    let values = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let xi = &xis[node];
            let d: Vec<DMatrix<T>> = (0..n).map(|j| grid.d1::<T, DMatrix<T>>(xis, node, j)).collect();
            let e = |i: usize| shape.eps::<T>(i);
            let mut worst = T::zero();
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let mut s1 = T::zero();
                    for c in 0..p {
                        s1 += xi[(i, c)] * xi[(j, c)];
                    }
                    let r1 = e(i) * d[j][(i, j)] + e(j) * d[i][(j, i)] - e(i) * e(j) * s1;
                    let mut s2 = T::zero();
                    for a in 0..n {
                        s2 += e(a) * xi[(a, i)] * xi[(a, j)];
                    }
                    let r2 = d[i][(i, j)] + d[j][(j, i)] - s2;
                    worst = worst.max(r1.abs()).max(r2.abs());
                    for k in 0..n {
                        if k != i && k != j {
                            let r3 = d[k][(i, j)] + e(k) * xi[(i, k)] * xi[(k, j)];
                            worst = worst.max(r3.abs());
                        }
                    }
                    if shape.variant == Variant::Hypersurface {
                        let r4 = d[j][(i, n)] + e(j) * xi[(i, j)] * xi[(j, n)];
                        worst = worst.max(r4.abs());
                    }
                }
            }
            worst
        })
        .collect();
    ResidualField { values }
}

/// Per-node `max_{i<j} |d_i theta_j - d_j theta_i + [theta_i, theta_j]|`.
pub fn curvature_residual<T: Real>(source: &SolutionSource<T>, grid: &GridSpec, lambda: Complex<T>) -> Result<ResidualField<T>> {
    check_grid(&source.shape, grid)?;
    let samples = source.sample(grid)?;
    Ok(curvature_residual_of_samples(&source.shape, grid, &samples, lambda))
}

pub fn curvature_residual_of_samples<T: Real>(
    shape: &SystemShape,
    grid: &GridSpec,
    samples: &[TangentDatum<T>],
    lambda: Complex<T>,
) -> ResidualField<T> {
    let n = shape.n;
    let parts: Vec<LaxParts<T>> = samples.iter().map(|xi| LaxParts::new(shape, xi)).collect();
    let c_fields: Vec<Vec<DMatrix<T>>> = (0..n).map(|j| parts.iter().map(|p| p.c[j].clone()).collect()).collect();
    let a = &parts[0].a;
    let values = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let c = &parts[node].c;
            let mut worst = T::zero();
            for i in 0..n {
                for j in i + 1..n {
                    let r0 = grid.d1::<T, DMatrix<T>>(&c_fields[j], node, i) - grid.d1::<T, DMatrix<T>>(&c_fields[i], node, j)
                        + bracket(&c[i], &c[j]);
                    let r1 = bracket(&a[i], &c[j]) + bracket(&c[i], &a[j]);
                    let r = r0.zip_map(&r1, |u, v| crate::scalar::cabs(Complex::new(u, T::zero()) + lambda * v));
                    worst = worst.max(max_abs(&r));
                }
            }
            worst
        })
        .collect();
    ResidualField { values }
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Coordinate => "coordinate",
        Variant::Hypersurface => "hypersurface",
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
}

/// Writes a table in the columnar text format:
///
/// ```text
/// # isothermic tabulated solution
/// shape n=2 k=1 variant=hypersurface
/// grid min=-1e0,-1e0 max=1e0,1e0 nodes=41,41
/// x_1 x_2 f_11 f_12 f_21 f_22 gamma_1 gamma_2
/// <one row per node, C order>
/// ```
pub fn write_tabulated<T: Real, W: Write>(shape: &SystemShape, table: &Tabulated<T>, mut out: W) -> Result<()> {
    let n = shape.n;
    writeln!(out, "# isothermic tabulated solution")?;
    writeln!(out, "shape n={} k={} variant={}", n, shape.k, variant_name(shape.variant))?;
    let nodes: Vec<String> = table.grid.nodes.iter().map(|m| m.to_string()).collect();
    writeln!(out, "grid min={} max={} nodes={}", join(&table.grid.min), join(&table.grid.max), nodes.join(","))?;
    let mut header: Vec<String> = (1..=n).map(|j| format!("x_{j}")).collect();
    for i in 1..=n {
        for j in 1..=n {
            header.push(format!("f_{i}{j}"));
        }
    }
    if shape.has_gamma() {
        header.extend((1..=n).map(|i| format!("gamma_{i}")));
    }
    writeln!(out, "{}", header.join(" "))?;
    let mut line = String::new();
    for (node, value) in table.values.iter().enumerate() {
        line.clear();
        let mut cells: Vec<f64> = table.grid.coords(node);
        cells.extend(value.f.transpose().iter().map(|v| to_f64(*v)));
        if let Some(g) = &value.gamma {
            cells.extend(g.iter().map(|v| to_f64(*v)));
        }
        for (c, v) in cells.iter().enumerate() {
            if c > 0 {
                line.push(' ');
            }
            write!(line, "{v:e}").expect("string write");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn parse_kv<'a>(line: &'a str, key: &str, lineno: usize) -> Result<&'a str> {
    line.split_whitespace()
        .find_map(|tok| tok.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::Parse { line: lineno, msg: format!("missing `{key}=`") })
}

fn parse_list<V: std::str::FromStr>(s: &str, lineno: usize) -> Result<Vec<V>> {
    s.split(',')
        .map(|t| t.trim().parse::<V>().map_err(|_| Error::Parse { line: lineno, msg: format!("bad number `{t}`") }))
        .collect()
}

/// Reads the format produced by [`write_tabulated`].
pub fn read_tabulated<T: Real, R: BufRead>(input: R) -> Result<SolutionSource<T>> {
    let mut lines = input.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(s) if s.trim().is_empty() || s.starts_with('#') => None,
        other => Some((i + 1, other)),
    });
    let mut next = || -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i, l?)),
            None => Err(Error::Parse { line: 0, msg: "unexpected end of input".into() }),
        }
    };
    let (ln, shape_line) = next()?;
    if !shape_line.starts_with("shape") {
        return Err(Error::Parse { line: ln, msg: "expected `shape` header".into() });
    }
    let n: usize = parse_kv(&shape_line, "n", ln)?.parse().map_err(|_| Error::Parse { line: ln, msg: "bad n".into() })?;
    let k: usize = parse_kv(&shape_line, "k", ln)?.parse().map_err(|_| Error::Parse { line: ln, msg: "bad k".into() })?;
    let variant = match parse_kv(&shape_line, "variant", ln)? {
        "coordinate" => Variant::Coordinate,
        "hypersurface" => Variant::Hypersurface,
        other => return Err(Error::Parse { line: ln, msg: format!("unknown variant `{other}`") }),
    };
    let shape = SystemShape::new(n, k, variant)?;
    let (ln, grid_line) = next()?;
    let grid = GridSpec::new(
        parse_list(parse_kv(&grid_line, "min", ln)?, ln)?,
        parse_list(parse_kv(&grid_line, "max", ln)?, ln)?,
        parse_list(parse_kv(&grid_line, "nodes", ln)?, ln)?,
    )?;
    let _columns = next()?;
    let width = n + n * n + if shape.has_gamma() { n } else { 0 };
    let mut values = Vec::with_capacity(grid.len());
    for node in 0..grid.len() {
        let (ln, row) = next()?;
        let cells: Vec<f64> = row
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Parse { line: ln, msg: format!("bad number `{t}`") }))
            .collect::<Result<_>>()?;
        if cells.len() != width {
            return Err(Error::Parse { line: ln, msg: format!("expected {width} columns, found {}", cells.len()) });
        }
        let x = grid.coords(node);
        if x.iter().zip(&cells).any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + a.abs())) {
            return Err(Error::Parse { line: ln, msg: "node coordinates do not match the grid".into() });
        }
        let f = DMatrix::from_row_iterator(n, n, cells[n..n + n * n].iter().map(|v| lit::<T>(*v)));
        let gamma = shape.has_gamma().then(|| nalgebra::DVector::from_iterator(n, cells[n + n * n..].iter().map(|v| lit::<T>(*v))));
        values.push(TangentDatum { f, gamma });
    }
    SolutionSource::tabulated(shape, Tabulated { grid, values })
}
