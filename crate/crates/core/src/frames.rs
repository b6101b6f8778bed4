//! Extended frames `E(x, lambda)` on a grid: staircase RK4 integration of
//! `E^{-1} dE = theta`, the `K`-blocks of `E(x, 0)`, the potential `Y`, and
//! plaquette monodromy.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{Complex, ComplexField, DMatrix};
use rayon::prelude::*;

use crate::algebra::{AmbientForm, SystemShape, TangentDatum, Variant};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::scalar::{cabs, cinf_norm, cmax_abs, lit, max_abs, real_part, to_f64, CMatrix, Real};
use crate::system::{LaxParts, SolutionSource};

/// Sign in front of the exact 1-form `dY = s * sum_i g1 e_ii J g2^{-1} dx_i`,
/// fixed so that it agrees with `d/dlambda E E^{-1}` at `lambda = 0`.
pub const Y_FORM_SIGN: f64 = -1.0;

/// `prod_i exp(lambda x_i a_i)`: circular rotations in the `(i, p+i)` plane
/// for `eps_i = +1`, hyperbolic ones for `eps_i = -1`.
pub fn vacuum_frame<T: Real>(shape: &SystemShape, x: &[T], lambda: Complex<T>) -> CMatrix<T> {
    let p = shape.p();
    let m = shape.ambient_dim();
    let mut e = CMatrix::<T>::identity(m, m);
    for i in 0..shape.n {
        let t = lambda * x[i];
        let (c, s) = if shape.epsilon(i) > 0 {
            (ComplexField::cos(t), ComplexField::sin(t))
        } else {
            (ComplexField::cosh(t), ComplexField::sinh(t))
        };
        e[(i, i)] = c;
        e[(p + i, p + i)] = c;
        e[(p + i, i)] = s;
        e[(i, p + i)] = if shape.epsilon(i) > 0 { -s } else { s };
    }
    e
}

#[derive(Clone, Debug)]
pub struct IntegrationOptions {
    /// Sub-steps per edge are chosen so that `|theta_j|_inf * h_sub <= substep_bound`.
    pub substep_bound: f64,
    /// Maximum tolerated `|E^T G E - G|_inf` at any node.
    pub drift_budget: f64,
    /// Staircase axis order; defaults to `0, 1, .., n-1`.
    pub axis_order: Option<Vec<usize>>,
    /// Also compute `Y` by differentiating in `lambda` and compare.
    pub cross_check_y: bool,
    pub y_tolerance: f64,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self { substep_bound: 0.005, drift_budget: 1e-8, axis_order: None, cross_check_y: true, y_tolerance: 1e-6 }
    }
}

/// Frames sampled on a grid for a list of spectral values.
#[derive(Clone, Debug)]
pub struct FrameSheet<T: Real> {
    pub shape: SystemShape,
    pub grid: GridSpec,
    pub lambdas: Vec<Complex<T>>,
    /// `frames[l][node]`.
    pub frames: Vec<Vec<CMatrix<T>>>,
    pub g1: Vec<DMatrix<T>>,
    pub g2: Vec<DMatrix<T>>,
    /// Potential `Y`, `p x n` per node.
    pub y: Vec<DMatrix<T>>,
    /// `|Y_A - Y_B|_inf` per node when the cross-check ran.
    pub y_discrepancy: Option<Vec<T>>,
    /// `xi` sampled on the nodes.
    pub xi: Vec<TangentDatum<T>>,
    pub source: Option<Arc<SolutionSource<T>>>,
    /// Whether `E(0, lambda) = I`.
    pub normalized: bool,
    pub substep_bound: f64,
}

/// Blocks of `E(x, 0)` and the size of its off-diagonal part.
#[derive(Clone, Debug)]
pub struct E0Split<T: Real> {
    pub g1: Vec<DMatrix<T>>,
    pub g2: Vec<DMatrix<T>>,
    pub offdiag: Vec<T>,
}

/// `Y` by the exact 1-form, with the discrepancy against `lambda`-differentiation.
#[derive(Clone, Debug)]
pub struct YExtraction<T: Real> {
    pub y: Vec<DMatrix<T>>,
    pub discrepancy: Vec<T>,
}

impl<T: Real> FrameSheet<T> {
    pub fn lambda_index(&self, lambda: Complex<T>) -> Result<usize> {
        let tol = crate::scalar::tol::<T>(1e-12);
        self.lambdas
            .iter()
            .position(|l| cabs(*l - lambda) <= tol * (T::one() + cabs(lambda)))
            .ok_or_else(|| Error::MissingLambda(format!("{lambda}")))
    }

    pub fn frame(&self, lambda: Complex<T>, node: usize) -> Result<&CMatrix<T>> {
        Ok(&self.frames[self.lambda_index(lambda)?][node])
    }

    pub fn form(&self) -> AmbientForm<T> {
        AmbientForm::new(self.shape)
    }

    /// Largest `|E^T G E - G|_inf` over all nodes and spectral values, with its node.
    pub fn max_form_residual(&self) -> (T, usize) {
        let g = self.form().g_complex();
        let mut worst = (T::zero(), 0);
        for per_lambda in &self.frames {
            for (node, e) in per_lambda.iter().enumerate() {
                let r = cmax_abs(&(e.transpose() * &g * e - &g));
                if r > worst.0 {
                    worst = (r, node);
                }
            }
        }
        worst
    }

    /// Builds the sheet pointwise from a closed-form source (vacuum or dressed
    /// vacuum). Dressed frames are `E p~^{-1}` unless `renormalize` is set,
    /// in which case they are left-multiplied to satisfy `E(0, lambda) = I`.
    pub fn closed_form(source: Arc<SolutionSource<T>>, grid: &GridSpec, lambdas: &[Complex<T>], renormalize: bool) -> Result<Self> {
        if !source.has_closed_form() {
            return Err(Error::Unsupported("closed-form frames need a vacuum or dressed-vacuum source".into()));
        }
        let shape = source.shape;
        let lambdas = with_zero(lambdas);
        let eval = |x: &[T], l: Complex<T>| -> Result<CMatrix<T>> {
            if renormalize {
                source.closed_form_frame(x, l)
            } else {
                source.based_frame(x, l)
            }
        };
        let delta = lit::<T>(1e-5);
        let per_node: Vec<(Vec<CMatrix<T>>, DMatrix<T>, TangentDatum<T>)> = (0..grid.len())
            .into_par_iter()
            .map(|node| {
                let x = grid.coords_t::<T>(node);
                let frames = lambdas.iter().map(|l| eval(&x, *l)).collect::<Result<Vec<_>>>()?;
                let probes = [delta, -delta, delta * lit(0.5), -delta * lit(0.5)]
                    .iter()
                    .map(|d| eval(&x, Complex::new(*d, T::zero())))
                    .collect::<Result<Vec<_>>>()?;
                let e0 = &frames[0];
                let y = y_from_lambda_derivative(&shape, e0, &probes, delta);
                Ok((frames, y, source.eval(&x)?))
            })
            .collect::<Result<_>>()?;
        let mut frames = vec![Vec::with_capacity(grid.len()); lambdas.len()];
        let mut ys = Vec::with_capacity(grid.len());
        let mut xi = Vec::with_capacity(grid.len());
        for (fs, y, d) in per_node {
            for (l, f) in fs.into_iter().enumerate() {
                frames[l].push(f);
            }
            ys.push(y);
            xi.push(d);
        }
        let normalized = renormalize || source.depth() == 0;
        let mut sheet = Self {
            shape,
            grid: grid.clone(),
            lambdas,
            frames,
            g1: Vec::new(),
            g2: Vec::new(),
            y: ys,
            y_discrepancy: None,
            xi,
            source: Some(source),
            normalized,
            substep_bound: 0.0,
        };
        sheet.fill_blocks();
        Ok(sheet)
    }

    pub(crate) fn fill_blocks(&mut self) {
        let split = split_blocks(&self.shape, &self.frames[0]);
        self.g1 = split.g1;
        self.g2 = split.g2;
    }

    /// Writes the sheet as plain text: a header, then one row per node and
    /// spectral value holding the node coordinates, `lambda` and the real and
    /// imaginary parts of `E` in row-major order; `Y` rows follow.
    pub fn write_columnar<W: Write>(&self, mut out: W) -> Result<()> {
        let m = self.shape.ambient_dim();
        writeln!(out, "# isothermic frame sheet")?;
        writeln!(
            out,
            "shape n={} k={} variant={}",
            self.shape.n,
            self.shape.k,
            match self.shape.variant {
                Variant::Coordinate => "coordinate",
                Variant::Hypersurface => "hypersurface",
            }
        )?;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        let nodes: Vec<String> = self.grid.nodes.iter().map(|m| m.to_string()).collect();
        writeln!(out, "grid min={} max={} nodes={}", fmt(&self.grid.min), fmt(&self.grid.max), nodes.join(","))?;
        let ls: Vec<String> = self.lambdas.iter().map(|l| format!("{:e}:{:e}", to_f64(l.re), to_f64(l.im))).collect();
        writeln!(out, "lambdas {}", ls.join(","))?;
        writeln!(out, "normalized {}", self.normalized)?;
        writeln!(out, "frames {} values per row", self.shape.n + 2 + 2 * m * m)?;
        for (l, per_node) in self.frames.iter().enumerate() {
            for (node, e) in per_node.iter().enumerate() {
                let mut row: Vec<f64> = self.grid.coords(node);
                row.push(to_f64(self.lambdas[l].re));
                row.push(to_f64(self.lambdas[l].im));
                for r in 0..m {
                    for c in 0..m {
                        row.push(to_f64(e[(r, c)].re));
                        row.push(to_f64(e[(r, c)].im));
                    }
                }
                writeln!(out, "{}", row.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" "))?;
            }
        }
        writeln!(out, "y {} values per row", self.shape.n + self.shape.p() * self.shape.n)?;
        for (node, y) in self.y.iter().enumerate() {
            let mut row: Vec<f64> = self.grid.coords(node);
            row.extend(y.transpose().iter().map(|v| to_f64(*v)));
            writeln!(out, "{}", row.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" "))?;
        }
        Ok(())
    }

    /// Reads the format of [`FrameSheet::write_columnar`]. The result has no
    /// attached source and zero `xi` samples.
    pub fn read_columnar<R: BufRead>(input: R) -> Result<Self> {
        let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
        let mut it = lines.iter().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
        let mut next = || it.next().map(|(i, l)| (i + 1, l.as_str())).ok_or(Error::Parse { line: 0, msg: "unexpected end".into() });
        let bad = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        let (ln, shape_line) = next()?;
        let get = |line: &str, key: &str, ln: usize| -> Result<String> {
            line.split_whitespace()
                .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .map(str::to_string)
                .ok_or_else(|| bad(ln, key))
        };
        let n: usize = get(shape_line, "n", ln)?.parse().map_err(|_| bad(ln, "n"))?;
        let k: usize = get(shape_line, "k", ln)?.parse().map_err(|_| bad(ln, "k"))?;
        let variant = match get(shape_line, "variant", ln)?.as_str() {
            "coordinate" => Variant::Coordinate,
            "hypersurface" => Variant::Hypersurface,
            _ => return Err(bad(ln, "variant")),
        };
        let shape = SystemShape::new(n, k, variant)?;
        let (ln, gl) = next()?;
        let list = |s: String| -> Result<Vec<f64>> { s.split(',').map(|t| t.parse::<f64>().map_err(|_| bad(ln, "number"))).collect() };
        let nodes: Vec<usize> = get(gl, "nodes", ln)?.split(',').map(|t| t.parse().map_err(|_| bad(ln, "nodes"))).collect::<Result<_>>()?;
        let grid = GridSpec::new(list(get(gl, "min", ln)?)?, list(get(gl, "max", ln)?)?, nodes)?;
        let (ln, ll) = next()?;
        let lambdas: Vec<Complex<T>> = ll
            .trim_start_matches("lambdas")
            .trim()
            .split(',')
            .map(|pair| {
                let (a, b) = pair.split_once(':').ok_or_else(|| bad(ln, "lambda"))?;
                Ok(Complex::new(
                    lit(a.parse::<f64>().map_err(|_| bad(ln, "lambda"))?),
                    lit(b.parse::<f64>().map_err(|_| bad(ln, "lambda"))?),
                ))
            })
            .collect::<Result<_>>()?;
        let (_, nl) = next()?;
        let normalized = nl.trim_start_matches("normalized").trim() == "true";
        let _ = next()?;
        let m = shape.ambient_dim();
        let parse_row = |ln: usize, row: &str, width: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = row.split_whitespace().map(|t| t.parse::<f64>().map_err(|_| bad(ln, "number"))).collect::<Result<_>>()?;
            if v.len() != width {
                return Err(bad(ln, "row width"));
            }
            Ok(v)
        };
        let mut frames = vec![Vec::with_capacity(grid.len()); lambdas.len()];
        for per_lambda in frames.iter_mut() {
            for _ in 0..grid.len() {
                let (ln, row) = next()?;
                let v = parse_row(ln, row, n + 2 + 2 * m * m)?;
                let e = CMatrix::from_fn(m, m, |r, c| {
                    let at = n + 2 + 2 * (r * m + c);
                    Complex::new(lit(v[at]), lit(v[at + 1]))
                });
                per_lambda.push(e);
            }
        }
        let _ = next()?;
        let p = shape.p();
        let mut y = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            let (ln, row) = next()?;
            let v = parse_row(ln, row, n + p * n)?;
            y.push(DMatrix::from_row_iterator(p, n, v[n..].iter().map(|x| lit::<T>(*x))));
        }
        let xi = vec![TangentDatum::zero(&shape); grid.len()];
        let mut sheet = Self {
            shape,
            grid,
            lambdas,
            frames,
            g1: Vec::new(),
            g2: Vec::new(),
            y,
            y_discrepancy: None,
            xi,
            source: None,
            normalized,
            substep_bound: 0.0,
        };
        sheet.fill_blocks();
        Ok(sheet)
    }
}

/// Puts `lambda = 0` first, followed by the other requested values.
fn with_zero<T: Real>(lambdas: &[Complex<T>]) -> Vec<Complex<T>> {
    let mut out = vec![Complex::new(T::zero(), T::zero())];
    for l in lambdas {
        if cabs(*l) != T::zero() && !out.contains(l) {
            out.push(*l);
        }
    }
    out
}

/// Off-diagonal block of `dE/dlambda E^{-1}` at `lambda = 0` from frames at
/// `[d, -d, d/2, -d/2]`, with one Richardson step.
fn y_from_lambda_derivative<T: Real>(shape: &SystemShape, e0: &CMatrix<T>, probes: &[CMatrix<T>], delta: T) -> DMatrix<T> {
    let d1 = (&probes[0] - &probes[1]) / Complex::new(delta * lit(2.0), T::zero());
    let d2 = (&probes[2] - &probes[3]) / Complex::new(delta, T::zero());
    let rich = (d2 * Complex::new(lit::<T>(4.0), T::zero()) - d1) / Complex::new(lit::<T>(3.0), T::zero());
    let form = AmbientForm::<T>::new(*shape);
    let z = rich * form.group_inverse(e0);
    let p = shape.p();
    real_part(&z.view((0, p), (p, shape.n)).into_owned())
}

fn split_blocks<T: Real>(shape: &SystemShape, e0: &[CMatrix<T>]) -> E0Split<T> {
    let p = shape.p();
    let n = shape.n;
    let mut out = E0Split { g1: Vec::with_capacity(e0.len()), g2: Vec::with_capacity(e0.len()), offdiag: Vec::with_capacity(e0.len()) };
    for e in e0 {
        let re = real_part(e);
        out.g1.push(re.view((0, 0), (p, p)).into_owned());
        out.g2.push(re.view((p, p), (n, n)).into_owned());
        let off = cmax_abs(&e.view((0, p), (p, n)).into_owned()).max(cmax_abs(&e.view((p, 0), (n, p)).into_owned()));
        let imag = e.iter().fold(T::zero(), |a, z| a.max(z.im.abs()));
        out.offdiag.push(off.max(imag));
    }
    out
}

/// Diagonal blocks `(g1, g2)` of `E(x, 0)` with the off-diagonal norms.
pub fn split_e0<T: Real>(sheet: &FrameSheet<T>) -> Result<E0Split<T>> {
    let l0 = sheet.lambda_index(Complex::new(T::zero(), T::zero()))?;
    Ok(split_blocks(&sheet.shape, &sheet.frames[l0]))
}

/// `Y` (method A) and its discrepancy against method B, as stored by
/// [`integrate_frame`].
pub fn extract_y<T: Real>(sheet: &FrameSheet<T>) -> Result<YExtraction<T>> {
    match &sheet.y_discrepancy {
        Some(d) => Ok(YExtraction { y: sheet.y.clone(), discrepancy: d.clone() }),
        None => Err(Error::Unsupported("sheet was built without the Y cross-check".into())),
    }
}

struct Transport<'a, T: Real> {
    source: &'a SolutionSource<T>,
    shape: SystemShape,
    lambdas: &'a [Complex<T>],
    bound: f64,
    /// Index of `lambda = 0` when `Y` is carried along.
    zero: Option<usize>,
}

impl<T: Real> Transport<'_, T> {
    fn parts_at(&self, x: &[T]) -> Result<LaxParts<T>> {
        Ok(LaxParts::new(&self.shape, &self.source.eval(x)?))
    }

    fn y_rate(&self, e0: &CMatrix<T>, axis: usize) -> DMatrix<T> {
        let p = self.shape.p();
        let n = self.shape.n;
        let s = lit::<T>(Y_FORM_SIGN);
        DMatrix::from_fn(p, n, |r, c| s * e0[(r, axis)].re * e0[(p + c, p + axis)].re * self.shape.eps::<T>(c))
    }

    /// Moves `states` (one per spectral value) and `y` from `x0` to
    /// `x0 + step e_axis`; returns the Lax data at the end point.
    fn edge(
        &self,
        x0: &[T],
        axis: usize,
        step: T,
        start: &LaxParts<T>,
        states: &mut [CMatrix<T>],
        mut y: Option<&mut DMatrix<T>>,
    ) -> Result<LaxParts<T>> {
        let mut x1 = x0.to_vec();
        x1[axis] += step;
        let end = self.parts_at(&x1)?;
        let norm = |parts: &LaxParts<T>| {
            self.lambdas.iter().fold(T::zero(), |acc, l| acc.max(cinf_norm(&parts.theta_axis(axis, *l))))
        };
        let worst = to_f64(norm(start).max(norm(&end)));
        let m = ((worst * to_f64(step.abs()) / self.bound).ceil() as usize).max(1);
        let hs = step / lit::<T>(m as f64);
        let half = hs * lit(0.5);
        let c_hs = Complex::new(hs, T::zero());
        let c_half = Complex::new(half, T::zero());
        let sixth = Complex::new(hs / lit(6.0), T::zero());
        let two = Complex::new(lit::<T>(2.0), T::zero());
        let mut here = start.clone();
        let mut t = x0.to_vec();
        for sub in 0..m {
            let mut tm = t.clone();
            tm[axis] += half;
            let mid = self.parts_at(&tm)?;
            let next = if sub + 1 == m {
                end.clone()
            } else {
                let mut tn = t.clone();
                tn[axis] += hs;
                self.parts_at(&tn)?
            };
            let mut e0_stages: Option<[CMatrix<T>; 4]> = None;
            for (li, (l, e)) in self.lambdas.iter().zip(states.iter_mut()).enumerate() {
                let th0 = here.theta_axis(axis, *l);
                let thm = mid.theta_axis(axis, *l);
                let th1 = next.theta_axis(axis, *l);
                let k1 = &*e * &th0;
                let s2 = &*e + &k1 * c_half;
                let k2 = &s2 * &thm;
                let s3 = &*e + &k2 * c_half;
                let k3 = &s3 * &thm;
                let s4 = &*e + &k3 * c_hs;
                let k4 = &s4 * &th1;
                if Some(li) == self.zero && y.is_some() {
                    e0_stages = Some([e.clone(), s2, s3, s4]);
                }
                *e += (k1 + (k2 + k3) * two + k4) * sixth;
            }
            if let (Some(st), Some(y)) = (e0_stages, y.as_deref_mut()) {
                let r1 = self.y_rate(&st[0], axis);
                let r2 = self.y_rate(&st[1], axis);
                let r3 = self.y_rate(&st[2], axis);
                let r4 = self.y_rate(&st[3], axis);
                *y += (r1 + (r2 + r3) * lit::<T>(2.0) + r4) * (hs / lit(6.0));
            }
            here = next;
            t[axis] += hs;
        }
        Ok(end)
    }
}

#[derive(Clone)]
struct NodeState<T: Real> {
    e: Vec<CMatrix<T>>,
    y: DMatrix<T>,
    parts: LaxParts<T>,
}

/// Integrates `E' = E theta_j` along the staircase from the origin (first
/// axis of the order first) with classical RK4, all spectral values sharing
/// the source evaluations. `lambda = 0` is always included (first).
pub fn integrate_frame<T: Real>(
    source: Arc<SolutionSource<T>>,
    grid: &GridSpec,
    lambdas: &[Complex<T>],
    opts: &IntegrationOptions,
) -> Result<FrameSheet<T>> {
    let shape = source.shape;
    if grid.dim() != shape.n {
        return Err(Error::Dimension(format!("grid has {} axes, shape n = {}", grid.dim(), shape.n)));
    }
    let user = with_zero(lambdas);
    for element in source.elements() {
        let alpha = element.alpha.value();
        for l in &user {
            let d = cabs(*l - alpha).min(cabs(*l + alpha));
            if d < lit(crate::dressing::POLE_TOLERANCE) {
                return Err(Error::PoleProximity { lambda: format!("{l}"), alpha: format!("{alpha}"), distance: to_f64(d) });
            }
        }
    }
    let delta = lit::<T>(1e-5);
    let mut all = user.clone();
    if opts.cross_check_y {
        for d in [delta, -delta, delta * lit(0.5), -delta * lit(0.5)] {
            all.push(Complex::new(d, T::zero()));
        }
    }
    let order = opts.axis_order.clone().unwrap_or_else(|| (0..shape.n).collect());
    let mut sorted = order.clone();
    sorted.sort_unstable();
    if sorted != (0..shape.n).collect::<Vec<_>>() {
        return Err(Error::Dimension(format!("axis order {order:?} is not a permutation")));
    }
    let m = shape.ambient_dim();
    let transport = Transport { source: &source, shape, lambdas: &all, bound: opts.substep_bound, zero: Some(0) };
    let origin = grid.origin_index();
    let origin_x = vec![T::zero(); shape.n];
    let mut states: Vec<Option<NodeState<T>>> = vec![None; grid.len()];
    states[grid.origin_flat()] = Some(NodeState {
        e: vec![CMatrix::identity(m, m); all.len()],
        y: DMatrix::zeros(shape.p(), shape.n),
        parts: transport.parts_at(&origin_x)?,
    });
    for (stage, &axis) in order.iter().enumerate() {
        let seeds: Vec<usize> = (0..grid.len())
            .filter(|&f| {
                let idx = grid.multi(f);
                order[stage..].iter().all(|&b| idx[b] == origin[b])
            })
            .collect();
        let lines: Vec<Vec<(usize, NodeState<T>)>> = seeds
            .par_iter()
            .map(|&seed| {
                let start = states[seed].clone().expect("seed integrated in an earlier stage");
                let mut out = Vec::new();
                for dir in [1isize, -1] {
                    let mut node = seed;
                    let mut st = start.clone();
                    let step = lit::<T>(grid.h(axis)) * lit(dir as f64);
                    while let Some(next) = grid.shift(node, axis, dir) {
                        let x0 = grid.coords_t::<T>(node);
                        let parts = transport.edge(&x0, axis, step, &st.parts, &mut st.e, Some(&mut st.y))?;
                        st.parts = parts;
                        node = next;
                        out.push((node, st.clone()));
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        for line in lines {
            for (node, st) in line {
                states[node] = Some(st);
            }
        }
    }
    let states: Vec<NodeState<T>> = states.into_iter().map(|s| s.expect("every node reached")).collect();
    let form = AmbientForm::<T>::new(shape);
    let g = form.g_complex();
    let mut worst = (T::zero(), 0usize);
    for (node, st) in states.iter().enumerate() {
        for e in &st.e {
            let r = cmax_abs(&(e.transpose() * &g * e - &g));
            if r > worst.0 {
                worst = (r, node);
            }
        }
    }
    if worst.0 > lit(opts.drift_budget) {
        return Err(Error::DriftExceeded { residual: to_f64(worst.0), node: worst.1 });
    }
    let y_discrepancy = if opts.cross_check_y {
        let u = user.len();
        let d: Vec<T> = states
            .par_iter()
            .map(|st| {
                let yb = y_from_lambda_derivative(&shape, &st.e[0], &st.e[u..u + 4], delta);
                max_abs(&(&st.y - yb))
            })
            .collect();
        let worst = d.iter().fold(T::zero(), |a, v| a.max(*v));
        if worst > lit(opts.y_tolerance) {
            return Err(Error::YCrossCheck(to_f64(worst)));
        }
        Some(d)
    } else {
        None
    };
    let xi = source.sample(grid)?;
    let mut frames = vec![Vec::with_capacity(grid.len()); user.len()];
    let mut ys = Vec::with_capacity(grid.len());
    for st in states {
        for (l, e) in st.e.into_iter().take(user.len()).enumerate() {
            frames[l].push(e);
        }
        ys.push(st.y);
    }
    let mut sheet = FrameSheet {
        shape,
        grid: grid.clone(),
        lambdas: user,
        frames,
        g1: Vec::new(),
        g2: Vec::new(),
        y: ys,
        y_discrepancy,
        xi,
        source: Some(source),
        normalized: true,
        substep_bound: opts.substep_bound,
    };
    sheet.fill_blocks();
    Ok(sheet)
}

/// For every elementary plaquette (all axis pairs), transports `I` around
/// its boundary with the same RK4 rule and reports `|loop - I|_inf`,
/// maximized over the sheet's spectral values. Values are indexed by the
/// plaquette's lowest corner and axis pair.
pub fn monodromy_residual<T: Real>(sheet: &FrameSheet<T>) -> Result<Vec<Plaquette<T>>> {
    let source = sheet.source.as_ref().ok_or_else(|| Error::Unsupported("sheet has no attached source".into()))?;
    let bound = if sheet.substep_bound > 0.0 { sheet.substep_bound } else { IntegrationOptions::default().substep_bound };
    let transport = Transport { source, shape: sheet.shape, lambdas: &sheet.lambdas, bound, zero: None };
    let grid = &sheet.grid;
    let n = sheet.shape.n;
    let m = sheet.shape.ambient_dim();
    let mut cells = Vec::new();
    for node in 0..grid.len() {
        for a in 0..n {
            for b in a + 1..n {
                if grid.shift(node, a, 1).is_some() && grid.shift(node, b, 1).is_some() {
                    cells.push((node, a, b));
                }
            }
        }
    }
    cells
        .par_iter()
        .map(|&(node, a, b)| {
            let mut states = vec![CMatrix::<T>::identity(m, m); sheet.lambdas.len()];
            let mut x = grid.coords_t::<T>(node);
            let mut parts = transport.parts_at(&x)?;
            let ha = lit::<T>(grid.h(a));
            let hb = lit::<T>(grid.h(b));
            for (axis, step) in [(a, ha), (b, hb), (a, -ha), (b, -hb)] {
                parts = transport.edge(&x, axis, step, &parts, &mut states, None)?;
                x[axis] += step;
            }
            let id = CMatrix::<T>::identity(m, m);
            let defect = states.iter().fold(T::zero(), |acc, s| acc.max(cmax_abs(&(s - &id))));
            Ok(Plaquette { node, axes: (a, b), defect })
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct Plaquette<T> {
    pub node: usize,
    pub axes: (usize, usize),
    pub defect: T,
}
