//! Rectangular grids containing the origin, plus second-order finite
//! differences on node-valued fields.
//!
//! Nodes are stored in C order (last axis fastest). The coordinate of node
//! index `i` along axis `j` is `(i - o_j) * h_j` where `o_j` is the origin
//! index, so `x = 0` is always an exact node.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

pub const MIN_NODES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub nodes: Vec<usize>,
}

/// Values that finite differences can combine.
pub trait FdValue<T>: Clone + Add<Output = Self> + Sub<Output = Self> + Mul<T, Output = Self> {}
impl<T, V> FdValue<T> for V where V: Clone + Add<Output = V> + Sub<Output = V> + Mul<T, Output = V> {}

impl GridSpec {
    pub fn new(min: Vec<f64>, max: Vec<f64>, nodes: Vec<usize>) -> Result<Self> {
        let n = min.len();
        if n == 0 || max.len() != n || nodes.len() != n {
            return Err(Error::InvalidGrid("min, max and nodes must have the same nonzero length".into()));
        }
        for j in 0..n {
            if nodes[j] < MIN_NODES {
                return Err(Error::GridTooSmall(format!("axis {j} has {} nodes, need at least {MIN_NODES}", nodes[j])));
            }
            if !(min[j] <= 0.0 && max[j] >= 0.0 && min[j] < max[j]) || !min[j].is_finite() || !max[j].is_finite() {
                return Err(Error::InvalidGrid(format!("axis {j}: [{}, {}] must contain 0", min[j], max[j])));
            }
            let h = (max[j] - min[j]) / (nodes[j] - 1) as f64;
            let o = -min[j] / h;
            if (o - o.round()).abs() > 1e-9 * o.max(1.0) {
                return Err(Error::InvalidGrid(format!("axis {j}: origin is not a node (offset {o} cells)")));
            }
        }
        Ok(Self { min, max, nodes })
    }

    /// The cube `[-a, a]^n` with `nodes` (odd) points per axis.
    pub fn cube(n: usize, half_width: f64, nodes: usize) -> Result<Self> {
        Self::new(vec![-half_width; n], vec![half_width; n], vec![nodes; n])
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn h(&self, axis: usize) -> f64 {
        (self.max[axis] - self.min[axis]) / (self.nodes[axis] - 1) as f64
    }

    pub fn origin_index(&self) -> Vec<usize> {
        (0..self.dim()).map(|j| (-self.min[j] / self.h(j)).round() as usize).collect()
    }

    pub fn origin_flat(&self) -> usize {
        self.flat(&self.origin_index())
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.nodes[axis + 1..].iter().product()
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().enumerate().fold(0, |acc, (j, &i)| acc * self.nodes[j] + i)
    }

    pub fn multi(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for j in (0..self.dim()).rev() {
            idx[j] = flat % self.nodes[j];
            flat /= self.nodes[j];
        }
        idx
    }

    pub fn coord_axis(&self, axis: usize, i: usize) -> f64 {
        let o = self.origin_index()[axis] as f64;
        (i as f64 - o) * self.h(axis)
    }

    pub fn coords(&self, flat: usize) -> Vec<f64> {
        self.multi(flat).iter().enumerate().map(|(j, &i)| self.coord_axis(j, i)).collect()
    }

    pub fn coords_t<T: Real>(&self, flat: usize) -> Vec<T> {
        self.coords(flat).into_iter().map(lit).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let tol = 1e-12;
        x.len() == self.dim()
            && (0..self.dim()).all(|j| x[j] >= self.min[j] - tol * self.h(j) && x[j] <= self.max[j] + tol * self.h(j))
    }

    /// Neighbor of `flat` displaced by `delta` along `axis`, if inside.
    pub fn shift(&self, flat: usize, axis: usize, delta: isize) -> Option<usize> {
        let i = self.multi(flat)[axis] as isize + delta;
        if i < 0 || i >= self.nodes[axis] as isize {
            return None;
        }
        Some((flat as isize + delta * self.stride(axis) as isize) as usize)
    }

    /// Same node counts and origin index, spacing multiplied by `r`.
    pub fn scaled(&self, r: f64) -> Self {
        Self {
            min: self.min.iter().map(|m| m * r).collect(),
            max: self.max.iter().map(|m| m * r).collect(),
            nodes: self.nodes.clone(),
        }
    }

    /// Halves the spacing, keeping the box.
    pub fn refined(&self) -> Self {
        Self { min: self.min.clone(), max: self.max.clone(), nodes: self.nodes.iter().map(|m| 2 * m - 1).collect() }
    }

    /// Flat indices of nodes strictly inside the box (at least `margin` from each face).
    pub fn interior(&self, margin: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&f| self.multi(f).iter().zip(&self.nodes).all(|(&i, &m)| i >= margin && i + margin < m))
            .collect()
    }

    /// Stencil `(offset, weight)` for the first derivative at index `i`
    /// along an axis with `m` nodes and spacing `h`.
    pub fn stencil_d1(i: usize, m: usize, h: f64) -> Vec<(isize, f64)> {
        if i == 0 {
            vec![(0, -1.5 / h), (1, 2.0 / h), (2, -0.5 / h)]
        } else if i + 1 == m {
            vec![(0, 1.5 / h), (-1, -2.0 / h), (-2, 0.5 / h)]
        } else {
            vec![(-1, -0.5 / h), (1, 0.5 / h)]
        }
    }

    pub fn stencil_d2(i: usize, m: usize, h: f64) -> Vec<(isize, f64)> {
        let h2 = h * h;
        if i == 0 {
            vec![(0, 2.0 / h2), (1, -5.0 / h2), (2, 4.0 / h2), (3, -1.0 / h2)]
        } else if i + 1 == m {
            vec![(0, 2.0 / h2), (-1, -5.0 / h2), (-2, 4.0 / h2), (-3, -1.0 / h2)]
        } else {
            vec![(-1, 1.0 / h2), (0, -2.0 / h2), (1, 1.0 / h2)]
        }
    }

    fn combine<T: Real, V: FdValue<T>>(&self, field: &[V], terms: &[(usize, f64)]) -> V {
        let mut iter = terms.iter();
        let &(f0, w0) = iter.next().expect("nonempty stencil");
        iter.fold(field[f0].clone() * lit::<T>(w0), |acc, &(f, w)| acc + field[f].clone() * lit::<T>(w))
    }

    fn apply(&self, flat: usize, axis: usize, stencil: &[(isize, f64)]) -> Vec<(usize, f64)> {
        let stride = self.stride(axis) as isize;
        stencil.iter().map(|&(o, w)| ((flat as isize + o * stride) as usize, w)).collect()
    }

    /// Second-order first derivative along `axis` at `flat`.
    pub fn d1<T: Real, V: FdValue<T>>(&self, field: &[V], flat: usize, axis: usize) -> V {
        let i = self.multi(flat)[axis];
        let st = Self::stencil_d1(i, self.nodes[axis], self.h(axis));
        self.combine::<T, V>(field, &self.apply(flat, axis, &st))
    }

    /// Second-order second derivative; mixed partials when `a != b`.
    pub fn d2<T: Real, V: FdValue<T>>(&self, field: &[V], flat: usize, a: usize, b: usize) -> V {
        let idx = self.multi(flat);
        if a == b {
            let st = Self::stencil_d2(idx[a], self.nodes[a], self.h(a));
            return self.combine::<T, V>(field, &self.apply(flat, a, &st));
        }
        let sa = Self::stencil_d1(idx[a], self.nodes[a], self.h(a));
        let sb = Self::stencil_d1(idx[b], self.nodes[b], self.h(b));
        let mut terms = Vec::with_capacity(sa.len() * sb.len());
        for &(f, w) in &self.apply(flat, a, &sa) {
            for &(g, v) in &self.apply(f, b, &sb) {
                terms.push((g, w * v));
            }
        }
        self.combine::<T, V>(field, &terms)
    }

    /// Short description of the stencils, recorded in reports.
    pub fn stencil_description() -> &'static str {
        "central second-order interior, one-sided second-order at faces"
    }
}
