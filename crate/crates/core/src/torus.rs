//! Periodic grids on the flat torus `T^d = R^d / Z^d` (d = 1 or 2), scalar and
//! vector fields on them, finite differences, interpolation and periodic
//! convolution with a compactly supported mollifier.
//!
//! Node `i` (or `(i, j)`) sits at coordinate `i * h` with `h = 1 / n`; flat
//! storage is x-fastest, `idx = i + n * j`.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest per-axis resolution for which convolution uses the direct sum.
pub const DIRECT_CONVOLUTION_MAX_N: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    n: usize,
}

impl TorusGrid {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidGrid(format!("dim must be 1 or 2, got {dim}")));
        }
        if n < 8 {
            return Err(Error::InvalidGrid(format!("need n >= 8 nodes per axis, got {n}")));
        }
        Ok(Self { dim, n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Quadrature weight `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dim as i32)
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Per-axis multi-index of a flat node index (unused axes are zero).
    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        if self.dim == 1 {
            [idx, 0]
        } else {
            [idx % self.n, idx / self.n]
        }
    }

    pub fn flat_index(&self, mi: [usize; 2]) -> usize {
        if self.dim == 1 {
            mi[0] % self.n
        } else {
            (mi[0] % self.n) + self.n * (mi[1] % self.n)
        }
    }

    pub fn coords(&self, idx: usize) -> [f64; 2] {
        let mi = self.multi_index(idx);
        let h = self.h();
        [mi[0] as f64 * h, mi[1] as f64 * h]
    }

    /// Flat index of the neighbour `offset` steps away along `axis`.
    #[inline]
    pub fn shift(&self, idx: usize, axis: usize, offset: isize) -> usize {
        let n = self.n as isize;
        if self.dim == 1 {
            (idx as isize + offset).rem_euclid(n) as usize
        } else {
            let i = (idx % self.n) as isize;
            let j = (idx / self.n) as isize;
            if axis == 0 {
                ((i + offset).rem_euclid(n) + n * j) as usize
            } else {
                (i + n * (j + offset).rem_euclid(n)) as usize
            }
        }
    }

    /// Flat index of the node nearest to a point.
    pub fn nearest_node(&self, x: [f64; 2]) -> usize {
        let n = self.n as f64;
        let mut mi = [0usize; 2];
        for (a, m) in mi.iter_mut().enumerate().take(self.dim) {
            *m = ((wrap(x[a]) * n).round() as usize) % self.n;
        }
        self.flat_index(mi)
    }

    /// Geodesic distance on the torus between two nodes.
    pub fn node_distance(&self, a: usize, b: usize) -> f64 {
        let (ma, mb) = (self.multi_index(a), self.multi_index(b));
        let mut s = 0.0;
        for axis in 0..self.dim {
            let d = ma[axis].abs_diff(mb[axis]);
            let d = d.min(self.n - d) as f64 * self.h();
            s += d * d;
        }
        s.sqrt()
    }

    pub fn check_same(&self, other: &TorusGrid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "dim {} n {} vs dim {} n {}",
                self.dim, self.n, other.dim, other.n
            )));
        }
        Ok(())
    }
}

/// Wraps a coordinate into `[0, 1)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let y = x - x.floor();
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

/// Cell index and fractional position of a coordinate; points within rounding of a
/// node snap onto it.
#[inline]
fn cell_coordinate(x: f64, nf: f64, n: usize) -> (usize, f64) {
    let s = wrap(x) * nf;
    let r = s.round();
    if (s - r).abs() < 1e-9 {
        ((r as usize) % n, 0.0)
    } else {
        let f = s.floor();
        ((f as usize) % n, s - f)
    }
}

/// Signed periodic displacement in `[-1/2, 1/2)`.
#[inline]
pub fn periodic_offset(x: f64) -> f64 {
    x - (x + 0.5).floor()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    grid: TorusGrid,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "values",
                reason: format!("non-finite value at node {i}"),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: TorusGrid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn zeros(grid: TorusGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn from_fn(grid: TorusGrid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Self { grid, values }
    }

    pub(crate) fn from_raw(grid: TorusGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &GridField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        Ok(Self::from_raw(
            self.grid,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add_constant(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn sup_distance(&self, other: &GridField) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Periodic multilinear interpolation at an arbitrary point.
    pub fn interpolate(&self, x: [f64; 2]) -> f64 {
        let n = self.grid.n;
        let nf = n as f64;
        if self.grid.dim == 1 {
            let (i0, t) = cell_coordinate(x[0], nf, n);
            let i1 = if i0 + 1 == n { 0 } else { i0 + 1 };
            (1.0 - t) * self.values[i0] + t * self.values[i1]
        } else {
            let (i0, tx) = cell_coordinate(x[0], nf, n);
            let (j0, ty) = cell_coordinate(x[1], nf, n);
            let i1 = (i0 + 1) % n;
            let j1 = (j0 + 1) % n;
            let v = &self.values;
            (1.0 - ty) * ((1.0 - tx) * v[i0 + n * j0] + tx * v[i1 + n * j0])
                + ty * ((1.0 - tx) * v[i0 + n * j1] + tx * v[i1 + n * j1])
        }
    }

    pub fn gradient(&self, mode: DifferenceMode) -> VectorField {
        let g = self.grid;
        let h = g.h();
        let mut comps = Vec::with_capacity(g.dim);
        for axis in 0..g.dim {
            let c = (0..g.len())
                .map(|i| {
                    let v = &self.values;
                    match mode {
                        DifferenceMode::Central => {
                            (v[g.shift(i, axis, 1)] - v[g.shift(i, axis, -1)]) / (2.0 * h)
                        }
                        DifferenceMode::Forward => (v[g.shift(i, axis, 1)] - v[i]) / h,
                        DifferenceMode::Backward => (v[i] - v[g.shift(i, axis, -1)]) / h,
                    }
                })
                .collect();
            comps.push(c);
        }
        VectorField { grid: g, comps }
    }

    /// Largest second difference `|f(x+h e) - 2 f(x) + f(x-h e)| / h^2` over nodes and axes,
    /// including the mixed central difference in 2D.
    pub fn max_second_difference(&self) -> f64 {
        let g = self.grid;
        let h2 = g.h() * g.h();
        let v = &self.values;
        let mut m = 0.0f64;
        for i in 0..g.len() {
            for axis in 0..g.dim {
                let d2 = v[g.shift(i, axis, 1)] - 2.0 * v[i] + v[g.shift(i, axis, -1)];
                m = m.max(d2.abs() / h2);
            }
            if g.dim == 2 {
                let pp = g.shift(g.shift(i, 0, 1), 1, 1);
                let pm = g.shift(g.shift(i, 0, 1), 1, -1);
                let mp = g.shift(g.shift(i, 0, -1), 1, 1);
                let mm = g.shift(g.shift(i, 0, -1), 1, -1);
                m = m.max((v[pp] - v[pm] - v[mp] + v[mm]).abs() / (4.0 * h2));
            }
        }
        m
    }

    /// Largest signed second difference (one-sided semiconcavity diagnostic).
    pub fn max_signed_second_difference(&self) -> f64 {
        let g = self.grid;
        let h2 = g.h() * g.h();
        let v = &self.values;
        let mut m = f64::NEG_INFINITY;
        for i in 0..g.len() {
            for axis in 0..g.dim {
                let d2 = v[g.shift(i, axis, 1)] - 2.0 * v[i] + v[g.shift(i, axis, -1)];
                m = m.max(d2 / h2);
            }
        }
        m
    }

    pub fn norms(&self) -> FieldNorms {
        let grad = self.gradient(DifferenceMode::Central);
        let sup = self.sup_norm();
        let grad_sup = grad.sup_magnitude();
        let second = self.max_second_difference();
        FieldNorms {
            sup_norm: sup,
            mean: self.mean(),
            discrete_c2_norm: sup + grad_sup + second,
        }
    }

    /// Largest one-sided difference quotient over all axes.
    pub fn lipschitz_constant(&self) -> f64 {
        let g = self.grid;
        let h = g.h();
        let mut m = 0.0f64;
        for i in 0..g.len() {
            for axis in 0..g.dim {
                m = m.max((self.values[g.shift(i, axis, 1)] - self.values[i]).abs() / h);
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldNorms {
    pub sup_norm: f64,
    pub mean: f64,
    pub discrete_c2_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DifferenceMode {
    Central,
    Forward,
    Backward,
}

/// One real per axis per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorField {
    grid: TorusGrid,
    comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn new(grid: TorusGrid, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != grid.dim() || comps.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::GridMismatch("vector field shape".into()));
        }
        if comps.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "vector field",
                reason: "non-finite component".into(),
            });
        }
        Ok(Self { grid, comps })
    }

    pub fn zeros(grid: TorusGrid) -> Self {
        Self {
            grid,
            comps: vec![vec![0.0; grid.len()]; grid.dim()],
        }
    }

    pub fn constant(grid: TorusGrid, c: [f64; 2]) -> Self {
        Self {
            grid,
            comps: (0..grid.dim()).map(|a| vec![c[a]; grid.len()]).collect(),
        }
    }

    pub(crate) fn from_raw(grid: TorusGrid, comps: Vec<Vec<f64>>) -> Self {
        Self { grid, comps }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.comps[axis]
    }

    pub fn at(&self, idx: usize) -> [f64; 2] {
        let mut v = [0.0; 2];
        for (a, c) in self.comps.iter().enumerate() {
            v[a] = c[idx];
        }
        v
    }

    pub fn sup_magnitude(&self) -> f64 {
        (0..self.grid.len())
            .map(|i| {
                let v = self.at(i);
                (v[0] * v[0] + v[1] * v[1]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Largest single component magnitude.
    pub fn sup_component(&self) -> f64 {
        self.comps
            .iter()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Smooth even bump `exp(-1 / (1 - (|x|/r)^2))` sampled at the nodes and
/// renormalised to unit discrete mass.
#[derive(Debug, Clone, PartialEq)]
pub struct MollifierKernel {
    grid: TorusGrid,
    radius: f64,
    /// Weight of the kernel at each node offset from the origin.
    weights: Vec<f64>,
    /// Nonzero offsets, stored as (flat offset index, weight).
    support: Vec<(usize, f64)>,
    l2_norm_sq: f64,
}

impl MollifierKernel {
    pub fn bump(grid: TorusGrid, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius < 0.5) {
            return Err(Error::InvalidKernel(format!(
                "radius must be in (0, 1/2), got {radius}"
            )));
        }
        let mut weights = vec![0.0; grid.len()];
        for (i, w) in weights.iter_mut().enumerate() {
            let x = grid.coords(i);
            let mut r2 = 0.0;
            for axis in 0..grid.dim() {
                let d = periodic_offset(x[axis]);
                r2 += d * d;
            }
            let s = r2 / (radius * radius);
            if s < 1.0 {
                *w = (-1.0 / (1.0 - s)).exp();
            }
        }
        let vol = grid.cell_volume();
        let mass: f64 = weights.iter().sum::<f64>() * vol;
        let support_len = weights.iter().filter(|&&w| w > 0.0).count();
        if support_len < 3usize.pow(grid.dim() as u32) {
            return Err(Error::InvalidKernel(format!(
                "radius {radius} resolves only {support_len} nodes at h = {}",
                grid.h()
            )));
        }
        for w in &mut weights {
            *w /= mass;
        }
        let support = weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, &w)| (i, w))
            .collect();
        let l2_norm_sq = weights.iter().map(|w| w * w).sum::<f64>() * vol;
        Ok(Self {
            grid,
            radius,
            weights,
            support,
            l2_norm_sq,
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Discrete `||xi||_{L^2}^2 = sum xi_i^2 h^d`.
    pub fn l2_norm_sq(&self) -> f64 {
        self.l2_norm_sq
    }

    pub fn as_field(&self) -> GridField {
        GridField::from_raw(self.grid, self.weights.clone())
    }

    /// Largest one-sided difference quotient of the discrete kernel.
    pub fn lipschitz_constant(&self) -> f64 {
        self.as_field().lipschitz_constant()
    }

    /// `sum |xi| h^d + sum |D xi| h^d + sum |D^2 xi| h^d`, the factor bounding the discrete
    /// C^2 norm of `g * xi` by `||g||_inf`.
    pub fn c2_mass(&self) -> f64 {
        let g = self.grid;
        let vol = g.cell_volume();
        let h = g.h();
        let w = &self.weights;
        let mut grad = 0.0;
        let mut second = 0.0;
        for i in 0..g.len() {
            let mut gsq = 0.0;
            let mut s = 0.0f64;
            for axis in 0..g.dim() {
                let (p, m) = (w[g.shift(i, axis, 1)], w[g.shift(i, axis, -1)]);
                gsq += ((p - m) / (2.0 * h)).powi(2);
                s = s.max(((p - 2.0 * w[i] + m) / (h * h)).abs());
            }
            if g.dim() == 2 {
                let pp = g.shift(g.shift(i, 0, 1), 1, 1);
                let pm = g.shift(g.shift(i, 0, 1), 1, -1);
                let mp = g.shift(g.shift(i, 0, -1), 1, 1);
                let mm = g.shift(g.shift(i, 0, -1), 1, -1);
                s = s.max((w[pp] - w[pm] - w[mp] + w[mm]).abs() / (4.0 * h * h));
            }
            grad += gsq.sqrt() * vol;
            second += s * vol;
        }
        1.0 + grad + second
    }

    /// Periodic discrete convolution `(f * xi)(x_i) = sum_j f_j xi(x_i - x_j) h^d`.
    pub fn convolve(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.grid.len() {
            return Err(Error::GridMismatch(format!(
                "convolution of {} values on a {}-node kernel grid",
                f.len(),
                self.grid.len()
            )));
        }
        if self.grid.n() <= DIRECT_CONVOLUTION_MAX_N {
            Ok(self.convolve_direct(f))
        } else {
            Ok(circular_convolve_fft(&self.grid, f, &self.weights)
                .into_iter()
                .map(|v| v * self.grid.cell_volume())
                .collect())
        }
    }

    pub fn convolve_field(&self, f: &GridField) -> Result<GridField> {
        self.grid.check_same(f.grid())?;
        Ok(GridField::from_raw(self.grid, self.convolve(f.values())?))
    }

    /// Direct sum over the kernel support.
    pub fn convolve_direct(&self, f: &[f64]) -> Vec<f64> {
        let g = self.grid;
        let n = g.n();
        let vol = g.cell_volume();
        // signed offsets of the support, then a wrap-padded copy of f so that
        // f_{i - k} is a plain slice read
        let signed = |c: usize| if c > n / 2 { c as isize - n as isize } else { c as isize };
        let offsets: Vec<([isize; 2], f64)> = self
            .support
            .iter()
            .map(|&(k, w)| {
                let mk = g.multi_index(k);
                ([signed(mk[0]), signed(mk[1])], w)
            })
            .collect();
        let reach = offsets
            .iter()
            .map(|(o, _)| o[0].abs().max(o[1].abs()))
            .max()
            .unwrap_or(0) as usize;
        let w = n + 2 * reach;
        let wrap_idx = |j: usize| (j + n * (reach / n + 1) - reach) % n;
        let mut out = vec![0.0; g.len()];
        if g.dim() == 1 {
            let ext: Vec<f64> = (0..w).map(|j| f[wrap_idx(j)]).collect();
            for &(o, wt) in &offsets {
                let start = (reach as isize - o[0]) as usize;
                for (acc, v) in out.iter_mut().zip(&ext[start..start + n]) {
                    *acc += wt * v;
                }
            }
        } else {
            let mut ext = vec![0.0; w * w];
            for jy in 0..w {
                for jx in 0..w {
                    ext[jx + w * jy] = f[wrap_idx(jx) + n * wrap_idx(jy)];
                }
            }
            for &(o, wt) in &offsets {
                let sx = (reach as isize - o[0]) as usize;
                let sy = (reach as isize - o[1]) as usize;
                for row in 0..n {
                    let src = &ext[(sy + row) * w + sx..(sy + row) * w + sx + n];
                    for (acc, v) in out[row * n..(row + 1) * n].iter_mut().zip(src) {
                        *acc += wt * v;
                    }
                }
            }
        }
        for v in &mut out {
            *v *= vol;
        }
        out
    }
}

/// Circular convolution `sum_j a_j b_{i-j}` (no quadrature weight) through FFTs.
pub fn circular_convolve_fft(grid: &TorusGrid, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut fa: Vec<Complex64> = a.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let mut fb: Vec<Complex64> = b.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let mut planner = FftPlanner::new();
    fft_nd(&mut planner, grid, &mut fa, false);
    fft_nd(&mut planner, grid, &mut fb, false);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    fft_nd(&mut planner, grid, &mut fa, true);
    let scale = 1.0 / grid.len() as f64;
    fa.iter().map(|c| c.re * scale).collect()
}

/// Unnormalised forward/inverse FFT over every axis of a grid-shaped buffer.
pub(crate) fn fft_nd(
    planner: &mut FftPlanner<f64>,
    grid: &TorusGrid,
    data: &mut [Complex64],
    inverse: bool,
) {
    let n = grid.n();
    let fft: Arc<dyn rustfft::Fft<f64>> = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    // rows (x axis) are contiguous
    for row in data.chunks_mut(n) {
        fft.process(row);
    }
    if grid.dim() == 2 {
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            for j in 0..n {
                col[j] = data[i + n * j];
            }
            fft.process(&mut col);
            for j in 0..n {
                data[i + n * j] = col[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn grid1(n: usize) -> TorusGrid {
        TorusGrid::new(1, n).unwrap()
    }

    #[test]
    fn grid_rejects_small_or_bad_dim() {
        assert!(TorusGrid::new(1, 7).is_err());
        assert!(TorusGrid::new(3, 16).is_err());
        let g = grid1(16);
        assert_eq!(g.n() as f64 * g.h(), 1.0);
    }

    #[test]
    fn shift_wraps_both_axes() {
        let g = TorusGrid::new(2, 8).unwrap();
        let idx = g.flat_index([7, 0]);
        assert_eq!(g.shift(idx, 0, 1), g.flat_index([0, 0]));
        assert_eq!(g.shift(idx, 1, -1), g.flat_index([7, 7]));
    }

    #[test]
    fn kernel_is_even_nonnegative_unit_mass() {
        for &r in &[0.1, 0.2] {
            let g = grid1(64);
            let k = MollifierKernel::bump(g, r).unwrap();
            let w = k.weights();
            let mass: f64 = w.iter().sum::<f64>() * g.h();
            assert!((mass - 1.0).abs() < 1e-12);
            for i in 0..64 {
                assert!(w[i] >= 0.0);
                assert_eq!(w[i], w[(64 - i) % 64]);
                if g.node_distance(0, i) >= r {
                    assert_eq!(w[i], 0.0);
                }
            }
        }
        assert!(MollifierKernel::bump(grid1(64), 0.6).is_err());
        assert!(MollifierKernel::bump(grid1(8), 0.01).is_err());
    }

    #[test]
    fn convolution_of_constant_is_constant() {
        let g = grid1(32);
        let k = MollifierKernel::bump(g, 0.2).unwrap();
        let out = k.convolve(&vec![1.0; 32]).unwrap();
        for v in out {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn convolution_of_point_mass_recenters_kernel() {
        let g = grid1(32);
        let k = MollifierKernel::bump(g, 0.2).unwrap();
        let j = 5;
        let mut f = vec![0.0; 32];
        f[j] = 1.0 / g.h();
        let out = k.convolve(&f).unwrap();
        for i in 0..32 {
            let expect = k.weights()[(i + 32 - j) % 32];
            assert!((out[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn convolution_matches_double_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for dim in [1, 2] {
            let g = TorusGrid::new(dim, 16).unwrap();
            let k = MollifierKernel::bump(g, 0.2).unwrap();
            let f: Vec<f64> = (0..g.len()).map(|_| rng.gen::<f64>()).collect();
            let out = k.convolve(&f).unwrap();
            // brute force: every pair of nodes, kernel evaluated at the wrapped offset
            for i in 0..g.len() {
                let xi = g.coords(i);
                let mut s = 0.0;
                for j in 0..g.len() {
                    let xj = g.coords(j);
                    let off = [wrap(xi[0] - xj[0]), wrap(xi[1] - xj[1])];
                    let kidx = g.nearest_node(off);
                    s += f[j] * k.weights()[kidx] * g.cell_volume();
                }
                assert!((out[i] - s).abs() < 1e-12, "dim {dim} node {i}");
            }
            let fft = circular_convolve_fft(&g, &f, k.weights());
            for i in 0..g.len() {
                assert!((fft[i] * g.cell_volume() - out[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fft_path_used_above_threshold_preserves_mass() {
        let g = grid1(512);
        let k = MollifierKernel::bump(g, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Vec<f64> = (0..512).map(|_| rng.gen::<f64>()).collect();
        let out = k.convolve(&f).unwrap();
        let direct = k.convolve_direct(&f);
        let ia: f64 = f.iter().sum::<f64>() * g.h();
        let ib: f64 = out.iter().sum::<f64>() * g.h();
        assert!((ia - ib).abs() < 1e-12);
        for (a, b) in out.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn convolution_grid_mismatch_is_an_error() {
        let k = MollifierKernel::bump(grid1(32), 0.2).unwrap();
        assert!(matches!(k.convolve(&[0.0; 16]), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn gradient_of_constant_is_exactly_zero() {
        let f = GridField::constant(TorusGrid::new(2, 8).unwrap(), 3.7);
        for mode in [DifferenceMode::Central, DifferenceMode::Forward, DifferenceMode::Backward] {
            assert_eq!(f.gradient(mode).sup_component(), 0.0);
        }
    }

    #[test]
    fn central_gradient_of_sine_within_taylor_bound() {
        let g = grid1(256);
        let h = g.h();
        let f = GridField::from_fn(g, |x| (2.0 * PI * x[0]).sin());
        let grad = f.gradient(DifferenceMode::Central);
        let bound = (2.0 * PI).powi(3) * h * h / 6.0 * 1.1;
        for i in 0..g.len() {
            let exact = 2.0 * PI * (2.0 * PI * g.coords(i)[0]).cos();
            assert!((grad.component(0)[i] - exact).abs() <= bound);
        }
    }

    #[test]
    fn one_sided_gradients_differ_by_order_h() {
        let g = grid1(128);
        let h = g.h();
        let f = GridField::from_fn(g, |x| (2.0 * PI * x[0]).sin());
        let fw = f.gradient(DifferenceMode::Forward);
        let bw = f.gradient(DifferenceMode::Backward);
        let gap = (0..g.len())
            .map(|i| (fw.component(0)[i] - bw.component(0)[i]).abs())
            .fold(0.0, f64::max);
        // f'' h bounds the gap: 4 pi^2 h
        assert!(gap <= 4.0 * PI * PI * h * 1.01);
        assert!(gap >= 4.0 * PI * PI * h * 0.9);
    }

    #[test]
    fn interpolation_exact_at_nodes_and_wraps() {
        let g = grid1(10);
        let f = GridField::from_fn(g, |x| x[0] * x[0]);
        for i in 0..10 {
            assert_eq!(f.interpolate(g.coords(i)), f.values()[i]);
        }
        let mid = f.interpolate([0.25, 0.0]);
        assert!((mid - 0.5 * (f.values()[2] + f.values()[3])).abs() < 1e-15);
        let wrapped = f.interpolate([0.999, 0.0]);
        let t = 0.99;
        let expect = (1.0 - t) * f.values()[9] + t * f.values()[0];
        assert!((wrapped - expect).abs() < 1e-12);
    }

    #[test]
    fn norms_of_constant_and_sine() {
        let g = grid1(256);
        let c = GridField::constant(g, 3.0).norms();
        assert_eq!((c.sup_norm, c.mean, c.discrete_c2_norm), (3.0, 3.0, 3.0));
        let s = GridField::from_fn(g, |x| (2.0 * PI * x[0]).sin()).norms();
        assert!(s.mean.abs() <= 1e-12);
        let expect = 1.0 + 2.0 * PI + 4.0 * PI * PI;
        assert!((s.discrete_c2_norm - expect).abs() / expect < 0.05);
    }

    proptest::proptest! {
        #[test]
        fn interpolation_stays_in_range(x in 0.0f64..1.0, y in 0.0f64..1.0, seed in 0u64..1000) {
            let g = TorusGrid::new(2, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = GridField::new(g, (0..64).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
            let v = f.interpolate([x, y]);
            proptest::prop_assert!(v >= f.min() - 1e-12 && v <= f.max() + 1e-12);
        }

        #[test]
        fn convolution_preserves_integral_and_sign(seed in 0u64..1000, r in 0.1f64..0.3) {
            let g = TorusGrid::new(1, 32).unwrap();
            let k = MollifierKernel::bump(g, r).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f: Vec<f64> = (0..32).map(|_| rng.gen_range(0.0..3.0)).collect();
            let out = k.convolve(&f).unwrap();
            let ia: f64 = f.iter().sum::<f64>() * g.h();
            let ib: f64 = out.iter().sum::<f64>() * g.h();
            proptest::prop_assert!((ia - ib).abs() < 1e-12);
            proptest::prop_assert!(out.iter().all(|&v| v >= 0.0));
        }
    }
}
