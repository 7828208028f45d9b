//! Hamiltonian `H(x, p) = a(x)|p|^2 / 2 - V(x)`, its Lagrangian, and the nonlocal
//! coupling `F(x, m) = (Fbar(., m * xi) * xi)(x)` with its weak-coercivity audit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{pairing_difference, GridMeasure};
use crate::torus::{GridField, MollifierKernel, TorusGrid};

/// One term `A cos(2 pi k.x + phi)` of a periodic field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierTerm {
    pub amplitude: f64,
    pub wave: [i32; 2],
    pub phase: f64,
}

/// Finite Fourier cosine sum, used for V, g and w.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FourierSum {
    pub terms: Vec<FourierTerm>,
}

impl FourierSum {
    pub fn cosine(amplitude: f64, k: i32) -> Self {
        Self {
            terms: vec![FourierTerm {
                amplitude,
                wave: [k, 0],
                phase: 0.0,
            }],
        }
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let arg = 2.0 * std::f64::consts::PI
                    * (t.wave[0] as f64 * x[0] + t.wave[1] as f64 * x[1])
                    + t.phase;
                t.amplitude * arg.cos()
            })
            .sum()
    }

    pub fn sample(&self, grid: TorusGrid) -> GridField {
        GridField::from_fn(grid, |x| self.eval(x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianSpec {
    potential: GridField,
    stiffness: GridField,
    c_bar: f64,
}

impl HamiltonianSpec {
    pub fn new(potential: GridField, stiffness: GridField, c_bar: f64) -> Result<Self> {
        potential.grid().check_same(stiffness.grid())?;
        if !(c_bar >= 1.0) {
            return Err(Error::InvalidParameter {
                name: "C_bar",
                reason: format!("must be >= 1, got {c_bar}"),
            });
        }
        let (lo, hi) = (stiffness.min(), stiffness.max());
        if lo < 1.0 / c_bar - 1e-12 || hi > c_bar + 1e-12 {
            return Err(Error::InvalidParameter {
                name: "a",
                reason: format!("stiffness range [{lo}, {hi}] outside [1/{c_bar}, {c_bar}]"),
            });
        }
        Ok(Self {
            potential,
            stiffness,
            c_bar,
        })
    }

    /// `H(x, p) = |p|^2 / 2 - V(x)`.
    pub fn quadratic(potential: GridField) -> Self {
        let stiffness = GridField::constant(*potential.grid(), 1.0);
        Self {
            potential,
            stiffness,
            c_bar: 1.0,
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        self.potential.grid()
    }

    pub fn potential(&self) -> &GridField {
        &self.potential
    }

    pub fn stiffness(&self) -> &GridField {
        &self.stiffness
    }

    pub fn c_bar(&self) -> f64 {
        self.c_bar
    }

    pub fn is_quadratic(&self) -> bool {
        self.stiffness.values().iter().all(|&a| a == 1.0)
    }

    #[inline]
    pub fn hamiltonian(&self, node: usize, p: [f64; 2]) -> f64 {
        let a = self.stiffness.values()[node];
        0.5 * a * (p[0] * p[0] + p[1] * p[1]) - self.potential.values()[node]
    }

    #[inline]
    pub fn d_p_hamiltonian(&self, node: usize, p: [f64; 2]) -> [f64; 2] {
        let a = self.stiffness.values()[node];
        [a * p[0], a * p[1]]
    }

    /// Closed-form conjugate `L(x, v) = |v|^2 / (2 a(x)) + V(x)`.
    #[inline]
    pub fn lagrangian(&self, node: usize, v: [f64; 2]) -> f64 {
        let a = self.stiffness.values()[node];
        (v[0] * v[0] + v[1] * v[1]) / (2.0 * a) + self.potential.values()[node]
    }

    /// Brute-force `sup_p <p, v> - H(x, p)` over the box `|p_i| <= radius` with spacing `step`.
    pub fn legendre_oracle(&self, node: usize, v: [f64; 2], radius: f64, step: f64) -> Result<f64> {
        let k = (radius / step).ceil() as i64;
        let dim = self.grid().dim();
        let range_y = if dim == 2 { -k..=k } else { 0..=0 };
        let mut best = f64::NEG_INFINITY;
        let mut on_boundary = false;
        for iy in range_y {
            for ix in -k..=k {
                let p = [ix as f64 * step, iy as f64 * step];
                let val = p[0] * v[0] + p[1] * v[1] - self.hamiltonian(node, p);
                if val > best {
                    best = val;
                    on_boundary = ix.abs() == k || (dim == 2 && iy.abs() == k);
                }
            }
        }
        if on_boundary {
            return Err(Error::Precondition(format!(
                "box too small: maximiser on the boundary |p| = {radius}"
            )));
        }
        Ok(best)
    }
}

/// Inner nonlinearity `Fbar(x, z)` of the convolution coupling.
#[derive(Debug, Clone, PartialEq)]
pub enum InnerMap {
    /// `kappa z + g(x)`.
    Linear { kappa: f64, g: GridField },
    /// `z + sigma sin(z) w(x) / 2`.
    Smooth { sigma: f64, w: GridField },
    /// `Fbar = 0`: decouples the system. Not weakly coercive; used for uncoupled runs.
    Zero,
}

impl InnerMap {
    #[inline]
    fn eval(&self, node: usize, z: f64) -> f64 {
        match self {
            InnerMap::Linear { kappa, g } => kappa * z + g.values()[node],
            InnerMap::Smooth { sigma, w } => z + 0.5 * sigma * z.sin() * w.values()[node],
            InnerMap::Zero => 0.0,
        }
    }

    /// Range of `dFbar/dz` over all `(x, z)`.
    pub fn slope_range(&self) -> (f64, f64) {
        match self {
            InnerMap::Linear { kappa, .. } => (*kappa, *kappa),
            InnerMap::Smooth { sigma, w } => {
                let amp = 0.5 * sigma.abs() * w.sup_norm();
                (1.0 - amp, 1.0 + amp)
            }
            InnerMap::Zero => (0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSpec {
    kernel: MollifierKernel,
    inner: InnerMap,
    c: f64,
}

impl CouplingSpec {
    /// Validates `c <= dFbar/dz <= 1/c` for the chosen family.
    pub fn new(kernel: MollifierKernel, inner: InnerMap, c: f64) -> Result<Self> {
        let g = *kernel.grid();
        match &inner {
            InnerMap::Linear { g: field, .. } => g.check_same(field.grid())?,
            InnerMap::Smooth { sigma, w } => {
                g.check_same(w.grid())?;
                if sigma.abs() > 0.5 {
                    return Err(Error::InvalidParameter {
                        name: "sigma",
                        reason: format!("|sigma| must be <= 1/2, got {sigma}"),
                    });
                }
                if w.sup_norm() > 2.0 {
                    return Err(Error::InvalidParameter {
                        name: "w",
                        reason: "sup |w| must be <= 2".into(),
                    });
                }
            }
            InnerMap::Zero => {}
        }
        if !matches!(inner, InnerMap::Zero) {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::InvalidParameter {
                    name: "c",
                    reason: format!("must be in (0, 1], got {c}"),
                });
            }
            let (lo, hi) = inner.slope_range();
            if lo < c - 1e-12 || hi > 1.0 / c + 1e-12 {
                return Err(Error::InvalidParameter {
                    name: "c",
                    reason: format!("dFbar/dz ranges over [{lo}, {hi}], not within [{c}, {}]", 1.0 / c),
                });
            }
        }
        Ok(Self { kernel, inner, c })
    }

    /// Decoupled coupling `F = 0`.
    pub fn zero(kernel: MollifierKernel) -> Self {
        Self {
            kernel,
            inner: InnerMap::Zero,
            c: 1.0,
        }
    }

    pub fn kernel(&self) -> &MollifierKernel {
        &self.kernel
    }

    pub fn inner(&self) -> &InnerMap {
        &self.inner
    }

    pub fn grid(&self) -> &TorusGrid {
        self.kernel.grid()
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn is_decoupled(&self) -> bool {
        matches!(self.inner, InnerMap::Zero)
    }

    /// Weak-coercivity constant `c^3 / ||xi||_2^2`.
    pub fn coercivity_constant(&self) -> f64 {
        self.c.powi(3) / self.kernel.l2_norm_sq()
    }

    pub fn eval(&self, m: &GridMeasure) -> Result<GridField> {
        self.grid().check_same(m.grid())?;
        if self.is_decoupled() {
            return Ok(GridField::zeros(*self.grid()));
        }
        let z = self.kernel.convolve(m.density())?;
        let inner: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(i, &zi)| self.inner.eval(i, zi))
            .collect();
        Ok(GridField::from_raw(*self.grid(), self.kernel.convolve(&inner)?))
    }

    /// Upper bound on the discrete C^2 norm of `F(., m)` valid for every probability measure.
    pub fn c2_bound(&self) -> f64 {
        if self.is_decoupled() {
            return 0.0;
        }
        // 0 <= (xi * m)(x) <= max xi and Fbar is increasing in z
        let zmax = self.kernel.weights().iter().copied().fold(0.0, f64::max);
        let gmax = (0..self.grid().len())
            .map(|i| self.inner.eval(i, 0.0).abs().max(self.inner.eval(i, zmax).abs()))
            .fold(0.0, f64::max);
        gmax * self.kernel.c2_mass()
    }

    /// Constant `K` with `||F(., m1) - F(., m2)||_inf <= K d_1(m1, m2)`.
    pub fn lipschitz_constant(&self) -> f64 {
        if self.is_decoupled() {
            return 0.0;
        }
        let path_factor = if self.grid().dim() == 2 {
            std::f64::consts::SQRT_2
        } else {
            1.0
        };
        self.inner.slope_range().1 * self.kernel.lipschitz_constant() * path_factor
    }

    pub fn coercivity_check(&self, m1: &GridMeasure, m2: &GridMeasure) -> Result<CoercivityReport> {
        let f1 = self.eval(m1)?;
        let f2 = self.eval(m2)?;
        let diff = f1.zip_map(&f2, |a, b| a - b)?;
        let lhs = pairing_difference(&diff, m1, m2)?;
        let rhs_l2sq = diff.values().iter().map(|d| d * d).sum::<f64>() * self.grid().cell_volume();
        let c_bar = self.coercivity_constant();
        let ratio = if rhs_l2sq > 1e-12 {
            lhs / rhs_l2sq
        } else {
            f64::INFINITY
        };
        Ok(CoercivityReport {
            lhs,
            rhs_l2sq,
            ratio,
            c_bar,
            passes: lhs >= c_bar * rhs_l2sq - 1e-10 && lhs >= -1e-10,
        })
    }

    /// [`Self::coercivity_check`] on `samples` random pairs drawn from a generator
    /// seeded with `seed`.
    pub fn coercivity_audit(&self, samples: usize, seed: u64) -> Result<CoercivityAudit> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = *self.grid();
        let mut audit = CoercivityAudit {
            samples,
            min_ratio: f64::INFINITY,
            min_lhs: f64::INFINITY,
            c_bar: self.coercivity_constant(),
            failures: 0,
        };
        for _ in 0..samples {
            let m1 = random_measure(g, &mut rng);
            let m2 = random_measure(g, &mut rng);
            let rep = self.coercivity_check(&m1, &m2)?;
            audit.min_ratio = audit.min_ratio.min(rep.ratio);
            audit.min_lhs = audit.min_lhs.min(rep.lhs);
            if !rep.passes {
                audit.failures += 1;
            }
        }
        Ok(audit)
    }
}

/// Summary of [`CouplingSpec::coercivity_audit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoercivityAudit {
    pub samples: usize,
    /// Smallest finite ratio seen (infinite if every pair had `rhs_l2sq <= 1e-12`).
    pub min_ratio: f64,
    pub min_lhs: f64,
    pub c_bar: f64,
    pub failures: usize,
}

impl CoercivityAudit {
    pub fn passes(&self) -> bool {
        self.failures == 0
    }
}

/// Random probability density: every fourth draw is a point mass, the rest are
/// cubed uniforms (rough, with near-empty cells) or smooth positive waves.
pub fn random_measure(grid: TorusGrid, rng: &mut impl rand::Rng) -> GridMeasure {
    match rng.gen_range(0..4) {
        0 => GridMeasure::point_like(grid, rng.gen_range(0..grid.len())),
        1 | 2 => {
            let d = (0..grid.len()).map(|_| rng.gen::<f64>().powi(3)).collect();
            GridMeasure::normalized(grid, d).expect("positive mass")
        }
        _ => {
            let k = [rng.gen_range(1..4), rng.gen_range(0..4)];
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.0..1.0);
            let d = (0..grid.len())
                .map(|i| {
                    let x = grid.coords(i);
                    let arg = std::f64::consts::TAU * (k[0] as f64 * x[0] + k[1] as f64 * x[1]);
                    1.0 + amp * (arg + phase).cos()
                })
                .collect();
            GridMeasure::normalized(grid, d).expect("positive mass")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoercivityReport {
    pub lhs: f64,
    pub rhs_l2sq: f64,
    /// `lhs / rhs_l2sq`, infinite when `rhs_l2sq <= 1e-12`.
    pub ratio: f64,
    pub c_bar: f64,
    pub passes: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::wasserstein1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn cos_spec(n: usize) -> HamiltonianSpec {
        let g = TorusGrid::new(1, n).unwrap();
        HamiltonianSpec::quadratic(FourierSum::cosine(1.0, 1).sample(g))
    }

    fn random_measure(g: TorusGrid, rng: &mut ChaCha8Rng) -> GridMeasure {
        let d: Vec<f64> = (0..g.len())
            .map(|_| rng.gen::<f64>().powi(3))
            .collect();
        GridMeasure::normalized(g, d).unwrap()
    }

    fn linear(kernel: MollifierKernel) -> CouplingSpec {
        let g = GridField::zeros(*kernel.grid());
        CouplingSpec::new(kernel, InnerMap::Linear { kappa: 1.0, g }, 1.0).unwrap()
    }

    fn smooth(kernel: MollifierKernel) -> CouplingSpec {
        let w = GridField::from_fn(*kernel.grid(), |x| (2.0 * PI * x[0]).cos());
        CouplingSpec::new(kernel, InnerMap::Smooth { sigma: 0.5, w }, 0.75).unwrap()
    }

    #[test]
    fn hamiltonian_values() {
        let spec = cos_spec(10);
        assert!((spec.hamiltonian(5, [0.0, 0.0]) - 1.0).abs() < 1e-15);
        for i in 0..10 {
            assert_eq!(spec.d_p_hamiltonian(i, [0.0, 0.0]), [0.0, 0.0]);
            assert_eq!(spec.lagrangian(i, [0.0, 0.0]), spec.potential().values()[i]);
        }
        let g = TorusGrid::new(1, 10).unwrap();
        let flat = HamiltonianSpec::quadratic(GridField::zeros(g));
        assert!((flat.lagrangian(3, [0.7, 0.0]) - 0.245).abs() < 1e-15);
    }

    #[test]
    fn d_p_hamiltonian_matches_central_differences() {
        let g = TorusGrid::new(2, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = GridField::new(g, (0..64).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
        let spec = HamiltonianSpec::new(FourierSum::cosine(1.0, 1).sample(g), a, 2.0).unwrap();
        let eps = 1e-4;
        for _ in 0..50 {
            let node = rng.gen_range(0..64);
            let p = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let dp = spec.d_p_hamiltonian(node, p);
            for axis in 0..2 {
                let mut pp = p;
                let mut pm = p;
                pp[axis] += eps;
                pm[axis] -= eps;
                let fd = (spec.hamiltonian(node, pp) - spec.hamiltonian(node, pm)) / (2.0 * eps);
                // H is quadratic in p: central differences are exact up to rounding
                assert!((fd - dp[axis]).abs() <= 1e-8 + eps * eps);
            }
        }
    }

    #[test]
    fn stiffness_range_is_checked() {
        let g = TorusGrid::new(1, 8).unwrap();
        let a = GridField::constant(g, 3.0);
        assert!(HamiltonianSpec::new(GridField::zeros(g), a, 2.0).is_err());
    }

    #[test]
    fn legendre_closed_form_matches_brute_force() {
        let g = TorusGrid::new(1, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = GridField::new(g, (0..16).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
        let spec = HamiltonianSpec::new(FourierSum::cosine(0.7, 2).sample(g), a, 2.0).unwrap();
        let amin = spec.stiffness().min();
        for _ in 0..20 {
            let node = rng.gen_range(0..16);
            let v: [f64; 2] = [rng.gen_range(-2.0..2.0), 0.0];
            let radius = 2.0 * v[0].abs() / amin + 1.0;
            let brute = spec.legendre_oracle(node, v, radius, 1e-3).unwrap();
            assert!((brute - spec.lagrangian(node, v)).abs() < 1e-5);
        }
        let too_small = spec.legendre_oracle(0, [5.0, 0.0], 0.5, 1e-3);
        assert!(too_small.is_err());
    }

    #[test]
    fn fenchel_young_inequality() {
        let g = TorusGrid::new(2, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = GridField::new(g, (0..64).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
        let spec = HamiltonianSpec::new(FourierSum::cosine(1.0, 1).sample(g), a, 2.0).unwrap();
        for _ in 0..200 {
            let node = rng.gen_range(0..64);
            let p = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let v = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let gap = spec.lagrangian(node, v) + spec.hamiltonian(node, p) - (p[0] * v[0] + p[1] * v[1]);
            assert!(gap >= -1e-12);
            let vstar = spec.d_p_hamiltonian(node, p);
            let eq = spec.lagrangian(node, vstar) + spec.hamiltonian(node, p)
                - (p[0] * vstar[0] + p[1] * vstar[1]);
            assert!(eq.abs() < 1e-12);
        }
    }

    #[test]
    fn coupling_identity_cases() {
        let g = TorusGrid::new(1, 32).unwrap();
        let k = MollifierKernel::bump(g, 0.2).unwrap();
        let spec = linear(k.clone());
        let f = spec.eval(&GridMeasure::uniform(g)).unwrap();
        assert!(f.values().iter().all(|v| (v - 1.0).abs() < 1e-12));

        let j = 9;
        let f = spec.eval(&GridMeasure::point_like(g, j)).unwrap();
        let kk = k.convolve(k.weights()).unwrap();
        for i in 0..32 {
            assert!((f.values()[i] - kk[(i + 32 - j) % 32]).abs() < 1e-12);
        }
    }

    #[test]
    fn coupling_matches_nested_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for dim in [1, 2] {
            let g = TorusGrid::new(dim, 16).unwrap();
            let k = MollifierKernel::bump(g, 0.2).unwrap();
            let w = GridField::new(g, (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let spec = CouplingSpec::new(k.clone(), InnerMap::Smooth { sigma: 0.4, w: w.clone() }, 0.75).unwrap();
            let m = random_measure(g, &mut rng);
            let f = spec.eval(&m).unwrap();
            let vol = g.cell_volume();
            let xi = |i: usize, j: usize| {
                let (a, b) = (g.multi_index(i), g.multi_index(j));
                let off = g.flat_index([(a[0] + g.n() - b[0]) % g.n(), (a[1] + g.n() - b[1]) % g.n()]);
                k.weights()[off]
            };
            let z: Vec<f64> = (0..g.len())
                .map(|i| (0..g.len()).map(|j| xi(i, j) * m.density()[j] * vol).sum())
                .collect();
            let fbar: Vec<f64> = (0..g.len())
                .map(|i| z[i] + 0.5 * 0.4 * z[i].sin() * w.values()[i])
                .collect();
            for i in 0..g.len() {
                let expect: f64 = (0..g.len()).map(|j| xi(i, j) * fbar[j] * vol).sum();
                assert!((f.values()[i] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn invalid_coupling_parameters_rejected() {
        let g = TorusGrid::new(1, 32).unwrap();
        let k = MollifierKernel::bump(g, 0.2).unwrap();
        let zero = GridField::zeros(g);
        assert!(CouplingSpec::new(k.clone(), InnerMap::Linear { kappa: 1.0, g: zero.clone() }, 0.0).is_err());
        assert!(CouplingSpec::new(k.clone(), InnerMap::Linear { kappa: 3.0, g: zero.clone() }, 0.5).is_err());
        assert!(CouplingSpec::new(k, InnerMap::Smooth { sigma: 0.8, w: zero }, 0.5).is_err());
    }

    #[test]
    fn linear_coercivity_lhs_is_squared_smoothed_difference() {
        let g = TorusGrid::new(1, 32).unwrap();
        let k = MollifierKernel::bump(g, 0.15).unwrap();
        let spec = linear(k.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let m1 = random_measure(g, &mut rng);
            let m2 = random_measure(g, &mut rng);
            let r = spec.coercivity_check(&m1, &m2).unwrap();
            let d: Vec<f64> = m1.density().iter().zip(m2.density()).map(|(a, b)| a - b).collect();
            let s = k.convolve(&d).unwrap();
            let l2: f64 = s.iter().map(|v| v * v).sum::<f64>() * g.h();
            assert!((r.lhs - l2).abs() < 1e-10);
            assert!(r.passes);
        }
        let m = random_measure(g, &mut rng);
        let same = spec.coercivity_check(&m, &m).unwrap();
        assert_eq!((same.lhs, same.rhs_l2sq), (0.0, 0.0));
        assert!(same.passes);
    }

    #[test]
    fn coercivity_holds_on_random_pairs() {
        let g = TorusGrid::new(1, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for r in [0.1, 0.2] {
            let k = MollifierKernel::bump(g, r).unwrap();
            for spec in [linear(k.clone()), smooth(k)] {
                for _ in 0..50 {
                    let m1 = random_measure(g, &mut rng);
                    let m2 = random_measure(g, &mut rng);
                    let rep = spec.coercivity_check(&m1, &m2).unwrap();
                    assert!(rep.passes, "{rep:?}");
                    assert!(rep.lhs >= -1e-10);
                    if rep.rhs_l2sq > 1e-12 {
                        assert!(rep.ratio >= rep.c_bar - 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn seeded_audit_is_reproducible_and_passes() {
        let g = TorusGrid::new(1, 32).unwrap();
        let spec = smooth(MollifierKernel::bump(g, 0.15).unwrap());
        let a = spec.coercivity_audit(40, 5).unwrap();
        assert_eq!(a, spec.coercivity_audit(40, 5).unwrap());
        assert!(a.passes(), "{a:?}");
        assert!(a.min_ratio >= a.c_bar - 1e-10);
        let zero = CouplingSpec::zero(MollifierKernel::bump(g, 0.15).unwrap());
        assert_eq!(zero.coercivity_audit(3, 1).unwrap().min_lhs, 0.0);
    }

    #[test]
    fn coupling_c2_norm_uniformly_bounded() {
        let g = TorusGrid::new(1, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let k = MollifierKernel::bump(g, 0.15).unwrap();
        for spec in [linear(k.clone()), smooth(k)] {
            let bound = spec.c2_bound();
            for i in 0..100 {
                // include point masses, the extreme case
                let m = if i % 10 == 0 {
                    GridMeasure::point_like(g, i % 64)
                } else {
                    random_measure(g, &mut rng)
                };
                let c2 = spec.eval(&m).unwrap().norms().discrete_c2_norm;
                assert!(c2 <= bound, "{c2} > {bound}");
            }
        }
    }

    #[test]
    fn coupling_is_lipschitz_in_d1() {
        let g = TorusGrid::new(1, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let k = MollifierKernel::bump(g, 0.15).unwrap();
        for spec in [linear(k.clone()), smooth(k)] {
            let lip = spec.lipschitz_constant();
            for _ in 0..100 {
                let m1 = random_measure(g, &mut rng);
                let m2 = random_measure(g, &mut rng);
                let gap = spec.eval(&m1).unwrap().sup_distance(&spec.eval(&m2).unwrap()).unwrap();
                assert!(gap <= lip * wasserstein1(&m1, &m2).unwrap() + 1e-12);
            }
        }
    }
}
