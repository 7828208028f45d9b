//! Probability densities on a [`TorusGrid`] and the Monge–Wasserstein distance `d_1`.
//!
//! A measure is stored as a density: node `i` carries mass `density[i] * h^d`.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::torus::{GridField, TorusGrid};

/// Mass tolerance accepted when constructing a measure.
pub const MASS_TOLERANCE: f64 = 1e-10;

/// Largest node count the transport LP accepts.
pub const LP_MAX_NODES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeasure {
    grid: TorusGrid,
    density: Vec<f64>,
}

impl GridMeasure {
    /// Validates nonnegativity and unit mass; never renormalises.
    pub fn new(grid: TorusGrid, density: Vec<f64>) -> Result<Self> {
        if density.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} density values for {} nodes",
                density.len(),
                grid.len()
            )));
        }
        if let Some(i) = density.iter().position(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidMeasure(format!(
                "density at node {i} is {}",
                density[i]
            )));
        }
        let mass = density.iter().sum::<f64>() * grid.cell_volume();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::MassDefect((mass - 1.0).abs()));
        }
        Ok(Self { grid, density })
    }

    /// Ingestion path: clamps nothing, but rescales a nonnegative density to unit mass.
    pub fn normalized(grid: TorusGrid, mut density: Vec<f64>) -> Result<Self> {
        if density.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidMeasure("negative or non-finite density".into()));
        }
        let mass = density.iter().sum::<f64>() * grid.cell_volume();
        if mass <= 0.0 {
            return Err(Error::InvalidMeasure("zero total mass".into()));
        }
        for d in &mut density {
            *d /= mass;
        }
        Self::new(grid, density)
    }

    pub(crate) fn from_raw(grid: TorusGrid, density: Vec<f64>) -> Self {
        Self { grid, density }
    }

    pub fn uniform(grid: TorusGrid) -> Self {
        Self {
            grid,
            density: vec![1.0; grid.len()],
        }
    }

    /// All mass on a single node.
    pub fn point_like(grid: TorusGrid, node: usize) -> Self {
        let mut density = vec![0.0; grid.len()];
        density[node] = 1.0 / grid.cell_volume();
        Self { grid, density }
    }

    /// Point-like mass at the node nearest to `x`.
    pub fn point_like_at(grid: TorusGrid, x: [f64; 2]) -> Self {
        Self::point_like(grid, grid.nearest_node(x))
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Mass carried by node `i`.
    pub fn node_mass(&self, i: usize) -> f64 {
        self.density[i] * self.grid.cell_volume()
    }

    pub fn sup_density(&self) -> f64 {
        self.density.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_density(&self) -> f64 {
        self.density.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn as_field(&self) -> GridField {
        GridField::from_raw(self.grid, self.density.clone())
    }

    /// `(1 - theta) * self + theta * other`.
    pub fn mix(&self, other: &GridMeasure, theta: f64) -> Result<GridMeasure> {
        self.grid.check_same(&other.grid)?;
        Ok(Self::from_raw(
            self.grid,
            self.density
                .iter()
                .zip(&other.density)
                .map(|(a, b)| (1.0 - theta) * a + theta * b)
                .collect(),
        ))
    }

    /// Errors if the mass drifted beyond `tol` from one.
    pub fn check_mass(&self, tol: f64) -> Result<()> {
        let defect = (self.mass() - 1.0).abs();
        if defect > tol {
            return Err(Error::MassDefect(defect));
        }
        Ok(())
    }
}

/// Time-indexed family of measures on a common grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurePath {
    times: Vec<f64>,
    measures: Vec<GridMeasure>,
}

impl MeasurePath {
    pub fn new(times: Vec<f64>, measures: Vec<GridMeasure>) -> Result<Self> {
        if times.is_empty() || times.len() != measures.len() {
            return Err(Error::Precondition(format!(
                "{} times for {} measures",
                times.len(),
                measures.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Precondition("times must be strictly increasing".into()));
        }
        let g = *measures[0].grid();
        for m in &measures {
            g.check_same(m.grid())?;
        }
        Ok(Self { times, measures })
    }

    /// Same measure at every time.
    pub fn constant(times: Vec<f64>, m: &GridMeasure) -> Result<Self> {
        let measures = vec![m.clone(); times.len()];
        Self::new(times, measures)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn measures(&self) -> &[GridMeasure] {
        &self.measures
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn grid(&self) -> &TorusGrid {
        self.measures[0].grid()
    }

    pub fn first(&self) -> &GridMeasure {
        &self.measures[0]
    }

    pub fn last(&self) -> &GridMeasure {
        &self.measures[self.measures.len() - 1]
    }

    /// Replaces the first snapshot (same grid assumed).
    pub(crate) fn pin_first(&mut self, m: &GridMeasure) {
        self.measures[0] = m.clone();
    }

    /// Nodewise convex combination of two paths on the same time grid.
    pub fn mix(&self, other: &MeasurePath, theta: f64) -> Result<MeasurePath> {
        if self.times != other.times {
            return Err(Error::Precondition("paths on different time grids".into()));
        }
        let measures = self
            .measures
            .iter()
            .zip(&other.measures)
            .map(|(a, b)| a.mix(b, theta))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            times: self.times.clone(),
            measures,
        })
    }

    /// Piecewise-linear-in-time average of the densities over `[t_a, t_b]`,
    /// renormalised to unit mass.
    pub fn time_average(&self, t_a: f64, t_b: f64) -> Result<GridMeasure> {
        let (t0, t1) = (self.times[0], self.times[self.len() - 1]);
        if !(t_a < t_b) {
            return Err(Error::Precondition(format!("empty window [{t_a}, {t_b}]")));
        }
        let eps = 1e-12 * (1.0 + t1.abs());
        if t_a < t0 - eps || t_b > t1 + eps {
            return Err(Error::Precondition(format!(
                "window [{t_a}, {t_b}] outside path range [{t0}, {t1}]"
            )));
        }
        let g = *self.grid();
        let mut acc = vec![0.0; g.len()];
        for k in 0..self.len() - 1 {
            let (s0, s1) = (self.times[k], self.times[k + 1]);
            let a = s0.max(t_a);
            let b = s1.min(t_b);
            if b <= a {
                continue;
            }
            let (d0, d1) = (self.measures[k].density(), self.measures[k + 1].density());
            // linear interpolation between snapshots, integrated exactly on [a, b]
            let la = (a - s0) / (s1 - s0);
            let lb = (b - s0) / (s1 - s0);
            let w = b - a;
            for i in 0..g.len() {
                let va = d0[i] + la * (d1[i] - d0[i]);
                let vb = d0[i] + lb * (d1[i] - d0[i]);
                acc[i] += 0.5 * w * (va + vb);
            }
        }
        GridMeasure::normalized(g, acc)
    }
}

/// `sum f_i * density_i * h^d`.
pub fn pairing(f: &GridField, mu: &GridMeasure) -> Result<f64> {
    f.grid().check_same(mu.grid())?;
    Ok(f
        .values()
        .iter()
        .zip(mu.density())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        * mu.grid().cell_volume())
}

/// Pairing of a field against a signed difference of measures.
pub fn pairing_difference(f: &GridField, mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    f.grid().check_same(mu.grid())?;
    mu.grid().check_same(nu.grid())?;
    let s: f64 = f
        .values()
        .iter()
        .zip(mu.density().iter().zip(nu.density()))
        .map(|(a, (m, n))| a * (m - n))
        .sum();
    Ok(s * mu.grid().cell_volume())
}

/// `d_1(mu, nu)`: exact circular formula in 1D, the transport LP in 2D.
pub fn wasserstein1(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    mu.grid().check_same(nu.grid())?;
    if mu.grid().dim() == 1 {
        Ok(wasserstein1_circle(mu.grid(), mu.density(), nu.density()))
    } else {
        if mu.grid().len() > 64 * 64 {
            return Err(Error::OracleTooLarge(format!(
                "2D d_1 needs the transport LP; {} nodes exceeds 64^2",
                mu.grid().len()
            )));
        }
        wasserstein1_lp(mu, nu)
    }
}

/// Circle transport cost for densities on a 1D grid.
///
/// With cumulative mass differences `C_k` across the arcs `[x_k, x_{k+1}]`, the
/// cost is `h * min_s sum_k |C_k - s|`, minimised at the median of the `C_k`.
pub(crate) fn wasserstein1_circle(grid: &TorusGrid, mu: &[f64], nu: &[f64]) -> f64 {
    let h = grid.h();
    let mut c = Vec::with_capacity(mu.len());
    let mut acc = 0.0;
    for (a, b) in mu.iter().zip(nu) {
        acc += (a - b) * h;
        c.push(acc);
    }
    let mut sorted = c.clone();
    sorted.sort_by(f64::total_cmp);
    let s = sorted[sorted.len() / 2];
    c.iter().map(|ck| (ck - s).abs()).sum::<f64>() * h
}

/// Optimal value of the primal transport program with torus-geodesic costs.
///
/// Variables are restricted to pairs of nodes that both carry mass, which leaves
/// the optimum unchanged.
pub fn wasserstein1_lp(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    let g = *mu.grid();
    g.check_same(nu.grid())?;
    if g.len() > LP_MAX_NODES {
        return Err(Error::OracleTooLarge(format!(
            "transport LP limited to {LP_MAX_NODES} nodes, grid has {}",
            g.len()
        )));
    }
    let vol = g.cell_volume();
    // the common part stays in place at zero cost
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..g.len() {
        let (m, n) = (mu.density()[i] * vol, nu.density()[i] * vol);
        let common = m.min(n);
        if m - common > 0.0 {
            a.push((i, m - common));
        }
        if n - common > 0.0 {
            b.push((i, n - common));
        }
    }
    if a.is_empty() || b.is_empty() {
        return Ok(0.0);
    }
    // balance rounding so the program stays feasible
    let sa: f64 = a.iter().map(|x| x.1).sum();
    let sb: f64 = b.iter().map(|x| x.1).sum();
    for x in &mut b {
        x.1 *= sa / sb;
    }

    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let mut vars = Vec::with_capacity(a.len());
    for &(i, _) in &a {
        let row: Vec<_> = b
            .iter()
            .map(|&(j, _)| problem.add_var(g.node_distance(i, j), (0.0, f64::INFINITY)))
            .collect();
        vars.push(row);
    }
    for (r, &(_, mass)) in a.iter().enumerate() {
        let expr: Vec<_> = vars[r].iter().map(|&v| (v, 1.0)).collect();
        problem.add_constraint(expr.as_slice(), ComparisonOp::Eq, mass);
    }
    // the last column constraint is implied by the others
    for (c, &(_, mass)) in b.iter().enumerate().take(b.len() - 1) {
        let expr: Vec<_> = vars.iter().map(|row| (row[c], 1.0)).collect();
        problem.add_constraint(expr.as_slice(), ComparisonOp::Eq, mass);
    }
    let solution = problem
        .solve()
        .map_err(|e| Error::LinearProgram(e.to_string()))?;
    Ok(solution.objective())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_measure(g: TorusGrid, rng: &mut ChaCha8Rng) -> GridMeasure {
        let d: Vec<f64> = (0..g.len())
            .map(|_| {
                let u: f64 = rng.gen();
                if u < 0.3 {
                    0.0
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        GridMeasure::normalized(g, d).unwrap()
    }

    #[test]
    fn construction_validates() {
        let g = TorusGrid::new(1, 8).unwrap();
        assert!(GridMeasure::new(g, vec![1.0; 8]).is_ok());
        assert!(matches!(
            GridMeasure::new(g, vec![2.0; 8]),
            Err(Error::MassDefect(_))
        ));
        let mut d = vec![1.0; 8];
        d[0] = -0.1;
        d[1] = 1.1;
        assert!(GridMeasure::new(g, d).is_err());
    }

    #[test]
    fn distance_to_self_is_zero() {
        let g = TorusGrid::new(1, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_measure(g, &mut rng);
        assert!(wasserstein1(&m, &m).unwrap().abs() < 1e-15);
        assert!(wasserstein1_lp(&m, &m).unwrap().abs() < 1e-15);
    }

    #[test]
    fn point_masses_translate() {
        let g = TorusGrid::new(1, 100).unwrap();
        let h = g.h();
        let a = GridMeasure::point_like_at(g, [0.2, 0.0]);
        let b = GridMeasure::point_like_at(g, [0.3, 0.0]);
        assert!((wasserstein1(&a, &b).unwrap() - 0.1).abs() <= h);
        let c = GridMeasure::point_like_at(g, [0.05, 0.0]);
        let d = GridMeasure::point_like_at(g, [0.95, 0.0]);
        assert!((wasserstein1(&c, &d).unwrap() - 0.1).abs() <= h);
    }

    #[test]
    fn lp_handles_2d_pythagorean_pair() {
        let g = TorusGrid::new(2, 20).unwrap();
        let a = GridMeasure::point_like_at(g, [0.0, 0.0]);
        let b = GridMeasure::point_like_at(g, [0.3, 0.4]);
        let d = wasserstein1(&a, &b).unwrap();
        assert!((d - 0.5).abs() <= 2.0 * g.h());
    }

    #[test]
    fn lp_rejects_oversized_grids() {
        let g = TorusGrid::new(2, 65).unwrap();
        let m = GridMeasure::uniform(g);
        assert!(matches!(wasserstein1_lp(&m, &m), Err(Error::OracleTooLarge(_))));
        assert!(matches!(wasserstein1(&m, &m), Err(Error::OracleTooLarge(_))));
    }

    #[test]
    fn circle_formula_matches_lp_oracle() {
        let g = TorusGrid::new(1, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a = random_measure(g, &mut rng);
            let b = random_measure(g, &mut rng);
            let exact = wasserstein1(&a, &b).unwrap();
            let lp = wasserstein1_lp(&a, &b).unwrap();
            assert!((exact - lp).abs() < 1e-8, "{exact} vs {lp}");
        }
    }

    #[test]
    fn pairing_properties() {
        let g = TorusGrid::new(1, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = GridField::new(g, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mu = random_measure(g, &mut rng);
        let nu = random_measure(g, &mut rng);
        assert!((pairing(&GridField::constant(g, 1.0), &mu).unwrap() - 1.0).abs() < 1e-12);
        let uni = GridMeasure::uniform(g);
        assert!((pairing(&f, &uni).unwrap() - f.mean()).abs() < 1e-12);
        let alpha = 0.3;
        let mixed = mu.mix(&nu, 1.0 - alpha).unwrap();
        let lhs = pairing(&f, &mixed).unwrap();
        let rhs = alpha * pairing(&f, &mu).unwrap() + (1.0 - alpha) * pairing(&f, &nu).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        let other = TorusGrid::new(1, 32).unwrap();
        assert!(pairing(&GridField::zeros(other), &mu).is_err());
    }

    #[test]
    fn time_average_cases() {
        let g = TorusGrid::new(1, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_measure(g, &mut rng);
        let b = random_measure(g, &mut rng);

        let constant = MeasurePath::constant(vec![0.0, 0.5, 1.0], &a).unwrap();
        let avg = constant.time_average(0.0, 1.0).unwrap();
        for (x, y) in avg.density().iter().zip(a.density()) {
            assert!((x - y).abs() < 1e-12);
        }

        let two = MeasurePath::new(vec![0.0, 1.0], vec![a.clone(), b.clone()]).unwrap();
        let avg = two.time_average(0.0, 1.0).unwrap();
        for i in 0..8 {
            assert!((avg.density()[i] - 0.5 * (a.density()[i] + b.density()[i])).abs() < 1e-12);
        }

        // linear in time over [0, 4] with snapshots every unit: average is the midpoint
        let times: Vec<f64> = (0..5).map(f64::from).collect();
        let ms: Vec<_> = times.iter().map(|t| a.mix(&b, t / 4.0).unwrap()).collect();
        let lin = MeasurePath::new(times, ms).unwrap();
        let avg = lin.time_average(0.0, 4.0).unwrap();
        let mid = a.mix(&b, 0.5).unwrap();
        for (x, y) in avg.density().iter().zip(mid.density()) {
            assert!((x - y).abs() < 1e-12);
        }
        // a window that does not align with snapshots
        let avg = lin.time_average(0.5, 3.5).unwrap();
        for (x, y) in avg.density().iter().zip(mid.density()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(lin.time_average(2.0, 2.0).is_err());
        assert!(lin.time_average(-1.0, 2.0).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn d1_is_a_metric(seed in 0u64..10_000) {
            let g = TorusGrid::new(1, 24).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_measure(g, &mut rng);
            let b = random_measure(g, &mut rng);
            let c = random_measure(g, &mut rng);
            let ab = wasserstein1(&a, &b).unwrap();
            let ba = wasserstein1(&b, &a).unwrap();
            let bc = wasserstein1(&b, &c).unwrap();
            let ac = wasserstein1(&a, &c).unwrap();
            proptest::prop_assert!((ab - ba).abs() < 1e-12);
            proptest::prop_assert!(ac <= ab + bc + 1e-12);
            proptest::prop_assert!(ab <= 0.5 + 1e-12);
            proptest::prop_assert!(ab >= 0.0);
        }
    }
}
