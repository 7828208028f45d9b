//! Finite-horizon coupled system: backward HJ with source `F(., m(t))`, forward
//! transport under the resulting feedback, and a damped fixed point on the path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hj::{solve_backward, HJSolution, TimeGrid, VelocityPolicy};
use crate::measures::{pairing_difference, GridMeasure, MeasurePath};
use crate::model::{CouplingSpec, HamiltonianSpec};
use crate::torus::GridField;
use crate::transport::{forward_from_solution, TransportScheme};

#[derive(Debug, Clone, PartialEq)]
pub struct MFGProblem {
    pub hamiltonian: HamiltonianSpec,
    pub coupling: CouplingSpec,
    pub m0: GridMeasure,
    pub u_f: GridField,
    pub time_grid: TimeGrid,
}

impl MFGProblem {
    pub fn new(
        hamiltonian: HamiltonianSpec,
        coupling: CouplingSpec,
        m0: GridMeasure,
        u_f: GridField,
        time_grid: TimeGrid,
    ) -> Result<Self> {
        let g = *hamiltonian.grid();
        g.check_same(coupling.grid())?;
        g.check_same(m0.grid())?;
        g.check_same(u_f.grid())?;
        if u_f.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "u_f",
                reason: "terminal cost must be finite".into(),
            });
        }
        Ok(Self {
            hamiltonian,
            coupling,
            m0,
            u_f,
            time_grid,
        })
    }

    /// Same data on a different horizon.
    pub fn with_time_grid(&self, time_grid: TimeGrid) -> Self {
        Self {
            time_grid,
            ..self.clone()
        }
    }

    /// `F(., m(t_k))` for every node of the path.
    pub fn coupling_path(&self, path: &MeasurePath) -> Result<Vec<GridField>> {
        path.measures().iter().map(|m| self.coupling.eval(m)).collect()
    }
}

/// The pair of solvers a fixed-point iteration alternates between.
pub trait Dynamics {
    fn backward(&self, problem: &MFGProblem, source: &[GridField]) -> Result<HJSolution>;
    fn forward(&self, problem: &MFGProblem, hj: &HJSolution) -> Result<MeasurePath>;
}

/// Deterministic (first-order) dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FirstOrder {
    pub scheme: TransportScheme,
    pub velocities: VelocityPolicy,
}

impl Dynamics for FirstOrder {
    fn backward(&self, problem: &MFGProblem, source: &[GridField]) -> Result<HJSolution> {
        solve_backward(
            &problem.u_f,
            source,
            &problem.hamiltonian,
            &problem.time_grid,
            &self.velocities,
        )
    }

    fn forward(&self, problem: &MFGProblem, hj: &HJSolution) -> Result<MeasurePath> {
        forward_from_solution(&problem.m0, hj, &problem.hamiltonian, &self.scheme)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Damping {
    /// `theta_k = theta` every iteration.
    Fixed(f64),
    /// `theta_k = 1 / (k + 1)`.
    FictitiousPlay,
    /// `theta_k = theta / (1 + theta (k - 1))`: starts at `theta` and decays like
    /// `1 / k`. `Harmonic(0.5)` is fictitious play.
    Harmonic(f64),
}

impl Damping {
    /// Weight of the best response at iteration `k >= 1`.
    pub fn weight(&self, k: usize) -> f64 {
        match *self {
            Damping::Fixed(theta) => theta,
            Damping::FictitiousPlay => 1.0 / (k as f64 + 1.0),
            Damping::Harmonic(theta) => theta / (1.0 + theta * (k as f64 - 1.0)),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match *self {
            Damping::Fixed(theta) | Damping::Harmonic(theta) if !(theta > 0.0 && theta <= 1.0) => Err(Error::InvalidParameter {
                name: "theta",
                reason: format!("must be in (0, 1], got {theta}"),
            }),
            _ => Ok(()),
        }
    }
}

/// Starting path of the fixed-point iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    /// `m(t) = m0` for all `t`.
    FrozenM0,
    /// `m(t)` uniform for all `t`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub damping: Damping,
    pub tol_fp: f64,
    pub max_iter: usize,
    pub init: Initialization,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            damping: Damping::FictitiousPlay,
            tol_fp: 1e-4,
            max_iter: 2000,
            init: Initialization::FrozenM0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MFGSolution {
    pub hj: HJSolution,
    pub path: MeasurePath,
    /// `sup_t ||F(., m^{k+1}(t)) - F(., m^k(t))||` per iteration.
    pub residual_history: Vec<f64>,
    /// `sup_t ||F(., BR(m^k)(t)) - F(., m^k(t))||` per iteration: distance of the
    /// iterate from its own best response.
    pub response_gap_history: Vec<f64>,
    pub iterations: usize,
}

impl MFGSolution {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(0.0)
    }
}

/// Value function and transported path generated by freezing `m_path` in the coupling.
pub fn best_response(
    problem: &MFGProblem,
    m_path: &MeasurePath,
    dynamics: &impl Dynamics,
) -> Result<(HJSolution, MeasurePath)> {
    if m_path.len() != problem.time_grid.steps() + 1 {
        return Err(Error::Precondition(format!(
            "path has {} snapshots, time grid has {} nodes",
            m_path.len(),
            problem.time_grid.steps() + 1
        )));
    }
    let source = problem.coupling_path(m_path)?;
    let hj = dynamics.backward(problem, &source)?;
    let new_path = dynamics.forward(problem, &hj)?;
    Ok((hj, new_path))
}

fn sup_gap(a: &[GridField], b: &[GridField]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.sup_distance(y).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max)
}

fn initial_path(problem: &MFGProblem, init: Initialization) -> Result<MeasurePath> {
    let times = problem.time_grid.times();
    match init {
        Initialization::FrozenM0 => MeasurePath::constant(times, &problem.m0),
        Initialization::Uniform => {
            MeasurePath::constant(times, &GridMeasure::uniform(*problem.m0.grid()))
        }
    }
}

/// Damped fixed point `m <- (1 - theta_k) m + theta_k BR(m)`.
///
/// Stops when consecutive iterates have coupling fields within `tol_fp`; the reported
/// value function is one more backward solve against the converged path.
pub fn solve_mfg(problem: &MFGProblem, cfg: &FixedPointConfig) -> Result<MFGSolution> {
    solve_mfg_with(problem, cfg, &FirstOrder::default())
}

pub fn solve_mfg_with(
    problem: &MFGProblem,
    cfg: &FixedPointConfig,
    dynamics: &impl Dynamics,
) -> Result<MFGSolution> {
    if !(cfg.tol_fp > 0.0) {
        return Err(Error::InvalidParameter {
            name: "tol_fp",
            reason: format!("must be positive, got {}", cfg.tol_fp),
        });
    }
    cfg.damping.validate()?;
    let mut path = initial_path(problem, cfg.init)?;
    let mut fields = problem.coupling_path(&path)?;
    let mut residuals = Vec::new();
    let mut gaps = Vec::new();
    for k in 1..=cfg.max_iter {
        let (_, response) = best_response(problem, &path, dynamics)?;
        let response_fields = problem.coupling_path(&response)?;
        gaps.push(sup_gap(&response_fields, &fields));
        let theta = cfg.damping.weight(k);
        path = path.mix(&response, theta)?;
        // both paths start at m0; keep it bit-exact
        path.pin_first(&problem.m0);
        let new_fields = problem.coupling_path(&path)?;
        let r = sup_gap(&new_fields, &fields);
        residuals.push(r);
        fields = new_fields;
        log::debug!("fixed point iteration {k}: residual {r:.3e}");
        if r < cfg.tol_fp {
            let hj = dynamics.backward(problem, &fields)?;
            return Ok(MFGSolution {
                hj,
                path,
                residual_history: residuals,
                response_gap_history: gaps,
                iterations: k,
            });
        }
    }
    Err(Error::NonConvergence {
        what: "finite-horizon fixed point",
        iterations: cfg.max_iter,
        last: residuals.last().copied().unwrap_or(f64::NAN),
        history: residuals,
    })
}

/// `int_0^T <F(., m(t)) - F(., ref), m(t) - ref> dt` by the trapezoid rule.
pub fn energy_pairing(
    sol: &MFGSolution,
    reference: &GridMeasure,
    coupling: &CouplingSpec,
) -> Result<f64> {
    let f_ref = coupling.eval(reference)?;
    let values = sol
        .path
        .measures()
        .iter()
        .map(|m| {
            let diff = coupling.eval(m)?.zip_map(&f_ref, |a, b| a - b)?;
            pairing_difference(&diff, m, reference)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(trapezoid(sol.path.times(), &values))
}

pub(crate) fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{FourierSum, InnerMap};
    use crate::torus::{MollifierKernel, TorusGrid};

    pub(crate) fn baseline(n: usize, horizon: f64, steps: usize) -> MFGProblem {
        let g = TorusGrid::new(1, n).unwrap();
        let spec = HamiltonianSpec::quadratic(FourierSum::cosine(1.0, 1).sample(g));
        let kernel = MollifierKernel::bump(g, 0.15).unwrap();
        let coupling = CouplingSpec::new(
            kernel,
            InnerMap::Linear {
                kappa: 1.0,
                g: GridField::zeros(g),
            },
            1.0,
        )
        .unwrap();
        let m0 = GridMeasure::normalized(
            g,
            (0..n)
                .map(|i| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * g.coords(i)[0]).sin())
                .collect(),
        )
        .unwrap();
        MFGProblem::new(
            spec,
            coupling,
            m0,
            GridField::zeros(g),
            TimeGrid::new(horizon, steps).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn decoupled_problem_converges_in_one_iteration() {
        let mut p = baseline(32, 1.0, 20);
        p.coupling = CouplingSpec::zero(p.coupling.kernel().clone());
        let sol = solve_mfg(&p, &FixedPointConfig::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.path.first(), &p.m0);
    }

    #[test]
    fn decoupled_best_response_ignores_input_path() {
        let mut p = baseline(32, 1.0, 20);
        p.coupling = CouplingSpec::zero(p.coupling.kernel().clone());
        let times = p.time_grid.times();
        let a = MeasurePath::constant(times.clone(), &p.m0).unwrap();
        let b = MeasurePath::constant(times, &GridMeasure::point_like(*p.m0.grid(), 3)).unwrap();
        let ra = best_response(&p, &a, &FirstOrder::default()).unwrap().1;
        let rb = best_response(&p, &b, &FirstOrder::default()).unwrap().1;
        assert_eq!(ra, rb);
    }

    #[test]
    fn single_step_matches_direct_evaluation() {
        let n = 8;
        let p = baseline(n, 0.05, 1);
        let g = *p.m0.grid();
        let dt = 0.05;
        let guess = MeasurePath::constant(p.time_grid.times(), &GridMeasure::point_like(g, 2)).unwrap();
        let dyn_ = FirstOrder {
            velocities: VelocityPolicy::fixed(3.0, 0.01),
            ..Default::default()
        };
        let (hj, path) = best_response(&p, &guess, &dyn_).unwrap();

        // coupling at the frozen point mass by nested sums
        let xi = p.coupling.kernel().weights();
        let h = g.h();
        let z: Vec<f64> = (0..n).map(|i| (0..n).map(|j| xi[(i + n - j) % n] * guess.first().density()[j] * h).sum()).collect();
        let f: Vec<f64> = (0..n).map(|i| (0..n).map(|j| xi[(i + n - j) % n] * z[j] * h).sum()).collect();

        // u(0) by scanning the same velocity lattice; u(T) = 0 so only the running cost matters
        let mut v_star = vec![0.0; n];
        for i in 0..n {
            let x = g.coords(i)[0];
            let v_pot = (2.0 * std::f64::consts::PI * x).cos();
            let mut best: (f64, f64) = (f64::INFINITY, 0.0);
            for k in -300i32..=300 {
                let v = k as f64 * 0.01;
                let cost = dt * (0.5 * v * v + v_pot + f[i]);
                if cost < best.0 || (cost == best.0 && v.abs() < best.1.abs()) {
                    best = (cost, v);
                }
            }
            assert!((hj.u[0].values()[i] - best.0).abs() < 1e-10);
            v_star[i] = best.1;
        }
        // u(T) = 0 makes the drift zero for the upwind scheme
        assert!(v_star.iter().all(|v| *v == 0.0));
        assert!(path.last().as_field().sup_distance(&p.m0.as_field()).unwrap() < 1e-10);
    }

    #[test]
    fn baseline_converges_and_best_response_is_stable() {
        let p = baseline(64, 2.0, 40);
        let cfg = FixedPointConfig {
            tol_fp: 1e-5,
            ..Default::default()
        };
        let sol = solve_mfg(&p, &cfg).unwrap();
        assert!(sol.final_residual() < 1e-5);
        assert_eq!(sol.path.first(), &p.m0);
        for m in sol.path.measures() {
            assert!((m.mass() - 1.0).abs() < 1e-12 && m.min_density() >= 0.0);
        }
        // residuals are Cesaro-decreasing
        let r = &sol.residual_history;
        let head: f64 = r[..5].iter().sum();
        let tail: f64 = r[r.len() - 5..].iter().sum();
        assert!(tail < head);
        // re-applying the best response moves the coupling by little
        let (_, again) = best_response(&p, &sol.path, &FirstOrder::default()).unwrap();
        let gap = sup_gap(&p.coupling_path(&again).unwrap(), &p.coupling_path(&sol.path).unwrap());
        assert!(gap < 1e-2, "{gap}");
    }

    #[test]
    fn fixed_damping_cycles_on_the_coupled_baseline() {
        // first-order best responses are steep; a constant weight does not settle
        let p = baseline(32, 2.0, 20);
        let cfg = FixedPointConfig {
            damping: Damping::Fixed(0.5),
            tol_fp: 1e-6,
            max_iter: 100,
            ..Default::default()
        };
        match solve_mfg(&p, &cfg) {
            Err(Error::NonConvergence { history, .. }) => assert_eq!(history.len(), 100),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn energy_pairing_cases() {
        let p = baseline(32, 1.0, 10);
        let sol = solve_mfg(&p, &FixedPointConfig::default()).unwrap();
        let e = energy_pairing(&sol, &GridMeasure::uniform(*p.m0.grid()), &p.coupling).unwrap();
        assert!(e >= -1e-8);
        let constant = MFGSolution {
            path: MeasurePath::constant(p.time_grid.times(), &p.m0).unwrap(),
            ..sol
        };
        assert_eq!(energy_pairing(&constant, &p.m0, &p.coupling).unwrap(), 0.0);
    }

    #[test]
    fn invalid_settings_rejected() {
        let p = baseline(16, 1.0, 5);
        let bad = FixedPointConfig {
            damping: Damping::Fixed(0.0),
            ..Default::default()
        };
        assert!(solve_mfg(&p, &bad).is_err());
        let bad = FixedPointConfig {
            tol_fp: 0.0,
            ..Default::default()
        };
        assert!(solve_mfg(&p, &bad).is_err());
    }
}
