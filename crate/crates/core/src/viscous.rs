//! Second-order system with diffusion `eps * Laplacian` in both equations, used to
//! cross-check the first-order solvers as `eps -> 0`.
//!
//! Time stepping is IMEX: the Hamiltonian / drift part is explicit (the same
//! semi-Lagrangian and upwind steps as the first-order solvers) and the diffusion
//! is implicit, `(I - eps dt Lap_h) u_new = u`, solved exactly in Fourier space.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hj::{solve_backward_with, HJSolution, TimeGrid, VelocityPolicy};
use crate::measures::{wasserstein1, GridMeasure, MeasurePath};
use crate::mfg::{solve_mfg, solve_mfg_with, Dynamics, FixedPointConfig, MFGProblem, MFGSolution};
use crate::model::HamiltonianSpec;
use crate::torus::{fft_nd, GridField, TorusGrid};
use crate::transport::{apply_split, SplitDrift, TransportScheme, MASS_CHECK_TOLERANCE};

/// Backward Euler step of the periodic heat equation with the 5-point (3-point in
/// 1D) Laplacian.
pub struct ImplicitHeat {
    grid: TorusGrid,
    /// `1 / (1 + eps dt mu_k)` for every Fourier mode, `mu_k >= 0`.
    multiplier: Vec<f64>,
    planner: RefCell<FftPlanner<f64>>,
}

impl ImplicitHeat {
    pub fn new(grid: TorusGrid, epsilon: f64, dt: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "epsilon",
                reason: format!("must be nonnegative, got {epsilon}"),
            });
        }
        let n = grid.n();
        let h = grid.h();
        let axis_symbol: Vec<f64> = (0..n)
            .map(|k| {
                let s = (std::f64::consts::PI * k as f64 / n as f64).sin();
                4.0 * s * s / (h * h)
            })
            .collect();
        let multiplier = (0..grid.len())
            .map(|i| {
                let [k1, k2] = grid.multi_index(i);
                let mu = axis_symbol[k1] + if grid.dim() == 2 { axis_symbol[k2] } else { 0.0 };
                1.0 / (1.0 + epsilon * dt * mu)
            })
            .collect();
        Ok(Self {
            grid,
            multiplier,
            planner: RefCell::new(FftPlanner::new()),
        })
    }

    pub fn apply(&self, values: &mut [f64]) {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut planner = self.planner.borrow_mut();
        fft_nd(&mut planner, &self.grid, &mut buf, false);
        for (c, m) in buf.iter_mut().zip(&self.multiplier) {
            *c *= m;
        }
        fft_nd(&mut planner, &self.grid, &mut buf, true);
        let scale = 1.0 / self.grid.len() as f64;
        for (v, c) in values.iter_mut().zip(&buf) {
            *v = c.re * scale;
        }
    }
}

/// Backward solve of `-u_t - eps Lap u + H(x, Du) = source`.
pub fn solve_viscous_hj(
    u_f: &GridField,
    source: &[GridField],
    spec: &HamiltonianSpec,
    time_grid: &TimeGrid,
    epsilon: f64,
    policy: &VelocityPolicy,
) -> Result<HJSolution> {
    let heat = ImplicitHeat::new(*spec.grid(), epsilon, time_grid.dt())?;
    solve_backward_with(u_f, source, spec, time_grid, policy, |u, _| {
        let mut v = u.into_values();
        heat.apply(&mut v);
        GridField::new(*spec.grid(), v)
    })
}

/// Forward solve of `m_t - eps Lap m - div(m b) = 0`: explicit upwind drift
/// (sub-stepped to its CFL limit) followed by implicit diffusion every step.
pub fn solve_viscous_fp(
    m0: &GridMeasure,
    drift: &[SplitDrift],
    time_grid: &TimeGrid,
    epsilon: f64,
    scheme: &TransportScheme,
) -> Result<MeasurePath> {
    let steps = time_grid.steps();
    if drift.len() != steps {
        return Err(Error::Precondition(format!(
            "drift has {} slices, time grid has {steps} steps",
            drift.len()
        )));
    }
    let g = *m0.grid();
    let dt = time_grid.dt();
    let heat = ImplicitHeat::new(g, epsilon, dt)?;
    let mut measures = Vec::with_capacity(steps + 1);
    measures.push(m0.clone());
    let mut d = m0.density().to_vec();
    let mut scratch = vec![0.0; d.len()];
    for (k, b) in drift.iter().enumerate() {
        g.check_same(b.grid())?;
        let adm = scheme.admissible_dt_for_speed(&g, b.sup_speed());
        let substeps = if dt <= adm { 1 } else { (dt / adm).ceil() as usize };
        let sdt = dt / substeps as f64;
        for s in 0..substeps {
            apply_split(&g, &mut d, &mut scratch, b, sdt, (k + s) % 2 == 1);
        }
        heat.apply(&mut d);
        // the heat kernel is positive; only rounding can dip below zero
        for v in d.iter_mut() {
            if *v < 1e-250 {
                *v = 0.0;
            }
        }
        let m = GridMeasure::from_raw(g, d.clone());
        m.check_mass(MASS_CHECK_TOLERANCE)
            .map_err(|e| e.at_time("viscous transport step", k))?;
        measures.push(m);
    }
    MeasurePath::new(time_grid.times(), measures)
}

/// Diffusive dynamics with coefficient `epsilon`, pluggable into the fixed-point loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viscous {
    pub epsilon: f64,
    pub scheme: TransportScheme,
    pub velocities: VelocityPolicy,
}

impl Viscous {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "epsilon",
                reason: format!("must be positive, got {epsilon}"),
            });
        }
        Ok(Self {
            epsilon,
            scheme: TransportScheme::default(),
            velocities: VelocityPolicy::default(),
        })
    }
}

impl Dynamics for Viscous {
    fn backward(&self, problem: &MFGProblem, source: &[GridField]) -> Result<HJSolution> {
        solve_viscous_hj(
            &problem.u_f,
            source,
            &problem.hamiltonian,
            &problem.time_grid,
            self.epsilon,
            &self.velocities,
        )
    }

    fn forward(&self, problem: &MFGProblem, hj: &HJSolution) -> Result<MeasurePath> {
        let drift: Vec<SplitDrift> = hj.u[1..]
            .iter()
            .map(|u| SplitDrift::from_value(u, &problem.hamiltonian))
            .collect();
        solve_viscous_fp(&problem.m0, &drift, &problem.time_grid, self.epsilon, &self.scheme)
    }
}

/// Largest `log(sup m(t) / sup m(0)) / t` along a path: the smallest `C` with
/// `sup m(t) <= sup m(0) e^{C t}`.
pub fn sup_density_growth(path: &MeasurePath) -> f64 {
    let s0 = path.first().sup_density();
    path.times()
        .iter()
        .zip(path.measures())
        .skip(1)
        .map(|(t, m)| (m.sup_density() / s0).ln() / t)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest `d_1(m(t_i), m(t_j)) / |t_i - t_j|^{1/2}` over all pairs of time nodes.
pub fn holder_constant(path: &MeasurePath) -> Result<f64> {
    let (times, ms) = (path.times(), path.measures());
    let mut worst = 0.0f64;
    for i in 0..ms.len() {
        for j in i + 1..ms.len() {
            worst = worst.max(wasserstein1(&ms[i], &ms[j])? / (times[j] - times[i]).sqrt());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViscousGap {
    pub epsilon: f64,
    /// `sup_x |u_eps(0, x) - u(0, x)|`.
    pub sup_gap_u: f64,
    /// `d_1(m_eps(T), m(T))`.
    pub d1_gap_m: f64,
    /// Smallest `C` with `sup m_eps(t) <= sup m0 e^{C t}` along the viscous path.
    pub density_growth: f64,
    /// Smallest `C` with `d_1(m_eps(s), m_eps(t)) <= C |t - s|^{1/2}`.
    pub holder_constant: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViscousSweep {
    pub reference: MFGSolution,
    pub rows: Vec<ViscousGap>,
}

impl ViscousSweep {
    /// Each gap is at most `slack` times the previous one.
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].sup_gap_u <= slack * w[0].sup_gap_u && w[1].d1_gap_m <= slack * w[0].d1_gap_m)
    }
}

/// Solves the first-order problem and the viscous one for every `eps` (which must
/// be decreasing) with the same fixed-point settings, and tabulates the gaps.
pub fn viscous_mfg_sweep(
    problem: &MFGProblem,
    eps_list: &[f64],
    cfg: &FixedPointConfig,
) -> Result<ViscousSweep> {
    if eps_list.is_empty() || eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParameter {
            name: "eps",
            reason: "list must be nonempty and strictly decreasing".into(),
        });
    }
    let reference = solve_mfg(problem, cfg)?;
    let mut rows = Vec::with_capacity(eps_list.len());
    for &epsilon in eps_list {
        let sol = solve_mfg_with(problem, cfg, &Viscous::new(epsilon)?)?;
        let sup_gap_u = sol.hj.u[0].sup_distance(&reference.hj.u[0])?;
        let d1_gap_m = wasserstein1(sol.path.last(), reference.path.last())?;
        log::info!("eps {epsilon}: sup gap {sup_gap_u:.3e}, d1 gap {d1_gap_m:.3e}");
        rows.push(ViscousGap {
            epsilon,
            sup_gap_u,
            d1_gap_m,
            density_growth: sup_density_growth(&sol.path),
            holder_constant: holder_constant(&sol.path)?,
            iterations: sol.iterations,
        });
    }
    Ok(ViscousSweep { reference, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfg::tests::baseline;
    use crate::model::FourierSum;
    use std::f64::consts::PI;

    fn grid(n: usize) -> TorusGrid {
        TorusGrid::new(1, n).unwrap()
    }

    #[test]
    fn constants_commute_with_the_step() {
        let g = grid(32);
        let spec = HamiltonianSpec::quadratic(GridField::zeros(g));
        let tg = TimeGrid::new(1.0, 20).unwrap();
        let source = vec![GridField::zeros(g); 21];
        let sol = solve_viscous_hj(&GridField::constant(g, 2.5), &source, &spec, &tg, 0.1, &VelocityPolicy::default()).unwrap();
        for u in &sol.u {
            assert!(u.sup_distance(&GridField::constant(g, 2.5)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn heat_step_decays_a_fourier_mode() {
        let g = grid(128);
        let (eps, dt, steps) = (0.1, 5e-4, 2000);
        let heat = ImplicitHeat::new(g, eps, dt).unwrap();
        let init = GridField::from_fn(g, |x| (2.0 * PI * x[0]).sin());
        let mut v = init.values().to_vec();
        for _ in 0..steps {
            heat.apply(&mut v);
        }
        let expected = (-4.0 * PI * PI * eps * dt * steps as f64).exp();
        let got = GridField::new(g, v).unwrap().max();
        assert!((got / expected - 1.0).abs() < 1e-2, "{got} vs {expected}");
    }

    #[test]
    fn heat_step_in_two_dimensions_keeps_the_mean() {
        let g = TorusGrid::new(2, 16).unwrap();
        let heat = ImplicitHeat::new(g, 0.05, 0.1).unwrap();
        let f = GridField::from_fn(g, |x| 1.0 + (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).sin());
        let mut v = f.values().to_vec();
        heat.apply(&mut v);
        let out = GridField::new(g, v).unwrap();
        assert!((out.mean() - f.mean()).abs() < 1e-14);
        assert!(out.max() < f.max());
    }

    #[test]
    fn diffusion_alone_flattens_the_density() {
        let g = grid(64);
        let m0 = GridMeasure::normalized(g, (0..64).map(|i| 1.0 + 0.5 * (2.0 * PI * g.coords(i)[0]).sin()).collect()).unwrap();
        let tg = TimeGrid::new(1.0, 50).unwrap();
        let zero = vec![SplitDrift::from_value(&GridField::zeros(g), &HamiltonianSpec::quadratic(GridField::zeros(g))); 50];
        let path = solve_viscous_fp(&m0, &zero, &tg, 1.0, &TransportScheme::default()).unwrap();
        let uniform = GridField::constant(g, 1.0);
        assert!(path.last().as_field().sup_distance(&uniform).unwrap() < 1e-3);
        let small = solve_viscous_fp(&m0, &zero, &tg, 0.01, &TransportScheme::default()).unwrap();
        let mut prev = f64::INFINITY;
        for m in small.measures() {
            assert!((m.mass() - 1.0).abs() < 1e-12);
            let gap = m.as_field().sup_distance(&uniform).unwrap();
            assert!(gap <= prev + 1e-15);
            prev = gap;
        }
    }

    #[test]
    fn drift_and_diffusion_conserve_mass_and_sign() {
        let g = grid(64);
        let spec = HamiltonianSpec::quadratic(FourierSum::cosine(1.0, 1).sample(g));
        let u = GridField::from_fn(g, |x| 0.3 * (2.0 * PI * x[0]).cos());
        let tg = TimeGrid::new(2.0, 40).unwrap();
        let drift = vec![SplitDrift::from_value(&u, &spec); 40];
        for eps in [1.0, 0.1, 0.001] {
            let path = solve_viscous_fp(&GridMeasure::point_like(g, 5), &drift, &tg, eps, &TransportScheme::default()).unwrap();
            for m in path.measures() {
                assert!((m.mass() - 1.0).abs() < 1e-12);
                assert!(m.min_density() >= 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_viscosity() {
        assert!(Viscous::new(0.0).is_err());
        assert!(Viscous::new(f64::NAN).is_err());
        assert!(ImplicitHeat::new(grid(8), -1.0, 0.1).is_err());
        let p = baseline(16, 1.0, 10);
        let cfg = FixedPointConfig::default();
        assert!(viscous_mfg_sweep(&p, &[0.05, 0.1], &cfg).is_err());
        assert!(viscous_mfg_sweep(&p, &[], &cfg).is_err());
    }

    #[test]
    fn tiny_viscosity_tracks_the_first_order_solution() {
        let p = baseline(64, 5.0, 100);
        let cfg = FixedPointConfig {
            tol_fp: 1e-4,
            max_iter: 5000,
            ..Default::default()
        };
        let sweep = viscous_mfg_sweep(&p, &[1e-4], &cfg).unwrap();
        let row = &sweep.rows[0];
        assert!(row.sup_gap_u <= 5e-2, "sup gap {}", row.sup_gap_u);
    }

    #[test]
    fn gaps_shrink_with_viscosity() {
        let p = baseline(32, 2.0, 40);
        let cfg = FixedPointConfig {
            tol_fp: 1e-4,
            max_iter: 5000,
            ..Default::default()
        };
        let sweep = viscous_mfg_sweep(&p, &[0.1, 0.05, 0.025], &cfg).unwrap();
        assert!(sweep.is_monotone(1.1), "{:?}", sweep.rows);
        for row in &sweep.rows {
            assert!(row.density_growth.is_finite());
            assert!(row.holder_constant > 0.0);
        }
    }
}
