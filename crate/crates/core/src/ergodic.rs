//! Stationary (ergodic) system: constant `lambda`, corrector `u_bar` with mean zero and
//! invariant measure `m_bar` such that `H(x, D u_bar) - F(x, m_bar) = lambda` and
//! `m_bar` is transported onto itself by the optimal feedback.
//!
//! `lambda` is minus the long-run growth rate of the value iteration, so with
//! `a = 1` it equals `-min(V + F)`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hj::{default_dv, default_v_max, lax_oleinik_step, upwind_gradient, TimeGrid, VelocityGrid};
use crate::measures::{pairing, GridMeasure, MeasurePath};
use crate::mfg::Damping;
use crate::model::{CouplingSpec, HamiltonianSpec};
use crate::torus::GridField;
use crate::transport::{solve_forward_split, SplitDrift, TransportScheme};

/// Starting measure of the outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErgodicInit {
    Uniform,
    PointLike([f64; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErgodicConfig {
    pub dt_erg: f64,
    pub tol_lambda: f64,
    /// Cesaro window `M`, in iterations.
    pub cesaro_window: usize,
    /// Cap on value iterations per weak-KAM solve.
    pub max_kam_iter: usize,
    /// Horizon of the flow whose second half is averaged into `m_bar`.
    pub t_avg: f64,
    pub damping: Damping,
    pub tol_outer: f64,
    pub max_outer: usize,
    pub init: ErgodicInit,
}

impl Default for ErgodicConfig {
    fn default() -> Self {
        Self {
            dt_erg: 0.05,
            tol_lambda: 1e-6,
            cesaro_window: 20,
            max_kam_iter: 100_000,
            t_avg: 20.0,
            damping: Damping::FictitiousPlay,
            tol_outer: 1e-3,
            max_outer: 5000,
            init: ErgodicInit::Uniform,
        }
    }
}

impl ErgodicConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt_erg", self.dt_erg),
            ("tol_lambda", self.tol_lambda),
            ("t_avg", self.t_avg),
            ("tol_outer", self.tol_outer),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be positive, got {v}"),
                });
            }
        }
        if self.cesaro_window == 0 || self.max_kam_iter == 0 || self.max_outer == 0 {
            return Err(Error::InvalidParameter {
                name: "cesaro_window",
                reason: "window and iteration caps must be positive".into(),
            });
        }
        self.damping.validate()?;
        if self.t_avg < 2.0 * self.dt_erg {
            return Err(Error::InvalidParameter {
                name: "t_avg",
                reason: "must cover at least two steps".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakKamOutput {
    pub lambda: f64,
    pub u_bar: GridField,
    /// Cesaro average of the per-step growth rate after every iteration.
    pub lambda_history: Vec<f64>,
    pub iterations: usize,
}

/// Normalised value iteration for the cell problem `H(x, Du) - f = lambda`.
///
/// Each step `w <- T_dt w` moves the mean by about `-lambda dt`; the growth rate is
/// Cesaro-averaged over the last `M` steps and `w` is recentred to mean zero.
/// Stops once the averaged rate moved by less than `tol_lambda` over `M` steps and
/// the window average of `w` drifts by at most `tol_lambda` per unit time (or by
/// `1e-2 h` per window, whichever is larger).
pub fn weak_kam_iterate(
    f: &GridField,
    spec: &HamiltonianSpec,
    cfg: &ErgodicConfig,
) -> Result<WeakKamOutput> {
    weak_kam_from(f, spec, cfg, None)
}

/// [`weak_kam_iterate`] started from `start` instead of zero.
pub fn weak_kam_from(
    f: &GridField,
    spec: &HamiltonianSpec,
    cfg: &ErgodicConfig,
    start: Option<&GridField>,
) -> Result<WeakKamOutput> {
    cfg.validate()?;
    let g = *spec.grid();
    g.check_same(f.grid())?;
    let dt = cfg.dt_erg;
    let m = cfg.cesaro_window;
    let mut w = match start {
        Some(s) => {
            g.check_same(s.grid())?;
            s.add_constant(-s.mean())
        }
        None => GridField::zeros(g),
    };
    let v_max = default_v_max(spec, &w, f.sup_norm());
    let mut velocities = VelocityGrid::new(g.dim(), v_max, default_dv(&g, dt))?;

    let mut rates: VecDeque<f64> = VecDeque::with_capacity(m + 1);
    let mut iterates: VecDeque<GridField> = VecDeque::with_capacity(m + 1);
    let mut history = Vec::new();
    let mut rate_sum = 0.0;
    let mut window_sum = vec![0.0; g.len()];
    let mut previous_avg: Option<GridField> = None;
    // discrete iterates may settle on a tiny cycle; a drift of 1e-3 h moves the
    // difference quotients by 1e-2
    let u_tolerance = (cfg.tol_lambda * m as f64 * dt).max(1e-2 * g.h());
    for k in 1..=cfg.max_kam_iter {
        let out = loop {
            match lax_oleinik_step(&w, f, spec, dt, &velocities) {
                Ok(out) => break out,
                Err(Error::VelocityBoxExhausted { .. }) if velocities.v_max() < 1e3 * v_max => {
                    velocities = velocities.enlarged();
                }
                Err(e) => return Err(e),
            }
        };
        let mean_new = out.u.mean();
        let rate = -(mean_new - w.mean()) / dt;
        w = out.u.add_constant(-mean_new);

        rates.push_back(rate);
        rate_sum += rate;
        iterates.push_back(w.clone());
        for (a, v) in window_sum.iter_mut().zip(w.values()) {
            *a += v;
        }
        if rates.len() > m {
            rate_sum -= rates.pop_front().unwrap_or(0.0);
            if let Some(old) = iterates.pop_front() {
                for (a, v) in window_sum.iter_mut().zip(old.values()) {
                    *a -= v;
                }
            }
        }
        history.push(rate_sum / rates.len() as f64);

        if k % m == 0 {
            let avg = GridField::from_raw(
                g,
                window_sum.iter().map(|a| a / iterates.len() as f64).collect(),
            );
            let settled = k >= 2 * m
                && (history[k - 1] - history[k - 1 - m]).abs() < cfg.tol_lambda
                && previous_avg
                    .as_ref()
                    .map(|p: &GridField| p.sup_distance(&avg).unwrap_or(f64::INFINITY))
                    .unwrap_or(f64::INFINITY)
                    <= u_tolerance;
            if settled {
                let u_bar = avg.add_constant(-avg.mean());
                return Ok(WeakKamOutput {
                    lambda: history[k - 1],
                    u_bar,
                    lambda_history: history,
                    iterations: k,
                });
            }
            previous_avg = Some(avg);
        }
    }
    Err(Error::NonConvergence {
        what: "weak KAM value iteration",
        iterations: cfg.max_kam_iter,
        last: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// Invariant measure of the feedback flow generated by `u_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicMeasure {
    pub m_bar: GridMeasure,
    pub stationarity_residual: f64,
}

/// Transports `start` (uniform when `None`) along `-D_p H(x, D u_bar)` up to `t_avg`
/// and averages the second half of the path.
pub fn ergodic_measure(
    u_bar: &GridField,
    spec: &HamiltonianSpec,
    cfg: &ErgodicConfig,
    start: Option<&GridMeasure>,
) -> Result<ErgodicMeasure> {
    cfg.validate()?;
    let g = *spec.grid();
    g.check_same(u_bar.grid())?;
    let m0 = match start {
        Some(m) => m.clone(),
        None => GridMeasure::uniform(g),
    };
    let tg = TimeGrid::with_dt(cfg.t_avg, cfg.dt_erg)?;
    let drift = SplitDrift::from_value(u_bar, spec);
    let path = solve_forward_split(
        &m0,
        &vec![drift; tg.steps()],
        &tg,
        &TransportScheme::default(),
    )?;
    let m_bar = time_average_tail(&path, tg.horizon())?;
    let stationarity_residual = stationarity_residual(u_bar, &m_bar, spec)?;
    Ok(ErgodicMeasure {
        m_bar,
        stationarity_residual,
    })
}

fn time_average_tail(path: &MeasurePath, horizon: f64) -> Result<GridMeasure> {
    path.time_average(0.5 * horizon, horizon)
}

/// Wave vectors of the test functions `cos(2 pi k.x)`, `sin(2 pi k.x)`:
/// `|k_i| <= 4`, `k != 0`, one of each `+-k` pair.
fn test_waves(dim: usize) -> Vec<([f64; 2], bool)> {
    let second: Vec<i32> = if dim == 1 { vec![0] } else { (-4..=4).collect() };
    let mut out = Vec::new();
    for k1 in -4i32..=4 {
        for &k2 in &second {
            if (k1, k2) <= (0, 0) {
                continue;
            }
            for is_sin in [false, true] {
                out.push(([k1 as f64, k2 as f64], is_sin));
            }
        }
    }
    out
}

/// `max_phi |<D_p H(x, D_num u_bar) . D phi, m_bar>|` over the fixed test dictionary.
pub fn stationarity_residual(
    u_bar: &GridField,
    m_bar: &GridMeasure,
    spec: &HamiltonianSpec,
) -> Result<f64> {
    let g = *spec.grid();
    g.check_same(m_bar.grid())?;
    let b = SplitDrift::from_value(u_bar, spec).net();
    let mut worst = 0.0f64;
    for (k, is_sin) in test_waves(g.dim()) {
        // D phi in closed form
        let field: Vec<f64> = (0..g.len())
            .map(|i| {
                let x = g.coords(i);
                let arg = 2.0 * std::f64::consts::PI * (k[0] * x[0] + k[1] * x[1]);
                let dphi_scale = 2.0 * std::f64::consts::PI * if is_sin { arg.cos() } else { -arg.sin() };
                let bi = b.at(i);
                -(bi[0] * k[0] + bi[1] * k[1]) * dphi_scale
            })
            .collect();
        let r = pairing(&GridField::from_raw(g, field), m_bar)?;
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErgodicDiagnostics {
    /// `max |H(x, D_num u_bar) - F(x, m_bar) - lambda|` over nodes with density >= 1e-3.
    pub hj_residual_on_support: f64,
    pub stationarity_residual: f64,
    pub lambda_history: Vec<f64>,
    /// `||F(., m^{j+1}) - F(., m^j)||` per outer iteration.
    pub outer_residual_history: Vec<f64>,
    pub outer_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicSolution {
    pub lambda: f64,
    pub u_bar: GridField,
    pub m_bar: GridMeasure,
    pub coupling_field: GridField,
    pub diagnostics: ErgodicDiagnostics,
}

/// Outer damped iteration on `m_bar`, followed by a final weak-KAM solve against
/// the converged coupling field.
pub fn solve_ergodic(
    spec: &HamiltonianSpec,
    coupling: &CouplingSpec,
    cfg: &ErgodicConfig,
) -> Result<ErgodicSolution> {
    cfg.validate()?;
    let g = *spec.grid();
    g.check_same(coupling.grid())?;
    let mut m = match cfg.init {
        ErgodicInit::Uniform => GridMeasure::uniform(g),
        ErgodicInit::PointLike(x) => GridMeasure::point_like_at(g, x),
    };
    let mut field = coupling.eval(&m)?;
    let mut residuals = Vec::new();
    let mut warm: Option<GridField> = None;
    for j in 1..=cfg.max_outer {
        let kam = weak_kam_from(&field, spec, cfg, warm.as_ref())?;
        let response = ergodic_measure(&kam.u_bar, spec, cfg, None)?;
        warm = Some(kam.u_bar);
        if coupling.is_decoupled() {
            // the coupling ignores m, so the response is already a fixed point
            return finish(spec, cfg, response.m_bar, field, vec![0.0], warm);
        }
        m = m.mix(&response.m_bar, cfg.damping.weight(j))?;
        let new_field = coupling.eval(&m)?;
        let r = new_field.sup_distance(&field)?;
        residuals.push(r);
        field = new_field;
        log::debug!("ergodic outer iteration {j}: residual {r:.3e}");
        if r < cfg.tol_outer {
            return finish(spec, cfg, m, field, residuals, warm);
        }
    }
    Err(Error::NonConvergence {
        what: "ergodic outer iteration",
        iterations: cfg.max_outer,
        last: residuals.last().copied().unwrap_or(f64::NAN),
        history: residuals,
    })
}

fn finish(
    spec: &HamiltonianSpec,
    cfg: &ErgodicConfig,
    m_bar: GridMeasure,
    field: GridField,
    residuals: Vec<f64>,
    warm: Option<GridField>,
) -> Result<ErgodicSolution> {
    let kam = weak_kam_from(&field, spec, cfg, warm.as_ref())?;
    let hj_residual_on_support = hj_residual_on_support(kam.lambda, &kam.u_bar, &m_bar, &field, spec);
    let stationarity_residual = stationarity_residual(&kam.u_bar, &m_bar, spec)?;
    Ok(ErgodicSolution {
        lambda: kam.lambda,
        u_bar: kam.u_bar,
        m_bar,
        coupling_field: field,
        diagnostics: ErgodicDiagnostics {
            hj_residual_on_support,
            stationarity_residual,
            lambda_history: kam.lambda_history,
            outer_iterations: residuals.len(),
            outer_residual_history: residuals,
        },
    })
}

/// `max |H(x, D_num u) - f - lambda|` over nodes with density at least `1e-3`.
pub fn hj_residual_on_support(
    lambda: f64,
    u_bar: &GridField,
    m_bar: &GridMeasure,
    f: &GridField,
    spec: &HamiltonianSpec,
) -> f64 {
    let p = upwind_gradient(u_bar);
    (0..u_bar.grid().len())
        .filter(|&i| m_bar.density()[i] >= 1e-3)
        .map(|i| (spec.hamiltonian(i, p.at(i)) - f.values()[i] - lambda).abs())
        .fold(0.0, f64::max)
}

/// Closed-form ergodic constant for `a = 1`: minus the minimum of `V + f`, and the
/// nodes attaining that minimum (within `1e-9`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadraticOracle {
    pub lambda: f64,
    pub argmin_cells: Vec<usize>,
}

pub fn lambda_quadratic_oracle(potential: &GridField, f: &GridField) -> Result<QuadraticOracle> {
    let total = potential.zip_map(f, |a, b| a + b)?;
    let min = total.min();
    let argmin_cells = total
        .values()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v <= min + 1e-9)
        .map(|(i, _)| i)
        .collect();
    Ok(QuadraticOracle {
        lambda: -min,
        argmin_cells,
    })
}
