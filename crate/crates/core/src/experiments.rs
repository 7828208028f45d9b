//! Long-time behaviour of the finite-horizon system: solve on `[0, T]` for a list of
//! horizons, rescale time to `s = t / T`, and measure the distance to the ergodic
//! solution as `T` grows.

use rayon::prelude::*;
use serde::Serialize;

use crate::ergodic::ErgodicSolution;
use crate::error::{Error, Result};
use crate::hj::TimeGrid;
use crate::measures::GridMeasure;
use crate::mfg::{energy_pairing, solve_mfg, trapezoid, FixedPointConfig, MFGProblem, MFGSolution};
use crate::model::CouplingSpec;
use crate::torus::GridField;

/// A solution re-indexed by `s = t / T` on the native time nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Rescaled {
    pub s: Vec<f64>,
    pub v: Vec<GridField>,
    pub nu: Vec<GridMeasure>,
}

pub fn rescale(sol: &MFGSolution) -> Rescaled {
    let horizon = sol.hj.time_grid.horizon();
    Rescaled {
        s: sol.path.times().iter().map(|t| t / horizon).collect(),
        v: sol.hj.u.clone(),
        nu: sol.path.measures().to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LongTimeErrors {
    /// `max_s || v(s) / T + lambda (1 - s) ||_inf`.
    pub e_u: f64,
    /// `int_0^1 || F(., nu(s)) - F(., m_bar) ||_inf ds`.
    pub e_f: f64,
    /// `int_0^T <F(m(t)) - F(m_bar), m(t) - m_bar> dt`.
    pub energy: f64,
}

/// Distances of a finite-horizon solution from the ergodic one.
///
/// The value grows like `-lambda (T - t)` (`lambda` is minus the growth rate), so
/// the value gap compares `v / T` with `-lambda (1 - s)`.
pub fn long_time_errors(
    sol: &MFGSolution,
    erg: &ErgodicSolution,
    coupling: &CouplingSpec,
) -> Result<LongTimeErrors> {
    let horizon = sol.hj.time_grid.horizon();
    let r = rescale(sol);
    let mut e_u = 0.0f64;
    for (s, v) in r.s.iter().zip(&r.v) {
        let shift = erg.lambda * (1.0 - s);
        let gap = v
            .values()
            .iter()
            .map(|x| (x / horizon + shift).abs())
            .fold(0.0, f64::max);
        e_u = e_u.max(gap);
    }
    let f_bar = coupling.eval(&erg.m_bar)?;
    let gaps = r
        .nu
        .iter()
        .map(|m| coupling.eval(m)?.sup_distance(&f_bar))
        .collect::<Result<Vec<_>>>()?;
    Ok(LongTimeErrors {
        e_u,
        e_f: trapezoid(&r.s, &gaps),
        energy: energy_pairing(sol, &erg.m_bar, coupling)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub horizon: f64,
    pub e_u: f64,
    pub e_f: f64,
    pub energy: f64,
    pub lip_x: f64,
    pub lip_t: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Verdicts {
    /// Fitted slope of `log e_u` against `log T` is at most `-0.4` (or `e_u` is
    /// identically zero).
    pub slope_u: bool,
    /// `max_T e_u sqrt(T) <= 2 min_T e_u sqrt(T)`.
    pub bounded_u: bool,
    pub slope_f: bool,
    pub bounded_f: bool,
    /// Every energy is at least `-1e-8` and the largest is at most twice the median.
    pub energy_bounded: bool,
    /// `(max - min) / max` of `lip_x` is below `0.2`.
    pub lipschitz_uniform: bool,
}

impl Verdicts {
    pub fn all(&self) -> bool {
        self.slope_u
            && self.bounded_u
            && self.slope_f
            && self.bounded_f
            && self.energy_bounded
            && self.lipschitz_uniform
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    pub slope_u: f64,
    pub slope_f: f64,
    pub lip_x_spread: f64,
    pub verdicts: Verdicts,
}

pub const SLOPE_THRESHOLD: f64 = -0.4;
pub const LIPSCHITZ_SPREAD: f64 = 0.2;

impl RateReport {
    pub fn from_rows(rows: Vec<RateRow>) -> Result<Self> {
        check_horizons(&rows.iter().map(|r| r.horizon).collect::<Vec<_>>())?;
        let horizons: Vec<f64> = rows.iter().map(|r| r.horizon).collect();
        let e_u: Vec<f64> = rows.iter().map(|r| r.e_u).collect();
        let e_f: Vec<f64> = rows.iter().map(|r| r.e_f).collect();
        let slope_u = log_log_slope(&horizons, &e_u);
        let slope_f = log_log_slope(&horizons, &e_f);

        let energies: Vec<f64> = rows.iter().map(|r| r.energy).collect();
        let energy_bounded = energies.iter().all(|&e| e >= -1e-8)
            && max(&energies) <= 2.0 * median(&energies);
        let lips: Vec<f64> = rows.iter().map(|r| r.lip_x).collect();
        let lip_x_spread = (max(&lips) - min(&lips)) / max(&lips);

        let verdicts = Verdicts {
            slope_u: decays(slope_u, &e_u),
            bounded_u: rate_constant_bounded(&horizons, &e_u),
            slope_f: decays(slope_f, &e_f),
            bounded_f: rate_constant_bounded(&horizons, &e_f),
            energy_bounded,
            lipschitz_uniform: lip_x_spread < LIPSCHITZ_SPREAD,
        };
        Ok(Self {
            rows,
            slope_u,
            slope_f,
            lip_x_spread,
            verdicts,
        })
    }
}

fn check_horizons(horizons: &[f64]) -> Result<()> {
    if horizons.len() < 3 {
        return Err(Error::Precondition(format!(
            "rate fitting needs at least 3 horizons, got {}",
            horizons.len()
        )));
    }
    if horizons.windows(2).any(|w| w[1] <= w[0]) || horizons[0] <= 0.0 {
        return Err(Error::Precondition("horizons must be positive and strictly increasing".into()));
    }
    Ok(())
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Least-squares slope of `log y` against `log x`. Nonpositive `y` gives `-inf`
/// (the error vanished) unless every `y` does, which gives `NaN`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    if y.iter().any(|&v| v <= 0.0) {
        return if y.iter().all(|&v| v <= 0.0) { f64::NAN } else { f64::NEG_INFINITY };
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// An error that vanishes at every horizon (a decoupled run has `e_F = 0`) counts
/// as decaying.
fn decays(slope: f64, e: &[f64]) -> bool {
    slope <= SLOPE_THRESHOLD || e.iter().all(|&v| v == 0.0)
}

fn rate_constant_bounded(horizons: &[f64], e: &[f64]) -> bool {
    let scaled: Vec<f64> = horizons.iter().zip(e).map(|(t, e)| e * t.sqrt()).collect();
    max(&scaled) <= 2.0 * min(&scaled)
}

/// A sweep that stopped at `horizon`; `completed` holds the rows finished before.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("sweep failed at T = {horizon}: {source}")]
pub struct SweepFailure {
    pub horizon: f64,
    pub completed: Vec<RateRow>,
    #[source]
    pub source: Error,
}

/// Solves `problem` on every horizon with fixed step `dt` and compares each
/// solution with `erg`. Horizons are solved in parallel.
pub fn run_sweep(
    problem: &MFGProblem,
    horizons: &[f64],
    dt: f64,
    erg: &ErgodicSolution,
    cfg: &FixedPointConfig,
) -> std::result::Result<RateReport, SweepFailure> {
    let fail = |horizon, completed, source| SweepFailure {
        horizon,
        completed,
        source,
    };
    check_horizons(horizons).map_err(|e| fail(f64::NAN, Vec::new(), e))?;
    let outcomes: Vec<Result<RateRow>> = horizons
        .par_iter()
        .map(|&horizon| sweep_row(problem, horizon, dt, erg, cfg))
        .collect();
    let mut rows = Vec::with_capacity(horizons.len());
    for (&horizon, outcome) in horizons.iter().zip(outcomes) {
        match outcome {
            Ok(row) => rows.push(row),
            Err(e) => return Err(fail(horizon, rows, e)),
        }
    }
    RateReport::from_rows(rows).map_err(|e| fail(f64::NAN, Vec::new(), e))
}

fn sweep_row(
    problem: &MFGProblem,
    horizon: f64,
    dt: f64,
    erg: &ErgodicSolution,
    cfg: &FixedPointConfig,
) -> Result<RateRow> {
    let p = problem.with_time_grid(TimeGrid::with_dt(horizon, dt)?);
    let sol = solve_mfg(&p, cfg)?;
    let errors = long_time_errors(&sol, erg, &p.coupling)?;
    let lip = sol.hj.lipschitz_report();
    log::info!(
        "T = {horizon}: e_u {:.3e}, e_F {:.3e}, energy {:.3e}, {} iterations",
        errors.e_u,
        errors.e_f,
        errors.energy,
        sol.iterations
    );
    Ok(RateRow {
        horizon,
        e_u: errors.e_u,
        e_f: errors.e_f,
        energy: errors.energy,
        lip_x: lip.lip_x,
        lip_t: lip.lip_t,
        iterations: sol.iterations,
    })
}
