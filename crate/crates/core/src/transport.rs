//! Forward solver for the continuity equation `dm/dt + div(m b) = 0` with drift
//! `b = -D_p H(x, Du)`.
//!
//! Two discretisations are provided. `UpwindFv` is a donor-cell finite volume
//! scheme (dimension split in 2D) with fluxes `max(b_i, 0) m_i + min(b_{i+1}, 0) m_{i+1}`.
//! `SlPushforward` moves each node's mass to `x_i + dt b_i` and deposits it with
//! multilinear weights. Both conserve mass exactly and keep densities nonnegative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hj::{HJSolution, TimeGrid};
use crate::measures::{wasserstein1, GridMeasure, MeasurePath};
use crate::model::HamiltonianSpec;
use crate::torus::{wrap, GridField, TorusGrid, VectorField};

/// Mass drift tolerated by forward solves before they report an error.
pub const MASS_CHECK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    UpwindFv,
    SlPushforward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportScheme {
    pub mode: TransportMode,
    pub cfl_safety: f64,
}

impl Default for TransportScheme {
    fn default() -> Self {
        Self {
            mode: TransportMode::UpwindFv,
            cfl_safety: 0.9,
        }
    }
}

impl TransportScheme {
    pub fn new(mode: TransportMode, cfl_safety: f64) -> Result<Self> {
        if !(cfl_safety > 0.0 && cfl_safety <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "cfl_safety",
                reason: format!("must be in (0, 1], got {cfl_safety}"),
            });
        }
        Ok(Self { mode, cfl_safety })
    }

    pub fn sl_pushforward() -> Self {
        Self {
            mode: TransportMode::SlPushforward,
            cfl_safety: 0.9,
        }
    }

    /// Largest step the scheme accepts for this drift.
    pub fn admissible_dt(&self, grid: &TorusGrid, b: &VectorField) -> f64 {
        self.admissible_dt_for_speed(grid, b.sup_component())
    }

    pub(crate) fn admissible_dt_for_speed(&self, grid: &TorusGrid, speed: f64) -> f64 {
        match self.mode {
            TransportMode::SlPushforward => f64::INFINITY,
            TransportMode::UpwindFv if speed == 0.0 => f64::INFINITY,
            TransportMode::UpwindFv => self.cfl_safety * grid.h() / speed,
        }
    }
}

/// Per-axis outflow speeds of every node: `forward` towards `+e_axis`, `backward`
/// towards `-e_axis`, both nonnegative.
///
/// A nodal velocity `b` has only one of the two nonzero. Drifts built from a value
/// function split the outflow at concave kinks of `u`, where both one-sided
/// differences point downhill; this keeps the transported mass continuous in `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDrift {
    grid: TorusGrid,
    forward: Vec<Vec<f64>>,
    backward: Vec<Vec<f64>>,
}

impl SplitDrift {
    pub fn from_field(b: &VectorField) -> Self {
        let g = *b.grid();
        let part = |sign: f64| -> Vec<Vec<f64>> {
            (0..g.dim())
                .map(|axis| b.component(axis).iter().map(|v| (sign * v).max(0.0)).collect())
                .collect()
        };
        Self {
            grid: g,
            forward: part(1.0),
            backward: part(-1.0),
        }
    }

    /// Outflow `a max(D^- u, 0)` backwards and `a max(-D^+ u, 0)` forwards on every axis.
    pub fn from_value(u: &GridField, spec: &HamiltonianSpec) -> Self {
        let g = *u.grid();
        let h = g.h();
        let v = u.values();
        let a = spec.stiffness().values();
        let mut forward = Vec::with_capacity(g.dim());
        let mut backward = Vec::with_capacity(g.dim());
        for axis in 0..g.dim() {
            forward.push(
                (0..g.len())
                    .map(|i| a[i] * ((v[i] - v[g.shift(i, axis, 1)]) / h).max(0.0))
                    .collect(),
            );
            backward.push(
                (0..g.len())
                    .map(|i| a[i] * ((v[i] - v[g.shift(i, axis, -1)]) / h).max(0.0))
                    .collect(),
            );
        }
        Self {
            grid: g,
            forward,
            backward,
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    /// Largest total outflow speed along one axis.
    pub fn sup_speed(&self) -> f64 {
        self.forward
            .iter()
            .zip(&self.backward)
            .flat_map(|(f, b)| f.iter().zip(b).map(|(x, y)| x + y))
            .fold(0.0, f64::max)
    }

    /// Net velocity `forward - backward`.
    pub fn net(&self) -> VectorField {
        VectorField::from_raw(
            self.grid,
            self.forward
                .iter()
                .zip(&self.backward)
                .map(|(f, b)| f.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
        )
    }
}

/// Advances `m` by one step of length `dt` under the frozen drift `b`.
pub fn transport_step(
    m: &GridMeasure,
    b: &VectorField,
    dt: f64,
    scheme: &TransportScheme,
) -> Result<GridMeasure> {
    transport_step_ordered(m, b, dt, scheme, false)
}

/// Upwind step with split outflow speeds; the scheme's mode is ignored.
pub fn transport_step_split(
    m: &GridMeasure,
    drift: &SplitDrift,
    dt: f64,
    scheme: &TransportScheme,
) -> Result<GridMeasure> {
    let scheme = TransportScheme {
        mode: TransportMode::UpwindFv,
        ..*scheme
    };
    split_step(m, drift, dt, &scheme, false)
}

fn split_step(
    m: &GridMeasure,
    drift: &SplitDrift,
    dt: f64,
    scheme: &TransportScheme,
    y_first: bool,
) -> Result<GridMeasure> {
    let g = *m.grid();
    g.check_same(drift.grid())?;
    check_cfl(scheme, &g, drift, dt)?;
    let mut d = m.density().to_vec();
    let mut scratch = vec![0.0; d.len()];
    apply_split(&g, &mut d, &mut scratch, drift, dt, y_first);
    let out = GridMeasure::from_raw(g, d);
    out.check_mass(MASS_CHECK_TOLERANCE)?;
    Ok(out)
}

fn check_cfl(scheme: &TransportScheme, g: &TorusGrid, drift: &SplitDrift, dt: f64) -> Result<()> {
    let admissible = scheme.admissible_dt_for_speed(g, drift.sup_speed());
    if dt > admissible * (1.0 + 1e-12) {
        return Err(Error::CflViolation {
            dt,
            admissible_dt: admissible,
        });
    }
    Ok(())
}

/// One split upwind step applied to `d` in place (`scratch` is workspace).
pub(crate) fn apply_split(
    g: &TorusGrid,
    d: &mut Vec<f64>,
    scratch: &mut Vec<f64>,
    drift: &SplitDrift,
    dt: f64,
    y_first: bool,
) {
    let axes: &[usize] = match (g.dim(), y_first) {
        (1, _) => &[0],
        (_, false) => &[0, 1],
        (_, true) => &[1, 0],
    };
    for &axis in axes {
        upwind_pass(g, d, scratch, &drift.forward[axis], &drift.backward[axis], axis, dt);
        std::mem::swap(d, scratch);
    }
}

fn transport_step_ordered(
    m: &GridMeasure,
    b: &VectorField,
    dt: f64,
    scheme: &TransportScheme,
    y_first: bool,
) -> Result<GridMeasure> {
    let g = *m.grid();
    g.check_same(b.grid())?;
    let density = match scheme.mode {
        TransportMode::UpwindFv => {
            return split_step(m, &SplitDrift::from_field(b), dt, scheme, y_first);
        }
        TransportMode::SlPushforward => pushforward(&g, m.density(), b, dt),
    };
    let out = GridMeasure::from_raw(g, density);
    out.check_mass(MASS_CHECK_TOLERANCE)?;
    Ok(out)
}

fn upwind_pass(
    g: &TorusGrid,
    d: &[f64],
    out: &mut [f64],
    forward: &[f64],
    backward: &[f64],
    axis: usize,
    dt: f64,
) {
    let n = g.n();
    let lam = dt / g.h();
    // neighbours along `axis`: stride 1 within a row, stride n across rows
    let stride = if axis == 0 { 1 } else { n };
    let lines = g.len() / n;
    // gather form: each cell keeps what stays and receives from both neighbours
    for line in 0..lines {
        let base = if axis == 0 { line * n } else { line };
        let at = |j: usize| base + (j % n) * stride;
        for j in 0..n {
            let i = at(j);
            let prev = at(j + n - 1);
            let next = at(j + 1);
            out[i] = d[i] * (1.0 - lam * (forward[i] + backward[i]))
                + lam * (forward[prev] * d[prev] + backward[next] * d[next]);
        }
    }
    // rounding can leave -1e-17 where a cell emptied completely; densities that
    // decay geometrically would otherwise end up subnormal, which is very slow
    for v in out.iter_mut() {
        if *v < 1e-250 {
            *v = 0.0;
        }
    }
}

fn pushforward(g: &TorusGrid, d: &[f64], b: &VectorField, dt: f64) -> Vec<f64> {
    let n = g.n();
    let nf = n as f64;
    let mut out = vec![0.0; g.len()];
    for i in 0..g.len() {
        if d[i] == 0.0 {
            continue;
        }
        let x = g.coords(i);
        let v = b.at(i);
        let sx = wrap(x[0] + dt * v[0]) * nf;
        let fx = sx.floor();
        let tx = sx - fx;
        let i0 = (fx as usize) % n;
        let i1 = (i0 + 1) % n;
        if g.dim() == 1 {
            out[i0] += (1.0 - tx) * d[i];
            out[i1] += tx * d[i];
        } else {
            let sy = wrap(x[1] + dt * v[1]) * nf;
            let fy = sy.floor();
            let ty = sy - fy;
            let j0 = (fy as usize) % n;
            let j1 = (j0 + 1) % n;
            out[i0 + n * j0] += (1.0 - tx) * (1.0 - ty) * d[i];
            out[i1 + n * j0] += tx * (1.0 - ty) * d[i];
            out[i0 + n * j1] += (1.0 - tx) * ty * d[i];
            out[i1 + n * j1] += tx * ty * d[i];
        }
    }
    out
}

/// Forward solve over the time grid; `drift[k]` acts on `[t_k, t_{k+1}]`.
///
/// Upwind steps that would violate the CFL bound are split into equal sub-steps.
pub fn solve_forward(
    m0: &GridMeasure,
    drift: &[VectorField],
    time_grid: &TimeGrid,
    scheme: &TransportScheme,
) -> Result<MeasurePath> {
    march(m0, drift.len(), time_grid, |k| {
        let speed = drift[k].sup_component();
        let adm = scheme.admissible_dt_for_speed(m0.grid(), speed);
        (adm, Box::new(move |m: &GridMeasure, sdt, y_first| {
            transport_step_ordered(m, &drift[k], sdt, scheme, y_first)
        }))
    })
}

/// [`solve_forward`] for upwind transport with split outflow speeds.
pub fn solve_forward_split(
    m0: &GridMeasure,
    drift: &[SplitDrift],
    time_grid: &TimeGrid,
    scheme: &TransportScheme,
) -> Result<MeasurePath> {
    let scheme = TransportScheme {
        mode: TransportMode::UpwindFv,
        ..*scheme
    };
    let steps = time_grid.steps();
    if drift.len() != steps {
        return Err(Error::Precondition(format!(
            "drift has {} slices, time grid has {steps} steps",
            drift.len()
        )));
    }
    let g = *m0.grid();
    let dt = time_grid.dt();
    let mut measures = Vec::with_capacity(steps + 1);
    measures.push(m0.clone());
    let mut d = m0.density().to_vec();
    let mut scratch = vec![0.0; d.len()];
    for (k, b) in drift.iter().enumerate() {
        g.check_same(b.grid())?;
        let adm = scheme.admissible_dt_for_speed(&g, b.sup_speed());
        let substeps = if dt <= adm { 1 } else { (dt / adm).ceil() as usize };
        if substeps > 1 {
            log::debug!("transport step {k}: {substeps} CFL sub-steps");
        }
        let sdt = dt / substeps as f64;
        for s in 0..substeps {
            apply_split(&g, &mut d, &mut scratch, b, sdt, (k + s) % 2 == 1);
        }
        let m = GridMeasure::from_raw(g, d.clone());
        m.check_mass(MASS_CHECK_TOLERANCE)
            .map_err(|e| e.at_time("transport step", k))?;
        measures.push(m);
    }
    MeasurePath::new(time_grid.times(), measures)
}

type Stepper<'a> = Box<dyn Fn(&GridMeasure, f64, bool) -> Result<GridMeasure> + 'a>;

fn march<'a>(
    m0: &GridMeasure,
    slices: usize,
    time_grid: &TimeGrid,
    stepper: impl Fn(usize) -> (f64, Stepper<'a>),
) -> Result<MeasurePath> {
    let steps = time_grid.steps();
    if slices != steps {
        return Err(Error::Precondition(format!(
            "drift has {slices} slices, time grid has {steps} steps"
        )));
    }
    let dt = time_grid.dt();
    let mut measures = Vec::with_capacity(steps + 1);
    measures.push(m0.clone());
    let mut current = m0.clone();
    for k in 0..steps {
        let (adm, step) = stepper(k);
        let substeps = if dt <= adm { 1 } else { (dt / adm).ceil() as usize };
        if substeps > 1 {
            log::debug!("transport step {k}: {substeps} CFL sub-steps");
        }
        let sdt = dt / substeps as f64;
        for s in 0..substeps {
            current = step(&current, sdt, (k + s) % 2 == 1)
                .map_err(|e| e.at_time("transport step", k))?;
        }
        measures.push(current.clone());
    }
    MeasurePath::new(time_grid.times(), measures)
}

/// Mass path generated by an HJ solution: split upwind outflow built from
/// `u(t_{k+1})` for `UpwindFv`, push-forward along the minimisers `v*` otherwise.
pub fn forward_from_solution(
    m0: &GridMeasure,
    hj: &HJSolution,
    spec: &HamiltonianSpec,
    scheme: &TransportScheme,
) -> Result<MeasurePath> {
    match scheme.mode {
        TransportMode::UpwindFv => {
            let drift: Vec<_> = (0..hj.feedback.len())
                .map(|k| SplitDrift::from_value(&hj.u[k + 1], spec))
                .collect();
            solve_forward_split(m0, &drift, &hj.time_grid, scheme)
        }
        TransportMode::SlPushforward => solve_forward(m0, &hj.feedback, &hj.time_grid, scheme),
    }
}

/// Drift field on every interval of an HJ solution.
///
/// `UpwindFv` gives the net velocity of the split outflow built from `u(t_{k+1})`,
/// which is `-D_p H(x, D_num u)` with the Godunov upwind gradient away from concave
/// kinks; `SlPushforward` gives the semi-Lagrangian minimiser `v*`.
pub fn drift_from_solution(
    hj: &HJSolution,
    spec: &HamiltonianSpec,
    mode: TransportMode,
) -> Vec<VectorField> {
    match mode {
        TransportMode::UpwindFv => (0..hj.feedback.len())
            .map(|k| SplitDrift::from_value(&hj.u[k + 1], spec).net())
            .collect(),
        TransportMode::SlPushforward => hj.feedback.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WassersteinLipschitzCheck {
    pub max_ratio: f64,
    pub bound: f64,
    pub passes: bool,
}

/// `max d_1(m(t_k), m(t_{k+1})) / (t_{k+1} - t_k)` over consecutive snapshots, compared
/// with `1.1 ||b|| + slack`.
///
/// By the triangle inequality the maximum over consecutive pairs is the maximum over
/// all pairs. Both schemes move every unit of mass at most `dt |b|` per step, so a
/// zero `slack` is admissible for paths they generate.
pub fn wasserstein_lipschitz_check(
    path: &MeasurePath,
    b_sup: f64,
    slack: f64,
) -> Result<WassersteinLipschitzCheck> {
    if path.grid().dim() != 1 {
        return Err(Error::Precondition(
            "the Lipschitz check needs the exact 1D distance".into(),
        ));
    }
    let mut max_ratio = 0.0f64;
    for k in 0..path.len() - 1 {
        let d = wasserstein1(&path.measures()[k], &path.measures()[k + 1])?;
        let dt = path.times()[k + 1] - path.times()[k];
        max_ratio = max_ratio.max(d / dt);
    }
    let bound = b_sup * 1.1 + slack;
    Ok(WassersteinLipschitzCheck {
        max_ratio,
        bound,
        passes: max_ratio <= bound,
    })
}
