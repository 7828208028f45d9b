//! Backward solver for `-du/dt + H(x, Du) = f(t, x)`, `u(T) = u_f`, by a
//! semi-Lagrangian discretisation of the Lax–Oleinik formula:
//!
//! ```text
//! u(t_k, x) = min_v { dt (L(x, v) + f(t_k, x)) + u(t_{k+1}, x + dt v) }
//! ```
//!
//! with `u(t_{k+1}, .)` interpolated multilinearly and `v` ranging over a
//! uniform velocity box. The minimising `v*` is the optimal feedback.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HamiltonianSpec;
use crate::torus::{wrap, GridField, TorusGrid, VectorField};

/// Uniform time grid on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "T",
                reason: format!("horizon must be positive, got {horizon}"),
            });
        }
        if steps == 0 {
            return Err(Error::InvalidParameter {
                name: "steps",
                reason: "need at least one time step".into(),
            });
        }
        Ok(Self { horizon, steps })
    }

    /// Grid with steps of (approximately) `dt`, rounded to an integer count.
    pub fn with_dt(horizon: f64, dt: f64) -> Result<Self> {
        let steps = (horizon / dt).round().max(1.0) as usize;
        Self::new(horizon, steps)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

/// Velocities `dv * (i, j)` with `|i|, |j| <= K`, ordered by increasing speed so that ties
/// resolve towards slower controls.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    dim: usize,
    v_max: f64,
    dv: f64,
    half_count: i64,
    velocities: Vec<[f64; 2]>,
    on_boundary: Vec<bool>,
}

impl VelocityGrid {
    pub fn new(dim: usize, v_max: f64, dv: f64) -> Result<Self> {
        if !(v_max > 0.0 && dv > 0.0 && v_max.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "velocity box",
                reason: format!("need v_max > 0 and dv > 0, got {v_max}, {dv}"),
            });
        }
        let half_count = (v_max / dv).ceil() as i64;
        let dv = v_max / half_count as f64;
        let mut raw = Vec::new();
        let ys = if dim == 2 { -half_count..=half_count } else { 0..=0 };
        for j in ys {
            for i in -half_count..=half_count {
                raw.push((i, j));
            }
        }
        raw.sort_by_key(|&(i, j)| (i * i + j * j, i, j));
        let velocities = raw
            .iter()
            .map(|&(i, j)| [i as f64 * dv, j as f64 * dv])
            .collect();
        let on_boundary = raw
            .iter()
            .map(|&(i, j)| i.abs() == half_count || (dim == 2 && j.abs() == half_count))
            .collect();
        Ok(Self {
            dim,
            v_max,
            dv,
            half_count,
            velocities,
            on_boundary,
        })
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn dv(&self) -> f64 {
        self.dv
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    pub fn velocities(&self) -> &[[f64; 2]] {
        &self.velocities
    }

    /// Same resolution, box of twice the size.
    pub fn enlarged(&self) -> Self {
        Self::new(self.dim, 2.0 * self.v_max, self.dv).expect("enlarging a valid box")
    }
}

/// How the velocity box is chosen for a solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityPolicy {
    /// Fixed box half-width; derived from the data when `None`.
    pub v_max: Option<f64>,
    /// Velocity spacing; `min(h / (2 dt), 0.05)` when `None`.
    pub dv: Option<f64>,
    /// Enlarge the box and retry on exhaustion instead of failing.
    pub adaptive: bool,
}

impl Default for VelocityPolicy {
    fn default() -> Self {
        Self {
            v_max: None,
            dv: None,
            adaptive: true,
        }
    }
}

/// Number of box doublings tried before giving up.
const MAX_BOX_DOUBLINGS: usize = 6;

impl VelocityPolicy {
    pub fn fixed(v_max: f64, dv: f64) -> Self {
        Self {
            v_max: Some(v_max),
            dv: Some(dv),
            adaptive: false,
        }
    }

    pub fn resolve(
        &self,
        spec: &HamiltonianSpec,
        u_f: &GridField,
        source_sup: f64,
        dt: f64,
    ) -> Result<VelocityGrid> {
        let g = spec.grid();
        let v_max = self
            .v_max
            .unwrap_or_else(|| default_v_max(spec, u_f, source_sup));
        let dv = self.dv.unwrap_or_else(|| default_dv(g, dt));
        VelocityGrid::new(g.dim(), v_max, dv)
    }
}

/// `C (||D u_f|| + 2 sqrt(C ||f|| + osc V) + 1)`, a T-independent a-priori speed bound.
pub fn default_v_max(spec: &HamiltonianSpec, u_f: &GridField, source_sup: f64) -> f64 {
    let c = spec.c_bar();
    let osc = spec.potential().max() - spec.potential().min();
    c * (u_f.lipschitz_constant() + 2.0 * (source_sup * c + osc).max(0.0).sqrt() + 1.0)
}

pub fn default_dv(grid: &TorusGrid, dt: f64) -> f64 {
    (grid.h() / (2.0 * dt)).min(0.05)
}

/// Result of one backward step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub u: GridField,
    pub feedback: VectorField,
}

/// One discrete dynamic-programming step from `t_{k+1}` to `t_k`.
///
/// Errors with [`Error::VelocityBoxExhausted`] when the minimiser sits on the edge
/// of the velocity box at some node.
pub fn lax_oleinik_step(
    u_next: &GridField,
    f_now: &GridField,
    spec: &HamiltonianSpec,
    dt: f64,
    velocities: &VelocityGrid,
) -> Result<StepOutput> {
    let g = *spec.grid();
    g.check_same(u_next.grid())?;
    g.check_same(f_now.grid())?;
    let n = g.n();
    let nf = n as f64;
    let inv_a: Vec<f64> = spec.stiffness().values().iter().map(|a| 1.0 / a).collect();
    // every velocity moves all nodes by the same number of cells: split it into an
    // integer offset and a fraction, and read from a copy of u padded by wrap-around
    let pad = (velocities.v_max() * dt * nf).ceil() as usize + 2;
    let moves: Vec<Move> = velocities
        .velocities()
        .iter()
        .map(|v| {
            let sx = v[0] * dt * nf;
            let sy = v[1] * dt * nf;
            let (fx, fy) = (sx.floor(), sy.floor());
            Move {
                offset: [fx as isize, fy as isize],
                frac: [sx - fx, sy - fy],
                kinetic: 0.5 * dt * (v[0] * v[0] + v[1] * v[1]),
            }
        })
        .collect();

    let mut best = vec![f64::INFINITY; g.len()];
    let mut arg = vec![0usize; g.len()];
    if g.dim() == 1 {
        let w = n + 2 * pad;
        let ext: Vec<f64> = (0..w)
            .map(|j| u_next.values()[(j + n * pad - pad) % n])
            .collect();
        let chunk = 64;
        best.par_chunks_mut(chunk)
            .zip(arg.par_chunks_mut(chunk))
            .enumerate()
            .for_each(|(c, (best, arg))| {
                let start = c * chunk;
                let len = best.len();
                let ia = &inv_a[start..start + len];
                for (k, mv) in moves.iter().enumerate() {
                    let base = ((start + pad) as isize + mv.offset[0]) as usize;
                    let lo = &ext[base..base + len];
                    let hi = &ext[base + 1..base + len + 1];
                    let t = mv.frac[0];
                    for ((((b, a), l), r), inv) in
                        best.iter_mut().zip(arg.iter_mut()).zip(lo).zip(hi).zip(ia)
                    {
                        let cost = mv.kinetic * inv + (l + t * (r - l));
                        let better = cost < *b;
                        *b = if better { cost } else { *b };
                        *a = if better { k } else { *a };
                    }
                }
            });
    } else {
        let w = n + 2 * pad;
        let vals = u_next.values();
        let mut ext = vec![0.0; w * w];
        for jy in 0..w {
            let sy = (jy + n * pad - pad) % n;
            for jx in 0..w {
                ext[jx + w * jy] = vals[(jx + n * pad - pad) % n + n * sy];
            }
        }
        // one chunk per grid row
        best.par_chunks_mut(n)
            .zip(arg.par_chunks_mut(n))
            .enumerate()
            .for_each(|(row, (best, arg))| {
                for (k, mv) in moves.iter().enumerate() {
                    let by = (row + pad) as isize + mv.offset[1];
                    let bx = pad as isize + mv.offset[0];
                    let (tx, ty) = (mv.frac[0], mv.frac[1]);
                    let r0 = by as usize * w;
                    let r1 = r0 + w;
                    for (col, (b, a)) in best.iter_mut().zip(arg.iter_mut()).enumerate() {
                        let ix = (bx + col as isize) as usize;
                        let lo = ext[r0 + ix] + tx * (ext[r0 + ix + 1] - ext[r0 + ix]);
                        let hi = ext[r1 + ix] + tx * (ext[r1 + ix + 1] - ext[r1 + ix]);
                        let cost = mv.kinetic * inv_a[row * n + col] + lo + ty * (hi - lo);
                        if cost < *b {
                            *b = cost;
                            *a = k;
                        }
                    }
                }
            });
    }

    let pot = spec.potential().values();
    let f = f_now.values();
    let mut u = Vec::with_capacity(g.len());
    let mut comps = vec![Vec::with_capacity(g.len()); g.dim()];
    for i in 0..g.len() {
        if velocities.on_boundary[arg[i]] {
            return Err(Error::VelocityBoxExhausted {
                node: i,
                v_max: velocities.v_max(),
                time_index: None,
            });
        }
        u.push(dt * (pot[i] + f[i]) + best[i]);
        let v = velocities.velocities()[arg[i]];
        for (axis, c) in comps.iter_mut().enumerate() {
            c.push(v[axis]);
        }
    }
    Ok(StepOutput {
        u: GridField::from_raw(g, u),
        feedback: VectorField::from_raw(g, comps),
    })
}

struct Move {
    offset: [isize; 2],
    frac: [f64; 2],
    kinetic: f64,
}

/// Value function on every time node plus the feedback used on each interval.
#[derive(Debug, Clone, PartialEq)]
pub struct HJSolution {
    pub time_grid: TimeGrid,
    /// `u[k]` is the value at `t_k`, `k = 0..=N`.
    pub u: Vec<GridField>,
    /// `feedback[k]` is the minimising velocity of the step producing `u[k]`, `k = 0..N`,
    /// i.e. the control applied on `[t_k, t_{k+1}]`.
    pub feedback: Vec<VectorField>,
    /// Final half-width of the velocity box (after any enlargement).
    pub v_max: f64,
}

impl HJSolution {
    pub fn initial(&self) -> &GridField {
        &self.u[0]
    }

    pub fn terminal(&self) -> &GridField {
        &self.u[self.u.len() - 1]
    }

    pub fn lipschitz_report(&self) -> LipschitzReport {
        lipschitz_report(self)
    }
}

/// Iterates [`lax_oleinik_step`] from `t = T` down to `t = 0`.
///
/// `source[k]` is `f(t_k, .)`; it is sampled at the earlier node of every step.
pub fn solve_backward(
    u_f: &GridField,
    source: &[GridField],
    spec: &HamiltonianSpec,
    time_grid: &TimeGrid,
    policy: &VelocityPolicy,
) -> Result<HJSolution> {
    solve_backward_with(u_f, source, spec, time_grid, policy, |u, _| Ok(u))
}

/// Backward solve with a post-processing hook applied to every new time slice
/// (the viscous solver uses it for its implicit diffusion stage).
pub(crate) fn solve_backward_with(
    u_f: &GridField,
    source: &[GridField],
    spec: &HamiltonianSpec,
    time_grid: &TimeGrid,
    policy: &VelocityPolicy,
    mut post: impl FnMut(GridField, usize) -> Result<GridField>,
) -> Result<HJSolution> {
    let steps = time_grid.steps();
    if source.len() != steps + 1 {
        return Err(Error::Precondition(format!(
            "source has {} slices, time grid has {} nodes",
            source.len(),
            steps + 1
        )));
    }
    let dt = time_grid.dt();
    let source_sup = source.iter().map(GridField::sup_norm).fold(0.0, f64::max);
    let mut velocities = policy.resolve(spec, u_f, source_sup, dt)?;
    let mut u = vec![GridField::zeros(*spec.grid()); steps + 1];
    let mut feedback = vec![VectorField::zeros(*spec.grid()); steps];
    u[steps] = u_f.clone();
    for k in (0..steps).rev() {
        let mut doublings = 0;
        let out = loop {
            match lax_oleinik_step(&u[k + 1], &source[k], spec, dt, &velocities) {
                Ok(out) => break out,
                Err(Error::VelocityBoxExhausted { .. })
                    if policy.adaptive && doublings < MAX_BOX_DOUBLINGS =>
                {
                    doublings += 1;
                    velocities = velocities.enlarged();
                    log::debug!(
                        "velocity box exhausted at step {k}; v_max -> {}",
                        velocities.v_max()
                    );
                }
                Err(Error::VelocityBoxExhausted { node, v_max, .. }) => {
                    return Err(Error::VelocityBoxExhausted {
                        node,
                        v_max,
                        time_index: Some(k),
                    })
                }
                Err(e) => return Err(e.at_time("backward step", k)),
            }
        };
        u[k] = post(out.u, k)?;
        feedback[k] = out.feedback;
    }
    Ok(HJSolution {
        time_grid: *time_grid,
        u,
        feedback,
        v_max: velocities.v_max(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzReport {
    /// Largest one-sided space difference quotient over all time slices.
    pub lip_x: f64,
    /// Largest time difference quotient over all nodes.
    pub lip_t: f64,
}

pub fn lipschitz_report(sol: &HJSolution) -> LipschitzReport {
    let lip_x = sol
        .u
        .iter()
        .map(GridField::lipschitz_constant)
        .fold(0.0, f64::max);
    let dt = sol.time_grid.dt();
    let lip_t = sol
        .u
        .windows(2)
        .map(|w| w[0].sup_distance(&w[1]).unwrap_or(0.0) / dt)
        .fold(0.0, f64::max);
    LipschitzReport { lip_x, lip_t }
}

/// Godunov upwind gradient for Hamiltonians convex in `p` with minimum at `p = 0`:
/// per axis, the larger in magnitude of `max(D^- u, 0)` and `min(D^+ u, 0)`.
pub fn upwind_gradient(u: &GridField) -> VectorField {
    let g = *u.grid();
    let h = g.h();
    let v = u.values();
    let comps = (0..g.dim())
        .map(|axis| {
            (0..g.len())
                .map(|i| {
                    let back = ((v[i] - v[g.shift(i, axis, -1)]) / h).max(0.0);
                    let fwd = ((v[g.shift(i, axis, 1)] - v[i]) / h).min(0.0);
                    if back >= -fwd {
                        back
                    } else {
                        fwd
                    }
                })
                .collect()
        })
        .collect();
    VectorField::from_raw(g, comps)
}

/// Feedback `-D_p H(x, D_num u)` built from the upwind gradient.
pub fn upwind_feedback(u: &GridField, spec: &HamiltonianSpec) -> VectorField {
    let p = upwind_gradient(u);
    let g = *u.grid();
    let comps = (0..g.dim())
        .map(|axis| {
            (0..g.len())
                .map(|i| -spec.stiffness().values()[i] * p.component(axis)[i])
                .collect()
        })
        .collect();
    VectorField::from_raw(g, comps)
}

/// Foot of the characteristic leaving node `i` with velocity `v` for time `dt`.
pub fn foot_point(grid: &TorusGrid, i: usize, v: [f64; 2], dt: f64) -> [f64; 2] {
    let x = grid.coords(i);
    [wrap(x[0] + dt * v[0]), wrap(x[1] + dt * v[1])]
}
