//! Run configuration: TOML with sections, unknown keys rejected, every range checked
//! at parse time with the offending key named.

use std::path::{Path, PathBuf};

use ergomfg::ergodic::{ErgodicConfig, ErgodicInit};
use ergomfg::hj::TimeGrid;
use ergomfg::measures::GridMeasure;
use ergomfg::mfg::{Damping, FixedPointConfig, Initialization, MFGProblem};
use ergomfg::model::{CouplingSpec, FourierSum, FourierTerm, HamiltonianSpec, InnerMap};
use ergomfg::torus::{GridField, MollifierKernel, TorusGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{key}: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSection,
    pub time: TimeSection,
    #[serde(default)]
    pub hamiltonian: HamiltonianSection,
    #[serde(default)]
    pub coupling: CouplingSection,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "one")]
    pub dim: usize,
    pub n: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    #[serde(rename = "T_list")]
    pub horizons: Option<Vec<f64>>,
    pub dt: f64,
}

/// `A cos(2 pi k.x + phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub amplitude: f64,
    #[serde(default = "unit_wave")]
    pub wave: [i32; 2],
    #[serde(default)]
    pub phase: f64,
}

fn unit_wave() -> [i32; 2] {
    [1, 0]
}

fn fourier(terms: &[Term]) -> FourierSum {
    FourierSum {
        terms: terms
            .iter()
            .map(|t| FourierTerm {
                amplitude: t.amplitude,
                wave: t.wave,
                phase: t.phase,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianSection {
    #[serde(rename = "V", default = "default_potential")]
    pub potential: Vec<Term>,
    #[serde(default = "unit")]
    pub a: f64,
    #[serde(rename = "C_bar", default = "unit")]
    pub c_bar: f64,
}

fn default_potential() -> Vec<Term> {
    vec![Term {
        amplitude: 1.0,
        wave: [1, 0],
        phase: 0.0,
    }]
}

fn unit() -> f64 {
    1.0
}

impl Default for HamiltonianSection {
    fn default() -> Self {
        Self {
            potential: default_potential(),
            a: 1.0,
            c_bar: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linear,
    Smooth,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    #[serde(default = "linear")]
    pub family: Family,
    #[serde(default = "unit")]
    pub c: f64,
    #[serde(default = "unit")]
    pub kappa: f64,
    #[serde(default = "default_radius")]
    pub kernel_radius: f64,
    #[serde(default)]
    pub g: Vec<Term>,
    #[serde(default)]
    pub w: Vec<Term>,
    #[serde(default = "half")]
    pub sigma: f64,
}

fn linear() -> Family {
    Family::Linear
}

fn default_radius() -> f64 {
    0.15
}

fn half() -> f64 {
    0.5
}

impl Default for CouplingSection {
    fn default() -> Self {
        Self {
            family: Family::Linear,
            c: 1.0,
            kappa: 1.0,
            kernel_radius: 0.15,
            g: Vec::new(),
            w: Vec::new(),
            sigma: 0.5,
        }
    }
}

/// Initial density `m0 ∝ 1 + sum` and terminal cost `u_f = sum`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    #[serde(default)]
    pub m0: Vec<Term>,
    #[serde(default)]
    pub u_f: Vec<Term>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DampingChoice {
    FictitiousPlay,
    Fixed { theta: f64 },
    Harmonic { theta: f64 },
}

impl From<DampingChoice> for Damping {
    fn from(d: DampingChoice) -> Self {
        match d {
            DampingChoice::FictitiousPlay => Damping::FictitiousPlay,
            DampingChoice::Fixed { theta } => Damping::Fixed(theta),
            DampingChoice::Harmonic { theta } => Damping::Harmonic(theta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_tol_fp")]
    pub tol_fp: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "fictitious_play")]
    pub damping: DampingChoice,
    #[serde(default)]
    pub start_uniform: bool,
    #[serde(default = "default_tol_lambda")]
    pub tol_lambda: f64,
    #[serde(default = "default_tol_outer")]
    pub tol_outer: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_dt_erg")]
    pub dt_erg: f64,
    #[serde(default = "default_t_avg")]
    pub t_avg: f64,
    #[serde(default = "default_window")]
    pub cesaro_window: usize,
    /// Start the ergodic outer loop from a point mass at this position.
    #[serde(default)]
    pub ergodic_start: Option<[f64; 2]>,
}

fn default_tol_fp() -> f64 {
    1e-4
}
fn default_max_iter() -> usize {
    2000
}
fn fictitious_play() -> DampingChoice {
    DampingChoice::FictitiousPlay
}
fn default_tol_lambda() -> f64 {
    1e-6
}
fn default_tol_outer() -> f64 {
    1e-3
}
fn default_max_outer() -> usize {
    5000
}
fn default_dt_erg() -> f64 {
    0.05
}
fn default_t_avg() -> f64 {
    20.0
}
fn default_window() -> usize {
    20
}

impl Default for SolverSection {
    fn default() -> Self {
        toml::from_str("").expect("all solver keys have defaults")
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, format!("must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=2).contains(&self.grid.dim) {
            return Err(invalid("grid.dim", "must be 1 or 2"));
        }
        if self.grid.n < 8 {
            return Err(invalid("grid.n", "must be at least 8"));
        }
        positive("time.dt", self.time.dt)?;
        if let Some(t) = self.time.horizon {
            positive("time.T", t)?;
        }
        if let Some(list) = &self.time.horizons {
            if list.iter().any(|t| !(*t > 0.0)) || list.windows(2).any(|w| w[1] <= w[0]) {
                return Err(invalid("time.T_list", "must be positive and strictly increasing"));
            }
        }
        positive("hamiltonian.a", self.hamiltonian.a)?;
        if self.hamiltonian.c_bar < 1.0 {
            return Err(invalid("hamiltonian.C_bar", "must be at least 1"));
        }
        if !(1.0 / self.hamiltonian.c_bar..=self.hamiltonian.c_bar).contains(&self.hamiltonian.a) {
            return Err(invalid("hamiltonian.a", "must lie in [1/C_bar, C_bar]"));
        }
        let c = &self.coupling;
        if !(c.kernel_radius > 0.0 && c.kernel_radius < 0.5) {
            return Err(invalid("coupling.kernel_radius", "radius must be in (0, 1/2)"));
        }
        if c.family != Family::Zero && !(c.c > 0.0 && c.c <= 1.0) {
            return Err(invalid("coupling.c", format!("must be in (0, 1], got {}", c.c)));
        }
        let s = &self.solver;
        positive("solver.tol_fp", s.tol_fp)?;
        positive("solver.tol_lambda", s.tol_lambda)?;
        positive("solver.tol_outer", s.tol_outer)?;
        positive("solver.dt_erg", s.dt_erg)?;
        positive("solver.t_avg", s.t_avg)?;
        if s.max_iter == 0 {
            return Err(invalid("solver.max_iter", "must be positive"));
        }
        if s.max_outer == 0 {
            return Err(invalid("solver.max_outer", "must be positive"));
        }
        if s.cesaro_window == 0 {
            return Err(invalid("solver.cesaro_window", "must be positive"));
        }
        if let DampingChoice::Fixed { theta } | DampingChoice::Harmonic { theta } = s.damping {
            if !(theta > 0.0 && theta <= 1.0) {
                return Err(invalid("solver.damping.theta", "must be in (0, 1]"));
            }
        }
        // building the model objects runs the remaining checks of the library
        self.coupling_spec()?;
        self.hamiltonian_spec()?;
        self.initial_measure()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (defaults filled in).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }

    pub fn grid(&self) -> Result<TorusGrid, ConfigError> {
        TorusGrid::new(self.grid.dim, self.grid.n).map_err(|e| invalid("grid", e.to_string()))
    }

    pub fn hamiltonian_spec(&self) -> Result<HamiltonianSpec, ConfigError> {
        let g = self.grid()?;
        let v = fourier(&self.hamiltonian.potential).sample(g);
        HamiltonianSpec::new(v, GridField::constant(g, self.hamiltonian.a), self.hamiltonian.c_bar)
            .map_err(|e| invalid("hamiltonian", e.to_string()))
    }

    pub fn coupling_spec(&self) -> Result<CouplingSpec, ConfigError> {
        let g = self.grid()?;
        let c = &self.coupling;
        let kernel = MollifierKernel::bump(g, c.kernel_radius)
            .map_err(|e| invalid("coupling.kernel_radius", e.to_string()))?;
        let inner = match c.family {
            Family::Zero => return Ok(CouplingSpec::zero(kernel)),
            Family::Linear => InnerMap::Linear {
                kappa: c.kappa,
                g: fourier(&c.g).sample(g),
            },
            Family::Smooth => InnerMap::Smooth {
                sigma: c.sigma,
                w: fourier(&c.w).sample(g),
            },
        };
        CouplingSpec::new(kernel, inner, c.c).map_err(|e| match e {
            ergomfg::Error::InvalidParameter { name, reason } => invalid(&format!("coupling.{name}"), reason),
            e => invalid("coupling", e.to_string()),
        })
    }

    pub fn initial_measure(&self) -> Result<GridMeasure, ConfigError> {
        let g = self.grid()?;
        let bump = fourier(&self.initial.m0).sample(g);
        GridMeasure::normalized(g, bump.values().iter().map(|v| 1.0 + v).collect())
            .map_err(|e| invalid("initial.m0", e.to_string()))
    }

    pub fn horizon(&self) -> Result<f64, ConfigError> {
        self.time
            .horizon
            .ok_or_else(|| invalid("time.T", "required by this command"))
    }

    pub fn horizons(&self) -> Result<Vec<f64>, ConfigError> {
        let list = self
            .time
            .horizons
            .clone()
            .ok_or_else(|| invalid("time.T_list", "required by this command"))?;
        if list.len() < 3 {
            return Err(invalid("time.T_list", "needs at least 3 horizons"));
        }
        Ok(list)
    }

    /// Finite-horizon problem on `[0, horizon]` with step `time.dt`.
    pub fn problem(&self, horizon: f64) -> Result<MFGProblem, ConfigError> {
        let g = self.grid()?;
        let tg = TimeGrid::with_dt(horizon, self.time.dt).map_err(|e| invalid("time", e.to_string()))?;
        MFGProblem::new(
            self.hamiltonian_spec()?,
            self.coupling_spec()?,
            self.initial_measure()?,
            fourier(&self.initial.u_f).sample(g),
            tg,
        )
        .map_err(|e| invalid("initial", e.to_string()))
    }

    pub fn fixed_point(&self) -> FixedPointConfig {
        FixedPointConfig {
            damping: self.solver.damping.into(),
            tol_fp: self.solver.tol_fp,
            max_iter: self.solver.max_iter,
            init: if self.solver.start_uniform {
                Initialization::Uniform
            } else {
                Initialization::FrozenM0
            },
        }
    }

    pub fn ergodic(&self) -> ErgodicConfig {
        ErgodicConfig {
            dt_erg: self.solver.dt_erg,
            tol_lambda: self.solver.tol_lambda,
            cesaro_window: self.solver.cesaro_window,
            t_avg: self.solver.t_avg,
            damping: self.solver.damping.into(),
            tol_outer: self.solver.tol_outer,
            max_outer: self.solver.max_outer,
            init: match self.solver.ergodic_start {
                Some(x) => ErgodicInit::PointLike(x),
                None => ErgodicInit::Uniform,
            },
            ..ErgodicConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[grid]\nn = 32\n[time]\nT = 1.0\ndt = 0.05\n";

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = parse_str(MINIMAL).unwrap();
        assert_eq!(cfg.grid.dim, 1);
        assert_eq!(cfg.coupling.kernel_radius, 0.15);
        assert_eq!(cfg.solver.tol_fp, 1e-4);
        assert_eq!(cfg.hamiltonian.potential, default_potential());
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        assert_eq!(cfg.hash(), parse_str(MINIMAL).unwrap().hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn rejects_wide_kernels_with_the_key() {
        let err = parse_str(&format!("{MINIMAL}[coupling]\nkernel_radius = 0.6\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("coupling.kernel_radius") && msg.contains("radius must be in (0, 1/2)"), "{msg}");
    }

    #[test]
    fn rejects_zero_coercivity() {
        let err = parse_str(&format!("{MINIMAL}[coupling]\nc = 0.0\n")).unwrap_err();
        assert!(err.to_string().starts_with("coupling.c"), "{err}");
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(parse_str(&format!("{MINIMAL}bogus = 1\n")), Err(ConfigError::Parse(_))));
        assert!(matches!(parse_str(&format!("{MINIMAL}[solver]\ntol_fpp = 1\n")), Err(ConfigError::Parse(_))));
        for (extra, key) in [
            ("[solver]\ntol_fp = -1.0\n", "solver.tol_fp"),
            ("[solver]\ndamping = { fixed = { theta = 1.5 } }\n", "solver.damping.theta"),
            ("[coupling]\nkappa = 3.0\n", "coupling.c"),
            ("[hamiltonian]\na = 3.0\n", "hamiltonian.a"),
        ] {
            let err = parse_str(&format!("{MINIMAL}{extra}")).unwrap_err();
            assert!(err.to_string().starts_with(key), "{extra}: {err}");
        }
        let err = parse_str("[grid]\nn = 4\n[time]\ndt = 0.1\n").unwrap_err();
        assert!(err.to_string().starts_with("grid.n"));
    }

    #[test]
    fn builds_the_model_objects() {
        let cfg = parse_str(&format!(
            "{MINIMAL}[initial]\nm0 = [{{ amplitude = 0.5, phase = -1.5707963267948966 }}]\n[solver]\ndamping = {{ harmonic = {{ theta = 0.3 }} }}\n"
        ))
        .unwrap();
        let p = cfg.problem(1.0).unwrap();
        assert_eq!(p.time_grid.steps(), 20);
        assert!((p.m0.sup_density() - 1.5).abs() < 1e-2);
        assert_eq!(cfg.fixed_point().damping, Damping::Harmonic(0.3));
        assert!(cfg.horizons().is_err());
    }
}
