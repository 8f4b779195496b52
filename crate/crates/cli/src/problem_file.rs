//! TOML problem files.

use std::path::Path;

use decoupling::expr::Expr;
use decoupling::field::{Axis, SpatialGrid};
use decoupling::global::{BuildConfig, StepSchedule};
use decoupling::localstep::PicardConfig;
use decoupling::problem::{LipschitzDecl, Mode, ProblemSpec};
use serde::Deserialize;
use thiserror::Error;

pub const DEFAULT_PATHS: usize = 1000;
pub const DEFAULT_SIM_STEPS: usize = 100;
pub const DEFAULT_RESIDUAL_TOL: f64 = 2e-2;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("{field}: {source}")]
    Expr {
        field: String,
        source: decoupling::expr::ParseError,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum FileMode {
    GlobalLipschitz,
    MarkovianLocalLipschitz,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(default = "default_mode")]
    pub mode: FileMode,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dims: Dims,
    pub coefficients: Coefficients,
    pub lipschitz: Lipschitz,
    pub grid: Grid,
    #[serde(default)]
    pub solver: Solver,
    #[serde(default)]
    pub sim: Sim,
}

fn default_mode() -> FileMode {
    FileMode::GlobalLipschitz
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub d: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub mu: Vec<String>,
    /// `n` rows of `d` entries.
    pub sigma: Vec<Vec<String>>,
    pub f: Vec<String>,
    pub xi: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lipschitz {
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L_sigma_z")]
    pub l_sigma_z: f64,
    #[serde(rename = "L_xi_x")]
    pub l_xi_x: f64,
    pub sup_sigma: Option<f64>,
    pub sup_xi: Option<f64>,
    pub sup_f00: Option<f64>,
    #[serde(rename = "local_L")]
    pub local_l: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub axes: Vec<(f64, f64, usize)>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Solver {
    pub margin: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub damping: Option<f64>,
    pub quad_order: Option<usize>,
    pub lip_cap: Option<f64>,
    pub value_cap: Option<f64>,
    pub h_cap: Option<f64>,
    pub h_min: Option<f64>,
    pub max_slices: Option<usize>,
    /// Split every admissible step into this many.
    pub substeps: Option<usize>,
    /// Uniform explicit schedule with this many steps.
    pub steps: Option<usize>,
    #[serde(rename = "cutoff_H0")]
    pub cutoff_h0: Option<f64>,
    pub cutoff_growth: Option<f64>,
    pub t_stop: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sim {
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub x0: Option<Vec<f64>>,
    /// Defaults to the earliest slice of the field.
    pub t0: Option<f64>,
    /// Finite-difference step of the variational check.
    pub eps: Option<f64>,
    pub residual_tol: Option<f64>,
}

/// Command-line adjustments applied on top of the file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overrides {
    pub margin: Option<f64>,
    pub grid_scale: usize,
    pub step_scale: usize,
}

impl Default for Overrides {
    fn default() -> Self {
        Overrides {
            margin: None,
            grid_scale: 1,
            step_scale: 1,
        }
    }
}

impl ProblemFile {
    pub fn parse(text: &str) -> Result<Self, FileError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FileError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| FileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parsed expressions and declarations. Shape and variable checks are
    /// left to `ProblemSpec::new`, whose errors are reported separately.
    pub fn parts(&self) -> Result<Parts, FileError> {
        let c = &self.coefficients;
        let parse_all = |name: &str, src: &[String]| -> Result<Vec<Expr>, FileError> {
            src.iter()
                .enumerate()
                .map(|(i, s)| {
                    Expr::parse(s).map_err(|source| FileError::Expr {
                        field: format!("{name}[{i}]"),
                        source,
                    })
                })
                .collect()
        };
        let d = self.dims.d;
        let mut sigma = Vec::new();
        for (i, row) in c.sigma.iter().enumerate() {
            if row.len() != d {
                return Err(FileError::Invalid(format!(
                    "sigma row {i} has {} entries, expected d={d}",
                    row.len()
                )));
            }
            sigma.extend(parse_all(&format!("sigma[{i}]"), row)?);
        }
        let l = &self.lipschitz;
        Ok(Parts {
            mu: parse_all("mu", &c.mu)?,
            sigma,
            f: parse_all("f", &c.f)?,
            xi: parse_all("xi", &c.xi)?,
            lipschitz: LipschitzDecl {
                l: l.l,
                l_sigma_z: l.l_sigma_z,
                l_xi_x: l.l_xi_x,
                sup_sigma: l.sup_sigma,
                sup_xi: l.sup_xi,
                sup_f00: l.sup_f00,
                local_l: l.local_l.clone().unwrap_or_default(),
            },
            mode: match self.mode {
                FileMode::GlobalLipschitz => Mode::GlobalLipschitz,
                FileMode::MarkovianLocalLipschitz => Mode::MarkovianLocalLipschitz,
            },
        })
    }

    pub fn problem(&self) -> Result<ProblemSpec, crate::CliError> {
        let parts = self.parts()?;
        Ok(ProblemSpec::new(
            (self.dims.n, self.dims.m, self.dims.d),
            self.horizon,
            parts.mu,
            parts.sigma,
            parts.f,
            parts.xi,
            parts.lipschitz,
            parts.mode,
        )?)
    }

    pub fn grid(&self, scale: usize) -> Result<SpatialGrid, crate::CliError> {
        let axes = self
            .grid
            .axes
            .iter()
            .map(|&(min, max, count)| Axis::new(min, max, count))
            .collect();
        let grid = SpatialGrid::new(axes)?;
        Ok(if scale > 1 { grid.scaled(scale)? } else { grid })
    }

    pub fn t_stop(&self) -> f64 {
        self.solver.t_stop.unwrap_or(0.0)
    }

    pub fn build_config(&self, o: &Overrides) -> Result<BuildConfig, crate::CliError> {
        let s = &self.solver;
        let mut cfg = BuildConfig::new(self.grid(o.grid_scale)?);
        if let Some(v) = o.margin.or(s.margin) {
            cfg.margin = v;
        }
        let defaults = PicardConfig::default();
        cfg.picard = PicardConfig {
            tol: s.tol.unwrap_or(defaults.tol),
            max_iter: s.max_iter.unwrap_or(defaults.max_iter),
            damping: s.damping.unwrap_or(defaults.damping),
        };
        if let Some(q) = s.quad_order {
            cfg.quad_order = q;
        }
        if let Some(v) = s.lip_cap {
            cfg.lip_cap = v;
        }
        cfg.value_cap = s.value_cap;
        cfg.h_cap = s.h_cap.map(|h| h / o.step_scale as f64);
        if let Some(v) = s.h_min {
            cfg.h_min = v;
        }
        if let Some(v) = s.max_slices {
            cfg.max_slices = v;
        }
        cfg.t_stop = self.t_stop();
        cfg.schedule = match (s.steps, s.substeps) {
            (Some(_), Some(_)) => {
                return Err(FileError::Invalid(
                    "solver.steps and solver.substeps are mutually exclusive".into(),
                )
                .into())
            }
            (Some(steps), None) => {
                StepSchedule::uniform(self.horizon, cfg.t_stop, steps * o.step_scale)
            }
            (None, sub) => StepSchedule::Adaptive {
                substeps: sub.unwrap_or(1) * o.step_scale,
            },
        };
        cfg.cutoff.h0 = s.cutoff_h0;
        if let Some(g) = s.cutoff_growth {
            cfg.cutoff.growth = g;
        }
        Ok(cfg)
    }

    pub fn paths(&self) -> usize {
        self.sim.paths.unwrap_or(DEFAULT_PATHS)
    }

    pub fn sim_steps(&self) -> usize {
        self.sim.steps.unwrap_or(DEFAULT_SIM_STEPS)
    }

    pub fn seed(&self) -> u64 {
        self.sim.seed.unwrap_or(0)
    }

    pub fn x0(&self) -> Vec<f64> {
        self.sim
            .x0
            .clone()
            .unwrap_or_else(|| vec![0.0; self.dims.n])
    }

    pub fn residual_tol(&self) -> f64 {
        self.sim.residual_tol.unwrap_or(DEFAULT_RESIDUAL_TOL)
    }
}

pub struct Parts {
    pub mu: Vec<Expr>,
    pub sigma: Vec<Expr>,
    pub f: Vec<Expr>,
    pub xi: Vec<Expr>,
    pub lipschitz: LipschitzDecl,
    pub mode: Mode,
}
