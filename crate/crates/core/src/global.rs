//! Backward construction of the decoupling field over the whole horizon.
//!
//! Slices are produced one step at a time from the horizon toward
//! `t_stop`. Each step length comes from the contraction bound evaluated
//! at the Lipschitz estimate of the slice just built. The first slice
//! whose estimate crosses a blowup threshold ends the build; the field
//! accepted so far is returned together with a [`BlowupReport`].

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::contraction::{max_step, ContractionError, LipschitzTriple, DEFAULT_MARGIN};
use crate::expr::{EvalError, Point};
use crate::field::{BuildMeta, DecouplingFieldApprox, FieldSlice, GridError, SpatialGrid};
use crate::localstep::{
    backward_step, gauss_hermite, PicardConfig, QuadratureError, StepContext, StepError,
    DEFAULT_QUAD_ORDER,
};
use crate::par::Execution;
use crate::problem::{check_admissible, AdmissibilityReport, Mode, ProblemError, ProblemSpec};

pub const DEFAULT_LIP_CAP: f64 = 1e6;
pub const DEFAULT_H_MIN: f64 = 1e-10;
pub const DEFAULT_MAX_SLICES: usize = 2_000_000;
pub const DEFAULT_CUTOFF_GROWTH: f64 = 2.0;
pub const MAX_CUTOFF_ESCALATIONS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub enum StepSchedule {
    /// `h = h_max / substeps`, capped by `h_cap` and the remaining time.
    Adaptive { substeps: usize },
    /// Slice times after the start, strictly decreasing. Each step must
    /// respect the contraction bound in force when it is taken.
    Explicit(Vec<f64>),
}

impl StepSchedule {
    /// `steps` equal steps from `from` down to `to`.
    pub fn uniform(from: f64, to: f64, steps: usize) -> Self {
        let h = (from - to) / steps as f64;
        StepSchedule::Explicit(
            (1..=steps)
                .map(|k| if k == steps { to } else { from - k as f64 * h })
                .collect(),
        )
    }

    /// Inserts `factor - 1` equally spaced times inside every step. The
    /// original times are kept bit for bit.
    pub fn refined(start: f64, times: &[f64], factor: usize) -> Self {
        let mut out = Vec::with_capacity(times.len() * factor);
        let mut prev = start;
        for &t in times {
            for j in 1..factor {
                out.push(prev - (prev - t) * j as f64 / factor as f64);
            }
            out.push(t);
            prev = t;
        }
        StepSchedule::Explicit(out)
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Adaptive { substeps: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffConfig {
    /// Initial radius; `4 * sup_xi` when absent.
    pub h0: Option<f64>,
    pub growth: f64,
    pub max_escalations: usize,
}

impl Default for CutoffConfig {
    fn default() -> Self {
        CutoffConfig {
            h0: None,
            growth: DEFAULT_CUTOFF_GROWTH,
            max_escalations: MAX_CUTOFF_ESCALATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub grid: Arc<SpatialGrid>,
    pub margin: f64,
    pub picard: PicardConfig,
    pub quad_order: usize,
    pub lip_cap: f64,
    pub value_cap: Option<f64>,
    pub cutoff: CutoffConfig,
    pub t_stop: f64,
    pub h_cap: Option<f64>,
    /// Admissible steps below this length count as a Lipschitz explosion:
    /// the estimate is creeping toward the forbidden value.
    pub h_min: f64,
    pub schedule: StepSchedule,
    pub max_slices: usize,
    pub exec: Execution,
}

impl BuildConfig {
    pub fn new(grid: SpatialGrid) -> Self {
        BuildConfig {
            grid: Arc::new(grid),
            margin: DEFAULT_MARGIN,
            picard: PicardConfig::default(),
            quad_order: DEFAULT_QUAD_ORDER,
            lip_cap: DEFAULT_LIP_CAP,
            value_cap: None,
            cutoff: CutoffConfig::default(),
            t_stop: 0.0,
            h_cap: None,
            h_min: DEFAULT_H_MIN,
            schedule: StepSchedule::default(),
            max_slices: DEFAULT_MAX_SLICES,
            exec: Execution::default(),
        }
    }

    fn validate(&self, p: &ProblemSpec) -> Result<(), BuildError> {
        let bad = |msg: String| Err(BuildError::Config(msg));
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return bad(format!("margin {} outside (0, 1)", self.margin));
        }
        if !(self.lip_cap > 0.0) || self.value_cap.is_some_and(|c| !(c > 0.0)) {
            return bad("caps must be positive".into());
        }
        if self.h_cap.is_some_and(|h| !(h > 0.0)) {
            return bad("h_cap must be positive".into());
        }
        if !(self.h_min >= 0.0) || self.h_cap.is_some_and(|h| h < self.h_min) {
            return bad(format!("h_min {} must be in [0, h_cap]", self.h_min));
        }
        if !(self.t_stop >= 0.0 && self.t_stop < p.horizon) {
            return bad(format!("t_stop {} outside [0, {})", self.t_stop, p.horizon));
        }
        if self.grid.dim() != p.n {
            return bad(format!("grid dimension {} but n={}", self.grid.dim(), p.n));
        }
        if !(self.cutoff.growth > 1.0) {
            return bad("cutoff growth must exceed 1".into());
        }
        if let StepSchedule::Adaptive { substeps: 0 } = self.schedule {
            return bad("substeps must be at least 1".into());
        }
        self.picard.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    #[error("problem is not admissible:\n{0}")]
    Inadmissible(Box<AdmissibilityReport>),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Contraction(#[from] ContractionError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error("terminal condition: {0}")]
    Terminal(#[from] EvalError),
    #[error("invalid build configuration: {0}")]
    Config(String),
    #[error("schedule step {h} at t={t} exceeds the admissible step {h_max}")]
    Schedule { t: f64, h: f64, h_max: f64 },
    #[error("slice budget of {0} exhausted")]
    SliceBudget(usize),
    #[error("cutoff build requires markovian mode")]
    NotMarkovian,
    #[error("build stopped early at t={}: {}", .0.t_min_estimate, .0.trigger)]
    Incomplete(Box<BlowupReport>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlowupTrigger {
    LipschitzExplosion,
    ValueExplosion,
    PicardDivergence,
}

impl fmt::Display for BlowupTrigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlowupTrigger::LipschitzExplosion => "LipschitzExplosion",
            BlowupTrigger::ValueExplosion => "ValueExplosion",
            BlowupTrigger::PicardDivergence => "PicardDivergence",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub t: f64,
    pub lip: f64,
    pub max_u: f64,
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlowupReport {
    /// Time of the earliest accepted slice.
    pub t_min_estimate: f64,
    pub trigger: BlowupTrigger,
    /// Accepted slices, newest first.
    pub trace: Vec<TraceEntry>,
    pub detail: String,
}

/// One line of the build log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceLog {
    pub t: f64,
    pub h: f64,
    pub iterations: usize,
    pub lip: f64,
    pub max_u: f64,
    pub max_z: f64,
    pub radius: Option<f64>,
    /// `((1 + lip)^-1 - (1 + 1/L_sigma_z)^-1) / (max|u| + 1)`; tends to
    /// zero when either the field or its gradient explodes.
    pub explosion: f64,
}

impl fmt::Display for SliceLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={} h={} iter={} lip={} max_u={} max_z={} H=",
            self.t, self.h, self.iterations, self.lip, self.max_u, self.max_z
        )?;
        match self.radius {
            Some(r) => write!(f, "{r}")?,
            None => f.write_str("none")?,
        }
        write!(f, " explosion={}", self.explosion)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassivityRecord {
    pub t: f64,
    pub radius: f64,
    pub max_u: f64,
    pub max_z: f64,
    pub pass: bool,
}

impl fmt::Display for PassivityRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} t={} H={} max_u={} max_z={}",
            if self.pass { "PASS" } else { "FAIL" },
            self.t,
            self.radius,
            self.max_u,
            self.max_z
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutcome {
    pub field: DecouplingFieldApprox,
    pub blowup: Option<BlowupReport>,
    pub log: Vec<SliceLog>,
    /// Every passivity test, including failed attempts that were redone.
    pub passivity: Vec<PassivityRecord>,
}

impl BuildOutcome {
    pub fn is_complete(&self) -> bool {
        self.blowup.is_none()
    }

    pub fn passivity_ok(&self) -> bool {
        self.passivity.iter().all(|r| r.pass)
    }

    /// The field, or the blowup report as an error.
    pub fn into_complete(self) -> Result<DecouplingFieldApprox, BuildError> {
        match self.blowup {
            None => Ok(self.field),
            Some(r) => Err(BuildError::Incomplete(Box::new(r))),
        }
    }
}

fn explosion_quantity(lip: f64, l_sigma_z: f64, max_u: f64) -> f64 {
    (1.0 / (1.0 + lip) - 1.0 / (1.0 + 1.0 / l_sigma_z)) / (max_u + 1.0)
}

pub fn terminal_slice(p: &ProblemSpec, grid: &Arc<SpatialGrid>) -> Result<FieldSlice, BuildError> {
    let mut u = Vec::with_capacity(grid.len() * p.m);
    for k in 0..grid.len() {
        let x = grid.node(k);
        for e in &p.xi {
            u.push(e.eval(&Point::new(p.horizon, &x[..p.n], &[], &[], p.d))?);
        }
    }
    Ok(FieldSlice::new(p.horizon, grid.clone(), p.m, p.d, u, None))
}

fn admissible(p: &ProblemSpec) -> Result<(), BuildError> {
    let report = check_admissible(p)?;
    if !report.passed() {
        return Err(BuildError::Inadmissible(Box::new(report)));
    }
    Ok(())
}

/// Builds the field from the terminal condition at the horizon.
pub fn build_field(p: &ProblemSpec, cfg: &BuildConfig) -> Result<BuildOutcome, BuildError> {
    admissible(p)?;
    cfg.validate(p)?;
    let start = terminal_slice(p, &cfg.grid)?;
    let lip0 = p.lipschitz.l_xi_x.max(start.lip_estimate());
    run(p, cfg, start, lip0, None)
}

/// Continues a build from an existing slice, e.g. the earliest slice of
/// a field built on a later interval.
pub fn build_from(
    p: &ProblemSpec,
    cfg: &BuildConfig,
    start: FieldSlice,
) -> Result<BuildOutcome, BuildError> {
    admissible(p)?;
    cfg.validate(p)?;
    if !Arc::ptr_eq(start.grid(), &cfg.grid) && **start.grid() != *cfg.grid {
        return Err(BuildError::Config(
            "start slice lives on another grid".into(),
        ));
    }
    if !(start.t > cfg.t_stop) {
        return Err(BuildError::Config(format!(
            "start time {} not after t_stop {}",
            start.t, cfg.t_stop
        )));
    }
    let lip0 = start.lip_estimate();
    run(p, cfg, start, lip0, None)
}

/// `build_with_cutoff` for Markovian problems, `build_field` otherwise.
pub fn build_for_mode(p: &ProblemSpec, cfg: &BuildConfig) -> Result<BuildOutcome, BuildError> {
    match p.mode {
        Mode::MarkovianLocalLipschitz => build_with_cutoff(p, cfg),
        Mode::GlobalLipschitz => build_field(p, cfg),
    }
}

/// Markovian build with the `(y, z)` cutoff active in every step.
///
/// After each slice the cutoff must have been passive: `max|u|` and
/// `max|z|` at most half the radius. Otherwise the radius grows by the
/// configured factor and the slice is redone with the matching local
/// Lipschitz constant.
pub fn build_with_cutoff(p: &ProblemSpec, cfg: &BuildConfig) -> Result<BuildOutcome, BuildError> {
    if p.mode != Mode::MarkovianLocalLipschitz {
        return Err(BuildError::NotMarkovian);
    }
    admissible(p)?;
    cfg.validate(p)?;
    let sup_xi = p
        .lipschitz
        .sup_xi
        .ok_or(ProblemError::MissingDeclaration("sup_xi"))?;
    let radius = cfg.cutoff.h0.unwrap_or(4.0 * sup_xi);
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(BuildError::Config(format!("cutoff radius {radius}")));
    }
    let start = terminal_slice(p, &cfg.grid)?;
    let lip0 = p.lipschitz.l_xi_x.max(start.lip_estimate());
    run(p, cfg, start, lip0, Some(radius))
}

struct Cutoff {
    radius: f64,
    l_h: f64,
    escalations: usize,
}

fn run(
    p: &ProblemSpec,
    cfg: &BuildConfig,
    start: FieldSlice,
    lip0: f64,
    radius: Option<f64>,
) -> Result<BuildOutcome, BuildError> {
    let rule = gauss_hermite(p.d, cfg.quad_order)?;
    let lsz = p.lipschitz.l_sigma_z;
    let t_start = start.t;
    let eps = 1e-12 * (1.0 + p.horizon.abs());
    let explicit = match &cfg.schedule {
        StepSchedule::Explicit(times) => {
            let ok = times.windows(2).all(|w| w[1] < w[0])
                && times.first().is_some_and(|&t| t < t_start)
                && times.last().is_some_and(|&t| t >= cfg.t_stop - eps);
            if !ok {
                return Err(BuildError::Config(
                    "explicit schedule must decrease from the start to t_stop".into(),
                ));
            }
            Some(times.as_slice())
        }
        StepSchedule::Adaptive { .. } => None,
    };

    let mut cutoff = match radius {
        Some(r) => Some(Cutoff {
            radius: r,
            l_h: local_l(p, r)?,
            escalations: 0,
        }),
        None => None,
    };
    let mut passivity = Vec::new();
    if let Some(c) = &cutoff {
        let (mu, mz) = (start.max_abs_u(), start.max_abs_z());
        let pass = mu <= c.radius / 2.0 && mz <= c.radius / 2.0;
        passivity.push(PassivityRecord {
            t: start.t,
            radius: c.radius,
            max_u: mu,
            max_z: mz,
            pass,
        });
        if !pass {
            return Err(BuildError::Config(format!(
                "terminal data reaches half the cutoff radius {}",
                c.radius
            )));
        }
    }

    let mut trace = vec![TraceEntry {
        t: start.t,
        lip: start.lip_estimate(),
        max_u: start.max_abs_u(),
        radius,
    }];
    let mut log = Vec::new();
    let mut slices = vec![start];
    let mut lip = lip0;
    let mut t = t_start;
    let mut next_explicit = 0usize;
    let mut blowup: Option<(BlowupTrigger, String)> = None;

    while t > cfg.t_stop + eps {
        if explicit.is_some_and(|times| next_explicit >= times.len()) {
            break;
        }
        if slices.len() > cfg.max_slices {
            return Err(BuildError::SliceBudget(cfg.max_slices));
        }
        let l = cutoff.as_ref().map_or(p.lipschitz.l, |c| c.l_h);
        let h_max = match max_step(LipschitzTriple::new(l, lsz, lip), cfg.margin) {
            Ok(h) => h,
            Err(ContractionError::NoAdmissibleStep { gamma0, bound }) => {
                blowup = Some((
                    BlowupTrigger::LipschitzExplosion,
                    format!("no admissible step at lip={lip}: gamma(0)={gamma0} > {bound}"),
                ));
                break;
            }
            Err(e) => return Err(e.into()),
        };
        if h_max < cfg.h_min && t - cfg.t_stop > cfg.h_min {
            blowup = Some((
                BlowupTrigger::LipschitzExplosion,
                format!(
                    "admissible step {h_max:e} below h_min={:e} at lip={lip}",
                    cfg.h_min
                ),
            ));
            break;
        }
        let t_new = match explicit {
            Some(times) => {
                let t_new = times[next_explicit];
                let h = t - t_new;
                if h > h_max * (1.0 + 1e-9) {
                    return Err(BuildError::Schedule { t, h, h_max });
                }
                t_new
            }
            None => {
                let substeps = match cfg.schedule {
                    StepSchedule::Adaptive { substeps } => substeps,
                    StepSchedule::Explicit(_) => 1,
                };
                // An unbounded step covers the whole span.
                let mut h = h_max.min(t_start - cfg.t_stop) / substeps as f64;
                if let Some(cap) = cfg.h_cap {
                    h = h.min(cap);
                }
                if t - h <= cfg.t_stop + eps {
                    cfg.t_stop
                } else {
                    t - h
                }
            }
        };
        let h = t - t_new;
        let ctx = StepContext {
            problem: p,
            rule: &rule,
            picard: &cfg.picard,
            cutoff: cutoff.as_ref().map(|c| c.radius),
            exec: cfg.exec,
        };
        let prev = slices.last().expect("at least the start slice");
        let out = match backward_step(prev, t_new, h, &ctx) {
            Ok(out) => out,
            Err(StepError::PicardDivergence { t, node, reason }) => {
                blowup = Some((
                    BlowupTrigger::PicardDivergence,
                    format!("at t={t}, node {node}: {reason}"),
                ));
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let slice = out.slice;
        let (max_u, max_z) = (slice.max_abs_u(), slice.max_abs_z());

        if let Some(c) = cutoff.as_mut() {
            let pass = max_u <= c.radius / 2.0 && max_z <= c.radius / 2.0;
            passivity.push(PassivityRecord {
                t: t_new,
                radius: c.radius,
                max_u,
                max_z,
                pass,
            });
            if !pass {
                c.escalations += 1;
                let grown = c.radius * cfg.cutoff.growth;
                if c.escalations > cfg.cutoff.max_escalations {
                    blowup = Some((
                        BlowupTrigger::ValueExplosion,
                        format!(
                            "cutoff radius escalated {} times without becoming passive",
                            c.escalations - 1
                        ),
                    ));
                    break;
                }
                match p.lipschitz.local_constant(grown) {
                    Some(l_h) => {
                        c.radius = grown;
                        c.l_h = l_h;
                        continue;
                    }
                    None => {
                        blowup = Some((
                            BlowupTrigger::ValueExplosion,
                            format!("cutoff radius {grown} beyond the local Lipschitz table"),
                        ));
                        break;
                    }
                }
            }
        }

        let lip_new = slice.lip_estimate();
        let radius_now = cutoff.as_ref().map(|c| c.radius);
        let trigger = if lsz > 0.0 && lip_new >= (1.0 - cfg.margin) / lsz {
            Some((
                BlowupTrigger::LipschitzExplosion,
                format!(
                    "lip={lip_new} at t={t_new} reached (1 - margin)/L_sigma_z = {}",
                    (1.0 - cfg.margin) / lsz
                ),
            ))
        } else if !(lip_new <= cfg.lip_cap) {
            Some((
                BlowupTrigger::LipschitzExplosion,
                format!("lip={lip_new} at t={t_new} exceeds lip_cap={}", cfg.lip_cap),
            ))
        } else if cfg.value_cap.is_some_and(|cap| !(max_u <= cap)) {
            Some((
                BlowupTrigger::ValueExplosion,
                format!(
                    "max|u|={max_u} at t={t_new} exceeds value_cap={}",
                    cfg.value_cap.unwrap_or_default()
                ),
            ))
        } else {
            None
        };
        if trigger.is_some() {
            blowup = trigger;
            break;
        }

        log.push(SliceLog {
            t: t_new,
            h,
            iterations: out.max_iterations,
            lip: lip_new,
            max_u,
            max_z,
            radius: radius_now,
            explosion: explosion_quantity(lip_new, lsz, max_u),
        });
        trace.push(TraceEntry {
            t: t_new,
            lip: lip_new,
            max_u,
            radius: radius_now,
        });
        slices.push(slice);
        lip = lip_new;
        t = t_new;
        next_explicit += 1;
    }

    let field = DecouplingFieldApprox {
        n: p.n,
        m: p.m,
        d: p.d,
        horizon: p.horizon,
        problem_hash: p.hash(),
        grid: cfg.grid.clone(),
        slices,
        meta: BuildMeta {
            margin: cfg.margin,
            cutoff: cutoff.as_ref().map(|c| c.radius),
        },
    };
    let blowup = blowup.map(|(trigger, detail)| BlowupReport {
        t_min_estimate: field.earliest().t,
        trigger,
        trace,
        detail,
    });
    Ok(BuildOutcome {
        field,
        blowup,
        log,
        passivity,
    })
}

fn local_l(p: &ProblemSpec, radius: f64) -> Result<f64, BuildError> {
    p.lipschitz.local_constant(radius).ok_or_else(|| {
        BuildError::Config(format!(
            "local Lipschitz table does not cover the cutoff radius {radius}"
        ))
    })
}

/// Node-wise comparison of two successive refinement levels.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementLevel {
    pub grid_scale: usize,
    pub coarse_slices: usize,
    /// `(t, max node difference)` at every coarse slice time.
    pub per_time: Vec<(f64, f64)>,
    pub max_diff: f64,
    pub tolerance: f64,
}

impl AgreementLevel {
    pub fn pass(&self) -> bool {
        self.max_diff <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementStudy {
    pub factor: usize,
    pub levels: Vec<AgreementLevel>,
}

impl RefinementStudy {
    /// `max_diff[k + 1] / max_diff[k]`.
    pub fn ratios(&self) -> Vec<f64> {
        self.levels
            .windows(2)
            .map(|w| w[1].max_diff / w[0].max_diff)
            .collect()
    }

    pub fn pass(&self) -> bool {
        self.levels.iter().all(AgreementLevel::pass)
    }
}

/// Default agreement tolerance for a field with sup norm `max_u`.
pub fn agreement_tolerance(max_u: f64) -> f64 {
    5e-3 * (1.0 + max_u)
}

/// Configuration for rebuilding `base` with its grid refined by `scale`
/// and `scale - 1` extra slice times inside every step of `base`.
pub fn refined_config(
    cfg: &BuildConfig,
    base: &DecouplingFieldApprox,
    scale: usize,
) -> Result<BuildConfig, BuildError> {
    let mut fine = cfg.clone();
    fine.grid = Arc::new(base.grid.scaled(scale)?);
    fine.schedule = StepSchedule::refined(base.latest().t, &base.times()[1..], scale);
    Ok(fine)
}

/// Compares `fine`, built with `refined_config(.., coarse, factor)`, with
/// `coarse` at the coarse nodes and coarse slice times.
pub fn agreement_level(
    coarse: &DecouplingFieldApprox,
    fine: &DecouplingFieldApprox,
    factor: usize,
    grid_scale: usize,
) -> Result<AgreementLevel, BuildError> {
    if fine.slices.len() != (coarse.slices.len() - 1) * factor + 1 {
        return Err(BuildError::Config(format!(
            "{} fine slices do not refine {} coarse slices by {factor}",
            fine.slices.len(),
            coarse.slices.len()
        )));
    }
    let mut per_time = Vec::with_capacity(coarse.slices.len());
    let mut max_u = 0.0f64;
    for (i, cs) in coarse.slices.iter().enumerate() {
        let fs = &fine.slices[i * factor];
        debug_assert_eq!(cs.t, fs.t);
        let mut diff = 0.0f64;
        for node in 0..coarse.grid.len() {
            let fnode = fine.grid.refined_index(&coarse.grid, node, factor);
            let (a, b) = (cs.u().at(node), fs.u().at(fnode));
            for (x, y) in a.iter().zip(b) {
                diff = diff.max((x - y).abs());
            }
        }
        max_u = max_u.max(cs.max_abs_u());
        per_time.push((cs.t, diff));
    }
    let max_diff = per_time.iter().map(|&(_, d)| d).fold(0.0, f64::max);
    Ok(AgreementLevel {
        grid_scale,
        coarse_slices: coarse.slices.len(),
        per_time,
        max_diff,
        tolerance: agreement_tolerance(max_u),
    })
}

/// Builds with the step schedule and the grid both refined by
/// `factor^k`, `k = 0..=levels`, and compares each level with the next at
/// the coarse nodes and coarse slice times.
///
/// Refining only the time step on a fixed grid would let interpolation
/// error accumulate over the extra steps, so space and time are refined
/// together.
pub fn refine_agreement(
    p: &ProblemSpec,
    cfg: &BuildConfig,
    factor: usize,
    levels: usize,
) -> Result<RefinementStudy, BuildError> {
    if factor < 2 || levels == 0 {
        return Err(BuildError::Config(
            "refinement needs factor >= 2 and one level".into(),
        ));
    }
    let base = build_for_mode(p, cfg)?.into_complete()?;
    let mut fields = Vec::with_capacity(levels + 1);
    let mut scale = 1usize;
    for _ in 0..levels {
        scale *= factor;
        let fine = build_for_mode(p, &refined_config(cfg, &base, scale)?)?.into_complete()?;
        fields.push(fine);
    }
    fields.insert(0, base);
    let mut out = Vec::with_capacity(levels);
    for (k, pair) in fields.windows(2).enumerate() {
        out.push(agreement_level(
            &pair[0],
            &pair[1],
            factor,
            factor.pow(k as u32),
        )?);
    }
    Ok(RefinementStudy {
        factor,
        levels: out,
    })
}

/// Result of fitting `lip(t) <= lip_T + C (T - t)^{1/4}` to a field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeReport {
    pub lip_terminal: f64,
    pub c_fit: f64,
    /// Largest `lip(t) / envelope(t)` over all slices.
    pub worst_ratio: f64,
}

impl EnvelopeReport {
    pub fn pass(&self, slack: f64) -> bool {
        self.worst_ratio <= slack
    }
}

/// Fits the growth constant on the `fit_slices` earliest slices, then
/// measures every slice against the envelope.
pub fn growth_envelope(field: &DecouplingFieldApprox, fit_slices: usize) -> EnvelopeReport {
    use crate::contraction::{fit_growth_constant, lipschitz_growth_bound};
    let lip_terminal = field.latest().lip_estimate();
    let samples: Vec<(f64, f64)> = field
        .slices
        .iter()
        .rev()
        .take(fit_slices)
        .map(|s| (field.horizon - s.t, s.lip_estimate()))
        .collect();
    let c_fit = fit_growth_constant(lip_terminal, &samples);
    let worst_ratio = field
        .slices
        .iter()
        .map(|s| {
            let env = lipschitz_growth_bound(lip_terminal, field.horizon - s.t, c_fit);
            if env > 0.0 {
                s.lip_estimate() / env
            } else if s.lip_estimate() == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    EnvelopeReport {
        lip_terminal,
        c_fit,
        worst_ratio,
    }
}

/// `max |u(t1,x) - u(t2,x)| / ((1 + |x|) |t1 - t2|^{1/2})` over node
/// values and slice pairs. At most `max_slices` evenly spread slices take
/// part.
pub fn time_continuity_modulus(field: &DecouplingFieldApprox, max_slices: usize) -> f64 {
    let count = field.slices.len();
    let stride = count.div_ceil(max_slices.max(2)).max(1);
    let picked: Vec<&FieldSlice> = field.slices.iter().step_by(stride).collect();
    let n = field.n;
    let weights: Vec<f64> = (0..field.grid.len())
        .map(|k| {
            let x = field.grid.node(k);
            1.0 + x[..n].iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect();
    let mut best = 0.0f64;
    for (i, a) in picked.iter().enumerate() {
        for b in &picked[i + 1..] {
            let dt = (a.t - b.t).abs().sqrt();
            for (k, w) in weights.iter().enumerate() {
                let du = a
                    .u()
                    .at(k)
                    .iter()
                    .zip(b.u().at(k))
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
                best = best.max(du / (w * dt));
            }
        }
    }
    best
}
