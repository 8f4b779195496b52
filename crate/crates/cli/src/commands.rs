use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use decoupling::contraction::{gamma_limit, ContractionData, ContractionError, LipschitzTriple};
use decoupling::field::{self, DecouplingFieldApprox};
use decoupling::global::{agreement_level, build_for_mode, refined_config, BuildOutcome};
use decoupling::par::Execution;
use decoupling::problem::{check_admissible, ProblemSpec};
use decoupling::simulate::{
    backward_residual, simulate_paths, variational_check, z_bound_check, SimParams,
};

use crate::problem_file::{Overrides, ProblemFile};
use crate::{io_err, CliError, Exit};

/// Residual ratio required per 2x refinement of steps and grid.
pub const RESIDUAL_RATIO: f64 = 0.7;
/// Below this the residual is rounding noise and has no useful ratio.
pub const RESIDUAL_FLOOR: f64 = 1e-10;

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(io_err("report"))?
    };
}

pub fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

/// Prints the admissibility report. `None` when the problem passes.
fn admissibility(p: &ProblemSpec, out: &mut impl Write) -> Result<Option<Exit>, CliError> {
    let report = check_admissible(p)?;
    if report.passed() {
        return Ok(None);
    }
    say!(out, "{report}");
    Ok(Some(Exit::Inadmissible))
}

pub fn check(file: &ProblemFile, out: &mut impl Write) -> Result<Exit, CliError> {
    let p = file.problem()?;
    let report = check_admissible(&p)?;
    say!(out, "{report}");
    Ok(if report.passed() {
        Exit::Ok
    } else {
        Exit::Inadmissible
    })
}

pub fn stepsize(file: &ProblemFile, o: &Overrides, out: &mut impl Write) -> Result<Exit, CliError> {
    let p = file.problem()?;
    let cfg = file.build_config(o)?;
    let l = &p.lipschitz;
    let triple = LipschitzTriple::new(l.l, l.l_sigma_z, l.l_xi_x);
    say!(
        out,
        "L={} L_sigma_z={} L_xi_x={} margin={}",
        l.l,
        l.l_sigma_z,
        l.l_xi_x,
        cfg.margin
    );
    say!(out, "gamma(0) = {}", gamma_limit(triple));
    match ContractionData::new(triple, cfg.margin, p.horizon) {
        Ok(c) => {
            say!(out, "h_max = {}", c.h_max);
            say!(out, "K = {}", c.k);
            say!(out, "gamma(h_max) = {}", c.gamma_at_max(p.horizon));
            Ok(Exit::Ok)
        }
        Err(e @ ContractionError::NoAdmissibleStep { .. }) => {
            say!(out, "{e}");
            Ok(Exit::Inadmissible)
        }
        Err(e) => Err(CliError::Usage(e.to_string())),
    }
}

fn write_log(path: &Path, p: &ProblemSpec, outcome: &BuildOutcome) -> Result<(), CliError> {
    let ctx = path.display().to_string();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(&ctx))?);
    let body = (|| -> std::io::Result<()> {
        writeln!(w, "# problem_hash={:016x} mode={}", p.hash(), p.mode)?;
        for line in &outcome.log {
            writeln!(w, "{line}")?;
        }
        for rec in &outcome.passivity {
            writeln!(w, "passivity {rec}")?;
        }
        if let Some(b) = &outcome.blowup {
            writeln!(
                w,
                "blowup trigger={} t_min={} {}",
                b.trigger, b.t_min_estimate, b.detail
            )?;
        }
        w.flush()
    })();
    body.map_err(io_err(&ctx))
}

pub fn solve(
    file: &ProblemFile,
    o: &Overrides,
    out_path: &Path,
    out: &mut impl Write,
) -> Result<Exit, CliError> {
    let p = file.problem()?;
    if let Some(exit) = admissibility(&p, out)? {
        return Ok(exit);
    }
    let cfg = file.build_config(o)?;
    let outcome = build_for_mode(&p, &cfg)?;
    field::save(&outcome.field, out_path)?;
    write_log(&log_path(out_path), &p, &outcome)?;
    let f = &outcome.field;
    say!(
        out,
        "slices={} t=[{}, {}] max_lip={} cutoff={}",
        f.slices.len(),
        f.earliest().t,
        f.latest().t,
        f.max_lip(),
        f.meta
            .cutoff
            .map_or_else(|| "none".to_string(), |r| r.to_string())
    );
    match &outcome.blowup {
        None => Ok(Exit::Ok),
        Some(b) => {
            say!(
                out,
                "BLOWUP trigger={} t_min={} ({})",
                b.trigger,
                b.t_min_estimate,
                b.detail
            );
            Ok(Exit::Blowup)
        }
    }
}

pub fn maxinterval(
    file: &ProblemFile,
    o: &Overrides,
    out: &mut impl Write,
) -> Result<Exit, CliError> {
    let p = file.problem()?;
    if let Some(exit) = admissibility(&p, out)? {
        say!(out, "refused: the problem fails the admissibility check");
        return Ok(exit);
    }
    let cfg = file.build_config(o)?;
    let outcome = build_for_mode(&p, &cfg)?;
    match &outcome.blowup {
        Some(b) => {
            say!(out, "t_min ≈ {:.2} trigger={}", b.t_min_estimate, b.trigger);
            say!(out, "t_min_estimate = {}", b.t_min_estimate);
            say!(out, "{}", b.detail);
            Ok(Exit::Blowup)
        }
        None => {
            say!(out, "t_min = t_stop (no blowup)");
            say!(out, "t_stop = {}", cfg.t_stop);
            Ok(Exit::Ok)
        }
    }
}

fn load_field(path: &Path, p: &ProblemSpec) -> Result<DecouplingFieldApprox, CliError> {
    let f = field::load(path)?;
    if f.problem_hash != p.hash() {
        return Err(CliError::Usage(format!(
            "{} was built for problem {:016x}, this file is {:016x}",
            path.display(),
            f.problem_hash,
            p.hash()
        )));
    }
    Ok(f)
}

fn sim_params(file: &ProblemFile, field: &DecouplingFieldApprox, steps: usize) -> SimParams {
    SimParams {
        t0: file.sim.t0.unwrap_or(field.earliest().t),
        paths: file.paths(),
        steps,
        seed: file.seed(),
        exec: Execution::Parallel,
    }
}

pub fn simulate(
    file: &ProblemFile,
    field_path: &Path,
    csv_path: &Path,
    out: &mut impl Write,
) -> Result<Exit, CliError> {
    let p = file.problem()?;
    let field = load_field(field_path, &p)?;
    let params = sim_params(file, &field, file.sim_steps());
    let bundle = simulate_paths(&field, &p, &file.x0(), &params)?;
    let ctx = csv_path.display().to_string();
    let mut w = BufWriter::new(File::create(csv_path).map_err(io_err(&ctx))?);
    bundle
        .write_csv(p.hash(), &mut w)
        .and_then(|_| w.flush())
        .map_err(io_err(&ctx))?;
    say!(
        out,
        "paths={} steps={} t0={} seed={} escaped={}",
        bundle.paths,
        bundle.steps(),
        bundle.t0,
        bundle.seed,
        bundle.escaped
    );
    Ok(Exit::Ok)
}

fn tag(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Runs the invariant suite against a field, building it when no
/// snapshot is given. The refinement checks compare against a rebuild
/// with the field's grid and slice times refined by two. Exit 0 iff every check passes.
pub fn verify(
    file: &ProblemFile,
    o: &Overrides,
    field_path: Option<&Path>,
    out: &mut impl Write,
) -> Result<Exit, CliError> {
    let p = file.problem()?;
    if let Some(exit) = admissibility(&p, out)? {
        return Ok(exit);
    }
    let cfg = file.build_config(o)?;
    let field = match field_path {
        Some(path) => load_field(path, &p)?,
        None => build_for_mode(&p, &cfg)?.into_complete()?,
    };
    let x0 = file.x0();
    let mut all = true;

    let params = sim_params(file, &field, file.sim_steps());
    let bundle = simulate_paths(&field, &p, &x0, &params)?;
    let coarse = backward_residual(&bundle, &p)?;
    // One refined build serves both the residual ratio and the agreement
    // check: grid and slice count doubled.
    let fine_field = build_for_mode(&p, &refined_config(&cfg, &field, 2)?)?.into_complete()?;
    let fine_params = SimParams {
        steps: params.steps * 2,
        ..params
    };
    let fine = backward_residual(&simulate_paths(&fine_field, &p, &x0, &fine_params)?, &p)?;
    let tol = file.residual_tol();
    let ratio_ok =
        coarse.max_abs <= RESIDUAL_FLOOR || fine.max_abs <= RESIDUAL_RATIO * coarse.max_abs;
    let pass = coarse.mean_abs <= tol && ratio_ok;
    all &= pass;
    say!(
        out,
        "{} residual mean|R|={:e} (tol {:e}) max|R|={:e} refined max|R|={:e} ratio={:.3}",
        tag(pass),
        coarse.mean_abs,
        tol,
        coarse.max_abs,
        fine.max_abs,
        if coarse.max_abs > 0.0 {
            fine.max_abs / coarse.max_abs
        } else {
            0.0
        }
    );

    match z_bound_check(&bundle, &field, &p) {
        Ok(z) => {
            all &= z.pass();
            say!(
                out,
                "{} z_bound max|Z|={} bound={} tightness={:.4}",
                tag(z.pass()),
                z.max_z,
                z.bound,
                z.tightness()
            );
        }
        Err(decoupling::simulate::SimError::MissingSupSigma) => {
            say!(out, "SKIP z_bound sup_sigma not declared");
        }
        Err(e) => return Err(e.into()),
    }

    let mut v = vec![0.0; p.n];
    v[0] = 1.0;
    let min_step = cfg
        .grid
        .axes()
        .iter()
        .map(|a| a.step())
        .fold(f64::INFINITY, f64::min);
    let eps = file.sim.eps.unwrap_or(1e-3 * min_step);
    let var = variational_check(&field, &p, &x0, &v, eps, &params)?;
    all &= var.pass();
    say!(
        out,
        "{} variational |D_Y(t0)|={} bound={} max|D_X|={} max|D_Y|={}",
        tag(var.pass()),
        var.dy0_norm(),
        var.bound,
        var.max_dx,
        var.max_dy
    );

    let level = agreement_level(&field, &fine_field, 2, 1)?;
    all &= level.pass();
    say!(
        out,
        "{} refine_agreement max_diff={:e} tolerance={:e}",
        tag(level.pass()),
        level.max_diff,
        level.tolerance
    );

    say!(out, "VERIFY {}", tag(all));
    Ok(if all { Exit::Ok } else { Exit::VerifyFailed })
}
