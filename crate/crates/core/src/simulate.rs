//! Forward simulation along a built field and the pathwise checks that
//! use it.
//!
//! `X` follows Euler-Maruyama with `Y = u(t, X)` read from the field and
//! `Z` read from the stored control slices. The backward equation is not
//! imposed; it is what [`backward_residual`] measures.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::expr::{EvalError, Point};
use crate::field::DecouplingFieldApprox;
use crate::par::{map_indexed, Execution};
use crate::problem::ProblemSpec;

/// Slack on the control bound for quadrature error.
pub const Z_BOUND_SLACK: f64 = 0.05;
/// Additive slack on the sensitivity bound.
pub const SENSITIVITY_SLACK: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("start time {t0} outside the field's range [{earliest}, {horizon}]")]
    StartTime {
        t0: f64,
        earliest: f64,
        horizon: f64,
    },
    #[error("initial point has {found} coordinates, expected {expected}")]
    Dimension { found: usize, expected: usize },
    #[error("field does not match the problem dimensions")]
    Mismatch,
    #[error("at least one path is required")]
    NoPaths,
    #[error("coefficient evaluation failed on path {path}, step {step}: {source}")]
    Eval {
        path: usize,
        step: usize,
        source: EvalError,
    },
    #[error("`sup_sigma` must be declared for the control bound")]
    MissingSupSigma,
    #[error("perturbation size must be positive")]
    Epsilon,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    pub t0: f64,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub exec: Execution,
}

/// Simulated trajectories, path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub paths: usize,
    pub times: Vec<f64>,
    /// `paths x (steps + 1) x d`, starting at zero.
    pub w: Vec<f64>,
    /// `paths x (steps + 1) x n`.
    pub x: Vec<f64>,
    /// `paths x (steps + 1) x m`.
    pub y: Vec<f64>,
    /// `paths x steps x m x d`.
    pub z: Vec<f64>,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub t0: f64,
    /// Paths that left the grid box at least once.
    pub escaped: usize,
}

impl PathBundle {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    fn at<'a>(
        &self,
        buf: &'a [f64],
        width: usize,
        path: usize,
        k: usize,
        per_path: usize,
    ) -> &'a [f64] {
        let start = path * per_path * width + k * width;
        &buf[start..start + width]
    }

    pub fn w_at(&self, path: usize, k: usize) -> &[f64] {
        self.at(&self.w, self.d, path, k, self.times.len())
    }

    pub fn x_at(&self, path: usize, k: usize) -> &[f64] {
        self.at(&self.x, self.n, path, k, self.times.len())
    }

    pub fn y_at(&self, path: usize, k: usize) -> &[f64] {
        self.at(&self.y, self.m, path, k, self.times.len())
    }

    pub fn z_at(&self, path: usize, k: usize) -> &[f64] {
        self.at(&self.z, self.m * self.d, path, k, self.steps())
    }

    /// Largest Euclidean norm of a control value.
    pub fn max_abs_z(&self) -> f64 {
        self.z
            .chunks(self.m * self.d)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// CSV export: a `#` comment line with the problem hash and seed, a
    /// column header, then one row per path and step. The control columns
    /// are empty on the final row of each path.
    pub fn write_csv(&self, problem_hash: u64, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "# problem_hash={problem_hash:016x} seed={}", self.seed)?;
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((1..=self.d).map(|j| format!("W{j}")));
        header.extend((1..=self.n).map(|i| format!("X{i}")));
        header.extend((1..=self.m).map(|i| format!("Y{i}")));
        for i in 1..=self.m {
            header.extend((1..=self.d).map(|j| format!("Z{i}_{j}")));
        }
        writeln!(out, "{}", header.join(","))?;
        let steps = self.steps();
        let mut row = String::new();
        for p in 0..self.paths {
            for k in 0..=steps {
                row.clear();
                row.push_str(&format!("{p},{k},{}", self.times[k]));
                let mut push = |vals: &[f64]| {
                    for v in vals {
                        row.push(',');
                        row.push_str(&v.to_string());
                    }
                };
                push(self.w_at(p, k));
                push(self.x_at(p, k));
                push(self.y_at(p, k));
                if k < steps {
                    push(self.z_at(p, k));
                } else {
                    row.push_str(&",".repeat(self.m * self.d));
                }
                writeln!(out, "{row}")?;
            }
        }
        Ok(())
    }
}

struct PathData {
    w: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    escaped: bool,
}

/// Uniform path times from `t0` to the horizon.
pub fn path_times(t0: f64, horizon: f64, steps: usize) -> Vec<f64> {
    if steps == 0 {
        return vec![t0];
    }
    let dt = (horizon - t0) / steps as f64;
    (0..=steps)
        .map(|k| {
            if k == steps {
                horizon
            } else {
                t0 + k as f64 * dt
            }
        })
        .collect()
}

/// Simulates `params.paths` paths from `x0` at `params.t0`.
///
/// Path `i` draws its increments from its own ChaCha stream, so the result
/// does not depend on how paths are scheduled.
pub fn simulate_paths(
    field: &DecouplingFieldApprox,
    p: &ProblemSpec,
    x0: &[f64],
    params: &SimParams,
) -> Result<PathBundle, SimError> {
    let (n, m, d) = (p.n, p.m, p.d);
    if (field.n, field.m, field.d) != (n, m, d) {
        return Err(SimError::Mismatch);
    }
    if x0.len() != n {
        return Err(SimError::Dimension {
            found: x0.len(),
            expected: n,
        });
    }
    if params.paths == 0 {
        return Err(SimError::NoPaths);
    }
    let earliest = field.earliest().t;
    let tol = 1e-9 * (1.0 + field.horizon.abs());
    if !(params.t0 >= earliest - tol && params.t0 <= field.horizon) {
        return Err(SimError::StartTime {
            t0: params.t0,
            earliest,
            horizon: field.horizon,
        });
    }
    let times = path_times(params.t0, field.horizon, params.steps);
    let results = map_indexed(params.exec, params.paths, |path| {
        simulate_one(field, p, x0, &times, params.seed, path)
    });
    let per = times.len();
    let mut bundle = PathBundle {
        n,
        m,
        d,
        paths: params.paths,
        w: Vec::with_capacity(params.paths * per * d),
        x: Vec::with_capacity(params.paths * per * n),
        y: Vec::with_capacity(params.paths * per * m),
        z: Vec::with_capacity(params.paths * (per - 1) * m * d),
        times,
        seed: params.seed,
        x0: x0.to_vec(),
        t0: params.t0,
        escaped: 0,
    };
    for r in results {
        let r = r?;
        bundle.w.extend_from_slice(&r.w);
        bundle.x.extend_from_slice(&r.x);
        bundle.y.extend_from_slice(&r.y);
        bundle.z.extend_from_slice(&r.z);
        bundle.escaped += usize::from(r.escaped);
    }
    Ok(bundle)
}

fn simulate_one(
    field: &DecouplingFieldApprox,
    p: &ProblemSpec,
    x0: &[f64],
    times: &[f64],
    seed: u64,
    path: usize,
) -> Result<PathData, SimError> {
    let (n, m, d) = (p.n, p.m, p.d);
    let steps = times.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    let mut out = PathData {
        w: Vec::with_capacity((steps + 1) * d),
        x: Vec::with_capacity((steps + 1) * n),
        y: Vec::with_capacity((steps + 1) * m),
        z: Vec::with_capacity(steps * m * d),
        escaped: false,
    };
    let mut x = x0.to_vec();
    let mut w = vec![0.0; d];
    let mut y = vec![0.0; m];
    let mut z = vec![0.0; m * d];
    let mut dw = vec![0.0; d];
    let mut mu = vec![0.0; n];
    let mut sigma = vec![0.0; n * d];
    for k in 0..=steps {
        let t = times[k];
        field.value_into(t, &x, &mut y);
        out.w.extend_from_slice(&w);
        out.x.extend_from_slice(&x);
        out.y.extend_from_slice(&y);
        out.escaped |= !field.grid.contains(&x);
        if k == steps {
            break;
        }
        field.control_slice(t).interpolate_z_into(&x, &mut z);
        out.z.extend_from_slice(&z);
        let dt = times[k + 1] - t;
        let pt = Point::new(t, &x, &y, &z, d);
        let eval_err = |source| SimError::Eval {
            path,
            step: k,
            source,
        };
        for i in 0..n {
            mu[i] = p.mu[i].eval(&pt).map_err(eval_err)?;
        }
        for j in 0..n * d {
            sigma[j] = p.sigma[j].eval(&pt).map_err(eval_err)?;
        }
        let sd = dt.sqrt();
        for v in dw.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v = sd * g;
        }
        for i in 0..n {
            let mut step = mu[i] * dt;
            for j in 0..d {
                step += sigma[i * d + j] * dw[j];
            }
            x[i] += step;
        }
        for (wj, dwj) in w.iter_mut().zip(&dw) {
            *wj += dwj;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStats {
    /// Per path, the largest residual over the `m` components.
    pub per_path: Vec<f64>,
    pub mean_abs: f64,
    pub max_abs: f64,
    /// The decoupling condition holds by construction along simulated
    /// paths, so this is always zero.
    pub decoupling_residual: f64,
}

/// `R = Y_end - Y_start - sum f dt - sum Z dW` on every path.
pub fn backward_residual(b: &PathBundle, p: &ProblemSpec) -> Result<ResidualStats, SimError> {
    let (m, d) = (b.m, b.d);
    let steps = b.steps();
    let mut per_path = Vec::with_capacity(b.paths);
    let mut r = vec![0.0; m];
    for path in 0..b.paths {
        let (y0, yn) = (b.y_at(path, 0), b.y_at(path, steps));
        for a in 0..m {
            r[a] = yn[a] - y0[a];
        }
        for k in 0..steps {
            let dt = b.times[k + 1] - b.times[k];
            let z = b.z_at(path, k);
            let pt = Point::new(b.times[k], b.x_at(path, k), b.y_at(path, k), z, d);
            let (w0, w1) = (b.w_at(path, k), b.w_at(path, k + 1));
            for a in 0..m {
                let f = p.f[a].eval(&pt).map_err(|source| SimError::Eval {
                    path,
                    step: k,
                    source,
                })?;
                r[a] -= f * dt;
                for j in 0..d {
                    r[a] -= z[a * d + j] * (w1[j] - w0[j]);
                }
            }
        }
        per_path.push(r.iter().map(|v| v.abs()).fold(0.0, f64::max));
    }
    let max_abs = per_path.iter().copied().fold(0.0, f64::max);
    let mean_abs = per_path.iter().sum::<f64>() / per_path.len().max(1) as f64;
    Ok(ResidualStats {
        per_path,
        mean_abs,
        max_abs,
        decoupling_residual: 0.0,
    })
}

/// `log2(coarse / fine)` of the largest residuals of two runs, the second
/// one refined by a factor of two.
pub fn refinement_slope(coarse: &ResidualStats, fine: &ResidualStats) -> f64 {
    (coarse.max_abs / fine.max_abs).log2()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZBoundReport {
    pub max_z: f64,
    pub bound: f64,
}

impl ZBoundReport {
    pub fn pass(&self) -> bool {
        self.max_z <= self.bound
    }

    /// `max_z / bound`; close to one when the bound is attained.
    pub fn tightness(&self) -> f64 {
        if self.bound == 0.0 {
            if self.max_z == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            self.max_z / self.bound
        }
    }
}

/// Compares the controls along the paths with the field's largest slice
/// Lipschitz estimate times the declared bound on `sigma`.
pub fn z_bound_check(
    b: &PathBundle,
    field: &DecouplingFieldApprox,
    p: &ProblemSpec,
) -> Result<ZBoundReport, SimError> {
    let sup_sigma = p.lipschitz.sup_sigma.ok_or(SimError::MissingSupSigma)?;
    Ok(ZBoundReport {
        max_z: b.max_abs_z(),
        bound: field.max_lip() * sup_sigma * (1.0 + Z_BOUND_SLACK),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalReport {
    /// `(X+ - X-) / 2 eps` at the start time.
    pub dx0: Vec<f64>,
    /// `(Y+ - Y-) / 2 eps` at the start time.
    pub dy0: Vec<f64>,
    /// Largest `|D_X|` and `|D_Y|` over all paths and times.
    pub max_dx: f64,
    pub max_dy: f64,
    pub finite: bool,
    /// `(lip(t0) + slack) |v|`.
    pub bound: f64,
}

impl VariationalReport {
    pub fn dy0_norm(&self) -> f64 {
        self.dy0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn pass(&self) -> bool {
        self.finite && self.dy0_norm() <= self.bound
    }
}

/// Central differences of the paths started at `x0 +- eps v` with common
/// random numbers.
pub fn variational_check(
    field: &DecouplingFieldApprox,
    p: &ProblemSpec,
    x0: &[f64],
    v: &[f64],
    eps: f64,
    params: &SimParams,
) -> Result<VariationalReport, SimError> {
    if !(eps > 0.0) {
        return Err(SimError::Epsilon);
    }
    if v.len() != x0.len() {
        return Err(SimError::Dimension {
            found: v.len(),
            expected: x0.len(),
        });
    }
    let plus: Vec<f64> = x0.iter().zip(v).map(|(x, v)| x + eps * v).collect();
    let minus: Vec<f64> = x0.iter().zip(v).map(|(x, v)| x - eps * v).collect();
    let bp = simulate_paths(field, p, &plus, params)?;
    let bm = simulate_paths(field, p, &minus, params)?;
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect()
    };
    let norm = |v: &[f64]| v.iter().map(|c| c * c).sum::<f64>().sqrt();
    let (mut max_dx, mut max_dy, mut finite) = (0.0f64, 0.0f64, true);
    for path in 0..bp.paths {
        for k in 0..bp.times.len() {
            let dx = diff(bp.x_at(path, k), bm.x_at(path, k));
            let dy = diff(bp.y_at(path, k), bm.y_at(path, k));
            finite &= dx.iter().chain(&dy).all(|c| c.is_finite());
            max_dx = max_dx.max(norm(&dx));
            max_dy = max_dy.max(norm(&dy));
        }
    }
    let v_norm = norm(v);
    Ok(VariationalReport {
        dx0: diff(bp.x_at(0, 0), bm.x_at(0, 0)),
        dy0: diff(bp.y_at(0, 0), bm.y_at(0, 0)),
        max_dx,
        max_dy,
        finite,
        bound: (field.lip_at(params.t0) + SENSITIVITY_SLACK) * v_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Axis, SpatialGrid};
    use crate::global::{build_field, BuildConfig, StepSchedule};
    use crate::problem::fixtures::scalar;
    use crate::problem::LipschitzDecl;

    fn grid(min: f64, max: f64, count: usize) -> SpatialGrid {
        SpatialGrid::new(vec![Axis::new(min, max, count)]).unwrap()
    }

    fn params(t0: f64, paths: usize, steps: usize) -> SimParams {
        SimParams {
            t0,
            paths,
            steps,
            seed: 7,
            exec: Execution::Parallel,
        }
    }

    fn linear_feedback(steps: usize) -> (ProblemSpec, DecouplingFieldApprox) {
        let mut decl = LipschitzDecl::new(1.0, 0.0, 1.0);
        decl.sup_sigma = Some(0.0);
        let p = scalar(1.0, "y1", "0", "0", "x1", decl);
        let mut cfg = BuildConfig::new(grid(-5.0, 5.0, 201));
        cfg.t_stop = 0.5;
        cfg.schedule = StepSchedule::uniform(1.0, 0.5, steps);
        (
            p.clone(),
            build_field(&p, &cfg).unwrap().into_complete().unwrap(),
        )
    }

    fn brownian() -> (ProblemSpec, DecouplingFieldApprox) {
        let mut decl = LipschitzDecl::new(0.0, 0.0, 1.0);
        decl.sup_sigma = Some(1.0);
        let p = scalar(1.0, "0", "1", "0", "x1", decl);
        let f = build_field(&p, &BuildConfig::new(grid(-4.0, 4.0, 33)))
            .unwrap()
            .into_complete()
            .unwrap();
        (p, f)
    }

    #[test]
    fn linear_feedback_paths_are_exact() {
        let (p, f) = linear_feedback(100);
        let b = simulate_paths(&f, &p, &[1.0], &params(0.5, 4, 100)).unwrap();
        for path in 0..b.paths {
            for (k, &s) in b.times.iter().enumerate() {
                assert!((b.x_at(path, k)[0] - 2.0 * s).abs() <= 1e-6);
                assert!((b.y_at(path, k)[0] - 2.0).abs() <= 1e-6);
            }
        }
        assert!(b.z.iter().all(|&z| z == 0.0));
        let r = backward_residual(&b, &p).unwrap();
        assert!(r.max_abs <= 1e-6);
        assert_eq!(r.decoupling_residual, 0.0);
        assert!(z_bound_check(&b, &f, &p).unwrap().pass());
    }

    #[test]
    fn brownian_fixture() {
        let (p, f) = brownian();
        let b = simulate_paths(&f, &p, &[0.3], &params(0.0, 200, 50)).unwrap();
        for path in 0..b.paths {
            for k in 0..=b.steps() {
                // u(t, x) = x is reproduced by the interpolant.
                assert!((b.y_at(path, k)[0] - b.x_at(path, k)[0]).abs() <= 1e-12);
            }
            for k in 0..b.steps() {
                assert!((b.z_at(path, k)[0] - 1.0).abs() <= 0.02);
            }
        }
        let z = z_bound_check(&b, &f, &p).unwrap();
        assert!(z.pass() && z.tightness() >= 0.95, "{z:?}");
        let r = backward_residual(&b, &p).unwrap();
        assert!(r.max_abs <= 1e-10);
    }

    #[test]
    fn corrupted_control_fails_the_bound() {
        let (p, mut f) = brownian();
        let k = f.slices.len() - 1;
        f.slices[k] = f.slices[k].with_scaled_z(10.0);
        let b = simulate_paths(&f, &p, &[0.3], &params(0.0, 10, 10)).unwrap();
        assert!(!z_bound_check(&b, &f, &p).unwrap().pass());
    }

    #[test]
    fn zero_steps_is_the_initial_point() {
        let (p, f) = linear_feedback(50);
        let b = simulate_paths(&f, &p, &[1.5], &params(0.5, 3, 0)).unwrap();
        assert_eq!(b.times, vec![0.5]);
        assert!(b.z.is_empty());
        for path in 0..3 {
            assert_eq!(b.x_at(path, 0), &[1.5]);
            assert_eq!(b.y_at(path, 0), f.value(0.5, &[1.5]).as_slice());
        }
    }

    #[test]
    fn constant_fixture_has_no_residual() {
        let p = scalar(1.0, "0", "1", "0", "0.7", LipschitzDecl::new(0.0, 0.0, 0.0));
        let f = build_field(&p, &BuildConfig::new(grid(-2.0, 2.0, 9)))
            .unwrap()
            .into_complete()
            .unwrap();
        let b = simulate_paths(&f, &p, &[0.0], &params(0.0, 50, 20)).unwrap();
        assert!(backward_residual(&b, &p).unwrap().max_abs <= 1e-12);
    }

    #[test]
    fn seeds_reproduce_and_execution_does_not_matter() {
        let (p, f) = brownian();
        let mut prm = params(0.0, 64, 20);
        let a = simulate_paths(&f, &p, &[0.3], &prm).unwrap();
        let b = simulate_paths(&f, &p, &[0.3], &prm).unwrap();
        assert_eq!(a, b);
        prm.exec = Execution::Sequential;
        let c = simulate_paths(&f, &p, &[0.3], &prm).unwrap();
        assert_eq!(a, c);
        prm.seed = 8;
        assert_ne!(a, simulate_paths(&f, &p, &[0.3], &prm).unwrap());
        // Paths are independent streams: a smaller bundle is a prefix.
        prm.seed = 7;
        prm.paths = 10;
        let small = simulate_paths(&f, &p, &[0.3], &prm).unwrap();
        assert_eq!(small.w[..], a.w[..small.w.len()]);
    }

    #[test]
    fn csv_export() {
        let (p, f) = brownian();
        let b = simulate_paths(&f, &p, &[0.3], &params(0.0, 2, 3)).unwrap();
        let mut out = Vec::new();
        b.write_csv(p.hash(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# problem_hash=") && lines[0].ends_with("seed=7"));
        assert_eq!(lines[1], "path,step,t,W1,X1,Y1,Z1_1");
        assert_eq!(lines.len(), 2 + 2 * 4);
        assert!(lines[5].ends_with(','));
        assert_eq!(lines[2].split(',').count(), 7);
    }

    #[test]
    fn sensitivity_of_linear_feedback() {
        let (p, f) = linear_feedback(50);
        let eps = 2f64.powi(-10);
        let r = variational_check(&f, &p, &[1.0], &[1.0], eps, &params(0.5, 4, 50)).unwrap();
        assert_eq!(r.dx0, vec![1.0]);
        assert!((r.dy0[0] - 2.0).abs() <= 1e-6, "{r:?}");
        assert!(r.pass());
        let zero = variational_check(&f, &p, &[1.0], &[0.0], eps, &params(0.5, 4, 50)).unwrap();
        assert_eq!((zero.max_dx, zero.max_dy), (0.0, 0.0));
    }

    #[test]
    fn start_before_field_is_rejected() {
        let (p, f) = linear_feedback(50);
        assert!(matches!(
            simulate_paths(&f, &p, &[1.0], &params(0.2, 1, 1)),
            Err(SimError::StartTime { .. })
        ));
    }
}
