//! One backward step of the decoupling field.
//!
//! At every grid node `x` the pair `(Y, Z)` is the fixed point of
//!
//! ```text
//! X'(w) = x + mu(t,x,Y,Z) h + sigma(t,x,Y,Z) sqrt(h) w
//! Y     = E[U(X')] - f(t,x,Y,Z) h
//! Z     = E[U(X') w^T] / sqrt(h)
//! ```
//!
//! where `U` interpolates the next (later) slice and the expectation over
//! `w ~ N(0, I_d)` uses a tensor Gauss-Hermite rule. Nodes are independent
//! and are solved as a parallel map; output order is node order.

mod quadrature;

use thiserror::Error;

pub use quadrature::{
    gauss_hermite, gauss_hermite_1d, QuadratureError, QuadratureRule, MAX_RULE_DIM, MAX_RULE_NODES,
};

use crate::expr::{EvalError, Point};
use crate::field::FieldSlice;
use crate::par::{map_indexed, Execution};
use crate::problem::ProblemSpec;

pub const DEFAULT_QUAD_ORDER: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardConfig {
    /// Stop when `max(|dY|, |dZ|)` falls to this level.
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation factor in `(0, 1]`.
    pub damping: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            tol: 1e-12,
            max_iter: 200,
            damping: 1.0,
        }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Result<(), StepError> {
        if !(self.tol > 0.0) || self.max_iter == 0 || !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(StepError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("picard iteration diverged at t={t}, node {node}: {reason}")]
    PicardDivergence { t: f64, node: usize, reason: String },
    #[error("quadrature rule dimension {rule} does not match d={d}")]
    RuleDimension { rule: usize, d: usize },
    #[error("invalid picard configuration: {0}")]
    Config(String),
}

/// Everything a backward step reads; shared read-only across nodes.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub problem: &'a ProblemSpec,
    pub rule: &'a QuadratureRule,
    pub picard: &'a PicardConfig,
    /// Radius of the `(y, z)` projection applied inside the coefficients.
    pub cutoff: Option<f64>,
    pub exec: Execution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub slice: FieldSlice,
    pub max_iterations: usize,
    /// Largest per-node update size at each Picard iteration.
    pub deltas: Vec<f64>,
}

/// Euclidean projection of the stacked `(y, z)` vector onto the ball of
/// radius `radius`.
pub fn project_ball(y: &mut [f64], z: &mut [f64], radius: f64) {
    let norm = y.iter().chain(z.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > radius {
        let s = radius / norm;
        y.iter_mut().chain(z.iter_mut()).for_each(|v| *v *= s);
    }
}

struct NodeSolution {
    y: Vec<f64>,
    z: Vec<f64>,
    deltas: Vec<f64>,
}

/// Advances from `next` (at `t + h`) to a new slice at `t`.
pub fn backward_step(
    next: &FieldSlice,
    t: f64,
    h: f64,
    ctx: &StepContext<'_>,
) -> Result<StepOutput, StepError> {
    let p = ctx.problem;
    if ctx.rule.dim != p.d {
        return Err(StepError::RuleDimension {
            rule: ctx.rule.dim,
            d: p.d,
        });
    }
    ctx.picard.validate()?;
    let grid = next.grid().clone();
    let results = map_indexed(ctx.exec, grid.len(), |node| {
        solve_node(next, t, h, ctx, node)
    });
    let (m, d) = (p.m, p.d);
    let mut u = Vec::with_capacity(grid.len() * m);
    let mut z = Vec::with_capacity(grid.len() * m * d);
    let mut deltas: Vec<f64> = Vec::new();
    let mut max_iterations = 0;
    for r in results {
        let r = r?;
        u.extend_from_slice(&r.y);
        z.extend_from_slice(&r.z);
        max_iterations = max_iterations.max(r.deltas.len());
        for (k, &dv) in r.deltas.iter().enumerate() {
            match deltas.get_mut(k) {
                Some(slot) => *slot = slot.max(dv),
                None => deltas.push(dv),
            }
        }
    }
    Ok(StepOutput {
        slice: FieldSlice::new(t, grid, m, d, u, Some(z)),
        max_iterations,
        deltas,
    })
}

fn solve_node(
    next: &FieldSlice,
    t: f64,
    h: f64,
    ctx: &StepContext<'_>,
    node: usize,
) -> Result<NodeSolution, StepError> {
    let p = ctx.problem;
    let (n, m, d) = (p.n, p.m, p.d);
    let rule = ctx.rule;
    let cfg = ctx.picard;
    let grid = next.grid();
    let xs = grid.node(node);
    let x = &xs[..n];
    let rh = h.sqrt();
    let diverged = |reason: String| StepError::PicardDivergence { t, node, reason };
    let eval = |e: &crate::expr::Expr, y: &[f64], z: &[f64]| -> Result<f64, StepError> {
        e.eval(&Point::new(t, x, y, z, d)).map_err(|err| match err {
            EvalError::Domain { .. } | EvalError::Dimension { .. } => diverged(err.to_string()),
        })
    };

    let mut y = next.interpolate(x);
    let mut z = match next.z() {
        Some(prev) => prev.at(node).to_vec(),
        None => vec![0.0; m * d],
    };
    let mut yc = vec![0.0; m];
    let mut zc = vec![0.0; m * d];
    let mut mu = vec![0.0; n];
    let mut sigma = vec![0.0; n * d];
    let mut xq = vec![0.0; n];
    let mut uq = vec![0.0; m];
    let mut u_ref = vec![0.0; m];
    let mut ey = vec![0.0; m];
    let mut ez = vec![0.0; m * d];
    let mut deltas = Vec::new();

    for _ in 0..cfg.max_iter {
        yc.copy_from_slice(&y);
        zc.copy_from_slice(&z);
        if let Some(radius) = ctx.cutoff {
            project_ball(&mut yc, &mut zc, radius);
        }
        for i in 0..n {
            mu[i] = eval(&p.mu[i], &yc, &zc)?;
        }
        for k in 0..n * d {
            sigma[k] = eval(&p.sigma[k], &yc, &zc)?;
        }
        let degenerate = sigma.iter().all(|&s| s == 0.0);
        ey.iter_mut().for_each(|v| *v = 0.0);
        ez.iter_mut().for_each(|v| *v = 0.0);
        if degenerate {
            for i in 0..n {
                xq[i] = x[i] + mu[i] * h;
            }
            next.interpolate_into(&xq, &mut ey);
        } else {
            // Accumulate deviations from the first node's value so that a
            // constant `U` gives exactly that constant and a zero control.
            for q in 0..rule.len() {
                let w = rule.node(q);
                for i in 0..n {
                    let mut v = x[i] + mu[i] * h;
                    for j in 0..d {
                        v += sigma[i * d + j] * rh * w[j];
                    }
                    xq[i] = v;
                }
                if q == 0 {
                    next.interpolate_into(&xq, &mut u_ref);
                    continue;
                }
                next.interpolate_into(&xq, &mut uq);
                let wq = rule.weights[q];
                for a in 0..m {
                    let dev = uq[a] - u_ref[a];
                    ey[a] += wq * dev;
                    for j in 0..d {
                        ez[a * d + j] += wq * dev * w[j];
                    }
                }
            }
            for a in 0..m {
                ey[a] += u_ref[a];
                for j in 0..d {
                    ez[a * d + j] /= rh;
                }
            }
        }
        let mut delta = 0.0f64;
        let alpha = cfg.damping;
        for a in 0..m {
            let target = ey[a] - eval(&p.f[a], &yc, &zc)? * h;
            let new = if alpha == 1.0 {
                target
            } else {
                (1.0 - alpha) * y[a] + alpha * target
            };
            delta = delta.max((new - y[a]).abs());
            y[a] = new;
        }
        for k in 0..m * d {
            let new = if alpha == 1.0 {
                ez[k]
            } else {
                (1.0 - alpha) * z[k] + alpha * ez[k]
            };
            delta = delta.max((new - z[k]).abs());
            z[k] = new;
        }
        if !delta.is_finite() || y.iter().chain(&z).any(|v| !v.is_finite()) {
            return Err(diverged("non-finite iterate".into()));
        }
        deltas.push(delta);
        if delta <= cfg.tol {
            return Ok(NodeSolution { y, z, deltas });
        }
    }
    Err(diverged(format!(
        "no convergence after {} iterations (last update {:e})",
        cfg.max_iter,
        deltas.last().copied().unwrap_or(f64::NAN)
    )))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::field::{Axis, SpatialGrid};
    use crate::problem::fixtures::scalar;
    use crate::problem::LipschitzDecl;

    fn grid(min: f64, max: f64, count: usize) -> Arc<SpatialGrid> {
        Arc::new(SpatialGrid::new(vec![Axis::new(min, max, count)]).unwrap())
    }

    fn run(
        p: &ProblemSpec,
        next: &FieldSlice,
        t: f64,
        h: f64,
        order: usize,
        picard: PicardConfig,
    ) -> StepOutput {
        let rule = gauss_hermite(p.d, order).unwrap();
        let ctx = StepContext {
            problem: p,
            rule: &rule,
            picard: &picard,
            cutoff: None,
            exec: Execution::Sequential,
        };
        backward_step(next, t, h, &ctx).unwrap()
    }

    #[test]
    fn closed_form_field_is_a_fixed_point() {
        let p = scalar(1.0, "y1", "0", "0", "x1", LipschitzDecl::new(1.0, 0.0, 1.0));
        let (tau, h) = (0.3, 0.02);
        let next = FieldSlice::from_fn(1.0 - tau, grid(-5.0, 5.0, 51), 1, 1, |x| {
            vec![x[0] / (1.0 - tau)]
        });
        let out = run(&p, &next, 1.0 - tau - h, h, 5, PicardConfig::default());
        let g = next.grid();
        for k in 0..g.len() {
            let x = g.node(k)[0];
            let want = x / (1.0 - tau - h);
            assert!((out.slice.u_values()[k] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
        assert!(out.slice.z_values().unwrap().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn no_dynamics_keeps_terminal_data() {
        let p = scalar(
            1.0,
            "0",
            "0",
            "0",
            "tanh(x1)",
            LipschitzDecl::new(0.0, 0.0, 1.0),
        );
        let next = FieldSlice::from_fn(1.0, grid(-3.0, 3.0, 31), 1, 1, |x| vec![x[0].tanh()]);
        for order in [1, 3, 7] {
            let out = run(&p, &next, 0.9, 0.1, order, PicardConfig::default());
            assert_eq!(out.slice.u_values(), next.u_values());
            assert!(out.slice.z_values().unwrap().iter().all(|&z| z == 0.0));
        }
    }

    #[test]
    fn constant_preservation() {
        let p = scalar(
            1.0,
            "x1",
            "1 + 0.5*x1",
            "0",
            "0.7",
            LipschitzDecl::new(1.0, 0.0, 0.0),
        );
        let next = FieldSlice::from_fn(1.0, grid(-2.0, 2.0, 11), 1, 1, |_| vec![0.7]);
        let out = run(&p, &next, 0.95, 0.05, 5, PicardConfig::default());
        assert!(out.slice.u_values().iter().all(|&u| u == 0.7));
        assert!(out.slice.z_values().unwrap().iter().all(|&z| z == 0.0));
        let p = scalar(
            1.0,
            "0",
            "1",
            "0.3 + 0*y1",
            "0.7",
            LipschitzDecl::new(1.0, 0.0, 0.0),
        );
        let out = run(&p, &next, 0.95, 0.05, 5, PicardConfig::default());
        let want = 0.7 - 0.3 * 0.05;
        assert!(out
            .slice
            .u_values()
            .iter()
            .all(|&u| (u - want).abs() < 1e-15));
    }

    /// `E[tanh(x + sqrt(h) N)]` by dense trapezoid integration.
    fn heat_oracle(x: f64, h: f64) -> f64 {
        let (a, steps) = (10.0, 20_000);
        let dz = 2.0 * a / steps as f64;
        let c = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        (0..=steps)
            .map(|i| {
                let z = -a + i as f64 * dz;
                let wt = if i == 0 || i == steps { 0.5 } else { 1.0 };
                wt * (x + h.sqrt() * z).tanh() * c * (-z * z / 2.0).exp()
            })
            .sum::<f64>()
            * dz
    }

    #[test]
    fn heat_step_matches_oracle() {
        let p = scalar(
            1.0,
            "0",
            "1",
            "0",
            "tanh(x1)",
            LipschitzDecl::new(0.0, 0.0, 1.0),
        );
        // Oracle independent of the grid: interpolation error is O(dx^2).
        let next = FieldSlice::from_fn(1.0, grid(-6.0, 6.0, 12_001), 1, 1, |x| vec![x[0].tanh()]);
        let out = run(&p, &next, 0.99, 0.01, 64, PicardConfig::default());
        for x in [-1.0, 0.0, 1.0] {
            let k = ((x + 6.0) / 0.001f64).round() as usize;
            let got = out.slice.u_values()[k];
            assert!((got - heat_oracle(x, 0.01)).abs() <= 1e-6, "x={x}: {got}");
        }
    }

    #[test]
    fn damping_does_not_move_the_fixed_point() {
        let p = scalar(
            1.0,
            "0.5*y1",
            "1",
            "sin(y1) + 0.2*z11",
            "tanh(x1)",
            LipschitzDecl::new(1.0, 0.0, 1.0),
        );
        let next = FieldSlice::from_fn(1.0, grid(-3.0, 3.0, 61), 1, 1, |x| vec![x[0].tanh()]);
        let base = run(&p, &next, 0.97, 0.03, 5, PicardConfig::default());
        for damping in [0.6, 0.8] {
            let cfg = PicardConfig {
                damping,
                ..PicardConfig::default()
            };
            let damped = run(&p, &next, 0.97, 0.03, 5, cfg);
            for (a, b) in base.slice.u_values().iter().zip(damped.slice.u_values()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn picard_deltas_decay_geometrically() {
        use crate::contraction::{max_step, LipschitzTriple};
        let p = scalar(
            1.0,
            "0.5*y1 + 0.5*z11",
            "1",
            "sin(y1) + 0.2*z11",
            "tanh(x1)",
            LipschitzDecl::new(1.0, 0.0, 1.0),
        );
        let h = max_step(LipschitzTriple::new(1.0, 0.0, 1.0), 0.1).unwrap();
        let next = FieldSlice::from_fn(1.0, grid(-3.0, 3.0, 61), 1, 1, |x| vec![x[0].tanh()]);
        let out = run(&p, &next, 1.0 - h, h, 5, PicardConfig::default());
        assert!(out.deltas.len() >= 3);
        for w in out.deltas.windows(2) {
            if w[0] > 1e-13 {
                assert!(w[1] <= (0.9 + 1e-6) * w[0], "{:?}", out.deltas);
            }
        }
    }

    #[test]
    fn control_is_bounded_by_lipschitz_times_sigma() {
        // sup |sigma| = 1.2 on the grid box.
        let p = scalar(
            1.0,
            "0",
            "1 + 0.2*tanh(x1)",
            "0",
            "tanh(2*x1)",
            LipschitzDecl::new(1.0, 0.0, 2.0),
        );
        let next = FieldSlice::from_fn(1.0, grid(-3.0, 3.0, 121), 1, 1, |x| {
            vec![(2.0 * x[0]).tanh()]
        });
        let out = run(&p, &next, 0.99, 0.01, 5, PicardConfig::default());
        let bound = next.lip_estimate() * 1.2 * 1.05;
        assert!(
            out.slice.max_abs_z() <= bound,
            "{} > {bound}",
            out.slice.max_abs_z()
        );

        let p = scalar(1.0, "0", "1", "0", "x1", LipschitzDecl::new(0.0, 0.0, 1.0));
        let next = FieldSlice::from_fn(1.0, grid(-3.0, 3.0, 13), 1, 1, |x| vec![x[0]]);
        let out = run(&p, &next, 0.9, 0.1, 5, PicardConfig::default());
        for &z in out.slice.z_values().unwrap() {
            assert!((z - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let p = scalar(
            1.0,
            "0",
            "0",
            "-10*y1",
            "x1",
            LipschitzDecl::new(10.0, 0.0, 1.0),
        );
        let next = FieldSlice::from_fn(1.0, grid(-1.0, 1.0, 5), 1, 1, |x| vec![x[0]]);
        let rule = gauss_hermite(1, 3).unwrap();
        let picard = PicardConfig::default();
        let ctx = StepContext {
            problem: &p,
            rule: &rule,
            picard: &picard,
            cutoff: None,
            exec: Execution::Sequential,
        };
        // Contraction factor 10 h = 2 > 1.
        assert!(matches!(
            backward_step(&next, 0.8, 0.2, &ctx),
            Err(StepError::PicardDivergence { .. })
        ));
    }

    #[test]
    fn cutoff_projection() {
        let mut y = vec![3.0];
        let mut z = vec![4.0];
        project_ball(&mut y, &mut z, 1.0);
        assert!((y[0] - 0.6).abs() < 1e-15 && (z[0] - 0.8).abs() < 1e-15);
        let mut y = vec![0.3];
        let mut z = vec![0.4];
        project_ball(&mut y, &mut z, 1.0);
        assert_eq!((y[0], z[0]), (0.3, 0.4));
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let p = scalar(
            1.0,
            "0.3*y1",
            "1 + 0.2*tanh(x1)",
            "-0.5*y1",
            "tanh(x1)",
            LipschitzDecl::new(1.0, 0.0, 1.0),
        );
        let next = FieldSlice::from_fn(1.0, grid(-3.0, 3.0, 301), 1, 1, |x| vec![x[0].tanh()]);
        let rule = gauss_hermite(1, 5).unwrap();
        let picard = PicardConfig::default();
        let mut ctx = StepContext {
            problem: &p,
            rule: &rule,
            picard: &picard,
            cutoff: None,
            exec: Execution::Sequential,
        };
        let a = backward_step(&next, 0.97, 0.03, &ctx).unwrap();
        ctx.exec = Execution::Parallel;
        let b = backward_step(&next, 0.97, 0.03, &ctx).unwrap();
        assert_eq!(a, b);
    }
}
