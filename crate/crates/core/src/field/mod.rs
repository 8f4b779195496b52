//! Grid-sampled decoupling fields.
//!
//! A field is a list of time slices, newest first: the slice at the
//! horizon holds the terminal data, every earlier slice holds `u(t, .)`
//! and the control field `z(t, .)` produced by the backward step that
//! created it.

mod grid;
mod interp;
mod snapshot;

use std::sync::Arc;

use thiserror::Error;

pub use grid::{Axis, GridError, SpatialGrid, DEFAULT_NODE_CAP};
pub use interp::{lipschitz_estimate, GridValues};
pub use snapshot::{
    load, read_snapshot, save, write_snapshot, SnapshotError, FORMAT_VERSION, MAGIC,
};

/// Node-wise tolerance when matching a junction between two fields.
pub const JUNCTION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("junction mismatch at t={t}: max node difference {diff}")]
    JunctionMismatch { t: f64, diff: f64 },
    #[error("junction time mismatch: left ends at {left}, right starts at {right}")]
    JunctionTime { left: f64, right: f64 },
    #[error("fields live on different grids or dimensions")]
    Incompatible,
    #[error("slice times must strictly decrease (slice {index} at t={t})")]
    Ordering { index: usize, t: f64 },
    #[error("non-finite values in slice at t={t}")]
    NonFinite { t: f64 },
}

/// One time slice of the field on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSlice {
    pub t: f64,
    grid: Arc<SpatialGrid>,
    u: GridValues,
    z: Option<GridValues>,
    lip: f64,
}

impl FieldSlice {
    /// Builds a slice; `z` is row-major `nodes x m x d` when present.
    pub fn new(
        t: f64,
        grid: Arc<SpatialGrid>,
        m: usize,
        d: usize,
        u: Vec<f64>,
        z: Option<Vec<f64>>,
    ) -> Self {
        let u = GridValues::new(&grid, u, m);
        let z = z.map(|z| GridValues::new(&grid, z, m * d));
        let lip = lipschitz_estimate(&grid, &u);
        FieldSlice { t, grid, u, z, lip }
    }

    /// Samples `f` at every node.
    pub fn from_fn(
        t: f64,
        grid: Arc<SpatialGrid>,
        m: usize,
        d: usize,
        mut f: impl FnMut(&[f64]) -> Vec<f64>,
    ) -> Self {
        let n = grid.dim();
        let mut u = Vec::with_capacity(grid.len() * m);
        for k in 0..grid.len() {
            let x = grid.node(k);
            u.extend(f(&x[..n]));
        }
        Self::new(t, grid, m, d, u, None)
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        &self.grid
    }

    pub fn m(&self) -> usize {
        self.u.width()
    }

    pub fn u(&self) -> &GridValues {
        &self.u
    }

    pub fn z(&self) -> Option<&GridValues> {
        self.z.as_ref()
    }

    pub fn u_values(&self) -> &[f64] {
        self.u.values()
    }

    pub fn z_values(&self) -> Option<&[f64]> {
        self.z.as_ref().map(GridValues::values)
    }

    pub fn lip_estimate(&self) -> f64 {
        self.lip
    }

    pub fn interpolate(&self, x: &[f64]) -> Vec<f64> {
        self.u.interpolate(&self.grid, x)
    }

    pub fn interpolate_into(&self, x: &[f64], out: &mut [f64]) {
        self.u.interpolate_into(&self.grid, x, out)
    }

    /// Interpolated control at `x`; zero when the slice carries none.
    pub fn interpolate_z_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.z {
            Some(z) => z.interpolate_into(&self.grid, x, out),
            None => out.iter_mut().for_each(|o| *o = 0.0),
        }
    }

    pub fn max_abs_u(&self) -> f64 {
        self.u.max_norm()
    }

    pub fn max_abs_z(&self) -> f64 {
        self.z.as_ref().map_or(0.0, GridValues::max_norm)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.z.as_ref().is_none_or(GridValues::is_finite)
    }

    /// Copy with every control value multiplied by `factor`.
    pub fn with_scaled_z(&self, factor: f64) -> Self {
        let w = self.z.as_ref().map_or(0, GridValues::width);
        let z = self.z.as_ref().map(|z| {
            GridValues::new(
                &self.grid,
                z.values().iter().map(|v| v * factor).collect(),
                w,
            )
        });
        FieldSlice { z, ..self.clone() }
    }
}

/// Build metadata persisted alongside the slices.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BuildMeta {
    pub margin: f64,
    /// Final cutoff radius when the build used one.
    pub cutoff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecouplingFieldApprox {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub horizon: f64,
    pub problem_hash: u64,
    pub grid: Arc<SpatialGrid>,
    /// Strictly decreasing in `t`; the first slice sits at the start of
    /// the build (the horizon for a full build).
    pub slices: Vec<FieldSlice>,
    pub meta: BuildMeta,
}

impl DecouplingFieldApprox {
    pub fn earliest(&self) -> &FieldSlice {
        self.slices.last().expect("field has at least one slice")
    }

    pub fn latest(&self) -> &FieldSlice {
        &self.slices[0]
    }

    pub fn times(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.t).collect()
    }

    /// Step lengths between consecutive slices, newest first.
    pub fn steps(&self) -> Vec<f64> {
        self.slices.windows(2).map(|w| w[0].t - w[1].t).collect()
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        for (index, w) in self.slices.windows(2).enumerate() {
            if !(w[1].t < w[0].t) {
                return Err(FieldError::Ordering {
                    index: index + 1,
                    t: w[1].t,
                });
            }
        }
        if let Some(s) = self.slices.iter().find(|s| !s.is_finite()) {
            return Err(FieldError::NonFinite { t: s.t });
        }
        Ok(())
    }

    /// Times closer than this to a slice time are treated as that slice.
    fn snap_tol(&self) -> f64 {
        1e-9 * (1.0 + self.horizon.abs())
    }

    /// Slices `(a, b)` around `t` and the weight of `b`; clamps to the
    /// covered range and snaps to nearby slice times.
    fn bracket(&self, t: f64) -> (usize, usize, f64) {
        let tol = self.snap_tol();
        let last = self.slices.len() - 1;
        // First slice strictly earlier than t (times are decreasing).
        let k = self.slices.partition_point(|s| s.t >= t);
        for j in [k.wrapping_sub(1), k] {
            if j <= last && (self.slices[j].t - t).abs() <= tol {
                return (j, j, 0.0);
            }
        }
        if k == 0 {
            return (0, 0, 0.0);
        }
        if k > last {
            return (last, last, 0.0);
        }
        let (hi, lo) = (self.slices[k - 1].t, self.slices[k].t);
        (k - 1, k, (hi - t) / (hi - lo))
    }

    /// `u(t, x)`, linear in time between the bracketing slices.
    pub fn value_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let (a, b, w) = self.bracket(t);
        self.slices[a].interpolate_into(x, out);
        if a != b && w != 0.0 {
            let mut other = vec![0.0; self.m];
            self.slices[b].interpolate_into(x, &mut other);
            for (o, v) in out.iter_mut().zip(other) {
                *o = (1.0 - w) * *o + w * v;
            }
        }
    }

    pub fn value(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        self.value_into(t, x, &mut out);
        out
    }

    /// Control in force on `[t, t + h)`: taken from the latest slice whose
    /// time does not exceed `t`.
    pub fn control_slice(&self, t: f64) -> &FieldSlice {
        let tol = self.snap_tol();
        let k = self.slices.partition_point(|s| s.t > t + tol);
        self.slices.get(k).unwrap_or_else(|| self.earliest())
    }

    /// Largest slice Lipschitz estimate among the slices bracketing `t`.
    pub fn lip_at(&self, t: f64) -> f64 {
        let (a, b, _) = self.bracket(t);
        self.slices[a]
            .lip_estimate()
            .max(self.slices[b].lip_estimate())
    }

    pub fn max_lip(&self) -> f64 {
        self.slices
            .iter()
            .map(FieldSlice::lip_estimate)
            .fold(0.0, f64::max)
    }

    /// Joins `self` on `[s, t]` to `right` on `[t, T]`.
    ///
    /// `self` must have been built from the earliest slice of `right`, so
    /// the junction slices agree node-wise within [`JUNCTION_TOL`].
    pub fn concatenate(self, right: DecouplingFieldApprox) -> Result<Self, FieldError> {
        let left = self;
        if left.grid != right.grid || (left.n, left.m, left.d) != (right.n, right.m, right.d) {
            return Err(FieldError::Incompatible);
        }
        let junction = right.earliest();
        let head = left.latest();
        if (head.t - junction.t).abs() > 1e-12 * (1.0 + junction.t.abs()) {
            return Err(FieldError::JunctionTime {
                left: head.t,
                right: junction.t,
            });
        }
        let diff = head
            .u_values()
            .iter()
            .zip(junction.u_values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if diff > JUNCTION_TOL {
            return Err(FieldError::JunctionMismatch {
                t: junction.t,
                diff,
            });
        }
        let meta = BuildMeta {
            margin: right.meta.margin.max(left.meta.margin),
            cutoff: match (left.meta.cutoff, right.meta.cutoff) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            },
        };
        let mut slices = right.slices;
        slices.extend(left.slices.into_iter().skip(1));
        Ok(DecouplingFieldApprox {
            slices,
            meta,
            ..right
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid1(min: f64, max: f64, count: usize) -> Arc<SpatialGrid> {
        Arc::new(SpatialGrid::new(vec![Axis::new(min, max, count)]).unwrap())
    }

    #[test]
    fn interpolation_identity_and_affine_reproduction() {
        let g = grid1(-2.0, 2.0, 9);
        let s = FieldSlice::from_fn(1.0, g.clone(), 1, 1, |x| vec![3.0 * x[0] + 1.0]);
        for k in 0..g.len() {
            assert_eq!(s.interpolate(&g.node(k)[..1])[0], s.u_values()[k]);
        }
        for x in [-7.3, -2.0, -0.31, 0.0, 1.77, 2.0, 5.5] {
            assert!((s.interpolate(&[x])[0] - (3.0 * x + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_reproduction_in_three_dimensions() {
        let g = Arc::new(
            SpatialGrid::new(vec![
                Axis::new(-1.0, 1.0, 4),
                Axis::new(0.0, 2.0, 3),
                Axis::new(-3.0, 0.0, 5),
            ])
            .unwrap(),
        );
        let f = |x: &[f64]| vec![2.0 * x[0] - x[1] + 0.5 * x[2] + 4.0, x[2]];
        let s = FieldSlice::from_fn(0.0, g, 2, 1, f);
        for x in [[0.3, 1.1, -2.2], [3.0, -1.0, 4.0], [-5.0, 0.5, -9.0]] {
            let got = s.interpolate(&x);
            let want = f(&x);
            assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn tanh_interpolation_error() {
        let g = grid1(-3.0, 3.0, 65);
        let s = FieldSlice::from_fn(0.0, g, 1, 1, |x| vec![x[0].tanh()]);
        let probes = 64 * 10;
        let worst = (0..=probes)
            .map(|k| -3.0 + 6.0 * k as f64 / probes as f64)
            .map(|x| (s.interpolate(&[x])[0] - x.tanh()).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 3e-3, "{worst}");
    }

    #[test]
    fn lipschitz_estimates() {
        let g = grid1(-5.0, 5.0, 41);
        let c = FieldSlice::from_fn(0.0, g.clone(), 1, 1, |_| vec![0.7]);
        assert_eq!(c.lip_estimate(), 0.0);
        let lin = FieldSlice::from_fn(0.5, g, 1, 1, |x| vec![x[0] / (1.0 - 0.5)]);
        assert!((lin.lip_estimate() - 2.0).abs() < 1e-12);
        let g = grid1(-3.0, 3.0, 121);
        let th = FieldSlice::from_fn(0.0, g.clone(), 1, 1, |x| vec![x[0].tanh()]);
        // Oracle: largest secant of tanh over the grid step, attained at 0.
        let dx = 0.05;
        let secant = (dx / 2.0f64).tanh() * 2.0 / dx;
        assert!(th.lip_estimate() >= 0.999 * secant && th.lip_estimate() <= 1.0);
        let again = FieldSlice::new(0.0, g, 1, 1, th.u_values().to_vec(), None);
        assert_eq!(again.lip_estimate(), th.lip_estimate());
    }

    fn field_from(slices: Vec<FieldSlice>) -> DecouplingFieldApprox {
        let grid = slices[0].grid().clone();
        DecouplingFieldApprox {
            n: 1,
            m: 1,
            d: 1,
            horizon: slices[0].t,
            problem_hash: 0,
            grid,
            slices,
            meta: BuildMeta::default(),
        }
    }

    #[test]
    fn concatenation_rules() {
        let g = grid1(-1.0, 1.0, 5);
        let at = |t: f64, c: f64| FieldSlice::from_fn(t, g.clone(), 1, 1, move |x| vec![c * x[0]]);
        let right = field_from(vec![at(1.0, 1.0), at(0.5, 2.0)]);
        let left = field_from(vec![at(0.5, 2.0), at(0.25, 3.0)]);
        let joined = left.concatenate(right.clone()).unwrap();
        assert_eq!(joined.times(), vec![1.0, 0.5, 0.25]);
        joined.validate().unwrap();

        let zero_len = field_from(vec![at(0.5, 2.0)]);
        assert_eq!(zero_len.concatenate(right.clone()).unwrap(), right);

        let bad = field_from(vec![at(0.5, 2.5), at(0.25, 3.0)]);
        assert!(matches!(
            bad.concatenate(right.clone()),
            Err(FieldError::JunctionMismatch { .. })
        ));
        assert!(matches!(
            right.clone().concatenate(right),
            Err(FieldError::JunctionTime { .. })
        ));
    }

    #[test]
    fn time_interpolation() {
        let g = grid1(-1.0, 1.0, 3);
        let at = |t: f64, c: f64| FieldSlice::from_fn(t, g.clone(), 1, 1, move |_| vec![c]);
        let f = field_from(vec![at(1.0, 1.0), at(0.5, 3.0)]);
        assert_eq!(f.value(1.0, &[0.0])[0], 1.0);
        assert_eq!(f.value(0.5, &[0.0])[0], 3.0);
        assert!((f.value(0.75, &[0.3])[0] - 2.0).abs() < 1e-15);
        assert_eq!(f.control_slice(0.7).t, 0.5);
        assert_eq!(f.control_slice(0.5).t, 0.5);
    }

    proptest! {
        #[test]
        fn interpolant_is_lipschitz(
            vals in proptest::collection::vec(-3.0f64..3.0, 20),
            a in proptest::collection::vec(-9.0f64..9.0, 2),
            b in proptest::collection::vec(-9.0f64..9.0, 2),
        ) {
            let g = Arc::new(SpatialGrid::new(vec![Axis::new(-2.0, 2.0, 5), Axis::new(0.0, 3.0, 4)]).unwrap());
            let s = FieldSlice::new(0.0, g, 1, 1, vals, None);
            let ua = s.interpolate(&a)[0];
            let ub = s.interpolate(&b)[0];
            let dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            prop_assert!((ua - ub).abs() <= (s.lip_estimate() * 2f64.sqrt() + 1e-9) * dist);
        }

        #[test]
        fn interpolant_is_lipschitz_1d(
            vals in proptest::collection::vec(-3.0f64..3.0, 7),
            a in -20.0f64..20.0,
            b in -20.0f64..20.0,
        ) {
            let s = FieldSlice::new(0.0, grid1(-1.0, 2.0, 7), 1, 1, vals, None);
            let diff = (s.interpolate(&[a])[0] - s.interpolate(&[b])[0]).abs();
            prop_assert!(diff <= (s.lip_estimate() + 1e-9) * (a - b).abs());
        }
    }
}
