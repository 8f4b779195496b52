//! Multilinear interpolation of node data with a Lipschitz-preserving
//! linear extension outside the grid box.

use super::grid::SpatialGrid;

/// Node values of width `width` plus the cached boundary gradients used by
/// the outside-box extension.
#[derive(Debug, Clone, PartialEq)]
pub struct GridValues {
    values: Vec<f64>,
    width: usize,
    /// `[axis][side] -> width` averaged gradient of the outermost cell
    /// layer; side 0 is the low face.
    face_grad: Vec<[Vec<f64>; 2]>,
}

impl GridValues {
    pub fn new(grid: &SpatialGrid, values: Vec<f64>, width: usize) -> Self {
        assert_eq!(values.len(), grid.len() * width, "value array shape");
        let face_grad = (0..grid.dim())
            .map(|axis| {
                [
                    face_gradient(grid, &values, width, axis, false),
                    face_gradient(grid, &values, width, axis, true),
                ]
            })
            .collect();
        GridValues {
            values,
            width,
            face_grad,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, node: usize) -> &[f64] {
        &self.values[node * self.width..(node + 1) * self.width]
    }

    /// Writes the interpolated value at `x` into `out[..width]`.
    ///
    /// Inside the box this is the tensor multilinear interpolant. Outside,
    /// the point is projected onto the box and the per-face mean gradient
    /// continues the field along every clamped axis, which reproduces
    /// affine data exactly and keeps the interpolant globally Lipschitz.
    pub fn interpolate_into(&self, grid: &SpatialGrid, x: &[f64], out: &mut [f64]) {
        let n = grid.dim();
        let w = self.width;
        let axes = grid.axes();
        let strides = grid.strides();
        let mut base = 0usize;
        let mut frac = [0.0f64; 3];
        let mut overshoot = [0.0f64; 3];
        for k in 0..n {
            let a = &axes[k];
            let c = x[k].clamp(a.min, a.max);
            overshoot[k] = x[k] - c;
            let mut pos = (c - a.min) / a.step();
            if (pos - pos.round()).abs() < 1e-12 {
                pos = pos.round();
            }
            let cell = (pos.floor() as usize).min(a.count - 2);
            frac[k] = pos - cell as f64;
            base += cell * strides[k];
        }
        let out = &mut out[..w];
        let corners = 1usize << n;
        let mut nodes = [0usize; 8];
        for (corner, node) in nodes.iter_mut().enumerate().take(corners) {
            *node = base;
            for k in 0..n {
                if corner >> k & 1 == 1 {
                    *node += strides[k];
                }
            }
        }
        // Nested lerps, axis 0 first; constant data is reproduced exactly.
        let mut buf = [0.0f64; 8];
        for (c, o) in out.iter_mut().enumerate() {
            for j in 0..corners {
                buf[j] = self.values[nodes[j] * w + c];
            }
            let mut len = corners;
            for &s in frac.iter().take(n) {
                len /= 2;
                for j in 0..len {
                    let (lo, hi) = (buf[2 * j], buf[2 * j + 1]);
                    buf[j] = if s == 1.0 { hi } else { lo + s * (hi - lo) };
                }
            }
            *o = buf[0];
        }
        for k in 0..n {
            let dist = overshoot[k];
            if dist != 0.0 {
                let g = &self.face_grad[k][usize::from(dist > 0.0)];
                for (o, &gi) in out.iter_mut().zip(g) {
                    *o += dist * gi;
                }
            }
        }
    }

    pub fn interpolate(&self, grid: &SpatialGrid, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.width];
        self.interpolate_into(grid, x, &mut out);
        out
    }

    pub fn max_norm(&self) -> f64 {
        self.values
            .chunks(self.width)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn face_gradient(
    grid: &SpatialGrid,
    values: &[f64],
    w: usize,
    axis: usize,
    high: bool,
) -> Vec<f64> {
    let a = grid.axes()[axis];
    let stride = grid.strides()[axis];
    let layer = if high { a.count - 2 } else { 0 };
    let mut acc = vec![0.0; w];
    let mut count = 0usize;
    for node in 0..grid.len() {
        if grid.multi_index(node)[axis] != layer {
            continue;
        }
        let lo = &values[node * w..(node + 1) * w];
        let hi = &values[(node + stride) * w..(node + stride + 1) * w];
        for ((s, l), h) in acc.iter_mut().zip(lo).zip(hi) {
            *s += h - l;
        }
        count += 1;
    }
    let scale = 1.0 / (count as f64 * a.step());
    acc.iter_mut().for_each(|s| *s *= scale);
    acc
}

/// Largest divided difference `|du| / |dx|` over axis-neighbour pairs and
/// all cell diagonals. A lower bound on the Lipschitz constant of the
/// interpolant.
pub fn lipschitz_estimate(grid: &SpatialGrid, values: &GridValues) -> f64 {
    let n = grid.dim();
    let w = values.width();
    let offsets = neighbour_offsets(n);
    let axes = grid.axes();
    let mut best = 0.0f64;
    for node in 0..grid.len() {
        let idx = grid.multi_index(node);
        'offsets: for off in &offsets {
            let mut other = node as isize;
            let mut dist2 = 0.0;
            for k in 0..n {
                let j = idx[k] as isize + off[k];
                if j < 0 || j >= axes[k].count as isize {
                    continue 'offsets;
                }
                other += off[k] * grid.strides()[k] as isize;
                let dx = (axes[k].coord(j as usize) - axes[k].coord(idx[k])).abs();
                dist2 += dx * dx;
            }
            let a = values.at(node);
            let b = values.at(other as usize);
            let du2: f64 = a
                .iter()
                .zip(b)
                .map(|(p, q)| (p - q) * (p - q))
                .take(w)
                .sum();
            best = best.max((du2 / dist2).sqrt());
        }
    }
    best
}

/// Offsets in `{-1, 0, 1}^n` whose first nonzero entry is positive.
fn neighbour_offsets(n: usize) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut off = [0isize; 3];
        let mut c = code;
        for o in off.iter_mut().take(n) {
            *o = (c % 3) as isize - 1;
            c /= 3;
        }
        if let Some(first) = off[..n].iter().find(|&&v| v != 0) {
            if *first > 0 {
                out.push(off);
            }
        }
    }
    out
}
