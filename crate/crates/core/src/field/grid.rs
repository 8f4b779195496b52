use thiserror::Error;

/// Default cap on the total number of grid nodes.
pub const DEFAULT_NODE_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grid needs between 1 and 3 axes, got {0}")]
    Axes(usize),
    #[error("axis {axis}: need min < max and count >= 2 (min={min}, max={max}, count={count})")]
    Axis {
        axis: usize,
        min: f64,
        max: f64,
        count: usize,
    },
    #[error("grid has {nodes} nodes, above the cap of {cap}")]
    TooLarge { nodes: usize, cap: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, count: usize) -> Self {
        Axis { min, max, count }
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.max
        } else {
            self.min + i as f64 * self.step()
        }
    }
}

/// Tensor grid over `n <= 3` axes, row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    axes: Vec<Axis>,
    strides: Vec<usize>,
    len: usize,
}

impl SpatialGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Self, GridError> {
        Self::with_cap(axes, DEFAULT_NODE_CAP)
    }

    pub fn with_cap(axes: Vec<Axis>, cap: usize) -> Result<Self, GridError> {
        if axes.is_empty() || axes.len() > 3 {
            return Err(GridError::Axes(axes.len()));
        }
        for (axis, a) in axes.iter().enumerate() {
            if !(a.min.is_finite() && a.max.is_finite() && a.min < a.max && a.count >= 2) {
                return Err(GridError::Axis {
                    axis,
                    min: a.min,
                    max: a.max,
                    count: a.count,
                });
            }
        }
        let len = axes
            .iter()
            .try_fold(1usize, |acc, a| acc.checked_mul(a.count))
            .unwrap_or(usize::MAX);
        if len > cap {
            return Err(GridError::TooLarge { nodes: len, cap });
        }
        let mut strides = vec![1; axes.len()];
        for k in (0..axes.len() - 1).rev() {
            strides[k] = strides[k + 1] * axes[k + 1].count;
        }
        Ok(SpatialGrid { axes, strides, len })
    }

    /// Nested refinement: every axis gets `factor` times as many cells, so
    /// the original nodes are a subset of the refined ones.
    pub fn refined(&self, factor: usize) -> Result<Self, GridError> {
        self.scaled(factor)
    }

    /// Same as [`SpatialGrid::refined`]; `scale = 1` is the identity.
    pub fn scaled(&self, scale: usize) -> Result<Self, GridError> {
        let scale = scale.max(1);
        SpatialGrid::new(
            self.axes
                .iter()
                .map(|a| Axis::new(a.min, a.max, (a.count - 1) * scale + 1))
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Multi-index of a flat node index.
    pub fn multi_index(&self, mut flat: usize) -> [usize; 3] {
        let mut idx = [0; 3];
        for (k, &s) in self.strides.iter().enumerate() {
            idx[k] = flat / s;
            flat %= s;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Coordinates of a node, written to the first `dim()` entries.
    pub fn node(&self, flat: usize) -> [f64; 3] {
        let idx = self.multi_index(flat);
        let mut x = [0.0; 3];
        for (k, a) in self.axes.iter().enumerate() {
            x[k] = a.coord(idx[k]);
        }
        x
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.axes
            .iter()
            .zip(x)
            .all(|(a, &v)| v >= a.min && v <= a.max)
    }

    /// Flat index in `self` of node `flat` of a grid this one refines by
    /// `factor`.
    pub fn refined_index(&self, coarse: &SpatialGrid, flat: usize, factor: usize) -> usize {
        let idx = coarse.multi_index(flat);
        let mut fine = [0; 3];
        for k in 0..self.dim() {
            fine[k] = idx[k] * factor;
        }
        self.flat_index(&fine[..self.dim()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_round_trip() {
        let g = SpatialGrid::new(vec![Axis::new(0.0, 1.0, 3), Axis::new(-1.0, 1.0, 5)]).unwrap();
        assert_eq!(g.len(), 15);
        assert_eq!(g.strides(), &[5, 1]);
        for flat in 0..g.len() {
            let idx = g.multi_index(flat);
            assert_eq!(g.flat_index(&idx[..2]), flat);
        }
        assert_eq!(g.node(7)[..2], [0.5, 0.0]);
    }

    #[test]
    fn validation() {
        assert!(SpatialGrid::new(vec![]).is_err());
        assert!(SpatialGrid::new(vec![Axis::new(1.0, 0.0, 4)]).is_err());
        assert!(SpatialGrid::new(vec![Axis::new(0.0, 1.0, 1)]).is_err());
        assert!(matches!(
            SpatialGrid::new(vec![Axis::new(0.0, 1.0, 1001); 3]),
            Err(GridError::TooLarge { .. })
        ));
    }

    #[test]
    fn refinement_is_nested() {
        let g = SpatialGrid::new(vec![Axis::new(-5.0, 5.0, 11)]).unwrap();
        let f = g.refined(2).unwrap();
        assert_eq!(f.axes()[0].count, 21);
        for k in 0..g.len() {
            assert_eq!(g.node(k)[0], f.node(f.refined_index(&g, k, 2))[0]);
        }
    }
}
