//! Tensor Gauss-Hermite rules for expectations over standard normals.

use std::f64::consts::PI;

use thiserror::Error;

/// Largest tensor rule we are willing to build.
pub const MAX_RULE_NODES: usize = 1_000_000;
pub const MAX_RULE_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadratureError {
    #[error("rule dimension must be in 1..={MAX_RULE_DIM}, got {0}")]
    Dimension(usize),
    #[error("rule order must be at least 1")]
    Order,
    #[error("tensor rule with order {order} in dimension {dim} exceeds {MAX_RULE_NODES} nodes")]
    TooLarge { order: usize, dim: usize },
}

/// Points and weights for `E[g(N)]`, `N ~ N(0, I_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub dim: usize,
    pub order: usize,
    /// Row-major `len x dim`.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn expect(&self, mut g: impl FnMut(&[f64]) -> f64) -> f64 {
        (0..self.len())
            .map(|k| self.weights[k] * g(self.node(k)))
            .sum()
    }
}

/// One-dimensional rule in the probabilists' normalisation, nodes
/// ascending, weights summing to one.
///
/// Roots of the orthonormal Hermite polynomials by Newton iteration from
/// the classical asymptotic starting values.
pub fn gauss_hermite_1d(order: usize) -> Result<(Vec<f64>, Vec<f64>), QuadratureError> {
    if order == 0 {
        return Err(QuadratureError::Order);
    }
    let n = order;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let pim4 = PI.powf(-0.25);
    let half = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..half {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        if n % 2 == 1 && i == half - 1 {
            z = 0.0;
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    // Physicists' weight e^{-x^2} to the standard normal density.
    let sqrt2 = 2f64.sqrt();
    let mut nodes: Vec<f64> = x.iter().map(|v| v * sqrt2).collect();
    let mut weights: Vec<f64> = w.iter().map(|v| v / PI.sqrt()).collect();
    nodes.reverse();
    weights.reverse();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    Ok((nodes, weights))
}

/// Tensor-product rule with `order` points per axis in `dim` dimensions.
pub fn gauss_hermite(dim: usize, order: usize) -> Result<QuadratureRule, QuadratureError> {
    if dim == 0 || dim > MAX_RULE_DIM {
        return Err(QuadratureError::Dimension(dim));
    }
    if order == 0 {
        return Err(QuadratureError::Order);
    }
    let len = (0..dim)
        .try_fold(1usize, |acc, _| acc.checked_mul(order))
        .filter(|&l| l <= MAX_RULE_NODES)
        .ok_or(QuadratureError::TooLarge { order, dim })?;
    let (x1, w1) = gauss_hermite_1d(order)?;
    let mut nodes = Vec::with_capacity(len * dim);
    let mut weights = Vec::with_capacity(len);
    for k in 0..len {
        let mut rest = k;
        let mut weight = 1.0;
        let start = nodes.len();
        nodes.resize(start + dim, 0.0);
        for axis in (0..dim).rev() {
            let i = rest % order;
            rest /= order;
            nodes[start + axis] = x1[i];
            weight *= w1[i];
        }
        weights.push(weight);
    }
    Ok(QuadratureRule {
        dim,
        order,
        nodes,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Gaussian moments `E[N^k]` through dense trapezoid integration of the
    /// density, independent of the Hermite recurrence.
    fn moment_by_trapezoid(k: i32) -> f64 {
        let (a, steps) = (12.0, 200_000);
        let dx = 2.0 * a / steps as f64;
        let c = 1.0 / (2.0 * PI).sqrt();
        (0..=steps)
            .map(|i| {
                let x = -a + i as f64 * dx;
                let wt = if i == 0 || i == steps { 0.5 } else { 1.0 };
                wt * x.powi(k) * c * (-x * x / 2.0).exp()
            })
            .sum::<f64>()
            * dx
    }

    #[test]
    fn mean_rule() {
        let r = gauss_hermite(1, 1).unwrap();
        assert_eq!(r.nodes, vec![0.0]);
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn fourth_moment() {
        let oracle = moment_by_trapezoid(4);
        assert!((oracle - 3.0).abs() < 1e-9);
        let r = gauss_hermite(1, 7).unwrap();
        assert!((r.expect(|w| w[0].powi(4)) - oracle).abs() < 1e-9);
        for k in [6, 8] {
            let want = moment_by_trapezoid(k);
            for order in [5, 9, 20, 64] {
                let r = gauss_hermite(1, order).unwrap();
                if 2 * order > k as usize {
                    let got = r.expect(|w| w[0].powi(k));
                    assert!(
                        (got - want).abs() < 1e-8 * want,
                        "order {order} k {k}: {got}"
                    );
                }
            }
        }
    }

    #[test]
    fn tensor_moments() {
        let r = gauss_hermite(2, 3).unwrap();
        assert_eq!(r.len(), 9);
        let (x1, w1) = gauss_hermite_1d(3).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let m = r.expect(|w| w[i] * w[j]);
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((m - expect).abs() < 1e-10);
            }
        }
        // Tensor oracle from the 1-d rule.
        let m4: f64 = x1.iter().zip(&w1).map(|(x, w)| w * x.powi(4)).sum();
        assert!((r.expect(|w| w[0].powi(4) * w[1].powi(2)) - m4).abs() < 1e-12);
    }

    #[test]
    fn rule_invariants() {
        for (dim, order) in [(1, 1), (1, 2), (1, 5), (1, 64), (2, 5), (3, 4), (8, 2)] {
            let r = gauss_hermite(dim, order).unwrap();
            assert!(r.weights.iter().all(|&w| w > 0.0));
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..dim {
                assert!(r.expect(|w| w[i]).abs() < 1e-12);
                for j in 0..dim {
                    let target = if i == j && order > 1 { 1.0 } else { 0.0 };
                    assert!((r.expect(|w| w[i] * w[j]) - target).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn size_limits() {
        assert!(matches!(
            gauss_hermite(0, 3),
            Err(QuadratureError::Dimension(0))
        ));
        assert!(matches!(
            gauss_hermite(9, 2),
            Err(QuadratureError::Dimension(9))
        ));
        assert!(matches!(
            gauss_hermite(8, 10),
            Err(QuadratureError::TooLarge { .. })
        ));
        assert!(matches!(gauss_hermite(1, 0), Err(QuadratureError::Order)));
    }
}
