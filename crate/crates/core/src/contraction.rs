//! Contraction algebra for the Picard map on a short backward interval.
//!
//! For an interval of length `h` ending at a slice with spatial Lipschitz
//! constant `L_xi_x`, the Picard map is a contraction with constant
//! `gamma(h)`. Everything here is a pure function of the Lipschitz triple.

use thiserror::Error;

/// Lipschitz data entering the contraction constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzTriple {
    /// Joint constant of the coefficients in `(x, y, z)`.
    pub l: f64,
    pub l_sigma_z: f64,
    /// Spatial constant of the terminal data of the interval.
    pub l_xi_x: f64,
}

impl LipschitzTriple {
    pub fn new(l: f64, l_sigma_z: f64, l_xi_x: f64) -> Self {
        LipschitzTriple {
            l,
            l_sigma_z,
            l_xi_x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContractionError {
    #[error("no admissible step: gamma(0) = {gamma0} is not below 1 - margin = {bound}")]
    NoAdmissibleStep { gamma0: f64, bound: f64 },
    #[error("margin must lie in (0, 1), got {0}")]
    Margin(f64),
}

pub const DEFAULT_MARGIN: f64 = 0.1;

const BISECTION_REL_TOL: f64 = 1e-6;

/// The two branches of the contraction constant, forward and backward part.
pub fn gamma_branches(h: f64, c: LipschitzTriple) -> (f64, f64) {
    let LipschitzTriple {
        l,
        l_sigma_z: sz,
        l_xi_x: lx,
    } = c;
    let rh = h.sqrt();
    let forward = 2.0 * l * (h + rh) + sz / (1.0 + sz) + l * rh;
    let terminal = lx + l * h;
    let backward = (1.0 + sz) * terminal * l * (h + rh)
        + (terminal * l * (h + rh) + l * h)
        + (terminal * (sz + l * rh) + l * rh);
    (forward, backward)
}

/// Contraction constant on an interval of length `h`.
pub fn gamma(h: f64, c: LipschitzTriple) -> f64 {
    let (a, b) = gamma_branches(h, c);
    a.max(b)
}

/// `gamma(0)`: the limit as the interval length goes to zero.
pub fn gamma_limit(c: LipschitzTriple) -> f64 {
    let sz = c.l_sigma_z;
    (sz / (1.0 + sz)).max(sz * c.l_xi_x)
}

/// Largest `h` with `gamma(h) <= 1 - margin`, found by bisection.
///
/// Returns `f64::INFINITY` when `gamma` does not depend on `h` (all of
/// `L` zero); callers cap the result by the remaining time.
pub fn max_step(c: LipschitzTriple, margin: f64) -> Result<f64, ContractionError> {
    if !(margin > 0.0 && margin < 1.0) {
        return Err(ContractionError::Margin(margin));
    }
    let bound = 1.0 - margin;
    let gamma0 = gamma_limit(c);
    if gamma0 >= bound {
        return Err(ContractionError::NoAdmissibleStep { gamma0, bound });
    }
    if c.l == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while gamma(hi, c) <= bound {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > BISECTION_REL_TOL * hi {
        let mid = 0.5 * (lo + hi);
        if gamma(mid, c) <= bound {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Amplification constant of the derivative bound at step `h`.
pub fn amplification(c: LipschitzTriple, h: f64) -> f64 {
    (c.l_xi_x + c.l * h).max(1.0) / (1.0 - gamma_limit(c))
}

/// Step-size data for one interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionData {
    pub triple: LipschitzTriple,
    pub margin: f64,
    pub h_max: f64,
    pub k: f64,
}

impl ContractionData {
    /// Computes `h_max` and the amplification constant `K` at `h_max`.
    /// An unbounded `h_max` is capped at `horizon` before `K` is evaluated.
    pub fn new(
        triple: LipschitzTriple,
        margin: f64,
        horizon: f64,
    ) -> Result<Self, ContractionError> {
        let h_max = max_step(triple, margin)?;
        let k = amplification(triple, h_max.min(horizon));
        Ok(ContractionData {
            triple,
            margin,
            h_max,
            k,
        })
    }

    pub fn gamma_at_max(&self, horizon: f64) -> f64 {
        gamma(self.h_max.min(horizon), self.triple)
    }
}

/// Envelope `L_terminal + C h^{1/4}` for slice Lipschitz estimates.
pub fn lipschitz_growth_bound(l_terminal: f64, h: f64, c: f64) -> f64 {
    l_terminal + c * h.powf(0.25)
}

/// Least-squares `C >= 0` in `lip - lip_terminal ~ C tau^{1/4}`, where
/// `samples` holds `(tau, lip)` pairs with `tau = T - t`.
pub fn fit_growth_constant(lip_terminal: f64, samples: &[(f64, f64)]) -> f64 {
    let (num, den) = samples.iter().fold((0.0, 0.0), |(num, den), &(tau, lip)| {
        let s = tau.powf(0.25);
        (num + s * (lip - lip_terminal), den + s * s)
    });
    if den == 0.0 {
        0.0
    } else {
        (num / den).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Term-by-term transcription of the contraction display, kept apart
    /// from `gamma_branches` so the two can check each other.
    fn gamma_by_hand(h: f64, l: f64, sz: f64, lx: f64) -> f64 {
        let s = h.sqrt();
        let first = 2.0 * l * (h + s) + sz / (1.0 + sz) + l * s;
        let a = (1.0 + sz) * (lx + l * h) * l * (h + s);
        let b = (lx + l * h) * l * (h + s) + l * h;
        let c = (lx + l * h) * (sz + l * s) + l * s;
        first.max(a + b + c)
    }

    #[test]
    fn limit_values() {
        assert_eq!(gamma(0.0, LipschitzTriple::new(3.0, 0.0, 7.0)), 0.0);
        assert_eq!(gamma(0.0, LipschitzTriple::new(1.0, 1.0, 1.0)), 1.0);
        let c = LipschitzTriple::new(2.0, 0.5, 0.8);
        assert_eq!(gamma(0.0, c), gamma_limit(c));
        assert_eq!(gamma_limit(c), 0.4);
    }

    #[test]
    fn hand_evaluated_point() {
        // h = 0.01, sqrt(h) = 0.1:
        //   forward  = 2*(0.01+0.1) + 0 + 0.1                      = 0.32
        //   backward = 1.01*0.11 + (1.01*0.11 + 0.01) + (1.01*0.1 + 0.1)
        //            = 0.1111 + 0.1211 + 0.201                     = 0.4332
        let c = LipschitzTriple::new(1.0, 0.0, 1.0);
        let (fwd, bwd) = gamma_branches(0.01, c);
        assert!((fwd - 0.32).abs() < 1e-15);
        assert!((bwd - 0.4332).abs() < 1e-15);
        assert!((gamma(0.01, c) - 0.4332).abs() < 1e-15);
        assert_eq!(gamma(0.01, c), gamma_by_hand(0.01, 1.0, 0.0, 1.0));
    }

    #[test]
    fn max_step_cases() {
        assert_eq!(
            max_step(LipschitzTriple::new(0.0, 0.0, 5.0), 0.1),
            Ok(f64::INFINITY)
        );
        let c = LipschitzTriple::new(1.0, 0.0, 1.0);
        let h = max_step(c, 0.1).unwrap();
        let g = gamma(h, c);
        assert!((0.9 - 1e-5..=0.9).contains(&g), "gamma(h_max) = {g}");
        // gamma(0.04) = 0.9472 by hand, gamma(0.03) < 0.9; root in between.
        assert!(h > 0.03 && h < 0.04, "h_max = {h}");
        assert!(matches!(
            max_step(LipschitzTriple::new(1.0, 1.0, 1.0), 0.1),
            Err(ContractionError::NoAdmissibleStep { .. })
        ));
        assert!(matches!(max_step(c, 0.0), Err(ContractionError::Margin(_))));
    }

    #[test]
    fn growth_bound() {
        assert_eq!(lipschitz_growth_bound(1.3, 0.0, 5.0), 1.3);
        assert!((lipschitz_growth_bound(1.0, 0.0016, 2.0) - 1.4).abs() < 1e-12);
        // Closed-form field x/(1-h): its slope stays under 1 + 2 h^{1/4}.
        for k in 1..=500 {
            let h = k as f64 * 1e-3;
            assert!(1.0 / (1.0 - h) <= lipschitz_growth_bound(1.0, h, 2.0));
        }
    }

    #[test]
    fn amplification_at_least_one() {
        let data = ContractionData::new(LipschitzTriple::new(1.0, 0.2, 0.5), 0.1, 1.0).unwrap();
        assert!(data.k >= 1.0);
        assert!(data.gamma_at_max(1.0) <= 0.9);
        let free = ContractionData::new(LipschitzTriple::new(0.0, 0.0, 2.0), 0.1, 0.5).unwrap();
        assert_eq!(free.h_max, f64::INFINITY);
        assert_eq!(free.k, 2.0);
    }

    #[test]
    fn growth_fit_recovers_constant() {
        let samples: Vec<_> = [0.1, 0.2, 0.3]
            .iter()
            .map(|&tau: &f64| (tau, 1.0 + 0.7 * tau.powf(0.25)))
            .collect();
        assert!((fit_growth_constant(1.0, &samples) - 0.7).abs() < 1e-12);
        assert_eq!(fit_growth_constant(1.0, &[(0.1, 0.5)]), 0.0);
    }

    fn triple() -> impl Strategy<Value = LipschitzTriple> {
        (0.0f64..5.0, 0.0f64..2.0, 0.0f64..5.0)
            .prop_map(|(l, sz, lx)| LipschitzTriple::new(l, sz, lx))
    }

    proptest! {
        #[test]
        fn gamma_matches_transcription(h in 0.0f64..2.0, c in triple()) {
            let a = gamma(h, c);
            let b = gamma_by_hand(h, c.l, c.l_sigma_z, c.l_xi_x);
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }

        #[test]
        fn gamma_nondecreasing_in_h(c in triple(), h in 0.0f64..1.0, dh in 0.0f64..1.0) {
            prop_assert!(gamma(h, c) <= gamma(h + dh, c));
        }

        #[test]
        fn gamma_limit_exact(c in triple()) {
            prop_assert_eq!(gamma(0.0, c), gamma_limit(c));
        }

        #[test]
        fn max_step_antitone(c in triple(), bump in 0.0f64..1.0, which in 0usize..3) {
            let mut bigger = c;
            match which {
                0 => bigger.l += bump,
                1 => bigger.l_sigma_z += bump,
                _ => bigger.l_xi_x += bump,
            }
            if let (Ok(a), Ok(b)) = (max_step(c, 0.1), max_step(bigger, 0.1)) {
                prop_assert!(b <= a * (1.0 + 2e-6));
            }
            if max_step(c, 0.1).is_err() {
                prop_assert!(max_step(bigger, 0.1).is_err());
            }
        }

        #[test]
        fn amplification_bounded_below(c in triple(), h in 0.0f64..1.0) {
            if gamma_limit(c) < 1.0 {
                prop_assert!(amplification(c, h) >= 1.0);
            }
        }
    }
}
