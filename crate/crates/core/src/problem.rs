//! Problem definition and admissibility of the Lipschitz declarations.

use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expr::{Expr, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("dimensions must be positive (n={n}, m={m}, d={d})")]
    Dimensions { n: usize, m: usize, d: usize },
    #[error("spatial dimension n={0} is above the supported maximum of 3")]
    SpatialDimension(usize),
    #[error("horizon T must be positive and finite, got {0}")]
    Horizon(f64),
    #[error("{name} has {found} entries, expected {expected}")]
    Shape {
        name: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{name}: variable `{var}` is not available")]
    Variable { name: String, var: String },
    #[error("declared constant {name} = {value} must be finite and nonnegative")]
    Constant { name: &'static str, value: f64 },
    #[error("local Lipschitz table is not nondecreasing in H")]
    LocalTable,
    #[error("markovian mode requires `{0}` to be declared")]
    MissingDeclaration(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    GlobalLipschitz,
    MarkovianLocalLipschitz,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::GlobalLipschitz => "GlobalLipschitz",
            Mode::MarkovianLocalLipschitz => "MarkovianLocalLipschitz",
        })
    }
}

/// User-declared Lipschitz and boundedness data. Never inferred.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LipschitzDecl {
    /// Joint constant of `mu`, `sigma`, `f` in `(x, y, z)`.
    pub l: f64,
    pub l_sigma_z: f64,
    pub l_xi_x: f64,
    pub sup_sigma: Option<f64>,
    pub sup_xi: Option<f64>,
    pub sup_f00: Option<f64>,
    /// `(H, L_H)` pairs, nondecreasing in both columns.
    pub local_l: Vec<(f64, f64)>,
}

impl LipschitzDecl {
    pub fn new(l: f64, l_sigma_z: f64, l_xi_x: f64) -> Self {
        LipschitzDecl {
            l,
            l_sigma_z,
            l_xi_x,
            ..Default::default()
        }
    }

    /// Smallest tabulated `L_H` whose radius covers `h`.
    pub fn local_constant(&self, h: f64) -> Option<f64> {
        self.local_l
            .iter()
            .find(|&&(radius, _)| radius >= h)
            .map(|&(_, lh)| lh)
    }
}

/// A deterministic (Markovian) coupled forward-backward problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub horizon: f64,
    pub mu: Vec<Expr>,
    /// Row-major `n x d`.
    pub sigma: Vec<Expr>,
    pub f: Vec<Expr>,
    pub xi: Vec<Expr>,
    pub lipschitz: LipschitzDecl,
    pub mode: Mode,
}

impl ProblemSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        (n, m, d): (usize, usize, usize),
        horizon: f64,
        mu: Vec<Expr>,
        sigma: Vec<Expr>,
        f: Vec<Expr>,
        xi: Vec<Expr>,
        lipschitz: LipschitzDecl,
        mode: Mode,
    ) -> Result<Self, ProblemError> {
        let p = ProblemSpec {
            n,
            m,
            d,
            horizon,
            mu,
            sigma,
            f,
            xi,
            lipschitz,
            mode,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), ProblemError> {
        let (n, m, d) = (self.n, self.m, self.d);
        if n == 0 || m == 0 || d == 0 {
            return Err(ProblemError::Dimensions { n, m, d });
        }
        if n > 3 {
            return Err(ProblemError::SpatialDimension(n));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(ProblemError::Horizon(self.horizon));
        }
        let shapes = [
            ("mu", &self.mu, n),
            ("sigma", &self.sigma, n * d),
            ("f", &self.f, m),
            ("xi", &self.xi, m),
        ];
        for (name, exprs, expected) in shapes {
            if exprs.len() != expected {
                return Err(ProblemError::Shape {
                    name,
                    expected,
                    found: exprs.len(),
                });
            }
            for (k, e) in exprs.iter().enumerate() {
                if let Err(err) = e.check_dims(n, m, d) {
                    let var = match err {
                        crate::expr::EvalError::Dimension { var } => var,
                        other => other.to_string(),
                    };
                    return Err(ProblemError::Variable {
                        name: format!("{name}[{k}]"),
                        var,
                    });
                }
            }
        }
        for (k, e) in self.xi.iter().enumerate() {
            if let Some(v) = e.vars().into_iter().find(|v| !matches!(v, Var::X(_))) {
                return Err(ProblemError::Variable {
                    name: format!("xi[{k}]"),
                    var: v.to_string(),
                });
            }
        }
        let decl = &self.lipschitz;
        let mut constants = vec![
            ("L", decl.l),
            ("L_sigma_z", decl.l_sigma_z),
            ("L_xi_x", decl.l_xi_x),
        ];
        for (name, v) in [
            ("sup_sigma", decl.sup_sigma),
            ("sup_xi", decl.sup_xi),
            ("sup_f00", decl.sup_f00),
        ] {
            if let Some(v) = v {
                constants.push((name, v));
            }
        }
        for &(radius, lh) in &decl.local_l {
            constants.push(("local_L.H", radius));
            constants.push(("local_L.L_H", lh));
        }
        for (name, value) in constants {
            if !(value.is_finite() && value >= 0.0) {
                return Err(ProblemError::Constant { name, value });
            }
        }
        if decl
            .local_l
            .windows(2)
            .any(|w| w[1].0 < w[0].0 || w[1].1 < w[0].1)
        {
            return Err(ProblemError::LocalTable);
        }
        Ok(())
    }

    pub fn sigma_at(&self, row: usize, col: usize) -> &Expr {
        &self.sigma[row * self.d + col]
    }

    /// True when every diffusion entry is the literal zero.
    pub fn sigma_is_zero(&self) -> bool {
        self.sigma.iter().all(Expr::is_zero_literal)
    }

    pub fn has_division(&self) -> bool {
        self.mu
            .iter()
            .chain(&self.sigma)
            .chain(&self.f)
            .chain(&self.xi)
            .any(Expr::contains_division)
    }

    /// Canonical text used for hashing and report headers.
    pub fn canonical(&self) -> String {
        let join = |v: &[Expr]| {
            v.iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        let d = &self.lipschitz;
        format!(
            "dims={},{},{} T={} mode={} mu=[{}] sigma=[{}] f=[{}] xi=[{}] L={} Lsz={} Lxi={} sup_sigma={:?} sup_xi={:?} sup_f00={:?} local_L={:?}",
            self.n,
            self.m,
            self.d,
            self.horizon,
            self.mode,
            join(&self.mu),
            join(&self.sigma),
            join(&self.f),
            join(&self.xi),
            d.l,
            d.l_sigma_z,
            d.l_xi_x,
            d.sup_sigma,
            d.sup_xi,
            d.sup_f00,
            d.local_l
        )
    }

    /// First 64 bits of the SHA-256 of [`ProblemSpec::canonical`].
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub name: &'static str,
    pub verdict: Verdict,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityReport {
    pub hypotheses: Vec<Hypothesis>,
    pub warnings: Vec<String>,
}

impl AdmissibilityReport {
    pub fn passed(&self) -> bool {
        self.hypotheses.iter().all(|h| h.verdict == Verdict::Pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Hypothesis> {
        self.hypotheses
            .iter()
            .filter(|h| h.verdict == Verdict::Fail)
    }
}

impl fmt::Display for AdmissibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for h in &self.hypotheses {
            let tag = match h.verdict {
                Verdict::Pass => "PASS",
                Verdict::Fail => "FAIL",
            };
            writeln!(f, "{tag} {}: {}", h.name, h.detail)?;
        }
        for w in &self.warnings {
            writeln!(f, "WARN {w}")?;
        }
        write!(
            f,
            "{}",
            if self.passed() {
                "ADMISSIBLE"
            } else {
                "INADMISSIBLE"
            }
        )
    }
}

/// `1 / L_sigma_z`, with `1/0 = inf`.
pub fn forbidden_lipschitz(l_sigma_z: f64) -> f64 {
    if l_sigma_z == 0.0 {
        f64::INFINITY
    } else {
        1.0 / l_sigma_z
    }
}

/// Checks the local existence hypotheses against the declared constants.
///
/// The core requirement is `L_{sigma,z} * L_{xi,x} < 1`. Markovian mode
/// additionally needs bounded terminal data and diffusion.
pub fn check_admissible(p: &ProblemSpec) -> Result<AdmissibilityReport, ProblemError> {
    let d = &p.lipschitz;
    let mut hypotheses = Vec::new();
    let mut warnings = Vec::new();

    if p.mode == Mode::MarkovianLocalLipschitz {
        if d.sup_xi.is_none() {
            return Err(ProblemError::MissingDeclaration("sup_xi"));
        }
        if d.sup_sigma.is_none() {
            return Err(ProblemError::MissingDeclaration("sup_sigma"));
        }
        if d.local_l.is_empty() {
            return Err(ProblemError::MissingDeclaration("local_L"));
        }
    }

    let product = d.l_sigma_z * d.l_xi_x;
    let coupling_ok = d.l_sigma_z == 0.0 || product < 1.0;
    hypotheses.push(Hypothesis {
        name: "coupling",
        verdict: if coupling_ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        detail: if coupling_ok {
            format!(
                "L_{{sigma,z}}*L_{{xi,x}} = {product} < 1 (L_{{xi,x}} = {} < 1/L_{{sigma,z}} = {})",
                d.l_xi_x,
                forbidden_lipschitz(d.l_sigma_z)
            )
        } else {
            format!("L_{{sigma,z}}*L_{{xi,x}} = {product} >= 1")
        },
    });

    let sz_ok = d.l_sigma_z <= d.l;
    hypotheses.push(Hypothesis {
        name: "sigma_z_bound",
        verdict: if sz_ok { Verdict::Pass } else { Verdict::Fail },
        detail: format!("L_{{sigma,z}} = {} <= L = {}", d.l_sigma_z, d.l),
    });

    if p.mode == Mode::MarkovianLocalLipschitz {
        for (name, v) in [("sup_xi", d.sup_xi), ("sup_sigma", d.sup_sigma)] {
            let v = v.unwrap_or(f64::INFINITY);
            hypotheses.push(Hypothesis {
                name,
                verdict: if v.is_finite() {
                    Verdict::Pass
                } else {
                    Verdict::Fail
                },
                detail: format!("declared {name} = {v}"),
            });
        }
    }

    if p.has_division() {
        warnings.push(
            "division present: Lipschitz constants must be user-declared, they cannot be inferred"
                .to_string(),
        );
    }
    if d.sup_f00.is_none() {
        warnings.push("sup_f00 not declared".to_string());
    }
    Ok(AdmissibilityReport {
        hypotheses,
        warnings,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn exprs(src: &[&str]) -> Vec<Expr> {
        src.iter().map(|s| Expr::parse(s).unwrap()).collect()
    }

    /// Scalar problem with `n = m = d = 1`.
    pub fn scalar(
        horizon: f64,
        mu: &str,
        sigma: &str,
        f: &str,
        xi: &str,
        decl: LipschitzDecl,
    ) -> ProblemSpec {
        ProblemSpec::new(
            (1, 1, 1),
            horizon,
            exprs(&[mu]),
            exprs(&[sigma]),
            exprs(&[f]),
            exprs(&[xi]),
            decl,
            Mode::GlobalLipschitz,
        )
        .unwrap()
    }
}
