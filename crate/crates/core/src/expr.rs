//! Coefficient expression language.
//!
//! Coefficients are written as small arithmetic expressions over the time
//! variable `t`, the forward state `x1..xn`, the backward value `y1..ym`
//! and the control matrix `z11..zmd` (row `i`, column `j`; `z{i}_{j}` is
//! accepted when an index has more than one digit).
//!
//! Precedence, from tightest: `^`, unary `-`, `* /`, `+ -`. Exponents must
//! be integer constants.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("function `{name}` expects {expected} argument(s), got {found} (byte {offset})")]
    Arity {
        offset: usize,
        name: String,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("non-finite value {value} from subexpression `{expr}`")]
    Domain { expr: String, value: f64 },
    #[error("variable `{var}` is outside the supplied dimensions")]
    Dimension { var: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    X(usize),
    Y(usize),
    /// Zero-based `(row, column)` into the `m x d` control matrix.
    Z(usize, usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Var::T => write!(f, "t"),
            Var::X(i) => write!(f, "x{}", i + 1),
            Var::Y(i) => write!(f, "y{}", i + 1),
            Var::Z(i, j) if i < 9 && j < 9 => write!(f, "z{}{}", i + 1, j + 1),
            Var::Z(i, j) => write!(f, "z{}_{}", i + 1, j + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Tanh,
    Sqrt,
    Abs,
    Min,
    Max,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "tanh" => Func::Tanh,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Tanh => "tanh",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

/// Parsed coefficient expression. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Vec<Expr>),
}

/// Point at which an expression is evaluated. `z` is row-major `m x d`.
#[derive(Debug, Clone, Copy)]
pub struct Point<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub d: usize,
}

impl<'a> Point<'a> {
    pub fn new(t: f64, x: &'a [f64], y: &'a [f64], z: &'a [f64], d: usize) -> Self {
        Point { t, x, y, z, d }
    }
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr, ParseError> {
        Parser::new(text).parse_all()
    }

    pub fn constant(value: f64) -> Expr {
        Expr::Num(value)
    }

    pub fn eval(&self, p: &Point<'_>) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Num(v) => return Ok(*v),
            Expr::Var(var) => return lookup(*var, p),
            Expr::Neg(a) => -a.eval(p)?,
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(p)?, b.eval(p)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                }
            }
            Expr::Pow(a, k) => a.eval(p)?.powi(*k),
            Expr::Call(func, args) => {
                let a = args[0].eval(p)?;
                match func {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Log => a.ln(),
                    Func::Tanh => a.tanh(),
                    Func::Sqrt => a.sqrt(),
                    Func::Abs => a.abs(),
                    Func::Min => a.min(args[1].eval(p)?),
                    Func::Max => a.max(args[1].eval(p)?),
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::Domain {
                expr: self.to_string(),
                value: v,
            })
        }
    }

    /// Visits every variable occurrence.
    pub fn for_each_var(&self, visit: &mut impl FnMut(Var)) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => visit(*v),
            Expr::Neg(a) | Expr::Pow(a, _) => a.for_each_var(visit),
            Expr::Bin(_, a, b) => {
                a.for_each_var(visit);
                b.for_each_var(visit);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.for_each_var(visit)),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.for_each_var(&mut |v| {
            if !out.contains(&v) {
                out.push(v)
            }
        });
        out
    }

    pub fn contains_division(&self) -> bool {
        match self {
            Expr::Num(_) | Expr::Var(_) => false,
            Expr::Bin(BinOp::Div, _, _) => true,
            Expr::Pow(_, k) if *k < 0 => true,
            Expr::Neg(a) | Expr::Pow(a, _) => a.contains_division(),
            Expr::Bin(_, a, b) => a.contains_division() || b.contains_division(),
            Expr::Call(_, args) => args.iter().any(Expr::contains_division),
        }
    }

    /// True for the literal zero, used to short-circuit degenerate diffusions.
    pub fn is_zero_literal(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }

    /// First variable whose index exceeds `(n, m, d)`.
    pub fn check_dims(&self, n: usize, m: usize, d: usize) -> Result<(), EvalError> {
        let mut bad = None;
        self.for_each_var(&mut |v| {
            let ok = match v {
                Var::T => true,
                Var::X(i) => i < n,
                Var::Y(i) => i < m,
                Var::Z(i, j) => i < m && j < d,
            };
            if !ok && bad.is_none() {
                bad = Some(v);
            }
        });
        match bad {
            Some(v) => Err(EvalError::Dimension { var: v.to_string() }),
            None => Ok(()),
        }
    }
}

fn lookup(var: Var, p: &Point<'_>) -> Result<f64, EvalError> {
    let found = match var {
        Var::T => Some(p.t),
        Var::X(i) => p.x.get(i).copied(),
        Var::Y(i) => p.y.get(i).copied(),
        Var::Z(i, j) if j < p.d => p.z.get(i * p.d + j).copied(),
        Var::Z(..) => None,
    };
    found.ok_or_else(|| EvalError::Dimension {
        var: var.to_string(),
    })
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Pow(a, k) if *k < 0 => write!(f, "({a}^(-{}))", k.unsigned_abs()),
            Expr::Pow(a, k) => write!(f, "({a}^{k})"),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser {
            src,
            bytes: src.as_bytes(),
            pos: 0,
        }
    }

    fn syntax<T>(&self, offset: usize, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax {
            offset,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn parse_all(mut self) -> Result<Expr, ParseError> {
        if self.peek().is_none() {
            return self.syntax(0, "empty expression");
        }
        let e = self.expr()?;
        match self.peek() {
            None => Ok(e),
            Some(c) => self.syntax(self.pos, format!("unexpected `{}`", c as char)),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat(b'-') {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if !self.eat(b'^') {
            return Ok(base);
        }
        self.skip_ws();
        let at = self.pos;
        let exponent = self.unary()?;
        let value = match &exponent {
            Expr::Num(v) => Some(*v),
            Expr::Neg(inner) => match inner.as_ref() {
                Expr::Num(v) => Some(-*v),
                _ => None,
            },
            _ => None,
        };
        match value {
            Some(v) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => {
                Ok(Expr::Pow(Box::new(base), v as i32))
            }
            _ => self.syntax(at, "`^` requires a constant integer exponent"),
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let start = match self.peek() {
            Some(_) => self.pos,
            None => return self.syntax(self.pos, "unexpected end of input"),
        };
        let c = self.bytes[start];
        if c == b'(' {
            self.pos += 1;
            let e = self.expr()?;
            if !self.eat(b')') {
                return self.syntax(self.pos, "expected `)`");
            }
            return Ok(e);
        }
        if c.is_ascii_digit() || c == b'.' {
            return self.number(start);
        }
        if c.is_ascii_alphabetic() {
            let mut end = start;
            while end < self.bytes.len()
                && (self.bytes[end].is_ascii_alphanumeric() || self.bytes[end] == b'_')
            {
                end += 1;
            }
            let name = &self.src[start..end];
            self.pos = end;
            if let Some(func) = Func::from_name(name) {
                return self.call(func, start);
            }
            return match variable(name) {
                Some(v) => Ok(Expr::Var(v)),
                None => Err(ParseError::UnknownIdentifier {
                    offset: start,
                    name: name.to_string(),
                }),
            };
        }
        self.syntax(start, format!("unexpected `{}`", c as char))
    }

    fn number(&mut self, start: usize) -> Result<Expr, ParseError> {
        let b = self.bytes;
        let mut end = start;
        while end < b.len() && (b[end].is_ascii_digit() || b[end] == b'.') {
            end += 1;
        }
        if end < b.len() && (b[end] == b'e' || b[end] == b'E') {
            let mut k = end + 1;
            if k < b.len() && (b[k] == b'+' || b[k] == b'-') {
                k += 1;
            }
            if k < b.len() && b[k].is_ascii_digit() {
                while k < b.len() && b[k].is_ascii_digit() {
                    k += 1;
                }
                end = k;
            }
        }
        let text = &self.src[start..end];
        self.pos = end;
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Expr::Num(v)),
            _ => self.syntax(start, format!("invalid number `{text}`")),
        }
    }

    fn call(&mut self, func: Func, start: usize) -> Result<Expr, ParseError> {
        if !self.eat(b'(') {
            return self.syntax(self.pos, format!("expected `(` after `{}`", func.name()));
        }
        let mut args = Vec::new();
        if !self.eat(b')') {
            loop {
                args.push(self.expr()?);
                if self.eat(b',') {
                    continue;
                }
                if self.eat(b')') {
                    break;
                }
                return self.syntax(self.pos, "expected `,` or `)`");
            }
        }
        if args.len() != func.arity() {
            return Err(ParseError::Arity {
                offset: start,
                name: func.name().to_string(),
                expected: func.arity(),
                found: args.len(),
            });
        }
        Ok(Expr::Call(func, args))
    }
}

fn index(digits: &str) -> Option<usize> {
    if digits.is_empty() || !digits.bytes().all(|c| c.is_ascii_digit()) {
        return None;
    }
    match digits.parse::<usize>() {
        Ok(i) if i >= 1 => Some(i - 1),
        _ => None,
    }
}

fn variable(name: &str) -> Option<Var> {
    if name == "t" {
        return Some(Var::T);
    }
    let (head, rest) = name.split_at(1);
    match head {
        "x" => index(rest).map(Var::X),
        "y" => index(rest).map(Var::Y),
        "z" => {
            if let Some((i, j)) = rest.split_once('_') {
                Some(Var::Z(index(i)?, index(j)?))
            } else if rest.len() == 2 {
                Some(Var::Z(index(&rest[..1])?, index(&rest[1..])?))
            } else {
                None
            }
        }
        _ => None,
    }
}

/// Per-variable sampling intervals for [`sample_lipschitz`].
#[derive(Debug, Clone, PartialEq)]
pub struct VarBox {
    pub t: (f64, f64),
    pub x: Vec<(f64, f64)>,
    pub y: Vec<(f64, f64)>,
    /// Row-major `m x d`.
    pub z: Vec<(f64, f64)>,
    pub d: usize,
}

impl VarBox {
    /// Box with every `y`/`z` coordinate in `[-radius, radius]`.
    pub fn with_radius(t: (f64, f64), x: Vec<(f64, f64)>, m: usize, d: usize, radius: f64) -> Self {
        VarBox {
            t,
            x,
            y: vec![(-radius, radius); m],
            z: vec![(-radius, radius); m * d],
            d,
        }
    }
}

/// Largest sampled secant slope per variable block. Always a lower bound
/// on the true Lipschitz constant in that block.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LipschitzSample {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Clone, Copy)]
enum Block {
    X,
    Y,
    Z,
}

/// Estimates block-wise Lipschitz constants of `e` by secant sampling.
///
/// Each sample draws a base point in the box, then for every block a
/// partner point that differs only in that block: half the partners are
/// resampled over the full block, half are local perturbations. Fully
/// deterministic in `seed`.
pub fn sample_lipschitz(
    e: &Expr,
    bx: &VarBox,
    n_samples: usize,
    seed: u64,
) -> Result<LipschitzSample, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LipschitzSample::default();
    let draw = |rng: &mut ChaCha8Rng, iv: &[(f64, f64)]| -> Vec<f64> {
        iv.iter()
            .map(|&(lo, hi)| if hi > lo { rng.gen_range(lo..=hi) } else { lo })
            .collect()
    };
    for k in 0..n_samples.max(2) {
        let t = if bx.t.1 > bx.t.0 {
            rng.gen_range(bx.t.0..=bx.t.1)
        } else {
            bx.t.0
        };
        let x = draw(&mut rng, &bx.x);
        let y = draw(&mut rng, &bx.y);
        let z = draw(&mut rng, &bx.z);
        let base = e.eval(&Point::new(t, &x, &y, &z, bx.d))?;
        let local = k % 2 == 1;
        for block in [Block::X, Block::Y, Block::Z] {
            let (coords, iv) = match block {
                Block::X => (&x, &bx.x),
                Block::Y => (&y, &bx.y),
                Block::Z => (&z, &bx.z),
            };
            if iv.is_empty() {
                continue;
            }
            let partner: Vec<f64> = if local {
                coords
                    .iter()
                    .zip(iv)
                    .map(|(&c, &(lo, hi))| {
                        let w = (hi - lo) * 1e-3;
                        if w > 0.0 {
                            (c + rng.gen_range(-w..=w)).clamp(lo, hi)
                        } else {
                            c
                        }
                    })
                    .collect()
            } else {
                draw(&mut rng, iv)
            };
            let dist = coords
                .iter()
                .zip(&partner)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist == 0.0 {
                continue;
            }
            let val = match block {
                Block::X => e.eval(&Point::new(t, &partner, &y, &z, bx.d))?,
                Block::Y => e.eval(&Point::new(t, &x, &partner, &z, bx.d))?,
                Block::Z => e.eval(&Point::new(t, &x, &y, &partner, bx.d))?,
            };
            let slope = (val - base).abs() / dist;
            let slot = match block {
                Block::X => &mut out.x,
                Block::Y => &mut out.y,
                Block::Z => &mut out.z,
            };
            *slot = slot.max(slope);
        }
    }
    Ok(out)
}
