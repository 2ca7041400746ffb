//! Parametric semialgebraic domain descriptions.
//!
//! A `.dom` file describes a family of open sets `Ω_t ⊂ ℝⁿ` by a positive
//! boolean combination of strict polynomial inequalities in the ambient
//! coordinates and the parameters:
//!
//! ```text
//! dim 2
//! params t in [0.05, 1]
//! box [0,1] x [0,1]
//! set: x > 0 and x < 1 and y > 0 and t*x^2 - y > 0
//! ```
//!
//! Ambient coordinates are named `x`, `y`, `z` (in that order). `p != 0` is
//! accepted and stored as the atom `p^2 > 0`; `<=`, `>=` and `=` are rejected
//! because they would describe sets that are not open.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Pow, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::poly::{Horner, Poly};

/// Parser limit on the total degree of an atom.
pub const MAX_DEGREE: u32 = 12;
/// Parser limit on the number of parameters.
pub const MAX_PARAMS: usize = 8;

const AXIS_NAMES: [&str; 3] = ["x", "y", "z"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DslError {
    #[error("syntax error at line {line}, column {col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("non-strict relation in atom `{atom}` at line {line}, column {col}: only `<`, `>` and `!=` describe open sets")]
    NonStrict { line: usize, col: usize, atom: String },
    #[error("atom `{atom}` at line {line} has total degree {degree}, above the limit {MAX_DEGREE}")]
    DegreeLimit { line: usize, atom: String, degree: u32 },
    #[error("atom `{atom}` at line {line} has no nonzero coefficient")]
    ZeroAtom { line: usize, atom: String },
    #[error("missing bounding box (`box [a,b]x...` line)")]
    MissingBox,
    #[error("missing `dim` line")]
    MissingDim,
    #[error("missing `set:` formula")]
    MissingSet,
    #[error("parameter {name} = {value} outside its range [{lo}, {hi}]")]
    ParamOutOfBox { name: String, value: f64, lo: f64, hi: f64 },
    #[error("expected {expected} parameter values, got {got}")]
    ParamArity { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, DslError>;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    Lt,
    Gt,
}

/// Strict polynomial inequality `poly < 0` or `poly > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyAtom {
    pub poly: Poly,
    pub relation: Relation,
    /// For atoms written `p != 0`: the polynomial `p` whose square is `poly`.
    pub square_of: Option<Poly>,
}

impl PolyAtom {
    /// The polynomial whose zero set bounds the atom.
    pub fn boundary_poly(&self) -> &Poly {
        self.square_of.as_ref().unwrap_or(&self.poly)
    }
}

/// Positive boolean combination of atoms (indices into `DomainSpec::atoms`).
#[derive(Debug, Clone, PartialEq)]
pub enum Formula {
    Atom(usize),
    And(Vec<Formula>),
    Or(Vec<Formula>),
}

impl Formula {
    fn eval(&self, values: &dyn Fn(usize) -> bool) -> bool {
        match self {
            Formula::Atom(i) => values(*i),
            Formula::And(fs) => fs.iter().all(|f| f.eval(values)),
            Formula::Or(fs) => fs.iter().any(|f| f.eval(values)),
        }
    }

    fn flatten(self) -> Formula {
        match self {
            Formula::Atom(_) => self,
            Formula::And(fs) => {
                let mut out = Vec::new();
                for f in fs {
                    match f.flatten() {
                        Formula::And(inner) => out.extend(inner),
                        other => out.push(other),
                    }
                }
                if out.len() == 1 { out.pop().unwrap() } else { Formula::And(out) }
            }
            Formula::Or(fs) => {
                let mut out = Vec::new();
                for f in fs {
                    match f.flatten() {
                        Formula::Or(inner) => out.extend(inner),
                        other => out.push(other),
                    }
                }
                if out.len() == 1 { out.pop().unwrap() } else { Formula::Or(out) }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct CompiledAtom {
    value: Horner,
    /// Boundary polynomial and its ambient gradient.
    boundary: Horner,
    gradient: Vec<Horner>,
    relation: Relation,
}

/// A parsed, normalized family `(Ω_t)`.
#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub ambient_dim: usize,
    pub param_names: Vec<String>,
    pub param_box: Vec<Interval>,
    pub bounding_box: Vec<Interval>,
    pub atoms: Vec<PolyAtom>,
    pub formula: Formula,
    compiled: Vec<CompiledAtom>,
}

impl PartialEq for DomainSpec {
    fn eq(&self, o: &Self) -> bool {
        self.ambient_dim == o.ambient_dim
            && self.param_names == o.param_names
            && self.param_box == o.param_box
            && self.bounding_box == o.bounding_box
            && self.atoms == o.atoms
            && self.formula == o.formula
    }
}

impl DomainSpec {
    fn new(
        ambient_dim: usize,
        param_names: Vec<String>,
        param_box: Vec<Interval>,
        bounding_box: Vec<Interval>,
        atoms: Vec<PolyAtom>,
        formula: Formula,
    ) -> Self {
        let compiled = atoms
            .iter()
            .map(|a| {
                let b = a.boundary_poly();
                CompiledAtom {
                    value: a.poly.compile(),
                    boundary: b.compile(),
                    gradient: (0..ambient_dim).map(|i| b.derivative(i).compile()).collect(),
                    relation: a.relation,
                }
            })
            .collect();
        DomainSpec { ambient_dim, param_names, param_box, bounding_box, atoms, formula, compiled }
    }

    pub fn num_params(&self) -> usize {
        self.param_names.len()
    }

    /// Variable names in polynomial order: ambient coordinates, then parameters.
    pub fn variable_names(&self) -> Vec<String> {
        AXIS_NAMES[..self.ambient_dim]
            .iter()
            .map(|s| s.to_string())
            .chain(self.param_names.iter().cloned())
            .collect()
    }

    pub fn check_params(&self, t: &[f64]) -> Result<()> {
        if t.len() != self.num_params() {
            return Err(DslError::ParamArity { expected: self.num_params(), got: t.len() });
        }
        for ((name, iv), &v) in self.param_names.iter().zip(&self.param_box).zip(t) {
            if !iv.contains(v) {
                return Err(DslError::ParamOutOfBox { name: name.clone(), value: v, lo: iv.lo, hi: iv.hi });
            }
        }
        Ok(())
    }

    /// Binds the parameters, validating them against the parameter box.
    pub fn fiber(&self, t: &[f64]) -> Result<Fiber<'_>> {
        self.check_params(t)?;
        Ok(Fiber { spec: self, t: t.to_vec() })
    }

    /// Membership of `x` in `Ω_t`.
    pub fn member(&self, t: &[f64], x: &[f64]) -> Result<bool> {
        Ok(self.fiber(t)?.contains(x))
    }

    /// Parameters at the center of the parameter box.
    pub fn default_params(&self) -> Vec<f64> {
        self.param_box.iter().map(|iv| iv.mid()).collect()
    }

    /// Rejection-sampling audit of the bounding-box invariant: samples points
    /// of the box enlarged by half its width on each side and reports those
    /// outside the box that are members.
    pub fn audit_bounding_box(&self, samples: usize, seed: u64) -> BoxAudit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut escapes = Vec::new();
        let mut outside = 0;
        for _ in 0..samples {
            let t: Vec<f64> = self.param_box.iter().map(|iv| sample(&mut rng, iv.lo, iv.hi)).collect();
            let x: Vec<f64> = self
                .bounding_box
                .iter()
                .map(|iv| sample(&mut rng, iv.lo - 0.5 * iv.width(), iv.hi + 0.5 * iv.width()))
                .collect();
            if self.bounding_box.iter().zip(&x).all(|(iv, &v)| iv.contains(v)) {
                continue;
            }
            outside += 1;
            let fiber = Fiber { spec: self, t: t.clone() };
            if fiber.contains(&x) && escapes.len() < 16 {
                escapes.push(AuditPoint { t, x });
            }
        }
        BoxAudit { samples, outside_samples: outside, escapes }
    }
}

fn sample(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo { rng.gen_range(lo..hi) } else { lo }
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditPoint {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoxAudit {
    pub samples: usize,
    pub outside_samples: usize,
    pub escapes: Vec<AuditPoint>,
}

impl BoxAudit {
    pub fn contained(&self) -> bool {
        self.escapes.is_empty()
    }
}

/// One fiber `Ω_t` with its parameters bound.
#[derive(Debug, Clone)]
pub struct Fiber<'a> {
    spec: &'a DomainSpec,
    t: Vec<f64>,
}

const MAX_VARS: usize = 3 + MAX_PARAMS;

impl<'a> Fiber<'a> {
    pub fn spec(&self) -> &'a DomainSpec {
        self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.t
    }

    #[inline]
    fn point(&self, x: &[f64]) -> [f64; MAX_VARS] {
        let n = self.spec.ambient_dim;
        let mut buf = [0.0; MAX_VARS];
        buf[..n].copy_from_slice(&x[..n]);
        buf[n..n + self.t.len()].copy_from_slice(&self.t);
        buf
    }

    #[inline]
    pub fn contains(&self, x: &[f64]) -> bool {
        let buf = self.point(x);
        let compiled = &self.spec.compiled;
        self.spec.formula.eval(&|i| {
            let a = &compiled[i];
            let v = a.value.eval(&buf);
            match a.relation {
                Relation::Lt => v < 0.0,
                Relation::Gt => v > 0.0,
            }
        })
    }

    /// Membership at a point of the zero set shared by the atoms in `zero`,
    /// which are taken as unsatisfied there.
    pub fn contains_on_zero_set(&self, x: &[f64], zero: &[usize]) -> bool {
        let buf = self.point(x);
        let compiled = &self.spec.compiled;
        self.spec.formula.eval(&|i| {
            if zero.contains(&i) {
                return false;
            }
            let a = &compiled[i];
            let v = a.value.eval(&buf);
            match a.relation {
                Relation::Lt => v < 0.0,
                Relation::Gt => v > 0.0,
            }
        })
    }

    /// Signed atom values, oriented so that positive means satisfied.
    pub fn atom_margins(&self, x: &[f64]) -> Vec<f64> {
        let buf = self.point(x);
        self.spec
            .compiled
            .iter()
            .map(|a| {
                let v = a.value.eval(&buf);
                match a.relation {
                    Relation::Lt => -v,
                    Relation::Gt => v,
                }
            })
            .collect()
    }

    /// Value of the boundary polynomial of an atom.
    pub fn boundary_value(&self, atom: usize, x: &[f64]) -> f64 {
        self.spec.compiled[atom].boundary.eval(&self.point(x))
    }

    /// Ambient gradient of the boundary polynomial of an atom.
    pub fn boundary_gradient(&self, atom: usize, x: &[f64]) -> Vec<f64> {
        let buf = self.point(x);
        self.spec.compiled[atom].gradient.iter().map(|g| g.eval(&buf)).collect()
    }

    /// Ambient gradient of the atom polynomial itself (`p²` for `!=` atoms).
    pub fn atom_gradient(&self, atom: usize, x: &[f64]) -> Vec<f64> {
        let g = self.boundary_gradient(atom, x);
        match &self.spec.atoms[atom].square_of {
            None => g,
            Some(_) => {
                let b = self.boundary_value(atom, x);
                g.into_iter().map(|v| 2.0 * b * v).collect()
            }
        }
    }

    pub fn is_inside_box(&self, x: &[f64]) -> bool {
        self.spec.bounding_box.iter().zip(x).all(|(iv, &v)| iv.contains(v))
    }

    /// Membership with one atom forced false: the value on the zero set of a
    /// `!=` atom, which point sampling cannot hit exactly.
    fn contains_without(&self, x: &[f64], atom: usize) -> bool {
        let buf = self.point(x);
        let compiled = &self.spec.compiled;
        self.spec.formula.eval(&|i| {
            if i == atom {
                return false;
            }
            let a = &compiled[i];
            let v = a.value.eval(&buf);
            match a.relation {
                Relation::Lt => v < 0.0,
                Relation::Gt => v > 0.0,
            }
        })
    }

    /// Earliest fraction `s ∈ (0, 1]` along the segment `a → b` where the
    /// segment meets the zero set of a `!=` atom at a point outside the
    /// domain (a slit).
    pub fn slit_crossing(&self, a: &[f64], b: &[f64]) -> Option<f64> {
        let n = self.spec.ambient_dim;
        let mut best: Option<f64> = None;
        let mut p = vec![0.0; n];
        for (i, atom) in self.spec.atoms.iter().enumerate() {
            if atom.square_of.is_none() {
                continue;
            }
            let va = self.boundary_value(i, a);
            let vb = self.boundary_value(i, b);
            let s = if vb == 0.0 {
                1.0
            } else if va == 0.0 || (va > 0.0) == (vb > 0.0) {
                continue;
            } else {
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    for j in 0..n {
                        p[j] = a[j] + mid * (b[j] - a[j]);
                    }
                    if (self.boundary_value(i, &p) > 0.0) == (va > 0.0) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            };
            for j in 0..n {
                p[j] = a[j] + s * (b[j] - a[j]);
            }
            if !self.contains_without(&p, i) && best.is_none_or(|b| s < b) {
                best = Some(s);
            }
        }
        best
    }

    /// Whether the closed segment `a → b` stays inside the domain as far as
    /// the endpoints, the midpoint and slit crossings can tell.
    pub fn segment_connected(&self, a: &[f64], b: &[f64]) -> bool {
        let mid: Vec<f64> = a.iter().zip(b).map(|(u, v)| 0.5 * (u + v)).collect();
        self.contains(&mid) && self.slit_crossing(a, b).is_none()
    }
}

// ---------------------------------------------------------------------------
// Printing

impl fmt::Display for DomainSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dim {}", self.ambient_dim)?;
        if !self.param_names.is_empty() {
            let ps: Vec<String> = self
                .param_names
                .iter()
                .zip(&self.param_box)
                .map(|(n, iv)| format!("{} in [{}, {}]", n, iv.lo, iv.hi))
                .collect();
            writeln!(f, "params {}", ps.join(", "))?;
        }
        let bx: Vec<String> = self.bounding_box.iter().map(|iv| format!("[{}, {}]", iv.lo, iv.hi)).collect();
        writeln!(f, "box {}", bx.join(" x "))?;
        let names = self.variable_names();
        writeln!(f, "set: {}", self.format_formula(&self.formula, &names, false))
    }
}

impl DomainSpec {
    fn format_atom(&self, i: usize, names: &[String]) -> String {
        let a = &self.atoms[i];
        match (&a.square_of, a.relation) {
            (Some(base), _) => format!("{} != 0", base.display_with(names)),
            (None, Relation::Lt) => format!("{} < 0", a.poly.display_with(names)),
            (None, Relation::Gt) => format!("{} > 0", a.poly.display_with(names)),
        }
    }

    fn format_formula(&self, f: &Formula, names: &[String], nested: bool) -> String {
        match f {
            Formula::Atom(i) => self.format_atom(*i, names),
            Formula::And(fs) => {
                let parts: Vec<String> = fs.iter().map(|g| self.format_formula(g, names, true)).collect();
                parts.join(" and ")
            }
            Formula::Or(fs) => {
                let parts: Vec<String> = fs.iter().map(|g| self.format_formula(g, names, false)).collect();
                let s = parts.join(" or ");
                if nested { format!("({s})") } else { s }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(BigRational),
    Ident(String),
    Op(&'static str),
    LParen,
    RParen,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
    start: usize,
    end: usize,
}

/// Source text with per-character line/column positions.
struct Source {
    chars: Vec<char>,
    pos: Vec<(usize, usize)>,
}

impl Source {
    fn text(&self, start: usize, end: usize) -> String {
        self.chars[start..end].iter().collect::<String>().trim().to_string()
    }
}

fn syntax(line: usize, col: usize, message: impl Into<String>) -> DslError {
    DslError::Syntax { line, col, message: message.into() }
}

fn parse_decimal(s: &str) -> Option<BigRational> {
    let (mant, exp) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], s[i + 1..].parse::<i32>().ok()?),
        None => (s, 0),
    };
    let (int_part, frac_part) = match mant.find('.') {
        Some(i) => (&mant[..i], &mant[i + 1..]),
        None => (mant, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let n: BigInt = digits.parse().ok()?;
    let scale = exp - frac_part.len() as i32;
    let ten = BigInt::from(10);
    Some(if scale >= 0 {
        BigRational::from_integer(n * Pow::pow(&ten, scale as u32))
    } else {
        BigRational::new(n, Pow::pow(&ten, (-scale) as u32))
    })
}

fn tokenize(src: &Source) -> Result<Vec<Token>> {
    let c = &src.chars;
    let mut out = Vec::new();
    let mut i = 0;
    while i < c.len() {
        let ch = c[i];
        let (line, col) = src.pos[i];
        if ch.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = if ch.is_ascii_digit() || (ch == '.' && i + 1 < c.len() && c[i + 1].is_ascii_digit()) {
            let mut j = i;
            while j < c.len() && (c[j].is_ascii_digit() || c[j] == '.') {
                j += 1;
            }
            if j < c.len() && (c[j] == 'e' || c[j] == 'E') {
                let mut k = j + 1;
                if k < c.len() && (c[k] == '+' || c[k] == '-') {
                    k += 1;
                }
                if k < c.len() && c[k].is_ascii_digit() {
                    while k < c.len() && c[k].is_ascii_digit() {
                        k += 1;
                    }
                    j = k;
                }
            }
            let s: String = c[i..j].iter().collect();
            i = j;
            Tok::Num(parse_decimal(&s).ok_or_else(|| syntax(line, col, format!("bad number `{s}`")))?)
        } else if ch.is_alphabetic() || ch == '_' {
            let mut j = i;
            while j < c.len() && (c[j].is_alphanumeric() || c[j] == '_') {
                j += 1;
            }
            let s: String = c[i..j].iter().collect();
            i = j;
            Tok::Ident(s)
        } else {
            let two: String = c[i..(i + 2).min(c.len())].iter().collect();
            let op: Option<&'static str> = match two.as_str() {
                "<=" => Some("<="),
                ">=" => Some(">="),
                "!=" => Some("!="),
                "==" => Some("=="),
                "&&" => Some("&&"),
                "||" => Some("||"),
                _ => None,
            };
            if let Some(op) = op {
                i += 2;
                Tok::Op(op)
            } else {
                i += 1;
                match ch {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '+' => Tok::Op("+"),
                    '-' => Tok::Op("-"),
                    '*' => Tok::Op("*"),
                    '/' => Tok::Op("/"),
                    '^' => Tok::Op("^"),
                    '<' => Tok::Op("<"),
                    '>' => Tok::Op(">"),
                    '=' => Tok::Op("="),
                    other => return Err(syntax(line, col, format!("unexpected character `{other}`"))),
                }
            }
        };
        out.push(Token { tok, line, col, start, end: i });
    }
    Ok(out)
}

struct FormulaParser<'s> {
    src: &'s Source,
    toks: Vec<Token>,
    pos: usize,
    vars: Vec<String>,
    atoms: Vec<PolyAtom>,
    end_line: usize,
    end_col: usize,
}

impl<'s> FormulaParser<'s> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn here(&self) -> (usize, usize) {
        self.toks.get(self.pos).map(|t| (t.line, t.col)).unwrap_or((self.end_line, self.end_col))
    }

    fn err(&self, msg: impl Into<String>) -> DslError {
        let (l, c) = self.here();
        syntax(l, c, msg)
    }

    fn is_keyword(&self, kw: &str) -> bool {
        match self.peek() {
            Some(Tok::Ident(s)) => s == kw,
            Some(Tok::Op("&&")) => kw == "and",
            Some(Tok::Op("||")) => kw == "or",
            _ => false,
        }
    }

    fn formula(&mut self) -> Result<Formula> {
        let mut parts = vec![self.conjunction()?];
        while self.is_keyword("or") {
            self.pos += 1;
            parts.push(self.conjunction()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Formula::Or(parts) })
    }

    fn conjunction(&mut self) -> Result<Formula> {
        let mut parts = vec![self.unit()?];
        while self.is_keyword("and") {
            self.pos += 1;
            parts.push(self.unit()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Formula::And(parts) })
    }

    fn unit(&mut self) -> Result<Formula> {
        let save = self.pos;
        let atoms_len = self.atoms.len();
        match self.atom() {
            Ok(f) => Ok(f),
            Err(e) => {
                // Semantic errors on a well-formed atom are final.
                if !matches!(e, DslError::Syntax { .. }) || self.toks.get(save).map(|t| &t.tok) != Some(&Tok::LParen) {
                    return Err(e);
                }
                let atom_pos = self.pos;
                self.pos = save + 1;
                self.atoms.truncate(atoms_len);
                match self.formula() {
                    Ok(f) if self.peek() == Some(&Tok::RParen) => {
                        self.pos += 1;
                        Ok(f)
                    }
                    Ok(_) => Err(self.err("expected `)`")),
                    Err(e2) => {
                        // Report whichever attempt got further.
                        if self.pos >= atom_pos { Err(e2) } else { Err(e) }
                    }
                }
            }
        }
    }

    fn atom(&mut self) -> Result<Formula> {
        let first = self.toks.get(self.pos).cloned().ok_or_else(|| self.err("expected an atom"))?;
        let lhs = self.expr()?;
        let rel_tok = self.toks.get(self.pos).cloned().ok_or_else(|| self.err("expected a relation"))?;
        let rel = match &rel_tok.tok {
            Tok::Op(op @ ("<" | ">" | "<=" | ">=" | "=" | "==" | "!=")) => *op,
            _ => return Err(self.err("expected a relation (`<`, `>` or `!=`)")),
        };
        self.pos += 1;
        let rhs = self.expr()?;
        let end = self.toks[self.pos - 1].end;
        let text = self.src.text(first.start, end);
        let (line, col) = (first.line, first.col);
        let diff = lhs.sub(&rhs);
        let atom = match rel {
            "<=" | ">=" | "=" | "==" => return Err(DslError::NonStrict { line, col, atom: text }),
            "!=" => {
                if diff.is_zero() {
                    return Err(DslError::ZeroAtom { line, atom: text });
                }
                let base = normalize_sign(diff.primitive());
                PolyAtom { poly: base.mul(&base), relation: Relation::Gt, square_of: Some(base) }
            }
            _ => {
                if diff.is_zero() {
                    return Err(DslError::ZeroAtom { line, atom: text });
                }
                let relation = if rel == "<" { Relation::Lt } else { Relation::Gt };
                PolyAtom { poly: diff.primitive(), relation, square_of: None }
            }
        };
        let degree = atom.poly.total_degree();
        if degree > MAX_DEGREE {
            return Err(DslError::DegreeLimit { line, atom: text, degree });
        }
        let idx = match self.atoms.iter().position(|a| *a == atom) {
            Some(i) => i,
            None => {
                self.atoms.push(atom);
                self.atoms.len() - 1
            }
        };
        Ok(Formula::Atom(idx))
    }

    fn nvars(&self) -> usize {
        self.vars.len()
    }

    fn expr(&mut self) -> Result<Poly> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Op("+")) => {
                    self.pos += 1;
                    acc = acc.add(&self.term()?);
                }
                Some(Tok::Op("-")) => {
                    self.pos += 1;
                    acc = acc.sub(&self.term()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Poly> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Op("*")) => {
                    self.pos += 1;
                    acc = acc.mul(&self.unary()?);
                }
                Some(Tok::Op("/")) => {
                    self.pos += 1;
                    let d = self.unary()?;
                    match d.as_constant() {
                        Some(c) if !c.is_zero() => acc = acc.scale(&(BigRational::one() / c)),
                        Some(_) => return Err(self.err("division by zero")),
                        None => return Err(self.err("division is only allowed by constants")),
                    }
                }
                // Implicit product such as `2x` or `3(x+1)`.
                Some(Tok::Ident(s)) if !matches!(s.as_str(), "and" | "or") => {
                    acc = acc.mul(&self.unary()?);
                }
                Some(Tok::LParen) => {
                    acc = acc.mul(&self.unary()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<Poly> {
        match self.peek() {
            Some(Tok::Op("-")) => {
                self.pos += 1;
                Ok(self.unary()?.neg())
            }
            Some(Tok::Op("+")) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Poly> {
        let base = self.primary()?;
        if self.peek() == Some(&Tok::Op("^")) {
            self.pos += 1;
            let e = match self.peek() {
                Some(Tok::Num(n)) if n.is_integer() => n.to_integer(),
                _ => return Err(self.err("exponent must be a non-negative integer")),
            };
            let e: u32 = e
                .try_into()
                .ok()
                .filter(|&e: &u32| e <= 2 * MAX_DEGREE)
                .ok_or_else(|| self.err("exponent out of range"))?;
            self.pos += 1;
            return Ok(base.pow(e));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Poly> {
        let n = self.nvars();
        match self.peek().cloned() {
            Some(Tok::Num(c)) => {
                self.pos += 1;
                Ok(Poly::constant(n, c))
            }
            Some(Tok::Ident(name)) => match self.vars.iter().position(|v| *v == name) {
                Some(i) => {
                    self.pos += 1;
                    Ok(Poly::var(n, i))
                }
                None => Err(self.err(format!("unknown variable `{name}`"))),
            },
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(&Tok::RParen) {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(_) => Err(self.err("expected a number, variable or `(`")),
            None => Err(self.err("unexpected end of formula")),
        }
    }
}

/// Fixes the sign of a `!=` base so that its leading term is positive.
fn normalize_sign(p: Poly) -> Poly {
    let lead = p.terms().max_by(|(a, _), (b, _)| {
        let da: u32 = a.iter().sum();
        let db: u32 = b.iter().sum();
        da.cmp(&db).then_with(|| a.cmp(b))
    });
    match lead {
        Some((_, c)) if c < &BigRational::zero() => p.neg(),
        _ => p,
    }
}

fn parse_number_text(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once('/') {
        let a = parse_number_text(a)?;
        let b = parse_number_text(b)?;
        return (b != 0.0).then(|| a / b);
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest.trim()),
        None => (false, s.strip_prefix('+').unwrap_or(s).trim()),
    };
    let v = crate::poly::rational_to_f64(&parse_decimal(body)?);
    Some(if neg { -v } else { v })
}

/// Parses `[a, b]` at the start of `s`; returns the interval and the rest.
fn parse_interval(s: &str, line: usize, col: usize) -> Result<(Interval, &str)> {
    let s = s.trim_start();
    let rest = s.strip_prefix('[').ok_or_else(|| syntax(line, col, "expected `[`"))?;
    let close = rest.find(']').ok_or_else(|| syntax(line, col, "expected `]`"))?;
    let inner = &rest[..close];
    let (a, b) = inner.split_once(',').ok_or_else(|| syntax(line, col, "expected `a, b` in interval"))?;
    let lo = parse_number_text(a).ok_or_else(|| syntax(line, col, format!("bad number `{}`", a.trim())))?;
    let hi = parse_number_text(b).ok_or_else(|| syntax(line, col, format!("bad number `{}`", b.trim())))?;
    if !(lo < hi) {
        return Err(syntax(line, col, format!("empty interval [{lo}, {hi}]")));
    }
    Ok((Interval::new(lo, hi), &rest[close + 1..]))
}

/// Parses `.dom` text into a normalized [`DomainSpec`].
pub fn parse_domain(text: &str) -> Result<DomainSpec> {
    let mut dim: Option<usize> = None;
    let mut params: Vec<(String, Interval)> = Vec::new();
    let mut bbox: Option<Vec<Interval>> = None;
    let mut set_src: Option<Source> = None;
    let mut last_line = 1;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = raw.split('#').next().unwrap_or("");
        if let Some(src) = set_src.as_mut() {
            // Continuation of the formula.
            src.chars.push('\n');
            src.pos.push((line_no, 0));
            for (c_idx, ch) in line.chars().enumerate() {
                src.chars.push(ch);
                src.pos.push((line_no, c_idx + 1));
            }
            continue;
        }
        let trimmed = line.trim_start();
        let indent = line.len() - trimmed.len();
        if trimmed.is_empty() {
            continue;
        }
        let col0 = indent + 1;
        if let Some(rest) = trimmed.strip_prefix("dim") {
            let n: usize = rest
                .trim()
                .parse()
                .map_err(|_| syntax(line_no, col0 + 3, "expected dimension 1, 2 or 3"))?;
            if !(1..=3).contains(&n) {
                return Err(syntax(line_no, col0 + 3, format!("dimension {n} not supported (1, 2 or 3)")));
            }
            dim = Some(n);
        } else if let Some(rest) = trimmed.strip_prefix("params").or_else(|| trimmed.strip_prefix("param")) {
            let mut rest = rest.trim_start();
            while !rest.is_empty() {
                let name_len = rest
                    .find(|c: char| !(c.is_alphanumeric() || c == '_'))
                    .unwrap_or(rest.len());
                let name = &rest[..name_len];
                if name.is_empty() || !name.chars().next().unwrap().is_alphabetic() {
                    return Err(syntax(line_no, col0, "expected a parameter name"));
                }
                if AXIS_NAMES.contains(&name) || matches!(name, "and" | "or") {
                    return Err(syntax(line_no, col0, format!("`{name}` is reserved")));
                }
                let after = rest[name_len..].trim_start();
                let after = after
                    .strip_prefix("in")
                    .ok_or_else(|| syntax(line_no, col0, "expected `in` after parameter name"))?;
                let (iv, tail) = parse_interval(after, line_no, col0)?;
                params.push((name.to_string(), iv));
                rest = tail.trim_start().trim_start_matches(',').trim_start();
            }
        } else if let Some(rest) = trimmed.strip_prefix("box") {
            let mut ivs = Vec::new();
            let mut rest = rest.trim_start();
            loop {
                let (iv, tail) = parse_interval(rest, line_no, col0)?;
                ivs.push(iv);
                let tail = tail.trim_start();
                if tail.is_empty() {
                    break;
                }
                rest = tail
                    .strip_prefix('x')
                    .or_else(|| tail.strip_prefix('×'))
                    .ok_or_else(|| syntax(line_no, col0, "expected `x` between box intervals"))?;
            }
            bbox = Some(ivs);
        } else if let Some(rest) = trimmed.strip_prefix("set:") {
            let start_col = indent + 5;
            let mut src = Source { chars: Vec::new(), pos: Vec::new() };
            for (c_idx, ch) in rest.chars().enumerate() {
                src.chars.push(ch);
                src.pos.push((line_no, start_col + c_idx));
            }
            set_src = Some(src);
        } else {
            return Err(syntax(line_no, col0, format!("unknown header `{}`", trimmed.split_whitespace().next().unwrap_or(""))));
        }
    }

    let dim = dim.ok_or(DslError::MissingDim)?;
    let bbox = bbox.ok_or(DslError::MissingBox)?;
    if bbox.len() != dim {
        return Err(syntax(1, 1, format!("box has {} intervals but dim is {}", bbox.len(), dim)));
    }
    if params.len() > MAX_PARAMS {
        return Err(syntax(1, 1, format!("at most {MAX_PARAMS} parameters are supported")));
    }
    for i in 0..params.len() {
        if params[..i].iter().any(|(n, _)| *n == params[i].0) {
            return Err(syntax(1, 1, format!("duplicate parameter `{}`", params[i].0)));
        }
    }
    let src = set_src.ok_or(DslError::MissingSet)?;
    let toks = tokenize(&src)?;
    if toks.is_empty() {
        return Err(DslError::MissingSet);
    }
    let vars: Vec<String> = AXIS_NAMES[..dim]
        .iter()
        .map(|s| s.to_string())
        .chain(params.iter().map(|(n, _)| n.clone()))
        .collect();
    let (end_line, end_col) = src.pos.last().map(|&(l, c)| (l, c + 1)).unwrap_or((last_line, 1));
    let mut parser = FormulaParser { src: &src, toks, pos: 0, vars, atoms: Vec::new(), end_line, end_col };
    let formula = parser.formula()?;
    if parser.pos < parser.toks.len() {
        return Err(parser.err("unexpected trailing input"));
    }
    let (param_names, param_box) = params.into_iter().unzip();
    Ok(DomainSpec::new(dim, param_names, param_box, bbox, parser.atoms, formula.flatten()))
}

impl std::str::FromStr for DomainSpec {
    type Err = DslError;

    fn from_str(s: &str) -> Result<Self> {
        parse_domain(s)
    }
}

/// Canonical textual form; `parse_domain(&print(spec))` reproduces `spec`.
pub fn print(spec: &DomainSpec) -> String {
    spec.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    const DISK: &str = "dim 2\nbox [-1.5,1.5]x[-1.5,1.5]\nset: x^2+y^2-1 < 0\n";
    const CUSP: &str =
        "dim 2\nparams t in [0.05,1]\nbox [0,1]x[0,1]\nset: x>0 and x<1 and y>0 and t*x^2 - y > 0\n";

    #[test]
    fn parses_unit_disk() {
        let s = parse_domain(DISK).unwrap();
        assert_eq!(s.ambient_dim, 2);
        assert_eq!(s.num_params(), 0);
        assert_eq!(s.atoms.len(), 1);
        assert!(s.member(&[], &[0.0, 0.0]).unwrap());
        assert!(!s.member(&[], &[1.0, 0.0]).unwrap());
    }

    #[test]
    fn parses_cusp_family() {
        let s = parse_domain(CUSP).unwrap();
        assert_eq!(s.param_names, vec!["t".to_string()]);
        assert_eq!(s.atoms.len(), 4);
        // 0.5 * 0.25 = 0.125 > 0.1
        assert!(s.member(&[0.5], &[0.5, 0.1]).unwrap());
        assert!(!s.member(&[0.5], &[0.5, 0.13]).unwrap());
    }

    #[test]
    fn rejects_non_strict_relations() {
        let e = parse_domain("dim 2\nbox [-1.5,1.5]x[-1.5,1.5]\nset: x^2+y^2-1 <= 0\n").unwrap_err();
        match e {
            DslError::NonStrict { atom, line, .. } => {
                assert_eq!(atom, "x^2+y^2-1 <= 0");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(e_to_string_contains("dim 1\nbox [0,1]\nset: x = 0.5", "non-strict"));
        assert!(e_to_string_contains("dim 1\nbox [0,1]\nset: x >= 0.5", "non-strict"));
    }

    fn e_to_string_contains(text: &str, needle: &str) -> bool {
        parse_domain(text).unwrap_err().to_string().contains(needle)
    }

    #[test]
    fn not_equal_becomes_square_positivity() {
        let s = parse_domain("dim 2\nbox [-1.5,1.5]x[-1.5,1.5]\nset: x^2+y^2 < 1 and (y != 0 or x < 0)\n").unwrap();
        let a = s.atoms.iter().find(|a| a.square_of.is_some()).unwrap();
        assert_eq!(a.relation, Relation::Gt);
        assert_eq!(a.poly.total_degree(), 2);
        assert!(!s.member(&[], &[0.5, 0.0]).unwrap());
        assert!(s.member(&[], &[-0.5, 0.0]).unwrap());
        assert!(s.member(&[], &[0.5, 0.01]).unwrap());
    }

    #[test]
    fn degree_limit_and_missing_box() {
        let e = parse_domain("dim 1\nbox [0,1]\nset: x^13 - 1 < 0").unwrap_err();
        assert!(matches!(e, DslError::DegreeLimit { degree: 13, .. }));
        let e = parse_domain("dim 1\nbox [0,1]\nset: (x^7 - 1) != 0").unwrap_err();
        assert!(matches!(e, DslError::DegreeLimit { degree: 14, .. }));
        assert_eq!(parse_domain("dim 2\nset: x < 0").unwrap_err(), DslError::MissingBox);
    }

    #[test]
    fn syntax_errors_carry_position() {
        let e = parse_domain("dim 2\nbox [0,1]x[0,1]\nset: x > 0 and y $ 1").unwrap_err();
        match e {
            DslError::Syntax { line, col, .. } => {
                assert_eq!(line, 3);
                assert_eq!(col, 18);
            }
            other => panic!("unexpected {other:?}"),
        }
        let e = parse_domain("dim 2\nbox [0,1]x[0,1]\nset: x > 0 and w < 1").unwrap_err();
        assert!(e.to_string().contains("unknown variable `w`"));
    }

    #[test]
    fn parenthesized_groups_and_polynomials() {
        let s = parse_domain("dim 2\nbox [-2,2]x[-2,2]\nset: ((x+1)^2 + y^2 < 1/4 or (x-1)^2 + y^2 < 0.25) and y > -1").unwrap();
        assert!(matches!(s.formula, Formula::And(_)));
        assert!(s.member(&[], &[-1.0, 0.0]).unwrap());
        assert!(s.member(&[], &[1.0, 0.2]).unwrap());
        assert!(!s.member(&[], &[0.0, 0.0]).unwrap());
    }

    #[test]
    fn param_out_of_box_is_an_error() {
        let s = parse_domain(CUSP).unwrap();
        assert!(matches!(s.member(&[1.5], &[0.5, 0.1]), Err(DslError::ParamOutOfBox { .. })));
        assert!(matches!(s.member(&[], &[0.5, 0.1]), Err(DslError::ParamArity { .. })));
    }

    #[test]
    fn print_is_canonical() {
        let s = parse_domain(CUSP).unwrap();
        let printed = print(&s);
        assert_eq!(
            printed,
            "dim 2\nparams t in [0.05, 1]\nbox [0, 1] x [0, 1]\nset: x > 0 and x - 1 < 0 and y > 0 and x^2*t - y > 0\n"
        );
        assert_eq!(parse_domain(&printed).unwrap(), s);
    }

    #[test]
    fn audit_detects_escaping_fibers() {
        let strip = parse_domain("dim 2\nbox [0,1]x[0,1]\nset: y > 0 and y < 1").unwrap();
        assert!(!strip.audit_bounding_box(2000, 0).contained());
        let disk = parse_domain(DISK).unwrap();
        assert!(disk.audit_bounding_box(2000, 0).contained());
    }
}
