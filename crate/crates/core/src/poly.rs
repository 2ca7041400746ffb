//! Polynomials with exact rational coefficients.
//!
//! [`Poly`] is the multivariate carrier used by the domain language. It is
//! compiled into a fixed-order Horner scheme ([`Horner`]) for fast,
//! reproducible double-precision evaluation. [`UPoly`] is the univariate
//! counterpart used for resultants and real root isolation in the planar
//! cell decomposition.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Exponent vector, one entry per variable.
pub type Monomial = Vec<u32>;

/// Sparse multivariate polynomial over ℚ.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Poly {
    nvars: usize,
    terms: BTreeMap<Monomial, BigRational>,
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Poly { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: BigRational) -> Self {
        let mut p = Poly::zero(nvars);
        if !c.is_zero() {
            p.terms.insert(vec![0; nvars], c);
        }
        p
    }

    pub fn var(nvars: usize, index: usize) -> Self {
        let mut m = vec![0; nvars];
        m[index] = 1;
        let mut p = Poly::zero(nvars);
        p.terms.insert(m, BigRational::one());
        p
    }

    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (Monomial, BigRational)>) -> Self {
        let mut p = Poly::zero(nvars);
        for (m, c) in terms {
            assert_eq!(m.len(), nvars, "monomial arity mismatch");
            p.add_term(m, c);
        }
        p
    }

    fn add_term(&mut self, m: Monomial, c: BigRational) {
        if c.is_zero() {
            return;
        }
        let entry = self.terms.entry(m);
        match entry {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let sum = o.get() + c;
                if sum.is_zero() {
                    o.remove();
                } else {
                    *o.get_mut() = sum;
                }
            }
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &BigRational)> {
        self.terms.iter()
    }

    /// The constant value if the polynomial has no variable terms.
    pub fn as_constant(&self) -> Option<BigRational> {
        match self.terms.len() {
            0 => Some(BigRational::zero()),
            1 => {
                let (m, c) = self.terms.iter().next().unwrap();
                m.iter().all(|&e| e == 0).then(|| c.clone())
            }
            _ => None,
        }
    }

    pub fn total_degree(&self) -> u32 {
        self.terms.keys().map(|m| m.iter().sum()).max().unwrap_or(0)
    }

    pub fn degree_in(&self, var: usize) -> u32 {
        self.terms.keys().map(|m| m[var]).max().unwrap_or(0)
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), c.clone());
        }
        out
    }

    pub fn neg(&self) -> Poly {
        Poly {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(m, c)| (m.clone(), -c)).collect(),
        }
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.neg())
    }

    pub fn scale(&self, k: &BigRational) -> Poly {
        if k.is_zero() {
            return Poly::zero(self.nvars);
        }
        Poly {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(m, c)| (m.clone(), c * k)).collect(),
        }
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                let m: Monomial = ma.iter().zip(mb).map(|(a, b)| a + b).collect();
                out.add_term(m, ca * cb);
            }
        }
        out
    }

    pub fn pow(&self, k: u32) -> Poly {
        let mut out = Poly::constant(self.nvars, BigRational::one());
        for _ in 0..k {
            out = out.mul(self);
        }
        out
    }

    pub fn derivative(&self, var: usize) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (m, c) in &self.terms {
            if m[var] == 0 {
                continue;
            }
            let mut m2 = m.clone();
            m2[var] -= 1;
            out.add_term(m2, c * BigRational::from_integer(BigInt::from(m[var])));
        }
        out
    }

    /// Fixes the listed variables to exact values; their exponents become zero.
    pub fn substitute(&self, values: &[(usize, BigRational)]) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (m, c) in &self.terms {
            let mut m2 = m.clone();
            let mut coef = c.clone();
            for (var, value) in values {
                let e = m2[*var];
                if e > 0 {
                    coef *= pow_rational(value, e);
                    m2[*var] = 0;
                }
            }
            out.add_term(m2, coef);
        }
        out
    }

    /// Exact evaluation at a rational point.
    pub fn eval_exact(&self, point: &[BigRational]) -> BigRational {
        let mut acc = BigRational::zero();
        for (m, c) in &self.terms {
            let mut term = c.clone();
            for (e, x) in m.iter().zip(point) {
                if *e > 0 {
                    term *= pow_rational(x, *e);
                }
            }
            acc += term;
        }
        acc
    }

    /// Multiplies by the least positive rational making every coefficient an
    /// integer with gcd 1, keeping the sign.
    pub fn primitive(&self) -> Poly {
        if self.is_zero() {
            return self.clone();
        }
        let mut lcm = BigInt::one();
        for c in self.terms.values() {
            lcm = num_integer_lcm(&lcm, c.denom());
        }
        let mut g = BigInt::zero();
        for c in self.terms.values() {
            let n = c.numer() * (&lcm / c.denom());
            g = num_integer_gcd(&g, &n);
        }
        let k = BigRational::new(lcm, g);
        self.scale(&k)
    }

    /// Splits into coefficients of powers of `yvar`, each a univariate
    /// polynomial in `xvar`. Other variables must be absent.
    pub fn to_bivariate(&self, xvar: usize, yvar: usize) -> Vec<UPoly> {
        let dy = self.degree_in(yvar) as usize;
        let mut rows: Vec<Vec<BigRational>> = vec![Vec::new(); dy + 1];
        for (m, c) in &self.terms {
            for (i, &e) in m.iter().enumerate() {
                assert!(i == xvar || i == yvar || e == 0, "unexpected variable in bivariate split");
            }
            let (ex, ey) = (m[xvar] as usize, m[yvar] as usize);
            let row = &mut rows[ey];
            if row.len() <= ex {
                row.resize(ex + 1, BigRational::zero());
            }
            row[ex] += c;
        }
        if self.is_zero() {
            return vec![UPoly::zero()];
        }
        rows.into_iter().map(UPoly::new).collect()
    }

    /// Compiles the polynomial into a nested Horner scheme over variables in
    /// increasing index order.
    pub fn compile(&self) -> Horner {
        let terms: Vec<(Monomial, f64)> = self
            .terms
            .iter()
            .map(|(m, c)| (m.clone(), rational_to_f64(c)))
            .collect();
        Horner::build(&terms, 0, self.nvars)
    }

    /// Canonical text form using the given variable names.
    pub fn display_with(&self, names: &[String]) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        // Graded order, highest degree first, then lexicographically larger monomials first.
        let mut ordered: Vec<(&Monomial, &BigRational)> = self.terms.iter().collect();
        ordered.sort_by(|(a, _), (b, _)| {
            let da: u32 = a.iter().sum();
            let db: u32 = b.iter().sum();
            db.cmp(&da).then_with(|| b.cmp(a))
        });
        let mut out = String::new();
        for (i, (m, c)) in ordered.iter().enumerate() {
            let negative = c.is_negative();
            let abs = c.abs();
            if i == 0 {
                if negative {
                    out.push('-');
                }
            } else {
                out.push_str(if negative { " - " } else { " + " });
            }
            let mut factors: Vec<String> = Vec::new();
            let is_const = m.iter().all(|&e| e == 0);
            if !abs.is_one() || is_const {
                factors.push(format_rational(&abs));
            }
            for (v, &e) in m.iter().enumerate() {
                match e {
                    0 => {}
                    1 => factors.push(names[v].clone()),
                    _ => factors.push(format!("{}^{}", names[v], e)),
                }
            }
            out.push_str(&factors.join("*"));
        }
        out
    }
}

fn num_integer_gcd(a: &BigInt, b: &BigInt) -> BigInt {
    let (mut a, mut b) = (a.abs(), b.abs());
    while !b.is_zero() {
        let r = &a % &b;
        a = b;
        b = r;
    }
    a
}

fn num_integer_lcm(a: &BigInt, b: &BigInt) -> BigInt {
    if a.is_zero() || b.is_zero() {
        return BigInt::zero();
    }
    (a * b).abs() / num_integer_gcd(a, b)
}

pub fn pow_rational(x: &BigRational, e: u32) -> BigRational {
    let mut out = BigRational::one();
    for _ in 0..e {
        out *= x;
    }
    out
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or_else(|| {
        // Only reachable for astronomically large coefficients.
        let n = r.numer().to_f64().unwrap_or(f64::INFINITY);
        let d = r.denom().to_f64().unwrap_or(f64::INFINITY);
        n / d
    })
}

/// Exact conversion of a finite double.
pub fn f64_to_rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite value")
}

pub fn format_rational(r: &BigRational) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Nested Horner evaluation tree with double coefficients.
#[derive(Clone, Debug)]
pub enum Horner {
    Const(f64),
    /// `Σ coeffs[k] · x[var]^k`, evaluated from the highest power down.
    Node { var: usize, coeffs: Vec<Horner> },
}

impl Horner {
    fn build(terms: &[(Monomial, f64)], var: usize, nvars: usize) -> Horner {
        if var == nvars || terms.iter().all(|(m, _)| m[var..].iter().all(|&e| e == 0)) {
            // Sum in the (deterministic) BTreeMap order of the incoming terms.
            return Horner::Const(terms.iter().map(|(_, c)| *c).sum());
        }
        let max_e = terms.iter().map(|(m, _)| m[var]).max().unwrap_or(0) as usize;
        if max_e == 0 {
            return Horner::build(terms, var + 1, nvars);
        }
        let mut buckets: Vec<Vec<(Monomial, f64)>> = vec![Vec::new(); max_e + 1];
        for (m, c) in terms {
            buckets[m[var] as usize].push((m.clone(), *c));
        }
        let coeffs = buckets
            .iter()
            .map(|b| if b.is_empty() { Horner::Const(0.0) } else { Horner::build(b, var + 1, nvars) })
            .collect();
        Horner::Node { var, coeffs }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Horner::Const(c) => *c,
            Horner::Node { var, coeffs } => {
                let v = x[*var];
                let mut acc = 0.0;
                for c in coeffs.iter().rev() {
                    acc = acc * v + c.eval(x);
                }
                acc
            }
        }
    }
}

/// Dense univariate polynomial over ℚ, coefficients from the constant term up.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UPoly {
    coeffs: Vec<BigRational>,
}

impl UPoly {
    pub fn new(mut coeffs: Vec<BigRational>) -> Self {
        while coeffs.last().is_some_and(|c| c.is_zero()) {
            coeffs.pop();
        }
        UPoly { coeffs }
    }

    pub fn zero() -> Self {
        UPoly { coeffs: Vec::new() }
    }

    pub fn constant(c: BigRational) -> Self {
        UPoly::new(vec![c])
    }

    pub fn from_i64(coeffs: &[i64]) -> Self {
        UPoly::new(coeffs.iter().map(|&c| BigRational::from_integer(c.into())).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Degree; the zero polynomial reports `None`.
    pub fn degree(&self) -> Option<usize> {
        (!self.coeffs.is_empty()).then(|| self.coeffs.len() - 1)
    }

    pub fn coeffs(&self) -> &[BigRational] {
        &self.coeffs
    }

    pub fn leading(&self) -> BigRational {
        self.coeffs.last().cloned().unwrap_or_else(BigRational::zero)
    }

    pub fn eval(&self, x: &BigRational) -> BigRational {
        let mut acc = BigRational::zero();
        for c in self.coeffs.iter().rev() {
            acc = acc * x + c;
        }
        acc
    }

    pub fn eval_f64(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for c in self.coeffs.iter().rev() {
            acc = acc * x + rational_to_f64(c);
        }
        acc
    }

    pub fn add(&self, o: &UPoly) -> UPoly {
        let n = self.coeffs.len().max(o.coeffs.len());
        let z = BigRational::zero();
        UPoly::new(
            (0..n)
                .map(|i| self.coeffs.get(i).unwrap_or(&z) + o.coeffs.get(i).unwrap_or(&z))
                .collect(),
        )
    }

    pub fn sub(&self, o: &UPoly) -> UPoly {
        self.add(&o.scale(&-BigRational::one()))
    }

    pub fn scale(&self, k: &BigRational) -> UPoly {
        UPoly::new(self.coeffs.iter().map(|c| c * k).collect())
    }

    pub fn mul(&self, o: &UPoly) -> UPoly {
        if self.is_zero() || o.is_zero() {
            return UPoly::zero();
        }
        let mut out = vec![BigRational::zero(); self.coeffs.len() + o.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in o.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        UPoly::new(out)
    }

    pub fn derivative(&self) -> UPoly {
        UPoly::new(
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, c)| c * BigRational::from_integer(BigInt::from(i)))
                .collect(),
        )
    }

    /// Euclidean division: `self = q·d + r` with `deg r < deg d`.
    pub fn div_rem(&self, d: &UPoly) -> (UPoly, UPoly) {
        let dd = d.degree().expect("division by zero polynomial");
        let lead = d.leading();
        let mut r = self.coeffs.clone();
        let mut q = vec![BigRational::zero(); r.len().saturating_sub(dd).max(1)];
        while r.len() > dd && !r.is_empty() {
            let k = r.len() - 1 - dd;
            let f = r.last().unwrap() / &lead;
            for (i, c) in d.coeffs.iter().enumerate() {
                r[k + i] -= &f * c;
            }
            q[k] = f;
            r.pop();
            while r.last().is_some_and(|c| c.is_zero()) {
                r.pop();
            }
        }
        (UPoly::new(q), UPoly::new(r))
    }

    pub fn monic(&self) -> UPoly {
        if self.is_zero() {
            return self.clone();
        }
        let l = self.leading();
        self.scale(&(BigRational::one() / l))
    }

    pub fn gcd(&self, o: &UPoly) -> UPoly {
        let (mut a, mut b) = (self.clone(), o.clone());
        while !b.is_zero() {
            let (_, r) = a.div_rem(&b);
            a = b;
            b = r.monic();
        }
        a.monic()
    }

    /// Product of the distinct irreducible factors (up to a constant).
    pub fn squarefree(&self) -> UPoly {
        if self.degree().unwrap_or(0) == 0 {
            return self.clone();
        }
        let g = self.gcd(&self.derivative());
        if g.degree() == Some(0) {
            return self.monic();
        }
        self.div_rem(&g).0.monic()
    }

    fn sturm_sequence(&self) -> Vec<UPoly> {
        let mut seq = vec![self.clone(), self.derivative()];
        loop {
            let n = seq.len();
            if seq[n - 1].is_zero() {
                seq.pop();
                break;
            }
            let (_, r) = seq[n - 2].div_rem(&seq[n - 1]);
            if r.is_zero() {
                break;
            }
            seq.push(r.scale(&-BigRational::one()));
        }
        seq
    }

    /// Real roots of a squarefree polynomial inside the open interval
    /// `(lo, hi)`, each refined to an interval narrower than `width`.
    /// Returns `Err(x)` with the location of a cluster whose roots could not be
    /// separated at that width.
    pub fn isolate_roots(&self, lo: f64, hi: f64, width: f64) -> Result<Vec<f64>, f64> {
        let p = self.squarefree();
        match p.degree() {
            None | Some(0) => return Ok(Vec::new()),
            _ => {}
        }
        let seq = p.sturm_sequence();
        let variations = |x: &BigRational| -> usize {
            let mut count = 0;
            let mut last = 0i8;
            for q in &seq {
                let v = q.eval(x);
                let s = if v.is_positive() { 1 } else if v.is_negative() { -1 } else { 0 };
                if s != 0 {
                    if last != 0 && s != last {
                        count += 1;
                    }
                    last = s;
                }
            }
            count
        };
        let a = f64_to_rational(lo);
        let b = f64_to_rational(hi);
        let two = BigRational::from_integer(2.into());
        let w = f64_to_rational(width);
        let mut roots = Vec::new();
        // Roots in (a, b]; drop an exact root at b afterwards.
        let mut stack = vec![(a.clone(), b.clone(), variations(&a).saturating_sub(variations(&b)))];
        while let Some((l, r, n)) = stack.pop() {
            if n == 0 {
                continue;
            }
            if n == 1 {
                roots.push(p.refine_root(l, r, &w));
                continue;
            }
            if &r - &l < w {
                return Err(rational_to_f64(&((&l + &r) / &two)));
            }
            let m = (&l + &r) / &two;
            let vm = variations(&m);
            let vl = variations(&l);
            let vr = variations(&r);
            stack.push((m.clone(), r, vm.saturating_sub(vr)));
            stack.push((l, m, vl.saturating_sub(vm)));
        }
        let mut out: Vec<f64> = roots
            .into_iter()
            .filter(|x| x > &a && x < &b)
            .map(|x| rational_to_f64(&x))
            .collect();
        out.sort_by(|x, y| x.partial_cmp(y).unwrap());
        Ok(out)
    }

    /// Bisects a single simple root in `(l, r]` down to the given width.
    fn refine_root(&self, mut l: BigRational, mut r: BigRational, width: &BigRational) -> BigRational {
        let two = BigRational::from_integer(2.into());
        let sign = |x: &BigRational| {
            let v = self.eval(x);
            if v.is_positive() { 1 } else if v.is_negative() { -1 } else { 0 }
        };
        if sign(&r) == 0 {
            return r;
        }
        let sr = sign(&r);
        while &r - &l >= *width {
            let m = (&l + &r) / &two;
            let sm = sign(&m);
            if sm == 0 {
                return m;
            }
            if sm == sr {
                r = m;
            } else {
                l = m;
            }
        }
        (l + r) / two
    }
}

/// Determinant over ℚ by Gaussian elimination with exact pivots.
pub fn det_rational(mut m: Vec<Vec<BigRational>>) -> BigRational {
    let n = m.len();
    let mut det = BigRational::one();
    for col in 0..n {
        let Some(piv) = (col..n).find(|&r| !m[r][col].is_zero()) else {
            return BigRational::zero();
        };
        if piv != col {
            m.swap(piv, col);
            det = -det;
        }
        let p = m[col][col].clone();
        det *= &p;
        for r in col + 1..n {
            if m[r][col].is_zero() {
                continue;
            }
            let f = &m[r][col] / &p;
            for c in col..n {
                let v = &f * &m[col][c];
                m[r][c] -= v;
            }
        }
    }
    det
}

/// Resultant of two univariate polynomials given with formal degrees.
fn sylvester_resultant(f: &[BigRational], g: &[BigRational]) -> BigRational {
    let m = f.len() - 1;
    let n = g.len() - 1;
    let size = m + n;
    if size == 0 {
        return BigRational::one();
    }
    let mut rows = vec![vec![BigRational::zero(); size]; size];
    // Coefficients listed from the leading term down.
    for i in 0..n {
        for (j, c) in f.iter().rev().enumerate() {
            rows[i][i + j] = c.clone();
        }
    }
    for i in 0..m {
        for (j, c) in g.iter().rev().enumerate() {
            rows[n + i][i + j] = c.clone();
        }
    }
    det_rational(rows)
}

/// `Res_y(f, g)` for bivariate polynomials stored as coefficient lists in y
/// (each a polynomial in x), computed by exact evaluation at integer abscissae
/// and Newton interpolation.
pub fn resultant_y(f: &[UPoly], g: &[UPoly]) -> UPoly {
    let m = f.len() - 1;
    let n = g.len() - 1;
    let dfx = f.iter().filter_map(|c| c.degree()).max().unwrap_or(0);
    let dgx = g.iter().filter_map(|c| c.degree()).max().unwrap_or(0);
    let bound = m * dgx + n * dfx;
    let xs: Vec<BigRational> = (0..=bound).map(|i| BigRational::from_integer(BigInt::from(i))).collect();
    let ys: Vec<BigRational> = xs
        .iter()
        .map(|x| {
            let fe: Vec<BigRational> = f.iter().map(|c| c.eval(x)).collect();
            let ge: Vec<BigRational> = g.iter().map(|c| c.eval(x)).collect();
            sylvester_resultant(&fe, &ge)
        })
        .collect();
    newton_interpolate(&xs, &ys)
}

fn newton_interpolate(xs: &[BigRational], ys: &[BigRational]) -> UPoly {
    let n = xs.len();
    let mut dd = ys.to_vec();
    for level in 1..n {
        for i in (level..n).rev() {
            dd[i] = (&dd[i] - &dd[i - 1]) / (&xs[i] - &xs[i - level]);
        }
    }
    let mut acc = UPoly::constant(dd[n - 1].clone());
    for i in (0..n - 1).rev() {
        let factor = UPoly::new(vec![-xs[i].clone(), BigRational::one()]);
        acc = acc.mul(&factor).add(&UPoly::constant(dd[i].clone()));
    }
    acc
}

impl fmt::Display for UPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = vec!["x".to_string()];
        let p = Poly::from_terms(
            1,
            self.coeffs.iter().enumerate().map(|(i, c)| (vec![i as u32], c.clone())),
        );
        write!(f, "{}", p.display_with(&names))
    }
}
