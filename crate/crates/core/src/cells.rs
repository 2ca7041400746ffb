//! Cylindrical cell decomposition of a planar fiber.
//!
//! The x-axis is cut at the critical abscissae of the boundary polynomials
//! (discriminants, pairwise resultants, leading coefficients, crossings of
//! the box edges). Over each open column the real y-roots keep their number
//! and order, so the column splits into a stack of graphs `Γ_ξ` and bands
//! `(ξ, ξ′)`; graphs are stored as samples at Chebyshev abscissae.

use std::fmt::Write as _;

use num_rational::BigRational;
use num_traits::{One, Signed};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dsl::{DomainSpec, DslError, Fiber};
use crate::poly::{f64_to_rational, rational_to_f64, resultant_y, Poly, UPoly};

/// Isolation width for critical abscissae.
const ROOT_WIDTH: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CellError {
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error("cell decomposition needs a planar domain, got dimension {0}")]
    NotPlanar(usize),
    #[error("degenerate geometry near x ∈ [{lo}, {hi}]: {reason}")]
    DegenerateGeometry { lo: f64, hi: f64, reason: String },
    #[error("at least two samples per column are required")]
    Samples,
}

pub type Result<T> = std::result::Result<T, CellError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Inside,
    BoundaryClosure,
    Outside,
}

/// Cell of a stack. Graph cells carry `values`; band cells carry their lower
/// and upper bounding graphs, `None` standing for the box edge.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Cell {
    Graph {
        label: Label,
        /// Index into [`CellComplex2D::polys`].
        poly: usize,
        values: Vec<f64>,
    },
    Band {
        label: Label,
        lower: Option<Vec<f64>>,
        upper: Option<Vec<f64>>,
    },
}

impl Cell {
    pub fn label(&self) -> Label {
        match self {
            Cell::Graph { label, .. } | Cell::Band { label, .. } => *label,
        }
    }

    pub fn is_band(&self) -> bool {
        matches!(self, Cell::Band { .. })
    }
}

/// A column `(lo, hi)` (open) or `{lo}` (endpoint, `lo == hi`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Column {
    pub lo: f64,
    pub hi: f64,
    pub endpoint: bool,
    pub abscissae: Vec<f64>,
    /// Quadrature weights matching `abscissae` (open columns only).
    pub weights: Vec<f64>,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellComplex2D {
    pub t: Vec<f64>,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub criticals: Vec<f64>,
    pub columns: Vec<Column>,
    /// Boundary polynomials after substituting the parameters.
    pub polys: Vec<String>,
    /// Graph samples are continuous interpolation data; smoothness of the
    /// underlying functions is not certified.
    pub c1_certified: bool,
    #[serde(skip)]
    bivariate: Vec<Vec<UPoly>>,
    #[serde(skip)]
    spec: DomainSpec,
}

/// Bivariate polynomial as coefficients in y, each a polynomial in x.
type Bivariate = Vec<UPoly>;

fn to_bivariate(p: &Poly, t: &[f64]) -> Option<Bivariate> {
    let nparams = p.nvars() - 2;
    let subs: Vec<(usize, BigRational)> = (0..nparams).map(|i| (2 + i, f64_to_rational(t[i]))).collect();
    let q = p.substitute(&subs);
    let q = Poly::from_terms(2, q.terms().map(|(m, c)| (m[..2].to_vec(), c.clone()))).primitive();
    if q.as_constant().is_some() {
        return None;
    }
    let mut b = q.to_bivariate(0, 1);
    // Sign normalization so that p and −p coincide.
    let lead = b.last().unwrap().leading();
    if lead.is_negative() {
        let m1 = -BigRational::one();
        b = b.iter().map(|c| c.scale(&m1)).collect();
    }
    Some(b)
}

fn y_derivative(f: &Bivariate) -> Bivariate {
    if f.len() <= 1 {
        return vec![UPoly::zero()];
    }
    f.iter()
        .enumerate()
        .skip(1)
        .map(|(k, c)| c.scale(&BigRational::from_integer((k as i64).into())))
        .collect()
}

/// `f(x, y₀)` as a polynomial in x.
fn at_y(f: &Bivariate, y: &BigRational) -> UPoly {
    let mut acc = UPoly::zero();
    for c in f.iter().rev() {
        acc = acc.scale(y).add(c);
    }
    acc
}

/// `f(x₀, y)` as a polynomial in y.
fn at_x(f: &Bivariate, x: &BigRational) -> UPoly {
    UPoly::new(f.iter().map(|c| c.eval(x)).collect())
}

fn degenerate(lo: f64, hi: f64, reason: impl Into<String>) -> CellError {
    CellError::DegenerateGeometry { lo, hi, reason: reason.into() }
}

/// Chebyshev points of the first kind on `(lo, hi)`, increasing, with the
/// matching Fejér quadrature weights.
fn chebyshev(lo: f64, hi: f64, k: usize) -> (Vec<f64>, Vec<f64>) {
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let mut pts = Vec::with_capacity(k);
    let mut wts = Vec::with_capacity(k);
    for i in (0..k).rev() {
        let theta = std::f64::consts::PI * (2 * i + 1) as f64 / (2 * k) as f64;
        pts.push(mid + half * theta.cos());
        let mut s = 0.0;
        for j in 1..=k / 2 {
            s += (2.0 * j as f64 * theta).cos() / (4.0 * (j * j) as f64 - 1.0);
        }
        wts.push(half * 2.0 / k as f64 * (1.0 - 2.0 * s));
    }
    (pts, wts)
}

struct Setup {
    polys: Vec<Bivariate>,
    names: Vec<String>,
}

fn setup(spec: &DomainSpec, t: &[f64], extra: &[Poly]) -> Result<Setup> {
    let mut polys: Vec<Bivariate> = Vec::new();
    let mut names = Vec::new();
    let vars = vec!["x".to_string(), "y".to_string()];
    let sources = spec.atoms.iter().map(|a| a.boundary_poly()).chain(extra.iter());
    for p in sources {
        if let Some(b) = to_bivariate(p, t) {
            if !polys.contains(&b) {
                let as_poly = Poly::from_terms(
                    2,
                    b.iter().enumerate().flat_map(|(k, c)| {
                        c.coeffs().iter().enumerate().map(move |(i, v)| (vec![i as u32, k as u32], v.clone()))
                    }),
                );
                names.push(as_poly.display_with(&vars));
                polys.push(b);
            }
        }
    }
    Ok(Setup { polys, names })
}

fn push_roots(acc: &mut Vec<f64>, p: &UPoly, lo: f64, hi: f64, what: &str) -> Result<()> {
    if p.is_zero() || p.degree() == Some(0) {
        return Ok(());
    }
    let roots = p.isolate_roots(lo, hi, ROOT_WIDTH).map_err(|x| {
        degenerate(x - ROOT_WIDTH, x + ROOT_WIDTH, format!("clustered roots of the {what} polynomial"))
    })?;
    acc.extend(roots);
    Ok(())
}

fn criticals(setup: &Setup, xr: (f64, f64), yr: (f64, f64)) -> Result<Vec<f64>> {
    let (a, b) = xr;
    let mut xs = Vec::new();
    let yc = f64_to_rational(yr.0);
    let yd = f64_to_rational(yr.1);
    for (i, f) in setup.polys.iter().enumerate() {
        if f.len() == 1 {
            push_roots(&mut xs, &f[0], a, b, "vertical")?;
            continue;
        }
        let disc = resultant_y(f, &y_derivative(f));
        if disc.is_zero() {
            return Err(degenerate(a, b, format!("repeated factor in `{}`", setup.names[i])));
        }
        push_roots(&mut xs, &disc, a, b, "discriminant")?;
        push_roots(&mut xs, f.last().unwrap(), a, b, "leading coefficient")?;
        for y in [&yc, &yd] {
            let edge = at_y(f, y);
            push_roots(&mut xs, &edge, a, b, "box edge")?;
        }
        for (j, g) in setup.polys.iter().enumerate().skip(i + 1) {
            if g.len() == 1 {
                continue;
            }
            let r = resultant_y(f, g);
            if r.is_zero() {
                return Err(degenerate(
                    a,
                    b,
                    format!("`{}` and `{}` share a factor", setup.names[i], setup.names[j]),
                ));
            }
            push_roots(&mut xs, &r, a, b, "resultant")?;
        }
    }
    xs.sort_by(f64::total_cmp);
    let merge = 1e-9 * (b - a);
    let mut out: Vec<f64> = Vec::new();
    for x in xs {
        if out.last().is_none_or(|&l| x - l > merge) {
            out.push(x);
        }
    }
    Ok(out)
}

/// Sorted y-roots in the open box range, tagged with their polynomial.
fn stack_roots(setup: &Setup, x: f64, yr: (f64, f64)) -> std::result::Result<Vec<(f64, usize)>, f64> {
    let xq = f64_to_rational(x);
    let mut roots = Vec::new();
    for (i, f) in setup.polys.iter().enumerate() {
        let p = at_x(f, &xq);
        if p.degree().is_none_or(|d| d == 0) {
            continue;
        }
        for r in p.isolate_roots(yr.0, yr.1, ROOT_WIDTH)? {
            roots.push((r, i));
        }
    }
    roots.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(roots)
}

fn member(fiber: &Fiber<'_>, x: f64, y: f64) -> bool {
    let p = [x, y];
    fiber.is_inside_box(&p) && fiber.contains(&p)
}

/// Non-members touching the domain within `delta` count as boundary closure.
fn point_label(fiber: &Fiber<'_>, x: f64, y: f64, delta: f64) -> Label {
    if member(fiber, x, y) {
        return Label::Inside;
    }
    let near = [(delta, 0.0), (-delta, 0.0), (0.0, delta), (0.0, -delta)];
    if near.iter().any(|(dx, dy)| member(fiber, x + dx, y + dy)) {
        Label::BoundaryClosure
    } else {
        Label::Outside
    }
}

/// Label of a graph of `setup.polys[poly]` through `(x, y)`: atoms bounded by
/// that polynomial vanish on it exactly.
fn graph_label(setup: &Setup, fiber: &Fiber<'_>, poly: usize, x: f64, y: f64, delta: f64) -> Label {
    let zero: Vec<usize> = fiber
        .spec()
        .atoms
        .iter()
        .enumerate()
        .filter(|(_, a)| to_bivariate(a.boundary_poly(), fiber.params()).as_ref() == Some(&setup.polys[poly]))
        .map(|(i, _)| i)
        .collect();
    let p = [x, y];
    if fiber.is_inside_box(&p) && fiber.contains_on_zero_set(&p, &zero) {
        return Label::Inside;
    }
    match point_label(fiber, x, y, delta) {
        Label::Outside => Label::Outside,
        _ => Label::BoundaryClosure,
    }
}

fn open_column(setup: &Setup, fiber: &Fiber<'_>, lo: f64, hi: f64, k: usize, yr: (f64, f64), delta: f64) -> Result<Column> {
    let (xs, ws) = chebyshev(lo, hi, k);
    let stacks: Vec<Vec<(f64, usize)>> = xs
        .iter()
        .map(|&x| stack_roots(setup, x, yr))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| degenerate(lo, hi, "clustered y-roots inside a column"))?;
    let pattern: Vec<usize> = stacks[0].iter().map(|r| r.1).collect();
    for s in &stacks[1..] {
        let p: Vec<usize> = s.iter().map(|r| r.1).collect();
        if p != pattern {
            return Err(degenerate(lo, hi, "root count or order changes inside a column"));
        }
    }
    let m = pattern.len();
    let graph = |j: usize| -> Vec<f64> { stacks.iter().map(|s| s[j].0).collect() };
    let mid = k / 2;
    let xm = xs[mid];
    let mut cells = Vec::with_capacity(2 * m + 1);
    for j in 0..=m {
        let lower = (j > 0).then(|| graph(j - 1));
        let upper = (j < m).then(|| graph(j));
        let yl = lower.as_ref().map_or(yr.0, |g| g[mid]);
        let yu = upper.as_ref().map_or(yr.1, |g| g[mid]);
        let label = if member(fiber, xm, 0.5 * (yl + yu)) { Label::Inside } else { Label::Outside };
        cells.push(Cell::Band { label, lower, upper });
        if j < m {
            let values = graph(j);
            let label = graph_label(setup, fiber, pattern[j], xm, values[mid], delta);
            cells.push(Cell::Graph { label, poly: pattern[j], values });
        }
    }
    Ok(Column { lo, hi, endpoint: false, abscissae: xs, weights: ws, cells })
}

fn endpoint_column(setup: &Setup, fiber: &Fiber<'_>, x: f64, yr: (f64, f64), delta: f64) -> Result<Column> {
    let xq = f64_to_rational(x);
    let mut roots: Vec<(f64, usize)> = Vec::new();
    let scale = yr.1 - yr.0;
    for (i, f) in setup.polys.iter().enumerate() {
        let p = at_x(f, &xq);
        if p.degree().is_none_or(|d| d == 0) {
            continue;
        }
        // The abscissa is only an approximation of a critical value, so a
        // multiple root may have split; clustered roots are merged.
        let p = p.squarefree();
        let mut rs: Vec<f64> = Vec::new();
        let coeffs: Vec<f64> = p.coeffs().iter().map(rational_to_f64).collect();
        let n = 4096;
        let eval = |y: f64| coeffs.iter().rev().fold(0.0, |acc, c| acc * y + c);
        let dp = p.derivative();
        let dcoeffs: Vec<f64> = dp.coeffs().iter().map(rational_to_f64).collect();
        let deval = |y: f64| dcoeffs.iter().rev().fold(0.0, |acc, c| acc * y + c);
        let mut prev_y = yr.0;
        let mut prev = eval(prev_y);
        for s in 1..=n {
            let y = yr.0 + scale * s as f64 / n as f64;
            let v = eval(y);
            let dy_prev = deval(prev_y);
            let dy = deval(y);
            if (prev > 0.0) != (v > 0.0) && prev != 0.0 {
                let (mut a, mut b) = (prev_y, y);
                for _ in 0..60 {
                    let c = 0.5 * (a + b);
                    if (eval(c) > 0.0) == (prev > 0.0) {
                        a = c;
                    } else {
                        b = c;
                    }
                }
                rs.push(0.5 * (a + b));
            } else if (dy_prev > 0.0) != (dy > 0.0) {
                // Touching root: a local extremum of |p| that nearly vanishes.
                let (mut a, mut b) = (prev_y, y);
                for _ in 0..60 {
                    let c = 0.5 * (a + b);
                    if (deval(c) > 0.0) == (dy_prev > 0.0) {
                        a = c;
                    } else {
                        b = c;
                    }
                }
                let c = 0.5 * (a + b);
                let size = coeffs.iter().map(|c| c.abs()).fold(0.0, f64::max);
                if eval(c).abs() <= 1e-7 * size {
                    rs.push(c);
                }
            }
            prev_y = y;
            prev = v;
        }
        for r in rs {
            if r > yr.0 && r < yr.1 {
                roots.push((r, i));
            }
        }
    }
    roots.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, usize)> = Vec::new();
    for r in roots {
        if merged.last().is_none_or(|l| r.0 - l.0 > 1e-6 * scale) {
            merged.push(r);
        }
    }
    let mut cells = Vec::with_capacity(2 * merged.len() + 1);
    for j in 0..=merged.len() {
        let yl = if j > 0 { merged[j - 1].0 } else { yr.0 };
        let yu = if j < merged.len() { merged[j].0 } else { yr.1 };
        let label = point_label(fiber, x, 0.5 * (yl + yu), delta);
        cells.push(Cell::Band {
            label,
            lower: (j > 0).then(|| vec![yl]),
            upper: (j < merged.len()).then(|| vec![yu]),
        });
        if j < merged.len() {
            cells.push(Cell::Graph {
                label: graph_label(setup, fiber, merged[j].1, x, yu, delta),
                poly: merged[j].1,
                values: vec![yu],
            });
        }
    }
    Ok(Column { lo: x, hi: x, endpoint: true, abscissae: vec![x], weights: vec![], cells })
}

/// Decomposes `Ω_t ∩ box` into cells compatible with every atom and with the
/// `extra` polynomials (given over the spec's variables).
pub fn cell_decompose_2d(
    spec: &DomainSpec,
    t: &[f64],
    samples_per_column: usize,
    extra: &[Poly],
) -> Result<CellComplex2D> {
    if spec.ambient_dim != 2 {
        return Err(CellError::NotPlanar(spec.ambient_dim));
    }
    if samples_per_column < 2 {
        return Err(CellError::Samples);
    }
    let fiber = spec.fiber(t)?;
    let setup = setup(spec, t, extra)?;
    let xr = (spec.bounding_box[0].lo, spec.bounding_box[0].hi);
    let yr = (spec.bounding_box[1].lo, spec.bounding_box[1].hi);
    let crit = criticals(&setup, xr, yr)?;
    let delta = 1e-7 * (xr.1 - xr.0).max(yr.1 - yr.0);
    let mut bounds = vec![xr.0];
    bounds.extend(crit.iter().copied());
    bounds.push(xr.1);
    let mut jobs: Vec<(f64, f64, bool)> = Vec::new();
    for w in 0..bounds.len() - 1 {
        if w > 0 {
            jobs.push((bounds[w], bounds[w], true));
        }
        jobs.push((bounds[w], bounds[w + 1], false));
    }
    let columns: Vec<Column> = jobs
        .par_iter()
        .map(|&(lo, hi, endpoint)| {
            if endpoint {
                endpoint_column(&setup, &fiber, lo, yr, delta)
            } else {
                open_column(&setup, &fiber, lo, hi, samples_per_column, yr, delta)
            }
        })
        .collect::<Result<_>>()?;
    Ok(CellComplex2D {
        t: t.to_vec(),
        x_range: xr,
        y_range: yr,
        criticals: crit,
        columns,
        polys: setup.names,
        c1_certified: false,
        bivariate: setup.polys,
        spec: spec.clone(),
    })
}

impl CellComplex2D {
    /// Number of two-dimensional cells (bands over open columns) inside Ω.
    pub fn inside_2d_count(&self) -> usize {
        self.columns
            .iter()
            .filter(|c| !c.endpoint)
            .flat_map(|c| &c.cells)
            .filter(|c| c.is_band() && c.label() == Label::Inside)
            .count()
    }

    /// `Σ ∫ (ξ′ − ξ) dx` over inside bands (Fejér quadrature per column).
    pub fn band_volume(&self) -> f64 {
        let mut total = 0.0;
        for col in self.columns.iter().filter(|c| !c.endpoint) {
            for cell in &col.cells {
                if let Cell::Band { label: Label::Inside, lower, upper } = cell {
                    for (k, w) in col.weights.iter().enumerate() {
                        let lo = lower.as_ref().map_or(self.y_range.0, |g| g[k]);
                        let hi = upper.as_ref().map_or(self.y_range.1, |g| g[k]);
                        total += w * (hi - lo);
                    }
                }
            }
        }
        total
    }

    /// Largest sampled height `ξ′ − ξ` of an inside band.
    pub fn max_band_height(&self) -> f64 {
        let mut best: f64 = 0.0;
        for col in self.columns.iter().filter(|c| !c.endpoint) {
            for cell in &col.cells {
                if let Cell::Band { label: Label::Inside, lower, upper } = cell {
                    for k in 0..col.abscissae.len() {
                        let lo = lower.as_ref().map_or(self.y_range.0, |g| g[k]);
                        let hi = upper.as_ref().map_or(self.y_range.1, |g| g[k]);
                        best = best.max(hi - lo);
                    }
                }
            }
        }
        best
    }

    /// Total polyline length of the sampled graphs in open columns.
    pub fn graph_length(&self) -> f64 {
        let mut total = 0.0;
        for col in self.columns.iter().filter(|c| !c.endpoint) {
            for cell in &col.cells {
                if let Cell::Graph { values, .. } = cell {
                    for k in 1..values.len() {
                        let dx = col.abscissae[k] - col.abscissae[k - 1];
                        let dy = values[k] - values[k - 1];
                        total += (dx * dx + dy * dy).sqrt();
                    }
                }
            }
        }
        total
    }

    /// The `(column, cell)` containing `(x, y)`, computed from the exact
    /// roots at `x`. Points on a critical abscissa belong to its endpoint
    /// column.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x < self.x_range.0 || x > self.x_range.1 || y <= self.y_range.0 || y >= self.y_range.1 {
            return None;
        }
        let ci = self.columns.iter().position(|c| {
            if c.endpoint {
                x == c.lo
            } else {
                x > c.lo && x < c.hi || (x == c.lo && c.lo == self.x_range.0) || (x == c.hi && c.hi == self.x_range.1)
            }
        })?;
        let col = &self.columns[ci];
        let setup = Setup { polys: self.bivariate.clone(), names: self.polys.clone() };
        let roots: Vec<f64> = if col.endpoint {
            col.cells
                .iter()
                .filter_map(|c| match c {
                    Cell::Graph { values, .. } => Some(values[0]),
                    _ => None,
                })
                .collect()
        } else {
            stack_roots(&setup, x, self.y_range).ok()?.into_iter().map(|r| r.0).collect()
        };
        let mut idx = 0;
        for r in &roots {
            if y > *r {
                idx += 2;
            } else if y == *r {
                return Some((ci, idx + 1));
            } else {
                break;
            }
        }
        Some((ci, idx))
    }

    /// Membership label of the cell containing `(x, y)`.
    pub fn label_at(&self, x: f64, y: f64) -> Option<Label> {
        let (c, k) = self.locate(x, y)?;
        Some(self.columns[c].cells[k].label())
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    /// JSON export.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("complex serializes")
    }

    /// Adjacency graph in DOT: vertical neighbours within a stack, and open
    /// column cells adjacent to cells of the neighbouring endpoint columns.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("graph cells {\n");
        let name = |c: usize, k: usize| format!("c{c}_{k}");
        for (ci, col) in self.columns.iter().enumerate() {
            for (k, cell) in col.cells.iter().enumerate() {
                let kind = if cell.is_band() { "band" } else { "graph" };
                let color = match cell.label() {
                    Label::Inside => "green",
                    Label::BoundaryClosure => "orange",
                    Label::Outside => "gray",
                };
                let _ = writeln!(
                    out,
                    "  {} [label=\"{kind} {ci}.{k}\", color={color}, dim={}];",
                    name(ci, k),
                    if col.endpoint || !cell.is_band() { 1 } else { 2 }
                );
            }
            for k in 1..col.cells.len() {
                let _ = writeln!(out, "  {} -- {};", name(ci, k - 1), name(ci, k));
            }
        }
        for ci in 0..self.columns.len() {
            let col = &self.columns[ci];
            if col.endpoint {
                continue;
            }
            for (nb, at_left) in [(ci.wrapping_sub(1), true), (ci + 1, false)] {
                let Some(end) = self.columns.get(nb).filter(|c| c.endpoint) else { continue };
                let k = if at_left { 0 } else { col.abscissae.len() - 1 };
                for (a, cell) in col.cells.iter().enumerate() {
                    let (lo, hi) = match cell {
                        Cell::Graph { values, .. } => (values[k], values[k]),
                        Cell::Band { lower, upper, .. } => (
                            lower.as_ref().map_or(self.y_range.0, |g| g[k]),
                            upper.as_ref().map_or(self.y_range.1, |g| g[k]),
                        ),
                    };
                    for (b, ec) in end.cells.iter().enumerate() {
                        let (elo, ehi) = match ec {
                            Cell::Graph { values, .. } => (values[0], values[0]),
                            Cell::Band { lower, upper, .. } => (
                                lower.as_ref().map_or(self.y_range.0, |g| g[0]),
                                upper.as_ref().map_or(self.y_range.1, |g| g[0]),
                            ),
                        };
                        if elo <= hi && lo <= ehi {
                            let _ = writeln!(out, "  {} -- {};", name(ci, a), name(nb, b));
                        }
                    }
                }
            }
        }
        out.push_str("}\n");
        out
    }
}

/// Merges adjacent inside bands whose separating graph lies inside Ω, so
/// that every inside band is bounded by boundary graphs or box edges.
pub fn merge_vertical(complex: &CellComplex2D) -> CellComplex2D {
    let mut out = complex.clone();
    for col in &mut out.columns {
        let mut cells: Vec<Cell> = Vec::with_capacity(col.cells.len());
        let mut i = 0;
        while i < col.cells.len() {
            let cell = col.cells[i].clone();
            let mergeable = |c: &Cell| matches!(c, Cell::Band { label: Label::Inside, .. });
            if mergeable(&cell) {
                let mut current = cell;
                while i + 2 < col.cells.len()
                    && col.cells[i + 1].label() == Label::Inside
                    && !col.cells[i + 1].is_band()
                    && mergeable(&col.cells[i + 2])
                {
                    let (Cell::Band { lower, .. }, Cell::Band { upper, .. }) = (&current, &col.cells[i + 2]) else {
                        unreachable!()
                    };
                    current = Cell::Band { label: Label::Inside, lower: lower.clone(), upper: upper.clone() };
                    i += 2;
                }
                cells.push(current);
            } else {
                cells.push(cell);
            }
            i += 1;
        }
        col.cells = cells;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_domain;

    fn complex(text: &str) -> CellComplex2D {
        let s = parse_domain(text).unwrap();
        cell_decompose_2d(&s, &s.default_params(), 32, &[]).unwrap()
    }

    #[test]
    fn disk_has_one_inside_cell() {
        let c = complex("dim 2\nbox [-1.5,1.5]x[-1.5,1.5]\nset: x^2+y^2<1");
        assert_eq!(c.criticals.len(), 2);
        assert!((c.criticals[0] + 1.0).abs() < 1e-9 && (c.criticals[1] - 1.0).abs() < 1e-9);
        assert_eq!(c.columns.iter().filter(|c| !c.endpoint).count(), 3);
        assert_eq!(c.inside_2d_count(), 1);
        assert!((c.band_volume() - std::f64::consts::PI).abs() < 1e-2, "{}", c.band_volume());
    }

    #[test]
    fn annulus_has_four_inside_cells() {
        let c = complex("dim 2\nbox [-1.5,1.5]x[-1.5,1.5]\nset: x^2+y^2<1 and x^2+y^2>0.25");
        assert_eq!(c.criticals.len(), 4);
        assert_eq!(c.inside_2d_count(), 4);
        assert_eq!(merge_vertical(&c).inside_2d_count(), 4);
    }

    #[test]
    fn two_disks_have_two_inside_cells() {
        let c = complex(
            "dim 2\nbox [-3,3]x[-1.5,1.5]\nset: (x+1.5)^2+y^2<1 or (x-1.5)^2+y^2<1",
        );
        assert_eq!(c.inside_2d_count(), 2);
    }

    #[test]
    fn spurious_split_is_merged() {
        let s = parse_domain("dim 2\nbox [-1.5,1.5]x[-1.5,1.5]\nset: x^2+y^2<1").unwrap();
        let y = Poly::var(2, 1);
        let c = cell_decompose_2d(&s, &[], 16, &[y]).unwrap();
        assert_eq!(c.inside_2d_count(), 2);
        assert_eq!(merge_vertical(&c).inside_2d_count(), 1);
    }

    #[test]
    fn chebyshev_weights_integrate_polynomials() {
        let (x, w) = chebyshev(-1.0, 2.0, 12);
        let i: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x * x).sum();
        assert!((i - (16.0 - 1.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn locate_agrees_with_labels() {
        let c = complex("dim 2\nbox [-1.5,1.5]x[-1.5,1.5]\nset: x^2+y^2<1 and x^2+y^2>0.25");
        assert_eq!(c.label_at(0.0, 0.75), Some(Label::Inside));
        assert_eq!(c.label_at(0.0, 0.0), Some(Label::Outside));
        assert_eq!(c.label_at(1.2, 0.0), Some(Label::Outside));
    }

    #[test]
    fn graphs_on_the_boundary_are_not_inside() {
        let c = complex("dim 2\nbox [-1.5,1.5]x[-1.5,1.5]\nset: x^2+y^2<1 and (y != 0 or x < 0)");
        // Only the segment y = 0, x < 0 is an inside graph.
        for col in c.columns.iter().filter(|c| !c.endpoint && c.lo > -1.0 && c.hi < 1.0) {
            let graphs: Vec<Label> = col.cells.iter().filter(|c| !c.is_band()).map(|c| c.label()).collect();
            let inside = if col.hi <= 0.0 { Label::Inside } else { Label::BoundaryClosure };
            let b = Label::BoundaryClosure;
            assert_eq!(graphs, vec![b, inside, b]);
        }
        let m = merge_vertical(&c);
        assert_eq!(m.inside_2d_count(), 3);
    }
}
