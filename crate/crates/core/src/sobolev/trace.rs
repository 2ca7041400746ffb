//! Empirical constants for the trace interpolation inequality
//! `‖φ‖_{L^p(∂Ω)} ≤ C ‖φ‖^{1−1/p}_{L^p(Ω)} ‖φ‖^{1/p}_{W^{1,p}(Ω)}`.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::Serialize;

use super::{Result, SobolevError};
use crate::dsl::Fiber;
use crate::raster::{rasterize, RasterDomain};

/// Which family of smooth test functions to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Battery {
    Polynomial,
    Trigonometric,
    Bump,
}

impl std::str::FromStr for Battery {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "polynomial" => Ok(Battery::Polynomial),
            "trigonometric" => Ok(Battery::Trigonometric),
            "bump" => Ok(Battery::Bump),
            _ => Err(format!("unknown battery `{s}` (expected polynomial, trigonometric or bump)")),
        }
    }
}

/// Ambient test function. Polynomial and trigonometric members are written
/// in box-normalized coordinates `z = (x − mid)/half_width ∈ [−1, 1]ⁿ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TraceFunction {
    Polynomial { name: String, terms: Vec<(f64, Vec<u32>)> },
    Trigonometric { name: String, terms: Vec<(f64, Vec<f64>, f64)> },
    Bump { name: String, center: Vec<f64>, radius: f64 },
}

/// Box-normalized coordinates.
#[derive(Debug, Clone)]
struct Frame {
    mid: Vec<f64>,
    half: Vec<f64>,
}

impl Frame {
    fn of(raster: &RasterDomain) -> Self {
        let b = &raster.spec().bounding_box;
        Frame { mid: b.iter().map(|iv| iv.mid()).collect(), half: b.iter().map(|iv| 0.5 * iv.width()).collect() }
    }

    fn z(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mid).zip(&self.half).map(|((v, m), w)| (v - m) / w).collect()
    }
}

impl TraceFunction {
    pub fn name(&self) -> &str {
        match self {
            TraceFunction::Polynomial { name, .. }
            | TraceFunction::Trigonometric { name, .. }
            | TraceFunction::Bump { name, .. } => name,
        }
    }

    fn eval(&self, x: &[f64], frame: &Frame) -> f64 {
        match self {
            TraceFunction::Polynomial { terms, .. } => {
                let z = frame.z(x);
                terms
                    .iter()
                    .map(|(c, e)| c * z.iter().zip(e).map(|(v, &k)| v.powi(k as i32)).product::<f64>())
                    .sum()
            }
            TraceFunction::Trigonometric { terms, .. } => {
                let z = frame.z(x);
                terms
                    .iter()
                    .map(|(c, k, phase)| c * (PI * z.iter().zip(k).map(|(v, w)| v * w).sum::<f64>() + phase).cos())
                    .sum()
            }
            TraceFunction::Bump { center, radius, .. } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (radius * radius);
                if r2 >= 1.0 {
                    0.0
                } else {
                    (1.0 - 1.0 / (1.0 - r2)).exp()
                }
            }
        }
    }
}

/// Norms and ratio for one test function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub name: String,
    pub boundary_norm: f64,
    pub interior_norm: f64,
    pub w_norm: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    pub battery: Battery,
    pub p: f64,
    pub resolution: usize,
    pub h: f64,
    pub boundary_measure: f64,
    pub functions: Vec<TraceFunction>,
    pub entries: Vec<TraceEntry>,
    pub sup_ratio: f64,
    /// The same battery on the raster at twice the resolution.
    pub refined_entries: Vec<TraceEntry>,
    pub refined_sup_ratio: f64,
    /// Suprema agree within 10% (or both vanish).
    pub stable: bool,
}

fn member(fiber: &Fiber<'_>, x: &[f64]) -> bool {
    fiber.is_inside_box(x) && fiber.contains(x)
}

/// Point on the segment `a → b` (a inside, b outside) where membership flips.
fn crossing(fiber: &Fiber<'_>, a: &[f64], b: &[f64]) -> Vec<f64> {
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut p = a.to_vec();
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        for j in 0..a.len() {
            p[j] = a[j] + mid * (b[j] - a[j]);
        }
        if member(fiber, &p) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    a.iter().zip(b).map(|(u, v)| u + s * (v - u)).collect()
}

/// Boundary sample: a point with its quadrature weight.
struct BoundaryQuadrature {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

/// Grid-center position for possibly out-of-grid coordinates.
fn center_at(raster: &RasterDomain, coords: &[i64]) -> Vec<f64> {
    let h = raster.spacing();
    coords.iter().zip(raster.origin()).map(|(&c, o)| o + (c as f64 + 0.5) * h).collect()
}

fn interior_at(raster: &RasterDomain, coords: &[i64]) -> bool {
    let counts = raster.counts();
    if coords.iter().zip(counts).any(|(&c, &n)| c < 0 || c >= n as i64) {
        return false;
    }
    let idx: Vec<usize> = coords.iter().map(|&c| c as usize).collect();
    raster.is_interior(raster.index(&idx))
}

/// Marching squares on the center grid; polyline vertices are refined to the
/// true boundary by bisection. Each segment carries trapezoid weights.
fn planar_quadrature(raster: &RasterDomain) -> BoundaryQuadrature {
    let fiber = raster.fiber();
    let counts = raster.counts();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for j in -1..counts[1] as i64 {
        for i in -1..counts[0] as i64 {
            let corners = [[i, j], [i + 1, j], [i, j + 1], [i + 1, j + 1]];
            let inside: Vec<bool> = corners.iter().map(|c| interior_at(raster, c)).collect();
            let k = inside.iter().filter(|&&b| b).count();
            if k == 0 || k == 4 {
                continue;
            }
            // Edges in cyclic order: bottom, right, top, left.
            let edges = [(0, 1), (1, 3), (3, 2), (2, 0)];
            let mut cross: Vec<Option<Vec<f64>>> = vec![None; 4];
            for (e, &(a, b)) in edges.iter().enumerate() {
                if inside[a] != inside[b] {
                    let (pin, pout) = if inside[a] { (a, b) } else { (b, a) };
                    cross[e] = Some(crossing(&fiber, &center_at(raster, &corners[pin]), &center_at(raster, &corners[pout])));
                }
            }
            let pairs: Vec<(usize, usize)> = if cross.iter().filter(|c| c.is_some()).count() == 4 {
                let mid = center_at(raster, &[i, j]).iter().map(|v| v + 0.5 * raster.spacing()).collect::<Vec<_>>();
                // Saddle: when the square center is inside, cut off the two
                // outside corners, otherwise the two inside ones.
                let center_in = member(&fiber, &mid);
                if center_in == inside[0] {
                    vec![(0, 1), (2, 3)]
                } else {
                    vec![(3, 0), (1, 2)]
                }
            } else {
                let idx: Vec<usize> = (0..4).filter(|&e| cross[e].is_some()).collect();
                vec![(idx[0], idx[1])]
            };
            for (a, b) in pairs {
                let (pa, pb) = (cross[a].clone().unwrap(), cross[b].clone().unwrap());
                let len = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
                points.push(pa);
                weights.push(0.5 * len);
                points.push(pb);
                weights.push(0.5 * len);
            }
        }
    }
    BoundaryQuadrature { points, weights }
}

/// Crossing quadrature: `∫ f dℋ^{n−1} = Σ_j ∫ f |ν_j|·|ν_j| dℋ^{n−1}`, where
/// `∫ g |ν_j|` is the sum of `g` over the crossings of the axis-`j` grid lines
/// times `h^{n−1}`.
fn crossing_quadrature(raster: &RasterDomain) -> BoundaryQuadrature {
    let fiber = raster.fiber();
    let n = raster.dim();
    let h = raster.spacing();
    let cell = h.powi(n as i32 - 1);
    let spec = raster.spec();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for &idx in raster.dofs() {
        let coords: Vec<i64> = raster.coords(idx).iter().map(|&c| c as i64).collect();
        for j in 0..n {
            for step in [-1i64, 1] {
                let mut nb = coords.clone();
                nb[j] += step;
                if interior_at(raster, &nb) {
                    continue;
                }
                let a = center_at(raster, &coords);
                let b = center_at(raster, &nb);
                let x = crossing(&fiber, &a, &b);
                let iv = spec.bounding_box[j];
                let on_box = (x[j] - iv.lo).abs() < 1e-9 * h.max(1.0) || (x[j] - iv.hi).abs() < 1e-9 * h.max(1.0);
                let nu_j = if on_box {
                    1.0
                } else {
                    let mut best: Option<(f64, f64)> = None;
                    for atom in 0..spec.atoms.len() {
                        let g = fiber.boundary_gradient(atom, &x);
                        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if gn == 0.0 {
                            continue;
                        }
                        let dist = fiber.boundary_value(atom, &x).abs() / gn;
                        if best.is_none_or(|(d, _)| dist < d) {
                            best = Some((dist, g[j].abs() / gn));
                        }
                    }
                    best.map(|b| b.1).unwrap_or(1.0)
                };
                points.push(x);
                weights.push(nu_j * cell);
            }
        }
    }
    BoundaryQuadrature { points, weights }
}

fn quadrature(raster: &RasterDomain) -> BoundaryQuadrature {
    if raster.dim() == 2 {
        planar_quadrature(raster)
    } else {
        crossing_quadrature(raster)
    }
}

/// Distance from each interior cell center to the nearest exterior center,
/// by breadth-first propagation of nearest exterior sites.
fn exterior_distance(raster: &RasterDomain) -> Vec<f64> {
    let n = raster.dim();
    let total = raster.num_cells();
    let mut nearest: Vec<Option<Vec<f64>>> = vec![None; total];
    let mut queue = VecDeque::new();
    for &idx in raster.dofs() {
        let coords: Vec<i64> = raster.coords(idx).iter().map(|&c| c as i64).collect();
        for j in 0..n {
            for step in [-1i64, 1] {
                let mut nb = coords.clone();
                nb[j] += step;
                if !interior_at(raster, &nb) {
                    let site = center_at(raster, &nb);
                    let c = raster.center(idx);
                    let better = match &nearest[idx] {
                        None => true,
                        Some(s) => dist2(&c, &site) < dist2(&c, s),
                    };
                    if better {
                        nearest[idx] = Some(site);
                    }
                }
            }
        }
        if nearest[idx].is_some() {
            queue.push_back(idx);
        }
    }
    while let Some(idx) = queue.pop_front() {
        let site = nearest[idx].clone().unwrap();
        for j in 0..n {
            for forward in [false, true] {
                let Some(nb) = raster.neighbor(idx, j, forward) else { continue };
                if !raster.is_interior(nb) {
                    continue;
                }
                let c = raster.center(nb);
                let better = match &nearest[nb] {
                    None => true,
                    Some(s) => dist2(&c, &site) < dist2(&c, s) - 1e-15,
                };
                if better {
                    nearest[nb] = Some(site.clone());
                    queue.push_back(nb);
                }
            }
        }
    }
    raster
        .dofs()
        .iter()
        .map(|&idx| nearest[idx].as_ref().map(|s| dist2(&raster.center(idx), s).sqrt()).unwrap_or(0.0))
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn build_battery(raster: &RasterDomain, battery: Battery) -> Vec<TraceFunction> {
    let n = raster.dim();
    let e = |pairs: &[(usize, u32)]| {
        let mut v = vec![0u32; n];
        for &(j, k) in pairs {
            v[j % n] += k;
        }
        v
    };
    let k = |pairs: &[(usize, f64)]| {
        let mut v = vec![0.0; n];
        for &(j, w) in pairs {
            v[j % n] += w;
        }
        v
    };
    match battery {
        Battery::Polynomial => vec![
            TraceFunction::Polynomial { name: "1".into(), terms: vec![(1.0, e(&[]))] },
            TraceFunction::Polynomial { name: "1+z0".into(), terms: vec![(1.0, e(&[])), (1.0, e(&[(0, 1)]))] },
            TraceFunction::Polynomial {
                name: "z0^2-z1".into(),
                terms: vec![(1.0, e(&[(0, 2)])), (-1.0, e(&[(1, 1)]))],
            },
            TraceFunction::Polynomial { name: "2+z0*z1".into(), terms: vec![(2.0, e(&[])), (1.0, e(&[(0, 1), (1, 1)]))] },
            TraceFunction::Polynomial {
                name: "1+z0^3-z1^2".into(),
                terms: vec![(1.0, e(&[])), (1.0, e(&[(0, 3)])), (-1.0, e(&[(1, 2)]))],
            },
        ],
        Battery::Trigonometric => vec![
            TraceFunction::Trigonometric { name: "cos(pi z0)".into(), terms: vec![(1.0, k(&[(0, 1.0)]), 0.0)] },
            TraceFunction::Trigonometric {
                name: "sin(pi z0)".into(),
                terms: vec![(1.0, k(&[(0, 1.0)]), -0.5 * PI)],
            },
            TraceFunction::Trigonometric {
                name: "1+cos(2pi(z0+z1))/2".into(),
                terms: vec![(1.0, k(&[]), 0.0), (0.5, k(&[(0, 2.0), (1, 2.0)]), 0.0)],
            },
            TraceFunction::Trigonometric {
                name: "cos(3pi z1+0.3)".into(),
                terms: vec![(1.0, k(&[(1, 3.0)]), 0.3)],
            },
        ],
        Battery::Bump => {
            let dist = exterior_distance(raster);
            let h = raster.spacing();
            let dofs = raster.dofs();
            let deepest = |skip: &dyn Fn(&[f64]) -> bool| {
                let mut best: Option<(f64, usize)> = None;
                for (d, &idx) in dofs.iter().enumerate() {
                    if skip(&raster.center(idx)) {
                        continue;
                    }
                    if best.is_none_or(|(v, _)| dist[d] > v) {
                        best = Some((dist[d], idx));
                    }
                }
                best
            };
            let mut out = Vec::new();
            if let Some((d1, i1)) = deepest(&|_| false) {
                let c1 = raster.center(i1);
                let r1 = 0.8 * (d1 - h);
                if r1 > 0.0 {
                    out.push(TraceFunction::Bump { name: "bump".into(), center: c1.clone(), radius: r1 });
                    out.push(TraceFunction::Bump { name: "bump/2".into(), center: c1.clone(), radius: 0.5 * r1 });
                    if let Some((d2, i2)) = deepest(&|x| dist2(x, &c1) < (d1 + h) * (d1 + h)) {
                        let r2 = 0.8 * (d2 - h);
                        if r2 > 2.0 * h {
                            out.push(TraceFunction::Bump {
                                name: "bump-second".into(),
                                center: raster.center(i2),
                                radius: r2,
                            });
                        }
                    }
                }
            }
            out
        }
    }
}

fn evaluate(raster: &RasterDomain, p: f64, functions: &[TraceFunction]) -> Result<(f64, Vec<TraceEntry>)> {
    let quad = quadrature(raster);
    if quad.points.is_empty() {
        return Err(SobolevError::DegenerateBoundary);
    }
    let frame = Frame::of(raster);
    let n = raster.dim();
    let h = raster.spacing();
    let vol = h.powi(n as i32);
    let measure: f64 = quad.weights.iter().sum();
    let dofs = raster.dofs();
    let entries = functions
        .iter()
        .map(|f| {
            let vals: Vec<f64> = dofs.iter().map(|&idx| f.eval(&raster.center(idx), &frame)).collect();
            let bsum: f64 = quad.points.iter().zip(&quad.weights).map(|(x, w)| w * f.eval(x, &frame).abs().powf(p)).sum();
            let isum: f64 = vals.iter().map(|v| v.abs().powf(p)).sum::<f64>() * vol;
            let mut gsum = 0.0;
            for (d, &idx) in dofs.iter().enumerate() {
                let mut g2 = 0.0;
                for j in 0..n {
                    let diff = if let Some(nb) = raster.neighbor_dof(idx, j, true) {
                        (vals[nb] - vals[d]) / h
                    } else if let Some(nb) = raster.neighbor_dof(idx, j, false) {
                        (vals[d] - vals[nb]) / h
                    } else {
                        0.0
                    };
                    g2 += diff * diff;
                }
                gsum += g2.sqrt().powf(p);
            }
            gsum *= vol;
            let boundary_norm = bsum.powf(1.0 / p);
            let interior_norm = isum.powf(1.0 / p);
            let w_norm = (isum + gsum).powf(1.0 / p);
            let denom = interior_norm.powf(1.0 - 1.0 / p) * w_norm.powf(1.0 / p);
            let ratio = if denom > 0.0 { boundary_norm / denom } else { 0.0 };
            TraceEntry { name: f.name().to_string(), boundary_norm, interior_norm, w_norm, ratio }
        })
        .collect();
    Ok((measure, entries))
}

fn sup(entries: &[TraceEntry]) -> f64 {
    entries.iter().map(|e| e.ratio).fold(0.0, f64::max)
}

/// Ratio `‖φ‖_∂ / (‖φ‖^{1−1/p} ‖φ‖_W^{1/p})` over a battery of smooth ambient
/// functions, plus the same battery on a raster of twice the resolution.
pub fn trace_ratio_battery(raster: &RasterDomain, p: f64, battery: Battery) -> Result<TraceReport> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(SobolevError::Exponent(p));
    }
    if raster.is_empty() {
        return Err(crate::raster::RasterError::EmptyFiber.into());
    }
    let functions = build_battery(raster, battery);
    let (boundary_measure, entries) = evaluate(raster, p, &functions)?;
    let fine = rasterize(raster.spec(), raster.params(), 2 * raster.resolution())?;
    let (_, refined_entries) = evaluate(&fine, p, &functions)?;
    let (a, b) = (sup(&entries), sup(&refined_entries));
    let stable = (a - b).abs() <= 0.1 * a.max(b) || a.max(b) == 0.0;
    Ok(TraceReport {
        battery,
        p,
        resolution: raster.resolution(),
        h: raster.spacing(),
        boundary_measure,
        functions,
        entries,
        sup_ratio: a,
        refined_entries,
        refined_sup_ratio: b,
        stable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_domain;
    use std::sync::Arc;

    #[test]
    fn disk_perimeter_from_marching_squares() {
        let s = Arc::new(parse_domain("dim 2\nbox [-1.5,1.5]x[-1.5,1.5]\nset: x^2+y^2<1").unwrap());
        let r = rasterize(&s, &[], 96).unwrap();
        let q = quadrature(&r);
        let m: f64 = q.weights.iter().sum();
        assert!((m - 2.0 * PI).abs() < 1e-3, "{m}");
    }

    #[test]
    fn interval_boundary_has_two_points() {
        let s = Arc::new(parse_domain("dim 1\nbox [0,2]\nset: x>0.5 and x<1.5").unwrap());
        let r = rasterize(&s, &[], 40).unwrap();
        let q = quadrature(&r);
        assert_eq!(q.points.len(), 2);
        assert!((q.points[0][0] - 0.5).abs() < 1e-9);
        assert!((q.points[1][0] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn crossing_quadrature_measures_a_sphere() {
        let s = Arc::new(parse_domain("dim 3\nbox [-1.5,1.5]x[-1.5,1.5]x[-1.5,1.5]\nset: x^2+y^2+z^2<1").unwrap());
        let r = rasterize(&s, &[], 48).unwrap();
        let m: f64 = crossing_quadrature(&r).weights.iter().sum();
        assert!((m - 4.0 * PI).abs() / (4.0 * PI) < 0.02, "{m}");
    }

    #[test]
    fn planar_crossing_quadrature_agrees_with_marching_squares() {
        let s = Arc::new(parse_domain("dim 2\nbox [-2,2]x[-2,2]\nset: x^2/4+y^2<1").unwrap());
        let r = rasterize(&s, &[], 128).unwrap();
        let a: f64 = planar_quadrature(&r).weights.iter().sum();
        let b: f64 = crossing_quadrature(&r).weights.iter().sum();
        assert!((a - b).abs() / a < 0.01, "{a} {b}");
    }
}
