//! Regular directions: sampling the smooth boundary stratum and measuring
//! how far a direction stays from every tangent hyperplane.
//!
//! For a hypersurface point with unit normal `ν`, the distance from a unit
//! vector `λ` to the tangent space is `|λ·ν|`; the margin of `λ` is the
//! infimum of that quantity over the stratum.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dsl::{DomainSpec, DslError, Fiber};

/// Crossing refinement tolerance along a sampling line.
const CROSSING_TOL: f64 = 1e-10;
/// A second atom closer than this (in estimated distance) makes a point singular.
const ACTIVE_TOL: f64 = 1e-7;
const MIN_GRADIENT: f64 = 1e-8;
/// Margins below this count as zero.
const REGULAR_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TangentError {
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error("no boundary samples")]
    EmptySamples,
    #[error("direction must be a unit vector of dimension {dim}")]
    Direction { dim: usize },
    #[error("sample count must be at least 1")]
    Count,
    #[error("at least 16 candidate directions are required, got {0}")]
    TooFewDirections(usize),
}

pub type Result<T> = std::result::Result<T, TangentError>;

/// A point on the smooth part of `∂Ω_t` with its unit normal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundarySample {
    pub point: Vec<f64>,
    pub normal: Vec<f64>,
    pub atom: usize,
}

/// Output of [`sample_boundary`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundarySamples {
    pub t: Vec<f64>,
    pub requested: usize,
    pub samples: Vec<BoundarySample>,
    /// Fewer than a tenth of the requested samples were found.
    pub stratum_too_thin: bool,
}

fn member(fiber: &Fiber<'_>, x: &[f64]) -> bool {
    fiber.is_inside_box(x) && fiber.contains(x)
}

/// Whether `x`, lying on the zero set of `atom`, is a smooth boundary point:
/// no other atom is active, the gradient is nonzero and the domain lies on
/// exactly one side (or on both sides of a slit).
fn classify(fiber: &Fiber<'_>, atom: usize, x: &[f64], scale: f64) -> Option<Vec<f64>> {
    let slack = 1e-9 * scale;
    if fiber.spec().bounding_box.iter().zip(x).any(|(iv, &v)| v < iv.lo - slack || v > iv.hi + slack) {
        return None;
    }
    let g = fiber.boundary_gradient(atom, x);
    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if gn < MIN_GRADIENT {
        return None;
    }
    let spec = fiber.spec();
    for other in 0..spec.atoms.len() {
        if other == atom || spec.atoms[other].boundary_poly() == spec.atoms[atom].boundary_poly() {
            continue;
        }
        let go = fiber.boundary_gradient(other, x);
        let gon = go.iter().map(|v| v * v).sum::<f64>().sqrt();
        let v = fiber.boundary_value(other, x).abs();
        if v <= ACTIVE_TOL * gon.max(MIN_GRADIENT) {
            return None;
        }
    }
    let normal: Vec<f64> = g.iter().map(|v| v / gn).collect();
    let delta = 1e-7 * scale;
    let plus: Vec<f64> = x.iter().zip(&normal).map(|(a, b)| a + delta * b).collect();
    let minus: Vec<f64> = x.iter().zip(&normal).map(|(a, b)| a - delta * b).collect();
    let (mp, mm) = (member(fiber, &plus), member(fiber, &minus));
    let slit = spec.atoms[atom].square_of.is_some() && mp && mm && fiber.slit_crossing(&minus, &plus).is_some();
    if mp != mm || slit {
        Some(normal)
    } else {
        None
    }
}

fn box_scale(spec: &DomainSpec) -> f64 {
    spec.bounding_box.iter().map(|iv| iv.width()).fold(0.0, f64::max)
}

/// Samples the smooth boundary stratum of `Ω_t` by locating sign changes of
/// each atom's boundary polynomial along jittered axis-parallel lines.
pub fn sample_boundary(spec: &DomainSpec, t: &[f64], count: usize, seed: u64) -> Result<BoundarySamples> {
    if count == 0 {
        return Err(TangentError::Count);
    }
    let fiber = spec.fiber(t)?;
    let n = spec.ambient_dim;
    let scale = box_scale(spec);
    let bx = &spec.bounding_box;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Lines per axis, spread over an (n−1)-dimensional grid of offsets.
    let per_axis = count.div_ceil(2 * n).max(1);
    let side = (per_axis as f64).powf(1.0 / (n.max(2) - 1) as f64).ceil() as usize;
    let steps = 512usize.max(side);
    let mut lines: Vec<(usize, Vec<f64>)> = Vec::new();
    for axis in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != axis).collect();
        let total = if n == 1 { 1 } else { side.pow(others.len() as u32) };
        for k in 0..total {
            let mut base = vec![0.0; n];
            let mut rem = k;
            for &j in &others {
                let i = rem % side;
                rem /= side;
                let jitter: f64 = rng.gen_range(0.1..0.9);
                base[j] = bx[j].lo + (i as f64 + jitter) * bx[j].width() / side as f64;
            }
            lines.push((axis, base));
        }
    }
    let atoms = spec.atoms.len();
    let found: Vec<Vec<BoundarySample>> = lines
        .par_iter()
        .map(|(axis, base)| {
            let mut out = Vec::new();
            // Lines overhang the box slightly so that boundary pieces lying
            // on the box faces are crossed too.
            let iv = bx[*axis];
            let (start, width) = (iv.lo - 0.01 * iv.width(), 1.02 * iv.width());
            let at = |s: f64| {
                let mut x = base.clone();
                x[*axis] = start + s * width;
                x
            };
            for atom in 0..atoms {
                let mut prev = fiber.boundary_value(atom, &at(0.0));
                for k in 1..=steps {
                    let s1 = k as f64 / steps as f64;
                    let v = fiber.boundary_value(atom, &at(s1));
                    if prev != 0.0 && v != 0.0 && (prev > 0.0) != (v > 0.0) {
                        let (mut lo, mut hi) = ((k - 1) as f64 / steps as f64, s1);
                        let neg_lo = prev < 0.0;
                        while (hi - lo) * width > CROSSING_TOL {
                            let mid = 0.5 * (lo + hi);
                            if (fiber.boundary_value(atom, &at(mid)) < 0.0) == neg_lo {
                                lo = mid;
                            } else {
                                hi = mid;
                            }
                        }
                        let x = at(0.5 * (lo + hi));
                        if let Some(normal) = classify(&fiber, atom, &x, scale) {
                            out.push(BoundarySample { point: x, normal, atom });
                        }
                    }
                    prev = v;
                }
            }
            out
        })
        .collect();
    let samples: Vec<BoundarySample> = found.into_iter().flatten().collect();
    let stratum_too_thin = samples.len() * 10 < count;
    Ok(BoundarySamples { t: t.to_vec(), requested: count, samples, stratum_too_thin })
}

fn check_unit(lambda: &[f64], dim: usize) -> Result<()> {
    let norm = lambda.iter().map(|v| v * v).sum::<f64>().sqrt();
    if lambda.len() != dim || (norm - 1.0).abs() > 1e-9 {
        return Err(TangentError::Direction { dim });
    }
    Ok(())
}

/// `min |λ·ν|` over the samples.
pub fn margin(samples: &[BoundarySample], lambda: &[f64]) -> Result<f64> {
    let first = samples.first().ok_or(TangentError::EmptySamples)?;
    check_unit(lambda, first.normal.len())?;
    Ok(samples
        .iter()
        .map(|s| s.normal.iter().zip(lambda).map(|(a, b)| a * b).sum::<f64>().abs())
        .fold(f64::INFINITY, f64::min))
}

/// Deterministic candidate directions on the closed upper half-sphere: equal
/// angles in the plane, a Fibonacci lattice plus the coordinate axes in space.
pub fn candidate_directions(dim: usize, count: usize) -> Vec<Vec<f64>> {
    match dim {
        1 => vec![vec![1.0]],
        2 => (0..count)
            .map(|k| {
                let a = PI * k as f64 / count as f64;
                canonical(vec![a.cos(), a.sin()])
            })
            .collect(),
        _ => {
            let golden = PI * (3.0 - 5f64.sqrt());
            let mut out: Vec<Vec<f64>> = (0..count)
                .map(|k| {
                    let z = 1.0 - (k as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let a = golden * k as f64;
                    let mut v = vec![0.0; dim];
                    v[0] = r * a.cos();
                    v[1] = r * a.sin();
                    v[2] = z;
                    canonical(v)
                })
                .collect();
            for j in 0..dim {
                let mut e = vec![0.0; dim];
                e[j] = 1.0;
                out.push(e);
            }
            out
        }
    }
}

/// Representative of `±λ` whose last nonzero coordinate is positive, with
/// round-off snapped to exact zeros.
fn canonical(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        if x.abs() < 1e-15 {
            *x = 0.0;
        }
    }
    if let Some(last) = v.iter().rev().find(|x| **x != 0.0) {
        if *last < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v
}

/// Local minimization of `(λ·ν)²` along the boundary stratum of one atom,
/// starting from a sample; the walk stops when it would leave the stratum.
/// Returns the smallest `|λ·ν|` seen at a valid stratum point.
pub fn refine_margin(fiber: &Fiber<'_>, start: &BoundarySample, lambda: &[f64]) -> f64 {
    let n = lambda.len();
    let scale = box_scale(fiber.spec());
    let atom = start.atom;
    let value_at = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        let normal = classify(fiber, atom, x, scale)?;
        let d = normal.iter().zip(lambda).map(|(a, b)| a * b).sum::<f64>();
        Some((d * d, normal))
    };
    let retract = |x: &[f64]| -> Vec<f64> {
        let mut y = x.to_vec();
        for _ in 0..8 {
            let v = fiber.boundary_value(atom, &y);
            let g = fiber.boundary_gradient(atom, &y);
            let g2: f64 = g.iter().map(|a| a * a).sum();
            if g2 == 0.0 {
                break;
            }
            for j in 0..n {
                y[j] -= v * g[j] / g2;
            }
            if v.abs() < 1e-15 * scale {
                break;
            }
        }
        y
    };
    let Some((mut f, mut normal)) = value_at(&start.point) else {
        return start.normal.iter().zip(lambda).map(|(a, b)| a * b).sum::<f64>().abs();
    };
    let mut x = start.point.clone();
    let mut best = f;
    let mut step = 1e-3 * scale;
    let fd = 1e-7 * scale;
    for _ in 0..200 {
        let basis = tangent_basis(&normal);
        let mut grad_t = vec![0.0; basis.len()];
        let mut ok = true;
        for (i, b) in basis.iter().enumerate() {
            let xp: Vec<f64> = x.iter().zip(b).map(|(a, c)| a + fd * c).collect();
            let xm: Vec<f64> = x.iter().zip(b).map(|(a, c)| a - fd * c).collect();
            match (value_at(&retract(&xp)), value_at(&retract(&xm))) {
                (Some((fp, _)), Some((fm, _))) => grad_t[i] = (fp - fm) / (2.0 * fd),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            break;
        }
        let gnorm = grad_t.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-14 {
            break;
        }
        let mut moved = false;
        while step > 1e-12 * scale {
            let mut y = x.clone();
            for (b, gi) in basis.iter().zip(&grad_t) {
                for j in 0..n {
                    y[j] -= step * gi / gnorm * b[j];
                }
            }
            let y = retract(&y);
            if let Some((fy, ny)) = value_at(&y) {
                if fy < f {
                    x = y;
                    f = fy;
                    normal = ny;
                    moved = true;
                    step *= 2.0;
                    break;
                }
            }
            step *= 0.5;
        }
        best = best.min(f);
        if !moved || f < 1e-24 {
            break;
        }
    }
    best.sqrt()
}

/// Orthonormal basis of `ν^⊥`.
fn tangent_basis(normal: &[f64]) -> Vec<Vec<f64>> {
    let n = normal.len();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for j in 0..n {
        let mut v = vec![0.0; n];
        v[j] = 1.0;
        for b in std::iter::once(normal).chain(basis.iter().map(|b| b.as_slice())) {
            let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= d * c);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
        if basis.len() == n - 1 {
            break;
        }
    }
    basis
}

/// Margin of the chosen direction on one fiber.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiberMargin {
    pub t: Vec<f64>,
    pub samples: usize,
    pub sampled_margin: f64,
    pub refined_margin: f64,
    pub stratum_too_thin: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginReport {
    pub direction: Vec<f64>,
    /// Family infimum of the sampled margins.
    pub alpha: f64,
    /// Family infimum after local minimization along the strata.
    pub refined_alpha: f64,
    pub fibers: Vec<FiberMargin>,
    pub sample_count: usize,
    pub directions_evaluated: usize,
    /// No candidate keeps a refined margin of at least `1e-6`.
    pub no_regular_direction: bool,
}

/// Searches the candidate directions for the largest pooled margin over the
/// given fibers. The best few candidates are re-ranked by refined margins.
pub fn find_regular_direction(
    spec: &DomainSpec,
    t_samples: &[Vec<f64>],
    directions: usize,
    samples_per_fiber: usize,
    seed: u64,
) -> Result<MarginReport> {
    let n = spec.ambient_dim;
    if n > 1 && directions < 16 {
        return Err(TangentError::TooFewDirections(directions));
    }
    let sets: Vec<BoundarySamples> = t_samples
        .iter()
        .map(|t| sample_boundary(spec, t, samples_per_fiber, seed))
        .collect::<Result<_>>()?;
    let pooled: Vec<BoundarySample> = sets.iter().flat_map(|s| s.samples.iter().cloned()).collect();
    if pooled.is_empty() {
        return Err(TangentError::EmptySamples);
    }
    let candidates = candidate_directions(n, directions);
    let margins: Vec<f64> = candidates.par_iter().map(|l| margin(&pooled, l).unwrap()).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| margins[b].total_cmp(&margins[a]).then_with(|| lex(&candidates[a], &candidates[b])));
    let shortlist: Vec<usize> = order.iter().take(8).copied().collect();

    let refine_family = |lambda: &[f64]| -> Vec<FiberMargin> {
        sets.iter()
            .map(|set| {
                let fiber = spec.fiber(&set.t).expect("validated above");
                let sampled = margin(&set.samples, lambda).unwrap_or(f64::INFINITY);
                let refined = refined_fiber_margin(&fiber, &set.samples, lambda);
                FiberMargin {
                    t: set.t.clone(),
                    samples: set.samples.len(),
                    sampled_margin: sampled,
                    refined_margin: refined,
                    stratum_too_thin: set.stratum_too_thin,
                }
            })
            .collect()
    };
    let ranked: Vec<(usize, Vec<FiberMargin>, f64)> = shortlist
        .par_iter()
        .map(|&i| {
            let fibers = refine_family(&candidates[i]);
            let refined = fibers.iter().map(|f| f.refined_margin).fold(f64::INFINITY, f64::min);
            (i, fibers, refined)
        })
        .collect();
    let mut best = 0;
    for k in 1..ranked.len() {
        let (a, b) = (&ranked[k], &ranked[best]);
        let better = a.2 > b.2 || (a.2 == b.2 && lex(&candidates[a.0], &candidates[b.0]).is_lt());
        if better {
            best = k;
        }
    }
    let (idx, fibers, refined_alpha) = ranked.into_iter().nth(best).unwrap();
    Ok(MarginReport {
        direction: candidates[idx].clone(),
        alpha: margins[idx],
        refined_alpha,
        fibers,
        sample_count: pooled.len(),
        directions_evaluated: candidates.len(),
        no_regular_direction: refined_alpha < REGULAR_TOL,
    })
}

/// Refined margin of `λ` on one fiber, started from the samples with the
/// smallest `|λ·ν|` on each atom.
pub fn refined_fiber_margin(fiber: &Fiber<'_>, samples: &[BoundarySample], lambda: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::INFINITY;
    }
    let dot = |s: &BoundarySample| s.normal.iter().zip(lambda).map(|(a, b)| a * b).sum::<f64>().abs();
    let mut starts: Vec<&BoundarySample> = Vec::new();
    let atoms = samples.iter().map(|s| s.atom).max().unwrap() + 1;
    for atom in 0..atoms {
        let mut of_atom: Vec<&BoundarySample> = samples.iter().filter(|s| s.atom == atom).collect();
        of_atom.sort_by(|a, b| dot(a).total_cmp(&dot(b)));
        starts.extend(of_atom.into_iter().take(3));
    }
    starts.iter().map(|s| refine_margin(fiber, s, lambda).min(dot(s))).fold(f64::INFINITY, f64::min)
}

fn lex(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_domain;

    #[test]
    fn disk_normals_are_radial() {
        let s = parse_domain("dim 2\nbox [-1.5,1.5]x[-1.5,1.5]\nset: x^2+y^2<1").unwrap();
        let b = sample_boundary(&s, &[], 512, 0).unwrap();
        assert!(b.samples.len() > 200);
        for smp in &b.samples {
            let r = smp.point.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - 1.0).abs() < 1e-8);
            for j in 0..2 {
                assert!((smp.normal[j] - smp.point[j] / r).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn square_corners_are_excluded() {
        let s = parse_domain("dim 2\nbox [0,1]x[0,1]\nset: x>0 and x<1 and y>0 and y<1").unwrap();
        let b = sample_boundary(&s, &[], 256, 3).unwrap();
        assert!(!b.samples.is_empty());
        for smp in &b.samples {
            let on_edge = smp.point.iter().filter(|v| v.abs() < 1e-9 || (*v - 1.0).abs() < 1e-9).count();
            assert_eq!(on_edge, 1);
        }
    }

    #[test]
    fn candidates_cover_axes_in_the_plane() {
        let c = candidate_directions(2, 512);
        assert_eq!(c[0], vec![1.0, 0.0]);
        assert!(c.iter().any(|v| v[0] == 0.0 && v[1] == 1.0));
    }

    #[test]
    fn circle_has_no_regular_direction() {
        let s = parse_domain("dim 2\nbox [-1.5,1.5]x[-1.5,1.5]\nset: x^2+y^2<1").unwrap();
        let r = find_regular_direction(&s, &[vec![]], 64, 1024, 0).unwrap();
        assert!(r.no_regular_direction, "{r:?}");
    }

    #[test]
    fn strips_are_regular_along_e2() {
        let s = parse_domain("dim 2\nparams t in [0.2,1]\nbox [0,1]x[-2,2]\nset: y>0 and y<t").unwrap();
        let r = find_regular_direction(&s, &[vec![0.2], vec![1.0]], 64, 512, 0).unwrap();
        assert_eq!(r.direction, vec![0.0, 1.0]);
        assert!((r.alpha - 1.0).abs() < 1e-12);
    }
}
