//! Parameter sweeps over a family `{Ω_t}` and the family-level checks: the
//! thickness-volume bound `|Ω_t|_λ ≤ K·|Ω_t|^{1/n}` and the refinement trend
//! of the uniform constant `sup_t C_p/|Ω_t|^{1/n}`.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dsl::{DomainSpec, DslError};
use crate::raster::rasterize;
use crate::sobolev::{verify_theorem_p1, PoincareEstimate, SobolevError, SolverConfig};
use crate::tangent::{find_regular_direction, margin, sample_boundary, MarginReport, TangentError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error(transparent)]
    Tangent(#[from] TangentError),
    #[error("parameter grid needs one count per parameter ({expected}), got {got}")]
    Grid { expected: usize, got: usize },
    #[error("parameter grid must not be empty")]
    EmptyGrid,
    #[error("direction must be a unit vector of dimension {0}")]
    Direction(usize),
    #[error("no regular direction recorded for this sweep (α = {alpha})")]
    NotApplicable { alpha: f64 },
    #[error("at least two resolutions are required")]
    TooFewResolutions,
    #[error("reports disagree on {0}")]
    Incompatible(&'static str),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Direction along which thickness is measured.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionChoice {
    Fixed(Vec<f64>),
    /// Chosen once per family by [`find_regular_direction`] on a coarse
    /// sub-grid of the parameters.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub p: f64,
    pub resolution: usize,
    pub direction: DirectionChoice,
    pub solver: SolverConfig,
    /// Candidate directions for [`DirectionChoice::Auto`].
    pub directions: usize,
    /// Boundary samples per fiber for the margin measurement.
    pub samples: usize,
    /// Points per parameter axis of the coarse sub-grid.
    pub coarse: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            p: 2.0,
            resolution: 256,
            direction: DirectionChoice::Auto,
            solver: SolverConfig::default(),
            directions: 512,
            samples: 4096,
            coarse: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiberRecord {
    pub t: Vec<f64>,
    pub empty: bool,
    pub h: f64,
    pub volume: Option<f64>,
    pub thickness: Option<f64>,
    pub constant: Option<f64>,
    /// `2^{1/p}·|Ω_t|_λ`.
    pub bound: Option<f64>,
    /// `ηh = 10h/|Ω_t|_λ`.
    pub slack: Option<f64>,
    pub pass: Option<bool>,
    pub error: Option<String>,
    /// Whether the failure was a solver breakdown.
    pub solver_error: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<PoincareEstimate>,
}

impl FiberRecord {
    pub fn recomputed_pass(&self) -> Option<bool> {
        match (self.constant, self.bound, self.slack) {
            (Some(c), Some(b), Some(s)) => Some(c <= b * (1.0 + s)),
            _ => None,
        }
    }

    /// `C_p / |Ω_t|^{1/n}`.
    pub fn constant_ratio(&self, n: usize) -> Option<f64> {
        Some(self.constant? / self.volume?.powf(1.0 / n as f64))
    }

    /// `|Ω_t|_λ / |Ω_t|^{1/n}`.
    pub fn thickness_ratio(&self, n: usize) -> Option<f64> {
        Some(self.thickness? / self.volume?.powf(1.0 / n as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub spec: String,
    pub dim: usize,
    pub p: f64,
    pub resolution: usize,
    pub direction: Vec<f64>,
    /// Family infimum of the sampled margins of `direction`.
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search: Option<MarginReport>,
    pub records: Vec<FiberRecord>,
    /// `sup_t C_p/|Ω_t|^{1/n}` over non-empty fibers.
    pub sup_constant_ratio: Option<f64>,
    pub sup_constant_at: Option<Vec<f64>>,
    /// `sup_t |Ω_t|_λ/|Ω_t|^{1/n}` over non-empty fibers.
    pub sup_thickness_ratio: Option<f64>,
    pub sup_thickness_at: Option<Vec<f64>>,
    pub all_pass: bool,
}

impl SweepReport {
    /// Recomputes the aggregates from the records.
    pub fn consistent(&self) -> bool {
        let (c, ct) = sup_of(&self.records, |r| r.constant_ratio(self.dim));
        let (k, kt) = sup_of(&self.records, |r| r.thickness_ratio(self.dim));
        let passes = self.records.iter().all(|r| r.pass == r.recomputed_pass());
        passes
            && c == self.sup_constant_ratio
            && ct == self.sup_constant_at
            && k == self.sup_thickness_ratio
            && kt == self.sup_thickness_at
    }

    pub fn solver_failed(&self) -> bool {
        self.records.iter().any(|r| r.solver_error)
    }
}

fn sup_of(records: &[FiberRecord], f: impl Fn(&FiberRecord) -> Option<f64>) -> (Option<f64>, Option<Vec<f64>>) {
    let mut best: Option<(f64, &FiberRecord)> = None;
    for r in records.iter().filter(|r| !r.empty) {
        if let Some(v) = f(r) {
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, r));
            }
        }
    }
    (best.map(|b| b.0), best.map(|b| b.1.t.clone()))
}

fn axis_values(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}

/// Uniform tensor grid over the parameter box in lexicographic order. A
/// count of 1 picks the midpoint of that axis.
pub fn param_grid(spec: &DomainSpec, counts: &[usize]) -> Result<Vec<Vec<f64>>> {
    if counts.len() != spec.num_params() {
        return Err(HarnessError::Grid { expected: spec.num_params(), got: counts.len() });
    }
    let mut grid: Vec<Vec<f64>> = vec![Vec::new()];
    for (iv, &c) in spec.param_box.iter().zip(counts) {
        let vals = axis_values(iv.lo, iv.hi, c);
        grid = grid.iter().flat_map(|g| vals.iter().map(move |&v| [g.as_slice(), &[v]].concat())).collect();
    }
    if grid.is_empty() {
        return Err(HarnessError::EmptyGrid);
    }
    Ok(grid)
}

/// Coarse sub-grid used for the family direction.
fn coarse_grid(points: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    if points.len() <= k.max(1) {
        return points.to_vec();
    }
    let k = k.max(2);
    (0..k).map(|i| points[i * (points.len() - 1) / (k - 1)].clone()).collect()
}

fn evaluate(spec: &Arc<DomainSpec>, t: &[f64], lambda: &[f64], cfg: &SweepConfig) -> FiberRecord {
    let mut rec = FiberRecord {
        t: t.to_vec(),
        empty: false,
        h: 0.0,
        volume: None,
        thickness: None,
        constant: None,
        bound: None,
        slack: None,
        pass: None,
        error: None,
        solver_error: false,
        estimate: None,
    };
    let raster = match rasterize(spec, t, cfg.resolution) {
        Ok(r) => r,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    rec.h = raster.spacing();
    if raster.is_empty() {
        rec.empty = true;
        return rec;
    }
    rec.volume = raster.volume().ok();
    match verify_theorem_p1(&raster, cfg.p, lambda, &cfg.solver) {
        Ok(c) => {
            rec.thickness = Some(c.thickness);
            rec.constant = Some(c.value);
            rec.bound = Some(c.bound);
            rec.slack = Some(c.slack);
            rec.pass = Some(c.pass);
            rec.estimate = c.estimate;
        }
        Err(e) => {
            rec.solver_error = matches!(e, SobolevError::SolverDiverged { .. });
            if let SobolevError::Unbounded { .. } = e {
                rec.thickness = Some(f64::INFINITY);
            }
            rec.error = Some(e.to_string());
        }
    }
    rec
}

/// Runs [`verify_theorem_p1`] on every grid point with one family-wide
/// direction. Per-fiber failures are recorded, never propagated.
pub fn sweep(spec: &Arc<DomainSpec>, grid: &[Vec<f64>], cfg: &SweepConfig) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(HarnessError::EmptyGrid);
    }
    for t in grid {
        spec.check_params(t)?;
    }
    let n = spec.ambient_dim;
    let mut points = grid.to_vec();
    points.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    let coarse = coarse_grid(&points, cfg.coarse);
    let seed = cfg.solver.seed;
    let (direction, alpha, search) = match &cfg.direction {
        DirectionChoice::Auto => {
            let rep = find_regular_direction(spec, &coarse, cfg.directions, cfg.samples, seed)?;
            (rep.direction.clone(), rep.alpha, Some(rep))
        }
        DirectionChoice::Fixed(l) => {
            let norm = l.iter().map(|v| v * v).sum::<f64>().sqrt();
            if l.len() != n || (norm - 1.0).abs() > 1e-9 {
                return Err(HarnessError::Direction(n));
            }
            let mut alpha = f64::INFINITY;
            for t in &coarse {
                let s = sample_boundary(spec, t, cfg.samples, seed)?;
                if !s.samples.is_empty() {
                    alpha = alpha.min(margin(&s.samples, l)?);
                }
            }
            (l.clone(), if alpha.is_finite() { alpha } else { 0.0 }, None)
        }
    };
    let records: Vec<FiberRecord> = points.par_iter().map(|t| evaluate(spec, t, &direction, cfg)).collect();
    let (sup_c, sup_c_at) = sup_of(&records, |r| r.constant_ratio(n));
    let (sup_k, sup_k_at) = sup_of(&records, |r| r.thickness_ratio(n));
    let all_pass = records.iter().all(|r| r.empty || r.pass == Some(true));
    Ok(SweepReport {
        spec: crate::dsl::print(spec),
        dim: n,
        p: cfg.p,
        resolution: cfg.resolution,
        direction,
        alpha,
        search,
        records,
        sup_constant_ratio: sup_c,
        sup_constant_at: sup_c_at,
        sup_thickness_ratio: sup_k,
        sup_thickness_at: sup_k_at,
        all_pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaOutcome {
    pub k: f64,
    /// Empirical `K* = sup_t |Ω_t|_λ/|Ω_t|^{1/n}`.
    pub k_star: f64,
    pub worst_t: Vec<f64>,
    pub alpha: f64,
    /// `L = √(1−α²)/α`.
    pub lipschitz: f64,
    /// `4L^{1−1/n}·(1 + 10⁻⁶)`.
    pub k_lemma: f64,
    pub pass: bool,
    pub within_k_lemma: bool,
}

/// `4L^{1−1/n}·(1 + 10⁻⁶)` for margin `α`.
pub fn lemma_constant(alpha: f64, n: usize) -> f64 {
    let l = (1.0 - alpha * alpha).max(0.0).sqrt() / alpha;
    4.0 * l.powf(1.0 - 1.0 / n as f64) * (1.0 + 1e-6)
}

/// Checks `sup_t |Ω_t|_λ/|Ω_t|^{1/n} ≤ K` and compares with the value
/// derived from the margin of the report's direction.
pub fn verify_lemma_bound(report: &SweepReport, k: f64) -> Result<LemmaOutcome> {
    let alpha = report.alpha;
    if !(alpha > 0.0) {
        return Err(HarnessError::NotApplicable { alpha });
    }
    let k_star = report.sup_thickness_ratio.unwrap_or(0.0);
    let k_lemma = lemma_constant(alpha, report.dim);
    Ok(LemmaOutcome {
        k,
        k_star,
        worst_t: report.sup_thickness_at.clone().unwrap_or_default(),
        alpha,
        lipschitz: (1.0 - alpha * alpha).max(0.0).sqrt() / alpha,
        k_lemma,
        pass: k_star <= k,
        within_k_lemma: k_star <= k_lemma,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformTrend {
    pub resolutions: Vec<usize>,
    /// `sup_t C_p/|Ω_t|^{1/n}` per resolution.
    pub constants: Vec<f64>,
    pub sup_at: Vec<Vec<f64>>,
    /// `(C_fine − C_coarse)/C_coarse` at the finest pair.
    pub relative_change: f64,
    /// Richardson extrapolation assuming first-order convergence in `h`.
    pub asymptote: f64,
    pub bounded: bool,
    /// The increase at the finest pair exceeds 10%.
    pub inconclusive: bool,
    pub pass: bool,
}

/// Refinement trend of the empirical uniform constant.
pub fn verify_main_uniform(reports: &[SweepReport]) -> Result<UniformTrend> {
    if reports.len() < 2 {
        return Err(HarnessError::TooFewResolutions);
    }
    let first = &reports[0];
    for r in reports {
        if r.dim != first.dim || r.p != first.p {
            return Err(HarnessError::Incompatible("dimension or exponent"));
        }
    }
    let mut sorted: Vec<&SweepReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.resolution);
    let constants: Vec<f64> = sorted.iter().map(|r| r.sup_constant_ratio.unwrap_or(f64::NAN)).collect();
    let sup_at: Vec<Vec<f64>> = sorted.iter().map(|r| r.sup_constant_at.clone().unwrap_or_default()).collect();
    let m = constants.len();
    let (cc, cf) = (constants[m - 2], constants[m - 1]);
    let relative_change = (cf - cc) / cc;
    let ratio = sorted[m - 1].resolution as f64 / sorted[m - 2].resolution as f64;
    let asymptote = (ratio * cf - cc) / (ratio - 1.0);
    let bounded = constants.iter().all(|c| c.is_finite());
    let inconclusive = !(relative_change <= 0.10);
    Ok(UniformTrend {
        resolutions: sorted.iter().map(|r| r.resolution).collect(),
        constants,
        sup_at,
        relative_change,
        asymptote,
        bounded,
        inconclusive,
        pass: bounded && !inconclusive,
    })
}

/// Two-column text files `(name, contents)`: `t` against `C_p` and against
/// `C_p/|Ω_t|^{1/n}`. Multi-parameter families use the first parameter.
pub fn plot_data(report: &SweepReport) -> Vec<(String, String)> {
    let mut constant = String::from("# t C_p\n");
    let mut ratio = String::from("# t C_p/vol^(1/n)\n");
    for r in report.records.iter().filter(|r| !r.empty) {
        let t = r.t.first().copied().unwrap_or(0.0);
        if let Some(c) = r.constant {
            let _ = writeln!(constant, "{t:.12e} {c:.12e}");
        }
        if let Some(q) = r.constant_ratio(report.dim) {
            let _ = writeln!(ratio, "{t:.12e} {q:.12e}");
        }
    }
    vec![("plot_constant.dat".into(), constant), ("plot_ratio.dat".into(), ratio)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_domain;

    fn spec(text: &str) -> Arc<DomainSpec> {
        Arc::new(parse_domain(text).unwrap())
    }

    #[test]
    fn grid_is_lexicographic() {
        let s = spec("dim 2\nparams a in [0,1], b in [2,3]\nbox [-1,1]x[-1,1]\nset: x^2+y^2<a+b");
        let g = param_grid(&s, &[2, 3]).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], vec![0.0, 2.0]);
        assert_eq!(g[1], vec![0.0, 2.5]);
        assert_eq!(g[5], vec![1.0, 3.0]);
        assert!(matches!(param_grid(&s, &[2]), Err(HarnessError::Grid { .. })));
    }

    #[test]
    fn lemma_constant_at_known_margins() {
        assert!((lemma_constant(1.0 / 2f64.sqrt(), 2) - 4.0 * (1.0 + 1e-6)).abs() < 1e-12);
        assert!(lemma_constant(1.0, 2) == 0.0);
        assert!(lemma_constant(0.1, 1) == 4.0 * (1.0 + 1e-6));
    }

    #[test]
    fn empty_fiber_is_flagged_and_ignored() {
        let s = spec("dim 2\nparams t in [-1,1]\nbox [-2,2]x[-2,2]\nset: x^2+y^2<t");
        let cfg = SweepConfig {
            resolution: 32,
            direction: DirectionChoice::Fixed(vec![1.0, 0.0]),
            samples: 256,
            ..SweepConfig::default()
        };
        let r = sweep(&s, &[vec![-0.5], vec![1.0]], &cfg).unwrap();
        assert!(r.records[0].empty);
        assert!(!r.records[1].empty);
        assert_eq!(r.sup_constant_at, Some(vec![1.0]));
        assert!(r.consistent());
        assert!(r.all_pass);
    }

    #[test]
    fn singleton_square_lemma() {
        let s = spec("dim 2\nbox [-0.1,1.1]x[-0.1,1.1]\nset: x>0 and x<1 and y>0 and y<1");
        let cfg = SweepConfig {
            resolution: 60,
            direction: DirectionChoice::Fixed(vec![0.0, 1.0]),
            samples: 256,
            ..SweepConfig::default()
        };
        let r = sweep(&s, &[vec![]], &cfg).unwrap();
        let q = r.sup_thickness_ratio.unwrap();
        assert!((q - 1.0).abs() < 0.05, "{q}");
        // Vertical edges are tangent to e₂.
        assert!(matches!(verify_lemma_bound(&r, 1.1), Err(HarnessError::NotApplicable { .. })));
        let mut r2 = r.clone();
        r2.alpha = 0.5;
        assert!(verify_lemma_bound(&r2, 1.1).unwrap().pass);
        assert!(!verify_lemma_bound(&r2, 0.9).unwrap().pass);
    }

    #[test]
    fn single_fiber_uniform_trend() {
        let s = spec("dim 1\nbox [-0.5,1.5]\nset: x>0 and x<1");
        let mk = |res| {
            let cfg = SweepConfig {
                resolution: res,
                direction: DirectionChoice::Fixed(vec![1.0]),
                samples: 64,
                ..SweepConfig::default()
            };
            sweep(&s, &[vec![]], &cfg).unwrap()
        };
        let reports = vec![mk(256), mk(512)];
        let trend = verify_main_uniform(&reports).unwrap();
        assert_eq!(trend.constants[1], reports[1].records[0].constant.unwrap());
        assert!(trend.pass);
        assert!((trend.asymptote - 1.0 / std::f64::consts::PI).abs() < 2e-3, "{}", trend.asymptote);
        assert!(matches!(verify_main_uniform(&reports[..1]), Err(HarnessError::TooFewResolutions)));
    }
}
