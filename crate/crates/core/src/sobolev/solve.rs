use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{DiscreteField, GradientOperator, Result, SobolevError};
use crate::linalg;
use crate::raster::{RasterDomain, RasterError};

/// How a constant was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Eigensolve,
    RayleighDescent,
}

/// A computed discrete Poincaré constant `C_p`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoincareEstimate {
    pub p: f64,
    pub constant: f64,
    pub method: Method,
    pub h: f64,
    /// Eigensolve: relative eigenvalue change at the last step. Descent:
    /// relative change of the Rayleigh quotient over the last ten iterations.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Per-start constants for the descent solver (eigenvector start first).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub restarts: Vec<f64>,
    /// Set when the restarts disagree by more than 5%.
    pub stagnation_warning: bool,
}

/// Solver knobs; defaults match the command-line configuration block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverConfig {
    /// Relative eigenvalue tolerance.
    pub tol: f64,
    /// Outer inverse-iteration cap.
    pub max_outer: usize,
    /// Conjugate-gradient cap per solve.
    pub max_cg: usize,
    /// Relative Rayleigh-quotient change (over ten iterations) ending a descent.
    pub descent_tol: f64,
    /// Iteration cap per descent stage.
    pub descent_iters: usize,
    /// Number of random starts besides the eigenvector.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-8,
            max_outer: 100,
            max_cg: 20_000,
            descent_tol: 1e-6,
            descent_iters: 400,
            restarts: 8,
            seed: 0,
        }
    }
}

/// Smallest eigenpair of the discrete Dirichlet Laplacian `GᵀG`.
#[derive(Debug, Clone)]
pub struct GroundState {
    pub eigenvalue: f64,
    /// Unit-norm (unweighted) eigenvector.
    pub vector: DiscreteField,
    pub estimate: PoincareEstimate,
}

/// Inverse iteration with a conjugate-gradient inner solve, started from the
/// normalized all-ones vector.
pub fn dirichlet_ground_state(raster: &RasterDomain, cfg: &SolverConfig) -> Result<GroundState> {
    if raster.is_empty() {
        return Err(RasterError::EmptyFiber.into());
    }
    let op = GradientOperator::new(raster);
    ground_state_with(&op, raster, cfg)
}

pub(crate) fn ground_state_with(op: &GradientOperator, raster: &RasterDomain, cfg: &SolverConfig) -> Result<GroundState> {
    let n = op.num_dofs();
    let mut scratch = vec![0.0; op.slots()];
    let mut ax = vec![0.0; n];
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    op.laplacian_raw(&x, &mut scratch, &mut ax);
    let mut theta = linalg::dot(&x, &ax);
    let mut y: Vec<f64> = x.iter().map(|v| v / theta).collect();
    let inner_tol = (cfg.tol.sqrt() * 1e-2).max(1e-14);
    let apply = |v: &[f64], out: &mut [f64]| {
        let mut s = vec![0.0; op.slots()];
        op.laplacian_raw(v, &mut s, out);
    };
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=cfg.max_outer {
        iterations = it;
        linalg::conjugate_gradient(apply, &x, &mut y, inner_tol, cfg.max_cg);
        let ny = linalg::norm(&y);
        if !ny.is_finite() || ny == 0.0 {
            break;
        }
        x.iter_mut().zip(&y).for_each(|(xi, yi)| *xi = yi / ny);
        op.laplacian_raw(&x, &mut scratch, &mut ax);
        let theta_new = linalg::dot(&x, &ax);
        residual = ((theta_new - theta) / theta_new).abs();
        theta = theta_new;
        y.iter_mut().zip(&x).for_each(|(yi, xi)| *yi = xi / theta);
        if residual < cfg.tol {
            converged = true;
            break;
        }
    }
    let estimate = PoincareEstimate {
        p: 2.0,
        constant: theta.powf(-0.5),
        method: Method::Eigensolve,
        h: op.spacing(),
        residual,
        iterations,
        converged,
        restarts: Vec::new(),
        stagnation_warning: false,
    };
    if !converged || !theta.is_finite() {
        return Err(SobolevError::SolverDiverged { iterations, residual, best: Box::new(estimate) });
    }
    Ok(GroundState { eigenvalue: theta, vector: DiscreteField::from_values(raster, x)?, estimate })
}

/// `C₂ = λ_min^{-1/2}` from [`dirichlet_ground_state`] with tolerance `tol`.
pub fn poincare_p2(raster: &RasterDomain, tol: f64) -> Result<PoincareEstimate> {
    let cfg = SolverConfig { tol, ..SolverConfig::default() };
    Ok(dirichlet_ground_state(raster, &cfg)?.estimate)
}

/// Smoothed `p`-Rayleigh functional `ln N_ε(u) − ln M_ε(u)` with
/// `N_ε = Σ_sites (|Gu|² + ε²)^{p/2}` and `M_ε = Σ_cells (u² + (εh)²)^{p/2}`.
struct Functional<'a> {
    op: &'a GradientOperator,
    p: f64,
    eps: f64,
    eps_u: f64,
}

impl Functional<'_> {
    fn site_sq(&self, g: &[f64]) -> Vec<f64> {
        g.chunks(self.op.dim()).map(|c| c.iter().map(|v| v * v).sum()).collect()
    }

    fn value(&self, u: &[f64], g: &mut [f64]) -> f64 {
        self.op.apply_raw(u, g);
        let half = 0.5 * self.p;
        let e2 = self.eps * self.eps;
        let eu2 = self.eps_u * self.eps_u;
        let sq = self.site_sq(g);
        let num = linalg::sum_map(&sq, |s| (s + e2).powf(half));
        let den = linalg::sum_map(u, |v| (v * v + eu2).powf(half));
        num.ln() - den.ln()
    }

    /// Value and gradient at `u`.
    fn gradient(&self, u: &[f64], g: &mut [f64], out: &mut [f64]) -> f64 {
        let f = self.value(u, g);
        let half = 0.5 * self.p;
        let e2 = self.eps * self.eps;
        let eu2 = self.eps_u * self.eps_u;
        let dim = self.op.dim();
        let sq = self.site_sq(g);
        let num = linalg::sum_map(&sq, |s| (s + e2).powf(half));
        let den = linalg::sum_map(u, |v| (v * v + eu2).powf(half));
        g.par_chunks_mut(dim).zip(sq.par_iter()).with_min_len(1024).for_each(|(c, &s)| {
            let w = self.p * (s + e2).powf(half - 1.0) / num;
            c.iter_mut().for_each(|v| *v *= w);
        });
        self.op.apply_transpose_raw(g, out);
        out.par_iter_mut().zip(u.par_iter()).with_min_len(4096).for_each(|(o, &v)| {
            *o -= self.p * (v * v + eu2).powf(half - 1.0) * v / den;
        });
        f
    }
}

/// Exact `‖u‖_p / ‖Gu‖_p` (the `hⁿ` weights cancel).
fn exact_ratio(op: &GradientOperator, u: &[f64], p: f64, g: &mut [f64]) -> f64 {
    op.apply_raw(u, g);
    let sq: Vec<f64> = g.chunks(op.dim()).map(|c| c.iter().map(|v| v * v).sum::<f64>()).collect();
    let num = linalg::sum_map(&sq, |s| s.powf(0.5 * p));
    let den = linalg::sum_map(u, |v| v.abs().powf(p));
    (den / num).powf(1.0 / p)
}

/// Largest `‖χ_S‖_p / ‖Gχ_S‖_p` over the superlevel sets `S = {±u > s}`.
/// Cells are added in decreasing order and the per-site gradient norms are
/// updated incrementally; the winner is re-evaluated exactly.
fn level_set_scan(op: &GradientOperator, u: &[f64], p: f64) -> f64 {
    let n = u.len();
    let dim = op.dim();
    let mut best = 0.0f64;
    for sign in [1.0, -1.0] {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| (sign * u[b]).total_cmp(&(sign * u[a])).then(a.cmp(&b)));
        let mut rows = vec![0.0; op.slots()];
        let mut site_sq = vec![0.0; op.num_sites()];
        let mut total = 0.0;
        let mut best_k = 0;
        let mut best_here = 0.0;
        for (k, &d) in order.iter().enumerate() {
            let (a, b) = (op.t_offsets[d] as usize, op.t_offsets[d + 1] as usize);
            for &(slot, c) in &op.t_entries[a..b] {
                let slot = slot as usize;
                let site = slot / dim;
                let before = site_sq[site];
                let old = rows[slot];
                rows[slot] = old + c;
                site_sq[site] = (before - old * old + rows[slot] * rows[slot]).max(0.0);
                total += site_sq[site].powf(0.5 * p) - before.powf(0.5 * p);
            }
            let tie = k + 1 < n && u[order[k + 1]] == u[d];
            if tie || total <= 0.0 {
                continue;
            }
            let ratio = ((k + 1) as f64 / total).powf(1.0 / p);
            if ratio > best_here {
                best_here = ratio;
                best_k = k + 1;
            }
        }
        if best_k > 0 {
            let mut chi = vec![0.0; n];
            for &d in &order[..best_k] {
                chi[d] = 1.0;
            }
            let mut g = vec![0.0; op.slots()];
            best = best.max(exact_ratio(op, &chi, p, &mut g));
        }
    }
    best
}

struct DescentOutcome {
    best: f64,
    iterations: usize,
    residual: f64,
    converged: bool,
}

/// Preconditioned descent on the smoothed functional, tracking the largest
/// exact ratio seen along the way.
fn descend(op: &GradientOperator, p: f64, mut u: Vec<f64>, cfg: &SolverConfig) -> Result<DescentOutcome> {
    let n = u.len();
    let h = op.spacing();
    let slots = op.slots();
    let mut g = vec![0.0; slots];
    let mut grad = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let lap = |v: &[f64], out: &mut [f64]| {
        let mut s = vec![0.0; slots];
        op.laplacian_raw(v, &mut s, out);
    };

    let normalize = |u: &mut Vec<f64>| {
        let s = linalg::sum_map(u, |v| v.abs().powf(p)).powf(1.0 / p);
        if s > 0.0 {
            linalg::scale(1.0 / s, u);
        }
    };
    normalize(&mut u);

    // Smoothing schedule: one stage at ε = 1e-9·h, preceded by a geometric
    // continuation from a coarse ε when p is close to one.
    let final_eps = 1e-9 * h;
    let mut stages = vec![final_eps];
    if p < 1.05 {
        op.apply_raw(&u, &mut g);
        let typical = (linalg::sum_map(&g, |v| v * v) / (op.num_sites() as f64)).sqrt();
        let mut e = 0.1 * typical;
        let mut pre = Vec::new();
        while e > final_eps * 100.0 {
            pre.push(e);
            e *= 0.01;
        }
        pre.push(final_eps);
        stages = pre;
    }

    let mut best = exact_ratio(op, &u, p, &mut g).max(level_set_scan(op, &u, p));
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    for (stage, &eps) in stages.iter().enumerate() {
        let last = stage + 1 == stages.len();
        let (stage_tol, stage_iters) =
            if last { (cfg.descent_tol, cfg.descent_iters) } else { (1e-4, cfg.descent_iters / 4) };
        let func = Functional { op, p, eps, eps_u: eps * h };
        let mut history: Vec<f64> = Vec::new();
        let mut step = 1.0;
        let mut f = func.gradient(&u, &mut g, &mut grad);
        converged = false;
        for _ in 0..stage_iters {
            iterations += 1;
            dir.iter_mut().for_each(|d| *d = 0.0);
            linalg::conjugate_gradient(lap, &grad, &mut dir, 1e-3, 200);
            let slope = -linalg::dot(&grad, &dir);
            if !(slope < 0.0) {
                converged = true;
                break;
            }
            let unorm = linalg::norm(&u);
            let dnorm = linalg::norm(&dir);
            let mut alpha = step * unorm / dnorm;
            let mut accepted = false;
            for _ in 0..40 {
                trial.iter_mut().zip(u.iter().zip(&dir)).for_each(|(t, (a, d))| *t = a - alpha * d);
                let ft = func.value(&trial, &mut g);
                if ft.is_finite() && ft <= f + 1e-4 * alpha * slope {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                converged = true;
                break;
            }
            std::mem::swap(&mut u, &mut trial);
            normalize(&mut u);
            step = (alpha * dnorm / unorm * 2.0).min(1.0);
            let c = exact_ratio(op, &u, p, &mut g);
            if c.is_nan() {
                return Err(SobolevError::SolverDiverged {
                    iterations,
                    residual,
                    best: Box::new(descent_estimate(p, best, h, residual, iterations, false)),
                });
            }
            if c > best {
                best = c;
            }
            f = func.gradient(&u, &mut g, &mut grad);
            history.push(f);
            if history.len() > 10 {
                let old = history[history.len() - 11];
                residual = ((f - old) / f.abs().max(1e-300)).abs();
                if residual < stage_tol {
                    converged = true;
                    break;
                }
            }
        }
        best = best.max(level_set_scan(op, &u, p));
    }
    Ok(DescentOutcome { best, iterations, residual, converged })
}

fn descent_estimate(p: f64, c: f64, h: f64, residual: f64, iterations: usize, converged: bool) -> PoincareEstimate {
    PoincareEstimate {
        p,
        constant: c,
        method: Method::RayleighDescent,
        h,
        residual,
        iterations,
        converged,
        restarts: Vec::new(),
        stagnation_warning: false,
    }
}

/// `C_p` as the supremum of `‖u‖_p / ‖Gu‖_p` along descent trajectories
/// started from the `p = 2` eigenvector and `cfg.restarts` seeded random
/// fields; the best start wins (ties go to the earliest).
pub fn poincare_general_p(raster: &RasterDomain, p: f64, cfg: &SolverConfig) -> Result<PoincareEstimate> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(SobolevError::Exponent(p));
    }
    if raster.is_empty() {
        return Err(RasterError::EmptyFiber.into());
    }
    let op = GradientOperator::new(raster);
    let ground = ground_state_with(&op, raster, cfg)?;
    let n = op.num_dofs();
    let mut starts = vec![ground.vector.values().to_vec()];
    for k in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1));
        starts.push((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    let outcomes: Vec<Result<DescentOutcome>> = starts.into_par_iter().map(|u| descend(&op, p, u, cfg)).collect();
    let mut results = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        results.push(o?);
    }
    let mut best_idx = 0;
    for (i, r) in results.iter().enumerate() {
        if r.best > results[best_idx].best {
            best_idx = i;
        }
    }
    let best = &results[best_idx];
    let restarts: Vec<f64> = results.iter().map(|r| r.best).collect();
    let hi = restarts.iter().cloned().fold(f64::MIN, f64::max);
    let lo = restarts.iter().cloned().fold(f64::MAX, f64::min);
    let mut est = descent_estimate(
        p,
        best.best,
        op.spacing(),
        best.residual,
        results.iter().map(|r| r.iterations).sum(),
        best.converged,
    );
    est.stagnation_warning = (hi - lo) > 0.05 * hi;
    est.restarts = restarts;
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_domain;
    use crate::raster::rasterize;
    use std::sync::Arc;

    fn raster(text: &str, res: usize) -> RasterDomain {
        rasterize(&Arc::new(parse_domain(text).unwrap()), &[], res).unwrap()
    }

    #[test]
    fn interval_ground_state_matches_closed_form() {
        // N cells with zero extension: λ = (4/h²) sin²(π/(2(N+1))).
        let r = raster("dim 1\nbox [0,1]\nset: x > 0 and x < 1", 64);
        let gs = dirichlet_ground_state(&r, &SolverConfig::default()).unwrap();
        let h = r.spacing();
        let exact = 4.0 / (h * h) * (std::f64::consts::PI / (2.0 * 65.0)).sin().powi(2);
        assert!((gs.eigenvalue - exact).abs() / exact < 1e-7, "{} vs {exact}", gs.eigenvalue);
    }

    #[test]
    fn rejects_bad_exponent() {
        let r = raster("dim 1\nbox [0,1]\nset: x > 0 and x < 1", 16);
        assert_eq!(poincare_general_p(&r, 0.5, &SolverConfig::default()), Err(SobolevError::Exponent(0.5)));
    }
}
