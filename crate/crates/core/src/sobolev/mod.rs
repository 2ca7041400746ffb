//! Discrete `W^{1,p}` machinery on a raster.
//!
//! Fields live on the interior cells and are implicitly zero everywhere else,
//! which models the trace-zero class `W^{1,p}(Ω, ∂Ω)`. The gradient is the
//! forward difference `(u(x + h e_j) − u(x)) / h` of the zero extension,
//! grouped per *site*: every grid cell (including one layer of virtual cells
//! below the box) that owns at least one face touching the interior. A cut
//! face contributes two one-sided differences, one at the lower cell and one
//! at an extra slit site attached to the upper cell.

mod check;
mod solve;
mod trace;

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg;
use crate::raster::{RasterDomain, RasterError};

pub use check::{discrete_p1_exact, verify_theorem_p1, CheckKind, CheckRecord};
pub use solve::{
    dirichlet_ground_state, poincare_general_p, poincare_p2, GroundState, Method, PoincareEstimate, SolverConfig,
};
pub use trace::{trace_ratio_battery, Battery, TraceFunction, TraceReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SobolevError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("field does not live on this raster")]
    Mismatch,
    #[error("field has a non-finite value at cell {0}")]
    NonFinite(usize),
    #[error("exponent p = {0} outside [1, ∞)")]
    Exponent(f64),
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    SolverDiverged { iterations: usize, residual: f64, best: Box<PoincareEstimate> },
    #[error("domain is unbounded in direction {direction:?}")]
    Unbounded { direction: Vec<f64> },
    #[error("discrete inequality violated in trial {trial}: ratio {ratio}")]
    Violation { trial: usize, ratio: f64 },
    #[error("at least one trial is required")]
    NoTrials,
    #[error("boundary extraction produced no segments")]
    DegenerateBoundary,
}

pub type Result<T> = std::result::Result<T, SobolevError>;

/// Identity of a raster as far as fields are concerned.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    counts: Vec<usize>,
    h: u64,
    t: Vec<u64>,
    cells: usize,
}

impl Layout {
    fn of(raster: &RasterDomain) -> Self {
        Layout {
            counts: raster.counts().to_vec(),
            h: raster.spacing().to_bits(),
            t: raster.params().iter().map(|v| v.to_bits()).collect(),
            cells: raster.interior_count(),
        }
    }
}

/// Values on the interior cells of a raster, indexed by degree of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteField {
    layout: Layout,
    values: Vec<f64>,
}

impl DiscreteField {
    pub fn zeros(raster: &RasterDomain) -> Self {
        DiscreteField { layout: Layout::of(raster), values: vec![0.0; raster.interior_count()] }
    }

    pub fn from_values(raster: &RasterDomain, values: Vec<f64>) -> Result<Self> {
        if values.len() != raster.interior_count() {
            return Err(SobolevError::Mismatch);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SobolevError::NonFinite(i));
        }
        Ok(DiscreteField { layout: Layout::of(raster), values })
    }

    /// Samples `f` at the interior cell centers.
    pub fn from_fn(raster: &RasterDomain, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = raster.dofs().iter().map(|&idx| f(&raster.center(idx))).collect();
        Self::from_values(raster, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &DiscreteField, b: f64) -> Result<DiscreteField> {
        if self.layout != other.layout {
            return Err(SobolevError::Mismatch);
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Ok(DiscreteField { layout: self.layout.clone(), values })
    }

    /// Unweighted `Σ u_i v_i`.
    pub fn dot(&self, other: &DiscreteField) -> Result<f64> {
        if self.layout != other.layout {
            return Err(SobolevError::Mismatch);
        }
        Ok(linalg::dot(&self.values, &other.values))
    }
}

/// Face differences grouped per site, `dim` components each.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    layout: Layout,
    dim: usize,
    values: Vec<f64>,
}

impl VectorField {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_sites(&self) -> usize {
        self.values.len() / self.dim
    }

    /// Components of one site.
    pub fn site(&self, s: usize) -> &[f64] {
        &self.values[s * self.dim..(s + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn dot(&self, other: &VectorField) -> Result<f64> {
        if self.layout != other.layout || self.dim != other.dim {
            return Err(SobolevError::Mismatch);
        }
        Ok(linalg::dot(&self.values, &other.values))
    }
}

/// Anything with a per-cell magnitude: scalar fields use `|u|`, vector fields
/// the euclidean norm per site.
pub trait Magnitudes {
    fn magnitudes(&self) -> Vec<f64>;
}

impl Magnitudes for DiscreteField {
    fn magnitudes(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.abs()).collect()
    }
}

impl Magnitudes for VectorField {
    fn magnitudes(&self) -> Vec<f64> {
        self.values.chunks(self.dim).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }
}

/// `(Σ |value|^p · hⁿ)^{1/p}` with `n` the ambient dimension.
pub fn lp_norm<F: Magnitudes>(u: &F, p: f64, h: f64, dim: usize) -> f64 {
    let m = u.magnitudes();
    let w = h.powi(dim as i32);
    if p == 2.0 {
        return (linalg::sum_map(&m, |v| v * v) * w).sqrt();
    }
    (linalg::sum_map(&m, |v| v.powf(p)) * w).powf(1.0 / p)
}

/// One difference `(u[plus] − u[minus]) / h`; missing entries are zero.
#[derive(Debug, Clone, Copy)]
struct Row {
    plus: u32,
    minus: u32,
    slot: u32,
}

const NONE: u32 = u32::MAX;

/// Sparse forward-difference gradient with zero extension.
#[derive(Debug, Clone)]
pub struct GradientOperator {
    layout: Layout,
    dim: usize,
    h: f64,
    ndofs: usize,
    sites: usize,
    rows: Vec<Row>,
    /// `[plus, minus]` per slot; empty slots hold `NONE` twice.
    dense: Vec<[u32; 2]>,
    /// Rows touching each degree of freedom: `(slot, sign)`.
    t_offsets: Vec<u32>,
    t_entries: Vec<(u32, f64)>,
}

impl GradientOperator {
    pub fn new(raster: &RasterDomain) -> Self {
        let n = raster.dim();
        let counts = raster.counts();
        // Extended grid: coordinates shifted by one so that the virtual layer
        // below the box has coordinate zero.
        let ext: Vec<usize> = counts.iter().map(|c| c + 1).collect();
        let mut ext_strides = vec![1usize; n];
        for j in 1..n {
            ext_strides[j] = ext_strides[j - 1] * ext[j - 1];
        }
        let ext_index = |idx: usize| -> usize { (0..n).map(|j| (raster.coord(idx, j) + 1) * ext_strides[j]).sum() };
        let mut site_of: HashMap<usize, u32> = HashMap::new();
        let mut slit_sites = 0u32;
        let mut pending: Vec<(usize, Option<usize>, Row)> = Vec::new();

        for &idx in raster.dofs() {
            let me = raster.dof_of(idx).unwrap() as u32;
            for j in 0..n {
                // Face towards the forward neighbour, owned by this cell.
                match raster.neighbor(idx, j, true) {
                    Some(nb) if raster.is_interior(nb) => {
                        if raster.is_cut(idx, j) {
                            pending.push((ext_index(idx), None, Row { plus: NONE, minus: me, slot: j as u32 }));
                            pending.push((usize::MAX, Some(slit_sites as usize), Row {
                                plus: raster.dof_of(nb).unwrap() as u32,
                                minus: NONE,
                                slot: j as u32,
                            }));
                            slit_sites += 1;
                        } else {
                            pending.push((ext_index(idx), None, Row {
                                plus: raster.dof_of(nb).unwrap() as u32,
                                minus: me,
                                slot: j as u32,
                            }));
                        }
                    }
                    _ => pending.push((ext_index(idx), None, Row { plus: NONE, minus: me, slot: j as u32 })),
                }
                // Face towards an exterior backward neighbour, owned by it.
                let back_exterior = match raster.neighbor(idx, j, false) {
                    None => true,
                    Some(nb) => !raster.is_interior(nb),
                };
                if back_exterior {
                    let site = ext_index(idx) - ext_strides[j];
                    pending.push((site, None, Row { plus: me, minus: NONE, slot: j as u32 }));
                }
            }
        }

        let mut keys: Vec<usize> = pending.iter().filter(|p| p.1.is_none()).map(|p| p.0).collect();
        keys.sort_unstable();
        keys.dedup();
        for (i, k) in keys.iter().enumerate() {
            site_of.insert(*k, i as u32);
        }
        let regular = keys.len() as u32;
        let mut rows: Vec<Row> = pending
            .into_iter()
            .map(|(key, slit, mut row)| {
                let site = match slit {
                    Some(s) => regular + s as u32,
                    None => site_of[&key],
                };
                row.slot += site * n as u32;
                row
            })
            .collect();
        rows.sort_unstable_by_key(|r| r.slot);
        let sites = (regular + slit_sites) as usize;
        let ndofs = raster.interior_count();
        let h = raster.spacing();

        let mut counts_per = vec![0u32; ndofs + 1];
        for r in &rows {
            for d in [r.plus, r.minus] {
                if d != NONE {
                    counts_per[d as usize + 1] += 1;
                }
            }
        }
        for i in 0..ndofs {
            counts_per[i + 1] += counts_per[i];
        }
        let t_offsets = counts_per.clone();
        let mut fill = counts_per;
        let mut t_entries = vec![(0u32, 0.0); *t_offsets.last().unwrap() as usize];
        for r in &rows {
            if r.plus != NONE {
                let k = &mut fill[r.plus as usize];
                t_entries[*k as usize] = (r.slot, 1.0 / h);
                *k += 1;
            }
            if r.minus != NONE {
                let k = &mut fill[r.minus as usize];
                t_entries[*k as usize] = (r.slot, -1.0 / h);
                *k += 1;
            }
        }
        let mut dense = vec![[NONE, NONE]; sites * n];
        for r in &rows {
            dense[r.slot as usize] = [r.plus, r.minus];
        }
        GradientOperator { layout: Layout::of(raster), dim: n, h, ndofs, sites, rows, dense, t_offsets, t_entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn num_dofs(&self) -> usize {
        self.ndofs
    }

    pub fn num_sites(&self) -> usize {
        self.sites
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Nonzero pattern of each row as `(slot, [(dof, coefficient)])`.
    pub fn rows(&self) -> impl Iterator<Item = (usize, Vec<(usize, f64)>)> + '_ {
        self.rows.iter().map(move |r| {
            let mut e = Vec::with_capacity(2);
            if r.plus != NONE {
                e.push((r.plus as usize, 1.0 / self.h));
            }
            if r.minus != NONE {
                e.push((r.minus as usize, -1.0 / self.h));
            }
            (r.slot as usize, e)
        })
    }

    fn check(&self, u: &DiscreteField) -> Result<()> {
        if u.layout != self.layout {
            return Err(SobolevError::Mismatch);
        }
        Ok(())
    }

    pub(crate) fn apply_raw(&self, u: &[f64], out: &mut [f64]) {
        let inv = 1.0 / self.h;
        out.par_iter_mut().with_min_len(4096).zip(self.dense.par_iter()).for_each(|(o, &[plus, minus])| {
            let a = if plus != NONE { u[plus as usize] } else { 0.0 };
            let b = if minus != NONE { u[minus as usize] } else { 0.0 };
            *o = (a - b) * inv;
        });
    }

    pub(crate) fn apply_transpose_raw(&self, w: &[f64], out: &mut [f64]) {
        out.par_iter_mut().with_min_len(2048).enumerate().for_each(|(d, o)| {
            let (a, b) = (self.t_offsets[d] as usize, self.t_offsets[d + 1] as usize);
            *o = self.t_entries[a..b].iter().map(|&(s, c)| c * w[s as usize]).sum();
        });
    }

    /// `Gᵀ G u`, the discrete Dirichlet Laplacian.
    pub(crate) fn laplacian_raw(&self, u: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        self.apply_raw(u, scratch);
        self.apply_transpose_raw(scratch, out);
    }

    pub(crate) fn slots(&self) -> usize {
        self.sites * self.dim
    }

    pub(crate) fn row_axes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().map(move |r| (r.slot as usize, r.slot as usize % self.dim))
    }

    pub fn grad(&self, u: &DiscreteField) -> Result<VectorField> {
        self.check(u)?;
        let mut values = vec![0.0; self.slots()];
        self.apply_raw(&u.values, &mut values);
        Ok(VectorField { layout: self.layout.clone(), dim: self.dim, values })
    }

    /// Backward-difference divergence, the negative adjoint of [`grad`](Self::grad).
    pub fn divergence(&self, w: &VectorField) -> Result<DiscreteField> {
        if w.layout != self.layout || w.values.len() != self.slots() {
            return Err(SobolevError::Mismatch);
        }
        let mut values = vec![0.0; self.ndofs];
        self.apply_transpose_raw(&w.values, &mut values);
        values.iter_mut().for_each(|v| *v = -*v);
        Ok(DiscreteField { layout: self.layout.clone(), values })
    }

    /// A vector field on this operator's sites, all zero.
    pub fn zero_vector_field(&self) -> VectorField {
        VectorField { layout: self.layout.clone(), dim: self.dim, values: vec![0.0; self.slots()] }
    }

    /// `‖D_axis u‖_p`: the norm of one gradient component.
    pub fn axis_norm(&self, u: &DiscreteField, axis: usize, p: f64) -> Result<f64> {
        let g = self.grad(u)?;
        let sum: f64 = self
            .row_axes()
            .filter(|&(_, a)| a == axis)
            .map(|(s, _)| g.values[s].abs().powf(p))
            .sum();
        Ok((sum * self.h.powi(self.dim as i32)).powf(1.0 / p))
    }
}

/// `grad(op, u)`; see [`GradientOperator::grad`].
pub fn grad(op: &GradientOperator, u: &DiscreteField) -> Result<VectorField> {
    op.grad(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_domain;
    use crate::raster::rasterize;
    use std::sync::Arc;

    fn square(res: usize) -> RasterDomain {
        let s = Arc::new(parse_domain("dim 2\nbox [0,1]x[0,1]\nset: x>0 and x<1 and y>0 and y<1").unwrap());
        rasterize(&s, &[], res).unwrap()
    }

    #[test]
    fn zero_field_has_zero_gradient() {
        let r = square(8);
        let op = GradientOperator::new(&r);
        let g = op.grad(&DiscreteField::zeros(&r)).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_stencil() {
        let r = square(8);
        let op = GradientOperator::new(&r);
        let h = r.spacing();
        let mut vals = vec![0.0; r.interior_count()];
        let mid = r.dof_of(r.index(&[3, 4])).unwrap();
        vals[mid] = 1.0;
        let u = DiscreteField::from_values(&r, vals).unwrap();
        let g = op.grad(&u).unwrap();
        for axis in 0..2 {
            let comp: Vec<f64> = (0..g.num_sites()).map(|s| g.site(s)[axis]).filter(|v| *v != 0.0).collect();
            assert_eq!(comp.len(), 2);
            assert!(comp.iter().any(|&v| (v + 1.0 / h).abs() < 1e-12));
            assert!(comp.iter().any(|&v| (v - 1.0 / h).abs() < 1e-12));
            let l1: f64 = comp.iter().map(|v| v.abs()).sum();
            assert!((l1 - 2.0 / h).abs() < 1e-9);
        }
    }

    #[test]
    fn ramp_is_exact_in_the_bulk() {
        let r = square(16);
        let op = GradientOperator::new(&r);
        let u = DiscreteField::from_fn(&r, |c| c[0]).unwrap();
        let g = op.grad(&u).unwrap();
        let ones = g.values().chunks(2).filter(|c| (c[0] - 1.0).abs() < 1e-9).count();
        // All sites between two interior cells along x.
        assert_eq!(ones, 15 * 16);
    }

    #[test]
    fn constant_norm_is_volume_power() {
        let r = square(10);
        let u = DiscreteField::from_fn(&r, |_| 1.0).unwrap();
        for p in [1.0, 2.0, 3.5] {
            let v = lp_norm(&u, p, r.spacing(), 2);
            assert!((v - 1.0f64.powf(1.0 / p)).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_have_at_most_two_entries_and_bounded_norm() {
        let r = square(12);
        let op = GradientOperator::new(&r);
        assert!(op.rows().all(|(_, e)| !e.is_empty() && e.len() <= 2));
        // Each dof appears in exactly 2n rows.
        for d in 0..op.num_dofs() {
            assert_eq!(op.t_offsets[d + 1] - op.t_offsets[d], 4);
        }
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let a = square(8);
        let b = square(9);
        let op = GradientOperator::new(&a);
        assert_eq!(op.grad(&DiscreteField::zeros(&b)), Err(SobolevError::Mismatch));
    }
}
