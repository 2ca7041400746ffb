//! Uniform-grid inner approximation of a fiber.
//!
//! A cell belongs to the interior mask when its center is a member of `Ω_t`.
//! Two interior face neighbours whose connecting segment leaves the domain
//! (through a thin gap or the zero set of a `!=` atom) are separated by a
//! *cut* face; operators treat cut faces like the outside of the domain.

use std::collections::VecDeque;
use std::io::{self, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dsl::{DomainSpec, DslError, Fiber};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RasterError {
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error("resolution {0} below the minimum of 4 cells per axis")]
    Resolution(usize),
    #[error("fiber has no interior cell at this resolution")]
    EmptyFiber,
    #[error("axis {axis} out of range for dimension {dim}")]
    Axis { axis: usize, dim: usize },
    #[error("ball radius {eps} below 3h = {min}")]
    BallTooSmall { eps: f64, min: f64 },
    #[error("direction must be a unit vector of dimension {dim}")]
    Direction { dim: usize },
    #[error("step must be positive")]
    Step,
}

const NONE: u32 = u32::MAX;

/// Inner approximation of one fiber `Ω_t` on a uniform grid.
#[derive(Debug, Clone)]
pub struct RasterDomain {
    spec: Arc<DomainSpec>,
    t: Vec<f64>,
    h: f64,
    origin: Vec<f64>,
    counts: Vec<usize>,
    strides: Vec<usize>,
    interior: Vec<bool>,
    boundary_adjacent: Vec<bool>,
    /// `cut[j][c]`: the face between `c` and `c + e_j` separates two interior cells
    /// but its midpoint lies outside the domain.
    cut: Vec<Vec<bool>>,
    dofs: Vec<usize>,
    dof_of: Vec<u32>,
}

/// Grid spacing and per-axis counts for a box at a given resolution.
fn grid_layout(spec: &DomainSpec, resolution: usize) -> (f64, Vec<f64>, Vec<usize>) {
    let max_width = spec.bounding_box.iter().map(|iv| iv.width()).fold(0.0, f64::max);
    let h = max_width / resolution as f64;
    let origin = spec.bounding_box.iter().map(|iv| iv.lo).collect();
    let counts = spec
        .bounding_box
        .iter()
        .map(|iv| ((iv.width() / h) - 1e-9).ceil().max(1.0) as usize)
        .collect();
    (h, origin, counts)
}

/// Builds the inner approximation of `Ω_t` with `resolution` cells along the
/// longest box side.
pub fn rasterize(spec: &Arc<DomainSpec>, t: &[f64], resolution: usize) -> Result<RasterDomain, RasterError> {
    if resolution < 4 {
        return Err(RasterError::Resolution(resolution));
    }
    let fiber = spec.fiber(t)?;
    let n = spec.ambient_dim;
    let (h, origin, counts) = grid_layout(spec, resolution);
    let mut strides = vec![1usize; n];
    for j in 1..n {
        strides[j] = strides[j - 1] * counts[j - 1];
    }
    let total: usize = counts.iter().product();
    let row = counts[0];

    let center_of = |idx: usize| -> Vec<f64> {
        (0..n)
            .map(|j| origin[j] + (((idx / strides[j]) % counts[j]) as f64 + 0.5) * h)
            .collect()
    };

    let mut interior = vec![false; total];
    interior.par_chunks_mut(row).enumerate().for_each(|(r, chunk)| {
        for (i, slot) in chunk.iter_mut().enumerate() {
            let c = center_of(r * row + i);
            *slot = fiber.is_inside_box(&c) && fiber.contains(&c);
        }
    });

    let mut cut: Vec<Vec<bool>> = vec![vec![false; total]; n];
    for (j, cut_j) in cut.iter_mut().enumerate() {
        let interior = &interior;
        cut_j.par_chunks_mut(row).enumerate().for_each(|(r, chunk)| {
            for (i, slot) in chunk.iter_mut().enumerate() {
                let idx = r * row + i;
                let coord = (idx / strides[j]) % counts[j];
                if !interior[idx] || coord + 1 >= counts[j] || !interior[idx + strides[j]] {
                    continue;
                }
                let a = center_of(idx);
                let b = center_of(idx + strides[j]);
                *slot = !fiber.segment_connected(&a, &b);
            }
        });
    }

    let mut dofs = Vec::new();
    let mut dof_of = vec![NONE; total];
    for (idx, &inside) in interior.iter().enumerate() {
        if inside {
            dof_of[idx] = dofs.len() as u32;
            dofs.push(idx);
        }
    }

    let mut raster = RasterDomain {
        spec: Arc::clone(spec),
        t: t.to_vec(),
        h,
        origin,
        counts,
        strides,
        interior,
        boundary_adjacent: vec![false; total],
        cut,
        dofs,
        dof_of,
    };
    let adjacent: Vec<bool> = (0..total)
        .map(|idx| {
            raster.interior[idx]
                && (0..n).any(|j| {
                    [false, true].iter().any(|&forward| raster.neighbor_dof(idx, j, forward).is_none())
                })
        })
        .collect();
    raster.boundary_adjacent = adjacent;
    Ok(raster)
}

impl RasterDomain {
    pub fn spec(&self) -> &Arc<DomainSpec> {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.t
    }

    pub fn fiber(&self) -> Fiber<'_> {
        self.spec.fiber(&self.t).expect("parameters validated at rasterization")
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Cells along the longest axis, i.e. the resolution this raster was built with.
    pub fn resolution(&self) -> usize {
        let max_width = self.spec.bounding_box.iter().map(|iv| iv.width()).fold(0.0, f64::max);
        (max_width / self.h).round() as usize
    }

    pub fn num_cells(&self) -> usize {
        self.interior.len()
    }

    pub fn interior_count(&self) -> usize {
        self.dofs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dofs.is_empty()
    }

    pub fn is_interior(&self, idx: usize) -> bool {
        self.interior[idx]
    }

    pub fn interior_mask(&self) -> &[bool] {
        &self.interior
    }

    pub fn boundary_adjacent_mask(&self) -> &[bool] {
        &self.boundary_adjacent
    }

    pub fn is_cut(&self, idx: usize, axis: usize) -> bool {
        self.cut[axis][idx]
    }

    /// Grid indices of interior cells in increasing order; position = degree of freedom.
    pub fn dofs(&self) -> &[usize] {
        &self.dofs
    }

    pub fn dof_of(&self, idx: usize) -> Option<usize> {
        let d = self.dof_of[idx];
        (d != NONE).then_some(d as usize)
    }

    pub fn coords(&self, idx: usize) -> Vec<usize> {
        (0..self.dim()).map(|j| (idx / self.strides[j]) % self.counts[j]).collect()
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.strides).map(|(c, s)| c * s).sum()
    }

    #[inline]
    pub fn coord(&self, idx: usize, axis: usize) -> usize {
        (idx / self.strides[axis]) % self.counts[axis]
    }

    pub fn center(&self, idx: usize) -> Vec<f64> {
        (0..self.dim())
            .map(|j| self.origin[j] + (self.coord(idx, j) as f64 + 0.5) * self.h)
            .collect()
    }

    /// Grid neighbour along `axis`, if inside the grid.
    #[inline]
    pub fn neighbor(&self, idx: usize, axis: usize, forward: bool) -> Option<usize> {
        let c = self.coord(idx, axis);
        if forward {
            (c + 1 < self.counts[axis]).then(|| idx + self.strides[axis])
        } else {
            (c > 0).then(|| idx - self.strides[axis])
        }
    }

    /// Interior neighbour reachable through an uncut face.
    #[inline]
    pub fn neighbor_dof(&self, idx: usize, axis: usize, forward: bool) -> Option<usize> {
        let nb = self.neighbor(idx, axis, forward)?;
        let face_owner = if forward { idx } else { nb };
        if self.cut[axis][face_owner] {
            return None;
        }
        self.dof_of(nb)
    }

    /// `(interior cell count)·hⁿ`.
    pub fn volume(&self) -> Result<f64, RasterError> {
        if self.is_empty() {
            return Err(RasterError::EmptyFiber);
        }
        Ok(self.dofs.len() as f64 * self.h.powi(self.dim() as i32))
    }

    /// Longest run of consecutive interior cells along `axis`, times `h`.
    pub fn thickness_discrete(&self, axis: usize) -> Result<f64, RasterError> {
        if axis >= self.dim() {
            return Err(RasterError::Axis { axis, dim: self.dim() });
        }
        let mut best = 0usize;
        for &idx in &self.dofs {
            // Start counting only at the first cell of a run.
            if self.neighbor_dof(idx, axis, false).is_some() {
                continue;
            }
            let mut len = 1;
            let mut cur = idx;
            while let Some(next) = self.neighbor_dof(cur, axis, true) {
                len += 1;
                cur = self.dofs[next];
            }
            best = best.max(len);
        }
        Ok(best as f64 * self.h)
    }

    /// Number of face-connected components of interior cells whose centers
    /// lie in the open ball `B(x, eps)`.
    pub fn local_components(&self, x: &[f64], eps: f64) -> Result<usize, RasterError> {
        if eps < 3.0 * self.h * (1.0 - 1e-12) {
            return Err(RasterError::BallTooSmall { eps, min: 3.0 * self.h });
        }
        let n = self.dim();
        let in_ball = |idx: usize| {
            let c = self.center(idx);
            c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() < eps * eps
        };
        // Index window covering the ball.
        let mut lo = vec![0usize; n];
        let mut hi = vec![0usize; n];
        for j in 0..n {
            let a = ((x[j] - eps - self.origin[j]) / self.h).floor() - 1.0;
            let b = ((x[j] + eps - self.origin[j]) / self.h).ceil() + 1.0;
            if b < 0.0 || a >= self.counts[j] as f64 {
                return Ok(0);
            }
            lo[j] = a.max(0.0) as usize;
            hi[j] = (b.min(self.counts[j] as f64 - 1.0)) as usize;
        }
        let mut members = Vec::new();
        let mut coords = lo.clone();
        'outer: loop {
            let idx = self.index(&coords);
            if self.interior[idx] && in_ball(idx) {
                members.push(idx);
            }
            for j in 0..n {
                if coords[j] < hi[j] {
                    coords[j] += 1;
                    continue 'outer;
                }
                coords[j] = lo[j];
            }
            break;
        }
        let mut seen = std::collections::HashSet::new();
        let member_set: std::collections::HashSet<usize> = members.iter().copied().collect();
        let mut components = 0;
        for &start in &members {
            if !seen.insert(start) {
                continue;
            }
            components += 1;
            let mut queue = VecDeque::from([start]);
            while let Some(cur) = queue.pop_front() {
                for j in 0..n {
                    for forward in [false, true] {
                        if let Some(d) = self.neighbor_dof(cur, j, forward) {
                            let nb = self.dofs[d];
                            if member_set.contains(&nb) && seen.insert(nb) {
                                queue.push_back(nb);
                            }
                        }
                    }
                }
            }
        }
        Ok(components)
    }

    /// Seeds for chord searches: interior centers and member midpoints of faces
    /// between interior and exterior cells.
    pub fn chord_seeds(&self) -> Vec<Vec<f64>> {
        let fiber = self.fiber();
        let mut seeds: Vec<Vec<f64>> = self.dofs.iter().map(|&i| self.center(i)).collect();
        for &idx in &self.dofs {
            if !self.boundary_adjacent[idx] {
                continue;
            }
            for j in 0..self.dim() {
                for forward in [false, true] {
                    let exterior = match self.neighbor(idx, j, forward) {
                        None => true,
                        Some(nb) => !self.interior[nb],
                    };
                    if !exterior {
                        continue;
                    }
                    let mut mid = self.center(idx);
                    mid[j] += if forward { 0.5 * self.h } else { -0.5 * self.h };
                    if fiber.contains(&mid) {
                        seeds.push(mid);
                    }
                }
            }
        }
        seeds
    }

    /// Portable graymap (binary `P5`): interior 255, boundary-adjacent 128,
    /// exterior 0. Rows run from the top (largest y) down. Two-dimensional only.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> io::Result<()> {
        if self.dim() != 2 {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "graymap export needs a planar raster"));
        }
        let (nx, ny) = (self.counts[0], self.counts[1]);
        write!(w, "P5\n{nx} {ny}\n255\n")?;
        let mut buf = Vec::with_capacity(nx * ny);
        for j in (0..ny).rev() {
            for i in 0..nx {
                let idx = i + nx * j;
                buf.push(if self.boundary_adjacent[idx] {
                    128
                } else if self.interior[idx] {
                    255
                } else {
                    0
                });
            }
        }
        w.write_all(&buf)
    }

    /// Flat mask, one byte per cell (1 interior, 0 exterior), axis 0 fastest.
    pub fn mask_bytes(&self) -> Vec<u8> {
        self.interior.iter().map(|&b| b as u8).collect()
    }

    /// Expands a per-interior-cell field to the full grid (zero outside), as
    /// little-endian doubles in mask order.
    pub fn field_bytes(&self, values: &[f64]) -> Vec<u8> {
        let mut full = vec![0.0f64; self.num_cells()];
        for (d, &idx) in self.dofs.iter().enumerate() {
            full[idx] = values[d];
        }
        full.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn sidecar(&self) -> RasterSidecar {
        RasterSidecar {
            dims: self.counts.clone(),
            h: self.h,
            origin: self.origin.clone(),
            t: self.t.clone(),
            order: "axis0-fastest".to_string(),
            interior_cells: self.interior_count(),
        }
    }
}

/// JSON metadata accompanying a binary mask or field dump.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RasterSidecar {
    pub dims: Vec<usize>,
    pub h: f64,
    pub origin: Vec<f64>,
    pub t: Vec<f64>,
    pub order: String,
    pub interior_cells: usize,
}

/// Segment `start + s·direction`, `0 ≤ s ≤ length`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Chord {
    pub start: Vec<f64>,
    pub direction: Vec<f64>,
    pub length: f64,
}

fn check_direction(lambda: &[f64], dim: usize) -> Result<(), RasterError> {
    let norm: f64 = lambda.iter().map(|v| v * v).sum::<f64>().sqrt();
    if lambda.len() != dim || (norm - 1.0).abs() > 1e-12 {
        return Err(RasterError::Direction { dim });
    }
    Ok(())
}

/// Distance from `x ∈ Ω` to the first exit along `dir`, or `None` if the ray
/// leaves the bounding box while still inside the domain.
fn exit_distance(fiber: &Fiber<'_>, x: &[f64], dir: &[f64], step: f64) -> Option<f64> {
    let n = x.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    let at = |s: f64, p: &mut Vec<f64>| {
        for j in 0..n {
            p[j] = x[j] + s * dir[j];
        }
    };
    let mut i = 0usize;
    loop {
        let (s, next) = (i as f64 * step, (i + 1) as f64 * step);
        at(next, &mut p);
        let inside = fiber.contains(&p);
        if inside {
            at(s, &mut q);
            if let Some(frac) = fiber.slit_crossing(&q, &p) {
                return Some(s + frac * step);
            }
            if !fiber.is_inside_box(&p) {
                return None;
            }
            i += 1;
            continue;
        }
        let (mut lo, mut hi) = (s, next);
        let tol = step / 64.0;
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            at(mid, &mut p);
            if fiber.contains(&p) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        return Some(0.5 * (lo + hi));
    }
}

/// Upper bound on `exit_distance(.., step)` from the samples `k·factor·step`,
/// which the fine march also visits: the first one outside the domain, or
/// `+∞` once a sample leaves the box.
fn exit_bound(fiber: &Fiber<'_>, x: &[f64], dir: &[f64], step: f64, factor: usize) -> f64 {
    let mut p = vec![0.0; x.len()];
    let mut i = 0usize;
    loop {
        i += factor;
        let s = i as f64 * step;
        for (j, v) in p.iter_mut().enumerate() {
            *v = x[j] + s * dir[j];
        }
        if !fiber.is_inside_box(&p) {
            return f64::INFINITY;
        }
        if !fiber.contains(&p) {
            return s;
        }
    }
}

/// Longest chord in direction `lambda` through any seed of the raster, or
/// `None` when some ray escapes the bounding box inside the domain.
pub fn longest_chord(raster: &RasterDomain, lambda: &[f64], step: f64) -> Result<Option<Chord>, RasterError> {
    check_direction(lambda, raster.dim())?;
    if !(step > 0.0) {
        return Err(RasterError::Step);
    }
    if raster.is_empty() {
        return Err(RasterError::EmptyFiber);
    }
    let fiber = raster.fiber();
    let seeds = raster.chord_seeds();
    let back: Vec<f64> = lambda.iter().map(|v| -v).collect();
    let chord_through = |x: &[f64]| -> Option<Chord> {
        let fwd = exit_distance(&fiber, x, lambda, step)?;
        let bwd = exit_distance(&fiber, x, &back, step)?;
        let start = x.iter().zip(lambda).map(|(a, l)| a - bwd * l).collect();
        Some(Chord { start, direction: lambda.to_vec(), length: fwd + bwd })
    };
    // For coordinate directions many seeds share a line: march each line once
    // and skip seeds already covered by the previous chord on it.
    let chords: Vec<Option<Chord>> = match lambda.iter().position(|v| v.abs() == 1.0) {
        Some(axis) => {
            let sign = lambda[axis];
            let mut keyed: Vec<(Vec<u64>, f64, Vec<f64>)> = seeds
                .into_iter()
                .map(|s| {
                    let key = s.iter().enumerate().filter(|(j, _)| *j != axis).map(|(_, v)| v.to_bits()).collect();
                    (key, sign * s[axis], s)
                })
                .collect();
            keyed.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.partial_cmp(&y.1).unwrap()));
            let mut lines: Vec<&[(Vec<u64>, f64, Vec<f64>)]> = Vec::new();
            let mut i = 0;
            while i < keyed.len() {
                let mut j = i + 1;
                while j < keyed.len() && keyed[j].0 == keyed[i].0 {
                    j += 1;
                }
                lines.push(&keyed[i..j]);
                i = j;
            }
            lines
                .par_iter()
                .flat_map_iter(|line| {
                    let mut out = Vec::new();
                    let mut covered_to = f64::NEG_INFINITY;
                    for (_, pos, x) in line.iter() {
                        if *pos < covered_to {
                            continue;
                        }
                        match chord_through(x) {
                            Some(c) => {
                                covered_to = sign * c.start[axis] + c.length;
                                out.push(Some(c));
                            }
                            None => {
                                out.push(None);
                                break;
                            }
                        }
                    }
                    out
                })
                .collect()
        }
        None => {
            // Seeds are visited in order of a coarse upper bound on their chord,
            // and those whose bounds fall below the best chord so far are skipped.
            let bound = |x: &[f64], factor: usize| {
                exit_bound(&fiber, x, lambda, step, factor) + exit_bound(&fiber, x, &back, step, factor)
            };
            let coarse: Vec<f64> = seeds.par_iter().map(|x| bound(x, 64)).collect();
            let mut order: Vec<usize> = (0..seeds.len()).collect();
            order.sort_by(|&a, &b| coarse[b].total_cmp(&coarse[a]).then(a.cmp(&b)));
            let mut best: Option<(usize, Chord)> = None;
            for batch in order.chunks(1024) {
                let cutoff = best.as_ref().map_or(f64::NEG_INFINITY, |(_, c)| c.length);
                if coarse[batch[0]] < cutoff {
                    break;
                }
                let found: Vec<(usize, Option<Chord>)> = batch
                    .par_iter()
                    .filter(|&&i| coarse[i] >= cutoff && [16, 4].iter().all(|&f| bound(&seeds[i], f) >= cutoff))
                    .map(|&i| (i, chord_through(&seeds[i])))
                    .collect();
                for (i, c) in found {
                    let Some(c) = c else { return Ok(None) };
                    let better = best.as_ref().is_none_or(|(j, b)| c.length > b.length || (c.length == b.length && i < *j));
                    if better {
                        best = Some((i, c));
                    }
                }
            }
            return Ok(best.map(|(_, c)| c));
        }
    };
    let mut best: Option<Chord> = None;
    for c in chords {
        let Some(c) = c else { return Ok(None) };
        if best.as_ref().is_none_or(|b| c.length > b.length) {
            best = Some(c);
        }
    }
    Ok(best)
}

/// Directional thickness `|Ω_t|_λ` with the seeds of `raster`; `+∞` when the
/// fiber is not bounded in direction `lambda`.
pub fn thickness_of_raster(raster: &RasterDomain, lambda: &[f64], step: f64) -> Result<f64, RasterError> {
    Ok(longest_chord(raster, lambda, step)?.map_or(f64::INFINITY, |c| c.length))
}

/// Directional thickness of `Ω_t` using seeds from a raster of spacing `4·step`.
pub fn thickness(spec: &Arc<DomainSpec>, t: &[f64], lambda: &[f64], step: f64) -> Result<f64, RasterError> {
    if !(step > 0.0) {
        return Err(RasterError::Step);
    }
    let max_width = spec.bounding_box.iter().map(|iv| iv.width()).fold(0.0, f64::max);
    let resolution = ((max_width / (4.0 * step)).ceil() as usize).max(4);
    let raster = rasterize(spec, t, resolution)?;
    thickness_of_raster(&raster, lambda, step)
}
