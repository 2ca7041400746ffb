use std::sync::Arc;

use poincare_lab::cells::{cell_decompose_2d, merge_vertical, Cell, CellComplex2D, Label};
use poincare_lab::dsl::{parse_domain, DomainSpec};
use poincare_lab::harness::{param_grid, sweep, verify_lemma_bound, DirectionChoice, SweepConfig};
use poincare_lab::raster::rasterize;
use poincare_lab::tangent::{margin, sample_boundary};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(text: &str) -> Arc<DomainSpec> {
    Arc::new(parse_domain(text).unwrap())
}

const CUSP: &str = "dim 2\nparams t in [0.05,1]\nbox [0,1]x[0,1]\nset: x>0 and x<1 and y>0 and t*x^2 - y > 0";
const ANNULUS: &str = "dim 2\nbox [-1.5,1.5]x[-1.5,1.5]\nset: x^2+y^2<1 and x^2+y^2>0.25";
const TWO_DISKS: &str = "dim 2\nbox [-3,3]x[-1.5,1.5]\nset: (x+1.5)^2+y^2<1 or (x-1.5)^2+y^2<1";

fn bounds(c: &CellComplex2D, cell: &Cell, k: usize) -> (f64, f64) {
    match cell {
        Cell::Graph { values, .. } => (values[k], values[k]),
        Cell::Band { lower, upper, .. } => (
            lower.as_ref().map_or(c.y_range.0, |g| g[k]),
            upper.as_ref().map_or(c.y_range.1, |g| g[k]),
        ),
    }
}

#[test]
fn stacks_are_strictly_ordered_and_cover_the_column() {
    for text in [ANNULUS, TWO_DISKS, CUSP] {
        let s = spec(text);
        let c = cell_decompose_2d(&s, &s.default_params(), 16, &[]).unwrap();
        for col in &c.columns {
            for k in 0..col.abscissae.len() {
                let mut prev = c.y_range.0;
                for cell in &col.cells {
                    let (lo, hi) = bounds(&c, cell, k);
                    assert_eq!(lo, prev);
                    assert!(hi >= lo);
                    if cell.is_band() {
                        assert!(hi > lo);
                    }
                    prev = hi;
                }
                assert_eq!(prev, c.y_range.1);
            }
        }
    }
}

#[test]
fn random_points_fall_in_one_cell_with_matching_label() {
    for text in [ANNULUS, TWO_DISKS, CUSP] {
        let s = spec(text);
        let t = s.default_params();
        let c = cell_decompose_2d(&s, &t, 16, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let x = rng.gen_range(c.x_range.0..c.x_range.1);
            let y = rng.gen_range(c.y_range.0..c.y_range.1);
            let (ci, k) = c.locate(x, y).unwrap();
            let col = &c.columns[ci];
            assert!(col.lo < x && x < col.hi);
            let cell = &col.cells[k];
            assert!(cell.is_band());
            let member = s.member(&t, &[x, y]).unwrap();
            assert_eq!(member, cell.label() == Label::Inside, "{text} at ({x}, {y})");
        }
    }
}

#[test]
fn inside_bands_are_bounded_by_boundary_after_merging() {
    let s = spec("dim 2\nbox [-1.5,1.5]x[-1.5,1.5]\nset: x^2+y^2<1");
    let y = poincare_lab::poly::Poly::var(2, 1);
    let x = poincare_lab::poly::Poly::var(2, 0);
    let c = cell_decompose_2d(&s, &[], 16, &[y, x]).unwrap();
    let m = merge_vertical(&c);
    for col in m.columns.iter().filter(|c| !c.endpoint) {
        for (i, cell) in col.cells.iter().enumerate() {
            if cell.is_band() && cell.label() == Label::Inside {
                for j in [i.wrapping_sub(1), i + 1] {
                    if let Some(g) = col.cells.get(j) {
                        assert_eq!(g.label(), Label::BoundaryClosure);
                    }
                }
            }
        }
    }
    assert_eq!(m.inside_2d_count(), 2);
}

#[test]
fn band_heights_match_discrete_thickness() {
    let s = spec(CUSP);
    for t in [0.3, 0.7, 1.0] {
        let c = merge_vertical(&cell_decompose_2d(&s, &[t], 32, &[]).unwrap());
        let r = rasterize(&s, &[t], 512).unwrap();
        let d = r.thickness_discrete(1).unwrap();
        assert!((c.max_band_height() - d).abs() <= 3.0 * r.spacing(), "t={t}");
        let v = r.volume().unwrap();
        let tol = (0.03 * v).max(10.0 * r.spacing() * c.graph_length());
        assert!((c.band_volume() - v).abs() <= tol);
    }
}

#[test]
fn exports_are_well_formed() {
    let s = spec(ANNULUS);
    let c = merge_vertical(&cell_decompose_2d(&s, &[], 8, &[]).unwrap());
    let j = c.to_json();
    assert_eq!(j["c1_certified"], false);
    assert_eq!(j["criticals"].as_array().unwrap().len(), 4);
    let dot = c.to_dot();
    assert!(dot.starts_with("graph cells {") && dot.trim_end().ends_with('}'));
}

#[test]
fn empty_fiber_complex_merges_to_itself() {
    let s = spec("dim 2\nparams t in [-1,1]\nbox [-2,2]x[-2,2]\nset: x^2+y^2<t");
    let c = cell_decompose_2d(&s, &[-0.5], 8, &[]).unwrap();
    assert_eq!(c.inside_2d_count(), 0);
    assert_eq!(merge_vertical(&c).columns, c.columns);
}

#[test]
fn cusp_sweep_along_e2() {
    let s = spec(CUSP);
    let grid: Vec<Vec<f64>> = (1..=10).map(|k| vec![k as f64 / 10.0]).collect();
    let cfg = SweepConfig {
        resolution: 128,
        direction: DirectionChoice::Fixed(vec![0.0, 1.0]),
        samples: 512,
        ..SweepConfig::default()
    };
    let r = sweep(&s, &grid, &cfg).unwrap();
    assert!(r.all_pass && r.consistent());
    for rec in &r.records {
        let t = rec.t[0];
        assert!(rec.constant.unwrap() <= 2f64.sqrt() * t * (1.0 + rec.slack.unwrap()));
    }
    // |Ω_t|_{e2}/|Ω_t|^{1/2} = √(3t) is largest at t = 1.
    let k = r.sup_thickness_ratio.unwrap();
    assert!((k - 3f64.sqrt()).abs() < 0.05, "{k}");
    assert_eq!(r.sup_thickness_at, Some(vec![1.0]));
    // The boundary x = 1 is tangent to e2, so the lemma does not apply.
    assert!(verify_lemma_bound(&r, 2.0).is_err());
}

#[test]
fn sub_grid_sup_is_below_full_grid_sup() {
    let s = spec(CUSP);
    let cfg = SweepConfig {
        resolution: 64,
        direction: DirectionChoice::Fixed(vec![0.0, 1.0]),
        samples: 256,
        ..SweepConfig::default()
    };
    let full = sweep(&s, &param_grid(&s, &[7]).unwrap(), &cfg).unwrap();
    let sub = sweep(&s, &param_grid(&s, &[4]).unwrap(), &cfg).unwrap();
    assert!(sub.sup_constant_ratio.unwrap() <= full.sup_constant_ratio.unwrap());
}

#[test]
fn sweeps_are_reproducible() {
    let s = spec("dim 2\nparams t in [0.5,2]\nbox [-2,2]x[-2,2]\nset: x^2 + t^4*y^2 - t^2 < 0");
    let cfg = SweepConfig { resolution: 48, samples: 256, directions: 64, ..SweepConfig::default() };
    let g = param_grid(&s, &[3]).unwrap();
    let a = serde_json::to_string(&sweep(&s, &g, &cfg).unwrap()).unwrap();
    let b = serde_json::to_string(&sweep(&s, &g, &cfg).unwrap()).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn margin_is_one_lipschitz(a in 0.0f64..6.3, b in 0.0f64..6.3) {
        let s = spec(ANNULUS);
        let samples = sample_boundary(&s, &[], 256, 3).unwrap().samples;
        let (la, lb) = ([a.cos(), a.sin()], [b.cos(), b.sin()]);
        let dist = ((la[0] - lb[0]).powi(2) + (la[1] - lb[1]).powi(2)).sqrt();
        let diff = (margin(&samples, &la).unwrap() - margin(&samples, &lb).unwrap()).abs();
        prop_assert!(diff <= dist + 1e-12);
    }

    #[test]
    fn cusp_normals_follow_the_graph(t in 0.2f64..1.0) {
        let s = spec(CUSP);
        let samples = sample_boundary(&s, &[t], 512, 0).unwrap().samples;
        for b in samples.iter().filter(|b| b.atom == 3) {
            let x = b.point[0];
            let norm = (1.0 + 4.0 * t * t * x * x).sqrt();
            let expected = [2.0 * t * x / norm, -1.0 / norm];
            let sign = if b.normal[1] * expected[1] >= 0.0 { 1.0 } else { -1.0 };
            prop_assert!((b.normal[0] - sign * expected[0]).abs() < 1e-8);
            prop_assert!((b.normal[1] - sign * expected[1]).abs() < 1e-8);
        }
    }
}
