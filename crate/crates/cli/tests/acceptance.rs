//! Acceptance gate: one line per criterion, then a single assertion.

use std::f64::consts::{PI, SQRT_2};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use poincare_lab::cells::{cell_decompose_2d, merge_vertical};
use poincare_lab::dsl::{parse_domain, DomainSpec};
use poincare_lab::harness::{sweep, verify_lemma_bound, verify_main_uniform, DirectionChoice, SweepConfig};
use poincare_lab::raster::{rasterize, thickness};
use poincare_lab::sobolev::{
    discrete_p1_exact, poincare_p2, trace_ratio_battery, verify_theorem_p1, Battery, SolverConfig,
};
use poincare_lab::tangent::{candidate_directions, margin, sample_boundary};

fn corpus(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(name)
}

fn spec(name: &str) -> Arc<DomainSpec> {
    Arc::new(parse_domain(&fs::read_to_string(corpus(name)).unwrap()).unwrap())
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> (T, Duration) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let start = Instant::now();
        let out = f();
        (out, start.elapsed())
    })
}

fn eigenvalue_targets() -> Verdict {
    let j01 = 2.404_825_557_695_773;
    let cases = [
        ("interval.dom", 2048, 1.0 / PI, 0.01),
        ("square.dom", 512, 1.0 / (PI * SQRT_2), 0.01),
        ("disk.dom", 512, 1.0 / j01, 0.02),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, res, target, rel) in cases {
        let s = spec(name);
        let (c, took) = single_threaded(|| {
            let r = rasterize(&s, &[], res).unwrap();
            poincare_p2(&r, 1e-8).unwrap().constant
        });
        let err = (c - target).abs() / target;
        let ok = err <= rel && took.as_secs_f64() <= 60.0;
        pass &= ok;
        parts.push(format!("{name} C2={c:.5} err={:.3}% {:.1}s", 100.0 * err, took.as_secs_f64()));
    }
    verdict(pass, parts.join(", "))
}

fn theorem_fibers() -> Vec<(String, Arc<DomainSpec>, Vec<f64>)> {
    let mut out = Vec::new();
    for name in ["square.dom", "disk.dom", "annulus.dom", "slit_disk.dom"] {
        out.push((name.to_string(), spec(name), vec![]));
    }
    for t in [0.1, 0.5, 1.0] {
        out.push((format!("cusp.dom t={t}"), spec("cusp.dom"), vec![t]));
    }
    out
}

fn theorem_per_fiber() -> Verdict {
    let cfg = SolverConfig::default();
    let mut failures = Vec::new();
    let mut checks = 0;
    let mut worst: f64 = 0.0;
    for (name, s, t) in theorem_fibers() {
        let r = rasterize(&s, &t, 96).unwrap();
        for p in [1.0, 2.0, 3.0] {
            for axis in 0..2 {
                let mut lambda = vec![0.0; 2];
                lambda[axis] = 1.0;
                let rec = verify_theorem_p1(&r, p, &lambda, &cfg).unwrap();
                checks += 1;
                worst = worst.max(rec.value / (rec.bound * (1.0 + rec.slack)));
                if !rec.pass || rec.pass != rec.recomputed_pass() {
                    failures.push(format!("{name} p={p} e{}", axis + 1));
                }
            }
        }
    }
    verdict(
        failures.is_empty(),
        format!("{checks} checks, worst C_p/(B(1+eta h)) = {worst:.3}, failures: {failures:?}"),
    )
}

fn discrete_exact() -> Verdict {
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for (name, s, t) in theorem_fibers() {
        let r = rasterize(&s, &t, 128).unwrap();
        for p in [1.0, 1.5, 2.0, 4.0] {
            for axis in 0..2 {
                match discrete_p1_exact(&r, axis, p, 100, 0) {
                    Ok(rec) => {
                        worst = worst.max(rec.value);
                        checks += 1;
                        if !(rec.value <= 1.0) {
                            failures.push(format!("{name} p={p} axis={axis}"));
                        }
                    }
                    Err(e) => failures.push(format!("{name} p={p} axis={axis}: {e}")),
                }
            }
        }
    }
    verdict(failures.is_empty(), format!("{checks} checks x 100 fields, worst ratio {worst:.4}, failures: {failures:?}"))
}

fn thickness_oracles() -> Verdict {
    let disk = spec("disk.dom");
    let h_disk = 3.0 / 256.0;
    let mut worst_disk: f64 = 0.0;
    for k in 0..12 {
        let a = 0.37 + k as f64 * PI / 12.0;
        let w = thickness(&disk, &[], &[a.cos(), a.sin()], h_disk / 4.0).unwrap();
        worst_disk = worst_disk.max((w - 2.0).abs());
    }
    let annulus = spec("annulus.dom");
    let wa = thickness(&annulus, &[], &[1.0, 0.0], h_disk / 4.0).unwrap();
    let err_a = (wa - 3f64.sqrt()).abs();
    let cusp = spec("cusp.dom");
    let h = 1.0 / 512.0;
    let mut worst_cusp: f64 = 0.0;
    for t in [0.05, 0.1, 0.3, 0.5, 0.75, 1.0] {
        let w = thickness(&cusp, &[t], &[0.0, 1.0], h / 4.0).unwrap();
        worst_cusp = worst_cusp.max((w - t).abs());
    }
    verdict(
        worst_disk <= 1e-3 && err_a <= 1e-2 && worst_cusp <= 2.0 * h,
        format!("disk |w-2| <= {worst_disk:.2e}, annulus e1 |w-sqrt3| = {err_a:.2e}, cusp e2 |w-t| <= {worst_cusp:.2e} (2h = {:.2e})", 2.0 * h),
    )
}

fn regular_directions() -> Verdict {
    let circle = spec("circle.dom");
    let samples = sample_boundary(&circle, &[], 4096, 0).unwrap();
    let best = candidate_directions(2, 512)
        .iter()
        .map(|l| margin(&samples.samples, l).unwrap())
        .fold(0.0, f64::max);
    let cusp = spec("cusp.dom");
    let s = sample_boundary(&cusp, &[1.0], 4096, 0).unwrap();
    let graph: Vec<_> = s
        .samples
        .into_iter()
        .filter(|b| b.atom == 3 && b.point[0] > 0.0 && b.point[0] < 1.0)
        .collect();
    let m = margin(&graph, &[0.0, 1.0]).unwrap();
    let target = 1.0 / 5f64.sqrt();
    verdict(
        best < 1e-2 && (m - target).abs() <= 1e-3,
        format!("circle max margin over 512 directions {best:.2e}; cusp graph e2 margin {m:.5} (1/sqrt5 = {target:.5})"),
    )
}

fn lemma_check() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["cusp.dom", "ellipse.dom"] {
        let s = spec(name);
        let grid: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                let iv = s.param_box[0];
                vec![iv.lo + iv.width() * i as f64 / 4.0]
            })
            .collect();
        let cfg = SweepConfig { resolution: 128, direction: DirectionChoice::Auto, ..SweepConfig::default() };
        let report = sweep(&s, &grid, &cfg).unwrap();
        match verify_lemma_bound(&report, f64::INFINITY) {
            Ok(l) => {
                pass &= l.within_k_lemma && report.consistent();
                parts.push(format!(
                    "{name} alpha={:.4} K*={:.4} K_lemma={:.4}",
                    l.alpha, l.k_star, l.k_lemma
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    verdict(pass, parts.join("; "))
}

fn uniform_trend() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["ellipse.dom", "cusp.dom"] {
        let s = spec(name);
        let iv = s.param_box[0];
        let grid: Vec<Vec<f64>> = (0..5).map(|i| vec![iv.lo + iv.width() * i as f64 / 4.0]).collect();
        let reports: Vec<_> = [256, 512]
            .iter()
            .map(|&res| {
                let cfg = SweepConfig {
                    resolution: res,
                    direction: DirectionChoice::Fixed(vec![0.0, 1.0]),
                    samples: 512,
                    ..SweepConfig::default()
                };
                sweep(&s, &grid, &cfg).unwrap()
            })
            .collect();
        let trend = verify_main_uniform(&reports).unwrap();
        let ok = trend.pass && trend.relative_change.abs() <= 0.10;
        pass &= ok;
        parts.push(format!(
            "{name} sup C2/vol^(1/2): {:.5} -> {:.5} ({:+.2}%)",
            trend.constants[0],
            trend.constants[1],
            100.0 * trend.relative_change
        ));
    }
    verdict(pass, parts.join("; "))
}

fn cell_counts() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, expected) in [("disk.dom", 1), ("two_disks.dom", 2), ("annulus.dom", 4)] {
        let s = spec(name);
        let c = cell_decompose_2d(&s, &[], 32, &[]).unwrap();
        let merged = merge_vertical(&c);
        let count = merged.inside_2d_count();
        let res = 512;
        let r = rasterize(&s, &[], res).unwrap();
        let rv = r.volume().unwrap();
        let bv = c.band_volume();
        let tol = (0.03 * rv).max(10.0 * r.spacing() * c.graph_length());
        let ok = count == expected && (bv - rv).abs() <= tol;
        pass &= ok;
        parts.push(format!("{name} cells={count} (want {expected}) band vol {bv:.4} vs raster {rv:.4}"));
    }
    verdict(pass, parts.join("; "))
}

fn trace_battery() -> Verdict {
    let s = spec("disk.dom");
    let r = rasterize(&s, &[], 256).unwrap();
    let poly = trace_ratio_battery(&r, 2.0, Battery::Polynomial).unwrap();
    let constant = poly.entries.iter().find(|e| e.name == "1").unwrap().ratio;
    let c_ok = (constant - SQRT_2).abs() <= 0.03 * SQRT_2;
    let bumps = trace_ratio_battery(&r, 2.0, Battery::Bump).unwrap();
    let worst_bump = bumps
        .entries
        .iter()
        .map(|e| e.boundary_norm / e.interior_norm)
        .fold(0.0, f64::max);
    let trig = trace_ratio_battery(&r, 2.0, Battery::Trigonometric).unwrap();
    let stable = poly.stable && trig.stable;
    verdict(
        c_ok && worst_bump <= 1e-3 && stable,
        format!(
            "constant ratio {constant:.4} (sqrt2 = {SQRT_2:.4}); bump boundary/interior <= {worst_bump:.1e}; sup ratio {:.4}->{:.4} (poly), {:.4}->{:.4} (trig)",
            poly.sup_ratio, poly.refined_sup_ratio, trig.sup_ratio, trig.refined_sup_ratio
        ),
    )
}

fn run_cli(args: &[String], out: &Path) -> i32 {
    let mut argv = vec!["poincare-lab".to_string()];
    argv.extend(args.iter().cloned());
    argv.extend(["--seed", "0", "--jobs", "1", "--out"].map(String::from));
    argv.push(out.display().to_string());
    poincare_lab_cli::run(argv)
}

fn determinism() -> Verdict {
    let c = |n: &str| corpus(n).display().to_string();
    let commands: Vec<Vec<String>> = vec![
        vec!["check".into(), "--spec".into(), c("cusp.dom"), "--t".into(), "0.5".into(), "--res".into(), "64".into(), "--p".into(), "1.5".into()],
        vec!["sweep".into(), "--spec".into(), c("cusp.dom"), "--grid".into(), "3".into(), "--res".into(), "64".into(), "--samples".into(), "512".into()],
        vec!["lemma".into(), "--spec".into(), c("ellipse.dom"), "--grid".into(), "3".into(), "--res".into(), "64".into(), "--samples".into(), "512".into()],
        vec!["uniform".into(), "--spec".into(), c("cusp.dom"), "--grid".into(), "2".into(), "--res".into(), "32,64".into(), "--dir".into(), "e2".into()],
        vec!["thickness".into(), "--spec".into(), c("annulus.dom"), "--dir".into(), "0.6,0.8".into()],
        vec!["regdir".into(), "--spec".into(), c("cusp.dom"), "--samples".into(), "512".into(), "--dirs".into(), "128".into()],
        vec!["cells".into(), "--spec".into(), c("annulus.dom")],
        vec!["trace".into(), "--spec".into(), c("slit_disk.dom"), "--res".into(), "64".into(), "--battery".into(), "bump".into()],
        vec!["raster".into(), "--spec".into(), c("slit_disk.dom"), "--res".into(), "64".into()],
    ];
    let tmp = tempfile::tempdir().unwrap();
    let mut mismatched = Vec::new();
    for (i, args) in commands.iter().enumerate() {
        let a = tmp.path().join(format!("{i}a"));
        let b = tmp.path().join(format!("{i}b"));
        let ca = run_cli(args, &a);
        let cb = run_cli(args, &b);
        let mut same = ca == cb;
        for entry in fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            same &= fs::read(a.join(&name)).ok() == fs::read(b.join(&name)).ok();
        }
        same &= fs::read_dir(&a).unwrap().count() == fs::read_dir(&b).unwrap().count();
        if !same {
            mismatched.push(args[0].clone());
        }
    }
    verdict(mismatched.is_empty(), format!("{} commands run twice, differing: {mismatched:?}", commands.len()))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("eigenvalue targets", eigenvalue_targets),
        ("theorem bound per fiber", theorem_per_fiber),
        ("exact discrete inequality", discrete_exact),
        ("thickness oracles", thickness_oracles),
        ("regular directions", regular_directions),
        ("lemma check", lemma_check),
        ("uniform bound trend", uniform_trend),
        ("cell decomposition", cell_counts),
        ("trace battery", trace_battery),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = f();
        println!(
            "[{}] criterion {:>2} {name}: {} ({:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail,
            start.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
