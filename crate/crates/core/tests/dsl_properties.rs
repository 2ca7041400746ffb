use poincare_lab::dsl::{parse_domain, print, DomainSpec};
use poincare_lab::poly::rational_to_f64;
use proptest::prelude::*;

fn monomial() -> impl Strategy<Value = String> {
    (-5i32..=5, 0u32..3, 0u32..3).prop_map(|(c, a, b)| {
        let c = if c == 0 { 1 } else { c };
        format!("{c}*x^{a}*y^{b}")
    })
}

fn polynomial() -> impl Strategy<Value = String> {
    prop::collection::vec(monomial(), 1..4).prop_map(|ms| ms.join(" + "))
}

fn atom() -> impl Strategy<Value = String> {
    (polynomial(), 0..3usize, -3i32..=3).prop_map(|(p, r, k)| {
        let rel = ["<", ">", "!="][r];
        format!("{p} - ({k}) {rel} 0")
    })
}

fn formula() -> impl Strategy<Value = String> {
    let leaf = atom();
    leaf.prop_recursive(3, 8, 3, |inner| {
        (prop::collection::vec(inner, 2..3), any::<bool>()).prop_map(|(fs, and)| {
            let op = if and { " and " } else { " or " };
            format!("({})", fs.join(op))
        })
    })
}

fn spec_text() -> impl Strategy<Value = String> {
    formula()
        .prop_map(|f| format!("dim 2\nbox [-2,2]x[-1.5,2.5]\nset: {f}\n"))
        .prop_filter("atoms must not cancel to constants", |t| parse_domain(t).is_ok())
}

/// Bound on `|∇p|` over the box from the coefficients.
fn lipschitz(spec: &DomainSpec, atom: usize, radius: f64) -> f64 {
    let p = spec.atoms[atom].boundary_poly();
    let mut per_axis = [0.0f64; 2];
    for (m, c) in p.terms() {
        let c = rational_to_f64(c).abs();
        let deg: u32 = m.iter().take(2).sum();
        for (axis, slot) in per_axis.iter_mut().enumerate() {
            if m[axis] > 0 {
                *slot += c * m[axis] as f64 * radius.powi(deg as i32 - 1);
            }
        }
    }
    (per_axis[0].powi(2) + per_axis[1].powi(2)).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn print_parse_round_trip(text in spec_text()) {
        let a = parse_domain(&text).unwrap();
        let printed = print(&a);
        let b = parse_domain(&printed).unwrap();
        prop_assert_eq!(print(&b), printed);
        for i in 0..50 {
            let x = [-2.0 + 4.0 * ((i * 37 % 50) as f64 + 0.5) / 50.0, -1.5 + 4.0 * ((i * 11 % 50) as f64 + 0.25) / 50.0];
            prop_assert_eq!(a.member(&[], &x).unwrap(), b.member(&[], &x).unwrap());
        }
    }

    #[test]
    fn accepted_points_have_open_neighbourhoods(text in spec_text(), u in 0.0f64..1.0, v in 0.0f64..1.0) {
        let s = parse_domain(&text).unwrap();
        let x = [-2.0 + 4.0 * u, -1.5 + 4.0 * v];
        let fiber = s.fiber(&[]).unwrap();
        prop_assume!(fiber.contains(&x));
        let radius = 2.5;
        let mut delta = f64::INFINITY;
        for a in 0..s.atoms.len() {
            let value = fiber.boundary_value(a, &x).abs();
            delta = delta.min(value / (2.0 * lipschitz(&s, a, radius)));
        }
        prop_assume!(delta.is_finite() && delta > 0.0);
        for k in 0..8 {
            let ang = k as f64 * std::f64::consts::FRAC_PI_4;
            let y = [x[0] + delta * ang.cos(), x[1] + delta * ang.sin()];
            prop_assert!(fiber.contains(&y));
        }
    }
}

#[test]
fn member_is_pure() {
    let s = parse_domain("dim 2\nparams t in [0.05,1]\nbox [0,1]x[0,1]\nset: x>0 and x<1 and y>0 and t*x^2 - y > 0").unwrap();
    assert!(s.member(&[0.5], &[0.5, 0.1]).unwrap());
    assert!(s.member(&[0.5], &[0.5, 0.1]).unwrap());
    assert!(!s.member(&[0.5], &[0.5, 0.2]).unwrap());
}
