use kh_core::geometry::{q_minus, stack_cylinders, BoxCylinder, Cylinder, PhasePoint, PhaseRegion};
use proptest::prelude::*;

fn point(d: usize) -> impl Strategy<Value = PhasePoint> {
    (
        -2.0..2.0f64,
        prop::collection::vec(-2.0..2.0f64, d),
        prop::collection::vec(-2.0..2.0f64, d),
    )
        .prop_map(|(t, x, v)| PhasePoint { t, x, v })
}

fn rel_err(a: &PhasePoint, b: &PhasePoint) -> f64 {
    let scale = 1.0
        + a.max_abs_diff(&PhasePoint::origin(a.dim()))
            .max(b.max_abs_diff(&PhasePoint::origin(b.dim())));
    a.max_abs_diff(b) / scale
}

proptest! {
    #[test]
    fn associativity(a in point(2), b in point(2), c in point(2)) {
        let lhs = a.compose(&b).unwrap().compose(&c).unwrap();
        let rhs = a.compose(&b.compose(&c).unwrap()).unwrap();
        prop_assert!(rel_err(&lhs, &rhs) <= 1e-12);
    }

    #[test]
    fn inverse_is_two_sided(z in point(2)) {
        let id = PhasePoint::origin(2);
        prop_assert!(z.compose(&z.inverse()).unwrap().max_abs_diff(&id) <= 1e-14);
        prop_assert!(z.inverse().compose(&z).unwrap().max_abs_diff(&id) <= 1e-14);
    }

    #[test]
    fn scaling_roundtrip(z in point(1), r in 0.1..10.0f64) {
        let back = z.scale(r).unwrap().scale(1.0 / r).unwrap();
        prop_assert!(rel_err(&back, &z) <= 1e-13);
    }

    #[test]
    fn scaling_is_a_group_automorphism(a in point(1), b in point(1), r in 0.1..3.0f64) {
        let lhs = a.compose(&b).unwrap().scale(r).unwrap();
        let rhs = a.scale(r).unwrap().compose(&b.scale(r).unwrap()).unwrap();
        prop_assert!(rel_err(&lhs, &rhs) <= 1e-12);
    }

    #[test]
    fn membership_definitions_agree(c in point(2), z in point(2), r in 0.2..1.5f64) {
        let q = Cylinder::new(c, r).unwrap();
        // Points within rounding distance of the boundary can legitimately
        // land on different sides.
        let w = q.center.inverse().compose(&z).unwrap();
        let margin = [
            (w.t + r * r).abs(),
            w.t.abs(),
            (w.x.iter().map(|c| c * c).sum::<f64>().sqrt() - r.powi(3)).abs(),
            (w.v.iter().map(|c| c * c).sum::<f64>().sqrt() - r).abs(),
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
        prop_assume!(margin > 1e-12);
        prop_assert_eq!(q.contains(&z), q.contains_via_group(&z));
    }

    #[test]
    fn scaled_membership(z in point(1), r in 0.2..2.0f64) {
        let q1 = Cylinder::centered(1, 1.0).unwrap();
        let qr = Cylinder::centered(1, r).unwrap();
        let w = z.scale(1.0 / r).unwrap();
        let margin = [(w.t + 1.0).abs(), w.t.abs(), (w.x[0].abs() - 1.0).abs(), (w.v[0].abs() - 1.0).abs()]
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        prop_assume!(margin > 1e-12);
        prop_assert_eq!(qr.contains(&z), q1.contains(&w));
    }

    #[test]
    fn cylinder_inclusion_is_sound(
        a in point(1), b in point(1), ra in 0.1..1.0f64, rb in 0.1..2.0f64,
        samples in prop::collection::vec((-1.0..0.0f64, -1.0..1.0f64, -1.0..1.0f64), 64),
    ) {
        let qa = Cylinder::new(a, ra).unwrap();
        let qb = Cylinder::new(b, rb).unwrap();
        if qa.is_inside_cylinder(&qb) {
            for (s, y, w) in samples {
                let unit = PhasePoint::new1(s, y, w);
                let z = qa.map_from_unit(&unit).unwrap();
                if qa.contains(&z) {
                    prop_assert!(qb.contains(&z), "{z:?}");
                }
            }
        }
    }

    #[test]
    fn box_inclusion_is_sound(
        a in point(1), ra in 0.1..1.0f64,
        samples in prop::collection::vec((-1.0..0.0f64, -1.0..1.0f64, -1.0..1.0f64), 64),
    ) {
        let qa = Cylinder::new(a, ra).unwrap();
        let bx = BoxCylinder::centered(1, -2.0, 1.0, 2.5, 2.0).unwrap();
        if qa.is_inside_box(&bx) {
            for (s, y, w) in samples {
                let z = qa.map_from_unit(&PhasePoint::new1(s, y, w)).unwrap();
                if qa.contains(&z) {
                    prop_assert!(bx.contains(&z));
                }
            }
        }
        let bb = qa.bounding_box();
        let padded = BoxCylinder { x_radius: bb.x_radius * (1.0 + 1e-12), ..bb };
        prop_assert!(qa.is_inside_box(&padded));
    }

    #[test]
    fn stacking_conclusions(t_frac in 0.0..1.0f64, r_frac in 0.01..1.0f64, x_frac in -1.0..1.0f64, v_frac in -1.0..1.0f64) {
        let omega = 1e-2;
        let r = r_frac * omega;
        let v0 = v_frac * (omega - r);
        let t0 = -1.0 + r * r + t_frac * (omega * omega - r * r);
        let x0 = x_frac * (omega.powi(3) - r.powi(3)) * 0.5;
        let z0 = PhasePoint::new1(t0, x0, v0);
        let base = Cylinder::new(z0.clone(), r).unwrap();
        prop_assume!(base.is_inside_cylinder(&q_minus(1, omega).unwrap()));
        let seq = stack_cylinders(&z0, r, omega).unwrap();
        let c = seq.conclusions();
        prop_assert!(c.all_hold(), "{:?}", c);
        prop_assert!(seq.offsets[seq.n - 1] <= -t0 && -t0 < seq.offsets[seq.n]);
    }
}

#[test]
fn stacked_volume_matches_counting() {
    let base = Cylinder::centered(1, 0.5).unwrap();
    let s = base.stacked(2).unwrap();
    let bb = s.bounding_box();
    let n = 200;
    let mut hits = 0usize;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let t = bb.t_lo + (i as f64 + 0.5) / n as f64 * (bb.t_hi - bb.t_lo);
                let x = bb.x_center[0] - bb.x_radius + (j as f64 + 0.5) / n as f64 * 2.0 * bb.x_radius;
                let v = -bb.v_radius + (k as f64 + 0.5) / n as f64 * 2.0 * bb.v_radius;
                if s.contains_txv(t, &[x], &[v]) {
                    hits += 1;
                }
            }
        }
    }
    let est = hits as f64 / (n * n * n) as f64 * bb.volume();
    assert!((est - s.volume()).abs() / s.volume() < 0.02);
}
