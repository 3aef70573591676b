//! The convex profile `G` and the log-transform `g = G(ε + f)`.
//!
//! `G(t) = -ln t - (1 - t) - (1 - t)²/2` on `(0, 1]` and `0` beyond.

use serde::{Deserialize, Serialize};

use crate::fields::ScalarField;
use crate::geometry::{BoxCylinder, PhaseRegion};
use crate::report::VerificationReport;
use crate::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-2;

/// Values of `ε` tried when a pipeline needs "ε small enough".
pub const EPSILON_SWEEP: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

fn check_arg(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::param("t", format!("G is defined for t > 0, got {t}")))
    }
}

fn g_raw(t: f64) -> f64 {
    if t >= 1.0 {
        0.0
    } else {
        let u = 1.0 - t;
        // -ln(1 - u) - u - u²/2 cancels badly near u = 0; use the series there.
        if u < 1e-3 {
            u * u * u * (1.0 / 3.0 + u * (0.25 + u * (0.2 + u / 6.0)))
        } else {
            -t.ln() - u - 0.5 * u * u
        }
    }
}

fn g_prime_raw(t: f64) -> f64 {
    if t >= 1.0 {
        0.0
    } else {
        -(1.0 - t) * (1.0 - t) / t
    }
}

fn g_second_raw(t: f64) -> f64 {
    if t >= 1.0 {
        0.0
    } else {
        (1.0 - t * t) / (t * t)
    }
}

pub fn g_eval(t: f64) -> Result<f64> {
    check_arg(t).map(|_| g_raw(t))
}

pub fn g_prime(t: f64) -> Result<f64> {
    check_arg(t).map(|_| g_prime_raw(t))
}

pub fn g_second(t: f64) -> Result<f64> {
    check_arg(t).map(|_| g_second_raw(t))
}

/// `G'' - (G')²` in the factored form `(1 - t)[(1 + t) - (1 - t)³] / t²`.
pub fn convexity_margin(t: f64) -> Result<f64> {
    check_arg(t)?;
    if t >= 1.0 {
        return Ok(0.0);
    }
    let u = 1.0 - t;
    Ok(u * ((1.0 + t) - u * u * u) / (t * t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexLogTransform {
    pub epsilon: f64,
}

impl ConvexLogTransform {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 0.25) {
            return Err(Error::param("epsilon", format!("need ε ∈ (0, 1/4], got {epsilon}")));
        }
        Ok(ConvexLogTransform { epsilon })
    }

    /// `G(ε)`, the largest value `g` can take.
    pub fn ceiling(&self) -> f64 {
        g_raw(self.epsilon)
    }

    /// `G(ε + f)` at one node.
    pub fn apply(&self, f: f64) -> f64 {
        g_raw(self.epsilon + f)
    }

    /// `G'(ε + f)`.
    pub fn slope(&self, f: f64) -> f64 {
        g_prime_raw(self.epsilon + f)
    }
}

/// `g = G(ε + f)` nodewise.
pub fn log_transform(f: &ScalarField, epsilon: f64) -> Result<ScalarField> {
    let tr = ConvexLogTransform::new(epsilon)?;
    if let Some((i, v)) = f.values.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        let (t, x, vel) = f.grid.coords(i);
        return Err(Error::param(
            "f",
            format!("log-transform needs f ≥ 0, got {v} at t = {t}, x = {x:?}, v = {vel:?}"),
        ));
    }
    Ok(f.map(|v| tr.apply(v)))
}

fn blend_down(r: f64, inner: f64, outer: f64) -> f64 {
    if r <= inner {
        1.0
    } else if r >= outer {
        0.0
    } else {
        let u = (r - inner) / (outer - inner);
        1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
    }
}

/// Product cut-off equal to 1 on `q_int` and vanishing at the lateral and
/// bottom boundary of `q_ext`.
pub fn box_cutoff(q_int: &BoxCylinder, q_ext: &BoxCylinder, t: f64, x: &[f64], v: &[f64]) -> f64 {
    if t <= q_ext.t_lo {
        return 0.0;
    }
    let ft = 1.0 - blend_down(t - q_ext.t_lo, 0.0, q_int.t_lo - q_ext.t_lo);
    let rx = crate::geometry::dist(x, &q_int.x_center);
    let rv = crate::geometry::dist(v, &q_int.v_center);
    let fx = blend_down(
        rx,
        q_int.x_radius,
        q_int.x_radius + (q_ext.x_radius - q_int.x_radius) * 0.999,
    );
    let fv = blend_down(
        rv,
        q_int.v_radius,
        q_int.v_radius + (q_ext.v_radius - q_int.v_radius) * 0.999,
    );
    ft * fx * fv
}

/// `λ/2 ∫_{Q_int} |∇v g|² ≤ C (∫_{Q_ext} g + 1 + ε⁻¹ ‖S‖_{L∞(Q_ext)})`.
///
/// The left side is also reported with the weight `Ψ²` of a cut-off between
/// the two boxes, as `weighted_lhs`.
pub fn energy_estimate_check(
    g: &ScalarField,
    q_int: &BoxCylinder,
    q_ext: &BoxCylinder,
    epsilon: f64,
    s_sup: f64,
    lambda: f64,
) -> Result<VerificationReport> {
    ConvexLogTransform::new(epsilon)?;
    if !crate::fpsolver::strictly_nested(q_int, q_ext) {
        return Err(Error::param("cylinders", "Q_int must sit strictly inside Q_ext"));
    }
    if !(s_sup >= 0.0 && lambda > 0.0) {
        return Err(Error::param("S, λ", "need ‖S‖ ≥ 0 and λ > 0"));
    }
    let grid = &g.grid;
    let grad = g.grad_v_norm();
    let vol = grid.cell_volume();
    let ext_cells = grid.cells_in(q_ext);
    if ext_cells.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let (mut lhs, mut weighted, mut mass) = (0.0, 0.0, 0.0);
    for &i in &ext_cells {
        let (t, x, v) = grid.coords(i);
        let g2 = grad.values[i] * grad.values[i];
        mass += g.values[i];
        if q_int.contains_txv(t, x, v) {
            lhs += g2;
        }
        let psi = box_cutoff(q_int, q_ext, t, x, v);
        weighted += g2 * psi * psi;
    }
    let lhs = 0.5 * lambda * lhs * vol;
    let weighted = 0.5 * lambda * weighted * vol;
    let mass = mass * vol;
    let source_term = s_sup / epsilon;
    let rhs = mass + 1.0 + source_term;
    let mut r = VerificationReport::new("energy-g", "gradient of g controlled by its mass", lhs, rhs)
        .param("epsilon", epsilon)
        .param("lambda", lambda)
        .param("S_sup", s_sup)
        .param("mass_g", mass)
        .param("source_term", source_term)
        .param("weighted_lhs", weighted);
    r.note("left side is quadratic in the velocity gradient of g, right side linear in its mass");
    r.pass = r.fitted_c.is_some_and(f64::is_finite);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Grid;
    use std::sync::Arc;

    #[test]
    fn closed_form_values() {
        assert_eq!(g_eval(1.0).unwrap(), 0.0);
        assert_eq!(g_prime(1.0).unwrap(), 0.0);
        assert_eq!(g_second(1.0).unwrap(), 0.0);
        // ln 4 - 3/4 - 9/32
        assert!((g_eval(0.25).unwrap() - 0.355_044).abs() < 1e-6);
        assert!((g_prime(0.5).unwrap() + 0.5).abs() < 1e-15);
        assert!(g_eval(0.0).is_err());
        assert!(g_prime(-1.0).is_err());
    }

    #[test]
    fn series_branch_is_continuous() {
        for &t in &[0.999, 0.9990001, 0.99899999] {
            let u: f64 = 1.0 - t;
            let direct = -t.ln() - u - 0.5 * u * u;
            assert!((g_raw(t) - direct).abs() < 1e-14);
        }
        assert!(g_raw(1.0 - 1e-6) > 0.0);
    }

    #[test]
    fn margin_identity_matches_derivatives() {
        for k in 1..200 {
            let t = k as f64 / 200.0;
            let direct = g_second_raw(t) - g_prime_raw(t).powi(2);
            let factored = convexity_margin(t).unwrap();
            assert!((direct - factored).abs() <= 1e-9 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn derivatives_match_differences() {
        let h = 1e-6;
        for &t in &[0.05, 0.3, 0.7, 0.95] {
            let d1 = (g_raw(t + h) - g_raw(t - h)) / (2.0 * h);
            let d2 = (g_prime_raw(t + h) - g_prime_raw(t - h)) / (2.0 * h);
            assert!((d1 - g_prime_raw(t)).abs() < 1e-6 * (1.0 + d1.abs()));
            assert!((d2 - g_second_raw(t)).abs() < 1e-5 * (1.0 + d2.abs()));
        }
    }

    fn grid() -> Arc<Grid> {
        Arc::new(Grid::new(BoxCylinder::centered(1, -1.0, 0.0, 1.0, 1.0).unwrap(), 8, 8, 8).unwrap())
    }

    #[test]
    fn transform_examples() {
        let g = grid();
        let big = log_transform(&ScalarField::constant(g.clone(), 1.0), 0.1).unwrap();
        assert!(big.values.iter().all(|&v| v == 0.0));
        let zero = log_transform(&ScalarField::zeros(g.clone()), 0.1).unwrap();
        assert!(zero.values.iter().all(|&v| (v - 0.997_585).abs() < 1e-6));
        let mut neg = ScalarField::zeros(g);
        neg.values[3] = -1e-3;
        assert!(log_transform(&neg, 0.1).is_err());
        assert!(ConvexLogTransform::new(0.3).is_err());
    }

    #[test]
    fn energy_trivial_and_linear_in_source() {
        let g = grid();
        let q_ext = g.domain.clone();
        let q_int = BoxCylinder::centered(1, -0.5, 0.0, 0.5, 0.5).unwrap();
        let zero = log_transform(&ScalarField::constant(g, 2.0), 0.1).unwrap();
        let r = energy_estimate_check(&zero, &q_int, &q_ext, 0.1, 0.0, 1.0).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert_eq!(r.rhs, 1.0);
        assert!(r.pass);
        let a = energy_estimate_check(&zero, &q_int, &q_ext, 0.1, 1.0, 1.0).unwrap();
        let b = energy_estimate_check(&zero, &q_int, &q_ext, 0.05, 1.0, 1.0).unwrap();
        assert_eq!(b.params["source_term"], 2.0 * a.params["source_term"]);
    }

    #[test]
    fn cutoff_equals_one_inside_and_zero_at_bottom() {
        let q_ext = BoxCylinder::centered(1, -1.0, 0.0, 1.0, 1.0).unwrap();
        let q_int = BoxCylinder::centered(1, -0.5, 0.0, 0.5, 0.5).unwrap();
        assert_eq!(box_cutoff(&q_int, &q_ext, -0.2, &[0.1], &[0.4]), 1.0);
        assert_eq!(box_cutoff(&q_int, &q_ext, -1.0, &[0.0], &[0.0]), 0.0);
        assert_eq!(box_cutoff(&q_int, &q_ext, -0.2, &[0.9995], &[0.0]), 0.0);
    }
}
