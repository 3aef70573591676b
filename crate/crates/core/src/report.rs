//! Structured results of inequality checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Relative spread tolerated between fitted constants at successive
/// refinement levels.
pub const REFINEMENT_TOLERANCE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementLevel {
    /// Largest grid spacing at this level.
    pub h: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub fitted_c: Option<f64>,
}

/// Left and right sides of one inequality instance with its fitted constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub id: String,
    /// Human-readable name of the inequality being checked.
    pub anchor: String,
    pub params: BTreeMap<String, f64>,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs`, or `None` when `rhs` vanishes.
    pub fitted_c: Option<f64>,
    pub refinement: Vec<RefinementLevel>,
    pub hypotheses: Vec<(String, bool)>,
    pub pass: bool,
    pub seed: Option<u64>,
    pub notes: Vec<String>,
}

pub fn fitted_constant(lhs: f64, rhs: f64) -> Option<f64> {
    if rhs > 0.0 && rhs.is_finite() && lhs.is_finite() {
        Some(lhs / rhs)
    } else {
        None
    }
}

/// Whether consecutive fitted constants agree within `tol` relative to the
/// coarser one. Degenerate levels count as stable only if both sides vanish.
pub fn refinement_stable(levels: &[RefinementLevel], tol: f64) -> bool {
    levels.windows(2).all(|w| match (w[0].fitted_c, w[1].fitted_c) {
        (Some(a), Some(b)) => (b - a).abs() <= tol * a.abs().max(f64::MIN_POSITIVE),
        (None, None) => w[0].lhs == 0.0 && w[1].lhs == 0.0,
        _ => false,
    })
}

impl VerificationReport {
    pub fn new(id: impl Into<String>, anchor: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        VerificationReport {
            id: id.into(),
            anchor: anchor.into(),
            params: BTreeMap::new(),
            lhs,
            rhs,
            fitted_c: fitted_constant(lhs, rhs),
            refinement: Vec::new(),
            hypotheses: Vec::new(),
            pass: false,
            seed: None,
            notes: Vec::new(),
        }
    }

    pub fn param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    pub fn hypothesis(&mut self, name: impl Into<String>, holds: bool) {
        self.hypotheses.push((name.into(), holds));
    }

    pub fn hypotheses_hold(&self) -> bool {
        self.hypotheses.iter().all(|(_, ok)| *ok)
    }

    pub fn push_level(&mut self, h: f64, lhs: f64, rhs: f64) {
        self.refinement.push(RefinementLevel {
            h,
            lhs,
            rhs,
            fitted_c: fitted_constant(lhs, rhs),
        });
    }

    pub fn refinement_stable(&self) -> bool {
        refinement_stable(&self.refinement, REFINEMENT_TOLERANCE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fitted_constant_is_ratio_or_degenerate() {
        assert_eq!(fitted_constant(2.0, 4.0), Some(0.5));
        assert_eq!(fitted_constant(0.0, 0.0), None);
        assert_eq!(fitted_constant(1.0, f64::INFINITY), None);
    }

    #[test]
    fn stability_window() {
        let mut r = VerificationReport::new("x", "y", 1.0, 1.0);
        r.push_level(0.1, 1.0, 1.0);
        r.push_level(0.05, 1.15, 1.0);
        assert!(r.refinement_stable());
        r.push_level(0.025, 1.5, 1.0);
        assert!(!r.refinement_stable());
    }

    #[test]
    fn serde_roundtrip() {
        let mut r = VerificationReport::new("id", "anchor", 1.0, 3.0)
            .param("theta", 0.5)
            .with_seed(3);
        r.hypothesis("h", true);
        let s = serde_json::to_string(&r).unwrap();
        let back: VerificationReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
