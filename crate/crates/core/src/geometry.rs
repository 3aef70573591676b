//! Phase-space geometry for kinetic equations.
//!
//! Points are `z = (t, x, v)` with `x, v` in `R^d`. The Galilean group law
//! `z1 ∘ z2 = (t1 + t2, x1 + x2 + t2 v1, v1 + v2)` and the kinetic scaling
//! `S_r(t, x, v) = (r² t, r³ x, r v)` generate the slanted cylinders
//! `Q_r(z0) = z0 ∘ S_r(Q_1)`. Everything here is closed form; inclusions
//! between cylinders are decided from their parameters, never by sampling.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// `|a + s b|` without allocating.
pub(crate) fn norm_affine(a: &[f64], s: f64, b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(ai, bi)| {
            let c = ai + s * bi;
            c * c
        })
        .sum::<f64>()
        .sqrt()
}

/// `|a - b|` without allocating.
pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    norm_affine(a, -1.0, b)
}

/// Lebesgue measure of a Euclidean ball of the given radius in `R^d`.
pub fn ball_volume(d: usize, radius: f64) -> f64 {
    // V_0 = 1, V_1 = 2, V_d = 2π/d V_{d-2}
    let unit = if d.is_multiple_of(2) {
        (1..=d / 2).fold(1.0, |acc, k| acc * std::f64::consts::PI / k as f64)
    } else {
        let mut acc = 2.0;
        let mut k = 3;
        while k <= d {
            acc *= 2.0 * std::f64::consts::PI / k as f64;
            k += 2;
        }
        acc
    };
    unit * radius.powi(d as i32)
}

/// A point `(t, x, v)` of `R^{1+2d}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhasePoint {
    pub fn new(t: f64, x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::param("d", "dimension must be at least 1"));
        }
        if x.len() != v.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: v.len(),
            });
        }
        let p = PhasePoint { t, x, v };
        if !p.is_finite() {
            return Err(Error::NonFinite("phase point"));
        }
        Ok(p)
    }

    /// Convenience constructor for `d = 1`.
    pub fn new1(t: f64, x: f64, v: f64) -> Self {
        PhasePoint {
            t,
            x: vec![x],
            v: vec![v],
        }
    }

    pub fn origin(d: usize) -> Self {
        PhasePoint {
            t: 0.0,
            x: vec![0.0; d],
            v: vec![0.0; d],
        }
    }

    /// The pure time translation `(tau, 0, 0)`.
    pub fn time_shift(d: usize, tau: f64) -> Self {
        PhasePoint {
            t: tau,
            x: vec![0.0; d],
            v: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.x.iter().chain(&self.v).all(|c| c.is_finite())
    }

    fn check_dim(&self, other: &PhasePoint) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(())
    }

    /// Group product `self ∘ other`.
    pub fn compose(&self, other: &PhasePoint) -> Result<PhasePoint> {
        self.check_dim(other)?;
        Ok(PhasePoint {
            t: self.t + other.t,
            x: self
                .x
                .iter()
                .zip(&other.x)
                .zip(&self.v)
                .map(|((x1, x2), v1)| x1 + x2 + other.t * v1)
                .collect(),
            v: self.v.iter().zip(&other.v).map(|(a, b)| a + b).collect(),
        })
    }

    /// Group inverse `(-t, -x + t v, -v)`.
    pub fn inverse(&self) -> PhasePoint {
        PhasePoint {
            t: -self.t,
            x: self.x.iter().zip(&self.v).map(|(x, v)| -x + self.t * v).collect(),
            v: self.v.iter().map(|v| -v).collect(),
        }
    }

    /// Kinetic scaling `S_r(z) = (r² t, r³ x, r v)`.
    pub fn scale(&self, r: f64) -> Result<PhasePoint> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::param("r", format!("scaling factor must be positive, got {r}")));
        }
        let r3 = r * r * r;
        Ok(PhasePoint {
            t: r * r * self.t,
            x: self.x.iter().map(|x| r3 * x).collect(),
            v: self.v.iter().map(|v| r * v).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &PhasePoint) -> f64 {
        let mut m = (self.t - other.t).abs();
        for (a, b) in self.x.iter().zip(&other.x).chain(self.v.iter().zip(&other.v)) {
            m = m.max((a - b).abs());
        }
        m
    }
}

/// Anything with a membership predicate in phase space.
pub trait PhaseRegion: Sync {
    fn dim(&self) -> usize;

    fn contains_txv(&self, t: f64, x: &[f64], v: &[f64]) -> bool;

    fn contains(&self, z: &PhasePoint) -> bool {
        self.contains_txv(z.t, &z.x, &z.v)
    }

    /// An axis-aligned cylinder containing the region.
    fn bounding_box(&self) -> BoxCylinder;
}

/// Axis-aligned cylinder `(t_lo, t_hi] × B(x_center, x_radius) × B(v_center, v_radius)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxCylinder {
    pub t_lo: f64,
    pub t_hi: f64,
    pub x_center: Vec<f64>,
    pub x_radius: f64,
    pub v_center: Vec<f64>,
    pub v_radius: f64,
}

impl BoxCylinder {
    pub fn new(
        t_lo: f64,
        t_hi: f64,
        x_center: Vec<f64>,
        x_radius: f64,
        v_center: Vec<f64>,
        v_radius: f64,
    ) -> Result<Self> {
        if !(t_lo < t_hi) {
            return Err(Error::param(
                "time interval",
                format!("need a < b, got ({t_lo}, {t_hi}]"),
            ));
        }
        if !(x_radius > 0.0 && v_radius > 0.0) {
            return Err(Error::param("radius", "ball radii must be positive"));
        }
        if x_center.len() != v_center.len() || x_center.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: x_center.len(),
                found: v_center.len(),
            });
        }
        Ok(BoxCylinder {
            t_lo,
            t_hi,
            x_center,
            x_radius,
            v_center,
            v_radius,
        })
    }

    /// Cylinder centered at the origin in `x` and `v`.
    pub fn centered(d: usize, t_lo: f64, t_hi: f64, x_radius: f64, v_radius: f64) -> Result<Self> {
        Self::new(t_lo, t_hi, vec![0.0; d], x_radius, vec![0.0; d], v_radius)
    }

    pub fn volume(&self) -> f64 {
        let d = self.dim();
        (self.t_hi - self.t_lo) * ball_volume(d, self.x_radius) * ball_volume(d, self.v_radius)
    }

    /// `self ⊂ other`.
    pub fn is_inside_box(&self, other: &BoxCylinder) -> bool {
        self.t_lo >= other.t_lo
            && self.t_hi <= other.t_hi
            && dist(&self.x_center, &other.x_center) + self.x_radius <= other.x_radius
            && dist(&self.v_center, &other.v_center) + self.v_radius <= other.v_radius
    }

    /// `self ⊂ q`, decided on the slanted defining functional of `q`.
    pub fn is_inside_cylinder(&self, q: &Cylinder) -> bool {
        let z = &q.center;
        let r = q.r;
        if !(self.t_lo >= z.t - r * r && self.t_hi <= z.t) {
            return false;
        }
        if dist(&self.v_center, &z.v) + self.v_radius > r {
            return false;
        }
        // x - x0 - (t - t0) v0 is affine in t: its extremes sit at the ends
        // of the time interval.
        let x_extent = [self.t_lo, self.t_hi]
            .iter()
            .map(|&t| {
                self.x_center
                    .iter()
                    .zip(&z.x)
                    .zip(&z.v)
                    .map(|((xc, x0), v0)| {
                        let c = xc - x0 - (t - z.t) * v0;
                        c * c
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        x_extent + self.x_radius <= r * r * r
    }
}

impl PhaseRegion for BoxCylinder {
    fn dim(&self) -> usize {
        self.x_center.len()
    }

    fn contains_txv(&self, t: f64, x: &[f64], v: &[f64]) -> bool {
        t > self.t_lo
            && t <= self.t_hi
            && dist(x, &self.x_center) < self.x_radius
            && dist(v, &self.v_center) < self.v_radius
    }

    fn bounding_box(&self) -> BoxCylinder {
        self.clone()
    }
}

/// Slanted kinetic cylinder `Q_r(z0)` with top-center `z0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub center: PhasePoint,
    pub r: f64,
}

impl Cylinder {
    pub fn new(center: PhasePoint, r: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::param("r", format!("cylinder radius must be positive, got {r}")));
        }
        if !center.is_finite() {
            return Err(Error::NonFinite("cylinder center"));
        }
        Ok(Cylinder { center, r })
    }

    /// `Q_r(0)`.
    pub fn centered(d: usize, r: f64) -> Result<Self> {
        Self::new(PhasePoint::origin(d), r)
    }

    /// Membership through the group law: `z0⁻¹ ∘ z ∈ Q_r(0)`.
    pub fn contains_via_group(&self, z: &PhasePoint) -> bool {
        match self.center.inverse().compose(z) {
            Ok(w) => {
                let r = self.r;
                w.t > -r * r && w.t <= 0.0 && norm(&w.x) < r * r * r && norm(&w.v) < r
            }
            Err(_) => false,
        }
    }

    /// `r² |B_{r³}| |B_r|`.
    pub fn volume(&self) -> f64 {
        let d = self.dim();
        self.r * self.r * ball_volume(d, self.r.powi(3)) * ball_volume(d, self.r)
    }

    /// `self ⊂ other`.
    ///
    /// With `z = z_a ∘ (s, y, w)`, `s ∈ (-a², 0]`, `|y| < a³`, `|w| < a`, the
    /// x-functional of `other` reads `c + s (v_a - v_b) + y`, which is affine in
    /// `s`; its supremum is reached at one of the two ends of the time range.
    pub fn is_inside_cylinder(&self, other: &Cylinder) -> bool {
        let (za, a) = (&self.center, self.r);
        let (zb, b) = (&other.center, other.r);
        if za.dim() != zb.dim() {
            return false;
        }
        if !(za.t <= zb.t && za.t - a * a >= zb.t - b * b) {
            return false;
        }
        if dist(&za.v, &zb.v) + a > b {
            return false;
        }
        let c: Vec<f64> =
            za.x.iter()
                .zip(&zb.x)
                .zip(&zb.v)
                .map(|((xa, xb), vb)| xa - xb - (za.t - zb.t) * vb)
                .collect();
        let u: Vec<f64> = za.v.iter().zip(&zb.v).map(|(va, vb)| va - vb).collect();
        let extent = norm(&c).max(norm_affine(&c, -a * a, &u));
        extent + a * a * a <= b * b * b
    }

    /// `self ⊂ boxed`.
    pub fn is_inside_box(&self, boxed: &BoxCylinder) -> bool {
        let z = &self.center;
        let r = self.r;
        if self.dim() != boxed.dim() {
            return false;
        }
        if !(z.t <= boxed.t_hi && z.t - r * r >= boxed.t_lo) {
            return false;
        }
        if dist(&z.v, &boxed.v_center) + r > boxed.v_radius {
            return false;
        }
        let c: Vec<f64> = z.x.iter().zip(&boxed.x_center).map(|(a, b)| a - b).collect();
        let extent = norm(&c).max(norm_affine(&c, -r * r, &z.v));
        extent + r * r * r <= boxed.x_radius
    }

    /// The stacked cylinder `Q̄^m` sitting on top of `self`.
    pub fn stacked(&self, m: u32) -> Result<StackedCylinder> {
        if m < 1 {
            return Err(Error::param("m", "stack count must be at least 1"));
        }
        Ok(StackedCylinder { base: self.clone(), m })
    }

    /// Image under `w ↦ center ∘ S_r(w)`; maps `Q_1(0)` onto `self`.
    pub fn map_from_unit(&self, w: &PhasePoint) -> Result<PhasePoint> {
        self.center.compose(&w.scale(self.r)?)
    }
}

impl PhaseRegion for Cylinder {
    fn dim(&self) -> usize {
        self.center.dim()
    }

    fn contains_txv(&self, t: f64, x: &[f64], v: &[f64]) -> bool {
        let z = &self.center;
        let r = self.r;
        let s = t - z.t;
        if !(s > -r * r && s <= 0.0) {
            return false;
        }
        if dist(v, &z.v) >= r {
            return false;
        }
        let mut acc = 0.0;
        for ((xi, x0), v0) in x.iter().zip(&z.x).zip(&z.v) {
            let c = xi - x0 - s * v0;
            acc += c * c;
        }
        acc.sqrt() < r * r * r
    }

    fn bounding_box(&self) -> BoxCylinder {
        let z = &self.center;
        let r = self.r;
        let half = 0.5 * r * r;
        BoxCylinder {
            t_lo: z.t - r * r,
            t_hi: z.t,
            x_center: z.x.iter().zip(&z.v).map(|(x, v)| x - half * v).collect(),
            x_radius: r * r * r + half * norm(&z.v),
            v_center: z.v.clone(),
            v_radius: r,
        }
    }
}

/// `Q̄^m = { 0 < t - t0 ≤ m r², |x - x0 - (t - t0) v0| < (m + 2) r³, |v - v0| < r }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedCylinder {
    pub base: Cylinder,
    pub m: u32,
}

impl StackedCylinder {
    pub fn volume(&self) -> f64 {
        let d = self.dim();
        let r = self.base.r;
        let m = self.m as f64;
        m * r * r * ball_volume(d, (m + 2.0) * r.powi(3)) * ball_volume(d, r)
    }
}

impl PhaseRegion for StackedCylinder {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn contains_txv(&self, t: f64, x: &[f64], v: &[f64]) -> bool {
        let z = &self.base.center;
        let r = self.base.r;
        let s = t - z.t;
        if !(s > 0.0 && s <= self.m as f64 * r * r) {
            return false;
        }
        if dist(v, &z.v) >= r {
            return false;
        }
        let mut acc = 0.0;
        for ((xi, x0), v0) in x.iter().zip(&z.x).zip(&z.v) {
            let c = xi - x0 - s * v0;
            acc += c * c;
        }
        acc.sqrt() < (self.m as f64 + 2.0) * r * r * r
    }

    fn bounding_box(&self) -> BoxCylinder {
        let z = &self.base.center;
        let r = self.base.r;
        let span = self.m as f64 * r * r;
        BoxCylinder {
            t_lo: z.t,
            t_hi: z.t + span,
            x_center: z.x.iter().zip(&z.v).map(|(x, v)| x + 0.5 * span * v).collect(),
            x_radius: (self.m as f64 + 2.0) * r.powi(3) + 0.5 * span * norm(&z.v),
            v_center: z.v.clone(),
            v_radius: r,
        }
    }
}

/// `Q_+ = (-ω², 0] × B_{ω³} × B_ω`, i.e. `Q_ω(0)`.
pub fn q_plus(d: usize, omega: f64) -> Result<Cylinder> {
    Cylinder::centered(d, omega)
}

/// `Q_- = (-1, -1 + ω²] × B_{ω³} × B_ω`, i.e. `Q_ω((-1 + ω², 0, 0))`.
pub fn q_minus(d: usize, omega: f64) -> Result<Cylinder> {
    Cylinder::new(PhasePoint::time_shift(d, -1.0 + omega * omega), omega)
}

/// `Q_1 = (-1, 0] × B_1 × B_1`.
pub fn q_one(d: usize) -> Cylinder {
    Cylinder::centered(d, 1.0).expect("static cylinder")
}

/// `Q_zero = (-1 - η², -1] × B_{η³} × B_η`.
pub fn q_zero(d: usize, eta: f64) -> Result<BoxCylinder> {
    BoxCylinder::centered(d, -1.0 - eta * eta, -1.0, eta.powi(3), eta)
}

/// `Q_pos = (-1 - θ², -1] × B_{θ³} × B_θ`.
pub fn q_pos(d: usize, theta: f64) -> Result<BoxCylinder> {
    q_zero(d, theta)
}

/// `(-1 - η², 0] × B_{8R} × B_{2R}`, the domain of the localization problem.
pub fn q_ext(d: usize, eta: f64, big_r: f64) -> Result<BoxCylinder> {
    BoxCylinder::centered(d, -1.0 - eta * eta, 0.0, 8.0 * big_r, 2.0 * big_r)
}

/// `(-1 - θ², 0] × B_{9R} × B_{3R}`, the domain of the positivity expansion.
pub fn q_ext_pop(d: usize, theta: f64, big_r: f64) -> Result<BoxCylinder> {
    BoxCylinder::centered(d, -1.0 - theta * theta, 0.0, 9.0 * big_r, 3.0 * big_r)
}

/// `(-1, 0] × B_2 × B_2`, the box every stacked cylinder must stay in.
pub fn stacking_envelope(d: usize) -> BoxCylinder {
    BoxCylinder::centered(d, -1.0, 0.0, 2.0, 2.0).expect("static box")
}

/// Largest admissible `ω` for the stacking construction.
pub const OMEGA_MAX: f64 = 1e-2;

/// Cylinders stacked over a base `Q_r(z0) ⊂ Q_-` until `Q_+` is captured.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackedSequence {
    pub base: Cylinder,
    pub omega: f64,
    /// `T_1, ..., T_{N+1}` with `T_k = Σ_{j ≤ k} (2^j r)²`.
    pub offsets: Vec<f64>,
    /// Centers `z_1, ..., z_{N+1}`.
    pub centers: Vec<PhasePoint>,
    pub n: usize,
    pub rho: f64,
    pub big_r: f64,
    pub last_radius: f64,
    /// `Q[1], ..., Q[N+1]`.
    pub cylinders: Vec<Cylinder>,
    /// `Q̃[N]`, the predecessor of `Q[N+1]`.
    pub predecessor: Cylinder,
}

/// Outcome of the four closed-form checks on a stacked sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackingConclusions {
    pub captures_q_plus: bool,
    pub inside_envelope: bool,
    pub predecessor_nested: bool,
    /// `2^N r`.
    pub top_radius: f64,
    pub top_radius_bound: bool,
}

impl StackingConclusions {
    pub fn all_hold(&self) -> bool {
        self.captures_q_plus && self.inside_envelope && self.predecessor_nested && self.top_radius_bound
    }
}

/// `1 / (2√2)`.
pub const TOP_RADIUS_LOWER_BOUND: f64 = 0.353_553_390_593_273_8;

/// Build the stacked sequence over `Q_r(z0)`.
pub fn stack_cylinders(z0: &PhasePoint, r: f64, omega: f64) -> Result<StackedSequence> {
    if !(omega > 0.0 && omega <= OMEGA_MAX) {
        return Err(Error::param("omega", format!("need 0 < ω ≤ {OMEGA_MAX}, got {omega}")));
    }
    let d = z0.dim();
    let base = Cylinder::new(z0.clone(), r)?;
    let qm = q_minus(d, omega)?;
    if !base.is_inside_cylinder(&qm) {
        return Err(Error::hypothesis(
            "base cylinder inside Q_-",
            format!("Q_{r}(z0) with z0 = {z0:?} is not contained in Q_- (ω = {omega})"),
        ));
    }

    let offset = |k: usize| -> f64 { (1..=k).map(|j| (2f64.powi(j as i32) * r).powi(2)).sum() };
    let mut n = 1;
    while offset(n + 1) <= -z0.t {
        n += 1;
    }
    let offsets: Vec<f64> = (1..=n + 1).map(offset).collect();
    let t_n = offsets[n - 1];

    let mut centers = Vec::with_capacity(n + 1);
    let mut cylinders = Vec::with_capacity(n + 1);
    for (k, &tk) in offsets.iter().take(n).enumerate() {
        let zk = z0.compose(&PhasePoint::time_shift(d, tk))?;
        cylinders.push(Cylinder::new(zk.clone(), 2f64.powi(k as i32 + 1) * r)?);
        centers.push(zk);
    }

    let big_r = (z0.t + t_n).abs().sqrt();
    let rho = (4.0 * omega).cbrt();
    let last_radius = big_r.max(rho);
    // When R ≥ ρ the predecessor's top coincides with z_N; keep that exact.
    let last_radius_sq = if big_r >= rho { -centers[n - 1].t } else { rho * rho };
    let z_last = if big_r >= rho {
        // Shift by exactly -t_N so the top lands on t = 0 without rounding.
        centers[n - 1].compose(&PhasePoint::time_shift(d, -centers[n - 1].t))?
    } else {
        PhasePoint::origin(d)
    };
    cylinders.push(Cylinder::new(z_last.clone(), last_radius)?);
    let predecessor = Cylinder::new(
        z_last.compose(&PhasePoint::time_shift(d, -last_radius_sq))?,
        last_radius / 2.0,
    )?;
    centers.push(z_last);

    Ok(StackedSequence {
        base,
        omega,
        offsets,
        centers,
        n,
        rho,
        big_r,
        last_radius,
        cylinders,
        predecessor,
    })
}

impl StackedSequence {
    pub fn conclusions(&self) -> StackingConclusions {
        let d = self.base.dim();
        let qp = q_plus(d, self.omega).expect("ω validated at construction");
        let envelope = stacking_envelope(d);
        let top_radius = 2f64.powi(self.n as i32) * self.base.r;
        StackingConclusions {
            captures_q_plus: qp.is_inside_cylinder(&self.cylinders[self.n]),
            inside_envelope: self.cylinders.iter().all(|q| q.is_inside_box(&envelope)),
            predecessor_nested: self.predecessor.is_inside_cylinder(&self.cylinders[self.n - 1]),
            top_radius,
            top_radius_bound: top_radius >= TOP_RADIUS_LOWER_BOUND,
        }
    }
}

/// Parameters of the positivity-expansion step for a given `θ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopParameters {
    pub theta: f64,
    pub iota: f64,
    pub eta: f64,
    /// Time lap `T = η²/8` between `Q_zero` and `Q_1`.
    pub lap: f64,
    /// Named side conditions and whether they hold at these values.
    pub constraints: Vec<(String, bool)>,
}

impl PopParameters {
    pub fn constraint(&self, name: &str) -> Option<bool> {
        self.constraints.iter().find(|(n, _)| n == name).map(|(_, ok)| *ok)
    }
}

pub fn pop_parameters(theta: f64) -> Result<PopParameters> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::param("theta", format!("need θ ∈ (0, 1], got {theta}")));
    }
    let t2 = theta * theta;
    let iota = (4.0 * (1.0 + t2) / (4.0 + t2) - 1.0)
        .min((9.0f64 / 8.0).powf(1.0 / 6.0) - 1.0)
        .min(1.5f64.sqrt() - 1.0);
    let eta = 1.25f64.powf(-0.2) / (1.0 + iota) * theta;
    let lap = eta * eta / 8.0;
    let s = 1.0 + iota;
    let constraints = vec![
        (
            "(1+ι)^4 (1+η²) ≤ 1+θ²".to_string(),
            s.powi(4) * (1.0 + eta * eta) <= 1.0 + t2,
        ),
        ("2(1+ι)² ≤ 3".to_string(), 2.0 * s * s <= 3.0),
        ("8(1+ι)^6 ≤ 9".to_string(), 8.0 * s.powi(6) <= 9.0),
        ("η < θ/2".to_string(), eta > 0.0 && eta < theta / 2.0),
        (
            "θ ≥ (5/4)^{1/5}(1+ι)η".to_string(),
            theta >= 1.25f64.powf(0.2) * s * eta * (1.0 - 1e-15),
        ),
    ];
    Ok(PopParameters {
        theta,
        iota,
        eta,
        lap,
        constraints,
    })
}
