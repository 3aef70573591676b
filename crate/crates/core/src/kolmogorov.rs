//! The Kolmogorov operator `L_K = (∂t + v·∇x) - Δ_v`: fundamental
//! solution, Cauchy problems on padded boxes, the cut-off `Ψ` and the
//! localization pipeline `h = Ψ - P_R + E_R`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fields::{CoefficientField, Grid, ScalarField};
use crate::fpsolver::{Boundary, Source, Stepper};
use crate::geometry::{q_ext, q_one, q_zero, BoxCylinder, PhasePoint, PhaseRegion};
use crate::{Error, Result};

/// Per-axis log density of `(ξ, ζ)` under the Gaussian with covariance
/// `[[2s³/3, s²], [s², 2s]]`, summed over axes.
fn ln_gaussian(s: f64, xi: &[f64], zeta: &[f64]) -> f64 {
    let d = xi.len() as f64;
    let q: f64 = xi
        .iter()
        .zip(zeta)
        .map(|(a, b)| 6.0 * a * a / (s * s * s) - 6.0 * a * b / (s * s) + 2.0 * b * b / s)
        .sum();
    d * (3f64.sqrt() / (2.0 * std::f64::consts::PI * s * s)).ln() - 0.5 * q
}

/// `ln Γ(z; z0)`.
pub fn ln_kernel(z: &PhasePoint, z0: &PhasePoint) -> Result<f64> {
    let w = z0.inverse().compose(z)?;
    if !(w.t > 0.0) {
        return Err(Error::param("t", format!("kernel needs t > t0, got t - t0 = {}", w.t)));
    }
    Ok(ln_gaussian(w.t, &w.x, &w.v))
}

/// `Γ(z; z0)`, the density at `z` of the process started at `z0`.
pub fn kernel_eval(z: &PhasePoint, z0: &PhasePoint) -> Result<f64> {
    ln_kernel(z, z0).map(f64::exp)
}

/// Kernel with its base point fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KolmogorovKernel {
    pub base: PhasePoint,
}

impl KolmogorovKernel {
    pub fn new(base: PhasePoint) -> Self {
        KolmogorovKernel { base }
    }

    /// `Γ((t, x, v); base)`, zero for `t ≤ t0`.
    pub fn at(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        let s = t - self.base.t;
        if s <= 0.0 {
            return 0.0;
        }
        let xi: Vec<f64> = x
            .iter()
            .zip(&self.base.x)
            .zip(&self.base.v)
            .map(|((x, x0), v0)| x - x0 - s * v0)
            .collect();
        let zeta: Vec<f64> = v.iter().zip(&self.base.v).map(|(v, v0)| v - v0).collect();
        ln_gaussian(s, &xi, &zeta).exp()
    }

    /// Centered-difference `L_K Γ` at `(t, x, v)` with step `h`.
    pub fn residual(&self, t: f64, x: &[f64], v: &[f64], h: f64) -> f64 {
        let d = x.len();
        let mut r = (self.at(t + h, x, v) - self.at(t - h, x, v)) / (2.0 * h);
        let c = self.at(t, x, v);
        for k in 0..d {
            let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
            xp[k] += h;
            xm[k] -= h;
            r += v[k] * (self.at(t, &xp, v) - self.at(t, &xm, v)) / (2.0 * h);
            let (mut vp, mut vm) = (v.to_vec(), v.to_vec());
            vp[k] += h;
            vm[k] -= h;
            r -= (self.at(t, x, &vp) - 2.0 * c + self.at(t, x, &vm)) / (h * h);
        }
        r
    }
}

/// Standard-normal quantile leaving `1e-8` in each tail.
pub const GAUSSIAN_TAIL_Z: f64 = 5.730_729;

/// `(pad_x, pad_v)` so that Gaussian mass diffusing out of a box with
/// velocity radius `v_radius` during `duration` stays below `1e-8`.
pub fn recommended_padding(duration: f64, v_radius: f64) -> (f64, f64) {
    let pad_v = GAUSSIAN_TAIL_Z * (2.0 * duration).sqrt();
    let pad_x = duration * (v_radius + pad_v);
    (pad_x, pad_v)
}

/// `core` enlarged by the recommended padding in `x` and `v`.
pub fn padded_domain(core: &BoxCylinder) -> BoxCylinder {
    let (pad_x, pad_v) = recommended_padding(core.t_hi - core.t_lo, core.v_radius);
    BoxCylinder {
        x_radius: core.x_radius + pad_x,
        v_radius: core.v_radius + pad_v,
        ..core.clone()
    }
}

/// Marks the grid nodes whose `x` or `v` multi-index touches the edge.
struct EdgeMask {
    x: Vec<bool>,
    v: Vec<bool>,
}

impl EdgeMask {
    fn new(grid: &Grid) -> Self {
        EdgeMask {
            x: (0..grid.nx_total())
                .map(|i| grid.x_multi(i).iter().any(|&j| j == 0 || j + 1 == grid.n_x))
                .collect(),
            v: (0..grid.nv_total())
                .map(|i| grid.v_multi(i).iter().any(|&j| j == 0 || j + 1 == grid.n_v))
                .collect(),
        }
    }

    /// Largest ratio of a boundary-layer value to the global maximum.
    fn ratio(&self, slice: &[f64]) -> f64 {
        let nv = self.v.len();
        let (mut edge, mut all) = (0.0f64, 0.0f64);
        for (k, val) in slice.iter().enumerate() {
            let a = val.abs();
            all = all.max(a);
            if self.x[k / nv] || self.v[k % nv] {
                edge = edge.max(a);
            }
        }
        if all == 0.0 {
            0.0
        } else {
            edge / all
        }
    }
}

/// Solve `L_K h = rhs` with `h = 0` at the bottom of `grid`, truncated to
/// the grid with zero boundary data.
///
/// Fails if the solution reaches the edge of the box with a relative size
/// above `boundary_tol`, which signals insufficient padding.
pub fn solve_cauchy(rhs: &Source, grid: Arc<Grid>, boundary_tol: f64) -> Result<ScalarField> {
    let mut stepper = Stepper::new(
        grid.clone(),
        CoefficientField::identity(grid.d),
        Boundary::zero(),
        true,
        1.0,
    )?;
    let n = grid.slice_len();
    let mut h = vec![0.0; n];
    let mut src = vec![0.0; n];
    let mut values = Vec::with_capacity(grid.len());
    let mut worst = 0.0f64;
    let mask = EdgeMask::new(&grid);
    for it in 0..grid.n_t {
        let t = grid.t_node(it);
        let base = grid.index(it, 0, 0);
        let has = match rhs {
            Source::Zero => false,
            _ => {
                for (k, s) in src.iter_mut().enumerate() {
                    *s = rhs.at(&grid, base + k);
                }
                true
            }
        };
        stepper.step(it, &mut h, has.then_some(&src[..]))?;
        worst = worst.max(mask.ratio(&h));
        values.extend_from_slice(&h);
        let _ = t;
    }
    if worst > boundary_tol {
        return Err(Error::Numerical(format!(
            "insufficient padding: boundary layer reaches {worst:.3e} of the maximum"
        )));
    }
    Ok(ScalarField { grid, values })
}

fn smoothstep(u: f64) -> (f64, f64, f64) {
    if u <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if u >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let u2 = u * u;
        (
            u2 * u * (10.0 - 15.0 * u + 6.0 * u2),
            30.0 * u2 * (1.0 - u) * (1.0 - u),
            60.0 * u * (1.0 - u) * (1.0 - 2.0 * u),
        )
    }
}

/// Radial profile equal to 1 on `B_inner`, 0 outside `B_{inner+1}`:
/// value, radial derivative, second radial derivative.
fn radial(r: f64, inner: f64) -> (f64, f64, f64) {
    let (s, ds, dds) = smoothstep(r - inner);
    (1.0 - s, -ds, -dds)
}

/// Value, gradient and Laplacian of a radial profile at `y`.
fn radial_field(y: &[f64], inner: f64) -> (f64, Vec<f64>, f64) {
    let d = y.len() as f64;
    let r = crate::geometry::norm(y);
    let (p, dp, ddp) = radial(r, inner);
    if r <= inner || dp == 0.0 && ddp == 0.0 {
        return (p, vec![0.0; y.len()], 0.0);
    }
    let grad = y.iter().map(|c| dp * c / r).collect();
    (p, grad, ddp + (d - 1.0) * dp / r)
}

/// `Ψ(t, x, v) = Ψ1(t, x/R, v/R)` with `Ψ1 = φ1(t) φ2(x - t v) φ3(v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffFunction {
    pub eta: f64,
    pub lap: f64,
    pub big_r: f64,
}

/// Values and derivatives of `Ψ` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffEval {
    pub psi: f64,
    /// `(∂t + v·∇x) Ψ`.
    pub transport: f64,
    pub grad_v: Vec<f64>,
    pub lap_v: f64,
}

pub fn build_cutoff(eta: f64, lap: f64, big_r: f64) -> Result<CutoffFunction> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::param("eta", format!("need η ∈ (0, 1], got {eta}")));
    }
    if !(lap > 0.0 && lap < eta * eta) {
        return Err(Error::param("T", format!("need T ∈ (0, η²), got {lap}")));
    }
    if !(big_r >= 1.0 && big_r.is_finite()) {
        return Err(Error::param("R", format!("need R ≥ 1, got {big_r}")));
    }
    let c = CutoffFunction { eta, lap, big_r };
    // φ1 must be nondecreasing on the blend; check on a fine sample.
    let (t2, t3) = (-1.0 - lap, -1.0);
    for k in 0..=1000 {
        let t = t2 + (t3 - t2) * k as f64 / 1000.0;
        if c.phi1(t).1 < -1e-12 {
            return Err(Error::param("cut-off", format!("φ1 decreases at t = {t}")));
        }
    }
    Ok(c)
}

impl CutoffFunction {
    /// `φ1` and `φ1'`.
    pub fn phi1(&self, t: f64) -> (f64, f64) {
        let t1 = -1.0 - self.eta * self.eta;
        let t2 = -1.0 - self.lap;
        if t <= t1 {
            (0.0, 0.0)
        } else if t <= t2 {
            (t - t1, 1.0)
        } else if t < -1.0 {
            let u = (t - t2) / self.lap;
            let delta = 1.0 - (self.eta * self.eta - self.lap);
            let (s, ds, _) = smoothstep(u);
            let u2 = u * u;
            let h1 = u - 6.0 * u2 * u + 8.0 * u2 * u2 - 3.0 * u2 * u2 * u;
            let dh1 = 1.0 - 18.0 * u2 + 32.0 * u2 * u - 15.0 * u2 * u2;
            (
                self.eta * self.eta - self.lap + delta * s + self.lap * h1,
                (delta * ds + self.lap * dh1) / self.lap,
            )
        } else {
            (1.0, 0.0)
        }
    }

    /// `Ψ1` and its derivatives at unscaled coordinates.
    pub fn eval_unit(&self, t: f64, y: &[f64], w: &[f64]) -> CutoffEval {
        let d = y.len();
        let (p1, dp1) = self.phi1(t);
        if p1 == 0.0 && dp1 == 0.0 {
            return CutoffEval {
                psi: 0.0,
                transport: 0.0,
                grad_v: vec![0.0; d],
                lap_v: 0.0,
            };
        }
        let arg: Vec<f64> = y.iter().zip(w).map(|(y, w)| y - t * w).collect();
        let (p2, g2, l2) = radial_field(&arg, 3.0);
        let (p3, g3, l3) = radial_field(w, 1.0);
        let grad_v = (0..d).map(|k| p1 * (-t * g2[k] * p3 + p2 * g3[k])).collect();
        let cross: f64 = g2.iter().zip(&g3).map(|(a, b)| a * b).sum();
        CutoffEval {
            psi: p1 * p2 * p3,
            transport: dp1 * p2 * p3,
            grad_v,
            lap_v: p1 * (t * t * l2 * p3 - 2.0 * t * cross + p2 * l3),
        }
    }

    /// `Ψ` and its derivatives.
    pub fn eval(&self, t: f64, x: &[f64], v: &[f64]) -> CutoffEval {
        let r = self.big_r;
        let y: Vec<f64> = x.iter().map(|c| c / r).collect();
        let w: Vec<f64> = v.iter().map(|c| c / r).collect();
        let mut e = self.eval_unit(t, &y, &w);
        e.grad_v.iter_mut().for_each(|g| *g /= r);
        e.lap_v /= r * r;
        e
    }

    pub fn psi(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        let p1 = self.phi1(t).0;
        if p1 == 0.0 {
            return 0.0;
        }
        let r = self.big_r;
        let w2: f64 = v.iter().map(|c| (c / r) * (c / r)).sum();
        let p3 = radial(w2.sqrt(), 1.0).0;
        if p3 == 0.0 {
            return 0.0;
        }
        let y2: f64 = x.iter().zip(v).map(|(x, v)| ((x - t * v) / r).powi(2)).sum();
        p1 * radial(y2.sqrt(), 3.0).0 * p3
    }

    /// `sup |∇_v Ψ|`, by sampling the unit profile on a grid.
    pub fn grad_v_sup(&self) -> f64 {
        let mut best = 0.0f64;
        let n = 200;
        let t_lo = -1.0 - self.eta * self.eta;
        for i in 0..=20 {
            let t = t_lo + (0.0 - t_lo) * i as f64 / 20.0;
            for j in 0..=n {
                let y = -8.0 + 16.0 * j as f64 / n as f64;
                for k in 0..=n {
                    let w = -2.0 + 4.0 * k as f64 / n as f64;
                    let e = self.eval_unit(t, &[y], &[w]);
                    best = best.max(crate::geometry::norm(&e.grad_v));
                }
            }
        }
        best / self.big_r
    }

    /// `Q_ext = (-1 - η², 0] × B_{8R} × B_{2R}`.
    pub fn support_box(&self, d: usize) -> BoxCylinder {
        q_ext(d, self.eta, self.big_r).expect("validated parameters")
    }
}

/// Maximum over `(x, v, x0, v0)` of the quadratic form of `-2 ln Γ`, for
/// `|x|, |v| ≤ 1`, `|x0| ≤ η³`, `|v0| ≤ η` at fixed `s`.
fn worst_quadratic(s: f64, eta: f64, d: usize, rng: &mut ChaCha8Rng) -> f64 {
    let form = |xi: f64, zeta: f64| 6.0 * xi * xi / (s * s * s) - 6.0 * xi * zeta / (s * s) + 2.0 * zeta * zeta / s;
    let e3 = eta.powi(3);
    let mut best = 0.0f64;
    for sx in [-1.0, 1.0] {
        for sv in [-1.0, 1.0] {
            for sx0 in [-e3, e3] {
                for sv0 in [-eta, eta] {
                    best = best.max(form(sx - sx0 - s * sv0, sv - sv0));
                }
            }
        }
    }
    if d == 1 {
        return best;
    }
    // Multi-start projected ascent over the product of balls.
    let radii = [1.0, 1.0, e3, eta];
    let value = |p: &[Vec<f64>; 4]| -> f64 {
        (0..d)
            .map(|k| form(p[0][k] - p[2][k] - s * p[3][k], p[1][k] - p[3][k]))
            .sum()
    };
    for _ in 0..16 {
        let mut p: [Vec<f64>; 4] = std::array::from_fn(|i| {
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = crate::geometry::norm(&v).max(1e-12);
            v.iter_mut().for_each(|c| *c *= radii[i] / n);
            v
        });
        let mut step = 0.1 * s * s * s;
        for _ in 0..200 {
            let mut grad: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; d]);
            for k in 0..d {
                let xi = p[0][k] - p[2][k] - s * p[3][k];
                let ze = p[1][k] - p[3][k];
                let gxi = 12.0 * xi / (s * s * s) - 6.0 * ze / (s * s);
                let gze = -6.0 * xi / (s * s) + 4.0 * ze / s;
                grad[0][k] = gxi;
                grad[1][k] = gze;
                grad[2][k] = -gxi;
                grad[3][k] = -s * gxi - gze;
            }
            let before = value(&p);
            let mut trial = p.clone();
            for i in 0..4 {
                for k in 0..d {
                    trial[i][k] += step * grad[i][k];
                }
                let n = crate::geometry::norm(&trial[i]);
                if n > radii[i] {
                    trial[i].iter_mut().for_each(|c| *c *= radii[i] / n);
                }
            }
            if value(&trial) >= before {
                p = trial;
                step *= 1.2;
            } else {
                step *= 0.5;
            }
        }
        best = best.max(value(&p));
    }
    best
}

/// `ln m` with `m = min Γ(z; z0)` over `z ∈ Q_1`,
/// `z0 ∈ Q_zero ∩ {t ≤ -1 - T}`.
pub fn kernel_log_min(d: usize, eta: f64, lap: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b68);
    let ln_at = |s: f64, rng: &mut ChaCha8Rng| -> f64 {
        d as f64 * (3f64.sqrt() / (2.0 * std::f64::consts::PI * s * s)).ln() - 0.5 * worst_quadratic(s, eta, d, rng)
    };
    let (lo, hi) = (lap, 1.0 + eta * eta);
    let n = if d == 1 { 4000 } else { 200 };
    let mut best = (f64::INFINITY, lo);
    for k in 0..=n {
        // Denser near the lower end, where the kernel is most singular.
        let u = k as f64 / n as f64;
        let s = lo * (hi / lo).powf(u);
        let val = ln_at(s, &mut rng);
        if val < best.0 {
            best = (val, s);
        }
    }
    best.0
}

/// Settings for [`localization_bound`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationOptions {
    pub eta: f64,
    pub lap: f64,
    pub big_r: f64,
    pub dt: f64,
    pub dx: f64,
    pub dv: f64,
    /// Required fraction of `Q_zero` on which `f` vanishes.
    pub alpha0: f64,
    pub boundary_tol: f64,
    /// Number of `Q_1` nodes at which `P_R` is compared with direct kernel
    /// quadrature.
    pub oracle_points: usize,
}

impl LocalizationOptions {
    /// Defaults at `η` from the positivity parameters for `θ`.
    pub fn for_theta(theta: f64) -> Result<Self> {
        let pp = crate::geometry::pop_parameters(theta)?;
        Ok(LocalizationOptions {
            eta: pp.eta,
            lap: pp.lap,
            big_r: 4.0,
            dt: 0.02,
            dx: 0.1,
            dv: 0.1,
            alpha0: 0.25,
            boundary_tol: 1e-6,
            oracle_points: 24,
        })
    }
}

/// Everything measured by one run of the localization pipeline. Values of
/// `h`, `P_R`, `E_R` refer to `f / ‖f‖_∞`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub options: LocalizationOptions,
    pub sup_f: f64,
    pub zero_fraction: f64,
    pub ln_m: f64,
    pub ln_delta0: f64,
    /// `1 - δ0/2`; equal to 1 in double precision whenever `δ0` underflows.
    pub theta0: f64,
    /// `sup_{Q_1} h`.
    pub theta0_empirical: f64,
    pub inf_p_q1: f64,
    pub sup_e_q1: f64,
    pub sup_abs_e: f64,
    /// `sup |Δ_v^h Ψ| · R²`.
    pub c0: f64,
    /// Discrete maximum-principle bound `Σ Δt sup |(1 - f) Δ_v^h Ψ|`.
    pub e_bound: f64,
    /// `max |h - (Ψ - P_R + E_R)|`.
    pub decomposition_error: f64,
    /// Most negative discrete transport derivative of `Ψ`.
    pub min_tau_psi: f64,
    /// `min P_R / P` over sampled nodes of `Q_1`, `P` by kernel quadrature
    /// over the zero set.
    pub kernel_oracle_ratio: Option<f64>,
    pub boundary_ratio: f64,
    pub h_le_theta0: bool,
    pub p_ge_delta0: bool,
    pub e_within_bound: bool,
    pub trivial: bool,
    /// `h` (unnormalized) on the grid nodes of `Q_1`, with their indices.
    pub h_q1: Vec<(usize, f64)>,
    #[serde(skip)]
    pub grid: Option<Arc<Grid>>,
}

impl LocalizationReport {
    pub fn all_hold(&self) -> bool {
        self.h_le_theta0 && self.p_ge_delta0 && self.e_within_bound
    }
}

/// Grid used by [`localization_bound`].
pub fn localization_grid(d: usize, o: &LocalizationOptions) -> Result<Arc<Grid>> {
    let core = q_ext(d, o.eta, o.big_r)?;
    Ok(Arc::new(Grid::with_spacing(padded_domain(&core), o.dt, o.dx, o.dv)?))
}

/// Run the three Cauchy problems for `h`, `P_R`, `E_R` driven by `f` and the
/// cut-off at radius `R`, and evaluate the localization claims on `Q_1`.
///
/// Discretely, `Ψ` is itself the scheme's solution with source
/// `τΨ - Δ^h Ψ`, where `τ` and `Δ^h` are the scheme's own transport
/// difference and Laplacian; splitting that source by `f` and `1 - f` makes
/// `h = Ψ - P_R + E_R` hold exactly at the discrete level.
pub fn localization_bound(
    d: usize,
    f: crate::harness::PhaseClosure<'_>,
    o: &LocalizationOptions,
) -> Result<LocalizationReport> {
    if !(o.alpha0 > 0.0 && o.alpha0 <= 1.0) {
        return Err(Error::param("alpha0", "need α0 ∈ (0, 1]"));
    }
    let cutoff = build_cutoff(o.eta, o.lap, o.big_r)?;
    let grid = localization_grid(d, o)?;
    let g = &*grid;
    let ext = q_ext(d, o.eta, o.big_r)?;
    let qz = q_zero(d, o.eta)?;
    let q1 = q_one(d);
    let nv = g.nv_total();
    let n = g.slice_len();

    // Hypotheses and normalization.
    let mut sup_f = 0.0f64;
    let (mut zero_cells, mut qz_cells) = (0usize, 0usize);
    for it in 0..g.n_t {
        let t = g.t_node(it);
        if t <= ext.t_lo || t > ext.t_hi {
            continue;
        }
        for k in 0..n {
            let (x, v) = (g.x_node(k / nv), g.v_node(k % nv));
            if !ext.contains_txv(t, x, v) {
                continue;
            }
            let val = f(t, x, v);
            if !(val >= 0.0 && val.is_finite()) {
                return Err(Error::hypothesis("f ≥ 0 and bounded", format!("f = {val} at t = {t}")));
            }
            sup_f = sup_f.max(val);
            if qz.contains_txv(t, x, v) {
                qz_cells += 1;
                if val == 0.0 {
                    zero_cells += 1;
                }
            }
        }
    }
    if qz_cells == 0 {
        return Err(Error::EmptyRegion);
    }
    let zero_fraction = zero_cells as f64 / qz_cells as f64;
    if zero_fraction < o.alpha0 {
        return Err(Error::hypothesis(
            "zero-set measure",
            format!(
                "|{{f = 0}} ∩ Q_zero| / |Q_zero| = {zero_fraction:.4} is below {}",
                o.alpha0
            ),
        ));
    }
    let ln_m = kernel_log_min(d, o.eta, o.lap);
    let ln_delta0 = ln_m + (qz.volume() / 8.0).ln();
    let theta0 = 1.0 - 0.5 * ln_delta0.exp();

    let q1_nodes: Vec<usize> = g.cells_in(&q1);
    let mut report = LocalizationReport {
        options: o.clone(),
        sup_f,
        zero_fraction,
        ln_m,
        ln_delta0,
        theta0,
        theta0_empirical: 0.0,
        inf_p_q1: f64::INFINITY,
        sup_e_q1: f64::NEG_INFINITY,
        sup_abs_e: 0.0,
        c0: 0.0,
        e_bound: 0.0,
        decomposition_error: 0.0,
        min_tau_psi: 0.0,
        kernel_oracle_ratio: None,
        boundary_ratio: 0.0,
        h_le_theta0: true,
        p_ge_delta0: true,
        e_within_bound: true,
        trivial: sup_f == 0.0,
        h_q1: Vec::with_capacity(q1_nodes.len()),
        grid: Some(grid.clone()),
    };
    if report.trivial {
        report.h_q1 = q1_nodes.iter().map(|&i| (i, 0.0)).collect();
        report.inf_p_q1 = 0.0;
        report.sup_e_q1 = 0.0;
        return Ok(report);
    }

    let mut stepper = Stepper::new(grid.clone(), CoefficientField::identity(d), Boundary::zero(), true, 1.0)?;
    let (mut h, mut p, mut e) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut psi_prev = vec![0.0; n];
    let mut psi = vec![0.0; n];
    let mut moved = vec![0.0; n];
    let mut lap = vec![0.0; n];
    let (mut src_h, mut src_p, mut src_e) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut fhat = vec![0.0; n];
    let supp = cutoff.support_box(d);
    let mask = EdgeMask::new(g);
    let mut q1_ptr = 0usize;
    let mut sup_h = f64::NEG_INFINITY;
    // P_R at the oracle nodes, filled in as the time loop passes them.
    let oracle_nodes: Vec<usize> = if o.oracle_points == 0 || q1_nodes.is_empty() {
        Vec::new()
    } else {
        let step = (q1_nodes.len() / o.oracle_points).max(1);
        q1_nodes.iter().copied().step_by(step).take(o.oracle_points).collect()
    };
    let mut oracle_p = Vec::with_capacity(oracle_nodes.len());
    let mut zero_set: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();

    for it in 0..g.n_t {
        let t_prev = g.domain.t_lo + it as f64 * g.dt;
        let t = g.t_node(it);
        for k in 0..n {
            let (x, v) = (g.x_node(k / nv), g.v_node(k % nv));
            let inside = supp.contains_txv(t, x, v);
            psi[k] = if inside { cutoff.psi(t, x, v) } else { 0.0 };
            fhat[k] = if ext.contains_txv(t, x, v) {
                f(t, x, v) / sup_f
            } else {
                0.0
            };
            if qz.contains_txv(t, x, v) && t <= -1.0 - o.lap && fhat[k] == 0.0 {
                zero_set.push((t, x.to_vec(), v.to_vec()));
            }
        }
        stepper.transport(t_prev, &psi_prev, &mut moved);
        stepper.laplacian(t, &psi, &mut lap);
        let mut step_src = 0.0f64;
        for k in 0..n {
            let tau = (psi[k] - moved[k]) / g.dt;
            report.min_tau_psi = report.min_tau_psi.min(tau);
            report.c0 = report.c0.max(lap[k].abs() * o.big_r * o.big_r);
            src_h[k] = fhat[k] * (tau - lap[k]);
            src_p[k] = (1.0 - fhat[k]) * tau;
            src_e[k] = (1.0 - fhat[k]) * lap[k];
            step_src = step_src.max(src_e[k].abs());
        }
        report.e_bound += g.dt * step_src;
        stepper.step(it, &mut h, Some(&src_h))?;
        stepper.step(it, &mut p, Some(&src_p))?;
        stepper.step(it, &mut e, Some(&src_e))?;
        for k in 0..n {
            let err = (h[k] - (psi[k] - p[k] + e[k])).abs();
            report.decomposition_error = report.decomposition_error.max(err);
            report.sup_abs_e = report.sup_abs_e.max(e[k].abs());
        }
        report.boundary_ratio = report.boundary_ratio.max(mask.ratio(&h));
        let slice_end = g.index(it + 1, 0, 0);
        while q1_ptr < q1_nodes.len() && q1_nodes[q1_ptr] < slice_end {
            let k = q1_nodes[q1_ptr] - g.index(it, 0, 0);
            sup_h = sup_h.max(h[k]);
            report.inf_p_q1 = report.inf_p_q1.min(p[k]);
            report.sup_e_q1 = report.sup_e_q1.max(e[k]);
            report.h_q1.push((q1_nodes[q1_ptr], h[k] * sup_f));
            if oracle_nodes.binary_search(&q1_nodes[q1_ptr]).is_ok() {
                oracle_p.push(p[k]);
            }
            q1_ptr += 1;
        }
        std::mem::swap(&mut psi_prev, &mut psi);
    }
    if report.boundary_ratio > o.boundary_tol {
        return Err(Error::Numerical(format!(
            "insufficient padding: boundary layer reaches {:.3e} of the maximum",
            report.boundary_ratio
        )));
    }
    report.theta0_empirical = sup_h;
    report.h_le_theta0 = sup_h <= theta0;
    report.p_ge_delta0 = report.inf_p_q1 > 0.0 && report.inf_p_q1.ln() >= ln_delta0;
    report.e_within_bound = report.sup_e_q1 <= report.e_bound * (1.0 + 1e-12) + 1e-15;
    if !oracle_nodes.is_empty() && !zero_set.is_empty() {
        let vol = g.cell_volume();
        let mut ratio = f64::INFINITY;
        for (&idx, &pr) in oracle_nodes.iter().zip(&oracle_p) {
            let (t, x, v) = g.coords(idx);
            let z = PhasePoint {
                t,
                x: x.to_vec(),
                v: v.to_vec(),
            };
            let pk: f64 = zero_set
                .iter()
                .map(|(t0, x0, v0)| {
                    let z0 = PhasePoint {
                        t: *t0,
                        x: x0.clone(),
                        v: v0.clone(),
                    };
                    kernel_eval(&z, &z0).unwrap_or(0.0)
                })
                .sum::<f64>()
                * vol;
            if pk > 0.0 {
                ratio = ratio.min(pr / pk);
            }
        }
        if ratio.is_finite() {
            report.kernel_oracle_ratio = Some(ratio);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_positive_and_left_invariant() {
        let z0 = PhasePoint::new1(-0.3, 0.2, -0.5);
        let w = PhasePoint::new1(0.4, 0.1, 0.7);
        let z = z0.compose(&w).unwrap();
        let a = kernel_eval(&z, &z0).unwrap();
        let b = kernel_eval(&w, &PhasePoint::origin(1)).unwrap();
        assert!(a > 0.0);
        assert!((a - b).abs() <= 1e-13 * b);
        assert!(kernel_eval(&z0, &z0).is_err());
    }

    #[test]
    fn kernel_matches_closed_form_at_mean() {
        // At the mean the density is √3 / (2π s²) per axis.
        let s: f64 = 0.5;
        let k = KolmogorovKernel::new(PhasePoint::origin(2));
        let val = k.at(s, &[0.0, 0.0], &[0.0, 0.0]);
        let exact = (3f64.sqrt() / (2.0 * std::f64::consts::PI * s * s)).powi(2);
        assert!((val - exact).abs() < 1e-12 * exact);
    }

    #[test]
    fn padding_scale() {
        let (px, pv) = recommended_padding(2.0, 1.0);
        assert!((pv - GAUSSIAN_TAIL_Z * 2.0).abs() < 1e-12);
        assert!((px - 2.0 * (1.0 + pv)).abs() < 1e-12);
    }

    #[test]
    fn cutoff_plateau_support_and_transport() {
        let c = build_cutoff(0.5, 0.5 * 0.5 / 8.0, 1.0).unwrap();
        assert_eq!(c.psi(-0.5, &[0.0], &[0.0]), 1.0);
        for &(x, v) in &[(0.9, 0.9), (-0.9, 0.5), (0.0, -0.99)] {
            assert_eq!(c.psi(-0.999, &[x], &[v]), 1.0);
        }
        assert_eq!(c.psi(-0.5, &[0.0], &[2.0]), 0.0);
        assert_eq!(c.psi(-1.0 - 0.25, &[0.0], &[0.0]), 0.0);
        let e = c.eval(-1.0 - 0.25 + 1e-3, &[0.0], &[0.0]);
        assert!(e.transport >= 1.0);
        assert!((c.phi1(-1.0).0 - 1.0).abs() < 1e-15);
        assert!((c.phi1(-1.0 - c.lap).1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cutoff_bounds_on_a_grid() {
        let eta = 0.46888;
        let c = build_cutoff(eta, eta * eta / 8.0, 1.0).unwrap();
        let n = 60;
        for i in 0..=n {
            let t = -1.0 - eta * eta + (1.0 + eta * eta) * i as f64 / n as f64;
            for j in 0..=n {
                let x = -9.0 + 18.0 * j as f64 / n as f64;
                for k in 0..=n {
                    let v = -2.5 + 5.0 * k as f64 / n as f64;
                    let e = c.eval(t, &[x], &[v]);
                    assert!((0.0..=1.0).contains(&e.psi));
                    assert!(e.transport >= 0.0);
                    if x.abs() >= 8.0 || v.abs() >= 2.0 {
                        assert_eq!(e.psi, 0.0);
                    }
                    if t > -1.0 - eta * eta && t <= -1.0 - c.lap && x.abs() < 1.0 && v.abs() < 1.0 {
                        assert!(e.transport >= 1.0 - 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn cutoff_derivatives_match_differences() {
        let c = build_cutoff(0.6, 0.6 * 0.6 / 8.0, 1.7).unwrap();
        let (t, x, v) = (-0.8, [4.9, -1.0], [2.1, 1.2]);
        let e = c.eval(t, &x, &v);
        let h = 1e-4;
        let mut lap = 0.0;
        for k in 0..2 {
            let (mut vp, mut vm) = (v, v);
            vp[k] += h;
            vm[k] -= h;
            let (fp, fm) = (c.psi(t, &x, &vp), c.psi(t, &x, &vm));
            assert!(((fp - fm) / (2.0 * h) - e.grad_v[k]).abs() < 1e-6);
            lap += (fp - 2.0 * e.psi + fm) / (h * h);
        }
        assert!((lap - e.lap_v).abs() < 1e-5, "{lap} vs {}", e.lap_v);
        let mut tr = (c.psi(t + h, &x, &v) - c.psi(t - h, &x, &v)) / (2.0 * h);
        for k in 0..2 {
            let (mut xp, mut xm) = (x, x);
            xp[k] += h;
            xm[k] -= h;
            tr += v[k] * (c.psi(t, &xp, &v) - c.psi(t, &xm, &v)) / (2.0 * h);
        }
        assert!((tr - e.transport).abs() < 1e-6);
    }

    #[test]
    fn cutoff_rejects_bad_parameters() {
        assert!(build_cutoff(0.0, 0.01, 1.0).is_err());
        assert!(build_cutoff(0.5, 0.3, 1.0).is_err());
        assert!(build_cutoff(0.5, 0.01, 0.5).is_err());
    }

    #[test]
    fn kernel_minimum_underflows_but_log_is_finite() {
        let pp = crate::geometry::pop_parameters(0.5).unwrap();
        let ln_m = kernel_log_min(1, pp.eta, pp.lap);
        assert!(ln_m.is_finite());
        assert!(ln_m < -700.0);
        // A direct kernel evaluation at a corner and s = T must not be smaller.
        let z = PhasePoint::new1(-1.0 + 1e-12, 1.0, -1.0);
        let z0 = PhasePoint::new1(-1.0 - pp.lap, -pp.eta.powi(3), pp.eta);
        assert!(ln_kernel(&z, &z0).unwrap() >= ln_m - 1e-6 * ln_m.abs());
    }

    #[test]
    fn worst_quadratic_in_two_dimensions_dominates_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &s in &[0.05, 0.3, 1.0] {
            let q1 = worst_quadratic(s, 0.5, 1, &mut rng);
            let q2 = worst_quadratic(s, 0.5, 2, &mut rng);
            assert!(q2 >= q1);
        }
    }

    #[test]
    fn cauchy_zero_rhs() {
        let dom = BoxCylinder::centered(1, 0.0, 0.2, 1.0, 1.0).unwrap();
        let g = Arc::new(Grid::new(dom, 4, 8, 8).unwrap());
        let h = solve_cauchy(&Source::Zero, g, 1e-6).unwrap();
        assert!(h.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cauchy_detects_missing_padding() {
        let dom = BoxCylinder::centered(1, 0.0, 0.5, 1.0, 1.0).unwrap();
        let g = Arc::new(Grid::new(dom, 10, 20, 20).unwrap());
        let src = Source::Fn(crate::fpsolver::phase_fn(|_, _, _| 1.0));
        assert!(matches!(solve_cauchy(&src, g, 1e-6), Err(Error::Numerical(_))));
    }
}
