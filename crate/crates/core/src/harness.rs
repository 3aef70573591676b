//! End-to-end checks of the weak Poincaré, positivity, Harnack and Hölder
//! statements on concrete super-solutions.
//!
//! Functions are passed as closures `(t, x, v) ↦ f`. Integrals over
//! cylinders use midpoint nodes of the unit cylinder pushed through
//! `z ↦ z0 ∘ S_r(z)`, so the total measure is exact.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fields::{h_minus1_norm, CoefficientField, Grid, HInput, NegSobolevInput, ScalarField};
use crate::fpsolver::{phase_fn, Boundary, PhaseFn, SolverConfig, Source, Trajectory};
use crate::geometry::{q_ext, q_minus, q_one, q_plus, q_pos, stack_cylinders, BoxCylinder, Cylinder, PhasePoint};
use crate::kolmogorov::{build_cutoff, kernel_log_min, localization_bound, KolmogorovKernel, LocalizationOptions};
use crate::report::VerificationReport;
use crate::{Error, Result};

pub type PhaseClosure<'a> = &'a (dyn Fn(f64, &[f64], &[f64]) -> f64 + Sync);

fn product_nodes(d: usize, n: usize) -> impl Iterator<Item = (f64, Vec<f64>, Vec<f64>)> {
    let mid = move |i: usize| -1.0 + (2 * i + 1) as f64 / n as f64;
    let per = n.pow(d as u32);
    (0..n).flat_map(move |it| {
        let s = -1.0 + (it as f64 + 0.5) / n as f64;
        (0..per).flat_map(move |ix| {
            (0..per).filter_map(move |iv| {
                let y: Vec<f64> = crate::fields::multi_index(ix, n, d).into_iter().map(mid).collect();
                let w: Vec<f64> = crate::fields::multi_index(iv, n, d).into_iter().map(mid).collect();
                let inside = crate::geometry::norm(&y) < 1.0 && crate::geometry::norm(&w) < 1.0;
                inside.then_some((s, y, w))
            })
        })
    })
}

/// Midpoint nodes of `Q_r(z0)`, `n` per axis before the ball restriction.
pub fn cylinder_nodes(q: &Cylinder, n: usize) -> Vec<PhasePoint> {
    product_nodes(q.center.dim(), n)
        .map(|(s, y, w)| {
            q.map_from_unit(&PhasePoint { t: s, x: y, v: w })
                .expect("dimensions agree")
        })
        .collect()
}

/// Midpoint nodes of a box cylinder.
pub fn box_nodes(b: &BoxCylinder, n: usize) -> Vec<PhasePoint> {
    product_nodes(b.x_center.len(), n)
        .map(|(s, y, w)| PhasePoint {
            t: b.t_lo + (s + 1.0) * (b.t_hi - b.t_lo),
            x: y.iter().zip(&b.x_center).map(|(y, c)| c + b.x_radius * y).collect(),
            v: w.iter().zip(&b.v_center).map(|(w, c)| c + b.v_radius * w).collect(),
        })
        .collect()
}

fn eval_all(f: PhaseClosure<'_>, nodes: &[PhasePoint]) -> Vec<f64> {
    nodes.par_iter().map(|z| f(z.t, &z.x, &z.v)).collect()
}

fn fraction(values: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    values.iter().filter(|&&v| pred(v)).count() as f64 / values.len().max(1) as f64
}

fn min_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn require_nonnegative(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(**v >= 0.0)) {
        Some(v) => Err(Error::hypothesis("nonnegativity", format!("{name} has value {v}"))),
        None => Ok(()),
    }
}

/// `c + Σ w_i Γ(·; z_i)`: an exact solution with `A = I`, `B = 0`, `S = 0`
/// after the last base time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMixture {
    pub constant: f64,
    pub terms: Vec<(f64, PhasePoint)>,
}

impl KernelMixture {
    pub fn eval(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        self.constant
            + self
                .terms
                .iter()
                .map(|(w, z)| w * KolmogorovKernel::new(z.clone()).at(t, x, v))
                .sum::<f64>()
    }

    pub fn scaled(&self, s: f64) -> Self {
        KernelMixture {
            constant: self.constant * s,
            terms: self.terms.iter().map(|(w, z)| (w * s, z.clone())).collect(),
        }
    }

    /// Latest base time; the mixture solves the equation after it.
    pub fn last_base_time(&self) -> f64 {
        self.terms.iter().map(|(_, z)| z.t).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `count` unit-order weights with bases in `t_range × B_{rx} × B_{rv}`.
    pub fn random(seed: u64, d: usize, count: usize, t_range: (f64, f64), rx: f64, rv: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ball = |r: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            loop {
                let p: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                if crate::geometry::norm(&p) < 1.0 {
                    return p.into_iter().map(|c| c * r).collect();
                }
            }
        };
        let terms = (0..count)
            .map(|_| {
                let w = rng.random_range(0.2..1.0);
                let t = rng.random_range(t_range.0..t_range.1);
                let x = ball(rx, &mut rng);
                let v = ball(rv, &mut rng);
                (w, PhasePoint { t, x, v })
            })
            .collect();
        KernelMixture { constant: 0.0, terms }
    }
}

/// Multilinear interpolation of a solver trajectory in `(t, x, v)`,
/// including the initial slice. Values are clamped at the grid edges.
#[derive(Clone)]
pub struct TrajectoryInterp {
    pub trajectory: Arc<Trajectory>,
}

impl TrajectoryInterp {
    pub fn new(trajectory: Trajectory) -> Self {
        TrajectoryInterp {
            trajectory: Arc::new(trajectory),
        }
    }

    fn level(&self, k: usize) -> &[f64] {
        if k == 0 {
            &self.trajectory.initial
        } else {
            self.trajectory.field.slice(k - 1)
        }
    }

    pub fn eval(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        let g = &*self.trajectory.field.grid;
        let d = g.d;
        let s = ((t - g.domain.t_lo) / g.dt).clamp(0.0, g.n_t as f64);
        let k0 = (s.floor() as usize).min(g.n_t.saturating_sub(1));
        let ft = s - k0 as f64;
        // Per axis: lower index and weight, x axes first.
        let mut axes = Vec::with_capacity(2 * d);
        for (c, center, radius, h, n) in x
            .iter()
            .zip(&g.domain.x_center)
            .map(|(c, ctr)| (*c, *ctr, g.domain.x_radius, g.dx, g.n_x))
            .chain(
                v.iter()
                    .zip(&g.domain.v_center)
                    .map(|(c, ctr)| (*c, *ctr, g.domain.v_radius, g.dv, g.n_v)),
            )
        {
            let u = ((c - (center - radius)) / h - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n - 2);
            axes.push((i0, u - i0 as f64));
        }
        let stride_x: Vec<usize> = (0..d).map(|k| g.stride(g.n_x, k)).collect();
        let stride_v: Vec<usize> = (0..d).map(|k| g.stride(g.n_v, k)).collect();
        let nv = g.nv_total();
        let corners = 1usize << (2 * d);
        let mut acc = [0.0; 2];
        for (slot, k) in [k0, k0 + 1].into_iter().enumerate() {
            let vals = self.level(k);
            for c in 0..corners {
                let (mut ix, mut iv, mut w) = (0usize, 0usize, 1.0);
                for (a, &(i0, fr)) in axes.iter().enumerate() {
                    let up = (c >> a) & 1 == 1;
                    let i = i0 + up as usize;
                    w *= if up { fr } else { 1.0 - fr };
                    if a < d {
                        ix += i * stride_x[a];
                    } else {
                        iv += i * stride_v[a - d];
                    }
                }
                if w != 0.0 {
                    acc[slot] += w * vals[ix * nv + iv];
                }
            }
        }
        (1.0 - ft) * acc[0] + ft * acc[1]
    }
}

/// Transport-derivative bound `H` in the hypothesis `(∂t + v·∇x) f ≤ H`.
#[derive(Clone)]
pub enum HSpec {
    Zero,
    /// `H = (∂t + v·∇x) f` by centered differences.
    Transport,
    /// `H = h0 + ∇v·h1`.
    Split {
        h0: PhaseFn,
        h1: Vec<PhaseFn>,
    },
}

/// Settings for the two Poincaré checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoincareOptions {
    pub localization: LocalizationOptions,
    /// Spacing `(Δt, Δx, Δv)` of the grid on `Q_ext` used for the norms.
    pub norm_spacing: (f64, f64, f64),
}

impl PoincareOptions {
    pub fn for_theta(theta: f64) -> Result<Self> {
        let mut localization = LocalizationOptions::for_theta(theta)?;
        localization.big_r = 4.0;
        Ok(PoincareOptions {
            localization,
            norm_spacing: (0.05, 0.2, 0.2),
        })
    }
}

/// `‖∇v f‖_{L²(Q_ext)}` and `‖H‖_{L²H⁻¹(Q_ext)}`.
fn poincare_rhs(d: usize, f: PhaseClosure<'_>, h: &HSpec, o: &PoincareOptions) -> Result<(f64, f64)> {
    let lo = &o.localization;
    let ext = q_ext(d, lo.eta, lo.big_r)?;
    let (dt, dx, dv) = o.norm_spacing;
    let grid = Arc::new(Grid::with_spacing(ext.clone(), dt, dx, dv)?);
    let field = ScalarField::from_fn(grid.clone(), f);
    let grad = field.grad_v_norm();
    let grad_l2 = (grad.values.iter().map(|g| g * g).sum::<f64>() * grid.cell_volume()).sqrt();
    let h_norm = match h {
        HSpec::Zero => 0.0,
        HSpec::Transport => {
            let e = 1e-5;
            let hf = ScalarField::from_fn(grid.clone(), |t, x, v| {
                let mut r = (f(t + e, x, v) - f(t - e, x, v)) / (2.0 * e);
                for k in 0..d {
                    let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
                    xp[k] += e;
                    xm[k] -= e;
                    r += v[k] * (f(t, &xp, v) - f(t, &xm, v)) / (2.0 * e);
                }
                r
            });
            h_minus1_norm(HInput::Raw(&hf), &ext)?
        }
        HSpec::Split { h0, h1 } => {
            if h1.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: h1.len(),
                });
            }
            let input = NegSobolevInput::new(
                ScalarField::from_fn(grid.clone(), |t, x, v| h0(t, x, v)),
                h1.iter()
                    .map(|c| ScalarField::from_fn(grid.clone(), |t, x, v| c(t, x, v)))
                    .collect(),
            )?;
            h_minus1_norm(HInput::Split(&input), &ext)?
        }
    };
    Ok((grad_l2, h_norm))
}

fn l2_positive_part_on_q1(
    f: PhaseClosure<'_>,
    grid: &Grid,
    nodes: &[(usize, f64)],
    shift: impl Fn(usize, f64) -> f64,
) -> f64 {
    let s: f64 = nodes
        .iter()
        .map(|&(idx, h)| {
            let (t, x, v) = grid.coords(idx);
            let p = (f(t, x, v) - shift(idx, h)).max(0.0);
            p * p
        })
        .sum();
    (s * grid.cell_volume()).sqrt()
}

/// `‖(f - θ0 M)_+‖_{L²(Q_1)} ≤ C (‖∇v f‖_{L²(Q_ext)} + ‖H‖_{L²H⁻¹(Q_ext)})`.
pub fn verify_weak_poincare(
    d: usize,
    f: PhaseClosure<'_>,
    h: &HSpec,
    o: &PoincareOptions,
) -> Result<VerificationReport> {
    let loc = localization_bound(d, f, &o.localization)?;
    let grid = loc.grid.clone().expect("grid kept");
    let big_m = loc.sup_f;
    let lhs = l2_positive_part_on_q1(f, &grid, &loc.h_q1, |_, _| loc.theta0 * big_m);
    let lhs_emp = l2_positive_part_on_q1(f, &grid, &loc.h_q1, |_, _| loc.theta0_empirical * big_m);
    let (grad, hn) = poincare_rhs(d, f, h, o)?;
    let mut r = VerificationReport::new("weak-poincare", "weak Poincaré inequality", lhs, grad + hn)
        .param("theta0", loc.theta0)
        .param("theta0_empirical", loc.theta0_empirical)
        .param("ln_delta0", loc.ln_delta0)
        .param("M", big_m)
        .param("R", o.localization.big_r)
        .param("eta", o.localization.eta)
        .param("grad_v_l2", grad)
        .param("H_norm", hn)
        .param("lhs_empirical_theta0", lhs_emp);
    r.hypothesis("f ≥ 0 on Q_ext", true);
    r.hypothesis("|{f = 0} ∩ Q_zero| ≥ α0 |Q_zero|", true);
    r.hypothesis("f ≤ M on Q_1", true);
    if loc.theta0 == 1.0 {
        r.note("δ0 underflows double precision, so θ0 rounds to 1; see theta0_empirical");
    }
    r.pass = r.lhs == 0.0 || r.fitted_c.is_some_and(f64::is_finite);
    Ok(r)
}

/// `‖(f - h)_+‖_{L²(Q_1)} ≤ C (‖∇v f‖ + ‖H‖)` with `h` solving
/// `L_K h = f L_K Ψ`.
pub fn verify_local_poincare(
    d: usize,
    f: PhaseClosure<'_>,
    h: &HSpec,
    o: &PoincareOptions,
) -> Result<VerificationReport> {
    let lo = &o.localization;
    let loc = localization_bound(d, f, lo)?;
    let grid = loc.grid.clone().expect("grid kept");
    let lhs = l2_positive_part_on_q1(f, &grid, &loc.h_q1, |_, h| h);
    let (grad, hn) = poincare_rhs(d, f, h, o)?;
    let psi_grad = build_cutoff(lo.eta, lo.lap, lo.big_r)?.grad_v_sup();
    let mut r = VerificationReport::new(
        "local-poincare",
        "local Poincaré estimate with localization error",
        lhs,
        grad + hn,
    )
    .param("R", lo.big_r)
    .param("eta", lo.eta)
    .param("grad_v_psi_sup", psi_grad)
    .param("grad_v_l2", grad)
    .param("H_norm", hn)
    .param("decomposition_error", loc.decomposition_error);
    r.hypothesis("f ≥ 0 on Q_ext", true);
    r.pass = r.lhs == 0.0 || r.fitted_c.is_some_and(f64::is_finite);
    Ok(r)
}

/// Settings for [`verify_expansion_of_positivity`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopOptions {
    pub theta: f64,
    pub epsilon: f64,
    /// Largest admissible `‖S‖_∞`.
    pub eta0: f64,
    /// Quadrature nodes per axis.
    pub n: usize,
}

impl PopOptions {
    pub fn new(theta: f64) -> Self {
        PopOptions {
            theta,
            epsilon: crate::logtransform::DEFAULT_EPSILON,
            eta0: 1e-3,
            n: 64,
        }
    }
}

/// `ln(ε^{(2+θ0)/3} - ε)` for `θ0 = 1 - δ0/2`, accurate when `δ0` underflows.
pub fn pop_formula_ln_ell0(ln_delta0: f64, epsilon: f64) -> f64 {
    // ε^{(2+θ0)/3} - ε = ε · expm1(δ0/6 · ln(1/ε)).
    let ln_x = ln_delta0 - 6f64.ln() + (-epsilon.ln()).ln();
    let ln_expm1 = if ln_x < -30.0 { ln_x } else { ln_x.exp().exp_m1().ln() };
    epsilon.ln() + ln_expm1
}

/// `|{f ≥ 1} ∩ Q_pos| ≥ ½|Q_pos|` implies `f ≥ ℓ0` on `Q_1`.
pub fn verify_expansion_of_positivity(
    d: usize,
    f: PhaseClosure<'_>,
    s_sup: f64,
    o: &PopOptions,
) -> Result<VerificationReport> {
    let pp = crate::geometry::pop_parameters(o.theta)?;
    crate::logtransform::ConvexLogTransform::new(o.epsilon)?;
    if s_sup > o.eta0 {
        return Err(Error::hypothesis("‖S‖_∞ ≤ η0", format!("‖S‖ = {s_sup} > {}", o.eta0)));
    }
    let qp = q_pos(d, o.theta)?;
    let pos_vals = eval_all(f, &box_nodes(&qp, o.n));
    require_nonnegative("f", &pos_vals)?;
    let frac = fraction(&pos_vals, |v| v >= 1.0);
    if frac < 0.5 {
        return Err(Error::hypothesis(
            "|{f ≥ 1} ∩ Q_pos| ≥ ½|Q_pos|",
            format!("measured fraction {frac:.4}"),
        ));
    }
    let q1_vals = eval_all(f, &cylinder_nodes(&q_one(d), o.n));
    require_nonnegative("f", &q1_vals)?;
    let ell0 = min_of(&q1_vals);
    let ln_m = kernel_log_min(d, pp.eta, pp.lap);
    let ln_delta0 = ln_m + (crate::geometry::q_zero(d, pp.eta)?.volume() / 8.0).ln();
    let theta0 = 1.0 - 0.5 * ln_delta0.exp();
    let formula = o.epsilon.powf((2.0 + theta0) / 3.0) - o.epsilon;
    let mut r = VerificationReport::new("pop", "expansion of positivity", ell0, 0.0)
        .param("theta", o.theta)
        .param("iota", pp.iota)
        .param("eta", pp.eta)
        .param("epsilon", o.epsilon)
        .param("eta0", o.eta0)
        .param("S_sup", s_sup)
        .param("pos_fraction", frac)
        .param("ell0_empirical", ell0)
        .param("ell0_formula", formula)
        .param("ln_ell0_formula", pop_formula_ln_ell0(ln_delta0, o.epsilon))
        .param("theta0", theta0)
        .param("ln_delta0", ln_delta0);
    r.hypothesis("|{f ≥ 1} ∩ Q_pos| ≥ ½|Q_pos|", true);
    r.hypothesis("‖S‖_∞ ≤ η0", true);
    r.pass = ell0 > 0.0;
    Ok(r)
}

/// Kernel mixture with bases before the positivity domain, scaled so that
/// `{f ≥ 1}` fills 60% of `Q_pos`.
pub fn pop_ensemble_member(seed: u64, d: usize, theta: f64, n: usize) -> Result<KernelMixture> {
    let t_start = -1.0 - theta * theta;
    let k = KernelMixture::random(
        seed,
        d,
        1 + (seed % 4) as usize,
        (t_start - 0.4, t_start - 0.05),
        0.3,
        0.8,
    );
    let qp = q_pos(d, theta)?;
    let f = |t: f64, x: &[f64], v: &[f64]| k.eval(t, x, v);
    let mut vals = eval_all(&f, &box_nodes(&qp, n));
    vals.sort_by(f64::total_cmp);
    let q40 = vals[(vals.len() * 2) / 5];
    if !(q40 > 0.0) {
        return Err(Error::Numerical("kernel mixture vanishes on Q_pos".into()));
    }
    Ok(k.scaled(1.0 / q40))
}

/// `|{f ≥ M} ∩ Q_1| ≥ ½|Q_1|` implies `f ≥ 1` on `(0, m] × B_{m+2} × B_1`.
pub fn verify_minima_measure(
    d: usize,
    f: PhaseClosure<'_>,
    m: f64,
    big_m: f64,
    n: usize,
) -> Result<VerificationReport> {
    if !(m >= 3.0) {
        return Err(Error::param("m", format!("need m ≥ 3, got {m}")));
    }
    if !(big_m > 0.0 && big_m.is_finite()) {
        return Err(Error::param("M", "need a finite M > 0"));
    }
    let q1_vals = eval_all(f, &cylinder_nodes(&q_one(d), n));
    require_nonnegative("f", &q1_vals)?;
    let frac = fraction(&q1_vals, |v| v >= big_m);
    if frac < 0.5 {
        return Err(Error::hypothesis(
            "|{f ≥ M} ∩ Q_1| ≥ ½|Q_1|",
            format!("measured fraction {frac:.4}"),
        ));
    }
    let target = BoxCylinder::centered(d, 0.0, m, m + 2.0, 1.0)?;
    let vals = eval_all(f, &box_nodes(&target, n));
    let inf = min_of(&vals);
    let mut r = VerificationReport::new("minima-measure", "measure-to-minimum over long times", inf, 1.0)
        .param("m", m)
        .param("theta", m.powf(-0.5))
        .param("M", big_m)
        .param("fraction", frac);
    r.hypothesis("|{f ≥ M} ∩ Q_1| ≥ ½|Q_1|", true);
    r.pass = inf >= 1.0;
    Ok(r)
}

/// `|{f ≥ A} ∩ Q_r(z0)| ≥ ½|Q_r(z0)|` with `Q_r(z0) ⊂ Q_-` implies
/// `f ≥ A (r²/4)^{p0}` on `Q_+`, `p0 = -log₄ ℓ0`.
#[allow(clippy::too_many_arguments)]
pub fn verify_pop_large_times(
    d: usize,
    f: PhaseClosure<'_>,
    z0: &PhasePoint,
    r: f64,
    a: f64,
    omega: f64,
    ell0: f64,
    n: usize,
) -> Result<VerificationReport> {
    if !(ell0 > 0.0 && ell0 < 1.0) {
        return Err(Error::param("ell0", format!("need ℓ0 ∈ (0, 1), got {ell0}")));
    }
    let seq = stack_cylinders(z0, r, omega)?;
    let base = Cylinder::new(z0.clone(), r)?;
    let base_vals = eval_all(f, &cylinder_nodes(&base, n));
    require_nonnegative("f", &base_vals)?;
    let frac = fraction(&base_vals, |v| v >= a);
    if frac < 0.5 {
        return Err(Error::hypothesis(
            "|{f ≥ A} ∩ Q_r(z0)| ≥ ½|Q_r(z0)|",
            format!("measured fraction {frac:.4}"),
        ));
    }
    let p0 = -ell0.ln() / 4f64.ln();
    let bound = a * (r * r / 4.0).powf(p0);
    let inf = min_of(&eval_all(f, &cylinder_nodes(&q_plus(d, omega)?, n)));
    let mut rep = VerificationReport::new("pop-large-times", "positivity carried to later times", inf, bound)
        .param("r", r)
        .param("A", a)
        .param("omega", omega)
        .param("ell0", ell0)
        .param("p0", p0)
        .param("N", seq.n as f64)
        .param("fraction", frac);
    rep.hypothesis("Q_r(z0) ⊂ Q_-", true);
    rep.hypothesis("measure on Q_r(z0)", true);
    rep.pass = inf >= bound;
    Ok(rep)
}

/// Cylinders of the Harnack statements, possibly moved by a Galilean
/// `frame`, and the domain radius `R0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnackGeometry {
    pub d: usize,
    pub omega: f64,
    /// Radius of `Q⁰ = (-1, 0] × B_{R0} × B_{R0}`.
    pub r0: f64,
    /// Localization radius used by the positivity step.
    pub big_r: f64,
    pub m: f64,
    pub frame: PhasePoint,
}

impl HarnackGeometry {
    pub fn new(d: usize, omega: f64, big_r: f64) -> Self {
        HarnackGeometry {
            d,
            omega,
            r0: 18.0 * big_r,
            big_r,
            m: 3.0,
            frame: PhasePoint::origin(d),
        }
    }

    pub fn with_frame(mut self, z0: PhasePoint) -> Self {
        self.frame = z0;
        self
    }

    fn moved(&self, q: Cylinder) -> Result<Cylinder> {
        Cylinder::new(self.frame.compose(&q.center)?, q.r)
    }

    pub fn q_plus(&self) -> Result<Cylinder> {
        self.moved(q_plus(self.d, self.omega)?)
    }

    pub fn q_minus(&self) -> Result<Cylinder> {
        self.moved(q_minus(self.d, self.omega)?)
    }

    /// Box containing the image of `Q⁰` under the frame.
    pub fn q0_box(&self) -> Result<BoxCylinder> {
        let z = &self.frame;
        BoxCylinder::new(
            z.t - 1.0,
            z.t,
            z.x.clone(),
            self.r0 + crate::geometry::norm(&z.v),
            z.v.clone(),
            self.r0,
        )
    }

    /// `R0 ≥ 18 R` and `R0 ≥ 9 R m^{3/2} ω³`.
    pub fn gates(&self) -> Vec<(&'static str, bool)> {
        vec![
            ("R0 ≥ 18 R", self.r0 >= 18.0 * self.big_r),
            (
                "R0 ≥ 9 R m^{3/2} ω³",
                self.r0 >= 9.0 * self.big_r * self.m.powf(1.5) * self.omega.powi(3),
            ),
        ]
    }
}

fn check_gates(geom: &HarnackGeometry) -> Result<()> {
    for (name, ok) in geom.gates() {
        if !ok {
            return Err(Error::hypothesis(name, format!("R0 = {}, R = {}", geom.r0, geom.big_r)));
        }
    }
    Ok(())
}

/// `(∫_{Q_-} f^p)^{1/p} ≤ C (inf_{Q_+} f + ‖S‖_{L∞(Q_+)})`, evaluated for
/// `f̃ = f + ‖S‖_∞ (t - t_frame + 1)`.
pub fn verify_weak_harnack(
    f: PhaseClosure<'_>,
    s_sup: f64,
    p: f64,
    geom: &HarnackGeometry,
    n: usize,
) -> Result<VerificationReport> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::param("p", format!("need p > 0, got {p}")));
    }
    if !(s_sup >= 0.0) {
        return Err(Error::param("S", "need ‖S‖_∞ ≥ 0"));
    }
    check_gates(geom)?;
    let t_frame = geom.frame.t;
    let ft = |t: f64, x: &[f64], v: &[f64]| f(t, x, v) + s_sup * (t - t_frame + 1.0);
    let qm = geom.q_minus()?;
    let qp = geom.q_plus()?;
    let minus = eval_all(&ft, &cylinder_nodes(&qm, n));
    require_nonnegative("f", &minus)?;
    let plus = eval_all(&ft, &cylinder_nodes(&qp, n));
    require_nonnegative("f", &plus)?;
    let mean_p = minus.iter().map(|v| v.powf(p)).sum::<f64>() / minus.len() as f64;
    let lhs = (qm.volume() * mean_p).powf(1.0 / p);
    let inf = min_of(&plus);
    let mut r = VerificationReport::new("weak-harnack", "weak Harnack inequality", lhs, inf + s_sup)
        .param("p", p)
        .param("omega", geom.omega)
        .param("R0", geom.r0)
        .param("R", geom.big_r)
        .param("m", geom.m)
        .param("S_sup", s_sup)
        .param("inf_q_plus", inf)
        .param("q_minus_volume", qm.volume());
    for (name, ok) in geom.gates() {
        r.hypothesis(name, ok);
    }
    r.pass = r.fitted_c.is_some_and(f64::is_finite);
    Ok(r)
}

/// `sup_{Q_-} f ≤ C (inf_{Q_+} f + ‖S‖_{L∞(Q⁰)})`, reported with its two
/// factors: `sup_{Q_-} f / ‖f‖_{L²(Q_-)}` (local boundedness) and the weak
/// Harnack constant at `p = 2`.
pub fn verify_harnack(f: PhaseClosure<'_>, s_sup: f64, geom: &HarnackGeometry, n: usize) -> Result<VerificationReport> {
    let wh = verify_weak_harnack(f, s_sup, 2.0, geom, n)?;
    let qm = geom.q_minus()?;
    let minus = eval_all(f, &cylinder_nodes(&qm, n));
    let sup = max_of(&minus);
    let l2 = (qm.volume() * minus.iter().map(|v| v * v).sum::<f64>() / minus.len() as f64).sqrt();
    let inf = wh.params["inf_q_plus"];
    let mut r = VerificationReport::new("harnack", "Harnack inequality", sup, inf + s_sup)
        .param("omega", geom.omega)
        .param("R0", geom.r0)
        .param("S_sup", s_sup)
        .param("local_bound_factor", if l2 > 0.0 { sup / l2 } else { 0.0 })
        .param("weak_harnack_factor", wh.fitted_c.unwrap_or(f64::NAN));
    r.hypotheses = wh.hypotheses.clone();
    r.pass = r.fitted_c.is_some_and(f64::is_finite);
    Ok(r)
}

/// Result of [`estimate_holder`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HolderEstimate {
    pub radii: Vec<f64>,
    pub osc: Vec<f64>,
    /// Per level: `"f"` if `{f ≤ 1}` covers at most half of the lower
    /// reference box, `"2-f"` otherwise.
    pub branches: Vec<String>,
    pub alpha_fit: Option<f64>,
    pub r_squared: Option<f64>,
    pub strictly_decreasing: bool,
    pub report: VerificationReport,
}

/// Oscillation of the normalized `1 + f/(‖f‖_∞ + ‖S‖/η0)` on `Q_{R̄^{-k}}`,
/// `k = 0..levels`, with a geometric fit.
pub fn estimate_holder(
    d: usize,
    f: PhaseClosure<'_>,
    s_sup: f64,
    eta0: f64,
    r_bar: f64,
    levels: usize,
    n: usize,
) -> Result<HolderEstimate> {
    if !(r_bar >= 2f64.sqrt()) {
        return Err(Error::param(
            "R̄",
            "need R̄ ≥ √2 so each level contains the next reference box",
        ));
    }
    if levels < 2 {
        return Err(Error::param("levels", "need at least two levels"));
    }
    let radii: Vec<f64> = (0..levels).map(|k| r_bar.powi(-(k as i32))).collect();
    if radii.iter().any(|&r| r.powi(3) < 1e-15) {
        return Err(Error::Numerical(
            "levels reach the resolution of double precision".into(),
        ));
    }
    let outer = eval_all(f, &cylinder_nodes(&Cylinder::centered(d, radii[0])?, n));
    let scale = outer.iter().fold(0.0f64, |a, v| a.max(v.abs())) + s_sup / eta0;
    let norm = |v: f64| if scale > 0.0 { 1.0 + v / scale } else { 1.0 };
    let mut osc = Vec::with_capacity(levels);
    let mut branches = Vec::with_capacity(levels);
    for (k, &rho) in radii.iter().enumerate() {
        let vals: Vec<f64> = eval_all(f, &cylinder_nodes(&Cylinder::centered(d, rho)?, n))
            .into_iter()
            .map(norm)
            .collect();
        let (lo, hi) = (min_of(&vals), max_of(&vals));
        let o = hi - lo;
        osc.push(o);
        let inner = if k + 1 < levels { radii[k + 1] } else { rho / r_bar };
        let reference = BoxCylinder::centered(d, -2.0, -1.0, 1.0, 1.0)?;
        let nodes: Vec<PhasePoint> = box_nodes(&reference, n.min(16))
            .into_iter()
            .map(|z| z.scale(inner).expect("positive radius"))
            .collect();
        let g: Vec<f64> = eval_all(f, &nodes)
            .into_iter()
            .map(|v| if o > 0.0 { 2.0 * (norm(v) - lo) / o } else { 0.0 })
            .collect();
        branches.push(if fraction(&g, |v| v <= 1.0) <= 0.5 { "f" } else { "2-f" }.to_string());
    }
    let strictly_decreasing = osc.windows(2).all(|w| w[1] < w[0]);
    let constant = osc.iter().all(|&o| o == 0.0);
    let (alpha_fit, r_squared) = if osc.iter().all(|&o| o > 0.0) {
        let ys: Vec<f64> = osc.iter().map(|o| o.ln()).collect();
        let xs: Vec<f64> = (0..levels).map(|k| k as f64).collect();
        let (slope, r2) = linear_fit(&xs, &ys);
        (Some(-slope / r_bar.ln()), Some(r2))
    } else {
        (None, None)
    };
    let mut report = VerificationReport::new("holder", "oscillation decay", osc[levels - 1], osc[0])
        .param("R_bar", r_bar)
        .param("levels", levels as f64)
        .param("S_sup", s_sup);
    if let Some(a) = alpha_fit {
        report = report.param("alpha_fit", a);
    }
    if let Some(r2) = r_squared {
        report = report.param("r_squared", r2);
    }
    report.pass = constant || (strictly_decreasing && r_squared.is_some_and(|r| r >= 0.9));
    if constant {
        report.note("constant function: zero oscillation at every level");
    }
    Ok(HolderEstimate {
        radii,
        osc,
        branches,
        alpha_fit,
        r_squared,
        strictly_decreasing,
        report,
    })
}

/// Least-squares slope and coefficient of determination.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, r2)
}

/// Spacing of a solver run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dt: f64,
    pub dx: f64,
    pub dv: f64,
}

impl Spacing {
    pub fn halved(self) -> Self {
        Spacing {
            dt: self.dt / 2.0,
            dx: self.dx / 2.0,
            dv: self.dv / 2.0,
        }
    }
}

pub type BumpSpec = (f64, Vec<f64>, Vec<f64>, f64, f64);

/// Random nonnegative initial data and optional nonnegative source for a
/// weak-Harnack ensemble member, in the frame's local coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberData {
    /// `(amplitude, x center, v center, x radius, v radius)`.
    pub bumps: Vec<BumpSpec>,
    pub source: Option<(f64, Vec<f64>, Vec<f64>)>,
}

fn b3(s: f64) -> f64 {
    if s >= 1.0 {
        0.0
    } else {
        (1.0 - s * s).powi(3)
    }
}

impl MemberData {
    pub fn random(seed: u64, d: usize, with_source: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 1 + rng.random_range(0..3);
        // The first bump covers the origin so `Q_-` never sits on the edge
        // of the support; the rest are placed freely.
        let bumps = (0..k)
            .map(|i| {
                let spread = if i == 0 { 0.3 } else { 1.5 };
                let r_lo = if i == 0 { 1.5 } else { 1.0 };
                let a = rng.random_range(0.5..1.5);
                let c: Vec<f64> = (0..d).map(|_| rng.random_range(-spread..spread)).collect();
                let w: Vec<f64> = (0..d).map(|_| rng.random_range(-spread..spread)).collect();
                (a, c, w, rng.random_range(r_lo..2.5), rng.random_range(r_lo..2.5))
            })
            .collect();
        let source = with_source.then(|| {
            (
                rng.random_range(0.05..0.3),
                (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
        });
        MemberData { bumps, source }
    }

    pub fn initial(&self, x: &[f64], v: &[f64]) -> f64 {
        self.bumps
            .iter()
            .map(|(a, c, w, rx, rv)| a * b3(crate::geometry::dist(x, c) / rx) * b3(crate::geometry::dist(v, w) / rv))
            .sum()
    }

    pub fn source(&self, x: &[f64], v: &[f64]) -> f64 {
        match &self.source {
            Some((a, c, w)) => a * b3(crate::geometry::dist(x, c) / 2.0) * b3(crate::geometry::dist(v, w) / 2.0),
            None => 0.0,
        }
    }

    pub fn source_sup(&self) -> f64 {
        self.source.as_ref().map_or(0.0, |s| s.0)
    }
}

/// Solve one ensemble member on the box containing the frame's `Q⁰` with
/// zero boundary data; coefficients are pushed forward by the frame.
pub fn run_member(
    data: &MemberData,
    coefficients: &CoefficientField,
    geom: &HarnackGeometry,
    spacing: Spacing,
) -> Result<TrajectoryInterp> {
    let grid = Arc::new(Grid::with_spacing(geom.q0_box()?, spacing.dt, spacing.dx, spacing.dv)?);
    let frame = geom.frame.clone();
    let inv = frame.inverse();
    let to_local = move |t: f64, x: &[f64], v: &[f64]| -> PhasePoint {
        inv.compose(&PhasePoint {
            t,
            x: x.to_vec(),
            v: v.to_vec(),
        })
        .expect("dimensions agree")
    };
    let coeffs = if frame.max_abs_diff(&PhasePoint::origin(geom.d)) == 0.0 {
        coefficients.clone()
    } else {
        coefficients.pushforward(&frame)?
    };
    let t0 = grid.domain.t_lo;
    let d0 = data.clone();
    let loc0 = to_local.clone();
    let mut config = SolverConfig::new(grid, coeffs).with_initial(move |x, v| {
        let w = loc0(t0, x, v);
        d0.initial(&w.x, &w.v)
    });
    config.boundary = Boundary::zero();
    if data.source.is_some() {
        let d1 = data.clone();
        config = config.with_source(Source::Fn(phase_fn(move |t, x, v| {
            let w = to_local(t, x, v);
            d1.source(&w.x, &w.v)
        })));
    }
    Ok(TrajectoryInterp::new(crate::fpsolver::solve(&config)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{make_coefficients, CoefficientKind};
    use crate::geometry::PhaseRegion;

    #[test]
    fn quadrature_nodes_lie_in_their_regions() {
        let q = Cylinder::new(PhasePoint::new1(-0.3, 0.1, 0.4), 0.5).unwrap();
        let nodes = cylinder_nodes(&q, 8);
        assert_eq!(nodes.len(), 512);
        assert!(nodes.iter().all(|z| q.contains(z)));
        let b = BoxCylinder::centered(2, -1.0, 0.0, 2.0, 1.0).unwrap();
        assert!(box_nodes(&b, 6).iter().all(|z| b.contains(z)));
    }

    #[test]
    fn kernel_mixture_solves_the_equation() {
        let k = KernelMixture::random(3, 1, 3, (-2.0, -1.5), 0.5, 0.5);
        let f = |t: f64, x: &[f64], v: &[f64]| k.eval(t, x, v);
        let h = 1e-3;
        let (t, x, v) = (-0.5, [0.3], [-0.2]);
        let lk = (f(t + h, &x, &v) - f(t - h, &x, &v)) / (2.0 * h)
            + v[0] * (f(t, &[x[0] + h], &v) - f(t, &[x[0] - h], &v)) / (2.0 * h)
            - (f(t, &x, &[v[0] + h]) - 2.0 * f(t, &x, &v) + f(t, &x, &[v[0] - h])) / (h * h);
        assert!(lk.abs() < 1e-4 * (1.0 + f(t, &x, &v)));
    }

    #[test]
    fn interpolation_is_exact_on_affine_data() {
        let dom = BoxCylinder::centered(1, -1.0, 0.0, 2.0, 2.0).unwrap();
        let grid = Arc::new(Grid::new(dom, 4, 8, 8).unwrap());
        let lin = |t: f64, x: &[f64], v: &[f64]| 1.0 + 2.0 * t + 0.5 * x[0] - v[0];
        let field = ScalarField::from_fn(grid.clone(), lin);
        let nv = grid.nv_total();
        let initial = (0..grid.slice_len())
            .map(|k| lin(-1.0, grid.x_node(k / nv), grid.v_node(k % nv)))
            .collect();
        let it = TrajectoryInterp::new(Trajectory { initial, field });
        for &(t, x, v) in &[(-0.9, 0.3, -0.7), (-0.55, -1.2, 1.1), (-1.0, 0.0, 0.0)] {
            assert!((it.eval(t, &[x], &[v]) - lin(t, &[x], &[v])).abs() < 1e-12);
        }
    }

    #[test]
    fn weak_harnack_constant_fixture() {
        let geom = HarnackGeometry::new(1, 1e-2, 4.0);
        let c = 2.5;
        let f = |_: f64, _: &[f64], _: &[f64]| c;
        for &p in &[0.5, 1.0, 2.0] {
            let r = verify_weak_harnack(&f, 0.0, p, &geom, 6).unwrap();
            let exact = geom.q_minus().unwrap().volume().powf(1.0 / p);
            assert!((r.fitted_c.unwrap() - exact).abs() <= 1e-10 * exact);
        }
        let small = HarnackGeometry { r0: 10.0, ..geom };
        assert!(verify_weak_harnack(&f, 0.0, 1.0, &small, 4)
            .unwrap_err()
            .is_hypothesis());
    }

    #[test]
    fn harnack_constant_fixture() {
        let geom = HarnackGeometry::new(1, 1e-2, 4.0);
        let f = |_: f64, _: &[f64], _: &[f64]| 3.0;
        let r = verify_harnack(&f, 0.0, &geom, 4).unwrap();
        assert!((r.fitted_c.unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn holder_constant_and_kernel() {
        let f = |_: f64, _: &[f64], _: &[f64]| 1.0;
        let h = estimate_holder(1, &f, 0.0, 1e-3, 2.0, 4, 8).unwrap();
        assert!(h.osc.iter().all(|&o| o == 0.0) && h.report.pass);
        let k = KolmogorovKernel::new(PhasePoint::new1(-2.0, 0.3, 0.4));
        let g = |t: f64, x: &[f64], v: &[f64]| k.at(t, x, v);
        let h = estimate_holder(1, &g, 0.0, 1e-3, 2.0, 5, 10).unwrap();
        assert!(h.strictly_decreasing, "{:?}", h.osc);
        assert!(h.r_squared.unwrap() >= 0.9);
        assert_eq!(h.branches.len(), 5);
    }

    #[test]
    fn minima_measure_constant() {
        let f = |_: f64, _: &[f64], _: &[f64]| 5.0;
        let r = verify_minima_measure(1, &f, 3.0, 5.0, 6).unwrap();
        assert!(r.pass);
        assert!(verify_minima_measure(1, &f, 3.0, 6.0, 6).unwrap_err().is_hypothesis());
        assert!(verify_minima_measure(1, &f, 2.0, 5.0, 6).is_err());
    }

    #[test]
    fn pop_trivial_and_gate() {
        let one = |_: f64, _: &[f64], _: &[f64]| 1.0;
        let r = verify_expansion_of_positivity(
            1,
            &one,
            0.0,
            &PopOptions {
                n: 8,
                ..PopOptions::new(0.5)
            },
        )
        .unwrap();
        assert!(r.pass && r.lhs >= 1.0);
        let half = |_: f64, _: &[f64], _: &[f64]| 0.5;
        let e = verify_expansion_of_positivity(
            1,
            &half,
            0.0,
            &PopOptions {
                n: 8,
                ..PopOptions::new(0.5)
            },
        )
        .unwrap_err();
        assert!(e.is_hypothesis());
    }

    #[test]
    fn pop_formula_log_matches_direct_when_representable() {
        let eps: f64 = 0.01;
        let delta0: f64 = 0.3;
        let theta0 = 1.0 - delta0 / 2.0;
        let direct = eps.powf((2.0 + theta0) / 3.0) - eps;
        assert!((pop_formula_ln_ell0(delta0.ln(), eps) - direct.ln()).abs() < 1e-12);
    }

    #[test]
    fn pop_large_times_constant() {
        let f = |_: f64, _: &[f64], _: &[f64]| 2.0;
        let z0 = PhasePoint::new1(-1.0 + 0.5e-4, 0.0, 0.0);
        let r = verify_pop_large_times(1, &f, &z0, 5e-3, 2.0, 1e-2, 0.1, 6).unwrap();
        assert!(r.pass);
        assert!(r.params["N"] >= 1.0);
    }

    #[test]
    fn member_run_is_nonnegative_and_galilean_frame_moves_data() {
        let geom = HarnackGeometry::new(1, 1e-2, 0.5);
        let coeffs = make_coefficients(CoefficientKind::Checkerboard { cell: 1.0 }, 1, 1.0, 4.0).unwrap();
        let data = MemberData::random(1, 1, true);
        let sp = Spacing {
            dt: 0.1,
            dx: 0.5,
            dv: 0.5,
        };
        let a = run_member(&data, &coeffs, &geom, sp).unwrap();
        assert!(a.trajectory.field.values.iter().all(|&v| v >= -1e-12));
        let z0 = PhasePoint::new1(0.0, 0.5, 0.0);
        let moved = run_member(&data, &coeffs, &geom.clone().with_frame(z0.clone()), sp).unwrap();
        let w = PhasePoint::new1(-0.5, 0.0, 0.0);
        let z = z0.compose(&w).unwrap();
        let (u, v) = (a.eval(w.t, &w.x, &w.v), moved.eval(z.t, &z.x, &z.v));
        assert!((u - v).abs() < 1e-9 * (1.0 + u.abs()), "{u} vs {v}");
    }
}
