//! Splitting solver for `(∂t + v·∇x) f = ∇v·(A ∇v f) + B·∇v f + S`.
//!
//! One step from `t_n` to `t_{n+1}`:
//!
//! 1. semi-Lagrangian transport `f(x - Δt v, v)` with linear interpolation,
//!    dimension by dimension;
//! 2. explicit upwind drift `B·∇v f`;
//! 3. `+ Δt S(t_{n+1})`;
//! 4. implicit divergence-form diffusion, one tridiagonal solve per velocity
//!    line, with `A` on faces by harmonic averaging.
//!
//! Every stage is a convex combination or an M-matrix inverse, so the scheme
//! is monotone: nonnegative data and sources give nonnegative solutions.

use std::sync::Arc;

use rayon::prelude::*;

use crate::fields::{thomas, CoefficientField, Grid, ScalarField};
use crate::geometry::{BoxCylinder, PhasePoint};
use crate::report::VerificationReport;
use crate::{Error, Result};

/// A function of `(t, x, v)`.
pub type PhaseFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;

pub fn phase_fn(f: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static) -> PhaseFn {
    Arc::new(f)
}

#[derive(Clone)]
pub enum Boundary {
    /// Values outside the grid are taken from an extension function.
    Dirichlet(PhaseFn),
    /// Periodic in `x`, zero flux through the velocity boundary.
    PeriodicZeroFlux,
}

impl Boundary {
    pub fn zero() -> Self {
        Boundary::Dirichlet(phase_fn(|_, _, _| 0.0))
    }

    pub fn constant(c: f64) -> Self {
        Boundary::Dirichlet(phase_fn(move |_, _, _| c))
    }
}

impl std::fmt::Debug for Boundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Boundary::Dirichlet(_) => write!(f, "Dirichlet(..)"),
            Boundary::PeriodicZeroFlux => write!(f, "PeriodicZeroFlux"),
        }
    }
}

#[derive(Clone)]
pub enum Source {
    Zero,
    Fn(PhaseFn),
    /// Values at the grid's time nodes.
    Field(Arc<ScalarField>),
}

impl std::fmt::Debug for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Zero => write!(f, "Zero"),
            Source::Fn(_) => write!(f, "Fn(..)"),
            Source::Field(_) => write!(f, "Field(..)"),
        }
    }
}

impl Source {
    /// `S` at node `idx` of `grid`.
    pub fn at(&self, grid: &Grid, idx: usize) -> f64 {
        match self {
            Source::Zero => 0.0,
            Source::Fn(s) => {
                let (t, x, v) = grid.coords(idx);
                s(t, x, v)
            }
            Source::Field(f) => f.values[idx],
        }
    }

    /// Fill `out` with the source on time slice `it`. Returns false for the
    /// zero source, leaving `out` untouched.
    fn fill_slice(&self, grid: &Grid, it: usize, out: &mut [f64]) -> bool {
        let base = grid.index(it, 0, 0);
        match self {
            Source::Zero => false,
            Source::Field(f) => {
                out.copy_from_slice(&f.values[base..base + grid.slice_len()]);
                true
            }
            Source::Fn(s) => {
                let t = grid.t_node(it);
                let nv = grid.nv_total();
                out.par_iter_mut().enumerate().for_each(|(k, o)| {
                    *o = s(t, grid.x_node(k / nv), grid.v_node(k % nv));
                });
                true
            }
        }
    }

    /// `sup |S|` over the grid nodes.
    pub fn sup_abs(&self, grid: &Grid) -> f64 {
        match self {
            Source::Zero => 0.0,
            Source::Field(f) => f.values.iter().fold(0.0, |m, v| m.max(v.abs())),
            Source::Fn(_) => (0..grid.len()).map(|i| self.at(grid, i).abs()).fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub grid: Arc<Grid>,
    pub coefficients: CoefficientField,
    pub source: Source,
    /// Slice at `t = a`, laid out like one time slice of the grid.
    pub initial: Vec<f64>,
    pub boundary: Boundary,
    pub implicit_diffusion: bool,
    pub cfl_safety: f64,
}

impl SolverConfig {
    /// Zero data, zero source, zero Dirichlet boundary, implicit diffusion.
    pub fn new(grid: Arc<Grid>, coefficients: CoefficientField) -> Self {
        let n = grid.slice_len();
        SolverConfig {
            grid,
            coefficients,
            source: Source::Zero,
            initial: vec![0.0; n],
            boundary: Boundary::zero(),
            implicit_diffusion: true,
            cfl_safety: 0.9,
        }
    }

    pub fn with_initial(mut self, f0: impl Fn(&[f64], &[f64]) -> f64 + Sync) -> Self {
        let g = &self.grid;
        let nv = g.nv_total();
        self.initial = (0..g.slice_len())
            .into_par_iter()
            .map(|k| f0(g.x_node(k / nv), g.v_node(k % nv)))
            .collect();
        self
    }

    pub fn with_source(mut self, s: Source) -> Self {
        self.source = s;
        self
    }

    pub fn with_boundary(mut self, b: Boundary) -> Self {
        self.boundary = b;
        self
    }
}

/// Solution on every time node plus the initial slice.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub initial: Vec<f64>,
    pub field: ScalarField,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// The time-stepping operators of the scheme, reusable with sources supplied
/// step by step.
pub struct Stepper {
    grid: Arc<Grid>,
    coefficients: CoefficientField,
    boundary: Boundary,
    implicit: bool,
    a_nodes: Vec<f64>,
    b_nodes: Vec<f64>,
    cached_cell: Option<i64>,
    scratch: Vec<f64>,
}

impl Stepper {
    pub fn new(
        grid: Arc<Grid>,
        coefficients: CoefficientField,
        boundary: Boundary,
        implicit: bool,
        cfl_safety: f64,
    ) -> Result<Self> {
        if coefficients.d != grid.d {
            return Err(Error::DimensionMismatch {
                expected: grid.d,
                found: coefficients.d,
            });
        }
        if grid.d > 1 && !coefficients.is_isotropic() {
            return Err(Error::Unsupported(
                "anisotropic diffusion matrices are only supported for d = 1".into(),
            ));
        }
        if !(cfl_safety > 0.0 && cfl_safety <= 1.0) {
            return Err(Error::param("cfl_safety", "must lie in (0, 1]"));
        }
        let drift_limit = cfl_safety * grid.dv / coefficients.drift_l1_bound().max(f64::MIN_POSITIVE);
        if grid.dt > drift_limit {
            return Err(Error::Cfl {
                dt: grid.dt,
                limit: drift_limit,
                which: "upwind drift",
            });
        }
        if !implicit {
            let limit = cfl_safety * grid.dv * grid.dv / (2.0 * grid.d as f64 * coefficients.big_lambda);
            if grid.dt > limit {
                return Err(Error::Cfl {
                    dt: grid.dt,
                    limit,
                    which: "explicit diffusion",
                });
            }
        }
        let n = grid.slice_len();
        Ok(Stepper {
            grid,
            coefficients,
            boundary,
            implicit,
            a_nodes: vec![0.0; n],
            b_nodes: Vec::new(),
            cached_cell: None,
            scratch: vec![0.0; n],
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    fn refresh_coefficients(&mut self, t: f64) {
        let cell = self.coefficients.time_cell(t);
        if cell.is_some() && cell == self.cached_cell {
            return;
        }
        let g = &self.grid;
        let nv = g.nv_total();
        let d = g.d;
        let coeffs = &self.coefficients;
        self.a_nodes.par_iter_mut().enumerate().for_each(|(k, a)| {
            *a = coeffs.a_scalar(t, g.x_node(k / nv), g.v_node(k % nv));
        });
        if coeffs.has_drift() {
            self.b_nodes.resize(g.slice_len() * d, 0.0);
            self.b_nodes.par_chunks_mut(d).enumerate().for_each(|(k, b)| {
                b.copy_from_slice(&coeffs.sample(t, g.x_node(k / nv), g.v_node(k % nv)).b);
            });
        }
        self.cached_cell = cell;
    }

    /// `dst = f(x - Δt v, v)` evaluated from `src` at time `t_from`.
    pub fn transport(&self, t_from: f64, src: &[f64], dst: &mut [f64]) {
        let g = &*self.grid;
        dst.copy_from_slice(src);
        let mut buf = vec![0.0; src.len()];
        for k in 0..g.d {
            buf.copy_from_slice(dst);
            self.shift_axis(k, t_from, &buf, dst);
        }
    }

    fn shift_axis(&self, k: usize, t: f64, src: &[f64], dst: &mut [f64]) {
        let g = &*self.grid;
        let n = g.n_x;
        let nv = g.nv_total();
        let stride = g.stride(n, k);
        let x_lo = g.domain.x_center[k] - g.domain.x_radius + 0.5 * g.dx;
        let periodic = matches!(self.boundary, Boundary::PeriodicZeroFlux);
        dst.par_chunks_mut(nv).enumerate().for_each(|(ix, row)| {
            let ik = (ix / stride) % n;
            let line_base = ix - ik * stride;
            let x = g.x_node(ix);
            for (iv, out) in row.iter_mut().enumerate() {
                let v = g.v_node(iv);
                let p = ik as f64 - g.dt * v[k] / g.dx;
                let j = p.floor();
                let w = p - j;
                let j = j as i64;
                let value_at = |jj: i64| -> f64 {
                    if (0..n as i64).contains(&jj) {
                        src[(line_base + jj as usize * stride) * nv + iv]
                    } else if periodic {
                        let jw = jj.rem_euclid(n as i64) as usize;
                        src[(line_base + jw * stride) * nv + iv]
                    } else if let Boundary::Dirichlet(ext) = &self.boundary {
                        let mut xx = x.to_vec();
                        xx[k] = x_lo + jj as f64 * g.dx;
                        ext(t, &xx, v)
                    } else {
                        unreachable!()
                    }
                };
                *out = if w == 0.0 {
                    value_at(j)
                } else {
                    (1.0 - w) * value_at(j) + w * value_at(j + 1)
                };
            }
        });
    }

    /// Boundary value on the velocity face beyond node `iv` along axis `k`.
    fn v_face_value(&self, t: f64, x: &[f64], v: &[f64], k: usize, side: f64) -> f64 {
        match &self.boundary {
            Boundary::Dirichlet(ext) => {
                let mut vv = v.to_vec();
                vv[k] += side * 0.5 * self.grid.dv;
                ext(t, x, &vv)
            }
            Boundary::PeriodicZeroFlux => 0.0,
        }
    }

    /// `f += Δt B·∇v f`, upwinded.
    fn drift(&mut self, t: f64, f: &mut [f64]) {
        if !self.coefficients.has_drift() {
            return;
        }
        self.refresh_coefficients(t);
        let g = self.grid.clone();
        let nv = g.nv_total();
        let d = g.d;
        let src = f.to_vec();
        let zero_flux = matches!(self.boundary, Boundary::PeriodicZeroFlux);
        for (idx, out) in f.iter_mut().enumerate() {
            let (ix, iv) = (idx / nv, idx % nv);
            let m = g.v_multi(iv);
            let mut acc = 0.0;
            for k in 0..d {
                let b = self.b_nodes[idx * d + k];
                if b == 0.0 {
                    continue;
                }
                let stride = g.stride(g.n_v, k);
                let (step, side) = if b > 0.0 { (1i64, 1.0) } else { (-1i64, -1.0) };
                let j = m[k] as i64 + step;
                let nb = if (0..g.n_v as i64).contains(&j) {
                    src[(idx as i64 + step * stride as i64) as usize]
                } else if zero_flux {
                    src[idx]
                } else {
                    // Linear extension through the face value.
                    let face = self.v_face_value(t, g.x_node(ix), g.v_node(iv), k, side);
                    2.0 * face - src[idx]
                };
                acc += b.abs() * (nb - src[idx]) / g.dv;
            }
            *out = src[idx] + g.dt * acc;
        }
    }

    /// Apply `∇v·(A∇v)` at time `t` to `f`, including boundary data.
    pub fn laplacian(&mut self, t: f64, f: &[f64], out: &mut [f64]) {
        self.refresh_coefficients(t);
        out.iter_mut().for_each(|o| *o = 0.0);
        let g = self.grid.clone();
        for k in 0..g.d {
            self.for_each_v_line(k, |this, ix, ids| {
                let (lower, diag, upper, rhs_bc) = this.line_operator(t, ix, ids, k, 1.0);
                let n = ids.len();
                for i in 0..n {
                    let mut s = -diag[i] * f[ids[i]] + rhs_bc[i];
                    if i > 0 {
                        s -= lower[i] * f[ids[i - 1]];
                    }
                    if i + 1 < n {
                        s -= upper[i] * f[ids[i + 1]];
                    }
                    out[ids[i]] += s;
                }
            });
        }
    }

    fn for_each_v_line(&mut self, k: usize, mut body: impl FnMut(&Self, usize, &[usize])) {
        let g = self.grid.clone();
        let n = g.n_v;
        let nv = g.nv_total();
        let stride = g.stride(n, k);
        let mut ids = vec![0usize; n];
        for ix in 0..g.nx_total() {
            for start in 0..nv {
                if !(start / stride).is_multiple_of(n) {
                    continue;
                }
                for (i, id) in ids.iter_mut().enumerate() {
                    *id = ix * nv + start + i * stride;
                }
                body(self, ix, &ids);
            }
        }
    }

    /// Tridiagonal matrix of `-scale · ∇v·(A∇v)` (times `dv²` normalised
    /// out) along one line, plus the boundary contribution to the right-hand
    /// side. Entries follow the sign convention `diag ≥ 0`, off-diagonals `≤ 0`.
    fn line_operator(
        &self,
        t: f64,
        ix: usize,
        ids: &[usize],
        k: usize,
        scale: f64,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let g = &*self.grid;
        let n = ids.len();
        let r = scale / (g.dv * g.dv);
        let a: Vec<f64> = ids.iter().map(|&i| self.a_nodes[i]).collect();
        let mut lower = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        for i in 0..n - 1 {
            let face = r * harmonic(a[i], a[i + 1]);
            upper[i] = -face;
            lower[i + 1] = -face;
            diag[i] += face;
            diag[i + 1] += face;
        }
        if let Boundary::Dirichlet(_) = self.boundary {
            let x = g.x_node(ix);
            for (i, side) in [(0usize, -1.0), (n - 1, 1.0)] {
                let gval = self.v_face_value(t, x, g.v_node(ids[i] % g.nv_total()), k, side);
                diag[i] += 2.0 * r * a[i];
                rhs[i] += 2.0 * r * a[i] * gval;
            }
        }
        (lower, diag, upper, rhs)
    }

    /// Implicit (or explicit, if so configured) diffusion over one step,
    /// with coefficients and boundary data at `t_new`.
    pub fn diffuse(&mut self, t_new: f64, f: &mut [f64]) {
        self.refresh_coefficients(t_new);
        let dt = self.grid.dt;
        if !self.implicit {
            let mut lap = std::mem::take(&mut self.scratch);
            self.laplacian(t_new, f, &mut lap);
            for (v, l) in f.iter_mut().zip(&lap) {
                *v += dt * l;
            }
            self.scratch = lap;
            return;
        }
        let g = self.grid.clone();
        for k in 0..g.d {
            if g.d == 1 {
                // Lines are contiguous: solve them in parallel.
                let nv = g.nv_total();
                let this = &*self;
                f.par_chunks_mut(nv).enumerate().for_each(|(ix, line)| {
                    let ids: Vec<usize> = (0..nv).map(|i| ix * nv + i).collect();
                    let (lower, mut diag, upper, bc) = this.line_operator(t_new, ix, &ids, 0, dt);
                    diag.iter_mut().for_each(|d| *d += 1.0);
                    let rhs: Vec<f64> = line.iter().zip(&bc).map(|(v, b)| v + b).collect();
                    line.copy_from_slice(&thomas(&lower, &diag, &upper, &rhs));
                });
            } else {
                self.for_each_v_line(k, |this, ix, ids| {
                    let (lower, mut diag, upper, bc) = this.line_operator(t_new, ix, ids, k, dt);
                    diag.iter_mut().for_each(|d| *d += 1.0);
                    let rhs: Vec<f64> = ids.iter().zip(&bc).map(|(&i, b)| f[i] + b).collect();
                    let sol = thomas(&lower, &diag, &upper, &rhs);
                    for (&i, s) in ids.iter().zip(sol) {
                        f[i] = s;
                    }
                });
            }
        }
    }

    /// Advance `f` from `t_n = a + n Δt` to `t_{n+1}`; `source` is `S(t_{n+1})`.
    pub fn step(&mut self, n: usize, f: &mut Vec<f64>, source: Option<&[f64]>) -> Result<()> {
        let g = self.grid.clone();
        let t_from = g.domain.t_lo + n as f64 * g.dt;
        let t_new = t_from + g.dt;
        let mut moved = std::mem::take(&mut self.scratch);
        moved.resize(f.len(), 0.0);
        self.transport(t_from, f, &mut moved);
        std::mem::swap(f, &mut moved);
        self.scratch = moved;
        self.drift(t_from, f);
        if let Some(s) = source {
            for (v, s) in f.iter_mut().zip(s) {
                *v += g.dt * s;
            }
        }
        self.diffuse(t_new, f);
        if let Some(pos) = f.iter().position(|v| !v.is_finite()) {
            let (ix, iv) = (pos / g.nv_total(), pos % g.nv_total());
            return Err(Error::Numerical(format!(
                "non-finite value at step {n} (t = {t_new}), x = {:?}, v = {:?}",
                g.x_node(ix),
                g.v_node(iv)
            )));
        }
        Ok(())
    }
}

/// Run the scheme, handing each new time slice to `observer`.
pub fn solve_with(config: &SolverConfig, mut observer: impl FnMut(usize, &[f64])) -> Result<()> {
    let g = config.grid.clone();
    if config.initial.len() != g.slice_len() {
        return Err(Error::DimensionMismatch {
            expected: g.slice_len(),
            found: config.initial.len(),
        });
    }
    let mut stepper = Stepper::new(
        g.clone(),
        config.coefficients.clone(),
        config.boundary.clone(),
        config.implicit_diffusion,
        config.cfl_safety,
    )?;
    let mut f = config.initial.clone();
    let mut src = vec![0.0; g.slice_len()];
    for n in 0..g.n_t {
        let has = config.source.fill_slice(&g, n, &mut src);
        stepper.step(n, &mut f, has.then_some(&src[..]))?;
        observer(n, &f);
    }
    Ok(())
}

pub fn solve(config: &SolverConfig) -> Result<Trajectory> {
    let g = config.grid.clone();
    let mut values = Vec::with_capacity(g.len());
    solve_with(config, |_, slice| values.extend_from_slice(slice))?;
    Ok(Trajectory {
        initial: config.initial.clone(),
        field: ScalarField { grid: g, values },
    })
}

/// Sum of `f` times the phase-space cell volume on one slice.
pub fn slice_mass(grid: &Grid, slice: &[f64]) -> f64 {
    slice.iter().sum::<f64>() * grid.phase_cell_volume()
}

/// Nonnegative `C²` test function
/// `b((t - t_c)/r_t) Π b((x_k - x_{c,k})/r_x) Π b((v_k - v_{c,k})/r_v)` with
/// `b(s) = (1 - s²)³` on `|s| < 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bump {
    pub center: PhasePoint,
    pub rt: f64,
    pub rx: f64,
    pub rv: f64,
}

fn b0(s: f64) -> (f64, f64) {
    if s.abs() >= 1.0 {
        (0.0, 0.0)
    } else {
        let q = 1.0 - s * s;
        (q * q * q, -6.0 * s * q * q)
    }
}

/// Value, transport derivative and velocity gradient of a bump.
pub struct BumpEval {
    pub phi: f64,
    pub transport: f64,
    pub grad_v: Vec<f64>,
}

impl Bump {
    pub fn support(&self) -> BoxCylinder {
        BoxCylinder {
            t_lo: self.center.t - self.rt,
            t_hi: self.center.t + self.rt,
            x_center: self.center.x.clone(),
            x_radius: self.rx * (self.center.dim() as f64).sqrt(),
            v_center: self.center.v.clone(),
            v_radius: self.rv * (self.center.dim() as f64).sqrt(),
        }
    }

    pub fn eval(&self, t: f64, x: &[f64], v: &[f64]) -> BumpEval {
        let d = x.len();
        let (bt, dbt) = b0((t - self.center.t) / self.rt);
        let xs: Vec<(f64, f64)> = (0..d).map(|k| b0((x[k] - self.center.x[k]) / self.rx)).collect();
        let vs: Vec<(f64, f64)> = (0..d).map(|k| b0((v[k] - self.center.v[k]) / self.rv)).collect();
        let px: f64 = xs.iter().map(|p| p.0).product();
        let pv: f64 = vs.iter().map(|p| p.0).product();
        let phi = bt * px * pv;
        if phi == 0.0 && bt == 0.0 {
            return BumpEval {
                phi: 0.0,
                transport: 0.0,
                grad_v: vec![0.0; d],
            };
        }
        let mut transport = dbt / self.rt * px * pv;
        for k in 0..d {
            let others: f64 = (0..d).filter(|&j| j != k).map(|j| xs[j].0).product();
            transport += v[k] * bt * xs[k].1 / self.rx * others * pv;
        }
        let grad_v = (0..d)
            .map(|k| {
                let others: f64 = (0..d).filter(|&j| j != k).map(|j| vs[j].0).product();
                bt * px * vs[k].1 / self.rv * others
            })
            .collect();
        BumpEval { phi, transport, grad_v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeakMode {
    Solution,
    Super,
    Sub,
}

impl WeakMode {
    pub fn accepts(&self, value: f64, tol: f64) -> bool {
        match self {
            WeakMode::Solution => value.abs() <= tol,
            WeakMode::Super => value >= -tol,
            WeakMode::Sub => value <= tol,
        }
    }
}

/// Per test function: the residual and `∫ φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakResidual {
    pub values: Vec<f64>,
    pub masses: Vec<f64>,
}

impl WeakResidual {
    /// Residuals divided by `∫ φ`.
    pub fn normalized(&self) -> Vec<f64> {
        self.values.iter().zip(&self.masses).map(|(v, m)| v / m).collect()
    }

    pub fn all_accept(&self, mode: WeakMode, tol: f64) -> bool {
        self.normalized().iter().all(|&v| mode.accepts(v, tol))
    }
}

/// `-∫ f (∂t + v·∇x)φ + ∫ A∇v f·∇v φ + q ∫ |∇v f|² φ - ∫ (B·∇v f + S) φ`
/// for each test function, by cell quadrature on the grid of `f`.
///
/// `q = 0` gives the weak form of the equation; `q = λ` with `S` replaced by
/// `|S|/ε` gives the form satisfied by the log-transform.
pub fn weak_residual(
    f: &ScalarField,
    coefficients: &CoefficientField,
    source: &Source,
    tests: &[Bump],
    gradient_penalty: f64,
) -> Result<WeakResidual> {
    let g = &*f.grid;
    let d = g.d;
    let grads: Vec<ScalarField> = (0..d).map(|k| f.grad_v(k)).collect();
    let bx = BoxCylinder {
        t_lo: g.domain.t_lo,
        t_hi: g.domain.t_hi,
        x_center: g.domain.x_center.clone(),
        x_radius: g.domain.x_radius * (d as f64).sqrt(),
        v_center: g.domain.v_center.clone(),
        v_radius: g.domain.v_radius * (d as f64).sqrt(),
    };
    let mut values = Vec::with_capacity(tests.len());
    let mut masses = Vec::with_capacity(tests.len());
    for bump in tests {
        let sup = bump.support();
        let inside_t = sup.t_lo >= g.domain.t_lo && sup.t_hi <= g.domain.t_hi;
        let inside_cube = (0..d).all(|k| {
            (bump.center.x[k] - g.domain.x_center[k]).abs() + bump.rx <= g.domain.x_radius
                && (bump.center.v[k] - g.domain.v_center[k]).abs() + bump.rv <= g.domain.v_radius
        });
        if !(inside_t && inside_cube) {
            return Err(Error::param("test function", "support leaves the grid domain"));
        }
        let _ = &bx;
        let cells = g.cells_in(&sup);
        let (mut acc, mut mass) = (0.0, 0.0);
        for idx in cells {
            let (t, x, v) = g.coords(idx);
            let e = bump.eval(t, x, v);
            if e.phi == 0.0 && e.transport == 0.0 {
                continue;
            }
            let s = coefficients.sample(t, x, v);
            let gf: Vec<f64> = grads.iter().map(|c| c.values[idx]).collect();
            let mut diff = 0.0;
            for i in 0..d {
                for j in 0..d {
                    diff += s.a[i * d + j] * gf[j] * e.grad_v[i];
                }
            }
            let drift: f64 = s.b.iter().zip(&gf).map(|(b, g)| b * g).sum();
            let grad2: f64 = gf.iter().map(|c| c * c).sum();
            acc += -f.values[idx] * e.transport + diff + gradient_penalty * grad2 * e.phi
                - (drift + source.at(g, idx)) * e.phi;
            mass += e.phi;
        }
        values.push(acc * g.cell_volume());
        masses.push(mass * g.cell_volume());
    }
    Ok(WeakResidual { values, masses })
}

/// Whether `inner ⊂ outer` with a positive gap in time, position and velocity.
pub fn strictly_nested(inner: &BoxCylinder, outer: &BoxCylinder) -> bool {
    inner.t_lo > outer.t_lo
        && inner.t_hi <= outer.t_hi
        && inner.x_radius < outer.x_radius
        && inner.v_radius < outer.v_radius
        && inner.is_inside_box(outer)
}

/// `sup_{Q_int} f ≤ C (‖f₊‖_{L²(Q_ext)} + ‖S‖_{L∞(Q_ext)})`, one entry of
/// `levels` per grid resolution (finest last).
pub fn local_bound_check(
    levels: &[(&ScalarField, f64)],
    q_int: &BoxCylinder,
    q_ext: &BoxCylinder,
) -> Result<VerificationReport> {
    if levels.is_empty() {
        return Err(Error::param("levels", "need at least one field"));
    }
    if !strictly_nested(q_int, q_ext) {
        return Err(Error::param("cylinders", "Q_int must sit strictly inside Q_ext"));
    }
    let mut report = VerificationReport::new("local-bound", "local L2-to-Linf bound for sub-solutions", 0.0, 0.0);
    for (f, s_sup) in levels {
        let cells_int = f.grid.cells_in(q_int);
        let cells_ext = f.grid.cells_in(q_ext);
        if cells_int.is_empty() || cells_ext.is_empty() {
            return Err(Error::EmptyRegion);
        }
        let lhs = cells_int.iter().map(|&i| f.values[i]).fold(f64::NEG_INFINITY, f64::max);
        let l2 = (cells_ext.iter().map(|&i| f.values[i].max(0.0).powi(2)).sum::<f64>() * f.grid.cell_volume()).sqrt();
        let g = &f.grid;
        report.push_level(g.dt.max(g.dx).max(g.dv), lhs, l2 + s_sup);
    }
    let last = report.refinement.last().cloned().expect("nonempty");
    report.lhs = last.lhs;
    report.rhs = last.rhs;
    report.fitted_c = last.fitted_c;
    report.pass = match report.fitted_c {
        Some(c) => c.is_finite() && report.refinement_stable(),
        None => report.lhs <= 0.0,
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{make_coefficients, CoefficientKind};

    fn grid1(t: (f64, f64), xr: f64, vr: f64, nt: usize, nx: usize, nv: usize) -> Arc<Grid> {
        let dom = BoxCylinder::centered(1, t.0, t.1, xr, vr).unwrap();
        Arc::new(Grid::new(dom, nt, nx, nv).unwrap())
    }

    #[test]
    fn constants_are_preserved() {
        let g = grid1((0.0, 0.5), 1.0, 1.0, 10, 16, 16);
        let cfg = SolverConfig::new(g.clone(), CoefficientField::identity(1))
            .with_initial(|_, _| 2.5)
            .with_boundary(Boundary::constant(2.5));
        let tr = solve(&cfg).unwrap();
        assert!(tr.field.values.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn constants_preserved_in_two_dimensions_with_rough_coefficients() {
        let dom = BoxCylinder::centered(2, 0.0, 0.2, 1.0, 1.0).unwrap();
        let g = Arc::new(Grid::new(dom, 4, 6, 6).unwrap());
        let c = make_coefficients(CoefficientKind::Checkerboard { cell: 0.3 }, 2, 1.0, 4.0).unwrap();
        let cfg = SolverConfig::new(g, c)
            .with_initial(|_, _| 1.0)
            .with_boundary(Boundary::constant(1.0));
        let tr = solve(&cfg).unwrap();
        assert!(tr.field.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_data_stays_zero() {
        let g = grid1((0.0, 0.5), 1.0, 1.0, 5, 8, 8);
        let tr = solve(&SolverConfig::new(g, CoefficientField::identity(1))).unwrap();
        assert!(tr.field.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mass_is_conserved_periodic() {
        let g = grid1((0.0, 0.5), 1.0, 2.0, 25, 32, 32);
        let c = make_coefficients(CoefficientKind::Checkerboard { cell: 0.25 }, 1, 1.0, 4.0).unwrap();
        let cfg = SolverConfig::new(g.clone(), c)
            .with_initial(|x, v| (-(x[0] * x[0]) * 4.0 - v[0] * v[0]).exp() * (1.0 + 0.5 * x[0]))
            .with_boundary(Boundary::PeriodicZeroFlux);
        let m0 = slice_mass(&g, &cfg.initial);
        let mut prev = m0;
        solve_with(&cfg, |_, s| {
            let m = slice_mass(&g, s);
            assert!((m - prev).abs() <= 1e-10 * m0.abs().max(1.0), "{m} vs {prev}");
            prev = m;
        })
        .unwrap();
    }

    #[test]
    fn positivity_with_drift() {
        let g = grid1((0.0, 0.3), 1.0, 1.5, 15, 20, 30);
        let c = make_coefficients(
            CoefficientKind::Random {
                cell: 0.2,
                seed: 11,
                b_max: 1.0,
            },
            1,
            0.5,
            2.0,
        )
        .unwrap();
        let cfg = SolverConfig::new(g, c)
            .with_initial(|x, v| if x[0] * v[0] > 0.0 { 1.0 } else { 0.0 })
            .with_source(Source::Fn(phase_fn(|t, _, v| (t * v[0]).max(0.0))));
        let tr = solve(&cfg).unwrap();
        assert!(tr.field.min() >= -1e-12);
    }

    #[test]
    fn cfl_is_enforced() {
        let g = grid1((0.0, 1.0), 1.0, 1.0, 2, 8, 40);
        let c = make_coefficients(CoefficientKind::Constant { a: 1.0, b: vec![1.0] }, 1, 1.0, 1.0).unwrap();
        let err = solve(&SolverConfig::new(g.clone(), c)).unwrap_err();
        assert!(matches!(err, Error::Cfl { .. }));
        let mut cfg = SolverConfig::new(g, CoefficientField::identity(1));
        cfg.implicit_diffusion = false;
        assert!(matches!(solve(&cfg).unwrap_err(), Error::Cfl { .. }));
    }

    #[test]
    fn anisotropic_two_dimensional_is_rejected() {
        let dom = BoxCylinder::centered(2, 0.0, 0.2, 1.0, 1.0).unwrap();
        let g = Arc::new(Grid::new(dom, 2, 4, 4).unwrap());
        let c = make_coefficients(
            CoefficientKind::Random {
                cell: 0.5,
                seed: 1,
                b_max: 0.0,
            },
            2,
            1.0,
            2.0,
        )
        .unwrap();
        assert!(matches!(
            solve(&SolverConfig::new(g, c)).unwrap_err(),
            Error::Unsupported(_)
        ));
    }

    #[test]
    fn free_transport_is_exact_for_integer_shifts() {
        // Δt v / Δx integer: the semi-Lagrangian step is an exact shift.
        let g = grid1((0.0, 0.2), 1.0, 1.0, 2, 20, 2);
        let c = make_coefficients(
            CoefficientKind::Constant {
                a: 1e-300,
                b: vec![0.0],
            },
            1,
            1e-300,
            1e-300,
        )
        .unwrap();
        let st = Stepper::new(g.clone(), c, Boundary::PeriodicZeroFlux, true, 0.9).unwrap();
        let src: Vec<f64> = (0..g.slice_len()).map(|k| k as f64).collect();
        let mut dst = vec![0.0; src.len()];
        st.transport(0.0, &src, &mut dst);
        // v = ±0.5, Δt v / Δx = ±0.5: average of two neighbours.
        assert!((dst[2 * 2 + 1] - 0.5 * (src[2 * 2 + 1] + src[2 + 1])).abs() < 1e-12);
    }

    #[test]
    fn bump_derivatives_match_differences() {
        let b = Bump {
            center: PhasePoint::new(0.1, vec![0.2, -0.1], vec![0.0, 0.3]).unwrap(),
            rt: 0.3,
            rx: 0.5,
            rv: 0.6,
        };
        let (t, x, v) = (0.15, [0.3, 0.0], [0.1, 0.2]);
        let e = b.eval(t, &x, &v);
        let h = 1e-6;
        let num_t = (b.eval(t + h, &x, &v).phi - b.eval(t - h, &x, &v).phi) / (2.0 * h);
        let mut num_x = 0.0;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            num_x += v[k] * (b.eval(t, &xp, &v).phi - b.eval(t, &xm, &v).phi) / (2.0 * h);
            let mut vp = v;
            let mut vm = v;
            vp[k] += h;
            vm[k] -= h;
            let num_v = (b.eval(t, &x, &vp).phi - b.eval(t, &x, &vm).phi) / (2.0 * h);
            assert!((num_v - e.grad_v[k]).abs() < 1e-6);
        }
        assert!((num_t + num_x - e.transport).abs() < 1e-6);
    }

    #[test]
    fn weak_residual_of_zero_is_zero() {
        let g = grid1((0.0, 1.0), 1.0, 1.0, 10, 10, 10);
        let f = ScalarField::zeros(g);
        let b = Bump {
            center: PhasePoint::new1(0.5, 0.0, 0.0),
            rt: 0.4,
            rx: 0.5,
            rv: 0.5,
        };
        let r = weak_residual(
            &f,
            &CoefficientField::identity(1),
            &Source::Zero,
            std::slice::from_ref(&b),
            0.0,
        )
        .unwrap();
        assert_eq!(r.values, vec![0.0]);
        let wide = Bump { rx: 2.0, ..b };
        assert!(weak_residual(
            &ScalarField::zeros(f.grid.clone()),
            &CoefficientField::identity(1),
            &Source::Zero,
            &[wide],
            0.0
        )
        .is_err());
    }

    #[test]
    fn local_bound_constant_fixture() {
        let ext = BoxCylinder::centered(1, -1.0, 0.0, 1.0, 1.0).unwrap();
        let int = BoxCylinder::centered(1, -0.5, 0.0, 0.5, 0.5).unwrap();
        let g = Arc::new(Grid::new(ext.clone(), 10, 10, 10).unwrap());
        let f = ScalarField::constant(g, 1.0);
        let r = local_bound_check(&[(&f, 0.0)], &int, &ext).unwrap();
        assert!((r.fitted_c.unwrap() - 0.5).abs() < 1e-12);
        assert!(r.pass);
        assert!(local_bound_check(&[(&f, 0.0)], &ext, &ext).is_err());
    }
}
