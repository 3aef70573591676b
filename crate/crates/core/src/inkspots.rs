//! Ink-spots covering on boolean phase-space grids.
//!
//! Candidate cylinders are `Q_r(z0) ⊂ Q_-` with `z0` a grid node and `r` from
//! a finite list; measures are cell counts times the cell volume.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fields::Grid;
use crate::geometry::{q_minus, BoxCylinder, Cylinder, PhasePoint, PhaseRegion};
use crate::report::VerificationReport;
use crate::{Error, Result};

/// Boolean mask over every node of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSet {
    pub grid: Arc<Grid>,
    pub mask: Vec<bool>,
}

impl DiscreteSet {
    pub fn empty(grid: Arc<Grid>) -> Self {
        let n = grid.len();
        DiscreteSet {
            grid,
            mask: vec![false; n],
        }
    }

    pub fn from_mask(grid: Arc<Grid>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                found: mask.len(),
            });
        }
        Ok(DiscreteSet { grid, mask })
    }

    pub fn from_region(grid: Arc<Grid>, region: &dyn PhaseRegion) -> Self {
        let mut s = Self::empty(grid);
        s.insert_region(region);
        s
    }

    pub fn insert_region(&mut self, region: &dyn PhaseRegion) {
        for i in self.grid.cells_in(region) {
            self.mask[i] = true;
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn measure(&self) -> f64 {
        self.count() as f64 * self.grid.cell_volume()
    }

    /// Measure of the part of the set inside `region`.
    pub fn measure_in(&self, region: &dyn PhaseRegion) -> f64 {
        let n = self.grid.cells_in(region).into_iter().filter(|&i| self.mask[i]).count();
        n as f64 * self.grid.cell_volume()
    }

    pub fn is_subset_of(&self, other: &DiscreteSet) -> bool {
        self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    /// First node in the set that lies outside `region`.
    pub fn first_outside(&self, region: &dyn PhaseRegion) -> Option<usize> {
        (0..self.mask.len()).find(|&i| {
            if !self.mask[i] {
                return false;
            }
            let (t, x, v) = self.grid.coords(i);
            !region.contains_txv(t, x, v)
        })
    }

    /// Run-length encoding: a header line, then `<count>.` / `<count>#` runs.
    pub fn to_rle(&self) -> String {
        let g = &self.grid;
        let mut out = format!("mask {} {} {} {} {}\n", g.d, g.n_t, g.n_x, g.n_v, self.mask.len());
        let mut runs = Vec::new();
        let mut i = 0;
        while i < self.mask.len() {
            let b = self.mask[i];
            let start = i;
            while i < self.mask.len() && self.mask[i] == b {
                i += 1;
            }
            runs.push(format!("{}{}", i - start, if b { '#' } else { '.' }));
        }
        out.push_str(&runs.join(" "));
        out.push('\n');
        out
    }

    pub fn from_rle(grid: Arc<Grid>, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty mask file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let expect = [grid.d, grid.n_t, grid.n_x, grid.n_v, grid.len()];
        let parsed: Vec<usize> = fields
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("mask header: {e}")))
            })
            .collect::<Result<_>>()?;
        if fields.first() != Some(&"mask") || parsed != expect {
            return Err(Error::Parse(format!("mask header {header:?} does not match the grid")));
        }
        let mut mask = Vec::with_capacity(grid.len());
        for tok in lines.flat_map(str::split_whitespace) {
            let (num, sym) = tok.split_at(tok.len() - 1);
            let n: usize = num.parse().map_err(|e| Error::Parse(format!("run {tok:?}: {e}")))?;
            let b = match sym {
                "#" => true,
                "." => false,
                _ => return Err(Error::Parse(format!("run {tok:?}: unknown symbol"))),
            };
            mask.extend(std::iter::repeat_n(b, n));
        }
        Self::from_mask(grid, mask)
    }
}

/// Geometry of one ink-spots experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InkspotsSetup {
    pub d: usize,
    pub omega: f64,
    pub m: u32,
    pub r0: f64,
    /// Candidate radii, all below `ω`.
    pub radii: Vec<f64>,
    /// Nodes per axis.
    pub n: usize,
}

impl InkspotsSetup {
    /// Dyadic radii `ω/2, ω/4, …` with `levels` entries.
    pub fn dyadic(d: usize, omega: f64, m: u32, r0: f64, levels: usize, n: usize) -> Result<Self> {
        let radii = (1..=levels).map(|k| omega * 0.5f64.powi(k as i32)).collect();
        let s = InkspotsSetup {
            d,
            omega,
            m,
            r0,
            radii,
            n,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::param("omega", "need ω ∈ (0, 1]"));
        }
        if !(self.r0 > 0.0 && self.r0 < 1.0) {
            return Err(Error::param("r0", "need r0 ∈ (0, 1)"));
        }
        if self.m < 1 {
            return Err(Error::param("m", "need m ≥ 1"));
        }
        if self.radii.is_empty() {
            return Err(Error::param("radii", "empty radius list"));
        }
        if self.radii.iter().any(|&r| !(r > 0.0 && r <= self.omega)) {
            return Err(Error::param("radii", "radii must lie in (0, ω]"));
        }
        if self.n < 2 {
            return Err(Error::param("n", "need at least 2 nodes per axis"));
        }
        Ok(())
    }

    pub fn q_minus(&self) -> Cylinder {
        q_minus(self.d, self.omega).expect("validated ω")
    }

    /// Box holding `Q_-` and the stacked extension of every cylinder of
    /// radius below `r0` inside it.
    pub fn domain(&self) -> BoxCylinder {
        let (w, m, r0) = (self.omega, self.m as f64, self.r0.min(self.omega));
        let rise = m * r0 * r0;
        BoxCylinder::centered(
            self.d,
            -1.0,
            -1.0 + w * w + rise,
            w.powi(3) + (m + 2.0) * r0.powi(3) + w * rise,
            w,
        )
        .expect("positive extents")
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        Ok(Arc::new(Grid::new(self.domain(), self.n, self.n, self.n)?))
    }
}

/// One cylinder `Q_r(z0)` meeting the density bound, with its cell counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCylinder {
    pub cylinder: Cylinder,
    pub cells: usize,
    pub hits: usize,
}

fn candidates(grid: &Grid, q_minus: &Cylinder, radii: &[f64]) -> Vec<Cylinder> {
    let mut out = Vec::new();
    for &r in radii {
        for it in 0..grid.n_t {
            let t = grid.t_node(it);
            for ix in 0..grid.nx_total() {
                for iv in 0..grid.nv_total() {
                    let z = PhasePoint {
                        t,
                        x: grid.x_node(ix).to_vec(),
                        v: grid.v_node(iv).to_vec(),
                    };
                    let q = Cylinder { center: z, r };
                    if q.is_inside_cylinder(q_minus) {
                        out.push(q);
                    }
                }
            }
        }
    }
    out
}

fn is_dense(hits: usize, cells: usize, mu: f64) -> bool {
    cells > 0 && hits as f64 >= (1.0 - mu) * cells as f64
}

/// All grid-aligned `Q_r(z0) ⊂ Q_-` with `|Q ∩ E| ≥ (1 - μ)|Q|`, in a
/// deterministic order (radius list order, then node order). Candidates
/// containing no node are skipped.
pub fn find_dense_cylinders(e: &DiscreteSet, q_minus: &Cylinder, mu: f64, radii: &[f64]) -> Result<Vec<DenseCylinder>> {
    if radii.is_empty() {
        return Err(Error::param("radii", "empty radius list"));
    }
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::param("mu", format!("need μ ∈ (0, 1), got {mu}")));
    }
    let cands = candidates(&e.grid, q_minus, radii);
    Ok(cands
        .into_par_iter()
        .filter_map(|q| {
            let cells = e.grid.cells_in(&q);
            let hits = cells.iter().filter(|&&i| e.mask[i]).count();
            is_dense(hits, cells.len(), mu).then_some(DenseCylinder {
                cylinder: q,
                cells: cells.len(),
                hits,
            })
        })
        .collect())
}

/// Same output as [`find_dense_cylinders`], by scanning every node of the
/// grid for every candidate.
pub fn find_dense_cylinders_brute(
    e: &DiscreteSet,
    q_minus: &Cylinder,
    mu: f64,
    radii: &[f64],
) -> Result<Vec<DenseCylinder>> {
    if radii.is_empty() {
        return Err(Error::param("radii", "empty radius list"));
    }
    let g = &*e.grid;
    let mut out = Vec::new();
    for q in candidates(g, q_minus, radii) {
        let (mut cells, mut hits) = (0, 0);
        for i in 0..g.len() {
            let (t, x, v) = g.coords(i);
            if q.contains_txv(t, x, v) {
                cells += 1;
                hits += e.mask[i] as usize;
            }
        }
        if is_dense(hits, cells, mu) {
            out.push(DenseCylinder {
                cylinder: q,
                cells,
                hits,
            });
        }
    }
    Ok(out)
}

/// `(m+1)/m (1 - cμ)(|F ∩ Q_-| + C m r0²)`.
pub fn inkspots_rhs(f_in_q: f64, mu: f64, m: u32, r0: f64, c: f64, big_c: f64) -> f64 {
    let m = m as f64;
    (m + 1.0) / m * (1.0 - c * mu) * (f_in_q + big_c * m * r0 * r0)
}

/// Largest `c` for which the bound holds with `C` fixed.
pub fn tightest_c(e_measure: f64, f_in_q: f64, mu: f64, m: u32, r0: f64, big_c: f64) -> f64 {
    let m = m as f64;
    let k = f_in_q + big_c * m * r0 * r0;
    if k <= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - e_measure * m / ((m + 1.0) * k)) / mu
}

/// Evaluate `|E| ≤ (m+1)/m (1 - cμ)(|F ∩ Q_-| + C m r0²)` after checking
/// the covering hypotheses on every dense grid-aligned cylinder.
pub fn verify_inkspots(
    setup: &InkspotsSetup,
    e: &DiscreteSet,
    f: &DiscreteSet,
    mu: f64,
    c: f64,
    big_c: f64,
) -> Result<VerificationReport> {
    setup.validate()?;
    if e.grid != f.grid {
        return Err(Error::param("sets", "E and F live on different grids"));
    }
    let qm = setup.q_minus();
    if !e.is_subset_of(f) {
        return Err(Error::hypothesis("E ⊂ F", "E has nodes outside F"));
    }
    if let Some(i) = e.first_outside(&qm) {
        let (t, x, v) = e.grid.coords(i);
        return Err(Error::hypothesis(
            "E ⊂ Q_-",
            format!("node t = {t}, x = {x:?}, v = {v:?}"),
        ));
    }
    let dense = find_dense_cylinders(e, &qm, mu, &setup.radii)?;
    for dc in &dense {
        let q = &dc.cylinder;
        if q.r >= setup.r0 {
            return Err(Error::hypothesis(
                "dense cylinders have r < r0",
                format!("Q_{}({:?}) is dense", q.r, q.center),
            ));
        }
        let stack = q.stacked(setup.m)?;
        if !stack.bounding_box().is_inside_box(&e.grid.domain) {
            return Err(Error::param("grid", "stacked cylinder leaves the grid"));
        }
        if let Some(i) = e.grid.cells_in(&stack).into_iter().find(|&i| !f.mask[i]) {
            let (t, x, v) = e.grid.coords(i);
            return Err(Error::hypothesis(
                "stacked cylinders lie in F",
                format!("Q_{}({:?}) stacked misses t = {t}, x = {x:?}, v = {v:?}", q.r, q.center),
            ));
        }
    }
    let lhs = e.measure();
    let f_in_q = f.measure_in(&qm);
    let rhs = inkspots_rhs(f_in_q, mu, setup.m, setup.r0, c, big_c);
    let c_star = tightest_c(lhs, f_in_q, mu, setup.m, setup.r0, big_c);
    let mut r = VerificationReport::new("inkspots", "ink-spots covering with leakage", lhs, rhs)
        .param("mu", mu)
        .param("m", setup.m as f64)
        .param("r0", setup.r0)
        .param("omega", setup.omega)
        .param("c", c)
        .param("C", big_c)
        .param("c_star", c_star)
        .param("F_cap_Q_minus", f_in_q)
        .param("dense_cylinders", dense.len() as f64);
    r.hypothesis("E ⊂ F ∩ Q_-", true);
    r.hypothesis("dense cylinders: r < r0 and stacked ⊂ F", true);
    r.note("candidates restricted to grid-node centers and the listed radii");
    r.pass = lhs <= rhs;
    Ok(r)
}

/// A pair `(E, F)` satisfying the covering hypotheses for every `μ' ≤ μ`.
///
/// `E` is a union of up to `k` random cylinders of radius below `r0`,
/// intersected with a random smooth super-level set; spots that would make
/// a cylinder of radius `≥ r0` dense are dropped. `F` is `E` together with
/// the stacked extension of every dense cylinder.
pub fn generate_hypothesis_pair(
    setup: &InkspotsSetup,
    seed: u64,
    k: usize,
    mu: f64,
) -> Result<(DiscreteSet, DiscreteSet)> {
    setup.validate()?;
    let grid = setup.grid()?;
    let qm = setup.q_minus();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small: Vec<f64> = setup.radii.iter().copied().filter(|&r| r < setup.r0).collect();
    let large: Vec<f64> = setup.radii.iter().copied().filter(|&r| r >= setup.r0).collect();
    let mut e = DiscreteSet::empty(grid.clone());
    if k == 0 || small.is_empty() {
        return Ok((e.clone(), e));
    }
    let d = setup.d;
    let freq: Vec<f64> = (0..3 * d).map(|_| rng.random_range(5.0..25.0)).collect();
    let phase: Vec<f64> = (0..3 * d)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let level = rng.random_range(-0.6..0.2);
    let level_set = |t: f64, x: &[f64], v: &[f64]| -> bool {
        let mut s = (freq[0] * t + phase[0]).sin();
        for j in 0..d {
            s += (freq[1 + j] * x[j] / setup.omega.powi(2) + phase[1 + j]).sin();
            s += (freq[1 + d + j] * v[j] + phase[1 + d + j]).sin();
        }
        s / (1 + 2 * d) as f64 >= level
    };
    let w = setup.omega;
    for _ in 0..k {
        let r = small[rng.random_range(0..small.len())];
        let t0 = -1.0 + r * r + rng.random_range(0.0..1.0) * (w * w - r * r);
        let v0: Vec<f64> = (0..d)
            .map(|_| rng.random_range(-1.0..1.0) * (w - r) / (d as f64).sqrt())
            .collect();
        let x0: Vec<f64> = (0..d)
            .map(|_| rng.random_range(-1.0..1.0) * (w.powi(3) - r.powi(3)) * 0.5 / (d as f64).sqrt())
            .collect();
        let spot = Cylinder::new(PhasePoint { t: t0, x: x0, v: v0 }, r)?;
        if !spot.is_inside_cylinder(&qm) {
            continue;
        }
        let mut trial = e.clone();
        for i in grid.cells_in(&spot) {
            let (t, x, v) = grid.coords(i);
            if level_set(t, x, v) {
                trial.mask[i] = true;
            }
        }
        if large.is_empty() || find_dense_cylinders(&trial, &qm, mu, &large)?.is_empty() {
            e = trial;
        }
    }
    let mut f = e.clone();
    for dc in find_dense_cylinders(&e, &qm, mu, &small)? {
        f.insert_region(&dc.cylinder.stacked(setup.m)?);
    }
    Ok((e, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(n: usize) -> InkspotsSetup {
        InkspotsSetup::dyadic(1, 0.5, 2, 0.2, 4, n).unwrap()
    }

    #[test]
    fn full_and_empty_sets() {
        let s = setup(12);
        let g = s.grid().unwrap();
        let qm = s.q_minus();
        let full = DiscreteSet::from_region(g.clone(), &qm);
        let all = find_dense_cylinders(&full, &qm, 0.5, &s.radii).unwrap();
        let cands: usize = candidates(&g, &qm, &s.radii)
            .iter()
            .filter(|q| !g.cells_in(*q).is_empty())
            .count();
        assert_eq!(all.len(), cands);
        let none = find_dense_cylinders(&DiscreteSet::empty(g), &qm, 0.5, &s.radii).unwrap();
        assert!(none.is_empty());
        assert!(find_dense_cylinders(&full, &qm, 0.5, &[]).is_err());
    }

    #[test]
    fn single_cylinder_is_dense() {
        let s = setup(16);
        let g = s.grid().unwrap();
        let qm = s.q_minus();
        let cands = candidates(&g, &qm, &[0.25]);
        let q = cands.iter().find(|q| g.cells_in(*q).len() > 4).unwrap().clone();
        let e = DiscreteSet::from_region(g, &q);
        let found = find_dense_cylinders(&e, &qm, 0.01, &[0.25]).unwrap();
        assert!(found.iter().any(|dc| dc.cylinder == q && dc.hits == dc.cells));
    }

    #[test]
    fn brute_force_agrees() {
        let s = setup(12);
        let (e, _) = generate_hypothesis_pair(&s, 7, 6, 0.5).unwrap();
        let qm = s.q_minus();
        for mu in [0.1, 0.5] {
            let a = find_dense_cylinders(&e, &qm, mu, &s.radii).unwrap();
            let b = find_dense_cylinders_brute(&e, &qm, mu, &s.radii).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn generated_pairs_satisfy_hypotheses() {
        let s = setup(16);
        for seed in 0..5 {
            let (e, f) = generate_hypothesis_pair(&s, seed, 4, 0.5).unwrap();
            let r = verify_inkspots(&s, &e, &f, 0.5, 0.1, 1.0).unwrap();
            assert!(r.params["c_star"] > 0.0);
        }
        let (e, f) = generate_hypothesis_pair(&s, 0, 0, 0.5).unwrap();
        assert_eq!(e.count() + f.count(), 0);
        let r = verify_inkspots(&s, &e, &f, 0.3, 0.5, 1.0).unwrap();
        assert!(r.pass && r.lhs == 0.0);
        let (a, _) = generate_hypothesis_pair(&s, 3, 4, 0.5).unwrap();
        let (b, _) = generate_hypothesis_pair(&s, 3, 4, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hypothesis_gate_on_missing_stack() {
        let s = setup(16);
        let g = s.grid().unwrap();
        let qm = s.q_minus();
        let q = candidates(&g, &qm, &[0.125])
            .into_iter()
            .find(|q| !g.cells_in(q).is_empty())
            .unwrap();
        let e = DiscreteSet::from_region(g, &q);
        let err = verify_inkspots(&s, &e, &e, 0.5, 0.1, 1.0).unwrap_err();
        assert!(err.is_hypothesis());
    }

    #[test]
    fn rhs_monotone_in_mu_and_leakage_vanishes() {
        let a = inkspots_rhs(1.0, 0.1, 3, 0.1, 0.5, 2.0);
        let b = inkspots_rhs(1.0, 0.3, 3, 0.1, 0.5, 2.0);
        assert!(b < a);
        let l1 = inkspots_rhs(1.0, 0.3, 3, 0.1, 0.5, 2.0) - inkspots_rhs(1.0, 0.3, 3, 0.0, 0.5, 2.0);
        let l2 = inkspots_rhs(1.0, 0.3, 3, 0.05, 0.5, 2.0) - inkspots_rhs(1.0, 0.3, 3, 0.0, 0.5, 2.0);
        assert!((l1 / l2 - 4.0).abs() < 1e-12);
        let cs = tightest_c(0.5, 1.0, 0.3, 3, 0.1, 2.0);
        assert!((inkspots_rhs(1.0, 0.3, 3, 0.1, cs, 2.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rle_roundtrip() {
        let s = setup(8);
        let (e, f) = generate_hypothesis_pair(&s, 1, 3, 0.5).unwrap();
        for set in [e, f] {
            let back = DiscreteSet::from_rle(set.grid.clone(), &set.to_rle()).unwrap();
            assert_eq!(back, set);
        }
        let g = s.grid().unwrap();
        assert!(DiscreteSet::from_rle(g.clone(), "mask 1 2 2 2 8\n8#\n").is_err());
        assert!(DiscreteSet::from_rle(g, "").is_err());
    }
}
