//! The nonlinear solver: the map Φ, the (η, R) budget, Picard iteration for
//! small data, local heights, tile-and-glue solves, continuation in time,
//! unbounded domains and concatenation over growing triangles.
//!
//! Everything a node value depends on is read from its backward triangle in
//! a fixed order, so any two solves that see the same data on that triangle
//! produce the same bits there. Gluing relies on this and checks it.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::domain::{DomainError, Trapezoid};
use crate::fields::{
    characteristic_derivatives, h_norm, lattice_count, AffineField, CellField, CellKind, FieldError, NodeField,
    NullLattice,
};
use crate::geometry::{EmbeddedManifold, GeometryError, ManifoldData};
use crate::linear_wave::{dalembert_solve, LinearError};
use crate::vecn::norm1;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("no budget found for gamma = {gamma}, L = {lip}")]
    BudgetInfeasible { gamma: f64, lip: f64 },
    #[error("smallness fails: {what} = {value} exceeds eta = {eta}")]
    SmallnessViolated { what: &'static str, value: f64, eta: f64 },
    #[error("Picard iteration did not converge after {iterations} iterations (last ratio {last_ratio})")]
    NoConvergence { iterations: usize, last_ratio: f64 },
    #[error("local height {delta} is below two cells ({h})")]
    DegenerateHeight { delta: f64, h: f64 },
    #[error("continuation stalled at t = {t}: height {delta}, null masses ({mass_plus}, {mass_minus}), forcing {forcing}")]
    StallDetected { t: f64, delta: f64, mass_plus: f64, mass_minus: f64, forcing: f64 },
    #[error("overlapping tiles disagree at {what} {index}")]
    OverlapMismatch { what: &'static str, index: usize },
    #[error("tail mass {mass} outside [{a}, {b}] is not below eta = {eta}")]
    TailNotSmall { mass: f64, a: f64, b: f64, eta: f64 },
    #[error("solutions do not nest: {0}")]
    NotNested(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Linear(#[from] LinearError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionBudget<T> {
    pub eta: T,
    pub r: T,
    pub gamma: T,
    pub l_lip: T,
}

impl<T: Scalar> ContractionBudget<T> {
    /// (η + R)² + η ≤ R/γ.
    pub fn invariance(&self) -> bool {
        let s = self.eta + self.r;
        s * s + self.eta <= self.r / self.gamma
    }

    /// 2η² + 2R² + η ≤ R/γ.
    pub fn sufficient(&self) -> bool {
        let two = T::lit(2.0);
        two * self.eta * self.eta + two * self.r * self.r + self.eta <= self.r / self.gamma
    }

    /// L(η + R)² + 5γη + 4γR < ½.
    pub fn contraction(&self) -> bool {
        let s = self.eta + self.r;
        self.l_lip * s * s + T::lit(5.0) * self.gamma * self.eta + T::lit(4.0) * self.gamma * self.r < T::lit(0.5)
    }

    pub fn is_valid(&self) -> bool {
        self.invariance() && self.sufficient() && self.contraction()
    }
}

pub fn budget_satisfies<T: Scalar>(eta: T, r: T, gamma: T, l_lip: T) -> bool {
    ContractionBudget { eta, r, gamma, l_lip }.is_valid()
}

/// R is the largest 2⁻ᵏ/γ with 4γR ≤ ¼ and 4R² ≤ R/γ; η is then the
/// largest 2⁻ᵐ satisfying all three budget inequalities. When L is so large
/// that L·R² alone breaks the contraction inequality, no η fits that R, and
/// the scan moves on to R/2, R/4, … instead of failing.
pub fn select_budget<T: Scalar>(gamma: T, l_lip: T) -> Result<ContractionBudget<T>, SolverError> {
    let fail = || SolverError::BudgetInfeasible { gamma: gamma.as_f64(), lip: l_lip.as_f64() };
    if !(gamma > T::zero() && l_lip > T::zero()) || !gamma.is_finite() || !l_lip.is_finite() {
        return Err(fail());
    }
    let quarter = T::lit(0.25);
    let four = T::lit(4.0);
    let half = T::lit(0.5);
    let mut r = T::one() / gamma;
    while !(four * gamma * r <= quarter && four * r * r <= r / gamma) {
        r = r * half;
        if !r.is_normal() {
            return Err(fail());
        }
    }
    while r.is_normal() {
        let mut eta = T::one();
        while eta.is_normal() {
            if budget_satisfies(eta, r, gamma, l_lip) {
                return Ok(ContractionBudget { eta, r, gamma, l_lip });
            }
            eta = eta * half;
        }
        r = r * half;
    }
    Err(fail())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolvePath {
    SmallData,
    Tiled,
    Continued,
    Concatenated,
    /// Linear solve with a prescribed right-hand side (no fixed point).
    Linear,
}

impl SolvePath {
    /// Whether v₊, v₋ are single transports from the base data with the
    /// stored h-field as source.
    pub fn has_single_transport(&self) -> bool {
        matches!(self, SolvePath::SmallData | SolvePath::Tiled | SolvePath::Linear)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub final_residual: f64,
    /// ‖Δh_{k+1}‖₁ / ‖Δh_k‖₁ while the previous increment exceeded the
    /// tolerance.
    pub ratios: Vec<f64>,
    /// ‖h_k‖₁ of every iterate.
    pub iterate_norms: Vec<f64>,
    pub path: SolvePath,
    /// Layer heights (in half-steps) of the continuation segments.
    pub segments: Vec<usize>,
    /// Tile half-widths δ used per segment (0 for a direct solve).
    pub deltas: Vec<f64>,
}

impl Diagnostics {
    fn new(path: SolvePath) -> Self {
        Diagnostics {
            iterations: 0,
            final_residual: 0.0,
            ratios: Vec::new(),
            iterate_norms: Vec::new(),
            path,
            segments: Vec::new(),
            deltas: Vec::new(),
        }
    }
}

/// A solution on a compact lattice trapezoid. ∂ₜu and ∂ₓu are derived
/// from the stored characteristic derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution<T: Scalar> {
    pub domain: Trapezoid<T>,
    pub u: NodeField<T>,
    pub vp: AffineField<T>,
    pub vm: AffineField<T>,
    pub h_field: CellField<T>,
    pub data: ManifoldData<T>,
    pub forcing: CellField<T>,
    pub diagnostics: Diagnostics,
}

impl<T: Scalar> Solution<T> {
    pub fn lattice(&self) -> NullLattice<T> {
        self.u.lattice
    }

    pub fn ut(&self) -> AffineField<T> {
        crate::fields::time_space_derivatives(&self.vp, &self.vm).0
    }

    pub fn ux(&self) -> AffineField<T> {
        crate::fields::time_space_derivatives(&self.vp, &self.vm).1
    }

    pub fn h_norm(&self) -> T {
        h_norm(&self.u, &self.vp, &self.vm)
    }

    /// h_norm of the difference of two solutions on the same lattice.
    pub fn h_norm_distance(&self, other: &Self) -> Result<T, SolverError> {
        if self.lattice() != other.lattice() || self.u.dim != other.u.dim {
            return Err(FieldError::RegionMismatch.into());
        }
        let diff = |a: &[T], b: &[T]| a.iter().zip(b).map(|(x, y)| *x - *y).collect::<Vec<T>>();
        let l = self.lattice();
        let d = self.u.dim;
        let u = NodeField { lattice: l, dim: d, values: diff(&self.u.values, &other.u.values) };
        let vp = AffineField { lattice: l, dim: d, values: diff(&self.vp.values, &other.vp.values) };
        let vm = AffineField { lattice: l, dim: d, values: diff(&self.vm.values, &other.vm.values) };
        Ok(h_norm(&u, &vp, &vm))
    }

    /// Largest distance of a node value to the target.
    pub fn manifold_defect(&self, m: &EmbeddedManifold<T>) -> T {
        self.u.values.chunks(self.u.dim).fold(T::zero(), |s, p| s.max(m.distance(p)))
    }

    /// Largest normal component of ∂ₜu over all lattice traces.
    pub fn compatibility_defect(&self, m: &EmbeddedManifold<T>) -> f64 {
        let l = self.lattice();
        let mut worst: f64 = 0.0;
        for k in 0..=l.m.min(l.n - 1) {
            let tr = crate::fields::trace_layer(&self.u, &self.vp, &self.vm, k);
            let rep = crate::geometry::check_compatibility(m, &tr.to_data(), T::zero());
            worst = worst.max(rep.max_defect);
        }
        worst
    }

    /// Largest |Φ(h) − h| mass relative to ‖h‖₁ + 1, i.e. the defect of
    /// the integral equation for the stored h-field.
    pub fn integral_residual(&self, m: &EmbeddedManifold<T>) -> Result<T, SolverError> {
        let phi = phi_map(m, &self.data, &self.forcing, &self.h_field)?;
        let d = phi.sub(&self.h_field)?;
        Ok(d.l1_norm() / (self.h_field.l1_norm() + T::one()))
    }
}

/// The linear solution with right-hand side `f`, for audits that need a
/// [`Solution`] without a fixed point.
pub fn linear_solution<T: Scalar>(data: &ManifoldData<T>, f: &CellField<T>) -> Result<Solution<T>, SolverError> {
    let u = dalembert_solve(data, f)?;
    let (vp, vm) = characteristic_derivatives(data, f)?;
    Ok(Solution {
        domain: f.lattice.parent(),
        u,
        vp,
        vm,
        h_field: f.clone(),
        data: data.clone(),
        forcing: f.clone(),
        diagnostics: Diagnostics::new(SolvePath::Linear),
    })
}

/// Φ(h): the nonlinearity evaluated on the linear solution with source h.
/// Each cell uses the vertex means of u, v₊ and v₋.
pub fn phi_map<T: Scalar>(
    m: &EmbeddedManifold<T>,
    data: &ManifoldData<T>,
    f: &CellField<T>,
    h: &CellField<T>,
) -> Result<CellField<T>, SolverError> {
    if f.lattice != h.lattice || f.dim != h.dim {
        return Err(FieldError::RegionMismatch.into());
    }
    if m.ambient_dim != h.dim {
        return Err(GeometryError::DimensionMismatch { expected: m.ambient_dim, got: h.dim }.into());
    }
    let u = dalembert_solve(data, h)?;
    let (vp, vm) = characteristic_derivatives(data, h)?;
    Ok(phi_from_fields(m, &u, &vp, &vm, f))
}

fn phi_from_fields<T: Scalar>(
    m: &EmbeddedManifold<T>,
    u: &NodeField<T>,
    vp: &AffineField<T>,
    vm: &AffineField<T>,
    f: &CellField<T>,
) -> CellField<T> {
    let l = f.lattice;
    let d = f.dim;
    let cells = l.cells();
    let mut out = CellField::zeros(l, d);
    let three = T::lit(3.0);
    out.values.par_chunks_mut(d).zip(cells.par_iter()).for_each(|(dst, c)| {
        let nodes = l.cell_nodes(*c);
        let mut uc = vec![T::zero(); d];
        for j in 0..d {
            uc[j] = (u.at_index(nodes[0])[j] + u.at_index(nodes[1])[j] + u.at_index(nodes[2])[j]) / three;
        }
        let mut pc = vec![T::zero(); d];
        let mut mc = vec![T::zero(); d];
        vp.centroid(c.index, &mut pc);
        vm.centroid(c.index, &mut mc);
        m.nonlinearity(&uc, &pc, &mc, f.at(c.index), dst);
    });
    out
}

/// Smallness: ‖Du0 ± v0‖₁ ≤ η and ∬|f|₁ ≤ η.
pub fn check_smallness<T: Scalar>(data: &ManifoldData<T>, f: &CellField<T>, eta: T) -> Result<(), SolverError> {
    let (mp, mm) = data.null_masses();
    let fm = f.l1_norm();
    for (what, value) in [("|Du0 + v0|", mp), ("|Du0 - v0|", mm), ("|f|", fm)] {
        if value > eta {
            return Err(SolverError::SmallnessViolated { what, value: value.as_f64(), eta: eta.as_f64() });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions<T> {
    /// Stop once ‖Δh‖₁ ≤ tol (then keep iterating until the iterate stops
    /// changing, at most `settle` more times).
    pub tol: T,
    pub max_iter: usize,
    pub settle: usize,
    /// Forced tile half-length; `None` selects it from the data.
    pub delta: Option<T>,
    /// Require δ ≤ L/2 for tile covers.
    pub strict_tiles: bool,
}

impl<T: Scalar> Default for SolveOptions<T> {
    fn default() -> Self {
        SolveOptions { tol: T::lit(1e-12), max_iter: 500, settle: 100, delta: None, strict_tiles: true }
    }
}

fn same_bits<T: Scalar>(a: &[T], b: &[T]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_bits(*y))
}

/// Picard iteration h ← Φ(h) from h = 0 on the lattice of `f`.
pub fn picard_solve_small<T: Scalar>(
    m: &EmbeddedManifold<T>,
    data: &ManifoldData<T>,
    f: &CellField<T>,
    budget: &ContractionBudget<T>,
    tol: T,
    max_iter: usize,
) -> Result<Solution<T>, SolverError> {
    let opts = SolveOptions { tol, max_iter, ..SolveOptions::default() };
    picard_with(m, data, f, budget, &opts)
}

pub fn picard_with<T: Scalar>(
    m: &EmbeddedManifold<T>,
    data: &ManifoldData<T>,
    f: &CellField<T>,
    budget: &ContractionBudget<T>,
    opts: &SolveOptions<T>,
) -> Result<Solution<T>, SolverError> {
    check_smallness(data, f, budget.eta)?;
    let l = f.lattice;
    let mut diag = Diagnostics::new(SolvePath::SmallData);
    let mut h = CellField::zeros(l, f.dim);
    let mut prev_inc: Option<T> = None;
    let mut reached = None;
    let mut last_ratio = f64::NAN;
    for it in 1..=opts.max_iter + opts.settle {
        let next = phi_map(m, data, f, &h)?;
        let inc = next.sub(&h)?.l1_norm();
        diag.iterate_norms.push(next.l1_norm().as_f64());
        if let Some(p) = prev_inc {
            if p > opts.tol {
                let r = (inc / p).as_f64();
                last_ratio = r;
                diag.ratios.push(r);
                let n = diag.ratios.len();
                if n >= 5 && diag.ratios[n - 5..].iter().all(|r| *r > 0.9) {
                    return Err(SolverError::NoConvergence { iterations: it, last_ratio: r });
                }
            }
        }
        let stationary = same_bits(&next.values, &h.values);
        h = next;
        diag.iterations = it;
        prev_inc = Some(inc);
        if inc <= opts.tol && reached.is_none() {
            reached = Some(it);
        }
        if stationary {
            break;
        }
        match reached {
            Some(r) if it >= r + opts.settle => break,
            None if it >= opts.max_iter => {
                return Err(SolverError::NoConvergence { iterations: it, last_ratio });
            }
            _ => {}
        }
    }
    let u = dalembert_solve(data, &h)?;
    let (vp, vm) = characteristic_derivatives(data, &h)?;
    let phi = phi_from_fields(m, &u, &vp, &vm, f);
    diag.final_residual = phi.sub(&h)?.l1_norm().as_f64();
    Ok(Solution {
        domain: l.parent(),
        u,
        vp,
        vm,
        h_field: h,
        data: data.clone(),
        forcing: f.clone(),
        diagnostics: diag,
    })
}

/// Local height δ in units of cells: returns (δ, w) with w = 2δ/h a
/// multiple of 4.
///
/// δ₁ is half the widest window (in cells) over which both null masses of
/// the data stay ≤ η, δ₂ the tallest slab whose forcing mass stays ≤ η,
/// and δ = min(δ₁, (2√3/3)δ₂, L/2) snapped down.
pub fn find_local_height<T: Scalar>(
    data: &ManifoldData<T>,
    f: &CellField<T>,
    eta: T,
) -> Result<(T, usize), SolverError> {
    let l = f.lattice;
    let n = l.n;
    let mut pre_p = vec![T::zero(); n + 1];
    let mut pre_m = vec![T::zero(); n + 1];
    for i in 0..n {
        pre_p[i + 1] = pre_p[i] + norm1(&data.g_minus(i)) * data.h;
        pre_m[i + 1] = pre_m[i] + norm1(&data.g_plus(i)) * data.h;
    }
    let window_ok = |j: usize| {
        (0..=n - j).all(|s| pre_p[s + j] - pre_p[s] <= eta && pre_m[s + j] - pre_m[s] <= eta)
    };
    // the admissible set of widths is downward closed, so scan up
    let mut j1 = 0;
    while j1 < n && window_ok(j1 + 1) {
        j1 += 1;
    }
    let delta1 = l.half() * T::from_usize_lossy(j1);
    // slab heights in half-steps
    let mut per_layer = vec![T::zero(); l.m + 1];
    for c in l.cells() {
        let layer = match c.kind {
            CellKind::Up => c.k + 1,
            CellKind::Lo => c.k,
        };
        per_layer[layer] = per_layer[layer] + norm1(f.at(c.index)) * l.area();
    }
    let mut acc = T::zero();
    let mut s2 = 0;
    let mut all = true;
    for (layer, mass) in per_layer.iter().enumerate().skip(1) {
        acc = acc + *mass;
        if acc > eta {
            all = false;
            break;
        }
        s2 = layer;
    }
    let delta2 = if all { T::infinity() } else { l.half() * T::from_usize_lossy(s2) };
    let half_l = l.half() * T::from_usize_lossy(n) * T::lit(0.5);
    let c = T::lit(2.0) * T::lit(3.0).sqrt() / T::lit(3.0);
    let delta = delta1.min(c * delta2).min(half_l);
    let w = ((delta * T::lit(2.0) / l.h).floor().to_usize().unwrap_or(0) / 4) * 4;
    let snapped = l.half() * T::from_usize_lossy(w);
    if w < 4 {
        return Err(SolverError::DegenerateHeight { delta: snapped.as_f64(), h: l.h.as_f64() });
    }
    Ok((snapped, w))
}

/// Tile offsets (in base cells) for tiles of `w` cells over `n` cells:
/// stride w/4, the last one flush right. Mirrors [`Trapezoid::tile_cover`].
fn tile_offsets(n: usize, w: usize) -> Vec<usize> {
    let stride = (w / 4).max(1);
    let mut out = Vec::new();
    let mut q = 0;
    while q + w < n {
        out.push(q);
        q += stride;
    }
    out.push(n - w);
    out
}

/// Accumulates tile results into one set of fields, checking bitwise
/// agreement wherever two writers meet.
struct Glue<T: Scalar> {
    lattice: NullLattice<T>,
    dim: usize,
    u: Vec<T>,
    vp: Vec<T>,
    vm: Vec<T>,
    h: Vec<T>,
    node_set: Vec<bool>,
    cell_set: Vec<bool>,
}

impl<T: Scalar> Glue<T> {
    fn new(lattice: NullLattice<T>, dim: usize) -> Self {
        Glue {
            lattice,
            dim,
            u: vec![T::zero(); lattice.node_count() * dim],
            vp: vec![T::zero(); lattice.cell_count() * 3 * dim],
            vm: vec![T::zero(); lattice.cell_count() * 3 * dim],
            h: vec![T::zero(); lattice.cell_count() * dim],
            node_set: vec![false; lattice.node_count()],
            cell_set: vec![false; lattice.cell_count()],
        }
    }

    fn put(dst: &mut [T], src: &[T], fresh: bool, what: &'static str, index: usize) -> Result<(), SolverError> {
        if fresh {
            dst.copy_from_slice(src);
        } else if !same_bits(dst, src) {
            return Err(SolverError::OverlapMismatch { what, index });
        }
        Ok(())
    }

    /// Copies `s` (living on the sub-lattice at offsets q_off, k_off) in.
    /// Nodes on local layers below `first_layer` are skipped.
    fn add(&mut self, s: &Solution<T>, q_off: usize, k_off: usize, first_layer: usize) -> Result<(), SolverError> {
        let sl = s.lattice();
        let d = self.dim;
        let g = self.lattice;
        for k in first_layer..=sl.m {
            for q in 0..=sl.n - k {
                let gi = g.node(k + k_off, q + q_off);
                let fresh = !self.node_set[gi];
                Self::put(&mut self.u[gi * d..(gi + 1) * d], s.u.at(k, q), fresh, "node", gi)?;
                self.node_set[gi] = true;
            }
        }
        for c in sl.cells() {
            let gi = match c.kind {
                CellKind::Up => g.up(c.k + k_off, c.q + q_off),
                CellKind::Lo => g.lo(c.k + k_off, c.q + q_off),
            };
            let fresh = !self.cell_set[gi];
            let (a, b) = (gi * 3 * d, (gi + 1) * 3 * d);
            let (sa, sb) = (c.index * 3 * d, (c.index + 1) * 3 * d);
            Self::put(&mut self.vp[a..b], &s.vp.values[sa..sb], fresh, "v+", gi)?;
            Self::put(&mut self.vm[a..b], &s.vm.values[sa..sb], fresh, "v-", gi)?;
            Self::put(&mut self.h[gi * d..(gi + 1) * d], s.h_field.at(c.index), fresh, "h", gi)?;
            self.cell_set[gi] = true;
        }
        Ok(())
    }

    fn finish(self, data: &ManifoldData<T>, forcing: &CellField<T>, diag: Diagnostics) -> Result<Solution<T>, SolverError> {
        if let Some(i) = self.node_set.iter().position(|s| !s) {
            return Err(SolverError::OverlapMismatch { what: "uncovered node", index: i });
        }
        if let Some(i) = self.cell_set.iter().position(|s| !s) {
            return Err(SolverError::OverlapMismatch { what: "uncovered cell", index: i });
        }
        let l = self.lattice;
        let d = self.dim;
        Ok(Solution {
            domain: l.parent(),
            u: NodeField { lattice: l, dim: d, values: self.u },
            vp: AffineField { lattice: l, dim: d, values: self.vp },
            vm: AffineField { lattice: l, dim: d, values: self.vm },
            h_field: CellField { lattice: l, dim: d, values: self.h },
            data: data.clone(),
            forcing: forcing.clone(),
            diagnostics: diag,
        })
    }
}

fn merge_diag(into: &mut Diagnostics, d: &Diagnostics) {
    into.iterations = into.iterations.max(d.iterations);
    into.final_residual = into.final_residual.max(d.final_residual);
    into.ratios.extend_from_slice(&d.ratios);
    into.iterate_norms.extend_from_slice(&d.iterate_norms);
}

/// Tiles of `w` cells (half-length δ = w·h/2) solved by Picard iteration up
/// to `height` layers, glued into one solution over the bottom `height`
/// layers of the lattice of `f`.
fn solve_tiles<T: Scalar>(
    m: &EmbeddedManifold<T>,
    data: &ManifoldData<T>,
    f: &CellField<T>,
    budget: &ContractionBudget<T>,
    opts: &SolveOptions<T>,
    w: usize,
    height: usize,
) -> Result<Solution<T>, SolverError> {
    let l = f.lattice;
    let out = l.sub(0, 0, l.n, height)?;
    let offsets = tile_offsets(l.n, w);
    let results: Vec<Result<Solution<T>, SolverError>> = offsets
        .par_iter()
        .map(|&q0| {
            let tl = l.sub(q0, 0, w, height.min(w))?;
            let td = data.restrict(q0, w);
            let tf = f.restrict(&tl, q0, 0);
            picard_with(m, &td, &tf, budget, opts)
        })
        .collect();
    let mut glue = Glue::new(out, f.dim);
    let mut diag = Diagnostics::new(SolvePath::Tiled);
    for (q0, r) in offsets.iter().zip(results) {
        let s = r?;
        merge_diag(&mut diag, &s.diagnostics);
        glue.add(&s, *q0, 0, 0)?;
    }
    let fo = f.restrict(&out, 0, 0);
    glue.finish(data, &fo, diag)
}

/// Local solve for arbitrary data on the lattice of `f`: tiles of
/// half-length δ from [`find_local_height`] (or `opts.delta`), glued over
/// t ≤ δ/2. Data that are already small go straight to Picard iteration on
/// the whole lattice.
pub fn solve_local_large<T: Scalar>(
    m: &EmbeddedManifold<T>,
    data: &ManifoldData<T>,
    f: &CellField<T>,
    budget: &ContractionBudget<T>,
    opts: &SolveOptions<T>,
) -> Result<Solution<T>, SolverError> {
    let l = f.lattice;
    if opts.delta.is_none() && check_smallness(data, f, budget.eta).is_ok() {
        return picard_with(m, data, f, budget, opts);
    }
    let w = tile_width(data, f, budget, opts)?;
    solve_tiles(m, data, f, budget, opts, w, (w / 2).min(l.m))
}

fn tile_width<T: Scalar>(
    data: &ManifoldData<T>,
    f: &CellField<T>,
    budget: &ContractionBudget<T>,
    opts: &SolveOptions<T>,
) -> Result<usize, SolverError> {
    let l = f.lattice;
    let mut w = match opts.delta {
        Some(d) => {
            let w = lattice_count(d * T::lit(2.0), l.h)
                .ok_or_else(|| FieldError::Geometry(format!("δ = {d} is not a lattice length")))?;
            if w % 4 != 0 || w == 0 {
                return Err(FieldError::Geometry(format!("δ = {d} must be a positive multiple of 2h")).into());
            }
            let cap = if opts.strict_tiles { l.n / 2 } else { l.n };
            if w > cap {
                return Err(DomainError::DeltaTooLarge {
                    delta: d.as_f64(),
                    half_length: (l.half() * T::from_usize_lossy(l.n)).as_f64(),
                }
                .into());
            }
            w
        }
        None => find_local_height(data, f, budget.eta)?.1,
    };
    if opts.delta.is_none() {
        // the slab rule bounds forcing per slab, not per tile; shrink until
        // every tile is small
        while w >= 4 {
            let height = (w / 2).min(l.m);
            let ok = tile_offsets(l.n, w).iter().all(|&q0| {
                let tl = match l.sub(q0, 0, w, height.min(w)) {
                    Ok(t) => t,
                    Err(_) => return false,
                };
                f.restrict(&tl, q0, 0).l1_norm() <= budget.eta
            });
            if ok {
                break;
            }
            w -= 4;
        }
        if w < 4 {
            return Err(SolverError::DegenerateHeight { delta: 0.0, h: l.h.as_f64() });
        }
    }
    Ok(w)
}

/// Restart data on layer k of a solution: u at the nodes and ∂ₜu averaged
/// over each slice edge.
pub fn restart_data<T: Scalar>(s: &Solution<T>, k: usize) -> ManifoldData<T> {
    crate::fields::trace_layer(&s.u, &s.vp, &s.vm, k).to_data()
}

/// Global solve on a compact lattice trapezoid by continuation: local
/// solves of height δ/2 restarted from the trace on their top slice until
/// the lattice top is reached.
pub fn solve_global<T: Scalar>(
    m: &EmbeddedManifold<T>,
    data: &ManifoldData<T>,
    f: &CellField<T>,
    budget: &ContractionBudget<T>,
    opts: &SolveOptions<T>,
) -> Result<Solution<T>, SolverError> {
    solve_scheduled(m, data, f, budget, opts, None)
}

/// As [`solve_global`], but with segment heights taken from `schedule`
/// (layers per segment, 0 meaning "direct solve to the top") when given.
pub fn solve_scheduled<T: Scalar>(
    m: &EmbeddedManifold<T>,
    data: &ManifoldData<T>,
    f: &CellField<T>,
    budget: &ContractionBudget<T>,
    opts: &SolveOptions<T>,
    schedule: Option<&[(usize, usize)]>,
) -> Result<Solution<T>, SolverError> {
    let l = f.lattice;
    let mut glue = Glue::new(l, f.dim);
    let mut diag = Diagnostics::new(SolvePath::Continued);
    let mut k_cur = 0usize;
    let mut cur = data.clone();
    let mut seg_index = 0usize;
    let mut single = None;
    while k_cur < l.m {
        let seg = l.sub(0, k_cur, l.n - k_cur, l.m - k_cur)?;
        let sf = f.restrict(&seg, 0, k_cur);
        let planned = schedule.map(|s| s.get(seg_index).copied().unwrap_or((0, 0)));
        let direct = match planned {
            Some((w, _)) => w == 0 || w > seg.n,
            None => opts.delta.is_none() && check_smallness(&cur, &sf, budget.eta).is_ok(),
        };
        let (s, w) = if direct {
            (picard_with(m, &cur, &sf, budget, opts)?, 0)
        } else {
            let w = match planned {
                Some((w, _)) => w,
                None => match tile_width(&cur, &sf, budget, opts) {
                    Ok(w) => w,
                    Err(SolverError::DegenerateHeight { delta, .. }) => {
                        let (mp, mm) = cur.null_masses();
                        return Err(SolverError::StallDetected {
                            t: l.t_of(k_cur).as_f64(),
                            delta,
                            mass_plus: mp.as_f64(),
                            mass_minus: mm.as_f64(),
                            forcing: sf.l1_norm().as_f64(),
                        });
                    }
                    Err(e) => return Err(e),
                },
            };
            let height = match planned {
                Some((_, hgt)) => hgt.min(seg.m),
                None => (w / 2).min(seg.m),
            };
            if w > seg.n {
                (picard_with(m, &cur, &sf, budget, opts)?, 0)
            } else {
                (solve_tiles(m, &cur, &sf, budget, opts, w, height)?, w)
            }
        };
        let adv = s.lattice().m;
        merge_diag(&mut diag, &s.diagnostics);
        diag.segments.push(adv);
        diag.deltas.push((l.half() * T::from_usize_lossy(w)).as_f64());
        glue.add(&s, 0, k_cur, if k_cur == 0 { 0 } else { 1 })?;
        k_cur += adv;
        seg_index += 1;
        if k_cur < l.m {
            cur = restart_data(&s, adv);
        } else if seg_index == 1 {
            single = Some(s.diagnostics.path);
        }
    }
    if let Some(p) = single {
        diag.path = p;
    }
    glue.finish(data, f, diag)
}

/// (w, layers) per segment of a continued solution, usable as a schedule.
pub fn schedule_of<T: Scalar>(s: &Solution<T>, h: T) -> Vec<(usize, usize)> {
    s.diagnostics
        .deltas
        .iter()
        .zip(&s.diagnostics.segments)
        .map(|(d, k)| ((T::lit(*d) * T::lit(2.0) / h).round().to_usize().unwrap_or(0), *k))
        .collect()
}

/// Unbounded (or semi-bounded) trapezoids truncated to the base
/// [x_left, x_left + n·h] of the lattice of `f` (the cutoff).
///
/// The data must be small outside some [a, b]; [a, b] is the narrowest
/// such interval found by scanning inwards from the cutoff. The core
/// region a − t < x < b + t is solved by continuation on the compact
/// trapezoid with base [a − 2H, b + 2H] (H the height), the two tails by
/// Picard iteration on their own triangles. Core values win where the
/// regions overlap; the largest core/tail disagreement is returned.
pub fn solve_unbounded<T: Scalar>(
    m: &EmbeddedManifold<T>,
    data: &ManifoldData<T>,
    f: &CellField<T>,
    budget: &ContractionBudget<T>,
    opts: &SolveOptions<T>,
) -> Result<(Solution<T>, T), SolverError> {
    let l = f.lattice;
    let n = l.n;
    let hgt = l.m;
    let cell_mass = |i: usize| {
        let (p, q) = (norm1(&data.g_minus(i)), norm1(&data.g_plus(i)));
        (p * data.h, q * data.h)
    };
    // largest left tail [0, ia) and right tail [ib, n) with small masses
    let tail_ok = |lo: usize, hi: usize| {
        let mut mp = T::zero();
        let mut mm = T::zero();
        for i in lo..hi {
            let (p, q) = cell_mass(i);
            mp = mp + p;
            mm = mm + q;
        }
        mp <= budget.eta && mm <= budget.eta
    };
    let mut ia = 0;
    while ia < n && tail_ok(0, ia + 1) {
        ia += 1;
    }
    let mut ib = n;
    while ib > ia && tail_ok(ib - 1, n) {
        ib -= 1;
    }
    // the core trapezoid needs 2H of room on both sides
    let core_lo = ia.saturating_sub(2 * hgt);
    let core_hi = (ib + 2 * hgt).min(n);
    let left_fits = ia >= 2 * hgt || ia == 0;
    let right_fits = ib + 2 * hgt <= n || ib == n;
    if !left_fits || !right_fits || core_hi - core_lo < hgt {
        let (mp, mm) = data.null_masses();
        return Err(SolverError::TailNotSmall {
            mass: mp.max(mm).as_f64(),
            a: l.x_of(0, ia).as_f64(),
            b: l.x_of(0, ib).as_f64(),
            eta: budget.eta.as_f64(),
        });
    }
    let core_l = l.sub(core_lo, 0, core_hi - core_lo, hgt)?;
    let core = solve_global(m, &data.restrict(core_lo, core_hi - core_lo), &f.restrict(&core_l, core_lo, 0), budget, opts)?;
    let mut glue = Glue::new(l, f.dim);
    glue.add(&core, core_lo, 0, 0)?;
    let mut gap = T::zero();
    let mut diag = core.diagnostics.clone();
    diag.path = SolvePath::Continued;
    for (lo, hi) in [(0, core_lo), (core_hi, n)] {
        if hi <= lo {
            continue;
        }
        // the tail triangle over [lo, hi) extended into the core by H so
        // that it reaches every node outside the core region
        let (tlo, thi) = if lo == 0 { (0, (hi + hgt).min(n)) } else { (lo.saturating_sub(hgt), n) };
        let th = hgt.min(thi - tlo);
        let tl = l.sub(tlo, 0, thi - tlo, th)?;
        let td = data.restrict(tlo, thi - tlo);
        let tf = f.restrict(&tl, tlo, 0);
        let ts = picard_with(m, &td, &tf, budget, opts)?;
        merge_diag(&mut diag, &ts.diagnostics);
        let d = f.dim;
        for k in 0..=tl.m {
            for q in 0..=tl.n - k {
                let gi = l.node(k, q + tlo);
                let v = ts.u.at(k, q);
                if glue.node_set[gi] {
                    for j in 0..d {
                        gap = gap.max((glue.u[gi * d + j] - v[j]).abs());
                    }
                } else {
                    glue.u[gi * d..(gi + 1) * d].copy_from_slice(v);
                    glue.node_set[gi] = true;
                }
            }
        }
        for c in tl.cells() {
            let gi = match c.kind {
                CellKind::Up => l.up(c.k, c.q + tlo),
                CellKind::Lo => l.lo(c.k, c.q + tlo),
            };
            if glue.cell_set[gi] {
                continue;
            }
            let (a, b) = (gi * 3 * d, (gi + 1) * 3 * d);
            let (sa, sb) = (c.index * 3 * d, (c.index + 1) * 3 * d);
            glue.vp[a..b].copy_from_slice(&ts.vp.values[sa..sb]);
            glue.vm[a..b].copy_from_slice(&ts.vm.values[sa..sb]);
            glue.h[gi * d..(gi + 1) * d].copy_from_slice(ts.h_field.at(c.index));
            glue.cell_set[gi] = true;
        }
    }
    Ok((glue.finish(data, f, diag)?, gap))
}

/// Solves on the triangles with base [c − j·s, c + j·s] for j = 1..=n_max
/// (c the centre of the lattice of `f`, s = n/(2·n_max) cells) and checks
/// that each solution extends the previous one bit for bit.
///
/// All triangles share the continuation schedule of the largest one, so
/// restart slices coincide and nesting is a consequence of causal reads.
pub fn solve_concatenated<T: Scalar>(
    m: &EmbeddedManifold<T>,
    data: &ManifoldData<T>,
    f: &CellField<T>,
    budget: &ContractionBudget<T>,
    opts: &SolveOptions<T>,
    n_max: usize,
) -> Result<Vec<Solution<T>>, SolverError> {
    let l = f.lattice;
    if n_max == 0 || l.n % (2 * n_max) != 0 || l.m != l.n {
        return Err(FieldError::Geometry("lattice must be a triangle split into 2·n_max equal steps".into()).into());
    }
    let step = l.n / (2 * n_max);
    let big = solve_global(m, data, f, budget, opts)?;
    let schedule = schedule_of(&big, l.h);
    let mut out: Vec<Solution<T>> = Vec::with_capacity(n_max);
    for j in 1..=n_max {
        let w = 2 * j * step;
        let q0 = l.n / 2 - j * step;
        let s = if j == n_max {
            big.clone()
        } else {
            let tl = l.sub(q0, 0, w, w)?;
            solve_scheduled(m, &data.restrict(q0, w), &f.restrict(&tl, q0, 0), budget, opts, Some(&schedule))?
        };
        if let Some(prev) = out.last() {
            let pl = prev.lattice();
            let inner = s.lattice().sub(step, 0, pl.n, pl.m)?;
            let r = s.u.restrict(&inner, step, 0);
            if !same_bits(&r.values, &prev.u.values) {
                return Err(SolverError::NotNested(format!("triangle {j} differs from triangle {}", j - 1)));
            }
        }
        out.push(s);
    }
    for s in &mut out {
        s.diagnostics.path = SolvePath::Concatenated;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere() -> EmbeddedManifold<f64> {
        EmbeddedManifold::sphere(3)
    }

    fn geodesic_data(n: usize, omega: f64) -> ManifoldData<f64> {
        ManifoldData::from_fns(3, 2.0 / n as f64, -1.0, n, |_| vec![1.0, 0.0, 0.0], |_| vec![0.0, omega, 0.0])
    }

    #[test]
    fn budget_examples() {
        let b = select_budget(1.0, 3.0).unwrap();
        assert_eq!((b.eta, b.r), (1.0 / 32.0, 1.0 / 16.0));
        assert!(b.is_valid());
        let b = select_budget(1.0, 1.0).unwrap();
        assert!(b.is_valid());
        // a hand-picked smaller pair also passes all three
        assert!(budget_satisfies(0.0078125, 0.015625, 1.0, 1.0));
        assert!(!budget_satisfies(0.05, 0.01, 1.0, 1.0));
        for g in [1.0f64, 10.0, 100.0, 1000.0] {
            let b = select_budget(g, 3.0).unwrap();
            assert!((b.r * g - 1.0 / 16.0).abs() < 1e-15);
        }
        assert!(select_budget(0.0, 1.0).is_err());
    }

    #[test]
    fn phi_of_zero_examples() {
        let n = 8;
        let l = NullLattice::new(0.25, n, n, 0.0, -1.0).unwrap();
        let zero = CellField::zeros(l, 3);
        let data = ManifoldData::from_fns(3, 0.25, -1.0, n, |_| vec![0.0, 0.0, 1.0], |_| vec![0.0; 3]);
        let p = phi_map(&sphere(), &data, &zero, &zero).unwrap();
        assert!(p.values.iter().all(|v| *v == 0.0));
        let data = geodesic_data(n, 1.0);
        let p = phi_map(&sphere(), &data, &zero, &zero).unwrap();
        // bottom cells: u ≈ (1, t, 0) projected, |∂ₜu|² = 1
        let c = l.up(0, 3);
        let v = p.at(c);
        let t = l.centroid(l.cell_id(c)).0;
        let r = (1.0 + t * t).sqrt();
        assert!((v[0] + 1.0 / r).abs() < 1e-12 && (v[1] + t / r).abs() < 1e-12, "{v:?}");
    }

    #[test]
    fn constant_data_converges_immediately() {
        let l = NullLattice::new(0.25, 8, 8, 0.0, -1.0).unwrap();
        let data = ManifoldData::from_fns(3, 0.25, -1.0, 8, |_| vec![0.0, 0.6, 0.8], |_| vec![0.0; 3]);
        let b = select_budget(1.0, 3.0).unwrap();
        let s = picard_solve_small(&sphere(), &data, &CellField::zeros(l, 3), &b, 1e-14, 50).unwrap();
        assert_eq!(s.diagnostics.iterations, 1);
        assert!(s.h_field.values.iter().all(|v| *v == 0.0));
        assert!(s.u.values.chunks(3).all(|p| p == [0.0, 0.6, 0.8]));
    }

    #[test]
    fn smallness_is_checked() {
        let l = NullLattice::new(0.25, 8, 8, 0.0, -1.0).unwrap();
        let b = select_budget(1.0, 3.0).unwrap();
        let r = picard_solve_small(&sphere(), &geodesic_data(8, 1.0), &CellField::zeros(l, 3), &b, 1e-12, 50);
        assert!(matches!(r, Err(SolverError::SmallnessViolated { .. })));
    }

    #[test]
    fn local_height_examples() {
        // |Du0 ± v0| = 1 pointwise, η = 0.05 → δ₁ = 0.025
        let n = 400;
        let h = 2.0 / n as f64;
        let data = ManifoldData::from_fns(1, h, -1.0, n, |_| vec![0.0], |_| vec![1.0]);
        let l = NullLattice::new(h, n, 40, 0.0, -1.0).unwrap();
        let (d, w) = find_local_height(&data, &CellField::zeros(l, 1), 0.05).unwrap();
        assert!((d - 0.02).abs() < 1e-12, "{d}");
        assert_eq!(w % 4, 0);
        let zero = ManifoldData::from_fns(1, h, -1.0, n, |_| vec![0.0], |_| vec![0.0]);
        let (d, _) = find_local_height(&zero, &CellField::zeros(l, 1), 0.05).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        let big = ManifoldData::from_fns(1, h, -1.0, n, |_| vec![0.0], |_| vec![100.0]);
        assert!(matches!(
            find_local_height(&big, &CellField::zeros(l, 1), 0.05),
            Err(SolverError::DegenerateHeight { .. })
        ));
    }

    #[test]
    fn tile_offsets_cover() {
        assert_eq!(tile_offsets(16, 8), vec![0, 2, 4, 6, 8]);
        assert_eq!(tile_offsets(18, 8), vec![0, 2, 4, 6, 8, 10]);
        assert_eq!(tile_offsets(8, 8), vec![0]);
    }

    #[test]
    fn tiled_equals_small_data_on_its_region() {
        let n = 32;
        let h = 2.0 / n as f64;
        let l = NullLattice::new(h, n, n, 0.0, -1.0).unwrap();
        let data = ManifoldData::from_fns(
            3,
            h,
            -1.0,
            n,
            |x| {
                let a = 0.01 * x;
                vec![a.cos(), a.sin(), 0.0]
            },
            |x| vec![0.0, 0.0, 0.005 * (3.0 * x).cos()],
        );
        let f = CellField::zeros(l, 3);
        let b = select_budget(1.0, 3.0).unwrap();
        let small = picard_solve_small(&sphere(), &data, &f, &b, 1e-14, 100).unwrap();
        let opts = SolveOptions { delta: Some(0.25), tol: 1e-14, ..SolveOptions::default() };
        let tiled = solve_local_large(&sphere(), &data, &f, &b, &opts).unwrap();
        assert_eq!(tiled.diagnostics.path, SolvePath::Tiled);
        let tl = tiled.lattice();
        assert_eq!(tl.m, 4);
        let r = small.u.restrict(&tl, 0, 0);
        assert_eq!(r, tiled.u);
    }
}
