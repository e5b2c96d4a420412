//! Scattering: the free group S(t) on grid data, Duhamel scattering data
//! for ℝⁿ-valued solutions, the conformal compactification and its
//! boundary traces for target-valued solutions, defect metrics and the
//! support-cone check.

use serde::Serialize;
use thiserror::Error;

use crate::estimates::EstimateReport;
use crate::fields::{lattice_count, trace_layer, CellField, CellKind, FieldError, NullLattice, SliceTrace};
use crate::geometry::{EmbeddedManifold, GeometryError, ManifoldData};
use crate::solver::{solve_global, ContractionBudget, Solution, SolveOptions, SolverError};
use crate::vecn::norm1;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ScatterError {
    #[error("forcing mass {mass} beyond the cutoff exceeds {tol}")]
    TailMass { mass: f64, tol: f64 },
    #[error("time {0} is not a multiple of the grid spacing")]
    OffGrid(f64),
    #[error("grids do not line up: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Forcing given as a function of (t, x).
pub type ForcingFn<'a, T> = &'a (dyn Fn(T, T) -> Vec<T> + Sync);

/// Free-wave data (ū₀, v̄₀) on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringData<T: Scalar> {
    pub data: ManifoldData<T>,
}

impl<T: Scalar> ScatteringData<T> {
    pub fn ubar0(&self, i: usize) -> &[T] {
        self.data.node(i)
    }

    pub fn vbar0(&self, i: usize) -> &[T] {
        self.data.cell(i)
    }
}

fn grid_steps<T: Scalar>(x: T, h: T) -> Result<i64, ScatterError> {
    let s = x / h;
    let r = s.round();
    if (s - r).abs() > T::lit(1e-9) * (T::one() + s.abs()) {
        return Err(ScatterError::OffGrid(x.as_f64()));
    }
    r.to_i64().ok_or(ScatterError::OffGrid(x.as_f64()))
}

/// Grid data with u0 extended by constants and v0 by zero.
struct Extended<'a, T: Scalar> {
    d: &'a ManifoldData<T>,
    /// prefix[i] = ∫_{x_0}^{x_i} v0
    prefix: Vec<T>,
}

impl<'a, T: Scalar> Extended<'a, T> {
    fn new(d: &'a ManifoldData<T>) -> Self {
        let n = d.n_cells();
        let dim = d.dim;
        let mut prefix = vec![T::zero(); (n + 1) * dim];
        for i in 0..n {
            for j in 0..dim {
                prefix[(i + 1) * dim + j] = prefix[i * dim + j] + d.cell(i)[j] * d.h;
            }
        }
        Extended { d, prefix }
    }

    fn clamp(&self, i: i64) -> usize {
        i.clamp(0, self.d.n_cells() as i64) as usize
    }

    fn u(&self, i: i64) -> &[T] {
        self.d.node(self.clamp(i))
    }

    fn v(&self, c: i64, j: usize) -> T {
        if c < 0 || c >= self.d.n_cells() as i64 {
            T::zero()
        } else {
            self.d.cell(c as usize)[j]
        }
    }

    fn du(&self, c: i64, j: usize) -> T {
        if c < 0 || c >= self.d.n_cells() as i64 {
            T::zero()
        } else {
            (self.d.node(c as usize + 1)[j] - self.d.node(c as usize)[j]) / self.d.h
        }
    }

    fn anti(&self, i: i64, j: usize) -> T {
        self.prefix[self.clamp(i) * self.d.dim + j]
    }
}

/// S(s) with s = `shift`·h (either sign), evaluated on the grid with first
/// node x_start + `off`·h and `n_out` cells.
pub fn group_action<T: Scalar>(data: &ManifoldData<T>, shift: i64, off: i64, n_out: usize) -> ManifoldData<T> {
    group_action_half(data, 2 * shift, off - shift, n_out)
}

/// S(s) with s = `k`·h/2 (either sign) on the grid whose node i sits at
/// x = x_b + s, x_b the data node `off_b` + i. Both x − s and x + s are
/// data nodes, so no interpolation is involved.
pub fn group_action_half<T: Scalar>(data: &ManifoldData<T>, k: i64, off_b: i64, n_out: usize) -> ManifoldData<T> {
    let e = Extended::new(data);
    let dim = data.dim;
    let half = T::lit(0.5);
    let mut u0 = Vec::with_capacity((n_out + 1) * dim);
    for i in 0..=n_out as i64 {
        let b = i + off_b;
        let a = b + k;
        let (ua, ub) = (e.u(a), e.u(b));
        for j in 0..dim {
            let int = e.anti(a, j) - e.anti(b, j);
            u0.push((ua[j] + ub[j]) * half + int * half);
        }
    }
    let mut v0 = Vec::with_capacity(n_out * dim);
    for c in 0..n_out as i64 {
        let b = c + off_b;
        let a = b + k;
        for j in 0..dim {
            let dv = e.du(a, j) - e.du(b, j);
            let vv = e.v(a, j) + e.v(b, j);
            v0.push((dv + vv) * half);
        }
    }
    let shift = data.h * half * T::from_i64(k).unwrap_or(T::zero());
    let x_start = data.x_node(0) + data.h * T::from_i64(off_b).unwrap_or(T::zero()) + shift;
    ManifoldData { dim, h: data.h, x_start, u0, v0 }
}

/// S(t) applied to the data, on the data's own grid, or on that grid moved
/// by h/2 when t is an odd multiple of h/2.
pub fn free_wave<T: Scalar>(data: &ManifoldData<T>, t: T) -> Result<SliceTrace<T>, ScatterError> {
    let k = grid_steps(t, data.h * T::lit(0.5))?;
    let s = group_action_half(data, k, -k.div_euclid(2), data.n_cells());
    let dim = data.dim;
    let mut ux = Vec::with_capacity(s.n_cells() * dim);
    for i in 0..s.n_cells() {
        ux.extend(s.du0(i));
    }
    Ok(SliceTrace { t, x_start: s.x_start, h: s.h, dim, u: s.u0, ut: s.v0, ux })
}

/// S(−t) of a slice trace at time t, evaluated on the grid starting at
/// `x_start` with `n` cells.
pub fn pull_back<T: Scalar>(tr: &SliceTrace<T>, x_start: T, n: usize) -> Result<ManifoldData<T>, ScatterError> {
    let k = grid_steps(tr.t, tr.h * T::lit(0.5))?;
    let off_b = grid_steps(x_start + tr.t - tr.x_start, tr.h)?;
    Ok(group_action_half(&tr.to_data(), -k, off_b, n))
}

/// L^{1,1} distance of two data sets on the same grid.
pub fn l11_distance<T: Scalar>(a: &ManifoldData<T>, b: &ManifoldData<T>) -> Result<T, ScatterError> {
    if a.dim != b.dim || a.n_cells() != b.n_cells() || !a.h.same_bits(b.h) {
        return Err(ScatterError::GridMismatch("l11 distance".into()));
    }
    let u0 = a.u0.iter().zip(&b.u0).map(|(x, y)| *x - *y).collect();
    let v0 = a.v0.iter().zip(&b.v0).map(|(x, y)| *x - *y).collect();
    Ok(ManifoldData { dim: a.dim, h: a.h, x_start: a.x_start, u0, v0 }.l11_norm())
}

/// Duhamel scattering data (ū₀, v̄₀) = (u₀, v₀) + ∫₀^∞ S(−τ)(0, F(τ)) dτ for
/// the right-hand side F on the lattice whose base is the data grid.
///
/// Cells above `cutoff` are dropped; their mass must not exceed `tol`.
pub fn scattering_data_rn<T: Scalar>(
    data: &ManifoldData<T>,
    f: &CellField<T>,
    cutoff: T,
    tol: T,
) -> Result<ScatteringData<T>, ScatterError> {
    let l = f.lattice;
    let n = l.n;
    let dim = data.dim;
    if data.n_cells() != n || !data.h.same_bits(l.h) || f.dim != dim {
        return Err(ScatterError::GridMismatch("data grid is not the lattice base".into()));
    }
    let kc = lattice_count((cutoff - l.t_base).max(T::zero()), l.half())
        .unwrap_or_else(|| ((cutoff - l.t_base) / l.half()).floor().to_usize().unwrap_or(0))
        .min(l.m);
    let keep = |kind: CellKind, k: usize| match kind {
        CellKind::Up => k < kc,
        CellKind::Lo => k <= kc,
    };
    let tail = f.l1_norm_where(|c| !keep(c.kind, c.k));
    if tail > tol {
        return Err(ScatterError::TailMass { mass: tail.as_f64(), tol: tol.as_f64() });
    }
    let area = l.area();
    let mut col = vec![T::zero(); n * dim];
    let mut row = vec![T::zero(); n * dim];
    // ū₀ correction: cells with b < x_i < a, i.e. column q < i ≤ row p
    let mut diff = vec![T::zero(); (n + 2) * dim];
    for c in l.cells() {
        if !keep(c.kind, c.k) {
            continue;
        }
        let p = c.q + c.k;
        let v = f.at(c.index);
        for j in 0..dim {
            let m = v[j] * area;
            col[c.q * dim + j] = col[c.q * dim + j] + m;
            row[p * dim + j] = row[p * dim + j] + m;
            diff[(c.q + 1) * dim + j] = diff[(c.q + 1) * dim + j] + m;
            diff[(p + 1) * dim + j] = diff[(p + 1) * dim + j] - m;
        }
    }
    let half = T::lit(0.5);
    let mut u0 = data.u0.clone();
    let mut run = vec![T::zero(); dim];
    for i in 0..=n {
        for j in 0..dim {
            run[j] = run[j] + diff[i * dim + j];
            u0[i * dim + j] = u0[i * dim + j] - run[j] * half;
        }
    }
    let mut v0 = data.v0.clone();
    let inv = half / data.h;
    for i in 0..n * dim {
        v0[i] = v0[i] + (col[i] + row[i]) * inv;
    }
    Ok(ScatteringData { data: ManifoldData { dim, h: data.h, x_start: data.x_start, u0, v0 } })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DefectTriple {
    pub t: f64,
    pub sup_defect: f64,
    pub l1_ut_defect: f64,
    pub l1_ux_defect: f64,
}

impl DefectTriple {
    pub fn max(&self) -> f64 {
        self.sup_defect.max(self.l1_ut_defect).max(self.l1_ux_defect)
    }
}

/// Norms of u(t) − S(t)(ū₀, v̄₀) on the slice of the solution at time t.
pub fn scattering_defect<T: Scalar>(s: &Solution<T>, sd: &ScatteringData<T>, t: T) -> Result<DefectTriple, ScatterError> {
    let l = s.lattice();
    let k = lattice_count(t - l.t_base, l.half()).ok_or(FieldError::OffLattice(t.as_f64()))?;
    if k > l.m || k >= l.n {
        return Err(FieldError::OffLattice(t.as_f64()).into());
    }
    let tr = trace_layer(&s.u, &s.vp, &s.vm, k);
    let fw = free_wave(&sd.data, t - l.t_base)?;
    if !fw.h.same_bits(tr.h) {
        return Err(ScatterError::GridMismatch("spacing".into()));
    }
    let off = grid_steps(tr.x_start - fw.x_start, tr.h)?;
    let nc = tr.n_cells() as i64;
    if off < 0 || off + nc > fw.n_cells() as i64 {
        return Err(ScatterError::GridMismatch("scattering data do not cover the slice".into()));
    }
    let off = off as usize;
    let d = tr.dim;
    let mut sup = T::zero();
    for i in 0..=tr.n_cells() {
        let a = &tr.u[i * d..(i + 1) * d];
        let b = &fw.u[(i + off) * d..(i + off + 1) * d];
        let diff: Vec<T> = a.iter().zip(b).map(|(x, y)| *x - *y).collect();
        sup = sup.max(norm1(&diff));
    }
    let mut lt = T::zero();
    let mut lx = T::zero();
    for i in 0..tr.n_cells() {
        for j in 0..d {
            lt = lt + (tr.ut[i * d + j] - fw.ut[(i + off) * d + j]).abs();
            lx = lx + (tr.ux[i * d + j] - fw.ux[(i + off) * d + j]).abs();
        }
    }
    Ok(DefectTriple {
        t: t.as_f64(),
        sup_defect: sup.as_f64(),
        l1_ut_defect: (lt * tr.h).as_f64(),
        l1_ux_defect: (lx * tr.h).as_f64(),
    })
}

/// ‖S(−t)(u(t), ∂ₜu(t)) − (ū₀, v̄₀)‖_{L^{1,1}} on the scattering grid.
pub fn pullback_defect<T: Scalar>(s: &Solution<T>, sd: &ScatteringData<T>, t: T) -> Result<T, ScatterError> {
    let l = s.lattice();
    let k = lattice_count(t - l.t_base, l.half()).ok_or(FieldError::OffLattice(t.as_f64()))?;
    if k > l.m || k >= l.n {
        return Err(FieldError::OffLattice(t.as_f64()).into());
    }
    let mut tr = trace_layer(&s.u, &s.vp, &s.vm, k);
    tr.t = t - l.t_base;
    let back = pull_back(&tr, sd.data.x_start, sd.data.n_cells())?;
    l11_distance(&back, &sd.data)
}

/// The problem on the compactified triangle with vertices (0, ±π/2) and
/// (π/2, 0), on a lattice of N base cells (H = π/N).
#[derive(Debug, Clone)]
pub struct CompactifiedProblem<T: Scalar> {
    pub lattice: NullLattice<T>,
    /// U0(X) = u0(tan X) at the nodes, V0 the cell averages of
    /// sec²(X)·v0(tan X).
    pub data: ManifoldData<T>,
    /// F = sec²(X+T)·sec²(X−T)·f at cell centroids.
    pub forcing: CellField<T>,
}

impl<T: Scalar> CompactifiedProblem<T> {
    /// (bU0, bV0) on a grid extended by `margin` cells per side: U0
    /// continued by constants, V0 by zero.
    pub fn extended(&self, margin: usize) -> ManifoldData<T> {
        let d = &self.data;
        let n = d.n_cells();
        let dim = d.dim;
        let mut u0 = Vec::with_capacity((n + 2 * margin + 1) * dim);
        for _ in 0..margin {
            u0.extend_from_slice(d.node(0));
        }
        u0.extend_from_slice(&d.u0);
        for _ in 0..margin {
            u0.extend_from_slice(d.node(n));
        }
        let mut v0 = vec![T::zero(); margin * dim];
        v0.extend_from_slice(&d.v0);
        v0.extend(std::iter::repeat(T::zero()).take(margin * dim));
        let x_start = d.x_start - d.h * T::from_usize_lossy(margin);
        ManifoldData { dim, h: d.h, x_start, u0, v0 }
    }
}

fn sec2<T: Scalar>(a: T) -> T {
    let c = a.cos();
    T::one() / (c * c)
}

pub fn compactify<T: Scalar>(data: &ManifoldData<T>, f: ForcingFn<'_, T>, n: usize) -> Result<CompactifiedProblem<T>, ScatterError> {
    let pi = T::lit(std::f64::consts::PI);
    let half_pi = pi * T::lit(0.5);
    let hh = pi / T::from_usize_lossy(n);
    let l = NullLattice::new(hh, n, n, T::zero(), -half_pi)?;
    let dim = data.dim;
    let xs = |i: usize| -half_pi + hh * T::from_usize_lossy(i);
    let mut u0 = Vec::with_capacity((n + 1) * dim);
    for i in 0..=n {
        let x = match i {
            0 => -T::infinity(),
            i if i == n => T::infinity(),
            i => xs(i).tan(),
        };
        u0.extend(data.u_at(x));
    }
    let mut v0 = Vec::with_capacity(n * dim);
    for i in 0..n {
        let lo = if i == 0 { -T::max_value() } else { xs(i).tan() };
        let hi = if i + 1 == n { T::max_value() } else { xs(i + 1).tan() };
        v0.extend(data.v_integral(lo, hi).into_iter().map(|v| v / hh));
    }
    let cdata = ManifoldData::new(dim, hh, -half_pi, u0, v0)?;
    let forcing = CellField::from_fn(l, dim, |tt, xx| {
        let a = xx + tt;
        let b = xx - tt;
        let (ta, tb) = (a.tan(), b.tan());
        let t = (ta - tb) * T::lit(0.5);
        let x = (ta + tb) * T::lit(0.5);
        let w = sec2(a) * sec2(b);
        let v = f(t, x);
        v.into_iter()
            .map(|fv| {
                let r = fv * w;
                if r.is_finite() {
                    r
                } else {
                    T::zero()
                }
            })
            .collect()
    });
    Ok(CompactifiedProblem { lattice: l, data: cdata, forcing })
}

fn interp<T: Scalar>(vals: &[Vec<T>], lo: T, step: T, y: T) -> Vec<T> {
    let n = vals.len() - 1;
    let s = ((y - lo) / step).max(T::zero()).min(T::from_usize_lossy(n));
    let i = s.floor().to_usize().unwrap_or(0).min(n.saturating_sub(1));
    let w = s - T::from_usize_lossy(i);
    vals[i].iter().zip(&vals[(i + 1).min(n)]).map(|(a, b)| *a + w * (*b - *a)).collect()
}

/// Scattering for target-valued solutions. The compactified problem is
/// solved on its triangle; its traces on the two future null edges give the
/// outgoing profiles φ₊(B) (edge A = π/2) and φ₋(A) (edge B = −π/2), which
/// meet at the apex value c. The comparison free wave is
/// u_L(t, x) = φ₋(arctan(x + t)) + φ₊(arctan(x − t)) − c, returned as data
/// on the grid (x_start, h, n).
#[allow(clippy::too_many_arguments)]
pub fn scatter_m_valued<T: Scalar>(
    m: &EmbeddedManifold<T>,
    data: &ManifoldData<T>,
    f: ForcingFn<'_, T>,
    n_compact: usize,
    budget: &ContractionBudget<T>,
    opts: &SolveOptions<T>,
    grid: (T, T, usize),
) -> Result<(ScatteringData<T>, Solution<T>), ScatterError> {
    let mut cp = compactify(data, f, n_compact)?;
    // cell averaging tilts V0 slightly off the tangent space
    let dim = cp.data.dim;
    for i in 0..cp.data.n_cells() {
        let mid: Vec<T> = cp
            .data
            .node(i)
            .iter()
            .zip(cp.data.node(i + 1))
            .map(|(a, b)| (*a + *b) * T::lit(0.5))
            .collect();
        let p = m.nearest_point(&mid)?;
        let v = m.tangent_project(&p, cp.data.cell(i))?;
        cp.data.v0[i * dim..(i + 1) * dim].copy_from_slice(&v);
    }
    let sol = solve_global(m, &cp.data, &cp.forcing, budget, opts)?;
    let l = sol.lattice();
    let n = l.n;
    let phi_plus: Vec<Vec<T>> = (0..=n).map(|q| sol.u.at(n - q, q).to_vec()).collect();
    let phi_minus: Vec<Vec<T>> = (0..=n).map(|p| sol.u.at(p, 0).to_vec()).collect();
    let c = sol.u.at(n, 0).to_vec();
    let lo = l.x_left;
    let (x_start, h, cells) = grid;
    let mut u0 = Vec::with_capacity((cells + 1) * dim);
    let mut psi = Vec::with_capacity(cells + 1);
    for i in 0..=cells {
        let y = (x_start + h * T::from_usize_lossy(i)).atan();
        let pm = interp(&phi_minus, lo, l.h, y);
        let pp = interp(&phi_plus, lo, l.h, y);
        for j in 0..dim {
            u0.push(pm[j] + pp[j] - c[j]);
        }
        psi.push(pm.iter().zip(&pp).map(|(a, b)| *a - *b).collect::<Vec<T>>());
    }
    let mut v0 = Vec::with_capacity(cells * dim);
    for i in 0..cells {
        for j in 0..dim {
            v0.push((psi[i + 1][j] - psi[i][j]) / h);
        }
    }
    let sd = ScatteringData { data: ManifoldData::new(dim, h, x_start, u0, v0)? };
    Ok((sd, sol))
}

/// Defects at each of `times`.
pub fn defect_series<T: Scalar>(s: &Solution<T>, sd: &ScatteringData<T>, times: &[T]) -> Result<Vec<DefectTriple>, ScatterError> {
    times.iter().map(|t| scattering_defect(s, sd, *t)).collect()
}

/// For data supported in [−S, S] and forcing inside the cone
/// {t + |x| ≤ S}: v₊ must vanish on columns with x − t outside (−S, S),
/// v₋ on rows with x + t outside (−S, S), and u must be constant on each
/// of the three regions reached by neither kind of characteristic.
pub fn support_cone_check<T: Scalar>(s: &Solution<T>, support: T, tol: T) -> Vec<EstimateReport> {
    let l = s.lattice();
    let a0 = l.x_left + l.t_base;
    let b0 = l.x_left - l.t_base;
    let coord = |base: T, i: usize| base + l.h * T::from_usize_lossy(i);
    let outside = |lo: T, hi: T| hi <= -support || lo >= support;
    let mut vp_max = T::zero();
    let mut vm_max = T::zero();
    for c in l.cells() {
        let p = c.q + c.k;
        if outside(coord(b0, c.q), coord(b0, c.q + 1)) {
            for v in 0..3 {
                vp_max = vp_max.max(norm1(s.vp.vertex(c.index, v)));
            }
        }
        if outside(coord(a0, p), coord(a0, p + 1)) {
            for v in 0..3 {
                vm_max = vm_max.max(norm1(s.vm.vertex(c.index, v)));
            }
        }
    }
    // regions: a ≤ −S, b ≥ S, and a ≥ S with b ≤ −S
    let mut reps: [Option<Vec<T>>; 3] = [None, None, None];
    let mut dev = T::zero();
    for k in 0..=l.m {
        for q in 0..=l.n - k {
            let a = coord(a0, q + k);
            let b = coord(b0, q);
            let region = if a <= -support {
                0
            } else if b >= support {
                1
            } else if a >= support && b <= -support {
                2
            } else {
                continue;
            };
            let u = s.u.at(k, q);
            match &reps[region] {
                None => reps[region] = Some(u.to_vec()),
                Some(r) => {
                    let diff: Vec<T> = u.iter().zip(r).map(|(x, y)| *x - *y).collect();
                    dev = dev.max(norm1(&diff));
                }
            }
        }
    }
    vec![
        EstimateReport::new("support cone v+", vp_max, T::zero(), tol),
        EstimateReport::new("support cone v-", vm_max, T::zero(), tol),
        EstimateReport::new("support cone u constant", dev, T::zero(), tol),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{linear_solution, select_budget};

    fn indicator_data(n: usize, x0: f64, h: f64) -> ManifoldData<f64> {
        ManifoldData::from_fns(1, h, x0, n, |_| vec![0.0], |x| vec![if x.abs() < 1.0 { 1.0 } else { 0.0 }])
    }

    #[test]
    fn free_wave_examples() {
        let d = indicator_data(64, -4.0, 0.125);
        let s = free_wave(&d, 2.0).unwrap();
        // node 32 is x = 0
        assert!((s.u[32] - 1.0).abs() < 1e-15);
        let s0 = free_wave(&d, 0.0).unwrap();
        assert_eq!(s0.u, d.u0);
        assert_eq!(s0.ut, d.v0);
        let c = ManifoldData::from_fns(2, 0.125, -1.0, 16, |_| vec![0.3, -0.2], |_| vec![0.0, 0.0]);
        let s = free_wave(&c, 1.5).unwrap();
        assert!(s.u.chunks(2).all(|p| p == [0.3, -0.2]));
        assert!(free_wave(&c, 0.1).is_err());
    }

    #[test]
    fn group_inverse() {
        let d = ManifoldData::from_fns(2, 0.0625, -1.0, 32, |x: f64| vec![x.sin(), x * x], |x: f64| vec![(2.0 * x).cos(), -x]);
        let j = 9;
        let fwd = group_action(&d, j, -j, 32 + 2 * j as usize);
        let back = group_action(&fwd, -j, j, 32);
        for (a, b) in back.u0.iter().zip(&d.u0) {
            assert!((a - b).abs() < 1e-13);
        }
        for (a, b) in back.v0.iter().zip(&d.v0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn free_wave_matches_the_lattice_at_half_steps() {
        let h = 0.0625;
        let d = ManifoldData::from_fns(2, h, -2.0, 64, |x: f64| vec![x.sin(), x * x], |x: f64| vec![(2.0 * x).cos(), -x]);
        let l = NullLattice::new(h, 64, 40, 0.0, -2.0).unwrap();
        let s = linear_solution(&d, &CellField::zeros(l, 2)).unwrap();
        let sd = ScatteringData { data: d.clone() };
        for k in [1, 2, 7, 40] {
            let e = scattering_defect(&s, &sd, l.t_of(k)).unwrap();
            assert!(e.max() < 1e-13, "k = {k}: {e:?}");
        }
        let odd = free_wave(&d, 3.0 * h / 2.0).unwrap();
        assert!((odd.x_start - (-2.0 + h / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn duhamel_zero_forcing_is_identity() {
        let h = 0.125;
        let d = indicator_data(32, -2.0, h);
        let l = NullLattice::new(h, 32, 16, 0.0, -2.0).unwrap();
        let sd = scattering_data_rn(&d, &CellField::zeros(l, 1), 2.0, 1e-14).unwrap();
        assert_eq!(sd.data, d);
    }

    #[test]
    fn duhamel_slab_and_linearity() {
        let h = 0.0625;
        let n = 128;
        let l = NullLattice::new(h, n, 48, 0.0, -4.0).unwrap();
        let d = ManifoldData::from_fns(1, h, -4.0, n, |_| vec![0.0], |_| vec![0.0]);
        let slab = |t: f64, x: f64| if t <= 1.0 && x.abs() <= 1.0 { 1.0 } else { 0.0 };
        let f1 = CellField::from_fn(l, 1, |t, x| vec![slab(t, x)]);
        let f2 = CellField::from_fn(l, 1, |t, x| vec![if t <= 0.5 { x.cos() } else { 0.0 }]);
        let s1 = scattering_data_rn(&d, &f1, 3.0, 1e-14).unwrap();
        let growth = s1.data.l11_parts().2;
        assert!(growth <= f1.l1_norm() + 1e-12);
        assert!((growth - f1.l1_norm()).abs() < 1e-12, "non-negative forcing: no cancellation");
        let mut sum = f1.clone();
        for (a, b) in sum.values.iter_mut().zip(&f2.values) {
            *a += b;
        }
        let s2 = scattering_data_rn(&d, &f2, 3.0, 1e-14).unwrap();
        let s12 = scattering_data_rn(&d, &sum, 3.0, 1e-14).unwrap();
        for i in 0..s12.data.u0.len() {
            assert!((s12.data.u0[i] - s1.data.u0[i] - s2.data.u0[i]).abs() < 1e-13);
        }
        for i in 0..s12.data.v0.len() {
            assert!((s12.data.v0[i] - s1.data.v0[i] - s2.data.v0[i]).abs() < 1e-13);
        }
        assert!(matches!(scattering_data_rn(&d, &f1, 0.5, 1e-3), Err(ScatterError::TailMass { .. })));
    }

    #[test]
    fn linear_solution_scatters_exactly() {
        let h = 0.0625;
        let n = 256;
        let l = NullLattice::new(h, n, 96, 0.0, -8.0).unwrap();
        // compact support: the slice at t = 3 must see the whole wave
        let bump = |x: f64| if x.abs() < 1.0 { (1.0 - x * x).powi(2) } else { 0.0 };
        let d = ManifoldData::from_fns(1, h, -8.0, n, move |x: f64| vec![bump(x)], |x: f64| vec![if x.abs() < 0.5 { x } else { 0.0 }]);
        let f = CellField::from_fn(l, 1, |t: f64, x: f64| vec![if t <= 1.0 && x.abs() <= 1.0 { (3.0 * x).sin() } else { 0.0 }]);
        let s = linear_solution(&d, &f).unwrap();
        let sd = scattering_data_rn(&d, &f, 3.0, 0.0).unwrap();
        for t in [2.0, 2.5, 3.0] {
            let e = pullback_defect(&s, &sd, t).unwrap();
            assert!(e < 1e-12, "t = {t}: {e}");
        }
    }

    #[test]
    fn compactify_examples() {
        let d = ManifoldData::from_fns(2, 0.1, -2.0, 40, |_| vec![0.6, 0.8], |_| vec![0.0, 0.0]);
        let zero = |_t: f64, _x: f64| vec![0.0, 0.0];
        let cp = compactify(&d, &zero, 64).unwrap();
        assert!(cp.data.u0.chunks(2).all(|p| p == [0.6, 0.8]));
        assert!(cp.data.v0.iter().all(|v| *v == 0.0));
        assert!(cp.forcing.values.iter().all(|v| *v == 0.0));
        let d = ManifoldData::from_fns(1, 0.125, -2.0, 32, |_| vec![0.0], |x: f64| vec![if x.abs() < 1.0 { 1.0 } else { 0.0 }]);
        let cp = compactify(&d, &|_t: f64, _x: f64| vec![0.0], 64).unwrap();
        let mass = cp.data.l11_parts().2;
        assert!((mass - 2.0).abs() < 1e-12, "{mass}");
        let ext = cp.extended(3);
        assert_eq!(ext.n_cells(), 70);
        assert_eq!(ext.node(0), cp.data.node(0));
    }

    #[test]
    fn compactified_forcing_mass() {
        // a smooth bump of known mass
        let bump = |t: f64, x: f64| {
            let r2 = ((t - 0.5) / 0.4).powi(2) + (x / 0.4).powi(2);
            vec![if r2 < 1.0 { (1.0 - r2).powi(2) } else { 0.0 }]
        };
        let exact = std::f64::consts::PI * 0.16 / 3.0;
        let d = ManifoldData::from_fns(1, 0.125, -2.0, 32, |_| vec![0.0], |_| vec![0.0]);
        let n = 256;
        let cp = compactify(&d, &bump, n).unwrap();
        let h = std::f64::consts::PI / n as f64;
        let m = cp.forcing.l1_norm();
        assert!((m - exact).abs() <= 4.0 * h * exact, "{m} vs {exact}");
    }

    #[test]
    fn support_cone_constant_data() {
        let d = ManifoldData::from_fns(3, 0.125, -2.0, 32, |_| vec![0.0, 0.0, 1.0], |_| vec![0.0; 3]);
        let l = NullLattice::new(0.125, 32, 16, 0.0, -2.0).unwrap();
        let b = select_budget(1.0, 3.0).unwrap();
        let s = crate::solver::picard_solve_small(&EmbeddedManifold::sphere(3), &d, &CellField::zeros(l, 3), &b, 1e-14, 10).unwrap();
        for r in support_cone_check(&s, 1.0, 0.0) {
            assert!(r.ok && r.lhs == 0.0, "{r:?}");
        }
    }

    #[test]
    fn support_cone_linear() {
        let h = 0.0625;
        let d = ManifoldData::from_fns(1, h, -4.0, 128, |x: f64| vec![if x.abs() < 1.0 { (1.0 - x * x).powi(2) } else { 0.0 }], |_| vec![0.0]);
        let l = NullLattice::new(h, 128, 64, 0.0, -4.0).unwrap();
        let s = linear_solution(&d, &CellField::zeros(l, 1)).unwrap();
        let reps = support_cone_check(&s, 1.0, 1e-14);
        assert!(reps.iter().all(|r| r.ok), "{reps:?}");
        // the site (3, 0.5) sits where both families have left the support
        let k = 48;
        let q = (0.5 + 4.0 - 1.5) / h;
        assert!(s.u.at(k, q as usize)[0].abs() < 1e-14);
    }
}
