//! Runnable checks of the quantitative inequalities: transport bounds, the
//! bilinear null estimate, Q-form bounds, pointwise characteristic bounds,
//! energy flux and the space-time null energy.
//!
//! All integrands here are affine (or products of affine functions) on each
//! lattice triangle, and every integral is evaluated in closed form. Left
//! sides therefore never pick up quadrature error from the check itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::fields::{
    abs_affine_segment, lattice_count, transport_minus, transport_plus, AffineField, CellField, CellId, CellKind,
    FieldError, NullLattice,
};
use crate::geometry::ManifoldData;
use crate::reduce::pairwise_sum;
use crate::solver::{linear_solution, Solution, SolvePath};
use crate::vecn::{norm1, norm2};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("solution carries no single-transport provenance (path {0:?})")]
    MissingProvenance(SolvePath),
    #[error("fields live on different lattices")]
    LatticeMismatch,
    #[error("site ({0}, {1}) has no cell above it")]
    Site(usize, usize),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub tol: f64,
    pub ok: bool,
}

impl EstimateReport {
    pub fn new<T: Scalar>(name: &str, lhs: T, rhs: T, tol: T) -> Self {
        let (lhs, rhs, tol) = (lhs.as_f64(), rhs.as_f64(), tol.as_f64());
        let slack = rhs - lhs;
        EstimateReport { name: name.to_string(), lhs, rhs, slack, tol, ok: slack >= -tol }
    }
}

fn layer_of<T: Scalar>(l: &NullLattice<T>, t0: T) -> Result<usize, FieldError> {
    let k = lattice_count(t0 - l.t_base, l.half()).ok_or(FieldError::OffLattice(t0.as_f64()))?;
    if k > l.m {
        return Err(FieldError::OffLattice(t0.as_f64()));
    }
    Ok(k)
}

/// Cells lying in t ≤ t_base + k0·h/2.
fn below(c: CellId, k0: usize) -> bool {
    match c.kind {
        CellKind::Up => c.k < k0,
        CellKind::Lo => c.k <= k0,
    }
}

/// ∫ over layer k0 of |v|₁, exact for the affine edge values.
fn slice_l1<T: Scalar>(v: &AffineField<T>, k0: usize) -> T {
    let l = v.lattice;
    if k0 >= l.n {
        return T::zero();
    }
    let per: Vec<T> = (0..l.n - k0)
        .map(|i| {
            let (a, b) = v.slice_edge(k0, i);
            a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + abs_affine_segment(*x, *y))
        })
        .collect();
    pairwise_sum(&per) * l.h
}

// 8-point Gauss–Legendre on [0, 1].
const GL8: [(f64, f64); 8] = [
    (0.019855071751231856, 0.05061426814518813),
    (0.10166676129318664, 0.11119051722668724),
    (0.2372337950418355, 0.15685332293894363),
    (0.4082826787521751, 0.18134189168918100),
    (0.5917173212478249, 0.18134189168918100),
    (0.7627662049581645, 0.15685332293894363),
    (0.8983332387068134, 0.11119051722668724),
    (0.9801449282487681, 0.05061426814518813),
];

/// ∫₀¹ |a + (b − a)s|₂ ds for vectors a, b.
pub fn euclid_affine_segment<T: Scalar>(a: &[T], b: &[T]) -> T {
    let d: Vec<T> = b.iter().zip(a).map(|(x, y)| *x - *y).collect();
    let na = norm2(a);
    let nd = norm2(&d);
    if nd == T::zero() {
        return na;
    }
    if nd <= T::lit(0.25) * na {
        // far from the origin: the integrand is analytic well beyond [0, 1]
        let mut s = T::zero();
        for (x, w) in GL8 {
            let x = T::lit(x);
            let p: Vec<T> = a.iter().zip(&d).map(|(ai, di)| *ai + *di * x).collect();
            s = s + T::lit(w) * norm2(&p);
        }
        return s;
    }
    let alpha = nd * nd;
    let beta = crate::vecn::dot(a, &d);
    let c2 = ((na * na * alpha - beta * beta) / (alpha * alpha)).max(T::zero());
    let c = c2.sqrt();
    let half = T::lit(0.5);
    let prim = |x: T| -> T {
        let r = (x * x + c2).sqrt();
        if c == T::zero() {
            half * x * x.abs()
        } else {
            half * (x * r + c2 * (x / c).asinh())
        }
    };
    let x0 = beta / alpha;
    nd * (prim(x0 + T::one()) - prim(x0))
}

/// ∫ over layer k0 of |v|₂.
fn slice_l2<T: Scalar>(v: &AffineField<T>, k0: usize, cols: std::ops::Range<usize>) -> T {
    let l = v.lattice;
    let per: Vec<T> = cols
        .map(|i| {
            let (a, b) = v.slice_edge(k0, i);
            euclid_affine_segment(a, b)
        })
        .collect();
    pairwise_sum(&per) * l.h
}

type Pt<T> = (T, T, T, T);

/// Keeps the part of a convex polygon (points carry the values of two
/// affine functions) where `sign · f_sel ≥ 0`.
fn clip<T: Scalar>(poly: &[Pt<T>], sel: usize, sign: T) -> Vec<Pt<T>> {
    let val = |p: &Pt<T>| sign * if sel == 0 { p.2 } else { p.3 };
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let (vp, vq) = (val(&p), val(&q));
        if vp >= T::zero() {
            out.push(p);
        }
        if (vp > T::zero() && vq < T::zero()) || (vp < T::zero() && vq > T::zero()) {
            let s = vp / (vp - vq);
            let lerp = |x: T, y: T| x + (y - x) * s;
            out.push((lerp(p.0, q.0), lerp(p.1, q.1), lerp(p.2, q.2), lerp(p.3, q.3)));
        }
    }
    out
}

/// Mean over a triangle of |A·B| for affine A, B with the given vertex
/// values. The triangle is cut along the zero lines of A and B; on each
/// piece the product has one sign and the edge-midpoint rule integrates
/// the quadratic exactly.
pub fn abs_product_triangle<T: Scalar>(a: [T; 3], b: [T; 3]) -> T {
    let z = T::zero();
    if a.iter().all(|x| *x == z) || b.iter().all(|x| *x == z) {
        return z;
    }
    let half = T::lit(0.5);
    let third = T::one() / T::lit(3.0);
    let same_sign = |v: &[T; 3]| v.iter().all(|x| *x >= z) || v.iter().all(|x| *x <= z);
    if same_sign(&a) && same_sign(&b) {
        // no cut needed; mean of the product over the triangle
        let pm = |i: usize, j: usize| (a[i] + a[j]) * half * (b[i] + b[j]) * half;
        return ((pm(0, 1) + pm(1, 2) + pm(2, 0)) * third).abs();
    }
    let tri: Vec<Pt<T>> = vec![(z, z, a[0], b[0]), (T::one(), z, a[1], b[1]), (z, T::one(), a[2], b[2])];
    let mut total = z;
    for sa in [T::one(), -T::one()] {
        let pa = clip(&tri, 0, sa);
        if pa.len() < 3 {
            continue;
        }
        for sb in [T::one(), -T::one()] {
            let pb = clip(&pa, 1, sb);
            if pb.len() < 3 {
                continue;
            }
            for i in 1..pb.len() - 1 {
                let (p, q, r) = (pb[0], pb[i], pb[i + 1]);
                let area = ((q.0 - p.0) * (r.1 - p.1) - (r.0 - p.0) * (q.1 - p.1)).abs() * half;
                let m = |u: &Pt<T>, v: &Pt<T>| (u.2 + v.2) * half * (u.3 + v.3) * half;
                let integral = area * (m(&p, &q) + m(&q, &r) + m(&r, &p)) * third;
                total = total + integral.abs();
            }
        }
    }
    // reference triangle has area 1/2
    total * T::lit(2.0)
}

/// ∬ Σ_{j,k} |A_j B_k| over the selected cells (or only j = k when
/// `diagonal`).
fn product_mass<T: Scalar>(a: &AffineField<T>, b: &AffineField<T>, keep: impl Fn(CellId) -> bool, diagonal: bool) -> T {
    let l = a.lattice;
    let d = a.dim;
    let per: Vec<T> = l
        .cells()
        .into_iter()
        .map(|c| {
            if !keep(c) {
                return T::zero();
            }
            let i = c.index;
            let mut s = T::zero();
            for j in 0..d {
                let aj = [a.vertex(i, 0)[j], a.vertex(i, 1)[j], a.vertex(i, 2)[j]];
                for k in 0..d {
                    if diagonal && j != k {
                        continue;
                    }
                    let bk = [b.vertex(i, 0)[k], b.vertex(i, 1)[k], b.vertex(i, 2)[k]];
                    s = s + abs_product_triangle(aj, bk);
                }
            }
            s
        })
        .collect();
    pairwise_sum(&per) * l.area()
}

fn l1_of_cells<T: Scalar>(g: &[T], dim: usize, h: T) -> T {
    let per: Vec<T> = g.chunks(dim).map(norm1).collect();
    pairwise_sum(&per) * h
}

/// ∫_{K_{t0}} |v(t0)|₁ ≤ ∫|g|₁ + ∬_{t≤t0} |f|₁ for v transported from
/// `g` (one value per base cell) with source `f`, in direction `plus`
/// (x − t) or minus (x + t).
pub fn transport_bound_check<T: Scalar>(
    g: &[T],
    f: &CellField<T>,
    plus: bool,
    t0: T,
    tol: T,
) -> Result<EstimateReport, EstimateError> {
    let l = f.lattice;
    let k0 = layer_of(&l, t0)?;
    if g.len() != l.n * f.dim {
        return Err(FieldError::DataCoverage("one g value per base cell".into()).into());
    }
    let v = if plus { transport_plus(g, f) } else { transport_minus(g, f) };
    let lhs = slice_l1(&v, k0);
    let rhs = l1_of_cells(g, f.dim, l.h) + f.l1_norm_where(|c| below(c, k0));
    Ok(EstimateReport::new("transport_bound", lhs, rhs, tol))
}

/// ∬_{t≤t0} |v₊|₁|v₋|₁ ≤ ½(∫|g₊|₁ + ∬|f₊|₁)(∫|g₋|₁ + ∬|f₋|₁).
pub fn zhou_bilinear_check<T: Scalar>(
    g_plus: &[T],
    g_minus: &[T],
    f_plus: &CellField<T>,
    f_minus: &CellField<T>,
    t0: T,
    tol: T,
) -> Result<EstimateReport, EstimateError> {
    let l = f_plus.lattice;
    if f_minus.lattice != l || f_minus.dim != f_plus.dim {
        return Err(EstimateError::LatticeMismatch);
    }
    let k0 = layer_of(&l, t0)?;
    let d = f_plus.dim;
    let vp = transport_plus(g_plus, f_plus);
    let vm = transport_minus(g_minus, f_minus);
    let lhs = product_mass(&vp, &vm, |c| below(c, k0), false);
    let ap = l1_of_cells(g_plus, d, l.h) + f_plus.l1_norm_where(|c| below(c, k0));
    let am = l1_of_cells(g_minus, d, l.h) + f_minus.l1_norm_where(|c| below(c, k0));
    Ok(EstimateReport::new("zhou_bilinear", lhs, T::lit(0.5) * ap * am, tol))
}

/// Q_jk = ∂ₜu_j ∂ₜū_k − ∂ₓu_j ∂ₓū_k at one point, row-major.
pub fn q_matrix<T: Scalar>(ut: &[T], ux: &[T], ubt: &[T], ubx: &[T]) -> Vec<T> {
    let d = ut.len();
    let mut q = Vec::with_capacity(d * d);
    for j in 0..d {
        for k in 0..d {
            q.push(ut[j] * ubt[k] - ux[j] * ubx[k]);
        }
    }
    q
}

/// Q(u, ū) at the three vertices of every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct QForm<T> {
    pub lattice: NullLattice<T>,
    pub dim: usize,
    /// `dim²` entries per vertex, three vertices per cell.
    pub values: Vec<T>,
}

impl<T: Scalar> QForm<T> {
    pub fn at(&self, cell: usize, vertex: usize) -> &[T] {
        let s = self.dim * self.dim;
        let i = (cell * 3 + vertex) * s;
        &self.values[i..i + s]
    }

    /// Largest ℓ¹ matrix norm over all vertices.
    pub fn sup_l1(&self) -> T {
        self.values.chunks(self.dim * self.dim).fold(T::zero(), |m, c| m.max(norm1(c)))
    }
}

/// Q(u, ū) from the characteristic derivatives of u and ū, via
/// ∂ₜu = (v₊+v₋)/2 and ∂ₓu = (v₋−v₊)/2.
pub fn q_form<T: Scalar>(
    vp: &AffineField<T>,
    vm: &AffineField<T>,
    vbp: &AffineField<T>,
    vbm: &AffineField<T>,
) -> Result<QForm<T>, EstimateError> {
    let l = vp.lattice;
    for f in [vm, vbp, vbm] {
        if f.lattice != l || f.dim != vp.dim {
            return Err(EstimateError::LatticeMismatch);
        }
    }
    let d = vp.dim;
    let half = T::lit(0.5);
    let mut values = Vec::with_capacity(l.cell_count() * 3 * d * d);
    for c in 0..l.cell_count() {
        for v in 0..3 {
            let (p, m, bp, bm) = (vp.vertex(c, v), vm.vertex(c, v), vbp.vertex(c, v), vbm.vertex(c, v));
            let ut: Vec<T> = (0..d).map(|j| (p[j] + m[j]) * half).collect();
            let ux: Vec<T> = (0..d).map(|j| (m[j] - p[j]) * half).collect();
            let ubt: Vec<T> = (0..d).map(|j| (bp[j] + bm[j]) * half).collect();
            let ubx: Vec<T> = (0..d).map(|j| (bm[j] - bp[j]) * half).collect();
            values.extend(q_matrix(&ut, &ux, &ubt, &ubx));
        }
    }
    Ok(QForm { lattice: l, dim: d, values })
}

/// Whether a cell lies in the dependence triangle of node (k, q).
fn in_triangle(c: CellId, k: usize, q: usize) -> bool {
    let (ck, cq) = (c.k, c.q);
    cq >= q && cq + ck < q + k && !(c.kind == CellKind::Lo && ck == 0)
}

/// (∫_{T₀}|v0 − Du0|₁ + ∬_T|h|₁, ∫_{T₀}|v0 + Du0|₁ + ∬_T|h|₁) over the
/// dependence triangle of node (k, q).
fn triangle_masses<T: Scalar>(s: &Solution<T>, k: usize, q: usize) -> (T, T) {
    let data = &s.data;
    let mut gp = T::zero();
    let mut gm = T::zero();
    for i in q..q + k {
        gp = gp + norm1(&data.g_plus(i)) * data.h;
        gm = gm + norm1(&data.g_minus(i)) * data.h;
    }
    let hm = s.h_field.l1_norm_where(|c| in_triangle(c, k, q));
    (gp + hm, gm + hm)
}

/// ∬_{T} |Q|₁ over the dependence triangle of node (k, q).
///
/// With one solution the bound is A₊A₋ where A± = ∫|v0 ∓ Du0|₁ + ∬|h|₁
/// over the triangle; with a second solution ū it is ½(A₊Ā₋ + A₋Ā₊).
/// Diagonal entries of Q(u, u) equal v₊_j v₋_j and are integrated exactly;
/// off-diagonal entries are replaced by the upper bound
/// ½(|v₊_j v̄₋_k| + |v₋_j v̄₊_k|), so the reported left side never
/// undercounts.
pub fn q_l1_bound_check<T: Scalar>(
    u: &Solution<T>,
    apex: (usize, usize),
    ubar: Option<&Solution<T>>,
    tol: T,
) -> Result<EstimateReport, EstimateError> {
    for s in std::iter::once(u).chain(ubar) {
        if !s.diagnostics.path.has_single_transport() {
            return Err(EstimateError::MissingProvenance(s.diagnostics.path));
        }
    }
    let (k, q) = apex;
    let l = u.u.lattice;
    if k > l.m || q + k > l.n {
        return Err(EstimateError::Site(k, q));
    }
    let half = T::lit(0.5);
    let keep = |c: CellId| in_triangle(c, k, q);
    match ubar {
        None => {
            // the pairs (j,k) and (k,j) each carry ½ of both products, so the
            // bound sums to the full Σ_jk ∬|v₊_j v₋_k|
            let lhs = product_mass(&u.vp, &u.vm, keep, false);
            let (ap, am) = triangle_masses(u, k, q);
            Ok(EstimateReport::new("q_l1_bound", lhs, ap * am, tol))
        }
        Some(b) => {
            if b.u.lattice != l {
                return Err(EstimateError::LatticeMismatch);
            }
            let lhs = half * (product_mass(&u.vp, &b.vm, keep, false) + product_mass(&u.vm, &b.vp, keep, false));
            let (ap, am) = triangle_masses(u, k, q);
            let (bp, bm) = triangle_masses(b, k, q);
            Ok(EstimateReport::new("q_l1_bound_pair", lhs, half * (ap * bm + am * bp), tol))
        }
    }
}

/// The two energy-flux inequalities at layer k0 (time t0):
/// ∫_{K_{t0}}|(∂ₜ−∂ₓ)u|₂ ≤ ∫_{x0−L}^{x0+L−2t0}|(∂ₜ−∂ₓ)u(0)|₂ + ∬|f|₂ over
/// the slab swept by the x − t characteristics, and the mirrored one.
pub fn energy_flux_check<T: Scalar>(s: &Solution<T>, t0: T, tol: T) -> Result<[EstimateReport; 2], EstimateError> {
    let l = s.u.lattice;
    let k0 = layer_of(&l, t0)?;
    let n = l.n;
    let width = n.saturating_sub(k0);
    let mut rhs_p = T::zero();
    let mut rhs_m = T::zero();
    for i in 0..width {
        rhs_p = rhs_p + norm2(&s.data.g_plus(i)) * l.h;
        rhs_m = rhs_m + norm2(&s.data.g_minus(i + k0)) * l.h;
    }
    let fp = s.forcing.l2_mass_where(|c| below(c, k0) && c.q < width);
    let fm = s.forcing.l2_mass_where(|c| below(c, k0) && c.q + c.k >= k0);
    let lp = slice_l2(&s.vp, k0, 0..width);
    let lm = slice_l2(&s.vm, k0, 0..width);
    Ok([
        EstimateReport::new("energy_flux_plus", lp, rhs_p + fp, tol),
        EstimateReport::new("energy_flux_minus", lm, rhs_m + fm, tol),
    ])
}

/// |v₊| and |v₋| at node (k, q) against the initial value at the foot of
/// the characteristic plus ∫|f|₂ along it. Node values are taken from the
/// cell Up(k, q), i.e. as limits from above.
pub fn pointwise_characteristic_bound<T: Scalar>(
    s: &Solution<T>,
    site: (usize, usize),
    tol: T,
) -> Result<[EstimateReport; 2], EstimateError> {
    let l = s.u.lattice;
    let (k, q) = site;
    if !l.has_up(k, q) {
        return Err(EstimateError::Site(k, q));
    }
    let hh = l.half();
    let idx = l.up(k, q);
    let p = q + k;
    let mut sp = T::zero();
    for kk in 0..k {
        sp = sp + norm2(s.forcing.at(l.up(kk, q)));
    }
    let mut sm = T::zero();
    for kk in 1..=k {
        sm = sm + norm2(s.forcing.at(l.lo(kk, p - kk)));
    }
    let rp = norm2(&s.data.g_plus(q)) + hh * sp;
    let rm = norm2(&s.data.g_minus(p)) + hh * sm;
    Ok([
        EstimateReport::new("pointwise_plus", norm2(s.vp.vertex(idx, 0)), rp, tol),
        EstimateReport::new("pointwise_minus", norm2(s.vm.vertex(idx, 0)), rm, tol),
    ])
}

/// ∬_K Σ_j |(∂ₜu_j)² − (∂ₓu_j)²| ≤ (∫(|Du0|₁ + |v0|₁) + ∬|f|₁)².
pub fn spacetime_null_energy_check<T: Scalar>(s: &Solution<T>, tol: T) -> Result<EstimateReport, EstimateError> {
    let lhs = product_mass(&s.vp, &s.vm, |_| true, true);
    let (_, du, v) = s.data.l11_parts();
    let m = du + v + s.forcing.l1_norm();
    Ok(EstimateReport::new("spacetime_null_energy", lhs, m * m, tol))
}

/// ∫|Du0|₁ + ∫|v0|₁ + ∬|f|₁, the mass the nonlinear tolerances scale with.
pub fn data_mass<T: Scalar>(data: &ManifoldData<T>, f: &CellField<T>) -> T {
    let (_, du, v) = data.l11_parts();
    du + v + f.l1_norm()
}

/// Piecewise-linear u0, piecewise-constant v0 and f on a lattice over
/// [−1, 1], with entries uniform in [−1, 1]; f vanishes on roughly a third
/// of the cells so that sign changes and zero blocks both occur.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize, dim: usize) -> (ManifoldData<f64>, CellField<f64>) {
    let h = 2.0 / n as f64;
    let l = NullLattice::new(h, n, m, 0.0, -1.0).expect("valid lattice");
    let u0: Vec<f64> = (0..(n + 1) * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v0: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut f = CellField::zeros(l, dim);
    for c in 0..l.cell_count() {
        let on = rng.gen_range(0..3) > 0;
        for j in 0..dim {
            let v = rng.gen_range(-1.0..1.0);
            f.values[c * dim + j] = if on { v } else { 0.0 };
        }
    }
    (ManifoldData::new(dim, h, -1.0, u0, v0).expect("consistent sizes"), f)
}

/// Runs every checker on `trials` random instances (flat target, so the
/// h-field equals the forcing and every integral is exact) and returns the
/// reports in a fixed order.
pub fn random_suite(seed: u64, trials: usize, tol: f64) -> Vec<EstimateReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..trials {
        let n = 2 * rng.gen_range(2..9);
        let m = rng.gen_range(1..=n);
        let dim = rng.gen_range(1..4);
        let (data, f) = random_instance(&mut rng, n, m, dim);
        let l = f.lattice;
        let k0 = rng.gen_range(0..=m);
        let t0 = l.t_of(k0);
        let gp: Vec<f64> = (0..n).flat_map(|i| data.g_plus(i)).collect();
        let gm: Vec<f64> = (0..n).flat_map(|i| data.g_minus(i)).collect();
        out.push(transport_bound_check(&gp, &f, rng.gen_bool(0.5), t0, tol).expect("lattice time"));
        let (_, f2) = random_instance(&mut rng, n, m, dim);
        out.push(zhou_bilinear_check(&gp, &gm, &f, &f2, t0, tol).expect("lattice time"));
        let s = linear_solution(&data, &f).expect("matching lattice");
        let apex_k = rng.gen_range(0..=m);
        let apex_q = rng.gen_range(0..=n - apex_k);
        out.push(q_l1_bound_check(&s, (apex_k, apex_q), None, tol).expect("provenance"));
        let (d2, f3) = random_instance(&mut rng, n, m, dim);
        let s2 = linear_solution(&d2, &f3).expect("matching lattice");
        out.push(q_l1_bound_check(&s, (apex_k, apex_q), Some(&s2), tol).expect("provenance"));
        out.extend(energy_flux_check(&s, t0, tol).expect("lattice time"));
        out.push(spacetime_null_energy_check(&s, tol).expect("solution"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::EmbeddedManifold;
    use crate::solver::{picard_solve_small, select_budget, ContractionBudget};
    use proptest::prelude::*;

    fn lattice(n: usize, m: usize) -> NullLattice<f64> {
        NullLattice::new(2.0 / n as f64, n, m, 0.0, -1.0).unwrap()
    }

    #[test]
    fn report_ok_iff_slack_within_tol() {
        assert!(EstimateReport::new("x", 1.0, 1.0, 0.0).ok);
        assert!(!EstimateReport::new("x", 1.0 + 1e-9, 1.0, 1e-10).ok);
        assert!(EstimateReport::new("x", 1.0 + 1e-11, 1.0, 1e-10).ok);
    }

    #[test]
    fn transport_examples() {
        let l = lattice(16, 8);
        let g: Vec<f64> = vec![1.0; 16];
        let zero = CellField::zeros(l, 1);
        let r = transport_bound_check(&g, &zero, true, 0.5, 1e-12).unwrap();
        // g = 1 on [−1, 1]: the slice at t = 1/2 has length 1
        assert!((r.lhs - 1.0).abs() < 1e-14 && (r.rhs - 2.0).abs() < 1e-14);
        let r = transport_bound_check(&vec![0.0; 16], &zero, false, 0.25, 0.0).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
        let full = lattice(16, 16);
        let one = CellField::from_fn(full, 1, |_, _| vec![1.0]);
        let r = transport_bound_check(&vec![0.0; 16], &one, true, 1.0, 0.0).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!((r.rhs - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zhou_examples() {
        let l = lattice(16, 16);
        let zero = CellField::zeros(l, 1);
        let ones = vec![1.0; 16];
        let r = zhou_bilinear_check(&ones, &ones, &zero, &zero, 1.0, 0.0).unwrap();
        assert!((r.lhs - 1.0).abs() < 1e-14 && (r.rhs - 2.0).abs() < 1e-14);
        let z = vec![0.0; 16];
        let r = zhou_bilinear_check(&z, &z, &zero, &zero, 1.0, 0.0).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
        // g₊ on [−1,0] travels right, g₋ on [0,1] travels left: the strips
        // overlap on the square with corners (0,0), (½,±½), (1,0) of area ½
        let left: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
        let right: Vec<f64> = (0..16).map(|i| if i >= 8 { 1.0 } else { 0.0 }).collect();
        let r = zhou_bilinear_check(&left, &right, &zero, &zero, 1.0, 0.0).unwrap();
        assert!((r.lhs - 0.5).abs() < 1e-14, "{}", r.lhs);
        assert!((r.rhs - 0.5).abs() < 1e-14);
    }

    #[test]
    fn q_matrix_examples() {
        assert_eq!(q_matrix(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]), vec![1.0, 0.0, 0.0, -1.0]);
        let a = [0.3, -0.7];
        assert!(q_matrix(&a, &a, &a, &a).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn abs_product_matches_fine_sampling() {
        let cases = [
            ([1.0, -1.0, 0.5], [0.2, 0.9, -1.0]),
            ([1.0, 2.0, 3.0], [1.0, 1.0, 1.0]),
            ([-1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]),
        ];
        for (a, b) in cases {
            let n = 300;
            let mut s = 0.0;
            let mut cnt = 0.0;
            for i in 0..n {
                for j in 0..n - i {
                    let l1 = (i as f64 + 1.0 / 3.0) / n as f64;
                    let l2 = (j as f64 + 1.0 / 3.0) / n as f64;
                    let va = a[0] * (1.0 - l1 - l2) + a[1] * l1 + a[2] * l2;
                    let vb = b[0] * (1.0 - l1 - l2) + b[1] * l1 + b[2] * l2;
                    s += (va * vb).abs();
                    cnt += 1.0;
                    if i + j + 1 < n {
                        let l1 = (i as f64 + 2.0 / 3.0) / n as f64;
                        let l2 = (j as f64 + 2.0 / 3.0) / n as f64;
                        let va = a[0] * (1.0 - l1 - l2) + a[1] * l1 + a[2] * l2;
                        let vb = b[0] * (1.0 - l1 - l2) + b[1] * l1 + b[2] * l2;
                        s += (va * vb).abs();
                        cnt += 1.0;
                    }
                }
            }
            assert!((s / cnt - abs_product_triangle(a, b)).abs() < 1e-4);
        }
    }

    #[test]
    fn euclid_segment_closed_form() {
        let a = [1.0, 0.0];
        let b = [-1.0, 0.0];
        assert!((euclid_affine_segment::<f64>(&a, &b) - 0.5).abs() < 1e-15);
        let a = [0.0, 1.0];
        let b = [2.0, 1.0];
        // ∫₀¹ √(4s² + 1) ds
        let exact = 0.5 * 5f64.sqrt() + 0.25 * 2f64.asinh();
        assert!((euclid_affine_segment(&a, &b) - exact).abs() < 1e-15);
        let a = [3.0, 4.0];
        let b = [3.1, 4.2];
        let mut s = 0.0;
        let n = 100_000;
        for i in 0..n {
            let t = (i as f64 + 0.5) / n as f64;
            s += ((3.0 + 0.1 * t).powi(2) + (4.0 + 0.2 * t).powi(2)).sqrt() / n as f64;
        }
        assert!((euclid_affine_segment(&a, &b) - s).abs() < 1e-10);
    }

    fn geodesic(n: usize, omega: f64) -> Solution<f64> {
        let h = 2.0 / n as f64;
        let data = ManifoldData::from_fns(3, h, -1.0, n, |_| vec![1.0, 0.0, 0.0], |_| vec![0.0, omega, 0.0]);
        let l = lattice(n, n);
        let m = EmbeddedManifold::sphere(3);
        let b = ContractionBudget { eta: 2.0 * omega, ..select_budget(1.0, 3.0).unwrap() };
        picard_solve_small(&m, &data, &CellField::zeros(l, 3), &b, 1e-13, 200).unwrap()
    }

    #[test]
    fn geodesic_energy_flux_is_sharp() {
        let s = geodesic(32, 1.0);
        let [p, m] = energy_flux_check(&s, 0.5, 1e-2).unwrap();
        assert!(p.ok && m.ok);
        assert!((p.rhs - 1.0).abs() < 1e-12);
        assert!((p.lhs - 1.0).abs() < 1e-3, "{}", p.lhs);
        assert!((m.lhs - 1.0).abs() < 1e-3);
    }

    #[test]
    fn geodesic_q_and_null_energy_bounds() {
        let s = geodesic(32, 1.0);
        let r = q_l1_bound_check(&s, (32, 0), None, 1e-2).unwrap();
        // A± = 2 + ∬|ω²u|₁ = 2 + ∫₀¹(2 − 2t)(cos t + sin t) dt
        let a = 6.0 - 2.0 * 1f64.cos() - 2.0 * 1f64.sin();
        assert!((r.rhs - a * a).abs() < 1e-2, "{}", r.rhs);
        assert!(r.ok && r.lhs > 0.0);
        let r = spacetime_null_energy_check(&s, 1e-2).unwrap();
        assert!((r.rhs - 4.0).abs() < 1e-12);
        // Σ_j v₊_j v₋_j = ω²(sin² + cos²) = 1 on the unit-area triangle
        assert!((r.lhs - 1.0).abs() < 1e-2, "{}", r.lhs);
        assert!(r.ok);
    }

    #[test]
    fn pointwise_bound_on_geodesic_is_equality() {
        let s = geodesic(32, 1.0);
        for site in [(0, 3), (10, 5), (20, 2)] {
            let [p, m] = pointwise_characteristic_bound(&s, site, 1e-2).unwrap();
            assert!(p.ok && m.ok);
            assert!((p.lhs - p.rhs).abs() < 5e-3, "{p:?}");
        }
    }

    #[test]
    fn traveling_wave_q_bound_is_zero() {
        // u = γ(x − t) with γ a great circle: v₋ = 0
        let n = 32;
        let h = 2.0 / n as f64;
        let data = ManifoldData::from_fns(
            3,
            h,
            -1.0,
            n,
            |x| vec![x.cos(), x.sin(), 0.0],
            |x| {
                let a = x - h / 2.0;
                let b = x + h / 2.0;
                vec![(b.cos() - a.cos()) / h, (b.sin() - a.sin()) / h, 0.0].into_iter().map(|v| -v).collect()
            },
        );
        let f = CellField::zeros(lattice(n, n), 3);
        let s = linear_solution(&data, &f).unwrap();
        let r = q_l1_bound_check(&s, (n, 0), None, 0.0).unwrap();
        assert!(r.lhs.abs() < 1e-12 && r.rhs.abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn continued_solutions_lack_provenance() {
        let mut s = geodesic(8, 1.0);
        s.diagnostics.path = SolvePath::Continued;
        assert!(matches!(
            q_l1_bound_check(&s, (2, 2), None, 0.0),
            Err(EstimateError::MissingProvenance(_))
        ));
    }

    #[test]
    fn random_suite_passes_small() {
        let reports = random_suite(7, 20, 1e-12);
        for r in &reports {
            assert!(r.ok, "{r:?}");
            assert!(r.lhs.is_finite() && r.rhs.is_finite());
        }
    }

    proptest! {
        #[test]
        fn abs_product_is_symmetric_and_bounded(a in proptest::array::uniform3(-2.0..2.0f64), b in proptest::array::uniform3(-2.0..2.0f64)) {
            let p = abs_product_triangle(a, b);
            let q = abs_product_triangle(b, a);
            prop_assert!((p - q).abs() < 1e-12);
            let sup = a.iter().fold(0.0f64, |m, x| m.max(x.abs())) * b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            prop_assert!(p <= sup + 1e-12);
            // |AB| ≥ |mean of AB|
            let pm = |i: usize, j: usize| (a[i] + a[j]) / 2.0 * (b[i] + b[j]) / 2.0;
            prop_assert!(p + 1e-12 >= ((pm(0, 1) + pm(1, 2) + pm(2, 0)) / 3.0).abs());
        }

        #[test]
        fn q_form_is_symmetric_for_equal_arguments(vals in proptest::collection::vec(-1.0..1.0f64, 6)) {
            let l = lattice(2, 1);
            let n = l.cell_count() * 3 * 2;
            let vp = AffineField { lattice: l, dim: 2, values: (0..n).map(|i| vals[i % 6]).collect() };
            let vm = AffineField { lattice: l, dim: 2, values: (0..n).map(|i| vals[(i + 1) % 6]).collect() };
            let q = q_form(&vp, &vm, &vp, &vm).unwrap();
            for c in 0..l.cell_count() {
                for v in 0..3 {
                    let m = q.at(c, v);
                    prop_assert!((m[1] - m[2]).abs() < 1e-15);
                }
            }
        }
    }
}
