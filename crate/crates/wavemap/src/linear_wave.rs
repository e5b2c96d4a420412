//! Exact-formula solvers for the linear wave equation □u = h and the two
//! transport equations on the null lattice, and a weak-form auditor.

use thiserror::Error;

use crate::domain::Trapezoid;
use crate::fields::{transport_minus, transport_plus, AffineField, CellField, FieldError, NodeField};
use crate::geometry::ManifoldData;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum LinearError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("test function support leaves the domain: {0}")]
    TestFunctionSupport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Plus,
    Minus,
}

fn check_coverage<T: Scalar>(data: &ManifoldData<T>, h: &CellField<T>) -> Result<(), FieldError> {
    let l = &h.lattice;
    if data.dim != h.dim || data.n_cells() != l.n || !data.h.same_bits(l.h) {
        return Err(FieldError::DataCoverage(format!(
            "data ({} cells, dim {}) do not match the lattice ({} cells, dim {})",
            data.n_cells(),
            data.dim,
            l.n,
            h.dim
        )));
    }
    Ok(())
}

/// u(t,x) = ½(u0(x+t) + u0(x−t)) + ½∫_{x−t}^{x+t} v0 + ½∬_{T(t,x)} h at
/// every lattice node.
///
/// Both integrals are accumulated by local recursions: the v0 integral along
/// the base from the left end of each dependence interval, and the triangle
/// integral by inclusion–exclusion over the two child triangles and the
/// diamond under the apex. Every node therefore reads only its dependence
/// triangle, in an order fixed by that triangle.
pub fn dalembert_solve<T: Scalar>(data: &ManifoldData<T>, h: &CellField<T>) -> Result<NodeField<T>, LinearError> {
    check_coverage(data, h)?;
    let l = h.lattice;
    let d = h.dim;
    let half = T::lit(0.5);
    let area = l.area();
    let mut u = NodeField::zeros(l, d);
    // J and I of the previous two layers, indexed by q
    let mut j_prev = vec![T::zero(); (l.n + 1) * d];
    let mut i_prev = vec![T::zero(); (l.n + 1) * d];
    let mut i_prev2 = vec![T::zero(); (l.n + 2) * d];
    for k in 0..=l.m {
        let mut j_cur = vec![T::zero(); (l.n + 1 - k) * d];
        let mut i_cur = vec![T::zero(); (l.n + 1 - k) * d];
        for q in 0..=l.n - k {
            if k > 0 {
                let v = data.cell(q + k - 1);
                let up = h.at(l.up(k - 1, q));
                for c in 0..d {
                    j_cur[q * d + c] = j_prev[q * d + c] + v[c] * data.h;
                    let mut diamond = up[c];
                    if k >= 2 {
                        diamond = diamond + h.at(l.lo(k - 1, q))[c];
                    }
                    let below = if k >= 2 { i_prev2[(q + 1) * d + c] } else { T::zero() };
                    i_cur[q * d + c] = i_prev[q * d + c] + i_prev[(q + 1) * d + c] - below + diamond * area;
                }
            }
            let a = data.node(q + k);
            let b = data.node(q);
            let node = l.node(k, q) * d;
            for c in 0..d {
                u.values[node + c] = half * (a[c] + b[c]) + half * j_cur[q * d + c] + half * i_cur[q * d + c];
            }
        }
        i_prev2 = std::mem::replace(&mut i_prev, i_cur);
        j_prev = j_cur;
    }
    Ok(u)
}

/// v(t, x) = g(x ∓ t) + ∫₀ᵗ f along the characteristic, with `g` one value
/// per base cell.
pub fn transport_solve<T: Scalar>(g: &[T], f: &CellField<T>, dir: Direction) -> Result<AffineField<T>, LinearError> {
    if g.len() != f.lattice.n * f.dim {
        return Err(FieldError::DataCoverage(format!(
            "{} transport values for {} base cells",
            g.len() / f.dim.max(1),
            f.lattice.n
        ))
        .into());
    }
    Ok(match dir {
        Direction::Plus => transport_plus(g, f),
        Direction::Minus => transport_minus(g, f),
    })
}

/// Smooth bump φ(t, x) = c(t/t1)·β((x − xc)/rx) with β(s) = exp(−1/(1−s²))
/// and c(s) = (1 + s)β(s). It vanishes to all orders at t = t1 and on
/// |x − xc| = rx, but not at t = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestBump<T> {
    pub t1: T,
    pub xc: T,
    pub rx: T,
}

/// (β, β', β'') at s.
fn beta3<T: Scalar>(s: T) -> (T, T, T) {
    let one = T::one();
    if s.abs() >= one {
        return (T::zero(), T::zero(), T::zero());
    }
    let w = one - s * s;
    let b = (-one / w).exp();
    let g1 = -T::lit(2.0) * s / (w * w);
    let g2 = -T::lit(2.0) / (w * w) - T::lit(8.0) * s * s / (w * w * w);
    (b, b * g1, b * (g1 * g1 + g2))
}

impl<T: Scalar> TestBump<T> {
    /// (φ, ∂ₜφ, □φ) at (t, x).
    pub fn eval(&self, t: T, x: T) -> (T, T, T) {
        let s = t / self.t1;
        let y = (x - self.xc) / self.rx;
        let (bs, bs1, bs2) = beta3(s);
        let one = T::one();
        let c = (one + s) * bs;
        let c1 = bs + (one + s) * bs1;
        let c2 = T::lit(2.0) * bs1 + (one + s) * bs2;
        let (by, _, by2) = beta3(y);
        let phi = c * by;
        let phi_t = c1 / self.t1 * by;
        let box_phi = c2 / (self.t1 * self.t1) * by - c * by2 / (self.rx * self.rx);
        (phi, phi_t, box_phi)
    }

    fn check_support(&self, k: &Trapezoid<T>) -> Result<(), LinearError> {
        let inside = |t: T, x: T| k.contains(t, x);
        let lo = self.xc - self.rx;
        let hi = self.xc + self.rx;
        if !(self.t1 > T::zero() && self.rx > T::zero()) || !inside(self.t1, lo) || !inside(self.t1, hi) {
            return Err(LinearError::TestFunctionSupport(format!(
                "[0, {}] × [{}, {}]",
                self.t1, lo, hi
            )));
        }
        Ok(())
    }
}

/// |∬u□φ − ∬hφ + ∫u0 ∂ₜφ(0,·) − ∫v0 φ(0,·)|.
///
/// u is piecewise linear on the triangles, so the area terms use the
/// edge-midpoint rule per triangle (exact for quadratics); the base terms
/// use Simpson's rule per cell.
pub fn weak_form_residual<T: Scalar>(
    u: &NodeField<T>,
    data: &ManifoldData<T>,
    h: &CellField<T>,
    phi: &TestBump<T>,
) -> Result<T, LinearError> {
    check_coverage(data, h)?;
    let l = u.lattice;
    if h.lattice != l || h.dim != u.dim {
        return Err(FieldError::RegionMismatch.into());
    }
    phi.check_support(&l.parent())?;
    let d = u.dim;
    let half = T::lit(0.5);
    let third = T::one() / T::lit(3.0);
    let mut per_cell = Vec::with_capacity(l.cell_count());
    for c in l.cells() {
        let nodes = l.cell_nodes(c);
        let vx = l.cell_vertices(c);
        let hv = h.at(c.index);
        let mut acc = T::zero();
        for (a, b) in [(0usize, 1usize), (1, 2), (2, 0)] {
            let (t, x) = ((vx[a].0 + vx[b].0) * half, (vx[a].1 + vx[b].1) * half);
            let (p, _, bp) = phi.eval(t, x);
            if p == T::zero() && bp == T::zero() {
                continue;
            }
            for j in 0..d {
                let um = (u.at_index(nodes[a])[j] + u.at_index(nodes[b])[j]) * half;
                acc = acc + um * bp - hv[j] * p;
            }
        }
        per_cell.push(acc * third);
    }
    let mut total = crate::reduce::pairwise_sum(&per_cell) * l.area();
    let six = T::lit(6.0);
    let mut base = Vec::with_capacity(l.n);
    for i in 0..l.n {
        let x0 = l.x_of(0, i);
        let x1 = l.x_of(0, i + 1);
        let xm = (x0 + x1) * half;
        let (p0, pt0, _) = phi.eval(l.t_base, x0);
        let (pm, ptm, _) = phi.eval(l.t_base, xm);
        let (p1, pt1, _) = phi.eval(l.t_base, x1);
        let a = data.node(i);
        let b = data.node(i + 1);
        let v = data.cell(i);
        let mut acc = T::zero();
        for j in 0..d {
            let um = (a[j] + b[j]) * half;
            acc = acc + (a[j] * pt0 + T::lit(4.0) * um * ptm + b[j] * pt1) / six;
            acc = acc - v[j] * (p0 + T::lit(4.0) * pm + p1) / six;
        }
        base.push(acc);
    }
    total = total + crate::reduce::pairwise_sum(&base) * l.h;
    Ok(total.abs())
}
