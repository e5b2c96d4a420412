//! Fields on the null lattice.
//!
//! A compact trapezoid with `n` base cells of width `h` and `m` half-steps
//! of height is cut by the lines x ± t = const through the base nodes.
//! Node (k, q) sits at t = t_base + k·h/2, x = x_left + (2q + k)·h/2, with
//! layer k ∈ 0..=m and q ∈ 0..=n−k; its null indices are a = q + k and
//! b = q. Each null diamond is split by the time slice through its middle
//! into an upper triangle `Up(k, q)` with vertices
//! (k,q), (k,q+1), (k+1,q) and a lower one `Lo(k, q)` with vertices
//! (k,q), (k,q+1), (k−1,q+1). Both have area h²/4.
//!
//! Forcing and the h-field are constant on triangles; characteristic
//! derivatives are affine on triangles and stored at the three vertices.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::domain::Trapezoid;
use crate::geometry::ManifoldData;
use crate::reduce::pairwise_sum;
use crate::vecn::norm1;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("fields live on different lattices")]
    RegionMismatch,
    #[error("data do not cover the lattice: {0}")]
    DataCoverage(String),
    #[error("time {0} is not a lattice time")]
    OffLattice(f64),
    #[error("lattice does not fit the domain: {0}")]
    Geometry(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum CellKind {
    Up,
    Lo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellId {
    pub kind: CellKind,
    pub k: usize,
    pub q: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NullLattice<T> {
    pub h: T,
    pub n: usize,
    pub m: usize,
    pub t_base: T,
    pub x_left: T,
}

/// Snap `x / h` to an integer when it is one up to a relative 1e-9.
pub fn lattice_count<T: Scalar>(x: T, h: T) -> Option<usize> {
    let r = x / h;
    let k = r.round();
    if k < T::zero() || (r - k).abs() > T::lit(1e-9) * k.max(T::one()) {
        return None;
    }
    k.to_usize()
}

impl<T: Scalar> NullLattice<T> {
    pub fn new(h: T, n: usize, m: usize, t_base: T, x_left: T) -> Result<Self, FieldError> {
        if !(h > T::zero()) {
            return Err(FieldError::Geometry("spacing must be positive".into()));
        }
        if n == 0 || m > n {
            return Err(FieldError::Geometry(format!("need 0 < n and m ≤ n, got n={n}, m={m}")));
        }
        Ok(NullLattice { h, n, m, t_base, x_left })
    }

    /// Lattice of a compact trapezoid. Both 2L and 2·height must be integer
    /// multiples of h.
    pub fn from_trapezoid(k: &Trapezoid<T>, h: T) -> Result<Self, FieldError> {
        match *k {
            Trapezoid::Compact { x0, half_length, height } => {
                let n = lattice_count(half_length * T::lit(2.0), h).ok_or_else(|| {
                    FieldError::Geometry(format!("h = {h} does not divide the base 2L = {}", half_length * T::lit(2.0)))
                })?;
                let m = lattice_count(height * T::lit(2.0), h).ok_or_else(|| {
                    FieldError::Geometry(format!("h/2 = {} does not divide the height {height}", h * T::lit(0.5)))
                })?;
                Self::new(h, n, m, T::zero(), x0 - half_length)
            }
            _ => Err(FieldError::Geometry("only compact trapezoids carry a lattice".into())),
        }
    }

    /// The trapezoid covered, in time measured from `t_base`.
    pub fn parent(&self) -> Trapezoid<T> {
        let half = self.h * T::lit(0.5);
        let l = half * T::from_usize_lossy(self.n);
        Trapezoid::Compact {
            x0: self.x_left + l,
            half_length: l,
            height: half * T::from_usize_lossy(self.m),
        }
    }

    pub fn half(&self) -> T {
        self.h * T::lit(0.5)
    }

    pub fn area(&self) -> T {
        self.h * self.h * T::lit(0.25)
    }

    pub fn layer_len(&self, k: usize) -> usize {
        self.n - k + 1
    }

    pub fn node_offset(&self, k: usize) -> usize {
        k * (self.n + 1) - k * k.saturating_sub(1) / 2
    }

    pub fn node_count(&self) -> usize {
        self.node_offset(self.m + 1)
    }

    pub fn node(&self, k: usize, q: usize) -> usize {
        debug_assert!(k <= self.m && q + k <= self.n);
        self.node_offset(k) + q
    }

    pub fn t_of(&self, k: usize) -> T {
        self.t_base + self.half() * T::from_usize_lossy(k)
    }

    pub fn x_of(&self, k: usize, q: usize) -> T {
        self.x_left + self.half() * T::from_usize_lossy(2 * q + k)
    }

    fn up_offset(&self, k: usize) -> usize {
        k * self.n - k * k.saturating_sub(1) / 2
    }

    fn lo_offset(&self, k: usize) -> usize {
        let j = k - 1;
        j * self.n - j * k / 2
    }

    pub fn n_up(&self) -> usize {
        self.up_offset(self.m)
    }

    pub fn n_lo(&self) -> usize {
        self.m * self.n - self.m * (self.m + 1) / 2
    }

    pub fn cell_count(&self) -> usize {
        self.n_up() + self.n_lo()
    }

    /// Whether Up(k, q) exists.
    pub fn has_up(&self, k: usize, q: usize) -> bool {
        k < self.m && q + k < self.n
    }

    pub fn has_lo(&self, k: usize, q: usize) -> bool {
        k >= 1 && k <= self.m && q + k < self.n
    }

    pub fn up(&self, k: usize, q: usize) -> usize {
        debug_assert!(self.has_up(k, q));
        self.up_offset(k) + q
    }

    pub fn lo(&self, k: usize, q: usize) -> usize {
        debug_assert!(self.has_lo(k, q));
        self.n_up() + self.lo_offset(k) + q
    }

    pub fn cell_id(&self, index: usize) -> CellId {
        let nu = self.n_up();
        if index < nu {
            let mut k = 0;
            while self.up_offset(k + 1) <= index {
                k += 1;
            }
            CellId { kind: CellKind::Up, k, q: index - self.up_offset(k), index }
        } else {
            let j = index - nu;
            let mut k = 1;
            while k < self.m && self.lo_offset(k + 1) <= j {
                k += 1;
            }
            CellId { kind: CellKind::Lo, k, q: j - self.lo_offset(k), index }
        }
    }

    pub fn cells(&self) -> Vec<CellId> {
        let mut out = Vec::with_capacity(self.cell_count());
        for k in 0..self.m {
            for q in 0..self.n - k {
                out.push(CellId { kind: CellKind::Up, k, q, index: self.up(k, q) });
            }
        }
        for k in 1..=self.m {
            for q in 0..self.n - k {
                out.push(CellId { kind: CellKind::Lo, k, q, index: self.lo(k, q) });
            }
        }
        out
    }

    /// Node indices of (left, right, apex) for Up and (left, right, bottom)
    /// for Lo.
    pub fn cell_nodes(&self, c: CellId) -> [usize; 3] {
        match c.kind {
            CellKind::Up => [self.node(c.k, c.q), self.node(c.k, c.q + 1), self.node(c.k + 1, c.q)],
            CellKind::Lo => [self.node(c.k, c.q), self.node(c.k, c.q + 1), self.node(c.k - 1, c.q + 1)],
        }
    }

    /// Vertex coordinates (t, x) in the same order as [`Self::cell_nodes`].
    pub fn cell_vertices(&self, c: CellId) -> [(T, T); 3] {
        let l = (self.t_of(c.k), self.x_of(c.k, c.q));
        let r = (self.t_of(c.k), self.x_of(c.k, c.q + 1));
        let third = match c.kind {
            CellKind::Up => (self.t_of(c.k + 1), self.x_of(c.k + 1, c.q)),
            CellKind::Lo => (self.t_of(c.k - 1), self.x_of(c.k - 1, c.q + 1)),
        };
        [l, r, third]
    }

    pub fn centroid(&self, c: CellId) -> (T, T) {
        let v = self.cell_vertices(c);
        let three = T::lit(3.0);
        ((v[0].0 + v[1].0 + v[2].0) / three, (v[0].1 + v[1].1 + v[2].1) / three)
    }

    /// Sub-lattice whose node (k', q') is node (k' + k_off, q' + q_off) here.
    pub fn sub(&self, q_off: usize, k_off: usize, n: usize, m: usize) -> Result<Self, FieldError> {
        if q_off + n + k_off > self.n || k_off + m > self.m {
            return Err(FieldError::Geometry("sub-lattice exceeds the parent".into()));
        }
        NullLattice::new(
            self.h,
            n,
            m,
            self.t_of(k_off),
            self.x_left + self.half() * T::from_usize_lossy(2 * q_off + k_off),
        )
    }

    /// Cell containing (t, x), if any; points on shared edges resolve to a
    /// fixed side.
    pub fn locate(&self, t: T, x: T) -> Option<CellId> {
        let a0 = self.x_left + self.t_base;
        let b0 = self.x_left - self.t_base;
        let al = (x + t - a0) / self.h;
        let be = (x - t - b0) / self.h;
        if al < T::zero() || be < T::zero() {
            return None;
        }
        let p = al.floor().to_usize()?;
        let q = be.floor().to_usize()?;
        if p < q {
            return None;
        }
        let k = p - q;
        let r = al - T::from_usize_lossy(p);
        let s = be - T::from_usize_lossy(q);
        if r > s {
            if self.has_up(k, q) {
                return Some(CellId { kind: CellKind::Up, k, q, index: self.up(k, q) });
            }
        } else if self.has_lo(k, q) {
            return Some(CellId { kind: CellKind::Lo, k, q, index: self.lo(k, q) });
        } else if k == 0 && self.has_up(0, q) {
            return Some(CellId { kind: CellKind::Up, k, q, index: self.up(0, q) });
        }
        None
    }
}

/// Values at lattice nodes, `dim` per node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeField<T> {
    pub lattice: NullLattice<T>,
    pub dim: usize,
    pub values: Vec<T>,
}

/// One value per triangle, `dim` per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField<T> {
    pub lattice: NullLattice<T>,
    pub dim: usize,
    pub values: Vec<T>,
}

/// Affine per triangle, stored at the three vertices (see
/// [`NullLattice::cell_nodes`] for the order).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineField<T> {
    pub lattice: NullLattice<T>,
    pub dim: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> NodeField<T> {
    pub fn zeros(lattice: NullLattice<T>, dim: usize) -> Self {
        NodeField { lattice, dim, values: vec![T::zero(); lattice.node_count() * dim] }
    }

    pub fn at(&self, k: usize, q: usize) -> &[T] {
        let i = self.lattice.node(k, q) * self.dim;
        &self.values[i..i + self.dim]
    }

    pub fn at_index(&self, i: usize) -> &[T] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sup_norm(&self) -> T {
        let mut s = T::zero();
        for c in self.values.chunks(self.dim) {
            s = s.max(norm1(c));
        }
        s
    }

    /// Values on the sub-lattice described by the offsets.
    pub fn restrict(&self, sub: &NullLattice<T>, q_off: usize, k_off: usize) -> Self {
        let mut out = NodeField::zeros(*sub, self.dim);
        for k in 0..=sub.m {
            for q in 0..=sub.n - k {
                let src = self.lattice.node(k + k_off, q + q_off) * self.dim;
                let dst = sub.node(k, q) * self.dim;
                out.values[dst..dst + self.dim].copy_from_slice(&self.values[src..src + self.dim]);
            }
        }
        out
    }

    /// CSV with columns t, x, u_1..u_n in decimal-17.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), FieldError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string(), "x".to_string()];
        header.extend((1..=self.dim).map(|i| format!("u_{i}")));
        wr.write_record(&header)?;
        let l = &self.lattice;
        for k in 0..=l.m {
            for q in 0..=l.n - k {
                let mut rec = vec![fmt17(l.t_of(k).as_f64()), fmt17(l.x_of(k, q).as_f64())];
                rec.extend(self.at(k, q).iter().map(|v| fmt17(v.as_f64())));
                wr.write_record(&rec)?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads back the values written by [`Self::write_csv`] onto `lattice`.
    pub fn read_csv<R: Read>(lattice: NullLattice<T>, r: R) -> Result<Self, FieldError> {
        let mut rd = csv::Reader::from_reader(r);
        let dim = rd.headers()?.len().checked_sub(2).ok_or_else(|| FieldError::Parse("header".into()))?;
        let mut values = Vec::with_capacity(lattice.node_count() * dim);
        for rec in rd.records() {
            let rec = rec?;
            for s in rec.iter().skip(2) {
                let v: f64 = s.parse().map_err(|_| FieldError::Parse(s.to_string()))?;
                values.push(T::lit(v));
            }
        }
        if values.len() != lattice.node_count() * dim {
            return Err(FieldError::RegionMismatch);
        }
        Ok(NodeField { lattice, dim, values })
    }
}

pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

impl<T: Scalar> CellField<T> {
    pub fn zeros(lattice: NullLattice<T>, dim: usize) -> Self {
        CellField { lattice, dim, values: vec![T::zero(); lattice.cell_count() * dim] }
    }

    /// Samples `f(t, x)` at cell centroids.
    pub fn from_fn(lattice: NullLattice<T>, dim: usize, f: impl Fn(T, T) -> Vec<T>) -> Self {
        let mut out = Self::zeros(lattice, dim);
        for c in lattice.cells() {
            let (t, x) = lattice.centroid(c);
            let v = f(t, x);
            assert_eq!(v.len(), dim);
            out.values[c.index * dim..(c.index + 1) * dim].copy_from_slice(&v);
        }
        out
    }

    pub fn at(&self, index: usize) -> &[T] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    pub fn at_mut(&mut self, index: usize) -> &mut [T] {
        &mut self.values[index * self.dim..(index + 1) * self.dim]
    }

    /// Value at (t, x), zero off the lattice.
    pub fn sample(&self, t: T, x: T) -> Vec<T> {
        match self.lattice.locate(t, x) {
            Some(c) => self.at(c.index).to_vec(),
            None => vec![T::zero(); self.dim],
        }
    }

    /// ∬ |f|₁, exact for this piecewise-constant class.
    pub fn l1_norm(&self) -> T {
        let per: Vec<T> = self.values.chunks(self.dim).map(norm1).collect();
        pairwise_sum(&per) * self.lattice.area()
    }

    /// ∬ |f|₁ over the cells accepted by `keep`.
    pub fn l1_norm_where(&self, keep: impl Fn(CellId) -> bool) -> T {
        let per: Vec<T> = self
            .lattice
            .cells()
            .into_iter()
            .map(|c| if keep(c) { norm1(self.at(c.index)) } else { T::zero() })
            .collect();
        pairwise_sum(&per) * self.lattice.area()
    }

    /// ∬ |f|₂ over the cells accepted by `keep`.
    pub fn l2_mass_where(&self, keep: impl Fn(CellId) -> bool) -> T {
        let per: Vec<T> = self
            .lattice
            .cells()
            .into_iter()
            .map(|c| if keep(c) { crate::vecn::norm2(self.at(c.index)) } else { T::zero() })
            .collect();
        pairwise_sum(&per) * self.lattice.area()
    }

    pub fn sub(&self, other: &Self) -> Result<Self, FieldError> {
        if self.lattice != other.lattice || self.dim != other.dim {
            return Err(FieldError::RegionMismatch);
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| *a - *b).collect();
        Ok(CellField { lattice: self.lattice, dim: self.dim, values })
    }

    pub fn restrict(&self, sub: &NullLattice<T>, q_off: usize, k_off: usize) -> Self {
        let mut out = CellField::zeros(*sub, self.dim);
        for c in sub.cells() {
            let src = match c.kind {
                CellKind::Up => self.lattice.up(c.k + k_off, c.q + q_off),
                CellKind::Lo => self.lattice.lo(c.k + k_off, c.q + q_off),
            };
            out.values[c.index * self.dim..(c.index + 1) * self.dim]
                .copy_from_slice(&self.values[src * self.dim..(src + 1) * self.dim]);
        }
        out
    }
}

impl<T: Scalar> AffineField<T> {
    pub fn zeros(lattice: NullLattice<T>, dim: usize) -> Self {
        AffineField { lattice, dim, values: vec![T::zero(); lattice.cell_count() * 3 * dim] }
    }

    /// Value at vertex `v` (0 left, 1 right, 2 apex/bottom) of cell `index`.
    pub fn vertex(&self, index: usize, v: usize) -> &[T] {
        let i = (index * 3 + v) * self.dim;
        &self.values[i..i + self.dim]
    }

    pub fn vertex_mut(&mut self, index: usize, v: usize) -> &mut [T] {
        let i = (index * 3 + v) * self.dim;
        &mut self.values[i..i + self.dim]
    }

    /// Centroid value (mean of the vertices).
    pub fn centroid(&self, index: usize, out: &mut [T]) {
        let three = T::lit(3.0);
        for j in 0..self.dim {
            out[j] = (self.vertex(index, 0)[j] + self.vertex(index, 1)[j] + self.vertex(index, 2)[j]) / three;
        }
    }

    /// Left and right values on the slice edge between nodes (k, i) and
    /// (k, i + 1).
    pub fn slice_edge(&self, k: usize, i: usize) -> (&[T], &[T]) {
        let l = &self.lattice;
        let idx = if l.has_up(k, i) { l.up(k, i) } else { l.lo(k, i) };
        (self.vertex(idx, 0), self.vertex(idx, 1))
    }

    /// Exact ∬ |f|₁ (sum over components of the integral of |affine|).
    pub fn l1_norm(&self) -> T {
        let area = self.lattice.area();
        let per: Vec<T> = (0..self.lattice.cell_count())
            .map(|c| {
                let mut s = T::zero();
                for j in 0..self.dim {
                    s = s + abs_affine_triangle(
                        self.vertex(c, 0)[j],
                        self.vertex(c, 1)[j],
                        self.vertex(c, 2)[j],
                    );
                }
                s
            })
            .collect();
        pairwise_sum(&per) * area
    }

    pub fn restrict(&self, sub: &NullLattice<T>, q_off: usize, k_off: usize) -> Self {
        let d3 = 3 * self.dim;
        let mut out = AffineField::zeros(*sub, self.dim);
        for c in sub.cells() {
            let src = match c.kind {
                CellKind::Up => self.lattice.up(c.k + k_off, c.q + q_off),
                CellKind::Lo => self.lattice.lo(c.k + k_off, c.q + q_off),
            };
            out.values[c.index * d3..(c.index + 1) * d3].copy_from_slice(&self.values[src * d3..(src + 1) * d3]);
        }
        out
    }
}

/// ∫₀¹ |a + (b − a)s| ds.
pub fn abs_affine_segment<T: Scalar>(a: T, b: T) -> T {
    let half = T::lit(0.5);
    if (a >= T::zero() && b >= T::zero()) || (a <= T::zero() && b <= T::zero()) {
        return ((a + b) * half).abs();
    }
    (a * a + b * b) / ((b - a).abs() * T::lit(2.0))
}

/// Mean of |affine| over a triangle with vertex values a, b, c (the
/// integral divided by the area).
pub fn abs_affine_triangle<T: Scalar>(a: T, b: T, c: T) -> T {
    let three = T::lit(3.0);
    let z = T::zero();
    let vals = [a, b, c];
    let pos = vals.iter().filter(|v| **v > z).count();
    let neg = vals.iter().filter(|v| **v < z).count();
    let total = (a + b + c) / three;
    if pos == 0 || neg == 0 {
        return total.abs();
    }
    // p: the vertex whose sign no other vertex shares
    let ip = if pos == 1 {
        vals.iter().position(|v| *v > z).unwrap()
    } else {
        vals.iter().position(|v| *v < z).unwrap()
    };
    let p = vals[ip];
    let r1 = vals[(ip + 1) % 3];
    let r2 = vals[(ip + 2) % 3];
    // the p-signed region is the corner triangle cut at the zero crossings
    let s1 = p / (p - r1);
    let s2 = p / (p - r2);
    let small = s1 * s2 * p.abs() / three;
    -p.signum() * total + T::lit(2.0) * small
}

/// v(t, x) = g(x − t) + ∫₀ᵗ f(τ, x − t + τ) dτ, `g` given per base cell.
///
/// Sums run up each column from the base in a fixed order, so a column
/// computed inside a sub-lattice with the same base cells is bitwise equal.
pub fn transport_plus<T: Scalar>(g: &[T], f: &CellField<T>) -> AffineField<T> {
    let l = f.lattice;
    let d = f.dim;
    assert_eq!(g.len(), l.n * d, "one value per base cell");
    let hh = l.half();
    let mut out = AffineField::zeros(l, d);
    let mut cu = vec![T::zero(); d];
    let mut cl = vec![T::zero(); d];
    let mut e = vec![T::zero(); d];
    for q in 0..l.n {
        let gq = &g[q * d..(q + 1) * d];
        cu.iter_mut().for_each(|z| *z = T::zero());
        cl.iter_mut().for_each(|z| *z = T::zero());
        let kmax = l.m.min(l.n - q - 1);
        for k in 0..=kmax {
            // E0(k) = g + hh·cu, E1(k) = g + hh·cl (cu, cl sums below layer k)
            let has_up = l.has_up(k, q);
            let has_lo = l.has_lo(k, q);
            if !has_up && !has_lo {
                break;
            }
            let cl_next: Vec<T> = if has_lo {
                let lo = f.at(l.lo(k, q));
                cl.iter().zip(lo).map(|(a, b)| *a + *b).collect()
            } else {
                cl.clone()
            };
            let left: Vec<T> = (0..d).map(|j| gq[j] + hh * cu[j]).collect();
            let right: Vec<T> = (0..d).map(|j| gq[j] + hh * cl_next[j]).collect();
            if has_up {
                let idx = l.up(k, q);
                let up = f.at(idx);
                for j in 0..d {
                    e[j] = cu[j] + up[j];
                }
                out.vertex_mut(idx, 0).copy_from_slice(&left);
                out.vertex_mut(idx, 1).copy_from_slice(&right);
                let top = out.vertex_mut(idx, 2);
                for j in 0..d {
                    top[j] = gq[j] + hh * e[j];
                }
            }
            if has_lo {
                let idx = l.lo(k, q);
                out.vertex_mut(idx, 0).copy_from_slice(&left);
                out.vertex_mut(idx, 1).copy_from_slice(&right);
                let bottom = out.vertex_mut(idx, 2);
                for j in 0..d {
                    bottom[j] = gq[j] + hh * cl[j];
                }
            }
            if has_up {
                cu.copy_from_slice(&e);
            }
            cl = cl_next;
        }
    }
    out
}

/// v(t, x) = g(x + t) + ∫₀ᵗ f(τ, x + t − τ) dτ, `g` given per base cell.
pub fn transport_minus<T: Scalar>(g: &[T], f: &CellField<T>) -> AffineField<T> {
    let l = f.lattice;
    let d = f.dim;
    assert_eq!(g.len(), l.n * d, "one value per base cell");
    let hh = l.half();
    let mut out = AffineField::zeros(l, d);
    let mut ru = vec![T::zero(); d];
    let mut rl = vec![T::zero(); d];
    for p in 0..l.n {
        let gp = &g[p * d..(p + 1) * d];
        ru.iter_mut().for_each(|z| *z = T::zero());
        rl.iter_mut().for_each(|z| *z = T::zero());
        for k in 0..=p.min(l.m) {
            let q = p - k;
            let has_up = l.has_up(k, q);
            let has_lo = l.has_lo(k, q);
            if !has_up && !has_lo {
                break;
            }
            let rl_next: Vec<T> = if has_lo {
                let lo = f.at(l.lo(k, q));
                rl.iter().zip(lo).map(|(a, b)| *a + *b).collect()
            } else {
                rl.clone()
            };
            let left: Vec<T> = (0..d).map(|j| gp[j] + hh * rl_next[j]).collect();
            let right: Vec<T> = (0..d).map(|j| gp[j] + hh * ru[j]).collect();
            let mut ru_next = ru.clone();
            if has_up {
                let idx = l.up(k, q);
                let up = f.at(idx);
                for j in 0..d {
                    ru_next[j] = ru[j] + up[j];
                }
                out.vertex_mut(idx, 0).copy_from_slice(&left);
                out.vertex_mut(idx, 1).copy_from_slice(&right);
                let top = out.vertex_mut(idx, 2);
                for j in 0..d {
                    top[j] = gp[j] + hh * ru_next[j];
                }
            }
            if has_lo {
                let idx = l.lo(k, q);
                out.vertex_mut(idx, 0).copy_from_slice(&left);
                out.vertex_mut(idx, 1).copy_from_slice(&right);
                let bottom = out.vertex_mut(idx, 2);
                for j in 0..d {
                    bottom[j] = gp[j] + hh * rl[j];
                }
            }
            ru = ru_next;
            rl = rl_next;
        }
    }
    out
}

fn check_data<T: Scalar>(data: &ManifoldData<T>, l: &NullLattice<T>, dim: usize) -> Result<(), FieldError> {
    if data.dim != dim {
        return Err(FieldError::DataCoverage(format!("data dimension {} vs field {}", data.dim, dim)));
    }
    if data.n_cells() != l.n {
        return Err(FieldError::DataCoverage(format!("{} data cells for {} base cells", data.n_cells(), l.n)));
    }
    if !data.h.same_bits(l.h) {
        return Err(FieldError::DataCoverage("data spacing differs from the lattice".into()));
    }
    Ok(())
}

/// (v₊, v₋) = ((∂ₜ − ∂ₓ)u, (∂ₜ + ∂ₓ)u) for the linear solution with data
/// (u0, v0) and right-hand side `h`.
pub fn characteristic_derivatives<T: Scalar>(
    data: &ManifoldData<T>,
    h: &CellField<T>,
) -> Result<(AffineField<T>, AffineField<T>), FieldError> {
    check_data(data, &h.lattice, h.dim)?;
    let n = data.n_cells();
    let mut gp = Vec::with_capacity(n * data.dim);
    let mut gm = Vec::with_capacity(n * data.dim);
    for i in 0..n {
        gp.extend(data.g_plus(i));
        gm.extend(data.g_minus(i));
    }
    Ok((transport_plus(&gp, h), transport_minus(&gm, h)))
}

/// ∂ₜu = (v₊ + v₋)/2 and ∂ₓu = (v₋ − v₊)/2 at the vertices.
pub fn time_space_derivatives<T: Scalar>(vp: &AffineField<T>, vm: &AffineField<T>) -> (AffineField<T>, AffineField<T>) {
    let half = T::lit(0.5);
    let ut = vp.values.iter().zip(&vm.values).map(|(a, b)| (*a + *b) * half).collect();
    let ux = vp.values.iter().zip(&vm.values).map(|(a, b)| (*b - *a) * half).collect();
    (
        AffineField { lattice: vp.lattice, dim: vp.dim, values: ut },
        AffineField { lattice: vp.lattice, dim: vp.dim, values: ux },
    )
}

/// Data on one lattice time slice: u at the slice nodes, ∂ₜu and ∂ₓu as
/// cell averages over the slice edges.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTrace<T> {
    pub t: T,
    pub x_start: T,
    pub h: T,
    pub dim: usize,
    pub u: Vec<T>,
    pub ut: Vec<T>,
    pub ux: Vec<T>,
}

impl<T: Scalar> SliceTrace<T> {
    pub fn n_cells(&self) -> usize {
        self.ut.len() / self.dim
    }

    /// (u, ∂ₜu) as restart data.
    pub fn to_data(&self) -> ManifoldData<T> {
        ManifoldData {
            dim: self.dim,
            h: self.h,
            x_start: self.x_start,
            u0: self.u.clone(),
            v0: self.ut.clone(),
        }
    }

    pub fn sup_u(&self) -> T {
        self.u.chunks(self.dim).fold(T::zero(), |s, c| s.max(norm1(c)))
    }

    pub fn l1_ut(&self) -> T {
        self.ut.chunks(self.dim).fold(T::zero(), |s, c| s + norm1(c)) * self.h
    }

    pub fn l1_ux(&self) -> T {
        self.ux.chunks(self.dim).fold(T::zero(), |s, c| s + norm1(c)) * self.h
    }
}

/// Trace on layer `k` (time t_base + k·h/2).
pub fn trace_layer<T: Scalar>(u: &NodeField<T>, vp: &AffineField<T>, vm: &AffineField<T>, k: usize) -> SliceTrace<T> {
    let l = u.lattice;
    let d = u.dim;
    let quarter = T::lit(0.25);
    let mut uu = Vec::with_capacity((l.n - k + 1) * d);
    for q in 0..=l.n - k {
        uu.extend_from_slice(u.at(k, q));
    }
    let mut ut = Vec::with_capacity((l.n - k) * d);
    let mut ux = Vec::with_capacity((l.n - k) * d);
    for i in 0..l.n - k {
        let (pl, pr) = vp.slice_edge(k, i);
        let (ml, mr) = vm.slice_edge(k, i);
        for j in 0..d {
            ut.push((pl[j] + ml[j] + pr[j] + mr[j]) * quarter);
            ux.push((ml[j] - pl[j] + mr[j] - pr[j]) * quarter);
        }
    }
    SliceTrace { t: l.t_of(k), x_start: l.x_of(k, 0), h: l.h, dim: d, u: uu, ut, ux }
}

/// Trace at time `t`, which must be a lattice time.
pub fn trace<T: Scalar>(u: &NodeField<T>, vp: &AffineField<T>, vm: &AffineField<T>, t: T) -> Result<SliceTrace<T>, FieldError> {
    let l = u.lattice;
    let k = lattice_count(t - l.t_base, l.half()).ok_or(FieldError::OffLattice(t.as_f64()))?;
    if k > l.m || k >= l.n {
        return Err(FieldError::OffLattice(t.as_f64()));
    }
    Ok(trace_layer(u, vp, vm, k))
}

/// ∫ |Dv|₁ of a piecewise-linear curve given at nodes of spacing `h`.
pub fn w11_seminorm<T: Scalar>(values: &[T], dim: usize) -> T {
    let mut s = T::zero();
    let nodes = values.len() / dim;
    for i in 0..nodes.saturating_sub(1) {
        for j in 0..dim {
            s = s + (values[(i + 1) * dim + j] - values[i * dim + j]).abs();
        }
    }
    s
}

/// Exact ∫ over layer k of |∂ₜu|₁ + |∂ₓu|₁ (both affine on slice edges).
pub fn slice_derivative_mass<T: Scalar>(vp: &AffineField<T>, vm: &AffineField<T>, k: usize) -> T {
    let l = vp.lattice;
    let d = vp.dim;
    let half = T::lit(0.5);
    let mut s = T::zero();
    for i in 0..l.n - k {
        let (pl, pr) = vp.slice_edge(k, i);
        let (ml, mr) = vm.slice_edge(k, i);
        for j in 0..d {
            s = s + abs_affine_segment((pl[j] + ml[j]) * half, (pr[j] + mr[j]) * half);
            s = s + abs_affine_segment((ml[j] - pl[j]) * half, (mr[j] - pr[j]) * half);
        }
    }
    s * l.h
}

/// sup |u| + sup over lattice times of ∫ (|∂ₓu| + |∂ₜu|).
pub fn h_norm<T: Scalar>(u: &NodeField<T>, vp: &AffineField<T>, vm: &AffineField<T>) -> T {
    let l = u.lattice;
    let mut best = T::zero();
    for k in 0..=l.m.min(l.n - 1) {
        best = best.max(slice_derivative_mass(vp, vm, k));
    }
    u.sup_norm() + best
}

/// Norms written next to an exported field.
#[derive(Debug, Clone, Serialize)]
pub struct FieldNorms {
    pub sup_u: f64,
    pub h_norm: f64,
    pub max_slice_mass: f64,
}

pub fn write_norms_json(path: &Path, norms: &FieldNorms) -> Result<(), FieldError> {
    let v = serde_json::to_value(norms).map_err(|e| FieldError::Parse(e.to_string()))?;
    let s = serde_json::to_string_pretty(&v).map_err(|e| FieldError::Parse(e.to_string()))?;
    std::fs::write(path, s)?;
    Ok(())
}
