//! Target manifolds, projections, the second fundamental form term and the
//! data-preparation pipeline (truncate, mollify, project).

use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::vecn::{dot, norm2};
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point at distance {distance} from the target, tubular radius is {radius}")]
    DistanceExceeded { distance: f64, radius: f64 },
    #[error("expected vectors of dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bad target `{0}`")]
    BadTarget(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
}

/// User-supplied target. All methods receive ambient vectors of the
/// manifold's dimension and must be pure.
pub trait CustomTarget<T: Scalar>: Send + Sync {
    /// Euclidean distance from `q` to the target.
    fn distance(&self, q: &[T]) -> T;
    fn nearest_point(&self, q: &[T]) -> Vec<T>;
    /// Orthogonal projection onto the tangent space at the target point `p`.
    fn tangent_project(&self, p: &[T], v: &[T]) -> Vec<T>;
    /// Σ Γ_jk(p) X_j Y_k at the target point `p`.
    fn second_fundamental(&self, p: &[T], x: &[T], y: &[T]) -> Vec<T>;
}

/// Flat target R^n: Γ = 0 and P = id. Used where the nonlinearity has to be
/// switched off while keeping the solver pipeline intact.
#[derive(Debug, Clone, Copy)]
pub struct FlatTarget;

impl<T: Scalar> CustomTarget<T> for FlatTarget {
    fn distance(&self, _q: &[T]) -> T {
        T::zero()
    }
    fn nearest_point(&self, q: &[T]) -> Vec<T> {
        q.to_vec()
    }
    fn tangent_project(&self, _p: &[T], v: &[T]) -> Vec<T> {
        v.to_vec()
    }
    fn second_fundamental(&self, p: &[T], _x: &[T], _y: &[T]) -> Vec<T> {
        vec![T::zero(); p.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ManifoldKind {
    UnitSphere,
    Custom,
}

#[derive(Clone)]
pub struct EmbeddedManifold<T: Scalar> {
    pub ambient_dim: usize,
    pub kind: ManifoldKind,
    pub lipschitz_bound_l: T,
    pub sup_bound_gamma: T,
    pub tubular_radius_eps0: T,
    custom: Option<Arc<dyn CustomTarget<T>>>,
}

impl<T: Scalar> fmt::Debug for EmbeddedManifold<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddedManifold")
            .field("ambient_dim", &self.ambient_dim)
            .field("kind", &self.kind)
            .field("lipschitz_bound_l", &self.lipschitz_bound_l)
            .field("sup_bound_gamma", &self.sup_bound_gamma)
            .field("tubular_radius_eps0", &self.tubular_radius_eps0)
            .finish()
    }
}

/// Quintic smoothstep falling from 1 at `d = r/2` to 0 at `d = r`.
fn radial_cutoff<T: Scalar>(d: T, r: T) -> T {
    let inner = r * T::lit(0.5);
    if d <= inner {
        return T::one();
    }
    if d >= r {
        return T::zero();
    }
    let s = (d - inner) / (r - inner);
    let s3 = s * s * s;
    T::one() - s3 * (T::lit(10.0) - T::lit(15.0) * s + T::lit(6.0) * s * s)
}

impl<T: Scalar> EmbeddedManifold<T> {
    /// Unit sphere S^{n-1} in R^n with the fixed constants γ = 1, L = 3 and a
    /// tubular radius of 0.5.
    pub fn sphere(n: usize) -> Self {
        assert!(n >= 2, "sphere needs ambient dimension >= 2");
        EmbeddedManifold {
            ambient_dim: n,
            kind: ManifoldKind::UnitSphere,
            lipschitz_bound_l: T::lit(3.0),
            sup_bound_gamma: T::one(),
            tubular_radius_eps0: T::lit(0.5),
            custom: None,
        }
    }

    pub fn custom(
        n: usize,
        target: Arc<dyn CustomTarget<T>>,
        sup_bound_gamma: T,
        lipschitz_bound_l: T,
        tubular_radius_eps0: T,
    ) -> Self {
        EmbeddedManifold {
            ambient_dim: n,
            kind: ManifoldKind::Custom,
            lipschitz_bound_l,
            sup_bound_gamma,
            tubular_radius_eps0,
            custom: Some(target),
        }
    }

    /// R^n as a (non-compact) target. Γ vanishes, so the solver reduces to
    /// the linear wave equation with forcing f.
    pub fn flat(n: usize) -> Self {
        Self::custom(n, Arc::new(FlatTarget), T::one(), T::one(), T::infinity())
    }

    /// Parses `sphere:<n>` or `flat:<n>`.
    pub fn from_target(s: &str) -> Result<Self, GeometryError> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("sphere:") {
            let n: usize = rest
                .trim()
                .parse()
                .map_err(|_| GeometryError::BadTarget(s.to_string()))?;
            if n < 2 {
                return Err(GeometryError::BadTarget(s.to_string()));
            }
            return Ok(Self::sphere(n));
        }
        if let Some(rest) = s.strip_prefix("flat:") {
            let n: usize = rest
                .trim()
                .parse()
                .map_err(|_| GeometryError::BadTarget(s.to_string()))?;
            if n < 1 {
                return Err(GeometryError::BadTarget(s.to_string()));
            }
            return Ok(Self::flat(n));
        }
        Err(GeometryError::BadTarget(s.to_string()))
    }

    fn check_dim(&self, v: &[T]) -> Result<(), GeometryError> {
        if v.len() != self.ambient_dim {
            return Err(GeometryError::DimensionMismatch {
                expected: self.ambient_dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Euclidean distance to the target.
    pub fn distance(&self, q: &[T]) -> T {
        match self.kind {
            ManifoldKind::UnitSphere => (norm2(q) - T::one()).abs(),
            ManifoldKind::Custom => self.custom.as_ref().unwrap().distance(q),
        }
    }

    fn in_tube(&self, q: &[T]) -> Result<(), GeometryError> {
        self.check_dim(q)?;
        let d = self.distance(q);
        if !(d <= self.tubular_radius_eps0) {
            return Err(GeometryError::DistanceExceeded {
                distance: d.as_f64(),
                radius: self.tubular_radius_eps0.as_f64(),
            });
        }
        Ok(())
    }

    fn nearest_unchecked(&self, q: &[T]) -> Vec<T> {
        match self.kind {
            ManifoldKind::UnitSphere => {
                let r = norm2(q);
                if r == T::one() {
                    q.to_vec()
                } else {
                    q.iter().map(|x| *x / r).collect()
                }
            }
            ManifoldKind::Custom => self.custom.as_ref().unwrap().nearest_point(q),
        }
    }

    pub fn nearest_point(&self, q: &[T]) -> Result<Vec<T>, GeometryError> {
        self.in_tube(q)?;
        Ok(self.nearest_unchecked(q))
    }

    fn tangent_at(&self, p_hat: &[T], v: &[T]) -> Vec<T> {
        match self.kind {
            ManifoldKind::UnitSphere => {
                let c = dot(v, p_hat);
                v.iter().zip(p_hat).map(|(x, p)| *x - c * *p).collect()
            }
            ManifoldKind::Custom => self.custom.as_ref().unwrap().tangent_project(p_hat, v),
        }
    }

    fn gamma_at(&self, p_hat: &[T], x: &[T], y: &[T]) -> Vec<T> {
        match self.kind {
            ManifoldKind::UnitSphere => {
                let c = dot(x, y);
                p_hat.iter().map(|p| -c * *p).collect()
            }
            ManifoldKind::Custom => self
                .custom
                .as_ref()
                .unwrap()
                .second_fundamental(p_hat, x, y),
        }
    }

    /// Orthogonal projection of `v` onto the tangent space at the target
    /// point nearest to `p`.
    pub fn tangent_project(&self, p: &[T], v: &[T]) -> Result<Vec<T>, GeometryError> {
        self.in_tube(p)?;
        self.check_dim(v)?;
        let p_hat = self.nearest_unchecked(p);
        Ok(self.tangent_at(&p_hat, v))
    }

    pub fn normal_project(&self, p: &[T], v: &[T]) -> Result<Vec<T>, GeometryError> {
        let t = self.tangent_project(p, v)?;
        Ok(v.iter().zip(&t).map(|(a, b)| *a - *b).collect())
    }

    /// Σ Γ_jk(p) X_j Y_k; for the sphere this is `-(X·Y) p`.
    pub fn christoffel_form(&self, p: &[T], x: &[T], y: &[T]) -> Result<Vec<T>, GeometryError> {
        self.in_tube(p)?;
        self.check_dim(x)?;
        self.check_dim(y)?;
        let p_hat = self.nearest_unchecked(p);
        Ok(self.gamma_at(&p_hat, x, y))
    }

    /// The forcing term P(p) f, taken to be the tangential projection.
    pub fn forcing_project(&self, p: &[T], f: &[T]) -> Result<Vec<T>, GeometryError> {
        self.tangent_project(p, f)
    }

    fn cutoff(&self, q: &[T]) -> T {
        if self.tubular_radius_eps0.is_infinite() {
            return T::one();
        }
        radial_cutoff(self.distance(q), self.tubular_radius_eps0)
    }

    /// Extension of Γ to the whole ambient space: nearest-point composition
    /// inside the tube, quintic radial cutoff to zero towards its edge.
    pub fn gamma_extended(&self, q: &[T], x: &[T], y: &[T]) -> Vec<T> {
        let chi = self.cutoff(q);
        if chi == T::zero() {
            return vec![T::zero(); q.len()];
        }
        let p_hat = self.nearest_unchecked(q);
        let mut g = self.gamma_at(&p_hat, x, y);
        if chi != T::one() {
            g.iter_mut().for_each(|z| *z = *z * chi);
        }
        g
    }

    /// Extension of P, built the same way as [`Self::gamma_extended`].
    pub fn projection_extended(&self, q: &[T], f: &[T]) -> Vec<T> {
        let chi = self.cutoff(q);
        if chi == T::zero() {
            return vec![T::zero(); q.len()];
        }
        let p_hat = self.nearest_unchecked(q);
        let mut g = self.tangent_at(&p_hat, f);
        if chi != T::one() {
            g.iter_mut().for_each(|z| *z = *z * chi);
        }
        g
    }

    /// Right-hand side of the equation at one point, written with the
    /// characteristic derivatives: Σ Γ_jk(q) R_jk(v₊, v₋) + P(q) f with
    /// R_jk = ½(v₊_j v₋_k + v₋_j v₊_k).
    pub fn nonlinearity(&self, q: &[T], vp: &[T], vm: &[T], f: &[T], out: &mut [T]) {
        let chi = self.cutoff(q);
        if chi == T::zero() {
            out.iter_mut().for_each(|z| *z = T::zero());
            return;
        }
        let p_hat = self.nearest_unchecked(q);
        let half = T::lit(0.5);
        match self.kind {
            ManifoldKind::UnitSphere => {
                // symmetric in its arguments, so R collapses to one term
                let c = dot(vp, vm);
                let fp = dot(f, &p_hat);
                for i in 0..out.len() {
                    out[i] = chi * (-c * p_hat[i] + (f[i] - fp * p_hat[i]));
                }
            }
            ManifoldKind::Custom => {
                let a = self.gamma_at(&p_hat, vp, vm);
                let b = self.gamma_at(&p_hat, vm, vp);
                let pf = self.tangent_at(&p_hat, f);
                for i in 0..out.len() {
                    out[i] = chi * (half * (a[i] + b[i]) + pf[i]);
                }
            }
        }
    }

    /// Measured sup of the extended Γ and P (Euclidean operator norms) and
    /// their Lipschitz quotients in the base point, over random samples in
    /// the tube of the given radius.
    pub fn sample_coefficient_bounds(&self, radius: T, samples: usize, seed: u64) -> CoefficientBounds {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = self.ambient_dim;
        let unit = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<T> {
            loop {
                let v: Vec<T> = (0..n).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
                let r = norm2(&v);
                if r > T::lit(1e-3) {
                    return v.iter().map(|x| *x / r).collect();
                }
            }
        };
        let mut sup_gamma = T::zero();
        let mut sup_p = T::zero();
        let mut lip = T::zero();
        for _ in 0..samples {
            let dir = unit(&mut rng);
            let s = T::one() + radius * T::lit(rng.gen_range(-1.0..1.0));
            let q: Vec<T> = match self.kind {
                ManifoldKind::UnitSphere => dir.iter().map(|x| *x * s).collect(),
                ManifoldKind::Custom => dir.clone(),
            };
            let pert = unit(&mut rng);
            let eps = radius * T::lit(rng.gen_range(0.01..0.5));
            let q2: Vec<T> = q.iter().zip(&pert).map(|(a, b)| *a + eps * *b).collect();
            let x = unit(&mut rng);
            let y = unit(&mut rng);
            let g1 = self.gamma_extended(&q, &x, &y);
            let g2 = self.gamma_extended(&q2, &x, &y);
            let p1 = self.projection_extended(&q, &x);
            let p2 = self.projection_extended(&q2, &x);
            sup_gamma = sup_gamma.max(norm2(&g1));
            sup_p = sup_p.max(norm2(&p1));
            let dq = norm2(&crate::vecn::sub(&q, &q2));
            if dq > T::zero() {
                lip = lip.max(norm2(&crate::vecn::sub(&g1, &g2)) / dq);
                lip = lip.max(norm2(&crate::vecn::sub(&p1, &p2)) / dq);
            }
        }
        CoefficientBounds {
            sup_gamma: sup_gamma.as_f64(),
            sup_projection: sup_p.as_f64(),
            lipschitz: lip.as_f64(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CoefficientBounds {
    pub sup_gamma: f64,
    pub sup_projection: f64,
    pub lipschitz: f64,
}

/// Initial data on a uniform base grid: `u0` is continuous piecewise linear
/// (values at the `n + 1` nodes), `v0` is piecewise constant (one value per
/// cell). Vectors are stored flat, `dim` entries per node or cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldData<T: Scalar> {
    pub dim: usize,
    pub h: T,
    pub x_start: T,
    pub u0: Vec<T>,
    pub v0: Vec<T>,
}

impl<T: Scalar> ManifoldData<T> {
    pub fn new(dim: usize, h: T, x_start: T, u0: Vec<T>, v0: Vec<T>) -> Result<Self, GeometryError> {
        if dim == 0 || u0.len() % dim != 0 || v0.len() % dim != 0 {
            return Err(GeometryError::InvalidData("length not a multiple of dim".into()));
        }
        let nodes = u0.len() / dim;
        let cells = v0.len() / dim;
        if nodes != cells + 1 || cells == 0 {
            return Err(GeometryError::InvalidData(format!(
                "{nodes} nodes do not match {cells} cells"
            )));
        }
        if !(h > T::zero()) {
            return Err(GeometryError::InvalidData("spacing must be positive".into()));
        }
        Ok(ManifoldData { dim, h, x_start, u0, v0 })
    }

    /// Samples `u0` at the nodes and `v0` at the cell midpoints.
    pub fn from_fns(
        dim: usize,
        h: T,
        x_start: T,
        n_cells: usize,
        u0: impl Fn(T) -> Vec<T>,
        v0: impl Fn(T) -> Vec<T>,
    ) -> Self {
        let mut uu = Vec::with_capacity((n_cells + 1) * dim);
        for i in 0..=n_cells {
            let x = x_start + h * T::from_usize_lossy(i);
            let val = u0(x);
            assert_eq!(val.len(), dim);
            uu.extend(val);
        }
        let mut vv = Vec::with_capacity(n_cells * dim);
        for i in 0..n_cells {
            let x = x_start + h * (T::from_usize_lossy(i) + T::lit(0.5));
            let val = v0(x);
            assert_eq!(val.len(), dim);
            vv.extend(val);
        }
        ManifoldData { dim, h, x_start, u0: uu, v0: vv }
    }

    pub fn n_cells(&self) -> usize {
        self.v0.len() / self.dim
    }

    pub fn x_node(&self, i: usize) -> T {
        self.x_start + self.h * T::from_usize_lossy(i)
    }

    pub fn x_end(&self) -> T {
        self.x_node(self.n_cells())
    }

    pub fn node(&self, i: usize) -> &[T] {
        &self.u0[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cell(&self, i: usize) -> &[T] {
        &self.v0[i * self.dim..(i + 1) * self.dim]
    }

    /// Du0 on cell `i`.
    pub fn du0(&self, i: usize) -> Vec<T> {
        let a = self.node(i);
        let b = self.node(i + 1);
        a.iter().zip(b).map(|(x, y)| (*y - *x) / self.h).collect()
    }

    /// v0 − Du0 on cell `i`, transported along x − t.
    pub fn g_plus(&self, i: usize) -> Vec<T> {
        let d = self.du0(i);
        self.cell(i).iter().zip(&d).map(|(v, d)| *v - *d).collect()
    }

    /// v0 + Du0 on cell `i`, transported along x + t.
    pub fn g_minus(&self, i: usize) -> Vec<T> {
        let d = self.du0(i);
        self.cell(i).iter().zip(&d).map(|(v, d)| *v + *d).collect()
    }

    /// Sub-grid made of cells `first .. first + count`; values are copied
    /// bit for bit.
    pub fn restrict(&self, first: usize, count: usize) -> Self {
        let d = self.dim;
        ManifoldData {
            dim: d,
            h: self.h,
            x_start: self.x_node(first),
            u0: self.u0[first * d..(first + count + 1) * d].to_vec(),
            v0: self.v0[first * d..(first + count) * d].to_vec(),
        }
    }

    /// u0 at an arbitrary point: linear interpolation inside, constant
    /// extension outside.
    pub fn u_at(&self, x: T) -> Vec<T> {
        let n = self.n_cells();
        let s = (x - self.x_start) / self.h;
        if !(s > T::zero()) {
            return self.node(0).to_vec();
        }
        if s >= T::from_usize_lossy(n) {
            return self.node(n).to_vec();
        }
        let i = s.floor().to_usize().unwrap_or(0).min(n - 1);
        let w = s - T::from_usize_lossy(i);
        if w == T::zero() {
            return self.node(i).to_vec();
        }
        let a = self.node(i);
        let b = self.node(i + 1);
        a.iter().zip(b).map(|(p, q)| *p + w * (*q - *p)).collect()
    }

    /// ∫_{x_start}^{x} v0 with v0 extended by zero.
    pub fn v_antiderivative(&self, x: T) -> Vec<T> {
        let n = self.n_cells();
        let d = self.dim;
        let mut acc = vec![T::zero(); d];
        let s = (x - self.x_start) / self.h;
        if !(s > T::zero()) {
            return acc;
        }
        let full = if s >= T::from_usize_lossy(n) {
            n
        } else {
            s.floor().to_usize().unwrap_or(0).min(n)
        };
        for i in 0..full {
            for (a, v) in acc.iter_mut().zip(self.cell(i)) {
                *a = *a + *v * self.h;
            }
        }
        if full < n {
            let w = (s - T::from_usize_lossy(full)) * self.h;
            for (a, v) in acc.iter_mut().zip(self.cell(full)) {
                *a = *a + *v * w;
            }
        }
        acc
    }

    /// ∫_{x1}^{x2} v0 over an arbitrary interval (signed).
    pub fn v_integral(&self, x1: T, x2: T) -> Vec<T> {
        let a = self.v_antiderivative(x1);
        let b = self.v_antiderivative(x2);
        b.iter().zip(&a).map(|(p, q)| *p - *q).collect()
    }

    /// Total ℓ¹ masses (‖Du0 + v0‖₁, ‖Du0 − v0‖₁).
    pub fn null_masses(&self) -> (T, T) {
        let mut mp = T::zero();
        let mut mm = T::zero();
        for i in 0..self.n_cells() {
            mp = mp + crate::vecn::norm1(&self.g_minus(i)) * self.h;
            mm = mm + crate::vecn::norm1(&self.g_plus(i)) * self.h;
        }
        (mp, mm)
    }

    /// (sup|u0|, ‖Du0‖₁, ‖v0‖₁), the three parts of the L^{1,1} norm.
    pub fn l11_parts(&self) -> (T, T, T) {
        let mut sup = T::zero();
        for i in 0..=self.n_cells() {
            sup = sup.max(crate::vecn::norm1(self.node(i)));
        }
        let mut du = T::zero();
        let mut v = T::zero();
        for i in 0..self.n_cells() {
            du = du + crate::vecn::norm1(&self.du0(i)) * self.h;
            v = v + crate::vecn::norm1(self.cell(i)) * self.h;
        }
        (sup, du, v)
    }

    pub fn l11_norm(&self) -> T {
        let (a, b, c) = self.l11_parts();
        a + b + c
    }
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct CompatibilityReport {
    pub max_defect: f64,
    pub ok: bool,
}

/// Largest normal component of v0 over all cells, measured at the target
/// point nearest to the cell midpoint of u0.
pub fn check_compatibility<T: Scalar>(
    m: &EmbeddedManifold<T>,
    data: &ManifoldData<T>,
    tol: T,
) -> CompatibilityReport {
    let mut worst = T::zero();
    for i in 0..data.n_cells() {
        let mid: Vec<T> = data
            .node(i)
            .iter()
            .zip(data.node(i + 1))
            .map(|(a, b)| (*a + *b) * T::lit(0.5))
            .collect();
        let d = match m.normal_project(&mid, data.cell(i)) {
            Ok(nv) => norm2(&nv),
            Err(_) => T::infinity(),
        };
        if d > worst || d.is_nan() {
            worst = d;
        }
    }
    CompatibilityReport {
        max_defect: worst.as_f64(),
        ok: worst <= tol,
    }
}

/// Normalized bump exp(-1/(1-s²)) sampled at the midpoints of `q` equal
/// sub-intervals of [-1, 1]. Returns (offsets in units of the support
/// half-width, weights summing to one).
fn bump_rule<T: Scalar>(q: usize) -> (Vec<T>, Vec<T>) {
    let mut s = Vec::with_capacity(q);
    let mut w = Vec::with_capacity(q);
    for j in 0..q {
        let sj = T::lit(-1.0) + T::lit(2.0) * (T::from_usize_lossy(j) + T::lit(0.5)) / T::from_usize_lossy(q);
        s.push(sj);
        w.push((-T::one() / (T::one() - sj * sj)).exp());
    }
    let total = crate::reduce::pairwise_sum(&w);
    w.iter_mut().for_each(|x| *x = *x / total);
    (s, w)
}

/// Truncate, mollify and project data onto the target, on the same grid.
///
/// u0 is frozen outside [-k, k] and v0 is zeroed outside (-k, k); both are
/// convolved with the bump of index m_k, the first index ≥ k whose support
/// fits in [-δ₀/2, δ₀/2], where δ₀ is the distance over which the truncated
/// curve moves by at most a third of the tubular radius. The result is
/// mapped through the nearest-point map and the tangent projection.
pub fn smooth_approximate<T: Scalar>(
    m: &EmbeddedManifold<T>,
    data: &ManifoldData<T>,
    k: usize,
) -> Result<ManifoldData<T>, GeometryError> {
    assert!(k > 0);
    let kk = T::from_usize_lossy(k);
    let d = data.dim;
    let n = data.n_cells();
    let h = data.h;

    let clamp = |x: T| x.max(-kk).min(kk);
    let truncated_u = |x: T| data.u_at(clamp(x));
    // antiderivative of v0·1_(-k,k)
    let trunc_anti = |x: T| data.v_antiderivative(clamp(x));

    let mut lip = T::zero();
    for i in 0..n {
        lip = lip.max(norm2(&data.du0(i)));
    }
    let eps0 = if m.tubular_radius_eps0.is_finite() {
        m.tubular_radius_eps0
    } else {
        T::one()
    };
    let delta0 = if lip > T::zero() {
        eps0 / T::lit(3.0) / lip
    } else {
        T::infinity()
    };
    let mut mk = k;
    if delta0.is_finite() {
        let need = (T::lit(2.0) / delta0).ceil().to_usize().unwrap_or(usize::MAX);
        mk = mk.max(need);
    }
    let width = T::one() / T::from_usize_lossy(mk);
    let (offs, weights) = bump_rule::<T>(64);

    let mut u_out = Vec::with_capacity((n + 1) * d);
    for i in 0..=n {
        let x = data.x_node(i);
        let mut acc = vec![T::zero(); d];
        for (s, w) in offs.iter().zip(&weights) {
            let val = truncated_u(x - *s * width);
            for (a, v) in acc.iter_mut().zip(&val) {
                *a = *a + *w * *v;
            }
        }
        let p = m.nearest_point(&acc)?;
        u_out.extend(p);
    }

    let mut v_out = Vec::with_capacity(n * d);
    for i in 0..n {
        let x1 = data.x_node(i);
        let x2 = data.x_node(i + 1);
        let mut acc = vec![T::zero(); d];
        for (s, w) in offs.iter().zip(&weights) {
            let a = trunc_anti(x1 - *s * width);
            let b = trunc_anti(x2 - *s * width);
            for j in 0..d {
                acc[j] = acc[j] + *w * (b[j] - a[j]) / h;
            }
        }
        let mid: Vec<T> = (0..d)
            .map(|j| (u_out[i * d + j] + u_out[(i + 1) * d + j]) * T::lit(0.5))
            .collect();
        v_out.extend(m.tangent_project(&mid, &acc)?);
    }
    ManifoldData::new(d, h, data.x_start, u_out, v_out)
}
