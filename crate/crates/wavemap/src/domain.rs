//! Trapezoids in (t, x), slices, dependence triangles, tile covers and null
//! coordinates.

use serde::Serialize;
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid trapezoid: {0}")]
    Invalid(String),
    #[error("point ({t}, {x}) lies outside the domain")]
    OutsideDomain { t: f64, x: f64 },
    #[error("tile width {delta} exceeds half of the half-length {half_length}")]
    DeltaTooLarge { delta: f64, half_length: f64 },
    #[error("null coordinates with a < b ({a} < {b})")]
    CausalityViolated { a: f64, b: f64 },
    #[error("operation needs a compact trapezoid")]
    NotCompact,
}

/// Closed interval, possibly unbounded on either side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> Interval<T> {
    pub fn new(lo: T, hi: T) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, x: T) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn length(&self) -> T {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Trapezoid<T> {
    /// Base [x0 − L, x0 + L], sides of slope ±1, cut at `height` ≤ L.
    Compact { x0: T, half_length: T, height: T },
    /// [0, height] × R.
    Unbounded { height: T },
    /// x ≥ b + t.
    SemiBoundedUp { b: T, height: T },
    /// x ≤ a − t.
    SemiBoundedDown { a: T, height: T },
}

/// Closed triangle with apex (t0, x0) and base [x0 − t0, x0 + t0].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DependenceTriangle<T> {
    pub apex: (T, T),
    pub base: Interval<T>,
}

impl<T: Scalar> Trapezoid<T> {
    pub fn compact(x0: T, half_length: T, height: T) -> Result<Self, DomainError> {
        if !(half_length > T::zero()) || !half_length.is_finite() {
            return Err(DomainError::Invalid("half-length must be positive and finite".into()));
        }
        if !(height > T::zero()) || height > half_length {
            return Err(DomainError::Invalid(format!(
                "height {height} must lie in (0, {half_length}]"
            )));
        }
        Ok(Trapezoid::Compact { x0, half_length, height })
    }

    /// The maximal triangle over [x0 − L, x0 + L].
    pub fn triangle(x0: T, half_length: T) -> Result<Self, DomainError> {
        Self::compact(x0, half_length, half_length)
    }

    pub fn height(&self) -> T {
        match *self {
            Trapezoid::Compact { height, .. }
            | Trapezoid::Unbounded { height }
            | Trapezoid::SemiBoundedUp { height, .. }
            | Trapezoid::SemiBoundedDown { height, .. } => height,
        }
    }

    pub fn base(&self) -> Interval<T> {
        self.slice(T::zero()).expect("every trapezoid has a base")
    }

    /// K_t, or `None` when empty.
    pub fn slice(&self, t: T) -> Option<Interval<T>> {
        if t < T::zero() || t > self.height() {
            return None;
        }
        let inf = T::infinity();
        match *self {
            Trapezoid::Compact { x0, half_length, .. } => {
                let lo = x0 - half_length + t;
                let hi = x0 + half_length - t;
                if lo > hi {
                    None
                } else {
                    Some(Interval::new(lo, hi))
                }
            }
            Trapezoid::Unbounded { .. } => Some(Interval::new(-inf, inf)),
            Trapezoid::SemiBoundedUp { b, .. } => Some(Interval::new(b + t, inf)),
            Trapezoid::SemiBoundedDown { a, .. } => Some(Interval::new(-inf, a - t)),
        }
    }

    pub fn contains(&self, t: T, x: T) -> bool {
        self.slice(t).map(|s| s.contains(x)).unwrap_or(false)
    }

    pub fn dependence_triangle(&self, t0: T, x0: T) -> Result<DependenceTriangle<T>, DomainError> {
        if !self.contains(t0, x0) {
            return Err(DomainError::OutsideDomain { t: t0.as_f64(), x: x0.as_f64() });
        }
        Ok(DependenceTriangle {
            apex: (t0, x0),
            base: Interval::new(x0 - t0, x0 + t0),
        })
    }

    /// Overlapping cover of the bottom of a compact trapezoid by maximal
    /// triangles of half-length `delta`, centred with stride δ/2 from
    /// x0 − L + δ to x0 + L − δ (the last one flush right). Their union
    /// contains K ∩ ([0, δ/2] × R); see [`tile_cover_height`].
    ///
    /// `strict` enforces δ ≤ L/2; otherwise δ up to L is accepted.
    pub fn tile_cover(&self, delta: T, strict: bool) -> Result<Vec<Trapezoid<T>>, DomainError> {
        let (x0, l) = match *self {
            Trapezoid::Compact { x0, half_length, .. } => (x0, half_length),
            _ => return Err(DomainError::NotCompact),
        };
        let cap = if strict { l * T::lit(0.5) } else { l };
        if !(delta > T::zero()) || delta > cap {
            return Err(DomainError::DeltaTooLarge {
                delta: delta.as_f64(),
                half_length: l.as_f64(),
            });
        }
        let first = x0 - l + delta;
        let last = x0 + l - delta;
        let stride = delta * T::lit(0.5);
        let mut out = Vec::new();
        let mut j = 0usize;
        loop {
            let y = first + stride * T::from_usize_lossy(j);
            if y >= last {
                out.push(Trapezoid::Compact { x0: last, half_length: delta, height: delta });
                break;
            }
            out.push(Trapezoid::Compact { x0: y, half_length: delta, height: delta });
            j += 1;
        }
        Ok(out)
    }
}

/// Height below which a tile cover of width δ is guaranteed to cover K.
pub fn tile_cover_height<T: Scalar>(delta: T) -> T {
    delta * T::lit(0.5)
}

pub fn to_null<T: Scalar>(t: T, x: T) -> (T, T) {
    (x + t, x - t)
}

pub fn from_null<T: Scalar>(a: T, b: T) -> Result<(T, T), DomainError> {
    if a < b {
        return Err(DomainError::CausalityViolated { a: a.as_f64(), b: b.as_f64() });
    }
    let half = T::lit(0.5);
    Ok(((a - b) * half, (a + b) * half))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k022() -> Trapezoid<f64> {
        Trapezoid::compact(0.0, 2.0, 2.0).unwrap()
    }

    #[test]
    fn slices() {
        assert_eq!(k022().slice(1.0), Some(Interval::new(-1.0, 1.0)));
        assert_eq!(k022().slice(3.0), None);
        let up = Trapezoid::SemiBoundedUp { b: 0.0, height: f64::INFINITY };
        assert_eq!(up.slice(2.0), Some(Interval::new(2.0, f64::INFINITY)));
    }

    #[test]
    fn membership() {
        assert!(k022().contains(2.0, 0.0));
        assert!(!k022().contains(1.0, 1.5));
        assert!(Trapezoid::Unbounded { height: 5.0 }.contains(5.0, 100.0));
    }

    #[test]
    fn dependence_triangles() {
        let d = k022().dependence_triangle(1.0, 0.0).unwrap();
        assert_eq!(d.base, Interval::new(-1.0, 1.0));
        let d = k022().dependence_triangle(0.0, 0.7).unwrap();
        assert_eq!(d.base.length(), 0.0);
        let d = Trapezoid::Unbounded { height: 10.0 }.dependence_triangle(3.0, 5.0).unwrap();
        assert_eq!(d.base, Interval::new(2.0, 8.0));
        assert!(k022().dependence_triangle(1.9, 1.0).is_err());
    }

    #[test]
    fn tile_cover_examples() {
        let tiles = k022().tile_cover(1.0, true).unwrap();
        let centers: Vec<f64> = tiles
            .iter()
            .map(|t| match t {
                Trapezoid::Compact { x0, .. } => *x0,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(centers, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(matches!(k022().tile_cover(1.5, true), Err(DomainError::DeltaTooLarge { .. })));
        let single = k022().tile_cover(2.0, false).unwrap();
        assert_eq!(single, vec![Trapezoid::Compact { x0: 0.0, half_length: 2.0, height: 2.0 }]);
    }

    #[test]
    fn null_round_trip() {
        assert_eq!(to_null(1.0, 2.0), (3.0, 1.0));
        assert_eq!(from_null(0.0, 0.0).unwrap(), (0.0, 0.0));
        assert_eq!(from_null(2.0, -2.0).unwrap(), (2.0, 0.0));
        assert!(from_null(0.0, 1.0).is_err());
    }

    fn variants() -> impl Strategy<Value = Trapezoid<f64>> {
        prop_oneof![
            (-3.0..3.0f64, 0.5..4.0f64, 0.1..1.0f64).prop_map(|(x0, l, f)| Trapezoid::Compact {
                x0,
                half_length: l,
                height: l * f
            }),
            (0.5..5.0f64).prop_map(|h| Trapezoid::Unbounded { height: h }),
            (-3.0..3.0f64, 0.5..5.0f64).prop_map(|(b, h)| Trapezoid::SemiBoundedUp { b, height: h }),
            (-3.0..3.0f64, 0.5..5.0f64).prop_map(|(a, h)| Trapezoid::SemiBoundedDown { a, height: h }),
        ]
    }

    proptest! {
        #[test]
        fn causal_shift_closure(k in variants(), tf in 0.0..1.0f64, xs in -8.0..8.0f64, sf in 0.0..1.0f64) {
            let t = tf * k.height();
            let x = match k.slice(t) {
                Some(iv) => iv.lo.max(-8.0) + (iv.hi.min(8.0) - iv.lo.max(-8.0)) * ((xs + 8.0) / 16.0),
                None => return Ok(()),
            };
            prop_assume!(k.contains(t, x));
            let s = sf * t;
            prop_assert!(k.contains(s, x + t - s));
            prop_assert!(k.contains(s, x - t + s));
        }

        #[test]
        fn null_maps_round_trip(t in 0i32..1000, x in -1000i32..1000) {
            // dyadic inputs keep every operation exact
            let (t, x) = (t as f64 / 64.0, x as f64 / 64.0);
            let (a, b) = to_null(t, x);
            prop_assert_eq!(from_null(a, b).unwrap(), (t, x));
        }

        #[test]
        fn tile_cover_matches_bottom_of_k(l in 1u32..6, dsteps in 1u32..8, probe_t in 0.0..1.0f64, probe_x in -1.0..1.0f64) {
            let l = l as f64;
            let delta = (l / 2.0) * dsteps as f64 / 8.0;
            let k = Trapezoid::compact(0.0, l, l).unwrap();
            let tiles = k.tile_cover(delta, true).unwrap();
            let t = probe_t * tile_cover_height(delta);
            let x = probe_x * (l - t);
            let inside_union = tiles.iter().any(|tile| tile.contains(t, x));
            prop_assert_eq!(inside_union, k.contains(t, x));
            // every tile lies inside K
            for tile in &tiles {
                if let Trapezoid::Compact { x0, half_length, .. } = tile {
                    prop_assert!(x0 - half_length >= -l - 1e-12 && x0 + half_length <= l + 1e-12);
                }
            }
        }
    }
}
