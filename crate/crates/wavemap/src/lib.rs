//! Characteristic-lattice solver and estimate auditor for forced wave maps
//! `□u = Σ Γ_jk(u) Q_jk(u,u) + P(u) f` in one space dimension, with values in
//! an embedded target manifold (the unit sphere by default).
//!
//! The numerical core is generic over the scalar type through [`Scalar`];
//! `f64` aliases are exported at the crate root for everyday use.

pub mod cli;
pub mod domain;
pub mod estimates;
pub mod fields;
pub mod geometry;
pub mod linear_wave;
pub mod scattering;
pub mod solver;

mod reduce;
mod vecn;

use std::fmt::{Debug, Display};

/// Floating point type the solver can run on.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumCast
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Literal conversion; panics only for values the type cannot hold at all.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("index not representable")
    }

    /// Bitwise identity, so `-0.0` and `0.0` are different.
    fn same_bits(self, other: Self) -> bool;
}

impl Scalar for f32 {
    fn same_bits(self, other: Self) -> bool {
        self.to_bits() == other.to_bits()
    }
}

impl Scalar for f64 {
    fn same_bits(self, other: Self) -> bool {
        self.to_bits() == other.to_bits()
    }
}

pub use domain::{Interval, Trapezoid};
pub use estimates::EstimateReport;
pub use fields::{AffineField, CellField, NodeField, NullLattice, SliceTrace};
pub use geometry::{EmbeddedManifold, ManifoldData};
pub use solver::{ContractionBudget, Solution, SolvePath};

pub type Trapezoid64 = domain::Trapezoid<f64>;
pub type Lattice64 = fields::NullLattice<f64>;
pub type Manifold64 = geometry::EmbeddedManifold<f64>;
pub type Data64 = geometry::ManifoldData<f64>;
pub type CellField64 = fields::CellField<f64>;
pub type NodeField64 = fields::NodeField<f64>;
pub type Solution64 = solver::Solution<f64>;
pub type Budget64 = solver::ContractionBudget<f64>;
