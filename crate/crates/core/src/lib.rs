//! Random flights of point particles in channels whose walls carry a periodic
//! microstructure.
//!
//! The crate is organised by role:
//!
//! * [`geometry`]: billiard maps inside one wall cell (closed form and ray tracer).
//! * [`kernels`]: collision operators on post-collision angles and their verifiers.
//! * [`spectral`]: weighted discretization, eigen-decomposition and the truncated
//!   spectral diffusivity with extrapolation in the truncation level.
//! * [`flight`]: Monte Carlo flights, moment oracles, exit times, CLT checks.
//! * [`analysis`]: closed-form reference values.
//! * [`validate`]: the invariant suite used by the `validate` command.
//!
//! Numerical code is generic over [`Real`] (implemented for `f32` and `f64`);
//! the `*64` aliases below fix the scalar to `f64`, which is what the command
//! line front end uses.

pub mod analysis;
pub mod flight;
pub mod geometry;
pub mod kernels;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod validate;

mod error;

pub use error::{Error, Result};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};

/// Scalar used throughout the numerical core.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Version of the numerical core, embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type CellGeometry64 = geometry::CellGeometry<f64>;
pub type ExitRecord64 = geometry::ExitRecord<f64>;
pub type SurfaceMeasure64 = kernels::SurfaceMeasure<f64>;
pub type KernelRef64 = kernels::KernelRef<f64>;
pub type AngleGrid64 = spectral::AngleGrid<f64>;
pub type KernelMatrix64 = spectral::KernelMatrix<f64>;
pub type Decomposition64 = spectral::Decomposition<f64>;
pub type ChannelConfig64 = flight::ChannelConfig<f64>;
pub type FlightKernel64 = flight::FlightKernel<f64>;
pub type FlightRecord64 = flight::FlightRecord<f64>;
