//! Shape-trajectory analysis for cardiac surface meshes.
//!
//! Shapes are ordered 3D landmark configurations deformed by diffeomorphic
//! flows. A flow is parameterized compactly by control points carrying
//! momentum vectors whose Gaussian-kernel convolution defines a velocity
//! field. On top of this machinery the crate provides:
//!
//! - geodesic shooting and registration between landmark sets ([`shooting`],
//!   [`registration`]),
//! - exact gradients through the discretized integrator ([`optim`]),
//! - pole-ladder parallel transport of intra-subject deformations to an
//!   atlas, with ejection-fraction-preserving rescaling ([`transport`]),
//! - second-order spline regression of full contraction trajectories
//!   ([`spline`]),
//! - triangle-mesh biomarkers (volume, ejection fraction, area strain) and
//!   rigid alignment ([`mesh`]),
//! - group-wise multivariate statistics on fitted descriptors ([`stats`]).

pub mod error;
pub mod geometry;
pub mod mesh;
pub mod optim;
pub mod registration;
pub mod shooting;
pub mod spline;
pub mod stats;
pub mod transport;
pub mod util;

pub use error::{Error, Result};
