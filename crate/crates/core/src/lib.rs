//! Spectral-domain adapters for frozen point-cloud transformers.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used by the harness.

pub mod adapter;
pub mod backbone;
pub mod eigen;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod ordering;
pub mod pointcloud;
pub mod scalar;
pub mod spectral;

pub use adapter::{count_trainable, AdapterContext, AdapterParams, BasisKind};
pub use backbone::{BackboneConfig, BackboneParams, Model, Sample, TrainMode};
pub use error::{Error, Result};
pub use graph::{BasisScope, GraphScope, SpectralBasis};
pub use linalg::Matrix;
pub use ordering::{OrderTag, OrderingMethod, OrderingResult};
pub use pointcloud::{PatchSet, PointCloud};
pub use scalar::Scalar;

pub type Real = f64;
pub type Mat = Matrix<f64>;
pub type Cloud = PointCloud<f64>;
pub type Basis = SpectralBasis<f64>;
pub type Adapter = AdapterParams<f64>;
pub type Context = AdapterContext<f64>;
pub type F64Model = Model<f64>;
pub type F32Model = Model<f32>;
pub type Mat32 = Matrix<f32>;
