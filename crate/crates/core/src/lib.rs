pub mod bench;
pub mod em;
pub mod error;
pub mod error_models;
pub mod geometry;
pub mod gmm;
pub mod icp;
pub mod preprocess;
pub mod shapes;

pub use error::{Error, Result};
pub use geometry::{CovPointCloud, Matrix, RigidTransform, Vector};
