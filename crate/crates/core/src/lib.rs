//! NaN-rejecting checks are written `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cloud;
pub mod detect;
pub mod error;
pub mod feat2d;
pub mod fpfh;
pub mod graph_net;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod multiview;
pub mod neighbors;
pub mod preprocess;
pub mod sparse_conv;
pub mod voxel;

pub use cloud::{FeatureMatrix, Point3, PointCloud};
pub use error::{Error, Result};
pub use voxel::SparseVoxelGrid;
