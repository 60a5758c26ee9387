//! Class-aware 3D pseudo-box generation from LiDAR sweeps fused with image
//! instance masks and depth maps.
//!
//! The pipeline runs bottom-up through the modules:
//!
//! 1. [`io`] loads frames (point cloud, calibration, masks, depth rasters).
//! 2. [`fusion`] labels LiDAR points from the masks and back-projects mask
//!    pixels into pseudo points.
//! 3. [`filtering`] removes pseudo points far from any real point (range-scaled
//!    ball query) and then statistical outliers.
//! 4. [`boxfit`] fits a BEV rectangle per instance, corrects implausibly small
//!    boxes and lifts them to 3D.
//! 5. [`evolution`] refines the boxes during detector self-training.

pub mod boxfit;
pub mod class;
pub mod evolution;
pub mod filtering;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod kdtree;

pub use class::ClassId;
pub use geometry::{BevBox, Box3D, CameraModel, Point3, RigidTransform};
