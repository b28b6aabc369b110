//! Geometry, shape fitting, kinematics and planning for a dual-arm pepper harvester.

pub mod cloud_io;
pub mod collision;
pub mod error;
pub mod geometry;
pub mod grasp;
pub mod kinematics;
pub mod lsq;
pub mod planning;
pub mod pose;
pub mod superellipsoid;

pub use error::{FitError, GeometryError, GraspError, IoError, KinematicsError, PlanError};
pub use geometry::{CameraIntrinsics, DepthImage, PointCloud, RigidTransform, Vec3};
pub use superellipsoid::Superellipsoid;
