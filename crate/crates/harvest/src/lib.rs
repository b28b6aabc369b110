//! Harvest executive and headless simulation for the dual-arm pepper harvester.

pub mod batch;
pub mod executive;
pub mod sim;
pub mod world;

use thiserror::Error;
use vader_core::error::{GeometryError, KinematicsError};

pub use world::{ArmId, HarvestScene};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarvestError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("nothing visible from the camera")]
    EmptyView,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
