use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("primary axis is degenerate (length {length:e} m)")]
    DegenerateAxis { length: f64 },
    #[error("primary axis is parallel to the reference direction")]
    ParallelReference,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("pixel ({u}, {v}) lies outside the image")]
    PixelOutOfBounds { u: u32, v: u32 },
    #[error("camera intrinsics are invalid")]
    InvalidIntrinsics,
    #[error("input contains non-finite or non-positive values")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("need at least {min} points to fit, got {got}")]
    TooFewPoints { got: usize, min: usize },
    #[error("solver diverged: cost became non-finite")]
    SolverDiverged,
    #[error("initial pose must be a coarse estimate")]
    NotCoarse,
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("no inverse kinematics solution found after {attempts} attempts")]
    NoSolution { attempts: usize },
    #[error("joint vector has {got} entries, chain has {expected} joints")]
    DofMismatch { expected: usize, got: usize },
    #[error("invalid chain description: {0}")]
    InvalidChain(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraspError {
    #[error("no feasible grasp candidate")]
    NoFeasibleGrasp,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("start configuration is in collision or outside joint limits")]
    StartInCollision,
    #[error("goal configuration is in collision or outside joint limits")]
    GoalInCollision,
    #[error("no path found within {iterations} iterations / {elapsed_s:.3} s")]
    NoPathFound { iterations: usize, elapsed_s: f64 },
    #[error("only {:.1}% of the cartesian path is achievable", .0 * 100.0)]
    CartesianFraction(f64),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("binary cloud truncated: header says {expected} points, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
