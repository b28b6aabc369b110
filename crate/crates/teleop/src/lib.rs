//! Teleoperation failsafe: a fixed-rate control loop that blends operator joint commands
//! with the autonomous executive, served over WebSocket as JSON messages.
//!
//! Endpoints: `GET /ws` (message socket), `GET /status` (loop counters and arm sources),
//! and optionally static console assets at `/`.

pub mod autonomy;
pub mod control;
pub mod protocol;
pub mod server;

use thiserror::Error;

pub use control::ControlLoopConfig;
pub use protocol::TeleopMessage;
pub use server::{serve, ServerConfig, SimHandle, TeleopServer};

#[derive(Debug, Error)]
pub enum TeleopError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
