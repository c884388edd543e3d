//! Geometric modeling, identification, gait synthesis and feedback for
//! drag-dominated planar chains propelled by distributed jets.

pub mod averaging;
pub mod body_frame;
pub mod chain;
pub mod dataset;
pub mod drag;
pub mod error;
pub mod feedback;
pub mod gait;
pub mod ident;
pub mod linalg;
pub mod maneuver;
pub mod planning;
pub mod presets;
pub mod se2;
pub mod signal;
pub mod sim;

pub use error::{Error, Result};
