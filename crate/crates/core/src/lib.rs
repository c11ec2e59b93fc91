//! Training-free aerial-ground collaborative 3D perception.
//!
//! The pipeline renders synthetic scenes for one ground vehicle and two
//! UAVs, refines per-pixel depth with a cross-agent CRF ([`depthcrf`]),
//! lifts features into a bird's-eye-view grid ([`bevlift`]), fuses the
//! agents' grids ([`cdca`]), decodes boxes ([`detector`]) and scores them
//! ([`metrics`]). [`pipeline`] ties the stages together for the CLI.

pub mod bevlift;
pub mod cdca;
pub mod channels;
pub mod config;
pub mod depthcrf;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod scenesim;

pub use error::{Error, Result};
