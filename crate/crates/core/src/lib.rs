//! Trajectory-forecasting workbench core.
//!
//! Implements K-correlated conditional flow matching for multi-agent scenes:
//! a transformer that maps K noisy trajectory sets plus social context to K
//! waypoint hypotheses with confidence logits, trained with a winner-take-all
//! objective; a denoising-ODE sampler with a warped time grid; and a one-step
//! student distilled from cached teacher samples with an IMLE Chamfer loss.
//!
//! Everything is pure ndarray + a small reverse-mode tape ([`autodiff`]); no
//! GPU, no global state. All randomness flows through explicitly passed
//! ChaCha generators derived from a root seed ([`rng`]), so every artifact is
//! bit-reproducible.

pub mod autodiff;
pub mod checkpoint;
pub mod context;
pub mod dataio;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod network;
pub mod norm;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod student;
pub mod teacher;

pub use error::{Error, Result};
pub use flow::{FlowState, PredictionSet};
pub use norm::Normalizer;
pub use scene::{AgentRecord, Coord, Scene};
