//! Transmit power allocation on a two-pair interference channel, driven by a
//! few-shot prompted language model and checked against classical baselines.
//!
//! The crate is split along the pipeline:
//!
//! * [`channel`] draws deployments, Rayleigh fading and path-loss gains.
//! * [`objectives`] evaluates the sum spectral efficiency and the per-link
//!   energy efficiency objectives.
//! * [`solvers`] holds the exhaustive grid oracle, binary power control and
//!   the random baseline.
//! * [`codec`] turns gains and powers into the integer prompt grammar and
//!   parses model output back into an allocation.
//! * [`backend`] is the completion interface: an HTTP client plus offline
//!   mocks and transcript replay.
//! * [`harness`] runs trials, aggregates them and writes CSV/SVG reports.

pub mod backend;
pub mod channel;
pub mod codec;
pub mod harness;
pub mod objectives;
pub mod solvers;

pub use backend::{BackendConfig, BackendError, BackendKind, CompletionBackend, CompletionRequest};
pub use channel::{ChannelGains, Deployment, SystemParams};
pub use codec::{EncodedEpisode, Episode, GainDomain, ParseOutcome};
pub use harness::{RunConfig, Strategy, SummaryRow, TrialRecord};
pub use objectives::{ObjectiveKind, PowerAllocation};
pub use solvers::{BinaryOptions, GridSpec};
