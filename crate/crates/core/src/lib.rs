//! Trace-driven training lab for real-time video bitrate controllers.
//!
//! The pieces, bottom-up:
//!
//! - [`trace`]: bandwidth traces, labels, the twelve condition groups,
//!   corpus splitting and synthetic trace families.
//! - [`env`]: a fluid-queue session simulator that turns bitrate choices
//!   into throughput, delay, stalls and a QoE reward.
//! - [`net`]: an actor-critic MLP with analytic advantage actor-critic
//!   gradients, layer freezing and checkpoints.
//! - [`rollout`]: episode stepping shared by every training loop.
//! - [`discriminator`]: periodic regrouping of clients by condition.
//! - [`federation`]: the per-group synchronous gradient-averaging coordinator.
//! - [`transfer`]: offline pretraining and frozen-trunk fine-tuning.
//! - [`harness`]: the four training schemes, convergence detection,
//!   efficiency metrics and QoE reports.

pub mod discriminator;
pub mod env;
pub mod federation;
pub mod harness;
pub mod net;
pub mod rollout;
pub mod trace;
pub mod transfer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Trace(#[from] trace::TraceError),
    #[error(transparent)]
    Env(#[from] env::EnvError),
    #[error(transparent)]
    Net(#[from] net::NetError),
    #[error(transparent)]
    Federation(#[from] federation::FederationError),
    #[error(transparent)]
    Discriminator(#[from] discriminator::DiscriminatorError),
    #[error("training diverged in epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: net::NetError,
    },
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
