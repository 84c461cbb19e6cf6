//! Domain-invariant image embeddings: SimCLR-style contrastive training
//! combined with gradient-reversal adversarial domain classification.
//!
//! The crate provides the loss primitives, a small deterministic CNN stack,
//! synthetic multi-domain data generation, the two-stage trainer, and the
//! evaluation toolkit (linear probes, k-NN purity, 2-D projections).

pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};

/// True when `INVENC_DETERMINISTIC=1`: wall-clock fields in logs are zeroed
/// so that repeated runs are byte-identical.
pub fn deterministic_mode() -> bool {
    std::env::var("INVENC_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}

// TODO: replaced by the real CLI dispatcher once the cli module lands.
pub fn cli_main() -> i32 {
    eprintln!("CLI not wired yet");
    2
}
