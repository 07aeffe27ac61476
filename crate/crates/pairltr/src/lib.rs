//! Unbiased pairwise learning-to-rank with pairwise trust-bias correction.
//!
//! The crate covers the full desk-scale experiment loop: LETOR data handling,
//! biased click/dwell simulation, closed-form pairwise posteriors checked
//! against a brute-force generative oracle, regression-based EM for the bias
//! parameters, debiased pairwise losses, and NDCG/ARP evaluation.

pub mod bias;
pub mod config;
pub mod em;
pub mod error;
pub mod letor;
pub mod losses;
pub mod metrics;
pub mod mlp;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
pub use par::ExecMode;
