//! Staged KV-cache eviction diagnostics over captured attention tensors.
//!
//! The crate separates a scalar eviction score into three stages under a
//! frozen [`contract::SelectorContract`]: access support (Stage I), value
//! consequence (Stage II), and budgeted projection (Stage III). It also ships
//! a finite-space lab for r-channel proxy bounds and a resampling harness for
//! sign-split evaluation over cell grids.

pub mod access;
pub mod capture;
pub mod contract;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod projection;
pub mod rchannel;
pub mod stats;
pub mod synth;
pub mod value;

pub use capture::{load_capture, save_capture, AttentionCapture, CaptureDims};
pub use contract::{
    budget_tokens, contract_fingerprint, make_blocks, top_k, BlockPartition, KeptSet, Provenance,
    ScoreVector, SelectorContract, StageTag,
};
pub use error::{CaptureError, ContractError, DiagnosticError, FormatError, StatsError, SynthError};

/// Version string embedded in every artifact the toolkit writes.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
