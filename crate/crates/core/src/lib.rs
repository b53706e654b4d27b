//! Test-time policy evolution for program synthesis.
//!
//! A frozen miniature causal transformer proposes stack-machine programs, a
//! PUCT tree search explores them against unit tests, and a transient
//! low-rank adapter is trained online from sibling groups with a clipped,
//! KL-regularized group-relative objective. The adapter lives for a single
//! task and is thrown away afterwards.

pub mod dsl;
pub mod error;

pub use error::{Error, Result};
pub mod adapter;
pub mod grpo;
pub mod harness;
pub mod policy;
pub mod evolution;
pub mod pretrain;
pub mod search;
pub mod trace;
