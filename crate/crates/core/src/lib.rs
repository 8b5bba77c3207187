//! Robust reward modeling on synthetic preference data.
//!
//! Two reward models are co-trained so that each one only learns from the
//! pairs its peer rates most confidently (batch-level peer review), while the
//! training set is re-ordered from easy to hard at the start of every epoch
//! (curriculum ordering). Standard Bradley–Terry training and the robust
//! objectives (cDPO, rDPO, ROPO, implicit-reward DPO) share the same
//! machinery so that every variant can be compared on identical data.
//!
//! Module map:
//! - [`prefdata`]: synthetic preference generation, label-flip noise, JSONL persistence
//! - [`rewardnet`]: linear / one-hidden-layer scorers, exact gradients, optimizers
//! - [`objectives`]: pairwise losses of a reward margin and the implicit-reward margin
//! - [`crm`]: peer review, top-k selection, curriculum ordering, co-training loop
//! - [`dynamics`]: per-instance loss trajectories and robustness categories
//! - [`eval`]: preference accuracy, filter quality, loss / reward exports
//! - [`cli`]: the `crmlab` command-line front end

pub mod cli;
pub mod crm;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod prefdata;
pub mod rewardnet;

pub use error::{Error, Result};
