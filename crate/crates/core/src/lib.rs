//! Multi-domain click-through-rate modelling with similar-domain selection.
//!
//! A masked mixture-of-experts backbone learns per-domain representations,
//! a prototype encoder summarises each domain's batch, an asymmetric
//! prototype distance ranks domains, and a decaying epsilon-greedy selector
//! picks, per domain, which prefix of that ranking may share experts.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod prototype;
pub mod selection;

pub use error::{Error, Result};
