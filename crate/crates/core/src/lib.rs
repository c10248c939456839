//! Evidence-grounded diagnostic reporting toolkit: grounding losses, grounding
//! distillation, executable-rule rewards and group-relative policy
//! optimization over a deterministic synthetic cohort.

pub mod error;
pub mod numeric;

pub use error::{Error, Result};
pub mod optim;
pub mod textenc;
pub mod report;
pub mod record;
pub mod rules;
pub mod cohort;
pub mod metrics;
pub mod sea;
pub mod eval;
pub mod distill;
pub mod grpo;
pub mod pretrain;
pub mod gradsuite;
pub mod config;
pub mod cli;
