//! Rule-aware gated reward shaping and group-relative policy optimization
//! over a synthetic relevance-judgement world.

pub mod config;
pub mod error;
pub mod experiment;
pub mod grpo;
pub mod harness;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod replay;
pub mod reward;
pub mod rules;
pub mod rng;
pub mod trajectory;
pub mod world;

pub use error::{Error, Result};
pub use rules::Tier;
