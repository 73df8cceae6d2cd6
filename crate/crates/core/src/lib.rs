//! Simulation harness for counseling sessions with a cognitively masked
//! client, plus the metrics and analyses run over the resulting transcripts.

pub mod analysis;
pub mod backends;
pub mod experiment;
pub mod fixtures;
pub mod mediator;
pub mod metrics;
pub mod persona;
pub mod prompts;
pub mod session;
pub mod transcript;
