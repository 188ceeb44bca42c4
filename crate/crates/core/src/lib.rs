//! Driving-context recognition on top of vision-language inference backends.
//!
//! A frame is turned into a set of yes/no context questions, the answers
//! are normalized into verdicts, and the verdicts feed either a live
//! context state (the realtime loop) or dataset annotation and evaluation.

pub mod annotation;
pub mod clock;
pub mod dataset;
pub mod evaluation;
pub mod protocol;
pub mod query;
pub mod realtime;
pub mod synth;
pub mod taxonomy;

pub use query::{Answer, ConfidenceSource, Verdict};
pub use taxonomy::{ContextId, Taxonomy};
