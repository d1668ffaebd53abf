//! Zero-shot multiple-choice question answering with self-talk
//! clarifications organised by cognitive taxonomy level.
//!
//! A frozen language model ([`lm_backend::Backend`]) first asks itself
//! clarification questions from templated prefixes ([`taxonomy`]), answers
//! them ([`selftalk`]), and then picks the answer option whose best
//! clarification-conditioned score is highest ([`selection`]). The
//! [`evalharness`] runs this over a dataset ([`datasets`]) for several seeds
//! and taxonomy levels.

pub mod cli;
pub mod datasets;
pub mod evalharness;
pub mod lm_backend;
pub mod selection;
pub mod selftalk;
pub mod taxonomy;

pub use evalharness::{evaluate, EvalReport, RunConfig};
pub use lm_backend::{Backend, GenParams, ScoreMode, ScoreValue, StubBackend};
pub use selection::{select_answer, QaInstance, Restriction, ScoreMatrix, SelectionResult};
pub use selftalk::{generate_clarifications, ClarificationSet};
pub use taxonomy::{DatasetKind, PrefixTemplate, TaxonomyLevel};
