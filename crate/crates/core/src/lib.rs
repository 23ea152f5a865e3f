//! Multi-agent deductive qualitative coding.
//!
//! Two persona-prompted LLM coders label dialog segments against a codebook,
//! discuss disagreements, and defer to a neutral arbiter when they cannot
//! align. A single-agent control coder runs alongside, and every decision is
//! compared with human ground truth.

pub mod analysis;
pub mod backend;
pub mod codebook;
pub mod deliberation;
pub mod experiment;
pub mod extraction;
pub mod persona;
pub mod prompting;
pub mod stats;

pub use codebook::{
    load_codebook, load_ground_truth, load_transcript, AssignmentSource, CodeAssignment,
    CodeCategory, CodeValue, Codebook, GroundTruth, Segment,
};
pub use deliberation::{ConsensusOutcome, DeliberationTrace, Deliberator, Panel, TurnRecord};
pub use extraction::{AliasTable, ExtractionResult, Extractor, ParseStatus};
pub use persona::{AgentProfile, AgentRole, PersonaArchetype};

/// Engine version recorded in run manifests.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
