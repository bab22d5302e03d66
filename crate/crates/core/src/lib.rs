//! kropforge: a red-team compiler and verification harness for
//! reference-chain prompt obfuscation.
//!
//! The crate turns an attack payload into a *chain plan*: an ordered program
//! of cultural-reference lookups ("gadgets") and string transforms whose
//! execution reconstructs the payload, while the rendered prompt never
//! contains the payload itself. A deterministic knowledge oracle stands in
//! for the model's background knowledge, so every chain can be verified
//! offline:
//!
//! * [`knowledge_base`] — gadget storage and the deterministic clue oracle
//! * [`filters`] — the defensive phrase filters the chains must evade,
//!   including a separator-stripping reassembly detector
//! * [`segmentation`] — splits a payload into safe literals and blanks
//! * [`chain`] — chain plan types and the plan file format
//! * [`compiler`] — builds and validates chain plans against a filter suite
//! * [`render`] — turns plans into prompt text (numbered steps, fill-in
//!   game, inline) and produces the detectable baseline prompts
//! * [`resolver`] — executes a plan and checks payload reconstruction
//! * [`sql_range`] — a vulnerable SQL question-answering target for
//!   end-to-end injection demos
//! * [`harness`] — campaign orchestration, reports, and an optional
//!   live-endpoint replay adapter
//! * [`fixtures`] — the embedded demo knowledge base, filter suite, and
//!   Chinook-style schema

pub mod chain;
pub mod compiler;
pub mod filters;
pub mod fixtures;
pub mod harness;
pub mod knowledge_base;
pub mod render;
pub mod resolver;
pub mod segmentation;
pub mod sql_range;

pub use chain::{ChainPlan, ChainStep, Directive, StepAction, TemplateSource, Transform};
pub use compiler::{build_bobby_chain, compile_chain, validate_plan, CompileStrategy};
pub use filters::{
    filter_check, normalize_reassembled, run_filter_suite, FilterLexicon, ForbiddenPattern,
    MatchMode, Verdict,
};
pub use knowledge_base::{Gadget, GadgetCategory, KnowledgeBase, Resolution};
pub use render::{baseline_assembly, baseline_concat, render, PromptStyle, RenderedPrompt};
pub use resolver::{reconstruction_check, resolve, MatchPolicy, ResolutionResult};
pub use segmentation::{segment_payload, Payload, SegmentedPayload};
pub use sql_range::{GuardedSqlApp, SqlDatabase, SqlStatement};
