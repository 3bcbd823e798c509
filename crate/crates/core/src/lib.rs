//! Knowledge-augmented LLM risk investigation.
//!
//! A case is serialized into a Markdown prompt, augmented with glossary
//! terms from the knowledge base, and analysed by a model into risk claims.
//! The reflect-and-refine pass fact-checks those claims against the case
//! data, then checks the survivors against business logic and risk-pattern
//! knowledge. Expert reviews feed an annotation queue whose records become
//! SFT and DPO training rows, and an evaluation harness scores the output.

pub mod case_model;
pub mod engine;
pub mod eval;
pub mod extraction;
pub mod flywheel;
pub mod gateway;
pub mod jsonl;
pub mod kb;
pub mod pipeline;
pub mod prompts;
pub mod rnr;
pub mod text;
