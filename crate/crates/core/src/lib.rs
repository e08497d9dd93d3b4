//! Personalized retrieval-augmented generation with explicit reasoning.
//!
//! The crate covers the whole loop at desk scale: user-profile corpora and
//! retrieval, ROUGE/BLEU metrics, the composite reward over correctness,
//! format and personalization, a contrastively trained personalization scorer, a
//! small trainable policy, and group-relative policy optimization.

pub mod cli;
pub mod corpus;
pub mod generate;
pub mod grpo;
pub mod hashing;
pub mod metrics;
pub mod retrieval;
pub mod textproc;
pub mod policy;
pub mod prm;
pub mod reward;
mod random;
