//! Bilingual sentence-embedding toolkit.
//!
//! Trains a small multi-task dual encoder on recruitment-style text (title
//! translation ranking, description/title matching, multi-label field
//! classification) and evaluates any embedding source for retrieval quality
//! and language bias (LBKL and top-k language histograms).

pub mod bias;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod jsonl;
pub mod numcore;
pub mod trainer;

pub use error::{Error, Result};
