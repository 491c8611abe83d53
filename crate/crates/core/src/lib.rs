//! Measuring verbatim memorization of books in language-model generations.
//!
//! The pipeline runs bottom-up: [`corpus`] tokenizes and segments a book,
//! [`dataprep`] builds instruction prompts (and simulates memorizing models),
//! [`matcher`] finds maximal verbatim matches, [`coverage`] turns them into
//! the bmc@k coverage mask and span statistics, and [`attribution`],
//! [`agreement`] and [`provenance`] analyze the extracted spans.

pub mod agreement;
pub mod attribution;
pub mod corpus;
pub mod coverage;
pub mod dataprep;
pub mod error;
pub mod jsonl;
pub mod matcher;
pub mod provenance;
pub mod retry;
pub mod seed;

pub use error::{Error, Result};
