//! Builds a CWE-labeled smart contract vulnerability dataset from audit
//! reports: chunking, LLM extraction, hierarchical classification, source
//! retrieval and analysis.

pub mod analysis;
pub mod classifier;
pub mod extractor;
pub mod fetcher;
pub mod ingest;
pub mod llm;
pub mod parallel;
pub mod pipeline;
pub mod prompts;
pub mod taxonomy;
