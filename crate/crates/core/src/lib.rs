//! Training-free video anomaly detection.
//!
//! Frames sampled from a video are captioned, the captions are cleaned by
//! cross-modal similarity, an LLM summarizes each temporal window and scores
//! it, and the scores are refined over semantically similar windows.

pub mod backends;
pub mod cache;
pub mod config;
pub mod embfile;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod baselines;
pub mod cleaning;
pub mod evaluation;
pub mod fixture;
pub mod refinement;
pub mod scoring;
pub mod summary;
pub mod sweep;
