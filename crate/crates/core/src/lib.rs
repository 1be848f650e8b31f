//! Signal analysis, dataset curation, synthetic corpora and evaluation
//! metrics for multi-channel EEG artifact windows.

pub mod dataset;
pub mod signal;
pub mod metrics;
pub mod synth;
