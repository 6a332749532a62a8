//! Configuration, synthetic corpus, experiment pipelines and reports.

pub mod config;
pub mod corpus;
pub mod experiments;
pub mod report;
