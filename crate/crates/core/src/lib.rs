pub mod annotation;
pub mod corpus;
pub mod exemplar;
pub mod llm;
pub mod metrics;
pub mod prompt;
pub mod report;
pub mod runner;
pub mod taxonomy;
