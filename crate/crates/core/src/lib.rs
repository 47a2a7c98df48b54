pub mod config;
pub mod error;
pub mod library;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod probes;
pub mod scoring;
pub mod cost;
pub mod search;
pub mod fp8;
pub mod kvquant;
pub mod metrics;
pub mod pipeline;
