//! Detection-to-generation recognition pipeline.

pub mod detect;
pub mod eval;
pub mod generator;
pub mod hiercodec;
pub mod nn;
pub mod scenegen;
pub mod tensor;
pub mod vision;
