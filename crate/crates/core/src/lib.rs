//! Surgical skill assessment pipeline: trial ingestion, relative-motion
//! features, cross-validation folds, sequence models, training, streaming
//! inference and synthetic data.

pub mod features;
pub mod folds;
pub mod ingest;
pub mod matrix;
pub mod metrics;
pub mod models;
pub mod report;
pub mod stream;
pub mod synth;
pub mod trainer;

pub use matrix::Matrix;
