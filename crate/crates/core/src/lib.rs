pub mod audio;
pub mod augment;
pub mod config;
pub mod features;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pooling;
