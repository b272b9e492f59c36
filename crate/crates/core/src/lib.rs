pub mod data;
pub mod error;
pub mod heterogeneity;
pub mod messenger;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod aggregation;
pub mod bench;
pub mod par;
pub mod privacy;
pub mod report;
pub mod config;
pub mod sim;
