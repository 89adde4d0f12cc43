pub mod autodiff;
pub mod chem;
pub mod dataset;
pub mod encoder;
pub mod graph;
pub mod imbalance;
pub mod metrics;
pub mod pipeline;
