pub mod data;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod simulator;
pub mod tensor;
