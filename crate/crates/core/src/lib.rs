pub mod curriculum;
pub mod diagdata;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod repr;
pub mod rng;
pub mod sampler;
pub mod tensor;
