pub mod aggregation;
pub mod attacks;
pub mod config;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod nets;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod training;
