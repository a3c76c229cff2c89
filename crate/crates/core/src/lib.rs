//! Simulated serverless training: a function platform, object and parameter
//! stores, gradient synchronization, a BSP trainer, a Bayesian configuration
//! optimizer and the scheduler that ties them together.

pub mod experiments;
pub mod optimizer;
pub mod platform;
pub mod scheduler;
pub mod storage;
pub mod sync;
pub mod trainer;
