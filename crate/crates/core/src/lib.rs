pub mod base;
pub mod cli;
pub mod cones;
pub mod exterior;
pub mod linalg;
pub mod opcore;
pub mod perturb;
pub mod rng;
pub mod spectrum;
pub mod splitting;
