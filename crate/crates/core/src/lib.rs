pub mod autodiff;
pub mod config;
pub mod nn;
pub mod rng;
pub mod scenario;
pub mod util;
