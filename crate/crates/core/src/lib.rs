pub mod error;
pub mod linalg;
pub mod pinv;
pub mod model;
pub mod rng;
pub mod export;
pub mod sde;
pub mod filter;
pub mod measure;
pub mod stats;
pub mod kalman;
pub mod gridpde;
pub mod duality;
