pub mod analysis;
pub mod bc;
pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod geometry;
pub mod knn;
pub mod policy;
pub mod sim;

pub use error::{Error, Result};
