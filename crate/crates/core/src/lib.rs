pub mod cli;
pub mod error;
pub mod estimators;
pub mod factor_model;
pub mod matching;
mod matrix_serde;
pub mod nuclear_solver;
pub mod panel_data;
pub mod pipeline;
pub mod simulation;

pub use error::{Error, Module, Result};
