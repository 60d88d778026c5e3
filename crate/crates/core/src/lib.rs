pub mod analysis;
pub mod candidates;
pub mod checkpoint;
pub mod collapse;
pub mod commands;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod io;
pub mod masking;
pub mod model;
pub mod network;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod retrain;
pub mod search;
pub mod search_space;
pub mod seeding;
pub mod supernet;

pub use error::{Error, Result};
