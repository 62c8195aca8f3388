pub mod config;
pub mod error;
pub mod heads;
pub mod io;
pub mod matching;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod pseudo_labels;
pub mod retrieval;
pub mod rng;
pub mod text_table;
pub mod training;

pub use error::{Error, Result};
