//! Set-prediction matching between head outputs and target categories.

mod hungarian;
mod loss;

pub use hungarian::{hungarian_assign, Assignment};
pub use loss::*;
