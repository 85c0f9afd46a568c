pub mod baselines;
pub mod constrained;
pub mod data;
pub mod design;
pub mod error;
pub mod formula;
pub mod model;
pub mod par;
pub mod poststrat;
pub mod sim;
pub mod vi;

pub use error::{Error, ErrorClass, Result};
