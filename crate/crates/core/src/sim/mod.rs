//! Synthetic data generation and the validation harness.

mod generator;
mod validation;

pub use generator::{generate_superpoll, GeneratorSpec, Superpoll, TruthKind, COPART, DIVISION, GEOGRAPHY};
pub use validation::{
    estimate, run_validation, EstimatorSpec, Failure, MaeRecord, Method, SummaryRow, ValidationPlan, ValidationReport,
    COPART_FORMULA, DEFAULT_FORMULA,
};
