//! Coordinate-ascent variational inference for the Poisson mixed model.

mod elbo;
mod serialize;
mod solver;
mod state;

pub use serialize::{StateDocument, STATE_VERSION};
pub use solver::{
    compute_weights, fit, initial_state, Block, Convergence, PoissonWeights, PriorSpec, Solver, SolverConfig,
    StepOutcome,
};
pub use state::{ln_multi_gamma, FitStats, GammaFactor, GaussianFactor, InverseWishart, ReFactor, VariationalState};
