//! Approximate MCMC error calculus: ergodic-average bounds for exact and
//! perturbed uniformly ergodic chains, the budget-optimal approximation
//! error, exact finite-chain witnesses, three approximate samplers and
//! empirical diagnostics.

mod budget;
pub mod bounds;
pub mod distributions;
pub mod compminimax;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod finite_chain;
pub mod gp;
pub mod io;
pub mod logistic;
pub mod mixture;
pub mod numeric;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
pub use par::Exec;
pub use rng::SeededRng;
