//! Independent references used to arbitrate correctness: the exact
//! linear-Gaussian posterior, the PCA + AR(1) baseline, and a
//! finite-difference gradient checker.

mod compare;
mod gradcheck;
mod instance;
mod lds;
mod linear;
#[cfg(test)]
mod tests;

pub use compare::{langevin_vs_kalman, CompareConfig, CompareReport};
pub use gradcheck::{fd_gradcheck, relative_error, GradcheckReport, REL_ERR_FLOOR};
pub use instance::{gradcheck_instance, random_instance, Instance};
pub use lds::{lds_fit, lds_synthesize, LdsModel};
pub use linear::{
    dense_posterior, kalman_smoother, stacked_design, LatentPosterior, LinearSSM, DENSE_LATENT_CAP,
};
