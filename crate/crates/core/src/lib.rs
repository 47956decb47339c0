//! Reduced-rank Hamiltonian Gaussian processes for learning dissipative,
//! input-driven dynamics from input-output data.
//!
//! The Hamiltonian is modelled as `Ĥ(x) = aᵀφ(x)` over Laplace eigenfunctions
//! on a box, and the state evolves as `ẋ = (J − R)∇Ĥ(x) + Gu`. Latent states,
//! basis weights, kernel hyperparameters and structural hyperparameters are
//! learned jointly with a particle Gibbs sampler:
//!
//! * [`basis`]: eigenfunction dictionary, Jacobians and spectral densities.
//! * [`hamiltonian`]: gradient model, system structure and integrators.
//! * [`smc`]: conditional SMC with optional ancestor sampling.
//! * [`learn`]: conjugate NIG updates, Metropolis-within-Gibbs, the outer loop.
//! * [`simulate`]: the non-harmonic oscillator used as ground truth.

pub mod basis;
pub mod error;
pub mod hamiltonian;
pub mod learn;
pub mod linalg;
pub mod simulate;
pub mod smc;

pub use basis::{BasisExpansion, DomainBox, KernelHyperparams, SymmetryMode};
pub use error::{Error, Result};
pub use hamiltonian::{GpParams, NoiseSpec, SystemStructure};
pub use learn::{ChainSample, HyperPrior, NigParams, SuffStats};
pub use smc::LatentTrajectory;
