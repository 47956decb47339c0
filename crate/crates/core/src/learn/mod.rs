//! Posterior inference: conjugate weight updates, hyperparameter moves and
//! the particle Gibbs sampler that ties them to the latent-state sweep.

mod gibbs;
mod hyper;
mod nig;

pub use gibbs::{
    initial_trajectory, run_particle_gibbs, sample_chain, ChainSample, GibbsEvent, GibbsProbe,
    Initialization, IterationDiagnostics, LearningProblem, RunSummary, SamplerSettings,
};
pub use hyper::{
    kernel_log_target, mh_step_kernel_hypers, mh_step_slot, mh_step_slot_joint,
    mh_step_structural_hypers, weight_prior, Coordinate, HyperPrior, MhOutcome, NoisePrior,
    ScalarPrior, StructuralContext, StructuralProposal,
};
pub use nig::{
    accumulate_stats, log_evidence, log_normalizer, log_normalizer_quotient, params_from_stats,
    posterior_stats, posterior_update, sample_nig, NigParams, SuffStats,
};
