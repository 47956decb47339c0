//! Fixtures shared by the benchmarks: the oscillator learning problem at a
//! chosen size.

use std::collections::BTreeMap;

use hamgp::basis::{BasisExpansion, DomainBox, KernelHyperparams, SymmetryMode};
use hamgp::learn::{HyperPrior, LearningProblem, NoisePrior, SamplerSettings, ScalarPrior};
use hamgp::simulate::{generate_data, OscillatorTruth, ScenarioConfig};
use hamgp::smc::Gaussian;
use hamgp::SystemStructure;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Input-state oscillator data with `steps` transitions and an
/// unconstrained basis of `functions` terms on `[-8, 8]²`.
pub fn oscillator_problem(steps: usize, functions: usize) -> LearningProblem {
    let scenario = ScenarioConfig {
        steps,
        ..ScenarioConfig::training()
    };
    let data = generate_data(
        &scenario,
        &OscillatorTruth::default(),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .expect("simulated data");
    LearningProblem {
        expansion: BasisExpansion::build(
            DomainBox::new(vec![8.0, 8.0]).unwrap(),
            functions,
            12,
            SymmetryMode::None,
        )
        .expect("basis"),
        structure: SystemStructure::oscillator(0.5),
        noise: scenario.noise_spec().unwrap(),
        noise_prior: NoisePrior {
            psi: 100.0,
            nu: 400.0,
        },
        hyper_prior: HyperPrior {
            signal_variance: ScalarPrior::log_normal(0.0, 3.0),
            lengthscale: ScalarPrior::log_normal(0.0, 3.0),
            structural: BTreeMap::from([("d".to_string(), ScalarPrior::log_normal(-2.0, 2.0))]),
        },
        initial_kernel: KernelHyperparams::new(1.0, 1.5).unwrap(),
        initial_state: Gaussian::new(data.outputs[0].clone(), &(DMatrix::identity(2, 2) * 0.01))
            .unwrap(),
        data: data.observations().unwrap(),
        delta: scenario.delta,
    }
}

pub fn settings(iterations: usize, particles: usize) -> SamplerSettings {
    SamplerSettings {
        iterations,
        particles,
        burn_in: 0,
        ..SamplerSettings::default()
    }
}
