//! Learns the damped oscillator from simulated data and prints flow-field
//! errors against the truth.
//!
//! `cargo run --release -p hamgp-core --example oscillator -- [iterations] [input_output]`

use std::collections::BTreeMap;

use hamgp::basis::{BasisExpansion, DomainBox, KernelHyperparams, SymmetryMode};
use hamgp::hamiltonian::{predict_gradient, GpParams};
use hamgp::learn::{
    sample_chain, HyperPrior, LearningProblem, NoisePrior, SamplerSettings, ScalarPrior,
};
use hamgp::simulate::{
    generate_data, true_gradient, MeasurementMode, OscillatorTruth, ScenarioConfig,
};
use hamgp::smc::Gaussian;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hamgp::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let io = args.get(2).is_some_and(|s| s == "input_output");
    let truth = OscillatorTruth::default();
    let mut scenario = ScenarioConfig::training();
    scenario.mode = if io {
        MeasurementMode::InputOutput
    } else {
        MeasurementMode::InputState
    };
    scenario.seed = std::env::var("DATA_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(scenario.seed);
    let data = generate_data(
        &scenario,
        &truth,
        &mut ChaCha8Rng::seed_from_u64(scenario.seed),
    )?;
    let (m, sym) = if io {
        (
            15,
            match std::env::var("SYM").as_deref() {
                Ok("anti") => SymmetryMode::AntiSymmetric,
                Ok("none") => SymmetryMode::None,
                _ => SymmetryMode::AllOddIndices,
            },
        )
    } else {
        (20, SymmetryMode::None)
    };
    let expansion = BasisExpansion::build(DomainBox::new(vec![8.0, 8.0])?, m, 12, sym)?;
    let mut x0 = vec![0.0; 2];
    for (&c, v) in scenario
        .mode
        .output_components()
        .iter()
        .zip(&data.outputs[0])
    {
        x0[c] = *v;
    }
    let problem = LearningProblem {
        expansion: expansion.clone(),
        structure: truth
            .structure()
            .with_hypers(BTreeMap::from([("d".to_string(), 0.5)])),
        noise: scenario.noise_spec()?,
        noise_prior: NoisePrior {
            psi: 100.0,
            nu: 400.0,
        },
        hyper_prior: HyperPrior {
            signal_variance: ScalarPrior::log_normal(0.0, 3.0),
            lengthscale: ScalarPrior::log_normal(0.0, 3.0),
            structural: BTreeMap::from([("d".to_string(), ScalarPrior::log_normal(-2.0, 2.0))]),
        },
        initial_kernel: KernelHyperparams::new(1.0, 1.5)?,
        initial_state: Gaussian::new(x0, &(DMatrix::identity(2, 2) * 0.01))?,
        data: data.observations()?,
        delta: scenario.delta,
    };
    let settings = SamplerSettings {
        iterations,
        burn_in: iterations * 3 / 4,
        ..SamplerSettings::default()
    };
    let start = std::time::Instant::now();
    let (chain, summary) = sample_chain(&problem, &settings, &mut ChaCha8Rng::seed_from_u64(7))?;
    println!("{:?} elapsed, {:#?}", start.elapsed(), summary);
    let kept = &chain[settings.burn_in..];
    let mut mean = vec![0.0; m];
    let mut ds: Vec<f64> = Vec::new();
    for s in kept {
        for (a, b) in mean.iter_mut().zip(&s.params.weights) {
            *a += b / kept.len() as f64;
        }
        ds.push(s.structural["d"]);
    }
    ds.sort_by(f64::total_cmp);
    let d_mean = ds.iter().sum::<f64>() / ds.len() as f64;
    let q = |p: f64| ds[((ds.len() - 1) as f64 * p).round() as usize];
    println!("d mean {d_mean:.4}, 5% {:.4}, 95% {:.4}", q(0.05), q(0.95));
    for s in chain.iter().step_by((iterations / 10).max(1)) {
        println!(
            "k={} σ²={:.3e} σf²={:.3} ℓ={:.3} d={:.4} ess={:.1}",
            s.iteration,
            s.params.noise_variance,
            s.kernel.signal_variance,
            s.kernel.lengthscale,
            s.structural["d"],
            s.diagnostics.mean_ess
        );
    }
    let params = GpParams::new(mean, 1.0)?;
    let est = truth
        .structure()
        .with_hypers(BTreeMap::from([("d".to_string(), d_mean)]))
        .matrices()?;
    let tm = truth.matrices();
    let (mut mag, mut ang, mut n) = (0.0, 0.0, 0);
    for i in 0..21 {
        for j in 0..21 {
            let x = [-2.5 + 0.25 * i as f64, -2.5 + 0.25 * j as f64];
            let v = tm.flow(&true_gradient(&x), &[0.0]);
            let vh = est.flow(&predict_gradient(&expansion, &params, &x)?, &[0.0]);
            let (nv, nh) = (v[0].hypot(v[1]), vh[0].hypot(vh[1]));
            mag += (nv - nh).powi(2);
            if nv > 1e-6 {
                let mut a = (vh[1].atan2(vh[0]) - v[1].atan2(v[0])).abs();
                if a > std::f64::consts::PI {
                    a = 2.0 * std::f64::consts::PI - a;
                }
                ang += a * a;
                n += 1;
            }
        }
    }
    println!(
        "magnitude RMSE {:.4}, angle RMSE {:.4}",
        (mag / 441.0).sqrt(),
        (ang / n as f64).sqrt()
    );
    Ok(())
}
