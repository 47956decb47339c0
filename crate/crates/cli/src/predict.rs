//! Forward prediction with posterior samples on a held-out scenario.

use std::path::Path;

use anyhow::{bail, Result};
use hamgp::basis::BasisExpansion;
use hamgp::hamiltonian::{
    predict_gradient, predict_hamiltonian, symplectic_euler_step, GpParams, StructureMatrices,
};
use hamgp::simulate::{simulate_truth, ScenarioConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::*;
use crate::config::{input_settles_at, ExperimentConfig};
use crate::flowmap::MeanModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedTrajectory {
    /// `mean`, `sample-<iteration>` or `truth`.
    pub label: String,
    pub states: Vec<[f64; 2]>,
    /// `Ĥ(x_t)` for learned models, `H(x_t)` for the truth.
    pub energy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyCheck {
    pub label: String,
    /// Largest `E(x_{t+1}) − E(x_t)` over steps where the input is zero.
    pub max_energy_increase: f64,
    pub monotone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub scenario: ScenarioConfig,
    /// First step from which the input stays at zero.
    pub input_settles_at: Option<usize>,
    pub energy_tolerance: f64,
    pub sample_iterations: Vec<usize>,
    pub energy_checks: Vec<EnergyCheck>,
    /// RMSE of `(q, p)` of the mean model against the true trajectory.
    pub mean_state_rmse: f64,
    #[serde(skip)]
    pub trajectories: Vec<PredictedTrajectory>,
}

pub fn simulate_model(
    label: String,
    expansion: &BasisExpansion,
    params: &GpParams,
    matrices: &StructureMatrices,
    scenario: &ScenarioConfig,
) -> Result<PredictedTrajectory> {
    let inputs = scenario.inputs();
    let mut x = scenario.initial_state.to_vec();
    let mut states = vec![scenario.initial_state];
    let mut energy = vec![predict_hamiltonian(expansion, params, &x)?];
    for u in &inputs[..inputs.len() - 1] {
        x = symplectic_euler_step(
            |s| predict_gradient(expansion, params, s),
            matrices,
            &x,
            &[*u],
            scenario.delta,
        )?;
        states.push([x[0], x[1]]);
        energy.push(predict_hamiltonian(expansion, params, &x)?);
    }
    Ok(PredictedTrajectory {
        label,
        states,
        energy,
    })
}

fn energy_check(t: &PredictedTrajectory, settle: Option<usize>, tol: f64) -> EnergyCheck {
    let max = settle
        .map(|s| {
            t.energy[s..]
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .unwrap_or(f64::NEG_INFINITY);
    EnergyCheck {
        label: t.label.clone(),
        max_energy_increase: max,
        monotone: !(max > tol),
    }
}

/// `predict`: the mean model plus `samples` randomly chosen retained draws.
pub fn predict(
    config: &ExperimentConfig,
    chain_path: &Path,
    scenario: &ScenarioConfig,
    samples: usize,
    out_dir: &Path,
) -> Result<PredictionReport> {
    scenario.validate()?;
    let chain = read_chain(chain_path)?;
    let kept = retained(&chain, config.sampler.burn_in);
    if kept.len() < samples {
        bail!(
            "need {samples} retained records for prediction, the chain has {} after burn-in {}",
            kept.len(),
            config.sampler.burn_in
        );
    }
    let expansion = config.basis.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.prediction.seed);
    let mut picks = rand::seq::index::sample(&mut rng, kept.len(), samples).into_vec();
    picks.sort_unstable();

    let mean = MeanModel::from_records(&kept)?;
    let mut trajectories = vec![simulate_model(
        "mean".into(),
        &expansion,
        &mean.params()?,
        &mean.matrices(&config.structure)?,
        scenario,
    )?];
    for &i in &picks {
        let r = kept[i];
        let m = config.structure.matrices_with(&r.structural)?;
        trajectories.push(simulate_model(
            format!("sample-{}", r.iteration),
            &expansion,
            &r.params,
            &m,
            scenario,
        )?);
    }
    let truth_states = simulate_truth(
        &config.truth,
        scenario.initial_state,
        &scenario.inputs(),
        scenario.delta,
    )?;
    let truth = PredictedTrajectory {
        label: "truth".into(),
        energy: truth_states
            .iter()
            .map(|x| config.truth.hamiltonian(x))
            .collect(),
        states: truth_states,
    };
    let mean_state_rmse = {
        let m = &trajectories[0].states;
        let sq: f64 = m
            .iter()
            .zip(&truth.states)
            .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .sum();
        (sq / m.len() as f64).sqrt()
    };
    trajectories.push(truth);

    let settle = input_settles_at(&scenario.input, scenario.steps, scenario.delta);
    let tol = config.prediction.energy_tolerance;
    let report = PredictionReport {
        scenario: scenario.clone(),
        input_settles_at: settle,
        energy_tolerance: tol,
        sample_iterations: picks.iter().map(|&i| kept[i].iteration).collect(),
        energy_checks: trajectories
            .iter()
            .map(|t| energy_check(t, settle, tol))
            .collect(),
        mean_state_rmse,
        trajectories,
    };

    std::fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join(PREDICTION_FILE))?;
    w.write_record(["model", "step", "time_s", "u", "q", "p", "energy"])?;
    let inputs = scenario.inputs();
    for t in &report.trajectories {
        for (k, (x, e)) in t.states.iter().zip(&t.energy).enumerate() {
            w.write_record([
                t.label.clone(),
                k.to_string(),
                (k as f64 * scenario.delta).to_string(),
                inputs[k].to_string(),
                x[0].to_string(),
                x[1].to_string(),
                e.to_string(),
            ])?;
        }
    }
    w.flush()?;
    write_json(&out_dir.join(PREDICTION_REPORT_FILE), &report)?;
    Ok(report)
}
