//! The particle Gibbs outer loop.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::hyper::{
    kernel_log_target, mh_step_kernel_hypers, mh_step_slot, mh_step_slot_joint, weight_prior,
    HyperPrior, NoisePrior, StructuralContext, StructuralProposal,
};
use super::nig::{accumulate_stats, posterior_update, sample_nig, NigParams};
use crate::basis::{BasisExpansion, KernelHyperparams};
use crate::error::{Error, Result};
use crate::hamiltonian::{GpParams, NoiseSpec, StructureMatrices, SystemStructure};
use crate::smc::{csmc_sweep, CsmcOptions, Gaussian, LatentTrajectory, Observations, SweepOutput};

/// The model, priors and data for one learning run.
#[derive(Clone, Debug)]
pub struct LearningProblem {
    pub expansion: BasisExpansion,
    /// Matrix patterns; the bound hyperparameters are the initial values.
    pub structure: SystemStructure,
    pub noise: NoiseSpec,
    pub noise_prior: NoisePrior,
    pub hyper_prior: HyperPrior,
    pub initial_kernel: KernelHyperparams,
    /// `p(x₀)`.
    pub initial_state: Gaussian,
    pub data: Observations,
    pub delta: f64,
}

impl LearningProblem {
    pub fn validate(&self) -> Result<()> {
        let n = self.expansion.state_dim();
        self.structure.validate()?;
        self.hyper_prior.validate(&self.structure)?;
        if self.structure.state_dim() != n
            || self.noise.process_cov().nrows() != n
            || self.initial_state.dim() != n
        {
            return Err(Error::Config(format!(
                "state dimensions disagree: basis {n}, structure {}, process noise {}, initial state {}",
                self.structure.state_dim(),
                self.noise.process_cov().nrows(),
                self.initial_state.dim()
            )));
        }
        if self.data.len() < 2 {
            return Err(Error::Config("need at least two time steps of data".into()));
        }
        self.structure.matrices()?;
        Ok(())
    }
}

/// Sampler tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    pub iterations: usize,
    pub particles: usize,
    pub ancestor_sampling: bool,
    /// Iterations during which proposal scales adapt; they are frozen after.
    pub burn_in: usize,
    pub adapt: bool,
    pub adapt_interval: usize,
    /// Random-walk step sizes for `(σ_f², ℓ)` in the prior's coordinates.
    pub kernel_step: [f64; 2],
    pub structural_proposal: StructuralProposal,
    pub structural_step: f64,
    /// Adds the joint structural/gradient move after each structural step.
    pub joint_structural_move: bool,
    pub joint_step: f64,
    pub learn_kernel: bool,
    pub learn_structure: bool,
    pub initialization: Initialization,
    /// Retries of a sweep whose weights all vanished. Each retry inflates
    /// the measurement covariance by a further factor of ten.
    pub degenerate_retries: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            iterations: 2000,
            particles: 30,
            ancestor_sampling: true,
            burn_in: 500,
            adapt: true,
            adapt_interval: 50,
            kernel_step: [0.05, 0.05],
            structural_proposal: StructuralProposal::Laplace,
            structural_step: 0.05,
            joint_structural_move: true,
            joint_step: 0.05,
            learn_kernel: true,
            learn_structure: true,
            initialization: Initialization::FiniteDifference,
            degenerate_retries: 3,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::Config(format!(
                "need at least 2 particles, got {}",
                self.particles
            )));
        }
        if self.adapt && self.adapt_interval == 0 {
            return Err(Error::Config("adapt_interval must be positive".into()));
        }
        if self
            .kernel_step
            .iter()
            .chain([&self.structural_step, &self.joint_step])
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return Err(Error::Config(
                "proposal step sizes must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-iteration diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub mean_ess: f64,
    pub min_ess: f64,
    pub reference_ancestor_changes: usize,
    pub out_of_domain: usize,
    pub degenerate_retries: usize,
    /// Kernel log target `log n(η) − log n(η⁺) + log p(ϑ_K)` at the new value.
    pub kernel_log_target: f64,
    /// Latent-state transition log likelihood at the new `ϑ_S`.
    pub transition_log_likelihood: f64,
    pub measurement_log_likelihood: f64,
}

/// One recorded state `(z[k], θ[k], ϑ[k])` of the chain.
#[derive(Clone, Debug)]
pub struct ChainSample {
    pub iteration: usize,
    pub params: GpParams,
    pub kernel: KernelHyperparams,
    pub structural: BTreeMap<String, f64>,
    pub trajectory: LatentTrajectory,
    /// Posterior `η⁺` the weights were drawn from.
    pub posterior: NigParams,
    pub kernel_accepted: bool,
    pub structural_accepted: BTreeMap<String, bool>,
    pub joint_accepted: BTreeMap<String, bool>,
    pub diagnostics: IterationDiagnostics,
}

/// Observation points inside one iteration, in execution order.
#[derive(Debug)]
pub enum GibbsEvent<'a> {
    Sweep {
        iteration: usize,
        trajectory: &'a LatentTrajectory,
    },
    KernelStep {
        iteration: usize,
        trajectory: &'a LatentTrajectory,
        value: &'a KernelHyperparams,
    },
    StructuralStep {
        iteration: usize,
        trajectory: &'a LatentTrajectory,
        value: &'a BTreeMap<String, f64>,
    },
    ParameterDraw {
        iteration: usize,
        trajectory: &'a LatentTrajectory,
        kernel: &'a KernelHyperparams,
        structural: &'a BTreeMap<String, f64>,
        params: &'a GpParams,
    },
}

pub trait GibbsProbe {
    fn observe(&mut self, event: GibbsEvent<'_>);
}

impl GibbsProbe for () {
    fn observe(&mut self, _: GibbsEvent<'_>) {}
}

/// Whole-run summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: usize,
    pub kernel_acceptance: f64,
    pub structural_acceptance: BTreeMap<String, f64>,
    pub joint_acceptance: BTreeMap<String, f64>,
    pub final_kernel_step: [f64; 2],
    pub final_structural_step: BTreeMap<String, f64>,
    pub final_joint_step: BTreeMap<String, f64>,
    pub degenerate_retries: usize,
    pub out_of_domain: usize,
}

/// How the latent trajectory `z[0]` is initialised. Measured state
/// components always start at their measured values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    /// An unmeasured momentum `p_i` whose position `q_i` is measured starts
    /// at a smoothed derivative of `q_i`; other unmeasured components start
    /// at zero. Gradients then solve the transition mean exactly,
    /// `h_t = (J − R)⁻¹((x_{t+1} − x_t)/δ − G u_t)`, so the initial path is
    /// consistent with the model's transitions. Falls back to zero
    /// gradients if `J − R` is singular.
    #[default]
    FiniteDifference,
    /// Unmeasured components and all gradients start at zero.
    Zero,
}

/// Half-width of the local linear fit used to differentiate positions.
const SLOPE_HALF_WIDTH: usize = 5;

/// Slope of a local least-squares line through `values`, per unit time.
fn smoothed_slope(values: &[f64], delta: f64) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(SLOPE_HALF_WIDTH);
            let hi = (t + SLOPE_HALF_WIDTH).min(n - 1);
            let centre = (lo + hi) as f64 / 2.0;
            let (mut num, mut den) = (0.0, 0.0);
            for (j, v) in values.iter().enumerate().take(hi + 1).skip(lo) {
                let dj = j as f64 - centre;
                num += dj * v;
                den += dj * dj;
            }
            if den > 0.0 {
                num / (den * delta)
            } else {
                0.0
            }
        })
        .collect()
}

/// Latent trajectory used to start the chain.
pub fn initial_trajectory(
    data: &Observations,
    noise: &NoiseSpec,
    matrices: &StructureMatrices,
    delta: f64,
    mode: Initialization,
) -> LatentTrajectory {
    let n_x = matrices.state_dim();
    let mut states: Vec<Vec<f64>> = data
        .outputs
        .iter()
        .map(|y| {
            let mut x = vec![0.0; n_x];
            for (&c, v) in noise.output_components().iter().zip(y) {
                x[c] = *v;
            }
            x
        })
        .collect();
    let mut gradients = vec![vec![0.0; n_x]; states.len()];
    if mode == Initialization::FiniteDifference && n_x.is_multiple_of(2) && states.len() > 1 {
        let measured = noise.output_components();
        let nq = n_x / 2;
        for i in nq..n_x {
            if !measured.contains(&i) && measured.contains(&(i - nq)) {
                let q: Vec<f64> = states.iter().map(|x| x[i - nq]).collect();
                for (x, v) in states.iter_mut().zip(smoothed_slope(&q, delta)) {
                    x[i] = v;
                }
            }
        }
    }
    if mode == Initialization::FiniteDifference {
        if let Some(lu) = Some(matrices.jr.clone().lu()).filter(|lu| lu.determinant() != 0.0) {
            for t in 0..states.len().saturating_sub(1) {
                let rate = DVector::from_iterator(
                    n_x,
                    (0..n_x).map(|i| (states[t + 1][i] - states[t][i]) / delta),
                );
                let rhs = rate - &matrices.g * DVector::from_column_slice(&data.inputs[t]);
                if let Some(h) = lu.solve(&rhs) {
                    gradients[t] = h.as_slice().to_vec();
                }
            }
            if states.len() > 1 {
                gradients[states.len() - 1] = gradients[states.len() - 2].clone();
            }
        }
    }
    LatentTrajectory::new(states, gradients).expect("consistent initial trajectory")
}

struct Adapter {
    interval: usize,
    kernel: (usize, usize),
    slots: BTreeMap<String, (usize, usize)>,
    joint: BTreeMap<String, (usize, usize)>,
}

impl Adapter {
    /// Nudges step sizes toward a 20-40% acceptance rate.
    fn rescale(steps: &mut [f64], window: &mut (usize, usize)) {
        if window.1 == 0 {
            return;
        }
        let rate = window.0 as f64 / window.1 as f64;
        let factor = if rate < 0.2 {
            0.7
        } else if rate > 0.4 {
            1.3
        } else {
            1.0
        };
        steps.iter_mut().for_each(|s| *s *= factor);
        *window = (0, 0);
    }
}

struct Chain<'p> {
    problem: &'p LearningProblem,
    settings: &'p SamplerSettings,
    kernel: KernelHyperparams,
    structural: BTreeMap<String, f64>,
    kernel_step: [f64; 2],
    structural_step: BTreeMap<String, f64>,
    joint_step: BTreeMap<String, f64>,
    kernel_accepts: usize,
    structural_accepts: BTreeMap<String, usize>,
    joint_accepts: BTreeMap<String, usize>,
}

struct HyperUpdate {
    kernel_accepted: bool,
    structural_accepted: BTreeMap<String, bool>,
    joint_accepted: BTreeMap<String, bool>,
    kernel_log_target: f64,
    transition_log_likelihood: f64,
    posterior: NigParams,
    params: GpParams,
}

impl Chain<'_> {
    /// Kernel step, structural step and weight draw given a trajectory.
    /// May replace `trajectory` when a joint structural move is accepted.
    fn update_given<R: Rng + ?Sized>(
        &mut self,
        iteration: usize,
        trajectory: &mut LatentTrajectory,
        probe: &mut dyn GibbsProbe,
        rng: &mut R,
    ) -> Result<HyperUpdate> {
        let p = self.problem;
        let stats = accumulate_stats(trajectory, &p.expansion)?;

        let mut kernel_accepted = false;
        if self.settings.learn_kernel {
            let out = mh_step_kernel_hypers(
                &self.kernel,
                &stats,
                &p.expansion,
                p.noise_prior,
                &p.hyper_prior,
                self.kernel_step,
                rng,
            )?;
            kernel_accepted = out.accepted;
            self.kernel = out.value;
        }
        probe.observe(GibbsEvent::KernelStep {
            iteration,
            trajectory,
            value: &self.kernel,
        });

        let mut structural_accepted = BTreeMap::new();
        let mut joint_accepted = BTreeMap::new();
        if self.settings.learn_structure {
            for slot in p.structure.slot_names() {
                let context = StructuralContext {
                    structure: &p.structure,
                    trajectory,
                    inputs: &p.data.inputs,
                    noise: &p.noise,
                    delta: p.delta,
                };
                let out = mh_step_slot(
                    &slot,
                    &self.structural,
                    &context,
                    &p.hyper_prior,
                    self.settings.structural_proposal,
                    self.structural_step[&slot],
                    rng,
                )?;
                structural_accepted.insert(slot.clone(), out.accepted);
                self.structural = out.value;
                if self.settings.joint_structural_move {
                    let (out, moved) = mh_step_slot_joint(
                        &slot,
                        &self.structural,
                        &context,
                        &p.expansion,
                        &self.kernel,
                        p.noise_prior,
                        &p.hyper_prior,
                        self.joint_step[&slot],
                        rng,
                    )?;
                    joint_accepted.insert(slot.clone(), out.accepted);
                    self.structural = out.value;
                    if let Some(m) = moved {
                        *trajectory = m;
                    }
                }
            }
        }
        let trajectory: &LatentTrajectory = trajectory;
        let stats = if joint_accepted.values().any(|a| *a) {
            accumulate_stats(trajectory, &p.expansion)?
        } else {
            stats
        };
        probe.observe(GibbsEvent::StructuralStep {
            iteration,
            trajectory,
            value: &self.structural,
        });
        let context = StructuralContext {
            structure: &p.structure,
            trajectory,
            inputs: &p.data.inputs,
            noise: &p.noise,
            delta: p.delta,
        };

        let eta = weight_prior(&p.expansion, &self.kernel, p.noise_prior)?;
        let posterior = posterior_update(&eta, &stats)?;
        let params = sample_nig(&posterior, rng)?;
        probe.observe(GibbsEvent::ParameterDraw {
            iteration,
            trajectory,
            kernel: &self.kernel,
            structural: &self.structural,
            params: &params,
        });
        Ok(HyperUpdate {
            kernel_accepted,
            structural_accepted,
            joint_accepted,
            kernel_log_target: kernel_log_target(
                &p.expansion,
                &stats,
                &self.kernel,
                p.noise_prior,
                &p.hyper_prior,
            )?,
            transition_log_likelihood: context.log_likelihood(&self.structural)?,
            posterior,
            params,
        })
    }

    fn sweep<R: Rng + ?Sized>(
        &self,
        reference: &LatentTrajectory,
        params: &GpParams,
        rng: &mut R,
    ) -> Result<(SweepOutput, usize)> {
        let p = self.problem;
        let matrices = p.structure.matrices_with(&self.structural)?;
        let options = CsmcOptions {
            particles: self.settings.particles,
            ancestor_sampling: self.settings.ancestor_sampling,
        };
        let mut noise = p.noise.clone();
        let mut attempt = 0;
        loop {
            match csmc_sweep(
                &p.data,
                reference,
                params,
                &matrices,
                &noise,
                &p.expansion,
                &p.initial_state,
                options,
                p.delta,
                rng,
            ) {
                Ok(out) => return Ok((out, attempt)),
                Err(Error::DegenerateSweep { .. })
                    if attempt < self.settings.degenerate_retries =>
                {
                    attempt += 1;
                    noise = NoiseSpec::new(
                        p.noise.process_cov().clone(),
                        p.noise.measurement_cov() * 10f64.powi(attempt as i32),
                        p.noise.output_components().to_vec(),
                    )?;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn measurement_log_likelihood(
    problem: &LearningProblem,
    trajectory: &LatentTrajectory,
) -> Result<f64> {
    let g = Gaussian::new(
        vec![0.0; problem.noise.output_dim()],
        problem.noise.measurement_cov(),
    )?;
    Ok(trajectory
        .states
        .iter()
        .zip(&problem.data.outputs)
        .map(|(x, y)| {
            let diff: Vec<f64> = problem
                .noise
                .output_components()
                .iter()
                .zip(y)
                .map(|(&c, v)| v - x[c])
                .collect();
            g.log_pdf_centered(&diff)
        })
        .sum())
}

/// Runs `settings.iterations` particle Gibbs iterations, handing each sample to
/// `sink` as soon as it is produced.
pub fn run_particle_gibbs<R, F>(
    problem: &LearningProblem,
    settings: &SamplerSettings,
    rng: &mut R,
    probe: &mut dyn GibbsProbe,
    mut sink: F,
) -> Result<RunSummary>
where
    R: Rng + ?Sized,
    F: FnMut(ChainSample) -> Result<()>,
{
    problem.validate()?;
    settings.validate()?;
    let slots = problem.structure.slot_names();
    let mut chain = Chain {
        problem,
        settings,
        kernel: problem.initial_kernel,
        structural: problem.structure.hypers.clone(),
        kernel_step: settings.kernel_step,
        structural_step: slots
            .iter()
            .map(|s| (s.clone(), settings.structural_step))
            .collect(),
        joint_step: slots
            .iter()
            .map(|s| (s.clone(), settings.joint_step))
            .collect(),
        kernel_accepts: 0,
        structural_accepts: slots.iter().map(|s| (s.clone(), 0)).collect(),
        joint_accepts: slots.iter().map(|s| (s.clone(), 0)).collect(),
    };
    let mut adapter = Adapter {
        interval: settings.adapt_interval,
        kernel: (0, 0),
        slots: slots.iter().map(|s| (s.clone(), (0, 0))).collect(),
        joint: slots.iter().map(|s| (s.clone(), (0, 0))).collect(),
    };

    let mut trajectory = initial_trajectory(
        &problem.data,
        &problem.noise,
        &problem.structure.matrices()?,
        problem.delta,
        settings.initialization,
    );
    let init = chain
        .update_given(0, &mut trajectory, probe, rng)
        .map_err(|e| Error::Iteration {
            iteration: 0,
            source: Box::new(e),
        })?;
    let mut params = init.params;
    let mut summary = RunSummary::default();

    for k in 1..=settings.iterations {
        let wrap = |e| Error::Iteration {
            iteration: k,
            source: Box::new(e),
        };
        let (sweep, retries) = chain.sweep(&trajectory, &params, rng).map_err(wrap)?;
        trajectory = sweep.trajectory;
        probe.observe(GibbsEvent::Sweep {
            iteration: k,
            trajectory: &trajectory,
        });
        let update = chain
            .update_given(k, &mut trajectory, probe, rng)
            .map_err(wrap)?;
        params = update.params.clone();

        chain.kernel_accepts += update.kernel_accepted as usize;
        adapter.kernel.0 += update.kernel_accepted as usize;
        adapter.kernel.1 += 1;
        for (s, a) in &update.structural_accepted {
            *chain.structural_accepts.get_mut(s).expect("known slot") += *a as usize;
            let w = adapter.slots.get_mut(s).expect("known slot");
            w.0 += *a as usize;
            w.1 += 1;
        }
        for (s, a) in &update.joint_accepted {
            *chain.joint_accepts.get_mut(s).expect("known slot") += *a as usize;
            let w = adapter.joint.get_mut(s).expect("known slot");
            w.0 += *a as usize;
            w.1 += 1;
        }
        if settings.adapt && k <= settings.burn_in && k % adapter.interval == 0 {
            Adapter::rescale(&mut chain.kernel_step, &mut adapter.kernel);
            // the Laplace proposal only uses the step as its fallback scale
            let tune_slots = settings.structural_proposal == StructuralProposal::RandomWalk;
            for (s, w) in adapter.slots.iter_mut().filter(|_| tune_slots) {
                Adapter::rescale(
                    std::slice::from_mut(chain.structural_step.get_mut(s).expect("known slot")),
                    w,
                );
            }
            for (s, w) in adapter.joint.iter_mut() {
                Adapter::rescale(
                    std::slice::from_mut(chain.joint_step.get_mut(s).expect("known slot")),
                    w,
                );
            }
        }

        summary.degenerate_retries += retries;
        summary.out_of_domain += sweep.out_of_domain;
        let diagnostics = IterationDiagnostics {
            mean_ess: sweep.diagnostics.mean_ess(),
            min_ess: sweep.diagnostics.min_ess(),
            reference_ancestor_changes: sweep.diagnostics.reference_ancestor_changes,
            out_of_domain: sweep.out_of_domain,
            degenerate_retries: retries,
            kernel_log_target: update.kernel_log_target,
            transition_log_likelihood: update.transition_log_likelihood,
            measurement_log_likelihood: measurement_log_likelihood(problem, &trajectory)
                .map_err(wrap)?,
        };
        sink(ChainSample {
            iteration: k,
            params: update.params,
            kernel: chain.kernel,
            structural: chain.structural.clone(),
            trajectory: trajectory.clone(),
            posterior: update.posterior,
            kernel_accepted: update.kernel_accepted,
            structural_accepted: update.structural_accepted,
            joint_accepted: update.joint_accepted,
            diagnostics,
        })
        .map_err(wrap)?;
    }

    let n = settings.iterations.max(1) as f64;
    summary.iterations = settings.iterations;
    summary.kernel_acceptance = chain.kernel_accepts as f64 / n;
    summary.structural_acceptance = chain
        .structural_accepts
        .iter()
        .map(|(s, a)| (s.clone(), *a as f64 / n))
        .collect();
    summary.joint_acceptance = chain
        .joint_accepts
        .iter()
        .map(|(s, a)| (s.clone(), *a as f64 / n))
        .collect();
    summary.final_kernel_step = chain.kernel_step;
    summary.final_joint_step = chain.joint_step;
    summary.final_structural_step = chain.structural_step;
    Ok(summary)
}

/// Runs the sampler and keeps every sample in memory.
pub fn sample_chain<R: Rng + ?Sized>(
    problem: &LearningProblem,
    settings: &SamplerSettings,
    rng: &mut R,
) -> Result<(Vec<ChainSample>, RunSummary)> {
    let mut samples = Vec::with_capacity(settings.iterations);
    let summary = run_particle_gibbs(problem, settings, rng, &mut (), |s| {
        samples.push(s);
        Ok(())
    })?;
    Ok((samples, summary))
}
