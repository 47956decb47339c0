//! Ground truth for the damped non-harmonic oscillator
//! `H(q, p) = q²/2 + p²/2 + 2 cos q` and synthetic data generation.

use std::f64::consts::PI;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{symplectic_euler_step, NoiseSpec, StructureMatrices, SystemStructure};
use crate::smc::Observations;

/// The true system with damping coefficient `d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OscillatorTruth {
    pub damping: f64,
}

impl Default for OscillatorTruth {
    fn default() -> Self {
        Self { damping: 0.15 }
    }
}

impl OscillatorTruth {
    pub fn new(damping: f64) -> Result<Self> {
        if !(damping >= 0.0 && damping.is_finite()) {
            return Err(Error::Config(format!(
                "damping must be non-negative, got {damping}"
            )));
        }
        Ok(Self { damping })
    }

    pub fn hamiltonian(&self, x: &[f64]) -> f64 {
        let (q, p) = (x[0], x[1]);
        0.5 * q * q + 0.5 * p * p + 2.0 * q.cos()
    }

    pub fn structure(&self) -> SystemStructure {
        SystemStructure::oscillator(self.damping)
    }

    pub fn matrices(&self) -> StructureMatrices {
        self.structure()
            .matrices()
            .expect("oscillator structure is valid for d ≥ 0")
    }

    /// `(J − R)∇H(x) + Gu`.
    pub fn flow(&self, x: &[f64], u: f64) -> Vec<f64> {
        self.matrices().flow(&true_gradient(x), &[u])
    }
}

/// `∇H(q, p) = (q − 2 sin q, p)`.
pub fn true_gradient(x: &[f64]) -> Vec<f64> {
    vec![x[0] - 2.0 * x[0].sin(), x[1]]
}

/// One sinusoid `amplitude · sin(frequency · t + phase)`, frequency in rad/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

/// Declarative input signal, evaluated at continuous time `t` (seconds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSignal {
    Constant {
        value: f64,
    },
    /// `amplitude` on `[start, end)`, zero elsewhere.
    Pulse {
        amplitude: f64,
        start: f64,
        end: f64,
    },
    /// Pulses of length `width` repeating every `period`, from `start`.
    PulseTrain {
        amplitude: f64,
        period: f64,
        width: f64,
        #[serde(default)]
        start: f64,
    },
    Multisine {
        components: Vec<Sinusoid>,
    },
    /// Linear chirp from `f0` to `f1` Hz over `duration` seconds.
    Chirp {
        amplitude: f64,
        f0: f64,
        f1: f64,
        duration: f64,
    },
    /// Linear interpolation through `(t, u)` knots, held constant outside.
    PiecewiseLinear {
        points: Vec<(f64, f64)>,
    },
    /// `inner` on `[start, end)`, zero elsewhere.
    Windowed {
        inner: Box<InputSignal>,
        start: f64,
        end: f64,
    },
}

impl InputSignal {
    /// The default training excitation.
    pub fn default_training() -> Self {
        InputSignal::Multisine {
            components: vec![
                Sinusoid {
                    amplitude: 1.0,
                    frequency: 1.3,
                    phase: 0.0,
                },
                Sinusoid {
                    amplitude: 1.0,
                    frequency: 1.9,
                    phase: 0.5,
                },
            ],
        }
    }

    /// The default test excitation: a short push, then free decay.
    pub fn default_test() -> Self {
        InputSignal::Pulse {
            amplitude: 1.0,
            start: 0.0,
            end: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InputSignal::PulseTrain { period, width, .. } if !(*period > 0.0 && *width >= 0.0) => {
                Err(Error::Config(
                    "pulse train needs period > 0 and width ≥ 0".into(),
                ))
            }
            InputSignal::Chirp { duration, .. } if !(*duration > 0.0) => {
                Err(Error::Config("chirp duration must be positive".into()))
            }
            InputSignal::PiecewiseLinear { points } => {
                if points.is_empty() {
                    return Err(Error::Config(
                        "piecewise-linear input needs at least one point".into(),
                    ));
                }
                if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return Err(Error::Config(
                        "piecewise-linear knot times must increase".into(),
                    ));
                }
                Ok(())
            }
            InputSignal::Windowed { inner, .. } => inner.validate(),
            _ => Ok(()),
        }
    }

    /// `u(t)`.
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            InputSignal::Constant { value } => *value,
            InputSignal::Pulse {
                amplitude,
                start,
                end,
            } => {
                if t >= *start && t < *end {
                    *amplitude
                } else {
                    0.0
                }
            }
            InputSignal::PulseTrain {
                amplitude,
                period,
                width,
                start,
            } => {
                if t < *start {
                    return 0.0;
                }
                if (t - start).rem_euclid(*period) < *width {
                    *amplitude
                } else {
                    0.0
                }
            }
            InputSignal::Multisine { components } => components
                .iter()
                .map(|c| c.amplitude * (c.frequency * t + c.phase).sin())
                .sum(),
            InputSignal::Chirp {
                amplitude,
                f0,
                f1,
                duration,
            } => {
                let k = (f1 - f0) / duration;
                amplitude * (2.0 * PI * (f0 * t + 0.5 * k * t * t)).sin()
            }
            InputSignal::PiecewiseLinear { points } => {
                let first = points[0];
                let last = points[points.len() - 1];
                if t <= first.0 {
                    return first.1;
                }
                if t >= last.0 {
                    return last.1;
                }
                let i = points.partition_point(|p| p.0 <= t);
                let (a, b) = (points[i - 1], points[i]);
                a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
            }
            InputSignal::Windowed { inner, start, end } => {
                if t >= *start && t < *end {
                    inner.eval(t)
                } else {
                    0.0
                }
            }
        }
    }
}

/// Which state components are measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementMode {
    /// `y = q + e`.
    InputOutput,
    /// `y = (q, p) + e`.
    #[default]
    InputState,
}

impl MeasurementMode {
    pub fn output_components(self) -> Vec<usize> {
        match self {
            MeasurementMode::InputOutput => vec![0],
            MeasurementMode::InputState => vec![0, 1],
        }
    }
}

/// One simulation scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Number of transitions; the trajectory has `steps + 1` samples.
    pub steps: usize,
    #[serde(rename = "delta_s")]
    pub delta: f64,
    pub initial_state: [f64; 2],
    pub input: InputSignal,
    pub process_noise_std: f64,
    pub measurement_noise_std: f64,
    #[serde(default)]
    pub mode: MeasurementMode,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn training() -> Self {
        Self {
            steps: 500,
            delta: 0.02,
            initial_state: [0.0, 0.0],
            input: InputSignal::default_training(),
            process_noise_std: 1e-4,
            measurement_noise_std: 1e-3,
            mode: MeasurementMode::InputState,
            seed: 1,
        }
    }

    pub fn test() -> Self {
        Self {
            steps: 1000,
            delta: 0.01,
            initial_state: [-0.1, 0.5],
            input: InputSignal::default_test(),
            process_noise_std: 0.0,
            measurement_noise_std: 0.0,
            mode: MeasurementMode::InputState,
            seed: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("scenario needs at least one step".into()));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!(
                "step size must be positive, got {}",
                self.delta
            )));
        }
        if !(self.process_noise_std >= 0.0 && self.measurement_noise_std >= 0.0) {
            return Err(Error::Config(
                "noise standard deviations must be non-negative".into(),
            ));
        }
        self.input.validate()
    }

    /// `u_t = u(t δ)` for `t = 0..=steps`.
    pub fn inputs(&self) -> Vec<f64> {
        (0..=self.steps)
            .map(|t| self.input.eval(t as f64 * self.delta))
            .collect()
    }

    /// Noise model matching this scenario for the learner.
    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        NoiseSpec::isotropic(
            2,
            self.process_noise_std,
            self.measurement_noise_std.max(f64::MIN_POSITIVE.sqrt()),
            self.mode.output_components(),
        )
    }
}

/// A simulated (or loaded) dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub delta: f64,
    pub mode: MeasurementMode,
    pub inputs: Vec<f64>,
    pub outputs: Vec<Vec<f64>>,
    /// True states, when known.
    pub states: Option<Vec<[f64; 2]>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn observations(&self) -> Result<Observations> {
        Observations::new(
            self.inputs.iter().map(|u| vec![*u]).collect(),
            self.outputs.clone(),
        )
    }
}

/// Noise-free true trajectory under `input` values `u_0..u_{T}`.
pub fn simulate_truth(
    truth: &OscillatorTruth,
    x0: [f64; 2],
    inputs: &[f64],
    delta: f64,
) -> Result<Vec<[f64; 2]>> {
    simulate_with_noise(truth, x0, inputs, delta, None)
}

fn simulate_with_noise(
    truth: &OscillatorTruth,
    x0: [f64; 2],
    inputs: &[f64],
    delta: f64,
    mut process: Option<(f64, &mut dyn RngCore)>,
) -> Result<Vec<[f64; 2]>> {
    let matrices = truth.matrices();
    let mut states = Vec::with_capacity(inputs.len());
    let mut x = x0;
    states.push(x);
    for u in &inputs[..inputs.len().saturating_sub(1)] {
        let next = symplectic_euler_step(|s| Ok(true_gradient(s)), &matrices, &x, &[*u], delta)?;
        x = [next[0], next[1]];
        if let Some((std, rng)) = process.as_mut() {
            for xi in x.iter_mut() {
                *xi += *std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        states.push(x);
    }
    Ok(states)
}

/// Simulates the scenario. Process noise is added after every integrator
/// step; measurement noise draws are aligned by channel so the `q` channel is
/// identical in both measurement modes for the same seed.
pub fn generate_data<R: RngCore>(
    scenario: &ScenarioConfig,
    truth: &OscillatorTruth,
    rng: &mut R,
) -> Result<Dataset> {
    scenario.validate()?;
    let inputs = scenario.inputs();
    let states = simulate_with_noise(
        truth,
        scenario.initial_state,
        &inputs,
        scenario.delta,
        Some((scenario.process_noise_std, &mut *rng)),
    )?;
    let comps = scenario.mode.output_components();
    let outputs = states
        .iter()
        .map(|x| {
            let e: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            comps
                .iter()
                .map(|&c| x[c] + scenario.measurement_noise_std * e[c])
                .collect()
        })
        .collect();
    Ok(Dataset {
        delta: scenario.delta,
        mode: scenario.mode,
        inputs,
        outputs,
        states: Some(states),
    })
}
