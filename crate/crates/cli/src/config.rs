//! Experiment configuration: one JSON document describing data, model,
//! priors, sampler, evaluation and outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hamgp::basis::{BasisExpansion, DomainBox, KernelHyperparams, SymmetryMode};
use hamgp::hamiltonian::{NoiseSpec, SystemStructure};
use hamgp::learn::{HyperPrior, NoisePrior, SamplerSettings, ScalarPrior};
use hamgp::simulate::{InputSignal, MeasurementMode, OscillatorTruth, ScenarioConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    /// Half-widths `L_i` of the box `[−L_i, L_i]`, in state units.
    pub half_widths: Vec<f64>,
    pub functions: usize,
    pub max_index_per_dim: u32,
    pub symmetry: SymmetryMode,
}

impl BasisConfig {
    pub fn build(&self) -> Result<BasisExpansion> {
        Ok(BasisExpansion::build(
            DomainBox::new(self.half_widths.clone())?,
            self.functions,
            self.max_index_per_dim,
            self.symmetry,
        )?)
    }
}

/// Noise covariances assumed by the learner (isotropic).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelNoiseConfig {
    pub process_std: f64,
    pub measurement_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub noise: NoisePrior,
    pub hyper: HyperPrior,
    pub initial_kernel: KernelHyperparams,
    /// Standard deviation of the Gaussian `p(x₀)` around the first
    /// measurement (zero for unmeasured components).
    pub initial_state_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Keep every `thinning`-th chain record.
    pub thinning: usize,
    /// Write the latent trajectory every this many iterations.
    pub trajectory_stride: usize,
    /// Run-log line every this many iterations.
    pub log_interval: usize,
}

/// Uniform evaluation grid for flow maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowGridConfig {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
    pub resolution: usize,
    /// Cells whose true flow norm is below this are left out of the angle
    /// RMSE.
    pub min_flow_norm_for_angle: f64,
}

impl Default for FlowGridConfig {
    fn default() -> Self {
        Self {
            lower: [-2.5, -2.5],
            upper: [2.5, 2.5],
            resolution: 21,
            min_flow_norm_for_angle: 1e-6,
        }
    }
}

impl FlowGridConfig {
    /// Grid points in row-major order, `q` outer.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let n = self.resolution;
        let coord = |dim: usize, i: usize| {
            if n == 1 {
                0.5 * (self.lower[dim] + self.upper[dim])
            } else {
                self.lower[dim] + (self.upper[dim] - self.lower[dim]) * i as f64 / (n - 1) as f64
            }
        };
        (0..n)
            .flat_map(|i| (0..n).map(move |j| [coord(0, i), coord(1, j)]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionConfig {
    pub samples: usize,
    /// Seed for choosing which retained records to simulate.
    pub seed: u64,
    /// Allowed per-step increase of `Ĥ` once the input has settled at zero.
    pub energy_tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub truth: OscillatorTruth,
    /// Training data scenario.
    pub scenario: ScenarioConfig,
    pub test_scenario: ScenarioConfig,
    /// Load training data from this CSV instead of simulating it.
    #[serde(default)]
    pub data_csv: Option<PathBuf>,
    pub basis: BasisConfig,
    /// Structure patterns; `hypers` holds the initial structural values.
    pub structure: SystemStructure,
    pub model_noise: ModelNoiseConfig,
    pub priors: PriorConfig,
    pub sampler: SamplerSettings,
    pub seed: u64,
    pub evaluation: FlowGridConfig,
    pub prediction: PredictionConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Input-state learning with the full measured state and an
    /// unconstrained basis.
    pub fn input_state() -> Self {
        let truth = OscillatorTruth::default();
        Self {
            name: "oscillator-input-state".into(),
            truth,
            scenario: ScenarioConfig::training(),
            test_scenario: ScenarioConfig::test(),
            data_csv: None,
            basis: BasisConfig {
                half_widths: vec![8.0, 8.0],
                functions: 20,
                max_index_per_dim: 12,
                symmetry: SymmetryMode::None,
            },
            structure: SystemStructure::oscillator(0.5),
            model_noise: ModelNoiseConfig {
                process_std: 1e-4,
                measurement_std: 1e-3,
            },
            priors: PriorConfig {
                noise: NoisePrior {
                    psi: 100.0,
                    nu: 400.0,
                },
                hyper: HyperPrior {
                    signal_variance: ScalarPrior::log_normal(0.0, 3.0),
                    lengthscale: ScalarPrior::log_normal(0.0, 3.0),
                    structural: BTreeMap::from([(
                        "d".to_string(),
                        ScalarPrior::log_normal(-2.0, 2.0),
                    )]),
                },
                initial_kernel: KernelHyperparams {
                    signal_variance: 1.0,
                    lengthscale: 1.5,
                },
                initial_state_std: 0.1,
            },
            sampler: SamplerSettings {
                iterations: 2000,
                burn_in: 1500,
                particles: 30,
                ..SamplerSettings::default()
            },
            seed: 7,
            evaluation: FlowGridConfig::default(),
            prediction: PredictionConfig {
                samples: 10,
                seed: 11,
                energy_tolerance: 1e-6,
            },
            output: OutputConfig {
                dir: PathBuf::from("runs/input-state"),
                thinning: 1,
                trajectory_stride: 100,
                log_interval: 100,
            },
        }
    }

    /// Position-only measurements with a parity-constrained basis of 15
    /// functions.
    pub fn input_output() -> Self {
        let mut c = Self::input_state();
        c.name = "oscillator-input-output".into();
        c.scenario.mode = MeasurementMode::InputOutput;
        c.basis.functions = 15;
        c.basis.symmetry = SymmetryMode::AllOddIndices;
        c.output.dir = PathBuf::from("runs/input-output");
        c
    }

    /// A tiny run for checking that everything wires up.
    pub fn smoke() -> Self {
        let mut c = Self::input_state();
        c.name = "oscillator-smoke".into();
        c.scenario.steps = 50;
        c.test_scenario.steps = 200;
        c.sampler.iterations = 10;
        c.sampler.burn_in = 5;
        c.sampler.particles = 5;
        c.prediction.samples = 3;
        c.output.dir = PathBuf::from("runs/smoke");
        c.output.trajectory_stride = 5;
        c.output.log_interval = 5;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "input-state" => Ok(Self::input_state()),
            "input-output" => Ok(Self::input_output()),
            "smoke" => Ok(Self::smoke()),
            other => {
                bail!("unknown preset `{other}` (expected input-state, input-output or smoke)")
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Field-level checks beyond what the types enforce.
    pub fn validate(&self) -> Result<()> {
        let s = &self.sampler;
        if s.burn_in >= s.iterations {
            bail!(
                "sampler.burn_in ({}) must be smaller than sampler.iterations ({})",
                s.burn_in,
                s.iterations
            );
        }
        s.validate().context("sampler")?;
        self.scenario.validate().context("scenario")?;
        self.test_scenario.validate().context("test_scenario")?;
        self.structure.validate().context("structure")?;
        self.priors
            .hyper
            .validate(&self.structure)
            .context("priors.hyper")?;
        if self.structure.state_dim() != 2 || self.structure.input_dim() != 1 {
            bail!(
                "structure must describe a 2-state, 1-input system to match the oscillator truth"
            );
        }
        if self.basis.half_widths.len() != 2 {
            bail!(
                "basis.half_widths must have 2 entries, got {}",
                self.basis.half_widths.len()
            );
        }
        self.basis.build().context("basis")?;
        let n = &self.priors.noise;
        if !(n.psi > 0.0 && n.nu > 0.0) {
            bail!("priors.noise.psi and priors.noise.nu must be positive");
        }
        if !(self.priors.initial_state_std > 0.0) {
            bail!("priors.initial_state_std must be positive");
        }
        KernelHyperparams::new(
            self.priors.initial_kernel.signal_variance,
            self.priors.initial_kernel.lengthscale,
        )
        .context("priors.initial_kernel")?;
        self.model_noise_spec().context("model_noise")?;
        if self.output.thinning == 0
            || self.output.trajectory_stride == 0
            || self.output.log_interval == 0
        {
            bail!("output.thinning, output.trajectory_stride and output.log_interval must be positive");
        }
        let g = &self.evaluation;
        if g.resolution == 0 || (0..2).any(|i| !(g.lower[i] < g.upper[i])) {
            bail!("evaluation grid needs resolution > 0 and lower < upper in both coordinates");
        }
        if self.prediction.samples == 0 {
            bail!("prediction.samples must be positive");
        }
        Ok(())
    }

    pub fn model_noise_spec(&self) -> Result<NoiseSpec> {
        Ok(NoiseSpec::isotropic(
            2,
            self.model_noise.process_std,
            self.model_noise.measurement_std,
            self.scenario.mode.output_components(),
        )?)
    }

    /// The input signal of a named scenario.
    pub fn scenario_named(&self, name: &str) -> Result<&ScenarioConfig> {
        match name {
            "train" | "training" => Ok(&self.scenario),
            "test" => Ok(&self.test_scenario),
            other => bail!("unknown scenario `{other}` (expected train or test)"),
        }
    }
}

/// Last time index after which the input is identically zero, if any.
pub(crate) fn input_settles_at(input: &InputSignal, steps: usize, delta: f64) -> Option<usize> {
    let values: Vec<f64> = (0..=steps).map(|t| input.eval(t as f64 * delta)).collect();
    let last_nonzero = values.iter().rposition(|u| *u != 0.0);
    match last_nonzero {
        None => Some(0),
        Some(t) if t < steps => Some(t + 1),
        Some(_) => None,
    }
}
