//! `train`: simulate or load data, run the sampler, stream artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use hamgp::learn::{run_particle_gibbs, ChainSample, LearningProblem, RunSummary};
use hamgp::simulate::{generate_data, Dataset, MeasurementMode};
use hamgp::smc::Gaussian;
use hamgp::Error;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifacts::*;
use crate::config::ExperimentConfig;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub manifest: Manifest,
    pub summary: RunSummary,
}

/// Simulated data for the training scenario, or the configured CSV.
pub fn training_data(config: &ExperimentConfig) -> Result<Dataset> {
    if let Some(path) = &config.data_csv {
        return load_dataset(path, config);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.scenario.seed);
    Ok(generate_data(&config.scenario, &config.truth, &mut rng)?)
}

fn output_columns(mode: MeasurementMode) -> &'static [&'static str] {
    match mode {
        MeasurementMode::InputOutput => &["y_q"],
        MeasurementMode::InputState => &["y_q", "y_p"],
    }
}

/// Reads `u` and the measured channels (`y_q`, and `y_p` for input-state
/// data) by header name.
pub fn load_dataset(path: &Path, config: &ExperimentConfig) -> Result<Dataset> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{}: missing column `{name}`", path.display()))
    };
    let u_col = col("u")?;
    let y_cols = output_columns(config.scenario.mode)
        .iter()
        .map(|n| col(n))
        .collect::<Result<Vec<_>>>()?;
    let (mut inputs, mut outputs) = (Vec::new(), Vec::new());
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let num = |c: usize| -> Result<f64> {
            row.get(c).unwrap_or("").trim().parse().with_context(|| {
                format!(
                    "{} row {}: bad number in column {}",
                    path.display(),
                    i + 1,
                    &headers[c]
                )
            })
        };
        inputs.push(num(u_col)?);
        outputs.push(y_cols.iter().map(|c| num(*c)).collect::<Result<Vec<_>>>()?);
    }
    if inputs.len() < 2 {
        bail!("{}: need at least two rows", path.display());
    }
    Ok(Dataset {
        delta: config.scenario.delta,
        mode: config.scenario.mode,
        inputs,
        outputs,
        states: None,
    })
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step", "time_s", "u"];
    header.extend_from_slice(output_columns(data.mode));
    if data.states.is_some() {
        header.extend_from_slice(&["q_true", "p_true"]);
    }
    w.write_record(&header)?;
    for t in 0..data.len() {
        let mut row = vec![
            t.to_string(),
            (t as f64 * data.delta).to_string(),
            data.inputs[t].to_string(),
        ];
        row.extend(data.outputs[t].iter().map(f64::to_string));
        if let Some(states) = &data.states {
            row.extend(states[t].iter().map(f64::to_string));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn learning_problem(config: &ExperimentConfig, data: &Dataset) -> Result<LearningProblem> {
    let mut x0 = vec![0.0; 2];
    for (&c, v) in data.mode.output_components().iter().zip(&data.outputs[0]) {
        x0[c] = *v;
    }
    let var = config.priors.initial_state_std.powi(2);
    Ok(LearningProblem {
        expansion: config.basis.build()?,
        structure: config.structure.clone(),
        noise: config.model_noise_spec()?,
        noise_prior: config.priors.noise,
        hyper_prior: config.priors.hyper.clone(),
        initial_kernel: config.priors.initial_kernel,
        initial_state: Gaussian::new(x0, &(DMatrix::identity(2, 2) * var))?,
        data: data.observations()?,
        delta: data.delta,
    })
}

struct Writers {
    chain: BufWriter<File>,
    trajectories: csv::Writer<File>,
    log: BufWriter<File>,
}

impl Writers {
    fn record(&mut self, sample: &ChainSample, config: &ExperimentConfig) -> Result<()> {
        let k = sample.iteration;
        let last = k == config.sampler.iterations;
        if k.is_multiple_of(config.output.thinning) || last {
            serde_json::to_writer(&mut self.chain, &ChainRecord::from(sample))?;
            self.chain.write_all(b"\n")?;
        }
        if k.is_multiple_of(config.output.trajectory_stride) || last {
            let tr = &sample.trajectory;
            for (t, (x, h)) in tr.states.iter().zip(&tr.gradients).enumerate() {
                let mut row = vec![k.to_string(), t.to_string()];
                row.extend(x.iter().chain(h).map(f64::to_string));
                self.trajectories.write_record(&row)?;
            }
        }
        if k.is_multiple_of(config.output.log_interval) || last {
            let d = &sample.diagnostics;
            let slots: Vec<String> = sample
                .structural
                .iter()
                .map(|(n, v)| format!("{n}={v:.6}"))
                .collect();
            writeln!(
                self.log,
                "iteration {k}: sigma2={:.6e} signal_variance={:.6} lengthscale={:.6} {} mean_ess={:.3} min_ess={:.3} out_of_domain={} retries={}",
                sample.params.noise_variance,
                sample.kernel.signal_variance,
                sample.kernel.lengthscale,
                slots.join(" "),
                d.mean_ess,
                d.min_ess,
                d.out_of_domain,
                d.degenerate_retries,
            )?;
            if d.out_of_domain > 0 {
                writeln!(
                    self.log,
                    "warning: iteration {k}: {} particle evaluations outside the basis domain",
                    d.out_of_domain
                )?;
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.chain.flush()?;
        self.trajectories.flush()?;
        self.log.flush()?;
        Ok(())
    }
}

/// Runs a full training job into `out_dir`. On a sampler failure the partial
/// chain and a manifest with status `failed` are left behind and the error is
/// returned.
pub fn train(config: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let data = training_data(config)?;
    write_dataset(&out_dir.join(DATASET_FILE), &data)?;
    let problem = learning_problem(config, &data)?;

    let mut trajectories = csv::Writer::from_path(out_dir.join(TRAJECTORY_FILE))?;
    trajectories.write_record(["iteration", "t", "q", "p", "h_q", "h_p"])?;
    let mut w = Writers {
        chain: BufWriter::new(File::create(out_dir.join(CHAIN_FILE))?),
        trajectories,
        log: BufWriter::new(File::create(out_dir.join(RUN_LOG_FILE))?),
    };
    writeln!(
        w.log,
        "run {}: {} iterations, burn-in {}, {} particles, {} basis functions, {} time steps",
        config.name,
        config.sampler.iterations,
        config.sampler.burn_in,
        config.sampler.particles,
        config.basis.functions,
        data.len()
    )?;

    let mut records = 0usize;
    let mut sink_error = None;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let result = run_particle_gibbs(
        &problem,
        &config.sampler,
        &mut rng,
        &mut (),
        |sample| match w.record(&sample, config) {
            Ok(()) => {
                records += usize::from(
                    sample.iteration % config.output.thinning == 0
                        || sample.iteration == config.sampler.iterations,
                );
                Ok(())
            }
            Err(e) => {
                let msg = format!("{e:#}");
                sink_error = Some(e);
                Err(Error::Sink(msg))
            }
        },
    );
    let (status, error, summary) = match &result {
        Ok(summary) => {
            writeln!(w.log, "summary: {}", serde_json::to_string(summary)?)?;
            (RunStatus::Complete, None, Some(summary.clone()))
        }
        Err(e) => {
            writeln!(w.log, "error: {e}")?;
            (RunStatus::Failed, Some(e.to_string()), None)
        }
    };
    w.finish()?;

    let mut files = std::collections::BTreeMap::new();
    for name in [CHAIN_FILE, TRAJECTORY_FILE, DATASET_FILE, RUN_LOG_FILE] {
        files.insert(name.to_string(), sha256_file(&out_dir.join(name))?);
    }
    let manifest = Manifest {
        status,
        error,
        config: config.clone(),
        config_sha256: sha256_hex(config.to_json().as_bytes()),
        chain_seed: config.seed,
        data_seed: config.scenario.seed,
        versions: versions(),
        records,
        summary,
        files,
        mean_model: MEAN_MODEL.to_string(),
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    if let Some(e) = sink_error {
        return Err(e.context("writing chain artifacts"));
    }
    let summary = result.context("particle Gibbs run failed")?;
    Ok(TrainOutcome { manifest, summary })
}
