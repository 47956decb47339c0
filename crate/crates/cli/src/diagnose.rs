//! Chain diagnostics: acceptance rates, trace summaries, histograms.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::artifacts::*;
use crate::config::ExperimentConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
    pub max: f64,
    /// Fraction of retained draws above zero.
    pub positive_mass: f64,
}

impl TraceSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            mean,
            std: var.sqrt(),
            min: sorted[0],
            q05: quantile(&sorted, 0.05),
            median: quantile(&sorted, 0.5),
            q95: quantile(&sorted, 0.95),
            max: sorted[sorted.len() - 1],
            positive_mass: values.iter().filter(|v| **v > 0.0).count() as f64 / n,
        })
    }

    pub fn covers(&self, value: f64) -> bool {
        self.q05 <= value && value <= self.q95
    }
}

/// Linear interpolation between order statistics of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn of(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo {
            (hi - lo) / bins as f64
        } else {
            1.0
        };
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0usize; bins];
        for v in values {
            let i = (((v - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        let norm = values.len() as f64 * width;
        Self {
            edges,
            density: counts.iter().map(|c| *c as f64 / norm).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub kernel: f64,
    pub structural: BTreeMap<String, f64>,
    pub joint: BTreeMap<String, f64>,
    pub iterations_counted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub records: usize,
    pub retained: usize,
    pub burn_in: usize,
    /// Over all recorded iterations.
    pub acceptance: Acceptance,
    /// Over retained records: `signal_variance`, `lengthscale`,
    /// `noise_variance` and each structural hyperparameter.
    pub traces: BTreeMap<String, TraceSummary>,
    pub histograms: BTreeMap<String, Histogram>,
    /// Whether the 5–95% interval of each structural hyperparameter covers
    /// its true value.
    pub truth_covered: BTreeMap<String, bool>,
    pub mean_ess: f64,
    pub out_of_domain: usize,
    pub degenerate_retries: usize,
}

pub const HISTOGRAM_BINS: usize = 20;

pub fn diagnose_records(
    chain: &[ChainRecord],
    burn_in: usize,
    truth: &BTreeMap<String, f64>,
) -> DiagnosticsReport {
    let rate = |flags: Vec<bool>| {
        if flags.is_empty() {
            0.0
        } else {
            flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64
        }
    };
    let slots: Vec<String> = chain
        .first()
        .map(|r| r.structural.keys().cloned().collect())
        .unwrap_or_default();
    let per_slot = |pick: fn(&ChainRecord) -> &BTreeMap<String, bool>| -> BTreeMap<String, f64> {
        slots
            .iter()
            .map(|s| {
                (
                    s.clone(),
                    rate(
                        chain
                            .iter()
                            .filter_map(|r| pick(r).get(s).copied())
                            .collect(),
                    ),
                )
            })
            .collect()
    };
    let acceptance = Acceptance {
        kernel: rate(chain.iter().map(|r| r.kernel_accepted).collect()),
        structural: per_slot(|r| &r.structural_accepted),
        joint: per_slot(|r| &r.joint_accepted),
        iterations_counted: chain.len(),
    };

    let kept = retained(chain, burn_in);
    let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &kept {
        series
            .entry("signal_variance".into())
            .or_default()
            .push(r.kernel.signal_variance);
        series
            .entry("lengthscale".into())
            .or_default()
            .push(r.kernel.lengthscale);
        series
            .entry("noise_variance".into())
            .or_default()
            .push(r.params.noise_variance);
        for (k, v) in &r.structural {
            series.entry(k.clone()).or_default().push(*v);
        }
    }
    let traces: BTreeMap<String, TraceSummary> = series
        .iter()
        .filter_map(|(k, v)| TraceSummary::of(v).map(|s| (k.clone(), s)))
        .collect();
    let histograms = series
        .iter()
        .map(|(k, v)| (k.clone(), Histogram::of(v, HISTOGRAM_BINS)))
        .collect();
    let truth_covered = truth
        .iter()
        .filter_map(|(k, v)| traces.get(k).map(|t| (k.clone(), t.covers(*v))))
        .collect();
    let mean_ess = if kept.is_empty() {
        0.0
    } else {
        kept.iter().map(|r| r.diagnostics.mean_ess).sum::<f64>() / kept.len() as f64
    };
    DiagnosticsReport {
        records: chain.len(),
        retained: kept.len(),
        burn_in,
        acceptance,
        traces,
        histograms,
        truth_covered,
        mean_ess,
        out_of_domain: chain.iter().map(|r| r.diagnostics.out_of_domain).sum(),
        degenerate_retries: chain.iter().map(|r| r.diagnostics.degenerate_retries).sum(),
    }
}

/// `diagnose`: writes the report into `out_dir`.
pub fn diagnose(
    config: &ExperimentConfig,
    chain_path: &Path,
    out_dir: &Path,
) -> Result<DiagnosticsReport> {
    let chain = read_chain(chain_path)?;
    let truth = BTreeMap::from([("d".to_string(), config.truth.damping)]);
    let report = diagnose_records(&chain, config.sampler.burn_in, &truth);
    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join(DIAGNOSTICS_FILE), &report)?;
    Ok(report)
}
