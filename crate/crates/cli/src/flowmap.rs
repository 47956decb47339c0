//! Flow-map comparison between the posterior mean model and the truth.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use anyhow::{bail, Result};
use hamgp::basis::BasisExpansion;
use hamgp::hamiltonian::{predict_gradient, GpParams, StructureMatrices, SystemStructure};
use hamgp::simulate::OscillatorTruth;
use serde::{Deserialize, Serialize};

use crate::artifacts::*;
use crate::config::{ExperimentConfig, FlowGridConfig};

/// The posterior mean model used for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanModel {
    pub weights: Vec<f64>,
    pub structural: BTreeMap<String, f64>,
    pub samples: usize,
}

impl MeanModel {
    pub fn from_records(records: &[&ChainRecord]) -> Result<Self> {
        let Some(first) = records.first() else {
            bail!("no retained chain records after burn-in");
        };
        let n = records.len() as f64;
        let mut weights = vec![0.0; first.params.weights.len()];
        let mut structural: BTreeMap<String, f64> =
            first.structural.keys().map(|k| (k.clone(), 0.0)).collect();
        for r in records {
            for (m, w) in weights.iter_mut().zip(&r.params.weights) {
                *m += w / n;
            }
            for (k, v) in &r.structural {
                *structural.entry(k.clone()).or_default() += v / n;
            }
        }
        Ok(Self {
            weights,
            structural,
            samples: records.len(),
        })
    }

    pub fn params(&self) -> Result<GpParams> {
        Ok(GpParams::new(self.weights.clone(), 1.0)?)
    }

    pub fn matrices(&self, structure: &SystemStructure) -> Result<StructureMatrices> {
        Ok(structure.matrices_with(&self.structural)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowCell {
    pub q: f64,
    pub p: f64,
    pub true_flow: [f64; 2],
    pub estimated_flow: [f64; 2],
    pub magnitude_error: f64,
    /// Wrapped to `[0, π]`; `None` where the true flow is too small for an
    /// angle to mean anything.
    pub angle_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMapReport {
    pub grid: FlowGridConfig,
    /// Flow magnitude RMSE, in energy-flow units.
    pub magnitude_rmse: f64,
    /// Flow angle RMSE in radians.
    pub angle_rmse: f64,
    pub cells: usize,
    pub angle_excluded_cells: usize,
    pub mean_model: MeanModel,
    #[serde(skip)]
    pub per_cell: Vec<FlowCell>,
}

/// Absolute angle between two planar vectors, in `[0, π]`.
pub fn wrapped_angle(a: [f64; 2], b: [f64; 2]) -> f64 {
    let mut d = (a[1].atan2(a[0]) - b[1].atan2(b[0])).abs() % (2.0 * PI);
    if d > PI {
        d = 2.0 * PI - d;
    }
    d
}

/// Compares two unforced flow fields on the grid.
pub fn compare_flows<F, G>(
    grid: &FlowGridConfig,
    truth: F,
    estimate: G,
) -> Result<(f64, f64, usize, Vec<FlowCell>)>
where
    F: Fn(&[f64; 2]) -> Result<[f64; 2]>,
    G: Fn(&[f64; 2]) -> Result<[f64; 2]>,
{
    let mut cells = Vec::new();
    for x in grid.points() {
        let v = truth(&x)?;
        let vh = estimate(&x)?;
        let norm = v[0].hypot(v[1]);
        let angle_error = (norm >= grid.min_flow_norm_for_angle).then(|| wrapped_angle(vh, v));
        cells.push(FlowCell {
            q: x[0],
            p: x[1],
            true_flow: v,
            estimated_flow: vh,
            magnitude_error: vh[0].hypot(vh[1]) - norm,
            angle_error,
        });
    }
    let (mag, ang, excluded) = rmse_from_cells(&cells);
    Ok((mag, ang, excluded, cells))
}

/// `(magnitude RMSE, angle RMSE, excluded angle cells)`.
pub fn rmse_from_cells(cells: &[FlowCell]) -> (f64, f64, usize) {
    let mag =
        (cells.iter().map(|c| c.magnitude_error.powi(2)).sum::<f64>() / cells.len() as f64).sqrt();
    let angles: Vec<f64> = cells.iter().filter_map(|c| c.angle_error).collect();
    let ang = if angles.is_empty() {
        0.0
    } else {
        (angles.iter().map(|a| a * a).sum::<f64>() / angles.len() as f64).sqrt()
    };
    (mag, ang, cells.len() - angles.len())
}

fn to2(v: Vec<f64>) -> [f64; 2] {
    [v[0], v[1]]
}

pub fn flowmap_for_model(
    grid: &FlowGridConfig,
    truth: &OscillatorTruth,
    expansion: &BasisExpansion,
    structure: &SystemStructure,
    model: MeanModel,
) -> Result<FlowMapReport> {
    let params = model.params()?;
    let est = model.matrices(structure)?;
    let tm = truth.matrices();
    let (magnitude_rmse, angle_rmse, angle_excluded_cells, per_cell) = compare_flows(
        grid,
        |x| Ok(to2(tm.flow(&hamgp::simulate::true_gradient(x), &[0.0]))),
        |x| {
            Ok(to2(
                est.flow(&predict_gradient(expansion, &params, x)?, &[0.0])
            ))
        },
    )?;
    Ok(FlowMapReport {
        grid: grid.clone(),
        magnitude_rmse,
        angle_rmse,
        cells: per_cell.len(),
        angle_excluded_cells,
        mean_model: model,
        per_cell,
    })
}

pub fn write_cells(path: &Path, cells: &[FlowCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "q",
        "p",
        "true_flow_q",
        "true_flow_p",
        "estimated_flow_q",
        "estimated_flow_p",
        "magnitude_error",
        "angle_error_rad",
    ])?;
    for c in cells {
        let angle = c.angle_error.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([
            c.q.to_string(),
            c.p.to_string(),
            c.true_flow[0].to_string(),
            c.true_flow[1].to_string(),
            c.estimated_flow[0].to_string(),
            c.estimated_flow[1].to_string(),
            c.magnitude_error.to_string(),
            angle,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cells(path: &Path) -> Result<Vec<FlowCell>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let f = |i: usize| -> Result<f64> { Ok(row[i].parse()?) };
        out.push(FlowCell {
            q: f(0)?,
            p: f(1)?,
            true_flow: [f(2)?, f(3)?],
            estimated_flow: [f(4)?, f(5)?],
            magnitude_error: f(6)?,
            angle_error: if row[7].is_empty() { None } else { Some(f(7)?) },
        });
    }
    Ok(out)
}

/// `eval-flowmap`: writes the report and per-cell CSV into `out_dir`.
pub fn eval_flowmap(
    config: &ExperimentConfig,
    chain_path: &Path,
    out_dir: &Path,
) -> Result<FlowMapReport> {
    let chain = read_chain(chain_path)?;
    let kept = retained(&chain, config.sampler.burn_in);
    let model = MeanModel::from_records(&kept)?;
    let report = flowmap_for_model(
        &config.evaluation,
        &config.truth,
        &config.basis.build()?,
        &config.structure,
        model,
    )?;
    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join(FLOWMAP_FILE), &report)?;
    write_cells(&out_dir.join(FLOWMAP_CELLS_FILE), &report.per_cell)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_fields_give_zero_error() {
        let truth = OscillatorTruth::default();
        let tm = truth.matrices();
        let f = |x: &[f64; 2]| Ok(to2(tm.flow(&hamgp::simulate::true_gradient(x), &[0.0])));
        let (m, a, excluded, cells) = compare_flows(&FlowGridConfig::default(), f, f).unwrap();
        assert_eq!((m, a), (0.0, 0.0));
        // the origin is a fixed point of the true flow
        assert_eq!(excluded, 1);
        assert_eq!(cells.len(), 441);
    }

    #[test]
    fn angles_wrap_into_zero_pi() {
        assert!((wrapped_angle([1.0, 0.0], [-1.0, 0.0]) - PI).abs() < 1e-15);
        assert!((wrapped_angle([1.0, -1e-9], [1.0, 1e-9]) - 2e-9).abs() < 1e-15);
        assert!((wrapped_angle([-1.0, 1e-9], [-1.0, -1e-9]) - 2e-9).abs() < 1e-12);
    }

    #[test]
    fn reversed_field_has_angle_pi() {
        let f = |x: &[f64; 2]| Ok([x[1], -x[0]]);
        let g = |x: &[f64; 2]| Ok([-x[1], x[0]]);
        let (m, a, _, _) = compare_flows(&FlowGridConfig::default(), f, g).unwrap();
        assert!(m.abs() < 1e-15);
        assert!((a - PI).abs() < 1e-12);
    }

    #[test]
    fn traversal_order_does_not_matter() {
        let f = |x: &[f64; 2]| Ok([x[1], -x[0] - 0.2 * x[1]]);
        let g = |x: &[f64; 2]| Ok([1.1 * x[1], -x[0]]);
        let (m, a, _, mut cells) = compare_flows(&FlowGridConfig::default(), f, g).unwrap();
        cells.reverse();
        cells.swap(3, 100);
        let (m2, a2, _) = rmse_from_cells(&cells);
        assert!((m - m2).abs() <= 1e-14 && (a - a2).abs() <= 1e-14);
    }
}
