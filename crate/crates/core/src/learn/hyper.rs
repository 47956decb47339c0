//! Metropolis-Hastings steps for the kernel and structural hyperparameters.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::nig::{accumulate_stats, log_normalizer_quotient, NigParams, SuffStats};
use crate::basis::{BasisExpansion, KernelHyperparams};
use crate::error::{Error, Result};
use crate::hamiltonian::{transition_mean, NoiseSpec, SystemStructure};
use crate::linalg;
use crate::smc::LatentTrajectory;

/// Coordinate in which a hyperparameter is proposed and given its prior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinate {
    #[default]
    Log,
    Identity,
}

impl Coordinate {
    pub fn to_coord(self, value: f64) -> Option<f64> {
        match self {
            Coordinate::Log if value > 0.0 => Some(value.ln()),
            Coordinate::Log => None,
            Coordinate::Identity => Some(value),
        }
    }

    pub fn from_coord(self, c: f64) -> f64 {
        match self {
            Coordinate::Log => c.exp(),
            Coordinate::Identity => c,
        }
    }

    /// `log |dv/dc|` at natural value `v`.
    fn log_jacobian(self, value: f64) -> f64 {
        match self {
            Coordinate::Log => value.ln(),
            Coordinate::Identity => 0.0,
        }
    }
}

/// Gaussian prior placed on a hyperparameter in its declared coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarPrior {
    pub mean: f64,
    pub std: f64,
    #[serde(default)]
    pub coordinate: Coordinate,
}

impl ScalarPrior {
    pub fn log_normal(log_mean: f64, log_std: f64) -> Self {
        Self {
            mean: log_mean,
            std: log_std,
            coordinate: Coordinate::Log,
        }
    }

    /// Log density of the coordinate value `c`.
    pub fn log_density_coord(&self, c: f64) -> f64 {
        let z = (c - self.mean) / self.std;
        -0.5 * z * z - self.std.ln() - 0.5 * (2.0 * PI).ln()
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite() && self.mean.is_finite()) {
            return Err(Error::Config(format!(
                "prior for `{name}` needs a finite mean and positive std"
            )));
        }
        Ok(())
    }
}

/// Priors `p(ϑ)` over the kernel and structural hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPrior {
    pub signal_variance: ScalarPrior,
    pub lengthscale: ScalarPrior,
    #[serde(default)]
    pub structural: BTreeMap<String, ScalarPrior>,
}

impl HyperPrior {
    pub fn validate(&self, structure: &SystemStructure) -> Result<()> {
        self.signal_variance.validate("signal_variance")?;
        self.lengthscale.validate("lengthscale")?;
        for s in structure.slot_names() {
            self.structural
                .get(&s)
                .ok_or_else(|| {
                    Error::Config(format!("no prior for structural hyperparameter `{s}`"))
                })?
                .validate(&s)?;
        }
        Ok(())
    }

    fn structural_prior(&self, slot: &str) -> Result<&ScalarPrior> {
        self.structural.get(slot).ok_or_else(|| {
            Error::Config(format!("no prior for structural hyperparameter `{slot}`"))
        })
    }

    fn kernel_coords(&self, hyper: &KernelHyperparams) -> Option<(f64, f64)> {
        Some((
            self.signal_variance
                .coordinate
                .to_coord(hyper.signal_variance)?,
            self.lengthscale.coordinate.to_coord(hyper.lengthscale)?,
        ))
    }
}

/// The pieces of the NIG prior that do not depend on the kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePrior {
    pub psi: f64,
    pub nu: f64,
}

/// `η(ϑ_K) = {0, V(ϑ_K), ψ, ν}`.
pub fn weight_prior(
    expansion: &BasisExpansion,
    hyper: &KernelHyperparams,
    noise: NoisePrior,
) -> Result<NigParams> {
    NigParams::zero_mean_diagonal(&expansion.prior_variances(hyper), noise.psi, noise.nu)
}

/// Outcome of one Metropolis-Hastings step.
#[derive(Clone, Debug, PartialEq)]
pub struct MhOutcome<T> {
    pub value: T,
    pub accepted: bool,
    pub log_ratio: f64,
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    if log_ratio >= 0.0 {
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < log_ratio
}

/// Kernel hyperparameter log target in the prior's coordinates:
/// `log n(η) − log n(η⁺) + log p(c)`.
pub fn kernel_log_target(
    expansion: &BasisExpansion,
    stats: &SuffStats,
    hyper: &KernelHyperparams,
    noise: NoisePrior,
    prior: &HyperPrior,
) -> Result<f64> {
    let Some((c_sf, c_l)) = prior.kernel_coords(hyper) else {
        return Ok(f64::NEG_INFINITY);
    };
    let eta = weight_prior(expansion, hyper, noise)?;
    let lik = log_normalizer_quotient(&eta, stats)?;
    Ok(lik
        + prior.signal_variance.log_density_coord(c_sf)
        + prior.lengthscale.log_density_coord(c_l))
}

/// One random-walk step on `(σ_f², ℓ)` in the prior's coordinates with
/// per-coordinate step sizes `scales`.
pub fn mh_step_kernel_hypers<R: Rng + ?Sized>(
    current: &KernelHyperparams,
    stats: &SuffStats,
    expansion: &BasisExpansion,
    noise: NoisePrior,
    prior: &HyperPrior,
    scales: [f64; 2],
    rng: &mut R,
) -> Result<MhOutcome<KernelHyperparams>> {
    let (c_sf, c_l) = prior
        .kernel_coords(current)
        .ok_or_else(|| Error::Argument("current kernel hyperparameters must be positive".into()))?;
    let e1: f64 = rng.sample(StandardNormal);
    let e2: f64 = rng.sample(StandardNormal);
    let proposed_sf = prior
        .signal_variance
        .coordinate
        .from_coord(c_sf + scales[0] * e1);
    let proposed_l = prior
        .lengthscale
        .coordinate
        .from_coord(c_l + scales[1] * e2);
    let reject = |log_ratio| MhOutcome {
        value: *current,
        accepted: false,
        log_ratio,
    };
    if !(proposed_sf > 0.0 && proposed_l > 0.0 && proposed_sf.is_finite() && proposed_l.is_finite())
    {
        return Ok(reject(f64::NEG_INFINITY));
    }
    let proposed = KernelHyperparams {
        signal_variance: proposed_sf,
        lengthscale: proposed_l,
    };
    if proposed == *current {
        return Ok(MhOutcome {
            value: proposed,
            accepted: true,
            log_ratio: 0.0,
        });
    }
    let now = kernel_log_target(expansion, stats, current, noise, prior)?;
    // Extreme proposals can make the posterior precision unusable; those are
    // rejected rather than aborting the chain.
    let next = match kernel_log_target(expansion, stats, &proposed, noise, prior) {
        Ok(v) => v,
        Err(Error::Numerical { .. }) => return Ok(reject(f64::NEG_INFINITY)),
        Err(e) => return Err(e),
    };
    let log_ratio = next - now;
    Ok(if accept(log_ratio, rng) {
        MhOutcome {
            value: proposed,
            accepted: true,
            log_ratio,
        }
    } else {
        reject(log_ratio)
    })
}

/// How structural hyperparameters are proposed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StructuralProposal {
    /// Gaussian random walk in the prior's coordinate.
    RandomWalk,
    /// Independence proposal from the exact conditional likelihood of each
    /// slot, which is Gaussian because the drift is affine in every slot.
    /// Falls back to a random walk when the trajectory carries no
    /// information about a slot.
    Laplace,
}

/// Everything the structural likelihood needs apart from `ϑ_S`.
pub struct StructuralContext<'a> {
    pub structure: &'a SystemStructure,
    pub trajectory: &'a LatentTrajectory,
    pub inputs: &'a [Vec<f64>],
    pub noise: &'a NoiseSpec,
    pub delta: f64,
}

impl StructuralContext<'_> {
    /// `Σ_t log N(x_t | x_{t−1} + δ((J − R)h_{t−1} + Gu_{t−1}), Σ_w)`,
    /// or `−∞` when `ϑ_S` makes `R` indefinite.
    pub fn log_likelihood(&self, hypers: &BTreeMap<String, f64>) -> Result<f64> {
        let matrices = match self.structure.matrices_with(hypers) {
            Ok(m) => m,
            Err(Error::Config(_)) => return Ok(f64::NEG_INFINITY),
            Err(e) => return Err(e),
        };
        let chol = linalg::cholesky(self.noise.process_cov(), "process noise covariance")?;
        let n = matrices.state_dim();
        let log_norm = -0.5 * (n as f64 * (2.0 * PI).ln() + linalg::log_det(&chol));
        let tr = self.trajectory;
        let mut total = 0.0;
        for t in 1..tr.len() {
            let mean = transition_mean(
                &matrices,
                &tr.states[t - 1],
                &tr.gradients[t - 1],
                &self.inputs[t - 1],
                self.delta,
            );
            let diff =
                DVector::from_iterator(n, tr.states[t].iter().zip(&mean).map(|(a, b)| a - b));
            total += log_norm - 0.5 * diff.dot(&chol.solve(&diff));
        }
        Ok(total)
    }

    /// Exact conditional of one slot as `(mean, variance)` in natural units,
    /// `None` when the likelihood does not depend on it.
    pub fn slot_conditional(
        &self,
        slot: &str,
        hypers: &BTreeMap<String, f64>,
    ) -> Result<Option<(f64, f64)>> {
        let (d_jr, d_g) = self.structure.slot_derivative(slot);
        if !hypers.contains_key(slot) {
            return Err(Error::UnboundSlot(slot.to_string()));
        }
        // build J − R and G without the PSD check: the conditional is
        // defined for every slot value
        let mut zeroed = hypers.clone();
        zeroed.insert(slot.to_string(), 0.0);
        let base = self.structure.unchecked_matrices_with(&zeroed)?;
        let w = linalg::cholesky(self.noise.process_cov(), "process noise covariance")?;
        let tr = self.trajectory;
        let n = tr.state_dim();
        let (mut a, mut b) = (0.0, 0.0);
        for t in 1..tr.len() {
            let h = DVector::from_column_slice(&tr.gradients[t - 1]);
            let u = DVector::from_column_slice(&self.inputs[t - 1]);
            let slope = (&d_jr * &h + &d_g * &u) * self.delta;
            let mean0 = transition_mean(
                &base,
                &tr.states[t - 1],
                &tr.gradients[t - 1],
                &self.inputs[t - 1],
                self.delta,
            );
            let resid =
                DVector::from_iterator(n, tr.states[t].iter().zip(&mean0).map(|(x, m)| x - m));
            let w_slope = w.solve(&slope);
            a += slope.dot(&w_slope);
            b += resid.dot(&w_slope);
        }
        if !(a > 0.0 && a.is_finite()) {
            return Ok(None);
        }
        Ok(Some((b / a, 1.0 / a)))
    }
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}

/// One sweep over the structural slots, each updated in turn.
pub fn mh_step_structural_hypers<R: Rng + ?Sized>(
    current: &BTreeMap<String, f64>,
    context: &StructuralContext<'_>,
    prior: &HyperPrior,
    proposal: StructuralProposal,
    scales: &BTreeMap<String, f64>,
    rng: &mut R,
) -> Result<MhOutcome<BTreeMap<String, f64>>> {
    let mut state = current.clone();
    let mut any = false;
    let mut total_log_ratio = 0.0;
    for slot in context.structure.slot_names() {
        let out = mh_step_slot(
            &slot,
            &state,
            context,
            prior,
            proposal,
            scales.get(&slot).copied().unwrap_or(0.1),
            rng,
        )?;
        any |= out.accepted;
        total_log_ratio += out.log_ratio;
        state = out.value;
    }
    Ok(MhOutcome {
        value: state,
        accepted: any,
        log_ratio: total_log_ratio,
    })
}

/// One Metropolis-Hastings update of a single structural slot.
pub fn mh_step_slot<R: Rng + ?Sized>(
    slot: &str,
    current: &BTreeMap<String, f64>,
    context: &StructuralContext<'_>,
    prior: &HyperPrior,
    proposal: StructuralProposal,
    scale: f64,
    rng: &mut R,
) -> Result<MhOutcome<BTreeMap<String, f64>>> {
    let sp = prior.structural_prior(slot)?;
    let coord = sp.coordinate;
    let v = *current
        .get(slot)
        .ok_or_else(|| Error::UnboundSlot(slot.to_string()))?;
    let c = coord.to_coord(v).ok_or_else(|| {
        Error::Argument(format!(
            "current value of `{slot}` is outside its coordinate domain"
        ))
    })?;
    let reject = |log_ratio| MhOutcome {
        value: current.clone(),
        accepted: false,
        log_ratio,
    };

    let conditional = match proposal {
        StructuralProposal::Laplace => context.slot_conditional(slot, current)?,
        StructuralProposal::RandomWalk => None,
    };
    // log q(c' | c) − log q(c | c') for the proposal in coordinate space
    let (v_new, log_q_correction) = match conditional {
        Some((mu, var)) => {
            let e: f64 = rng.sample(StandardNormal);
            let v_new = mu + var.sqrt() * e;
            if coord.to_coord(v_new).is_none() {
                return Ok(reject(f64::NEG_INFINITY));
            }
            let q_new = log_normal_pdf(v_new, mu, var) + coord.log_jacobian(v_new);
            let q_old = log_normal_pdf(v, mu, var) + coord.log_jacobian(v);
            (v_new, q_old - q_new)
        }
        None => {
            let e: f64 = rng.sample(StandardNormal);
            (coord.from_coord(c + scale * e), 0.0)
        }
    };
    if v_new == v {
        return Ok(MhOutcome {
            value: current.clone(),
            accepted: true,
            log_ratio: 0.0,
        });
    }
    let Some(c_new) = coord.to_coord(v_new) else {
        return Ok(reject(f64::NEG_INFINITY));
    };
    let mut proposed = current.clone();
    proposed.insert(slot.to_string(), v_new);
    let lik_new = context.log_likelihood(&proposed)?;
    if lik_new == f64::NEG_INFINITY {
        return Ok(reject(f64::NEG_INFINITY));
    }
    let lik_old = context.log_likelihood(current)?;
    let log_ratio = lik_new + sp.log_density_coord(c_new) - lik_old - sp.log_density_coord(c)
        + log_q_correction;
    Ok(if accept(log_ratio, rng) {
        MhOutcome {
            value: proposed,
            accepted: true,
            log_ratio,
        }
    } else {
        reject(log_ratio)
    })
}

/// Joint move on one structural slot and the latent gradients.
///
/// Outcome of the joint move, with the remapped gradients when accepted.
pub type JointOutcome = (MhOutcome<BTreeMap<String, f64>>, Option<LatentTrajectory>);

/// The proposal `ϑ_S*` comes from a random walk in the prior's coordinate,
/// and every `h_t` is mapped to
/// `h_t* = (J − R)*⁻¹ ((J − R) h_t + (G − G*) u_t)`, which leaves every state
/// transition mean, and so `p(x | h, ϑ_S)`, unchanged. Acceptance then
/// involves only the collapsed gradient evidence `p(h | x, ϑ_K)`, the prior
/// and the Jacobian of the map. With small process noise the conditional of
/// `ϑ_S` given `h` is very narrow, and this move is what lets the chain
/// travel along it.
#[allow(clippy::too_many_arguments)]
pub fn mh_step_slot_joint<R: Rng + ?Sized>(
    slot: &str,
    current: &BTreeMap<String, f64>,
    context: &StructuralContext<'_>,
    expansion: &BasisExpansion,
    kernel: &KernelHyperparams,
    noise_prior: NoisePrior,
    prior: &HyperPrior,
    scale: f64,
    rng: &mut R,
) -> Result<JointOutcome> {
    let sp = prior.structural_prior(slot)?;
    let coord = sp.coordinate;
    let v = *current
        .get(slot)
        .ok_or_else(|| Error::UnboundSlot(slot.to_string()))?;
    let c = coord.to_coord(v).ok_or_else(|| {
        Error::Argument(format!(
            "current value of `{slot}` is outside its coordinate domain"
        ))
    })?;
    let reject = |log_ratio| {
        (
            MhOutcome {
                value: current.clone(),
                accepted: false,
                log_ratio,
            },
            None,
        )
    };
    let e: f64 = rng.sample(StandardNormal);
    let c_new = c + scale * e;
    let v_new = coord.from_coord(c_new);
    if v_new == v {
        return Ok((
            MhOutcome {
                value: current.clone(),
                accepted: true,
                log_ratio: 0.0,
            },
            None,
        ));
    }
    let mut proposed = current.clone();
    proposed.insert(slot.to_string(), v_new);
    let old = context.structure.matrices_with(current)?;
    let new = match context.structure.matrices_with(&proposed) {
        Ok(m) => m,
        Err(Error::Config(_)) => return Ok(reject(f64::NEG_INFINITY)),
        Err(e) => return Err(e),
    };
    let lu = new.jr.clone().lu();
    let (det_old, det_new) = (old.jr.determinant(), lu.determinant());
    if !(det_new.abs() > 0.0 && det_old.abs() > 0.0) {
        return Ok(reject(f64::NEG_INFINITY));
    }
    let tr = context.trajectory;
    let dg = &old.g - &new.g;
    let mut gradients = Vec::with_capacity(tr.len());
    for (h, u) in tr.gradients.iter().zip(context.inputs) {
        let rhs = &old.jr * DVector::from_column_slice(h) + &dg * DVector::from_column_slice(u);
        let h_new = lu.solve(&rhs).ok_or_else(|| Error::Numerical {
            what: "gradient compensation",
            detail: "singular J − R".into(),
        })?;
        gradients.push(h_new.as_slice().to_vec());
    }
    let moved = LatentTrajectory::new(tr.states.clone(), gradients)?;
    let eta = weight_prior(expansion, kernel, noise_prior)?;
    let stats_old = accumulate_stats(tr, expansion)?;
    let stats_new = accumulate_stats(&moved, expansion)?;
    let lik_old = log_normalizer_quotient(&eta, &stats_old)?;
    let lik_new = match log_normalizer_quotient(&eta, &stats_new) {
        Ok(v) => v,
        Err(Error::Numerical { .. }) => return Ok(reject(f64::NEG_INFINITY)),
        Err(e) => return Err(e),
    };
    let log_jacobian = tr.len() as f64 * (det_old.abs().ln() - det_new.abs().ln());
    let log_ratio =
        lik_new - lik_old + sp.log_density_coord(c_new) - sp.log_density_coord(c) + log_jacobian;
    Ok(if accept(log_ratio, rng) {
        (
            MhOutcome {
                value: proposed,
                accepted: true,
                log_ratio,
            },
            Some(moved),
        )
    } else {
        reject(log_ratio)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{DomainBox, SymmetryMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (BasisExpansion, SuffStats, HyperPrior) {
        let b = BasisExpansion::build(
            DomainBox::new(vec![4.0, 4.0]).unwrap(),
            6,
            12,
            SymmetryMode::None,
        )
        .unwrap();
        let states: Vec<Vec<f64>> = (0..40)
            .map(|t| vec![(t as f64 * 0.2).sin(), (t as f64 * 0.2).cos()])
            .collect();
        let grads: Vec<Vec<f64>> = states.iter().map(|x| vec![x[0], x[1]]).collect();
        let tr = LatentTrajectory::new(states, grads).unwrap();
        let stats = accumulate_stats(&tr, &b).unwrap();
        let prior = HyperPrior {
            signal_variance: ScalarPrior::log_normal(0.0, 1.0),
            lengthscale: ScalarPrior::log_normal(0.0, 1.0),
            structural: BTreeMap::from([("d".into(), ScalarPrior::log_normal(-2.0, 1.0))]),
        };
        (b, stats, prior)
    }

    #[test]
    fn zero_step_always_accepts() {
        let (b, stats, prior) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = KernelHyperparams::new(1.3, 0.8).unwrap();
        let noise = NoisePrior { psi: 1.0, nu: 2.0 };
        for _ in 0..20 {
            let out =
                mh_step_kernel_hypers(&h, &stats, &b, noise, &prior, [0.0, 0.0], &mut rng).unwrap();
            assert!(out.accepted);
            assert_eq!(out.log_ratio, 0.0);
            assert_eq!(out.value, h);
        }
    }

    #[test]
    fn log_coordinates_never_propose_negative() {
        let (b, stats, prior) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut h = KernelHyperparams::new(1.0, 1.0).unwrap();
        let noise = NoisePrior { psi: 1.0, nu: 2.0 };
        for _ in 0..200 {
            h = mh_step_kernel_hypers(&h, &stats, &b, noise, &prior, [1.5, 1.5], &mut rng)
                .unwrap()
                .value;
            assert!(h.signal_variance > 0.0 && h.lengthscale > 0.0);
        }
    }

    #[test]
    fn coordinate_round_trip() {
        assert_eq!(Coordinate::Log.to_coord(-1.0), None);
        assert!(
            (Coordinate::Log.from_coord(Coordinate::Log.to_coord(0.37).unwrap()) - 0.37).abs()
                < 1e-15
        );
        assert_eq!(Coordinate::Identity.to_coord(-2.0), Some(-2.0));
    }
}
