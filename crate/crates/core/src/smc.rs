//! Conditional sequential Monte Carlo on joint latent paths
//! `z_t = {x_t, h_t}`.
//!
//! [`conditional_smc`] works for any [`StateSpaceModel`]; [`csmc_sweep`] binds
//! it to the Hamiltonian GP transition
//! `x_t ~ N(x_{t−1} + δ((J − R)h_{t−1} + Gu_{t−1}), Σ_w)`,
//! `h_t ~ N(J_φ(x_t)a, σ²I)`, `y_t ~ N(g(x_t), Σ_e)`.
//!
//! The last particle slot holds the reference path. The free particles are
//! resampled multinomially at every step: their ancestors must be independent
//! draws from the weights given the reference, which independent systematic
//! draws are not (the chain's stationary law drifts measurably off the
//! smoother). [`systematic_resample`] is kept for unconditional filtering.

use std::cell::Cell;
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::BasisExpansion;
use crate::error::{Error, Result};
use crate::hamiltonian::{transition_mean, GpParams, NoiseSpec, StructureMatrices};
use crate::linalg;

/// A sampled path of states and gradient observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTrajectory {
    pub states: Vec<Vec<f64>>,
    pub gradients: Vec<Vec<f64>>,
}

impl LatentTrajectory {
    pub fn new(states: Vec<Vec<f64>>, gradients: Vec<Vec<f64>>) -> Result<Self> {
        if states.len() != gradients.len() {
            return Err(Error::dim(
                "trajectory gradient path",
                states.len(),
                gradients.len(),
            ));
        }
        if states.is_empty() {
            return Err(Error::Argument(
                "trajectory needs at least one time point".into(),
            ));
        }
        let n = states[0].len();
        if states.iter().chain(&gradients).any(|v| v.len() != n) {
            return Err(Error::Argument(
                "inconsistent state dimensions in trajectory".into(),
            ));
        }
        Ok(Self { states, gradients })
    }

    /// Number of time points `T + 1`.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    fn joint(&self, t: usize) -> Vec<f64> {
        let mut z = self.states[t].clone();
        z.extend_from_slice(&self.gradients[t]);
        z
    }

    fn from_joint(path: Vec<Vec<f64>>, n_x: usize) -> Self {
        let (states, gradients) = path
            .into_iter()
            .map(|mut z| {
                let h = z.split_off(n_x);
                (z, h)
            })
            .unzip();
        Self { states, gradients }
    }
}

/// A multivariate normal with a cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct Gaussian {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(Error::dim("gaussian covariance", mean.len(), cov.nrows()));
        }
        let chol = linalg::cholesky(cov, "gaussian covariance")?;
        let log_norm = -0.5 * (mean.len() as f64 * (2.0 * PI).ln() + linalg::log_det(&chol));
        Ok(Self {
            mean: DVector::from_vec(mean),
            chol,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    /// Log-density of `x` under `N(mean, Σ)`.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, b)| a - b).collect();
        self.log_pdf_centered(&diff)
    }

    /// Log-density of a zero-mean deviation.
    pub fn log_pdf_centered(&self, diff: &[f64]) -> f64 {
        // forward substitution with the lower factor
        let l = self.chol.l_dirty();
        let n = diff.len();
        let mut z = [0.0f64; 8];
        let mut heap;
        let w: &mut [f64] = if n <= 8 {
            &mut z[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        let mut quad = 0.0;
        for i in 0..n {
            let mut s = diff[i];
            for k in 0..i {
                s -= l[(i, k)] * w[k];
            }
            w[i] = s / l[(i, i)];
            quad += w[i] * w[i];
        }
        self.log_norm - 0.5 * quad
    }

    /// Draws `mean + offset + L ξ`.
    pub fn sample_shifted<R: Rng + ?Sized>(&self, offset: &[f64], rng: &mut R) -> Vec<f64> {
        let l = self.chol.l_dirty();
        let n = self.dim();
        let xi: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        (0..n)
            .map(|i| {
                let mut v = self.mean[i] + offset[i];
                for k in 0..=i {
                    v += l[(i, k)] * xi[k];
                }
                v
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let zero = vec![0.0; self.dim()];
        self.sample_shifted(&zero, rng)
    }
}

/// Exact multivariate normal log-density via a Cholesky factorisation.
pub fn log_gaussian(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mean.len() {
        return Err(Error::dim("gaussian argument", mean.len(), x.len()));
    }
    Ok(Gaussian::new(mean.to_vec(), cov)?.log_pdf(x))
}

/// Systematic resampling of `weights.len()` ancestors with offset `u ∈ [0, 1)`.
pub fn systematic_resample(weights: &[f64], u: f64) -> Result<Vec<usize>> {
    systematic_resample_n(weights, u, weights.len())
}

/// Systematic resampling of `count` ancestors: position `(i + u) / count`
/// selects the first index whose cumulative weight exceeds it.
pub fn systematic_resample_n(weights: &[f64], u: f64, count: usize) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::Argument(
            "cannot resample an empty weight vector".into(),
        ));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Argument(format!(
            "resampling weight {w} is negative or not finite"
        )));
    }
    if !(0.0..1.0).contains(&u) {
        return Err(Error::Argument(format!(
            "systematic offset must lie in [0, 1), got {u}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "weights sum to {total}, expected 1"
        )));
    }
    let n = count as f64;
    let mut out = Vec::with_capacity(count);
    let mut cum = 0.0;
    let mut taken = 0usize;
    let last = weights.len() - 1;
    for (j, w) in weights.iter().enumerate() {
        cum += w;
        let scaled = if j == last { n } else { snap(n * cum / total) };
        // number of positions (i + u) strictly below `scaled`
        let upto = ((scaled - u).ceil().max(0.0) as usize).min(count);
        while taken < upto {
            out.push(j);
            taken += 1;
        }
    }
    Ok(out)
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Normalises log-weights in place into probabilities, returning the
/// effective sample size. `None` when every weight vanished.
pub fn normalize_log_weights(log_weights: &[f64], out: &mut Vec<f64>) -> Option<f64> {
    let max = log_weights
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    out.clear();
    out.extend(
        log_weights
            .iter()
            .map(|lw| if lw.is_nan() { 0.0 } else { (lw - max).exp() }),
    );
    let s: f64 = out.iter().sum();
    if !(s.is_finite() && s > 0.0) {
        return None;
    }
    out.iter_mut().for_each(|w| *w /= s);
    Some(1.0 / out.iter().map(|w| w * w).sum::<f64>())
}

/// A state-space model the conditional particle filter can run on.
pub trait StateSpaceModel {
    type State: Clone;

    /// Number of time points `T + 1`.
    fn horizon(&self) -> usize;

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self::State>;

    /// Draws `z_t | z_{t−1}`.
    fn sample_transition<R: Rng + ?Sized>(
        &self,
        t: usize,
        prev: &Self::State,
        rng: &mut R,
    ) -> Result<Self::State>;

    /// `log p(z_t | z_{t−1})` up to terms independent of `prev`.
    fn log_transition(&self, t: usize, prev: &Self::State, next: &Self::State) -> f64;

    /// `log p(y_t | z_t)`.
    fn log_likelihood(&self, t: usize, state: &Self::State) -> f64;
}

#[derive(Clone, Copy, Debug)]
pub struct CsmcOptions {
    pub particles: usize,
    pub ancestor_sampling: bool,
}

impl Default for CsmcOptions {
    fn default() -> Self {
        Self {
            particles: 30,
            ancestor_sampling: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepDiagnostics {
    /// Effective sample size after weighting, per time step.
    pub ess: Vec<f64>,
    /// Steps at which ancestor sampling moved the reference lineage.
    pub reference_ancestor_changes: usize,
}

impl SweepDiagnostics {
    pub fn mean_ess(&self) -> f64 {
        if self.ess.is_empty() {
            0.0
        } else {
            self.ess.iter().sum::<f64>() / self.ess.len() as f64
        }
    }

    pub fn min_ess(&self) -> f64 {
        self.ess.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|p| *p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// One conditional SMC sweep returning a single path drawn from the final
/// particle weights.
pub fn conditional_smc<M, R>(
    model: &M,
    reference: &[M::State],
    options: CsmcOptions,
    rng: &mut R,
) -> Result<(Vec<M::State>, SweepDiagnostics)>
where
    M: StateSpaceModel,
    R: Rng + ?Sized,
{
    let n = options.particles;
    if n < 2 {
        return Err(Error::Argument(format!(
            "conditional SMC needs at least 2 particles, got {n}"
        )));
    }
    let horizon = model.horizon();
    if reference.len() != horizon {
        return Err(Error::dim("reference trajectory", horizon, reference.len()));
    }
    let r = n - 1;
    let mut diag = SweepDiagnostics::default();
    let mut particles: Vec<Vec<M::State>> = Vec::with_capacity(horizon);
    let mut ancestors: Vec<Vec<usize>> = Vec::with_capacity(horizon);
    let mut log_w = vec![0.0; n];
    let mut weights = Vec::with_capacity(n);

    let mut current = Vec::with_capacity(n);
    for _ in 0..r {
        current.push(model.sample_initial(rng)?);
    }
    current.push(reference[0].clone());
    for (lw, z) in log_w.iter_mut().zip(&current) {
        *lw = model.log_likelihood(0, z);
    }
    particles.push(current);
    ancestors.push((0..n).collect());

    let mut as_logits = vec![0.0; n];
    let mut as_probs = Vec::with_capacity(n);
    for t in 1..horizon {
        let ess = normalize_log_weights(&log_w, &mut weights)
            .ok_or(Error::DegenerateSweep { step: t - 1 })?;
        diag.ess.push(ess);
        let prev = &particles[t - 1];
        let picker = WeightedIndex::new(&weights).map_err(|e| Error::Numerical {
            what: "resampling weights",
            detail: e.to_string(),
        })?;
        let mut anc: Vec<usize> = (0..r).map(|_| picker.sample(rng)).collect();
        let ref_anc = if options.ancestor_sampling {
            for i in 0..n {
                as_logits[i] = if weights[i] > 0.0 {
                    weights[i].ln() + model.log_transition(t, &prev[i], &reference[t])
                } else {
                    f64::NEG_INFINITY
                };
            }
            match normalize_log_weights(&as_logits, &mut as_probs) {
                Some(_) => draw_categorical(&as_probs, rng),
                None => r,
            }
        } else {
            r
        };
        if ref_anc != r {
            diag.reference_ancestor_changes += 1;
        }
        let mut next = Vec::with_capacity(n);
        for &a in &anc {
            next.push(model.sample_transition(t, &prev[a], rng)?);
        }
        next.push(reference[t].clone());
        anc.push(ref_anc);
        for (lw, z) in log_w.iter_mut().zip(&next) {
            *lw = model.log_likelihood(t, z);
        }
        particles.push(next);
        ancestors.push(anc);
    }
    let ess = normalize_log_weights(&log_w, &mut weights)
        .ok_or(Error::DegenerateSweep { step: horizon - 1 })?;
    diag.ess.push(ess);

    let mut b = draw_categorical(&weights, rng);
    let mut path = Vec::with_capacity(horizon);
    for t in (0..horizon).rev() {
        path.push(particles[t][b].clone());
        b = ancestors[t][b];
    }
    path.reverse();
    Ok((path, diag))
}

/// Observed data `{u_t, y_t}` on a common time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl Observations {
    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(Error::dim("input sequence", outputs.len(), inputs.len()));
        }
        if outputs.is_empty() {
            return Err(Error::Argument("no observations".into()));
        }
        Ok(Self { inputs, outputs })
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// The Hamiltonian GP model as a state-space model on `z = [x, h]`.
pub struct HamiltonianSsm<'a> {
    expansion: &'a BasisExpansion,
    weights: &'a [f64],
    noise_std: f64,
    matrices: &'a StructureMatrices,
    delta: f64,
    data: &'a Observations,
    process: Gaussian,
    measurement: Gaussian,
    outputs: Vec<usize>,
    initial: Gaussian,
    out_of_domain: Cell<usize>,
    jac: std::cell::RefCell<Vec<f64>>,
}

impl<'a> HamiltonianSsm<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        expansion: &'a BasisExpansion,
        params: &'a GpParams,
        matrices: &'a StructureMatrices,
        noise: &NoiseSpec,
        initial: &Gaussian,
        data: &'a Observations,
        delta: f64,
    ) -> Result<Self> {
        let n_x = expansion.state_dim();
        if params.weights.len() != expansion.len() {
            return Err(Error::dim(
                "basis weights",
                expansion.len(),
                params.weights.len(),
            ));
        }
        if matrices.state_dim() != n_x || initial.dim() != n_x {
            return Err(Error::dim("model state", n_x, matrices.state_dim()));
        }
        if let Some(y) = data.outputs.iter().find(|y| y.len() != noise.output_dim()) {
            return Err(Error::dim("measurement", noise.output_dim(), y.len()));
        }
        if let Some(u) = data.inputs.iter().find(|u| u.len() != matrices.g.ncols()) {
            return Err(Error::dim("input", matrices.g.ncols(), u.len()));
        }
        if !(delta > 0.0) {
            return Err(Error::Argument(format!(
                "step size must be positive, got {delta}"
            )));
        }
        Ok(Self {
            expansion,
            weights: &params.weights,
            noise_std: params.noise_variance.sqrt(),
            matrices,
            delta,
            data,
            process: Gaussian::new(vec![0.0; n_x], noise.process_cov())?,
            measurement: Gaussian::new(vec![0.0; noise.output_dim()], noise.measurement_cov())?,
            outputs: noise.output_components().to_vec(),
            initial: initial.clone(),
            out_of_domain: Cell::new(0),
            jac: std::cell::RefCell::new(vec![0.0; n_x * expansion.len()]),
        })
    }

    /// How many sampled states fell outside the basis domain.
    pub fn out_of_domain_count(&self) -> usize {
        self.out_of_domain.get()
    }

    fn n_x(&self) -> usize {
        self.expansion.state_dim()
    }

    fn attach_gradient<R: Rng + ?Sized>(&self, x: Vec<f64>, rng: &mut R) -> Result<Vec<f64>> {
        if !self.expansion.domain().contains(&x) {
            self.out_of_domain.set(self.out_of_domain.get() + 1);
        }
        let n = self.n_x();
        let mut jac = self.jac.borrow_mut();
        self.expansion.jacobian_into(&x, &mut jac)?;
        let mut z = x;
        z.reserve(n);
        for i in 0..n {
            let mut g = 0.0;
            for (k, a) in self.weights.iter().enumerate() {
                g += jac[k * n + i] * a;
            }
            let e: f64 = rng.sample(StandardNormal);
            z.push(g + self.noise_std * e);
        }
        Ok(z)
    }

    fn mean_next(&self, t: usize, prev: &[f64]) -> Vec<f64> {
        let n = self.n_x();
        transition_mean(
            self.matrices,
            &prev[..n],
            &prev[n..],
            &self.data.inputs[t - 1],
            self.delta,
        )
    }
}

impl StateSpaceModel for HamiltonianSsm<'_> {
    type State = Vec<f64>;

    fn horizon(&self) -> usize {
        self.data.len()
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let x = self.initial.sample(rng);
        self.attach_gradient(x, rng)
    }

    fn sample_transition<R: Rng + ?Sized>(
        &self,
        t: usize,
        prev: &Vec<f64>,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mean = self.mean_next(t, prev);
        let x = self.process.sample_shifted(&mean, rng);
        self.attach_gradient(x, rng)
    }

    // The h-factor p(h_t | x_t) of the transition depends only on `next` and
    // cancels when normalising over ancestors.
    fn log_transition(&self, t: usize, prev: &Vec<f64>, next: &Vec<f64>) -> f64 {
        let n = self.n_x();
        let mean = self.mean_next(t, prev);
        let diff: Vec<f64> = next[..n].iter().zip(&mean).map(|(a, b)| a - b).collect();
        self.process.log_pdf_centered(&diff)
    }

    fn log_likelihood(&self, t: usize, state: &Vec<f64>) -> f64 {
        let diff: Vec<f64> = self
            .outputs
            .iter()
            .zip(&self.data.outputs[t])
            .map(|(&c, y)| y - state[c])
            .collect();
        self.measurement.log_pdf_centered(&diff)
    }
}

/// Result of a Hamiltonian CSMC sweep.
#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub trajectory: LatentTrajectory,
    pub diagnostics: SweepDiagnostics,
    pub out_of_domain: usize,
}

/// Draws a new latent trajectory conditioned on `reference`.
#[allow(clippy::too_many_arguments)]
pub fn csmc_sweep<R: Rng + ?Sized>(
    data: &Observations,
    reference: &LatentTrajectory,
    params: &GpParams,
    matrices: &StructureMatrices,
    noise: &NoiseSpec,
    expansion: &BasisExpansion,
    initial: &Gaussian,
    options: CsmcOptions,
    delta: f64,
    rng: &mut R,
) -> Result<SweepOutput> {
    if reference.len() != data.len() {
        return Err(Error::dim(
            "reference trajectory",
            data.len(),
            reference.len(),
        ));
    }
    let model = HamiltonianSsm::new(expansion, params, matrices, noise, initial, data, delta)?;
    let joint: Vec<Vec<f64>> = (0..reference.len()).map(|t| reference.joint(t)).collect();
    let (path, diagnostics) = conditional_smc(&model, &joint, options, rng)?;
    Ok(SweepOutput {
        trajectory: LatentTrajectory::from_joint(path, expansion.state_dim()),
        diagnostics,
        out_of_domain: model.out_of_domain_count(),
    })
}
