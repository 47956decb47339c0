//! Conjugate normal-inverse-Gamma updates for the basis weights and the
//! gradient-observation noise.
//!
//! The prior is `N(a | m, σ²V) IG(σ² | ψ, ν)` with the inverse-Gamma density
//! `(ψ/2)^{ν/2} / Γ(ν/2) · (σ²)^{−ν/2−1} exp(−ψ / (2σ²))`. Gradient
//! observations `h_t = J_φ(x_t) a + v_t`, `v_t ~ N(0, σ²I)`, enter only through
//! the statistics `s₁ = Σ J_φᵀh`, `s₂ = Σ hᵀh`, `r₁ = Σ J_φᵀJ_φ`, `r₂ = (T+1)n_x`.
//!
//! In natural-statistic form the prior contributes `r̃₂ = ν + 2 + M`; the
//! conversion back to an inverse-Gamma degrees-of-freedom parameter happens
//! in one place, [`params_from_stats`].

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::basis::BasisExpansion;
use crate::error::{Error, Result};
use crate::hamiltonian::GpParams;
use crate::linalg;
use crate::smc::LatentTrajectory;

/// Parameters `η = {m, V, ψ, ν}` of a normal-inverse-Gamma density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NigParams {
    pub mean: DVector<f64>,
    pub scale: DMatrix<f64>,
    pub psi: f64,
    pub nu: f64,
}

impl NigParams {
    pub fn new(mean: DVector<f64>, scale: DMatrix<f64>, psi: f64, nu: f64) -> Result<Self> {
        if scale.nrows() != mean.len() || !scale.is_square() {
            return Err(Error::dim("NIG scale matrix", mean.len(), scale.nrows()));
        }
        if !(psi > 0.0 && psi.is_finite()) || !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::Argument(format!(
                "NIG needs ψ > 0 and ν > 0, got ψ={psi}, ν={nu}"
            )));
        }
        Ok(Self {
            mean,
            scale,
            psi,
            nu,
        })
    }

    /// Zero-mean prior with diagonal scale `V = diag(variances)`.
    pub fn zero_mean_diagonal(variances: &[f64], psi: f64, nu: f64) -> Result<Self> {
        Self::new(
            DVector::zeros(variances.len()),
            DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
            psi,
            nu,
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `log NIG(a, σ² | η)`.
    pub fn log_density(&self, weights: &[f64], noise_variance: f64) -> Result<f64> {
        let m = self.dim() as f64;
        let chol = linalg::cholesky(&self.scale, "NIG scale matrix")?;
        let diff = DVector::from_column_slice(weights) - &self.mean;
        let quad = diff.dot(&chol.solve(&diff));
        Ok(log_normalizer(self)?
            - (self.nu / 2.0 + 1.0 + m / 2.0) * noise_variance.ln()
            - (self.psi + quad) / (2.0 * noise_variance))
    }
}

/// Trajectory statistics (or, after [`posterior_stats`], their sum with the
/// prior statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct SuffStats {
    pub s1: DVector<f64>,
    pub s2: f64,
    pub r1: DMatrix<f64>,
    pub r2: f64,
}

impl SuffStats {
    pub fn zeros(m: usize) -> Self {
        Self {
            s1: DVector::zeros(m),
            s2: 0.0,
            r1: DMatrix::zeros(m, m),
            r2: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.s1.len()
    }

    /// Adds the contribution of one gradient observation `h` at a point
    /// with basis Jacobian `jac` (column-major `n_x × M`).
    pub fn push(&mut self, jac: &[f64], h: &[f64]) {
        let n = h.len();
        let m = self.dim();
        for k in 0..m {
            let col_k = &jac[k * n..(k + 1) * n];
            self.s1[k] += col_k.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
            for l in k..m {
                let col_l = &jac[l * n..(l + 1) * n];
                let v: f64 = col_k.iter().zip(col_l).map(|(a, b)| a * b).sum();
                self.r1[(k, l)] += v;
                if l != k {
                    self.r1[(l, k)] += v;
                }
            }
        }
        self.s2 += h.iter().map(|v| v * v).sum::<f64>();
        self.r2 += n as f64;
    }

    pub fn add(&self, other: &SuffStats) -> Result<SuffStats> {
        if self.dim() != other.dim() {
            return Err(Error::dim("sufficient statistics", self.dim(), other.dim()));
        }
        Ok(SuffStats {
            s1: &self.s1 + &other.s1,
            s2: self.s2 + other.s2,
            r1: &self.r1 + &other.r1,
            r2: self.r2 + other.r2,
        })
    }
}

/// Statistics of a latent trajectory under the gradient-observation model.
pub fn accumulate_stats(
    trajectory: &LatentTrajectory,
    expansion: &BasisExpansion,
) -> Result<SuffStats> {
    let n = expansion.state_dim();
    if trajectory.state_dim() != n {
        return Err(Error::dim("trajectory state", n, trajectory.state_dim()));
    }
    let mut stats = SuffStats::zeros(expansion.len());
    let mut jac = vec![0.0; n * expansion.len()];
    for (x, h) in trajectory.states.iter().zip(&trajectory.gradients) {
        expansion.jacobian_into(x, &mut jac)?;
        stats.push(&jac, h);
    }
    Ok(stats)
}

/// Prior statistics plus data statistics: `s⁺ = s̃(η) + s`, `r⁺ = r̃(η) + r`.
pub fn posterior_stats(prior: &NigParams, stats: &SuffStats) -> Result<SuffStats> {
    if prior.dim() != stats.dim() {
        return Err(Error::dim(
            "sufficient statistics",
            prior.dim(),
            stats.dim(),
        ));
    }
    let m = prior.dim();
    let chol = linalg::cholesky(&prior.scale, "NIG prior scale")?;
    let v_inv = chol.inverse();
    let v_inv_m = &v_inv * &prior.mean;
    let prior_stats = SuffStats {
        s2: prior.psi + prior.mean.dot(&v_inv_m),
        s1: v_inv_m,
        r1: v_inv,
        r2: prior.nu + 2.0 + m as f64,
    };
    prior_stats.add(stats)
}

/// Converts summed natural statistics into `η⁺ = {m⁺, V⁺, ψ⁺, ν⁺}`.
pub fn params_from_stats(stats: &SuffStats) -> Result<NigParams> {
    let m = stats.dim();
    let r1 = (&stats.r1 + stats.r1.transpose()) * 0.5;
    let chol = linalg::cholesky(&r1, "posterior precision r₁⁺")?;
    let mean = chol.solve(&stats.s1);
    let scale = chol.inverse();
    let psi = stats.s2 - stats.s1.dot(&mean);
    let nu = stats.r2 - 2.0 - m as f64;
    if !(psi > 0.0) {
        return Err(Error::Numerical {
            what: "posterior scale ψ⁺",
            detail: format!("non-positive value {psi:e}"),
        });
    }
    NigParams::new(mean, scale, psi, nu)
}

/// Closed-form posterior `η⁺` given trajectory statistics.
pub fn posterior_update(prior: &NigParams, stats: &SuffStats) -> Result<NigParams> {
    params_from_stats(&posterior_stats(prior, stats)?)
}

/// `log n(η) = (ν/2) log(ψ/2) − (M/2) log 2π − ½ log|V| − log Γ(ν/2)`.
pub fn log_normalizer(params: &NigParams) -> Result<f64> {
    let m = params.dim() as f64;
    let log_det = if params.dim() == 0 {
        0.0
    } else {
        linalg::log_det(&linalg::cholesky(&params.scale, "NIG scale matrix")?)
    };
    Ok(params.nu / 2.0 * (params.psi / 2.0).ln()
        - m / 2.0 * (2.0 * PI).ln()
        - 0.5 * log_det
        - ln_gamma(params.nu / 2.0))
}

/// `log n(η) − log n(η⁺)`, the kernel-hyperparameter likelihood up to the
/// hyperparameter-independent base measures.
pub fn log_normalizer_quotient(prior: &NigParams, stats: &SuffStats) -> Result<f64> {
    let post = posterior_update(prior, stats)?;
    Ok(log_normalizer(prior)? - log_normalizer(&post)?)
}

/// `log ∫ ∏_t N(h_t | J_φ(x_t) a, σ²I) NIG(a, σ² | η) da dσ²`.
pub fn log_evidence(prior: &NigParams, stats: &SuffStats) -> Result<f64> {
    Ok(log_normalizer_quotient(prior, stats)? - stats.r2 / 2.0 * (2.0 * PI).ln())
}

/// Draws `σ² ~ IG(ψ, ν)` then `a ~ N(m, σ²V)`.
pub fn sample_nig<R: Rng + ?Sized>(params: &NigParams, rng: &mut R) -> Result<GpParams> {
    let gamma = Gamma::new(params.nu / 2.0, 1.0).map_err(|e| Error::Numerical {
        what: "inverse-gamma draw",
        detail: e.to_string(),
    })?;
    let g: f64 = gamma.sample(rng);
    let noise_variance = params.psi / 2.0 / g;
    let chol = linalg::cholesky(&params.scale, "NIG scale matrix")?;
    let xi = DVector::from_iterator(
        params.dim(),
        (0..params.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    let a = &params.mean + chol.l() * xi * noise_variance.sqrt();
    GpParams::new(a.as_slice().to_vec(), noise_variance)
}
