//! Reduced-rank GP basis: Laplace eigenfunctions on a box domain.
//!
//! On `Ω = [−L₁, L₁] × ⋯ × [−L_n, L_n]` with Dirichlet boundary conditions the
//! eigenfunctions are products of sines,
//!
//! ```text
//! φ_k(x) = ∏_i L_i^{-1/2} sin(π j_{k,i} (x_i + L_i) / (2 L_i))
//! ϱ_k    = Σ_i (π j_{k,i} / (2 L_i))²
//! ```
//!
//! and a stationary kernel is approximated by `Σ_k S(√ϱ_k) φ_k(x) φ_k(x')`.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default upper bound on each per-dimension index when enumerating tuples.
pub const DEFAULT_MAX_INDEX_PER_DIM: u32 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    bounds: Vec<f64>,
}

impl DomainBox {
    pub fn new(bounds: Vec<f64>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::Config("domain needs at least one dimension".into()));
        }
        if let Some(b) = bounds.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(Error::Config(format!(
                "domain bounds must be positive and finite, got {b}"
            )));
        }
        Ok(Self { bounds })
    }

    pub fn bounds(&self) -> &[f64] {
        &self.bounds
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    /// Whether `x` lies in the closed box.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.bounds.len() && x.iter().zip(&self.bounds).all(|(v, l)| v.abs() <= *l)
    }
}

/// Which index tuples are admitted into the dictionary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetryMode {
    #[default]
    None,
    /// Only basis functions with `φ(−x) = −φ(x)`: the number of even indices
    /// in the tuple is odd.
    AntiSymmetric,
    /// Every index even. Odd under negation only when `n_x` is odd.
    AllEvenIndices,
    /// Every index odd, so each factor is even in its own coordinate and
    /// `φ` is even under flipping any single coordinate.
    AllOddIndices,
}

impl SymmetryMode {
    pub fn admits(self, index: &[u32]) -> bool {
        let evens = index.iter().filter(|j| j.is_multiple_of(2)).count();
        match self {
            SymmetryMode::None => true,
            SymmetryMode::AntiSymmetric => evens % 2 == 1,
            SymmetryMode::AllEvenIndices => evens == index.len(),
            SymmetryMode::AllOddIndices => evens == 0,
        }
    }
}

/// Squared-exponential kernel hyperparameters `{σ_f², ℓ}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub signal_variance: f64,
    pub lengthscale: f64,
}

impl KernelHyperparams {
    pub fn new(signal_variance: f64, lengthscale: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(signal_variance) || !ok(lengthscale) {
            return Err(Error::Argument(format!(
                "kernel hyperparameters must be positive, got σ_f²={signal_variance}, ℓ={lengthscale}"
            )));
        }
        Ok(Self {
            signal_variance,
            lengthscale,
        })
    }

    /// The exact squared-exponential kernel.
    pub fn se_kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.signal_variance * (-r2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }
}

/// Spectral density of the squared-exponential kernel in `n_x` dimensions.
pub fn spectral_density_se(hyper: &KernelHyperparams, omega: f64, n_x: usize) -> f64 {
    let l2 = hyper.lengthscale * hyper.lengthscale;
    hyper.signal_variance
        * (2.0 * PI * l2).powf(n_x as f64 / 2.0)
        * (-l2 * omega * omega / 2.0).exp()
}

/// Prior weight variances `S(√ϱ_k)` for a list of eigenvalues.
pub fn weight_prior_variances(
    eigenvalues: &[f64],
    hyper: &KernelHyperparams,
    n_x: usize,
) -> Vec<f64> {
    eigenvalues
        .iter()
        .map(|rho| spectral_density_se(hyper, rho.sqrt(), n_x))
        .collect()
}

fn eigenvalue(bounds: &[f64], index: &[u32]) -> f64 {
    index
        .iter()
        .zip(bounds)
        .map(|(j, l)| {
            let w = PI * f64::from(*j) / (2.0 * l);
            w * w
        })
        .sum()
}

/// A fixed dictionary of `M` eigenfunctions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisExpansion {
    domain: DomainBox,
    indices: Vec<Vec<u32>>,
    eigenvalues: Vec<f64>,
    symmetry: SymmetryMode,
}

/// Number of admissible tuples in `{1..max_index}^{n_x}` under `symmetry`.
pub fn admissible_count(n_x: usize, max_index: u32, symmetry: SymmetryMode) -> usize {
    IndexGrid::new(n_x, max_index)
        .filter(|t| symmetry.admits(t))
        .count()
}

struct IndexGrid {
    current: Option<Vec<u32>>,
    max: u32,
}

impl IndexGrid {
    fn new(n: usize, max: u32) -> Self {
        let current = (n > 0 && max > 0).then(|| vec![1; n]);
        Self { current, max }
    }
}

impl Iterator for IndexGrid {
    type Item = Vec<u32>;

    fn next(&mut self) -> Option<Vec<u32>> {
        let out = self.current.clone()?;
        let cur = self.current.as_mut().unwrap();
        // odometer increment, last coordinate fastest
        let mut pos = cur.len();
        loop {
            if pos == 0 {
                self.current = None;
                break;
            }
            pos -= 1;
            if cur[pos] < self.max {
                cur[pos] += 1;
                break;
            }
            cur[pos] = 1;
        }
        Some(out)
    }
}

/// Evaluations of `sin`/`cos` of each coordinate at every index in use.
struct TrigTable {
    sin: Vec<Vec<f64>>,
    cos: Vec<Vec<f64>>,
}

impl BasisExpansion {
    /// Selects the `m` admissible index tuples with the smallest eigenvalues,
    /// ties broken lexicographically on the tuple.
    pub fn build(
        domain: DomainBox,
        m: usize,
        max_index_per_dim: u32,
        symmetry: SymmetryMode,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("basis size M must be positive".into()));
        }
        if max_index_per_dim == 0 {
            return Err(Error::Config("max_index_per_dim must be positive".into()));
        }
        let bounds = domain.bounds().to_vec();
        let mut candidates: Vec<(f64, Vec<u32>)> = IndexGrid::new(domain.dim(), max_index_per_dim)
            .filter(|t| symmetry.admits(t))
            .map(|t| (eigenvalue(&bounds, &t), t))
            .collect();
        if candidates.len() < m {
            return Err(Error::Config(format!(
                "requested M = {m} basis functions but only {} admissible tuples exist \
                 for n_x = {}, max index {max_index_per_dim}, symmetry {symmetry:?} (short by {})",
                candidates.len(),
                domain.dim(),
                m - candidates.len()
            )));
        }
        candidates.sort_by(|a, b| match a.0.total_cmp(&b.0) {
            Ordering::Equal => a.1.cmp(&b.1),
            o => o,
        });
        candidates.truncate(m);
        let (eigenvalues, indices) = candidates.into_iter().unzip();
        Ok(Self {
            domain,
            indices,
            eigenvalues,
            symmetry,
        })
    }

    /// Rebuilds an expansion from stored metadata, checking that the stored
    /// eigenvalues agree with the indices.
    pub fn from_parts(
        domain: DomainBox,
        indices: Vec<Vec<u32>>,
        symmetry: SymmetryMode,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("basis needs at least one index tuple".into()));
        }
        for idx in &indices {
            if idx.len() != domain.dim() || idx.contains(&0) {
                return Err(Error::Config(format!("invalid index tuple {idx:?}")));
            }
        }
        let eigenvalues = indices
            .iter()
            .map(|t| eigenvalue(domain.bounds(), t))
            .collect();
        Ok(Self {
            domain,
            indices,
            eigenvalues,
            symmetry,
        })
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn indices(&self) -> &[Vec<u32>] {
        &self.indices
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn symmetry(&self) -> SymmetryMode {
        self.symmetry
    }

    /// Number of basis functions `M`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.domain.dim()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::dim(
                "basis evaluation point",
                self.state_dim(),
                x.len(),
            ));
        }
        Ok(())
    }

    fn trig_table(&self, x: &[f64]) -> TrigTable {
        let n = self.state_dim();
        let mut sin = Vec::with_capacity(n);
        let mut cos = Vec::with_capacity(n);
        for (i, (&xi, &l)) in x.iter().zip(self.domain.bounds()).enumerate() {
            let jmax = self.indices.iter().map(|t| t[i]).max().unwrap_or(0) as usize;
            let mut s = vec![0.0; jmax + 1];
            let mut c = vec![0.0; jmax + 1];
            for j in 1..=jmax {
                let (sj, cj) = (PI * j as f64 * (xi + l) / (2.0 * l)).sin_cos();
                s[j] = sj;
                c[j] = cj;
            }
            sin.push(s);
            cos.push(c);
        }
        TrigTable { sin, cos }
    }

    fn norm(&self) -> f64 {
        self.domain
            .bounds()
            .iter()
            .map(|l| 1.0 / l.sqrt())
            .product()
    }

    /// `φ(x)`, one entry per basis function.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let trig = self.trig_table(x);
        let norm = self.norm();
        Ok(self
            .indices
            .iter()
            .map(|t| {
                t.iter()
                    .enumerate()
                    .fold(norm, |acc, (i, &j)| acc * trig.sin[i][j as usize])
            })
            .collect())
    }

    /// `J_φ(x)`, the `n_x × M` matrix of partial derivatives `∂φ_k/∂x_i`.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.state_dim();
        let mut out = DMatrix::zeros(n, self.len());
        self.jacobian_into(x, out.as_mut_slice())?;
        Ok(out)
    }

    /// Column-major `n_x × M` Jacobian written into `out`.
    pub fn jacobian_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_dim(x)?;
        let n = self.state_dim();
        if out.len() != n * self.len() {
            return Err(Error::dim("jacobian buffer", n * self.len(), out.len()));
        }
        let trig = self.trig_table(x);
        let norm = self.norm();
        let bounds = self.domain.bounds();
        for (k, t) in self.indices.iter().enumerate() {
            for i in 0..n {
                let mut v =
                    norm * PI * f64::from(t[i]) / (2.0 * bounds[i]) * trig.cos[i][t[i] as usize];
                for (ip, &jp) in t.iter().enumerate() {
                    if ip != i {
                        v *= trig.sin[ip][jp as usize];
                    }
                }
                out[k * n + i] = v;
            }
        }
        Ok(())
    }

    /// Diagonal of the prior weight covariance `V = diag(S(√ϱ_k))`.
    pub fn prior_variances(&self, hyper: &KernelHyperparams) -> Vec<f64> {
        weight_prior_variances(&self.eigenvalues, hyper, self.state_dim())
    }

    /// The prior weight covariance as a dense diagonal matrix.
    pub fn prior_weight_covariance(&self, hyper: &KernelHyperparams) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.prior_variances(hyper)))
    }

    /// Reduced-rank approximation of the SE kernel.
    pub fn approx_kernel(&self, hyper: &KernelHyperparams, x: &[f64], y: &[f64]) -> Result<f64> {
        let px = self.eval(x)?;
        let py = self.eval(y)?;
        Ok(self
            .prior_variances(hyper)
            .iter()
            .zip(px.iter().zip(&py))
            .map(|(s, (a, b))| s * a * b)
            .sum())
    }
}
