//! The non-conservative Hamiltonian GP model
//! `ẋ = (J − R)∇Ĥ(x) + Gu` with `Ĥ(x) = aᵀφ(x)`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::basis::BasisExpansion;
use crate::error::{Error, Result};
use crate::linalg;

/// Eigenvalue floor below which an instantiated `R` is treated as indefinite.
pub const PSD_TOLERANCE: f64 = 1e-12;

/// Hamiltonian model parameters `θ = {a, σ²}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpParams {
    pub weights: Vec<f64>,
    pub noise_variance: f64,
}

impl GpParams {
    pub fn new(weights: Vec<f64>, noise_variance: f64) -> Result<Self> {
        if !(noise_variance.is_finite() && noise_variance > 0.0) {
            return Err(Error::Argument(format!(
                "gradient noise variance must be positive, got {noise_variance}"
            )));
        }
        Ok(Self {
            weights,
            noise_variance,
        })
    }

    fn check(&self, expansion: &BasisExpansion) -> Result<()> {
        if self.weights.len() != expansion.len() {
            return Err(Error::dim(
                "basis weights",
                expansion.len(),
                self.weights.len(),
            ));
        }
        Ok(())
    }
}

/// `Ĥ(x) = aᵀφ(x)`.
pub fn predict_hamiltonian(
    expansion: &BasisExpansion,
    params: &GpParams,
    x: &[f64],
) -> Result<f64> {
    params.check(expansion)?;
    let phi = expansion.eval(x)?;
    Ok(phi.iter().zip(&params.weights).map(|(p, a)| p * a).sum())
}

/// `∇Ĥ(x) = J_φ(x) a`.
pub fn predict_gradient(
    expansion: &BasisExpansion,
    params: &GpParams,
    x: &[f64],
) -> Result<Vec<f64>> {
    params.check(expansion)?;
    gradient_from_weights(expansion, &params.weights, x)
}

pub(crate) fn gradient_from_weights(
    expansion: &BasisExpansion,
    weights: &[f64],
    x: &[f64],
) -> Result<Vec<f64>> {
    let n = expansion.state_dim();
    let mut jac = vec![0.0; n * expansion.len()];
    expansion.jacobian_into(x, &mut jac)?;
    let mut g = vec![0.0; n];
    for (k, a) in weights.iter().enumerate() {
        for i in 0..n {
            g[i] += jac[k * n + i] * a;
        }
    }
    Ok(g)
}

/// One entry of a structure matrix pattern: a constant, a named
/// hyperparameter slot, or a negated slot.
///
/// In JSON a constant is a number, a slot is its name (`"d"`) and a negated
/// slot carries a leading minus (`"-d"`).
#[derive(Clone, Debug, PartialEq)]
pub enum PatternEntry {
    Const(f64),
    Slot(String),
    NegSlot(String),
}

impl PatternEntry {
    fn value(&self, hypers: &BTreeMap<String, f64>) -> Result<f64> {
        match self {
            PatternEntry::Const(v) => Ok(*v),
            PatternEntry::Slot(s) => hypers
                .get(s)
                .copied()
                .ok_or_else(|| Error::UnboundSlot(s.clone())),
            PatternEntry::NegSlot(s) => hypers
                .get(s)
                .map(|v| -v)
                .ok_or_else(|| Error::UnboundSlot(s.clone())),
        }
    }

    fn slot(&self) -> Option<&str> {
        match self {
            PatternEntry::Const(_) => None,
            PatternEntry::Slot(s) | PatternEntry::NegSlot(s) => Some(s),
        }
    }
}

impl Serialize for PatternEntry {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PatternEntry::Const(v) => s.serialize_f64(*v),
            PatternEntry::Slot(n) => s.serialize_str(n),
            PatternEntry::NegSlot(n) => s.serialize_str(&format!("-{n}")),
        }
    }
}

impl<'de> Deserialize<'de> for PatternEntry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct EntryVisitor;
        impl Visitor<'_> for EntryVisitor {
            type Value = PatternEntry;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or a slot name")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<PatternEntry, E> {
                Ok(PatternEntry::Const(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<PatternEntry, E> {
                Ok(PatternEntry::Const(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<PatternEntry, E> {
                Ok(PatternEntry::Const(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<PatternEntry, E> {
                let (neg, name) = match v.strip_prefix('-') {
                    Some(rest) => (true, rest.trim()),
                    None => (false, v.trim()),
                };
                if name.is_empty() {
                    return Err(E::custom("empty slot name"));
                }
                Ok(if neg {
                    PatternEntry::NegSlot(name.to_string())
                } else {
                    PatternEntry::Slot(name.to_string())
                })
            }
        }
        d.deserialize_any(EntryVisitor)
    }
}

/// Dense row-major matrix pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MatrixPattern(pub Vec<Vec<PatternEntry>>);

impl MatrixPattern {
    pub fn constant(rows: &[&[f64]]) -> Self {
        Self(
            rows.iter()
                .map(|r| r.iter().map(|v| PatternEntry::Const(*v)).collect())
                .collect(),
        )
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.0.len(), self.0.first().map_or(0, |r| r.len()))
    }

    fn instantiate(&self, hypers: &BTreeMap<String, f64>) -> Result<DMatrix<f64>> {
        let (r, c) = self.shape();
        let mut m = DMatrix::zeros(r, c);
        for (i, row) in self.0.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                m[(i, j)] = e.value(hypers)?;
            }
        }
        Ok(m)
    }

    fn slots(&self) -> impl Iterator<Item = &str> {
        self.0.iter().flatten().filter_map(|e| e.slot())
    }

    /// Entry-wise derivative with respect to `slot`.
    fn derivative(&self, slot: &str) -> DMatrix<f64> {
        let (r, c) = self.shape();
        DMatrix::from_fn(r, c, |i, j| match &self.0[i][j] {
            PatternEntry::Slot(s) if s == slot => 1.0,
            PatternEntry::NegSlot(s) if s == slot => -1.0,
            _ => 0.0,
        })
    }
}

/// Known patterns of `J`, `R`, `G` with structural hyperparameters `ϑ_S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemStructure {
    pub interconnection: MatrixPattern,
    pub dissipation: MatrixPattern,
    pub input: MatrixPattern,
    /// Current values of the structural hyperparameters.
    pub hypers: BTreeMap<String, f64>,
}

/// `J`, `R`, `G` with all slots bound.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureMatrices {
    pub j: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub g: DMatrix<f64>,
    /// `J − R`.
    pub jr: DMatrix<f64>,
}

impl SystemStructure {
    /// The damped oscillator: `J = [[0,1],[−1,0]]`, `R = diag(0, d)`, `G = [0,1]ᵀ`.
    pub fn oscillator(damping: f64) -> Self {
        use PatternEntry::*;
        Self {
            interconnection: MatrixPattern::constant(&[&[0.0, 1.0], &[-1.0, 0.0]]),
            dissipation: MatrixPattern(vec![
                vec![Const(0.0), Const(0.0)],
                vec![Const(0.0), Slot("d".into())],
            ]),
            input: MatrixPattern::constant(&[&[0.0], &[1.0]]),
            hypers: BTreeMap::from([("d".to_string(), damping)]),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.interconnection.shape().0
    }

    pub fn input_dim(&self) -> usize {
        self.input.shape().1
    }

    /// Distinct slot names referenced by any pattern, sorted.
    pub fn slot_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .interconnection
            .slots()
            .chain(self.dissipation.slots())
            .chain(self.input.slots())
            .map(str::to_string)
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Checks pattern shapes and that every slot has a value.
    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let shapes = [
            ("J", self.interconnection.shape(), (n, n)),
            ("R", self.dissipation.shape(), (n, n)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Config(format!(
                    "{name} pattern is {got:?}, expected {want:?}"
                )));
            }
        }
        if self.input.shape().0 != n {
            return Err(Error::Config(format!(
                "G pattern has {} rows, expected {n}",
                self.input.shape().0
            )));
        }
        for pat in [&self.interconnection, &self.dissipation, &self.input] {
            let (_, c) = pat.shape();
            if pat.0.iter().any(|row| row.len() != c) {
                return Err(Error::Config("ragged matrix pattern".into()));
            }
        }
        for s in self.slot_names() {
            if !self.hypers.contains_key(&s) {
                return Err(Error::UnboundSlot(s));
            }
        }
        Ok(())
    }

    /// Binds the current hyperparameters.
    pub fn matrices(&self) -> Result<StructureMatrices> {
        self.matrices_with(&self.hypers)
    }

    /// Binds `hypers` without any structural checks.
    pub(crate) fn unchecked_matrices_with(
        &self,
        hypers: &BTreeMap<String, f64>,
    ) -> Result<StructureMatrices> {
        let j = self.interconnection.instantiate(hypers)?;
        let r = self.dissipation.instantiate(hypers)?;
        let g = self.input.instantiate(hypers)?;
        let jr = &j - &r;
        Ok(StructureMatrices { j, r, g, jr })
    }

    /// Binds `hypers`, failing if `J` is not skew-symmetric or `R` is not PSD.
    pub fn matrices_with(&self, hypers: &BTreeMap<String, f64>) -> Result<StructureMatrices> {
        let StructureMatrices { j, r, g, .. } = self.unchecked_matrices_with(hypers)?;
        let skew = (&j + j.transpose()).amax();
        if skew > 1e-12 * j.amax().max(1.0) {
            return Err(Error::Config(format!(
                "J is not skew-symmetric (|J + Jᵀ| = {skew:e})"
            )));
        }
        let asym = (&r - r.transpose()).amax();
        if asym > 1e-12 * r.amax().max(1.0) {
            return Err(Error::Config(format!(
                "R is not symmetric (|R − Rᵀ| = {asym:e})"
            )));
        }
        let min_eig = linalg::min_symmetric_eigenvalue(&r);
        if min_eig < -PSD_TOLERANCE {
            return Err(Error::Config(format!(
                "R is not positive semi-definite (min eigenvalue {min_eig:e})"
            )));
        }
        let jr = &j - &r;
        Ok(StructureMatrices { j, r, g, jr })
    }

    /// Derivatives of `J − R` and `G` with respect to one slot. Every
    /// pattern is affine in its slots, so these are constant.
    pub fn slot_derivative(&self, slot: &str) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            self.interconnection.derivative(slot) - self.dissipation.derivative(slot),
            self.input.derivative(slot),
        )
    }

    pub fn with_hypers(&self, hypers: BTreeMap<String, f64>) -> Self {
        Self {
            hypers,
            ..self.clone()
        }
    }
}

impl StructureMatrices {
    pub fn state_dim(&self) -> usize {
        self.j.nrows()
    }

    /// `(J − R) grad + G u`.
    pub fn flow(&self, grad: &[f64], u: &[f64]) -> Vec<f64> {
        let n = self.state_dim();
        (0..n)
            .map(|i| {
                let drift: f64 = grad
                    .iter()
                    .enumerate()
                    .map(|(k, gk)| self.jr[(i, k)] * gk)
                    .sum();
                let forcing: f64 = u
                    .iter()
                    .enumerate()
                    .map(|(k, uk)| self.g[(i, k)] * uk)
                    .sum();
                drift + forcing
            })
            .collect()
    }

    /// `gradᵀ (J − R) grad`, the unforced rate of energy change.
    ///
    /// The skew part is accumulated pairwise on the shared product `g_i g_j`
    /// so it cancels exactly for an exactly skew `J`.
    pub fn energy_rate(&self, grad: &[f64]) -> f64 {
        let n = grad.len();
        let mut skew = 0.0;
        let mut dissipated = 0.0;
        for i in 0..n {
            for k in 0..n {
                let p = grad[i] * grad[k];
                if k > i {
                    skew += self.j[(i, k)] * p + self.j[(k, i)] * p;
                }
                dissipated += self.r[(i, k)] * p;
            }
        }
        skew - dissipated
    }
}

/// Covariances and output selection for the discrete-time model.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    process_cov: DMatrix<f64>,
    measurement_cov: DMatrix<f64>,
    output_components: Vec<usize>,
}

impl NoiseSpec {
    pub fn new(
        process_cov: DMatrix<f64>,
        measurement_cov: DMatrix<f64>,
        output_components: Vec<usize>,
    ) -> Result<Self> {
        let n = process_cov.nrows();
        if !process_cov.is_square() {
            return Err(Error::Config("process covariance must be square".into()));
        }
        if measurement_cov.nrows() != output_components.len() || !measurement_cov.is_square() {
            return Err(Error::Config(format!(
                "measurement covariance must be {0}x{0}",
                output_components.len()
            )));
        }
        if let Some(c) = output_components.iter().find(|c| **c >= n) {
            return Err(Error::Config(format!(
                "output selects state component {c} but n_x = {n}"
            )));
        }
        for (name, m) in [("process", &process_cov), ("measurement", &measurement_cov)] {
            if (m - m.transpose()).amax() > 1e-14 * m.amax().max(1e-300) {
                return Err(Error::Config(format!("{name} covariance is not symmetric")));
            }
        }
        if linalg::min_symmetric_eigenvalue(&process_cov) < -PSD_TOLERANCE {
            return Err(Error::Config("process covariance is not PSD".into()));
        }
        linalg::cholesky(&measurement_cov, "measurement covariance")
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            process_cov,
            measurement_cov,
            output_components,
        })
    }

    /// Isotropic noise with the given standard deviations.
    pub fn isotropic(
        n_x: usize,
        process_std: f64,
        measurement_std: f64,
        output_components: Vec<usize>,
    ) -> Result<Self> {
        let n_y = output_components.len();
        Self::new(
            DMatrix::identity(n_x, n_x) * (process_std * process_std),
            DMatrix::identity(n_y, n_y) * (measurement_std * measurement_std),
            output_components,
        )
    }

    pub fn process_cov(&self) -> &DMatrix<f64> {
        &self.process_cov
    }

    pub fn measurement_cov(&self) -> &DMatrix<f64> {
        &self.measurement_cov
    }

    pub fn output_components(&self) -> &[usize] {
        &self.output_components
    }

    pub fn output_dim(&self) -> usize {
        self.output_components.len()
    }

    /// `g(x)`: the selected state components.
    pub fn observe(&self, x: &[f64]) -> Vec<f64> {
        self.output_components.iter().map(|&c| x[c]).collect()
    }
}

/// `(J − R)∇Ĥ(x) + Gu`.
pub fn drift(
    expansion: &BasisExpansion,
    params: &GpParams,
    matrices: &StructureMatrices,
    x: &[f64],
    u: &[f64],
) -> Result<Vec<f64>> {
    check_io(matrices, x, u)?;
    let grad = predict_gradient(expansion, params, x)?;
    Ok(matrices.flow(&grad, u))
}

fn check_io(matrices: &StructureMatrices, x: &[f64], u: &[f64]) -> Result<()> {
    if x.len() != matrices.state_dim() {
        return Err(Error::dim("state", matrices.state_dim(), x.len()));
    }
    if u.len() != matrices.g.ncols() {
        return Err(Error::dim("input", matrices.g.ncols(), u.len()));
    }
    Ok(())
}

fn check_step(delta: f64) -> Result<()> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::Argument(format!(
            "step size must be positive, got {delta}"
        )));
    }
    Ok(())
}

/// Explicit Euler: `x + δ · drift(x, u)`.
pub fn euler_step(
    expansion: &BasisExpansion,
    params: &GpParams,
    matrices: &StructureMatrices,
    x: &[f64],
    u: &[f64],
    delta: f64,
) -> Result<Vec<f64>> {
    check_step(delta)?;
    let f = drift(expansion, params, matrices, x, u)?;
    Ok(x.iter().zip(&f).map(|(xi, fi)| xi + delta * fi).collect())
}

/// Euler transition mean driven by a latent gradient `h` instead of `∇Ĥ(x)`:
/// `x + δ((J − R)h + Gu)`.
pub fn transition_mean(
    matrices: &StructureMatrices,
    x: &[f64],
    h: &[f64],
    u: &[f64],
    delta: f64,
) -> Vec<f64> {
    let f = matrices.flow(h, u);
    x.iter().zip(&f).map(|(xi, fi)| xi + delta * fi).collect()
}

/// Momentum-first semi-implicit Euler for a canonical state `x = (q, p)`:
/// `p⁺ = p + δ F_p(q, p)`, then `q⁺ = q + δ F_q(q, p⁺)` with
/// `F = (J − R)∇H + Gu`.
pub fn symplectic_euler_step<F>(
    gradient: F,
    matrices: &StructureMatrices,
    x: &[f64],
    u: &[f64],
    delta: f64,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    check_step(delta)?;
    check_io(matrices, x, u)?;
    let n = x.len();
    if !n.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "symplectic Euler needs a (q, p) partition, state dimension {n} is odd"
        )));
    }
    let nq = n / 2;
    let f = matrices.flow(&gradient(x)?, u);
    let mut next = x.to_vec();
    for i in nq..n {
        next[i] = x[i] + delta * f[i];
    }
    let f_half = matrices.flow(&gradient(&next)?, u);
    for i in 0..nq {
        next[i] = x[i] + delta * f_half[i];
    }
    Ok(next)
}
