//! Independent numerical oracles shared by the integration tests. None of
//! these go through the conjugate-update code they are used to check.

#![allow(dead_code)]

use hamgp::basis::{BasisExpansion, DomainBox, KernelHyperparams, SymmetryMode};
use hamgp::hamiltonian::{predict_gradient, predict_hamiltonian, GpParams};
use hamgp::learn::{accumulate_stats, log_evidence, posterior_update, NigParams};
use hamgp::smc::{conditional_smc, CsmcOptions, StateSpaceModel};
use hamgp::LatentTrajectory;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log N(x; mean, cov)` by Cholesky.
pub fn log_mvn(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov
        .clone()
        .cholesky()
        .expect("covariance is positive definite");
    let diff = x - mean;
    let sol = chol.solve(&diff);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    -0.5 * (x.len() as f64 * LN_2PI + log_det + diff.dot(&sol))
}

/// `log IG(s; shape, scale)` with density `scale^shape / Γ(shape) s^(−shape−1) e^(−scale/s)`.
pub fn log_inv_gamma(s: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * s.ln() - scale / s
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels, computed on
/// log-values with a shift so tiny integrands do not underflow. Returns
/// `log ∫ exp(g)`.
pub fn log_simpson<F: Fn(f64) -> f64>(g: F, a: f64, b: f64, n: usize) -> f64 {
    assert!(n.is_multiple_of(2));
    let h = (b - a) / n as f64;
    let vals: Vec<f64> = (0..=n).map(|i| g(a + h * i as f64)).collect();
    let top = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    for (i, v) in vals.iter().enumerate() {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * (v - top).exp();
    }
    top + (acc * h / 3.0).ln()
}

/// Point of maximum of `g` on a coarse uniform grid.
pub fn coarse_argmax<F: Fn(f64) -> f64>(g: F, a: f64, b: f64, n: usize) -> f64 {
    (0..=n)
        .map(|i| a + (b - a) * i as f64 / n as f64)
        .max_by(|x, y| g(*x).total_cmp(&g(*y)))
        .unwrap()
}

/// A normal-inverse-gamma regression instance written out in plain
/// covariance form: `σ² ~ IG(ν/2, ψ/2)`, `a | σ² ~ N(m, σ² V)`,
/// `h | a, σ² ~ N(J a, σ² I)` with `J` stacking all per-step Jacobians.
pub struct NigInstance {
    pub m: DVector<f64>,
    pub v: DMatrix<f64>,
    pub psi: f64,
    pub nu: f64,
    pub j: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl NigInstance {
    pub fn log_prior(&self, a: &DVector<f64>, s2: f64) -> f64 {
        log_mvn(a, &self.m, &(&self.v * s2)) + log_inv_gamma(s2, self.nu / 2.0, self.psi / 2.0)
    }

    pub fn log_likelihood(&self, a: &DVector<f64>, s2: f64) -> f64 {
        let n = self.h.len();
        let r = &self.h - &self.j * a;
        -0.5 * (n as f64 * (LN_2PI + s2.ln()) + r.dot(&r) / s2)
    }

    /// `log p(h | σ²)` with `a` integrated out in covariance form.
    fn log_marginal_given_s2(&self, s2: f64) -> f64 {
        let n = self.h.len();
        let cov = (DMatrix::identity(n, n) + &self.j * &self.v * self.j.transpose()) * s2;
        log_mvn(&self.h, &(&self.j * &self.m), &cov)
    }

    /// `log p(h)` by quadrature over `log σ²` of the covariance-form
    /// marginal.
    pub fn log_evidence_1d(&self) -> f64 {
        let g = |t: f64| {
            let s2 = t.exp();
            self.log_marginal_given_s2(s2) + log_inv_gamma(s2, self.nu / 2.0, self.psi / 2.0) + t
        };
        let c = coarse_argmax(g, -40.0, 40.0, 4000);
        log_simpson(g, c - 25.0, c + 45.0, 40_000)
    }

    /// `log p(h)` by brute-force 2-D quadrature over `(a, log σ²)`; scalar
    /// weights only.
    pub fn log_evidence_2d(&self) -> f64 {
        assert_eq!(self.m.len(), 1, "2-D quadrature needs M = 1");
        let joint = |a: f64, s2: f64| {
            let av = DVector::from_element(1, a);
            self.log_prior(&av, s2) + self.log_likelihood(&av, s2)
        };
        let jj = (self.j.transpose() * &self.j)[(0, 0)];
        let jh = (self.j.transpose() * &self.h)[0];
        let prec0 = 1.0 / self.v[(0, 0)];
        // centre and width of the inner grid only; the value is integrated
        let centre = (prec0 * self.m[0] + jh) / (prec0 + jj);
        let inner = |t: f64| {
            let s2: f64 = t.exp();
            let sd = (s2 / (prec0 + jj)).sqrt();
            log_simpson(
                |a| joint(a, s2),
                centre - 14.0 * sd,
                centre + 14.0 * sd,
                2000,
            ) + t
        };
        let c = coarse_argmax(inner, -30.0, 30.0, 600);
        log_simpson(inner, c - 20.0, c + 35.0, 4000)
    }
}

/// Scalar linear-Gaussian model `x_{t+1} = φ x_t + w`, `y_t = x_t + e`.
pub struct ScalarLinearGaussian {
    pub phi: f64,
    pub q: f64,
    pub r: f64,
    pub m0: f64,
    pub p0: f64,
}

impl ScalarLinearGaussian {
    /// Kalman filtered means and variances.
    pub fn filter(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = y.len();
        let (mut mf, mut pf) = (vec![0.0; n], vec![0.0; n]);
        for t in 0..n {
            let (m_pred, p_pred) = if t == 0 {
                (self.m0, self.p0)
            } else {
                (
                    self.phi * mf[t - 1],
                    self.phi * self.phi * pf[t - 1] + self.q,
                )
            };
            let k = p_pred / (p_pred + self.r);
            mf[t] = m_pred + k * (y[t] - m_pred);
            pf[t] = (1.0 - k) * p_pred;
        }
        (mf, pf)
    }

    /// Rauch-Tung-Striebel smoothed means and variances.
    pub fn smooth(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (mf, pf) = self.filter(y);
        let (mut ms, mut ps) = (mf.clone(), pf.clone());
        for t in (0..y.len() - 1).rev() {
            let m_pred = self.phi * mf[t];
            let p_pred = self.phi * self.phi * pf[t] + self.q;
            let g = pf[t] * self.phi / p_pred;
            ms[t] = mf[t] + g * (ms[t + 1] - m_pred);
            ps[t] = pf[t] + g * g * (ps[t + 1] - p_pred);
        }
        (ms, ps)
    }
}

/// Monte Carlo standard error of the mean of a correlated series by batch
/// means.
pub fn batch_means_se(x: &[f64], batches: usize) -> f64 {
    let len = x.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| x[b * len..(b + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    let mu = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (
        m,
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0),
    )
}

/// Central finite difference of `f` along coordinate `i`.
pub fn central_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize, step: f64) -> f64 {
    let mut a = x.to_vec();
    let mut b = x.to_vec();
    a[i] += step;
    b[i] -= step;
    (f(&a) - f(&b)) / (2.0 * step)
}

/// Mean and variance of a density known up to a constant, by Simpson's
/// rule on `[a, b]` with `n` (even) panels.
pub fn grid_moments<F: Fn(f64) -> f64>(log_density: F, a: f64, b: f64, n: usize) -> (f64, f64) {
    assert!(n.is_multiple_of(2));
    let h = (b - a) / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| a + h * i as f64).collect();
    let lv: Vec<f64> = xs.iter().map(|x| log_density(*x)).collect();
    let top = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (i, (x, l)) in xs.iter().zip(&lv).enumerate() {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        } * (l - top).exp();
        z += w;
        s1 += w * x;
        s2 += w * x * x;
    }
    let mean = s1 / z;
    (mean, s2 / z - mean * mean)
}

struct Ar1<'a> {
    lg: &'a ScalarLinearGaussian,
    y: &'a [f64],
}

impl StateSpaceModel for Ar1<'_> {
    type State = f64;

    fn horizon(&self) -> usize {
        self.y.len()
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> hamgp::Result<f64> {
        Ok(self.lg.m0 + self.lg.p0.sqrt() * rng.sample::<f64, _>(StandardNormal))
    }

    fn sample_transition<R: Rng + ?Sized>(
        &self,
        _t: usize,
        prev: &f64,
        rng: &mut R,
    ) -> hamgp::Result<f64> {
        Ok(self.lg.phi * prev + self.lg.q.sqrt() * rng.sample::<f64, _>(StandardNormal))
    }

    fn log_transition(&self, _t: usize, prev: &f64, next: &f64) -> f64 {
        -0.5 * (next - self.lg.phi * prev).powi(2) / self.lg.q
    }

    fn log_likelihood(&self, t: usize, x: &f64) -> f64 {
        -0.5 * (self.y[t] - x).powi(2) / self.lg.r
    }
}

const SURROGATE: ScalarLinearGaussian = ScalarLinearGaussian {
    phi: 0.9,
    q: 0.25,
    r: 0.5,
    m0: 0.0,
    p0: 1.0,
};

/// `steps + 1` observations simulated from the AR(1) surrogate.
fn surrogate_data(rng: &mut ChaCha8Rng, steps: usize) -> Vec<f64> {
    let lg = &SURROGATE;
    let mut x = lg.m0 + lg.p0.sqrt() * rng.sample::<f64, _>(StandardNormal);
    let mut y = Vec::new();
    for _ in 0..=steps {
        y.push(x + lg.r.sqrt() * rng.sample::<f64, _>(StandardNormal));
        x = lg.phi * x + lg.q.sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
    y
}

/// Worst `|z|` of the per-step sample means, using 40 batch means for the
/// standard error, and worst relative error of the per-step variances.
pub fn smoother_discrepancy(draws: &[Vec<f64>], ms: &[f64], ps: &[f64]) -> (f64, f64) {
    let (mut worst_z, mut worst_var) = (0.0f64, 0.0f64);
    for t in 0..ms.len() {
        let (m, v) = mean_var(&draws[t]);
        let se = batch_means_se(&draws[t], 40);
        worst_z = worst_z.max((m - ms[t]).abs() / se);
        worst_var = worst_var.max((v / ps[t] - 1.0).abs());
    }
    (worst_z, worst_var)
}

/// CSMC with `N = 20` on the AR(1) surrogate with `steps + 1` observations:
/// 100 warm-up sweeps from a zero reference, then `sweeps` recorded sweeps,
/// compared with the smoother by [`smoother_discrepancy`].
pub fn kalman_comparison(
    ancestor_sampling: bool,
    steps: usize,
    sweeps: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = surrogate_data(&mut rng, steps);
    let (ms, ps) = SURROGATE.smooth(&y);
    let model = Ar1 {
        lg: &SURROGATE,
        y: &y,
    };
    let options = CsmcOptions {
        particles: 20,
        ancestor_sampling,
    };
    let mut reference = vec![0.0; y.len()];
    for _ in 0..100 {
        reference = conditional_smc(&model, &reference, options, &mut rng)
            .unwrap()
            .0;
    }
    let mut draws = vec![Vec::with_capacity(sweeps); y.len()];
    for _ in 0..sweeps {
        reference = conditional_smc(&model, &reference, options, &mut rng)
            .unwrap()
            .0;
        for (d, v) in draws.iter_mut().zip(&reference) {
            d.push(*v);
        }
    }
    smoother_discrepancy(&draws, &ms, &ps)
}

/// The same comparison for independent exact draws from the smoothing
/// distribution (forward filtering, backward sampling), which shows how
/// often an ideal sampler meets a given threshold.
pub fn exact_smoother_comparison(steps: usize, samples: usize, seed: u64) -> (f64, f64) {
    let lg = &SURROGATE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = surrogate_data(&mut rng, steps);
    let (ms, ps) = lg.smooth(&y);
    let (mf, pf) = lg.filter(&y);
    let n = y.len();
    let mut draws = vec![Vec::with_capacity(samples); n];
    for _ in 0..samples {
        let mut next = mf[n - 1] + pf[n - 1].sqrt() * rng.sample::<f64, _>(StandardNormal);
        draws[n - 1].push(next);
        for t in (0..n - 1).rev() {
            let pp = lg.phi * lg.phi * pf[t] + lg.q;
            let g = pf[t] * lg.phi / pp;
            let mean = mf[t] + g * (next - lg.phi * mf[t]);
            let var = pf[t] - g * g * pp;
            next = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
            draws[t].push(next);
        }
    }
    smoother_discrepancy(&draws, &ms, &ps)
}

/// A random small conjugate instance and its covariance-form oracle.
pub struct NigCase {
    pub prior: NigParams,
    pub expansion: BasisExpansion,
    pub trajectory: LatentTrajectory,
    pub oracle: NigInstance,
}

pub fn random_nig_case(rng: &mut ChaCha8Rng, m: usize, points: usize) -> NigCase {
    let expansion = BasisExpansion::build(
        DomainBox::new(vec![2.0, 2.0]).unwrap(),
        m,
        6,
        SymmetryMode::None,
    )
    .unwrap();
    let mut n = || rng.sample::<f64, _>(StandardNormal);
    let b = DMatrix::from_fn(m, m, |_, _| 0.5 * n());
    let scale = &b * b.transpose() + DMatrix::identity(m, m) * 0.5;
    let mean = DVector::from_fn(m, |_, _| n());
    let psi = rng.random_range(0.5..4.0);
    let nu = rng.random_range(1.0..8.0);
    let prior = NigParams::new(mean.clone(), scale.clone(), psi, nu).unwrap();
    let states: Vec<Vec<f64>> = (0..points)
        .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    let gradients: Vec<Vec<f64>> = (0..points)
        .map(|_| {
            vec![
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ]
        })
        .collect();
    let mut j = DMatrix::zeros(2 * points, m);
    for (t, x) in states.iter().enumerate() {
        j.rows_mut(2 * t, 2)
            .copy_from(&expansion.jacobian(x).unwrap());
    }
    let h = DVector::from_iterator(2 * points, gradients.iter().flatten().cloned());
    NigCase {
        prior,
        expansion,
        trajectory: LatentTrajectory::new(states, gradients).unwrap(),
        oracle: NigInstance {
            m: mean,
            v: scale,
            psi,
            nu,
            j,
            h,
        },
    }
}

/// Worst relative error of the conjugate posterior density against the
/// quadrature-normalised prior times likelihood, over `cases` instances with
/// `M ≤ 3`, `T + 1 ≤ 6` and 20 evaluation points each.
pub fn worst_posterior_density_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case_id in 0..cases {
        let m = 1 + case_id % 3;
        let points = 1 + (case_id / 3) % 6;
        let case = random_nig_case(&mut rng, m, points);
        let stats = accumulate_stats(&case.trajectory, &case.expansion).unwrap();
        let post = posterior_update(&case.prior, &stats).unwrap();
        let log_z = case.oracle.log_evidence_1d();
        for _ in 0..20 {
            let a = DVector::from_fn(m, |i, _| {
                post.mean[i] + 0.5 * rng.sample::<f64, _>(StandardNormal)
            });
            let s2 = (post.psi / post.nu.max(1.0)) * rng.random_range(-1.5f64..1.5).exp();
            let expected =
                case.oracle.log_prior(&a, s2) + case.oracle.log_likelihood(&a, s2) - log_z;
            let got = post.log_density(a.as_slice(), s2).unwrap();
            worst = worst.max((got - expected).exp_m1().abs());
        }
    }
    worst
}

/// Relative errors of the evidence quotient against 2-D quadrature on
/// `M = 1` instances with 1, 3 and 6 gradient observations.
pub fn evidence_relative_errors(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [1, 3, 6]
        .iter()
        .map(|&points| {
            let case = random_nig_case(&mut rng, 1, points);
            let stats = accumulate_stats(&case.trajectory, &case.expansion).unwrap();
            let got = log_evidence(&case.prior, &stats).unwrap();
            let expected = case.oracle.log_evidence_2d();
            ((got - expected) / expected).abs()
        })
        .collect()
}

pub const FD_STEP: f64 = 1e-5;

/// Relative tolerance 1e−6, with an absolute floor of 1e−9 for entries
/// that are zero up to the accuracy of the difference quotient.
pub fn fd_close(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= 1e-9 || err <= 1e-6 * analytic.abs().max(numeric.abs())
}

pub fn gradient_test_expansions() -> Vec<BasisExpansion> {
    vec![
        BasisExpansion::build(
            DomainBox::new(vec![8.0, 8.0]).unwrap(),
            20,
            12,
            SymmetryMode::None,
        )
        .unwrap(),
        BasisExpansion::build(
            DomainBox::new(vec![8.0, 8.0]).unwrap(),
            15,
            12,
            SymmetryMode::AntiSymmetric,
        )
        .unwrap(),
        BasisExpansion::build(
            DomainBox::new(vec![3.0, 5.0, 2.0]).unwrap(),
            12,
            6,
            SymmetryMode::None,
        )
        .unwrap(),
    ]
}

/// Compares the basis Jacobian with central differences at `points` random
/// points per expansion. Returns `(mismatches, entries checked)`.
pub fn jacobian_mismatches(seed: u64, points: usize) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut bad, mut total) = (0, 0);
    for b in gradient_test_expansions() {
        let bounds = b.domain().bounds().to_vec();
        for _ in 0..points {
            let x: Vec<f64> = bounds.iter().map(|l| rng.random_range(-l..*l)).collect();
            let jac = b.jacobian(&x).unwrap();
            for k in 0..b.len() {
                for i in 0..x.len() {
                    let fd = central_difference(|y| b.eval(y).unwrap()[k], &x, i, FD_STEP);
                    bad += usize::from(!fd_close(jac[(i, k)], fd));
                    total += 1;
                }
            }
        }
    }
    (bad, total)
}

/// As [`jacobian_mismatches`] for `∇Ĥ` with random weights.
pub fn predicted_gradient_mismatches(seed: u64, points: usize) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut bad, mut total) = (0, 0);
    for b in gradient_test_expansions() {
        let bounds = b.domain().bounds().to_vec();
        for _ in 0..points {
            let a: Vec<f64> = (0..b.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let params = GpParams::new(a, 1.0).unwrap();
            let x: Vec<f64> = bounds.iter().map(|l| rng.random_range(-l..*l)).collect();
            let g = predict_gradient(&b, &params, &x).unwrap();
            for (i, gi) in g.iter().enumerate() {
                let fd = central_difference(
                    |y| predict_hamiltonian(&b, &params, y).unwrap(),
                    &x,
                    i,
                    FD_STEP,
                );
                bad += usize::from(!fd_close(*gi, fd));
                total += 1;
            }
        }
    }
    (bad, total)
}

pub const KERNEL_BASIS_SIZES: [usize; 5] = [16, 32, 64, 128, 256];

/// Max abs error of the 1-D reduced-rank kernel on a 50-point grid over
/// the central half of `[−L, L]`, `L = 10ℓ`, for each basis size.
pub fn kernel_errors(hyper: &KernelHyperparams) -> Vec<f64> {
    let half_width = 10.0 * hyper.lengthscale;
    KERNEL_BASIS_SIZES
        .iter()
        .map(|&m| {
            let b = BasisExpansion::build(
                DomainBox::new(vec![half_width]).unwrap(),
                m,
                m as u32,
                SymmetryMode::None,
            )
            .unwrap();
            let grid: Vec<f64> = (0..50)
                .map(|i| -half_width / 2.0 + half_width * i as f64 / 49.0)
                .collect();
            let mut worst: f64 = 0.0;
            for x in &grid {
                for y in &grid {
                    let approx = b.approx_kernel(hyper, &[*x], &[*y]).unwrap();
                    worst = worst.max((approx - hyper.se_kernel(&[*x], &[*y])).abs());
                }
            }
            worst
        })
        .collect()
}
