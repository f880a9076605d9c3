//! Numerical checks of the convergence theory: the four-term error
//! decomposition, source-condition fits, Lipschitz and variance probes,
//! concentration of the operator noise, and synthetic rate experiments.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::irgnm::{self, IrgnmConfig, IrgnmRun};
use crate::kde::{DensityModel, KernelSpec};
use crate::numerics::GridFn;
use crate::operators::{DensityFields, FieldRequest, ForwardModel, IvProblem};
use crate::regularization::{filter_g, filter_r, FilterParams, PenaltySpace};
use crate::simulation::{generate_sample, Scenario};
use crate::stats::{self, fit_line, LineFit};
use crate::stopping::{a_priori_stop, default_phi, lepskii_select_by, NoiseLevels, PhiBound, TheoryConstants};

/// Singular value profile of a synthetic operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decay {
    /// `σ_t = t^{-s}`
    Polynomial(f64),
    /// `σ_t = e^{-c t}`
    Exponential(f64),
}

impl Decay {
    pub fn values(&self, modes: usize) -> DVector<f64> {
        DVector::from_fn(modes, |i, _| {
            let t = (i + 1) as f64;
            match *self {
                Decay::Polynomial(s) => t.powf(-s),
                Decay::Exponential(c) => (-c * t).exp(),
            }
        })
    }
}

/// Ground truth that the error decomposition needs: `φ†`, the noise-free
/// derivative `T† = F'(φ†)`, and the source representation
/// `φ_0 − φ† = (T†*T†)^μ ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub phi_true: DVector<f64>,
    pub t_true: DMatrix<f64>,
    pub mu: f64,
    pub omega: DVector<f64>,
}

/// `F(x) = Σ σ_t x_t e_t + (β/2)‖x‖² e_1` on `ℝ^N` with identity metrics,
/// observed as `F̂(x) = F(x) − F(x†) + E(x − x†) + ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProblem {
    sigma: DVector<f64>,
    beta: f64,
    phi0: DVector<f64>,
    oracle: Oracle,
    noise: DVector<f64>,
    deriv_noise: DMatrix<f64>,
}

/// `f(A*A)` for a dense `A` with identity metrics, by eigendecomposition.
fn normal_function(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = (a.transpose() * a).symmetric_eigen();
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| f(l.max(0.0))));
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

impl SyntheticProblem {
    /// Noise-free problem with `φ_0 = 0` and `φ† = −(T†*T†)^μ ω`. With
    /// `β ≠ 0` the coupling between `φ†` and `T†` is resolved by fixed-point
    /// iteration.
    pub fn new(sigma: DVector<f64>, mu: f64, omega: DVector<f64>, beta: f64) -> Result<Self> {
        let n = sigma.len();
        if n == 0 {
            return Err(invalid("singular_values", "must not be empty"));
        }
        if omega.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: omega.len(),
            });
        }
        if sigma.iter().any(|s| !(*s > 0.0)) || sigma.as_slice().windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("singular_values", "must be positive and strictly decreasing"));
        }
        if !(mu > 0.0) {
            return Err(invalid("mu", "must be positive"));
        }
        if !beta.is_finite() {
            return Err(Error::NonFinite("beta"));
        }
        let phi0 = DVector::zeros(n);
        let mut phi_true = DVector::zeros(n);
        let mut converged = false;
        for _ in 0..200 {
            let t = Self::true_derivative(&sigma, beta, &phi_true);
            let next = -(normal_function(&t, |l| l.powf(mu)) * &omega);
            let change = (&next - &phi_true).norm();
            phi_true = next;
            if change <= 1e-15 * (1.0 + phi_true.norm()) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numerical("source fixed point did not converge; reduce beta".into()));
        }
        let t_true = Self::true_derivative(&sigma, beta, &phi_true);
        Ok(Self {
            oracle: Oracle {
                phi_true,
                t_true,
                mu,
                omega,
            },
            sigma,
            beta,
            phi0,
            noise: DVector::zeros(n),
            deriv_noise: DMatrix::zeros(n, n),
        })
    }

    /// `ω_t = t^{-1/2}`: with polynomially decaying `σ_t` the approximation
    /// error then decays exactly like `α^μ` over the resolved range.
    pub fn default_omega(modes: usize) -> DVector<f64> {
        DVector::from_fn(modes, |i, _| ((i + 1) as f64).powf(-0.5))
    }

    fn true_derivative(sigma: &DVector<f64>, beta: f64, x: &DVector<f64>) -> DMatrix<f64> {
        let mut t = DMatrix::from_diagonal(sigma);
        if beta != 0.0 {
            for k in 0..x.len() {
                t[(0, k)] += beta * x[k];
            }
        }
        t
    }

    fn exact_value(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut v = self.sigma.component_mul(x);
        v[0] += 0.5 * self.beta * x.norm_squared();
        v
    }

    /// Replaces the data noise `ξ` and the derivative perturbation `E`.
    pub fn with_noise(mut self, noise: DVector<f64>, deriv_noise: DMatrix<f64>) -> Result<Self> {
        let n = self.sigma.len();
        if noise.len() != n || deriv_noise.shape() != (n, n) {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: noise.len(),
            });
        }
        self.noise = noise;
        self.deriv_noise = deriv_noise;
        Ok(self)
    }

    /// Gaussian `ξ` scaled so that `E‖ξ‖ ≈ δ`, and a Gaussian `E` scaled to
    /// spectral norm `δ_der`.
    pub fn with_random_noise(self, delta: f64, delta_der: f64, rng: &mut impl Rng) -> Result<Self> {
        let n = self.sigma.len();
        let scale = delta / (n as f64).sqrt();
        let xi = DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let mut e = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        if delta_der > 0.0 {
            let norm = e.singular_values().max();
            e *= delta_der / norm;
        } else {
            e.fill(0.0);
        }
        self.with_noise(xi, e)
    }

    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    pub fn phi0(&self) -> &DVector<f64> {
        &self.phi0
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn noise(&self) -> &DVector<f64> {
        &self.noise
    }

    /// `‖ω‖`.
    pub fn rho(&self) -> f64 {
        self.oracle.omega.norm()
    }

    /// `‖r_α(T†*T†)(φ_0 − φ†)‖` for each `α`.
    pub fn approximation_errors(&self, alphas: &[f64], m: usize) -> Result<Vec<f64>> {
        let eig = (self.oracle.t_true.transpose() * &self.oracle.t_true).symmetric_eigen();
        let e0 = &self.phi0 - &self.oracle.phi_true;
        let coef = eig.eigenvectors.transpose() * e0;
        alphas
            .iter()
            .map(|&a| {
                let p = FilterParams::new(a, m)?;
                Ok(coef
                    .iter()
                    .zip(eig.eigenvalues.iter())
                    .map(|(c, l)| (filter_r(l.max(0.0), p) * c).powi(2))
                    .sum::<f64>()
                    .sqrt())
            })
            .collect()
    }
}

impl ForwardModel for SyntheticProblem {
    fn dim(&self) -> usize {
        self.sigma.len()
    }

    fn image_weights(&self) -> DVector<f64> {
        DVector::from_element(self.sigma.len(), 1.0)
    }

    fn penalty_gram(&self, _space: PenaltySpace) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(self.sigma.len(), self.sigma.len()))
    }

    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let dx = x - &self.oracle.phi_true;
        Ok(self.exact_value(x) - self.exact_value(&self.oracle.phi_true) + &self.deriv_noise * dx + &self.noise)
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(Self::true_derivative(&self.sigma, self.beta, x) + &self.deriv_noise)
    }

    fn is_linear(&self) -> bool {
        self.beta == 0.0
    }
}

/// Spectral calculus for `T*T` where `T*` is the adjoint between the
/// weighted image norm and the penalty metric `G = L Lᵀ`.
struct Spectral {
    l: DMatrix<f64>,
    values: DVector<f64>,
    vectors: DMatrix<f64>,
    b: DMatrix<f64>,
    sqrt_w: DVector<f64>,
}

impl Spectral {
    fn new(t: &DMatrix<f64>, weights: &DVector<f64>, gram: &DMatrix<f64>) -> Result<Self> {
        let l = gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("penalty Gram matrix is not positive definite".into()))?
            .l();
        let sqrt_w = weights.map(|w| w.sqrt());
        let wt = DMatrix::from_fn(t.nrows(), t.ncols(), |i, k| sqrt_w[i] * t[(i, k)]);
        // B = W^{1/2} T L^{-T}
        let b = l
            .solve_lower_triangular(&wt.transpose())
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?
            .transpose();
        let eig = (b.transpose() * &b).symmetric_eigen();
        Ok(Self {
            l,
            values: eig.eigenvalues.map(|v| v.max(0.0)),
            vectors: eig.eigenvectors,
            b,
            sqrt_w,
        })
    }

    fn to_coords(&self, v: &DVector<f64>) -> DVector<f64> {
        self.vectors.transpose() * (self.l.transpose() * v)
    }

    fn to_ambient(&self, c: DVector<f64>) -> DVector<f64> {
        self.l
            .transpose()
            .solve_upper_triangular(&(&self.vectors * c))
            .expect("nonsingular factor")
    }

    /// `f(T*T) v`
    fn apply(&self, f: impl Fn(f64) -> f64, v: &DVector<f64>) -> DVector<f64> {
        let mut c = self.to_coords(v);
        for (ci, l) in c.iter_mut().zip(self.values.iter()) {
            *ci *= f(*l);
        }
        self.to_ambient(c)
    }

    /// `f(T*T) T* y`
    fn apply_adjoint(&self, f: impl Fn(f64) -> f64, y: &DVector<f64>) -> DVector<f64> {
        let wy = y.component_mul(&self.sqrt_w);
        let mut c = self.vectors.transpose() * (self.b.transpose() * wy);
        for (ci, l) in c.iter_mut().zip(self.values.iter()) {
            *ci *= f(*l);
        }
        self.to_ambient(c)
    }
}

/// The four components of `φ̂_{j+1} − φ†`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDecomposition {
    pub step: usize,
    pub alpha: f64,
    pub e_app: DVector<f64>,
    pub e_noi: DVector<f64>,
    pub e_der: DVector<f64>,
    pub e_nl: DVector<f64>,
    pub total: DVector<f64>,
}

impl ErrorDecomposition {
    /// `‖(e_app + e_noi + e_der + e_nl) − (φ̂_{j+1} − φ†)‖`.
    pub fn closure_residual(&self) -> f64 {
        (&self.e_app + &self.e_noi + &self.e_der + &self.e_nl - &self.total).norm()
    }
}

/// Decomposes iterate `j + 1` of `run` (computed from iterate `j` with
/// `α_j`) into approximation, propagated-noise, derivative-noise and
/// nonlinearity errors. Norm-dependent quantities use the model's image
/// weights and the run's penalty metric.
pub fn decompose_error<M: ForwardModel + ?Sized>(
    model: &M,
    oracle: Option<&Oracle>,
    run: &IrgnmRun,
    cfg: &IrgnmConfig,
    j: usize,
) -> Result<ErrorDecomposition> {
    let oracle = oracle.ok_or(Error::MissingOracle)?;
    if j + 1 >= run.len() {
        return Err(invalid("step", format!("iterate {} not in a run of length {}", j + 1, run.len())));
    }
    if run.emergency_steps.contains(&(j + 1)) {
        return Err(invalid("step", format!("iterate {} was reset to the initial guess", j + 1)));
    }
    let weights = model.image_weights();
    let gram = run.gram();
    let p = FilterParams::new(run.alphas[j], cfg.m)?;
    let mu = oracle.mu;
    let g = |l: f64| filter_g(l, p);
    let r = |l: f64| filter_r(l, p);
    let lam = |l: f64| l.powf(mu);

    let phi_j = &run.iterates[j];
    let phi_t = &oracle.phi_true;
    let s_j = Spectral::new(&model.jacobian(phi_j)?, &weights, gram)?;
    let s_hat = Spectral::new(&model.jacobian(phi_t)?, &weights, gram)?;
    let s_true = Spectral::new(&oracle.t_true, &weights, gram)?;
    let t_j = model.jacobian(phi_j)?;
    let f_true = model.residual(phi_t)?;

    let lam_hat_omega = s_hat.apply(lam, &oracle.omega);
    let e_app = s_hat.apply(|l| r(l) * lam(l), &oracle.omega);
    let e_noi = s_j.apply_adjoint(g, &(-&f_true));
    let lam_diff = s_true.apply(lam, &oracle.omega) - &lam_hat_omega;
    let e_der = s_j.apply(r, &lam_diff);
    let taylor = &f_true - model.residual(phi_j)? + &t_j * (phi_j - phi_t);
    let e_nl = s_j.apply_adjoint(g, &taylor) + s_j.apply(r, &lam_hat_omega) - s_hat.apply(r, &lam_hat_omega);
    Ok(ErrorDecomposition {
        step: j + 1,
        alpha: p.alpha(),
        e_app,
        e_noi,
        e_der,
        e_nl,
        total: &run.iterates[j + 1] - phi_t,
    })
}

/// Fitted source condition `e_0 ≈ (T*T)^μ ω`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceFit {
    pub mu_hat: f64,
    /// `√k · exp(intercept)`: the norm of a flat `ω` over the `k` modes used.
    pub rho_hat: f64,
    pub fit: LineFit,
}

/// Regresses `log|⟨e_0, v_t⟩|` on `log σ_t²` over the right singular vectors
/// of `T` with `σ_t ≥ 1e-8 σ_1` and a coefficient above round-off.
pub fn fit_source_condition(t: &DMatrix<f64>, e0: &DVector<f64>) -> Result<SourceFit> {
    if t.ncols() != e0.len() {
        return Err(Error::ShapeMismatch {
            expected: t.ncols(),
            got: e0.len(),
        });
    }
    let svd = t.clone().svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let s_max = svd.singular_values.max();
    let floor = 1e-10 * e0.norm();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (k, s) in svd.singular_values.iter().enumerate() {
        let c = v_t.row(k).transpose().dot(e0).abs();
        if *s >= 1e-8 * s_max && *s > 0.0 && c > floor {
            xs.push((s * s).ln());
            ys.push(c.ln());
        }
    }
    const MIN_MODES: usize = 5;
    if xs.len() < MIN_MODES {
        return Err(Error::InsufficientModes {
            needed: MIN_MODES,
            found: xs.len(),
        });
    }
    let fit = fit_line(&xs, &ys)?;
    Ok(SourceFit {
        mu_hat: fit.slope,
        rho_hat: (xs.len() as f64).sqrt() * fit.intercept.exp(),
        fit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    /// Largest sampled `‖T̂(ξ_1) − T̂(ξ_2)‖ / ‖ξ_1 − ξ_2‖`.
    pub empirical: f64,
    pub analytic: f64,
    pub ratios: Vec<f64>,
}

/// Operator norm from `L²(X)` (trapezoid weights) to the weighted image
/// space.
fn weighted_operator_norm(m: &DMatrix<f64>, image_w: &DVector<f64>, x_w: &[f64]) -> f64 {
    let a = DMatrix::from_fn(m.nrows(), m.ncols(), |i, k| image_w[i].sqrt() * m[(i, k)] / x_w[k].sqrt());
    a.singular_values().max()
}

/// Samples `n_pairs` pairs in the `L²` ball of `radius` around `center`
/// (smooth random perturbations) and compares the empirical Lipschitz
/// ratio of the derivative with the analytic bound.
pub fn lipschitz_probe(
    problem: &IvProblem,
    center: &GridFn,
    radius: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<LipschitzReport> {
    let gx = *problem.x_grid();
    if center.grid() != &gx {
        return Err(Error::GridMismatch("center is not on the operator's x grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_w = gx.trapezoid_weights();
    let image_w = problem.image_norm().weight_vector();
    let nodes = gx.nodes();
    let draw = |rng: &mut ChaCha8Rng| -> Result<GridFn> {
        let coef: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let u = GridFn::new(
            gx,
            nodes
                .iter()
                .map(|&x| {
                    let s = (x - gx.a()) / gx.length();
                    coef.iter()
                        .enumerate()
                        .map(|(k, c)| c * ((k as f64 + 1.0) * std::f64::consts::PI * s).sin() / (k as f64 + 1.0))
                        .sum::<f64>()
                        + 0.3 * coef[0]
                })
                .collect(),
        )?;
        let nrm = u.norm_l2();
        let scale = if nrm > 0.0 { radius * rng.random::<f64>() / nrm } else { 0.0 };
        center.combine(1.0, &u, scale)
    };
    let mut ratios = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let a = draw(&mut rng)?;
        let b = draw(&mut rng)?;
        let dist = a.sub(&b)?.norm_l2();
        if dist <= 1e-14 {
            continue;
        }
        let ma = problem.assemble_derivative_matrix(&a)?;
        let mb = problem.assemble_derivative_matrix(&b)?;
        ratios.push(weighted_operator_norm(&(ma - mb), &image_w, &x_w) / dist);
    }
    Ok(LipschitzReport {
        empirical: ratios.iter().cloned().fold(0.0, f64::max),
        analytic: problem.analytic_lipschitz_bound(),
        ratios,
    })
}

/// Which operator a noise probe evaluates at `φ†`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeOperator {
    Ind,
    Quant { q: f64 },
}

impl ProbeOperator {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeOperator::Ind => "ind",
            ProbeOperator::Quant { .. } => "quant",
        }
    }
}

/// `F̂(φ†)` for one simulated sample, flattened, with its image weights.
pub fn operator_noise_image(
    scn: &Scenario,
    op: ProbeOperator,
    n: usize,
    h: f64,
    grid_n: usize,
    kernel: KernelSpec,
    seed: u64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let sample = generate_sample(scn, n, seed)?;
    let model = DensityModel::new(sample, kernel, h)?;
    let grid = scn.grid(grid_n)?;
    let request = FieldRequest {
        derivative: matches!(op, ProbeOperator::Ind),
        cdf: matches!(op, ProbeOperator::Quant { .. }),
        conditional_mean: false,
    };
    let fields = DensityFields::from_kde(&model, grid, request)?;
    let truth = scn.phi_true_fn(grid.gx);
    let problem = match op {
        ProbeOperator::Ind => IvProblem::ind(&fields, &truth, 1.0)?,
        ProbeOperator::Quant { q } => IvProblem::quant(&fields, q)?,
    };
    Ok((problem.apply(&truth)?.to_dvector(), problem.image_norm().weight_vector()))
}

/// `‖F̂(φ†)‖` for one simulated sample.
pub fn operator_noise_norm(
    scn: &Scenario,
    op: ProbeOperator,
    n: usize,
    h: f64,
    grid_n: usize,
    kernel: KernelSpec,
    seed: u64,
) -> Result<f64> {
    let (v, w) = operator_noise_image(scn, op, n, h, grid_n, kernel, seed)?;
    Ok(weighted_norm(&v, &w))
}

fn weighted_norm(v: &DVector<f64>, w: &DVector<f64>) -> f64 {
    v.iter().zip(w.iter()).map(|(a, b)| b * a * a).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceDesign {
    pub operator: ProbeOperator,
    pub n_list: Vec<usize>,
    pub h_fixed: f64,
    pub n_fixed: usize,
    pub h_list: Vec<f64>,
    pub reps: usize,
    pub grid_n: usize,
    pub kernel: KernelSpec,
    pub base_seed: u64,
}

impl VarianceDesign {
    pub fn new(operator: ProbeOperator) -> Self {
        Self {
            operator,
            n_list: vec![250, 500, 1000, 2000],
            h_fixed: 0.08,
            n_fixed: 1000,
            h_list: vec![0.05, 0.07, 0.1, 0.14, 0.2],
            reps: 200,
            grid_n: 30,
            kernel: KernelSpec::GAUSSIAN,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariancePoint {
    pub n: usize,
    pub h: f64,
    pub mean: f64,
    /// Sample variance of `‖F̂(φ†)‖`.
    pub variance: f64,
    /// `E‖F̂(φ†) − E F̂(φ†)‖²`, the integrated pointwise variance.
    pub field_variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceScaling {
    pub operator: ProbeOperator,
    pub n_points: Vec<VariancePoint>,
    pub h_points: Vec<VariancePoint>,
    /// Slope of log-variance in log `n` at fixed `h`.
    pub n_fit: LineFit,
    /// Slope of log-variance in log `h` at fixed `n`.
    pub h_fit: LineFit,
    /// The same two fits for the integrated field variance.
    pub n_field_fit: LineFit,
    pub h_field_fit: LineFit,
}

fn variance_point(scn: &Scenario, d: &VarianceDesign, n: usize, h: f64, offset: u64) -> Result<VariancePoint> {
    let images: Vec<(DVector<f64>, DVector<f64>)> = (0..d.reps)
        .into_par_iter()
        .map(|r| operator_noise_image(scn, d.operator, n, h, d.grid_n, d.kernel, d.base_seed + offset + r as u64))
        .collect::<Result<_>>()?;
    let w = &images[0].1;
    let values: Vec<f64> = images.iter().map(|(v, w)| weighted_norm(v, w)).collect();
    let centre = images.iter().fold(DVector::zeros(w.len()), |acc, (v, _)| acc + v) / d.reps as f64;
    let field_variance =
        images.iter().map(|(v, _)| weighted_norm(&(v - &centre), w).powi(2)).sum::<f64>() / (d.reps as f64 - 1.0);
    Ok(VariancePoint {
        n,
        h,
        mean: stats::mean(&values),
        variance: stats::variance(&values),
        field_variance,
    })
}

/// Monte Carlo variance of `‖F̂(φ†)‖` along an `n` sweep at fixed `h` and
/// an `h` sweep at fixed `n`, with log-log slopes.
pub fn variance_scaling_probe(scn: &Scenario, d: &VarianceDesign) -> Result<VarianceScaling> {
    if d.reps < 20 {
        return Err(invalid("reps", format!("need at least 20, got {}", d.reps)));
    }
    if d.n_list.len() < 2 || d.h_list.len() < 2 {
        return Err(invalid("n_list", "need at least two sizes and two bandwidths"));
    }
    // disjoint seed blocks per design point
    let block = d.reps as u64;
    let n_points: Vec<VariancePoint> = d
        .n_list
        .iter()
        .enumerate()
        .map(|(k, &n)| variance_point(scn, d, n, d.h_fixed, k as u64 * block))
        .collect::<Result<_>>()?;
    let off = d.n_list.len() as u64 * block;
    let h_points: Vec<VariancePoint> = d
        .h_list
        .iter()
        .enumerate()
        .map(|(k, &h)| variance_point(scn, d, d.n_fixed, h, off + k as u64 * block))
        .collect::<Result<_>>()?;
    let log = |v: &[VariancePoint], f: fn(&VariancePoint) -> f64| -> Vec<f64> { v.iter().map(|p| f(p).ln()).collect() };
    let n_fit = fit_line(&log(&n_points, |p| p.n as f64), &log(&n_points, |p| p.variance))?;
    let h_fit = fit_line(&log(&h_points, |p| p.h), &log(&h_points, |p| p.variance))?;
    let n_field_fit = fit_line(&log(&n_points, |p| p.n as f64), &log(&n_points, |p| p.field_variance))?;
    let h_field_fit = fit_line(&log(&h_points, |p| p.h), &log(&h_points, |p| p.field_variance))?;
    Ok(VarianceScaling {
        n_field_fit,
        h_field_fit,
        operator: d.operator,
        n_points,
        h_points,
        n_fit,
        h_fit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationDesign {
    pub operator: ProbeOperator,
    pub n: usize,
    pub h: f64,
    pub reps: usize,
    pub grid_n: usize,
    pub kernel: KernelSpec,
    pub base_seed: u64,
}

impl ConcentrationDesign {
    pub fn new(operator: ProbeOperator, n: usize, h: f64) -> Self {
        Self {
            operator,
            n,
            h,
            reps: 500,
            grid_n: 20,
            kernel: KernelSpec::GAUSSIAN,
            base_seed: 0,
        }
    }
}

pub const CONCENTRATION_TAUS: [f64; 3] = [1.0, 4.0, 9.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    pub values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    /// Empirical `P(|X − mean| ≥ √τ sd)` for each entry of
    /// [`CONCENTRATION_TAUS`].
    pub exceedance: Vec<f64>,
    /// Largest `c` with `2 e^{-cτ}` above every empirical exceedance.
    pub c_fit: f64,
}

impl ConcentrationReport {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::EmptySample);
        }
        let mean = stats::mean(&values);
        let sd = stats::variance(&values).sqrt();
        let n = values.len() as f64;
        let exceedance: Vec<f64> = CONCENTRATION_TAUS
            .iter()
            .map(|t| values.iter().filter(|v| (*v - mean).abs() >= t.sqrt() * sd).count() as f64 / n)
            .collect();
        // zero counts are bounded by one observation in 2n
        let c_fit = CONCENTRATION_TAUS
            .iter()
            .zip(&exceedance)
            .map(|(t, p)| (2.0 / p.max(0.5 / n)).ln() / t)
            .fold(f64::INFINITY, f64::min);
        Ok(Self {
            values,
            mean,
            sd,
            exceedance,
            c_fit,
        })
    }
}

/// Empirical tails of the standardized `‖F̂(φ†)‖` against a sub-Gaussian
/// envelope.
pub fn concentration_probe(scn: &Scenario, d: &ConcentrationDesign) -> Result<ConcentrationReport> {
    if d.reps < 500 {
        return Err(invalid("reps", format!("need at least 500, got {}", d.reps)));
    }
    let values: Vec<f64> = (0..d.reps)
        .into_par_iter()
        .map(|r| operator_noise_norm(scn, d.operator, d.n, d.h, d.grid_n, d.kernel, d.base_seed + r as u64))
        .collect::<Result<_>>()?;
    ConcentrationReport::from_values(values)
}

/// Synthetic problem family and solver settings for rate experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct RateDesign {
    pub modes: usize,
    pub decay: Decay,
    pub mu: f64,
    pub beta: f64,
    pub deltas: Vec<f64>,
    pub delta_der: f64,
    pub reps: usize,
    pub alpha0: f64,
    pub q_alpha: f64,
    pub m: usize,
    pub max_steps: usize,
    pub base_seed: u64,
    pub lepskii_noise: LepskiiNoise,
}

/// Noise bound fed to the Lepskiĭ rule in rate experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LepskiiNoise {
    /// `√(C_g/α_j)(δ + σ)`, the operator-norm bound.
    Bound,
    /// Exact standard deviation of the propagated white noise.
    Propagated,
}

impl RateDesign {
    pub fn new(mu: f64) -> Self {
        Self {
            modes: 200,
            decay: Decay::Polynomial(1.0),
            mu,
            beta: 0.0,
            deltas: (0..6).map(|k| 10f64.powf(-5.0 + 0.5 * k as f64)).collect(),
            delta_der: 0.0,
            reps: 50,
            alpha0: 1.0,
            q_alpha: 0.8,
            m: 3,
            max_steps: 80,
            base_seed: 0,
            lepskii_noise: LepskiiNoise::Propagated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.5) {
            return Err(invalid("mu", format!("rate experiments need μ > 1/2, got {}", self.mu)));
        }
        if self.deltas.len() < 2 || self.deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(invalid("deltas", "need at least two positive noise levels"));
        }
        if self.reps == 0 {
            return Err(invalid("reps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn problem(&self) -> Result<SyntheticProblem> {
        SyntheticProblem::new(
            self.decay.values(self.modes),
            self.mu,
            SyntheticProblem::default_omega(self.modes),
            self.beta,
        )
    }

    /// The design's problem with Gaussian noise of level `delta` and the
    /// design's derivative noise, drawn from `seed`.
    pub fn noisy_problem(&self, delta: f64, seed: u64) -> Result<SyntheticProblem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.problem()?.with_random_noise(delta, self.delta_der, &mut rng)
    }

    pub fn irgnm_config(&self) -> IrgnmConfig {
        IrgnmConfig {
            alpha0: self.alpha0,
            q_alpha: self.q_alpha,
            m: self.m,
            radius: f64::INFINITY,
            phi0: DVector::zeros(self.modes),
            max_steps: self.max_steps,
            penalty: PenaltySpace::L2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    pub delta: f64,
    pub rmse_apriori: f64,
    pub rmse_lepskii: f64,
    pub mean_stop: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub mu: f64,
    pub points: Vec<RatePoint>,
    /// log RMSE against log δ for the a-priori rule.
    pub fit: LineFit,
    pub predicted: f64,
}

/// Standard deviation of the propagated data noise,
/// `(E‖g_α(T*T)T*ξ‖²)^{1/2} = sd · ‖g_α(T*T)T*‖_HS` for white `ξ` with
/// per-component standard deviation `sd`, with `T` the derivative at `φ_0`.
pub fn propagated_noise_phi(sp: &SyntheticProblem, alphas: &[f64], m: usize, sd: f64) -> Result<PhiBound> {
    let t = sp.jacobian(sp.phi0())?;
    let sv = t.singular_values();
    let mut values = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let p = FilterParams::new(a, m)?;
        let hs: f64 = sv.iter().map(|s| (s * filter_g(s * s, p)).powi(2)).sum();
        let v = sd * hs.sqrt();
        values.push(values.last().map_or(v, |l: &f64| l.max(v)));
    }
    PhiBound::new(values)
}

/// Errors of the a-priori and Lepskiĭ choices on one noisy replication.
fn rate_replication(base: &SyntheticProblem, d: &RateDesign, delta: f64, seed: u64) -> Result<(f64, f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = base.clone().with_random_noise(delta, d.delta_der, &mut rng)?;
    let cfg = d.irgnm_config();
    let run = irgnm::run(&sp, &cfg)?;
    let alphas = run.iterate_alphas();
    let mut e_app = sp.approximation_errors(&alphas[1..], d.m)?;
    e_app.insert(0, (sp.phi0() - &sp.oracle().phi_true).norm());
    let tc = TheoryConstants::new(d.m, f64::INFINITY);
    let sigma = delta / (2.0 * d.modes as f64).sqrt();
    let nl = NoiseLevels::new(delta, sigma, d.delta_der, 0.0)?;
    let j_ap = a_priori_stop(&e_app, &nl, &alphas, &tc);
    let phi = match d.lepskii_noise {
        LepskiiNoise::Bound => default_phi(&nl, &alphas, &tc, false),
        LepskiiNoise::Propagated => propagated_noise_phi(&sp, &alphas, d.m, delta / (d.modes as f64).sqrt())?,
    };
    // a linear problem has no nonlinearity error to absorb
    let gamma = if sp.is_linear() { 0.0 } else { tc.gamma_nl };
    let j_lep = lepskii_select_by(|i, j| run.distance(i, j), run.len(), &phi, gamma, run.last_index()).index;
    let err = |j: usize| (&run.iterates[j] - &sp.oracle().phi_true).norm();
    Ok((err(j_ap), err(j_lep), j_ap))
}

/// Root-mean-square errors over `reps` replications per `δ` with
/// a-priori and Lepskiĭ stopping, and the fitted exponent in `δ`.
pub fn synthetic_rate_experiment(d: &RateDesign) -> Result<RateFit> {
    d.validate()?;
    let base = d.problem()?;
    let mut points = Vec::with_capacity(d.deltas.len());
    for (k, &delta) in d.deltas.iter().enumerate() {
        let runs: Vec<(f64, f64, usize)> = (0..d.reps)
            .into_par_iter()
            .map(|r| rate_replication(&base, d, delta, d.base_seed + (k * d.reps + r) as u64))
            .collect::<Result<_>>()?;
        let rms = |f: fn(&(f64, f64, usize)) -> f64| (runs.iter().map(|r| f(r).powi(2)).sum::<f64>() / runs.len() as f64).sqrt();
        points.push(RatePoint {
            delta,
            rmse_apriori: rms(|r| r.0),
            rmse_lepskii: rms(|r| r.1),
            mean_stop: runs.iter().map(|r| r.2 as f64).sum::<f64>() / runs.len() as f64,
        });
    }
    let x: Vec<f64> = points.iter().map(|p| p.delta.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.rmse_apriori.ln()).collect();
    Ok(RateFit {
        mu: d.mu,
        fit: fit_line(&x, &y)?,
        predicted: 2.0 * d.mu / (2.0 * d.mu + 1.0),
        points,
    })
}

/// Result of checking the Lepskiĭ oracle inequality on one synthetic
/// replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleCheck {
    pub lepskii_error: f64,
    /// `min_j ‖φ̂_j − φ†‖` over the run.
    pub best_error: f64,
    /// `6 (1 + γ_nl) / √q_α`.
    pub constant: f64,
}

impl OracleCheck {
    pub const SLACK: f64 = 0.5;

    pub fn passes(&self) -> bool {
        self.lepskii_error <= self.constant * self.best_error * (1.0 + Self::SLACK)
    }
}

/// Runs the synthetic problem with noise of exact norm `delta`, selects by
/// Lepskiĭ with `Φ(j) = √(C_g/α_j) δ` and `γ_nl = 1/2`, and compares the
/// selected error with the best error along the path.
pub fn lepskii_oracle_check(d: &RateDesign, delta: f64, seed: u64) -> Result<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = d.problem()?;
    let n = d.modes;
    let mut xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    xi *= delta / xi.norm();
    let sp = base.with_noise(xi, DMatrix::zeros(n, n))?;
    let run = irgnm::run(&sp, &d.irgnm_config())?;
    let alphas = run.iterate_alphas();
    let tc = TheoryConstants::new(d.m, f64::INFINITY);
    let nl = NoiseLevels::new(delta, 0.0, 0.0, 0.0)?;
    let phi = default_phi(&nl, &alphas, &tc, false);
    let j = lepskii_select_by(|i, j| run.distance(i, j), run.len(), &phi, tc.gamma_nl, run.last_index()).index;
    let err = |k: usize| (&run.iterates[k] - &sp.oracle().phi_true).norm();
    Ok(OracleCheck {
        lepskii_error: err(j),
        best_error: (0..run.len()).map(err).fold(f64::INFINITY, f64::min),
        constant: 6.0 * (1.0 + tc.gamma_nl) / d.q_alpha.sqrt(),
    })
}

/// Source-condition fit for `φ_0 − φ†` against the derivative of `problem`
/// at `φ†`, with both spaces in their `L²` geometry.
pub fn fit_problem_source_condition(problem: &IvProblem, phi_true: &GridFn, phi0: &GridFn) -> Result<SourceFit> {
    let gx = problem.x_grid();
    if phi_true.grid() != gx || phi0.grid() != gx {
        return Err(Error::GridMismatch("source fit functions must live on the operator's x grid".into()));
    }
    let m = problem.assemble_derivative_matrix(phi_true)?;
    let image_w = problem.image_norm().weight_vector();
    let x_w = gx.trapezoid_weights();
    let t = DMatrix::from_fn(m.nrows(), m.ncols(), |i, k| image_w[i].sqrt() * m[(i, k)] / x_w[k].sqrt());
    let e0 = DVector::from_fn(x_w.len(), |k, _| x_w[k].sqrt() * (phi0.values()[k] - phi_true.values()[k]));
    fit_source_condition(&t, &e0)
}

/// Norms of the decomposition terms along a run, one entry per step.
pub fn decomposition_path<M: ForwardModel + ?Sized>(
    model: &M,
    oracle: &Oracle,
    run: &IrgnmRun,
    cfg: &IrgnmConfig,
) -> Result<Vec<ErrorDecomposition>> {
    (0..run.len() - 1)
        .filter(|j| !run.emergency_steps.contains(&(j + 1)))
        .map(|j| decompose_error(model, Some(oracle), run, cfg, j))
        .collect()
}

pub const RATE_SCHEMA: &str = "# irgnm rate_fit v1";
pub const VARIANCE_SCHEMA: &str = "# irgnm variance_scaling v1";
pub const CONCENTRATION_SCHEMA: &str = "# irgnm concentration v1";
pub const LIPSCHITZ_SCHEMA: &str = "# irgnm lipschitz v1";
pub const SOURCE_SCHEMA: &str = "# irgnm source_fit v1";
pub const DECOMPOSITION_SCHEMA: &str = "# irgnm decomposition v1";

fn csv_writer<W: Write>(mut out: W, schema: &str) -> Result<csv::Writer<W>> {
    writeln!(out, "{schema}")?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .flexible(true)
        .from_writer(out))
}

fn num(v: f64) -> String {
    format!("{v:.10e}")
}

/// Raw points followed by one `fit` row per rate experiment.
pub fn write_rate_fits<W: Write>(out: W, fits: &[RateFit]) -> Result<()> {
    let mut w = csv_writer(out, RATE_SCHEMA)?;
    w.write_record(["kind", "mu", "delta", "rmse_apriori", "rmse_lepskii", "mean_stop", "slope", "slope_se", "predicted"])?;
    for f in fits {
        for p in &f.points {
            w.write_record([
                "point".into(),
                num(f.mu),
                num(p.delta),
                num(p.rmse_apriori),
                num(p.rmse_lepskii),
                num(p.mean_stop),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        w.write_record([
            "fit".into(),
            num(f.mu),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            num(f.fit.slope),
            num(f.fit.slope_se),
            num(f.predicted),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_variance_scaling<W: Write>(out: W, results: &[VarianceScaling]) -> Result<()> {
    let mut w = csv_writer(out, VARIANCE_SCHEMA)?;
    w.write_record([
        "kind",
        "operator",
        "sweep",
        "n",
        "h",
        "mean",
        "variance",
        "field_variance",
        "slope",
        "slope_se",
        "field_slope",
        "field_slope_se",
    ])?;
    for r in results {
        for (sweep, pts, fit, ffit) in [
            ("n", &r.n_points, &r.n_fit, &r.n_field_fit),
            ("h", &r.h_points, &r.h_fit, &r.h_field_fit),
        ] {
            for p in pts {
                w.write_record([
                    "point".into(),
                    r.operator.name().into(),
                    sweep.into(),
                    p.n.to_string(),
                    num(p.h),
                    num(p.mean),
                    num(p.variance),
                    num(p.field_variance),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ])?;
            }
            w.write_record([
                "fit".into(),
                r.operator.name().into(),
                sweep.into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                num(fit.slope),
                num(fit.slope_se),
                num(ffit.slope),
                num(ffit.slope_se),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_concentration<W: Write>(out: W, r: &ConcentrationReport) -> Result<()> {
    let mut w = csv_writer(out, CONCENTRATION_SCHEMA)?;
    w.write_record(["tau", "exceedance", "envelope", "mean", "sd", "c_fit"])?;
    for (t, p) in CONCENTRATION_TAUS.iter().zip(&r.exceedance) {
        w.write_record([
            num(*t),
            num(*p),
            num(2.0 * (-r.c_fit * t).exp()),
            num(r.mean),
            num(r.sd),
            num(r.c_fit),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_lipschitz<W: Write>(out: W, r: &LipschitzReport) -> Result<()> {
    let mut w = csv_writer(out, LIPSCHITZ_SCHEMA)?;
    w.write_record(["pair", "ratio", "empirical", "analytic"])?;
    for (k, q) in r.ratios.iter().enumerate() {
        w.write_record([k.to_string(), num(*q), num(r.empirical), num(r.analytic)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_source_fit<W: Write>(out: W, fit: &SourceFit) -> Result<()> {
    let mut w = csv_writer(out, SOURCE_SCHEMA)?;
    w.write_record(["mu_hat", "mu_hat_se", "rho_hat", "modes"])?;
    w.write_record([num(fit.mu_hat), num(fit.fit.slope_se), num(fit.rho_hat), fit.fit.points.to_string()])?;
    w.flush()?;
    Ok(())
}

pub fn write_decomposition<W: Write>(out: W, path: &[ErrorDecomposition]) -> Result<()> {
    let mut w = csv_writer(out, DECOMPOSITION_SCHEMA)?;
    w.write_record(["step", "alpha", "e_app", "e_noi", "e_der", "e_nl", "total", "closure"])?;
    for d in path {
        w.write_record([
            d.step.to_string(),
            num(d.alpha),
            num(d.e_app.norm()),
            num(d.e_noi.norm()),
            num(d.e_der.norm()),
            num(d.e_nl.norm()),
            num(d.total.norm()),
            num(d.closure_residual()),
        ])?;
    }
    w.flush()?;
    Ok(())
}
