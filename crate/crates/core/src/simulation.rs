//! Monte Carlo study of the full-independence estimator against the linear
//! conditional-expectation benchmark on a smooth endogenous design.

use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use statrs::function::erf::erf;

use crate::error::{invalid, Error, Result};
use crate::irgnm::{self, IrgnmConfig, IrgnmRun};
use crate::kde::{default_bandwidth, DensityModel, KernelSpec, Record, Sample};
use crate::numerics::{Field3, Grid1D, Grid3, GridFn};
use crate::operators::{DensityFields, FieldRequest, ForwardModel, IvProblem};
use crate::regularization::{iterated_tikhonov, FilterParams, LinearizedSystem, PenaltySpace};
use crate::stats;
use crate::stopping::{compute_jmax, default_phi, lepskii_select_by, NoiseLevels, TheoryConstants};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_pdf(x: f64, s: f64) -> f64 {
    INV_SQRT_2PI / s * (-0.5 * (x / s).powi(2)).exp()
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Data-generating process: `Z ~ f_Z` on `[0, 1]`, `X = g(Z) + V`,
/// `Y = φ†(X) + U` with `U | V ~ N(slope · V, σ_U²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub sigma_v: f64,
    pub sigma_u: f64,
    pub slope: f64,
    pub y_range: (f64, f64),
    pub x_range: (f64, f64),
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            sigma_v: 0.08,
            sigma_u: 0.07,
            slope: 2.0,
            y_range: (-0.5, 0.5),
            x_range: (0.0, 1.0),
        }
    }
}

impl Scenario {
    pub fn phi_true(&self, x: f64) -> f64 {
        (2.0 * std::f64::consts::PI * (x + 0.25)).sin() / 6.0
    }

    /// `f_Z(z) = (9/7)√z + 1/7` on `[0, 1]`.
    pub fn density_z(&self, z: f64) -> f64 {
        if (0.0..=1.0).contains(&z) {
            9.0 / 7.0 * z.sqrt() + 1.0 / 7.0
        } else {
            0.0
        }
    }

    pub fn cdf_z(&self, z: f64) -> f64 {
        let z = z.clamp(0.0, 1.0);
        6.0 / 7.0 * z.powf(1.5) + z / 7.0
    }

    /// Inverse of [`Scenario::cdf_z`] by bisection to `1e-12`.
    pub fn quantile_z(&self, p: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 1.0);
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            if self.cdf_z(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn g(&self, z: f64) -> f64 {
        0.8 * z + 0.1
    }

    /// `E[Z] = (9/7)(2/5) + (1/7)(1/2) = 41/70`.
    pub fn mean_z(&self) -> f64 {
        9.0 / 7.0 * 0.4 + 1.0 / 14.0
    }

    fn residual_y(&self, y: f64, x: f64, z: f64) -> f64 {
        y - self.phi_true(x) - self.slope * (x - self.g(z))
    }

    /// Joint density of `(Y, X, Z)`.
    pub fn density(&self, y: f64, x: f64, z: f64) -> f64 {
        self.density_z(z) * normal_pdf(x - self.g(z), self.sigma_v) * normal_pdf(self.residual_y(y, x, z), self.sigma_u)
    }

    pub fn density_dy(&self, y: f64, x: f64, z: f64) -> f64 {
        -self.residual_y(y, x, z) / self.sigma_u.powi(2) * self.density(y, x, z)
    }

    /// `∫_{-∞}^y f(t, x, z) dt`.
    pub fn cdf_y(&self, y: f64, x: f64, z: f64) -> f64 {
        self.density_z(z) * normal_pdf(x - self.g(z), self.sigma_v) * normal_cdf(self.residual_y(y, x, z) / self.sigma_u)
    }

    /// `n` nodes per axis on `[y_lo, y_hi] × [x_lo, x_hi] × [0, 1]`.
    pub fn grid(&self, n: usize) -> Result<Grid3> {
        Ok(Grid3::new(
            Grid1D::new(self.y_range.0, self.y_range.1, n)?,
            Grid1D::new(self.x_range.0, self.x_range.1, n)?,
            Grid1D::new(0.0, 1.0, n)?,
        ))
    }

    pub fn phi_true_fn(&self, grid: Grid1D) -> GridFn {
        GridFn::from_fn(grid, |x| self.phi_true(x)).expect("finite closed form")
    }
}

/// i.i.d. draw of size `n`; deterministic in `seed`.
pub fn generate_sample(scn: &Scenario, n: usize, seed: u64) -> Result<Sample> {
    if n == 0 {
        return Err(Error::EmptySample);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unif = Uniform::new(0.0, 1.0).map_err(|e| Error::Numerical(e.to_string()))?;
    let v_dist = Normal::new(0.0, scn.sigma_v).map_err(|e| Error::Numerical(e.to_string()))?;
    let e_dist = Normal::new(0.0, scn.sigma_u).map_err(|e| Error::Numerical(e.to_string()))?;
    let records = (0..n)
        .map(|_| {
            let z = scn.quantile_z(unif.sample(&mut rng));
            let v = v_dist.sample(&mut rng);
            let x = scn.g(z) + v;
            let u = scn.slope * v + e_dist.sample(&mut rng);
            Record {
                y: scn.phi_true(x) + u,
                x,
                z,
            }
        })
        .collect();
    Sample::new(records)
}

/// Closed-form density fields on `grid`. Marginals over `y` and `x` and the
/// moments of `Y` are taken by trapezoid quadrature over the grid box.
pub fn exact_fields(scn: &Scenario, grid: Grid3) -> Result<DensityFields> {
    let f = Field3::from_fn(grid, |y, x, z| scn.density(y, x, z))?;
    let df = Field3::from_fn(grid, |y, x, z| scn.density_dy(y, x, z))?;
    let cdf = Field3::from_fn(grid, |y, x, z| scn.cdf_y(y, x, z))?;
    let yf = Field3::from_fn(grid, |y, x, z| y * scn.density(y, x, z))?;
    let f_z = GridFn::from_fn(grid.gz, |z| scn.density_z(z))?;
    let xz: Vec<f64> = grid
        .gx
        .nodes()
        .iter()
        .flat_map(|&x| grid.gz.nodes().into_iter().map(move |z| (x, z)))
        .map(|(x, z)| scn.density_z(z) * normal_pdf(x - scn.g(z), scn.sigma_v))
        .collect();
    let f_xz = crate::numerics::Field2::new(grid.gx, grid.gz, xz)?;
    let f_x = f_xz.integrate_b();
    let f_yx = f.integrate_z();
    let f_y = f_yx.integrate_b();
    let y_moment_z = yf.integrate_y().integrate_a();
    let psi = GridFn::new(
        grid.gz,
        y_moment_z
            .values()
            .iter()
            .zip(f_z.values())
            .map(|(m, d)| m / d.max(crate::operators::CE_DENSITY_FLOOR))
            .collect(),
    )?;
    Ok(DensityFields {
        grid,
        df_yx: Some(df.integrate_z()),
        mean_y: yf.integrate(),
        f_yxz: f,
        df_dy: Some(df),
        cdf_y: Some(cdf),
        f_yx,
        f_xz,
        f_z,
        f_x,
        f_y,
        psi: Some(psi),
    })
}

/// `‖φ − φ†‖ / ‖φ_0 − φ†‖` in `L²` over `[lo, hi]`.
pub fn normalized_error(phi: &GridFn, phi_true: &GridFn, phi0: &GridFn, lo: f64, hi: f64) -> Result<f64> {
    let num = phi.sub(phi_true)?.norm_l2_on(lo, hi);
    let den = phi0.sub(phi_true)?.norm_l2_on(lo, hi);
    if !(den > 0.0) {
        return Err(invalid("phi0", "coincides with the true function"));
    }
    Ok(num / den)
}

/// Interior window for the secondary error metric.
pub const INTERIOR: (f64, f64) = (0.05, 0.95);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeSettings {
    pub kernel: KernelSpec,
    /// Multiplier `c` in `h = c σ̂ n^{-1/6}`.
    pub bandwidth_c: f64,
    /// Fixed bandwidth overriding the rule of thumb.
    pub bandwidth: Option<f64>,
}

impl Default for KdeSettings {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::GAUSSIAN,
            bandwidth_c: 1.0,
            bandwidth: None,
        }
    }
}

impl KdeSettings {
    pub fn bandwidth_for(&self, sample: &Sample) -> Result<f64> {
        match self.bandwidth {
            Some(h) if h > 0.0 => Ok(h),
            Some(h) => Err(invalid("bandwidth", format!("must be positive, got {h}"))),
            None => default_bandwidth(sample, self.bandwidth_c),
        }
    }
}

/// Inputs to the data-driven Lepskiĭ rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoppingSettings {
    /// Calibration factor on the propagated-noise proxies.
    pub c_cal: f64,
    /// Calibration factor on the derivative-noise proxy.
    pub c_der: f64,
    pub c_d: f64,
    pub rho: f64,
    pub gamma_nl: f64,
    /// `C_stop`; `None` leaves the whole path admissible.
    pub c_stop: Option<f64>,
    pub risk_mode: bool,
}

impl Default for StoppingSettings {
    fn default() -> Self {
        Self {
            c_cal: 0.06,
            c_der: 0.005,
            c_d: 1.0,
            rho: 1.0,
            gamma_nl: 0.5,
            c_stop: None,
            risk_mode: false,
        }
    }
}

/// Settings of one estimation pipeline (shared by the Monte Carlo study and
/// single-dataset reconstruction).
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub grid_n: usize,
    pub kde: KdeSettings,
    pub alpha0: f64,
    pub q_alpha: f64,
    pub m: usize,
    pub radius: f64,
    pub max_steps: usize,
    /// Length of the `α` path for the linear benchmark.
    pub ce_max_steps: usize,
    pub penalty: PenaltySpace,
    pub w_mean: f64,
    pub stopping: StoppingSettings,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            grid_n: 100,
            kde: KdeSettings::default(),
            alpha0: 1.0,
            q_alpha: 0.9,
            m: 8,
            radius: 1.0,
            max_steps: 30,
            ce_max_steps: 80,
            penalty: PenaltySpace::H1,
            w_mean: 1.0,
            stopping: StoppingSettings::default(),
        }
    }
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n < 3 {
            return Err(invalid("grid_n", format!("need at least 3 nodes, got {}", self.grid_n)));
        }
        if !(self.kde.bandwidth_c > 0.0) {
            return Err(invalid("bandwidth_c", "must be positive"));
        }
        if !(self.w_mean >= 0.0) {
            return Err(invalid("w_mean", "must be nonnegative"));
        }
        let s = &self.stopping;
        for (name, v) in [("c_cal", s.c_cal), ("c_der", s.c_der), ("c_d", s.c_d), ("rho", s.rho)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be nonnegative, got {v}")));
            }
        }
        if !(s.gamma_nl > 0.0 && s.gamma_nl <= 1.0) {
            return Err(invalid("gamma_nl", format!("must lie in (0, 1], got {}", s.gamma_nl)));
        }
        if let Some(c) = s.c_stop {
            if !(c > 0.0) {
                return Err(invalid("c_stop", "must be positive"));
            }
        }
        self.irgnm_config(DVector::zeros(1)).validate()
    }

    pub fn irgnm_config(&self, phi0: DVector<f64>) -> IrgnmConfig {
        IrgnmConfig {
            alpha0: self.alpha0,
            q_alpha: self.q_alpha,
            m: self.m,
            radius: self.radius,
            phi0,
            max_steps: self.max_steps,
            penalty: self.penalty,
        }
    }

    pub fn c_stop(&self) -> f64 {
        self.stopping.c_stop.unwrap_or(f64::INFINITY)
    }

    pub fn theory_constants(&self) -> TheoryConstants {
        let mut tc = TheoryConstants::new(self.m, self.c_stop());
        tc.c_d = self.stopping.c_d;
        tc.rho = self.stopping.rho;
        tc.gamma_nl = self.stopping.gamma_nl;
        tc
    }
}

/// Propagated-noise proxy for the independence operator: the kernel
/// variance constant over `n h^{d_Z + 1}` with `d_Z = 1`.
pub fn ind_noise_proxy(kernel: KernelSpec, n: usize, h: f64) -> f64 {
    (kernel.l2_norm_sq().powi(2) / (n as f64 * h * h)).sqrt()
}

/// Derivative-noise proxy for the independence operator (Hilbert–Schmidt
/// scale of the derivative kernel estimate).
pub fn ind_derivative_noise_proxy(kernel: KernelSpec, n: usize, h: f64) -> Result<f64> {
    Ok((kernel.derivative_l2_norm_sq()? * kernel.l2_norm_sq().powi(2) / (n as f64 * h.powi(5))).sqrt())
}

/// Propagated-noise proxy for the conditional-mean right-hand side.
pub fn ce_noise_proxy(kernel: KernelSpec, n: usize, h: f64, sd_y: f64) -> f64 {
    sd_y * (kernel.l2_norm_sq() / (n as f64 * h)).sqrt()
}

/// Result of a data-driven selection along one regularization path.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub j_max: usize,
    pub thresholds: Vec<f64>,
}

/// Lepskiĭ choice along a path of iterates with the penalty-norm distance.
pub fn select_lepskii(run: &IrgnmRun, nl: &NoiseLevels, tc: &TheoryConstants, risk_mode: bool) -> Result<Selection> {
    let alphas = run.iterate_alphas();
    let phi = default_phi(nl, &alphas, tc, risk_mode);
    let j_max = compute_jmax(&phi, &alphas, tc.c_stop)?;
    let choice = lepskii_select_by(|i, j| run.distance(i, j), run.len(), &phi, tc.gamma_nl, j_max);
    let factor = 4.0 * (1.0 + tc.gamma_nl);
    Ok(Selection {
        index: choice.index,
        j_max,
        thresholds: phi.values().iter().map(|v| factor * v).collect(),
    })
}

/// Iterated Tikhonov solutions of a linear problem from `φ_0` for every `α`.
pub fn baseline_linear_reconstruct<M: ForwardModel + ?Sized>(
    problem: &M,
    alphas: &[f64],
    phi0: &DVector<f64>,
    m: usize,
    penalty: PenaltySpace,
) -> Result<Vec<DVector<f64>>> {
    let (f, t) = problem.linearize(phi0)?;
    let offset = f - &t * phi0;
    let sys = LinearizedSystem::new(t, offset, phi0.clone(), problem.image_weights(), problem.penalty_gram(penalty)?)?;
    alphas
        .iter()
        .map(|&a| iterated_tikhonov(&sys, FilterParams::new(a, m)?))
        .collect()
}

/// Regularization path of the linear benchmark arranged like an IRGNM run:
/// iterate `j + 1` uses `α_j`.
pub fn baseline_run<M: ForwardModel + ?Sized>(problem: &M, cfg: &IrgnmConfig) -> Result<IrgnmRun> {
    let mut lin = cfg.clone();
    lin.radius = f64::INFINITY;
    irgnm::run(problem, &lin)
}

/// One replication of the study.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationResult {
    pub rep: usize,
    pub n: usize,
    pub seed: u64,
    pub bandwidth: f64,
    pub err_ind: f64,
    pub err_ce: f64,
    pub err_ind_interior: f64,
    pub err_ce_interior: f64,
    pub j_selected_ind: usize,
    pub j_selected_ce: usize,
    pub alpha_selected_ce: f64,
    pub best_err_ind: f64,
    pub best_err_ce: f64,
    pub emergency_flag: bool,
}

/// Reconstruction from one sample by both methods.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub bandwidth: f64,
    pub phi0: GridFn,
    pub ind_run: IrgnmRun,
    pub ind_selection: Selection,
    pub ce_run: IrgnmRun,
    pub ce_selection: Selection,
    pub x_grid: Grid1D,
}

impl Reconstruction {
    pub fn ind_estimate(&self) -> GridFn {
        self.ind_run.iterate_fn(self.ind_selection.index, self.x_grid).expect("x grid")
    }

    pub fn ce_estimate(&self) -> GridFn {
        self.ce_run.iterate_fn(self.ce_selection.index, self.x_grid).expect("x grid")
    }
}

/// Estimates the density once and runs IRGNM on the independence operator
/// and the iterated Tikhonov path on the conditional-expectation operator,
/// both from `φ_0 ≡` sample mean of `Y` and both stopped by Lepskiĭ.
pub fn reconstruct(scn: &Scenario, sample: &Sample, settings: &PipelineSettings) -> Result<Reconstruction> {
    settings.validate()?;
    let h = settings.kde.bandwidth_for(sample)?;
    let model = DensityModel::new(sample.clone(), settings.kde.kernel, h)?;
    let grid = scn.grid(settings.grid_n)?;
    let request = FieldRequest {
        derivative: true,
        cdf: false,
        conditional_mean: true,
    };
    let fields = DensityFields::from_kde(&model, grid, request)?;
    let phi0 = GridFn::constant(grid.gx, fields.mean_y)?;
    let cfg = settings.irgnm_config(phi0.to_dvector());
    let tc = settings.theory_constants();
    let n = sample.len();
    let kernel = settings.kde.kernel;
    let st = &settings.stopping;

    let ind = IvProblem::ind(&fields, &phi0, settings.w_mean)?;
    let ind_run = irgnm::run(&ind, &cfg)?;
    let nl_ind = NoiseLevels::new(
        0.0,
        st.c_cal * ind_noise_proxy(kernel, n, h),
        0.0,
        st.c_der * ind_derivative_noise_proxy(kernel, n, h)?,
    )?;
    let ind_selection = select_lepskii(&ind_run, &nl_ind, &tc, st.risk_mode)?;

    let ce = IvProblem::ce(&fields)?;
    let mut ce_cfg = cfg.clone();
    ce_cfg.max_steps = settings.ce_max_steps;
    let ce_run = baseline_run(&ce, &ce_cfg)?;
    let sd_y = stats::variance(&sample.records().iter().map(|r| r.y).collect::<Vec<_>>()).sqrt();
    let nl_ce = NoiseLevels::new(0.0, st.c_cal * ce_noise_proxy(kernel, n, h, sd_y), 0.0, 0.0)?;
    let ce_selection = select_lepskii(&ce_run, &nl_ce, &tc, st.risk_mode)?;

    Ok(Reconstruction {
        bandwidth: h,
        phi0,
        ind_run,
        ind_selection,
        ce_run,
        ce_selection,
        x_grid: grid.gx,
    })
}

fn path_errors(run: &IrgnmRun, grid: Grid1D, truth: &GridFn, phi0: &GridFn, window: (f64, f64)) -> Result<Vec<f64>> {
    (0..run.len())
        .map(|j| normalized_error(&run.iterate_fn(j, grid)?, truth, phi0, window.0, window.1))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub n: usize,
    pub reps: usize,
    pub base_seed: u64,
    pub pipeline: PipelineSettings,
    /// Largest tolerated fraction of failed replications.
    pub max_invalid_fraction: f64,
}

impl McConfig {
    pub fn new(n: usize, reps: usize, base_seed: u64) -> Self {
        Self {
            n,
            reps,
            base_seed,
            pipeline: PipelineSettings::default(),
            max_invalid_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(invalid("reps", "must be at least 1"));
        }
        if self.n < 10 {
            return Err(invalid("n", format!("must be at least 10, got {}", self.n)));
        }
        self.pipeline.validate()
    }

    pub fn seed(&self, rep: usize) -> u64 {
        self.base_seed.wrapping_add(rep as u64)
    }
}

pub fn run_replication(scn: &Scenario, cfg: &McConfig, rep: usize) -> Result<ReplicationResult> {
    let seed = cfg.seed(rep);
    let sample = generate_sample(scn, cfg.n, seed)?;
    let rec = reconstruct(scn, &sample, &cfg.pipeline)?;
    let gx = rec.x_grid;
    let truth = scn.phi_true_fn(gx);
    let full = (gx.a(), gx.b());
    let ind_path = path_errors(&rec.ind_run, gx, &truth, &rec.phi0, full)?;
    let ce_path = path_errors(&rec.ce_run, gx, &truth, &rec.phi0, full)?;
    let ji = rec.ind_selection.index;
    let jc = rec.ce_selection.index;
    Ok(ReplicationResult {
        rep,
        n: cfg.n,
        seed,
        bandwidth: rec.bandwidth,
        err_ind: ind_path[ji],
        err_ce: ce_path[jc],
        err_ind_interior: normalized_error(&rec.ind_estimate(), &truth, &rec.phi0, INTERIOR.0, INTERIOR.1)?,
        err_ce_interior: normalized_error(&rec.ce_estimate(), &truth, &rec.phi0, INTERIOR.0, INTERIOR.1)?,
        j_selected_ind: ji,
        j_selected_ce: jc,
        alpha_selected_ce: rec.ce_run.iterate_alphas()[jc],
        best_err_ind: ind_path.iter().cloned().fold(f64::INFINITY, f64::min),
        best_err_ce: ce_path.iter().cloned().fold(f64::INFINITY, f64::min),
        emergency_flag: rec.ind_run.emergency_stopped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Ind,
    Ce,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ind => "ind",
            Method::Ce => "ce",
        }
    }
}

/// Mean and quantiles of normalized errors for one `(n, method)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub n: usize,
    pub method: Method,
    pub count: usize,
    pub mean: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q90: f64,
}

impl SummaryRow {
    pub fn from_errors(n: usize, method: Method, errors: &[f64]) -> Self {
        Self {
            n,
            method,
            count: errors.len(),
            mean: stats::mean(errors),
            q25: stats::quantile(errors, 0.25),
            q50: stats::quantile(errors, 0.5),
            q75: stats::quantile(errors, 0.75),
            q90: stats::quantile(errors, 0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn from_results(results: &[ReplicationResult]) -> Self {
        let mut ns: Vec<usize> = results.iter().map(|r| r.n).collect();
        ns.sort_unstable();
        ns.dedup();
        let mut rows = Vec::new();
        for n in ns {
            let cell: Vec<&ReplicationResult> = results.iter().filter(|r| r.n == n).collect();
            let ind: Vec<f64> = cell.iter().map(|r| r.err_ind).collect();
            let ce: Vec<f64> = cell.iter().map(|r| r.err_ce).collect();
            rows.push(SummaryRow::from_errors(n, Method::Ind, &ind));
            rows.push(SummaryRow::from_errors(n, Method::Ce, &ce));
        }
        Self { rows }
    }

    pub fn get(&self, n: usize, method: Method) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.n == n && r.method == method)
    }
}

#[derive(Debug, Clone)]
pub struct McOutcome {
    pub results: Vec<ReplicationResult>,
    pub failures: Vec<(usize, String)>,
    pub table: SummaryTable,
}

/// Runs `reps` replications in parallel with seeds `base_seed + rep` and
/// aggregates them. Aborts if more than the tolerated fraction fails.
pub fn run_monte_carlo(scn: &Scenario, cfg: &McConfig) -> Result<McOutcome> {
    cfg.validate()?;
    let outcomes: Vec<(usize, Result<ReplicationResult>)> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| (rep, run_replication(scn, cfg, rep)))
        .collect();
    let mut results = Vec::with_capacity(cfg.reps);
    let mut failures = Vec::new();
    for (rep, r) in outcomes {
        match r {
            Ok(r) => results.push(r),
            Err(e) => {
                log::warn!("replication {rep} failed: {e}");
                failures.push((rep, e.to_string()));
            }
        }
    }
    if failures.len() as f64 > cfg.max_invalid_fraction * cfg.reps as f64 {
        return Err(Error::TooManyInvalid {
            failed: failures.len(),
            total: cfg.reps,
        });
    }
    let table = SummaryTable::from_results(&results);
    Ok(McOutcome {
        results,
        failures,
        table,
    })
}

/// IRGNM on the independence operator built from the closed-form density.
#[derive(Debug, Clone)]
pub struct ExactReconstruction {
    pub run: IrgnmRun,
    pub errors: Vec<f64>,
    pub interior_errors: Vec<f64>,
    pub best_index: usize,
    pub x_grid: Grid1D,
    pub phi0: GridFn,
}

impl ExactReconstruction {
    pub fn best_error(&self) -> f64 {
        self.errors[self.best_index]
    }

    pub fn best_interior_error(&self) -> f64 {
        self.interior_errors.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

pub fn exact_reconstruction(scn: &Scenario, settings: &PipelineSettings) -> Result<ExactReconstruction> {
    settings.validate()?;
    let grid = scn.grid(settings.grid_n)?;
    let fields = exact_fields(scn, grid)?;
    let phi0 = GridFn::constant(grid.gx, fields.mean_y)?;
    let problem = IvProblem::ind(&fields, &phi0, settings.w_mean)?;
    let run = irgnm::run(&problem, &settings.irgnm_config(phi0.to_dvector()))?;
    let truth = scn.phi_true_fn(grid.gx);
    let errors = path_errors(&run, grid.gx, &truth, &phi0, (0.0, 1.0))?;
    let interior_errors = path_errors(&run, grid.gx, &truth, &phi0, INTERIOR)?;
    let best_index = (0..errors.len())
        .min_by(|&a, &b| errors[a].total_cmp(&errors[b]))
        .expect("nonempty");
    Ok(ExactReconstruction {
        run,
        errors,
        interior_errors,
        best_index,
        x_grid: grid.gx,
        phi0,
    })
}

/// Equal-width histogram counts on `[lo, hi]`; values outside are clamped
/// into the edge bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for v in values {
        let k = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
}

pub const REPLICATIONS_SCHEMA: &str = "# irgnm replications v1";
pub const SUMMARY_SCHEMA: &str = "# irgnm summary v1";
pub const HISTOGRAM_SCHEMA: &str = "# irgnm histograms v1";

fn csv_writer<W: Write>(mut out: W, schema: &str) -> Result<csv::Writer<W>> {
    writeln!(out, "{schema}")?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out))
}

fn num(v: f64) -> String {
    format!("{v:.10}")
}

pub fn write_replications<W: Write>(out: W, results: &[ReplicationResult]) -> Result<()> {
    let mut w = csv_writer(out, REPLICATIONS_SCHEMA)?;
    w.write_record([
        "rep",
        "n",
        "seed",
        "method",
        "error",
        "error_interior",
        "best_error",
        "selected_index",
        "selected_alpha",
        "bandwidth",
        "emergency",
    ])?;
    for r in results {
        w.write_record([
            r.rep.to_string(),
            r.n.to_string(),
            r.seed.to_string(),
            "ind".into(),
            num(r.err_ind),
            num(r.err_ind_interior),
            num(r.best_err_ind),
            r.j_selected_ind.to_string(),
            String::new(),
            num(r.bandwidth),
            u8::from(r.emergency_flag).to_string(),
        ])?;
        w.write_record([
            r.rep.to_string(),
            r.n.to_string(),
            r.seed.to_string(),
            "ce".into(),
            num(r.err_ce),
            num(r.err_ce_interior),
            num(r.best_err_ce),
            r.j_selected_ce.to_string(),
            num(r.alpha_selected_ce),
            num(r.bandwidth),
            "0".into(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(out: W, table: &SummaryTable) -> Result<()> {
    let mut w = csv_writer(out, SUMMARY_SCHEMA)?;
    w.write_record(["n", "method", "count", "mean", "q25", "q50", "q75", "q90"])?;
    for r in &table.rows {
        w.write_record([
            r.n.to_string(),
            r.method.name().into(),
            r.count.to_string(),
            num(r.mean),
            num(r.q25),
            num(r.q50),
            num(r.q75),
            num(r.q90),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Histogram of normalized errors per `(n, method)` on `[0, hi]`.
pub fn write_histograms<W: Write>(out: W, results: &[ReplicationResult], bins: usize, hi: f64) -> Result<()> {
    let mut w = csv_writer(out, HISTOGRAM_SCHEMA)?;
    w.write_record(["n", "method", "bin_lo", "bin_hi", "count"])?;
    let mut ns: Vec<usize> = results.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let width = hi / bins as f64;
    for n in ns {
        for method in [Method::Ind, Method::Ce] {
            let errs: Vec<f64> = results
                .iter()
                .filter(|r| r.n == n)
                .map(|r| if method == Method::Ind { r.err_ind } else { r.err_ce })
                .collect();
            for (k, c) in histogram(&errs, bins, 0.0, hi).iter().enumerate() {
                w.write_record([
                    n.to_string(),
                    method.name().into(),
                    num(k as f64 * width),
                    num((k + 1) as f64 * width),
                    c.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a sample from CSV with header `y,x,z` (any column order; `#`
/// lines are skipped). Malformed rows are reported with their line number.
pub fn read_sample<R: std::io::Read>(input: R) -> Result<Sample> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers().map_err(|e| Error::Data {
        line: 1,
        reason: e.to_string(),
    })?;
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Data {
            line: 1,
            reason: format!("header must contain y, x and z; missing `{name}`"),
        })
    };
    let (iy, ix, iz) = (col("y")?, col("x")?, col("z")?);
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Data {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |k: usize, name: &str| -> Result<f64> {
            let raw = row.get(k).ok_or_else(|| Error::Data {
                line,
                reason: format!("missing `{name}`"),
            })?;
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Data {
                    line,
                    reason: format!("`{name}` is not a finite number: {raw:?}"),
                }),
            }
        };
        records.push(Record {
            y: field(iy, "y")?,
            x: field(ix, "x")?,
            z: field(iz, "z")?,
        });
    }
    Sample::new(records)
}

/// Writes a sample as `y,x,z` with full round-trip precision.
pub fn write_sample<W: Write>(out: W, sample: &Sample) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["y", "x", "z"])?;
    for r in sample.records() {
        w.write_record([r.y.to_string(), r.x.to_string(), r.z.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub const ESTIMATE_SCHEMA: &str = "# irgnm phi_hat v1";
pub const PATH_SCHEMA: &str = "# irgnm diagnostics v1";

/// Selected estimates of both methods on the `x` grid.
pub fn write_estimates<W: Write>(out: W, rec: &Reconstruction) -> Result<()> {
    let mut w = csv_writer(out, ESTIMATE_SCHEMA)?;
    w.write_record(["x", "phi_ind", "phi_ce", "phi0"])?;
    let (ind, ce) = (rec.ind_estimate(), rec.ce_estimate());
    for (k, x) in rec.x_grid.nodes().iter().enumerate() {
        w.write_record([num(*x), num(ind.values()[k]), num(ce.values()[k]), num(rec.phi0.values()[k])])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step regularization parameter, residual and Lepskiĭ threshold for
/// both paths.
pub fn write_path_diagnostics<W: Write>(out: W, rec: &Reconstruction) -> Result<()> {
    let mut w = csv_writer(out, PATH_SCHEMA)?;
    w.write_record(["method", "step", "alpha", "residual", "threshold", "admissible", "selected"])?;
    for (method, run, sel) in [
        (Method::Ind, &rec.ind_run, &rec.ind_selection),
        (Method::Ce, &rec.ce_run, &rec.ce_selection),
    ] {
        let alphas = run.iterate_alphas();
        for (j, alpha) in alphas.iter().enumerate().take(run.len()) {
            w.write_record([
                method.name().into(),
                j.to_string(),
                num(*alpha),
                num(run.residual_norms[j]),
                num(sel.thresholds[j]),
                u8::from(j <= sel.j_max).to_string(),
                u8::from(j == sel.index).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
