//! TOML run configuration. Every section and key is optional; command-line
//! flags override the file.

use std::path::{Path, PathBuf};

use irgnm::diagnostics::{ConcentrationDesign, Decay, ProbeOperator, RateDesign, VarianceDesign};
use irgnm::simulation::{KdeSettings, StoppingSettings};
use irgnm::{KernelSpec, McConfig, PenaltySpace, PipelineSettings, Scenario};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub scenario: ScenarioSection,
    pub simulation: SimulationSection,
    pub kde: KdeSection,
    pub irgnm: IrgnmSection,
    pub stopping: StoppingSection,
    pub rates: RatesSection,
    pub diagnose: DiagnoseSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("out"),
            threads: 0,
            scenario: ScenarioSection::default(),
            simulation: SimulationSection::default(),
            kde: KdeSection::default(),
            irgnm: IrgnmSection::default(),
            stopping: StoppingSection::default(),
            rates: RatesSection::default(),
            diagnose: DiagnoseSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub sigma_v: f64,
    pub sigma_u: f64,
    pub slope: f64,
    pub y_range: [f64; 2],
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let s = Scenario::default();
        Self {
            sigma_v: s.sigma_v,
            sigma_u: s.sigma_u,
            slope: s.slope,
            y_range: [s.y_range.0, s.y_range.1],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub n: Vec<usize>,
    pub reps: usize,
    pub max_invalid_fraction: f64,
    pub histogram_bins: usize,
    pub histogram_max: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            n: vec![500, 1000],
            reps: 100,
            max_invalid_fraction: 0.1,
            histogram_bins: 20,
            histogram_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdeSection {
    pub kernel: String,
    pub bandwidth_c: f64,
    pub bandwidth: Option<f64>,
}

impl Default for KdeSection {
    fn default() -> Self {
        Self {
            kernel: "gaussian".into(),
            bandwidth_c: 1.0,
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrgnmSection {
    pub grid: usize,
    pub alpha0: f64,
    pub q_alpha: f64,
    pub m: usize,
    pub radius: f64,
    pub max_steps: usize,
    pub ce_max_steps: usize,
    pub penalty: String,
    pub w_mean: f64,
}

impl Default for IrgnmSection {
    fn default() -> Self {
        let p = PipelineSettings::default();
        Self {
            grid: 60,
            alpha0: p.alpha0,
            q_alpha: p.q_alpha,
            m: p.m,
            radius: p.radius,
            max_steps: p.max_steps,
            ce_max_steps: p.ce_max_steps,
            penalty: "h1".into(),
            w_mean: p.w_mean,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingSection {
    pub c_cal: f64,
    pub c_der: f64,
    pub c_d: f64,
    pub rho: f64,
    pub gamma_nl: f64,
    pub c_stop: Option<f64>,
    pub risk_mode: bool,
}

impl Default for StoppingSection {
    fn default() -> Self {
        let s = StoppingSettings::default();
        Self {
            c_cal: s.c_cal,
            c_der: s.c_der,
            c_d: s.c_d,
            rho: s.rho,
            gamma_nl: s.gamma_nl,
            c_stop: s.c_stop,
            risk_mode: s.risk_mode,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesSection {
    pub mu: Vec<f64>,
    pub modes: usize,
    /// `polynomial` (`σ_t = t^{-rate}`) or `exponential` (`σ_t = e^{-rate t}`).
    pub decay: String,
    pub decay_rate: f64,
    pub beta: f64,
    pub deltas: Vec<f64>,
    pub delta_der: f64,
    pub reps: usize,
    pub alpha0: f64,
    pub q_alpha: f64,
    pub m: usize,
    pub max_steps: usize,
}

impl Default for RatesSection {
    fn default() -> Self {
        let d = RateDesign::new(1.0);
        Self {
            mu: vec![1.0, 1.5],
            modes: d.modes,
            decay: "polynomial".into(),
            decay_rate: 1.0,
            beta: d.beta,
            deltas: d.deltas,
            delta_der: d.delta_der,
            reps: d.reps,
            alpha0: d.alpha0,
            q_alpha: d.q_alpha,
            m: d.m,
            max_steps: d.max_steps,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub operators: Vec<String>,
    pub quantile: f64,
    pub reps: usize,
    pub grid: usize,
    pub n_list: Vec<usize>,
    pub h_fixed: f64,
    pub n_fixed: usize,
    pub h_list: Vec<f64>,
    pub concentration_reps: usize,
    pub concentration_n: usize,
    pub concentration_h: f64,
    pub lipschitz_pairs: usize,
    pub lipschitz_radius: f64,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        let v = VarianceDesign::new(ProbeOperator::Ind);
        Self {
            operators: vec!["ind".into(), "quant".into()],
            quantile: 0.5,
            reps: v.reps,
            grid: v.grid_n,
            n_list: v.n_list,
            h_fixed: v.h_fixed,
            n_fixed: v.n_fixed,
            h_list: v.h_list,
            concentration_reps: 500,
            concentration_n: 500,
            concentration_h: 0.1,
            lipschitz_pairs: 20,
            lipschitz_radius: 0.3,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub n: Option<usize>,
    pub grid: Option<usize>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(reps) = o.reps {
            self.simulation.reps = reps;
            self.rates.reps = reps;
            self.diagnose.reps = reps;
        }
        if let Some(n) = o.n {
            self.simulation.n = vec![n];
            self.diagnose.concentration_n = n;
        }
        if let Some(grid) = o.grid {
            self.irgnm.grid = grid;
            self.diagnose.grid = grid;
        }
        if let Some(threads) = o.threads {
            self.threads = threads;
        }
    }

    pub fn scenario(&self) -> Result<Scenario, CliError> {
        let s = &self.scenario;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::Config(format!("scenario.{name} must be positive, got {v}")))
            }
        };
        positive("sigma_v", s.sigma_v)?;
        positive("sigma_u", s.sigma_u)?;
        if !s.slope.is_finite() {
            return Err(CliError::Config("scenario.slope must be finite".into()));
        }
        if !(s.y_range[0] < s.y_range[1]) {
            return Err(CliError::Config("scenario.y_range must be increasing".into()));
        }
        Ok(Scenario {
            sigma_v: s.sigma_v,
            sigma_u: s.sigma_u,
            slope: s.slope,
            y_range: (s.y_range[0], s.y_range[1]),
            ..Scenario::default()
        })
    }

    pub fn kernel(&self) -> Result<KernelSpec, CliError> {
        parse_kernel(&self.kde.kernel).map_err(|_| CliError::Config(format!("kde.kernel: unknown kernel `{}`", self.kde.kernel)))
    }

    pub fn pipeline(&self) -> Result<PipelineSettings, CliError> {
        let i = &self.irgnm;
        let penalty = match i.penalty.to_ascii_lowercase().as_str() {
            "h1" => PenaltySpace::H1,
            "l2" => PenaltySpace::L2,
            other => return Err(CliError::Config(format!("irgnm.penalty: expected `h1` or `l2`, got `{other}`"))),
        };
        let s = &self.stopping;
        let settings = PipelineSettings {
            grid_n: i.grid,
            kde: KdeSettings {
                kernel: self.kernel()?,
                bandwidth_c: self.kde.bandwidth_c,
                bandwidth: self.kde.bandwidth,
            },
            alpha0: i.alpha0,
            q_alpha: i.q_alpha,
            m: i.m,
            radius: i.radius,
            max_steps: i.max_steps,
            ce_max_steps: i.ce_max_steps,
            penalty,
            w_mean: i.w_mean,
            stopping: StoppingSettings {
                c_cal: s.c_cal,
                c_der: s.c_der,
                c_d: s.c_d,
                rho: s.rho,
                gamma_nl: s.gamma_nl,
                c_stop: s.c_stop,
                risk_mode: s.risk_mode,
            },
        };
        settings.validate()?;
        if let Some(h) = settings.kde.bandwidth {
            if !(h > 0.0) {
                return Err(CliError::Config(format!("kde.bandwidth must be positive, got {h}")));
            }
        }
        Ok(settings)
    }

    /// One Monte Carlo configuration per sample size.
    pub fn monte_carlo(&self) -> Result<Vec<McConfig>, CliError> {
        let pipeline = self.pipeline()?;
        let sim = &self.simulation;
        if sim.n.is_empty() {
            return Err(CliError::Config("simulation.n must list at least one sample size".into()));
        }
        if sim.histogram_bins == 0 || !(sim.histogram_max > 0.0) {
            return Err(CliError::Config("simulation.histogram_bins and histogram_max must be positive".into()));
        }
        if !(0.0..=1.0).contains(&sim.max_invalid_fraction) {
            return Err(CliError::Config("simulation.max_invalid_fraction must lie in [0, 1]".into()));
        }
        sim.n
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                // disjoint seed blocks per sample size
                let mut c = McConfig::new(n, sim.reps, self.seed.wrapping_add((k * sim.reps) as u64));
                c.pipeline = pipeline.clone();
                c.max_invalid_fraction = sim.max_invalid_fraction;
                c.validate()?;
                Ok(c)
            })
            .collect()
    }

    pub fn rate_designs(&self) -> Result<Vec<RateDesign>, CliError> {
        let r = &self.rates;
        let decay = match r.decay.to_ascii_lowercase().as_str() {
            "polynomial" => Decay::Polynomial(r.decay_rate),
            "exponential" => Decay::Exponential(r.decay_rate),
            other => return Err(CliError::Config(format!("rates.decay: unknown decay `{other}`"))),
        };
        if !(r.decay_rate > 0.0) {
            return Err(CliError::Config("rates.decay_rate must be positive".into()));
        }
        if r.mu.is_empty() {
            return Err(CliError::Config("rates.mu must list at least one exponent".into()));
        }
        r.mu.iter()
            .enumerate()
            .map(|(k, &mu)| {
                let d = RateDesign {
                    modes: r.modes,
                    decay,
                    mu,
                    beta: r.beta,
                    deltas: r.deltas.clone(),
                    delta_der: r.delta_der,
                    reps: r.reps,
                    alpha0: r.alpha0,
                    q_alpha: r.q_alpha,
                    m: r.m,
                    max_steps: r.max_steps,
                    base_seed: self.seed.wrapping_add((k * r.reps * r.deltas.len()) as u64),
                    ..RateDesign::new(mu)
                };
                d.validate()?;
                d.irgnm_config().validate()?;
                Ok(d)
            })
            .collect()
    }

    pub fn probe_operators(&self) -> Result<Vec<ProbeOperator>, CliError> {
        let q = self.diagnose.quantile;
        if !(q > 0.0 && q < 1.0) {
            return Err(CliError::Config(format!("diagnose.quantile must lie in (0, 1), got {q}")));
        }
        self.diagnose
            .operators
            .iter()
            .map(|name| match name.to_ascii_lowercase().as_str() {
                "ind" => Ok(ProbeOperator::Ind),
                "quant" => Ok(ProbeOperator::Quant { q }),
                other => Err(CliError::Config(format!("diagnose.operators: unknown operator `{other}`"))),
            })
            .collect()
    }

    pub fn variance_design(&self, op: ProbeOperator) -> Result<VarianceDesign, CliError> {
        let d = &self.diagnose;
        Ok(VarianceDesign {
            operator: op,
            n_list: d.n_list.clone(),
            h_fixed: d.h_fixed,
            n_fixed: d.n_fixed,
            h_list: d.h_list.clone(),
            reps: d.reps,
            grid_n: d.grid,
            kernel: self.kernel()?,
            base_seed: self.seed,
        })
    }

    pub fn concentration_design(&self, op: ProbeOperator) -> Result<ConcentrationDesign, CliError> {
        let d = &self.diagnose;
        Ok(ConcentrationDesign {
            reps: d.concentration_reps,
            grid_n: d.grid,
            kernel: self.kernel()?,
            base_seed: self.seed,
            ..ConcentrationDesign::new(op, d.concentration_n, d.concentration_h)
        })
    }
}

fn parse_kernel(name: &str) -> Result<KernelSpec, ()> {
    match name.to_ascii_lowercase().as_str() {
        "gaussian" => Ok(KernelSpec::GAUSSIAN),
        "epanechnikov" => Ok(KernelSpec::EPANECHNIKOV),
        _ => Err(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.irgnm.m, PipelineSettings::default().m);
        c.pipeline().unwrap();
    }

    #[test]
    fn flags_win_over_file() {
        let mut c: RunConfig = toml::from_str("seed = 5\n[simulation]\nreps = 7\nn = [100, 200]\n").unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            n: Some(300),
            ..Default::default()
        });
        assert_eq!(c.seed, 9);
        assert_eq!(c.simulation.n, vec![300]);
        assert_eq!(c.simulation.reps, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[irgnm]\nqalpha = 0.5\n").is_err());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let c: RunConfig = toml::from_str("[irgnm]\nq_alpha = 1.2\n").unwrap();
        let msg = c.pipeline().unwrap_err().to_string();
        assert!(msg.contains("q_alpha"), "{msg}");
        let c: RunConfig = toml::from_str("[kde]\nkernel = \"box\"\n").unwrap();
        assert!(c.pipeline().unwrap_err().to_string().contains("kde.kernel"));
    }
}
