//! Outer Gauss–Newton iteration with a geometric regularization schedule,
//! iterated Tikhonov inner solves and the emergency reset to `φ_0`.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::numerics::{Grid1D, GridFn};
use crate::operators::ForwardModel;
use crate::regularization::{iterated_tikhonov, FilterParams, LinearizedSystem, PenaltySpace};

#[derive(Debug, Clone, PartialEq)]
pub struct IrgnmConfig {
    pub alpha0: f64,
    pub q_alpha: f64,
    pub m: usize,
    /// Radius `R` of the ball around `φ_0`; iterates farther than `2R` are reset.
    pub radius: f64,
    pub phi0: DVector<f64>,
    pub max_steps: usize,
    pub penalty: PenaltySpace,
}

impl IrgnmConfig {
    pub fn new(phi0: DVector<f64>) -> Self {
        Self {
            alpha0: 1.0,
            q_alpha: 0.9,
            m: 2,
            radius: 1.0,
            phi0,
            max_steps: 30,
            penalty: PenaltySpace::H1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(invalid("alpha0", format!("must be positive, got {}", self.alpha0)));
        }
        if !(self.q_alpha > 0.0 && self.q_alpha < 1.0) {
            return Err(invalid("q_alpha", format!("must lie in (0, 1), got {}", self.q_alpha)));
        }
        if self.m == 0 {
            return Err(invalid("m", "must be at least 1"));
        }
        if !(self.radius > 0.0) {
            return Err(invalid("radius", format!("must be positive, got {}", self.radius)));
        }
        Ok(())
    }

    /// `α_j = α_0 q^j`.
    pub fn alpha(&self, j: usize) -> f64 {
        self.alpha0 * self.q_alpha.powi(j as i32)
    }
}

/// Complete iterate history of one IRGNM run.
///
/// Iterate `j + 1` is computed with `alphas[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IrgnmRun {
    pub iterates: Vec<DVector<f64>>,
    /// `α_0 q^j`, one entry per iterate.
    pub alphas: Vec<f64>,
    /// `‖F̂(φ̂_j)‖` in the image norm, one entry per iterate.
    pub residual_norms: Vec<f64>,
    pub emergency_stopped: bool,
    /// First step whose candidate left the `2R` ball.
    pub emergency_step: Option<usize>,
    /// Every step that triggered a reset.
    pub emergency_steps: Vec<usize>,
    /// Largest eigenvalue of `T̂*T̂` at `φ_0` in the penalty metric.
    pub normal_operator_norm: f64,
    gram: DMatrix<f64>,
    q_alpha: f64,
}

impl IrgnmRun {
    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn last_index(&self) -> usize {
        self.iterates.len() - 1
    }

    /// Penalty-space distance between iterates `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        penalty_norm(&self.gram, &(&self.iterates[i] - &self.iterates[j]))
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Regularization parameter that produced each iterate: `α_{j−1}` for
    /// `j ≥ 1` and `α_0 / q` for the initial guess.
    pub fn iterate_alphas(&self) -> Vec<f64> {
        (0..self.len())
            .map(|j| if j == 0 { self.alphas[0] / self.q_alpha } else { self.alphas[j - 1] })
            .collect()
    }

    pub fn iterate_fn(&self, j: usize, grid: Grid1D) -> Result<GridFn> {
        GridFn::from_dvector(grid, &self.iterates[j])
    }
}

pub fn penalty_norm(gram: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(gram * v)).max(0.0).sqrt()
}

fn weighted_norm(v: &DVector<f64>, w: &DVector<f64>) -> f64 {
    v.component_mul(v).dot(w).max(0.0).sqrt()
}

/// One outer step: linearize at `φ_j` and run `m` iterated Tikhonov steps on
/// `‖F̂(φ_j) + T(φ − φ_j)‖² + α‖φ − φ̄_i‖²_P`, with inner iteration starting
/// at `φ_0`.
pub fn newton_step<M: ForwardModel + ?Sized>(
    model: &M,
    phi_j: &DVector<f64>,
    cfg: &IrgnmConfig,
    alpha: f64,
    gram: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let (f, t) = model.linearize(phi_j)?;
    step_from_linearization(model, f, t, phi_j, cfg, alpha, gram)
}

fn step_from_linearization<M: ForwardModel + ?Sized>(
    model: &M,
    f: DVector<f64>,
    t: DMatrix<f64>,
    phi_j: &DVector<f64>,
    cfg: &IrgnmConfig,
    alpha: f64,
    gram: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let offset = f - &t * phi_j;
    let sys = LinearizedSystem::new(t, offset, cfg.phi0.clone(), model.image_weights(), gram.clone())?;
    iterated_tikhonov(&sys, FilterParams::new(alpha, cfg.m)?)
}

/// Runs `max_steps` outer steps and keeps every iterate.
///
/// A candidate farther than `2R` from `φ_0` in the penalty norm is replaced
/// by `φ_0`; the iteration then continues with the next `α`.
pub fn run<M: ForwardModel + ?Sized>(model: &M, cfg: &IrgnmConfig) -> Result<IrgnmRun> {
    cfg.validate()?;
    if cfg.phi0.len() != model.dim() {
        return Err(crate::Error::ShapeMismatch {
            expected: model.dim(),
            got: cfg.phi0.len(),
        });
    }
    let gram = model.penalty_gram(cfg.penalty)?;
    let weights = model.image_weights();
    let mut iterates = vec![cfg.phi0.clone()];
    let mut alphas = vec![cfg.alpha0];
    let mut residual_norms = Vec::with_capacity(cfg.max_steps + 1);
    let mut emergency_steps = Vec::new();
    let mut normal_operator_norm = f64::NAN;

    for j in 0..cfg.max_steps {
        let (f, t) = model.linearize(&iterates[j])?;
        residual_norms.push(weighted_norm(&f, &weights));
        if j == 0 {
            let probe = LinearizedSystem::new(
                t.clone(),
                DVector::zeros(t.nrows()),
                cfg.phi0.clone(),
                weights.clone(),
                gram.clone(),
            )?;
            normal_operator_norm = probe.normal_operator_norm()?;
            if cfg.alpha0 < normal_operator_norm / (1.0 - cfg.q_alpha) {
                warn!(
                    "alpha0 = {} is below ‖T*T‖/(1 − q) = {:.4e}",
                    cfg.alpha0,
                    normal_operator_norm / (1.0 - cfg.q_alpha)
                );
            }
        }
        let alpha = alphas[j];
        let candidate = step_from_linearization(model, f, t, &iterates[j], cfg, alpha, &gram)?;
        let dist = penalty_norm(&gram, &(&candidate - &cfg.phi0));
        let next = if dist > 2.0 * cfg.radius {
            debug!("step {}: ‖φ − φ0‖ = {dist:.4e} exceeds 2R, resetting", j + 1);
            emergency_steps.push(j + 1);
            cfg.phi0.clone()
        } else {
            candidate
        };
        iterates.push(next);
        alphas.push(cfg.alpha(j + 1));
    }
    let last = iterates.last().expect("nonempty");
    residual_norms.push(weighted_norm(&model.residual(last)?, &weights));
    if cfg.max_steps == 0 {
        let (_, t) = model.linearize(last)?;
        let probe = LinearizedSystem::new(t.clone(), DVector::zeros(t.nrows()), cfg.phi0.clone(), weights, gram.clone())?;
        normal_operator_norm = probe.normal_operator_norm()?;
    }
    Ok(IrgnmRun {
        iterates,
        alphas,
        residual_norms,
        emergency_stopped: !emergency_steps.is_empty(),
        emergency_step: emergency_steps.first().copied(),
        emergency_steps,
        normal_operator_norm,
        gram,
        q_alpha: cfg.q_alpha,
    })
}
