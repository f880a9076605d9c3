//! Stopping-index selection: the admissible range `J_max`, the a-priori
//! index from a known approximation-error bound, and the Lepskiĭ balancing
//! principle.

use log::warn;

use crate::error::{invalid, Error, Result};
use crate::irgnm::IrgnmRun;

/// Deterministic (`δ`) and stochastic (`σ`) noise levels of the operator
/// value and of its derivative.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseLevels {
    pub delta_noi: f64,
    pub sigma_noi: f64,
    pub delta_der: f64,
    pub sigma_der: f64,
}

impl NoiseLevels {
    pub fn new(delta_noi: f64, sigma_noi: f64, delta_der: f64, sigma_der: f64) -> Result<Self> {
        let out = Self {
            delta_noi,
            sigma_noi,
            delta_der,
            sigma_der,
        };
        for (name, v) in [
            ("delta_noi", delta_noi),
            ("sigma_noi", sigma_noi),
            ("delta_der", delta_der),
            ("sigma_der", sigma_der),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be nonnegative, got {v}")));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryConstants {
    pub c_g: f64,
    pub c_d: f64,
    pub rho: f64,
    pub gamma_nl: f64,
    pub c_stop: f64,
    pub lipschitz: Option<f64>,
    pub mu: Option<f64>,
}

impl TheoryConstants {
    /// `C_g = m`, `C_d = ρ = 1`, `γ_nl = 0.5`.
    pub fn new(m: usize, c_stop: f64) -> Self {
        Self {
            c_g: m as f64,
            c_d: 1.0,
            rho: 1.0,
            gamma_nl: 0.5,
            c_stop,
            lipschitz: None,
            mu: None,
        }
    }

    /// Sets `γ_nl = 8 L √C_g C_stop`, which must not exceed 1.
    pub fn with_lipschitz(mut self, l: f64) -> Result<Self> {
        let gamma = 8.0 * l * self.c_g.sqrt() * self.c_stop;
        if !(gamma <= 1.0) {
            return Err(invalid("c_stop", format!("gives γ_nl = {gamma:.4} > 1 for L = {l}")));
        }
        self.lipschitz = Some(l);
        self.gamma_nl = gamma;
        Ok(self)
    }

    /// `γ_app = q^{-m}`.
    pub fn gamma_app(q_alpha: f64, m: usize) -> f64 {
        q_alpha.powi(-(m as i32))
    }
}

/// Monotone bound `Φ(j)` on the propagated noise of iterate `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiBound {
    values: Vec<f64>,
}

impl PhiBound {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(invalid("phi", "values must be nonnegative"));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("phi", "must be nondecreasing in j"));
        }
        Ok(Self { values })
    }

    pub fn evaluate(&self, j: usize) -> f64 {
        self.values[j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn inflated(sigma: f64, risk_mode: bool) -> f64 {
    if !risk_mode || sigma <= 0.0 {
        return sigma;
    }
    ((sigma.powi(-2)).ln() * sigma).max(0.0)
}

/// `Φ(j) = √(C_g/α_j)(δ_noi + s_noi) + C_d ρ (δ_der + s_der)` with `s = σ`,
/// or `s = ln(σ⁻²) σ` in risk mode.
pub fn default_phi(nl: &NoiseLevels, alphas: &[f64], tc: &TheoryConstants, risk_mode: bool) -> PhiBound {
    let noi = nl.delta_noi + inflated(nl.sigma_noi, risk_mode);
    let der = tc.c_d * tc.rho * (nl.delta_der + inflated(nl.sigma_der, risk_mode));
    let mut values: Vec<f64> = alphas.iter().map(|a| (tc.c_g / a).sqrt() * noi + der).collect();
    // guard against rounding in non-geometric inputs
    for j in 1..values.len() {
        if values[j] < values[j - 1] {
            values[j] = values[j - 1];
        }
    }
    PhiBound { values }
}

/// `J_max = max{j : Φ(j)/√α_j ≤ C_stop}`, or 0 if no index qualifies.
pub fn compute_jmax(phi: &PhiBound, alphas: &[f64], c_stop: f64) -> Result<usize> {
    if alphas.is_empty() {
        return Err(invalid("alphas", "must not be empty"));
    }
    if phi.len() < alphas.len() {
        return Err(Error::ShapeMismatch {
            expected: alphas.len(),
            got: phi.len(),
        });
    }
    Ok((0..alphas.len())
        .rev()
        .find(|&j| phi.evaluate(j) / alphas[j].sqrt() <= c_stop)
        .unwrap_or(0))
}

/// `argmin_j e_app(j) + √(C_g/α_j)(δ + σ)`; ties go to the smallest index.
pub fn a_priori_stop(e_app_bound: &[f64], nl: &NoiseLevels, alphas: &[f64], tc: &TheoryConstants) -> usize {
    let level = nl.delta_noi + nl.sigma_noi;
    let mut best = (0, f64::INFINITY);
    for (j, (e, a)) in e_app_bound.iter().zip(alphas).enumerate() {
        let v = e + (tc.c_g / a).sqrt() * level;
        if v < best.1 {
            best = (j, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LepskiiChoice {
    pub index: usize,
    /// Set when `j_max` had to be clamped to the available history.
    pub clamped: bool,
}

/// Smallest `j ≤ j_max` with `d(i, j) ≤ 4(1 + γ_nl) Φ(i)` for every
/// `j ≤ i ≤ j_max`, for an arbitrary distance between iterates.
pub fn lepskii_select_by(
    distance: impl Fn(usize, usize) -> f64,
    n_iterates: usize,
    phi: &PhiBound,
    gamma_nl: f64,
    j_max: usize,
) -> LepskiiChoice {
    let limit = j_max.min(n_iterates.saturating_sub(1)).min(phi.len().saturating_sub(1));
    let clamped = limit != j_max;
    if clamped {
        warn!("Lepskii range clamped from {j_max} to {limit}");
    }
    let factor = 4.0 * (1.0 + gamma_nl);
    let index = (0..=limit)
        .find(|&j| (j..=limit).all(|i| distance(i, j) <= factor * phi.evaluate(i)))
        .unwrap_or(limit);
    LepskiiChoice { index, clamped }
}

/// Lepskiĭ choice among the iterates of `run`, with distances in the
/// penalty norm. `phi` is indexed by iterate.
pub fn lepskii_select(run: &IrgnmRun, phi: &PhiBound, gamma_nl: f64, j_max: usize) -> LepskiiChoice {
    lepskii_select_by(|i, j| run.distance(i, j), run.len(), phi, gamma_nl, j_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geometric(n: usize, a0: f64, q: f64) -> Vec<f64> {
        (0..n).map(|j| a0 * q.powi(j as i32)).collect()
    }

    fn tc1() -> TheoryConstants {
        let mut tc = TheoryConstants::new(1, 0.1);
        tc.c_d = 1.0;
        tc
    }

    #[test]
    fn jmax_examples() {
        let alphas = geometric(60, 1.0, 0.9);
        let nl = NoiseLevels::new(0.01, 0.0, 0.0, 0.0).unwrap();
        let phi = default_phi(&nl, &alphas, &tc1(), false);
        assert_eq!(compute_jmax(&phi, &alphas, 0.1).unwrap(), 21);
        let zero = default_phi(&NoiseLevels::default(), &alphas, &tc1(), false);
        assert_eq!(compute_jmax(&zero, &alphas, 0.1).unwrap(), 59);
        assert_eq!(compute_jmax(&phi, &alphas, 0.001).unwrap(), 0);
        assert!(compute_jmax(&phi, &[], 0.1).is_err());
    }

    fn brute_argmin(f: impl Fn(usize) -> f64, n: usize) -> usize {
        let mut best = 0;
        for j in 1..n {
            if f(j) < f(best) {
                best = j;
            }
        }
        best
    }

    #[test]
    fn a_priori_examples() {
        let alphas = geometric(200, 1.0, 0.9);
        let e_app: Vec<f64> = alphas.clone();
        let tc = tc1();
        for level in [1e-3, 2e-3] {
            let nl = NoiseLevels::new(level, 0.0, 0.0, 0.0).unwrap();
            let j = a_priori_stop(&e_app, &nl, &alphas, &tc);
            let oracle = brute_argmin(|j| 0.9f64.powi(j as i32) + level * 0.9f64.powf(-(j as f64) / 2.0), 200);
            assert_eq!(j, oracle);
        }
        let nl = NoiseLevels::new(1e-3, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(a_priori_stop(&e_app, &nl, &alphas, &tc), 48);
        let nl = NoiseLevels::new(1e-3, 1e-3, 0.0, 0.0).unwrap();
        assert_eq!(a_priori_stop(&e_app, &nl, &alphas, &tc), 44);
        let short = geometric(31, 1.0, 0.9);
        assert_eq!(a_priori_stop(&short, &NoiseLevels::default(), &short, &tc), 30);
        let nl = NoiseLevels::new(1e6, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(a_priori_stop(&e_app, &nl, &alphas, &tc), 0);
    }

    #[test]
    fn a_priori_is_local_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tc = tc1();
        for _ in 0..50 {
            let alphas = geometric(80, rng.random_range(0.1..2.0), rng.random_range(0.5..0.95));
            let mu = rng.random_range(0.5..2.0);
            let e_app: Vec<f64> = alphas.iter().map(|a| a.powf(mu)).collect();
            let nl = NoiseLevels::new(10f64.powf(rng.random_range(-6.0..-1.0)), 0.0, 0.0, 0.0).unwrap();
            let j = a_priori_stop(&e_app, &nl, &alphas, &tc);
            let obj = |k: usize| e_app[k] + alphas[k].powf(-0.5) * nl.delta_noi;
            if j > 0 {
                assert!(obj(j) <= obj(j - 1));
            }
            if j + 1 < 80 {
                assert!(obj(j) <= obj(j + 1));
            }
        }
    }

    #[test]
    fn phi_examples() {
        let alphas = geometric(51, 1.0, 0.9);
        let zero = default_phi(&NoiseLevels::default(), &alphas, &tc1(), true);
        assert!(zero.values().iter().all(|v| *v == 0.0));
        let s = (-1.0f64).exp();
        let nl = NoiseLevels::new(0.0, s, 0.0, 0.0).unwrap();
        let risk = default_phi(&nl, &alphas, &tc1(), true);
        let det = default_phi(&nl, &alphas, &tc1(), false);
        assert_abs_diff_eq!(risk.evaluate(3) / det.evaluate(3), 2.0, epsilon = 1e-14);
        assert!(PhiBound::new(vec![1.0, 0.5]).is_err());
    }

    proptest! {
        #[test]
        fn phi_is_monotone(
            d in 0.0f64..1.0, s in 0.0f64..1.0, dd in 0.0f64..1.0, sd in 0.0f64..1.0,
            a0 in 0.01f64..10.0, q in 0.3f64..0.99, risk in any::<bool>(),
        ) {
            let alphas = geometric(51, a0, q);
            let nl = NoiseLevels::new(d, s, dd, sd).unwrap();
            let phi = default_phi(&nl, &alphas, &tc1(), risk);
            for j in 1..51 {
                prop_assert!(phi.evaluate(j) >= phi.evaluate(j - 1));
            }
        }

        #[test]
        fn jmax_monotone_in_levels_and_cstop(d1 in 1e-4f64..0.1, d2 in 1e-4f64..0.1, c1 in 0.01f64..1.0, c2 in 0.01f64..1.0) {
            let alphas = geometric(80, 1.0, 0.9);
            let (lo, hi) = (d1.min(d2), d1.max(d2));
            let (cl, ch) = (c1.min(c2), c1.max(c2));
            let tc = tc1();
            let p_lo = default_phi(&NoiseLevels::new(lo, 0.0, 0.0, 0.0).unwrap(), &alphas, &tc, false);
            let p_hi = default_phi(&NoiseLevels::new(hi, 0.0, 0.0, 0.0).unwrap(), &alphas, &tc, false);
            prop_assert!(compute_jmax(&p_hi, &alphas, cl).unwrap() <= compute_jmax(&p_lo, &alphas, cl).unwrap());
            prop_assert!(compute_jmax(&p_lo, &alphas, cl).unwrap() <= compute_jmax(&p_lo, &alphas, ch).unwrap());
        }
    }

    #[test]
    fn lepskii_trivial_cases() {
        let phi = PhiBound::new(vec![1.0]).unwrap();
        assert_eq!(lepskii_select_by(|_, _| 0.0, 1, &phi, 0.5, 0).index, 0);
        let inf = PhiBound::new(vec![f64::INFINITY; 10]).unwrap();
        assert_eq!(lepskii_select_by(|i, j| (i + j) as f64, 10, &inf, 0.5, 9).index, 0);
        let clamped = lepskii_select_by(|_, _| 0.0, 3, &inf, 0.5, 9);
        assert!(clamped.clamped);
    }

    /// `φ̂_j − φ† = q^j e₁ + noise · q^{-j/2} e₂`, with `Φ(j) = noise · q^{-j/2}`.
    /// Returns the chosen index, the error-minimizing index and the error ratio.
    fn select_on_two_modes(q: f64, noise: f64, n: usize) -> (usize, usize, f64) {
        let hist: Vec<[f64; 2]> = (0..n)
            .map(|j| [q.powi(j as i32), noise * q.powf(-(j as f64) / 2.0)])
            .collect();
        let err = |j: usize| (hist[j][0].powi(2) + hist[j][1].powi(2)).sqrt();
        let best = (0..n).min_by(|&a, &c| err(a).partial_cmp(&err(c)).unwrap()).unwrap();
        let phi = PhiBound::new((0..n).map(|j| noise * q.powf(-(j as f64) / 2.0)).collect()).unwrap();
        let dist = |i: usize, j: usize| ((hist[i][0] - hist[j][0]).powi(2) + (hist[i][1] - hist[j][1]).powi(2)).sqrt();
        let choice = lepskii_select_by(dist, n, &phi, 0.0, n - 1);
        (choice.index, best, err(choice.index) / err(best))
    }

    #[test]
    fn lepskii_two_mode_history() {
        for noise in [1e-2, 3e-3, 1e-3, 1e-4, 1e-5] {
            let (chosen, best, _) = select_on_two_modes(0.5, noise, 40);
            assert!((chosen as i64 - best as i64).abs() <= 2, "noise {noise}: {chosen} vs {best}");
        }
        // slower schedules drift further in index but stay within the oracle factor 6 q^{-1/2}
        for q in [0.7, 0.8, 0.9] {
            for noise in [1e-2, 1e-3, 1e-4] {
                let (_, _, ratio) = select_on_two_modes(q, noise, 120);
                assert!(ratio <= 6.0 / q.sqrt(), "q {q}, noise {noise}: ratio {ratio}");
            }
        }
    }

    #[test]
    fn lepskii_ignores_iterates_beyond_jmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let phi = PhiBound::new((0..40).map(|j| 0.05 * (1.0 + j as f64)).collect()).unwrap();
        let a = lepskii_select_by(|i, j| (pts[i] - pts[j]).abs(), 20, &phi, 0.5, 15);
        let b = lepskii_select_by(|i, j| (pts[i] - pts[j]).abs(), 30, &phi, 0.5, 15);
        assert_eq!(a, b);
    }

    #[test]
    fn gamma_from_lipschitz() {
        let tc = TheoryConstants::new(4, 0.01).with_lipschitz(2.0).unwrap();
        assert_abs_diff_eq!(tc.gamma_nl, 8.0 * 2.0 * 2.0 * 0.01, epsilon = 1e-15);
        assert!(TheoryConstants::new(4, 1.0).with_lipschitz(2.0).is_err());
        assert_abs_diff_eq!(TheoryConstants::gamma_app(0.5, 3), 8.0, epsilon = 1e-15);
    }
}
