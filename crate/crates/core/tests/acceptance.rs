//! Acceptance suite: one line per criterion with the measured values, the
//! targets and the runtime. A criterion whose target is missed is reported
//! as FAIL; the process exits nonzero only if a check cannot be run at all.

use std::time::{Duration, Instant};

use irgnm::diagnostics::{
    decompose_error, lepskii_oracle_check, synthetic_rate_experiment, variance_scaling_probe, ProbeOperator,
    RateDesign, VarianceDesign,
};
use irgnm::numerics::inner_l2;
use irgnm::operators::{FieldRequest, OpImage};
use irgnm::regularization::{filter_g, filter_r, iterated_tikhonov_path, spectral_solve_check, LinearizedSystem};
use irgnm::simulation::{baseline_linear_reconstruct, exact_reconstruction, Method};
use irgnm::{
    generate_sample, run_irgnm, run_monte_carlo, DensityFields, DensityModel, FilterParams, ForwardModel, GridFn,
    IrgnmConfig, IvProblem, KernelSpec, McConfig, PenaltySpace, PipelineSettings, Scenario,
};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    passed: usize,
    total: usize,
}

impl Report {
    fn line(&mut self, id: &str, ok: bool, what: &str, elapsed: Duration, budget: Duration) {
        let within = elapsed <= budget;
        let ok = ok && within;
        self.total += 1;
        self.passed += usize::from(ok);
        println!(
            "criterion {id} [{}] {what}; runtime {:.1} s (budget {} s{})",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if within { "" } else { ", exceeded" }
        );
    }

    fn note(&self, id: &str, ok: bool, what: &str) {
        println!("  {id} [{}] {what}", if ok { "ok" } else { "miss" });
    }
}

fn within(v: f64, target: f64, tol: f64) -> bool {
    (v - target).abs() <= tol
}

fn criterion_1(r: &mut Report) {
    let t = Instant::now();
    let settings = PipelineSettings {
        grid_n: 100,
        max_steps: 25,
        ..PipelineSettings::default()
    };
    let rec = exact_reconstruction(&Scenario::default(), &settings).expect("exact reconstruction");
    let (full, interior) = (rec.best_error(), rec.best_interior_error());
    r.line(
        "1",
        full <= 0.15 && interior <= 0.08,
        &format!(
            "exact-density IND, grid 100, m = {}: best relative L2 error {full:.4} (<= 0.15) at step {}, interior {interior:.4} (<= 0.08)",
            settings.m, rec.best_index
        ),
        t.elapsed(),
        Duration::from_secs(300),
    );
}

fn criterion_2(r: &mut Report) {
    let t = Instant::now();
    let scn = Scenario::default();
    let pipeline = PipelineSettings {
        grid_n: 60,
        ..PipelineSettings::default()
    };
    let reps = 100;
    let reference = [(500usize, 0.2535, 0.4042), (1000, 0.2152, 0.3067)];
    let mut rows = Vec::new();
    for (k, &(n, _, _)) in reference.iter().enumerate() {
        let mut cfg = McConfig::new(n, reps, 1 + (k * reps) as u64);
        cfg.pipeline = pipeline.clone();
        let out = run_monte_carlo(&scn, &cfg).expect("Monte Carlo");
        let ind = *out.table.get(n, Method::Ind).expect("ind row");
        let ce = *out.table.get(n, Method::Ce).expect("ce row");
        rows.push((ind, ce, out.failures.len()));
    }
    let mut dominance = true;
    let mut proximity = true;
    for ((ind, ce, failed), &(n, p_ind, p_ce)) in rows.iter().zip(&reference) {
        let dom = ind.mean < ce.mean && ind.q75 < ce.q75;
        let prox_ind = within(ind.mean, p_ind, 0.10);
        let prox_ce = within(ce.mean, p_ce, 0.12);
        dominance &= dom;
        proximity &= prox_ind && prox_ce;
        r.note(
            &format!("2 n={n}"),
            dom && prox_ind && prox_ce,
            &format!(
                "ind mean {:.4} q75 {:.4} (target {p_ind} +/- 0.10); ce mean {:.4} q75 {:.4} (target {p_ce} +/- 0.12); dominance {}; {} of {reps} replications failed",
                ind.mean,
                ind.q75,
                ce.mean,
                ce.q75,
                if dom { "yes" } else { "no" },
                failed
            ),
        );
    }
    let monotone = rows[1].0.mean < rows[0].0.mean;
    r.line(
        "2",
        dominance && proximity && monotone,
        &format!(
            "Monte Carlo table, {reps} reps, grid 60: (a) dominance {}, (b) proximity {}, (c) monotonicity {} (ind mean {:.4} -> {:.4})",
            pass(dominance),
            pass(proximity),
            pass(monotone),
            rows[0].0.mean,
            rows[1].0.mean
        ),
        t.elapsed(),
        Duration::from_secs(7200),
    );
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

fn criterion_3(r: &mut Report) {
    let t = Instant::now();
    let scn = Scenario::default();
    let mut all = true;
    let mut parts = Vec::new();
    for (op, h_target) in [(ProbeOperator::Ind, -2.0), (ProbeOperator::Quant { q: 0.5 }, -1.0)] {
        let d = VarianceDesign {
            reps: 200,
            ..VarianceDesign::new(op)
        };
        let v = variance_scaling_probe(&scn, &d).expect("variance probe");
        let n_ok = within(v.n_fit.slope, -1.0, 0.15);
        let h_ok = within(v.h_fit.slope, h_target, 0.3);
        all &= n_ok && h_ok;
        r.note(
            &format!("3 {}", op.name()),
            n_ok && h_ok,
            &format!(
                "n-slope {:.3} (se {:.3}, target -1 +/- 0.15), h-slope {:.3} (se {:.3}, target {h_target} +/- 0.3); integrated field variance slopes n {:.3}, h {:.3}",
                v.n_fit.slope,
                v.n_fit.slope_se,
                v.h_fit.slope,
                v.h_fit.slope_se,
                v.n_field_fit.slope,
                v.h_field_fit.slope
            ),
        );
        parts.push(format!("{} n {:.2} h {:.2}", op.name(), v.n_fit.slope, v.h_fit.slope));
    }
    r.line(
        "3",
        all,
        &format!("variance scaling of the operator norm at the truth, 200 reps: {}", parts.join("; ")),
        t.elapsed(),
        Duration::from_secs(1800),
    );
}

fn criterion_4(r: &mut Report) {
    let t = Instant::now();
    let mut all = true;
    let mut parts = Vec::new();
    for (k, mu) in [1.0, 1.5].into_iter().enumerate() {
        let d = RateDesign {
            reps: 50,
            base_seed: 1000 * k as u64,
            ..RateDesign::new(mu)
        };
        let f = synthetic_rate_experiment(&d).expect("rate experiment");
        let ok = within(f.fit.slope, f.predicted, 0.1);
        all &= ok;
        let worst = f.points.iter().map(|p| p.rmse_lepskii / p.rmse_apriori).fold(0.0, f64::max);
        r.note(
            &format!("4 mu={mu}"),
            ok,
            &format!(
                "exponent {:.4} (se {:.4}, target {:.4} +/- 0.1) over {} levels in [{:.0e}, {:.0e}]",
                f.fit.slope,
                f.fit.slope_se,
                f.predicted,
                f.points.len(),
                d.deltas[0],
                d.deltas[d.deltas.len() - 1]
            ),
        );
        r.note(
            &format!("4 mu={mu} lepskii"),
            worst <= 3.0,
            &format!("max RMSE(Lepskii) / RMSE(a priori) = {worst:.3} (<= 3)"),
        );
        parts.push(format!("mu {mu}: {:.3}", f.fit.slope));
    }
    r.line(
        "4",
        all,
        &format!("synthetic risk-rate exponents, 6 levels x 50 reps: {}", parts.join(", ")),
        t.elapsed(),
        Duration::from_secs(600),
    );
}

fn random_fn(grid: irgnm::Grid1D, rng: &mut ChaCha8Rng, scale: f64) -> GridFn {
    let c: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let values = grid
        .nodes()
        .iter()
        .map(|x| scale * (c[0] + c[1] * (3.0 * x).sin() + c[2] * (5.0 * x).cos()))
        .collect();
    GridFn::new(grid, values).unwrap()
}

const ROUNDING: f64 = 1e-14;

fn criterion_5(r: &mut Report) {
    let t = Instant::now();
    let mut checks: Vec<(&str, bool, String)> = Vec::new();

    // filter identities over a λ sweep
    let mut id_err: f64 = 0.0;
    let mut sup_lg: f64 = 0.0;
    let mut g_ratio: f64 = 0.0;
    for m in 1..=10 {
        for alpha in [1e-6, 1e-3, 0.1, 1.0] {
            let p = FilterParams::new(alpha, m).unwrap();
            for k in 0..=400 {
                let lambda = 10f64.powf(-10.0 + k as f64 * 0.03);
                let g = filter_g(lambda, p);
                id_err = id_err.max((filter_r(lambda, p) + lambda * g - 1.0).abs());
                sup_lg = sup_lg.max(lambda * g);
                g_ratio = g_ratio.max(g * alpha / m as f64);
            }
        }
    }
    checks.push((
        "filter",
        id_err <= 1e-14 && sup_lg <= 1.0 + ROUNDING && g_ratio <= 1.0 + ROUNDING,
        format!(
            "max |r + lambda g - 1| {id_err:.1e}, sup lambda g - 1 = {:.1e}, max g alpha/m - 1 = {:.1e} (<= 0 up to rounding)",
            sup_lg - 1.0,
            g_ratio - 1.0
        ),
    ));

    // KDE-based operators on a small grid
    let scn = Scenario::default();
    let sample = generate_sample(&scn, 400, 5).unwrap();
    let model = DensityModel::new(sample, KernelSpec::GAUSSIAN, 0.1).unwrap();
    let grid = scn.grid(25).unwrap();
    let request = FieldRequest {
        derivative: true,
        cdf: true,
        conditional_mean: true,
    };
    let fields = DensityFields::from_kde(&model, grid, request).unwrap();
    let truth = scn.phi_true_fn(grid.gx);
    let problems = [
        IvProblem::ind(&fields, &truth, 1.0).unwrap(),
        IvProblem::quant(&fields, 0.5).unwrap(),
        IvProblem::ce(&fields).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut adj_err: f64 = 0.0;
    let mut fd_err: f64 = 0.0;
    for p in &problems {
        for _ in 0..5 {
            let phi = truth.combine(1.0, &random_fn(grid.gx, &mut rng, 0.05), 1.0).unwrap();
            let psi = random_fn(grid.gx, &mut rng, 1.0);
            let eta_v = DVector::from_fn(p.image_norm().len(), |_, _| rng.random_range(-1.0..1.0));
            let eta = OpImage::from_dvector(&eta_v, p.image_norm()).unwrap();
            let lhs = p.image_norm().inner(&p.derivative_apply(&phi, &psi).unwrap(), &eta).unwrap();
            let rhs = inner_l2(&psi, &p.derivative_adjoint_apply(&phi, &eta).unwrap()).unwrap();
            adj_err = adj_err.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));

            let e = 1e-5;
            let plus = p.apply(&phi.combine(1.0, &psi, e).unwrap()).unwrap().to_dvector();
            let minus = p.apply(&phi.combine(1.0, &psi, -e).unwrap()).unwrap().to_dvector();
            let fd = (plus - minus) / (2.0 * e);
            let exact = p.derivative_apply(&phi, &psi).unwrap().to_dvector();
            fd_err = fd_err.max((fd - &exact).norm() / exact.norm());
        }
    }
    checks.push(("adjoint", adj_err <= 1e-10, format!("max relative adjoint defect {adj_err:.1e} (<= 1e-10)")));
    checks.push(("derivative", fd_err <= 1e-3, format!("max relative central-difference defect {fd_err:.1e} (<= 1e-3)")));

    // iterated Tikhonov: argmin path against the spectral filter
    let ind = &problems[0];
    let phi0 = GridFn::constant(grid.gx, fields.mean_y).unwrap().to_dvector();
    let (f, jac) = ind.linearize(&phi0).unwrap();
    let mut path_err: f64 = 0.0;
    for penalty in [PenaltySpace::L2, PenaltySpace::H1] {
        let sys = LinearizedSystem::new(
            jac.clone(),
            f.clone() - &jac * &phi0,
            phi0.clone(),
            ind.image_weights(),
            ind.penalty_gram(penalty).unwrap(),
        )
        .unwrap();
        for alpha in [1e-3, 1e-1, 1.0] {
            for m in [1, 3, 8] {
                let p = FilterParams::new(alpha, m).unwrap();
                let argmin = iterated_tikhonov_path(&sys, p).unwrap().pop().unwrap();
                let spectral = spectral_solve_check(&sys, p).unwrap();
                path_err = path_err.max((argmin - &spectral).amax() / spectral.amax());
            }
        }
    }
    checks.push(("tikhonov", path_err <= 1e-8, format!("argmin vs spectral path {path_err:.1e} (<= 1e-8)")));

    // IRGNM on a linear operator is iterated Tikhonov from φ_0
    let ce = &problems[2];
    let cfg = IrgnmConfig {
        max_steps: 15,
        m: 3,
        radius: f64::INFINITY,
        penalty: PenaltySpace::H1,
        ..IrgnmConfig::new(phi0.clone())
    };
    let run = run_irgnm(ce, &cfg).unwrap();
    let direct = baseline_linear_reconstruct(ce, &run.alphas[..cfg.max_steps], &phi0, cfg.m, cfg.penalty).unwrap();
    let lin_err = direct
        .iter()
        .enumerate()
        .map(|(j, d)| (&run.iterates[j + 1] - d).amax() / d.amax())
        .fold(0.0, f64::max);
    checks.push(("linear", lin_err <= 1e-10, format!("IRGNM vs iterated Tikhonov on CE {lin_err:.1e} (<= 1e-10)")));

    // nonlinearity error vanishes for a linear synthetic problem
    let design = RateDesign {
        modes: 40,
        ..RateDesign::new(1.0)
    };
    let sp = design.noisy_problem(1e-3, 3).unwrap();
    let scfg = IrgnmConfig {
        max_steps: 20,
        ..design.irgnm_config()
    };
    let srun = run_irgnm(&sp, &scfg).unwrap();
    let mut nl: f64 = 0.0;
    for j in 0..scfg.max_steps {
        nl = nl.max(decompose_error(&sp, Some(sp.oracle()), &srun, &scfg, j).unwrap().e_nl.norm());
    }
    checks.push(("e_nl", nl <= 1e-12, format!("max ||e_nl|| on a linear problem {nl:.1e} (<= 1e-12)")));

    // Lepskiĭ oracle inequality
    let design = RateDesign {
        modes: 80,
        ..RateDesign::new(1.0)
    };
    let passed = (0..200u64)
        .filter(|&s| {
            let delta = 10f64.powf(-4.0 + 0.5 * (s % 5) as f64);
            lepskii_oracle_check(&design, delta, s).unwrap().passes()
        })
        .count();
    checks.push(("lepskii", passed >= 190, format!("oracle inequality held in {passed}/200 seeds (>= 95%)")));

    let all = checks.iter().all(|c| c.1);
    for (name, ok, msg) in &checks {
        r.note(&format!("5 {name}"), *ok, msg);
    }
    r.line(
        "5",
        all,
        &format!("property suites: {}/{} hold", checks.iter().filter(|c| c.1).count(), checks.len()),
        t.elapsed(),
        Duration::from_secs(60),
    );
}

fn main() {
    let mut r = Report { passed: 0, total: 0 };
    criterion_5(&mut r);
    criterion_1(&mut r);
    criterion_4(&mut r);
    criterion_3(&mut r);
    criterion_2(&mut r);
    println!("acceptance: {}/{} criteria passed", r.passed, r.total);
}
