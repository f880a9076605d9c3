//! Shared fixtures for the benchmarks.

use irgnm::operators::{DensityFields, FieldRequest};
use irgnm::{generate_sample, DensityModel, GridFn, IvProblem, KernelSpec, Sample, Scenario};

pub struct Fixture {
    pub scenario: Scenario,
    pub sample: Sample,
    pub model: DensityModel,
    pub fields: DensityFields,
    pub phi0: GridFn,
    pub truth: GridFn,
}

impl Fixture {
    /// Simulated sample of size `n` and KDE fields on a `grid_n³` grid.
    pub fn new(n: usize, grid_n: usize) -> Self {
        let scenario = Scenario::default();
        let sample = generate_sample(&scenario, n, 1).expect("sample");
        let model = DensityModel::new(sample.clone(), KernelSpec::GAUSSIAN, 0.08).expect("model");
        let grid = scenario.grid(grid_n).expect("grid");
        let request = FieldRequest {
            derivative: true,
            cdf: true,
            conditional_mean: true,
        };
        let fields = DensityFields::from_kde(&model, grid, request).expect("fields");
        let phi0 = GridFn::constant(grid.gx, fields.mean_y).expect("phi0");
        let truth = scenario.phi_true_fn(grid.gx);
        Self {
            scenario,
            sample,
            model,
            fields,
            phi0,
            truth,
        }
    }

    pub fn ind(&self) -> IvProblem {
        IvProblem::ind(&self.fields, &self.phi0, 1.0).expect("ind problem")
    }
}
