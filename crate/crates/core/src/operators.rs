//! Forward operators of the instrumental-variable integral equations:
//! the linear conditional-expectation operator (CE), the full-independence
//! operator (IND) and the quantile operator (QUANT).
//!
//! Off-grid evaluation along `y` uses cubic Hermite interpolation of the
//! kernel column and its stored `y`-derivative, so the Jacobian returned by
//! [`IvProblem::assemble_derivative_matrix`] is the exact derivative of the
//! discretized [`IvProblem::apply`].

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::kde::DensityModel;
use crate::numerics::{
    h1_gram, hermite_eval, hermite_second_derivative_bound, l2_gram, Field2, Field3, Grid1D, Grid3, GridFn,
};
use crate::regularization::PenaltySpace;

/// Floor applied to `f̂_Z` when forming the conditional density `f̂_{X|Z}`.
pub const CE_DENSITY_FLOOR: f64 = 1e-3;

/// A discretized nonlinear forward map between coefficient vectors.
///
/// The image space carries the diagonal weights from
/// [`ForwardModel::image_weights`]; the unknown lives in a penalty space
/// whose Gram matrix is [`ForwardModel::penalty_gram`].
pub trait ForwardModel {
    /// Number of unknowns.
    fn dim(&self) -> usize;

    fn image_weights(&self) -> DVector<f64>;

    fn penalty_gram(&self, penalty: PenaltySpace) -> Result<DMatrix<f64>>;

    /// `F̂(φ)` as a flat image vector.
    fn residual(&self, phi: &DVector<f64>) -> Result<DVector<f64>>;

    /// Matrix of `F̂'[φ]`.
    fn jacobian(&self, phi: &DVector<f64>) -> Result<DMatrix<f64>>;

    fn linearize(&self, phi: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.residual(phi)?, self.jacobian(phi)?))
    }

    fn is_linear(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProblemKind {
    Ce,
    Ind { w_mean: f64 },
    Quant { q: f64 },
}

/// Density-derived fields shared by all operators, from a kernel estimate or
/// from a closed-form density.
#[derive(Debug, Clone)]
pub struct DensityFields {
    pub grid: Grid3,
    pub f_yxz: Field3,
    pub df_dy: Option<Field3>,
    pub cdf_y: Option<Field3>,
    pub f_yx: Field2,
    pub df_yx: Option<Field2>,
    pub f_xz: Field2,
    pub f_z: GridFn,
    pub f_x: GridFn,
    pub f_y: GridFn,
    pub mean_y: f64,
    /// `E[Y | Z = z]` on the `z` grid.
    pub psi: Option<GridFn>,
}

/// Which optional fields to estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FieldRequest {
    pub derivative: bool,
    pub cdf: bool,
    pub conditional_mean: bool,
}

impl FieldRequest {
    pub const ALL: FieldRequest = FieldRequest {
        derivative: true,
        cdf: true,
        conditional_mean: true,
    };
}

impl DensityFields {
    pub fn from_kde(model: &DensityModel, grid: Grid3, request: FieldRequest) -> Result<Self> {
        let marg = model.marginals(&grid)?;
        Ok(Self {
            grid,
            f_yxz: model.density_3d(&grid)?,
            df_dy: if request.derivative {
                Some(model.density_dy(&grid)?)
            } else {
                None
            },
            cdf_y: if request.cdf {
                Some(model.smoothed_cdf_y(&grid)?)
            } else {
                None
            },
            f_yx: marg.f_yx,
            df_yx: marg.df_yx,
            f_xz: marg.f_xz,
            f_z: marg.f_z,
            f_x: marg.f_x,
            f_y: marg.f_y,
            mean_y: model.sample().mean_y(),
            psi: if request.conditional_mean {
                Some(model.conditional_mean_y(&grid.gz)?)
            } else {
                None
            },
        })
    }
}

/// Operator value: a function on the image grid plus, for IND, the scalar
/// mean constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct OpImage {
    pub field: Vec<f64>,
    pub scalar: Option<f64>,
}

impl OpImage {
    pub fn len(&self) -> usize {
        self.field.len() + usize::from(self.scalar.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.field.iter().copied().chain(self.scalar))
    }

    /// Splits a flat vector according to `norm`'s layout.
    pub fn from_dvector(v: &DVector<f64>, norm: &ImageNorm) -> Result<Self> {
        if v.len() != norm.len() {
            return Err(Error::ShapeMismatch {
                expected: norm.len(),
                got: v.len(),
            });
        }
        let nf = norm.weights.len();
        Ok(Self {
            field: v.as_slice()[..nf].to_vec(),
            scalar: norm.w_mean.map(|_| v[nf]),
        })
    }
}

/// Weighted `L²` norm on the image grid, plus a weighted scalar component
/// for IND.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageNorm {
    weights: Vec<f64>,
    w_mean: Option<f64>,
}

impl ImageNorm {
    pub fn new(weights: Vec<f64>, w_mean: Option<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(invalid("image weights", "must be positive"));
        }
        if let Some(w) = w_mean {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(invalid("w_mean", format!("must be nonnegative, got {w}")));
            }
        }
        Ok(Self { weights, w_mean })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn w_mean(&self) -> Option<f64> {
        self.w_mean
    }

    pub fn len(&self) -> usize {
        self.weights.len() + usize::from(self.w_mean.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Diagonal of the image Gram matrix.
    pub fn weight_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.weights.iter().copied().chain(self.w_mean))
    }

    fn check(&self, a: &OpImage) -> Result<()> {
        if a.field.len() != self.weights.len() || a.scalar.is_some() != self.w_mean.is_some() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                got: a.len(),
            });
        }
        Ok(())
    }

    pub fn inner(&self, a: &OpImage, b: &OpImage) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        let mut s: f64 = self
            .weights
            .iter()
            .zip(a.field.iter().zip(&b.field))
            .map(|(w, (x, y))| w * x * y)
            .sum();
        if let (Some(w), Some(x), Some(y)) = (self.w_mean, a.scalar, b.scalar) {
            s += w * x * y;
        }
        Ok(s)
    }

    pub fn norm(&self, a: &OpImage) -> Result<f64> {
        Ok(self.inner(a, a)?.max(0.0).sqrt())
    }
}

/// One of the three instrumental-variable operators on fixed grids.
///
/// For IND and QUANT the kernel is stored column-wise as value and
/// `y`-derivative arrays with `y` running fastest; IND uses
/// `k = f_YXZ − f_YX f_Z` and QUANT uses the smoothed CDF `F_YXZ` with
/// derivative `f_YXZ`.
#[derive(Debug, Clone)]
pub struct IvProblem {
    kind: ProblemKind,
    gy: Grid1D,
    gx: Grid1D,
    gz: Grid1D,
    gu: Option<Grid1D>,
    wx: Vec<f64>,
    col_val: Vec<f64>,
    col_der: Vec<f64>,
    /// CE kernel `f_XZ / max(f_Z, floor)`, indexed `iz * nx + ix`.
    ce_kernel: Vec<f64>,
    /// Subtracted from the field component (`ψ̂` for CE, `q f_Z` for QUANT).
    offset: Vec<f64>,
    f_x: Vec<f64>,
    mean_y: f64,
    norm: ImageNorm,
}

fn required<'a, T>(v: &'a Option<T>, field: &'static str, kind: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| invalid(field, format!("required for the {kind} operator")))
}

fn columns(grid: &Grid3, f: impl Fn(usize, usize, usize) -> f64) -> Vec<f64> {
    let (ny, nx, nz) = (grid.gy.n(), grid.gx.n(), grid.gz.n());
    let mut out = Vec::with_capacity(ny * nx * nz);
    for ix in 0..nx {
        for iz in 0..nz {
            for iy in 0..ny {
                out.push(f(iy, ix, iz));
            }
        }
    }
    out
}

impl IvProblem {
    /// Full-independence operator. The `u` grid spans
    /// `[gy.a − max φ_ref, gy.b − min φ_ref]` with as many nodes as the `y` grid.
    pub fn ind(fields: &DensityFields, phi_ref: &GridFn, w_mean: f64) -> Result<Self> {
        let grid = fields.grid;
        if !phi_ref.grid().same_as(&grid.gx) {
            return Err(Error::GridMismatch("reference function is not on the x grid".into()));
        }
        let df_dy = required(&fields.df_dy, "df_dy", "independence")?;
        let df_yx = required(&fields.df_yx, "df_yx", "independence")?;
        let fz = fields.f_z.values();
        let col_val = columns(&grid, |iy, ix, iz| fields.f_yxz.at(iy, ix, iz) - fields.f_yx.at(iy, ix) * fz[iz]);
        let col_der = columns(&grid, |iy, ix, iz| df_dy.at(iy, ix, iz) - df_yx.at(iy, ix) * fz[iz]);
        let gu = Grid1D::new(grid.gy.a() - phi_ref.max(), grid.gy.b() - phi_ref.min(), grid.gy.n())?;
        let wu = gu.trapezoid_weights();
        let wz = grid.gz.trapezoid_weights();
        let weights = wu.iter().flat_map(|a| wz.iter().map(move |b| a * b)).collect();
        Ok(Self {
            kind: ProblemKind::Ind { w_mean },
            gy: grid.gy,
            gx: grid.gx,
            gz: grid.gz,
            gu: Some(gu),
            wx: grid.gx.trapezoid_weights(),
            col_val,
            col_der,
            ce_kernel: Vec::new(),
            offset: vec![0.0; gu.n() * grid.gz.n()],
            f_x: fields.f_x.values().to_vec(),
            mean_y: fields.mean_y,
            norm: ImageNorm::new(weights, Some(w_mean))?,
        })
    }

    /// Quantile operator `∫ F_YXZ(φ(x), x, z) dx − q f_Z(z)`.
    pub fn quant(fields: &DensityFields, q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(invalid("q", format!("must lie in (0, 1), got {q}")));
        }
        let grid = fields.grid;
        let cdf = required(&fields.cdf_y, "cdf_y", "quantile")?;
        Ok(Self {
            kind: ProblemKind::Quant { q },
            gy: grid.gy,
            gx: grid.gx,
            gz: grid.gz,
            gu: None,
            wx: grid.gx.trapezoid_weights(),
            col_val: columns(&grid, |iy, ix, iz| cdf.at(iy, ix, iz)),
            col_der: columns(&grid, |iy, ix, iz| fields.f_yxz.at(iy, ix, iz)),
            ce_kernel: Vec::new(),
            offset: fields.f_z.values().iter().map(|f| q * f).collect(),
            f_x: fields.f_x.values().to_vec(),
            mean_y: fields.mean_y,
            norm: ImageNorm::new(grid.gz.trapezoid_weights(), None)?,
        })
    }

    /// Linear conditional-expectation operator `∫ f_{X|Z}(x|z) φ(x) dx − ψ̂(z)`.
    pub fn ce(fields: &DensityFields) -> Result<Self> {
        let grid = fields.grid;
        let psi = required(&fields.psi, "psi", "conditional-expectation")?;
        if !psi.grid().same_as(&grid.gz) {
            return Err(Error::GridMismatch("conditional mean is not on the z grid".into()));
        }
        let (nx, nz) = (grid.gx.n(), grid.gz.n());
        let fz = fields.f_z.values();
        let mut ce_kernel = Vec::with_capacity(nx * nz);
        for (iz, f) in fz.iter().enumerate() {
            let d = f.max(CE_DENSITY_FLOOR);
            for ix in 0..nx {
                ce_kernel.push(fields.f_xz.at(ix, iz) / d);
            }
        }
        Ok(Self {
            kind: ProblemKind::Ce,
            gy: grid.gy,
            gx: grid.gx,
            gz: grid.gz,
            gu: None,
            wx: grid.gx.trapezoid_weights(),
            col_val: Vec::new(),
            col_der: Vec::new(),
            ce_kernel,
            offset: psi.values().to_vec(),
            f_x: fields.f_x.values().to_vec(),
            mean_y: fields.mean_y,
            norm: ImageNorm::new(grid.gz.trapezoid_weights(), None)?,
        })
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn x_grid(&self) -> &Grid1D {
        &self.gx
    }

    pub fn z_grid(&self) -> &Grid1D {
        &self.gz
    }

    pub fn u_grid(&self) -> Option<&Grid1D> {
        self.gu.as_ref()
    }

    pub fn image_norm(&self) -> &ImageNorm {
        &self.norm
    }

    pub fn mean_y(&self) -> f64 {
        self.mean_y
    }

    /// Copy with every kernel field multiplied by `s`.
    pub fn with_kernel_scale(&self, s: f64) -> IvProblem {
        let mut out = self.clone();
        for v in out.col_val.iter_mut().chain(out.col_der.iter_mut()).chain(out.ce_kernel.iter_mut()) {
            *v *= s;
        }
        out
    }

    fn check_domain(&self, f: &GridFn) -> Result<()> {
        if f.grid().same_as(&self.gx) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "function has {} nodes on [{}, {}], operator expects {} on [{}, {}]",
                f.grid().n(),
                f.grid().a(),
                f.grid().b(),
                self.gx.n(),
                self.gx.a(),
                self.gx.b()
            )))
        }
    }

    fn column(&self, ix: usize, iz: usize) -> (&[f64], &[f64]) {
        let ny = self.gy.n();
        let start = (ix * self.gz.n() + iz) * ny;
        (&self.col_val[start..start + ny], &self.col_der[start..start + ny])
    }

    /// Shifts `u` applied along `y`: the `u` grid for IND, `{0}` for QUANT.
    fn shifts(&self) -> Vec<f64> {
        match &self.gu {
            Some(g) => g.nodes(),
            None => vec![0.0],
        }
    }

    /// Residual and Jacobian in one pass over the kernel columns.
    fn evaluate(&self, phi: &[f64], want_value: bool, want_jac: bool) -> (Vec<f64>, Option<DMatrix<f64>>) {
        let (nx, nz) = (self.gx.n(), self.gz.n());
        let nrows = self.norm.weights.len();
        let ncols = nx;
        let mut value = vec![0.0; nrows];
        let mut jac = if want_jac {
            Some(DMatrix::zeros(self.norm.len(), ncols))
        } else {
            None
        };
        match self.kind {
            ProblemKind::Ce => {
                for iz in 0..nz {
                    let row = &self.ce_kernel[iz * nx..(iz + 1) * nx];
                    if want_value {
                        value[iz] = row.iter().zip(&self.wx).zip(phi).map(|((k, w), p)| k * w * p).sum();
                    }
                    if let Some(m) = jac.as_mut() {
                        for ix in 0..nx {
                            m[(iz, ix)] = row[ix] * self.wx[ix];
                        }
                    }
                }
            }
            ProblemKind::Ind { .. } | ProblemKind::Quant { .. } => {
                let shifts = self.shifts();
                for ix in 0..nx {
                    let w = self.wx[ix];
                    for iz in 0..nz {
                        let (vals, ders) = self.column(ix, iz);
                        for (iu, u) in shifts.iter().enumerate() {
                            let (v, d) = hermite_eval(&self.gy, vals, ders, u + phi[ix]);
                            let row = iu * nz + iz;
                            value[row] += w * v;
                            if let Some(m) = jac.as_mut() {
                                m[(row, ix)] = w * d;
                            }
                        }
                    }
                }
            }
        }
        for (v, o) in value.iter_mut().zip(&self.offset) {
            *v -= o;
        }
        if let (ProblemKind::Ind { .. }, Some(m)) = (self.kind, jac.as_mut()) {
            for ix in 0..nx {
                m[(nrows, ix)] = self.wx[ix] * self.f_x[ix];
            }
        }
        (value, jac)
    }

    fn mean_component(&self, phi: &[f64]) -> Option<f64> {
        match self.kind {
            ProblemKind::Ind { .. } => Some(
                phi.iter().zip(&self.wx).zip(&self.f_x).map(|((p, w), f)| p * w * f).sum::<f64>() - self.mean_y,
            ),
            _ => None,
        }
    }

    pub fn apply(&self, phi: &GridFn) -> Result<OpImage> {
        self.check_domain(phi)?;
        let (field, _) = self.evaluate(phi.values(), true, false);
        Ok(OpImage {
            field,
            scalar: self.mean_component(phi.values()),
        })
    }

    /// Dense matrix `M` with `F̂'[φ]ψ = Mψ`; quadrature weights in `x` are
    /// included.
    pub fn assemble_derivative_matrix(&self, phi: &GridFn) -> Result<DMatrix<f64>> {
        self.check_domain(phi)?;
        let (_, m) = self.evaluate(phi.values(), false, true);
        Ok(m.expect("jacobian requested"))
    }

    pub fn derivative_apply(&self, phi: &GridFn, psi: &GridFn) -> Result<OpImage> {
        self.check_domain(psi)?;
        let m = self.assemble_derivative_matrix(phi)?;
        OpImage::from_dvector(&(m * psi.to_dvector()), &self.norm)
    }

    /// Adjoint of `F̂'[φ]` with respect to the trapezoid `L²` product on the
    /// `x` grid and [`ImageNorm`] on the image.
    pub fn derivative_adjoint_apply(&self, phi: &GridFn, eta: &OpImage) -> Result<GridFn> {
        self.norm.check(eta)?;
        let m = self.assemble_derivative_matrix(phi)?;
        let weighted = eta.to_dvector().component_mul(&self.norm.weight_vector());
        let mut out = m.tr_mul(&weighted);
        for (o, w) in out.iter_mut().zip(&self.wx) {
            *o /= w;
        }
        GridFn::from_dvector(self.gx, &out)
    }

    /// Upper bound on the Lipschitz constant of `φ ↦ F̂'[φ]` from `L²` into
    /// the image norm: `√(|U|·|Z|) · sup |∂²_y k̂|`, with `|U| = 1` for
    /// QUANT. Zero for CE.
    pub fn analytic_lipschitz_bound(&self) -> f64 {
        if matches!(self.kind, ProblemKind::Ce) {
            return 0.0;
        }
        let h = self.gy.spacing();
        let mut sup: f64 = 0.0;
        for ix in 0..self.gx.n() {
            for iz in 0..self.gz.n() {
                let (v, d) = self.column(ix, iz);
                sup = sup.max(hermite_second_derivative_bound(h, v, d));
            }
        }
        let mu = self.gu.map_or(1.0, |g| g.length()) * self.gz.length();
        mu.sqrt() * sup
    }
}

impl ForwardModel for IvProblem {
    fn dim(&self) -> usize {
        self.gx.n()
    }

    fn image_weights(&self) -> DVector<f64> {
        self.norm.weight_vector()
    }

    fn penalty_gram(&self, penalty: PenaltySpace) -> Result<DMatrix<f64>> {
        Ok(match penalty {
            PenaltySpace::L2 => l2_gram(&self.gx),
            PenaltySpace::H1 => h1_gram(&self.gx),
        })
    }

    fn residual(&self, phi: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply(&GridFn::from_dvector(self.gx, phi)?).map(|r| r.to_dvector())
    }

    fn jacobian(&self, phi: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.assemble_derivative_matrix(&GridFn::from_dvector(self.gx, phi)?)
    }

    fn linearize(&self, phi: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let phi = GridFn::from_dvector(self.gx, phi)?;
        let (field, m) = self.evaluate(phi.values(), true, true);
        let image = OpImage {
            field,
            scalar: self.mean_component(phi.values()),
        };
        Ok((image.to_dvector(), m.expect("jacobian requested")))
    }

    fn is_linear(&self) -> bool {
        matches!(self.kind, ProblemKind::Ce)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kde::{KernelSpec, Record, Sample};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gauss(x: f64, s: f64) -> f64 {
        (-0.5 * (x / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Smooth synthetic density in (y, x, z) with closed-form pieces.
    fn smooth_fields(ny: usize, nx: usize, nz: usize) -> DensityFields {
        let grid = Grid3::new(
            Grid1D::new(-0.6, 0.6, ny).unwrap(),
            Grid1D::new(0.0, 1.0, nx).unwrap(),
            Grid1D::new(0.0, 1.0, nz).unwrap(),
        );
        let s = 0.15;
        let m = |x: f64, z: f64| 0.2 * (x - 0.5) + 0.3 * (z - 0.5) * x;
        let f = |y: f64, x: f64, z: f64| gauss(y - m(x, z), s) * (1.0 + 0.2 * x) * (1.0 + 0.5 * z) / 1.5;
        let fy = |y: f64, x: f64, z: f64| -(y - m(x, z)) / (s * s) * f(y, x, z);
        let cdf = |y: f64, x: f64, z: f64| {
            crate::kde::eval_kernel_cdf(KernelSpec::GAUSSIAN, (y - m(x, z)) / s) * (1.0 + 0.2 * x) * (1.0 + 0.5 * z) / 1.5
        };
        let f_yxz = Field3::from_fn(grid, f).unwrap();
        let df_dy = Field3::from_fn(grid, fy).unwrap();
        let cdf_y = Field3::from_fn(grid, cdf).unwrap();
        let f_yx = f_yxz.integrate_z();
        let df_yx = df_dy.integrate_z();
        let f_xz = f_yxz.integrate_y();
        let f_z = f_xz.integrate_a();
        let f_x = f_xz.integrate_b();
        let f_y = f_yx.integrate_b();
        let psi = GridFn::from_fn(grid.gz, |z| 0.1 * z - 0.05).unwrap();
        DensityFields {
            grid,
            f_yxz,
            df_dy: Some(df_dy),
            cdf_y: Some(cdf_y),
            f_yx,
            df_yx: Some(df_yx),
            f_xz,
            f_z,
            f_x,
            f_y,
            mean_y: 0.01,
            psi: Some(psi),
        }
    }

    fn random_fn(g: Grid1D, rng: &mut ChaCha8Rng, amp: f64) -> GridFn {
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(-amp..amp)).collect();
        GridFn::from_fn(g, |x| {
            c[0] + c[1] * (2.0 * std::f64::consts::PI * x).sin() + c[2] * (3.0 * x).cos() + c[3] * x * x
        })
        .unwrap()
    }

    fn all_problems(fields: &DensityFields) -> Vec<IvProblem> {
        let phi_ref = GridFn::from_fn(fields.grid.gx, |x| 0.1 * (x - 0.5)).unwrap();
        vec![
            IvProblem::ind(fields, &phi_ref, 1.0).unwrap(),
            IvProblem::ind(fields, &phi_ref, 0.3).unwrap(),
            IvProblem::quant(fields, 0.4).unwrap(),
            IvProblem::ce(fields).unwrap(),
        ]
    }

    #[test]
    fn adjoint_identity() {
        let fields = smooth_fields(41, 23, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in all_problems(&fields) {
            for _ in 0..5 {
                let phi = random_fn(p.gx, &mut rng, 0.1);
                let psi = random_fn(p.gx, &mut rng, 1.0);
                let eta = OpImage::from_dvector(
                    &DVector::from_fn(p.norm.len(), |_, _| rng.random_range(-1.0..1.0)),
                    &p.norm,
                )
                .unwrap();
                let lhs = p.norm.inner(&p.derivative_apply(&phi, &psi).unwrap(), &eta).unwrap();
                let rhs = crate::numerics::inner_l2(&psi, &p.derivative_adjoint_apply(&phi, &eta).unwrap()).unwrap();
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-300), "{lhs} vs {rhs}");
            }
            let zero = OpImage::from_dvector(&DVector::zeros(p.norm.len()), &p.norm).unwrap();
            let phi = random_fn(p.gx, &mut rng, 0.1);
            assert!(p.derivative_adjoint_apply(&phi, &zero).unwrap().values().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn derivative_matches_central_differences() {
        let fields = smooth_fields(81, 31, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = 1e-4;
        for p in all_problems(&fields) {
            for _ in 0..4 {
                let phi = random_fn(p.gx, &mut rng, 0.1);
                let psi = random_fn(p.gx, &mut rng, 1.0);
                let plus = p.apply(&phi.combine(1.0, &psi, eps).unwrap()).unwrap();
                let minus = p.apply(&phi.combine(1.0, &psi, -eps).unwrap()).unwrap();
                let fd = (plus.to_dvector() - minus.to_dvector()) / (2.0 * eps);
                let d = p.derivative_apply(&phi, &psi).unwrap().to_dvector();
                let w = p.norm.weight_vector();
                let wn = |v: &DVector<f64>| v.component_mul(v).dot(&w).sqrt();
                let rel = wn(&(&fd - &d)) / wn(&d);
                assert!(rel <= 1e-3, "{:?}: relative FD error {rel}", p.kind);
            }
        }
    }

    #[test]
    fn linearity_and_consistency() {
        let fields = smooth_fields(41, 23, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in all_problems(&fields) {
            let phi = random_fn(p.gx, &mut rng, 0.1);
            let a = random_fn(p.gx, &mut rng, 1.0);
            let b = random_fn(p.gx, &mut rng, 1.0);
            let lhs = p.derivative_apply(&phi, &a.combine(2.0, &b, -0.5).unwrap()).unwrap().to_dvector();
            let rhs = 2.0 * p.derivative_apply(&phi, &a).unwrap().to_dvector()
                - 0.5 * p.derivative_apply(&phi, &b).unwrap().to_dvector();
            assert!((lhs - &rhs).amax() <= 1e-12 * rhs.amax().max(1.0));
            let ones = GridFn::constant(p.gx, 1.0).unwrap();
            let m = p.assemble_derivative_matrix(&phi).unwrap();
            let direct = p.derivative_apply(&phi, &ones).unwrap().to_dvector();
            assert!((m * ones.to_dvector() - direct).amax() <= 1e-12);
            let zero = GridFn::zeros(p.gx);
            assert!(p.derivative_apply(&phi, &zero).unwrap().to_dvector().iter().all(|v| *v == 0.0));
            // linearize agrees with the separate calls
            let (r, j) = p.linearize(&phi.to_dvector()).unwrap();
            assert_eq!(r, p.apply(&phi).unwrap().to_dvector());
            assert_eq!(j, p.assemble_derivative_matrix(&phi).unwrap());
        }
    }

    #[test]
    fn ce_is_affine_and_derivative_is_constant() {
        let fields = smooth_fields(21, 23, 17);
        let p = IvProblem::ce(&fields).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p1 = random_fn(p.gx, &mut rng, 1.0);
        let p2 = random_fn(p.gx, &mut rng, 1.0);
        let a = 0.3;
        let lhs = p.apply(&p1.combine(a, &p2, 1.0 - a).unwrap()).unwrap().to_dvector();
        let rhs = a * p.apply(&p1).unwrap().to_dvector() + (1.0 - a) * p.apply(&p2).unwrap().to_dvector();
        assert!((lhs - rhs).amax() <= 1e-12);
        // derivative equals the unshifted operator applied to ψ
        let zero = GridFn::zeros(p.gx);
        let shift = p.apply(&zero).unwrap().to_dvector();
        let d = p.derivative_apply(&p1, &p2).unwrap().to_dvector();
        assert!((d - (p.apply(&p2).unwrap().to_dvector() - shift)).amax() <= 1e-12);
        assert_eq!(p.assemble_derivative_matrix(&p1).unwrap(), p.assemble_derivative_matrix(&p2).unwrap());
        assert_eq!(p.analytic_lipschitz_bound(), 0.0);
    }

    #[test]
    fn ce_matrix_is_rank_one_for_product_density() {
        let mut fields = smooth_fields(11, 19, 13);
        let fx = GridFn::from_fn(fields.grid.gx, |x| 0.5 + x).unwrap();
        let fz = GridFn::from_fn(fields.grid.gz, |z| 0.4 + 1.2 * z).unwrap();
        let values = fx.values().iter().flat_map(|a| fz.values().iter().map(move |b| a * b)).collect();
        fields.f_xz = Field2::new(fields.grid.gx, fields.grid.gz, values).unwrap();
        fields.f_z = fz;
        let p = IvProblem::ce(&fields).unwrap();
        let m = p.assemble_derivative_matrix(&GridFn::zeros(p.gx)).unwrap();
        let sv = m.clone().svd(false, false).singular_values;
        assert!(sv[1] <= 1e-8 * sv[0]);
        for iz in 1..m.nrows() {
            assert!((m.row(iz) - m.row(0)).amax() <= 1e-12);
        }
    }

    #[test]
    fn ind_mean_row_and_toy_grid_oracle() {
        // 3 nodes per axis, hand-set values
        let g = Grid1D::new(0.0, 1.0, 3).unwrap();
        let gy = Grid1D::new(-1.0, 1.0, 3).unwrap();
        let grid = Grid3::new(gy, g, g);
        let f_yxz = Field3::new(grid, (0..27).map(|i| 0.1 + 0.05 * i as f64).collect()).unwrap();
        let df_dy = Field3::new(grid, (0..27).map(|i| 0.02 * (i % 5) as f64 - 0.04).collect()).unwrap();
        let f_yx = f_yxz.integrate_z();
        let df_yx = df_dy.integrate_z();
        let f_xz = f_yxz.integrate_y();
        let f_z = f_xz.integrate_a();
        let f_x = f_xz.integrate_b();
        let f_y = f_yx.integrate_b();
        let fields = DensityFields {
            grid,
            f_yxz: f_yxz.clone(),
            df_dy: Some(df_dy),
            cdf_y: None,
            f_yx: f_yx.clone(),
            df_yx: Some(df_yx),
            f_xz,
            f_z: f_z.clone(),
            f_x: f_x.clone(),
            f_y,
            mean_y: 0.2,
            psi: None,
        };
        // φ ≡ 0 keeps u + φ(x) on the nodes of the y grid
        let phi = GridFn::zeros(g);
        let w_mean = 2.5;
        let p = IvProblem::ind(&fields, &phi, w_mean).unwrap();
        assert!(p.u_grid().unwrap().same_as(&gy));
        let out = p.apply(&phi).unwrap();
        let w = [0.25, 0.5, 0.25];
        for iu in 0..3 {
            for iz in 0..3 {
                let brute: f64 = (0..3)
                    .map(|ix| w[ix] * (f_yxz.at(iu, ix, iz) - f_yx.at(iu, ix) * f_z.values()[iz]))
                    .sum();
                assert_abs_diff_eq!(out.field[iu * 3 + iz], brute, epsilon = 1e-14);
            }
        }
        assert_abs_diff_eq!(out.scalar.unwrap(), -0.2, epsilon = 1e-15);
        let m = p.assemble_derivative_matrix(&phi).unwrap();
        for ix in 0..3 {
            assert_abs_diff_eq!(m[(9, ix)], w[ix] * f_x.values()[ix], epsilon = 1e-15);
        }
        assert_eq!(p.image_norm().w_mean(), Some(w_mean));
        // adjoint is the weighted transpose
        let eta = OpImage::from_dvector(&DVector::from_fn(10, |i, _| (i as f64).sin()), p.image_norm()).unwrap();
        let adj = p.derivative_adjoint_apply(&phi, &eta).unwrap();
        let wy = p.image_norm().weight_vector();
        for ix in 0..3 {
            let expected: f64 = (0..10).map(|r| m[(r, ix)] * wy[r] * eta.to_dvector()[r]).sum::<f64>() / w[ix];
            assert_abs_diff_eq!(adj.values()[ix], expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn quant_median_of_degenerate_model() {
        let grid = Grid3::new(
            Grid1D::new(-0.6, 0.6, 241).unwrap(),
            Grid1D::new(0.0, 1.0, 41).unwrap(),
            Grid1D::new(0.0, 1.0, 11).unwrap(),
        );
        let phi_true = |x: f64| (2.0 * std::f64::consts::PI * (x + 0.25)).sin() / 6.0;
        let s = 0.03;
        // uniform (X, Z) and Y = φ†(X) smoothed by a narrow kernel
        let cdf = Field3::from_fn(grid, |y, x, _| crate::kde::eval_kernel_cdf(KernelSpec::GAUSSIAN, (y - phi_true(x)) / s))
            .unwrap();
        let f = Field3::from_fn(grid, |y, x, _| gauss(y - phi_true(x), s)).unwrap();
        let ones = GridFn::constant(grid.gz, 1.0).unwrap();
        let fields = DensityFields {
            grid,
            f_yx: f.integrate_z(),
            f_xz: Field2::new(grid.gx, grid.gz, vec![1.0; 41 * 11]).unwrap(),
            f_yxz: f,
            df_dy: None,
            cdf_y: Some(cdf),
            df_yx: None,
            f_z: ones.clone(),
            f_x: GridFn::constant(grid.gx, 1.0).unwrap(),
            f_y: GridFn::zeros(grid.gy),
            mean_y: 0.0,
            psi: None,
        };
        let p = IvProblem::quant(&fields, 0.5).unwrap();
        let at_truth = p.apply(&GridFn::from_fn(grid.gx, phi_true).unwrap()).unwrap();
        let norm = p.image_norm().norm(&at_truth).unwrap();
        assert!(norm < 1e-4, "{norm}");
        let off = p.apply(&GridFn::constant(grid.gx, 0.1).unwrap()).unwrap();
        assert!(p.image_norm().norm(&off).unwrap() > 0.05);
    }

    #[test]
    fn missing_fields_and_bad_inputs() {
        let mut fields = smooth_fields(11, 9, 7);
        assert!(IvProblem::quant(&fields, 1.0).is_err());
        assert!(IvProblem::quant(&fields, 0.0).is_err());
        let phi = GridFn::zeros(fields.grid.gx);
        let p = IvProblem::ce(&fields).unwrap();
        let wrong = GridFn::zeros(Grid1D::new(0.0, 1.0, 5).unwrap());
        assert!(matches!(p.apply(&wrong), Err(Error::GridMismatch(_))));
        let short = OpImage {
            field: vec![0.0; 3],
            scalar: None,
        };
        assert!(matches!(p.derivative_adjoint_apply(&phi, &short), Err(Error::ShapeMismatch { .. })));
        fields.df_dy = None;
        assert!(IvProblem::ind(&fields, &phi, 1.0).is_err());
        fields.cdf_y = None;
        assert!(IvProblem::quant(&fields, 0.5).is_err());
        fields.psi = None;
        assert!(IvProblem::ce(&fields).is_err());
    }

    #[test]
    fn operations_leave_problem_unchanged() {
        let fields = smooth_fields(21, 13, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in all_problems(&fields) {
            let before = format!("{p:?}");
            let phi = random_fn(p.gx, &mut rng, 0.1);
            let _ = p.apply(&phi).unwrap();
            let _ = p.assemble_derivative_matrix(&phi).unwrap();
            assert_eq!(before, format!("{p:?}"));
        }
    }

    #[test]
    fn kde_fields_build_every_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let recs = (0..200)
            .map(|_| {
                let z: f64 = rng.random();
                let x = 0.5 * z + 0.25 + 0.1 * rng.random::<f64>();
                Record {
                    y: 0.2 * (x - 0.5) + 0.1 * (rng.random::<f64>() - 0.5),
                    x,
                    z,
                }
            })
            .collect();
        let model = DensityModel::new(Sample::new(recs).unwrap(), KernelSpec::GAUSSIAN, 0.15).unwrap();
        let g = Grid1D::new(0.0, 1.0, 15).unwrap();
        let grid = Grid3::new(Grid1D::new(-0.5, 0.5, 21).unwrap(), g, g);
        let fields = DensityFields::from_kde(&model, grid, FieldRequest::ALL).unwrap();
        let phi = GridFn::constant(g, fields.mean_y).unwrap();
        for p in [
            IvProblem::ind(&fields, &phi, 1.0).unwrap(),
            IvProblem::quant(&fields, 0.5).unwrap(),
            IvProblem::ce(&fields).unwrap(),
        ] {
            let r = p.apply(&phi).unwrap();
            assert!(r.field.iter().all(|v| v.is_finite()));
        }
    }
}
