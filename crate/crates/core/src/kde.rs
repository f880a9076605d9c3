//! Product-kernel density estimation of the joint density of `(Y, X, Z)`
//! together with its `y`-derivative, its `y`-CDF and the low-dimensional
//! marginals needed by the operators.

use nalgebra::DMatrix;
use statrs::function::erf::erf;

use crate::error::{invalid, Error, Result};
use crate::numerics::{Field2, Field3, Grid1D, Grid3, GridFn};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// One observation of `(Y, X, Z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub y: f64,
    pub x: f64,
    pub z: f64,
}

/// i.i.d. sample of `(Y, X, Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    records: Vec<Record>,
}

impl Sample {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptySample);
        }
        if records
            .iter()
            .any(|r| !(r.y.is_finite() && r.x.is_finite() && r.z.is_finite()))
        {
            return Err(Error::NonFinite("sample records"));
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn mean_y(&self) -> f64 {
        self.records.iter().map(|r| r.y).sum::<f64>() / self.len() as f64
    }

    /// Root of the average of the three coordinate variances.
    pub fn pooled_scale(&self) -> f64 {
        let n = self.len() as f64;
        let var = |f: fn(&Record) -> f64| {
            let m = self.records.iter().map(f).sum::<f64>() / n;
            self.records.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n
        };
        ((var(|r| r.y) + var(|r| r.x) + var(|r| r.z)) / 3.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Gaussian,
    Epanechnikov,
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Epanechnikov => "epanechnikov",
        }
    }
}

/// Second-order symmetric kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSpec {
    pub family: KernelFamily,
}

impl KernelSpec {
    pub const GAUSSIAN: KernelSpec = KernelSpec {
        family: KernelFamily::Gaussian,
    };
    pub const EPANECHNIKOV: KernelSpec = KernelSpec {
        family: KernelFamily::Epanechnikov,
    };

    pub fn order(&self) -> u32 {
        2
    }

    /// `∫ K(u)² du`.
    pub fn l2_norm_sq(&self) -> f64 {
        match self.family {
            KernelFamily::Gaussian => 0.5 / std::f64::consts::PI.sqrt(),
            KernelFamily::Epanechnikov => 0.6,
        }
    }

    /// `∫ K'(u)² du`.
    pub fn derivative_l2_norm_sq(&self) -> Result<f64> {
        match self.family {
            KernelFamily::Gaussian => Ok(0.25 / std::f64::consts::PI.sqrt()),
            KernelFamily::Epanechnikov => Err(Error::UnsupportedKernel("epanechnikov")),
        }
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::GAUSSIAN
    }
}

/// Kernel value `K(u)`.
pub fn eval_kernel(spec: KernelSpec, u: f64) -> f64 {
    match spec.family {
        KernelFamily::Gaussian => INV_SQRT_2PI * (-0.5 * u * u).exp(),
        KernelFamily::Epanechnikov => {
            if u.abs() <= 1.0 {
                0.75 * (1.0 - u * u)
            } else {
                0.0
            }
        }
    }
}

/// Kernel derivative `K'(u)`; only defined for differentiable families.
pub fn eval_kernel_derivative(spec: KernelSpec, u: f64) -> Result<f64> {
    match spec.family {
        KernelFamily::Gaussian => Ok(-u * INV_SQRT_2PI * (-0.5 * u * u).exp()),
        KernelFamily::Epanechnikov => Err(Error::UnsupportedKernel("epanechnikov")),
    }
}

/// Integrated kernel `∫_{-∞}^u K`.
pub fn eval_kernel_cdf(spec: KernelSpec, u: f64) -> f64 {
    match spec.family {
        KernelFamily::Gaussian => 0.5 * (1.0 + erf(u / std::f64::consts::SQRT_2)),
        KernelFamily::Epanechnikov => {
            let u = u.clamp(-1.0, 1.0);
            0.5 + 0.75 * (u - u * u * u / 3.0)
        }
    }
}

/// Rule-of-thumb bandwidth `c · σ̂ · n^(-1/6)` for three pooled coordinates.
pub fn default_bandwidth(sample: &Sample, c: f64) -> Result<f64> {
    let h = c * sample.pooled_scale() * (sample.len() as f64).powf(-1.0 / 6.0);
    if h > 0.0 && h.is_finite() {
        Ok(h)
    } else {
        Err(invalid("bandwidth", format!("rule of thumb gave {h}")))
    }
}

/// Marginal density estimates used by the operators.
#[derive(Debug, Clone)]
pub struct Marginals {
    /// `f̂_YX` on `(y, x)`.
    pub f_yx: Field2,
    /// `∂_y f̂_YX` on `(y, x)`.
    pub df_yx: Option<Field2>,
    /// `f̂_XZ` on `(x, z)`.
    pub f_xz: Field2,
    pub f_z: GridFn,
    pub f_x: GridFn,
    pub f_y: GridFn,
}

#[derive(Debug, Clone, Copy)]
enum YFactor {
    Density,
    Derivative,
    Cdf,
}

/// Kernel density model with a common bandwidth for all coordinates.
#[derive(Debug, Clone)]
pub struct DensityModel {
    sample: Sample,
    kernel: KernelSpec,
    h: f64,
}

impl DensityModel {
    pub fn new(sample: Sample, kernel: KernelSpec, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(invalid("bandwidth", format!("must be positive, got {h}")));
        }
        Ok(Self { sample, kernel, h })
    }

    pub fn sample(&self) -> &Sample {
        &self.sample
    }

    pub fn kernel(&self) -> KernelSpec {
        self.kernel
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    /// `K_h(node - c)` for every sample point (rows) and grid node (columns).
    fn scaled_kernels(&self, grid: &Grid1D, coord: fn(&Record) -> f64) -> DMatrix<f64> {
        let nodes = grid.nodes();
        let recs = self.sample.records();
        DMatrix::from_fn(recs.len(), nodes.len(), |i, j| {
            eval_kernel(self.kernel, (nodes[j] - coord(&recs[i])) / self.h) / self.h
        })
    }

    fn y_factors(&self, grid: &Grid1D, which: YFactor) -> Result<DMatrix<f64>> {
        let nodes = grid.nodes();
        let recs = self.sample.records();
        let h = self.h;
        let mut m = DMatrix::zeros(recs.len(), nodes.len());
        for (i, r) in recs.iter().enumerate() {
            for (j, &y) in nodes.iter().enumerate() {
                let u = (y - r.y) / h;
                m[(i, j)] = match which {
                    YFactor::Density => eval_kernel(self.kernel, u) / h,
                    YFactor::Derivative => eval_kernel_derivative(self.kernel, u)? / (h * h),
                    YFactor::Cdf => eval_kernel_cdf(self.kernel, u),
                };
            }
        }
        Ok(m)
    }

    /// `n⁻¹ Σ_i a_i(y) K_h(x - x_i) K_h(z - z_i)` on the tensor grid.
    fn product_field(&self, grid: &Grid3, ay: &DMatrix<f64>) -> Result<Field3> {
        const BLOCK: usize = 256;
        let kx = self.scaled_kernels(&grid.gx, |r| r.x);
        let kz = self.scaled_kernels(&grid.gz, |r| r.z);
        let (ny, nx, nz) = (grid.gy.n(), grid.gx.n(), grid.gz.n());
        let n = self.sample.len();
        // acc is ny × (nx·nz), column index ix·nz + iz.
        let mut acc = DMatrix::<f64>::zeros(ny, nx * nz);
        let mut start = 0;
        while start < n {
            let len = BLOCK.min(n - start);
            let a_block = ay.rows(start, len);
            let b_block = DMatrix::from_fn(len, nx * nz, |i, c| {
                kx[(start + i, c / nz)] * kz[(start + i, c % nz)]
            });
            acc.gemm_tr(1.0, &a_block, &b_block, 1.0);
            start += len;
        }
        let inv_n = 1.0 / n as f64;
        let mut values = vec![0.0; ny * nx * nz];
        for c in 0..nx * nz {
            for iy in 0..ny {
                values[iy * nx * nz + c] = acc[(iy, c)] * inv_n;
            }
        }
        Field3::new(*grid, values)
    }

    /// `f̂_YXZ` at every node of `grid`.
    pub fn density_3d(&self, grid: &Grid3) -> Result<Field3> {
        let ay = self.y_factors(&grid.gy, YFactor::Density)?;
        self.product_field(grid, &ay)
    }

    /// `∂_y f̂_YXZ`; requires a differentiable kernel.
    pub fn density_dy(&self, grid: &Grid3) -> Result<Field3> {
        let ay = self.y_factors(&grid.gy, YFactor::Derivative)?;
        self.product_field(grid, &ay)
    }

    /// Smoothed joint CDF in `y`: `n⁻¹ Σ K̄((y - y_i)/h) K_h(x - x_i) K_h(z - z_i)`.
    pub fn smoothed_cdf_y(&self, grid: &Grid3) -> Result<Field3> {
        let ay = self.y_factors(&grid.gy, YFactor::Cdf)?;
        self.product_field(grid, &ay)
    }

    fn pair(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, ga: Grid1D, gb: Grid1D) -> Result<Field2> {
        let prod = a.transpose() * b / self.sample.len() as f64;
        let mut values = Vec::with_capacity(ga.n() * gb.n());
        for i in 0..ga.n() {
            for j in 0..gb.n() {
                values.push(prod[(i, j)]);
            }
        }
        Field2::new(ga, gb, values)
    }

    fn single(&self, a: &DMatrix<f64>, g: Grid1D) -> Result<GridFn> {
        let n = self.sample.len() as f64;
        let values = a.row_sum().iter().map(|s| s / n).collect();
        GridFn::new(g, values)
    }

    /// Product-kernel marginals on the axes of `grid`. `∂_y f̂_YX` is only
    /// produced for differentiable kernels.
    pub fn marginals(&self, grid: &Grid3) -> Result<Marginals> {
        let ky = self.y_factors(&grid.gy, YFactor::Density)?;
        let kx = self.scaled_kernels(&grid.gx, |r| r.x);
        let kz = self.scaled_kernels(&grid.gz, |r| r.z);
        let df_yx = match self.y_factors(&grid.gy, YFactor::Derivative) {
            Ok(dy) => Some(self.pair(&dy, &kx, grid.gy, grid.gx)?),
            Err(Error::UnsupportedKernel(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Marginals {
            f_yx: self.pair(&ky, &kx, grid.gy, grid.gx)?,
            df_yx,
            f_xz: self.pair(&kx, &kz, grid.gx, grid.gz)?,
            f_z: self.single(&kz, grid.gz)?,
            f_x: self.single(&kx, grid.gx)?,
            f_y: self.single(&ky, grid.gy)?,
        })
    }

    /// Nadaraya–Watson estimate of `E[Y | Z = z]` on `gz`.
    pub fn conditional_mean_y(&self, gz: &Grid1D) -> Result<GridFn> {
        let recs = self.sample.records();
        let values = gz
            .nodes()
            .iter()
            .map(|&z| {
                let (mut num, mut den) = (0.0, 0.0);
                for r in recs {
                    let k = eval_kernel(self.kernel, (z - r.z) / self.h);
                    num += k * r.y;
                    den += k;
                }
                if den > 0.0 {
                    num / den
                } else {
                    self.sample.mean_y()
                }
            })
            .collect();
        GridFn::new(*gz, values)
    }
}
