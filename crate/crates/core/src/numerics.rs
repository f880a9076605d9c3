//! Uniform grids, trapezoid quadrature, L2/H1 inner products and off-grid
//! evaluation along the `y` axis of a tensor field.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Uniform grid on `[a, b]` with `n` nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    a: f64,
    b: f64,
    n: usize,
    spacing: f64,
}

impl Grid1D {
    pub fn new(a: f64, b: f64, n: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::NonFinite("grid endpoints"));
        }
        if a >= b {
            return Err(Error::InvalidGrid(format!("left endpoint {a} >= right endpoint {b}")));
        }
        if n < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 nodes, got {n}")));
        }
        Ok(Self {
            a,
            b,
            n,
            spacing: (b - a) / (n - 1) as f64,
        })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn length(&self) -> f64 {
        self.b - self.a
    }

    /// Coordinate of node `i`. The last node is pinned to `b` exactly.
    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.b
        } else {
            self.a + i as f64 * self.spacing
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    /// Composite trapezoid weights.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let mut w = vec![self.spacing; self.n];
        w[0] *= 0.5;
        w[self.n - 1] *= 0.5;
        w
    }

    /// Locates `y` on the grid: segment index `k` (so `y` lies in
    /// `[node(k), node(k+1)]`) and the local coordinate `t` in `[0, 1]`.
    /// Returns `None` outside `[a, b]`.
    pub fn locate(&self, y: f64) -> Option<(usize, f64)> {
        if !(y >= self.a && y <= self.b) {
            return None;
        }
        let s = (y - self.a) / self.spacing;
        let k = (s.floor() as usize).min(self.n - 2);
        Some((k, (s - k as f64).clamp(0.0, 1.0)))
    }

    /// Tensor-grid compatibility check used by binary operations.
    pub fn same_as(&self, other: &Grid1D) -> bool {
        self.n == other.n && (self.a - other.a).abs() < 1e-12 && (self.b - other.b).abs() < 1e-12
    }
}

/// Function sampled on the nodes of a [`Grid1D`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridFn {
    grid: Grid1D,
    values: Vec<f64>,
}

impl GridFn {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n() {
            return Err(Error::ShapeMismatch {
                expected: grid.n(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid function values"));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.nodes().into_iter().map(f).collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: Grid1D, c: f64) -> Result<Self> {
        Self::new(grid, vec![c; grid.n()])
    }

    pub fn zeros(grid: Grid1D) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.n()],
        }
    }

    pub fn from_dvector(grid: Grid1D, v: &DVector<f64>) -> Result<Self> {
        Self::new(grid, v.iter().copied().collect())
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    fn check_same_grid(&self, other: &GridFn) -> Result<()> {
        if self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "[{}, {}] x {} vs [{}, {}] x {}",
                self.grid.a, self.grid.b, self.grid.n, other.grid.a, other.grid.b, other.grid.n
            )))
        }
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &GridFn, b: f64) -> Result<GridFn> {
        self.check_same_grid(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        GridFn::new(self.grid, values)
    }

    pub fn sub(&self, other: &GridFn) -> Result<GridFn> {
        self.combine(1.0, other, -1.0)
    }

    pub fn scale(&self, s: f64) -> GridFn {
        GridFn {
            grid: self.grid,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn norm_l2(&self) -> f64 {
        inner_l2_unchecked(&self.grid, &self.values, &self.values).sqrt()
    }

    /// L2 norm restricted to the nodes lying in `[lo, hi]`, with trapezoid
    /// weights of that sub-grid.
    pub fn norm_l2_on(&self, lo: f64, hi: f64) -> f64 {
        let idx: Vec<usize> = (0..self.grid.n())
            .filter(|&i| {
                let x = self.grid.node(i);
                x >= lo - 1e-12 && x <= hi + 1e-12
            })
            .collect();
        if idx.len() < 2 {
            return 0.0;
        }
        let h = self.grid.spacing();
        let last = idx.len() - 1;
        idx.iter()
            .enumerate()
            .map(|(k, &i)| {
                let w = if k == 0 || k == last { 0.5 * h } else { h };
                w * self.values[i] * self.values[i]
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Composite trapezoid rule.
pub fn trapezoid_integrate(f: &GridFn) -> f64 {
    trapezoid_slice(f.grid(), f.values())
}

pub(crate) fn trapezoid_slice(grid: &Grid1D, values: &[f64]) -> f64 {
    let n = values.len();
    let interior: f64 = values[1..n - 1].iter().sum();
    grid.spacing() * (interior + 0.5 * (values[0] + values[n - 1]))
}

fn inner_l2_unchecked(grid: &Grid1D, f: &[f64], g: &[f64]) -> f64 {
    let n = f.len();
    let interior: f64 = (1..n - 1).map(|i| f[i] * g[i]).sum();
    grid.spacing() * (interior + 0.5 * (f[0] * g[0] + f[n - 1] * g[n - 1]))
}

/// Trapezoid-weighted `L2` inner product.
pub fn inner_l2(f: &GridFn, g: &GridFn) -> Result<f64> {
    f.check_same_grid(g)?;
    Ok(inner_l2_unchecked(&f.grid, &f.values, &g.values))
}

/// `H1` inner product `∫ f g + ∫ f' g'` with finite-difference derivatives.
pub fn inner_h1(f: &GridFn, g: &GridFn) -> Result<f64> {
    f.check_same_grid(g)?;
    let df = difference_matrix(&f.grid) * f.to_dvector();
    let dg = difference_matrix(&g.grid) * g.to_dvector();
    Ok(inner_l2_unchecked(&f.grid, &f.values, &g.values)
        + inner_l2_unchecked(&f.grid, df.as_slice(), dg.as_slice()))
}

/// First-derivative matrix: central differences in the interior and
/// second-order one-sided stencils at the endpoints (first-order when the
/// grid has only two nodes).
pub fn difference_matrix(grid: &Grid1D) -> DMatrix<f64> {
    let n = grid.n();
    let h = grid.spacing();
    let mut d = DMatrix::zeros(n, n);
    if n == 2 {
        for r in 0..2 {
            d[(r, 0)] = -1.0 / h;
            d[(r, 1)] = 1.0 / h;
        }
        return d;
    }
    d[(0, 0)] = -1.5 / h;
    d[(0, 1)] = 2.0 / h;
    d[(0, 2)] = -0.5 / h;
    for i in 1..n - 1 {
        d[(i, i - 1)] = -0.5 / h;
        d[(i, i + 1)] = 0.5 / h;
    }
    d[(n - 1, n - 1)] = 1.5 / h;
    d[(n - 1, n - 2)] = -2.0 / h;
    d[(n - 1, n - 3)] = 0.5 / h;
    d
}

/// Gram matrix of `inner_l2`: the diagonal of trapezoid weights.
pub fn l2_gram(grid: &Grid1D) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_vec(grid.trapezoid_weights()))
}

/// Gram matrix of `inner_h1`: `W + Dᵀ W D`.
pub fn h1_gram(grid: &Grid1D) -> DMatrix<f64> {
    let w = l2_gram(grid);
    let d = difference_matrix(grid);
    &w + d.transpose() * &w * d
}

/// Tensor grid over `(y, x, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid3 {
    pub gy: Grid1D,
    pub gx: Grid1D,
    pub gz: Grid1D,
}

impl Grid3 {
    pub fn new(gy: Grid1D, gx: Grid1D, gz: Grid1D) -> Self {
        Self { gy, gx, gz }
    }

    pub fn len(&self) -> usize {
        self.gy.n() * self.gx.n() * self.gz.n()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, iy: usize, ix: usize, iz: usize) -> usize {
        (iy * self.gx.n() + ix) * self.gz.n() + iz
    }
}

/// Real field on a [`Grid3`], row-major in `(y, x, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    grid: Grid3,
    values: Vec<f64>,
}

impl Field3 {
    pub fn new(grid: Grid3, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field values"));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid3, f: impl Fn(f64, f64, f64) -> f64) -> Result<Self> {
        let (ys, xs, zs) = (grid.gy.nodes(), grid.gx.nodes(), grid.gz.nodes());
        let mut values = Vec::with_capacity(grid.len());
        for &y in &ys {
            for &x in &xs {
                for &z in &zs {
                    values.push(f(y, x, z));
                }
            }
        }
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, iy: usize, ix: usize, iz: usize) -> f64 {
        self.values[self.grid.index(iy, ix, iz)]
    }

    pub fn scale(&self, s: f64) -> Field3 {
        Field3 {
            grid: self.grid,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// Trapezoid integral over all three coordinates.
    pub fn integrate(&self) -> f64 {
        let (wy, wx, wz) = (
            self.grid.gy.trapezoid_weights(),
            self.grid.gx.trapezoid_weights(),
            self.grid.gz.trapezoid_weights(),
        );
        let mut s = 0.0;
        for (iy, a) in wy.iter().enumerate() {
            for (ix, b) in wx.iter().enumerate() {
                for (iz, c) in wz.iter().enumerate() {
                    s += a * b * c * self.at(iy, ix, iz);
                }
            }
        }
        s
    }

    /// Trapezoid marginalization over `y`, giving a field on `(x, z)`.
    pub fn integrate_y(&self) -> Field2 {
        let g = self.grid;
        let wy = g.gy.trapezoid_weights();
        let mut out = vec![0.0; g.gx.n() * g.gz.n()];
        for (iy, w) in wy.iter().enumerate() {
            let row = &self.values[iy * g.gx.n() * g.gz.n()..(iy + 1) * g.gx.n() * g.gz.n()];
            for (o, v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
        Field2 {
            ga: g.gx,
            gb: g.gz,
            values: out,
        }
    }

    /// Trapezoid marginalization over `z`, giving a field on `(y, x)`.
    pub fn integrate_z(&self) -> Field2 {
        let g = self.grid;
        let nz = g.gz.n();
        let values = self
            .values
            .chunks(nz)
            .map(|col| trapezoid_slice(&g.gz, col))
            .collect();
        Field2 {
            ga: g.gy,
            gb: g.gx,
            values,
        }
    }
}

/// Real field on a 2D tensor grid, row-major in `(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2 {
    ga: Grid1D,
    gb: Grid1D,
    values: Vec<f64>,
}

impl Field2 {
    pub fn new(ga: Grid1D, gb: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != ga.n() * gb.n() {
            return Err(Error::ShapeMismatch {
                expected: ga.n() * gb.n(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field values"));
        }
        Ok(Self { ga, gb, values })
    }

    pub fn grids(&self) -> (&Grid1D, &Grid1D) {
        (&self.ga, &self.gb)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, ia: usize, ib: usize) -> f64 {
        self.values[ia * self.gb.n() + ib]
    }

    pub fn scale(&self, s: f64) -> Field2 {
        Field2 {
            ga: self.ga,
            gb: self.gb,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// Integrate over the first coordinate.
    pub fn integrate_a(&self) -> GridFn {
        let w = self.ga.trapezoid_weights();
        let mut out = vec![0.0; self.gb.n()];
        for (ia, wa) in w.iter().enumerate() {
            for (ib, o) in out.iter_mut().enumerate() {
                *o += wa * self.at(ia, ib);
            }
        }
        GridFn {
            grid: self.gb,
            values: out,
        }
    }

    /// Integrate over the second coordinate.
    pub fn integrate_b(&self) -> GridFn {
        let values = self
            .values
            .chunks(self.gb.n())
            .map(|row| trapezoid_slice(&self.gb, row))
            .collect();
        GridFn {
            grid: self.ga,
            values,
        }
    }
}

/// Piecewise-linear interpolation of `field` along `y` at fixed `(ix, iz)`,
/// clamped to the boundary values outside `[gy.a, gy.b]`.
pub fn interp_linear_y(field: &Field3, y: f64, ix: usize, iz: usize) -> f64 {
    let gy = &field.grid().gy;
    if y <= gy.a() {
        return field.at(0, ix, iz);
    }
    if y >= gy.b() {
        return field.at(gy.n() - 1, ix, iz);
    }
    let (k, t) = gy.locate(y).expect("inside grid");
    let lo = field.at(k, ix, iz);
    let hi = field.at(k + 1, ix, iz);
    lo + t * (hi - lo)
}

/// Cubic Hermite interpolation of a column of node values with known
/// derivatives. Returns the interpolant and its derivative at `y`.
///
/// Outside the grid the interpolant is continued for one extra cell by a
/// Hermite segment that flattens to the boundary value with zero slope, and
/// is constant beyond that. The continuation is C¹.
#[inline]
pub fn hermite_eval(grid: &Grid1D, values: &[f64], derivs: &[f64], y: f64) -> (f64, f64) {
    let h = grid.spacing();
    match grid.locate(y) {
        Some((k, t)) => hermite_segment(h, values, derivs, k, t),
        None if y < grid.a() => {
            let t = 1.0 - (grid.a() - y) / h;
            if t <= 0.0 {
                (values[0], 0.0)
            } else {
                hermite_segment(h, &[values[0], values[0]], &[0.0, derivs[0]], 0, t)
            }
        }
        None => {
            let last = grid.n() - 1;
            let t = (y - grid.b()) / h;
            if t >= 1.0 {
                (values[last], 0.0)
            } else {
                hermite_segment(h, &[values[last], values[last]], &[derivs[last], 0.0], 0, t)
            }
        }
    }
}

/// Hermite basis evaluation on segment `k` at local coordinate `t`.
#[inline]
pub fn hermite_segment(h: f64, values: &[f64], derivs: &[f64], k: usize, t: f64) -> (f64, f64) {
    let (f0, f1, d0, d1) = (values[k], values[k + 1], derivs[k], derivs[k + 1]);
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    let value = h00 * f0 + h10 * h * d0 + h01 * f1 + h11 * h * d1;
    let dh00 = 6.0 * t2 - 6.0 * t;
    let dh10 = 3.0 * t2 - 4.0 * t + 1.0;
    let dh01 = -dh00;
    let dh11 = 3.0 * t2 - 2.0 * t;
    let deriv = (dh00 * f0 + dh01 * f1) / h + dh10 * d0 + dh11 * d1;
    (value, deriv)
}

/// Largest absolute second derivative of the Hermite interpolant of one
/// column, including the flattening cells outside the grid. The second
/// derivative is affine on each segment, so endpoint values suffice.
pub fn hermite_second_derivative_bound(h: f64, values: &[f64], derivs: &[f64]) -> f64 {
    let n = values.len();
    let segment = |f0: f64, f1: f64, d0: f64, d1: f64| {
        let at0 = (6.0 * (f1 - f0) / h - 4.0 * d0 - 2.0 * d1) / h;
        let at1 = (-6.0 * (f1 - f0) / h + 2.0 * d0 + 4.0 * d1) / h;
        at0.abs().max(at1.abs())
    };
    let mut sup = segment(values[0], values[0], 0.0, derivs[0])
        .max(segment(values[n - 1], values[n - 1], derivs[n - 1], 0.0));
    for k in 0..n - 1 {
        sup = sup.max(segment(values[k], values[k + 1], derivs[k], derivs[k + 1]));
    }
    sup
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit(n: usize) -> Grid1D {
        Grid1D::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(Grid1D::new(1.0, 0.0, 10).is_err());
        assert!(Grid1D::new(0.0, 1.0, 1).is_err());
        assert!(Grid1D::new(0.0, f64::NAN, 3).is_err());
        let g = unit(11);
        assert_abs_diff_eq!(g.spacing(), 0.1, epsilon = 1e-15);
        assert_eq!(g.node(10), 1.0);
    }

    #[test]
    fn gridfn_rejects_wrong_length_and_nan() {
        assert!(GridFn::new(unit(3), vec![1.0, 2.0]).is_err());
        assert!(GridFn::new(unit(3), vec![1.0, f64::INFINITY, 2.0]).is_err());
    }

    #[test]
    fn trapezoid_constant_and_linear_are_exact() {
        for n in [2, 3, 17, 101] {
            let one = GridFn::constant(unit(n), 1.0).unwrap();
            assert_abs_diff_eq!(trapezoid_integrate(&one), 1.0, epsilon = 1e-14);
            let lin = GridFn::from_fn(unit(n), |x| x).unwrap();
            assert_abs_diff_eq!(trapezoid_integrate(&lin), 0.5, epsilon = 1e-14);
        }
    }

    #[test]
    fn trapezoid_quadratic_matches_error_formula() {
        // 1/3 + h^2 (f'(1) - f'(0)) / 12 with h = 0.01.
        let f = GridFn::from_fn(unit(101), |x| x * x).unwrap();
        let expected = 1.0 / 3.0 + 0.01f64.powi(2) * 2.0 / 12.0;
        assert_abs_diff_eq!(expected, 0.33335, epsilon = 1e-7);
        assert_abs_diff_eq!(trapezoid_integrate(&f), expected, epsilon = 1e-12);
    }

    #[test]
    fn inner_l2_examples() {
        let g = unit(101);
        let one = GridFn::constant(g, 1.0).unwrap();
        let x = GridFn::from_fn(g, |x| x).unwrap();
        let s = GridFn::from_fn(g, |x| (2.0 * std::f64::consts::PI * x).sin()).unwrap();
        assert_abs_diff_eq!(inner_l2(&one, &one).unwrap(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(inner_l2(&one, &x).unwrap(), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(inner_l2(&s, &one).unwrap(), 0.0, epsilon = 1e-12);
        let other = GridFn::constant(unit(50), 1.0).unwrap();
        assert!(matches!(inner_l2(&one, &other), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn inner_h1_examples() {
        let g = unit(1001);
        let one = GridFn::constant(g, 1.0).unwrap();
        let x = GridFn::from_fn(g, |x| x).unwrap();
        assert_abs_diff_eq!(inner_h1(&one, &one).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(inner_h1(&x, &x).unwrap(), 1.0 / 3.0 + 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(inner_h1(&one, &x).unwrap(), 0.5, epsilon = 1e-12);
        assert!(inner_h1(&one, &GridFn::constant(unit(5), 1.0).unwrap()).is_err());
    }

    #[test]
    fn h1_gram_reproduces_inner_h1() {
        let g = unit(23);
        let f = GridFn::from_fn(g, |x| (3.0 * x).cos()).unwrap();
        let h = GridFn::from_fn(g, |x| x * x - 0.2).unwrap();
        let gram = h1_gram(&g);
        let via_gram = (f.to_dvector().transpose() * gram * h.to_dvector())[(0, 0)];
        assert_abs_diff_eq!(via_gram, inner_h1(&f, &h).unwrap(), epsilon = 1e-12);
    }

    fn sample_field() -> Field3 {
        let grid = Grid3::new(
            Grid1D::new(-1.0, 1.0, 5).unwrap(),
            unit(3),
            unit(2),
        );
        Field3::from_fn(grid, |y, x, z| 2.0 * y + x - z + 3.0).unwrap()
    }

    #[test]
    fn interp_linear_examples() {
        let f = sample_field();
        // node y = -0.5
        assert_eq!(interp_linear_y(&f, -0.5, 1, 0), f.at(1, 1, 0));
        // nodes y=-1 and y=-0.5 at (ix=0,iz=0): values 1 and 2 -> midpoint 1.5
        let grid = *f.grid();
        let g = Field3::from_fn(grid, |y, _, _| if y < -0.75 { 2.0 } else { 4.0 }).unwrap();
        assert_abs_diff_eq!(interp_linear_y(&g, -0.75, 0, 0), 3.0, epsilon = 1e-14);
        assert_eq!(interp_linear_y(&f, -7.0, 2, 1), f.at(0, 2, 1));
        assert_eq!(interp_linear_y(&f, 7.0, 2, 1), f.at(4, 2, 1));
    }

    #[test]
    fn hermite_reproduces_cubics() {
        let g = Grid1D::new(-1.0, 2.0, 7).unwrap();
        let f = |y: f64| y * y * y - 2.0 * y + 0.5;
        let df = |y: f64| 3.0 * y * y - 2.0;
        let v: Vec<f64> = g.nodes().iter().map(|&y| f(y)).collect();
        let d: Vec<f64> = g.nodes().iter().map(|&y| df(y)).collect();
        for y in [-0.93, 0.0, 0.37, 1.99] {
            let (val, der) = hermite_eval(&g, &v, &d, y);
            assert_abs_diff_eq!(val, f(y), epsilon = 1e-12);
            assert_abs_diff_eq!(der, df(y), epsilon = 1e-12);
        }
        assert_eq!(hermite_eval(&g, &v, &d, -3.0), (v[0], 0.0));
        assert_eq!(hermite_eval(&g, &v, &d, 2.5), (v[6], 0.0));
        // continuation is C1 at both ends of the grid and of the taper cells
        for (y, val, der) in [(-1.0, v[0], d[0]), (-1.5, v[0], 0.0), (2.0, v[6], d[6]), (2.5, v[6], 0.0)] {
            for s in [-1e-9, 1e-9] {
                let (a, b) = hermite_eval(&g, &v, &d, y + s);
                assert_abs_diff_eq!(a, val, epsilon = 1e-7);
                assert_abs_diff_eq!(b, der, epsilon = 1e-6);
            }
        }
        // interior sup |6y| = 12; taper cells contribute 4|d|/h = 8 and 80
        assert_abs_diff_eq!(hermite_second_derivative_bound(g.spacing(), &v, &d), 80.0, epsilon = 1e-9);
    }

    #[test]
    fn field_marginals() {
        let grid = Grid3::new(unit(11), unit(5), unit(7));
        let f = Field3::from_fn(grid, |y, x, z| y + x * z).unwrap();
        assert_abs_diff_eq!(f.integrate(), 0.5 + 0.25, epsilon = 1e-12);
        let fxz = f.integrate_y();
        assert_abs_diff_eq!(fxz.at(2, 3), 0.5 + 0.5 * 0.5, epsilon = 1e-12);
        let fyx = f.integrate_z();
        assert_abs_diff_eq!(fyx.at(4, 4), 0.4 + 0.5, epsilon = 1e-12);
    }

    fn arb_fn(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0f64..5.0, n)
    }

    proptest! {
        #[test]
        fn trapezoid_is_linear(f in arb_fn(17), g in arb_fn(17), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let grid = unit(17);
            let f = GridFn::new(grid, f).unwrap();
            let g = GridFn::new(grid, g).unwrap();
            let lhs = trapezoid_integrate(&f.combine(a, &g, b).unwrap());
            let rhs = a * trapezoid_integrate(&f) + b * trapezoid_integrate(&g);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn inner_products_symmetric_positive(f in arb_fn(13), g in arb_fn(13)) {
            let grid = unit(13);
            let f = GridFn::new(grid, f).unwrap();
            let g = GridFn::new(grid, g).unwrap();
            prop_assert!((inner_l2(&f, &g).unwrap() - inner_l2(&g, &f).unwrap()).abs() < 1e-12);
            prop_assert!((inner_h1(&f, &g).unwrap() - inner_h1(&g, &f).unwrap()).abs() < 1e-9);
            if f.values().iter().any(|v| v.abs() > 1e-9) {
                prop_assert!(inner_l2(&f, &f).unwrap() > 0.0);
                prop_assert!(inner_h1(&f, &f).unwrap() > 0.0);
            }
            prop_assert!(inner_h1(&f, &f).unwrap() >= inner_l2(&f, &f).unwrap() - 1e-12);
        }

        #[test]
        fn linear_interp_exact_on_linear_y(y in -1.0f64..1.0, slope in -4.0f64..4.0) {
            let grid = Grid3::new(Grid1D::new(-1.0, 1.0, 9).unwrap(), unit(2), unit(2));
            let f = Field3::from_fn(grid, |y, x, z| slope * y + x + z).unwrap();
            let v = interp_linear_y(&f, y, 1, 0);
            prop_assert!((v - (slope * y + 1.0)).abs() < 1e-12);
        }
    }
}
