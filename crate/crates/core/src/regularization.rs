//! Iterated Tikhonov regularization: spectral filters and the inner
//! penalized least-squares solve in an `L²` or `H¹` penalty space.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PenaltySpace {
    L2,
    #[default]
    H1,
}

impl PenaltySpace {
    pub fn name(&self) -> &'static str {
        match self {
            PenaltySpace::L2 => "l2",
            PenaltySpace::H1 => "h1",
        }
    }
}

impl std::str::FromStr for PenaltySpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(PenaltySpace::L2),
            "h1" => Ok(PenaltySpace::H1),
            other => Err(invalid("penalty", format!("expected `l2` or `h1`, got `{other}`"))),
        }
    }
}

/// Regularization parameter and number of Tikhonov iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    alpha: f64,
    m: usize,
}

impl FilterParams {
    pub fn new(alpha: f64, m: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid("alpha", format!("must be positive, got {alpha}")));
        }
        if m == 0 {
            return Err(invalid("m", "must be at least 1"));
        }
        Ok(Self { alpha, m })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn m(&self) -> usize {
        self.m
    }
}

/// `g_α(λ) = ((λ+α)^m − α^m) / (λ(λ+α)^m)`, evaluated as
/// `(λ+α)⁻¹ Σ_{k<m} (α/(λ+α))^k` which is exact at `λ = 0` and free of
/// cancellation for small `λ`.
pub fn filter_g(lambda: f64, p: FilterParams) -> f64 {
    let s = lambda + p.alpha;
    let rho = p.alpha / s;
    let mut acc = 0.0;
    let mut pow = 1.0;
    for _ in 0..p.m {
        acc += pow;
        pow *= rho;
    }
    acc / s
}

/// `r_α(λ) = (α/(λ+α))^m`.
pub fn filter_r(lambda: f64, p: FilterParams) -> f64 {
    (p.alpha / (lambda + p.alpha)).powi(p.m as i32)
}

/// Affine least-squares problem `‖Tφ + c‖²_W + α‖φ − φ̄‖²_G` with diagonal
/// image weights `W` and penalty Gram matrix `G`.
#[derive(Debug, Clone)]
pub struct LinearizedSystem {
    t: DMatrix<f64>,
    offset: DVector<f64>,
    start: DVector<f64>,
    weights: DVector<f64>,
    gram: DMatrix<f64>,
}

impl LinearizedSystem {
    pub fn new(
        t: DMatrix<f64>,
        offset: DVector<f64>,
        start: DVector<f64>,
        weights: DVector<f64>,
        gram: DMatrix<f64>,
    ) -> Result<Self> {
        let (rows, cols) = t.shape();
        let checks = [
            (offset.len(), rows),
            (weights.len(), rows),
            (start.len(), cols),
            (gram.nrows(), cols),
            (gram.ncols(), cols),
        ];
        for (got, expected) in checks {
            if got != expected {
                return Err(Error::ShapeMismatch { expected, got });
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid("image weights", "must be nonnegative"));
        }
        Ok(Self {
            t,
            offset,
            start,
            weights,
            gram,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn start(&self) -> &DVector<f64> {
        &self.start
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Weighted residual norm `‖Tφ + c‖_W`.
    pub fn residual_norm(&self, phi: &DVector<f64>) -> f64 {
        let r = &self.t * phi + &self.offset;
        r.component_mul(&r).dot(&self.weights).sqrt()
    }

    /// `TᵀW`.
    fn weighted_transpose(&self) -> DMatrix<f64> {
        let mut tw = self.t.transpose();
        for (j, w) in self.weights.iter().enumerate() {
            tw.column_mut(j).scale_mut(*w);
        }
        tw
    }

    /// Largest eigenvalue of the penalty-space operator `T*T = G⁻¹TᵀWT`.
    pub fn normal_operator_norm(&self) -> Result<f64> {
        let (b, _) = self.symmetrized()?;
        Ok(b.singular_values().max().powi(2))
    }

    /// `B = W^{1/2} T L^{-T}` for `G = LLᵀ`, together with `L`.
    fn symmetrized(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let chol = Cholesky::new(self.gram.clone())
            .ok_or_else(|| Error::Numerical("penalty Gram matrix is not positive definite".into()))?;
        let l = chol.l();
        let mut wt = self.t.clone();
        for (i, w) in self.weights.iter().enumerate() {
            wt.row_mut(i).scale_mut(w.sqrt());
        }
        // B = wt · L^{-T}  ⇔  Bᵀ = L^{-1} wtᵀ
        let bt = l
            .solve_lower_triangular(&wt.transpose())
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        Ok((bt.transpose(), l))
    }
}

fn factor(sys: &LinearizedSystem, alpha: f64) -> Result<(Cholesky<f64, Dyn>, DMatrix<f64>)> {
    let tw = sys.weighted_transpose();
    let normal = &tw * &sys.t + &sys.gram * alpha;
    let chol = Cholesky::new(normal)
        .ok_or_else(|| Error::Numerical(format!("normal matrix not positive definite at alpha = {alpha}")))?;
    Ok((chol, tw))
}

/// All inner iterates `φ̄_0 = start, φ̄_1, …, φ̄_m`. The normal matrix is
/// factored once and reused.
pub fn iterated_tikhonov_path(sys: &LinearizedSystem, p: FilterParams) -> Result<Vec<DVector<f64>>> {
    let (chol, tw) = factor(sys, p.alpha)?;
    let data = -(&tw * &sys.offset);
    let mut path = Vec::with_capacity(p.m + 1);
    path.push(sys.start.clone());
    for i in 0..p.m {
        let rhs = &data + &sys.gram * &path[i] * p.alpha;
        let next = chol.solve(&rhs);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("inner solve produced non-finite values".into()));
        }
        path.push(next);
    }
    Ok(path)
}

/// `m` successive minimizations of `‖Tφ + c‖²_W + α‖φ − φ̄_i‖²_G`, starting
/// from the system's start vector.
pub fn iterated_tikhonov(sys: &LinearizedSystem, p: FilterParams) -> Result<DVector<f64>> {
    Ok(iterated_tikhonov_path(sys, p)?.pop().expect("path is nonempty"))
}

/// The same solution through the spectral form
/// `start + g_α(T*T) T*(−c − T·start)`, with `T*T` diagonalized in the
/// penalty-space metric. Intended as a cross-check of
/// [`iterated_tikhonov`].
pub fn spectral_solve_check(sys: &LinearizedSystem, p: FilterParams) -> Result<DVector<f64>> {
    let (b, l) = sys.symmetrized()?;
    let shifted = -(&sys.t * &sys.start + &sys.offset);
    let d = shifted.zip_map(&sys.weights, |r, w| r * w.sqrt());
    let eig = (b.transpose() * &b).symmetric_eigen();
    let v = &eig.eigenvectors;
    let mut coef = v.transpose() * (b.transpose() * d);
    for (c, lambda) in coef.iter_mut().zip(eig.eigenvalues.iter()) {
        *c *= filter_g(lambda.max(0.0), p);
    }
    let xi = v * coef;
    let step = l
        .transpose()
        .solve_upper_triangular(&xi)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    Ok(&sys.start + step)
}
