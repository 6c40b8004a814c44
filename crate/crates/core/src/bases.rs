//! Deterministic basis functions mapping covariates to latent coefficients.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Columns whose largest absolute value over the support points does not
/// exceed this are pruned.
pub const PRUNE_TOL: f64 = 1e-12;

/// Covariate values fed to a basis.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateValues {
    OneD(Vec<f64>),
    TwoD(Vec<[f64; 2]>),
}

impl CovariateValues {
    pub fn len(&self) -> usize {
        match self {
            CovariateValues::OneD(v) => v.len(),
            CovariateValues::TwoD(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_1d(&self) -> Result<&[f64]> {
        match self {
            CovariateValues::OneD(v) => Ok(v),
            CovariateValues::TwoD(_) => Err(Error::Dimension("expected 1-D covariate values".into())),
        }
    }

    pub fn as_2d(&self) -> Result<&[[f64; 2]]> {
        match self {
            CovariateValues::TwoD(v) => Ok(v),
            CovariateValues::OneD(_) => Err(Error::Dimension("expected 2-D covariate values".into())),
        }
    }
}

/// Univariate B-spline basis on `[lower, upper]` with equally spaced knots
/// extended `degree` intervals past each boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct BSpline1d {
    pub degree: usize,
    pub n_basis: usize,
    pub lower: f64,
    pub upper: f64,
}

impl BSpline1d {
    pub fn new(n_basis: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::with_degree(3, n_basis, lower, upper)
    }

    pub fn with_degree(degree: usize, n_basis: usize, lower: f64, upper: f64) -> Result<Self> {
        if n_basis < degree + 1 {
            return Err(Error::Dimension(format!(
                "a degree-{degree} B-spline basis needs at least {} functions, got {n_basis}",
                degree + 1
            )));
        }
        if !(upper > lower) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::Validation(format!("invalid support [{lower}, {upper}]")));
        }
        Ok(Self {
            degree,
            n_basis,
            lower,
            upper,
        })
    }

    fn n_intervals(&self) -> usize {
        self.n_basis - self.degree
    }

    fn spacing(&self) -> f64 {
        (self.upper - self.lower) / self.n_intervals() as f64
    }

    fn knot(&self, j: usize) -> f64 {
        self.lower + (j as f64 - self.degree as f64) * self.spacing()
    }

    fn in_support(&self, x: f64) -> bool {
        let slack = 1e-9 * (self.upper - self.lower);
        x.is_finite() && x >= self.lower - slack && x <= self.upper + slack
    }

    /// Index of the first non-zero function at `x` and the `degree + 1`
    /// non-zero values. `x` must be in the support.
    pub fn local(&self, x: f64) -> (usize, Vec<f64>) {
        let p = self.degree;
        let x = x.clamp(self.lower, self.upper);
        let m = (((x - self.lower) / self.spacing()).floor() as usize).min(self.n_intervals() - 1);
        let span = m + p;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - self.knot(span + 1 - j);
            right[j] = self.knot(span + j) - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        (m, n)
    }

    /// Full basis row at `x`.
    pub fn row(&self, x: f64) -> Vec<f64> {
        let (first, vals) = self.local(x);
        let mut row = vec![0.0; self.n_basis];
        row[first..first + vals.len()].copy_from_slice(&vals);
        row
    }
}

/// Tensor-product basis of two univariate B-splines, optionally pruned to a
/// subset of the `n_a · n_b` functions. Function `(i, j)` has flat index
/// `i · n_b + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBSpline {
    pub a: BSpline1d,
    pub b: BSpline1d,
    pub retained: Option<Vec<usize>>,
}

impl TensorBSpline {
    pub fn grid_dims(&self) -> (usize, usize) {
        (self.a.n_basis, self.b.n_basis)
    }

    pub fn full_len(&self) -> usize {
        self.a.n_basis * self.b.n_basis
    }

    fn full_row(&self, z: [f64; 2]) -> Vec<f64> {
        let ra = self.a.row(z[0]);
        let rb = self.b.row(z[1]);
        let mut out = Vec::with_capacity(self.full_len());
        for &va in &ra {
            for &vb in &rb {
                out.push(va * vb);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BasisSpec {
    /// `D(x) = (x − center) / scale`.
    Linear { center: f64, scale: f64 },
    /// One column per level; `x` must equal one of the level values.
    Indicator { levels: Vec<f64> },
    BSpline1d(BSpline1d),
    BSpline2d(TensorBSpline),
}

impl BasisSpec {
    /// Indicator basis on levels `1..=k`.
    pub fn indicator(k: usize) -> Self {
        BasisSpec::Indicator {
            levels: (1..=k).map(|v| v as f64).collect(),
        }
    }

    pub fn n_functions(&self) -> usize {
        match self {
            BasisSpec::Linear { .. } => 1,
            BasisSpec::Indicator { levels } => levels.len(),
            BasisSpec::BSpline1d(s) => s.n_basis,
            BasisSpec::BSpline2d(t) => t.retained.as_ref().map_or(t.full_len(), |r| r.len()),
        }
    }

    pub fn is_2d(&self) -> bool {
        matches!(self, BasisSpec::BSpline2d(_))
    }

    /// Design matrix with row `i = D(xᵢ)ᵀ`.
    pub fn eval(&self, x: &CovariateValues) -> Result<DMatrix<f64>> {
        let n = x.len();
        let k = self.n_functions();
        match self {
            BasisSpec::Linear { center, scale } => {
                let xs = x.as_1d()?;
                let bad: Vec<_> = (0..n).filter(|&i| !xs[i].is_finite()).collect();
                if !bad.is_empty() {
                    return Err(Error::Domain { indices: bad });
                }
                Ok(DMatrix::from_fn(n, 1, |i, _| (xs[i] - center) / scale))
            }
            BasisSpec::Indicator { levels } => {
                let xs = x.as_1d()?;
                let mut out = DMatrix::zeros(n, k);
                let mut bad = Vec::new();
                for (i, &v) in xs.iter().enumerate() {
                    match levels.iter().position(|&l| (l - v).abs() <= 1e-9 * l.abs().max(1.0)) {
                        Some(j) => out[(i, j)] = 1.0,
                        None => bad.push(i),
                    }
                }
                if bad.is_empty() {
                    Ok(out)
                } else {
                    Err(Error::Domain { indices: bad })
                }
            }
            BasisSpec::BSpline1d(s) => {
                let xs = x.as_1d()?;
                let bad: Vec<_> = (0..n).filter(|&i| !s.in_support(xs[i])).collect();
                if !bad.is_empty() {
                    return Err(Error::Domain { indices: bad });
                }
                let mut out = DMatrix::zeros(n, k);
                for (i, &v) in xs.iter().enumerate() {
                    let (first, vals) = s.local(v);
                    for (o, val) in vals.into_iter().enumerate() {
                        out[(i, first + o)] = val;
                    }
                }
                Ok(out)
            }
            BasisSpec::BSpline2d(t) => {
                let zs = x.as_2d()?;
                let bad: Vec<_> = (0..n)
                    .filter(|&i| !t.a.in_support(zs[i][0]) || !t.b.in_support(zs[i][1]))
                    .collect();
                if !bad.is_empty() {
                    return Err(Error::Domain { indices: bad });
                }
                let mut out = DMatrix::zeros(n, k);
                for (i, &z) in zs.iter().enumerate() {
                    let full = t.full_row(z);
                    match &t.retained {
                        None => {
                            for (j, v) in full.into_iter().enumerate() {
                                out[(i, j)] = v;
                            }
                        }
                        Some(r) => {
                            for (j, &idx) in r.iter().enumerate() {
                                out[(i, j)] = full[idx];
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Combine two univariate B-spline bases into their tensor product.
pub fn tensor_basis(a: &BasisSpec, b: &BasisSpec) -> Result<BasisSpec> {
    match (a, b) {
        (BasisSpec::BSpline1d(a), BasisSpec::BSpline1d(b)) => Ok(BasisSpec::BSpline2d(TensorBSpline {
            a: a.clone(),
            b: b.clone(),
            retained: None,
        })),
        _ => Err(Error::Specification(
            "tensor_basis requires two 1-D B-spline bases".into(),
        )),
    }
}

/// Keep the tensor functions that are non-zero somewhere on the support
/// point cloud. Returns the pruned spec and the retained flat indices.
pub fn prune_basis(spec: &BasisSpec, support_points: &[[f64; 2]]) -> Result<(BasisSpec, Vec<usize>)> {
    let t = match spec {
        BasisSpec::BSpline2d(t) => t,
        _ => return Err(Error::Specification("prune_basis requires a 2-D B-spline basis".into())),
    };
    if support_points.is_empty() {
        return Err(Error::Validation("empty support point cloud".into()));
    }
    let full = TensorBSpline {
        retained: None,
        ..t.clone()
    };
    let design = BasisSpec::BSpline2d(full.clone()).eval(&CovariateValues::TwoD(support_points.to_vec()))?;
    let retained: Vec<usize> = (0..design.ncols())
        .filter(|&j| design.column(j).amax() > PRUNE_TOL)
        .collect();
    let pruned = BasisSpec::BSpline2d(TensorBSpline {
        retained: Some(retained.clone()),
        ..full
    });
    Ok((pruned, retained))
}

/// 4-neighbourhood adjacency between retained cells of a `rows × cols`
/// grid (flat index `i · cols + j`).
pub fn lattice_adjacency(retained: &[usize], grid_dims: (usize, usize)) -> Result<DMatrix<f64>> {
    let (rows, cols) = grid_dims;
    if let Some(&bad) = retained.iter().find(|&&r| r >= rows * cols) {
        return Err(Error::Validation(format!(
            "retained index {bad} outside the {rows}x{cols} grid"
        )));
    }
    let n = retained.len();
    let mut w = DMatrix::zeros(n, n);
    for (p, &a) in retained.iter().enumerate() {
        for (q, &b) in retained.iter().enumerate().skip(p + 1) {
            let (ra, ca) = (a / cols, a % cols);
            let (rb, cb) = (b / cols, b % cols);
            if ra.abs_diff(rb) + ca.abs_diff(cb) == 1 {
                w[(p, q)] = 1.0;
                w[(q, p)] = 1.0;
            }
        }
    }
    Ok(w)
}
