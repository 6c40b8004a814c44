//! Two-step standardization of effects: zero-mean constraints under the
//! declared covariate distribution, then scaling by the reference standard
//! deviation so that `Var_{X,u}[f(X) | σ² = 1] = 1`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bases::{lattice_adjacency, prune_basis, BSpline1d, BasisSpec, CovariateValues};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gmrf::{build_icar, build_iid, build_rw2, CoefficientBlock, ConstrainedGaussian, PrecisionStructure};

/// Equally weighted quadrature points per continuous covariate.
pub const QUADRATURE_POINTS: usize = 1000;

const MIN_REFERENCE_VARIANCE: f64 = 1e-14;

/// Distribution assumed for the covariates of one effect. Expectations are
/// taken over an equally weighted quadrature grid.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateDistribution {
    /// Uniform on `[lower, upper]`, discretized at `n_points` midpoints.
    UniformInterval { lower: f64, upper: f64, n_points: usize },
    /// Uniform over a finite set of values.
    UniformDiscrete { values: Vec<f64> },
    /// Uniform over a (dense) cloud of 2-D points.
    UniformPointCloud { points: Vec<[f64; 2]> },
}

impl CovariateDistribution {
    pub fn interval(lower: f64, upper: f64) -> Result<Self> {
        if !(upper > lower) {
            return Err(Error::Validation(format!("invalid interval [{lower}, {upper}]")));
        }
        Ok(CovariateDistribution::UniformInterval {
            lower,
            upper,
            n_points: QUADRATURE_POINTS,
        })
    }

    /// Uniform on `{1, …, k}`.
    pub fn levels(k: usize) -> Self {
        CovariateDistribution::UniformDiscrete {
            values: (1..=k).map(|v| v as f64).collect(),
        }
    }

    pub fn quadrature(&self) -> CovariateValues {
        match self {
            CovariateDistribution::UniformInterval { lower, upper, n_points } => {
                let h = (upper - lower) / *n_points as f64;
                CovariateValues::OneD((0..*n_points).map(|i| lower + (i as f64 + 0.5) * h).collect())
            }
            CovariateDistribution::UniformDiscrete { values } => CovariateValues::OneD(values.clone()),
            CovariateDistribution::UniformPointCloud { points } => CovariateValues::TwoD(points.clone()),
        }
    }

    pub fn n_points(&self) -> usize {
        match self {
            CovariateDistribution::UniformInterval { n_points, .. } => *n_points,
            CovariateDistribution::UniformDiscrete { values } => values.len(),
            CovariateDistribution::UniformPointCloud { points } => points.len(),
        }
    }

    /// Mean and standard deviation of a 1-D distribution under its
    /// quadrature.
    pub fn moments(&self) -> Result<(f64, f64)> {
        let q = self.quadrature();
        let xs = q.as_1d()?;
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok((mean, var.sqrt()))
    }

    /// One draw from the distribution (continuous for intervals).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CovariatePoint {
        match self {
            CovariateDistribution::UniformInterval { lower, upper, .. } => {
                CovariatePoint::OneD(rng.random_range(*lower..*upper))
            }
            CovariateDistribution::UniformDiscrete { values } => {
                CovariatePoint::OneD(values[rng.random_range(0..values.len())])
            }
            CovariateDistribution::UniformPointCloud { points } => {
                CovariatePoint::TwoD(points[rng.random_range(0..points.len())])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariatePoint {
    OneD(f64),
    TwoD([f64; 2]),
}

impl From<CovariatePoint> for CovariateValues {
    fn from(p: CovariatePoint) -> Self {
        match p {
            CovariatePoint::OneD(x) => CovariateValues::OneD(vec![x]),
            CovariatePoint::TwoD(z) => CovariateValues::TwoD(vec![z]),
        }
    }
}

/// An effect whose variance parameter equals its variance contribution.
///
/// Coefficients are `u = σ · L · z` with `z ~ N(0, I_r)`, where `L` is the
/// constrained factor already divided by the scale constant `C`.
#[derive(Debug, Clone)]
pub struct StandardizedEffect {
    pub effect_id: String,
    pub basis: BasisSpec,
    pub precision: PrecisionStructure,
    pub constraints: DMatrix<f64>,
    pub scale_constant: f64,
    pub dist: CovariateDistribution,
    factor: DMatrix<f64>,
    quad_design: DMatrix<f64>,
}

impl StandardizedEffect {
    /// Scaled `K × r` factor of the coefficient covariance at `σ² = 1`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn n_coefficients(&self) -> usize {
        self.factor.nrows()
    }

    /// Basis evaluated on the quadrature grid.
    pub fn quadrature_design(&self) -> &DMatrix<f64> {
        &self.quad_design
    }

    pub fn coefficients_from_whitened(&self, sigma2: f64, z: &DVector<f64>) -> CoefficientBlock {
        CoefficientBlock::new(self.effect_id.clone(), &self.factor * z * sigma2.sqrt())
    }

    pub fn sample_coefficients<R: Rng + ?Sized>(&self, sigma2: f64, rng: &mut R) -> CoefficientBlock {
        let z = DVector::from_fn(self.rank(), |_, _| rng.sample::<f64, _>(StandardNormal));
        self.coefficients_from_whitened(sigma2, &z)
    }

    /// Realized trend on the quadrature grid.
    pub fn trend(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.quad_design * u
    }

    /// `E_X[f(X)]` for fixed coefficients.
    pub fn quadrature_mean(&self, u: &DVector<f64>) -> f64 {
        self.trend(u).mean()
    }

    /// Monte Carlo estimate of `Var_{X,u}[f(X) | σ² = 1]` from joint
    /// `(X, u)` draws. Work is split into batches with independent streams
    /// derived from `seed`.
    pub fn mc_variance(&self, n_draws: usize, seed: u64, exec: Exec) -> Result<f64> {
        const BATCHES: usize = 64;
        let per = n_draws.div_ceil(BATCHES);
        let partial = exec.map(BATCHES, |b| -> Result<(f64, f64, usize)> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64 + 1);
            let count = per.min(n_draws.saturating_sub(b * per));
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let x: CovariateValues = self.dist.sample(&mut rng).into();
                let row = self.basis.eval(&x)?;
                let z = DVector::from_fn(self.rank(), |_, _| rng.sample::<f64, _>(StandardNormal));
                // Only the few nonzero basis values need rows of `L z`.
                let f: f64 = row
                    .row(0)
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| **d != 0.0)
                    .map(|(k, d)| d * self.factor.row(k).transpose().dot(&z))
                    .sum();
                s1 += f;
                s2 += f * f;
            }
            Ok((s1, s2, count))
        });
        let (mut s1, mut s2, mut n) = (0.0, 0.0, 0usize);
        for p in partial {
            let (a, b, c) = p?;
            s1 += a;
            s2 += b;
            n += c;
        }
        let n = n as f64;
        Ok(s2 / n - (s1 / n).powi(2))
    }
}

/// `d_k = E_X[D_k(X)]`; any `u` with `dᵀu = 0` has `E_X[f(X)] = 0`.
pub fn zero_mean_constraint(basis: &BasisSpec, dist: &CovariateDistribution) -> Result<DVector<f64>> {
    let design = basis.eval(&dist.quadrature())?;
    Ok(column_means(&design))
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum() / n)
}

/// `C² = E_X[D(X)ᵀ Σ̃ D(X)]` with `Σ̃` the constrained covariance at
/// `σ² = 1`.
pub fn reference_variance(
    basis: &BasisSpec,
    precision: &PrecisionStructure,
    constraints: &DMatrix<f64>,
    dist: &CovariateDistribution,
) -> Result<f64> {
    let design = basis.eval(&dist.quadrature())?;
    let law = ConstrainedGaussian::new(precision, constraints)?;
    reference_variance_from(&design, &law)
}

fn reference_variance_from(design: &DMatrix<f64>, law: &ConstrainedGaussian) -> Result<f64> {
    let projected = design * law.factor();
    let c2 = projected.iter().map(|v| v * v).sum::<f64>() / design.nrows() as f64;
    if !(c2 > MIN_REFERENCE_VARIANCE) {
        return Err(Error::DegenerateEffect(c2));
    }
    Ok(c2)
}

/// Standardize with the zero-mean constraint attached (when the basis mean
/// is not already zero).
pub fn standardize(
    effect_id: &str,
    basis: BasisSpec,
    precision: PrecisionStructure,
    dist: CovariateDistribution,
) -> Result<StandardizedEffect> {
    standardize_with(effect_id, basis, precision, dist, None)
}

/// As [`standardize`], with additional constraint columns.
pub fn standardize_with(
    effect_id: &str,
    basis: BasisSpec,
    precision: PrecisionStructure,
    dist: CovariateDistribution,
    extra: Option<DMatrix<f64>>,
) -> Result<StandardizedEffect> {
    let k = basis.n_functions();
    if precision.dim() != k {
        return Err(Error::Dimension(format!(
            "effect '{effect_id}': basis has {k} functions, precision is {}x{}",
            precision.dim(),
            precision.dim()
        )));
    }
    let design = basis.eval(&dist.quadrature())?;
    let d = column_means(&design);
    let mut cols = Vec::new();
    if d.amax() > 1e-10 * design.amax().max(1.0) {
        cols.push(d);
    }
    if let Some(extra) = extra {
        if extra.nrows() != k {
            return Err(Error::Dimension("extra constraints have the wrong number of rows".into()));
        }
        cols.extend(extra.column_iter().map(|c| c.into_owned()));
    }
    let constraints = if cols.is_empty() {
        DMatrix::zeros(k, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    let law = ConstrainedGaussian::new(&precision, &constraints)?;
    let c2 = reference_variance_from(&design, &law)?;
    let c = c2.sqrt();
    Ok(StandardizedEffect {
        effect_id: effect_id.to_string(),
        factor: law.factor() / c,
        basis,
        precision,
        constraints,
        scale_constant: c,
        dist,
        quad_design: design,
    })
}

/// Split a P-spline into a linear effect on the standardized covariate and
/// an RW2 B-spline effect constrained to have zero mean and zero
/// covariance with the covariate. Ids are `{id}_lin` and `{id}_nl`.
pub fn split_pspline(
    id: &str,
    basis: &BasisSpec,
    dist: &CovariateDistribution,
) -> Result<(StandardizedEffect, StandardizedEffect)> {
    let spline = match basis {
        BasisSpec::BSpline1d(s) => s.clone(),
        _ => return Err(Error::Specification("split_pspline requires a 1-D B-spline basis".into())),
    };
    if matches!(dist, CovariateDistribution::UniformPointCloud { .. }) {
        return Err(Error::Specification("split_pspline requires a 1-D covariate distribution".into()));
    }
    let (mean, sd) = dist.moments()?;
    let linear_basis = BasisSpec::Linear { center: mean, scale: sd };
    let linear = standardize(&format!("{id}_lin"), linear_basis.clone(), build_iid(1)?, dist.clone())?;

    let q = dist.quadrature();
    let design = BasisSpec::BSpline1d(spline.clone()).eval(&q)?;
    let xt = linear_basis.eval(&q)?;
    let n = design.nrows() as f64;
    let trend = DVector::from_fn(design.ncols(), |k, _| design.column(k).dot(&xt.column(0)) / n);
    let nonlinear = standardize_with(
        &format!("{id}_nl"),
        BasisSpec::BSpline1d(spline.clone()),
        build_rw2(spline.n_basis)?,
        dist.clone(),
        Some(DMatrix::from_columns(&[trend])),
    )?;
    Ok((linear, nonlinear))
}

/// 2-D spatial effect: tensor B-spline pruned to the point cloud, ICAR
/// precision on the retained lattice, and the quadrature zero-mean
/// constraint in place of sum-to-zero.
pub fn spatial_effect(
    id: &str,
    a: BSpline1d,
    b: BSpline1d,
    cloud: Vec<[f64; 2]>,
) -> Result<(StandardizedEffect, Vec<usize>)> {
    let full = crate::bases::tensor_basis(&BasisSpec::BSpline1d(a.clone()), &BasisSpec::BSpline1d(b.clone()))?;
    let (pruned, retained) = prune_basis(&full, &cloud)?;
    let w = lattice_adjacency(&retained, (a.n_basis, b.n_basis))?;
    let q = build_icar(&w)?;
    let effect = standardize(id, pruned, q, CovariateDistribution::UniformPointCloud { points: cloud })?;
    Ok((effect, retained))
}
