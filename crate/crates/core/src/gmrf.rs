//! Gaussian precision structures (possibly rank-deficient), their
//! generalized inverses and determinants, and constrained sampling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Eigenvalues with `|λ| <= ZERO_EIGEN_REL_TOL * λ_max` are treated as zero.
pub const ZERO_EIGEN_REL_TOL: f64 = 1e-9;

const SYMMETRY_REL_TOL: f64 = 1e-12;

/// Symmetric eigendecomposition of a positive-semidefinite matrix with the
/// zero / non-zero classification applied.
#[derive(Debug, Clone)]
pub struct PsdEigen {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
    nonzero: Vec<bool>,
    lambda_max: f64,
}

impl PsdEigen {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        check_symmetric(m)?;
        let eig = SymmetricEigen::new(m.clone());
        let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let tol = ZERO_EIGEN_REL_TOL * lambda_max;
        if let Some(neg) = eig.eigenvalues.iter().find(|&&v| v < -tol) {
            return Err(Error::Validation(format!(
                "matrix is not positive semidefinite (eigenvalue {neg:e}, largest {lambda_max:e})"
            )));
        }
        let nonzero = eig
            .eigenvalues
            .iter()
            .map(|&v| lambda_max > 0.0 && v.abs() > tol)
            .collect();
        Ok(Self {
            values: eig.eigenvalues,
            vectors: eig.eigenvectors,
            nonzero,
            lambda_max,
        })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn is_nonzero(&self, i: usize) -> bool {
        self.nonzero[i]
    }

    pub fn rank(&self) -> usize {
        self.nonzero.iter().filter(|&&b| b).count()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Orthonormal basis of the eigenvectors classified as zero.
    pub fn null_basis(&self) -> DMatrix<f64> {
        let cols: Vec<_> = (0..self.dim())
            .filter(|&i| !self.nonzero[i])
            .map(|i| self.vectors.column(i).into_owned())
            .collect();
        columns_to_matrix(self.dim(), &cols)
    }

    /// Moore-Penrose pseudo-inverse with the zero eigenvalues dropped.
    pub fn pinv(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for i in (0..n).filter(|&i| self.nonzero[i]) {
            let v = self.vectors.column(i);
            out += (v * v.transpose()) / self.values[i];
        }
        out
    }

    /// Sum of logs of the non-zero eigenvalues.
    pub fn log_pdet(&self) -> Result<f64> {
        if self.rank() == 0 {
            return Err(Error::Undefined(
                "generalized determinant of an all-zero matrix".into(),
            ));
        }
        Ok((0..self.dim())
            .filter(|&i| self.nonzero[i])
            .map(|i| self.values[i].ln())
            .sum())
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "matrix is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_REL_TOL * scale {
        return Err(Error::Validation(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    Ok(())
}

fn columns_to_matrix(rows: usize, cols: &[DVector<f64>]) -> DMatrix<f64> {
    if cols.is_empty() {
        DMatrix::zeros(rows, 0)
    } else {
        DMatrix::from_columns(cols)
    }
}

/// Precision matrix of an (intrinsic) GMRF with its null space and cached
/// eigendecomposition.
#[derive(Debug, Clone)]
pub struct PrecisionStructure {
    q: DMatrix<f64>,
    nullspace: DMatrix<f64>,
    eigen: PsdEigen,
}

impl PrecisionStructure {
    /// Wrap an arbitrary symmetric PSD matrix; the null space is taken from
    /// the eigendecomposition.
    pub fn from_matrix(q: DMatrix<f64>) -> Result<Self> {
        let eigen = PsdEigen::new(&q)?;
        let nullspace = eigen.null_basis();
        Ok(Self { q, nullspace, eigen })
    }

    fn with_nullspace(q: DMatrix<f64>, nullspace: DMatrix<f64>) -> Result<Self> {
        let eigen = PsdEigen::new(&q)?;
        let s = Self { q, nullspace, eigen };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let m = self.nullspace.ncols();
        if self.rank() + m != self.dim() {
            return Err(Error::Validation(format!(
                "null space dimension {m} inconsistent with rank {} of a {}x{} precision",
                self.rank(),
                self.dim(),
                self.dim()
            )));
        }
        if m > 0 {
            let resid = (&self.q * &self.nullspace).amax();
            if resid > ZERO_EIGEN_REL_TOL * self.eigen.lambda_max().max(1.0) {
                return Err(Error::Validation(format!(
                    "Q·S residual {resid:e} exceeds tolerance"
                )));
            }
        }
        Ok(())
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn nullspace(&self) -> &DMatrix<f64> {
        &self.nullspace
    }

    pub fn eigen(&self) -> &PsdEigen {
        &self.eigen
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn rank(&self) -> usize {
        self.eigen.rank()
    }

    pub fn nullity(&self) -> usize {
        self.dim() - self.rank()
    }
}

fn difference_matrix(k: usize, order: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::identity(k, k);
    for _ in 0..order {
        let r = d.nrows();
        d = DMatrix::from_fn(r - 1, k, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    d
}

/// First-order random walk: `Q = D₁ᵀD₁`, null space spanned by the constant.
pub fn build_rw1(k: usize) -> Result<PrecisionStructure> {
    if k < 2 {
        return Err(Error::Dimension(format!("RW1 needs K >= 2, got {k}")));
    }
    let d = difference_matrix(k, 1);
    let s = DMatrix::from_element(k, 1, 1.0 / (k as f64).sqrt());
    PrecisionStructure::with_nullspace(d.transpose() * d, s)
}

/// Second-order random walk: `Q = D₂ᵀD₂`, null space spanned by the
/// constant and the linear trend.
pub fn build_rw2(k: usize) -> Result<PrecisionStructure> {
    if k < 3 {
        return Err(Error::Dimension(format!("RW2 needs K >= 3, got {k}")));
    }
    let d = difference_matrix(k, 2);
    let ones = DVector::from_element(k, 1.0 / (k as f64).sqrt());
    let mean = (k as f64 + 1.0) / 2.0;
    let mut trend = DVector::from_fn(k, |i, _| i as f64 + 1.0 - mean);
    trend /= trend.norm();
    let s = DMatrix::from_columns(&[ones, trend]);
    PrecisionStructure::with_nullspace(d.transpose() * d, s)
}

/// Intrinsic CAR precision `diag(W·1) − W` for a symmetric 0/1 adjacency.
/// The null space is spanned by the (normalized) connected-component
/// indicators.
pub fn build_icar(w: &DMatrix<f64>) -> Result<PrecisionStructure> {
    let k = w.nrows();
    if w.ncols() != k {
        return Err(Error::Validation("adjacency must be square".into()));
    }
    for i in 0..k {
        if w[(i, i)] != 0.0 {
            return Err(Error::Validation(format!("adjacency has nonzero diagonal at {i}")));
        }
        for j in 0..k {
            let v = w[(i, j)];
            if v != 0.0 && v != 1.0 {
                return Err(Error::Validation(format!("adjacency entry ({i},{j}) = {v} is not 0/1")));
            }
            if v != w[(j, i)] {
                return Err(Error::Validation(format!("adjacency is not symmetric at ({i},{j})")));
            }
        }
    }
    let mut q = -w.clone();
    for i in 0..k {
        q[(i, i)] = w.row(i).sum();
    }
    let comps = connected_components(w);
    let n_comp = comps.iter().max().map_or(0, |&c| c + 1);
    let cols: Vec<_> = (0..n_comp)
        .map(|c| {
            let mut v = DVector::from_fn(k, |i, _| if comps[i] == c { 1.0 } else { 0.0 });
            v /= v.norm();
            v
        })
        .collect();
    PrecisionStructure::with_nullspace(q, columns_to_matrix(k, &cols))
}

/// Component label for every node of the graph described by `w`.
pub fn connected_components(w: &DMatrix<f64>) -> Vec<usize> {
    let k = w.nrows();
    let mut label = vec![usize::MAX; k];
    let mut next = 0;
    for start in 0..k {
        if label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = next;
        while let Some(i) = stack.pop() {
            for j in 0..k {
                if w[(i, j)] != 0.0 && label[j] == usize::MAX {
                    label[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    label
}

pub fn build_iid(k: usize) -> Result<PrecisionStructure> {
    if k < 1 {
        return Err(Error::Dimension("iid effect needs K >= 1".into()));
    }
    PrecisionStructure::with_nullspace(DMatrix::identity(k, k), DMatrix::zeros(k, 0))
}

/// Moore-Penrose pseudo-inverse `Q⁺`.
pub fn generalized_inverse(p: &PrecisionStructure) -> DMatrix<f64> {
    p.eigen.pinv()
}

/// Log of the product of non-null eigenvalues.
pub fn generalized_log_det(p: &PrecisionStructure) -> Result<f64> {
    p.eigen.log_pdet()
}

/// Latent coefficients of one effect.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBlock {
    pub effect_id: String,
    pub values: DVector<f64>,
}

impl CoefficientBlock {
    pub fn new(effect_id: impl Into<String>, values: DVector<f64>) -> Self {
        Self {
            effect_id: effect_id.into(),
            values,
        }
    }

    /// Largest `|Aᵀu|` entry.
    pub fn constraint_residual(&self, a: &DMatrix<f64>) -> f64 {
        if a.ncols() == 0 {
            return 0.0;
        }
        (a.transpose() * &self.values).amax()
    }
}

/// Gaussian law `N(0, Q⁻)` restricted to `{u : Aᵀu = 0}`.
///
/// Conditioning a Gaussian on a linear subspace equals restricting its
/// density there, so for an intrinsic field whose null space is covered by
/// the constraints this is the limit of kriging with a diffuse prior on the
/// null space. Directions of the null space left unconstrained get zero
/// variance, as with `Q⁺`.
#[derive(Debug, Clone)]
pub struct ConstrainedGaussian {
    factor: DMatrix<f64>,
}

impl ConstrainedGaussian {
    pub fn new(p: &PrecisionStructure, a: &DMatrix<f64>) -> Result<Self> {
        let k = p.dim();
        if a.nrows() != k {
            return Err(Error::Dimension(format!(
                "constraint matrix has {} rows, precision is {k}x{k}",
                a.nrows()
            )));
        }
        let c = a.ncols();
        if c >= k && c > 0 {
            return Err(Error::Constraint(format!(
                "{c} constraints leave no free direction in dimension {k}"
            )));
        }
        let free = complement_basis(a)?;
        let reduced = free.transpose() * p.q() * &free;
        let reduced = (&reduced + reduced.transpose()) * 0.5;
        let eig = PsdEigen::new(&reduced)?;
        let cols: Vec<_> = (0..eig.dim())
            .filter(|&i| eig.is_nonzero(i))
            .map(|i| &free * eig.vectors().column(i) / eig.values()[i].sqrt())
            .collect();
        Ok(Self {
            factor: columns_to_matrix(k, &cols),
        })
    }

    /// `K × r` factor `L` with covariance `L Lᵀ`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn sample<R: Rng + ?Sized>(&self, sigma2: f64, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.rank(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.factor * z * sigma2.sqrt()
    }
}

/// Orthonormal basis of `{u : Aᵀu = 0}`; errors if `A` is column-rank
/// deficient.
pub fn complement_basis(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = a.nrows();
    let c = a.ncols();
    if c == 0 {
        return Ok(DMatrix::identity(k, k));
    }
    let gram = a.transpose() * a;
    let geig = SymmetricEigen::new(gram.clone());
    let gmax = geig.eigenvalues.amax();
    let gmin = geig.eigenvalues.min();
    if gmax <= 0.0 || gmin <= 1e-12 * gmax {
        return Err(Error::Constraint(
            "constraint columns are linearly dependent".into(),
        ));
    }
    let gram_inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Constraint("singular constraint Gram matrix".into()))?;
    let proj = DMatrix::<f64>::identity(k, k) - a * gram_inv * a.transpose();
    let proj = (&proj + proj.transpose()) * 0.5;
    let eig = SymmetricEigen::new(proj);
    let cols: Vec<_> = (0..k)
        .filter(|&i| eig.eigenvalues[i] > 0.5)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    if cols.len() != k - c {
        return Err(Error::Constraint(format!(
            "expected {} free directions, found {}",
            k - c,
            cols.len()
        )));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Draw `u ~ N(0, σ²Q⁻)` conditioned on `Aᵀu = 0`.
pub fn sample_constrained<R: Rng + ?Sized>(
    p: &PrecisionStructure,
    a: &DMatrix<f64>,
    sigma2: f64,
    effect_id: &str,
    rng: &mut R,
) -> Result<CoefficientBlock> {
    if !(sigma2 > 0.0) {
        return Err(Error::Validation(format!("sigma2 must be positive, got {sigma2}")));
    }
    let law = ConstrainedGaussian::new(p, a)?;
    Ok(CoefficientBlock::new(effect_id, law.sample(sigma2, rng)))
}
