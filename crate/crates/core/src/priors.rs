//! Priors on the total variance and the split proportions, including the
//! penalized-complexity machinery for proportions with a zero base model.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gmrf::PsdEigen;
use crate::numeric::{bisect, integrate, logit};
use crate::tree::{DecompTree, HdParams};

/// Bounds of the truncated Jeffreys prior on `log V`.
pub const JEFFREYS_LOG_BOUND: f64 = 30.0;

const ROOT_TOL: f64 = 1e-13;

/// Prior family attached to one tree node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PriorFamily {
    /// `π(V) ∝ 1/V`, truncated to `log V ∈ [−30, 30]`.
    Jeffreys,
    /// `√V ~ Exponential(λ)`.
    PcVariance { lambda: f64 },
    Uniform,
    Beta { a: f64, b: f64 },
    Dirichlet { q: f64 },
    /// Simplified PC prior with base model `ω = 0`.
    Pc0 { lambda: f64 },
    /// PC prior from the numerically computed distance. Validation only.
    #[serde(skip)]
    Pc0Exact(Box<Pc0Exact>),
}

impl PriorFamily {
    pub fn name(&self) -> &'static str {
        match self {
            PriorFamily::Jeffreys => "jeffreys",
            PriorFamily::PcVariance { .. } => "pc_variance",
            PriorFamily::Uniform => "uniform",
            PriorFamily::Beta { .. } => "beta",
            PriorFamily::Dirichlet { .. } => "dirichlet",
            PriorFamily::Pc0 { .. } => "pc0",
            PriorFamily::Pc0Exact(_) => "pc0_exact",
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Specification(format!("{} requires {name} > 0, got {v}", self.name())))
            }
        };
        match self {
            PriorFamily::PcVariance { lambda } | PriorFamily::Pc0 { lambda } => positive("lambda", *lambda),
            PriorFamily::Beta { a, b } => positive("a", *a).and(positive("b", *b)),
            PriorFamily::Dirichlet { q } => positive("q", *q),
            PriorFamily::Pc0Exact(e) => positive("lambda", e.lambda),
            _ => Ok(()),
        }
    }
}

/// Prior for one node: `"V"` or a split name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub node: String,
    #[serde(flatten)]
    pub family: PriorFamily,
}

impl PriorSpec {
    pub fn new(node: impl Into<String>, family: PriorFamily) -> Self {
        PriorSpec {
            node: node.into(),
            family,
        }
    }
}

/// `λ = −ln(α)/U`, so that `P(√V > U) = α` under `√V ~ Exp(λ)`.
pub fn pc_variance_lambda(u: f64, alpha: f64) -> Result<f64> {
    if !(u > 0.0 && u.is_finite()) {
        return Err(Error::Validation(format!("U must be positive, got {u}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Validation(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(-alpha.ln() / u)
}

fn check_pc0(omega: f64, lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Validation(format!("lambda must be positive, got {lambda}")));
    }
    if !(omega > 0.0 && omega < 1.0) {
        return Err(Error::Validation(format!("omega must lie in (0, 1), got {omega}")));
    }
    Ok(())
}

/// `log π(ω)` for `π(ω) = λ exp(−λ√ω) / (2√ω (1 − exp(−λ)))`.
pub fn pc0_simplified_logpdf(omega: f64, lambda: f64) -> Result<f64> {
    check_pc0(omega, lambda)?;
    Ok(lambda.ln() - lambda * omega.sqrt() - std::f64::consts::LN_2 - 0.5 * omega.ln() - (-(-lambda).exp_m1()).ln())
}

/// `F(ω) = (1 − exp(−λ√ω)) / (1 − exp(−λ))`, clamped to `[0, 1]` outside
/// the unit interval.
pub fn pc0_simplified_cdf(omega: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Validation(format!("lambda must be positive, got {lambda}")));
    }
    if omega <= 0.0 {
        return Ok(0.0);
    }
    if omega >= 1.0 {
        return Ok(1.0);
    }
    Ok((-lambda * omega.sqrt()).exp_m1() / (-lambda).exp_m1())
}

pub fn pc0_simplified_quantile(p: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Validation(format!("lambda must be positive, got {lambda}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!("probability must lie in [0, 1], got {p}")));
    }
    let root = -(p * (-lambda).exp_m1()).ln_1p() / lambda;
    Ok((root * root).min(1.0))
}

/// `λ` such that `P(ω < U) = α` under the simplified PC0 prior. Requires
/// `α > √U`, the `λ → 0` limit of `F(U)`.
pub fn pc0_calibrate(u: f64, alpha: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Validation(format!("U must lie in (0, 1), got {u}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Validation(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let bound = u.sqrt();
    if (alpha - bound).abs() <= 1e-12 {
        return Err(Error::Boundary(format!(
            "alpha = sqrt(U) = {bound} is only reached as lambda -> 0"
        )));
    }
    if alpha < bound {
        return Err(Error::Infeasible { alpha, bound });
    }
    let residual = |lambda: f64| pc0_simplified_cdf(u, lambda).unwrap() - alpha;
    bisect(residual, 1e-12, 1.0, ROOT_TOL)
}

/// `P(logit(1/4) < logit(ω) − logit(1/P) < logit(3/4))` for
/// `ω ~ Beta(q, (P−1)q)`, by quadrature on the logit scale.
pub fn dirichlet_marginal_interval_prob(q: f64, p: usize) -> Result<f64> {
    if p < 2 {
        return Err(Error::Validation(format!("need at least two branches, got {p}")));
    }
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::Validation(format!("q must be positive, got {q}")));
    }
    let (a, b) = (q, (p - 1) as f64 * q);
    let center = logit(1.0 / p as f64);
    let half = 3f64.ln();
    let log_norm = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b);
    // On t = logit(ω): density is ω^a (1 − ω)^b / B(a, b).
    let density = |t: f64| {
        let log_w = -crate::numeric::log1pexp(-t);
        let log_1mw = -crate::numeric::log1pexp(t);
        (log_norm + a * log_w + b * log_1mw).exp()
    };
    Ok(integrate(&density, center - half, center + half, 1e-14))
}

/// Concentration `q` of a symmetric Dirichlet on `P` branches such that the
/// interval probability of [`dirichlet_marginal_interval_prob`] is `1/2`.
pub fn dirichlet_q_calibrate(p: usize) -> Result<f64> {
    if p < 2 {
        return Err(Error::Validation(format!("need at least two branches, got {p}")));
    }
    let f = |s: f64| dirichlet_marginal_interval_prob(s.exp(), p).unwrap() - 0.5;
    Ok(bisect(f, -12.0, 4.0, 1e-12)?.exp())
}

/// Outcome of the sum-of-ranks check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankInfo {
    /// Actual ranks, when covariance matrices were supplied.
    pub r0: Option<usize>,
    pub r1: Option<usize>,
    pub n: usize,
    /// `(min[N₀, K₀], min[N₁, K₁])`.
    pub upper_bounds: (usize, usize),
    pub condition_holds: bool,
    /// False when the bounds fail and no matrices were available.
    pub conclusive: bool,
}

/// Checks `R(0) + R(1) ≤ N`, first through the rank upper bounds and then,
/// when matrices are supplied, through eigenvalue counts.
pub fn sum_of_ranks_check(
    k0: usize,
    n0: usize,
    k1: usize,
    n1: usize,
    n: usize,
    matrices: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
) -> Result<RankInfo> {
    if n == 0 || n > n0.saturating_mul(n1) {
        return Err(Error::Dimension(format!("N = {n} must lie in [1, N0*N1 = {}]", n0 * n1)));
    }
    let upper_bounds = (n0.min(k0), n1.min(k1));
    let bound_holds = upper_bounds.0 + upper_bounds.1 <= n;
    let (r0, r1) = match matrices {
        Some((s0, s1)) => {
            for s in [s0, s1] {
                if s.nrows() != n || s.ncols() != n {
                    return Err(Error::Dimension(format!(
                        "covariance is {}x{}, expected {n}x{n}",
                        s.nrows(),
                        s.ncols()
                    )));
                }
            }
            (Some(PsdEigen::new(s0)?.rank()), Some(PsdEigen::new(s1)?.rank()))
        }
        None => (None, None),
    };
    let (condition_holds, conclusive) = match (bound_holds, r0, r1) {
        (true, _, _) => (true, true),
        (false, Some(a), Some(b)) => (a + b <= n, true),
        _ => (false, false),
    };
    Ok(RankInfo {
        r0,
        r1,
        n,
        upper_bounds,
        condition_holds,
        conclusive,
    })
}

/// Squared KLD-based distance between the mixtures `Σ(ω) = (1−ω)Σ₀ + ωΣ₁`
/// and `Σ(ω₀)`, using generalized inverses and determinants.
pub fn kld_distance_sq(omega: f64, omega0: f64, sigma0: &DMatrix<f64>, sigma1: &DMatrix<f64>) -> Result<f64> {
    for (name, w) in [("omega", omega), ("omega0", omega0)] {
        if !(w > 0.0 && w <= 1.0) {
            return Err(Error::Validation(format!("{name} must lie in (0, 1], got {w}")));
        }
    }
    if sigma0.shape() != sigma1.shape() {
        return Err(Error::Dimension("covariances differ in shape".into()));
    }
    let mix = |w: f64| sigma0 * (1.0 - w) + sigma1 * w;
    let s = mix(omega);
    let e = PsdEigen::new(&s)?;
    let e0 = PsdEigen::new(&mix(omega0))?;
    let (r, r0) = (e.rank() as f64, e0.rank() as f64);
    let trace = (e0.pinv() * &s).trace();
    let d2 = trace - r - (e.log_pdet()? - e0.log_pdet()?) + (r0 - r) * (2.0 * std::f64::consts::PI).ln();
    if d2 < -1e-8 * (1.0 + trace.abs()) {
        return Err(Error::Numerical(format!("negative squared distance {d2:e}")));
    }
    Ok(d2.max(0.0))
}

pub fn kld_distance(omega: f64, omega0: f64, sigma0: &DMatrix<f64>, sigma1: &DMatrix<f64>) -> Result<f64> {
    Ok(kld_distance_sq(omega, omega0, sigma0, sigma1)?.sqrt())
}

/// PC0 prior built from the exact distance at a small base value `ω₀`.
/// The distance is normalized as `d(ω; ω₀) √(ω₀ / R(1))`, whose limit for
/// `ω₀ → 0` is `√ω`; the density is exponential on it, truncated to
/// `(ω₀, 1)`, with the derivative taken by central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct Pc0Exact {
    pub lambda: f64,
    pub omega0: f64,
    pub sigma0: DMatrix<f64>,
    pub sigma1: DMatrix<f64>,
    r1: usize,
}

impl Pc0Exact {
    pub fn new(lambda: f64, omega0: f64, sigma0: DMatrix<f64>, sigma1: DMatrix<f64>) -> Result<Self> {
        let r1 = PsdEigen::new(&sigma1)?.rank();
        if r1 == 0 {
            return Err(Error::Validation("Sigma1 has rank zero".into()));
        }
        if !(omega0 > 0.0 && omega0 < 1.0) {
            return Err(Error::Validation(format!("omega0 must lie in (0, 1), got {omega0}")));
        }
        Ok(Pc0Exact {
            lambda,
            omega0,
            sigma0,
            sigma1,
            r1,
        })
    }

    pub fn rank1(&self) -> usize {
        self.r1
    }

    pub fn normalized_distance(&self, omega: f64) -> Result<f64> {
        let d2 = kld_distance_sq(omega, self.omega0, &self.sigma0, &self.sigma1)?;
        Ok((d2 * self.omega0 / self.r1 as f64).sqrt())
    }

    pub fn log_pdf(&self, omega: f64) -> Result<f64> {
        if !(omega < 1.0) {
            return Err(Error::Validation(format!("omega must lie below 1, got {omega}")));
        }
        if omega <= self.omega0 {
            return Ok(f64::NEG_INFINITY);
        }
        let h = 1e-5 * omega.min(1.0 - omega);
        let deriv = (self.normalized_distance(omega + h)? - self.normalized_distance(omega - h)?) / (2.0 * h);
        let d = self.normalized_distance(omega)?;
        let d_max = self.normalized_distance(1.0 - 1e-9)?;
        Ok(self.lambda.ln() - self.lambda * d + deriv.abs().ln() - (-(-self.lambda * d_max).exp_m1()).ln())
    }
}

/// Validated prior assignment for every node of a tree.
#[derive(Debug, Clone)]
pub struct PriorSet {
    tree: DecompTree,
    total: PriorFamily,
    splits: Vec<PriorFamily>,
}

impl PriorSet {
    pub fn new(tree: &DecompTree, specs: &[PriorSpec]) -> Result<Self> {
        let names = tree.split_names();
        let mut total = None;
        let mut splits: Vec<Option<PriorFamily>> = vec![None; names.len()];
        for spec in specs {
            spec.family.validate()?;
            let slot = if spec.node == "V" {
                &mut total
            } else {
                let s = tree
                    .split_index(&spec.node)
                    .ok_or_else(|| Error::Specification(format!("prior for unknown node '{}'", spec.node)))?;
                &mut splits[s]
            };
            if slot.replace(spec.family.clone()).is_some() {
                return Err(Error::Specification(format!("node '{}' has more than one prior", spec.node)));
            }
        }
        let total = total.ok_or_else(|| Error::Specification("no prior given for V".into()))?;
        if !matches!(total, PriorFamily::Jeffreys | PriorFamily::PcVariance { .. }) {
            return Err(Error::Specification(format!("{} is not a prior for V", total.name())));
        }
        let splits = splits
            .into_iter()
            .enumerate()
            .map(|(s, f)| {
                let f = f.ok_or_else(|| Error::Specification(format!("no prior given for '{}'", names[s])))?;
                let binary = tree.split_info(s).0 == 2;
                let ok = match f {
                    PriorFamily::Uniform | PriorFamily::Dirichlet { .. } => true,
                    PriorFamily::Beta { .. } | PriorFamily::Pc0 { .. } | PriorFamily::Pc0Exact(_) => binary,
                    PriorFamily::Jeffreys | PriorFamily::PcVariance { .. } => false,
                };
                if !ok {
                    return Err(Error::Specification(format!(
                        "{} is not a valid prior for split '{}'",
                        f.name(),
                        names[s]
                    )));
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PriorSet {
            tree: tree.clone(),
            total,
            splits,
        })
    }

    pub fn tree(&self) -> &DecompTree {
        &self.tree
    }

    pub fn total_family(&self) -> &PriorFamily {
        &self.total
    }

    pub fn split_family(&self, s: usize) -> &PriorFamily {
        &self.splits[s]
    }

    /// Replaces the prior of one split (used by sensitivity sweeps).
    pub fn with_split_family(&self, node: &str, family: PriorFamily) -> Result<Self> {
        let mut specs = self.specs();
        let spec = specs
            .iter_mut()
            .find(|s| s.node == node)
            .ok_or_else(|| Error::Specification(format!("no split named '{node}'")))?;
        spec.family = family;
        PriorSet::new(&self.tree, &specs)
    }

    pub fn specs(&self) -> Vec<PriorSpec> {
        std::iter::once(PriorSpec::new("V", self.total.clone()))
            .chain(
                self.tree
                    .split_names()
                    .into_iter()
                    .zip(&self.splits)
                    .map(|(n, f)| PriorSpec::new(n, f.clone())),
            )
            .collect()
    }

    /// Log density with respect to `V`, the designated share of each
    /// binary split and the first `P − 1` shares of each multi-way split.
    pub fn log_density(&self, p: &HdParams) -> Result<f64> {
        if p.proportions.len() != self.splits.len() {
            return Err(Error::Dimension("proportions do not match the tree".into()));
        }
        let v = p.total;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Boundary(format!("V = {v} is not in (0, ∞)")));
        }
        let mut lp = match &self.total {
            PriorFamily::Jeffreys => {
                if v.ln().abs() > JEFFREYS_LOG_BOUND {
                    return Ok(f64::NEG_INFINITY);
                }
                -v.ln() - (2.0 * JEFFREYS_LOG_BOUND).ln()
            }
            PriorFamily::PcVariance { lambda } => {
                lambda.ln() - lambda * v.sqrt() - std::f64::consts::LN_2 - 0.5 * v.ln()
            }
            _ => unreachable!(),
        };
        for (s, family) in self.splits.iter().enumerate() {
            let (n, omega_child, _) = self.tree.split_info(s);
            let props = &p.proportions[s];
            if props.len() != n || props.iter().any(|&w| !(w > 0.0 && w < 1.0)) {
                return Err(Error::Boundary(format!(
                    "split '{}' has proportions outside the open simplex",
                    self.tree.split_names()[s]
                )));
            }
            let w = props[omega_child];
            lp += match family {
                PriorFamily::Uniform => ln_gamma(n as f64),
                PriorFamily::Dirichlet { q } => {
                    let q = *q;
                    ln_gamma(n as f64 * q) - n as f64 * ln_gamma(q) + (q - 1.0) * props.iter().map(|x| x.ln()).sum::<f64>()
                }
                PriorFamily::Beta { a, b } => {
                    ln_gamma(a + b) - ln_gamma(*a) - ln_gamma(*b) + (a - 1.0) * w.ln() + (b - 1.0) * (1.0 - w).ln()
                }
                PriorFamily::Pc0 { lambda } => pc0_simplified_logpdf(w, *lambda)?,
                PriorFamily::Pc0Exact(e) => e.log_pdf(w)?,
                _ => unreachable!(),
            };
        }
        Ok(lp)
    }

    /// Log density of the unconstrained coordinates (prior density plus
    /// log-Jacobian of the inverse transform).
    pub fn log_density_unconstrained(&self, y: &nalgebra::DVector<f64>) -> Result<f64> {
        let (p, log_jac) = self.tree.from_unconstrained(y)?;
        Ok(self.log_density(&p)? + log_jac)
    }

    /// One independent draw from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<HdParams> {
        let total = match &self.total {
            PriorFamily::Jeffreys => rng.random_range(-JEFFREYS_LOG_BOUND..JEFFREYS_LOG_BOUND).exp(),
            PriorFamily::PcVariance { lambda } => {
                let s: f64 = Exp::new(*lambda).unwrap().sample(rng);
                s * s
            }
            _ => unreachable!(),
        };
        let mut proportions = Vec::with_capacity(self.splits.len());
        for (s, family) in self.splits.iter().enumerate() {
            let (n, omega_child, _) = self.tree.split_info(s);
            let props = loop {
                let props = match family {
                    PriorFamily::Uniform => dirichlet_draw(1.0, n, rng),
                    PriorFamily::Dirichlet { q } => dirichlet_draw(*q, n, rng),
                    PriorFamily::Beta { a, b } => {
                        let w = rand_distr::Beta::new(*a, *b).unwrap().sample(rng);
                        binary_props(w, omega_child)
                    }
                    PriorFamily::Pc0 { lambda } => {
                        binary_props(pc0_simplified_quantile(rng.random::<f64>(), *lambda)?, omega_child)
                    }
                    PriorFamily::Pc0Exact(_) => {
                        return Err(Error::Specification("pc0_exact priors cannot be sampled".into()))
                    }
                    _ => unreachable!(),
                };
                if props.iter().all(|&w| w > 0.0 && w < 1.0) {
                    break props;
                }
            };
            proportions.push(props);
        }
        Ok(HdParams { total, proportions })
    }

    /// Node-wise prior medians (barycenter for multi-way splits).
    pub fn medians(&self) -> Result<HdParams> {
        let total = match &self.total {
            PriorFamily::Jeffreys => 1.0,
            PriorFamily::PcVariance { lambda } => (std::f64::consts::LN_2 / lambda).powi(2),
            _ => unreachable!(),
        };
        let mut proportions = Vec::with_capacity(self.splits.len());
        for (s, family) in self.splits.iter().enumerate() {
            let (n, omega_child, _) = self.tree.split_info(s);
            let w = match family {
                _ if n > 2 => None,
                PriorFamily::Uniform | PriorFamily::Dirichlet { .. } => Some(0.5),
                PriorFamily::Beta { a, b } => Some(
                    Beta::new(*a, *b)
                        .map_err(|e| Error::Specification(e.to_string()))?
                        .inverse_cdf(0.5),
                ),
                PriorFamily::Pc0 { lambda } => Some(pc0_simplified_quantile(0.5, *lambda)?),
                PriorFamily::Pc0Exact(e) => Some(pc0_simplified_quantile(0.5, e.lambda)?),
                _ => unreachable!(),
            };
            proportions.push(match w {
                Some(w) => binary_props(w.clamp(1e-9, 1.0 - 1e-9), omega_child),
                None => vec![1.0 / n as f64; n],
            });
        }
        Ok(HdParams { total, proportions })
    }
}

fn binary_props(w: f64, omega_child: usize) -> Vec<f64> {
    let mut v = vec![1.0 - w; 2];
    v[omega_child] = w;
    v
}

fn dirichlet_draw<R: Rng + ?Sized>(q: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let g = Gamma::new(q, 1.0).unwrap();
    let draws: Vec<f64> = (0..n).map(|_| g.sample(rng)).collect();
    let s: f64 = draws.iter().sum();
    draws.iter().map(|x| x / s).collect()
}

/// Sum of node-wise log prior densities.
pub fn log_prior(tree: &DecompTree, priors: &[PriorSpec], p: &HdParams) -> Result<f64> {
    PriorSet::new(tree, priors)?.log_density(p)
}

/// Default prior set for survey-style trees: Jeffreys on `V`, Uniform on the two
/// top-level binary splits, `Dirichlet(q)` on the covariate split and
/// `PC0(λ)` on every flexibility split.
pub fn default_priors(tree: &DecompTree, q: f64, lambda: f64) -> Vec<PriorSpec> {
    let mut out = vec![PriorSpec::new("V", PriorFamily::Jeffreys)];
    for (s, name) in tree.split_names().into_iter().enumerate() {
        let (n, _, flexibility) = tree.split_info(s);
        let family = if flexibility && n == 2 {
            PriorFamily::Pc0 { lambda }
        } else if n > 2 {
            PriorFamily::Dirichlet { q }
        } else {
            PriorFamily::Uniform
        };
        out.push(PriorSpec::new(name, family));
    }
    out
}

/// One-dimensional prior marginal used for prior-only sampling checks:
/// `V` itself, or the designated share of a split (the first share for
/// multi-way splits).
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    pub parameter: String,
    pub family: &'static str,
    /// `None` for `V`.
    pub split: Option<usize>,
    share: usize,
    dist: MarginalDist,
}

#[derive(Debug, Clone, PartialEq)]
enum MarginalDist {
    LogUniform,
    RootExp(f64),
    Beta(f64, f64),
    Pc0(f64),
}

impl Marginal {
    pub fn value(&self, p: &HdParams) -> f64 {
        match self.split {
            None => p.total,
            Some(s) => p.proportions[s][self.share],
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match &self.dist {
            MarginalDist::LogUniform => {
                if x <= 0.0 {
                    0.0
                } else {
                    ((x.ln() + JEFFREYS_LOG_BOUND) / (2.0 * JEFFREYS_LOG_BOUND)).clamp(0.0, 1.0)
                }
            }
            MarginalDist::RootExp(l) => 1.0 - (-l * x.max(0.0).sqrt()).exp(),
            MarginalDist::Beta(a, b) => Beta::new(*a, *b).map_or(f64::NAN, |d| d.cdf(x.clamp(0.0, 1.0))),
            MarginalDist::Pc0(l) => pc0_simplified_cdf(x.clamp(0.0, 1.0), *l).unwrap_or(f64::NAN),
        }
    }

    pub fn median(&self) -> f64 {
        match &self.dist {
            MarginalDist::LogUniform => 1.0,
            MarginalDist::RootExp(l) => (std::f64::consts::LN_2 / l).powi(2),
            MarginalDist::Beta(a, b) => Beta::new(*a, *b).map_or(f64::NAN, |d| d.inverse_cdf(0.5)),
            MarginalDist::Pc0(l) => pc0_simplified_quantile(0.5, *l).unwrap_or(f64::NAN),
        }
    }
}

impl PriorSet {
    /// Analytic marginals for every node whose family admits one.
    pub fn marginals(&self) -> Vec<Marginal> {
        let mut out = Vec::new();
        let dist = match &self.total {
            PriorFamily::Jeffreys => Some(MarginalDist::LogUniform),
            PriorFamily::PcVariance { lambda } => Some(MarginalDist::RootExp(*lambda)),
            _ => None,
        };
        if let Some(dist) = dist {
            out.push(Marginal {
                parameter: "V".into(),
                family: self.total.name(),
                split: None,
                share: 0,
                dist,
            });
        }
        for (s, (name, family)) in self.tree.split_names().into_iter().zip(&self.splits).enumerate() {
            let (n, omega_child, _) = self.tree.split_info(s);
            let share = if n == 2 { omega_child } else { 0 };
            let rest = (n - 1) as f64;
            let dist = match family {
                PriorFamily::Uniform => MarginalDist::Beta(1.0, rest),
                PriorFamily::Dirichlet { q } => MarginalDist::Beta(*q, rest * q),
                PriorFamily::Beta { a, b } => MarginalDist::Beta(*a, *b),
                PriorFamily::Pc0 { lambda } => MarginalDist::Pc0(*lambda),
                _ => continue,
            };
            let children = self.tree.split_children(s);
            out.push(Marginal {
                parameter: format!("{name}[{}]", children[share]),
                family: family.name(),
                split: Some(s),
                share,
                dist,
            });
        }
        out
    }
}

#[cfg(test)]
fn expit_interval(p: usize) -> (f64, f64) {
    let c = logit(1.0 / p as f64);
    let f = crate::numeric::logistic;
    (f(c - 3f64.ln()), f(c + 3f64.ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::ks_test;
    use crate::tree::{TreeSpec, EffectTag, Side, build_default_tree};
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pc_variance_lambda_examples() {
        let l = pc_variance_lambda(3.0, 0.05).unwrap();
        assert!((l - 0.998577).abs() < 1e-6);
        assert!(((-l * 3.0).exp() - 0.05).abs() < 1e-12);
        assert!((pc_variance_lambda(1.0, (-1f64).exp()).unwrap() - 1.0).abs() < 1e-15);
        assert!(pc_variance_lambda(0.0, 0.5).is_err());
        assert!(pc_variance_lambda(1.0, 1.0).is_err());
    }

    #[test]
    fn pc0_median_for_lambda_one_tenth() {
        let m = pc0_simplified_quantile(0.5, 0.1).unwrap();
        assert!((m - 0.238).abs() < 1e-3, "median {m}");
        assert!((pc0_simplified_cdf(m, 0.1).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn pc0_cdf_endpoints_and_normalization() {
        for &lambda in &[0.01, 0.1, 1.0, 10.0] {
            assert_eq!(pc0_simplified_cdf(1.0, lambda).unwrap(), 1.0);
            // ω = s² removes the endpoint singularity.
            let f = |s: f64| {
                if s <= 0.0 {
                    lambda / (-(-lambda).exp_m1())
                } else {
                    pc0_simplified_logpdf(s * s, lambda).unwrap().exp() * 2.0 * s
                }
            };
            let total = integrate(&f, 0.0, 1.0 - 1e-15, 1e-12);
            assert!((total - 1.0).abs() < 1e-8, "lambda {lambda}: {total}");
        }
        assert!(pc0_simplified_logpdf(0.0, 0.1).is_err());
        assert!(pc0_simplified_logpdf(0.5, 0.0).is_err());
    }

    #[test]
    fn pc0_inverse_cdf_draws_pass_ks() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| pc0_simplified_quantile(rng.random::<f64>(), 0.1).unwrap())
            .collect();
        let ks = ks_test(&draws, |w| pc0_simplified_cdf(w, 0.1).unwrap()).unwrap();
        assert!(ks.p_value > 0.01, "{ks:?}");
    }

    #[test]
    fn pc0_calibration_cases() {
        let u = pc0_simplified_quantile(0.5, 0.1).unwrap();
        assert!((pc0_calibrate(u, 0.5).unwrap() - 0.1).abs() < 1e-8);
        assert!(matches!(pc0_calibrate(0.25, 0.5), Err(Error::Boundary(_))));
        match pc0_calibrate(0.3, 0.5) {
            Err(Error::Infeasible { bound, .. }) => assert!((bound - 0.3f64.sqrt()).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
        let l = pc0_calibrate(0.04, 0.5).unwrap();
        assert!((pc0_simplified_cdf(0.04, l).unwrap() - 0.5).abs() < 1e-10);
        assert!(pc0_calibrate(0.2, 0.5).unwrap() > 0.0);
        // λ → 0 pushes the median to 1/4.
        assert!((pc0_simplified_quantile(0.5, 1e-7).unwrap() - 0.25).abs() < 1e-3);
    }

    #[test]
    fn pc0_calibrate_and_quantile_are_inverse() {
        for &lambda in &[0.05, 0.1, 0.7, 3.0, 12.0] {
            for &alpha in &[0.3, 0.5, 0.9] {
                let u = pc0_simplified_quantile(alpha, lambda).unwrap();
                let back = pc0_calibrate(u, alpha).unwrap();
                assert!((back - lambda).abs() < 1e-8 * lambda.max(1.0), "{lambda} {alpha}: {back}");
            }
        }
    }

    fn beta_mc(q: f64, p: usize, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta = rand_distr::Beta::new(q, (p - 1) as f64 * q).unwrap();
        let (lo, hi) = expit_interval(p);
        (0..n)
            .filter(|_| {
                let w = beta.sample(&mut rng);
                w > lo && w < hi
            })
            .count() as f64
            / n as f64
    }

    #[test]
    fn dirichlet_calibration_matches_monte_carlo() {
        for p in [2usize, 6] {
            let q = dirichlet_q_calibrate(p).unwrap();
            assert!(q > 0.0);
            let prob = dirichlet_marginal_interval_prob(q, p).unwrap();
            assert!((prob - 0.5).abs() < 1e-10);
            // Closed-form oracle through the regularized incomplete beta.
            let (lo, hi) = expit_interval(p);
            let b = Beta::new(q, (p - 1) as f64 * q).unwrap();
            assert!((b.cdf(hi) - b.cdf(lo) - 0.5).abs() < 1e-8);
            assert!((beta_mc(q, p, 1_000_000, p as u64) - 0.5).abs() < 0.01);
        }
        assert!(dirichlet_q_calibrate(1).is_err());
    }

    #[test]
    fn sum_of_ranks_examples() {
        let r = sum_of_ranks_check(1, 1000, 20, 1000, 1000, None).unwrap();
        assert!(r.condition_holds && r.conclusive);
        let r = sum_of_ranks_check(2, 9, 1, 9, 9, None).unwrap();
        assert!(r.condition_holds);
        let r = sum_of_ranks_check(8, 9, 16, 9, 9, None).unwrap();
        assert!(!r.condition_holds && !r.conclusive);
        assert!(sum_of_ranks_check(1, 2, 1, 2, 9, None).is_err());
    }

    #[test]
    fn sum_of_ranks_uses_eigen_counts() {
        let mut s0 = DMatrix::zeros(4, 4);
        s0[(0, 0)] = 1.0;
        let mut s1 = DMatrix::zeros(4, 4);
        s1[(1, 1)] = 2.0;
        // Bounds say 4 + 4 > 4, actual ranks 1 + 1.
        let r = sum_of_ranks_check(4, 4, 4, 4, 4, Some((&s0, &s1))).unwrap();
        assert_eq!((r.r0, r.r1), (Some(1), Some(1)));
        assert!(r.condition_holds && r.conclusive);
        assert!(sum_of_ranks_check(4, 4, 4, 4, 4, Some((&s0, &DMatrix::zeros(3, 3)))).is_err());
    }

    #[test]
    fn kld_zero_at_base() {
        let s0 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.0]));
        let s1 = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 3.0]));
        assert!(kld_distance(0.3, 0.3, &s0, &s1).unwrap().abs() < 1e-7);
    }

    #[test]
    fn kld_disjoint_diagonal_closed_form() {
        let s0 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 0.2, 0.0, 0.0, 0.0]));
        let s1 = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 4.0, 0.7, 1.1]));
        let (r0, r1) = (2.0, 3.0);
        for &(w, w0) in &[(0.3f64, 0.1f64), (0.8, 0.05), (0.2, 0.6)] {
            let closed = r0 * (1.0 - w) / (1.0 - w0) + r1 * w / w0
                - r0
                - r1
                - r0 * ((1.0 - w) / (1.0 - w0)).ln()
                - r1 * (w / w0).ln();
            let d2 = kld_distance_sq(w, w0, &s0, &s1).unwrap();
            assert!((d2 - closed).abs() < 1e-10 * closed.max(1.0), "{d2} vs {closed}");
        }
    }

    fn linear_vs_nonlinear(n: usize, k1: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        use crate::bases::{BSpline1d, BasisSpec};
        use crate::standardize::{split_pspline, CovariateDistribution};
        let values: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let dist = CovariateDistribution::UniformDiscrete { values };
        let basis = BasisSpec::BSpline1d(BSpline1d::new(k1, 0.0, 1.0).unwrap());
        let (lin, nl) = split_pspline("x", &basis, &dist).unwrap();
        let sigma = |e: &crate::standardize::StandardizedEffect| {
            let d = e.quadrature_design();
            d * e.covariance() * d.transpose()
        };
        (sigma(&lin), sigma(&nl))
    }

    #[test]
    fn kld_limit_matches_rank_times_omega() {
        let (s0, s1) = linear_vs_nonlinear(50, 5);
        let r1 = PsdEigen::new(&s1).unwrap().rank() as f64;
        for &w in &[0.1, 0.5, 0.9] {
            let d2 = kld_distance_sq(w, 1e-6, &s0, &s1).unwrap();
            let rel = (d2 * 1e-6 - r1 * w).abs() / (r1 * w);
            assert!(rel < 0.01, "omega {w}: rel {rel}");
        }
    }

    #[test]
    fn kld_is_continuous_on_interior_grid() {
        let (s0, s1) = linear_vs_nonlinear(30, 6);
        let grid: Vec<f64> = (1..200).map(|i| i as f64 / 200.0).collect();
        let d: Vec<f64> = grid.iter().map(|&w| kld_distance(w, 0.3, &s0, &s1).unwrap()).collect();
        for pair in d.windows(2) {
            assert!((pair[1] - pair[0]).abs() < 0.5, "{pair:?}");
        }
    }

    #[test]
    fn exact_pc0_agrees_with_simplified_form() {
        let (s0, s1) = linear_vs_nonlinear(50, 5);
        let exact = Pc0Exact::new(0.1, 1e-6, s0, s1).unwrap();
        for &w in &[0.05, 0.2, 0.5, 0.8] {
            let d = exact.normalized_distance(w).unwrap();
            assert!((d - w.sqrt()).abs() / w.sqrt() < 0.01);
            let a = exact.log_pdf(w).unwrap();
            let b = pc0_simplified_logpdf(w, 0.1).unwrap();
            assert!((a - b).abs() < 0.02, "omega {w}: {a} vs {b}");
        }
    }

    fn two_leaf() -> DecompTree {
        DecompTree::from_spec(&TreeSpec::Split {
            split: "w".into(),
            children: vec![TreeSpec::Leaf { leaf: "a".into() }, TreeSpec::Leaf { leaf: "b".into() }],
            omega_child: 1,
            flexibility: true,
        })
        .unwrap()
    }

    #[test]
    fn uniform_binary_prior_is_flat() {
        let tree = two_leaf();
        let specs = vec![PriorSpec::new("V", PriorFamily::Jeffreys), PriorSpec::new("w", PriorFamily::Uniform)];
        let lp = |w: f64| {
            log_prior(
                &tree,
                &specs,
                &HdParams {
                    total: 1.0,
                    proportions: vec![vec![1.0 - w, w]],
                },
            )
            .unwrap()
        };
        assert!((lp(0.1) - lp(0.7)).abs() < 1e-15);
        assert!((lp(0.5) + 60f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn prior_set_validation() {
        let tree = two_leaf();
        let jeff = PriorSpec::new("V", PriorFamily::Jeffreys);
        assert!(PriorSet::new(&tree, std::slice::from_ref(&jeff)).is_err());
        assert!(PriorSet::new(&tree, &[jeff.clone(), PriorSpec::new("w", PriorFamily::Jeffreys)]).is_err());
        assert!(PriorSet::new(&tree, &[jeff.clone(), PriorSpec::new("zz", PriorFamily::Uniform)]).is_err());
        assert!(PriorSet::new(&tree, &[jeff.clone(), PriorSpec::new("w", PriorFamily::Pc0 { lambda: -1.0 })]).is_err());
        assert!(PriorSet::new(&tree, &[PriorSpec::new("V", PriorFamily::Uniform), PriorSpec::new("w", PriorFamily::Uniform)]).is_err());
    }

    fn survey_priors() -> (DecompTree, PriorSet) {
        let mut tags = Vec::new();
        for p in 1..=5 {
            for (suffix, flex) in [("lin", 0), ("nl", 1)] {
                tags.push(EffectTag {
                    id: format!("x{p}_{suffix}"),
                    side: Side::Abiotic,
                    interaction: false,
                    group: format!("x{p}"),
                    flexibility: flex,
                });
            }
        }
        for (id, side) in [("vessel", Side::Abiotic), ("space", Side::Biotic), ("time", Side::Biotic)] {
            tags.push(EffectTag {
                id: id.into(),
                side,
                interaction: false,
                group: id.into(),
                flexibility: 0,
            });
        }
        let tree = build_default_tree(&tags).unwrap();
        let set = PriorSet::new(&tree, &default_priors(&tree, 0.5, 0.1)).unwrap();
        (tree, set)
    }

    #[test]
    fn survey_prior_value() {
        let (tree, set) = survey_priors();
        assert_eq!(set.split_family(tree.split_index("omega_X").unwrap()), &PriorFamily::Dirichlet { q: 0.5 });
        assert_eq!(set.split_family(tree.split_index("omega_S").unwrap()), &PriorFamily::Uniform);
        let p = set.medians().unwrap();
        let mut expected = -60f64.ln();
        expected += ln_gamma(3.0) - 6.0 * ln_gamma(0.5) - 0.5 * 6.0 * (1.0f64 / 6.0).ln();
        let m = pc0_simplified_quantile(0.5, 0.1).unwrap();
        expected += 5.0 * pc0_simplified_logpdf(m, 0.1).unwrap();
        assert!((set.log_density(&p).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn unconstrained_density_integrates_to_one() {
        let tree = two_leaf();
        let set = PriorSet::new(
            &tree,
            &[
                PriorSpec::new("V", PriorFamily::PcVariance { lambda: 1.0 }),
                PriorSpec::new("w", PriorFamily::Beta { a: 2.0, b: 3.0 }),
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scale = 3.0;
        let n = 200_000;
        let normal = rand_distr::Normal::new(0.0, scale).unwrap();
        let log_q = |y: f64| -0.5 * (y / scale).powi(2) - (scale * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let mut total = 0.0;
        for _ in 0..n {
            let y = DVector::from_vec(vec![normal.sample(&mut rng), normal.sample(&mut rng)]);
            let lp = set.log_density_unconstrained(&y).unwrap();
            total += (lp - log_q(y[0]) - log_q(y[1])).exp();
        }
        let est = total / n as f64;
        assert!((est - 1.0).abs() < 0.02, "{est}");
    }

    #[test]
    fn prior_draws_match_medians() {
        let (_, set) = survey_priors();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws: Vec<HdParams> = (0..4000).map(|_| set.sample(&mut rng).unwrap()).collect();
        let s = set.tree().split_index("omega_N_x1").unwrap();
        let omegas: Vec<f64> = draws.iter().map(|d| d.proportions[s][1]).collect();
        let ks = ks_test(&omegas, |w| pc0_simplified_cdf(w, 0.1).unwrap()).unwrap();
        assert!(ks.p_value > 0.01);
        let medians = set.medians().unwrap();
        assert!((medians.proportions[s][1] - 0.2376).abs() < 1e-3);
    }

    #[test]
    fn marginals_match_prior_draws() {
        let tree = DecompTree::from_spec(&crate::tree::TreeSpec::Split {
            split: "top".into(),
            children: vec![
                crate::tree::TreeSpec::Leaf { leaf: "a".into() },
                crate::tree::TreeSpec::Split {
                    split: "multi".into(),
                    children: ["b", "c", "d"].iter().map(|l| crate::tree::TreeSpec::Leaf { leaf: l.to_string() }).collect(),
                    omega_child: 0,
                    flexibility: false,
                },
            ],
            omega_child: 1,
            flexibility: false,
        })
        .unwrap();
        let specs = vec![
            PriorSpec::new("V", PriorFamily::PcVariance { lambda: 2.0 }),
            PriorSpec::new("top", PriorFamily::Pc0 { lambda: 0.1 }),
            PriorSpec::new("multi", PriorFamily::Dirichlet { q: 0.7 }),
        ];
        let set = PriorSet::new(&tree, &specs).unwrap();
        let marginals = set.marginals();
        assert_eq!(marginals.len(), 3);
        assert_eq!(marginals[1].parameter, "top[multi]");
        assert!((marginals[1].median() - 0.2376).abs() < 1e-3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<HdParams> = (0..4000).map(|_| set.sample(&mut rng).unwrap()).collect();
        for m in &marginals {
            let xs: Vec<f64> = draws.iter().map(|p| m.value(p)).collect();
            let ks = crate::stats::ks_test(&xs, |x| m.cdf(x)).unwrap();
            assert!(ks.p_value > 0.01, "{}: {ks:?}", m.parameter);
        }
    }
}
