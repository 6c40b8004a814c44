//! Adaptive Metropolis-within-Gibbs for the Bernoulli-logit model, with
//! prediction and predictive metrics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gmrf::CoefficientBlock;
use crate::model::{Assembled, Dataset, Model};
use crate::numeric::{log1pexp, logistic, logit};
use crate::stats::split_rhat;
use crate::tree::HdParams;

/// Standard deviation of the Gaussian prior on the intercept.
pub const INTERCEPT_PRIOR_SD: f64 = 10.0;

/// Standard deviation of the start-point jitter for chains after the first.
pub const CHAIN_JITTER_SD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcSettings {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Iterations between refreshes of the adapted proposal covariances.
    pub adapt_window: usize,
    /// Target acceptance of the multivariate hyperparameter moves.
    pub target_accept: f64,
    pub seed: u64,
    /// Sample from the prior (likelihood weight 0).
    pub prior_only: bool,
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            chains: 4,
            iterations: 6000,
            burn_in: 3000,
            thin: 1,
            adapt_window: 50,
            target_accept: 0.234,
            seed: 1,
            prior_only: false,
        }
    }
}

impl McmcSettings {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Validation("chains must be at least 1".into()));
        }
        if self.iterations <= self.burn_in {
            return Err(Error::Validation(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.thin == 0 || self.adapt_window == 0 {
            return Err(Error::Validation("thin and adapt_window must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Validation("target_accept must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn retained_per_chain(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

/// A point in `(unconstrained hyperparameters, μ, coefficients)` space.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub hd: DVector<f64>,
    pub mu: f64,
    /// Coefficients `u_e` in effect order.
    pub coefficients: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub chain: usize,
    pub iteration: usize,
    /// `None` for intercept-only models.
    pub hd: Option<HdParams>,
    pub hd_coords: DVector<f64>,
    pub mu: f64,
    pub coefficients: Vec<CoefficientBlock>,
}

impl PosteriorSample {
    /// Linear predictor at precomputed designs (effect order).
    pub fn eta(&self, designs: &[DMatrix<f64>], n: usize) -> DVector<f64> {
        let mut eta = DVector::from_element(n, self.mu);
        for (d, c) in designs.iter().zip(&self.coefficients) {
            eta += d * &c.values;
        }
        eta
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub samples: Vec<PosteriorSample>,
    /// Split-R̂ per unconstrained hyperparameter and for `μ`.
    pub rhat: Vec<(String, f64)>,
    /// Post-burn-in acceptance rate per move, averaged over chains.
    pub acceptance: Vec<(String, f64)>,
    pub coord_names: Vec<String>,
}

impl FitResult {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().map(|(_, r)| *r).fold(f64::NAN, f64::max)
    }

    pub fn chain_samples(&self, chain: usize) -> impl Iterator<Item = &PosteriorSample> {
        self.samples.iter().filter(move |s| s.chain == chain)
    }
}

fn bernoulli_loglik(y: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    y.iter().zip(eta.iter()).map(|(&yi, &e)| yi * e - log1pexp(e)).sum()
}

fn intercept_logprior(mu: f64) -> f64 {
    let s = INTERCEPT_PRIOR_SD;
    -0.5 * (mu / s).powi(2) - (s * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

/// Unnormalized log posterior at `state`: Bernoulli log-likelihood (times
/// `likelihood_weight`), restricted Gaussian densities of the coefficient
/// blocks given their variances, intercept prior, and the hyperprior in
/// unconstrained coordinates including the Jacobian.
pub fn log_posterior(asm: &Assembled, state: &State, likelihood_weight: f64) -> Result<f64> {
    let model = &asm.model;
    if state.coefficients.len() != model.effects.len() || state.hd.len() != model.n_hyper() {
        return Err(Error::Dimension("state does not match the model".into()));
    }
    let mut lp = if model.intercept {
        intercept_logprior(state.mu)
    } else if state.mu != 0.0 {
        return Err(Error::Validation("intercept is disabled but mu is non-zero".into()));
    } else {
        0.0
    };
    let mut eta = DVector::from_element(asm.n(), state.mu);
    if let Some(priors) = &model.priors {
        lp += priors.log_density_unconstrained(&state.hd)?;
        let (p, _) = priors.tree().from_unconstrained(&state.hd)?;
        let sigma2 = model.effect_variances(&p)?;
        for (e, effect) in model.effects.iter().enumerate() {
            let u = &state.coefficients[e];
            lp += restricted_gaussian_logpdf(effect.effect.factor(), &effect.effect.constraints, u, sigma2[e])?;
            eta += &asm.designs[e] * u;
        }
    }
    if likelihood_weight != 0.0 {
        lp += likelihood_weight * bernoulli_loglik(&asm.y, &eta);
    }
    if !lp.is_finite() {
        return Err(Error::Numerical(format!("log posterior is {lp}")));
    }
    Ok(lp)
}

/// Density of `u = σ L z`, `z ~ N(0, I_r)`, on the range of `L`.
fn restricted_gaussian_logpdf(l: &DMatrix<f64>, a: &DMatrix<f64>, u: &DVector<f64>, sigma2: f64) -> Result<f64> {
    if u.len() != l.nrows() {
        return Err(Error::Dimension("coefficient block has the wrong length".into()));
    }
    let r = l.ncols();
    let norms: Vec<f64> = l.column_iter().map(|c| c.norm_squared()).collect();
    let z = DVector::from_fn(r, |j, _| l.column(j).dot(u) / norms[j]);
    let residual = (u - l * &z).amax();
    let scale = u.amax().max(1.0);
    if residual > 1e-8 * scale || (a.ncols() > 0 && (a.transpose() * u).amax() > 1e-8 * scale) {
        return Err(Error::Constraint("coefficients leave the support of their prior".into()));
    }
    let log_pdet: f64 = norms.iter().map(|v| v.ln()).sum();
    let quad = z.norm_squared() / sigma2;
    Ok(-0.5 * r as f64 * (2.0 * std::f64::consts::PI * sigma2).ln() - 0.5 * log_pdet - 0.5 * quad)
}

/// Random-walk proposal with Robbins–Monro scale and empirical covariance
/// adaptation during burn-in.
#[derive(Debug, Clone)]
struct Adapter {
    dim: usize,
    log_scale: f64,
    target: f64,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
    seen: usize,
    chol: DMatrix<f64>,
    window: usize,
    adapted_cov: bool,
}

impl Adapter {
    fn new(dim: usize, init_sd: f64, target: f64, window: usize) -> Self {
        Adapter {
            dim,
            log_scale: init_sd.ln(),
            target,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
            seen: 0,
            chol: DMatrix::identity(dim, dim),
            window,
            adapted_cov: false,
        }
    }

    fn propose<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let eps = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.chol * eps * self.log_scale.exp()
    }

    fn adapt(&mut self, t: usize, accept_prob: f64, x: &DVector<f64>) {
        let gamma = (t as f64 + 1.0).powf(-0.6);
        self.log_scale = (self.log_scale + gamma * (accept_prob - self.target)).clamp(-20.0, 5.0);
        self.seen += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.seen as f64;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
        if self.seen >= (2 * self.dim).max(100) && t.is_multiple_of(self.window) {
            let mut cov = &self.m2 / (self.seen - 1) as f64;
            let ridge = 1e-6 * (cov.trace() / self.dim as f64) + 1e-12;
            for i in 0..self.dim {
                cov[(i, i)] += ridge;
            }
            if let Some(c) = cov.cholesky() {
                self.chol = c.l();
                if !self.adapted_cov {
                    self.adapted_cov = true;
                    self.log_scale = (2.38 / (self.dim as f64).sqrt()).ln();
                }
            }
        }
    }
}

fn block_target(dim: usize, multivariate: f64) -> f64 {
    if dim == 1 {
        0.44
    } else {
        multivariate
    }
}

#[derive(Debug, Clone, Default)]
struct Counter {
    accepted: usize,
    proposed: usize,
}

impl Counter {
    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += usize::from(accepted);
    }

    fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

struct Chain<'a> {
    asm: &'a Assembled,
    weight: f64,
    y: DVector<f64>,
    sigma: Vec<f64>,
    log_prior_hd: f64,
    mu: f64,
    z: Vec<DVector<f64>>,
    c: Vec<DVector<f64>>,
    eta: DVector<f64>,
    loglik: f64,
}

impl<'a> Chain<'a> {
    fn sigma_at(&self, y: &DVector<f64>) -> Option<(Vec<f64>, f64)> {
        let priors = self.asm.model.priors.as_ref()?;
        let lp = priors.log_density_unconstrained(y).ok()?;
        if !lp.is_finite() {
            return None;
        }
        let (p, _) = priors.tree().from_unconstrained(y).ok()?;
        let s2 = self.asm.model.effect_variances(&p).ok()?;
        Some((s2.iter().map(|v| v.sqrt()).collect(), lp))
    }

    fn eta_with(&self, mu: f64, sigma: &[f64]) -> DVector<f64> {
        let mut eta = DVector::from_element(self.asm.n(), mu);
        for (s, c) in sigma.iter().zip(&self.c) {
            eta.axpy(*s, c, 1.0);
        }
        eta
    }

    fn loglik(&self, eta: &DVector<f64>) -> f64 {
        if self.weight == 0.0 {
            0.0
        } else {
            self.weight * bernoulli_loglik(&self.asm.y, eta)
        }
    }
}

fn accept<R: Rng>(log_ratio: f64, rng: &mut R) -> (bool, f64) {
    let prob = if log_ratio.is_nan() { 0.0 } else { log_ratio.min(0.0).exp() };
    (rng.random::<f64>() < prob, prob)
}

struct ChainOutput {
    samples: Vec<PosteriorSample>,
    counters: Vec<(String, Counter)>,
}

fn initial_hd(asm: &Assembled) -> Result<DVector<f64>> {
    match &asm.model.priors {
        Some(p) => p.tree().to_unconstrained(&p.medians()?),
        None => Ok(DVector::zeros(0)),
    }
}

fn run_chain(asm: &Assembled, settings: &McmcSettings, chain: usize) -> Result<ChainOutput> {
    let model = &asm.model;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(chain as u64);
    let weight = if settings.prior_only { 0.0 } else { 1.0 };

    let mut y = initial_hd(asm)?;
    let mut mu = if model.intercept && asm.n() > 0 && !settings.prior_only {
        logit(asm.y.mean().clamp(0.01, 0.99))
    } else {
        0.0
    };
    if chain > 0 {
        for v in y.iter_mut() {
            *v += CHAIN_JITTER_SD * rng.sample::<f64, _>(StandardNormal);
        }
        if model.intercept {
            mu += CHAIN_JITTER_SD * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let ranks: Vec<usize> = model.effects.iter().map(|e| e.effect.rank()).collect();
    let mut st = Chain {
        asm,
        weight,
        y: y.clone(),
        sigma: Vec::new(),
        log_prior_hd: 0.0,
        mu,
        z: ranks.iter().map(|&r| DVector::zeros(r)).collect(),
        c: ranks.iter().map(|_| DVector::zeros(asm.n())).collect(),
        eta: DVector::zeros(asm.n()),
        loglik: 0.0,
    };
    if model.priors.is_some() {
        let (sigma, lp) = st
            .sigma_at(&y)
            .ok_or_else(|| Error::Numerical("initial hyperparameters have zero prior density".into()))?;
        st.sigma = sigma;
        st.log_prior_hd = lp;
    }
    st.eta = st.eta_with(st.mu, &st.sigma);
    st.loglik = st.loglik(&st.eta);
    if !st.loglik.is_finite() {
        return Err(Error::Numerical("non-finite initial log-likelihood".into()));
    }

    let d = model.n_hyper();
    let window = settings.adapt_window;
    let hyper_target = block_target(d, settings.target_accept);
    let mut nc_adapt = Adapter::new(d, 0.5 / (d.max(1) as f64).sqrt(), hyper_target, window);
    let mut cp_adapt = nc_adapt.clone();
    let mut z_adapt: Vec<Adapter> = ranks
        .iter()
        .map(|&r| Adapter::new(r, 2.38 / (r as f64).sqrt() * 0.5, block_target(r, 0.234), window))
        .collect();
    let mut mu_adapt = Adapter::new(1, 0.1, 0.44, window);

    let mut counters: Vec<(String, Counter)> = Vec::new();
    if d > 0 {
        counters.push(("hyper_noncentered".into(), Counter::default()));
        counters.push(("hyper_centered".into(), Counter::default()));
    }
    if model.intercept {
        counters.push(("mu".into(), Counter::default()));
    }
    for e in &model.effects {
        counters.push((format!("coef_{}", e.id()), Counter::default()));
    }

    let mut samples = Vec::with_capacity(settings.retained_per_chain());
    for t in 0..settings.iterations {
        let adapting = t < settings.burn_in;
        let mut k = 0;

        if d > 0 {
            // Hyperparameters with whitened coefficients held fixed.
            let prop = &st.y + nc_adapt.propose(&mut rng);
            let (ok, prob) = match st.sigma_at(&prop) {
                Some((sigma, lp)) => {
                    let eta = st.eta_with(st.mu, &sigma);
                    let ll = st.loglik(&eta);
                    let (ok, prob) = accept(ll - st.loglik + lp - st.log_prior_hd, &mut rng);
                    if ok {
                        st.y = prop;
                        st.sigma = sigma;
                        st.log_prior_hd = lp;
                        st.eta = eta;
                        st.loglik = ll;
                    }
                    (ok, prob)
                }
                None => (false, 0.0),
            };
            if adapting {
                nc_adapt.adapt(t, prob, &st.y);
            } else {
                counters[k].1.record(ok);
            }
            k += 1;

            // Hyperparameters with coefficients u = σ L z held fixed.
            let prop = &st.y + cp_adapt.propose(&mut rng);
            let (ok, prob) = match st.sigma_at(&prop) {
                Some((sigma, lp)) => {
                    let mut log_ratio = lp - st.log_prior_hd;
                    for e in 0..sigma.len() {
                        let ratio = st.sigma[e] / sigma[e];
                        let zz = st.z[e].norm_squared();
                        log_ratio += ranks[e] as f64 * ratio.ln() - 0.5 * zz * (ratio * ratio - 1.0);
                    }
                    let (ok, prob) = accept(log_ratio, &mut rng);
                    if ok {
                        for e in 0..sigma.len() {
                            let ratio = st.sigma[e] / sigma[e];
                            st.z[e] *= ratio;
                            st.c[e] *= ratio;
                        }
                        st.y = prop;
                        st.sigma = sigma;
                        st.log_prior_hd = lp;
                    }
                    (ok, prob)
                }
                None => (false, 0.0),
            };
            if adapting {
                cp_adapt.adapt(t, prob, &st.y);
            } else {
                counters[k].1.record(ok);
            }
            k += 1;
        }

        if model.intercept {
            let prop = st.mu + mu_adapt.propose(&mut rng)[0];
            let mut eta = st.eta.clone();
            eta.add_scalar_mut(prop - st.mu);
            let ll = st.loglik(&eta);
            let (ok, prob) = accept(ll - st.loglik + intercept_logprior(prop) - intercept_logprior(st.mu), &mut rng);
            if ok {
                st.mu = prop;
                st.eta = eta;
                st.loglik = ll;
            }
            if adapting {
                mu_adapt.adapt(t, prob, &DVector::from_element(1, st.mu));
            } else {
                counters[k].1.record(ok);
            }
            k += 1;
        }

        for e in 0..model.effects.len() {
            let prop = &st.z[e] + z_adapt[e].propose(&mut rng);
            let c_new = &asm.whitened[e] * &prop;
            let mut eta = st.eta.clone();
            eta.axpy(st.sigma[e], &(&c_new - &st.c[e]), 1.0);
            let ll = st.loglik(&eta);
            let log_ratio = ll - st.loglik - 0.5 * (prop.norm_squared() - st.z[e].norm_squared());
            let (ok, prob) = accept(log_ratio, &mut rng);
            if ok {
                st.z[e] = prop;
                st.c[e] = c_new;
                st.eta = eta;
                st.loglik = ll;
            }
            if adapting {
                z_adapt[e].adapt(t, prob, &st.z[e]);
            } else {
                counters[k].1.record(ok);
            }
            k += 1;
        }

        if !adapting && (t - settings.burn_in).is_multiple_of(settings.thin) {
            samples.push(snapshot(&st, chain, t)?);
        }
        // Guard against drift of the cached predictor.
        if t % 500 == 499 {
            st.eta = st.eta_with(st.mu, &st.sigma);
            st.loglik = st.loglik(&st.eta);
        }
    }

    for (name, c) in &counters {
        if c.proposed >= 50 && (c.accepted == 0 || c.accepted == c.proposed) {
            return Err(Error::Diagnostic(format!(
                "chain {chain}: move '{name}' has acceptance rate {} after adaptation",
                c.rate()
            )));
        }
    }
    Ok(ChainOutput { samples, counters })
}

fn snapshot(st: &Chain, chain: usize, iteration: usize) -> Result<PosteriorSample> {
    let model = &st.asm.model;
    let hd = match &model.priors {
        Some(p) => Some(p.tree().from_unconstrained(&st.y)?.0),
        None => None,
    };
    let coefficients = model
        .effects
        .iter()
        .enumerate()
        .map(|(e, eff)| eff.effect.coefficients_from_whitened(st.sigma[e] * st.sigma[e], &st.z[e]))
        .collect();
    Ok(PosteriorSample {
        chain,
        iteration,
        hd,
        hd_coords: st.y.clone(),
        mu: st.mu,
        coefficients,
    })
}

/// Runs all chains (in parallel under `Exec::Parallel`) and merges their
/// retained samples in chain order.
pub fn fit(asm: &Assembled, settings: &McmcSettings, exec: Exec) -> Result<FitResult> {
    settings.validate()?;
    let outputs = exec.map(settings.chains, |c| run_chain(asm, settings, c));
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;

    let mut coord_names = asm.model.hyper_names();
    if asm.model.intercept {
        coord_names.push("mu".into());
    }
    let trace = |out: &ChainOutput, j: usize| -> Vec<f64> {
        out.samples
            .iter()
            .map(|s| if j < s.hd_coords.len() { s.hd_coords[j] } else { s.mu })
            .collect()
    };
    let rhat = if settings.retained_per_chain() >= 4 {
        (0..coord_names.len())
            .map(|j| {
                let chains: Vec<Vec<f64>> = outputs.iter().map(|o| trace(o, j)).collect();
                Ok((coord_names[j].clone(), split_rhat(&chains)?))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let acceptance = outputs[0]
        .counters
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            let rate = outputs.iter().map(|o| o.counters[i].1.rate()).sum::<f64>() / outputs.len() as f64;
            (name.clone(), rate)
        })
        .collect();
    Ok(FitResult {
        samples: outputs.into_iter().flat_map(|o| o.samples).collect(),
        rhat,
        acceptance,
        coord_names,
    })
}

/// `p̂ᵢ = logistic(E[ηᵢ])` at `rows` of `data`, averaging over samples.
pub fn predict(model: &Model, samples: &[PosteriorSample], data: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Validation("no posterior samples".into()));
    }
    let ns = samples.len() as f64;
    let mu_bar = samples.iter().map(|s| s.mu).sum::<f64>() / ns;
    let mut eta = DVector::from_element(rows.len(), mu_bar);
    for e in 0..model.effects.len() {
        let design = model.design(e, data, rows)?;
        let mut mean = DVector::zeros(design.ncols());
        for s in samples {
            mean += &s.coefficients[e].values;
        }
        eta += design * (mean / ns);
    }
    Ok(eta.iter().map(|&v| logistic(v)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub loglik: f64,
    pub brier: f64,
    pub tjur_r2: f64,
    pub accuracy: f64,
}

/// Log-likelihood, Brier score, Tjur R² and accuracy at threshold 0.5.
pub fn metrics(p_hat: &[f64], y: &[f64]) -> Result<Metrics> {
    if p_hat.len() != y.len() || y.is_empty() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} observations",
            p_hat.len(),
            y.len()
        )));
    }
    if p_hat.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Validation("predictions must lie in [0, 1]".into()));
    }
    let n = y.len() as f64;
    let mut loglik = 0.0;
    let (mut brier, mut correct) = (0.0, 0usize);
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (&p, &yi) in p_hat.iter().zip(y) {
        if yi == 1.0 {
            loglik += p.ln();
            s1 += p;
            n1 += 1;
        } else if yi == 0.0 {
            loglik += (1.0 - p).ln();
            s0 += p;
            n0 += 1;
        } else {
            return Err(Error::Data(format!("response {yi} is not binary")));
        }
        brier += (p - yi).powi(2);
        correct += usize::from((p > 0.5) == (yi == 1.0));
    }
    if n1 == 0 || n0 == 0 {
        return Err(Error::Undefined("Tjur R2 needs both classes in the test set".into()));
    }
    Ok(Metrics {
        loglik,
        brier: brier / n,
        tjur_r2: s1 / n1 as f64 - s0 / n0 as f64,
        accuracy: correct as f64 / n,
    })
}
