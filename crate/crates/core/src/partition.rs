//! Posterior variance partitioning over finite-population variances, and
//! sensitivity sweeps over the Dirichlet concentration.

use nalgebra::DVector;
use serde::Serialize;

use crate::bases::CovariateValues;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gmrf::CoefficientBlock;
use crate::inference::{fit, McmcSettings, PosteriorSample};
use crate::model::{Assembled, Model};
use crate::priors::PriorFamily;
use crate::standardize::StandardizedEffect;

/// Split whose Dirichlet prior is varied by default.
pub const COVARIATE_SPLIT: &str = "omega_X";

/// Variance of the realized trend over the effect's quadrature grid.
pub fn finite_pop_variance(effect: &StandardizedEffect, coeffs: &CoefficientBlock) -> f64 {
    population_variance(&effect.trend(&coeffs.values))
}

fn population_variance(v: &DVector<f64>) -> f64 {
    let m = v.mean();
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionResult {
    pub groups: Vec<String>,
    /// `s²` per retained sample and group.
    pub s2: Vec<Vec<f64>>,
    /// `φ` per retained sample (samples with zero total are skipped).
    pub phi: Vec<Vec<f64>>,
    pub mean_phi: Vec<f64>,
    pub mean_s2: Vec<f64>,
    pub skipped: usize,
}

/// Effect indices per group, groups in first-appearance order.
pub fn effect_groups(model: &Model) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (e, eff) in model.effects.iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| g == &eff.tag.group) {
            Some((_, v)) => v.push(e),
            None => groups.push((eff.tag.group.clone(), vec![e])),
        }
    }
    groups
}

fn group_trend(model: &Model, members: &[usize], coefficients: &[CoefficientBlock]) -> Option<DVector<f64>> {
    let first = &model.effects[members[0]].effect;
    if members.iter().any(|&e| model.effects[e].effect.dist != first.dist) {
        return None;
    }
    let mut trend = DVector::zeros(first.dist.n_points());
    for &e in members {
        trend += model.effects[e].effect.trend(&coefficients[e].values);
    }
    Some(trend)
}

/// Per-group `s²` of one sample. Effects sharing a covariate grid are
/// summed before taking the variance.
pub fn sample_group_variances(model: &Model, coefficients: &[CoefficientBlock]) -> Vec<f64> {
    effect_groups(model)
        .iter()
        .map(|(_, members)| match group_trend(model, members, coefficients) {
            Some(t) => population_variance(&t),
            None => members
                .iter()
                .map(|&e| finite_pop_variance(&model.effects[e].effect, &coefficients[e]))
                .sum(),
        })
        .collect()
}

/// `φ = s² / Σ s²` for every sample, plus posterior means.
pub fn phi(model: &Model, samples: &[PosteriorSample], exec: Exec) -> Result<PartitionResult> {
    if model.effects.is_empty() {
        return Err(Error::Specification("model has no effects to partition".into()));
    }
    let groups: Vec<String> = effect_groups(model).into_iter().map(|(g, _)| g).collect();
    let s2 = exec.map_slice(samples, |s| sample_group_variances(model, &s.coefficients));
    let mut phi = Vec::with_capacity(s2.len());
    for row in &s2 {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            phi.push(row.iter().map(|v| v / total).collect::<Vec<_>>());
        }
    }
    let skipped = s2.len() - phi.len();
    Ok(PartitionResult {
        mean_phi: column_means(&phi, groups.len()),
        mean_s2: column_means(&s2, groups.len()),
        groups,
        s2,
        phi,
        skipped,
    })
}

fn column_means(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
    if rows.is_empty() {
        return vec![f64::NAN; k];
    }
    (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
}

/// Posterior-mean trend of one group on its quadrature grid, centered to
/// mean zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendCurve {
    pub group: String,
    pub points: CovariateValues,
    pub values: Vec<f64>,
}

pub fn posterior_mean_trends(model: &Model, samples: &[PosteriorSample]) -> Result<Vec<TrendCurve>> {
    if samples.is_empty() {
        return Err(Error::Validation("no posterior samples".into()));
    }
    let n = samples.len() as f64;
    let mean: Vec<CoefficientBlock> = (0..model.effects.len())
        .map(|e| {
            let sum = samples
                .iter()
                .fold(DVector::zeros(samples[0].coefficients[e].values.len()), |acc, s| {
                    acc + &s.coefficients[e].values
                });
            CoefficientBlock::new(model.effects[e].id(), sum / n)
        })
        .collect();
    Ok(effect_groups(model)
        .into_iter()
        .filter_map(|(group, members)| {
            let trend = group_trend(model, &members, &mean)?;
            let m = trend.mean();
            Some(TrendCurve {
                group,
                points: model.effects[members[0]].effect.dist.quadrature(),
                values: trend.iter().map(|v| v - m).collect(),
            })
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub q: f64,
    pub partition: PartitionResult,
    pub trends: Vec<TrendCurve>,
    pub max_rhat: f64,
}

/// Refits with `Dirichlet(q)` on `node` for each `q`, reusing the seed.
pub fn sensitivity_sweep(
    asm: &Assembled,
    node: &str,
    q_values: &[f64],
    settings: &McmcSettings,
    exec: Exec,
) -> Result<Vec<SweepResult>> {
    let priors = asm
        .model
        .priors
        .as_ref()
        .ok_or_else(|| Error::Specification("model has no hyperparameters".into()))?;
    let tree = priors.tree();
    let s = tree
        .split_index(node)
        .ok_or_else(|| Error::Specification(format!("tree has no split named '{node}'")))?;
    if tree.split_info(s).0 < 2 {
        return Err(Error::Specification(format!("'{node}' is not a split")));
    }
    let runs = exec.map_slice(q_values, |&q| -> Result<SweepResult> {
        let tag = |e: Error| Error::Diagnostic(format!("q = {q}: {e}"));
        let priors = priors.with_split_family(node, PriorFamily::Dirichlet { q }).map_err(tag)?;
        let asm_q = Assembled {
            model: asm.model.with_priors(priors),
            ..asm.clone()
        };
        let result = fit(&asm_q, settings, exec).map_err(tag)?;
        Ok(SweepResult {
            q,
            partition: phi(&asm_q.model, &result.samples, exec)?,
            trends: posterior_mean_trends(&asm_q.model, &result.samples)?,
            max_rhat: result.max_rhat(),
        })
    });
    runs.into_iter().collect()
}
