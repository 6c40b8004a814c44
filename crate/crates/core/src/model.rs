//! Model declarations, datasets and assembly of standardized effects into
//! training designs.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bases::{BSpline1d, BasisSpec, CovariateValues};
use crate::error::{Error, Result};
use crate::gmrf::{build_iid, build_rw1, build_rw2};
use crate::priors::{default_priors, PriorSet, PriorSpec};
use crate::standardize::{spatial_effect, split_pspline, standardize, CovariateDistribution, StandardizedEffect};
use crate::tree::{build_default_tree, DecompTree, EffectTag, HdParams, Side, TreeSpec};

pub const DEFAULT_PSPLINE_BASIS: usize = 20;
pub const DEFAULT_SPATIAL_BASIS: usize = 10;
pub const DEFAULT_DIRICHLET_Q: f64 = 0.5;
pub const DEFAULT_PC0_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    /// Standardized covariate times one coefficient.
    Linear,
    /// Cubic B-spline split into a linear part and an RW2 remainder.
    Pspline,
    /// Independent level effects.
    Iid,
    /// First-order random walk over ordered levels.
    Rw1,
    /// Second-order random walk over ordered levels.
    Rw2,
    /// Tensor B-spline over two coordinates with ICAR smoothing.
    Spatial,
}

/// Declared distribution (and support) of an effect's covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Support {
    Interval {
        lower: f64,
        upper: f64,
    },
    Levels {
        values: Vec<f64>,
    },
    PointCloud {
        /// Two-column delimited file; resolved into `points` by the loader.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        points: Vec<[f64; 2]>,
    },
}

impl Support {
    fn distribution(&self) -> Result<CovariateDistribution> {
        match self {
            Support::Interval { lower, upper } => CovariateDistribution::interval(*lower, *upper),
            Support::Levels { values } => {
                if values.is_empty() {
                    return Err(Error::Specification("empty level set".into()));
                }
                Ok(CovariateDistribution::UniformDiscrete { values: values.clone() })
            }
            Support::PointCloud { points, .. } => {
                if points.is_empty() {
                    return Err(Error::Specification("point cloud support has no points".into()));
                }
                Ok(CovariateDistribution::UniformPointCloud { points: points.clone() })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectDecl {
    pub id: String,
    pub kind: EffectKind,
    pub covariates: Vec<String>,
    pub support: Support,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_basis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default)]
    pub interaction: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flexibility: Option<u32>,
}

impl EffectDecl {
    pub fn new(id: &str, kind: EffectKind, covariates: &[&str], support: Support) -> Self {
        EffectDecl {
            id: id.into(),
            kind,
            covariates: covariates.iter().map(|c| c.to_string()).collect(),
            support,
            n_basis: None,
            side: None,
            group: None,
            interaction: false,
            flexibility: None,
        }
    }

    fn default_side(&self) -> Side {
        match self.kind {
            EffectKind::Spatial | EffectKind::Rw1 => Side::Biotic,
            _ => Side::Abiotic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "yes")]
    pub intercept: bool,
    #[serde(default)]
    pub effects: Vec<EffectDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<TreeSpec>,
    /// Nodes without an entry receive the default prior set.
    #[serde(default)]
    pub priors: Vec<PriorSpec>,
}

fn yes() -> bool {
    true
}

/// Binary response plus named numeric columns and a train/test tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub columns: BTreeMap<String, Vec<f64>>,
    pub train: Vec<bool>,
}

impl Dataset {
    /// All rows are tagged as training rows.
    pub fn new(y: Vec<f64>, columns: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("response at row {i} is {} (expected 0 or 1)", y[i])));
        }
        for (name, col) in &columns {
            if col.len() != y.len() {
                return Err(Error::Dimension(format!(
                    "column '{name}' has {} rows, response has {}",
                    col.len(),
                    y.len()
                )));
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!("column '{name}' has a missing value at row {i}")));
            }
        }
        let n = y.len();
        Ok(Dataset {
            y,
            columns,
            train: vec![true; n],
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(|c| c.as_slice())
            .ok_or_else(|| Error::Specification(format!("unknown column '{name}'")))
    }

    /// Rows with `column <= threshold` train, the rest test.
    pub fn split_by_threshold(&mut self, column: &str, threshold: f64) -> Result<()> {
        let col = self.column(column)?.to_vec();
        self.train = col.iter().map(|&v| v <= threshold).collect();
        Ok(())
    }

    pub fn train_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.train[i]).collect()
    }

    pub fn test_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.train[i]).collect()
    }

    pub fn all_rows(&self) -> Vec<usize> {
        (0..self.n()).collect()
    }
}

/// A standardized effect with its tags and source columns.
#[derive(Debug, Clone)]
pub struct ModelEffect {
    pub effect: StandardizedEffect,
    pub tag: EffectTag,
    pub covariates: Vec<String>,
}

impl ModelEffect {
    pub fn id(&self) -> &str {
        &self.effect.effect_id
    }
}

/// Data-independent part of a model: effects, tree and priors.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub intercept: bool,
    pub effects: Vec<ModelEffect>,
    /// `None` for intercept-only models.
    pub priors: Option<PriorSet>,
    leaf_pos: Vec<usize>,
}

impl Model {
    pub fn build(spec: &ModelSpec) -> Result<Model> {
        let mut effects = Vec::new();
        for decl in &spec.effects {
            effects.extend(build_effect(decl)?);
        }
        let mut seen = std::collections::HashSet::new();
        for e in &effects {
            if !seen.insert(e.id().to_string()) {
                return Err(Error::Specification(format!("duplicate effect id '{}'", e.id())));
            }
        }
        if effects.is_empty() {
            if spec.tree.is_some() {
                return Err(Error::Specification("tree given for a model without effects".into()));
            }
            return Ok(Model {
                spec: spec.clone(),
                intercept: spec.intercept,
                effects,
                priors: None,
                leaf_pos: Vec::new(),
            });
        }
        let tree = match &spec.tree {
            Some(t) => DecompTree::from_spec(t)?,
            None => build_default_tree(&effects.iter().map(|e| e.tag.clone()).collect::<Vec<_>>())?,
        };
        let ids: Vec<String> = effects.iter().map(|e| e.id().to_string()).collect();
        tree.check_leaves(&ids)?;
        let leaves = tree.leaf_ids();
        let leaf_pos = ids.iter().map(|id| leaves.iter().position(|l| l == id).unwrap()).collect();

        let mut priors = spec.priors.clone();
        for d in default_priors(&tree, DEFAULT_DIRICHLET_Q, DEFAULT_PC0_LAMBDA) {
            if !priors.iter().any(|p| p.node == d.node) {
                priors.push(d);
            }
        }
        let priors = PriorSet::new(&tree, &priors)?;
        Ok(Model {
            spec: spec.clone(),
            intercept: spec.intercept,
            effects,
            priors: Some(priors),
            leaf_pos,
        })
    }

    pub fn tree(&self) -> Option<&DecompTree> {
        self.priors.as_ref().map(|p| p.tree())
    }

    pub fn n_hyper(&self) -> usize {
        self.tree().map_or(0, |t| t.n_coords())
    }

    pub fn hyper_names(&self) -> Vec<String> {
        self.tree().map_or_else(Vec::new, |t| t.coord_names())
    }

    pub fn effect_ids(&self) -> Vec<String> {
        self.effects.iter().map(|e| e.id().to_string()).collect()
    }

    pub fn effect_index(&self, id: &str) -> Option<usize> {
        self.effects.iter().position(|e| e.id() == id)
    }

    /// Variances in effect order.
    pub fn effect_variances(&self, p: &HdParams) -> Result<Vec<f64>> {
        let tree = self.tree().ok_or_else(|| Error::Specification("model has no effects".into()))?;
        let leaf = tree.to_variances(p)?;
        Ok(self.leaf_pos.iter().map(|&i| leaf[i]).collect())
    }

    /// Replaces the prior set (the tree stays the same).
    pub fn with_priors(&self, priors: PriorSet) -> Model {
        Model {
            priors: Some(priors),
            ..self.clone()
        }
    }

    pub fn covariate_values(&self, e: usize, data: &Dataset, rows: &[usize]) -> Result<CovariateValues> {
        let effect = &self.effects[e];
        let cols = effect
            .covariates
            .iter()
            .map(|c| data.column(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(if effect.effect.basis.is_2d() {
            CovariateValues::TwoD(rows.iter().map(|&i| [cols[0][i], cols[1][i]]).collect())
        } else {
            CovariateValues::OneD(rows.iter().map(|&i| cols[0][i]).collect())
        })
    }

    /// Basis design of effect `e` at `rows`. Support violations report the
    /// dataset row indices.
    pub fn design(&self, e: usize, data: &Dataset, rows: &[usize]) -> Result<DMatrix<f64>> {
        let x = self.covariate_values(e, data, rows)?;
        let effect = &self.effects[e].effect;
        if let CovariateDistribution::UniformPointCloud { points } = &effect.dist {
            let bad = outside_bounding_box(x.as_2d()?, points);
            if !bad.is_empty() {
                return Err(Error::Domain {
                    indices: bad.into_iter().map(|i| rows[i]).collect(),
                });
            }
        }
        effect.basis.eval(&x).map_err(|err| match err {
            Error::Domain { indices } => Error::Domain {
                indices: indices.into_iter().map(|i| rows[i]).collect(),
            },
            other => other,
        })
    }
}

fn outside_bounding_box(zs: &[[f64; 2]], cloud: &[[f64; 2]]) -> Vec<usize> {
    let (lo, hi) = bounding_box(cloud);
    (0..zs.len())
        .filter(|&i| (0..2).any(|d| !(zs[i][d] >= lo[d] && zs[i][d] <= hi[d])))
        .collect()
}

fn bounding_box(points: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    (lo, hi)
}

fn build_effect(decl: &EffectDecl) -> Result<Vec<ModelEffect>> {
    let want = if decl.kind == EffectKind::Spatial { 2 } else { 1 };
    if decl.covariates.len() != want {
        return Err(Error::Specification(format!(
            "effect '{}' needs {want} covariate column(s), got {}",
            decl.id,
            decl.covariates.len()
        )));
    }
    let dist = decl.support.distribution()?;
    let is_cloud = matches!(dist, CovariateDistribution::UniformPointCloud { .. });
    if is_cloud != (decl.kind == EffectKind::Spatial) {
        return Err(Error::Specification(format!(
            "effect '{}': point-cloud supports go with spatial effects only",
            decl.id
        )));
    }
    let tag = |id: &str, flex: u32| EffectTag {
        id: id.to_string(),
        side: decl.side.unwrap_or_else(|| decl.default_side()),
        interaction: decl.interaction,
        group: decl.group.clone().unwrap_or_else(|| decl.id.clone()),
        flexibility: decl.flexibility.unwrap_or(flex),
    };
    let wrap = |effect: StandardizedEffect, flex: u32| ModelEffect {
        tag: tag(&effect.effect_id, flex),
        effect,
        covariates: decl.covariates.clone(),
    };
    let levels = || match &decl.support {
        Support::Levels { values } => Ok(values.clone()),
        _ => Err(Error::Specification(format!(
            "effect '{}' needs a level-set support",
            decl.id
        ))),
    };
    Ok(match decl.kind {
        EffectKind::Linear => {
            let (mean, sd) = dist.moments()?;
            let basis = BasisSpec::Linear { center: mean, scale: sd };
            vec![wrap(standardize(&decl.id, basis, build_iid(1)?, dist)?, 0)]
        }
        EffectKind::Pspline => {
            let (lower, upper) = match &decl.support {
                Support::Interval { lower, upper } => (*lower, *upper),
                Support::Levels { values } => (
                    values.iter().cloned().fold(f64::INFINITY, f64::min),
                    values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                ),
                _ => unreachable!(),
            };
            let k = decl.n_basis.unwrap_or(DEFAULT_PSPLINE_BASIS);
            let basis = BasisSpec::BSpline1d(BSpline1d::new(k, lower, upper)?);
            let (lin, nl) = split_pspline(&decl.id, &basis, &dist)?;
            vec![wrap(lin, 0), wrap(nl, 1)]
        }
        EffectKind::Iid | EffectKind::Rw1 | EffectKind::Rw2 => {
            let values = levels()?;
            let k = values.len();
            let precision = match decl.kind {
                EffectKind::Iid => build_iid(k)?,
                EffectKind::Rw1 => build_rw1(k)?,
                _ => build_rw2(k)?,
            };
            let basis = BasisSpec::Indicator { levels: values };
            vec![wrap(standardize(&decl.id, basis, precision, dist)?, 0)]
        }
        EffectKind::Spatial => {
            let points = match &decl.support {
                Support::PointCloud { points, .. } => points.clone(),
                _ => unreachable!(),
            };
            let (lo, hi) = bounding_box(&points);
            let k = decl.n_basis.unwrap_or(DEFAULT_SPATIAL_BASIS);
            let a = BSpline1d::new(k, lo[0], hi[0])?;
            let b = BSpline1d::new(k, lo[1], hi[1])?;
            let (effect, _) = spatial_effect(&decl.id, a, b, points)?;
            vec![wrap(effect, 0)]
        }
    })
}

/// Model plus training designs.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub model: Model,
    pub rows: Vec<usize>,
    pub y: DVector<f64>,
    pub designs: Vec<DMatrix<f64>>,
    /// `D_e · L_e`: maps whitened coefficients to the linear predictor.
    pub whitened: Vec<DMatrix<f64>>,
}

impl Assembled {
    pub fn new(model: Model, data: &Dataset, rows: &[usize]) -> Result<Self> {
        let designs = (0..model.effects.len())
            .map(|e| model.design(e, data, rows))
            .collect::<Result<Vec<_>>>()?;
        let whitened = designs
            .iter()
            .zip(&model.effects)
            .map(|(d, e)| d * e.effect.factor())
            .collect();
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| data.y[i]));
        Ok(Assembled {
            model,
            rows: rows.to_vec(),
            y,
            designs,
            whitened,
        })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Design of the fixed part (the intercept column, if any).
    pub fn intercept_design(&self) -> DMatrix<f64> {
        DMatrix::from_element(self.n(), usize::from(self.model.intercept), 1.0)
    }
}

/// Builds the model and its designs on the training rows.
pub fn assemble(spec: &ModelSpec, data: &Dataset) -> Result<Assembled> {
    let model = Model::build(spec)?;
    Assembled::new(model, data, &data.train_rows())
}
