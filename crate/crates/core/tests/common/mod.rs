#![allow(dead_code)]

use std::collections::BTreeMap;

use hdsdm::model::{Dataset, EffectDecl, EffectKind, ModelSpec, Support};
use hdsdm::numeric::logistic;
use hdsdm::priors::PriorSpec;
use hdsdm::tree::Side;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn triangle_cloud(n: usize) -> Vec<[f64; 2]> {
    let mut pts = Vec::new();
    for i in 0..=n {
        for j in 0..=n - i {
            pts.push([i as f64 / n as f64, j as f64 / n as f64]);
        }
    }
    pts
}

/// Five P-spline covariates, a two-level vessel effect, a spatial effect
/// on a triangular cloud and an RW1 year effect.
pub fn survey_spec(priors: Vec<PriorSpec>) -> ModelSpec {
    let mut effects = Vec::new();
    for p in 1..=5 {
        effects.push(EffectDecl {
            n_basis: Some(10),
            ..EffectDecl::new(
                &format!("x{p}"),
                EffectKind::Pspline,
                &[&format!("x{p}")],
                Support::Interval { lower: 0.0, upper: 1.0 },
            )
        });
    }
    effects.push(EffectDecl::new(
        "vessel",
        EffectKind::Iid,
        &["vessel"],
        Support::Levels { values: vec![0.0, 1.0] },
    ));
    effects.push(EffectDecl {
        n_basis: Some(6),
        ..EffectDecl::new(
            "space",
            EffectKind::Spatial,
            &["lon", "lat"],
            Support::PointCloud {
                path: None,
                points: triangle_cloud(30),
            },
        )
    });
    effects.push(EffectDecl {
        side: Some(Side::Biotic),
        ..EffectDecl::new(
            "time",
            EffectKind::Rw1,
            &["year"],
            Support::Levels {
                values: (1..=20).map(f64::from).collect(),
            },
        )
    });
    ModelSpec {
        intercept: true,
        effects,
        tree: None,
        priors,
    }
}

pub fn empty_dataset(columns: &[&str]) -> Dataset {
    let cols = columns.iter().map(|c| (c.to_string(), Vec::new())).collect();
    Dataset::new(Vec::new(), cols).unwrap()
}

/// Three-effect synthetic data: linear `x`, RW1 over 20 years and a
/// two-level iid effect, with realized variances `V · φ`.
pub struct Synthetic {
    pub data: Dataset,
    pub spec: ModelSpec,
    pub true_phi: Vec<f64>,
}

pub fn three_effect_synthetic(n: usize, v: f64, phi: [f64; 3], seed: u64) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Smooth year trend with mean zero and variance v·φ₂ over the levels.
    let mut walk = [0.0f64; 20];
    for t in 1..20 {
        walk[t] = walk[t - 1] + rng.sample::<f64, _>(StandardNormal);
    }
    let m = walk.iter().sum::<f64>() / 20.0;
    let var = walk.iter().map(|w| (w - m).powi(2)).sum::<f64>() / 20.0;
    let time: Vec<f64> = walk.iter().map(|w| (w - m) / var.sqrt() * (v * phi[1]).sqrt()).collect();
    let beta = (v * phi[0]).sqrt();
    let c = (v * phi[2]).sqrt();
    let (mut xs, mut years, mut groups, mut y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let x: f64 = rng.random();
        let year = rng.random_range(1..=20usize);
        let g = rng.random_range(0..2usize);
        // Standardized x on U(0, 1): (x − 1/2)·√12.
        let eta = beta * (x - 0.5) * 12f64.sqrt() + time[year - 1] + if g == 0 { c } else { -c };
        y.push(f64::from(u8::from(rng.random::<f64>() < logistic(eta))));
        xs.push(x);
        years.push(year as f64);
        groups.push(g as f64);
    }
    let mut cols = BTreeMap::new();
    cols.insert("x".to_string(), xs);
    cols.insert("year".to_string(), years);
    cols.insert("g".to_string(), groups);
    let spec = ModelSpec {
        intercept: true,
        effects: vec![
            EffectDecl::new("x", EffectKind::Linear, &["x"], Support::Interval { lower: 0.0, upper: 1.0 }),
            EffectDecl::new(
                "time",
                EffectKind::Rw1,
                &["year"],
                Support::Levels {
                    values: (1..=20).map(f64::from).collect(),
                },
            ),
            EffectDecl::new("g", EffectKind::Iid, &["g"], Support::Levels { values: vec![0.0, 1.0] }),
        ],
        tree: None,
        priors: Vec::new(),
    };
    Synthetic {
        data: Dataset::new(y, cols).unwrap(),
        spec,
        true_phi: phi.to_vec(),
    }
}

/// Linear covariates with the given coefficients (zero means null).
pub fn linear_synthetic(n: usize, betas: &[f64], seed: u64) -> (Dataset, ModelSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = betas.len();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); p];
    let mut y = Vec::new();
    for _ in 0..n {
        let mut eta = 0.0;
        for j in 0..p {
            let x: f64 = rng.random();
            eta += betas[j] * (x - 0.5) * 12f64.sqrt();
            cols[j].push(x);
        }
        y.push(f64::from(u8::from(rng.random::<f64>() < logistic(eta))));
    }
    let columns = cols
        .into_iter()
        .enumerate()
        .map(|(j, c)| (format!("x{}", j + 1), c))
        .collect();
    let effects = (1..=p)
        .map(|j| {
            let name = format!("x{j}");
            EffectDecl::new(&name, EffectKind::Linear, &[&name], Support::Interval { lower: 0.0, upper: 1.0 })
        })
        .collect();
    (
        Dataset::new(y, columns).unwrap(),
        ModelSpec {
            intercept: true,
            effects,
            tree: None,
            priors: Vec::new(),
        },
    )
}
