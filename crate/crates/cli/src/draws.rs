//! Posterior draws as a wide delimited table, so later commands can reuse
//! a fit.

use std::path::Path;

use hdsdm::gmrf::CoefficientBlock;
use hdsdm::inference::PosteriorSample;
use hdsdm::io::{fmt_f64, Table};
use hdsdm::model::Model;
use hdsdm::{Error, Result};
use nalgebra::DVector;

fn header(model: &Model) -> Vec<String> {
    let mut h = vec!["chain".to_string(), "iteration".into(), "mu".into()];
    h.extend(model.hyper_names());
    for e in &model.effects {
        for k in 0..e.effect.n_coefficients() {
            h.push(format!("{}[{k}]", e.id()));
        }
    }
    h
}

pub fn write(path: &Path, model: &Model, samples: &[PosteriorSample]) -> Result<()> {
    let mut t = Table::new(&header(model));
    for s in samples {
        let mut row = vec![s.chain.to_string(), s.iteration.to_string(), fmt_f64(s.mu)];
        row.extend(s.hd_coords.iter().map(|v| fmt_f64(*v)));
        for c in &s.coefficients {
            row.extend(c.values.iter().map(|v| fmt_f64(*v)));
        }
        t.push(row)?;
    }
    t.write(path)
}

pub fn read(path: &Path, model: &Model) -> Result<Vec<PosteriorSample>> {
    let bad = |line: usize, msg: &str| Error::Data(format!("{}: line {line}: {msg}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let expected = header(model);
    let found: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Io(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != expected {
        return Err(Error::Data(format!("{}: columns do not match the model", path.display())));
    }
    let tree = model.tree();
    let n_hyper = model.n_hyper();
    let mut samples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(line, &e.to_string()))?;
        let nums: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad(line, &format!("unparseable value '{f}'"))))
            .collect::<Result<_>>()?;
        let hd_coords = DVector::from_column_slice(&nums[3..3 + n_hyper]);
        let hd = match tree {
            Some(t) => Some(t.from_unconstrained(&hd_coords)?.0),
            None => None,
        };
        let mut offset = 3 + n_hyper;
        let coefficients = model
            .effects
            .iter()
            .map(|e| {
                let k = e.effect.n_coefficients();
                let block = CoefficientBlock::new(e.id(), DVector::from_column_slice(&nums[offset..offset + k]));
                offset += k;
                block
            })
            .collect();
        samples.push(PosteriorSample {
            chain: nums[0] as usize,
            iteration: nums[1] as usize,
            hd,
            hd_coords,
            mu: nums[2],
            coefficients,
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no draws", path.display())));
    }
    Ok(samples)
}
