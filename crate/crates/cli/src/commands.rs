use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use hdsdm::config::RunConfig;
use hdsdm::exec::Exec;
use hdsdm::inference::{fit, metrics, predict, FitResult, PosteriorSample};
use hdsdm::io::{fmt_f64, write_json, Table};
use hdsdm::model::{Assembled, Dataset, Model};
use hdsdm::partition::{phi, posterior_mean_trends, sensitivity_sweep, PartitionResult, TrendCurve};
use hdsdm::bases::CovariateValues;
use hdsdm::stats::{ks_test, quantile};
use hdsdm::{Error, Result};
use serde_json::{json, Value};

use crate::draws;
use crate::Common;

const DEFAULT_OUT: &str = "hdsdm-out";
/// Sidecar holding the fingerprint of the config that produced `draws.csv`.
const DRAWS_ID: &str = "draws.json";

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diagnostic(_) | Error::Numerical(_) | Error::Constraint(_) => 3,
        Error::Io(_) => 4,
        _ => 2,
    }
}

pub fn out_dir(common: &Common, cfg: Option<&RunConfig>) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Everything a command needs, plus the bookkeeping for the manifest.
struct Run {
    command: &'static str,
    cfg: RunConfig,
    out: PathBuf,
    exec: Exec,
    started: Instant,
    outputs: Vec<String>,
    extra: serde_json::Map<String, Value>,
}

impl Run {
    fn new(command: &'static str, common: &Common) -> Result<Self> {
        let mut cfg = RunConfig::load(&common.config)?;
        if let Some(seed) = common.seed {
            cfg.mcmc.seed = seed;
        }
        let out = out_dir(common, Some(&cfg));
        std::fs::create_dir_all(&out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
        Ok(Run {
            command,
            cfg,
            out,
            exec: Exec::default(),
            started: Instant::now(),
            outputs: Vec::new(),
            extra: serde_json::Map::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    /// Identity of a fit: the effective config minus the output location.
    fn fingerprint(&self) -> Result<String> {
        RunConfig {
            output: None,
            ..self.cfg.clone()
        }
        .to_toml()
    }

    fn manifest_path(&self) -> PathBuf {
        self.out.join(format!("manifest-{}.json", self.command))
    }

    fn finish(mut self) -> Result<()> {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64() - self.started.elapsed().as_secs_f64())
            .unwrap_or(f64::NAN);
        let manifest = json!({
            "tool": "hdsdm",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "seed": self.cfg.mcmc.seed,
            "parallel": matches!(self.exec, Exec::Parallel),
            "started_unix": started_unix,
            "elapsed_seconds": self.started.elapsed().as_secs_f64(),
            "fingerprint": self.fingerprint()?,
            "config": serde_json::to_value(&self.cfg).map_err(|e| Error::Config(e.to_string()))?,
            "outputs": self.outputs,
            "details": Value::Object(std::mem::take(&mut self.extra)),
        });
        write_json(&self.manifest_path(), &manifest)?;
        println!("{}: wrote {} files to {}", self.command, self.outputs.len(), self.out.display());
        Ok(())
    }

    fn data(&self) -> Result<Dataset> {
        self.cfg.ingest()
    }

    fn fit_outputs(&mut self, model: &Model, result: &FitResult) -> Result<()> {
        let sidecar = self.out.join(DRAWS_ID);
        if sidecar.exists() {
            std::fs::remove_file(&sidecar).map_err(|e| Error::Io(format!("{}: {e}", sidecar.display())))?;
        }
        draws::write(&self.path("draws.csv"), model, &result.samples)?;
        // Written after the draws so an interrupted write is never reused.
        write_json(&sidecar, &json!({ "fingerprint": self.fingerprint()? }))?;
        self.outputs.push(DRAWS_ID.into());
        let mut rhat = Table::new(&["parameter", "split_rhat"]);
        for (n, r) in &result.rhat {
            rhat.push(vec![n.clone(), fmt_f64(*r)])?;
        }
        rhat.write(&self.path("rhat.csv"))?;
        let mut acc = Table::new(&["move", "acceptance"]);
        for (n, a) in &result.acceptance {
            acc.push(vec![n.clone(), fmt_f64(*a)])?;
        }
        acc.write(&self.path("acceptance.csv"))?;
        hyper_summary(model, &result.samples)?.write(&self.path("hyper_summary.csv"))?;
        self.extra.insert("max_split_rhat".into(), json!(result.max_rhat()));
        self.extra.insert("retained_samples".into(), json!(result.samples.len()));
        Ok(())
    }

    /// Draws from an earlier `fit` with the same fingerprint, or a new fit.
    fn posterior(&mut self, data: &Dataset) -> Result<(Model, Vec<PosteriorSample>)> {
        let model = Model::build(&self.cfg.model)?;
        let fingerprint = self.fingerprint()?;
        let reusable = std::fs::read_to_string(self.out.join(DRAWS_ID))
            .ok()
            .and_then(|t| serde_json::from_str::<Value>(&t).ok())
            .is_some_and(|m| m["fingerprint"] == json!(fingerprint));
        if reusable {
            if let Ok(samples) = draws::read(&self.out.join("draws.csv"), &model) {
                self.extra.insert("draws".into(), json!("reused"));
                return Ok((model, samples));
            }
        }
        let asm = Assembled::new(model, data, &data.train_rows())?;
        let result = fit(&asm, &self.cfg.mcmc, self.exec)?;
        self.fit_outputs(&asm.model, &result)?;
        self.extra.insert("draws".into(), json!("fitted"));
        Ok((asm.model, result.samples))
    }
}

pub fn run(command: &'static str, common: &Common) -> Result<()> {
    let mut run = Run::new(command, common)?;
    match command {
        "fit" => cmd_fit(&mut run)?,
        "predict" => {
            cmd_predict(&mut run)?;
        }
        "metrics" => cmd_metrics(&mut run)?,
        "partition" => cmd_partition(&mut run)?,
        "sensitivity" => cmd_sensitivity(&mut run)?,
        "prior-check" => cmd_prior_check(&mut run)?,
        other => return Err(Error::Config(format!("unknown command '{other}'"))),
    }
    run.finish()
}

fn cmd_fit(run: &mut Run) -> Result<()> {
    let data = run.data()?;
    let asm = Assembled::new(Model::build(&run.cfg.model)?, &data, &data.train_rows())?;
    let result = fit(&asm, &run.cfg.mcmc, run.exec)?;
    run.fit_outputs(&asm.model, &result)
}

fn cmd_predict(run: &mut Run) -> Result<(Vec<usize>, Vec<f64>, Dataset)> {
    let data = run.data()?;
    let rows = data.test_rows();
    if rows.is_empty() {
        return Err(Error::Validation("no test rows: add a split rule to the data block".into()));
    }
    let (model, samples) = run.posterior(&data)?;
    let p_hat = predict(&model, &samples, &data, &rows)?;
    let mut t = Table::new(&["row", "y", "p_hat"]);
    for (&i, p) in rows.iter().zip(&p_hat) {
        t.push(vec![i.to_string(), fmt_f64(data.y[i]), fmt_f64(*p)])?;
    }
    t.write(&run.path("predictions.csv"))?;
    Ok((rows, p_hat, data))
}

fn cmd_metrics(run: &mut Run) -> Result<()> {
    let (rows, p_hat, data) = cmd_predict(run)?;
    let y: Vec<f64> = rows.iter().map(|&i| data.y[i]).collect();
    let m = metrics(&p_hat, &y)?;
    let mut t = Table::new(&["metric", "value"]);
    for (n, v) in [("loglik", m.loglik), ("brier", m.brier), ("tjur_r2", m.tjur_r2), ("accuracy", m.accuracy)] {
        t.push(vec![n.into(), fmt_f64(v)])?;
    }
    t.write(&run.path("metrics.csv"))?;
    Ok(())
}

fn phi_tables(part: &PartitionResult, prefix: &[(&str, String)]) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut header: Vec<String> = prefix.iter().map(|(k, _)| k.to_string()).collect();
    header.extend(["group", "mean_phi", "phi_q025", "phi_q975", "mean_s2"].map(String::from));
    let mut rows = Vec::new();
    for (g, name) in part.groups.iter().enumerate() {
        let col: Vec<f64> = part.phi.iter().map(|r| r[g]).collect();
        let (lo, hi) = if col.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (quantile(&col, 0.025), quantile(&col, 0.975))
        };
        let mut row: Vec<String> = prefix.iter().map(|(_, v)| v.clone()).collect();
        row.extend([name.clone(), fmt_f64(part.mean_phi[g]), fmt_f64(lo), fmt_f64(hi), fmt_f64(part.mean_s2[g])]);
        rows.push(row);
    }
    Ok((header, rows))
}

fn trend_rows(trends: &[TrendCurve], prefix: &[String]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for tc in trends {
        let coords: Vec<(String, String)> = match &tc.points {
            CovariateValues::OneD(x) => x.iter().map(|v| (fmt_f64(*v), String::new())).collect(),
            CovariateValues::TwoD(p) => p.iter().map(|[a, b]| (fmt_f64(*a), fmt_f64(*b))).collect(),
        };
        for ((x1, x2), v) in coords.into_iter().zip(&tc.values) {
            let mut row = prefix.to_vec();
            row.extend([tc.group.clone(), x1, x2, fmt_f64(*v)]);
            rows.push(row);
        }
    }
    rows
}

fn cmd_partition(run: &mut Run) -> Result<()> {
    let data = run.data()?;
    let (model, samples) = run.posterior(&data)?;
    let part = phi(&model, &samples, run.exec)?;

    let (header, rows) = phi_tables(&part, &[])?;
    let mut t = Table::new(&header);
    for r in rows {
        t.push(r)?;
    }
    t.write(&run.path("phi_summary.csv"))?;

    let mut header = vec!["chain".to_string(), "iteration".into()];
    header.extend(part.groups.iter().map(|g| format!("s2_{g}")));
    let mut t = Table::new(&header);
    for (s, row) in samples.iter().zip(&part.s2) {
        let mut r = vec![s.chain.to_string(), s.iteration.to_string()];
        r.extend(row.iter().map(|v| fmt_f64(*v)));
        t.push(r)?;
    }
    t.write(&run.path("group_variances.csv"))?;

    let trends = posterior_mean_trends(&model, &samples)?;
    let mut t = Table::new(&["group", "x1", "x2", "trend"]);
    for r in trend_rows(&trends, &[]) {
        t.push(r)?;
    }
    t.write(&run.path("trends.csv"))?;
    run.extra.insert("skipped_zero_total_samples".into(), json!(part.skipped));
    Ok(())
}

fn cmd_sensitivity(run: &mut Run) -> Result<()> {
    let data = run.data()?;
    let asm = Assembled::new(Model::build(&run.cfg.model)?, &data, &data.train_rows())?;
    let sens = run.cfg.sensitivity.clone();
    let sweep = sensitivity_sweep(&asm, &sens.node, &sens.q_values, &run.cfg.mcmc, run.exec)?;
    let mut phi_t: Option<Table> = None;
    let mut trend_t = Table::new(&["q", "group", "x1", "x2", "trend"]);
    let mut rhat_t = Table::new(&["q", "max_split_rhat"]);
    for r in &sweep {
        let q = fmt_f64(r.q);
        let (header, rows) = phi_tables(&r.partition, &[("q", q.clone())])?;
        let t = phi_t.get_or_insert_with(|| Table::new(&header));
        for row in rows {
            t.push(row)?;
        }
        for row in trend_rows(&r.trends, std::slice::from_ref(&q)) {
            trend_t.push(row)?;
        }
        rhat_t.push(vec![q, fmt_f64(r.max_rhat)])?;
    }
    if let Some(t) = phi_t {
        t.write(&run.path("sensitivity_phi.csv"))?;
    }
    trend_t.write(&run.path("sensitivity_trends.csv"))?;
    rhat_t.write(&run.path("sensitivity_rhat.csv"))?;
    run.extra.insert("node".into(), json!(sens.node));
    run.extra.insert("q_values".into(), json!(sens.q_values));
    Ok(())
}

/// Prior-only sampling needs no data: the model is assembled on zero rows.
fn cmd_prior_check(run: &mut Run) -> Result<()> {
    let model = Model::build(&run.cfg.model)?;
    let priors = model
        .priors
        .clone()
        .ok_or_else(|| Error::Specification("model has no hyperparameters to check".into()))?;
    let columns = run.cfg.required_columns().into_iter().map(|c| (c, Vec::new())).collect();
    let empty = Dataset::new(Vec::new(), columns)?;
    let asm = Assembled::new(model, &empty, &[])?;
    let settings = hdsdm::inference::McmcSettings {
        prior_only: true,
        ..run.cfg.mcmc.clone()
    };
    let result = fit(&asm, &settings, run.exec)?;
    let mut t = Table::new(&[
        "parameter",
        "family",
        "n",
        "ks_statistic",
        "ks_p_value",
        "sample_median",
        "analytic_median",
    ]);
    for m in priors.marginals() {
        let xs: Vec<f64> = result.samples.iter().filter_map(|s| s.hd.as_ref().map(|p| m.value(p))).collect();
        let ks = ks_test(&xs, |x| m.cdf(x))?;
        t.push(vec![
            m.parameter.clone(),
            m.family.to_string(),
            ks.n.to_string(),
            fmt_f64(ks.statistic),
            fmt_f64(ks.p_value),
            fmt_f64(quantile(&xs, 0.5)),
            fmt_f64(m.median()),
        ])?;
    }
    t.write(&run.path("prior_check.csv"))?;
    run.extra.insert("max_split_rhat".into(), json!(result.max_rhat()));
    Ok(())
}

/// Posterior summaries of `V`, every split share and every effect variance.
fn hyper_summary(model: &Model, samples: &[PosteriorSample]) -> Result<Table> {
    let mut t = Table::new(&["parameter", "mean", "sd", "q025", "q50", "q975"]);
    let Some(tree) = model.tree() else {
        return Ok(t);
    };
    let mut columns: Vec<(String, Vec<f64>)> = vec![("V".into(), Vec::new())];
    for (s, name) in tree.split_names().iter().enumerate() {
        for kid in tree.split_children(s) {
            columns.push((format!("{name}[{kid}]"), Vec::new()));
        }
    }
    for id in model.effect_ids() {
        columns.push((format!("sigma2_{id}"), Vec::new()));
    }
    for s in samples {
        let Some(p) = &s.hd else { continue };
        let mut vals = vec![p.total];
        vals.extend(p.proportions.iter().flatten().copied());
        vals.extend(model.effect_variances(p)?);
        for (c, v) in columns.iter_mut().zip(vals) {
            c.1.push(v);
        }
    }
    for (name, xs) in &columns {
        if xs.is_empty() {
            continue;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        t.push(vec![
            name.clone(),
            fmt_f64(mean),
            fmt_f64(sd),
            fmt_f64(quantile(xs, 0.025)),
            fmt_f64(quantile(xs, 0.5)),
            fmt_f64(quantile(xs, 0.975)),
        ])?;
    }
    Ok(t)
}
