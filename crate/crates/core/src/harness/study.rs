//! Cost-versus-MSE study and rate regression.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::io::{read_table, write_table};
use super::runs::{level_run, multilevel_with, MapCache};
use super::HarnessError;
use crate::fgn::Level;
use crate::ml::{allocate, self_normalized, Allocation};
use crate::rng::tag;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pmcmc,
    Mlpmcmc,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pmcmc => "pmcmc",
            Method::Mlpmcmc => "mlpmcmc",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "pmcmc" => Some(Method::Pmcmc),
            "mlpmcmc" => Some(Method::Mlpmcmc),
            _ => None,
        }
    }
}

/// Least-squares fit of `log cost` on `log MSE`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// `(log MSE, log cost)` pairs.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    /// Root mean square residual.
    pub residual: f64,
}

pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit, HarnessError> {
    let n = points.len();
    if n < 3 {
        return Err(HarnessError::InsufficientPoints { needed: 3, got: n });
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / n as f64).sqrt();
    Ok(RateFit { points: points.to_vec(), slope, intercept, residual })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub method: Method,
    pub point: u32,
    pub epsilon: f64,
    pub repeat: usize,
    pub functional: String,
    pub estimate: f64,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsePoint {
    pub method: Method,
    pub point: u32,
    pub epsilon: f64,
    pub functional: String,
    pub mse: f64,
    pub variance: f64,
    pub bias_sq: f64,
    pub mean_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub level: u32,
    pub iterations: usize,
    pub functionals: Vec<String>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub method: Method,
    pub functional: String,
    pub fit: RateFit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyResult {
    pub reference: Reference,
    pub runs: Vec<RunRow>,
    pub mse: Vec<MsePoint>,
    pub rates: Vec<RateRow>,
}

/// Accuracy point of a study: target `ε` and the work for each method.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyPoint {
    pub level: u32,
    pub epsilon: f64,
    pub single_iterations: usize,
    pub allocation: Allocation,
}

pub fn study_points(cfg: &ExperimentConfig, horizon: usize) -> Result<Vec<StudyPoint>, HarnessError> {
    cfg.study
        .levels
        .iter()
        .map(|&l| {
            let epsilon = Level::new(l).mesh().powf(cfg.multilevel.alpha);
            let single_iterations = (cfg.study.sl_base_m * epsilon.powi(-2)).ceil() as usize;
            let allocation =
                allocate(epsilon, cfg.rates(), cfg.levels.min, cfg.levels.max, cfg.study.ml_base_m, cfg.particles(horizon))?;
            Ok(StudyPoint { level: l, epsilon, single_iterations, allocation })
        })
        .collect()
}

fn batch_se(values: &[f64], log_j: &[f64], batches: usize) -> f64 {
    let size = values.len() / batches;
    if size == 0 {
        return f64::NAN;
    }
    let est: Vec<f64> = (0..batches)
        .filter_map(|b| self_normalized(&values[b * size..(b + 1) * size], &log_j[b * size..(b + 1) * size]).ok())
        .map(|e| e.value)
        .collect();
    let k = est.len() as f64;
    let mean = est.iter().sum::<f64>() / k;
    (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
}

/// Long corrected single-level run at the reference level.
pub fn reference_run(cfg: &ExperimentConfig, maps: &MapCache, y: &[f64], level: Level, iterations: usize) -> Result<Reference, HarnessError> {
    let model = cfg.model();
    let names = model.param_names();
    let functionals = &cfg.multilevel.functionals;
    let chains = cfg.study.reference_chains;
    let per_chain = iterations.div_ceil(chains);
    let runs: Vec<_> = (0..chains)
        .into_par_iter()
        .map(|c| level_run(cfg, &model, maps.get(level), y, per_chain, false, functionals, &[tag::REFERENCE, c as u64]))
        .collect::<Result<_, _>>()?;
    let log_j: Vec<f64> = runs.iter().flat_map(|r| r.weighted.log_j_fine.iter().copied()).collect();
    let mut values = Vec::new();
    let mut std_errors = Vec::new();
    for k in 0..functionals.len() {
        let col: Vec<f64> = runs.iter().flat_map(|r| r.weighted.phi_fine[k].iter().copied()).collect();
        values.push(self_normalized(&col, &log_j)?.value);
        std_errors.push(batch_se(&col, &log_j, 20));
    }
    Ok(Reference {
        level: level.index(),
        iterations: per_chain * chains,
        functionals: functionals.iter().map(|f| f.label(&names)).collect(),
        values,
        std_errors,
    })
}

pub fn mse_study(cfg: &ExperimentConfig, y: &[f64]) -> Result<StudyResult, HarnessError> {
    let points = study_points(cfg, y.len())?;
    let largest = points
        .iter()
        .flat_map(|p| std::iter::once(p.single_iterations).chain(p.allocation.iterations.iter().copied()))
        .max()
        .unwrap_or(1);
    let ref_level = cfg.study.reference_level.unwrap_or(cfg.study.levels.last().copied().unwrap_or(cfg.levels.max) + 1);
    let ref_iterations = (cfg.study.reference_multiplier * largest as f64).ceil() as usize;

    let mut levels: Vec<u32> = cfg.study.levels.clone();
    levels.push(ref_level);
    for p in &points {
        levels.extend(p.allocation.l_min..=p.allocation.l_max);
    }
    let maps = MapCache::build(cfg, levels, y.len())?;
    let model = cfg.model();
    let names = model.param_names();
    let labels: Vec<String> = cfg.multilevel.functionals.iter().map(|f| f.label(&names)).collect();

    super::with_workers(cfg.workers, || {
        let reference = reference_run(cfg, &maps, y, Level::new(ref_level), ref_iterations)?;

        let jobs: Vec<(Method, usize, usize)> = [Method::Pmcmc, Method::Mlpmcmc]
            .into_iter()
            .flat_map(|m| (0..points.len()).flat_map(move |p| (0..cfg.study.repeats).map(move |r| (m, p, r))))
            .collect();
        let results: Vec<(Vec<f64>, f64)> = jobs
            .par_iter()
            .map(|&(method, p, r)| {
                let pt = &points[p];
                match method {
                    Method::Pmcmc => {
                        let run = level_run(
                            cfg,
                            &model,
                            maps.get(Level::new(pt.level)),
                            y,
                            pt.single_iterations,
                            false,
                            &cfg.multilevel.functionals,
                            &[tag::SINGLE_LEVEL, p as u64, r as u64],
                        )?;
                        Ok((run.estimate.fine.clone(), run.cost().total(&cfg.cost)))
                    }
                    Method::Mlpmcmc => {
                        let run = multilevel_with(
                            cfg,
                            &model,
                            &maps,
                            y,
                            pt.allocation.clone(),
                            &cfg.multilevel.functionals,
                            &[tag::MULTILEVEL, p as u64, r as u64],
                        )?;
                        Ok((run.estimate.total.clone(), run.estimate.cost.total(&cfg.cost)))
                    }
                }
            })
            .collect::<Result<_, HarnessError>>()?;

        let mut runs = Vec::new();
        for (&(method, p, r), (est, cost)) in jobs.iter().zip(&results) {
            for (k, label) in labels.iter().enumerate() {
                runs.push(RunRow {
                    method,
                    point: points[p].level,
                    epsilon: points[p].epsilon,
                    repeat: r,
                    functional: label.clone(),
                    estimate: est[k],
                    cost: *cost,
                });
            }
        }
        let mse = summarize(&runs, &reference);
        let rates = fit_all(&mse)?;
        Ok(StudyResult { reference, runs, mse, rates })
    })
}

/// MSE against the reference, split into variance and squared bias.
pub fn summarize(runs: &[RunRow], reference: &Reference) -> Vec<MsePoint> {
    let mut keys: Vec<(Method, u32, String)> = runs.iter().map(|r| (r.method, r.point, r.functional.clone())).collect();
    keys.sort();
    keys.dedup();
    let mut out = Vec::new();
    for (method, point, functional) in keys {
        let Some(k) = reference.functionals.iter().position(|f| *f == functional) else { continue };
        let rows: Vec<&RunRow> =
            runs.iter().filter(|r| r.method == method && r.point == point && r.functional == functional).collect();
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r.estimate).sum::<f64>() / n;
        let variance = rows.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>() / n;
        let bias_sq = (mean - reference.values[k]).powi(2);
        let mse = rows.iter().map(|r| (r.estimate - reference.values[k]).powi(2)).sum::<f64>() / n;
        out.push(MsePoint {
            method,
            point,
            epsilon: rows[0].epsilon,
            functional,
            mse,
            variance,
            bias_sq,
            mean_cost: rows.iter().map(|r| r.cost).sum::<f64>() / n,
        });
    }
    out
}

pub fn fit_all(mse: &[MsePoint]) -> Result<Vec<RateRow>, HarnessError> {
    let mut keys: Vec<(Method, String)> = mse.iter().map(|m| (m.method, m.functional.clone())).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(method, functional)| {
            let pts: Vec<(f64, f64)> = mse
                .iter()
                .filter(|m| m.method == method && m.functional == functional)
                .map(|m| (m.mse.ln(), m.mean_cost.ln()))
                .collect();
            Ok(RateRow { method, functional, fit: fit_rate(&pts)? })
        })
        .collect()
}

pub const MSE_HEADER: [&str; 8] = ["method", "point", "epsilon", "functional", "mse", "variance", "bias_sq", "mean_cost"];
pub const RUNS_HEADER: [&str; 7] = ["method", "point", "epsilon", "repeat", "functional", "estimate", "cost"];
pub const RATES_HEADER: [&str; 6] = ["method", "functional", "slope", "intercept", "residual", "points"];
pub const REFERENCE_HEADER: [&str; 5] = ["functional", "estimate", "std_error", "level", "iterations"];

pub fn write_mse(path: &Path, mse: &[MsePoint]) -> Result<(), HarnessError> {
    write_table(
        path,
        &MSE_HEADER,
        mse.iter().map(|m| {
            vec![
                m.method.as_str().to_string(),
                m.point.to_string(),
                m.epsilon.to_string(),
                m.functional.clone(),
                m.mse.to_string(),
                m.variance.to_string(),
                m.bias_sq.to_string(),
                m.mean_cost.to_string(),
            ]
        }),
    )
}

pub fn write_rates(path: &Path, rates: &[RateRow]) -> Result<(), HarnessError> {
    write_table(
        path,
        &RATES_HEADER,
        rates.iter().map(|r| {
            vec![
                r.method.as_str().to_string(),
                r.functional.clone(),
                r.fit.slope.to_string(),
                r.fit.intercept.to_string(),
                r.fit.residual.to_string(),
                r.fit.points.len().to_string(),
            ]
        }),
    )
}

pub fn write_study(result: &StudyResult, dir: &Path) -> Result<(), HarnessError> {
    write_table(
        &dir.join("study_runs.csv"),
        &RUNS_HEADER,
        result.runs.iter().map(|r| {
            vec![
                r.method.as_str().to_string(),
                r.point.to_string(),
                r.epsilon.to_string(),
                r.repeat.to_string(),
                r.functional.clone(),
                r.estimate.to_string(),
                r.cost.to_string(),
            ]
        }),
    )?;
    let rf = &result.reference;
    write_table(
        &dir.join("reference.csv"),
        &REFERENCE_HEADER,
        rf.functionals.iter().enumerate().map(|(k, f)| {
            vec![f.clone(), rf.values[k].to_string(), rf.std_errors[k].to_string(), rf.level.to_string(), rf.iterations.to_string()]
        }),
    )?;
    write_mse(&dir.join("study_mse.csv"), &result.mse)?;
    write_rates(&dir.join("rates.csv"), &result.rates)
}

pub fn read_mse(path: &Path) -> Result<Vec<MsePoint>, HarnessError> {
    let (header, rows) = read_table(path)?;
    if header != MSE_HEADER {
        return Err(HarnessError::MalformedCsv(format!("{}: unexpected header", path.display())));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| HarnessError::MalformedCsv(format!("bad number `{s}`")));
    rows.iter()
        .map(|r| {
            Ok(MsePoint {
                method: Method::parse(&r[0]).ok_or_else(|| HarnessError::MalformedCsv(format!("unknown method `{}`", r[0])))?,
                point: r[1].parse().map_err(|_| HarnessError::MalformedCsv(format!("bad point `{}`", r[1])))?,
                epsilon: num(&r[2])?,
                functional: r[3].clone(),
                mse: num(&r[4])?,
                variance: num(&r[5])?,
                bias_sq: num(&r[6])?,
                mean_cost: num(&r[7])?,
            })
        })
        .collect()
}

/// Refits rates from a completed study directory.
pub fn rates_from_dir(dir: &Path) -> Result<Vec<RateRow>, HarnessError> {
    let rates = fit_all(&read_mse(&dir.join("study_mse.csv"))?)?;
    write_rates(&dir.join("rates.csv"), &rates)?;
    Ok(rates)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_is_recovered() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (-(i as f64), 2.0 + 1.5 * i as f64)).collect();
        let fit = fit_rate(&pts).unwrap();
        assert!((fit.slope + 1.5).abs() < 1e-12);
        assert!((fit.intercept - 2.0).abs() < 1e-12);
        assert!(fit.residual < 1e-12);
        assert!(matches!(fit_rate(&pts[..2]), Err(HarnessError::InsufficientPoints { .. })));
    }

    #[test]
    fn mse_decomposes() {
        let reference = Reference { level: 5, iterations: 1, functionals: vec!["theta".into()], values: vec![1.0], std_errors: vec![0.0] };
        let runs: Vec<RunRow> = [0.7, 1.4, 1.1, 0.95]
            .iter()
            .enumerate()
            .map(|(r, &e)| RunRow { method: Method::Pmcmc, point: 3, epsilon: 0.3, repeat: r, functional: "theta".into(), estimate: e, cost: 10.0 + r as f64 })
            .collect();
        let m = &summarize(&runs, &reference)[0];
        assert!((m.mse - (m.variance + m.bias_sq)).abs() < 1e-15);
        assert_eq!(m.mean_cost, 11.5);
    }
}
