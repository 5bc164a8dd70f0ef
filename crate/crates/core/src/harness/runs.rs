//! Single-level and multilevel runs and their outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::io::{ingest_csv, write_series, write_table};
use super::HarnessError;
use crate::cost::CostLedger;
use crate::fgn::{build_embedding, fgn_autocov, Level};
use crate::ml::{allocate, telescope, weigh_records, Allocation, Functional, LevelEstimate, LevelMaps, MultilevelEstimate, WeightedRecords};
use crate::pmcmc::{pmmh_coupled, pmmh_single, write_sidecar_file, Chain, ChainRecord};
use crate::rng::{stream, tag};
use crate::sde::{synth_generate, ModelSpec, SynthData};

pub struct Dataset {
    pub y: Vec<f64>,
    pub synth: Option<SynthData>,
}

/// Observations from `data.path`, or simulated from `model.truth`.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    if let Some(p) = &cfg.data.path {
        return Ok(Dataset { y: ingest_csv(p)?, synth: None });
    }
    let synth = synth_generate(
        &cfg.model(),
        &cfg.truth(),
        cfg.hurst(),
        Level::new(cfg.data.sim_level),
        cfg.data.horizon,
        &mut stream(cfg.seed, &[tag::SYNTH]),
    )?;
    Ok(Dataset { y: synth.y.clone(), synth: Some(synth) })
}

pub fn write_dataset(data: &Dataset, dir: &Path, with_truth: bool) -> Result<(), HarnessError> {
    write_series(&dir.join("data.csv"), "y", &data.y)?;
    if let (true, Some(s)) = (with_truth, &data.synth) {
        write_series(&dir.join("truth.csv"), "x", &s.truth.skeleton)?;
    }
    Ok(())
}

/// Path maps per level, built once and shared across runs.
#[derive(Default)]
pub struct MapCache(BTreeMap<u32, Arc<LevelMaps>>);

impl MapCache {
    pub fn build(cfg: &ExperimentConfig, levels: impl IntoIterator<Item = u32>, horizon: usize) -> Result<Self, HarnessError> {
        let mut out = BTreeMap::new();
        for l in levels {
            if let std::collections::btree_map::Entry::Vacant(e) = out.entry(l) {
                e.insert(Arc::new(LevelMaps::new(cfg.hurst(), Level::new(l), horizon, cfg.multilevel.true_path)?));
            }
        }
        Ok(Self(out))
    }

    pub fn get(&self, level: Level) -> &LevelMaps {
        &self.0[&level.index()]
    }
}

fn thinned(records: &[ChainRecord], thin: usize) -> Vec<ChainRecord> {
    records.iter().step_by(thin.max(1)).cloned().collect()
}

pub struct LevelRun {
    pub level: Level,
    pub chain: Chain,
    pub weighted: WeightedRecords,
    pub estimate: LevelEstimate,
}

impl LevelRun {
    pub fn cost(&self) -> CostLedger {
        self.estimate.cost
    }
}

/// Runs one chain and weights its kept records.
#[allow(clippy::too_many_arguments)]
pub fn level_run(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    maps: &LevelMaps,
    y: &[f64],
    iterations: usize,
    coupled: bool,
    functionals: &[Functional],
    seed_path: &[u64],
) -> Result<LevelRun, HarnessError> {
    let level = maps.level;
    let mcmc = cfg.mcmc_config(iterations, y.len());
    let mut rng = stream(cfg.seed, seed_path);
    let chain = if coupled {
        pmmh_coupled(model, &maps.pseudo, level, &mcmc, y, &mut rng)?
    } else {
        pmmh_single(model, &maps.pseudo, level, &mcmc, y, &mut rng)?
    };
    let kept = thinned(chain.kept(cfg.mcmc.burn_in), cfg.multilevel.thin);
    let weighted = weigh_records(model, maps, &kept, y, functionals, coupled)?;
    let estimate = LevelEstimate::from_weighted(level, &weighted, chain.ledger)?;
    Ok(LevelRun { level, chain, weighted, estimate })
}

pub struct SingleLevelRun {
    pub run: LevelRun,
    pub functionals: Vec<Functional>,
    /// Plain averages over the kept records.
    pub uncorrected: Vec<f64>,
}

fn with_states(functionals: &[Functional], horizon: usize) -> Vec<Functional> {
    let mut f = functionals.to_vec();
    f.extend((1..=horizon).map(Functional::State));
    f
}

pub fn run_single_level(cfg: &ExperimentConfig, y: &[f64]) -> Result<SingleLevelRun, HarnessError> {
    let level = cfg.single_level();
    let maps = MapCache::build(cfg, [level.index()], y.len())?;
    let functionals = with_states(&cfg.multilevel.functionals, y.len());
    let model = cfg.model();
    let run = super::with_workers(cfg.workers, || {
        level_run(cfg, &model, maps.get(level), y, cfg.mcmc.iterations, false, &functionals, &[tag::SINGLE_LEVEL])
    })?;
    let uncorrected = run.weighted.phi_fine.iter().map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    Ok(SingleLevelRun { run, functionals, uncorrected })
}

pub fn write_single_level(cfg: &ExperimentConfig, out: &SingleLevelRun, dir: &Path) -> Result<(), HarnessError> {
    let model = cfg.model();
    let names = model.param_names();
    let chain = &out.run.chain;
    let path = dir.join("chain.csv");
    let file = std::fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    chain.write_csv(&names, std::io::BufWriter::new(file))?;
    write_sidecar_file(chain, &dir.join("chain.bin"))?;

    let n_user = cfg.multilevel.functionals.len();
    let labels: Vec<String> = cfg.multilevel.functionals.iter().map(|f| f.label(&names)).collect();
    let mut header = vec!["record".to_string(), "log_j".to_string()];
    header.extend(labels.iter().cloned());
    let w = &out.run.weighted;
    write_table(
        &dir.join("weights.csv"),
        &header.iter().map(String::as_str).collect::<Vec<_>>(),
        (0..w.log_j_fine.len()).map(|i| {
            let mut row = vec![i.to_string(), w.log_j_fine[i].to_string()];
            row.extend(w.phi_fine[..n_user].iter().map(|c| c[i].to_string()));
            row
        }),
    )?;
    write_table(
        &dir.join("summary.csv"),
        &["functional", "corrected", "uncorrected", "ess", "records", "acceptance_rate", "cost"],
        (0..n_user).map(|k| {
            vec![
                labels[k].clone(),
                out.run.estimate.fine[k].to_string(),
                out.uncorrected[k].to_string(),
                out.run.estimate.ess_fine.to_string(),
                out.run.estimate.records.to_string(),
                chain.acceptance_rate().to_string(),
                out.run.cost().total(&cfg.cost).to_string(),
            ]
        }),
    )?;
    write_table(
        &dir.join("states.csv"),
        &["t", "corrected", "uncorrected"],
        (n_user..out.functionals.len()).map(|k| {
            vec![(k - n_user + 1).to_string(), out.run.estimate.fine[k].to_string(), out.uncorrected[k].to_string()]
        }),
    )
}

/// Allocation from explicit iterations or from `ε`.
pub fn multilevel_allocation(cfg: &ExperimentConfig, horizon: usize, epsilon: f64, base_m: f64) -> Result<Allocation, HarnessError> {
    if let Some(its) = &cfg.multilevel.iterations {
        let l_max = cfg.levels.min + its.len() as u32 - 1;
        return Ok(Allocation {
            epsilon,
            l_min: cfg.levels.min,
            l_max,
            l_target: l_max,
            iterations: its.clone(),
            particles: cfg.particles(horizon),
        });
    }
    Ok(allocate(epsilon, cfg.rates(), cfg.levels.min, cfg.levels.max, base_m, cfg.particles(horizon))?)
}

pub struct MultilevelRun {
    pub allocation: Allocation,
    pub levels: Vec<LevelRun>,
    pub estimate: MultilevelEstimate,
}

/// Independent chains per level, telescoped. Level `l` draws from the
/// stream `seed_path ++ [l]`.
pub fn multilevel_with(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    maps: &MapCache,
    y: &[f64],
    allocation: Allocation,
    functionals: &[Functional],
    seed_path: &[u64],
) -> Result<MultilevelRun, HarnessError> {
    let jobs: Vec<(Level, usize)> = allocation.levels().collect();
    let levels: Vec<LevelRun> = jobs
        .par_iter()
        .map(|&(level, m)| {
            let mut path = seed_path.to_vec();
            path.push(level.index() as u64);
            level_run(cfg, model, maps.get(level), y, m, level.index() > allocation.l_min, functionals, &path)
        })
        .collect::<Result<_, _>>()?;
    let mut estimates = levels.iter().map(|r| r.estimate.clone());
    let base = estimates.next().expect("allocation has at least one level");
    let estimate = telescope(base, estimates.collect())?;
    Ok(MultilevelRun { allocation, levels, estimate })
}

pub fn run_multilevel(cfg: &ExperimentConfig, y: &[f64]) -> Result<MultilevelRun, HarnessError> {
    let allocation = multilevel_allocation(cfg, y.len(), cfg.multilevel.epsilon, cfg.multilevel.base_m)?;
    let maps = MapCache::build(cfg, allocation.l_min..=allocation.l_max, y.len())?;
    let model = cfg.model();
    super::with_workers(cfg.workers, || {
        multilevel_with(cfg, &model, &maps, y, allocation, &cfg.multilevel.functionals, &[tag::MULTILEVEL])
    })
}

pub fn write_multilevel(cfg: &ExperimentConfig, out: &MultilevelRun, dir: &Path) -> Result<(), HarnessError> {
    let model = cfg.model();
    let names = model.param_names();
    let labels: Vec<String> = cfg.multilevel.functionals.iter().map(|f| f.label(&names)).collect();
    for run in &out.levels {
        let w = &run.weighted;
        let mut header = vec!["record".to_string()];
        header.extend(names.iter().map(|s| s.to_string()));
        header.extend(["log_j_fine".into(), "log_j_coarse".into()]);
        header.extend(labels.iter().map(|l| format!("{l}_fine")));
        header.extend(labels.iter().map(|l| format!("{l}_coarse")));
        let kept = thinned(run.chain.kept(cfg.mcmc.burn_in), cfg.multilevel.thin);
        write_table(
            &dir.join(format!("level_{}.csv", run.level.index())),
            &header.iter().map(String::as_str).collect::<Vec<_>>(),
            kept.iter().enumerate().map(|(i, r)| {
                let mut row = vec![i.to_string()];
                row.extend(r.theta.0.iter().map(|v| v.to_string()));
                row.push(w.log_j_fine[i].to_string());
                row.push(w.log_j_coarse.as_ref().map_or(String::new(), |c| c[i].to_string()));
                row.extend(w.phi_fine.iter().map(|c| c[i].to_string()));
                match &w.phi_coarse {
                    Some(cols) => row.extend(cols.iter().map(|c| c[i].to_string())),
                    None => row.extend(labels.iter().map(|_| String::new())),
                }
                row
            }),
        )?;
    }
    write_table(
        &dir.join("ml_summary.csv"),
        &["level", "functional", "fine", "coarse", "increment", "ess_fine", "ess_coarse", "iterations", "cost"],
        out.levels.iter().flat_map(|run| {
            let e = &run.estimate;
            let inc = e.increment();
            let cost = run.cost().total(&cfg.cost);
            let iterations = run.chain.iterations();
            labels.iter().enumerate().map(move |(k, l)| {
                vec![
                    e.level.to_string(),
                    l.clone(),
                    e.fine[k].to_string(),
                    e.coarse.as_ref().map_or(String::new(), |c| c[k].to_string()),
                    inc[k].to_string(),
                    e.ess_fine.to_string(),
                    e.ess_coarse.map_or(String::new(), |v| v.to_string()),
                    iterations.to_string(),
                    cost.to_string(),
                ]
            })
        }),
    )?;
    write_table(
        &dir.join("ml_estimate.csv"),
        &["functional", "estimate", "epsilon", "l_max", "cost"],
        labels.iter().zip(&out.estimate.total).map(|(l, v)| {
            vec![
                l.clone(),
                v.to_string(),
                out.allocation.epsilon.to_string(),
                out.allocation.l_max.to_string(),
                out.estimate.cost.total(&cfg.cost).to_string(),
            ]
        }),
    )
}

/// Autocovariance and circulant spectrum diagnostics for each level.
pub fn fgn_check(cfg: &ExperimentConfig, dir: &Path) -> Result<(), HarnessError> {
    let h = cfg.hurst();
    let mut spectrum = Vec::new();
    let mut summary = Vec::new();
    for l in cfg.levels.min..=cfg.levels.max {
        let m = Level::new(l).steps_per_unit();
        let emb = build_embedding(h, m)?;
        let eig = emb.eigenvalues();
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        summary.push(vec![l.to_string(), m.to_string(), min.to_string(), eig.iter().sum::<f64>().to_string()]);
        spectrum.extend(eig.iter().enumerate().map(|(k, v)| vec![l.to_string(), k.to_string(), v.to_string()]));
    }
    write_table(&dir.join("fgn_eigenvalues.csv"), &["level", "k", "eigenvalue"], spectrum)?;
    write_table(&dir.join("fgn_levels.csv"), &["level", "grid", "min_eigenvalue", "eigenvalue_sum"], summary)?;
    write_table(
        &dir.join("fgn_autocov.csv"),
        &["lag", "autocov"],
        (0..=20).map(|k| vec![k.to_string(), fgn_autocov(h, k).to_string()]),
    )
}
