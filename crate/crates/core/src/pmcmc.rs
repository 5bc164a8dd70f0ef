//! Particle marginal Metropolis–Hastings over parameters and noise paths.

use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostLedger;
use crate::fgn::{Level, SpectralEmbedding};
use crate::pf::{pf_coupled, pf_single, FilterConfig, FilterOutput, NormConstEstimate, PfError, TrajectoryDraw};
use crate::sde::{ModelSpec, ParamVector};

#[derive(Debug, Error)]
pub enum PmcmcError {
    #[error("initial filter degenerated in {attempts} attempts")]
    InitFailed { attempts: usize, last: PfError },
    #[error("proposal has {actual} step sizes, model has {expected} parameters")]
    ProposalArity { expected: usize, actual: usize },
    #[error("proposal step sizes must be positive")]
    InvalidStep,
    #[error(transparent)]
    Filter(#[from] PfError),
    #[error("malformed sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Per-parameter random-walk step sizes on the log scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub steps: Vec<f64>,
}

impl ProposalConfig {
    pub const DEFAULT_STEP: f64 = 0.25;

    pub fn uniform(dim: usize, step: f64) -> Self {
        Self { steps: vec![step; dim] }
    }
}

pub fn propose<R: Rng + ?Sized>(theta: &ParamVector, cfg: &ProposalConfig, rng: &mut R) -> ParamVector {
    ParamVector(
        theta
            .0
            .iter()
            .zip(&cfg.steps)
            .map(|(&t, &s)| {
                let xi: f64 = rng.sample(StandardNormal);
                t * (s * xi).exp()
            })
            .collect(),
    )
}

/// Change-of-variables term for a random walk that is symmetric in `log θ`.
pub fn log_jacobian(current: &ParamVector, proposed: &ParamVector) -> f64 {
    current.0.iter().zip(&proposed.0).map(|(c, p)| (p / c).ln()).sum()
}

pub fn accept_log_ratio(log_c_new: f64, log_prior_new: f64, log_c: f64, log_prior: f64, correction: f64) -> f64 {
    let r = (log_c_new + log_prior_new) - (log_c + log_prior) + correction;
    if r.is_nan() {
        f64::NEG_INFINITY
    } else {
        r.min(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Single,
    Coupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub iterations: usize,
    pub filter: FilterConfig,
    pub proposal: ProposalConfig,
    #[serde(default = "default_retries")]
    pub init_retries: usize,
}

fn default_retries() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainRecord {
    pub theta: ParamVector,
    pub noise: Arc<TrajectoryDraw>,
    pub log_c: NormConstEstimate,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct Chain {
    pub target: Target,
    pub level: Level,
    pub particles: usize,
    pub records: Vec<ChainRecord>,
    pub accepted: usize,
    pub ledger: CostLedger,
}

impl Chain {
    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.iterations() == 0 {
            0.0
        } else {
            self.accepted as f64 / self.iterations() as f64
        }
    }

    /// Records used by estimators: iterations `1..=M` after dropping a
    /// leading `burn_in` fraction; the initialization alone when `M = 0`.
    pub fn kept(&self, burn_in: f64) -> &[ChainRecord] {
        let m = self.iterations();
        if m == 0 {
            return &self.records;
        }
        let skip = ((burn_in.clamp(0.0, 1.0) * m as f64).floor() as usize).min(m - 1);
        &self.records[1 + skip..]
    }

    pub fn write_csv<W: Write>(&self, names: &[&str], out: W) -> Result<(), PmcmcError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iteration".to_string()];
        header.extend(names.iter().map(|s| s.to_string()));
        header.extend(["log_c".into(), "accepted".into()]);
        w.write_record(&header)?;
        for (i, r) in self.records.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(r.theta.0.iter().map(|v| v.to_string()));
            row.push(r.log_c.log_value.to_string());
            row.push(u8::from(r.accepted).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Little-endian sidecar: `level, T, block_len` as `u32`, then each
    /// record's blocks in time order as `f64`.
    pub fn write_sidecar<W: Write>(&self, mut out: W) -> Result<(), PmcmcError> {
        let horizon = self.records[0].noise.horizon;
        for v in [self.level.index(), horizon as u32, self.level.block_len() as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for r in &self.records {
            for v in &r.noise.z {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

pub fn read_sidecar<R: Read>(mut input: R) -> Result<Vec<TrajectoryDraw>, PmcmcError> {
    let mut head = [0u8; 12];
    input.read_exact(&mut head)?;
    let word = |i: usize| u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().unwrap());
    let (level, horizon, block) = (Level::new(word(0)), word(1) as usize, word(2) as usize);
    if block != level.block_len() {
        return Err(PmcmcError::Sidecar(format!("block length {block} does not match {level}")));
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let rec = horizon * block * 8;
    if rec == 0 || bytes.len() % rec != 0 {
        return Err(PmcmcError::Sidecar(format!("{} payload bytes is not a whole number of records", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(rec)
        .map(|c| TrajectoryDraw {
            level,
            horizon,
            z: c.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
        })
        .collect())
}

pub fn write_sidecar_file(chain: &Chain, path: &Path) -> Result<(), PmcmcError> {
    chain.write_sidecar(io::BufWriter::new(std::fs::File::create(path)?))
}

#[allow(clippy::too_many_arguments)]
fn run_target<R: Rng + ?Sized>(
    target: Target,
    model: &ModelSpec,
    theta: &ParamVector,
    emb: &SpectralEmbedding,
    level: Level,
    filter: &FilterConfig,
    y: &[f64],
    rng: &mut R,
    ledger: &mut CostLedger,
) -> Result<FilterOutput, PfError> {
    match target {
        Target::Single => pf_single(model, theta, emb, level, filter, y, rng, ledger),
        Target::Coupled => pf_coupled(model, theta, emb, level, filter, y, rng, ledger),
    }
}

/// PMMH chain targeting the single-level pseudo posterior.
pub fn pmmh_single<R: Rng + ?Sized>(
    model: &ModelSpec,
    emb: &SpectralEmbedding,
    level: Level,
    cfg: &McmcConfig,
    y: &[f64],
    rng: &mut R,
) -> Result<Chain, PmcmcError> {
    pmmh(Target::Single, model, emb, level, cfg, y, rng)
}

/// PMMH chain targeting the max-coupled posterior at `level` and `level - 1`.
pub fn pmmh_coupled<R: Rng + ?Sized>(
    model: &ModelSpec,
    emb: &SpectralEmbedding,
    level: Level,
    cfg: &McmcConfig,
    y: &[f64],
    rng: &mut R,
) -> Result<Chain, PmcmcError> {
    if level.coarser().is_none() {
        return Err(PfError::NoCoarserLevel(level).into());
    }
    pmmh(Target::Coupled, model, emb, level, cfg, y, rng)
}

pub fn pmmh<R: Rng + ?Sized>(
    target: Target,
    model: &ModelSpec,
    emb: &SpectralEmbedding,
    level: Level,
    cfg: &McmcConfig,
    y: &[f64],
    rng: &mut R,
) -> Result<Chain, PmcmcError> {
    if cfg.proposal.steps.len() != model.dim() {
        return Err(PmcmcError::ProposalArity { expected: model.dim(), actual: cfg.proposal.steps.len() });
    }
    if cfg.proposal.steps.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(PmcmcError::InvalidStep);
    }
    let mut ledger = CostLedger::default();
    let attempts = cfg.init_retries.max(1);
    let mut init = None;
    let mut last = PfError::NoParticles;
    for _ in 0..attempts {
        let theta = model.sample_prior(rng);
        match run_target(target, model, &theta, emb, level, &cfg.filter, y, rng, &mut ledger) {
            Ok(out) => {
                init = Some(ChainRecord {
                    theta,
                    noise: Arc::new(out.trajectory),
                    log_c: out.log_norm_const,
                    accepted: true,
                });
                break;
            }
            Err(e @ PfError::DegenerateWeights { .. }) => last = e,
            Err(e) => return Err(e.into()),
        }
    }
    let Some(init) = init else {
        return Err(PmcmcError::InitFailed { attempts, last });
    };

    let mut records = Vec::with_capacity(cfg.iterations + 1);
    let mut log_prior = model.log_prior(&init.theta);
    records.push(init);
    let mut accepted = 0;
    for _ in 0..cfg.iterations {
        let cur = records.last().unwrap();
        let proposed = propose(&cur.theta, &cfg.proposal, rng);
        let lp_new = model.log_prior(&proposed);
        let mut next = None;
        if lp_new.is_finite() && proposed.is_finite() {
            match run_target(target, model, &proposed, emb, level, &cfg.filter, y, rng, &mut ledger) {
                Ok(out) => {
                    let a = accept_log_ratio(
                        out.log_norm_const.log_value,
                        lp_new,
                        cur.log_c.log_value,
                        log_prior,
                        log_jacobian(&cur.theta, &proposed),
                    );
                    let u: f64 = rng.random();
                    if u < a.exp() {
                        next = Some(ChainRecord {
                            theta: proposed,
                            noise: Arc::new(out.trajectory),
                            log_c: out.log_norm_const,
                            accepted: true,
                        });
                    }
                }
                Err(PfError::DegenerateWeights { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let rec = match next {
            Some(r) => {
                accepted += 1;
                log_prior = lp_new;
                r
            }
            None => ChainRecord { accepted: false, ..cur.clone() },
        };
        records.push(rec);
    }
    Ok(Chain { target, level, particles: cfg.filter.particles, records, accepted, ledger })
}
