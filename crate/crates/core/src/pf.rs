//! Bootstrap particle filters over noise blocks.
//!
//! Each particle owns a sequence of noise blocks `z_1, ..., z_t`. Block `t` is
//! mapped independently through the unit-interval fGN map, so particle
//! states evolve as a Markov chain and are carried forward rather than
//! recomputed from `x_0`. [`pf_single`] weights by `g(y_t | x_t)`;
//! [`pf_coupled`] also carries the coarse state driven by the pairwise-summed
//! increments and weights by the larger of the two observation densities.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostLedger;
use crate::fgn::{FftWorkspace, FgnError, Level, SpectralEmbedding};
use crate::rng::{stream, tag};
use crate::sde::{unit_map, ModelSpec, ParamVector, SdeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PfError {
    #[error("all particle weights vanished at t = {t}")]
    DegenerateWeights { t: usize },
    #[error("filter needs at least one particle")]
    NoParticles,
    #[error("no observations")]
    NoObservations,
    #[error("level {0} has no coarser level to couple with")]
    NoCoarserLevel(Level),
    #[error("block embedding has grid {actual}, level needs {expected}")]
    EmbeddingMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Fgn(#[from] FgnError),
    #[error(transparent)]
    Sde(#[from] SdeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Resampling {
    /// Multinomial resampling after every step.
    #[default]
    EveryStep,
    /// Resample only when ESS drops below `ess_fraction * N`.
    Adaptive { ess_fraction: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub particles: usize,
    #[serde(default)]
    pub resampling: Resampling,
    #[serde(default)]
    pub diagnostics: bool,
}

impl FilterConfig {
    pub fn new(particles: usize) -> Self {
        Self { particles, resampling: Resampling::EveryStep, diagnostics: false }
    }
}

/// Log of the normalizing-constant estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConstEstimate {
    pub log_value: f64,
}

/// Noise blocks of one ancestral path, concatenated in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDraw {
    pub level: Level,
    pub horizon: usize,
    pub z: Vec<f64>,
}

impl TrajectoryDraw {
    pub fn block(&self, t: usize) -> &[f64] {
        let b = self.level.block_len();
        &self.z[(t - 1) * b..t * b]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.z.chunks_exact(self.level.block_len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: usize,
    pub ess: f64,
    pub log_weight_spread: f64,
    pub resampled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutput {
    pub log_norm_const: NormConstEstimate,
    pub trajectory: TrajectoryDraw,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Multinomial resampling from normalized weights; indices are 0-based.
pub fn resample_multinomial<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<usize>, PfError> {
    let total: f64 = weights.iter().filter(|w| w.is_finite() && **w > 0.0).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(PfError::DegenerateWeights { t: 0 });
    }
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        if w.is_finite() && w > 0.0 {
            acc += w / total;
        }
        cdf.push(acc);
    }
    let last = weights.iter().rposition(|w| w.is_finite() && *w > 0.0).unwrap_or(0);
    Ok((0..weights.len())
        .map(|_| {
            let u: f64 = rng.random();
            cdf.partition_point(|&c| c <= u).min(last)
        })
        .collect())
}

/// Max-coupled log weight `log max(g_fine, g_coarse)`.
#[inline]
pub fn coupled_log_weight(log_fine: f64, log_coarse: f64) -> f64 {
    log_fine.max(log_coarse)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn normalized(log_w: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_w);
    log_w.iter().map(|l| (l - lse).exp()).collect()
}

fn ess(log_w: &[f64]) -> f64 {
    let w = normalized(log_w);
    1.0 / w.iter().map(|x| x * x).sum::<f64>()
}

/// Particle states, normalized log weights and block ancestry after a pass.
#[derive(Clone, Debug)]
pub struct ParticleSystem {
    pub level: Level,
    pub particles: usize,
    pub t: usize,
    pub fine: Vec<f64>,
    pub coarse: Option<Vec<f64>>,
    /// Normalized log weights at time `t`.
    pub log_weights: Vec<f64>,
    // pool[t - 1] holds the N blocks drawn at time t.
    pool: Vec<Vec<f64>>,
    // parents[t - 1][i]: index at time t - 1 of particle i's ancestor (t >= 2).
    parents: Vec<Vec<usize>>,
}

impl ParticleSystem {
    /// Block held at time `t` by particle `i`.
    pub fn block(&self, t: usize, i: usize) -> &[f64] {
        let b = self.level.block_len();
        &self.pool[t - 1][i * b..(i + 1) * b]
    }

    /// Ancestor index at time `t - 1` of particle `i` at time `t`.
    pub fn parent(&self, t: usize, i: usize) -> usize {
        self.parents[t - 1][i]
    }

    /// Ancestral noise path of particle `i` at the final time.
    pub fn lineage(&self, mut i: usize) -> TrajectoryDraw {
        let b = self.level.block_len();
        let mut z = vec![0.0; self.t * b];
        for t in (1..=self.t).rev() {
            z[(t - 1) * b..t * b].copy_from_slice(self.block(t, i));
            if t > 1 {
                i = self.parent(t, i);
            }
        }
        TrajectoryDraw { level: self.level, horizon: self.t, z }
    }

    /// Draws one index by the final weights and returns its noise path.
    pub fn trace_trajectory<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TrajectoryDraw, PfError> {
        let w = normalized(&self.log_weights);
        let idx = resample_multinomial(&w, rng).map_err(|_| PfError::DegenerateWeights { t: self.t })?;
        Ok(self.lineage(idx[0]))
    }
}

/// Filter associated with the single-level pseudo target.
#[allow(clippy::too_many_arguments)]
pub fn pf_single<R: Rng + ?Sized>(
    model: &ModelSpec,
    theta: &ParamVector,
    emb: &SpectralEmbedding,
    level: Level,
    cfg: &FilterConfig,
    y: &[f64],
    rng: &mut R,
    ledger: &mut CostLedger,
) -> Result<FilterOutput, PfError> {
    run_filter(model, theta, emb, level, false, cfg, y, rng, ledger)
}

/// Filter associated with the max-coupled target at `level` and `level - 1`.
#[allow(clippy::too_many_arguments)]
pub fn pf_coupled<R: Rng + ?Sized>(
    model: &ModelSpec,
    theta: &ParamVector,
    emb: &SpectralEmbedding,
    level: Level,
    cfg: &FilterConfig,
    y: &[f64],
    rng: &mut R,
    ledger: &mut CostLedger,
) -> Result<FilterOutput, PfError> {
    run_filter(model, theta, emb, level, true, cfg, y, rng, ledger)
}

/// Runs a full pass and returns the particle system with its log-evidence.
#[allow(clippy::too_many_arguments)]
pub fn filter_pass<R: Rng + ?Sized>(
    model: &ModelSpec,
    theta: &ParamVector,
    emb: &SpectralEmbedding,
    level: Level,
    coupled: bool,
    cfg: &FilterConfig,
    y: &[f64],
    rng: &mut R,
    ledger: &mut CostLedger,
) -> Result<(ParticleSystem, f64, Vec<StepDiagnostics>, u64), PfError> {
    let n = cfg.particles;
    if n == 0 {
        return Err(PfError::NoParticles);
    }
    if y.is_empty() {
        return Err(PfError::NoObservations);
    }
    let m = level.steps_per_unit();
    if emb.grid() != m {
        return Err(PfError::EmbeddingMismatch { expected: m, actual: emb.grid() });
    }
    let coarse_level = if coupled { Some(level.coarser().ok_or(PfError::NoCoarserLevel(level))?) } else { None };
    let base: u64 = rng.random();
    let b = level.block_len();
    let scale = level.mesh().powf(emb.hurst().value());
    let x0 = model.x0(theta);

    let mut sys = ParticleSystem {
        level,
        particles: n,
        t: 0,
        fine: vec![x0; n],
        coarse: coarse_level.map(|_| vec![x0; n]),
        log_weights: vec![-(n as f64).ln(); n],
        pool: Vec::with_capacity(y.len()),
        parents: Vec::with_capacity(y.len()),
    };
    let mut ws = FftWorkspace::default();
    let mut increments = vec![0.0; m];
    let mut coarse_inc = vec![0.0; m / 2];
    let mut step_log_w = vec![0.0; n];
    let mut log_c = 0.0;
    let mut diagnostics = Vec::new();

    for (ti, &obs) in y.iter().enumerate() {
        let t = ti + 1;
        let mut resampled = false;
        let parents: Vec<usize> = if t == 1 {
            (0..n).collect()
        } else {
            let do_resample = match cfg.resampling {
                Resampling::EveryStep => true,
                Resampling::Adaptive { ess_fraction } => ess(&sys.log_weights) < ess_fraction * n as f64,
            };
            if do_resample {
                resampled = true;
                let w = normalized(&sys.log_weights);
                let mut sel_rng = stream(base, &[t as u64, tag::SELECTION]);
                let idx = resample_multinomial(&w, &mut sel_rng).map_err(|_| PfError::DegenerateWeights { t: t - 1 })?;
                ledger.record_resampling(n);
                sys.log_weights.iter_mut().for_each(|l| *l = -(n as f64).ln());
                idx
            } else {
                (0..n).collect()
            }
        };
        if resampled {
            sys.fine = parents.iter().map(|&p| sys.fine[p]).collect();
            if let Some(c) = sys.coarse.as_mut() {
                *c = parents.iter().map(|&p| c[p]).collect();
            }
        }

        let mut pool = vec![0.0; n * b];
        for i in 0..n {
            let z = &mut pool[i * b..(i + 1) * b];
            let mut prng = stream(base, &[t as u64, i as u64]);
            for v in z.iter_mut() {
                *v = prng.sample(StandardNormal);
            }
            emb.map_into(z, scale, &mut increments, &mut ws, ledger)?;
            let fine = unit_map(model, theta, sys.fine[i], &increments, level);
            ledger.record_euler(m);
            let mut lw = match fine {
                Ok(x) => {
                    sys.fine[i] = x;
                    model.log_obs(theta, obs, x)
                }
                Err(SdeError::NonFiniteState) => {
                    sys.fine[i] = f64::NAN;
                    f64::NEG_INFINITY
                }
                Err(e) => return Err(e.into()),
            };
            if let (Some(cl), Some(coarse)) = (coarse_level, sys.coarse.as_mut()) {
                for (c, pair) in coarse_inc.iter_mut().zip(increments.chunks_exact(2)) {
                    *c = pair[0] + pair[1];
                }
                let lc = match unit_map(model, theta, coarse[i], &coarse_inc, cl) {
                    Ok(x) => {
                        coarse[i] = x;
                        model.log_obs(theta, obs, x)
                    }
                    Err(SdeError::NonFiniteState) => {
                        coarse[i] = f64::NAN;
                        f64::NEG_INFINITY
                    }
                    Err(e) => return Err(e.into()),
                };
                ledger.record_euler(m / 2);
                lw = coupled_log_weight(lw, lc);
            }
            step_log_w[i] = if lw.is_nan() { f64::NEG_INFINITY } else { lw };
        }

        let unnorm: Vec<f64> = sys.log_weights.iter().zip(&step_log_w).map(|(a, b)| a + b).collect();
        let lse = log_sum_exp(&unnorm);
        if !lse.is_finite() {
            return Err(PfError::DegenerateWeights { t });
        }
        log_c += lse;
        sys.log_weights = unnorm.iter().map(|l| l - lse).collect();
        sys.pool.push(pool);
        sys.parents.push(parents);
        sys.t = t;

        if cfg.diagnostics {
            let finite: Vec<f64> = step_log_w.iter().copied().filter(|v| v.is_finite()).collect();
            let spread = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - finite.iter().copied().fold(f64::INFINITY, f64::min);
            diagnostics.push(StepDiagnostics { t, ess: ess(&sys.log_weights), log_weight_spread: spread, resampled });
        }
    }
    Ok((sys, log_c, diagnostics, base))
}

#[allow(clippy::too_many_arguments)]
fn run_filter<R: Rng + ?Sized>(
    model: &ModelSpec,
    theta: &ParamVector,
    emb: &SpectralEmbedding,
    level: Level,
    coupled: bool,
    cfg: &FilterConfig,
    y: &[f64],
    rng: &mut R,
    ledger: &mut CostLedger,
) -> Result<FilterOutput, PfError> {
    let (sys, log_c, diagnostics, base) = filter_pass(model, theta, emb, level, coupled, cfg, y, rng, ledger)?;
    let mut sel = stream(base, &[y.len() as u64 + 1, tag::SELECTION]);
    let trajectory = sys.trace_trajectory(&mut sel)?;
    ledger.record_resampling(1);
    Ok(FilterOutput { log_norm_const: NormConstEstimate { log_value: log_c }, trajectory, diagnostics })
}
