//! Importance-weight corrections and the multilevel estimator.
//!
//! Chains target pseudo-increment posteriors. Each stored record is mapped
//! to a true fBM path after the fact, and the ratio of true to pseudo
//! observation likelihoods reweights the record. At the coarsest level the
//! weight is `J0`; at a coupled level `l` the fine and coarse weights share
//! the per-step max denominator used by the coupled filter.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostLedger;
use crate::fgn::{
    build_embedding, coarsen, full_path_with, pseudo_path_with, CausalPathMap, FftWorkspace, FgnError, HurstParam,
    IncrementPath, Level, SpectralEmbedding,
};
use crate::pf::{coupled_log_weight, TrajectoryDraw};
use crate::pmcmc::ChainRecord;
use crate::sde::{skeleton_map, ModelSpec, ParamVector, SdeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlError {
    #[error("non-finite importance weight")]
    NonFiniteWeight,
    #[error("all importance weights vanished")]
    AllWeightsDegenerate,
    #[error("invalid allocation rates: {0}")]
    InvalidRates(String),
    #[error("level {0} missing from the telescope")]
    MissingLevel(u32),
    #[error("no records to weight")]
    NoRecords,
    #[error("trajectory has level {actual}, maps are for {expected}")]
    LevelMismatch { expected: Level, actual: Level },
    #[error(transparent)]
    Fgn(#[from] FgnError),
    #[error(transparent)]
    Sde(#[from] SdeError),
}

/// How a stored noise path is turned into a true fBM path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruePathMap {
    /// One circulant embedding over the whole horizon fed by the
    /// concatenated blocks.
    DaviesHarte,
    /// Whitens each pseudo block and re-colours it causally over the whole
    /// horizon, so the true path stays close to the pseudo path.
    #[default]
    Causal,
}

enum TrueMap {
    DaviesHarte(SpectralEmbedding),
    Causal(CausalPathMap),
}

/// Pseudo and true path maps for one level and horizon.
pub struct LevelMaps {
    pub level: Level,
    pub horizon: usize,
    pub pseudo: Arc<SpectralEmbedding>,
    true_map: TrueMap,
}

impl std::fmt::Debug for LevelMaps {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LevelMaps").field("level", &self.level).field("horizon", &self.horizon).finish()
    }
}

impl LevelMaps {
    pub fn new(h: HurstParam, level: Level, horizon: usize, kind: TruePathMap) -> Result<Self, MlError> {
        let m = level.steps_per_unit();
        let pseudo = Arc::new(build_embedding(h, m)?);
        Self::with_pseudo(pseudo, level, horizon, kind)
    }

    pub fn with_pseudo(
        pseudo: Arc<SpectralEmbedding>,
        level: Level,
        horizon: usize,
        kind: TruePathMap,
    ) -> Result<Self, MlError> {
        let h = pseudo.hurst();
        let m = level.steps_per_unit();
        let true_map = match kind {
            TruePathMap::DaviesHarte => TrueMap::DaviesHarte(build_embedding(h, horizon * m)?),
            TruePathMap::Causal => TrueMap::Causal(CausalPathMap::new(h, m, horizon)?),
        };
        Ok(Self { level, horizon, pseudo, true_map })
    }

    pub fn kind(&self) -> TruePathMap {
        match self.true_map {
            TrueMap::DaviesHarte(_) => TruePathMap::DaviesHarte,
            TrueMap::Causal(_) => TruePathMap::Causal,
        }
    }

    fn check(&self, draw: &TrajectoryDraw) -> Result<(), MlError> {
        if draw.level != self.level {
            return Err(MlError::LevelMismatch { expected: self.level, actual: draw.level });
        }
        Ok(())
    }

    pub fn pseudo_path(&self, draw: &TrajectoryDraw, ws: &mut FftWorkspace, ledger: &mut CostLedger) -> Result<IncrementPath, MlError> {
        self.check(draw)?;
        Ok(pseudo_path_with(&self.pseudo, self.level, &draw.z, ws, ledger)?)
    }

    /// True path for `draw`; `pseudo` must be the pseudo path of the same draw.
    pub fn true_path(
        &self,
        draw: &TrajectoryDraw,
        pseudo: &IncrementPath,
        ws: &mut FftWorkspace,
        ledger: &mut CostLedger,
    ) -> Result<IncrementPath, MlError> {
        self.check(draw)?;
        match &self.true_map {
            TrueMap::DaviesHarte(emb) => Ok(full_path_with(emb, self.level, &draw.z, ws, ledger)?),
            TrueMap::Causal(map) => Ok(map.apply(pseudo, ledger)?),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionWeight {
    pub log_j: f64,
}

fn log_g_sequence(model: &ModelSpec, theta: &ParamVector, xs: &[f64], y: &[f64]) -> Vec<f64> {
    xs.iter().zip(y).map(|(x, yy)| model.log_obs(theta, *yy, *x)).collect()
}

fn checked_sum(terms: impl Iterator<Item = f64>) -> Result<f64, MlError> {
    let s: f64 = terms.sum();
    if s.is_nan() || s == f64::INFINITY {
        Err(MlError::NonFiniteWeight)
    } else {
        Ok(s)
    }
}

/// Per-step log observation densities of the four coupled state sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledTerms {
    pub fine_true: Vec<f64>,
    pub coarse_true: Vec<f64>,
    pub fine_pseudo: Vec<f64>,
    pub coarse_pseudo: Vec<f64>,
}

impl CoupledTerms {
    /// Per-step `log max(g_fine, g_coarse)` on pseudo states.
    pub fn denominators(&self) -> Vec<f64> {
        self.fine_pseudo.iter().zip(&self.coarse_pseudo).map(|(f, c)| coupled_log_weight(*f, *c)).collect()
    }

    pub fn log_j_fine(&self) -> Result<f64, MlError> {
        checked_sum(self.fine_true.iter().zip(self.denominators()).map(|(n, d)| n - d))
    }

    pub fn log_j_coarse(&self) -> Result<f64, MlError> {
        checked_sum(self.coarse_true.iter().zip(self.denominators()).map(|(n, d)| n - d))
    }
}

/// Weights and true unit-time states for one chain record.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordEvaluation {
    pub log_j_fine: f64,
    pub log_j_coarse: Option<f64>,
    pub true_fine: Vec<f64>,
    pub true_coarse: Option<Vec<f64>>,
}

/// Evaluates `J0` (uncoupled) or both `J_l` weights (coupled) for one record.
pub fn evaluate_record(
    model: &ModelSpec,
    maps: &LevelMaps,
    theta: &ParamVector,
    draw: &TrajectoryDraw,
    y: &[f64],
    coupled: bool,
    ws: &mut FftWorkspace,
    ledger: &mut CostLedger,
) -> Result<RecordEvaluation, MlError> {
    let pseudo = maps.pseudo_path(draw, ws, ledger)?;
    let truth = maps.true_path(draw, &pseudo, ws, ledger)?;
    let xs_true = skeleton_map(model, theta, &truth, ledger)?;
    let xs_pseudo = skeleton_map(model, theta, &pseudo, ledger)?;
    let fine_true = log_g_sequence(model, theta, &xs_true, y);
    let fine_pseudo = log_g_sequence(model, theta, &xs_pseudo, y);
    if !coupled {
        let log_j = checked_sum(fine_true.iter().zip(&fine_pseudo).map(|(a, b)| a - b))?;
        return Ok(RecordEvaluation { log_j_fine: log_j, log_j_coarse: None, true_fine: xs_true, true_coarse: None });
    }
    let cs_true = skeleton_map(model, theta, &coarsen(&truth)?, ledger)?;
    let cs_pseudo = skeleton_map(model, theta, &coarsen(&pseudo)?, ledger)?;
    let terms = CoupledTerms {
        coarse_true: log_g_sequence(model, theta, &cs_true, y),
        coarse_pseudo: log_g_sequence(model, theta, &cs_pseudo, y),
        fine_true,
        fine_pseudo,
    };
    Ok(RecordEvaluation {
        log_j_fine: terms.log_j_fine()?,
        log_j_coarse: Some(terms.log_j_coarse()?),
        true_fine: xs_true,
        true_coarse: Some(cs_true),
    })
}

/// All four per-step log density sequences of a coupled record.
pub fn coupled_terms(
    model: &ModelSpec,
    maps: &LevelMaps,
    theta: &ParamVector,
    draw: &TrajectoryDraw,
    y: &[f64],
) -> Result<CoupledTerms, MlError> {
    let (mut ws, mut ledger) = (FftWorkspace::default(), CostLedger::default());
    let pseudo = maps.pseudo_path(draw, &mut ws, &mut ledger)?;
    let truth = maps.true_path(draw, &pseudo, &mut ws, &mut ledger)?;
    let seq = |p: &IncrementPath| -> Result<Vec<f64>, MlError> {
        Ok(log_g_sequence(model, theta, &skeleton_map(model, theta, p, &mut CostLedger::default())?, y))
    };
    Ok(CoupledTerms {
        fine_true: seq(&truth)?,
        coarse_true: seq(&coarsen(&truth)?)?,
        fine_pseudo: seq(&pseudo)?,
        coarse_pseudo: seq(&coarsen(&pseudo)?)?,
    })
}

pub fn weight_j0(
    model: &ModelSpec,
    maps: &LevelMaps,
    theta: &ParamVector,
    draw: &TrajectoryDraw,
    y: &[f64],
) -> Result<CorrectionWeight, MlError> {
    let ev = evaluate_record(model, maps, theta, draw, y, false, &mut FftWorkspace::default(), &mut CostLedger::default())?;
    Ok(CorrectionWeight { log_j: ev.log_j_fine })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Fine,
    Coarse,
}

pub fn weight_jl(
    model: &ModelSpec,
    maps: &LevelMaps,
    theta: &ParamVector,
    draw: &TrajectoryDraw,
    y: &[f64],
    which: Branch,
) -> Result<CorrectionWeight, MlError> {
    if maps.level.coarser().is_none() {
        return Err(FgnError::NoCoarserLevel.into());
    }
    let terms = coupled_terms(model, maps, theta, draw, y)?;
    let log_j = match which {
        Branch::Fine => terms.log_j_fine()?,
        Branch::Coarse => terms.log_j_coarse()?,
    };
    Ok(CorrectionWeight { log_j })
}

/// Self-normalized importance estimate and its weight ESS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnEstimate {
    pub value: f64,
    pub ess: f64,
}

/// `Σ φ_i J_i / Σ J_i` in log-sum-exp form.
pub fn self_normalized(values: &[f64], log_j: &[f64]) -> Result<SnEstimate, MlError> {
    if values.is_empty() || values.len() != log_j.len() {
        return Err(MlError::NoRecords);
    }
    let max = log_j.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(MlError::AllWeightsDegenerate);
    }
    let w: Vec<f64> = log_j.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let value = w.iter().zip(values).filter(|(wi, _)| **wi > 0.0).map(|(wi, v)| wi * v).sum::<f64>() / total;
    let ess = total * total / w.iter().map(|x| x * x).sum::<f64>();
    Ok(SnEstimate { value, ess })
}

/// Scalar test function of parameters and true unit-time states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Functional {
    Param(usize),
    State(usize),
    TerminalState,
}

impl Functional {
    pub fn eval(&self, theta: &ParamVector, states: &[f64]) -> f64 {
        match *self {
            Functional::Param(j) => theta[j],
            Functional::State(t) => states[t - 1],
            Functional::TerminalState => *states.last().unwrap_or(&f64::NAN),
        }
    }

    pub fn label(&self, names: &[&str]) -> String {
        match *self {
            Functional::Param(j) => names.get(j).map_or_else(|| format!("param{j}"), |s| s.to_string()),
            Functional::State(t) => format!("x{t}"),
            Functional::TerminalState => "x_terminal".into(),
        }
    }
}

/// Per-record weights and functional values for one level.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedRecords {
    pub log_j_fine: Vec<f64>,
    pub log_j_coarse: Option<Vec<f64>>,
    /// `phi_fine[k][i]`: functional `k` on record `i`, fine true path.
    pub phi_fine: Vec<Vec<f64>>,
    pub phi_coarse: Option<Vec<Vec<f64>>>,
    pub ledger: CostLedger,
}

/// Evaluates every record, reusing results across runs of identical
/// consecutive records.
pub fn weigh_records(
    model: &ModelSpec,
    maps: &LevelMaps,
    records: &[ChainRecord],
    y: &[f64],
    functionals: &[Functional],
    coupled: bool,
) -> Result<WeightedRecords, MlError> {
    if records.is_empty() {
        return Err(MlError::NoRecords);
    }
    let mut starts = vec![0];
    for i in 1..records.len() {
        let (a, b) = (&records[i - 1], &records[i]);
        if !(Arc::ptr_eq(&a.noise, &b.noise) && a.theta == b.theta) {
            starts.push(i);
        }
    }
    let evals: Vec<(RecordEvaluation, CostLedger)> = starts
        .par_iter()
        .map(|&i| {
            let mut ledger = CostLedger::default();
            let r = &records[i];
            evaluate_record(model, maps, &r.theta, &r.noise, y, coupled, &mut FftWorkspace::default(), &mut ledger)
                .map(|e| (e, ledger))
        })
        .collect::<Result<_, _>>()?;

    let n = records.len();
    let mut out = WeightedRecords {
        log_j_fine: Vec::with_capacity(n),
        log_j_coarse: coupled.then(|| Vec::with_capacity(n)),
        phi_fine: vec![Vec::with_capacity(n); functionals.len()],
        phi_coarse: coupled.then(|| vec![Vec::with_capacity(n); functionals.len()]),
        ledger: evals.iter().map(|(_, l)| *l).sum(),
    };
    for (k, &start) in starts.iter().enumerate() {
        let end = starts.get(k + 1).copied().unwrap_or(n);
        let (ev, _) = &evals[k];
        let theta = &records[start].theta;
        for _ in start..end {
            out.log_j_fine.push(ev.log_j_fine);
            for (f, col) in functionals.iter().zip(out.phi_fine.iter_mut()) {
                col.push(f.eval(theta, &ev.true_fine));
            }
            if let (Some(lj), Some(cols), Some(lc), Some(tc)) =
                (out.log_j_coarse.as_mut(), out.phi_coarse.as_mut(), ev.log_j_coarse, ev.true_coarse.as_ref())
            {
                lj.push(lc);
                for (f, col) in functionals.iter().zip(cols.iter_mut()) {
                    col.push(f.eval(theta, tc));
                }
            }
        }
    }
    Ok(out)
}

/// Self-normalized estimates at one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelEstimate {
    pub level: u32,
    pub records: usize,
    /// One value per functional, on the fine true path.
    pub fine: Vec<f64>,
    /// On the coarse true path; `None` at the base level.
    pub coarse: Option<Vec<f64>>,
    pub ess_fine: f64,
    pub ess_coarse: Option<f64>,
    pub cost: CostLedger,
}

impl LevelEstimate {
    pub fn from_weighted(level: Level, w: &WeightedRecords, chain_cost: CostLedger) -> Result<Self, MlError> {
        let mut fine = Vec::with_capacity(w.phi_fine.len());
        let mut ess_fine = w.log_j_fine.len() as f64;
        for col in &w.phi_fine {
            let e = self_normalized(col, &w.log_j_fine)?;
            fine.push(e.value);
            ess_fine = e.ess;
        }
        if w.phi_fine.is_empty() {
            ess_fine = self_normalized(&vec![0.0; w.log_j_fine.len()], &w.log_j_fine)?.ess;
        }
        let (coarse, ess_coarse) = match (&w.phi_coarse, &w.log_j_coarse) {
            (Some(cols), Some(lj)) => {
                let mut vals = Vec::with_capacity(cols.len());
                let mut ess = self_normalized(&vec![0.0; lj.len()], lj)?.ess;
                for col in cols {
                    let e = self_normalized(col, lj)?;
                    vals.push(e.value);
                    ess = e.ess;
                }
                (Some(vals), Some(ess))
            }
            _ => (None, None),
        };
        let mut cost = chain_cost;
        cost += w.ledger;
        Ok(Self { level: level.index(), records: w.log_j_fine.len(), fine, coarse, ess_fine, ess_coarse, cost })
    }

    /// Fine minus coarse, or the fine value at the base level.
    pub fn increment(&self) -> Vec<f64> {
        match &self.coarse {
            Some(c) => self.fine.iter().zip(c).map(|(f, c)| f - c).collect(),
            None => self.fine.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultilevelEstimate {
    pub levels: Vec<LevelEstimate>,
    pub total: Vec<f64>,
    pub cost: CostLedger,
}

/// Base-level estimate plus the fine-minus-coarse increments.
pub fn telescope(base: LevelEstimate, increments: Vec<LevelEstimate>) -> Result<MultilevelEstimate, MlError> {
    let mut total = base.fine.clone();
    let mut cost = base.cost;
    let mut expected = base.level + 1;
    for inc in &increments {
        if inc.level != expected || inc.coarse.is_none() {
            return Err(MlError::MissingLevel(expected));
        }
        for (t, d) in total.iter_mut().zip(inc.increment()) {
            *t += d;
        }
        cost += inc.cost;
        expected += 1;
    }
    let mut levels = vec![base];
    levels.extend(increments);
    Ok(MultilevelEstimate { levels, total, cost })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub epsilon: f64,
    pub l_min: u32,
    /// Finest level used, after capping at the configured maximum.
    pub l_max: u32,
    /// Finest level the bias criterion asks for.
    pub l_target: u32,
    /// Iterations per level `l_min..=l_max`.
    pub iterations: Vec<usize>,
    pub particles: usize,
}

impl Allocation {
    pub fn levels(&self) -> impl Iterator<Item = (Level, usize)> + '_ {
        self.iterations.iter().enumerate().map(|(k, &m)| (Level::new(self.l_min + k as u32), m))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5, gamma: 1.0 }
    }
}

/// Smallest level whose bias bound `Δ^α` is within `ε`.
pub fn bias_level(epsilon: f64, alpha: f64, l_min: u32) -> u32 {
    let exact = -epsilon.log2() / alpha;
    let l = (exact - 1e-9).ceil().max(0.0) as u32;
    l.max(l_min)
}

/// MLMC allocation: `L` from the bias bound (capped at `l_cap`) and
/// `M_l = ⌈K ε⁻² Δ_l^{(β+γ)/2} Σ_k Δ_k^{(β−γ)/2}⌉` with the sum over the
/// levels the bias criterion asks for.
pub fn allocate(
    epsilon: f64,
    rates: Rates,
    l_min: u32,
    l_cap: u32,
    base_m: f64,
    particles: usize,
) -> Result<Allocation, MlError> {
    let Rates { alpha, beta, gamma } = rates;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(MlError::InvalidRates(format!("epsilon {epsilon} outside (0, 1)")));
    }
    if !(alpha > 0.0 && beta > 0.0 && gamma >= 1.0) {
        return Err(MlError::InvalidRates(format!("alpha {alpha}, beta {beta}, gamma {gamma}")));
    }
    if !(base_m > 0.0) || l_cap < l_min {
        return Err(MlError::InvalidRates(format!("base M {base_m}, levels {l_min}..={l_cap}")));
    }
    let l_target = bias_level(epsilon, alpha, l_min);
    let l_max = l_target.min(l_cap);
    let mesh = |l: u32| Level::new(l).mesh();
    let sum: f64 = (l_min..=l_target).map(|k| mesh(k).powf((beta - gamma) / 2.0)).sum();
    let iterations = (l_min..=l_max)
        .map(|l| ((base_m * epsilon.powi(-2) * mesh(l).powf((beta + gamma) / 2.0) * sum).ceil() as usize).max(1))
        .collect();
    Ok(Allocation { epsilon, l_min, l_max, l_target, iterations, particles })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fgn::{fgn_autocov, sample_block};
    use crate::rng::stream;
    use crate::sde::{Diffusion, OuSettings};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn draw(level: Level, horizon: usize, seed: u64) -> TrajectoryDraw {
        let mut rng = stream(seed, &[]);
        let z = (0..horizon * level.block_len()).map(|_| rng.sample(StandardNormal)).collect();
        TrajectoryDraw { level, horizon, z }
    }

    fn ou() -> ModelSpec {
        ModelSpec::ornstein_uhlenbeck(&OuSettings::default())
    }

    fn obs(horizon: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, &[1]);
        (0..horizon).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect()
    }

    fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                l[i][j] = if i == j { (a[i][i] - s).sqrt() } else { (a[i][j] - s) / l[j][j] };
            }
        }
        l
    }

    fn toeplitz_chol(h: HurstParam, n: usize) -> Vec<Vec<f64>> {
        let a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| fgn_autocov(h, i.abs_diff(j))).collect()).collect();
        cholesky(&a)
    }

    // Independent evaluation: per-block pseudo map, Cholesky-based causal
    // map, explicit Euler loops and Gaussian densities.
    fn straight_line(
        h: HurstParam,
        level: Level,
        theta: (f64, f64),
        d: &TrajectoryDraw,
        y: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let m = level.steps_per_unit();
        let n = m * d.horizon;
        let emb = build_embedding(h, m).unwrap();
        let mut pseudo = Vec::new();
        for b in d.blocks() {
            pseudo.extend(sample_block(&emb, level, b).unwrap().values);
        }
        let scale = level.mesh().powf(h.value());
        let lm = toeplitz_chol(h, m);
        let ln = toeplitz_chol(h, n);
        let mut e = vec![0.0; n];
        for t in 0..d.horizon {
            for i in 0..m {
                let s: f64 = (0..i).map(|k| lm[i][k] * e[t * m + k]).sum();
                e[t * m + i] = (pseudo[t * m + i] / scale - s) / lm[i][i];
            }
        }
        let truth: Vec<f64> = (0..n).map(|i| scale * (0..=i).map(|k| ln[i][k] * e[k]).sum::<f64>()).collect();
        let euler = |inc: &[f64], steps: usize| -> Vec<f64> {
            let dt = 1.0 / steps as f64;
            let mut x = 0.0;
            let mut out = Vec::new();
            for (i, db) in inc.iter().enumerate() {
                x = x - theta.0 * x * dt + theta.1 * db;
                if (i + 1) % steps == 0 {
                    out.push(x);
                }
            }
            out
        };
        let pair = |v: &[f64]| -> Vec<f64> { v.chunks(2).map(|p| p[0] + p[1]).collect() };
        let logg = |xs: Vec<f64>| -> Vec<f64> {
            xs.iter().zip(y).map(|(x, yy)| -0.5 * (2.0 * std::f64::consts::PI * 0.2).ln() - (yy - x).powi(2) / 0.4).collect()
        };
        (
            logg(euler(&truth, m)),
            logg(euler(&pair(&truth), m / 2)),
            logg(euler(&pseudo, m)),
            logg(euler(&pair(&pseudo), m / 2)),
        )
    }

    #[test]
    fn j0_vanishes_for_brownian_and_single_block() {
        let model = ou();
        let theta = ParamVector(vec![1.0, 0.5]);
        let level = Level::new(4);
        for kind in [TruePathMap::DaviesHarte, TruePathMap::Causal] {
            let maps = LevelMaps::new(HurstParam::new(0.5).unwrap(), level, 10, kind).unwrap();
            let w = weight_j0(&model, &maps, &theta, &draw(level, 10, 1), &obs(10, 1)).unwrap();
            assert_eq!(w.log_j, 0.0);
        }
        let maps = LevelMaps::new(HurstParam::new(0.3).unwrap(), level, 1, TruePathMap::Causal).unwrap();
        let w = weight_j0(&model, &maps, &theta, &draw(level, 1, 2), &obs(1, 2)).unwrap();
        assert_eq!(w.log_j, 0.0);
    }

    #[test]
    fn j0_matches_straight_line_recomputation() {
        let h = HurstParam::new(0.4).unwrap();
        let level = Level::new(4);
        let model = ou();
        let theta = ParamVector(vec![1.0, 0.5]);
        let maps = LevelMaps::new(h, level, 10, TruePathMap::Causal).unwrap();
        let y = obs(10, 3);
        let d = draw(level, 10, 3);
        let (ft, _, fp, _) = straight_line(h, level, (1.0, 0.5), &d, &y);
        let oracle: f64 = ft.iter().zip(&fp).map(|(a, b)| a - b).sum();
        let w = weight_j0(&model, &maps, &theta, &d, &y).unwrap();
        assert_relative_eq!(w.log_j, oracle, max_relative = 1e-10);
    }

    #[test]
    fn jl_matches_straight_line_recomputation() {
        let h = HurstParam::new(0.4).unwrap();
        let level = Level::new(5);
        let model = ou();
        let theta = ParamVector(vec![1.0, 0.5]);
        let maps = LevelMaps::new(h, level, 10, TruePathMap::Causal).unwrap();
        let y = obs(10, 4);
        let d = draw(level, 10, 4);
        let (ft, ct, fp, cp) = straight_line(h, level, (1.0, 0.5), &d, &y);
        let den: Vec<f64> = fp.iter().zip(&cp).map(|(a, b)| a.max(*b)).collect();
        let of: f64 = ft.iter().zip(&den).map(|(a, b)| a - b).sum();
        let oc: f64 = ct.iter().zip(&den).map(|(a, b)| a - b).sum();
        let wf = weight_jl(&model, &maps, &theta, &d, &y, Branch::Fine).unwrap();
        let wc = weight_jl(&model, &maps, &theta, &d, &y, Branch::Coarse).unwrap();
        assert_relative_eq!(wf.log_j, of, max_relative = 1e-10);
        assert_relative_eq!(wc.log_j, oc, max_relative = 1e-10);
    }

    #[test]
    fn davies_harte_true_map_matches_full_path() {
        let h = HurstParam::new(0.4).unwrap();
        let level = Level::new(3);
        let maps = LevelMaps::new(h, level, 6, TruePathMap::DaviesHarte).unwrap();
        let d = draw(level, 6, 5);
        let emb = build_embedding(h, 48).unwrap();
        let expect = crate::fgn::full_path(&emb, level, &d.z).unwrap();
        let (mut ws, mut led) = (FftWorkspace::default(), CostLedger::default());
        let p = maps.pseudo_path(&d, &mut ws, &mut led).unwrap();
        assert_eq!(maps.true_path(&d, &p, &mut ws, &mut led).unwrap(), expect);
    }

    #[test]
    fn zero_diffusion_gives_unit_weights() {
        let mut model = ou();
        model.diffusion = Diffusion::Constant(Arc::new(|_| 0.0));
        let theta = ParamVector(vec![1.0, 0.0]);
        let level = Level::new(4);
        let maps = LevelMaps::new(HurstParam::new(0.5).unwrap(), level, 5, TruePathMap::Causal).unwrap();
        let ev = evaluate_record(&model, &maps, &theta, &draw(level, 5, 1), &obs(5, 1), true, &mut FftWorkspace::default(), &mut CostLedger::default()).unwrap();
        assert_eq!(ev.log_j_fine, 0.0);
        assert_eq!(ev.log_j_coarse, Some(0.0));
    }

    #[test]
    fn denominators_match_coupled_filter_weights() {
        // With one particle the coupled filter's evidence is the sum of its
        // per-step max weights along the returned path.
        let h = HurstParam::new(0.4).unwrap();
        let level = Level::new(4);
        let model = ou();
        let theta = ParamVector(vec![0.8, 0.6]);
        let y = obs(6, 7);
        let maps = LevelMaps::new(h, level, 6, TruePathMap::Causal).unwrap();
        let out = crate::pf::pf_coupled(
            &model,
            &theta,
            &maps.pseudo,
            level,
            &crate::pf::FilterConfig::new(1),
            &y,
            &mut stream(3, &[]),
            &mut CostLedger::default(),
        )
        .unwrap();
        let terms = coupled_terms(&model, &maps, &theta, &out.trajectory, &y).unwrap();
        assert_relative_eq!(terms.denominators().iter().sum::<f64>(), out.log_norm_const.log_value, epsilon = 1e-10);
    }

    #[test]
    fn self_normalized_hand_cases() {
        let e = self_normalized(&[1.0, 3.0], &[0.0, 3f64.ln()]).unwrap();
        assert_relative_eq!(e.value, 2.5, epsilon = 1e-12);
        let e = self_normalized(&[1.0, 2.0, 6.0], &[0.5; 3]).unwrap();
        assert_relative_eq!(e.value, 3.0, epsilon = 1e-12);
        assert_relative_eq!(e.ess, 3.0, epsilon = 1e-12);
        assert_eq!(self_normalized(&[1.0], &[f64::NEG_INFINITY]).unwrap_err(), MlError::AllWeightsDegenerate);
        let e = self_normalized(&[1.0, f64::NAN], &[0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(e.value, 1.0);
    }

    #[test]
    fn allocation_hand_case() {
        let a = allocate(0.1, Rates::default(), 3, 20, 1.0, 50).unwrap();
        assert_eq!(a.l_max, 7);
        assert_eq!(a.iterations[0], 258);
        assert_eq!(a.iterations.len(), 5);
        assert!(a.iterations.windows(2).all(|w| w[0] >= w[1]));
        let capped = allocate(0.1, Rates::default(), 3, 5, 1.0, 50).unwrap();
        assert_eq!((capped.l_max, capped.l_target), (5, 7));
        assert_eq!(capped.iterations[..], a.iterations[..3]);
        for l in 3..12u32 {
            assert_eq!(bias_level(2f64.powf(-(l as f64) / 2.0), 0.5, 3), l);
        }
        assert!(allocate(1.5, Rates::default(), 3, 7, 1.0, 1).is_err());
        assert!(allocate(0.1, Rates { alpha: 0.5, beta: 0.5, gamma: 0.5 }, 3, 7, 1.0, 1).is_err());
    }

    fn level_est(level: u32, fine: Vec<f64>, coarse: Option<Vec<f64>>) -> LevelEstimate {
        LevelEstimate { level, records: 1, fine, coarse, ess_fine: 1.0, ess_coarse: None, cost: CostLedger { euler_steps: 1, ..Default::default() } }
    }

    #[test]
    fn telescope_sums_increments() {
        let base = level_est(3, vec![1.0, 2.0], None);
        let est = telescope(base.clone(), vec![]).unwrap();
        assert_eq!(est.total, vec![1.0, 2.0]);
        let est = telescope(
            base.clone(),
            vec![level_est(4, vec![1.5, 2.5], Some(vec![1.25, 2.0])), level_est(5, vec![0.0, 0.0], Some(vec![0.0, 0.0]))],
        )
        .unwrap();
        assert_eq!(est.total, vec![1.25, 2.5]);
        assert_eq!(est.cost.euler_steps, 3);
        let gap = telescope(base, vec![level_est(5, vec![0.0], Some(vec![0.0]))]);
        assert_eq!(gap.unwrap_err(), MlError::MissingLevel(4));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn coupled_weights_are_max_dominated(seed in 0u64..10_000, h in 0.15f64..0.85, theta in 0.1f64..3.0, sigma in 0.05f64..2.0, l in 1u32..6) {
            let level = Level::new(l);
            let horizon = 4;
            let maps = LevelMaps::new(HurstParam::new(h).unwrap(), level, horizon, TruePathMap::Causal).unwrap();
            let p = ParamVector(vec![theta, sigma]);
            let terms = coupled_terms(&ou(), &maps, &p, &draw(level, horizon, seed), &obs(horizon, seed)).unwrap();
            for ((d, f), c) in terms.denominators().iter().zip(&terms.fine_pseudo).zip(&terms.coarse_pseudo) {
                prop_assert!(d >= f && d >= c);
                prop_assert!(f - d == 0.0 || c - d == 0.0);
            }
            // Shared denominator: the two log weights differ only through numerators.
            let diff: f64 = terms.fine_true.iter().zip(&terms.coarse_true).map(|(a, b)| a - b).sum();
            prop_assert!((terms.log_j_fine().unwrap() - terms.log_j_coarse().unwrap() - diff).abs() < 1e-9);
        }

        #[test]
        fn self_normalized_is_scale_invariant(
            vals in proptest::collection::vec(-10.0f64..10.0, 1..40),
            shift in -50.0f64..50.0,
            c in -5.0f64..5.0,
            seed in 0u64..1000,
        ) {
            let mut rng = stream(seed, &[]);
            let lj: Vec<f64> = vals.iter().map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            let shifted: Vec<f64> = lj.iter().map(|l| l + shift).collect();
            let a = self_normalized(&vals, &lj).unwrap();
            let b = self_normalized(&vals, &shifted).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-12 * (1.0 + a.value.abs()));
            prop_assert!((a.ess - b.ess).abs() < 1e-9);
            prop_assert!(a.ess > 0.0 && a.ess <= vals.len() as f64 + 1e-9);
            let constant = self_normalized(&vec![c; vals.len()], &lj).unwrap();
            prop_assert!((constant.value - c).abs() <= 1e-12 * (1.0 + c.abs()));
        }

        #[test]
        fn log_weights_are_order_invariant(seed in 0u64..1000) {
            let level = Level::new(3);
            let maps = LevelMaps::new(HurstParam::new(0.4).unwrap(), level, 3, TruePathMap::Causal).unwrap();
            let y = obs(3, seed);
            let p = ParamVector(vec![1.0, 0.5]);
            let a = draw(level, 3, seed);
            let b = draw(level, 3, seed + 1);
            let wa = weight_j0(&ou(), &maps, &p, &a, &y).unwrap();
            let wb = weight_j0(&ou(), &maps, &p, &b, &y).unwrap();
            let wb2 = weight_j0(&ou(), &maps, &p, &b, &y).unwrap();
            let wa2 = weight_j0(&ou(), &maps, &p, &a, &y).unwrap();
            prop_assert_eq!(wa, wa2);
            prop_assert_eq!(wb, wb2);
        }

        #[test]
        fn allocation_is_monotone(eps in 0.01f64..0.9, beta in 0.1f64..1.0, extra in 0.0f64..2.0, l_min in 0u32..5) {
            let gamma = 1.0 + extra;
            let beta = beta.min(gamma);
            let a = allocate(eps, Rates { alpha: 0.5, beta, gamma }, l_min, 30, 1.0, 10).unwrap();
            prop_assert!(a.l_min <= a.l_max);
            prop_assert!(Level::new(a.l_max).mesh().powf(0.5) <= eps * (1.0 + 1e-9));
            prop_assert!(a.iterations.iter().all(|m| *m >= 1));
            prop_assert!(a.iterations.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
