//! Scalar SDE models `dX = a_θ(X) dt + σ_θ(X) dB^H`, their Euler maps and
//! synthetic data generation.

use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::cost::CostLedger;
use crate::fgn::{self, FgnError, HurstParam, IncrementPath, Level};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("Euler step produced a non-finite state")]
    NonFiniteState,
    #[error("increment path has {actual} values, expected {expected}")]
    PathLength { expected: usize, actual: usize },
    #[error("state-dependent diffusion without a registered Lamperti map")]
    UnsupportedDiffusion,
    #[error("parameter vector has {actual} components, model expects {expected}")]
    ParamArity { expected: usize, actual: usize },
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error(transparent)]
    Fgn(#[from] FgnError),
}

/// Model parameters `θ`, in the order declared by [`ModelSpec::params`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Prior {
    Gamma { shape: f64, scale: f64 },
}

impl Prior {
    pub fn gamma(shape: f64, scale: f64) -> Result<Self, SdeError> {
        if shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite() {
            Ok(Prior::Gamma { shape, scale })
        } else {
            Err(SdeError::InvalidPrior(format!("gamma(shape={shape}, scale={scale})")))
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            Prior::Gamma { shape, scale } => {
                if !(x > 0.0) || !x.is_finite() {
                    return f64::NEG_INFINITY;
                }
                (shape - 1.0) * x.ln() - x / scale - ln_gamma(shape) - shape * scale.ln()
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Prior::Gamma { shape, scale } => shape * scale,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::Gamma { shape, scale } => {
                rand_distr::Gamma::new(shape, scale).expect("validated gamma prior").sample(rng)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub prior: Prior,
}

pub type DriftFn = Arc<dyn Fn(&ParamVector, f64) -> f64 + Send + Sync>;
pub type ParamFn = Arc<dyn Fn(&ParamVector) -> f64 + Send + Sync>;
pub type StateFn = Arc<dyn Fn(&ParamVector, f64) -> f64 + Send + Sync>;
pub type ObsLogDensityFn = Arc<dyn Fn(&ParamVector, f64, f64) -> f64 + Send + Sync>;
pub type ObsSampleFn = Arc<dyn Fn(&ParamVector, f64, &mut dyn RngCore) -> f64 + Send + Sync>;

/// `η(x) = ∫ dx / σ_θ(x)` and its inverse.
#[derive(Clone)]
pub struct LampertiMap {
    pub forward: StateFn,
    pub inverse: StateFn,
}

#[derive(Clone)]
pub enum Diffusion {
    /// `σ_θ` does not depend on the state.
    Constant(ParamFn),
    StateDependent { sigma: StateFn, lamperti: Option<LampertiMap> },
}

impl Diffusion {
    #[inline]
    pub fn eval(&self, theta: &ParamVector, x: f64) -> f64 {
        match self {
            Diffusion::Constant(f) => f(theta),
            Diffusion::StateDependent { sigma, .. } => sigma(theta, x),
        }
    }
}

/// Observation density `g_θ(y | x)`, stored in log form.
#[derive(Clone)]
pub struct Observation {
    pub log_density: ObsLogDensityFn,
    pub sample: ObsSampleFn,
}

/// One model instance: dynamics, observation law, priors and start state.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub params: Vec<ParamSpec>,
    pub drift: DriftFn,
    pub diffusion: Diffusion,
    pub observation: Observation,
    pub x0: ParamFn,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec").field("name", &self.name).field("params", &self.params).finish()
    }
}

/// Settings of the built-in OU model `dX = -θ X dt + σ dB^H`, `Y ~ N(X, τ²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuSettings {
    pub x0: f64,
    pub obs_variance: f64,
    pub theta_prior: Prior,
    pub sigma_prior: Prior,
}

impl Default for OuSettings {
    fn default() -> Self {
        Self {
            x0: 0.0,
            obs_variance: 0.2,
            theta_prior: Prior::Gamma { shape: 1.0, scale: 1.0 },
            sigma_prior: Prior::Gamma { shape: 0.5, scale: 1.0 },
        }
    }
}

impl OuSettings {
    /// Vague priors used for the daily log-return data.
    pub fn real_data() -> Self {
        Self {
            theta_prior: Prior::Gamma { shape: 1e-3, scale: 1e3 },
            sigma_prior: Prior::Gamma { shape: 1e-3, scale: 1e3 },
            ..Self::default()
        }
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn gaussian_observation(variance: f64) -> Observation {
    if variance == 0.0 {
        return Observation {
            log_density: Arc::new(|_, y, x| if y == x { 0.0 } else { f64::NEG_INFINITY }),
            sample: Arc::new(|_, x, _| x),
        };
    }
    let sd = variance.sqrt();
    let norm = -0.5 * (LN_2PI + variance.ln());
    Observation {
        log_density: Arc::new(move |_, y, x| {
            let r = y - x;
            norm - 0.5 * r * r / variance
        }),
        sample: Arc::new(move |_, x, rng| {
            let e: f64 = StandardNormal.sample(rng);
            x + sd * e
        }),
    }
}

impl ModelSpec {
    /// Ornstein-Uhlenbeck with parameters `(theta, sigma)`.
    pub fn ornstein_uhlenbeck(settings: &OuSettings) -> Self {
        let x0 = settings.x0;
        ModelSpec {
            name: "ou".into(),
            params: vec![
                ParamSpec { name: "theta".into(), prior: settings.theta_prior },
                ParamSpec { name: "sigma".into(), prior: settings.sigma_prior },
            ],
            drift: Arc::new(|p, x| -p[0] * x),
            diffusion: Diffusion::Constant(Arc::new(|p| p[1])),
            observation: gaussian_observation(settings.obs_variance),
            x0: Arc::new(move |_| x0),
        }
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn check_arity(&self, theta: &ParamVector) -> Result<(), SdeError> {
        if theta.len() != self.params.len() {
            return Err(SdeError::ParamArity { expected: self.params.len(), actual: theta.len() });
        }
        Ok(())
    }

    pub fn log_prior(&self, theta: &ParamVector) -> f64 {
        if theta.len() != self.params.len() {
            return f64::NEG_INFINITY;
        }
        self.params.iter().zip(theta.as_slice()).map(|(p, &v)| p.prior.ln_pdf(v)).sum()
    }

    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        ParamVector(self.params.iter().map(|p| p.prior.sample(rng)).collect())
    }

    #[inline]
    pub fn log_obs(&self, theta: &ParamVector, y: f64, x: f64) -> f64 {
        (self.observation.log_density)(theta, y, x)
    }

    pub fn x0(&self, theta: &ParamVector) -> f64 {
        (self.x0)(theta)
    }
}

/// One Euler step `x + a(x) Δ + σ(x) db`.
#[inline]
pub fn euler_step(model: &ModelSpec, theta: &ParamVector, x: f64, db: f64, mesh: f64) -> Result<f64, SdeError> {
    let next = x + (model.drift)(theta, x) * mesh + model.diffusion.eval(theta, x) * db;
    if next.is_finite() {
        Ok(next)
    } else {
        Err(SdeError::NonFiniteState)
    }
}

/// `F^l_θ`: the Euler map over one unit interval.
pub fn unit_map(
    model: &ModelSpec,
    theta: &ParamVector,
    x_prev: f64,
    increments: &[f64],
    level: Level,
) -> Result<f64, SdeError> {
    let m = level.steps_per_unit();
    if increments.len() != m {
        return Err(SdeError::PathLength { expected: m, actual: increments.len() });
    }
    let mesh = level.mesh();
    let mut x = x_prev;
    for &db in increments {
        x = euler_step(model, theta, x, db, mesh)?;
    }
    Ok(x)
}

/// Latent states on the level grid and at unit times.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub level: Level,
    /// States at `Δ, 2Δ, ..., T`.
    pub grid: Vec<f64>,
    /// States at `1, ..., T`.
    pub skeleton: Vec<f64>,
}

pub fn trajectory_map(model: &ModelSpec, theta: &ParamVector, path: &IncrementPath) -> Result<LatentTrajectory, SdeError> {
    let m = path.level.steps_per_unit();
    if path.values.len() != path.span * m {
        return Err(SdeError::PathLength { expected: path.span * m, actual: path.values.len() });
    }
    let mesh = path.level.mesh();
    let mut x = model.x0(theta);
    let mut grid = Vec::with_capacity(path.values.len());
    for &db in &path.values {
        x = euler_step(model, theta, x, db, mesh)?;
        grid.push(x);
    }
    let skeleton = grid.iter().skip(m - 1).step_by(m).copied().collect();
    Ok(LatentTrajectory { level: path.level, grid, skeleton })
}

/// Unit-time states only; avoids storing the fine grid.
pub fn skeleton_map(
    model: &ModelSpec,
    theta: &ParamVector,
    path: &IncrementPath,
    ledger: &mut CostLedger,
) -> Result<Vec<f64>, SdeError> {
    let mut x = model.x0(theta);
    let mut out = Vec::with_capacity(path.span);
    for t in 1..=path.span {
        x = unit_map(model, theta, x, path.unit(t), path.level)?;
        out.push(x);
    }
    ledger.record_euler(path.values.len());
    Ok(out)
}

/// Transforms the state to unit diffusion via `η(x) = ∫ dx / σ_θ(x)`.
///
/// For constant `σ` the new state is `x / σ`; drift becomes `a(σ η) / σ`
/// and the observation density is evaluated at `σ η`.
pub fn lamperti(model: &ModelSpec) -> Result<ModelSpec, SdeError> {
    let drift = model.drift.clone();
    let log_density = model.observation.log_density.clone();
    let sample = model.observation.sample.clone();
    let x0 = model.x0.clone();
    let (forward, inverse, sigma_at): (StateFn, StateFn, StateFn) = match &model.diffusion {
        Diffusion::Constant(s) => {
            let (s1, s2, s3) = (s.clone(), s.clone(), s.clone());
            (
                Arc::new(move |p, x| x / s1(p)),
                Arc::new(move |p, eta| eta * s2(p)),
                Arc::new(move |p, _| s3(p)),
            )
        }
        Diffusion::StateDependent { sigma, lamperti: Some(map) } => {
            (map.forward.clone(), map.inverse.clone(), sigma.clone())
        }
        Diffusion::StateDependent { lamperti: None, .. } => return Err(SdeError::UnsupportedDiffusion),
    };
    let inv_drift = inverse.clone();
    let inv_obs = inverse.clone();
    let inv_sample = inverse.clone();
    let fwd_x0 = forward.clone();
    Ok(ModelSpec {
        name: format!("{}-lamperti", model.name),
        params: model.params.clone(),
        drift: Arc::new(move |p, eta| {
            let x = inv_drift(p, eta);
            drift(p, x) / sigma_at(p, x)
        }),
        diffusion: Diffusion::Constant(Arc::new(|_| 1.0)),
        observation: Observation {
            log_density: Arc::new(move |p, y, eta| log_density(p, y, inv_obs(p, eta))),
            sample: Arc::new(move |p, eta, rng| sample(p, inv_sample(p, eta), rng)),
        },
        x0: Arc::new(move |p| fwd_x0(p, x0(p))),
    })
}

/// Observations plus the latent path that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub y: Vec<f64>,
    pub truth: LatentTrajectory,
}

/// Draws a true fBM path at `level`, propagates it and emits `y_t ~ g_θ(·|x_t)`.
pub fn synth_generate<R: Rng + ?Sized>(
    model: &ModelSpec,
    theta: &ParamVector,
    hurst: HurstParam,
    level: Level,
    horizon: usize,
    rng: &mut R,
) -> Result<SynthData, SdeError> {
    model.check_arity(theta)?;
    let m = level.steps_per_unit();
    let emb = fgn::build_embedding(hurst, horizon * m)?;
    let noise: Vec<f64> = (0..horizon * level.block_len()).map(|_| rng.sample(StandardNormal)).collect();
    let path = fgn::full_path(&emb, level, &noise)?;
    let truth = trajectory_map(model, theta, &path)?;
    let mut adapter = RngAdapter(rng);
    let y = truth.skeleton.iter().map(|&x| (model.observation.sample)(theta, x, &mut adapter)).collect();
    Ok(SynthData { y, truth })
}

pub(crate) struct RngAdapter<'a, R: Rng + ?Sized>(&'a mut R);

impl<R: Rng + ?Sized> RngCore for RngAdapter<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}
