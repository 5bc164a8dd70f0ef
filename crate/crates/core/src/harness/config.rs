//! Experiment configuration.
//!
//! A single TOML file with one table per concern. Every key has a default,
//! so an empty file describes the simulated-data OU experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::cost::CostWeights;
use crate::fgn::{HurstParam, Level};
use crate::ml::{Functional, Rates, TruePathMap};
use crate::pf::{FilterConfig, Resampling};
use crate::pmcmc::{McmcConfig, ProposalConfig};
use crate::sde::{ModelSpec, OuSettings, ParamVector, Prior};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub workers: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub levels: LevelConfig,
    pub filter: FilterSection,
    pub mcmc: McmcSection,
    pub multilevel: MultilevelSection,
    pub study: StudySection,
    pub cost: CostWeights,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            workers: 1,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            levels: LevelConfig::default(),
            filter: FilterSection::default(),
            mcmc: McmcSection::default(),
            multilevel: MultilevelSection::default(),
            study: StudySection::default(),
            cost: CostWeights::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Simulated,
    RealData,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaPrior {
    pub shape: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub preset: Preset,
    pub hurst: f64,
    pub obs_variance: f64,
    pub x0: f64,
    /// Parameters used to simulate data, in model order.
    pub truth: Vec<f64>,
    pub theta_prior: Option<GammaPrior>,
    pub sigma_prior: Option<GammaPrior>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            name: "ou".into(),
            preset: Preset::Simulated,
            hurst: 0.4,
            obs_variance: 0.2,
            x0: 0.0,
            truth: vec![1.0, 0.5],
            theta_prior: None,
            sigma_prior: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub horizon: usize,
    pub sim_level: u32,
    /// Observations CSV (`t,y`); simulated from `model.truth` when absent.
    pub path: Option<PathBuf>,
    pub write_truth: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { horizon: 100, sim_level: 7, path: None, write_truth: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelConfig {
    pub min: u32,
    pub max: u32,
    /// Level of the single-level chain; defaults to `max`.
    pub single: Option<u32>,
}

impl Default for LevelConfig {
    fn default() -> Self {
        Self { min: 3, max: 7, single: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    /// Defaults to the number of observations.
    pub particles: Option<usize>,
    pub resampling: Resampling,
    pub diagnostics: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSection {
    pub iterations: usize,
    /// One log-scale step per parameter, or a single shared value.
    pub proposal_steps: Vec<f64>,
    pub burn_in: f64,
    pub init_retries: usize,
}

impl Default for McmcSection {
    fn default() -> Self {
        Self { iterations: 5000, proposal_steps: vec![ProposalConfig::DEFAULT_STEP], burn_in: 0.0, init_retries: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultilevelSection {
    pub epsilon: f64,
    /// Explicit iterations for levels `min..`; overrides the allocation.
    pub iterations: Option<Vec<usize>>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Multiplier `K` in front of the allocation formula.
    pub base_m: f64,
    pub true_path: TruePathMap,
    pub thin: usize,
    pub functionals: Vec<Functional>,
}

impl Default for MultilevelSection {
    fn default() -> Self {
        let r = Rates::default();
        Self {
            epsilon: 0.1,
            iterations: None,
            alpha: r.alpha,
            beta: r.beta,
            gamma: r.gamma,
            base_m: 1.0,
            true_path: TruePathMap::Causal,
            thin: 1,
            functionals: vec![Functional::Param(0), Functional::Param(1)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub repeats: usize,
    /// Accuracy points; point `l` uses `ε = Δ_l^α`.
    pub levels: Vec<u32>,
    /// Single-level chains run `⌈sl_base_m ε⁻²⌉` iterations.
    pub sl_base_m: f64,
    /// Multilevel allocation multiplier.
    pub ml_base_m: f64,
    /// Defaults to one above the finest accuracy point.
    pub reference_level: Option<u32>,
    /// Reference iterations as a multiple of the largest per-level count.
    pub reference_multiplier: f64,
    pub reference_chains: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            repeats: 50,
            levels: vec![3, 4, 5, 6, 7],
            sl_base_m: 1.0,
            ml_base_m: 1.0,
            reference_level: None,
            reference_multiplier: 10.0,
            reference_chains: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.model.name != "ou" {
            return bad(format!("unknown model `{}`", self.model.name));
        }
        if HurstParam::new(self.model.hurst).is_err() {
            return bad(format!("hurst {} outside (0, 1)", self.model.hurst));
        }
        if !(self.model.obs_variance >= 0.0) {
            return bad("obs_variance must be nonnegative".into());
        }
        if self.model.truth.len() != 2 || self.model.truth.iter().any(|v| !(*v >= 0.0)) {
            return bad("model.truth needs two nonnegative values".into());
        }
        for p in [self.model.theta_prior, self.model.sigma_prior].into_iter().flatten() {
            if Prior::gamma(p.shape, p.scale).is_err() {
                return bad(format!("invalid gamma prior {p:?}"));
            }
        }
        if self.data.horizon == 0 {
            return bad("data.horizon must be positive".into());
        }
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return bad(format!("data file {} does not exist", p.display()));
            }
        }
        if self.levels.min > self.levels.max {
            return bad(format!("levels.min {} above levels.max {}", self.levels.min, self.levels.max));
        }
        if self.levels.max > 16 || self.data.sim_level > 16 {
            return bad("levels above 16 are not supported".into());
        }
        if self.filter.particles == Some(0) {
            return bad("filter.particles must be positive".into());
        }
        if let Resampling::Adaptive { ess_fraction } = self.filter.resampling {
            if !(0.0..=1.0).contains(&ess_fraction) {
                return bad("ess_fraction must lie in [0, 1]".into());
            }
        }
        let steps = &self.mcmc.proposal_steps;
        if !(steps.len() == 1 || steps.len() == 2) || steps.iter().any(|s| !(*s > 0.0)) {
            return bad("mcmc.proposal_steps needs one or two positive values".into());
        }
        if !(0.0..1.0).contains(&self.mcmc.burn_in) {
            return bad("mcmc.burn_in must lie in [0, 1)".into());
        }
        let ml = &self.multilevel;
        if !(ml.epsilon > 0.0 && ml.epsilon < 1.0) {
            return bad("multilevel.epsilon must lie in (0, 1)".into());
        }
        if !(ml.alpha > 0.0 && ml.beta > 0.0 && ml.gamma >= 1.0 && ml.base_m > 0.0) {
            return bad("multilevel rates need alpha, beta > 0, gamma >= 1, base_m > 0".into());
        }
        if ml.thin == 0 {
            return bad("multilevel.thin must be positive".into());
        }
        if let Some(its) = &ml.iterations {
            if its.is_empty() || its.contains(&0) {
                return bad("multilevel.iterations must be nonempty and positive".into());
            }
            if self.levels.min as usize + its.len() - 1 > self.levels.max as usize {
                return bad("multilevel.iterations lists more levels than levels.max allows".into());
            }
        }
        for f in &ml.functionals {
            match f {
                Functional::Param(j) if *j >= 2 => return bad(format!("functional parameter index {j} out of range")),
                Functional::State(t) if *t == 0 || *t > self.data.horizon => {
                    return bad(format!("functional state index {t} out of range"))
                }
                _ => {}
            }
        }
        let st = &self.study;
        if st.levels.len() < 3 {
            return bad("study.levels needs at least three accuracy points".into());
        }
        if st.levels.iter().any(|l| *l < self.levels.min) || st.levels.windows(2).any(|w| w[0] >= w[1]) {
            return bad("study.levels must be increasing and at least levels.min".into());
        }
        if st.repeats < 2 || !(st.sl_base_m > 0.0) || !(st.ml_base_m > 0.0) || !(st.reference_multiplier > 0.0) {
            return bad("study needs repeats >= 2 and positive multipliers".into());
        }
        if st.reference_chains == 0 {
            return bad("study.reference_chains must be positive".into());
        }
        Ok(())
    }

    pub fn hurst(&self) -> HurstParam {
        HurstParam::new(self.model.hurst).expect("validated")
    }

    pub fn ou_settings(&self) -> OuSettings {
        let base = match self.model.preset {
            Preset::Simulated => OuSettings::default(),
            Preset::RealData => OuSettings::real_data(),
        };
        let prior = |p: Option<GammaPrior>, d: Prior| p.map_or(d, |g| Prior::gamma(g.shape, g.scale).expect("validated"));
        OuSettings {
            x0: self.model.x0,
            obs_variance: self.model.obs_variance,
            theta_prior: prior(self.model.theta_prior, base.theta_prior),
            sigma_prior: prior(self.model.sigma_prior, base.sigma_prior),
        }
    }

    pub fn model(&self) -> ModelSpec {
        ModelSpec::ornstein_uhlenbeck(&self.ou_settings())
    }

    pub fn truth(&self) -> ParamVector {
        ParamVector(self.model.truth.clone())
    }

    pub fn single_level(&self) -> Level {
        Level::new(self.levels.single.unwrap_or(self.levels.max))
    }

    pub fn rates(&self) -> Rates {
        Rates { alpha: self.multilevel.alpha, beta: self.multilevel.beta, gamma: self.multilevel.gamma }
    }

    pub fn particles(&self, horizon: usize) -> usize {
        self.filter.particles.unwrap_or(horizon)
    }

    pub fn mcmc_config(&self, iterations: usize, horizon: usize) -> McmcConfig {
        let steps = &self.mcmc.proposal_steps;
        let steps = if steps.len() == 1 { vec![steps[0]; 2] } else { steps.clone() };
        McmcConfig {
            iterations,
            filter: FilterConfig {
                particles: self.particles(horizon),
                resampling: self.filter.resampling,
                diagnostics: self.filter.diagnostics,
            },
            proposal: ProposalConfig { steps },
            init_retries: self.mcmc.init_retries,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.model.hurst, 0.4);
        assert_eq!(cfg.model.obs_variance, 0.2);
        assert_eq!(cfg.data.horizon, 100);
        assert_eq!((cfg.levels.min, cfg.levels.max), (3, 7));
        assert_eq!(cfg.study.repeats, 50);
        assert_eq!(cfg.particles(100), 100);
    }

    #[test]
    fn nested_keys_parse() {
        let cfg = ExperimentConfig::parse(
            r#"
            seed = 9
            [model]
            preset = "real_data"
            hurst = 0.3
            [filter]
            particles = 20
            resampling = { mode = "adaptive", ess_fraction = 0.5 }
            [multilevel]
            true_path = "davies_harte"
            functionals = [{ kind = "param", index = 1 }, { kind = "terminal_state" }]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.filter.resampling, Resampling::Adaptive { ess_fraction: 0.5 });
        assert_eq!(cfg.multilevel.true_path, TruePathMap::DaviesHarte);
        assert_eq!(cfg.multilevel.functionals[1], Functional::TerminalState);
        assert_eq!(cfg.ou_settings().theta_prior, Prior::Gamma { shape: 1e-3, scale: 1e3 });
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "[model]\nhurst = 1.0",
            "[levels]\nmin = 5\nmax = 4",
            "[mcmc]\nproposal_steps = [0.0]",
            "[multilevel]\nepsilon = 2.0",
            "[study]\nlevels = [3, 4]",
            "unknown = 1",
            "[data]\npath = \"/nonexistent/y.csv\"",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(HarnessError::Config(_))), "{text}");
        }
    }
}
