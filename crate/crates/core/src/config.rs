//! Scenario configuration files (TOML).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coeffs::LayerSchedule;
use crate::error::{Result, StabError};
use crate::network::ProxSpec;
use crate::spectral::{EigenSystem, FrequencyGrid, PreFilterSpec};

pub const DEFAULT_LAMBDA_COUNT: usize = 200;
pub const DEFAULT_ETA_COUNT: usize = 100;

/// A scalar parameter given as one value, per-layer values, a sweep range or a uniform draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamSpec {
    Scalar(f64),
    List(Vec<f64>),
    Range(RangeSpec),
    Uniform(UniformSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSpec {
    pub start: f64,
    pub stop: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

/// Independent per-layer draws from `U[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformSpec {
    pub uniform: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "default_n")]
    pub n1: usize,
    #[serde(default = "default_n")]
    pub n2: usize,
    #[serde(default = "default_blur")]
    pub blur_k: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_lambda")]
    pub lambda: ParamSpec,
    #[serde(default = "default_eta")]
    pub eta: ParamSpec,
    #[serde(default = "default_tau")]
    pub tau: ParamSpec,
    #[serde(default = "default_zero")]
    pub mu: ParamSpec,
    #[serde(default)]
    pub chi_bar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxKind {
    Identity,
    L1,
    Nonneg,
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PreFilterChoice {
    Constant(f64),
    Named(PreFilterName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreFilterName {
    Zero,
    Identity,
    Wiener,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxSection {
    #[serde(default = "default_kind")]
    pub kind: ProxKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    #[serde(default = "default_prefilter")]
    pub prefilter: PreFilterChoice,
    #[serde(default = "default_wiener")]
    pub wiener_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_alpha")]
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestoreSection {
    #[serde(default)]
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub prox: ProxSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub restore: RestoreSection,
}

fn default_n() -> usize {
    256
}
fn default_blur() -> usize {
    3
}
fn default_epsilon() -> f64 {
    1e-2
}
fn default_m() -> usize {
    15
}
fn default_lambda() -> ParamSpec {
    ParamSpec::Range(RangeSpec {
        start: 0.01,
        stop: 2.0,
        count: Some(DEFAULT_LAMBDA_COUNT),
    })
}
fn default_eta() -> ParamSpec {
    ParamSpec::Range(RangeSpec {
        start: 0.0,
        stop: 1.0,
        count: Some(DEFAULT_ETA_COUNT),
    })
}
fn default_tau() -> ParamSpec {
    ParamSpec::Scalar(1e-2)
}
fn default_zero() -> ParamSpec {
    ParamSpec::Scalar(0.0)
}
fn default_kind() -> ProxKind {
    ProxKind::Identity
}
fn default_prefilter() -> PreFilterChoice {
    PreFilterChoice::Named(PreFilterName::Identity)
}
fn default_wiener() -> f64 {
    1e-2
}
fn default_alpha() -> Vec<f64> {
    vec![0.5, 0.75, 1.0]
}
fn default_trials() -> usize {
    1000
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            n1: default_n(),
            n2: default_n(),
            blur_k: default_blur(),
            epsilon: default_epsilon(),
        }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            m: default_m(),
            lambda: default_lambda(),
            eta: default_eta(),
            tau: default_tau(),
            mu: default_zero(),
            chi_bar: 0.0,
        }
    }
}

impl Default for ProxSection {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            lo: None,
            hi: None,
            prefilter: default_prefilter(),
            wiener_sigma: default_wiener(),
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { alpha: default_alpha() }
    }
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: default_trials(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> StabError {
    StabError::Config(msg.into())
}

impl RangeSpec {
    pub fn values(&self, default_count: usize) -> Result<Vec<f64>> {
        let count = self.count.unwrap_or(default_count);
        if count < 2 {
            return Err(cfg_err(format!("sweep count must be at least 2, got {count}")));
        }
        if !(self.start < self.stop) || !self.start.is_finite() || !self.stop.is_finite() {
            return Err(cfg_err(format!(
                "sweep range needs start < stop, got [{}, {}]",
                self.start, self.stop
            )));
        }
        let step = (self.stop - self.start) / (count - 1) as f64;
        Ok((0..count)
            .map(|k| if k == count - 1 { self.stop } else { self.start + step * k as f64 })
            .collect())
    }
}

impl ParamSpec {
    /// Values of a swept parameter.
    pub fn sweep_values(&self, name: &str, default_count: usize) -> Result<Vec<f64>> {
        match self {
            ParamSpec::Scalar(v) => Ok(vec![*v]),
            ParamSpec::List(v) if !v.is_empty() => Ok(v.clone()),
            ParamSpec::List(_) => Err(cfg_err(format!("{name}: empty list"))),
            ParamSpec::Range(r) => r.values(default_count),
            ParamSpec::Uniform(_) => Err(StabError::InvalidUsage(format!(
                "{name}: uniform draws give a nonstationary schedule, sweeps need scalars, lists or ranges"
            ))),
        }
    }

    /// Per-layer values for an `m`-layer network.
    pub fn layer_values(&self, name: &str, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match self {
            ParamSpec::Scalar(v) => Ok(vec![*v; m]),
            ParamSpec::List(v) if v.len() == m => Ok(v.clone()),
            ParamSpec::List(v) => Err(cfg_err(format!(
                "{name}: list has {} entries, schedule has m = {m}",
                v.len()
            ))),
            ParamSpec::Range(_) => Err(cfg_err(format!(
                "{name}: sweep ranges are only accepted by bounds-grid"
            ))),
            ParamSpec::Uniform(UniformSpec { uniform: [lo, hi] }) => {
                if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(cfg_err(format!("{name}: uniform bounds need lo <= hi")));
                }
                Ok((0..m)
                    .map(|_| if lo == hi { *lo } else { rng.random_range(*lo..*hi) })
                    .collect())
            }
        }
    }

    /// The single value of a parameter that must be identical in every layer.
    pub fn stationary_value(&self, name: &str) -> Result<f64> {
        match self {
            ParamSpec::Scalar(v) => Ok(*v),
            ParamSpec::List(v) if !v.is_empty() && v.iter().all(|x| *x == v[0]) => Ok(v[0]),
            _ => Err(StabError::InvalidUsage(format!(
                "{name} must be a single value for a stationary sweep"
            ))),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StabError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Effective configuration with every default spelled out.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.n1 == 0 || self.grid.n2 == 0 {
            return Err(cfg_err("grid dimensions must be positive"));
        }
        if self.schedule.m == 0 {
            return Err(cfg_err("schedule.m must be at least 1"));
        }
        if self.verify.trials == 0 {
            return Err(cfg_err("verify.trials must be at least 1"));
        }
        if self.prox.kind == ProxKind::Box && (self.prox.lo.is_none() || self.prox.hi.is_none()) {
            return Err(cfg_err("box projection needs prox.lo and prox.hi"));
        }
        for &a in &self.sweep.alpha {
            if !(0.5..=1.0).contains(&a) {
                return Err(cfg_err(format!("alpha values must lie in [0.5, 1], got {a}")));
            }
        }
        if !(self.restore.noise_sigma >= 0.0) {
            return Err(cfg_err("restore.noise_sigma must be nonnegative"));
        }
        self.prox_spec()?;
        Ok(())
    }

    pub fn frequency_grid(&self) -> Result<FrequencyGrid> {
        FrequencyGrid::new(self.grid.n1, self.grid.n2)
    }

    pub fn eigensystem(&self) -> Result<EigenSystem> {
        EigenSystem::new(self.frequency_grid()?, self.grid.blur_k, self.grid.epsilon)
    }

    pub fn prox_spec(&self) -> Result<ProxSpec> {
        let spec = match self.prox.kind {
            ProxKind::Identity => ProxSpec::Identity,
            ProxKind::L1 => ProxSpec::L1,
            ProxKind::Nonneg => ProxSpec::NonnegProjection,
            ProxKind::Box => ProxSpec::Box {
                lo: self.prox.lo.unwrap_or(0.0),
                hi: self.prox.hi.unwrap_or(1.0),
            },
        };
        spec.validate().map_err(|e| cfg_err(e.to_string()))?;
        Ok(spec)
    }

    pub fn prefilter(&self) -> PreFilterSpec {
        match &self.prox.prefilter {
            PreFilterChoice::Constant(v) => PreFilterSpec::constant(*v),
            PreFilterChoice::Named(PreFilterName::Zero) => PreFilterSpec::Zero,
            PreFilterChoice::Named(PreFilterName::Identity) => PreFilterSpec::Identity,
            PreFilterChoice::Named(PreFilterName::Wiener) => PreFilterSpec::Wiener {
                sigma: self.prox.wiener_sigma,
            },
        }
    }

    /// The per-layer schedule. Uniform draws come from a generator seeded with
    /// `verify.seed`, in the order lambda, tau, mu, eta.
    pub fn layer_schedule(&self) -> Result<LayerSchedule> {
        let s = &self.schedule;
        let mut rng = ChaCha8Rng::seed_from_u64(self.verify.seed);
        let lambda = s.lambda.layer_values("lambda", s.m, &mut rng)?;
        let tau = s.tau.layer_values("tau", s.m, &mut rng)?;
        let mu = s.mu.layer_values("mu", s.m, &mut rng)?;
        let eta = s.eta.layer_values("eta", s.m, &mut rng)?;
        LayerSchedule::new(lambda, tau, mu, eta, s.chi_bar).map_err(|e| cfg_err(e.to_string()))
    }

    /// `(lambda values, eta values, tau, mu)` of a stationary sweep.
    pub fn stationary_sweep(&self) -> Result<(Vec<f64>, Vec<f64>, f64, f64)> {
        let s = &self.schedule;
        let tau = s.tau.stationary_value("tau")?;
        let mu = s.mu.stationary_value("mu")?;
        let lambdas = s.lambda.sweep_values("lambda", DEFAULT_LAMBDA_COUNT)?;
        let etas = s.eta.sweep_values("eta", DEFAULT_ETA_COUNT)?;
        Ok((lambdas, etas, tau, mu))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = ScenarioConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
        let (l, e, tau, mu) = cfg.stationary_sweep().unwrap();
        assert_eq!(l.len(), 200);
        assert_eq!(e.len(), 100);
        assert_eq!((l[0], *l.last().unwrap()), (0.01, 2.0));
        assert_eq!((tau, mu), (0.01, 0.0));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ScenarioConfig::from_toml_str("[grid]\nn3 = 4\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[extra]\na = 1\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[schedule]\nlambda = { start = 0.1, stop = 1.0, cnt = 3 }\n").is_err());
    }

    #[test]
    fn parameter_forms() {
        let cfg = ScenarioConfig::from_toml_str(
            "[schedule]\nm = 3\nlambda = [0.5, 0.6, 0.7]\neta = 0.9\ntau = { uniform = [0.0099, 0.0249] }\n",
        )
        .unwrap();
        let s = cfg.layer_schedule().unwrap();
        assert_eq!(s.lambda, vec![0.5, 0.6, 0.7]);
        assert_eq!(s.eta, vec![0.9; 3]);
        assert!(s.tau.iter().all(|t| (0.0099..0.0249).contains(t)));
        assert_eq!(cfg.layer_schedule().unwrap(), s);

        let bad = ScenarioConfig::from_toml_str("[schedule]\nm = 2\nlambda = [0.5, 0.6, 0.7]\neta = 0.9\n").unwrap();
        assert!(matches!(bad.layer_schedule(), Err(StabError::Config(_))));
        let bad = ScenarioConfig::from_toml_str("[schedule]\nlambda = { start = 1.0, stop = 0.5 }\n").unwrap();
        assert!(bad.stationary_sweep().is_err());
        let bad = ScenarioConfig::from_toml_str("[schedule]\nlambda = { start = 0.1, stop = 0.5, count = 1 }\n").unwrap();
        assert!(bad.stationary_sweep().is_err());
        assert!(ScenarioConfig::from_toml_str("[verify]\ntrials = 0\n").is_err());
    }

    #[test]
    fn prefilter_forms() {
        let c = ScenarioConfig::from_toml_str("[prox]\nprefilter = 0.5\n").unwrap();
        assert_eq!(c.prefilter(), PreFilterSpec::constant(0.5));
        let c = ScenarioConfig::from_toml_str("[prox]\nprefilter = \"wiener\"\nwiener_sigma = 0.02\n").unwrap();
        assert_eq!(c.prefilter(), PreFilterSpec::Wiener { sigma: 0.02 });
        let c = ScenarioConfig::from_toml_str("[prox]\nkind = \"box\"\nlo = 0.0\nhi = 1.0\n").unwrap();
        assert_eq!(c.prox_spec().unwrap(), ProxSpec::Box { lo: 0.0, hi: 1.0 });
        assert!(ScenarioConfig::from_toml_str("[prox]\nkind = \"box\"\nlo = 1.0\nhi = 0.0\n").is_err());
    }
}
