//! Experiment configuration files.
//!
//! A config is one TOML document. Module sections (`[solver]`, `[cisr]`,
//! `[bayesopt]`, `[frozen_lake]`, `[lander]`) are merged key by key over the
//! defaults of the chosen environment, so a file only needs the values it
//! changes. Unknown keys are rejected with their section name.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use curriculum_core::cmdp::{StateSet, TabularCMDP};
use curriculum_core::env::frozen_lake::{build_flake_cmdp, default_map, load_map, make_interventions, FrozenLakeConfig};
use curriculum_core::env::lander::{LanderConfig, LanderSetting};
use curriculum_core::interventions::Intervention;
use curriculum_core::student::SolverConfig;
use curriculum_core::teacher::{BayesOptConfig, CISRConfig, CurriculumPolicyParams, TabularSetting};

use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Environment {
    FrozenLake,
    Lander,
    CustomCmdp,
}

/// Which teacher the students get.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyMode {
    /// Train in the original problem.
    NoIntervention,
    /// One intervention for the whole run.
    Single { id: usize },
    /// Optimize a curriculum first, then train fresh students with the best one.
    Optimized,
    /// A curriculum read from a best-params file.
    FixedParams { file: PathBuf },
    /// A curriculum written inline.
    Curriculum {
        intervention_sequence: Vec<usize>,
        switch_thresholds: Vec<[f64; 2]>,
    },
}

/// Trigger set and reset of one intervention on a custom CMDP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomIntervention {
    pub name: String,
    pub trigger: Vec<usize>,
    #[serde(default)]
    pub tau: f64,
    #[serde(default)]
    pub kappa_i: f64,
    /// `hard` resets to the initial distribution, `soft` to the previous state.
    #[serde(default = "hard")]
    pub reset: String,
}

fn hard() -> String {
    "hard".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSection {
    /// CMDP in the tabular text format, relative to the config file.
    pub cmdp: PathBuf,
    #[serde(default)]
    pub interventions: Vec<CustomIntervention>,
}

/// Top-level keys; module sections are read separately.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopLevel {
    environment: Environment,
    #[serde(default = "default_policy")]
    policy: PolicyMode,
    #[serde(default = "one")]
    n_students: usize,
    #[serde(default)]
    seed: u64,
    seeds: Option<Vec<u64>>,
    output_dir: Option<PathBuf>,
    workers: Option<usize>,
    map: Option<PathBuf>,
    custom: Option<CustomSection>,
    // Sections merged over environment defaults by `section`.
    #[serde(rename = "solver")]
    _solver: Option<toml::Value>,
    #[serde(rename = "cisr")]
    _cisr: Option<toml::Value>,
    #[serde(rename = "bayesopt")]
    _bayesopt: Option<toml::Value>,
    #[serde(rename = "frozen_lake")]
    _frozen_lake: Option<toml::Value>,
    #[serde(rename = "lander")]
    _lander: Option<toml::Value>,
}

fn default_policy() -> PolicyMode {
    PolicyMode::NoIntervention
}

fn one() -> usize {
    1
}

/// Fully resolved experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub environment: Environment,
    pub policy: PolicyMode,
    pub n_students: usize,
    pub seed: u64,
    /// Explicit per-student seeds; when absent they are derived from `seed`.
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub map: Option<PathBuf>,
    pub custom: Option<CustomSection>,
    pub solver: SolverConfig,
    pub cisr: CISRConfig,
    pub bayesopt: BayesOptConfig,
    pub frozen_lake: FrozenLakeConfig,
    pub lander: LanderConfig,
}

/// Overlays `patch` on `base`, table by table.
fn merge(base: &mut toml::Value, patch: &toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn section<T: Serialize + DeserializeOwned>(raw: &toml::Table, key: &str, default: T) -> Result<T, HarnessError> {
    let Some(patch) = raw.get(key) else {
        return Ok(default);
    };
    if !patch.is_table() {
        return Err(HarnessError::Config(format!("[{key}] must be a table")));
    }
    let mut value = toml::Value::try_from(&default).map_err(|e| HarnessError::Config(format!("[{key}]: {e}")))?;
    merge(&mut value, patch);
    value.try_into().map_err(|e| HarnessError::Config(format!("[{key}]: {e}")))
}

impl ExperimentConfig {
    /// Defaults for an environment with everything else left at its default.
    pub fn defaults(environment: Environment) -> Self {
        let (solver, cisr, bayesopt) = match environment {
            Environment::Lander => (SolverConfig::lander(), CISRConfig::lander(), BayesOptConfig::lander()),
            _ => (SolverConfig::frozen_lake(), CISRConfig::frozen_lake(), BayesOptConfig::frozen_lake()),
        };
        Self {
            environment,
            policy: PolicyMode::NoIntervention,
            n_students: 1,
            seed: 0,
            seeds: None,
            output_dir: None,
            workers: None,
            map: None,
            custom: None,
            solver,
            cisr,
            bayesopt,
            frozen_lake: FrozenLakeConfig::default(),
            lander: LanderConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let top: TopLevel = toml::Value::Table(raw.clone())
            .try_into()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let d = Self::defaults(top.environment);
        let config = Self {
            environment: top.environment,
            policy: top.policy,
            n_students: top.n_students,
            seed: top.seed,
            seeds: top.seeds,
            output_dir: top.output_dir,
            workers: top.workers,
            map: top.map,
            custom: top.custom,
            solver: section(&raw, "solver", d.solver)?,
            cisr: section(&raw, "cisr", d.cisr)?,
            bayesopt: section(&raw, "bayesopt", d.bayesopt)?,
            frozen_lake: section(&raw, "frozen_lake", d.frozen_lake)?,
            lander: section(&raw, "lander", d.lander)?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(m) = config.map.as_mut() {
            rebase(m);
        }
        if let Some(c) = config.custom.as_mut() {
            rebase(&mut c.cmdp);
        }
        if let PolicyMode::FixedParams { file } = &mut config.policy {
            rebase(file);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |field: &str, msg: String| HarnessError::Config(format!("{field}: {msg}"));
        if self.n_students == 0 {
            return Err(bad("n_students", "must be at least 1".into()));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.len() != 1 && seeds.len() != self.n_students {
                return Err(bad("seeds", format!("{} seeds for {} students", seeds.len(), self.n_students)));
            }
        }
        if self.workers == Some(0) {
            return Err(bad("workers", "must be at least 1".into()));
        }
        self.solver.validate().map_err(|e| bad("solver", e.to_string()))?;
        self.cisr.validate().map_err(|e| bad("cisr", e.to_string()))?;
        self.frozen_lake.validate().map_err(|e| bad("frozen_lake", e.to_string()))?;
        self.lander.validate().map_err(|e| bad("lander", e.to_string()))?;
        if self.environment == Environment::CustomCmdp && self.custom.is_none() {
            return Err(bad("custom", "custom_cmdp needs a [custom] section".into()));
        }
        if let PolicyMode::Curriculum { intervention_sequence, switch_thresholds } = &self.policy {
            CurriculumPolicyParams::new(intervention_sequence.clone(), switch_thresholds.clone())
                .map_err(|e| bad("policy", e.to_string()))?;
        }
        Ok(())
    }

    /// Student seeds: the explicit list, or one seed expanded per student.
    pub fn student_seeds(&self) -> Option<Vec<u64>> {
        match &self.seeds {
            Some(s) if s.len() == self.n_students && self.n_students > 1 => Some(s.clone()),
            _ => None,
        }
    }

    /// Base seed of the run: the single listed seed or `seed`.
    pub fn base_seed(&self) -> u64 {
        match &self.seeds {
            Some(s) if s.len() == 1 => s[0],
            _ => self.seed,
        }
    }

    /// Echo of the resolved config, for the metadata file.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}

/// The problem a config describes, ready to train on.
pub enum Setting {
    Tabular(TabularSetting),
    Lander(LanderSetting),
}

impl Setting {
    pub fn build(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        match config.environment {
            Environment::FrozenLake => {
                let map = match &config.map {
                    Some(p) => load_map(p).map_err(|e| HarnessError::Config(format!("map: {e}")))?,
                    None => default_map(),
                };
                let base = build_flake_cmdp(&map, &config.frozen_lake).map_err(|e| HarnessError::Config(format!("frozen_lake: {e}")))?;
                let ivs = make_interventions(&map, &base).map_err(|e| HarnessError::Config(format!("frozen_lake: {e}")))?;
                let setting = TabularSetting::new(base, ivs.into_vec()).map_err(|e| HarnessError::Config(e.to_string()))?;
                Ok(Self::Tabular(setting))
            }
            Environment::Lander => {
                let setting = LanderSetting::standard(config.lander.clone()).map_err(|e| HarnessError::Config(format!("lander: {e}")))?;
                Ok(Self::Lander(setting))
            }
            Environment::CustomCmdp => {
                let custom = config.custom.as_ref().expect("validated");
                let base = load_custom_cmdp(&custom.cmdp)?;
                let ivs = custom
                    .interventions
                    .iter()
                    .map(|iv| custom_intervention(&base, iv))
                    .collect::<Result<Vec<_>, _>>()?;
                let setting = TabularSetting::new(base, ivs).map_err(|e| HarnessError::Config(e.to_string()))?;
                Ok(Self::Tabular(setting))
            }
        }
    }
}

pub fn load_custom_cmdp(path: &Path) -> Result<TabularCMDP, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("custom.cmdp {}: {e}", path.display())))?;
    TabularCMDP::from_text(&text).map_err(|e| HarnessError::Config(format!("custom.cmdp: {e}")))
}

pub fn custom_intervention(base: &TabularCMDP, iv: &CustomIntervention) -> Result<Intervention, HarnessError> {
    let field = |e: String| HarnessError::Config(format!("custom.interventions.{}: {e}", iv.name));
    let set = StateSet::from_ids(base.n_states(), iv.trigger.iter().copied()).map_err(|e| field(e.to_string()))?;
    match iv.reset.as_str() {
        "hard" => Intervention::hard_reset(iv.name.clone(), base, set, iv.tau, iv.kappa_i),
        "soft" => Intervention::soft_reset(iv.name.clone(), base, set, iv.tau, iv.kappa_i),
        other => return Err(field(format!("reset must be hard or soft, got {other:?}"))),
    }
    .map_err(|e| field(e.to_string()))
}

/// Best curriculum found by a teacher optimization, as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BestParams {
    pub intervention_sequence: Vec<usize>,
    pub switch_thresholds: Vec<[f64; 2]>,
    /// Where the values below came from; optional when written by hand.
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub round: usize,
    /// Seed that reproduces the round's students. Stored as a string because
    /// TOML integers stop at `i64::MAX`.
    #[serde(with = "u64_string")]
    pub round_seed: u64,
    pub students: usize,
    pub final_value: f64,
    pub mean_success: f64,
    pub teacher_reward: f64,
}

mod u64_string {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

impl BestParams {
    pub fn params(&self) -> Result<CurriculumPolicyParams, HarnessError> {
        CurriculumPolicyParams::new(self.intervention_sequence.clone(), self.switch_thresholds.clone())
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_merge_over_environment_defaults() {
        let c = ExperimentConfig::from_toml(
            "environment = \"lander\"\n[solver]\nlearning_rate = 0.3\n[cisr]\nunit_steps = 10\n",
        )
        .unwrap();
        assert_eq!(c.solver.learning_rate, 0.3);
        assert_eq!(c.solver.bound_b, SolverConfig::lander().bound_b);
        assert_eq!(c.cisr.unit_steps, 10);
        assert_eq!(c.cisr.n_units, CISRConfig::lander().n_units);
    }

    #[test]
    fn unknown_keys_name_their_section() {
        let err = ExperimentConfig::from_toml("environment = \"frozen_lake\"\n[solver]\nlearning_rat = 0.3\n").unwrap_err();
        assert!(err.to_string().contains("[solver]"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn policy_modes_parse() {
        let c = ExperimentConfig::from_toml("environment = \"frozen_lake\"\n[policy]\nmode = \"single\"\nid = 2\n").unwrap();
        assert_eq!(c.policy, PolicyMode::Single { id: 2 });
        let c = ExperimentConfig::from_toml(
            "environment = \"frozen_lake\"\n[policy]\nmode = \"curriculum\"\nintervention_sequence = [0, 2]\nswitch_thresholds = [[1.0, 0.0]]\n",
        )
        .unwrap();
        assert!(matches!(c.policy, PolicyMode::Curriculum { .. }));
    }

    #[test]
    fn seed_list_must_match_students() {
        let err = ExperimentConfig::from_toml("environment = \"frozen_lake\"\nn_students = 3\nseeds = [1, 2]\n").unwrap_err();
        assert!(err.to_string().starts_with("invalid config: seeds"), "{err}");
    }

    #[test]
    fn best_params_round_trip() {
        let b = BestParams {
            intervention_sequence: vec![0, 1, 2],
            switch_thresholds: vec![[1.5, 0.1], [2.0, -0.05]],
            provenance: Some(Provenance {
                round: 3,
                round_seed: u64::MAX - 3,
                students: 1,
                final_value: 4.25,
                mean_success: 0.75,
                teacher_reward: 4.25,
            }),
        };
        assert_eq!(toml::from_str::<BestParams>(&b.to_toml()).unwrap(), b);
    }
}
