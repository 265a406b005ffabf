//! Experiment configuration: TOML files with defaults for every key,
//! unknown keys rejected, and dotted-path overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::BehaviorSpec;
use crate::envs::{
    build_cgo, builtin_map, parse_map, ContextRelation, EnvError, GridCgo, TestContextMode,
};

pub const METHODS: [&str; 6] = ["coda", "rp", "uds_rp", "pds", "goal_pred", "oracle_reward"];
pub const SOLVERS: [&str; 4] = ["pevi", "fqi", "iql", "pspi"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("override {0:?} is not of the form section.key=value")]
    BadOverride(String),
    #[error("override path {0:?} does not name a config key")]
    UnknownOverrideKey(String),
    #[error("unknown method {got:?}; valid methods: {}", METHODS.join(", "))]
    UnknownMethod { got: String },
    #[error("unknown solver {got:?}; valid solvers: {}", SOLVERS.join(", "))]
    UnknownSolver { got: String },
    #[error("unknown relation {0:?}; valid relations: single_goal, four_rooms, random_cells")]
    UnknownRelation(String),
    #[error("unknown test-context mode {0:?}; valid modes: in_distribution, shifted")]
    UnknownTestMode(String),
    #[error("unknown behavior mixture {0:?}; valid mixtures: play, diverse, uniform")]
    UnknownBehavior(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Bundled map name, or a path to an ASCII map when `map_path` is set.
    pub map: String,
    pub map_path: Option<PathBuf>,
    pub relation: String,
    pub slip: f64,
    pub discount: f64,
    /// Goal-ball radius for the random-cells relation.
    pub radius: f64,
    /// Goal-ball radius for the single-goal relation.
    pub single_goal_radius: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            map: "medium-analog".into(),
            map_path: None,
            relation: "four_rooms".into(),
            slip: 0.1,
            discount: 0.99,
            radius: 2.0,
            single_goal_radius: 1.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_dyn: usize,
    pub n_goal: usize,
    pub behavior: String,
    pub perturb: bool,
    pub episode_cap: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_dyn: 20_000,
            n_goal: 200,
            behavior: "play".into(),
            perturb: true,
            episode_cap: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    /// Backbone solver shared by every method.
    pub solver: String,
    /// Fraction of goal tuples per batch in the augmentation sampler.
    pub goal_ratio: f64,
    /// Count-penalty scale of the pessimistic solver.
    pub penalty: f64,
    pub expectile: f64,
    pub inv_temp: f64,
    /// Labeled tuples drawn for training.
    pub train_samples: usize,
    pub fqi_iters: usize,
    pub pspi_rounds: usize,
    pub pspi_eps_dyn: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            name: "coda".into(),
            solver: "pevi".into(),
            goal_ratio: 0.5,
            penalty: 0.1,
            expectile: 0.9,
            inv_temp: 10.0,
            train_samples: 500_000,
            fqi_iters: 3000,
            pspi_rounds: 600,
            pspi_eps_dyn: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Rollout horizon; `None` uses 4 * (map width + height).
    pub horizon: Option<usize>,
    pub test_contexts: String,
    pub n_test_contexts: usize,
    pub seeds: usize,
    pub out_dir: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            horizon: None,
            test_contexts: "in_distribution".into(),
            n_test_contexts: 10,
            seeds: 5,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub method: MethodConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Parses a file (or the defaults when `path` is `None`) and applies
    /// `section.key=value` overrides on the raw document before binding.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut table: toml::Table = text.parse().map_err(ConfigError::Parse)?;
        for entry in overrides {
            apply_override(&mut table, entry)?;
        }
        let config: Self = toml::Table::try_into(table)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !METHODS.contains(&self.method.name.as_str()) {
            return Err(ConfigError::UnknownMethod {
                got: self.method.name.clone(),
            });
        }
        if !SOLVERS.contains(&self.method.solver.as_str()) {
            return Err(ConfigError::UnknownSolver {
                got: self.method.solver.clone(),
            });
        }
        self.relation()?;
        self.test_mode()?;
        BehaviorSpec::by_name(&self.data.behavior)
            .map_err(|_| ConfigError::UnknownBehavior(self.data.behavior.clone()))?;
        Ok(())
    }

    pub fn relation(&self) -> Result<ContextRelation, ConfigError> {
        match self.env.relation.as_str() {
            "single_goal" => Ok(ContextRelation::SingleGoal {
                center: None,
                radius: self.env.single_goal_radius,
            }),
            "four_rooms" => Ok(ContextRelation::FourRooms),
            "random_cells" => Ok(ContextRelation::RandomCells {
                radius: self.env.radius,
            }),
            other => Err(ConfigError::UnknownRelation(other.to_string())),
        }
    }

    pub fn test_mode(&self) -> Result<TestContextMode, ConfigError> {
        match self.eval.test_contexts.as_str() {
            "in_distribution" => Ok(TestContextMode::InDistribution),
            "shifted" => Ok(TestContextMode::Shifted),
            other => Err(ConfigError::UnknownTestMode(other.to_string())),
        }
    }

    pub fn behavior(&self) -> BehaviorSpec {
        let mut spec = BehaviorSpec::by_name(&self.data.behavior).expect("validated");
        if self.data.episode_cap.is_some() {
            spec.episode_cap = self.data.episode_cap;
        }
        spec
    }

    pub fn build_env(&self) -> Result<GridCgo, ConfigError> {
        let text = match &self.env.map_path {
            Some(path) => std::fs::read_to_string(path)?,
            None => builtin_map(&self.env.map)?.to_string(),
        };
        let map = parse_map(&text)?.with_slip(self.env.slip)?;
        Ok(build_cgo(&map, &self.relation()?, self.env.discount)?)
    }

    /// Environment label used in report rows.
    pub fn env_label(&self) -> String {
        format!("{}/{}", self.env.map, self.env.relation)
    }
}

fn apply_override(table: &mut toml::Table, entry: &str) -> Result<(), ConfigError> {
    let (path, value) = entry
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(entry.into()))?;
    let mut parts = path.trim().split('.').peekable();
    let mut current = table;
    loop {
        let key = parts
            .next()
            .ok_or_else(|| ConfigError::BadOverride(entry.into()))?;
        if parts.peek().is_none() {
            let parsed: toml::Value = match value.trim().parse::<toml::Value>() {
                Ok(v) => v,
                Err(_) => toml::Value::String(value.trim().to_string()),
            };
            current.insert(key.to_string(), parsed);
            return Ok(());
        }
        current = current
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::UnknownOverrideKey(path.to_string()))?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let config = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(config.method.name, "coda");
        assert_eq!(config.data.n_dyn, 20_000);
        assert_eq!(config.data.n_goal, 200);
        assert_eq!(config.eval.episodes, 100);
        assert_eq!(config.eval.seeds, 5);
        assert_eq!(config.env.radius, 2.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[env]\nmaap = \"typo\"\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
        assert!(err.to_string().contains("maap"));
    }

    #[test]
    fn unknown_method_lists_valid_names() {
        let err = ExperimentConfig::from_toml("[method]\nname = \"sarsa\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sarsa"));
        for name in METHODS {
            assert!(msg.contains(name), "missing {name} in {msg}");
        }
    }

    #[test]
    fn overrides_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "[method]\nname = \"pds\"\n[env]\nslip = 0.2\n").unwrap();
        let config = ExperimentConfig::load(
            Some(&path),
            &[
                "method.name=coda".into(),
                "seed=7".into(),
                "env.discount=0.95".into(),
            ],
        )
        .unwrap();
        assert_eq!(config.method.name, "coda");
        assert_eq!(config.seed, 7);
        assert_eq!(config.env.discount, 0.95);
        assert_eq!(config.env.slip, 0.2);
    }

    #[test]
    fn bad_override_shapes_error() {
        assert!(matches!(
            ExperimentConfig::load(None, &["no-equals".into()]),
            Err(ConfigError::BadOverride(_))
        ));
        // Overriding through a scalar is a path error.
        assert!(ExperimentConfig::load(None, &["seed.deep=1".into()]).is_err());
    }

    #[test]
    fn builds_configured_env() {
        let config = ExperimentConfig::from_toml(
            "[env]\nmap = \"umaze-analog\"\nrelation = \"single_goal\"\n",
        )
        .unwrap();
        let env = config.build_env().unwrap();
        assert_eq!(env.mdp().n_contexts(), 1);
        assert_eq!(config.env_label(), "umaze-analog/single_goal");
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config = ExperimentConfig::default();
        let text = toml::to_string(&config).unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, config);
    }
}
