//! Experiment configuration: schema, validation, defaults, and the
//! provenance echo written into every run directory.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use modsbsg_core::game::{GameConfig, GameMode};
use modsbsg_core::learning::{ExplorationSchedule, SchedulerSpec};
use modsbsg_core::maps::EncoderScheme;
use modsbsg_core::plant::{EvalWeights, PlantConfig, PlantState, PlantTopology};

#[derive(Debug)]
pub enum ConfigError {
    /// The file could not be read or is not syntactically valid JSON.
    ParseError(String),
    /// The JSON does not satisfy the schema or semantic constraints.
    SchemaViolation { field: String, message: String },
    /// The named plant does not exist and no inline plant was given.
    MissingPlant(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::ParseError(msg) => write!(f, "parse error: {msg}"),
            ConfigError::SchemaViolation { field, message } => {
                write!(f, "schema violation at '{field}': {message}")
            }
            ConfigError::MissingPlant(name) => write!(f, "missing plant: {name}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Plant selection: one of the bundled names or an inline description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum PlantSelector {
    Named(String),
    Inline(PlantConfig),
}

fn default_bins() -> usize {
    5
}

fn default_alpha() -> f64 {
    modsbsg_core::game::DEFAULT_ALPHA
}

fn default_resolution() -> usize {
    40
}

fn default_gamma_map() -> f64 {
    modsbsg_core::game::DEFAULT_GAMMA_MAP
}

fn default_poly_degree() -> usize {
    2
}

fn default_scheduler() -> SchedulerSpec {
    SchedulerSpec::GradualReduction { theta0: 100.0, decay: 0.999975 }
}

fn default_encoder_scheme() -> EncoderScheme {
    EncoderScheme::CartesianProduct
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GameSection {
    pub mode: GameMode,
    #[serde(default)]
    pub leaders: Vec<usize>,
    #[serde(default = "default_scheduler")]
    pub scheduler: SchedulerSpec,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_resolution")]
    pub map_resolution: usize,
    #[serde(default = "default_gamma_map")]
    pub gamma_map: f64,
    #[serde(default = "default_poly_degree")]
    pub poly_degree: usize,
    #[serde(default = "default_encoder_scheme")]
    pub encoder_scheme: EncoderScheme,
    #[serde(default = "default_bins")]
    pub bins_per_leader: usize,
    #[serde(default)]
    pub exploration: Option<ExplorationSchedule>,
    /// Focus percentages (fill, power) per role; omitted roles use the
    /// plant's default weights.
    #[serde(default)]
    pub leader_focus: Option<[f64; 2]>,
    #[serde(default)]
    pub follower_focus: Option<[f64; 2]>,
    /// Curvature floor for the anticipatory leader gradient.
    #[serde(default)]
    pub eps_hess: Option<f64>,
    /// Trust-region bound on one applied update increment.
    #[serde(default)]
    pub max_update_step: Option<f64>,
}

impl Default for GameSection {
    fn default() -> Self {
        GameSection {
            mode: GameMode::VanillaSbPG,
            leaders: Vec::new(),
            scheduler: default_scheduler(),
            alpha: default_alpha(),
            map_resolution: default_resolution(),
            gamma_map: default_gamma_map(),
            poly_degree: default_poly_degree(),
            encoder_scheme: default_encoder_scheme(),
            bins_per_leader: default_bins(),
            exploration: None,
            leader_focus: None,
            follower_focus: None,
            eps_hess: None,
            max_update_step: None,
        }
    }
}

fn default_train_episodes() -> u64 {
    200
}

fn default_cycles() -> u64 {
    1000
}

fn default_test_episodes() -> u64 {
    50
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSection {
    #[serde(default = "default_train_episodes")]
    pub train: u64,
    #[serde(default = "default_cycles")]
    pub cycles_per_episode: u64,
    #[serde(default = "default_test_episodes")]
    pub test: u64,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        EpisodeSection {
            train: default_train_episodes(),
            cycles_per_episode: default_cycles(),
            test: default_test_episodes(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantSelector,
    #[serde(default)]
    pub game: GameSection,
    #[serde(default)]
    pub episodes: EpisodeSection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
}

/// A validated experiment: the config with defaults applied plus the
/// built plant and resolved game parameters.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub plant_config: PlantConfig,
    pub game_config: GameConfig,
}

impl ResolvedExperiment {
    pub fn build_plant(&self) -> Result<(PlantTopology, PlantState), ConfigError> {
        PlantTopology::from_config(&self.plant_config).map_err(|e| ConfigError::SchemaViolation {
            field: "plant".into(),
            message: e.to_string(),
        })
    }
}

/// Load, parse, and validate an experiment config file.
pub fn load_config(path: &Path) -> Result<ResolvedExperiment, ConfigError> {
    let text =
        fs::read_to_string(path).map_err(|e| ConfigError::ParseError(format!("{path:?}: {e}")))?;
    parse_config(&text)
}

/// Parse and validate config text.
pub fn parse_config(text: &str) -> Result<ResolvedExperiment, ConfigError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ConfigError::ParseError(e.to_string()))?;
    let config: ExperimentConfig = serde_json::from_value(value).map_err(|e| {
        ConfigError::SchemaViolation { field: "<document>".into(), message: e.to_string() }
    })?;
    resolve(config)
}

/// Validate a parsed config and resolve it against its plant.
pub fn resolve(config: ExperimentConfig) -> Result<ResolvedExperiment, ConfigError> {
    let plant_config = match &config.plant {
        PlantSelector::Named(name) => PlantTopology::bundled_config(name)
            .map_err(|_| ConfigError::MissingPlant(name.clone()))?,
        PlantSelector::Inline(inline) => inline.clone(),
    };
    let (topology, _) =
        PlantTopology::from_config(&plant_config).map_err(|e| ConfigError::SchemaViolation {
            field: "plant".into(),
            message: e.to_string(),
        })?;
    let n_players = topology.player_count();

    if config.episodes.train < 1 || config.episodes.cycles_per_episode < 1 {
        return Err(ConfigError::SchemaViolation {
            field: "episodes".into(),
            message: "training episodes and cycles per episode must be >= 1".into(),
        });
    }
    let game = &config.game;
    for &id in &game.leaders {
        if id >= n_players {
            return Err(ConfigError::SchemaViolation {
                field: "game.leaders".into(),
                message: format!("leader id {id} >= player count {n_players}"),
            });
        }
    }
    match game.mode {
        GameMode::ModSbSG if game.leaders.is_empty() => {
            return Err(ConfigError::SchemaViolation {
                field: "game.leaders".into(),
                message: "hierarchical mode requires at least one leader".into(),
            });
        }
        GameMode::ModSbSG if game.leaders.len() >= n_players => {
            return Err(ConfigError::SchemaViolation {
                field: "game.leaders".into(),
                message: "hierarchical mode requires at least one follower".into(),
            });
        }
        GameMode::VanillaSbPG if !game.leaders.is_empty() => {
            return Err(ConfigError::SchemaViolation {
                field: "game.leaders".into(),
                message: "the benchmark mode takes no leaders".into(),
            });
        }
        _ => {}
    }

    let theta_flatten = plant_config.eval.theta_flatten;
    let focus_weights = |focus: &Option<[f64; 2]>, field: &str| -> Result<Option<EvalWeights>, ConfigError> {
        match focus {
            None => Ok(None),
            Some([fill, power]) => {
                if *fill < 0.0 || *power < 0.0 || (fill + power - 100.0).abs() > 1e-9 {
                    return Err(ConfigError::SchemaViolation {
                        field: field.into(),
                        message: "focus percentages must be non-negative and sum to 100".into(),
                    });
                }
                Ok(Some(EvalWeights::from_focus(*fill, *power, theta_flatten)))
            }
        }
    };

    let game_config = GameConfig {
        mode: game.mode,
        leader_ids: {
            let mut ids = game.leaders.clone();
            ids.sort_unstable();
            ids.dedup();
            ids
        },
        scheduler: game.scheduler,
        alpha: game.alpha,
        map_resolution: game.map_resolution,
        gamma_map: game.gamma_map,
        poly_degree: game.poly_degree,
        encoder_scheme: game.encoder_scheme,
        bins_per_leader: game.bins_per_leader,
        exploration: game.exploration.unwrap_or_default(),
        leader_weights: focus_weights(&game.leader_focus, "game.leader_focus")?,
        follower_weights: focus_weights(&game.follower_focus, "game.follower_focus")?,
        ..GameConfig::vanilla()
    };
    let mut game_config = game_config;
    if let Some(eps) = game.eps_hess {
        game_config.eps_hess = eps;
    }
    if let Some(step) = game.max_update_step {
        game_config.max_update_step = step;
    }
    let game_config = game_config;
    game_config.validate(n_players).map_err(|e| ConfigError::SchemaViolation {
        field: "game".into(),
        message: e.to_string(),
    })?;

    // Echo defaults back into the config so the provenance file is fully
    // explicit.
    let mut config = config;
    config.game.exploration = Some(game_config.exploration);

    Ok(ResolvedExperiment { config, plant_config, game_config })
}

/// Serialize the resolved config for provenance.
pub fn echo_json(resolved: &ResolvedExperiment) -> String {
    let mut doc = serde_json::to_value(&resolved.config).expect("config serializes");
    // Inline the plant so the echo is self-contained.
    doc["plant"] = serde_json::to_value(&resolved.plant_config).expect("plant serializes");
    serde_json::to_string_pretty(&doc).expect("echo serializes") + "\n"
}
