//! Game structure and per-cycle orchestration: role assignment, coalition
//! assembly, role potentials, and the hierarchical decision protocol in
//! which leaders commit first, followers respond through stacked maps,
//! and training updates run followers-first with the leader coalition
//! held fixed.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::learning::{
    apply_follower_update, apply_leader_update, run_multi_step, stackelberg_leader_gradient,
    ExplorationSchedule, LearnError, OuNoise, PolyModel, SchedulerSpec, DEFAULT_EPS_HESS,
    DEFAULT_MAX_STEP, DEFAULT_OU_DT, DEFAULT_OU_MU, DEFAULT_OU_THETA,
};
use crate::maps::{
    EncoderScheme, GridSpec, LeaderActionEncoder, MapError, PerformanceMap, PlayerMaps, Sample,
    StackedPerformanceMap, DEFAULT_BINS_PER_LEADER, DEFAULT_RESOLUTION, DEFAULT_STACK_CAPACITY,
};
use crate::plant::{EvalWeights, PlantError, PlantState, PlantTopology};

/// Fallback buffer capacity per map layer.
pub const DEFAULT_BUFFER_CAPACITY: usize = 512;
/// Default learning rate.
pub const DEFAULT_ALPHA: f64 = 0.05;
/// Default interpolation smoothing.
pub const DEFAULT_GAMMA_MAP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum GameError {
    EmptyLeaderSet,
    LeaderSetCoversAllPlayers,
    UnknownPlayerId(usize),
    NonFiniteUtility(usize),
    Map(MapError),
    Learn(LearnError),
    Plant(PlantError),
    InvalidConfig(String),
}

impl fmt::Display for GameError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GameError::EmptyLeaderSet => write!(f, "hierarchical mode requires at least one leader"),
            GameError::LeaderSetCoversAllPlayers => {
                write!(f, "hierarchical mode requires at least one follower")
            }
            GameError::UnknownPlayerId(id) => write!(f, "leader id {id} is not a player"),
            GameError::NonFiniteUtility(id) => write!(f, "utility of player {id} is not finite"),
            GameError::Map(e) => write!(f, "map error: {e}"),
            GameError::Learn(e) => write!(f, "learning error: {e}"),
            GameError::Plant(e) => write!(f, "plant error: {e}"),
            GameError::InvalidConfig(msg) => write!(f, "invalid game config: {msg}"),
        }
    }
}

impl std::error::Error for GameError {}

impl From<MapError> for GameError {
    fn from(e: MapError) -> Self {
        GameError::Map(e)
    }
}

impl From<LearnError> for GameError {
    fn from(e: LearnError) -> Self {
        GameError::Learn(e)
    }
}

impl From<PlantError> for GameError {
    fn from(e: PlantError) -> Self {
        GameError::Plant(e)
    }
}

/// Player index, contiguous from zero within a game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PlayerId(pub usize);

impl fmt::Display for PlayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "player {}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Leader,
    Follower,
}

/// Total role assignment. The benchmark mode treats every player as a
/// peer: simultaneous selection from flat maps and a single follower-rule
/// update per cycle, with no hierarchy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoleMap {
    Peers { n_players: usize },
    Hierarchy { roles: Vec<Role> },
}

impl RoleMap {
    pub fn n_players(&self) -> usize {
        match self {
            RoleMap::Peers { n_players } => *n_players,
            RoleMap::Hierarchy { roles } => roles.len(),
        }
    }

    pub fn role(&self, player: usize) -> Option<Role> {
        match self {
            RoleMap::Peers { .. } => None,
            RoleMap::Hierarchy { roles } => roles.get(player).copied(),
        }
    }

    pub fn is_leader(&self, player: usize) -> bool {
        self.role(player) == Some(Role::Leader)
    }

    pub fn leaders(&self) -> Vec<usize> {
        match self {
            RoleMap::Peers { .. } => Vec::new(),
            RoleMap::Hierarchy { roles } => roles
                .iter()
                .enumerate()
                .filter(|(_, r)| **r == Role::Leader)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    pub fn followers(&self) -> Vec<usize> {
        match self {
            RoleMap::Peers { n_players } => (0..*n_players).collect(),
            RoleMap::Hierarchy { roles } => roles
                .iter()
                .enumerate()
                .filter(|(_, r)| **r == Role::Follower)
                .map(|(i, _)| i)
                .collect(),
        }
    }
}

/// Ordered coalition of (player, normalized action) pairs with its scalar
/// summary, the arithmetic mean of the member actions.
#[derive(Debug, Clone, PartialEq)]
pub struct CoalitionAction {
    pub members: Vec<(usize, f64)>,
    pub summary: f64,
}

impl CoalitionAction {
    pub fn new(mut members: Vec<(usize, f64)>) -> Self {
        members.sort_by_key(|(id, _)| *id);
        let summary = if members.is_empty() {
            0.0
        } else {
            members.iter().map(|(_, a)| a).sum::<f64>() / members.len() as f64
        };
        CoalitionAction { members, summary }
    }

    pub fn actions(&self) -> Vec<f64> {
        self.members.iter().map(|(_, a)| *a).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GameMode {
    #[serde(rename = "vanilla_sbpg")]
    VanillaSbPG,
    #[serde(rename = "mod_sbsg")]
    ModSbSG,
}

/// Tunable game/learning parameters shared by every player.
#[derive(Debug, Clone, PartialEq)]
pub struct GameConfig {
    pub mode: GameMode,
    pub leader_ids: Vec<usize>,
    pub scheduler: SchedulerSpec,
    pub alpha: f64,
    pub map_resolution: usize,
    pub gamma_map: f64,
    pub poly_degree: usize,
    pub encoder_scheme: EncoderScheme,
    pub bins_per_leader: usize,
    pub exploration: ExplorationSchedule,
    pub ou_theta: f64,
    pub ou_mu: f64,
    pub ou_dt: f64,
    pub stack_capacity: usize,
    pub buffer_capacity: usize,
    pub eps_hess: f64,
    /// Trust-region bound on a single applied update increment.
    pub max_update_step: f64,
    /// Per-role utility weights; `None` uses the plant defaults.
    pub leader_weights: Option<EvalWeights>,
    pub follower_weights: Option<EvalWeights>,
}

impl GameConfig {
    pub fn vanilla() -> Self {
        GameConfig {
            mode: GameMode::VanillaSbPG,
            leader_ids: Vec::new(),
            scheduler: SchedulerSpec::Static { steps: 1 },
            alpha: DEFAULT_ALPHA,
            map_resolution: DEFAULT_RESOLUTION,
            gamma_map: DEFAULT_GAMMA_MAP,
            poly_degree: 2,
            encoder_scheme: EncoderScheme::CartesianProduct,
            bins_per_leader: DEFAULT_BINS_PER_LEADER,
            exploration: ExplorationSchedule::default(),
            ou_theta: DEFAULT_OU_THETA,
            ou_mu: DEFAULT_OU_MU,
            ou_dt: DEFAULT_OU_DT,
            stack_capacity: DEFAULT_STACK_CAPACITY,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            eps_hess: DEFAULT_EPS_HESS,
            max_update_step: DEFAULT_MAX_STEP,
            leader_weights: None,
            follower_weights: None,
        }
    }

    pub fn mod_sbsg(leader_ids: Vec<usize>, scheduler: SchedulerSpec) -> Self {
        GameConfig {
            mode: GameMode::ModSbSG,
            leader_ids,
            scheduler,
            ..GameConfig::vanilla()
        }
    }

    pub fn validate(&self, n_players: usize) -> Result<(), GameError> {
        if self.alpha <= 0.0 {
            return Err(GameError::InvalidConfig("learning rate must be > 0".into()));
        }
        if self.map_resolution < 2 {
            return Err(GameError::InvalidConfig("map resolution must be >= 2".into()));
        }
        if self.gamma_map <= 0.0 {
            return Err(GameError::InvalidConfig("map smoothing must be > 0".into()));
        }
        if self.poly_degree < 1 {
            return Err(GameError::InvalidConfig("polynomial degree must be >= 1".into()));
        }
        self.scheduler.validate().map_err(GameError::InvalidConfig)?;
        for &id in &self.leader_ids {
            if id >= n_players {
                return Err(GameError::UnknownPlayerId(id));
            }
        }
        Ok(())
    }
}

/// Total role map for a game of `n_players`.
pub fn assign_roles(config: &GameConfig, n_players: usize) -> Result<RoleMap, GameError> {
    config.validate(n_players)?;
    match config.mode {
        GameMode::VanillaSbPG => Ok(RoleMap::Peers { n_players }),
        GameMode::ModSbSG => {
            if config.leader_ids.is_empty() {
                return Err(GameError::EmptyLeaderSet);
            }
            let mut roles = vec![Role::Follower; n_players];
            for &id in &config.leader_ids {
                roles[id] = Role::Leader;
            }
            if roles.iter().all(|r| *r == Role::Leader) {
                return Err(GameError::LeaderSetCoversAllPlayers);
            }
            Ok(RoleMap::Hierarchy { roles })
        }
    }
}

/// Role potentials: the sum of each role's member utilities. Peer games
/// report everything under the follower potential.
pub fn compute_potentials(utilities: &[f64], roles: &RoleMap) -> Result<(f64, f64), GameError> {
    for (i, u) in utilities.iter().enumerate() {
        if !u.is_finite() {
            return Err(GameError::NonFiniteUtility(i));
        }
    }
    match roles {
        RoleMap::Peers { .. } => Ok((0.0, utilities.iter().sum())),
        RoleMap::Hierarchy { roles } => {
            let mut phi_l = 0.0;
            let mut phi_f = 0.0;
            for (u, role) in utilities.iter().zip(roles) {
                match role {
                    Role::Leader => phi_l += u,
                    Role::Follower => phi_f += u,
                }
            }
            Ok((phi_l, phi_f))
        }
    }
}

/// Ordered stage markers recorded when tracing is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    LeaderSelect(usize),
    LeaderCoalitionAssembled,
    FollowerSelect(usize),
    PeerSelect(usize),
    FollowerCoalitionAssembled,
    PlantStepped,
    Evaluated,
    FollowerUpdatesDone,
    LeaderUpdatesDone,
}

/// Everything observed and computed in one decision cycle.
#[derive(Debug, Clone)]
pub struct CycleRecord {
    pub t: u64,
    pub views: Vec<Vec<f64>>,
    pub actions: Vec<f64>,
    pub utilities: Vec<f64>,
    pub phi_l: f64,
    pub phi_f: f64,
    pub phi_total: f64,
    pub leader_coalition: CoalitionAction,
    pub follower_coalition: CoalitionAction,
    pub power_total_kw: f64,
    pub overflow_l: f64,
    pub deficit_l: f64,
    pub delivered_l: f64,
    pub follower_steps: usize,
    pub trace: Option<Vec<TraceEvent>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    LeadersSelected,
    FollowersSelected,
    Stepped,
    Evaluated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Treatment {
    Leader,
    Follower,
    Peer,
}

struct PlayerAgent {
    treatment: Treatment,
    maps: PlayerMaps,
    noise: OuNoise,
    explore_rng: ChaCha12Rng,
    /// Surrogate of the potential this player ascends.
    model_primary: PolyModel,
    /// Leaders also track the follower-coalition potential.
    model_secondary: Option<PolyModel>,
    /// Layer-global fallback sample buffers (one per map layer).
    buffers: Vec<VecDeque<Sample>>,
    weights: EvalWeights,
}

impl PlayerAgent {
    fn layer_buffer_push(&mut self, layer: usize, sample: Sample, capacity: usize) {
        let buf = &mut self.buffers[layer];
        buf.push_back(sample);
        while buf.len() > capacity {
            buf.pop_front();
        }
    }
}

/// Owns the plant, the players, and the cycle protocol.
pub struct GameOrchestrator {
    topology: PlantTopology,
    state: PlantState,
    config: GameConfig,
    roles: RoleMap,
    agents: Vec<PlayerAgent>,
    clock: u64,
    training: bool,
    record_trace: bool,
    phase: Phase,
}

impl GameOrchestrator {
    pub fn new(
        topology: PlantTopology,
        state: PlantState,
        config: GameConfig,
        master_seed: u64,
    ) -> Result<Self, GameError> {
        let n = topology.player_count();
        let roles = assign_roles(&config, n)?;
        let encoder = if config.mode == GameMode::ModSbSG {
            Some(LeaderActionEncoder::new(
                config.leader_ids.len(),
                config.bins_per_leader,
                config.encoder_scheme,
            ))
        } else {
            None
        };
        let mut agents = Vec::with_capacity(n);
        for player in 0..n {
            let view = topology.player_state_view(&state, player, None, false)?;
            let grid = GridSpec::new(view.fills.len(), config.map_resolution);
            let treatment = match roles.role(player) {
                Some(Role::Leader) => Treatment::Leader,
                Some(Role::Follower) => Treatment::Follower,
                None => Treatment::Peer,
            };
            let maps = match (treatment, encoder) {
                (Treatment::Follower, Some(enc)) => {
                    let stacked = StackedPerformanceMap::new(grid, config.gamma_map, enc);
                    PlayerMaps::Stacked(stacked)
                }
                _ => PlayerMaps::Flat(
                    PerformanceMap::new(grid, config.gamma_map)
                        .with_stack_capacity(config.stack_capacity),
                ),
            };
            let layer_count = match &maps {
                PlayerMaps::Flat(_) => 1,
                PlayerMaps::Stacked(s) => s.layer_count(),
            };
            let noise = OuNoise::new(
                config.ou_theta,
                config.ou_mu,
                config.exploration.sigma_at(0),
                config.ou_dt,
                master_seed,
                (player as u64) * 2,
            );
            let mut explore_rng = ChaCha12Rng::seed_from_u64(master_seed);
            explore_rng.set_stream((player as u64) * 2 + 1);
            let weights = match treatment {
                Treatment::Leader => config.leader_weights.unwrap_or(topology.default_weights),
                _ => config.follower_weights.unwrap_or(topology.default_weights),
            };
            agents.push(PlayerAgent {
                treatment,
                maps,
                noise,
                explore_rng,
                model_primary: PolyModel::new(config.poly_degree),
                model_secondary: (treatment == Treatment::Leader)
                    .then(|| PolyModel::new(config.poly_degree)),
                buffers: vec![VecDeque::new(); layer_count],
                weights,
            });
        }
        Ok(GameOrchestrator {
            topology,
            state,
            config,
            roles,
            agents,
            clock: 0,
            training: true,
            record_trace: false,
            phase: Phase::Idle,
        })
    }

    pub fn roles(&self) -> &RoleMap {
        &self.roles
    }

    pub fn config(&self) -> &GameConfig {
        &self.config
    }

    pub fn topology(&self) -> &PlantTopology {
        &self.topology
    }

    pub fn plant_state(&self) -> &PlantState {
        &self.state
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn set_training(&mut self, on: bool) {
        self.training = on;
    }

    pub fn set_trace(&mut self, on: bool) {
        self.record_trace = on;
    }

    pub fn player_maps(&self, player: usize) -> &PlayerMaps {
        &self.agents[player].maps
    }

    pub fn player_maps_mut(&mut self, player: usize) -> &mut PlayerMaps {
        &mut self.agents[player].maps
    }

    pub fn player_weights(&self) -> Vec<EvalWeights> {
        self.agents.iter().map(|a| a.weights).collect()
    }

    /// Total exploration draws across all players (noise steps plus
    /// uniform fallback selections).
    pub fn noise_draw_total(&self) -> u64 {
        self.agents.iter().map(|a| a.noise.draw_count()).sum()
    }

    /// Reset the plant to its initial state and rescale exploration for
    /// a new episode. Policies persist.
    pub fn begin_episode(&mut self, episode: u64) {
        self.state = self.topology.initial_state();
        if self.training {
            let sigma = self.config.exploration.sigma_at(episode);
            for agent in &mut self.agents {
                agent.noise.set_sigma(sigma);
                agent.noise.set_value(self.config.ou_mu);
            }
        }
    }

    fn advance_phase(&mut self, from: Phase, to: Phase) {
        assert_eq!(self.phase, from, "cycle stages ran out of order");
        self.phase = to;
    }

    fn select_action(
        agent: &mut PlayerAgent,
        fills: &[f64],
        layer: Option<usize>,
        training: bool,
    ) -> Result<f64, GameError> {
        let selected = match (&agent.maps, layer) {
            (PlayerMaps::Flat(m), _) => m.interpolate_action(fills),
            (PlayerMaps::Stacked(s), Some(l)) => s.interpolate_with_fallback(l, fills),
            (PlayerMaps::Stacked(_), None) => {
                unreachable!("stacked maps always select through a layer")
            }
        };
        match selected {
            Ok(a) => Ok(a),
            Err(MapError::NoVisitedCells) => {
                // Nothing explored yet: uniform exploration while
                // training, neutral action otherwise.
                if training {
                    Ok(agent.explore_rng.gen())
                } else {
                    Ok(0.5)
                }
            }
            Err(e) => Err(e.into()),
        }
    }

    fn fit_samples(
        stack: &VecDeque<Sample>,
        buffer: &VecDeque<Sample>,
        needed: usize,
        own_is_x1: bool,
        use_aux: bool,
    ) -> Vec<(f64, f64, f64)> {
        let source = if stack.len() >= needed { stack } else { buffer };
        source
            .iter()
            .map(|s| {
                let y = if use_aux { s.aux } else { s.value };
                if own_is_x1 {
                    (s.own, s.other, y)
                } else {
                    (s.other, s.own, y)
                }
            })
            .collect()
    }

    /// One decision cycle. Order: leaders select, leader coalition forms,
    /// followers select against it, follower coalition forms, the joint
    /// action drives the plant, utilities and potentials are evaluated,
    /// and in training mode followers run their multi-step updates with
    /// the leader coalition fixed before leaders update once.
    pub fn run_cycle(&mut self) -> Result<CycleRecord, GameError> {
        let n = self.topology.player_count();
        let mut trace = self.record_trace.then(Vec::new);
        let push = |trace: &mut Option<Vec<TraceEvent>>, e: TraceEvent| {
            if let Some(t) = trace {
                t.push(e);
            }
        };
        self.phase = Phase::Idle;

        let mut actions = vec![f64::NAN; n];
        let mut views: Vec<Vec<f64>> = vec![Vec::new(); n];

        // Stage 1-2: leaders (or all peers) read their views and commit.
        let first_movers: Vec<usize> = match self.roles {
            RoleMap::Peers { .. } => (0..n).collect(),
            RoleMap::Hierarchy { .. } => self.roles.leaders(),
        };
        for &player in &first_movers {
            let view = self.topology.player_state_view(&self.state, player, None, false)?;
            let a =
                Self::select_action(&mut self.agents[player], &view.fills, None, self.training)?;
            actions[player] = a;
            views[player] = view.fills;
            push(
                &mut trace,
                match self.roles {
                    RoleMap::Peers { .. } => TraceEvent::PeerSelect(player),
                    RoleMap::Hierarchy { .. } => TraceEvent::LeaderSelect(player),
                },
            );
        }
        let leader_coalition = match self.roles {
            RoleMap::Peers { .. } => CoalitionAction::new(Vec::new()),
            RoleMap::Hierarchy { .. } => CoalitionAction::new(
                first_movers.iter().map(|&l| (l, actions[l])).collect(),
            ),
        };
        if matches!(self.roles, RoleMap::Hierarchy { .. }) {
            push(&mut trace, TraceEvent::LeaderCoalitionAssembled);
        }
        self.advance_phase(Phase::Idle, Phase::LeadersSelected);

        // Stage 3-4: followers respond to the committed coalition.
        let follower_layer = match self.roles {
            RoleMap::Hierarchy { .. } => {
                let enc = LeaderActionEncoder::new(
                    self.config.leader_ids.len(),
                    self.config.bins_per_leader,
                    self.config.encoder_scheme,
                );
                Some(enc.encode(&leader_coalition.actions())?)
            }
            RoleMap::Peers { .. } => None,
        };
        if let RoleMap::Hierarchy { .. } = self.roles {
            for player in self.roles.followers() {
                let view = self.topology.player_state_view(
                    &self.state,
                    player,
                    Some(&leader_coalition.actions()),
                    true,
                )?;
                let a = Self::select_action(
                    &mut self.agents[player],
                    &view.fills,
                    follower_layer,
                    self.training,
                )?;
                actions[player] = a;
                views[player] = view.fills;
                push(&mut trace, TraceEvent::FollowerSelect(player));
            }
        }
        let follower_coalition = CoalitionAction::new(
            self.roles.followers().iter().map(|&p| (p, actions[p])).collect(),
        );
        push(&mut trace, TraceEvent::FollowerCoalitionAssembled);
        self.advance_phase(Phase::LeadersSelected, Phase::FollowersSelected);

        // Stage 5: the joint action drives the plant.
        let report = self.topology.step(&mut self.state, &actions)?;
        push(&mut trace, TraceEvent::PlantStepped);
        self.advance_phase(Phase::FollowersSelected, Phase::Stepped);

        // Stage 6: utilities from the post-step state and the applied
        // actions; role potentials from the utilities.
        let weights = self.player_weights();
        let utilities = self.topology.player_utilities(&self.state, &actions, &weights)?;
        let (phi_l, phi_f) = compute_potentials(&utilities, &self.roles)?;
        push(&mut trace, TraceEvent::Evaluated);
        self.advance_phase(Phase::Stepped, Phase::Evaluated);

        // Stage 7: training updates, followers first.
        let mut follower_steps = 0;
        if self.training {
            follower_steps = self.learn(
                &views,
                &actions,
                &leader_coalition,
                &follower_coalition,
                follower_layer,
                phi_l,
                phi_f,
                &mut trace,
            )?;
            self.clock += 1;
        }

        Ok(CycleRecord {
            t: self.clock,
            views,
            actions,
            utilities,
            phi_l,
            phi_f,
            phi_total: phi_l + phi_f,
            leader_coalition,
            follower_coalition,
            power_total_kw: report.total_power_kw,
            overflow_l: report.overflowed_l,
            deficit_l: report.deficit_l,
            delivered_l: report.delivered_l,
            follower_steps,
            trace,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn learn(
        &mut self,
        views: &[Vec<f64>],
        actions: &[f64],
        leader_coalition: &CoalitionAction,
        follower_coalition: &CoalitionAction,
        follower_layer: Option<usize>,
        phi_l: f64,
        phi_f: f64,
        trace: &mut Option<Vec<TraceEvent>>,
    ) -> Result<usize, GameError> {
        let n = self.topology.player_count();
        let alpha = self.config.alpha;
        let needed = crate::learning::coefficient_count(self.config.poly_degree);
        let buffer_capacity = self.config.buffer_capacity;
        let phi_total = phi_l + phi_f;

        // Record this cycle's sample into each player's policy map and
        // fallback buffer, remembering the written cell.
        let mut cells = vec![0usize; n];
        for player in 0..n {
            let agent = &mut self.agents[player];
            let (other, value, aux, layer) = match agent.treatment {
                Treatment::Leader => (follower_coalition.summary, phi_l, phi_f, 0),
                Treatment::Follower => {
                    (leader_coalition.summary, phi_f, 0.0, follower_layer.unwrap_or(0))
                }
                Treatment::Peer => {
                    let others = if n > 1 {
                        (actions.iter().sum::<f64>() - actions[player]) / (n as f64 - 1.0)
                    } else {
                        0.0
                    };
                    (others, phi_total, 0.0, 0)
                }
            };
            let sample = Sample { own: actions[player], other, value, aux };
            let cell = match &mut agent.maps {
                PlayerMaps::Flat(m) => {
                    m.record_sample(&views[player], sample.own, sample.other, value, aux)?
                }
                PlayerMaps::Stacked(s) => s
                    .layer_mut(layer)
                    .record_sample(&views[player], sample.own, sample.other, value, aux)?,
            };
            cells[player] = cell;
            agent.layer_buffer_push(layer, sample, buffer_capacity);
        }

        // Followers (and peers) update first; multi-step only applies to
        // hierarchical followers, with the leader coalition held fixed.
        let mut total_steps = 0;
        let responders = self.roles.followers();
        for &player in &responders {
            let agent = &mut self.agents[player];
            let layer = match agent.treatment {
                Treatment::Follower => follower_layer.unwrap_or(0),
                _ => 0,
            };
            let cell = cells[player];
            let other_summary = match agent.treatment {
                Treatment::Follower => leader_coalition.summary,
                _ => {
                    let others = if n > 1 {
                        (actions.iter().sum::<f64>() - actions[player]) / (n as f64 - 1.0)
                    } else {
                        0.0
                    };
                    others
                }
            };
            // Fit the surrogate from the target cell's samples. Stacked
            // maps pool the cell across layers (the leader coalition is a
            // regressor, so the data stays conditioned); the fallback is
            // the player's sample buffers.
            let data: Vec<(f64, f64, f64)> = {
                let cell_samples: Vec<Sample> = match &agent.maps {
                    PlayerMaps::Flat(m) => m
                        .cell(cell)
                        .map(|c| c.stack.iter().copied().collect())
                        .unwrap_or_default(),
                    PlayerMaps::Stacked(s) => s.pooled_cell_samples(cell).copied().collect(),
                };
                let pick = |s: &Sample| (s.other, s.own, s.value);
                if cell_samples.len() >= needed {
                    cell_samples.iter().map(pick).collect()
                } else {
                    agent.buffers.iter().flatten().map(pick).collect()
                }
            };
            if data.len() >= needed {
                let _ = agent.model_primary.fit(&data);
            }
            let map = match &mut agent.maps {
                PlayerMaps::Flat(m) => m,
                PlayerMaps::Stacked(s) => s.layer_mut(layer),
            };
            let model = agent.model_primary.is_fitted().then_some(&agent.model_primary);
            let max_step = self.config.max_update_step;
            // Multi-step convergence toward the surrogate best response
            // is only meaningful while the surrogate is concave in the
            // own action; a convex fit would run the action into a bound.
            let concave = model
                .and_then(|m| m.query(other_summary, 0.5).ok())
                .map(|q| q.d2_x2x2 < 0.0)
                .unwrap_or(false);
            match agent.treatment {
                Treatment::Follower if concave => {
                    // Exploration noise enters once per cycle; the
                    // remaining inner steps run the surrogate toward its
                    // best response with the leader coalition fixed.
                    let mut first = true;
                    let noise = &mut agent.noise;
                    let steps = run_multi_step(&self.config.scheduler, self.clock, || {
                        let n = if first {
                            first = false;
                            Some(&mut *noise)
                        } else {
                            None
                        };
                        apply_follower_update(map, cell, model, other_summary, alpha, max_step, n)
                            .map(|(_, g)| g)
                            .unwrap_or(0.0)
                    });
                    total_steps += steps;
                }
                _ => {
                    apply_follower_update(
                        map,
                        cell,
                        model,
                        other_summary,
                        alpha,
                        max_step,
                        Some(&mut agent.noise),
                    )?;
                    total_steps += 1;
                }
            }
        }
        if matches!(self.roles, RoleMap::Hierarchy { .. }) {
            if let Some(t) = trace {
                t.push(TraceEvent::FollowerUpdatesDone);
            }
        }

        // Leaders update once, anticipating the follower response.
        for player in self.roles.leaders() {
            let agent = &mut self.agents[player];
            let cell = cells[player];
            let map = match &mut agent.maps {
                PlayerMaps::Flat(m) => m,
                PlayerMaps::Stacked(_) => unreachable!("leaders use flat maps"),
            };
            if let Some(stack) = map.cell(cell).map(|c| &c.stack) {
                let primary = Self::fit_samples(stack, &agent.buffers[0], needed, true, false);
                if primary.len() >= needed {
                    let _ = agent.model_primary.fit(&primary);
                }
                let secondary = Self::fit_samples(stack, &agent.buffers[0], needed, true, true);
                if secondary.len() >= needed {
                    if let Some(m) = agent.model_secondary.as_mut() {
                        let _ = m.fit(&secondary);
                    }
                }
            }
            // Graded fallback: full anticipatory gradient when both
            // surrogates are live, the plain partial when only the own
            // objective is, exploration otherwise.
            let omega = match (&agent.model_primary, &agent.model_secondary) {
                (primary, Some(secondary)) if primary.is_fitted() && secondary.is_fitted() => {
                    stackelberg_leader_gradient(
                        primary,
                        secondary,
                        actions[player],
                        follower_coalition.summary,
                        self.config.eps_hess,
                    )?
                    .omega
                }
                (primary, _) if primary.is_fitted() => {
                    primary.query(actions[player], follower_coalition.summary)?.d_x1
                }
                _ => 0.0,
            };
            apply_leader_update(
                map,
                cell,
                omega,
                alpha,
                self.config.max_update_step,
                Some(&mut agent.noise),
            )?;
        }
        if matches!(self.roles, RoleMap::Hierarchy { .. }) {
            if let Some(t) = trace {
                t.push(TraceEvent::LeaderUpdatesDone);
            }
        }
        Ok(total_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::SchedulerSpec;
    use crate::plant::PlantTopology;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn bglp_orchestrator(config: GameConfig, seed: u64) -> GameOrchestrator {
        let (topology, state) = PlantTopology::from_name("bglp").unwrap();
        GameOrchestrator::new(topology, state, config, seed).unwrap()
    }

    fn seed_constant_policies(game: &mut GameOrchestrator, constants: &[f64]) {
        // A map with exactly one visited cell interpolates to that cell's
        // action everywhere: a constant stub policy.
        for (player, &c) in constants.iter().enumerate() {
            let dims = game.player_maps(player).grid().dims;
            let state = vec![0.5; dims];
            match game.player_maps_mut(player) {
                PlayerMaps::Flat(m) => {
                    m.record_sample(&state, c, 0.0, 0.0, 0.0).unwrap();
                }
                PlayerMaps::Stacked(s) => {
                    for l in 0..s.layer_count() {
                        s.layer_mut(l).record_sample(&state, c, 0.0, 0.0, 0.0).unwrap();
                    }
                }
            }
        }
    }

    #[test]
    fn assign_roles_hierarchy() {
        // Five players with the third and fourth as leaders.
        let config =
            GameConfig::mod_sbsg(vec![2, 3], SchedulerSpec::Static { steps: 1 });
        let roles = assign_roles(&config, 5).unwrap();
        assert_eq!(roles.leaders(), vec![2, 3]);
        assert_eq!(roles.followers(), vec![0, 1, 4]);

        let config =
            GameConfig::mod_sbsg(vec![1, 2, 5, 10], SchedulerSpec::Static { steps: 1 });
        let roles = assign_roles(&config, 14).unwrap();
        assert_eq!(roles.leaders().len(), 4);
        assert_eq!(roles.followers().len(), 10);
    }

    #[test]
    fn assign_roles_rejects_bad_leader_sets() {
        let config = GameConfig::mod_sbsg(vec![], SchedulerSpec::Static { steps: 1 });
        assert!(matches!(assign_roles(&config, 5), Err(GameError::EmptyLeaderSet)));

        let config =
            GameConfig::mod_sbsg(vec![0, 1, 2], SchedulerSpec::Static { steps: 1 });
        assert!(matches!(
            assign_roles(&config, 3),
            Err(GameError::LeaderSetCoversAllPlayers)
        ));

        let config = GameConfig::mod_sbsg(vec![7], SchedulerSpec::Static { steps: 1 });
        assert!(matches!(assign_roles(&config, 5), Err(GameError::UnknownPlayerId(7))));
    }

    #[test]
    fn vanilla_mode_marks_everyone_a_peer() {
        let roles = assign_roles(&GameConfig::vanilla(), 5).unwrap();
        assert_eq!(roles, RoleMap::Peers { n_players: 5 });
        assert!(roles.leaders().is_empty());
        assert_eq!(roles.followers().len(), 5);
    }

    #[test]
    fn coalition_summary_is_member_mean() {
        let c = CoalitionAction::new(vec![(3, 0.6), (2, 0.2)]);
        assert_eq!(c.members, vec![(2, 0.2), (3, 0.6)]);
        assert!((c.summary - 0.4).abs() < 1e-15);
    }

    #[test]
    fn potentials_sum_role_members() {
        let roles = RoleMap::Hierarchy {
            roles: vec![Role::Leader, Role::Follower, Role::Follower],
        };
        let (phi_l, phi_f) = compute_potentials(&[0.4, 0.1, 0.2], &roles).unwrap();
        assert!((phi_l - 0.4).abs() < 1e-15);
        assert!((phi_f - 0.3).abs() < 1e-15);

        let (zl, zf) = compute_potentials(&[0.0, 0.0, 0.0], &roles).unwrap();
        assert_eq!((zl, zf), (0.0, 0.0));

        assert!(matches!(
            compute_potentials(&[f64::NAN, 0.0, 0.0], &roles),
            Err(GameError::NonFiniteUtility(0))
        ));
    }

    #[test]
    fn potential_total_invariant_under_role_reassignment() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..500 {
            let n = rng.gen_range(2..10);
            let utilities: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let mut totals = Vec::new();
            for _ in 0..4 {
                let roles: Vec<Role> = (0..n)
                    .map(|_| if rng.gen::<bool>() { Role::Leader } else { Role::Follower })
                    .collect();
                let map = RoleMap::Hierarchy { roles };
                let (l, f) = compute_potentials(&utilities, &map).unwrap();
                totals.push(l + f);
            }
            for w in totals.windows(2) {
                assert!((w[0] - w[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cycle_orders_leaders_before_followers_before_plant() {
        let config = GameConfig::mod_sbsg(vec![2, 3], SchedulerSpec::Static { steps: 2 });
        let mut game = bglp_orchestrator(config, 1);
        seed_constant_policies(&mut game, &[0.1, 0.2, 0.3, 0.4, 0.5]);
        game.set_trace(true);
        let record = game.run_cycle().unwrap();
        let trace = record.trace.unwrap();

        let pos = |e: &TraceEvent| trace.iter().position(|x| x == e).unwrap();
        let leader_max = [2, 3].iter().map(|&l| pos(&TraceEvent::LeaderSelect(l))).max().unwrap();
        let follower_min =
            [0, 1, 4].iter().map(|&p| pos(&TraceEvent::FollowerSelect(p))).min().unwrap();
        assert!(leader_max < pos(&TraceEvent::LeaderCoalitionAssembled));
        assert!(pos(&TraceEvent::LeaderCoalitionAssembled) < follower_min);
        assert!(follower_min < pos(&TraceEvent::PlantStepped));
        assert!(pos(&TraceEvent::PlantStepped) < pos(&TraceEvent::Evaluated));
        assert!(pos(&TraceEvent::FollowerUpdatesDone) < pos(&TraceEvent::LeaderUpdatesDone));
    }

    #[test]
    fn vanilla_cycle_selects_simultaneously_single_updates() {
        let mut game = bglp_orchestrator(GameConfig::vanilla(), 1);
        seed_constant_policies(&mut game, &[0.1, 0.2, 0.3, 0.4, 0.5]);
        game.set_trace(true);
        let record = game.run_cycle().unwrap();
        let trace = record.trace.unwrap();
        let selects = trace
            .iter()
            .filter(|e| matches!(e, TraceEvent::PeerSelect(_)))
            .count();
        assert_eq!(selects, 5);
        assert!(!trace.iter().any(|e| matches!(
            e,
            TraceEvent::LeaderSelect(_) | TraceEvent::FollowerSelect(_)
        )));
        // One update step per peer per cycle.
        assert_eq!(record.follower_steps, 5);
    }

    #[test]
    fn coalition_broadcast_matches_joint_action() {
        let config = GameConfig::mod_sbsg(vec![1, 3], SchedulerSpec::Static { steps: 1 });
        let mut game = bglp_orchestrator(config, 3);
        seed_constant_policies(&mut game, &[0.15, 0.2, 0.35, 0.6, 0.85]);
        let record = game.run_cycle().unwrap();
        // Constant stub policies: leaders 1 and 3 play 0.2 and 0.6.
        assert!((record.actions[1] - 0.2).abs() < 1e-12);
        assert!((record.actions[3] - 0.6).abs() < 1e-12);
        assert!((record.leader_coalition.summary - 0.4).abs() < 1e-12);
        // Every player acts exactly once and the coalition members carry
        // the same values as the joint action.
        for &(id, a) in &record.leader_coalition.members {
            assert_eq!(a, record.actions[id]);
        }
        for &(id, a) in &record.follower_coalition.members {
            assert_eq!(a, record.actions[id]);
        }
        let mut ids: Vec<usize> = record
            .leader_coalition
            .members
            .iter()
            .chain(&record.follower_coalition.members)
            .map(|(id, _)| *id)
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn exact_potential_identity_at_fixed_state() {
        let (topology, state) = PlantTopology::from_name("bglp").unwrap();
        let weights = vec![topology.default_weights; 5];
        let roles = RoleMap::Hierarchy {
            roles: vec![Role::Follower, Role::Follower, Role::Leader, Role::Leader, Role::Follower],
        };
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for _ in 0..1000 {
            let mut st = state.clone();
            for (f, r) in st.fills.iter_mut().zip(&topology.reservoirs) {
                *f = rng.gen::<f64>() * r.capacity;
            }
            let mut actions: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
            let u0 = topology.player_utilities(&st, &actions, &weights).unwrap();
            let (l0, f0) = compute_potentials(&u0, &roles).unwrap();
            let i = rng.gen_range(0..5);
            actions[i] = rng.gen();
            let u1 = topology.player_utilities(&st, &actions, &weights).unwrap();
            let (l1, f1) = compute_potentials(&u1, &roles).unwrap();
            let du = u1[i] - u0[i];
            let dphi = if roles.is_leader(i) { l1 - l0 } else { f1 - f0 };
            assert!((dphi - du).abs() <= 1e-12, "dphi {dphi} du {du}");
        }
    }

    #[test]
    fn identical_seeds_replay_identical_records() {
        let config = GameConfig::mod_sbsg(vec![2, 3], SchedulerSpec::Static { steps: 3 });
        let mut a = bglp_orchestrator(config.clone(), 99);
        let mut b = bglp_orchestrator(config, 99);
        a.begin_episode(0);
        b.begin_episode(0);
        for _ in 0..50 {
            let ra = a.run_cycle().unwrap();
            let rb = b.run_cycle().unwrap();
            assert_eq!(ra.actions.len(), rb.actions.len());
            for (x, y) in ra.actions.iter().zip(&rb.actions) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(ra.phi_total.to_bits(), rb.phi_total.to_bits());
            assert_eq!(ra.power_total_kw.to_bits(), rb.power_total_kw.to_bits());
            assert_eq!(ra.follower_steps, rb.follower_steps);
        }
    }

    #[test]
    fn frozen_game_draws_no_noise_and_keeps_maps() {
        let config = GameConfig::mod_sbsg(vec![2, 3], SchedulerSpec::Static { steps: 2 });
        let mut game = bglp_orchestrator(config, 7);
        game.begin_episode(0);
        for _ in 0..30 {
            game.run_cycle().unwrap();
        }
        game.set_training(false);
        game.begin_episode(1);
        let draws_before = game.noise_draw_total();
        let mut checkpoint = Vec::new();
        for p in 0..5 {
            game.player_maps(p).write_csv(&mut checkpoint).unwrap();
        }
        for _ in 0..30 {
            game.run_cycle().unwrap();
        }
        assert_eq!(game.noise_draw_total(), draws_before);
        let mut after = Vec::new();
        for p in 0..5 {
            game.player_maps(p).write_csv(&mut after).unwrap();
        }
        assert_eq!(checkpoint, after);
    }

    #[test]
    fn training_moves_stored_actions_within_bounds() {
        let config = GameConfig::mod_sbsg(
            vec![2, 3],
            SchedulerSpec::GradualReduction { theta0: 10.0, decay: 0.99 },
        );
        let mut game = bglp_orchestrator(config, 5);
        game.begin_episode(0);
        for _ in 0..200 {
            let record = game.run_cycle().unwrap();
            for a in &record.actions {
                assert!((0.0..=1.0).contains(a));
            }
            assert!(record.follower_steps >= 3);
        }
        // All players have explored at least one cell.
        for p in 0..5 {
            assert!(game.player_maps(p).visited_count() > 0);
        }
    }
}
