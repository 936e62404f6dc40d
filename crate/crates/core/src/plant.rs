//! Discrete-time simulation of bulk-good production chains: alternating
//! actuator/reservoir graphs with material transport, overflow, power
//! draw, a demand drain, per-player state views, and the evaluation
//! functions that define player utilities.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

const BGLP_JSON: &str = include_str!("../assets/bglp.json");
const LSBGLP_SEQUENTIAL_JSON: &str = include_str!("../assets/lsbglp_sequential.json");
const LSBGLP_SERIAL_PARALLEL_JSON: &str = include_str!("../assets/lsbglp_serial_parallel.json");

#[derive(Debug, Clone, PartialEq)]
pub enum PlantError {
    MalformedTopology(String),
    UnknownPlantName(String),
    ActionCountMismatch { expected: usize, got: usize },
    UnknownPlayer(usize),
    MissingCoalition,
    DegenerateSpread,
    NegativePower,
}

impl fmt::Display for PlantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlantError::MalformedTopology(msg) => write!(f, "malformed topology: {msg}"),
            PlantError::UnknownPlantName(name) => write!(f, "unknown plant name '{name}'"),
            PlantError::ActionCountMismatch { expected, got } => {
                write!(f, "expected {expected} actions, got {got}")
            }
            PlantError::UnknownPlayer(p) => write!(f, "no player with index {p}"),
            PlantError::MissingCoalition => {
                write!(f, "follower state view requires the leader coalition action")
            }
            PlantError::DegenerateSpread => write!(f, "evaluation spread must be positive"),
            PlantError::NegativePower => write!(f, "power draw must be non-negative"),
        }
    }
}

impl std::error::Error for PlantError {}

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReservoirConfig {
    pub id: String,
    pub capacity_l: f64,
}

/// Transport/power model of one actuator. Normalized action a in [0, 1]
/// maps onto each mode's control range; transport and power are
/// non-negative and non-decreasing in a.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ActuatorMode {
    /// Off below the dead zone; above it the speed fraction
    /// u = (a - dead) / (1 - dead) drives a power-law transport rate
    /// q_max * u^kappa and a quadratic power draw p0 + p1 u + p2 u^2.
    ContinuousRate {
        v_min_on: f64,
        v_max: f64,
        dead_zone: f64,
        q_max_l_per_s: f64,
        kappa: f64,
        power_kw: [f64; 3],
    },
    /// On-time d = a * d_max within the window; transports
    /// q_pump * min(d, dt) with average power p_on * d / dt.
    DurationPump { d_max_s: f64, q_pump_l_per_s: f64, p_on_kw: f64 },
    /// On at a >= 0.5 with fixed rate and power, otherwise off.
    Binary { q_on_l_per_s: f64, p_on_kw: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ActuatorConfig {
    pub id: String,
    pub mode: ActuatorMode,
    pub sources: Vec<String>,
    pub sinks: Vec<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SupplyMode {
    /// Hold the supply reservoir at a fraction of capacity: each sub-step
    /// injects exactly what was consumed below that level, so an idle
    /// plant receives nothing.
    HoldLevel { fraction: f64 },
    /// Constant-rate refill, clipped by headroom.
    Rate { l_per_s: f64 },
    /// No external material source.
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SupplyConfig {
    pub reservoir: String,
    pub mode: SupplyMode,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DemandConfig {
    pub reservoir: String,
    pub rate_l_per_s: f64,
}

/// Evaluation parameters in capacity-normalized fill units, so the
/// flatten threshold engages identically for every reservoir size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EvalConfig {
    pub theta_flatten: f64,
    pub rho: f64,
    pub mu: f64,
    pub sigma: f64,
    pub omega_v: f64,
    pub omega_p: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            theta_flatten: 0.6,
            rho: 0.0,
            mu: 0.5,
            sigma: 1.0 / 3.0,
            omega_v: 1.5,
            omega_p: 0.1,
        }
    }
}

fn default_dt_cycle() -> f64 {
    10.0
}

fn default_dt_sim() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlantConfig {
    pub name: String,
    #[serde(default = "default_dt_cycle")]
    pub dt_cycle_s: f64,
    #[serde(default = "default_dt_sim")]
    pub dt_sim_s: f64,
    pub reservoirs: Vec<ReservoirConfig>,
    pub actuators: Vec<ActuatorConfig>,
    pub supply: SupplyConfig,
    pub demand: DemandConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

// ---------------------------------------------------------------------------
// Built plant
// ---------------------------------------------------------------------------

/// Bivariate evaluation parameters for one player, normalized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalParams {
    pub theta_flatten: f64,
    pub mu_p: f64,
    pub mu_s: f64,
    pub sigma_p: f64,
    pub sigma_s: f64,
    pub rho: f64,
}

impl EvalParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        if self.sigma_p <= 0.0 || self.sigma_s <= 0.0 {
            return Err(PlantError::DegenerateSpread);
        }
        if self.rho.abs() >= 1.0 {
            return Err(PlantError::MalformedTopology("|rho| must be < 1".into()));
        }
        if self.theta_flatten <= 0.0 {
            return Err(PlantError::MalformedTopology("flatten threshold must be > 0".into()));
        }
        Ok(())
    }
}

/// Fill-level / power trade-off weights for one player's utility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalWeights {
    pub omega_v: f64,
    pub omega_p: f64,
}

impl EvalWeights {
    /// Weights from focus percentages (fill, power) summing to 100,
    /// rescaled so the maximum attainable utility stays 1:
    /// omega_v * theta_flatten carries the fill share, omega_p the rest.
    pub fn from_focus(fill_pct: f64, power_pct: f64, theta_flatten: f64) -> Self {
        EvalWeights {
            omega_v: fill_pct / 100.0 / theta_flatten,
            omega_p: power_pct / 100.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reservoir {
    pub id: String,
    pub capacity: f64,
}

#[derive(Debug, Clone)]
pub struct Actuator {
    pub id: String,
    pub mode: ActuatorMode,
    pub sources: Vec<usize>,
    pub sinks: Vec<usize>,
}

/// Validated plant graph plus stationary parameters.
#[derive(Debug, Clone)]
pub struct PlantTopology {
    pub name: String,
    pub dt_cycle: f64,
    pub dt_sim: f64,
    pub reservoirs: Vec<Reservoir>,
    pub actuators: Vec<Actuator>,
    pub supply_reservoir: usize,
    pub supply_mode: SupplyMode,
    pub demand_reservoir: usize,
    pub demand_rate: f64,
    pub eval: EvalParams,
    pub default_weights: EvalWeights,
}

/// Compensated accumulator for the conservation ledger.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Mutable plant state: fills plus the run ledger.
#[derive(Debug, Clone)]
pub struct PlantState {
    pub fills: Vec<f64>,
    pub overflow_per_reservoir: Vec<f64>,
    pub injected: KahanSum,
    pub delivered: KahanSum,
    pub overflowed: KahanSum,
    pub deficit: KahanSum,
    pub elapsed_s: f64,
}

impl PlantState {
    pub fn total_fill(&self) -> f64 {
        self.fills.iter().sum()
    }

    /// Demand column convention: 0 when satisfied, negative shortfall
    /// rate otherwise.
    pub fn demand_deficit_rate(&self) -> f64 {
        if self.elapsed_s > 0.0 {
            0.0 - self.deficit.value() / self.elapsed_s
        } else {
            0.0
        }
    }
}

/// Per-cycle flow and power report.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub moved_l: Vec<f64>,
    pub power_kw: Vec<f64>,
    pub total_power_kw: f64,
    pub injected_l: f64,
    pub delivered_l: f64,
    pub overflowed_l: f64,
    pub deficit_l: f64,
}

/// Per-player state view: capacity-normalized fills of the prior and
/// subsequent reservoirs, plus the leader coalition actions when the view
/// belongs to a follower.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerView {
    pub fills: Vec<f64>,
    pub coalition: Option<Vec<f64>>,
}

/// Attempted transport volume (liters) and average power draw (kW) of one
/// actuator over a window of `dt` seconds. Actions outside [0, 1]
/// saturate.
pub fn actuate(mode: &ActuatorMode, action: f64, dt: f64) -> (f64, f64) {
    let a = action.clamp(0.0, 1.0);
    match *mode {
        ActuatorMode::ContinuousRate { dead_zone, q_max_l_per_s, kappa, power_kw, .. } => {
            if a < dead_zone {
                (0.0, 0.0)
            } else {
                let u = (a - dead_zone) / (1.0 - dead_zone);
                let volume = q_max_l_per_s * u.powf(kappa) * dt;
                let power = power_kw[0] + power_kw[1] * u + power_kw[2] * u * u;
                (volume, power)
            }
        }
        ActuatorMode::DurationPump { d_max_s, q_pump_l_per_s, p_on_kw } => {
            let d = a * d_max_s;
            (q_pump_l_per_s * d.min(dt), p_on_kw * d / dt)
        }
        ActuatorMode::Binary { q_on_l_per_s, p_on_kw } => {
            if a >= 0.5 {
                (q_on_l_per_s * dt, p_on_kw)
            } else {
                (0.0, 0.0)
            }
        }
    }
}

/// Flattened bivariate normal density over (prior, subsequent) fills:
/// the density is clipped at the flatten threshold.
pub fn eval_volume(v_prior: f64, v_next: f64, p: &EvalParams) -> Result<f64, PlantError> {
    if p.sigma_p <= 0.0 || p.sigma_s <= 0.0 {
        return Err(PlantError::DegenerateSpread);
    }
    let one_minus_rho2 = 1.0 - p.rho * p.rho;
    let zp = (v_prior - p.mu_p) / p.sigma_p;
    let zs = (v_next - p.mu_s) / p.sigma_s;
    let quad = zp * zp - 2.0 * p.rho * zp * zs + zs * zs;
    let coef = 1.0 / (2.0 * PI * p.sigma_p * p.sigma_s * one_minus_rho2.sqrt());
    let density = coef * (-quad / (2.0 * one_minus_rho2)).exp();
    Ok(density.min(p.theta_flatten))
}

/// Power score 1 / (1 + P), in (0, 1].
pub fn eval_power(power_kw: f64) -> Result<f64, PlantError> {
    if power_kw < 0.0 {
        return Err(PlantError::NegativePower);
    }
    Ok(1.0 / (1.0 + power_kw))
}

/// Weighted player utility.
pub fn eval_player(e_v: f64, e_p: f64, weights: &EvalWeights) -> f64 {
    weights.omega_v * e_v + weights.omega_p * e_p
}

impl PlantTopology {
    /// Build a bundled plant by name.
    pub fn from_name(name: &str) -> Result<(PlantTopology, PlantState), PlantError> {
        let json = match name {
            "bglp" => BGLP_JSON,
            "lsbglp_sequential" => LSBGLP_SEQUENTIAL_JSON,
            "lsbglp_serial_parallel" => LSBGLP_SERIAL_PARALLEL_JSON,
            _ => return Err(PlantError::UnknownPlantName(name.to_string())),
        };
        let config: PlantConfig = serde_json::from_str(json)
            .map_err(|e| PlantError::MalformedTopology(format!("bundled config: {e}")))?;
        Self::from_config(&config)
    }

    /// Bundled config for a named plant, for echoing and inspection.
    pub fn bundled_config(name: &str) -> Result<PlantConfig, PlantError> {
        let json = match name {
            "bglp" => BGLP_JSON,
            "lsbglp_sequential" => LSBGLP_SEQUENTIAL_JSON,
            "lsbglp_serial_parallel" => LSBGLP_SERIAL_PARALLEL_JSON,
            _ => return Err(PlantError::UnknownPlantName(name.to_string())),
        };
        serde_json::from_str(json)
            .map_err(|e| PlantError::MalformedTopology(format!("bundled config: {e}")))
    }

    /// Build and validate a plant from a custom config. Initial fills
    /// are 50% of capacity.
    pub fn from_config(config: &PlantConfig) -> Result<(PlantTopology, PlantState), PlantError> {
        if config.reservoirs.is_empty() || config.actuators.is_empty() {
            return Err(PlantError::MalformedTopology(
                "plant needs at least one reservoir and one actuator".into(),
            ));
        }
        if config.dt_cycle_s <= 0.0 || config.dt_sim_s <= 0.0 || config.dt_sim_s > config.dt_cycle_s
        {
            return Err(PlantError::MalformedTopology("invalid cycle/sub-step durations".into()));
        }
        let mut reservoir_index = HashMap::new();
        for (i, r) in config.reservoirs.iter().enumerate() {
            if r.capacity_l <= 0.0 {
                return Err(PlantError::MalformedTopology(format!(
                    "reservoir '{}' capacity must be positive",
                    r.id
                )));
            }
            if reservoir_index.insert(r.id.clone(), i).is_some() {
                return Err(PlantError::MalformedTopology(format!(
                    "duplicate reservoir id '{}'",
                    r.id
                )));
            }
        }
        let mut actuator_ids = HashMap::new();
        for (i, a) in config.actuators.iter().enumerate() {
            if reservoir_index.contains_key(&a.id) {
                return Err(PlantError::MalformedTopology(format!(
                    "id '{}' used for both an actuator and a reservoir",
                    a.id
                )));
            }
            if actuator_ids.insert(a.id.clone(), i).is_some() {
                return Err(PlantError::MalformedTopology(format!(
                    "duplicate actuator id '{}'",
                    a.id
                )));
            }
        }
        // Edges must alternate actuators and reservoirs: every endpoint
        // of an actuator edge has to name a reservoir.
        let resolve = |id: &str, owner: &str| -> Result<usize, PlantError> {
            if let Some(&i) = reservoir_index.get(id) {
                Ok(i)
            } else if actuator_ids.contains_key(id) {
                Err(PlantError::MalformedTopology(format!(
                    "actuator '{owner}' connects to actuator '{id}'; edges must alternate \
                     actuators and reservoirs"
                )))
            } else {
                Err(PlantError::MalformedTopology(format!(
                    "actuator '{owner}' references unknown reservoir '{id}'"
                )))
            }
        };
        let mut actuators = Vec::with_capacity(config.actuators.len());
        for a in &config.actuators {
            if a.sources.is_empty() || a.sinks.is_empty() {
                return Err(PlantError::MalformedTopology(format!(
                    "actuator '{}' needs at least one source and one sink",
                    a.id
                )));
            }
            let sources =
                a.sources.iter().map(|s| resolve(s, &a.id)).collect::<Result<Vec<_>, _>>()?;
            let sinks = a.sinks.iter().map(|s| resolve(s, &a.id)).collect::<Result<Vec<_>, _>>()?;
            actuators.push(Actuator { id: a.id.clone(), mode: a.mode.clone(), sources, sinks });
        }
        let supply_reservoir = *reservoir_index.get(&config.supply.reservoir).ok_or_else(|| {
            PlantError::MalformedTopology(format!(
                "supply references unknown reservoir '{}'",
                config.supply.reservoir
            ))
        })?;
        let demand_reservoir = *reservoir_index.get(&config.demand.reservoir).ok_or_else(|| {
            PlantError::MalformedTopology(format!(
                "demand references unknown reservoir '{}'",
                config.demand.reservoir
            ))
        })?;
        if config.demand.rate_l_per_s < 0.0 {
            return Err(PlantError::MalformedTopology("demand rate must be >= 0".into()));
        }
        match config.supply.mode {
            SupplyMode::HoldLevel { fraction } if !(0.0..=1.0).contains(&fraction) => {
                return Err(PlantError::MalformedTopology(
                    "supply hold level must be a fraction in [0, 1]".into(),
                ));
            }
            SupplyMode::Rate { l_per_s } if l_per_s < 0.0 => {
                return Err(PlantError::MalformedTopology("supply rate must be >= 0".into()));
            }
            _ => {}
        }
        let eval = EvalParams {
            theta_flatten: config.eval.theta_flatten,
            mu_p: config.eval.mu,
            mu_s: config.eval.mu,
            sigma_p: config.eval.sigma,
            sigma_s: config.eval.sigma,
            rho: config.eval.rho,
        };
        eval.validate()?;
        let topology = PlantTopology {
            name: config.name.clone(),
            dt_cycle: config.dt_cycle_s,
            dt_sim: config.dt_sim_s,
            reservoirs: config
                .reservoirs
                .iter()
                .map(|r| Reservoir { id: r.id.clone(), capacity: r.capacity_l })
                .collect(),
            actuators,
            supply_reservoir,
            supply_mode: config.supply.mode,
            demand_reservoir,
            demand_rate: config.demand.rate_l_per_s,
            eval,
            default_weights: EvalWeights {
                omega_v: config.eval.omega_v,
                omega_p: config.eval.omega_p,
            },
        };
        let state = topology.initial_state();
        Ok((topology, state))
    }

    pub fn initial_state(&self) -> PlantState {
        PlantState {
            fills: self.reservoirs.iter().map(|r| r.capacity * 0.5).collect(),
            overflow_per_reservoir: vec![0.0; self.reservoirs.len()],
            injected: KahanSum::default(),
            delivered: KahanSum::default(),
            overflowed: KahanSum::default(),
            deficit: KahanSum::default(),
            elapsed_s: 0.0,
        }
    }

    pub fn player_count(&self) -> usize {
        self.actuators.len()
    }

    fn sub_steps(&self) -> usize {
        ((self.dt_cycle / self.dt_sim).round() as usize).max(1)
    }

    /// Advance the plant one decision cycle under the given per-player
    /// actions. Sub-steps run at `dt_sim`; within a sub-step actuators
    /// transfer in player order, then the demand drain runs, then the
    /// supply refill.
    pub fn step(&self, state: &mut PlantState, actions: &[f64]) -> Result<StepReport, PlantError> {
        if actions.len() != self.actuators.len() {
            return Err(PlantError::ActionCountMismatch {
                expected: self.actuators.len(),
                got: actions.len(),
            });
        }
        let n_sub = self.sub_steps();
        let mut moved_cycle = vec![0.0; self.actuators.len()];
        let mut power = vec![0.0; self.actuators.len()];
        let mut attempted_per_sub = vec![0.0; self.actuators.len()];
        for (i, actuator) in self.actuators.iter().enumerate() {
            let (volume, p) = actuate(&actuator.mode, actions[i], self.dt_cycle);
            attempted_per_sub[i] = volume / n_sub as f64;
            power[i] = p;
        }
        let mut injected_cycle = 0.0;
        let mut delivered_cycle = 0.0;
        let mut overflow_cycle = 0.0;
        let mut deficit_cycle = 0.0;
        for _ in 0..n_sub {
            for (i, actuator) in self.actuators.iter().enumerate() {
                // Draw equally from every source, limited by its fill.
                let want_each = attempted_per_sub[i] / actuator.sources.len() as f64;
                let mut moved = 0.0;
                for &s in &actuator.sources {
                    let before = state.fills[s];
                    let after = if want_each >= before { 0.0 } else { before - want_each };
                    state.fills[s] = after;
                    moved += before - after;
                }
                moved_cycle[i] += moved;
                // Deposit equally into every sink; inflow beyond headroom
                // spills into that sink's overflow ledger.
                let share = moved / actuator.sinks.len() as f64;
                for &t in &actuator.sinks {
                    let before = state.fills[t];
                    let headroom = self.reservoirs[t].capacity - before;
                    let accepted = share.min(headroom).max(0.0);
                    state.fills[t] = before + accepted;
                    let spilled = share - accepted;
                    if spilled > 0.0 {
                        state.overflow_per_reservoir[t] += spilled;
                        state.overflowed.add(spilled);
                        overflow_cycle += spilled;
                    }
                }
            }
            // Demand drain on the terminal reservoir.
            let want = self.demand_rate * self.dt_sim;
            let before = state.fills[self.demand_reservoir];
            let drained = want.min(before);
            state.fills[self.demand_reservoir] = before - drained;
            state.delivered.add(drained);
            delivered_cycle += drained;
            let short = want - drained;
            if short > 0.0 {
                state.deficit.add(short);
                deficit_cycle += short;
            }
            // External supply refill.
            match self.supply_mode {
                SupplyMode::HoldLevel { fraction } => {
                    let r = self.supply_reservoir;
                    let level = self.reservoirs[r].capacity * fraction;
                    let before = state.fills[r];
                    if before < level {
                        state.fills[r] = level;
                        let topped = level - before;
                        state.injected.add(topped);
                        injected_cycle += topped;
                    }
                }
                SupplyMode::Rate { l_per_s } => {
                    let r = self.supply_reservoir;
                    let before = state.fills[r];
                    let headroom = self.reservoirs[r].capacity - before;
                    let had = (l_per_s * self.dt_sim).min(headroom).max(0.0);
                    state.fills[r] = before + had;
                    state.injected.add(had);
                    injected_cycle += had;
                }
                SupplyMode::None => {}
            }
            state.elapsed_s += self.dt_sim;
        }
        debug_assert!(state
            .fills
            .iter()
            .zip(&self.reservoirs)
            .all(|(&f, r)| (0.0..=r.capacity + 1e-9).contains(&f)));
        let total_power_kw = power.iter().sum();
        Ok(StepReport {
            moved_l: moved_cycle,
            power_kw: power,
            total_power_kw,
            injected_l: injected_cycle,
            delivered_l: delivered_cycle,
            overflowed_l: overflow_cycle,
            deficit_l: deficit_cycle,
        })
    }

    /// Capacity-normalized fills of a player's prior and subsequent
    /// reservoirs (priors first, each group in reservoir order), plus the
    /// coalition actions when required for a follower view.
    pub fn player_state_view(
        &self,
        state: &PlantState,
        player: usize,
        coalition: Option<&[f64]>,
        require_coalition: bool,
    ) -> Result<PlayerView, PlantError> {
        let actuator = self.actuators.get(player).ok_or(PlantError::UnknownPlayer(player))?;
        if require_coalition && coalition.is_none() {
            return Err(PlantError::MissingCoalition);
        }
        let mut fills =
            Vec::with_capacity(actuator.sources.len() + actuator.sinks.len());
        for &r in actuator.sources.iter().chain(&actuator.sinks) {
            fills.push((state.fills[r] / self.reservoirs[r].capacity).clamp(0.0, 1.0));
        }
        Ok(PlayerView { fills, coalition: coalition.map(|c| c.to_vec()) })
    }

    /// Mean normalized fill of a player's prior and subsequent reservoir
    /// groups, the two regressors of the volume evaluation.
    fn eval_fills(&self, state: &PlantState, player: usize) -> (f64, f64) {
        let actuator = &self.actuators[player];
        let mean = |rs: &[usize]| {
            rs.iter()
                .map(|&r| state.fills[r] / self.reservoirs[r].capacity)
                .sum::<f64>()
                / rs.len() as f64
        };
        (mean(&actuator.sources), mean(&actuator.sinks))
    }

    /// Per-player utilities at the given state and actions: the volume
    /// score uses the current fills, the power score the action's draw
    /// over a cycle. At a fixed state, player j's utility is independent
    /// of player i's action for j != i.
    pub fn player_utilities(
        &self,
        state: &PlantState,
        actions: &[f64],
        weights: &[EvalWeights],
    ) -> Result<Vec<f64>, PlantError> {
        if actions.len() != self.actuators.len() {
            return Err(PlantError::ActionCountMismatch {
                expected: self.actuators.len(),
                got: actions.len(),
            });
        }
        if weights.len() != self.actuators.len() {
            return Err(PlantError::ActionCountMismatch {
                expected: self.actuators.len(),
                got: weights.len(),
            });
        }
        let mut out = Vec::with_capacity(self.actuators.len());
        for (i, actuator) in self.actuators.iter().enumerate() {
            let (v_prior, v_next) = self.eval_fills(state, i);
            let e_v = eval_volume(v_prior, v_next, &self.eval)?;
            let (_, power) = actuate(&actuator.mode, actions[i], self.dt_cycle);
            let e_p = eval_power(power)?;
            out.push(eval_player(e_v, e_p, &weights[i]));
        }
        Ok(out)
    }
}
