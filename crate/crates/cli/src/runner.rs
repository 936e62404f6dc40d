//! Seeded experiment execution: training runs that checkpoint policies,
//! frozen test runs that replay them, and the CSV/JSON artifacts both
//! leave behind.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use modsbsg_core::game::{CycleRecord, GameError, GameMode, GameOrchestrator};
use modsbsg_core::plant::PlantTopology;

use crate::config::{echo_json, ConfigError, ResolvedExperiment};

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Game(GameError),
    Io(io::Error),
    MissingCheckpoint(PathBuf),
    ProtocolMismatch(String),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "config: {e}"),
            RunError::Game(e) => write!(f, "game: {e}"),
            RunError::Io(e) => write!(f, "io: {e}"),
            RunError::MissingCheckpoint(p) => write!(f, "missing checkpoint at {p:?}"),
            RunError::ProtocolMismatch(msg) => write!(f, "protocol mismatch: {msg}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<GameError> for RunError {
    fn from(e: GameError) -> Self {
        RunError::Game(e)
    }
}

impl From<io::Error> for RunError {
    fn from(e: io::Error) -> Self {
        RunError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Test,
}

impl Phase {
    fn label(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Checkpoint directory holding `maps/` from a training run;
    /// required for test runs.
    pub checkpoint: Option<PathBuf>,
    pub write_cycle_csv: bool,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions { out_dir: out_dir.into(), checkpoint: None, write_cycle_csv: true }
    }

    pub fn with_checkpoint(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint = Some(dir.into());
        self
    }

    pub fn cycle_csv(mut self, on: bool) -> Self {
        self.write_cycle_csv = on;
        self
    }
}

/// The four report columns plus provenance, averaged over the run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub plant: String,
    pub mode: GameMode,
    pub leaders: Vec<usize>,
    pub phase: Phase,
    pub episodes: u64,
    pub cycles_per_episode: u64,
    pub seed: u64,
    /// 0 when demand is satisfied, negative shortfall rate otherwise.
    pub demand_l_per_s: f64,
    /// Mean total power per cycle.
    pub power_kw_per_s: f64,
    pub overflow_l_per_s: f64,
    /// Mean total potential per cycle.
    pub potential: f64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub summary: RunSummary,
}

impl RunArtifacts {
    pub fn maps_dir(&self) -> PathBuf {
        self.out_dir.join("maps")
    }

    pub fn report_path(&self) -> PathBuf {
        self.out_dir.join("report.json")
    }

    pub fn load_summary(dir: &Path) -> Result<RunSummary, RunError> {
        let text = fs::read_to_string(dir.join("report.json"))?;
        serde_json::from_str(&text).map_err(|e| {
            RunError::Config(ConfigError::ParseError(format!("report.json: {e}")))
        })
    }
}

struct MetricsAccumulator {
    cycles: u64,
    deficit_l: f64,
    overflow_l: f64,
    power_kw_sum: f64,
    phi_total_sum: f64,
    phi_l_sum: f64,
    phi_f_sum: f64,
    follower_steps: u64,
}

impl MetricsAccumulator {
    fn new() -> Self {
        MetricsAccumulator {
            cycles: 0,
            deficit_l: 0.0,
            overflow_l: 0.0,
            power_kw_sum: 0.0,
            phi_total_sum: 0.0,
            phi_l_sum: 0.0,
            phi_f_sum: 0.0,
            follower_steps: 0,
        }
    }

    fn push(&mut self, record: &CycleRecord) {
        self.cycles += 1;
        self.deficit_l += record.deficit_l;
        self.overflow_l += record.overflow_l;
        self.power_kw_sum += record.power_total_kw;
        self.phi_total_sum += record.phi_total;
        self.phi_l_sum += record.phi_l;
        self.phi_f_sum += record.phi_f;
        self.follower_steps += record.follower_steps as u64;
    }

    fn elapsed_s(&self, dt_cycle: f64) -> f64 {
        self.cycles as f64 * dt_cycle
    }
}

fn cycle_csv_header(topology: &PlantTopology, view_dims: &[usize]) -> String {
    let mut cols = vec!["episode".to_string(), "cycle".to_string(), "phase".to_string()];
    for p in 0..topology.player_count() {
        for d in 0..view_dims[p] {
            cols.push(format!("p{p}_s{d}"));
        }
        cols.push(format!("p{p}_action"));
        cols.push(format!("p{p}_utility"));
    }
    cols.extend(
        ["phi_l", "phi_f", "phi_total", "power_total_kw", "overflow_l_per_s",
         "demand_deficit_l_per_s"]
            .map(String::from),
    );
    cols.join(",")
}

/// Execute one phase of an experiment and write its artifacts.
pub fn run_experiment(
    resolved: &ResolvedExperiment,
    phase: Phase,
    options: &RunOptions,
) -> Result<RunArtifacts, RunError> {
    let (topology, state) = resolved.build_plant()?;
    let dt_cycle = topology.dt_cycle;
    let mut game = GameOrchestrator::new(
        topology,
        state,
        resolved.game_config.clone(),
        resolved.config.seed,
    )?;

    if phase == Phase::Test {
        let checkpoint = options
            .checkpoint
            .as_ref()
            .ok_or_else(|| RunError::MissingCheckpoint(PathBuf::from("<none>")))?;
        load_checkpoint(&mut game, checkpoint)?;
        game.set_training(false);
    }

    fs::create_dir_all(&options.out_dir)?;
    fs::write(options.out_dir.join("config_echo.json"), echo_json(resolved))?;

    let episodes = match phase {
        Phase::Train => resolved.config.episodes.train,
        Phase::Test => resolved.config.episodes.test,
    };
    let cycles = resolved.config.episodes.cycles_per_episode;

    let mut cycle_writer = if options.write_cycle_csv {
        let f = File::create(options.out_dir.join("cycles.csv"))?;
        Some(BufWriter::new(f))
    } else {
        None
    };
    let episode_file = File::create(options.out_dir.join("episodes.csv"))?;
    let mut episode_writer = BufWriter::new(episode_file);
    writeln!(
        episode_writer,
        "episode,phase,potential,phi_l,phi_f,power_kw,overflow_l_per_s,demand_deficit_l_per_s,\
         follower_steps"
    )?;

    let view_dims: Vec<usize> =
        (0..game.topology().player_count()).map(|p| game.player_maps(p).grid().dims).collect();
    if let Some(w) = cycle_writer.as_mut() {
        writeln!(w, "{}", cycle_csv_header(game.topology(), &view_dims))?;
    }

    let mut run_metrics = MetricsAccumulator::new();
    for episode in 0..episodes {
        game.begin_episode(episode);
        let mut episode_metrics = MetricsAccumulator::new();
        for cycle in 0..cycles {
            let record = game.run_cycle()?;
            episode_metrics.push(&record);
            run_metrics.push(&record);
            if let Some(w) = cycle_writer.as_mut() {
                write_cycle_row(w, episode, cycle, phase, &record, dt_cycle)?;
            }
        }
        let elapsed = episode_metrics.elapsed_s(dt_cycle);
        writeln!(
            episode_writer,
            "{episode},{},{},{},{},{},{},{},{}",
            phase.label(),
            episode_metrics.phi_total_sum / episode_metrics.cycles as f64,
            episode_metrics.phi_l_sum / episode_metrics.cycles as f64,
            episode_metrics.phi_f_sum / episode_metrics.cycles as f64,
            episode_metrics.power_kw_sum / episode_metrics.cycles as f64,
            episode_metrics.overflow_l / elapsed,
            0.0 - episode_metrics.deficit_l / elapsed,
            episode_metrics.follower_steps,
        )?;
    }
    if let Some(mut w) = cycle_writer {
        w.flush()?;
    }
    episode_writer.flush()?;

    if phase == Phase::Train {
        let maps_dir = options.out_dir.join("maps");
        fs::create_dir_all(&maps_dir)?;
        for p in 0..game.topology().player_count() {
            let f = File::create(maps_dir.join(format!("player_{p:03}.csv")))?;
            let mut w = BufWriter::new(f);
            game.player_maps(p).write_csv(&mut w)?;
            w.flush()?;
        }
    }

    let elapsed = run_metrics.elapsed_s(dt_cycle);
    let summary = RunSummary {
        plant: resolved.plant_config.name.clone(),
        mode: resolved.game_config.mode,
        leaders: resolved.game_config.leader_ids.clone(),
        phase,
        episodes,
        cycles_per_episode: cycles,
        seed: resolved.config.seed,
        demand_l_per_s: 0.0 - run_metrics.deficit_l / elapsed,
        power_kw_per_s: run_metrics.power_kw_sum / run_metrics.cycles as f64,
        overflow_l_per_s: run_metrics.overflow_l / elapsed,
        potential: run_metrics.phi_total_sum / run_metrics.cycles as f64,
    };
    let report = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(options.out_dir.join("report.json"), report + "\n")?;

    Ok(RunArtifacts { out_dir: options.out_dir.clone(), summary })
}

/// Train, checkpoint, then test from that checkpoint.
pub fn train_then_test(
    resolved: &ResolvedExperiment,
    base_dir: &Path,
    write_cycle_csv: bool,
) -> Result<(RunArtifacts, RunArtifacts), RunError> {
    let train_opts =
        RunOptions::new(base_dir.join("train")).cycle_csv(write_cycle_csv);
    let train = run_experiment(resolved, Phase::Train, &train_opts)?;
    let test_opts = RunOptions::new(base_dir.join("test"))
        .with_checkpoint(&train.out_dir)
        .cycle_csv(write_cycle_csv);
    let test = run_experiment(resolved, Phase::Test, &test_opts)?;
    Ok((train, test))
}

fn write_cycle_row<W: Write>(
    w: &mut W,
    episode: u64,
    cycle: u64,
    phase: Phase,
    record: &CycleRecord,
    dt_cycle: f64,
) -> io::Result<()> {
    write!(w, "{episode},{cycle},{}", phase.label())?;
    for (p, view) in record.views.iter().enumerate() {
        for v in view {
            write!(w, ",{v}")?;
        }
        write!(w, ",{},{}", record.actions[p], record.utilities[p])?;
    }
    writeln!(
        w,
        ",{},{},{},{},{},{}",
        record.phi_l,
        record.phi_f,
        record.phi_total,
        record.power_total_kw,
        record.overflow_l / dt_cycle,
        0.0 - record.deficit_l / dt_cycle,
    )
}

fn load_checkpoint(game: &mut GameOrchestrator, checkpoint: &Path) -> Result<(), RunError> {
    let maps_dir = if checkpoint.join("maps").is_dir() {
        checkpoint.join("maps")
    } else {
        checkpoint.to_path_buf()
    };
    for p in 0..game.topology().player_count() {
        let path = maps_dir.join(format!("player_{p:03}.csv"));
        if !path.is_file() {
            return Err(RunError::MissingCheckpoint(path));
        }
        let reader = BufReader::new(File::open(&path)?);
        game.player_maps_mut(p).read_csv(reader)?;
    }
    Ok(())
}

/// Hash a file for determinism checks.
pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    let mut file = File::open(path)?;
    io::copy(&mut file, &mut hasher)?;
    Ok(format!("{:x}", hasher.finalize()))
}

/// Hash of every artifact file under a run directory, sorted by name.
pub fn hash_artifacts(dir: &Path) -> io::Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    files
        .into_iter()
        .map(|rel| {
            let hash = sha256_file(&dir.join(&rel))?;
            Ok((rel, hash))
        })
        .collect()
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(
                path.strip_prefix(root)
                    .expect("under root")
                    .to_string_lossy()
                    .replace('\\', "/"),
            );
        }
    }
    Ok(())
}
