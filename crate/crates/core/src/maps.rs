//! Performance-map policies: gridded best-action storage with global
//! inverse-distance interpolation, and stacked variants for followers
//! conditioned on the encoded leader coalition action.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};

/// Default support points per state dimension.
pub const DEFAULT_RESOLUTION: usize = 40;
/// Default per-cell sample stack capacity.
pub const DEFAULT_STACK_CAPACITY: usize = 100;
/// Default discretization bins per leader action.
pub const DEFAULT_BINS_PER_LEADER: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum MapError {
    /// A state component fell outside the normalized range [0, 1].
    StateOutOfRange { dim: usize, value: f64 },
    /// Interpolation requested before any cell was visited.
    NoVisitedCells,
    /// A recorded sample contained a non-finite component.
    NonFiniteSample,
    /// State vector length does not match the grid dimension count.
    DimensionMismatch { expected: usize, got: usize },
    /// Coalition arity does not match the encoder's leader count.
    WrongLeaderCount { expected: usize, got: usize },
}

impl fmt::Display for MapError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapError::StateOutOfRange { dim, value } => {
                write!(f, "state component {dim} = {value} outside [0, 1]")
            }
            MapError::NoVisitedCells => write!(f, "no visited cells to interpolate from"),
            MapError::NonFiniteSample => write!(f, "sample contains a non-finite value"),
            MapError::DimensionMismatch { expected, got } => {
                write!(f, "state has {got} dimensions, map expects {expected}")
            }
            MapError::WrongLeaderCount { expected, got } => {
                write!(f, "coalition has {got} leaders, encoder expects {expected}")
            }
        }
    }
}

impl std::error::Error for MapError {}

/// Equidistant grid over the normalized state cube [0, 1]^dims.
///
/// Support coordinates along each axis are exactly `k / (resolution - 1)`
/// for `k` in `0..resolution`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub dims: usize,
    pub resolution: usize,
}

impl GridSpec {
    pub fn new(dims: usize, resolution: usize) -> Self {
        assert!(dims >= 1, "grid needs at least one dimension");
        assert!(resolution >= 2, "grid needs at least two support points per axis");
        GridSpec { dims, resolution }
    }

    /// Axis spacing between adjacent support points.
    pub fn spacing(&self) -> f64 {
        1.0 / (self.resolution as f64 - 1.0)
    }

    /// Total number of support vectors (p^m).
    pub fn cell_count(&self) -> usize {
        self.resolution.pow(self.dims as u32)
    }

    /// Flat index of the support vector nearest to `state` in Euclidean
    /// distance. Ties break toward the larger index per dimension.
    pub fn locate(&self, state: &[f64]) -> Result<usize, MapError> {
        if state.len() != self.dims {
            return Err(MapError::DimensionMismatch { expected: self.dims, got: state.len() });
        }
        let p = self.resolution;
        let mut flat = 0usize;
        for (dim, &x) in state.iter().enumerate() {
            if !x.is_finite() || !(0.0..=1.0).contains(&x) {
                return Err(MapError::StateOutOfRange { dim, value: x });
            }
            // Round half up: equidistant points resolve to the larger index.
            let k = ((x * (p as f64 - 1.0)) + 0.5).floor() as usize;
            let k = k.min(p - 1);
            flat = flat * p + k;
        }
        Ok(flat)
    }

    /// Per-axis indices of a flat cell index (row-major, first dim most
    /// significant).
    pub fn coords(&self, index: usize) -> Vec<usize> {
        let p = self.resolution;
        let mut rem = index;
        let mut out = vec![0usize; self.dims];
        for d in (0..self.dims).rev() {
            out[d] = rem % p;
            rem /= p;
        }
        out
    }

    /// Normalized coordinates of the support vector at `index`.
    pub fn support_point(&self, index: usize) -> Vec<f64> {
        let h = self.spacing();
        self.coords(index).into_iter().map(|k| k as f64 * h).collect()
    }

    fn dist_sq(&self, index: usize, state: &[f64]) -> f64 {
        let h = self.spacing();
        let p = self.resolution;
        let mut rem = index;
        let mut acc = 0.0;
        for d in (0..self.dims).rev() {
            let k = rem % p;
            rem /= p;
            let diff = state[d] - k as f64 * h;
            acc += diff * diff;
        }
        acc
    }
}

/// One explored data point: the player's own action, the opposing
/// coalition's scalar summary, and the observed potential value(s).
///
/// `value` is the potential the owning player optimizes; `aux` carries the
/// other role's potential (leaders fit surrogates of both objectives) and
/// is zero where unused.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub own: f64,
    pub other: f64,
    pub value: f64,
    pub aux: f64,
}

/// A single support vector: best explored action, its utility, and a
/// bounded FIFO stack of recent samples.
#[derive(Debug, Clone)]
pub struct SupportCell {
    pub best_action: f64,
    pub best_utility: f64,
    pub stack: VecDeque<Sample>,
}

impl SupportCell {
    fn new() -> Self {
        SupportCell { best_action: 0.0, best_utility: f64::NEG_INFINITY, stack: VecDeque::new() }
    }
}

/// Gridded policy map. Cells are stored sparsely: a cell exists once it
/// has been visited; absent cells carry the unvisited sentinel
/// (best_utility = -inf) and take part in no interpolation.
#[derive(Debug, Clone)]
pub struct PerformanceMap {
    pub grid: GridSpec,
    pub gamma: f64,
    pub stack_capacity: usize,
    cells: BTreeMap<usize, SupportCell>,
}

impl PerformanceMap {
    pub fn new(grid: GridSpec, gamma: f64) -> Self {
        assert!(gamma > 0.0, "smoothing parameter must be positive");
        PerformanceMap {
            grid,
            gamma,
            stack_capacity: DEFAULT_STACK_CAPACITY,
            cells: BTreeMap::new(),
        }
    }

    pub fn with_stack_capacity(mut self, capacity: usize) -> Self {
        self.stack_capacity = capacity.max(1);
        self
    }

    pub fn visited_count(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, index: usize) -> Option<&SupportCell> {
        self.cells.get(&index)
    }

    pub fn visited_cells(&self) -> impl Iterator<Item = (usize, &SupportCell)> {
        self.cells.iter().map(|(&i, c)| (i, c))
    }

    /// Nearest support vector to `state`.
    pub fn locate_cell(&self, state: &[f64]) -> Result<usize, MapError> {
        self.grid.locate(state)
    }

    /// Globally interpolated action at `state`: inverse-squared-distance
    /// weights `w_q = 1 / (d^2 + gamma)` over visited cells only, output
    /// clamped to [0, 1].
    pub fn interpolate_action(&self, state: &[f64]) -> Result<f64, MapError> {
        if state.len() != self.grid.dims {
            return Err(MapError::DimensionMismatch { expected: self.grid.dims, got: state.len() });
        }
        for (dim, &x) in state.iter().enumerate() {
            if !x.is_finite() || !(0.0..=1.0).contains(&x) {
                return Err(MapError::StateOutOfRange { dim, value: x });
            }
        }
        let mut wsum = 0.0;
        let mut acc = 0.0;
        for (&idx, cell) in &self.cells {
            let w = 1.0 / (self.grid.dist_sq(idx, state) + self.gamma);
            wsum += w;
            acc += w * cell.best_action;
        }
        if wsum == 0.0 {
            return Err(MapError::NoVisitedCells);
        }
        Ok((acc / wsum).clamp(0.0, 1.0))
    }

    /// Push a sample into the stack of the cell nearest to `state`,
    /// evicting the oldest entry beyond capacity, and promote the best
    /// action/utility if this sample improves on it. Returns the cell
    /// index written to.
    pub fn record_sample(
        &mut self,
        state: &[f64],
        own_action: f64,
        other_summary: f64,
        value: f64,
        aux: f64,
    ) -> Result<usize, MapError> {
        if !(own_action.is_finite()
            && other_summary.is_finite()
            && value.is_finite()
            && aux.is_finite())
        {
            return Err(MapError::NonFiniteSample);
        }
        let idx = self.locate_cell(state)?;
        let capacity = self.stack_capacity;
        let cell = self.cells.entry(idx).or_insert_with(SupportCell::new);
        cell.stack.push_back(Sample { own: own_action, other: other_summary, value, aux });
        while cell.stack.len() > capacity {
            cell.stack.pop_front();
        }
        if value > cell.best_utility {
            cell.best_utility = value;
            cell.best_action = own_action;
        }
        Ok(idx)
    }

    /// Overwrite the stored action of a visited cell (gradient updates
    /// write here). Returns false if the cell was never visited.
    pub fn set_cell_action(&mut self, index: usize, action: f64) -> bool {
        match self.cells.get_mut(&index) {
            Some(cell) => {
                cell.best_action = action.clamp(0.0, 1.0);
                true
            }
            None => false,
        }
    }

    pub fn cell_action(&self, index: usize) -> Option<f64> {
        self.cells.get(&index).map(|c| c.best_action)
    }

    /// Textual checkpoint rows: `layer,cell,best_action,best_utility`.
    pub fn write_csv<W: io::Write>(&self, layer: usize, w: &mut W) -> io::Result<()> {
        for (idx, cell) in &self.cells {
            writeln!(w, "{layer},{idx},{},{}", cell.best_action, cell.best_utility)?;
        }
        Ok(())
    }

    fn restore_cell(&mut self, index: usize, best_action: f64, best_utility: f64) {
        let cell = self.cells.entry(index).or_insert_with(SupportCell::new);
        cell.best_action = best_action;
        cell.best_utility = best_utility;
    }
}

/// How leader coalition actions map onto follower map layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderScheme {
    /// One layer per joint bin combination: B^G layers.
    CartesianProduct,
    /// One layer per bin of the coalition mean over G*B uniform bins.
    ScalarSummary,
}

/// Discretizes a leader coalition action into a stacked-map layer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeaderActionEncoder {
    pub n_leaders: usize,
    pub bins_per_leader: usize,
    pub scheme: EncoderScheme,
}

impl LeaderActionEncoder {
    pub fn new(n_leaders: usize, bins_per_leader: usize, scheme: EncoderScheme) -> Self {
        assert!(n_leaders >= 1, "encoder needs at least one leader");
        assert!(bins_per_leader >= 1, "encoder needs at least one bin");
        LeaderActionEncoder { n_leaders, bins_per_leader, scheme }
    }

    pub fn layer_count(&self) -> usize {
        match self.scheme {
            EncoderScheme::CartesianProduct => self.bins_per_leader.pow(self.n_leaders as u32),
            EncoderScheme::ScalarSummary => self.n_leaders * self.bins_per_leader,
        }
    }

    fn bin(value: f64, bins: usize) -> usize {
        ((value * bins as f64).floor() as usize).min(bins - 1)
    }

    /// Layer index for a coalition of normalized leader actions, ordered
    /// by player id.
    pub fn encode(&self, leader_actions: &[f64]) -> Result<usize, MapError> {
        if leader_actions.len() != self.n_leaders {
            return Err(MapError::WrongLeaderCount {
                expected: self.n_leaders,
                got: leader_actions.len(),
            });
        }
        match self.scheme {
            EncoderScheme::CartesianProduct => {
                let b = self.bins_per_leader;
                let mut index = 0usize;
                let mut base = 1usize;
                for &a in leader_actions {
                    index += Self::bin(a, b) * base;
                    base *= b;
                }
                Ok(index)
            }
            EncoderScheme::ScalarSummary => {
                let mean = leader_actions.iter().sum::<f64>() / self.n_leaders as f64;
                Ok(Self::bin(mean, self.layer_count()))
            }
        }
    }
}

/// A follower policy: one performance map layer per encoded leader
/// coalition action. All layers share one grid.
#[derive(Debug, Clone)]
pub struct StackedPerformanceMap {
    pub encoder: LeaderActionEncoder,
    layers: Vec<PerformanceMap>,
}

impl StackedPerformanceMap {
    pub fn new(grid: GridSpec, gamma: f64, encoder: LeaderActionEncoder) -> Self {
        let layers =
            (0..encoder.layer_count()).map(|_| PerformanceMap::new(grid, gamma)).collect();
        StackedPerformanceMap { encoder, layers }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, index: usize) -> &PerformanceMap {
        &self.layers[index]
    }

    pub fn layer_mut(&mut self, index: usize) -> &mut PerformanceMap {
        &mut self.layers[index]
    }

    /// The layer referenced by a leader coalition action.
    pub fn select_layer(&self, leader_actions: &[f64]) -> Result<&PerformanceMap, MapError> {
        Ok(&self.layers[self.encoder.encode(leader_actions)?])
    }

    /// Interpolate within the selected layer; if that layer holds no
    /// visited cell yet, interpolate across the union of all layers.
    /// Errors only when the whole stack is unvisited.
    pub fn interpolate_with_fallback(&self, layer: usize, state: &[f64]) -> Result<f64, MapError> {
        match self.layers[layer].interpolate_action(state) {
            Err(MapError::NoVisitedCells) => {}
            other => return other,
        }
        let grid = self.layers[0].grid;
        let gamma = self.layers[0].gamma;
        let mut wsum = 0.0;
        let mut acc = 0.0;
        for l in &self.layers {
            for (idx, cell) in l.visited_cells() {
                let w = 1.0 / (grid.dist_sq(idx, state) + gamma);
                wsum += w;
                acc += w * cell.best_action;
            }
        }
        if wsum == 0.0 {
            return Err(MapError::NoVisitedCells);
        }
        Ok((acc / wsum).clamp(0.0, 1.0))
    }

    pub fn visited_count(&self) -> usize {
        self.layers.iter().map(|l| l.visited_count()).sum()
    }

    /// Samples recorded at one grid cell across every layer, in layer
    /// order. The leader coalition enters each sample as a regressor, so
    /// pooling across layers keeps surrogate fits data-efficient.
    pub fn pooled_cell_samples(&self, cell: usize) -> impl Iterator<Item = &Sample> {
        self.layers.iter().filter_map(move |l| l.cell(cell)).flat_map(|c| c.stack.iter())
    }

    pub fn write_csv<W: io::Write>(&self, w: &mut W) -> io::Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.write_csv(i, w)?;
        }
        Ok(())
    }
}

/// Per-player policy storage: leaders and vanilla peers use a flat map,
/// followers a stacked one.
#[derive(Debug, Clone)]
pub enum PlayerMaps {
    Flat(PerformanceMap),
    Stacked(StackedPerformanceMap),
}

impl PlayerMaps {
    pub fn grid(&self) -> GridSpec {
        match self {
            PlayerMaps::Flat(m) => m.grid,
            PlayerMaps::Stacked(s) => s.layer(0).grid,
        }
    }

    pub fn visited_count(&self) -> usize {
        match self {
            PlayerMaps::Flat(m) => m.visited_count(),
            PlayerMaps::Stacked(s) => s.visited_count(),
        }
    }

    /// Checkpoint rows for every layer of this player's policy.
    pub fn write_csv<W: io::Write>(&self, w: &mut W) -> io::Result<()> {
        match self {
            PlayerMaps::Flat(m) => m.write_csv(0, w),
            PlayerMaps::Stacked(s) => s.write_csv(w),
        }
    }

    /// Restore checkpoint rows produced by `write_csv`. Stacks are not
    /// checkpointed; restored cells carry only best action/utility.
    pub fn read_csv<R: io::BufRead>(&mut self, r: R) -> io::Result<()> {
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let mut parse = || -> io::Result<f64> {
                parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad checkpoint row"))
            };
            let layer = parse()? as usize;
            let cell = parse()? as usize;
            let action = parse()?;
            let utility = parse()?;
            match self {
                PlayerMaps::Flat(m) => {
                    if layer != 0 {
                        return Err(io::Error::new(
                            io::ErrorKind::InvalidData,
                            "flat map checkpoint has layer > 0",
                        ));
                    }
                    m.restore_cell(cell, action, utility);
                }
                PlayerMaps::Stacked(s) => s.layer_mut(layer).restore_cell(cell, action, utility),
            }
        }
        Ok(())
    }
}
