//! Slippery grid world with holes.
//!
//! Cells are indexed row-major: `id = row * width + col`. Actions are
//! `0 = up, 1 = right, 2 = left, 3 = down`. A move goes in the intended
//! direction with probability `p_intended` and sideways with `p_orthogonal`
//! each; moves off the grid leave the agent in place.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{CmdpError, CmdpParts, StateSet, TabularCMDP};
use crate::interventions::{Intervention, InterventionError};

/// The committed default map.
pub const DEFAULT_MAP: &str = include_str!("../../fixtures/frozen_lake_10x10.txt");

pub const UP: usize = 0;
pub const RIGHT: usize = 1;
pub const LEFT: usize = 2;
pub const DOWN: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("bad character {ch:?} at ({row},{col})")]
    BadCharacter { row: usize, col: usize, ch: char },
    #[error("row {row} has {len} cells, expected {expected}")]
    RaggedRows { row: usize, len: usize, expected: usize },
    #[error("map has no start cell")]
    MissingStart,
    #[error("map has {0} start cells")]
    MultipleStarts(usize),
    #[error("map has no goal cell")]
    MissingGoal,
    #[error("map is empty")]
    Empty,
    #[error("invalid frozen lake config: {0}")]
    Config(String),
    #[error("reading map: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Start,
    Frozen,
    Hole,
    Goal,
}

impl Cell {
    fn symbol(self) -> char {
        match self {
            Cell::Start => 'S',
            Cell::Frozen => 'F',
            Cell::Hole => 'H',
            Cell::Goal => 'G',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMap {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
}

impl GridMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.width + col]
    }

    pub fn cell_at(&self, id: usize) -> Cell {
        self.cells[id]
    }

    pub fn id(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn coords(&self, id: usize) -> (usize, usize) {
        (id / self.width, id % self.width)
    }

    pub fn start(&self) -> usize {
        self.cells.iter().position(|c| *c == Cell::Start).expect("validated map has a start")
    }

    pub fn cells_of(&self, kind: Cell) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i] == kind).collect()
    }

    pub fn holes(&self) -> Vec<usize> {
        self.cells_of(Cell::Hole)
    }

    pub fn goals(&self) -> Vec<usize> {
        self.cells_of(Cell::Goal)
    }

    /// Cell reached by moving one step in `dir`, staying put at walls.
    pub fn neighbour(&self, id: usize, dir: usize) -> usize {
        let (r, c) = self.coords(id);
        match dir {
            UP if r > 0 => id - self.width,
            DOWN if r + 1 < self.height => id + self.width,
            LEFT if c > 0 => id - 1,
            RIGHT if c + 1 < self.width => id + 1,
            _ => id,
        }
    }

    /// 4-neighbourhood graph distance from every cell to the nearest hole.
    pub fn hole_distance(&self) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.cells.len()];
        let mut queue = VecDeque::new();
        for h in self.holes() {
            dist[h] = 0;
            queue.push_back(h);
        }
        while let Some(u) = queue.pop_front() {
            for dir in [UP, RIGHT, LEFT, DOWN] {
                let v = self.neighbour(u, dir);
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

impl fmt::Display for GridMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.height {
            let row: String = (0..self.width).map(|c| self.cell(r, c).symbol()).collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

/// Parses an ASCII map: one row per line, characters `S`, `F`, `H`, `G`.
/// A trailing newline is accepted.
pub fn parse_map(text: &str) -> Result<GridMap, MapError> {
    let rows: Vec<&str> = text.lines().collect();
    if rows.is_empty() || rows[0].is_empty() {
        return Err(MapError::Empty);
    }
    let width = rows[0].chars().count();
    let mut cells = Vec::with_capacity(width * rows.len());
    for (r, line) in rows.iter().enumerate() {
        let len = line.chars().count();
        if len != width {
            return Err(MapError::RaggedRows { row: r, len, expected: width });
        }
        for (c, ch) in line.chars().enumerate() {
            cells.push(match ch {
                'S' => Cell::Start,
                'F' => Cell::Frozen,
                'H' => Cell::Hole,
                'G' => Cell::Goal,
                _ => return Err(MapError::BadCharacter { row: r, col: c, ch }),
            });
        }
    }
    let starts = cells.iter().filter(|c| **c == Cell::Start).count();
    match starts {
        0 => return Err(MapError::MissingStart),
        1 => {}
        n => return Err(MapError::MultipleStarts(n)),
    }
    if !cells.contains(&Cell::Goal) {
        return Err(MapError::MissingGoal);
    }
    Ok(GridMap {
        width,
        height: rows.len(),
        cells,
    })
}

pub fn load_map(path: &Path) -> Result<GridMap, MapError> {
    let text = std::fs::read_to_string(path).map_err(|e| MapError::Io(format!("{}: {e}", path.display())))?;
    parse_map(&text)
}

pub fn default_map() -> GridMap {
    parse_map(DEFAULT_MAP).expect("committed map fixture parses")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrozenLakeConfig {
    pub p_intended: f64,
    pub p_orthogonal: f64,
    pub goal_reward: f64,
    pub step_reward: f64,
    pub kappa: f64,
    pub horizon: usize,
}

impl Default for FrozenLakeConfig {
    fn default() -> Self {
        Self {
            p_intended: 0.8,
            p_orthogonal: 0.1,
            goal_reward: 6.0,
            step_reward: -0.01,
            kappa: 0.1,
            horizon: 100,
        }
    }
}

impl FrozenLakeConfig {
    pub fn validate(&self) -> Result<(), MapError> {
        let total = self.p_intended + 2.0 * self.p_orthogonal;
        if !(self.p_intended >= 0.0 && self.p_orthogonal >= 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(MapError::Config(format!(
                "p_intended + 2 * p_orthogonal = {total}, expected 1"
            )));
        }
        if self.horizon == 0 {
            return Err(MapError::Config("horizon must be at least 1".into()));
        }
        if !(self.kappa >= 0.0) {
            return Err(MapError::Config(format!("kappa = {}", self.kappa)));
        }
        Ok(())
    }

    /// Largest per-step reward magnitude, used for the teacher's penalty.
    pub fn r_max(&self) -> f64 {
        self.goal_reward.abs().max(self.step_reward.abs())
    }
}

fn orthogonal(dir: usize) -> [usize; 2] {
    match dir {
        UP | DOWN => [LEFT, RIGHT],
        _ => [UP, DOWN],
    }
}

#[derive(Debug, Error)]
pub enum FrozenLakeError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
}

/// Builds the CMDP: holes are unsafe and absorbing, goals absorbing with
/// `goal_reward` on entry, every other move pays `step_reward`.
pub fn build_flake_cmdp(map: &GridMap, config: &FrozenLakeConfig) -> Result<TabularCMDP, FrozenLakeError> {
    config.validate()?;
    let n = map.n_cells();
    let m = 4;
    let mut transition = vec![0.0; n * m * n];
    let mut reward = vec![0.0; n * m * n];
    let holes = StateSet::from_ids(n, map.holes())?;
    let goals = StateSet::from_ids(n, map.goals())?;
    let terminal = holes.union(&goals);
    for s in 0..n {
        for a in 0..m {
            let base = (s * m + a) * n;
            if terminal.contains(s) {
                transition[base + s] = 1.0;
                continue;
            }
            let [o1, o2] = orthogonal(a);
            for (dir, p) in [(a, config.p_intended), (o1, config.p_orthogonal), (o2, config.p_orthogonal)] {
                transition[base + map.neighbour(s, dir)] += p;
            }
            for t in 0..n {
                if transition[base + t] > 0.0 {
                    reward[base + t] = if goals.contains(t) { config.goal_reward } else { config.step_reward };
                }
            }
        }
    }
    let mut initial_dist = vec![0.0; n];
    initial_dist[map.start()] = 1.0;
    Ok(TabularCMDP::from_parts(CmdpParts {
        n_states: n,
        n_actions: m,
        transition,
        reward,
        unsafe_set: holes,
        initial_dist,
        horizon: config.horizon,
        kappa: config.kappa,
        terminal_set: terminal,
    })?)
}

/// Holes plus every non-goal cell within `radius` grid steps of a hole.
///
/// Goal cells are left out so that a goal next to a hole stays reachable.
pub fn ring_trigger_set(map: &GridMap, radius: usize) -> StateSet {
    let dist = map.hole_distance();
    let mask = (0..map.n_cells())
        .map(|i| dist[i] <= radius && map.cell_at(i) != Cell::Goal)
        .collect();
    StateSet::from_mask(mask)
}

#[derive(Clone, Debug)]
pub struct FrozenLakeInterventions {
    pub sr1: Intervention,
    pub sr2: Intervention,
    pub hr: Intervention,
}

impl FrozenLakeInterventions {
    /// Library order used by teacher ids: SR1, SR2, HR.
    pub fn into_vec(self) -> Vec<Intervention> {
        vec![self.sr1, self.sr2, self.hr]
    }
}

pub const SOFT_RESET_TAU: f64 = 0.1;
pub const HARD_RESET_TAU: f64 = 0.0;

/// Two soft resets (rings of radius 1 and 2) and a hard reset on the
/// radius-1 ring. All carry `kappa_i = 0`.
pub fn make_interventions(map: &GridMap, base: &TabularCMDP) -> Result<FrozenLakeInterventions, FrozenLakeError> {
    let ring1 = ring_trigger_set(map, 1);
    let ring2 = ring_trigger_set(map, 2);
    Ok(FrozenLakeInterventions {
        sr1: Intervention::soft_reset("SR1", base, ring1.clone(), SOFT_RESET_TAU, 0.0)?,
        sr2: Intervention::soft_reset("SR2", base, ring2, SOFT_RESET_TAU, 0.0)?,
        hr: Intervention::hard_reset("HR", base, ring1, HARD_RESET_TAU, 0.0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_single_row() {
        let map = parse_map("SFG").unwrap();
        assert_eq!((map.height(), map.width()), (1, 3));
        assert_eq!(map.start(), 0);
        assert_eq!(map.goals(), vec![2]);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_map("SQG").unwrap_err(), MapError::BadCharacter { row: 0, col: 1, ch: 'Q' });
        assert!(matches!(parse_map("SF\nF").unwrap_err(), MapError::RaggedRows { row: 1, .. }));
        assert_eq!(parse_map("FFG").unwrap_err(), MapError::MissingStart);
    }

    #[test]
    fn display_round_trips() {
        let map = default_map();
        assert_eq!(map.to_string(), DEFAULT_MAP);
    }

    #[test]
    fn slip_row_from_interior() {
        let map = parse_map("SFF\nFFF\nFFG").unwrap();
        let cmdp = build_flake_cmdp(&map, &FrozenLakeConfig::default()).unwrap();
        let row = cmdp.transition_row(4, RIGHT);
        assert_eq!(row[5], 0.8);
        assert_eq!(row[1], 0.1);
        assert_eq!(row[7], 0.1);
        assert_eq!(row.iter().filter(|p| **p > 0.0).count(), 3);
    }

    #[test]
    fn wall_mass_stays_in_place() {
        let map = parse_map("SFF\nFFF\nFFG").unwrap();
        let cmdp = build_flake_cmdp(&map, &FrozenLakeConfig::default()).unwrap();
        // Up from the top-left corner: intended and left slip both hit walls.
        let row = cmdp.transition_row(0, UP);
        assert!((row[0] - 0.9).abs() < 1e-15);
        assert!((row[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ring_sizes_around_single_hole() {
        let map = parse_map("SFFFF\nFFFFF\nFFHFF\nFFFFF\nFFFFG").unwrap();
        assert_eq!(ring_trigger_set(&map, 1).len(), 5);
        assert_eq!(ring_trigger_set(&map, 2).len(), 13);
    }

    #[test]
    fn no_holes_means_empty_triggers() {
        let map = parse_map("SFF\nFFG").unwrap();
        let base = build_flake_cmdp(&map, &FrozenLakeConfig::default()).unwrap();
        let ivs = make_interventions(&map, &base).unwrap();
        assert!(ivs.sr1.trigger_set().is_empty());
        assert!(ivs.sr2.trigger_set().is_empty());
        assert!(ivs.hr.trigger_set().is_empty());
    }
}
