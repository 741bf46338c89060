use std::collections::VecDeque;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SIZE: usize = 3;
pub const MAX_SIZE: usize = 6;
const REJECTS_BEFORE_SHRINK: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tile {
    Start,
    Ice,
    Hole,
    Goal,
}

impl Tile {
    pub const ALL: [Tile; 4] = [Tile::Start, Tile::Ice, Tile::Hole, Tile::Goal];

    pub fn word(self) -> &'static str {
        match self {
            Tile::Start => "start",
            Tile::Ice => "ice",
            Tile::Hole => "hole",
            Tile::Goal => "goal",
        }
    }

    pub fn channel(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    /// Tie-break order used by the planner.
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn word(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
        }
    }

    pub fn parse(word: &str) -> Option<Action> {
        match word.trim().to_ascii_lowercase().as_str() {
            "up" => Some(Action::Up),
            "down" => Some(Action::Down),
            "left" => Some(Action::Left),
            "right" => Some(Action::Right),
            _ => None,
        }
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    Success,
    FallHole,
    SafeNoGoal,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Success, Outcome::FallHole, Outcome::SafeNoGoal];

    pub fn letter(self) -> &'static str {
        match self {
            Outcome::Success => "A",
            Outcome::FallHole => "B",
            Outcome::SafeNoGoal => "C",
        }
    }
}

pub type Pos = (usize, usize);

/// Square grid world with exactly one start and one goal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMap {
    pub size: usize,
    pub cells: Vec<Tile>,
}

impl GridMap {
    /// Builds a map from codes `1` start, `0` ice, `-1` hole, `2` goal.
    pub fn from_codes(rows: &[&[i8]]) -> Result<Self> {
        let size = rows.len();
        let mut cells = Vec::with_capacity(size * size);
        for row in rows {
            if row.len() != size {
                return Err(Error::Invalid("map must be square".into()));
            }
            for &c in row.iter() {
                cells.push(match c {
                    1 => Tile::Start,
                    0 => Tile::Ice,
                    -1 => Tile::Hole,
                    2 => Tile::Goal,
                    _ => return Err(Error::Invalid(format!("unknown cell code {c}"))),
                });
            }
        }
        let map = GridMap { size, cells };
        map.check_markers()?;
        Ok(map)
    }

    fn check_markers(&self) -> Result<()> {
        let starts = self.cells.iter().filter(|&&t| t == Tile::Start).count();
        let goals = self.cells.iter().filter(|&&t| t == Tile::Goal).count();
        if starts != 1 || goals != 1 {
            return Err(Error::Invalid(format!("map has {starts} starts and {goals} goals")));
        }
        Ok(())
    }

    pub fn tile(&self, p: Pos) -> Tile {
        self.cells[p.0 * self.size + p.1]
    }

    fn find(&self, t: Tile) -> Pos {
        let i = self.cells.iter().position(|&c| c == t).expect("validated map");
        (i / self.size, i % self.size)
    }

    pub fn start(&self) -> Pos {
        self.find(Tile::Start)
    }

    pub fn goal(&self) -> Pos {
        self.find(Tile::Goal)
    }

    pub fn holes(&self) -> usize {
        self.cells.iter().filter(|&&t| t == Tile::Hole).count()
    }

    /// Position after one move; moving off the edge leaves it unchanged.
    pub fn step(&self, p: Pos, a: Action) -> Pos {
        let (dr, dc) = a.delta();
        let r = (p.0 as isize + dr).clamp(0, self.size as isize - 1) as usize;
        let c = (p.1 as isize + dc).clamp(0, self.size as isize - 1) as usize;
        (r, c)
    }

    /// BFS distance (in moves) from every cell to the goal avoiding holes.
    pub fn distances_to_goal(&self) -> Vec<Option<usize>> {
        let n = self.size;
        let mut dist = vec![None; n * n];
        let g = self.goal();
        dist[g.0 * n + g.1] = Some(0);
        let mut q = VecDeque::from([g]);
        while let Some(p) = q.pop_front() {
            let d = dist[p.0 * n + p.1].expect("queued cells have distances");
            for a in Action::ALL {
                // moves are reversible on a grid, so neighbours of p can reach p
                let nb = self.step(p, a);
                if nb != p && self.tile(nb) != Tile::Hole && dist[nb.0 * n + nb.1].is_none() {
                    dist[nb.0 * n + nb.1] = Some(d + 1);
                    q.push_back(nb);
                }
            }
        }
        dist
    }

    pub fn solvable(&self) -> bool {
        let s = self.start();
        self.distances_to_goal()[s.0 * self.size + s.1].is_some()
    }

    pub fn max_holes(size: usize) -> usize {
        size * size / 5
    }
}

/// Rejection-sampled map: uniform start, distinct uniform goal, a uniform
/// number of holes up to 20% of the cells, and a hole-free start-goal path.
pub fn generate_map(size: usize, rng_seed: u64) -> Result<GridMap> {
    if !(MIN_SIZE..=MAX_SIZE).contains(&size) {
        return Err(Error::Invalid(format!("map size {size} outside {MIN_SIZE}..={MAX_SIZE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut cap = GridMap::max_holes(size);
    let mut rejects = 0;
    let n = size * size;
    loop {
        let start = rng.random_range(0..n);
        let mut goal = rng.random_range(0..n - 1);
        if goal >= start {
            goal += 1;
        }
        let holes = rng.random_range(0..=cap);
        let free: Vec<usize> = (0..n).filter(|&i| i != start && i != goal).collect();
        let chosen: Vec<usize> = free.choose_multiple(&mut rng, holes).copied().collect();
        let mut cells = vec![Tile::Ice; n];
        cells[start] = Tile::Start;
        cells[goal] = Tile::Goal;
        for i in chosen {
            cells[i] = Tile::Hole;
        }
        let map = GridMap { size, cells };
        if map.solvable() {
            return Ok(map);
        }
        rejects += 1;
        if rejects == REJECTS_BEFORE_SHRINK && cap > 0 {
            cap -= 1;
            rejects = 0;
        }
    }
}

/// Steps the agent from the start. Stops on entering a hole (fall) or the
/// goal (success); otherwise safe without reaching the goal. The trace holds
/// the start and every position reached.
pub fn simulate(map: &GridMap, actions: &[Action]) -> (Outcome, Vec<Pos>) {
    let mut p = map.start();
    let mut trace = vec![p];
    for &a in actions {
        p = map.step(p, a);
        trace.push(p);
        match map.tile(p) {
            Tile::Hole => return (Outcome::FallHole, trace),
            Tile::Goal => return (Outcome::Success, trace),
            _ => {}
        }
    }
    (Outcome::SafeNoGoal, trace)
}

/// Shortest hole-free plan from start to goal. Among shortest plans, the
/// earliest action in Up < Down < Left < Right order is taken at each depth.
pub fn plan_shortest(map: &GridMap) -> Result<Vec<Action>> {
    let dist = map.distances_to_goal();
    let n = map.size;
    let mut p = map.start();
    let mut d = dist[p.0 * n + p.1].ok_or_else(|| Error::Invalid("goal unreachable".into()))?;
    let mut plan = Vec::with_capacity(d);
    while d > 0 {
        let (a, next) = Action::ALL
            .iter()
            .map(|&a| (a, map.step(p, a)))
            .find(|&(_, q)| map.tile(q) != Tile::Hole && dist[q.0 * n + q.1] == Some(d - 1))
            .expect("a neighbour one step closer exists");
        plan.push(a);
        p = next;
        d -= 1;
    }
    Ok(plan)
}
