//! Desk-scale environments: the four-room gridworld, the continuous point
//! maze with Gaussian transitions, and synthetic conditional distributions.

use std::collections::VecDeque;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::mdp::{sample_categorical, Environment, Step, TabularMdp};
use crate::spaces::{Point, Space};
use crate::{Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardMode {
    /// Distance shaping rescaled into `[0, 1]`: `1 - dist / max_dist`.
    Dense,
    /// 1 on reaching the goal, else 0.
    Sparse,
}

impl std::str::FromStr for RewardMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(RewardMode::Dense),
            "sparse" => Ok(RewardMode::Sparse),
            _ => Err(Error::invalid(format!("unknown reward mode {s:?}"))),
        }
    }
}

pub const GRID_ACTIONS: [&str; 4] = ["up", "down", "left", "right"];
const MOVES: [(i64, i64); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

/// The 11x11 four-room layout (the interior of the classic 13x13 maze).
pub const FOUR_ROOMS: &str = "\
S....#.....
.....#.....
...........
.....#.....
.....#.....
#.####.....
.....###.##
.....#.....
.....#.....
...........
.....#....G
";

/// Gridworld whose states are the open cells, indexed row-major.
#[derive(Clone, Debug)]
pub struct FourRoomGrid {
    pub width: usize,
    pub height: usize,
    walls: Vec<bool>,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub slip_prob: f64,
    pub reward_mode: RewardMode,
    cells: Vec<(usize, usize)>,
    index: Vec<Option<usize>>,
    state_space: Space,
    action_space: Space,
}

impl FourRoomGrid {
    pub fn four_rooms(reward_mode: RewardMode, slip_prob: f64) -> Self {
        Self::from_ascii(FOUR_ROOMS, reward_mode, slip_prob).expect("built-in layout is valid")
    }

    /// `#` wall, `.` open, `S` start, `G` goal. Cells outside the drawing
    /// are walls.
    pub fn from_ascii(text: &str, reward_mode: RewardMode, slip_prob: f64) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(|l| l.trim_end()).filter(|l| !l.is_empty()).collect();
        if rows.is_empty() {
            return Err(Error::parse(1, "empty grid"));
        }
        let width = rows[0].chars().count();
        if width == 0 || width > 4096 || rows.len() > 4096 {
            return Err(Error::parse(1, "grid dimensions out of range"));
        }
        let height = rows.len();
        let mut walls = Vec::with_capacity(width * height);
        let (mut start, mut goal) = (None, None);
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::parse(y + 1, format!("row width differs from {width}")));
            }
            for (x, c) in row.chars().enumerate() {
                match c {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'S' | 'G' => {
                        let slot = if c == 'S' { &mut start } else { &mut goal };
                        if slot.replace((x, y)).is_some() {
                            return Err(Error::parse(y + 1, format!("more than one {c:?}")));
                        }
                        walls.push(false);
                    }
                    other => return Err(Error::parse(y + 1, format!("unexpected character {other:?}"))),
                }
            }
        }
        let start = start.ok_or_else(|| Error::parse(0, "no start cell 'S'"))?;
        let goal = goal.ok_or_else(|| Error::parse(0, "no goal cell 'G'"))?;
        Self::new(width, height, walls, start, goal, slip_prob, reward_mode)
    }

    pub fn new(
        width: usize,
        height: usize,
        walls: Vec<bool>,
        start: (usize, usize),
        goal: (usize, usize),
        slip_prob: f64,
        reward_mode: RewardMode,
    ) -> Result<Self> {
        if width == 0 || height == 0 || walls.len() != width * height {
            return Err(Error::invalid("wall mask does not match grid size"));
        }
        if !(0.0..1.0).contains(&slip_prob) {
            return Err(Error::invalid(format!("slip_prob {slip_prob} outside [0, 1)")));
        }
        for (name, (x, y)) in [("start", start), ("goal", goal)] {
            if x >= width || y >= height || walls[y * width + x] {
                return Err(Error::invalid(format!("{name} cell is a wall or outside the grid")));
            }
        }
        let mut cells = vec![];
        let mut index = vec![None; width * height];
        for y in 0..height {
            for x in 0..width {
                if !walls[y * width + x] {
                    index[y * width + x] = Some(cells.len());
                    cells.push((x, y));
                }
            }
        }
        let grid = FourRoomGrid {
            width,
            height,
            walls,
            start,
            goal,
            slip_prob,
            reward_mode,
            state_space: Space::discrete(cells.len())?,
            action_space: Space::discrete(4)?,
            cells,
            index,
        };
        grid.check_reachable()?;
        Ok(grid)
    }

    fn check_reachable(&self) -> Result<()> {
        let mut seen = vec![false; self.cells.len()];
        let s0 = self.cell_index(self.start).expect("start is open");
        seen[s0] = true;
        let mut queue = VecDeque::from([s0]);
        while let Some(s) = queue.pop_front() {
            for a in 0..4 {
                let n = self.move_from(s, a);
                if !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        if seen.iter().all(|v| *v) {
            Ok(())
        } else {
            Err(Error::invalid("some open cells are unreachable from start"))
        }
    }

    pub fn n_states(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, state: usize) -> (usize, usize) {
        self.cells[state]
    }

    pub fn cell_index(&self, (x, y): (usize, usize)) -> Option<usize> {
        if x < self.width && y < self.height {
            self.index[y * self.width + x]
        } else {
            None
        }
    }

    pub fn is_wall(&self, x: usize, y: usize) -> bool {
        x >= self.width || y >= self.height || self.walls[y * self.width + x]
    }

    pub fn start_state(&self) -> usize {
        self.cell_index(self.start).expect("start is open")
    }

    pub fn goal_state(&self) -> usize {
        self.cell_index(self.goal).expect("goal is open")
    }

    /// Deterministic move; blocked moves stay put.
    fn move_from(&self, state: usize, action: usize) -> usize {
        let (x, y) = self.cells[state];
        let (dx, dy) = MOVES[action];
        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
        if nx < 0 || ny < 0 {
            return state;
        }
        self.cell_index((nx as usize, ny as usize)).unwrap_or(state)
    }

    fn reward_at(&self, state: usize) -> f64 {
        let (x, y) = self.cells[state];
        match self.reward_mode {
            RewardMode::Sparse => f64::from(u8::from((x, y) == self.goal)),
            RewardMode::Dense => {
                let d = x.abs_diff(self.goal.0) + y.abs_diff(self.goal.1);
                let max = (self.width + self.height - 2).max(1);
                1.0 - d as f64 / max as f64
            }
        }
    }

    /// Analytic next-state distribution; entries with equal destination are merged.
    pub fn kernel(&self, state: usize, action: usize) -> Vec<(usize, f64)> {
        let slip_each = self.slip_prob / 3.0;
        let mut out: Vec<(usize, f64)> = vec![];
        for a in 0..4 {
            let p = if a == action { 1.0 - self.slip_prob } else { slip_each };
            if p == 0.0 {
                continue;
            }
            let n = self.move_from(state, a);
            match out.iter_mut().find(|(s, _)| *s == n) {
                Some(e) => e.1 += p,
                None => out.push((n, p)),
            }
        }
        out
    }

    pub fn step_grid(&self, state: usize, action: usize, rng: &mut Rng) -> Result<(usize, f64, bool)> {
        if action >= 4 {
            return Err(Error::invalid(format!("grid action {action} outside 0..4")));
        }
        if state >= self.cells.len() {
            return Err(Error::invalid(format!("state {state} is not an open cell")));
        }
        let taken = if self.slip_prob > 0.0 && rng.random::<f64>() < self.slip_prob {
            let k = rng.random_range(0..3);
            (0..4).filter(|a| *a != action).nth(k).expect("three alternatives")
        } else {
            action
        };
        let next = self.move_from(state, taken);
        Ok((next, self.reward_at(next), next == self.goal_state()))
    }

    /// The exact MDP: `r(s,a) = E[reward(s')]`, the goal is terminal.
    pub fn to_tabular(&self) -> TabularMdp {
        let (ns, na) = (self.n_states(), 4);
        let mut p = vec![0.0; ns * na * ns];
        let mut r = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                for (n, q) in self.kernel(s, a) {
                    p[(s * na + a) * ns + n] += q;
                    r[s * na + a] += q * self.reward_at(n);
                }
                let row = &mut p[(s * na + a) * ns..(s * na + a + 1) * ns];
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        let mut rho = vec![0.0; ns];
        rho[self.start_state()] = 1.0;
        let mut terminal = vec![false; ns];
        terminal[self.goal_state()] = true;
        TabularMdp::with_terminal(ns, na, p, r, rho, terminal).expect("grid kernel is stochastic")
    }

    pub fn terminal_mask(&self) -> Vec<bool> {
        (0..self.n_states()).map(|s| s == self.goal_state()).collect()
    }
}

impl Environment for FourRoomGrid {
    fn state_space(&self) -> &Space {
        &self.state_space
    }

    fn action_space(&self) -> &Space {
        &self.action_space
    }

    fn reset(&self, _rng: &mut Rng) -> Point {
        Point::Discrete(self.start_state())
    }

    fn step(&self, state: &Point, action: &Point, rng: &mut Rng) -> Result<Step> {
        let (Some(s), Some(a)) = (state.index(), action.index()) else {
            return Err(Error::invalid("grid needs discrete state and action"));
        };
        let (next, reward, terminal) = self.step_grid(s, a, rng)?;
        Ok(Step { next: Point::Discrete(next), reward, terminal })
    }
}

/// Axis-agnostic wall segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

/// Fraction `t` in `[0, 1]` along `p -> p + d` where the path meets `seg`.
pub fn segment_hit(p: [f64; 2], d: [f64; 2], seg: &Segment) -> Option<f64> {
    let e = [seg.b[0] - seg.a[0], seg.b[1] - seg.a[1]];
    let denom = d[0] * e[1] - d[1] * e[0];
    if denom.abs() < 1e-15 {
        return None;
    }
    let w = [seg.a[0] - p[0], seg.a[1] - p[1]];
    let t = (w[0] * e[1] - w[1] * e[0]) / denom;
    let u = (w[0] * d[1] - w[1] * d[0]) / denom;
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MazeStep {
    pub next: [f64; 2],
    pub reward: f64,
    pub terminal: bool,
    /// A wall or the boundary altered the Gaussian move.
    pub constrained: bool,
}

/// Point maze with `s' = s + a*dt + noise_std*z`, `z ~ N(0, I)`.
#[derive(Clone, Debug)]
pub struct ContinuousMaze {
    pub low: [f64; 2],
    pub high: [f64; 2],
    pub walls: Vec<Segment>,
    pub dt: f64,
    pub noise_std: f64,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub reward_mode: RewardMode,
    /// Episodes start uniformly at random instead of at `start`.
    pub random_start: bool,
    state_space: Space,
    action_space: Space,
}

impl ContinuousMaze {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        low: [f64; 2],
        high: [f64; 2],
        walls: Vec<Segment>,
        dt: f64,
        noise_std: f64,
        start: [f64; 2],
        goal: [f64; 2],
        goal_radius: f64,
        reward_mode: RewardMode,
    ) -> Result<Self> {
        if !(dt > 0.0) || !(noise_std >= 0.0) || !noise_std.is_finite() || !(goal_radius > 0.0) {
            return Err(Error::invalid("maze needs dt > 0, noise_std >= 0, goal_radius > 0"));
        }
        let state_space = Space::boxed(low.to_vec(), high.to_vec())?;
        if !state_space.contains(&Point::Continuous(start.to_vec())) {
            return Err(Error::invalid("maze start outside bounds"));
        }
        for w in &walls {
            if w.a.iter().chain(&w.b).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("wall segment".into()));
            }
        }
        Ok(ContinuousMaze {
            low,
            high,
            walls,
            dt,
            noise_std,
            start,
            goal,
            goal_radius,
            reward_mode,
            random_start: false,
            state_space,
            action_space: Space::discrete(9)?,
        })
    }

    /// Unit square split into four rooms by walls at x = 0.5 and y = 0.5,
    /// each with doorways at [0.2, 0.3] and [0.7, 0.8].
    pub fn four_rooms(reward_mode: RewardMode) -> Self {
        let mut walls = vec![];
        for (lo, hi) in [(0.0, 0.2), (0.3, 0.7), (0.8, 1.0)] {
            walls.push(Segment { a: [0.5, lo], b: [0.5, hi] });
            walls.push(Segment { a: [lo, 0.5], b: [hi, 0.5] });
        }
        Self::new([0.0, 0.0], [1.0, 1.0], walls, 0.1, 0.05, [0.15, 0.15], [0.85, 0.85], 0.1, reward_mode)
            .expect("built-in maze is valid")
    }

    pub fn area(&self) -> f64 {
        self.state_space.volume()
    }

    /// Velocity for index `k` of the 3x3 action grid `{-1, 0, 1}^2`.
    pub fn grid_velocity(k: usize) -> [f64; 2] {
        [(k % 3) as f64 - 1.0, (k / 3) as f64 - 1.0]
    }

    pub fn mean_next(&self, s: [f64; 2], velocity: [f64; 2]) -> [f64; 2] {
        let v = clip_velocity(velocity);
        [s[0] + v[0] * self.dt, s[1] + v[1] * self.dt]
    }

    pub fn step_maze(&self, s: [f64; 2], velocity: [f64; 2], rng: &mut Rng) -> Result<MazeStep> {
        if velocity.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("maze action".into()));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("maze state".into()));
        }
        let mean = self.mean_next(s, velocity);
        let (z0, z1): (f64, f64) = if self.noise_std > 0.0 {
            (StandardNormal.sample(rng), StandardNormal.sample(rng))
        } else {
            (0.0, 0.0)
        };
        let proposed = [mean[0] + self.noise_std * z0, mean[1] + self.noise_std * z1];
        let (next, constrained) = self.resolve_motion(s, proposed);
        let dist = ((next[0] - self.goal[0]).powi(2) + (next[1] - self.goal[1]).powi(2)).sqrt();
        let inside = dist <= self.goal_radius;
        let reward = match self.reward_mode {
            RewardMode::Sparse => f64::from(u8::from(inside)),
            RewardMode::Dense => {
                let diag = ((self.high[0] - self.low[0]).powi(2) + (self.high[1] - self.low[1]).powi(2)).sqrt();
                (1.0 - dist / diag).clamp(0.0, 1.0)
            }
        };
        Ok(MazeStep { next, reward, terminal: inside, constrained })
    }

    /// Stop-at-wall projection followed by clipping to the bounds.
    pub fn resolve_motion(&self, s: [f64; 2], proposed: [f64; 2]) -> ([f64; 2], bool) {
        let d = [proposed[0] - s[0], proposed[1] - s[1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let hit = self
            .walls
            .iter()
            .filter_map(|w| segment_hit(s, d, w))
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |m| m.min(t))));
        let mut next = proposed;
        let mut constrained = false;
        if let Some(t) = hit {
            let t_stop = if len > 0.0 { (t - 1e-9 / len).max(0.0) } else { 0.0 };
            next = [s[0] + t_stop * d[0], s[1] + t_stop * d[1]];
            constrained = true;
        }
        for k in 0..2 {
            let c = next[k].clamp(self.low[k], self.high[k]);
            if c != next[k] {
                constrained = true;
                next[k] = c;
            }
        }
        (next, constrained)
    }

    /// Density of the unconstrained Gaussian move, `N(s'; s + a dt, noise_std^2 I)`.
    pub fn true_conditional_density(&self, s: [f64; 2], velocity: [f64; 2], s_next: [f64; 2]) -> Result<f64> {
        if s.iter().chain(&velocity).chain(&s_next).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("density query".into()));
        }
        if self.noise_std <= 0.0 {
            return Err(Error::invalid("density undefined for noise_std = 0"));
        }
        let m = self.mean_next(s, velocity);
        let var = self.noise_std * self.noise_std;
        let r2 = (s_next[0] - m[0]).powi(2) + (s_next[1] - m[1]).powi(2);
        Ok((-r2 / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var))
    }

    pub fn sample_uniform_point(&self, rng: &mut Rng) -> [f64; 2] {
        [
            rng.random_range(self.low[0]..self.high[0]),
            rng.random_range(self.low[1]..self.high[1]),
        ]
    }
}

fn clip_velocity(v: [f64; 2]) -> [f64; 2] {
    [v[0].clamp(-1.0, 1.0), v[1].clamp(-1.0, 1.0)]
}

fn point2(p: &Point) -> Result<[f64; 2]> {
    match p.coords() {
        Some([x, y]) => Ok([*x, *y]),
        _ => Err(Error::invalid("maze expects 2-d points")),
    }
}

impl Environment for ContinuousMaze {
    fn state_space(&self) -> &Space {
        &self.state_space
    }

    fn action_space(&self) -> &Space {
        &self.action_space
    }

    fn reset(&self, rng: &mut Rng) -> Point {
        if self.random_start {
            Point::Continuous(self.sample_uniform_point(rng).to_vec())
        } else {
            Point::Continuous(self.start.to_vec())
        }
    }

    fn step(&self, state: &Point, action: &Point, rng: &mut Rng) -> Result<Step> {
        let s = point2(state)?;
        let v = match action {
            Point::Discrete(k) if *k < 9 => Self::grid_velocity(*k),
            Point::Discrete(k) => return Err(Error::invalid(format!("maze action {k} outside 0..9"))),
            Point::Continuous(_) => point2(action)?,
        };
        let st = self.step_maze(s, v, rng)?;
        Ok(Step { next: Point::Continuous(st.next.to_vec()), reward: st.reward, terminal: st.terminal })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticFamily {
    /// Unconstrained conditional tables.
    FreeTable,
    /// Every model in the family shares one partition value across `u`.
    ConstantPartition,
    /// `f(x,u) = exp(theta_x) * weights[u][x]`: the partition depends on `u`
    /// in a way a single scalar cannot absorb.
    VaryingPartition { weights: Vec<Vec<f64>> },
}

/// Discrete conditional `p(x|u)` with known ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConditional {
    pub x_cardinality: usize,
    pub u_cardinality: usize,
    /// `true_table[u][x]`.
    pub true_table: Vec<Vec<f64>>,
    pub family: SyntheticFamily,
}

impl SyntheticConditional {
    pub fn new(true_table: Vec<Vec<f64>>, family: SyntheticFamily) -> Result<Self> {
        let u_cardinality = true_table.len();
        let x_cardinality = true_table.first().map_or(0, |r| r.len());
        if u_cardinality == 0 || x_cardinality == 0 {
            return Err(Error::invalid("empty conditional table"));
        }
        for row in &true_table {
            if row.len() != x_cardinality || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::invalid("ragged or negative conditional table"));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::invalid("conditional rows must sum to 1"));
            }
        }
        if let SyntheticFamily::VaryingPartition { weights } = &family {
            if weights.len() != u_cardinality
                || weights.iter().any(|w| w.len() != x_cardinality || w.iter().any(|v| !(*v > 0.0)))
            {
                return Err(Error::invalid("partition weights must be positive and u x x shaped"));
            }
        }
        Ok(SyntheticConditional { x_cardinality, u_cardinality, true_table, family })
    }

    /// Random strictly positive table with rows bounded away from zero.
    pub fn random_free(x_cardinality: usize, u_cardinality: usize, rng: &mut Rng) -> Result<Self> {
        let table = (0..u_cardinality)
            .map(|_| {
                let raw: Vec<f64> = (0..x_cardinality).map(|_| rng.random_range(0.2..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / z).collect()
            })
            .collect();
        Self::new(table, SyntheticFamily::FreeTable)
    }

    /// Realizable member of the varying-partition family with
    /// `weights[1] = (1, 13, 1, 1)`, others 1, and `theta = 0`: the
    /// partition is 16 at `u = 1` and 4 elsewhere.
    pub fn varying_partition_witness() -> Self {
        let weights = vec![vec![1.0; 4], vec![1.0, 13.0, 1.0, 1.0], vec![1.0; 4]];
        let table = weights
            .iter()
            .map(|w| {
                let z: f64 = w.iter().sum();
                w.iter().map(|v| v / z).collect()
            })
            .collect();
        Self::new(table, SyntheticFamily::VaryingPartition { weights }).expect("valid witness")
    }

    pub fn sample(&self, n: usize, u_distribution: &[f64], rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
        sample_synthetic(self, n, u_distribution, rng)
    }
}

/// i.i.d. `(x, u)` pairs with `u ~ u_distribution`, `x ~ true_table[u]`.
pub fn sample_synthetic(
    env: &SyntheticConditional,
    n: usize,
    u_distribution: &[f64],
    rng: &mut Rng,
) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    if u_distribution.len() != env.u_cardinality {
        return Err(Error::DimensionMismatch { expected: env.u_cardinality, got: u_distribution.len() });
    }
    Ok((0..n)
        .map(|_| {
            let u = sample_categorical(u_distribution, rng);
            (sample_categorical(&env.true_table[u], rng), u)
        })
        .collect())
}
