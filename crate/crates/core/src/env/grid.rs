use std::collections::VecDeque;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Frame, ObservationState};
use crate::error::{Error, Result};
use crate::Rng;

pub const AGENT_INTENSITY: u8 = 255;
pub const GOAL_INTENSITY: u8 = 128;
pub const WALL_INTENSITY: u8 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Static goal, agent and goal placed uniformly at distinct cells.
    Chase,
    /// A wall splits the grid; the goal sits beyond a one-cell door.
    Corridor,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chase" => Ok(Task::Chase),
            "corridor" => Ok(Task::Corridor),
            other => Err(Error::Config(format!("unknown task `{other}` (expected chase|corridor)"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Chase => "chase",
            Task::Corridor => "corridor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub task: Task,
    /// Cells per side.
    pub grid: usize,
    /// Pixels per cell side.
    pub scale: usize,
    pub horizon: usize,
    pub seed: u64,
    pub frame_stack: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task: Task::Chase,
            grid: 8,
            scale: 4,
            horizon: 64,
            seed: 0,
            frame_stack: 4,
        }
    }
}

/// Frame geometry shared by every state of an environment or dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub frame_stack: usize,
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.frame_stack, self.height, self.width)
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(Error::Config(format!("grid size {} < 4", self.grid)));
        }
        if self.horizon < 8 {
            return Err(Error::Config(format!("horizon {} < 8", self.horizon)));
        }
        if self.scale == 0 || self.frame_stack == 0 {
            return Err(Error::Config("scale and frame stack must be positive".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            height: self.grid * self.scale,
            width: self.grid * self.scale,
            frame_stack: self.frame_stack,
        }
    }

    /// Hash of everything that defines the environment except the seed.
    pub fn fingerprint(&self) -> String {
        let desc = format!(
            "task={};grid={};scale={};horizon={};k={}",
            self.task, self.grid, self.scale, self.horizon, self.frame_stack
        );
        let digest = Sha256::digest(desc.as_bytes());
        crate::numerics::hex_digest(&digest[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Stay => (0, 0),
        }
    }
}

/// Cell coordinates, `(row, col)`.
pub type Cell = (usize, usize);

/// Ground-truth layout; only the scripted expert and evaluation may read it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridState {
    pub grid: usize,
    pub agent: Cell,
    pub goal: Cell,
    /// Row-major wall mask.
    pub walls: Vec<bool>,
    /// The door through the wall, for corridor layouts.
    pub door: Option<Cell>,
}

impl GridState {
    pub fn is_wall(&self, (r, c): Cell) -> bool {
        self.walls[r * self.grid + c]
    }

    pub fn wall_column(&self) -> Option<usize> {
        self.door.map(|(_, c)| c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: ObservationState,
    pub done: bool,
    pub success: bool,
    /// Episode cut by the horizon rather than by reaching the goal.
    pub truncated: bool,
    /// Evaluation-only task reward (+1 on the goal, -1/horizon per step);
    /// learners never see it.
    pub env_reward: f64,
}

/// Single-instance pixel gridworld. Not safe for concurrent stepping.
#[derive(Debug, Clone)]
pub struct GridEnv {
    config: EnvConfig,
    layout: GridState,
    frames: VecDeque<Frame>,
    steps: usize,
    done: bool,
}

impl GridEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let mut env = Self {
            config,
            layout: GridState {
                grid: config.grid,
                agent: (0, 0),
                goal: (0, 1),
                walls: vec![false; config.grid * config.grid],
                door: None,
            },
            frames: VecDeque::with_capacity(config.frame_stack),
            steps: 0,
            done: true,
        };
        env.reset(config.seed);
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn layout(&self) -> &GridState {
        &self.layout
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Place agent and goal from `seed` and return the initial stacked state.
    pub fn reset(&mut self, seed: u64) -> ObservationState {
        let mut rng = Rng::seed_from_u64(seed);
        self.layout = place(&self.config, &mut rng);
        self.steps = 0;
        self.done = false;
        let f = self.render();
        self.frames.clear();
        for _ in 0..self.config.frame_stack {
            self.frames.push_back(f.clone());
        }
        self.observation()
    }

    pub fn observation(&self) -> ObservationState {
        ObservationState::from_frames(self.frames.iter())
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let g = self.config.grid as isize;
        let (dr, dc) = action.delta();
        let (r, c) = self.layout.agent;
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if nr >= 0 && nr < g && nc >= 0 && nc < g && !self.layout.is_wall((nr as usize, nc as usize)) {
            self.layout.agent = (nr as usize, nc as usize);
        }
        self.steps += 1;
        let success = self.layout.agent == self.layout.goal;
        let truncated = !success && self.steps >= self.config.horizon;
        self.done = success || truncated;
        self.frames.pop_front();
        self.frames.push_back(self.render());
        let env_reward = if success { 1.0 } else { 0.0 } - 1.0 / self.config.horizon as f64;
        Ok(StepOutcome {
            state: self.observation(),
            done: self.done,
            success,
            truncated,
            env_reward,
        })
    }

    fn render(&self) -> Frame {
        render(&self.config, &self.layout)
    }
}

fn place(cfg: &EnvConfig, rng: &mut Rng) -> GridState {
    let g = cfg.grid;
    let mut walls = vec![false; g * g];
    match cfg.task {
        Task::Chase => {
            let a = rng.gen_range(0..g * g);
            let mut b = rng.gen_range(0..g * g - 1);
            if b >= a {
                b += 1;
            }
            GridState {
                grid: g,
                agent: (a / g, a % g),
                goal: (b / g, b % g),
                walls,
                door: None,
            }
        }
        Task::Corridor => {
            let wc = g / 2;
            let door_row = rng.gen_range(0..g);
            for r in 0..g {
                if r != door_row {
                    walls[r * g + wc] = true;
                }
            }
            let agent = (rng.gen_range(0..g), rng.gen_range(0..wc));
            let goal = (rng.gen_range(0..g), rng.gen_range(wc + 1..g));
            GridState {
                grid: g,
                agent,
                goal,
                walls,
                door: Some((door_row, wc)),
            }
        }
    }
}

/// Dark background, walls dim, goal mid-gray, agent bright (drawn last).
pub fn render(cfg: &EnvConfig, s: &GridState) -> Frame {
    let (g, k) = (cfg.grid, cfg.scale);
    let side = g * k;
    let mut pixels = vec![0u8; side * side];
    let mut fill = |(r, c): Cell, v: u8| {
        for y in r * k..(r + 1) * k {
            pixels[y * side + c * k..y * side + (c + 1) * k].fill(v);
        }
    };
    for r in 0..g {
        for c in 0..g {
            if s.walls[r * g + c] {
                fill((r, c), WALL_INTENSITY);
            }
        }
    }
    fill(s.goal, GOAL_INTENSITY);
    fill(s.agent, AGENT_INTENSITY);
    Frame {
        height: side,
        width: side,
        pixels,
    }
}
