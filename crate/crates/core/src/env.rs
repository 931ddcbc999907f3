//! Two-player Pong on the normalized board `[-1, 1]²`.
//!
//! The learning agent controls the right paddle; a scripted tracker controls
//! the left one. Rewards are from the agent's side: +1 when the ball leaves
//! through the left edge, −1 through the right edge. First to the winning
//! score ends the episode.

use std::f64::consts::FRAC_PI_4;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `[p_l, p_r, b_x, b_y, v_bx, v_by, s_l, s_r]`
pub type Observation = [f64; 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Up = 0,
    Stay = 1,
    Down = 2,
}

impl Action {
    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Action::Up),
            1 => Ok(Action::Stay),
            2 => Ok(Action::Down),
            _ => Err(Error::usage(format!("action index {i} out of range"))),
        }
    }

    fn direction(self) -> f64 {
        match self {
            Action::Up => 1.0,
            Action::Stay => 0.0,
            Action::Down => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PongConfig {
    pub paddle_half_height: f64,
    /// |x| of both paddle faces.
    pub paddle_x: f64,
    pub paddle_speed: f64,
    pub ball_speed: f64,
    pub speedup: f64,
    pub max_ball_speed: f64,
    /// Vertical velocity added per unit of normalized contact offset.
    pub deflection: f64,
    pub opponent_speed: f64,
    pub opponent_dead_zone: f64,
    /// Serve angle is drawn uniformly from `[-max, max]` radians off horizontal.
    pub serve_max_angle: f64,
    pub winning_score: u32,
    pub max_steps: u64,
}

impl Default for PongConfig {
    fn default() -> Self {
        Self {
            paddle_half_height: 0.2,
            paddle_x: 0.95,
            paddle_speed: 0.05,
            ball_speed: 0.04,
            speedup: 1.05,
            max_ball_speed: 0.12,
            deflection: 0.04,
            opponent_speed: 0.04,
            opponent_dead_zone: 0.05,
            serve_max_angle: FRAC_PI_4,
            winning_score: 21,
            max_steps: 10_000,
        }
    }
}

impl PongConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("paddle_half_height", self.paddle_half_height),
            ("paddle_x", self.paddle_x),
            ("paddle_speed", self.paddle_speed),
            ("ball_speed", self.ball_speed),
            ("max_ball_speed", self.max_ball_speed),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("environment.{name} must be positive, got {v}")));
            }
        }
        if self.paddle_half_height >= 1.0 || self.paddle_x >= 1.0 {
            return Err(Error::config("paddles must fit inside the board"));
        }
        if self.ball_speed > self.max_ball_speed || self.speedup < 1.0 {
            return Err(Error::config("ball_speed must not exceed max_ball_speed and speedup must be ≥ 1"));
        }
        if !(0.0..=FRAC_PI_4).contains(&self.serve_max_angle) {
            return Err(Error::config("serve_max_angle must lie in [0, π/4]"));
        }
        if self.winning_score == 0 || self.max_steps == 0 {
            return Err(Error::config("winning_score and max_steps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeInfo {
    pub episode_return: i32,
    pub episode_length: u64,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: Option<EpisodeInfo>,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Debug, Clone)]
pub struct Pong {
    cfg: PongConfig,
    left: f64,
    right: f64,
    ball: [f64; 2],
    vel: [f64; 2],
    score_left: u32,
    score_right: u32,
    steps: u64,
    episode_return: i32,
    finished: bool,
    rng: ChaCha8Rng,
}

impl Pong {
    pub fn new(cfg: PongConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut env = Self {
            cfg,
            left: 0.0,
            right: 0.0,
            ball: [0.0; 2],
            vel: [0.0; 2],
            score_left: 0,
            score_right: 0,
            steps: 0,
            episode_return: 0,
            finished: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset_episode();
        Ok(env)
    }

    pub fn config(&self) -> &PongConfig {
        &self.cfg
    }

    /// Reseeds and starts a fresh episode.
    pub fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.reset_episode()
    }

    /// Starts a fresh episode continuing the current serve RNG stream.
    pub fn reset_episode(&mut self) -> Observation {
        self.left = 0.0;
        self.right = 0.0;
        self.score_left = 0;
        self.score_right = 0;
        self.steps = 0;
        self.episode_return = 0;
        self.finished = false;
        let toward_right = self.rng.random::<bool>();
        self.serve(toward_right);
        self.observation()
    }

    fn serve(&mut self, toward_right: bool) {
        let max = self.cfg.serve_max_angle;
        let angle = if max > 0.0 { self.rng.random_range(-max..=max) } else { 0.0 };
        let dir = if toward_right { 1.0 } else { -1.0 };
        self.ball = [0.0, 0.0];
        self.vel = [dir * self.cfg.ball_speed * angle.cos(), self.cfg.ball_speed * angle.sin()];
    }

    /// Serve angle (radians off horizontal) of the ball currently in play.
    pub fn serve_angle(&self) -> f64 {
        (self.vel[1] / self.vel[0].abs()).atan()
    }

    pub fn scores(&self) -> (u32, u32) {
        (self.score_left, self.score_right)
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn observation(&self) -> Observation {
        let v = self.cfg.max_ball_speed;
        let w = f64::from(self.cfg.winning_score);
        [
            self.left,
            self.right,
            self.ball[0],
            self.ball[1],
            self.vel[0] / v,
            self.vel[1] / v,
            f64::from(self.score_left) / w,
            f64::from(self.score_right) / w,
        ]
    }

    fn paddle_limit(&self) -> f64 {
        1.0 - self.cfg.paddle_half_height
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.finished {
            return Err(Error::usage("step called on a finished episode; reset first"));
        }
        let limit = self.paddle_limit();
        self.right = (self.right + action.direction() * self.cfg.paddle_speed).clamp(-limit, limit);

        let gap = self.ball[1] - self.left;
        if gap.abs() > self.cfg.opponent_dead_zone {
            self.left += gap.signum() * gap.abs().min(self.cfg.opponent_speed);
            self.left = self.left.clamp(-limit, limit);
        }

        let reward = self.advance_ball();
        self.steps += 1;
        self.episode_return += reward;

        let terminated = self.score_left.max(self.score_right) >= self.cfg.winning_score;
        let truncated = !terminated && self.steps >= self.cfg.max_steps;
        self.finished = terminated || truncated;
        let info = self.finished.then_some(EpisodeInfo {
            episode_return: self.episode_return,
            episode_length: self.steps,
            truncated,
        });
        Ok(StepResult { observation: self.observation(), reward: f64::from(reward), terminated, truncated, info })
    }

    /// One Euler step of the ball; returns the agent's reward.
    fn advance_ball(&mut self) -> i32 {
        let [x0, y0] = self.ball;
        let mut x = x0 + self.vel[0];
        let mut y = y0 + self.vel[1];
        if y > 1.0 {
            y = 2.0 - y;
            self.vel[1] = -self.vel[1];
        } else if y < -1.0 {
            y = -2.0 - y;
            self.vel[1] = -self.vel[1];
        }

        let face = self.cfg.paddle_x;
        let crossing = if self.vel[0] > 0.0 && x0 < face && x >= face {
            Some((face, self.right))
        } else if self.vel[0] < 0.0 && x0 > -face && x <= -face {
            Some((-face, self.left))
        } else {
            None
        };
        if let Some((fx, paddle)) = crossing {
            let t = (fx - x0) / (x - x0);
            let y_hit = (y0 + t * (y - y0)).clamp(-1.0, 1.0);
            let offset = y_hit - paddle;
            let h = self.cfg.paddle_half_height;
            if offset.abs() <= h {
                let vmax = self.cfg.max_ball_speed;
                let speed = (self.vel[0].abs() * self.cfg.speedup).min(vmax);
                self.vel[0] = -self.vel[0].signum() * speed;
                self.vel[1] = (self.vel[1] + offset / h * self.cfg.deflection).clamp(-vmax, vmax);
                x = 2.0 * fx - x;
            }
        }

        if x < -1.0 {
            self.score_right += 1;
            self.serve(false);
            1
        } else if x > 1.0 {
            self.score_left += 1;
            self.serve(true);
            -1
        } else {
            self.ball = [x, y];
            0
        }
    }
}

/// Sum of step rewards, i.e. the final score difference from the agent's side.
pub fn episodic_return(rewards: &[f64]) -> i32 {
    rewards.iter().sum::<f64>().round() as i32
}

/// One line of a trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub obs: Observation,
    pub action: u8,
    pub reward: f64,
    pub done: bool,
}

/// ASCII frame of an observation: `|` opponent, `#` agent, `o` ball.
pub fn render_frame(obs: &Observation, width: usize, height: usize) -> String {
    let col = |x: f64| (((x + 1.0) / 2.0) * (width - 1) as f64).round().clamp(0.0, (width - 1) as f64) as usize;
    let row = |y: f64| (((1.0 - y) / 2.0) * (height - 1) as f64).round().clamp(0.0, (height - 1) as f64) as usize;
    let mut grid = vec![vec![' '; width]; height];
    let half = 0.2;
    for (x, p, c) in [(-0.95, obs[0], '|'), (0.95, obs[1], '#')] {
        for r in row(p + half)..=row(p - half) {
            grid[r][col(x)] = c;
        }
    }
    grid[row(obs[3])][col(obs[2])] = 'o';
    let border = format!("+{}+", "-".repeat(width));
    let mut out = format!(
        "score {:>2} : {:<2}\n{border}\n",
        (obs[6] * 21.0).round(),
        (obs[7] * 21.0).round()
    );
    for line in grid {
        out.push('|');
        out.extend(line);
        out.push_str("|\n");
    }
    out.push_str(&border);
    out.push('\n');
    out
}
