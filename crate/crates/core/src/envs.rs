//! Toy MDPs standing in for benchmark suites: a linear-quadratic point mass
//! with a known optimal controller, and a sparse-reward point maze.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    LinearPoint(LinearPointSpec),
    PointMaze(PointMazeSpec),
}

/// `s' = A s + B a + noise_std * eta`, reward `-(s-g)' Q (s-g) - a' Rw a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearPointSpec {
    pub horizon: usize,
    /// Row-major `ds x ds`.
    pub a: Vec<Vec<f64>>,
    /// Row-major `ds x da`.
    pub b: Vec<Vec<f64>>,
    pub goal: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub rw: Vec<Vec<f64>>,
    #[serde(default)]
    pub noise_std: f64,
    pub start_low: Vec<f64>,
    pub start_high: Vec<f64>,
    /// Half-width of the action box used by the random policy and grid search.
    #[serde(default = "one")]
    pub action_bound: f64,
    /// Feedback gain `K` (`da x ds`) of the scripted expert, `a = -K (s - g)`.
    pub expert_gain: Vec<Vec<f64>>,
    /// An episode counts as a success when it ends within this distance of the goal.
    #[serde(default = "default_success_radius")]
    pub success_radius: f64,
}

/// Point mass with state `(x, y, vx, vy)` and acceleration actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointMazeSpec {
    pub horizon: usize,
    /// Wall segments `[x1, y1, x2, y2]`.
    pub walls: Vec<[f64; 4]>,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub dt: f64,
    #[serde(default = "one")]
    pub action_clip: f64,
    pub start: [f64; 2],
    #[serde(default)]
    pub start_jitter: f64,
    /// Way-points the scripted expert visits in order before the goal.
    #[serde(default)]
    pub waypoints: Vec<[f64; 2]>,
    #[serde(default = "default_kp")]
    pub expert_kp: f64,
    #[serde(default = "default_kd")]
    pub expert_kd: f64,
}

fn one() -> f64 {
    1.0
}
fn default_success_radius() -> f64 {
    0.1
}
fn default_kp() -> f64 {
    2.0
}
fn default_kd() -> f64 {
    1.5
}

/// Outcome of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub(crate) fn to_matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::config(format!("{name} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl LinearPointSpec {
    pub fn state_dim(&self) -> usize {
        self.a.len()
    }

    pub fn action_dim(&self) -> usize {
        self.b.first().map_or(0, Vec::len)
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        DMatrix::from_fn(n, n, |i, j| self.a[i][j])
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.state_dim(), self.action_dim(), |i, j| self.b[i][j])
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        DMatrix::from_fn(n, n, |i, j| self.q[i][j])
    }

    pub fn rw_matrix(&self) -> DMatrix<f64> {
        let m = self.action_dim();
        DMatrix::from_fn(m, m, |i, j| self.rw[i][j])
    }

    fn validate(&self) -> Result<()> {
        let (ds, da) = (self.state_dim(), self.action_dim());
        if ds == 0 || da == 0 {
            return Err(Error::config("linear_point needs positive state and action dims"));
        }
        to_matrix(&self.a, ds, ds, "a")?;
        to_matrix(&self.b, ds, da, "b")?;
        let q = to_matrix(&self.q, ds, ds, "q")?;
        let rw = to_matrix(&self.rw, da, da, "rw")?;
        to_matrix(&self.expert_gain, da, ds, "expert_gain")?;
        for (name, v) in [
            ("goal", &self.goal),
            ("start_low", &self.start_low),
            ("start_high", &self.start_high),
        ] {
            if v.len() != ds {
                return Err(Error::config(format!("{name} must have length {ds}")));
            }
        }
        if self.start_low.iter().zip(&self.start_high).any(|(l, h)| l > h) {
            return Err(Error::config("start_low must not exceed start_high"));
        }
        if !(self.noise_std >= 0.0) || !(self.action_bound > 0.0) {
            return Err(Error::config("noise_std must be >= 0 and action_bound > 0"));
        }
        let q_sym = (&q + q.transpose()) * 0.5;
        if q_sym.symmetric_eigenvalues().iter().any(|&e| e < -1e-12) {
            return Err(Error::config("q must be positive semi-definite"));
        }
        let rw_sym = (&rw + rw.transpose()) * 0.5;
        if rw_sym.cholesky().is_none() {
            return Err(Error::config("rw must be positive definite"));
        }
        Ok(())
    }

    pub fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        let ds = self.state_dim();
        let mut cost = 0.0;
        for i in 0..ds {
            for j in 0..ds {
                cost += (s[i] - self.goal[i]) * self.q[i][j] * (s[j] - self.goal[j]);
            }
        }
        for (i, ai) in a.iter().enumerate() {
            for (j, aj) in a.iter().enumerate() {
                cost += ai * self.rw[i][j] * aj;
            }
        }
        -cost
    }

    fn dynamics(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(ar, br)| {
                ar.iter().zip(s).map(|(x, y)| x * y).sum::<f64>()
                    + br.iter().zip(a).map(|(x, y)| x * y).sum::<f64>()
            })
            .collect()
    }
}

impl PointMazeSpec {
    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.goal_radius > 0.0) || !(self.action_clip > 0.0) {
            return Err(Error::config("point_maze needs dt, goal_radius and action_clip > 0"));
        }
        if self.start_jitter < 0.0 {
            return Err(Error::config("start_jitter must be >= 0"));
        }
        Ok(())
    }

    pub fn at_goal(&self, pos: [f64; 2]) -> bool {
        let (dx, dy) = (pos[0] - self.goal[0], pos[1] - self.goal[1]);
        (dx * dx + dy * dy).sqrt() <= self.goal_radius
    }

    /// Semi-implicit Euler step of the double integrator with wall collisions.
    fn dynamics(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let clip = |u: f64| u.clamp(-self.action_clip, self.action_clip);
        let (ax, ay) = (clip(a[0]), clip(a[1]));
        let mut vel = [s[2] + self.dt * ax, s[3] + self.dt * ay];
        let from = [s[0], s[1]];
        let mut to = [from[0] + self.dt * vel[0], from[1] + self.dt * vel[1]];

        // First wall hit along the displacement.
        let mut hit: Option<(f64, [f64; 4])> = None;
        for w in &self.walls {
            if let Some(t) = segment_hit(from, to, w) {
                if hit.is_none_or(|(best, _)| t < best) {
                    hit = Some((t, *w));
                }
            }
        }
        if let Some((t, w)) = hit {
            let d = [to[0] - from[0], to[1] - from[1]];
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            // stop just short of the surface, strictly on the incoming side
            let back = if len > 0.0 { 1e-9 / len } else { 0.0 };
            let tt = (t - back).max(0.0);
            to = [from[0] + tt * d[0], from[1] + tt * d[1]];
            let (wx, wy) = (w[2] - w[0], w[3] - w[1]);
            let wl = (wx * wx + wy * wy).sqrt();
            if wl > 0.0 {
                let n = [-wy / wl, wx / wl];
                let vn = vel[0] * n[0] + vel[1] * n[1];
                vel = [vel[0] - vn * n[0], vel[1] - vn * n[1]];
            } else {
                vel = [0.0, 0.0];
            }
        }
        vec![to[0], to[1], vel[0], vel[1]]
    }
}

/// Parameter along `p -> q` where it meets wall `w`, if the two segments intersect.
pub fn segment_hit(p: [f64; 2], q: [f64; 2], w: &[f64; 4]) -> Option<f64> {
    let r = [q[0] - p[0], q[1] - p[1]];
    let s = [w[2] - w[0], w[3] - w[1]];
    let denom = r[0] * s[1] - r[1] * s[0];
    if denom == 0.0 {
        return None;
    }
    let qp = [w[0] - p[0], w[1] - p[1]];
    let t = (qp[0] * s[1] - qp[1] * s[0]) / denom;
    let u = (qp[0] * r[1] - qp[1] * r[0]) / denom;
    ((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)).then_some(t)
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon() == 0 {
            return Err(Error::config("horizon must be positive"));
        }
        match self {
            EnvSpec::LinearPoint(lp) => lp.validate(),
            EnvSpec::PointMaze(pm) => pm.validate(),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            EnvSpec::LinearPoint(lp) => lp.horizon,
            EnvSpec::PointMaze(pm) => pm.horizon,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            EnvSpec::LinearPoint(lp) => lp.state_dim(),
            EnvSpec::PointMaze(_) => 4,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            EnvSpec::LinearPoint(lp) => lp.action_dim(),
            EnvSpec::PointMaze(_) => 2,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            EnvSpec::LinearPoint(_) => "linear_point",
            EnvSpec::PointMaze(_) => "point_maze",
        }
    }

    /// Symmetric bound of the action box.
    pub fn action_bound(&self) -> f64 {
        match self {
            EnvSpec::LinearPoint(lp) => lp.action_bound,
            EnvSpec::PointMaze(pm) => pm.action_clip,
        }
    }

    /// The default linear task: a 2-D point mass steered straight by its actions.
    pub fn linear_point_default() -> Self {
        EnvSpec::LinearPoint(LinearPointSpec {
            horizon: 12,
            a: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            b: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            goal: vec![0.0, 0.0],
            q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            rw: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            noise_std: 0.0,
            start_low: vec![-2.0, -2.0],
            start_high: vec![2.0, 2.0],
            action_bound: 1.0,
            expert_gain: vec![vec![0.6, 0.0], vec![0.0, 0.6]],
            success_radius: 0.1,
        })
    }

    /// A U-shaped maze: start bottom-left, goal top-left, divider in between.
    pub fn point_maze_default() -> Self {
        EnvSpec::PointMaze(PointMazeSpec {
            horizon: 120,
            walls: vec![
                [0.0, 0.0, 3.0, 0.0],
                [3.0, 0.0, 3.0, 3.0],
                [3.0, 3.0, 0.0, 3.0],
                [0.0, 3.0, 0.0, 0.0],
                [0.0, 1.5, 2.0, 1.5],
            ],
            goal: [0.5, 2.25],
            goal_radius: 0.3,
            dt: 0.1,
            action_clip: 1.0,
            start: [0.5, 0.75],
            start_jitter: 0.05,
            waypoints: vec![[2.5, 0.75], [2.5, 2.25]],
            expert_kp: default_kp(),
            expert_kd: default_kd(),
        })
    }
}

pub fn env_reset(spec: &EnvSpec, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec {
        EnvSpec::LinearPoint(lp) => lp
            .start_low
            .iter()
            .zip(&lp.start_high)
            .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
            .collect(),
        EnvSpec::PointMaze(pm) => {
            let mut jitter = || {
                if pm.start_jitter > 0.0 {
                    rng.random_range(-pm.start_jitter..pm.start_jitter)
                } else {
                    0.0
                }
            };
            let x = pm.start[0] + jitter();
            let y = pm.start[1] + jitter();
            vec![x, y, 0.0, 0.0]
        }
    }
}

/// Advances the environment by one step. `t` is the index of this step within
/// the episode; `done` is raised at the goal (maze) or after the last step.
pub fn env_step<R: Rng + ?Sized>(
    spec: &EnvSpec,
    state: &[f64],
    action: &[f64],
    t: usize,
    rng: &mut R,
) -> Result<Transition> {
    check_len("environment state", spec.state_dim(), state.len())?;
    check_len("environment action", spec.action_dim(), action.len())?;
    if state.iter().chain(action).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite state or action passed to env_step".into()));
    }
    let last = t + 1 >= spec.horizon();
    match spec {
        EnvSpec::LinearPoint(lp) => {
            let reward = lp.reward(state, action);
            let mut next = lp.dynamics(state, action);
            if lp.noise_std > 0.0 {
                for v in &mut next {
                    let eta: f64 = rng.sample(StandardNormal);
                    *v += lp.noise_std * eta;
                }
            }
            Ok(Transition {
                next_state: next,
                reward,
                done: last,
            })
        }
        EnvSpec::PointMaze(pm) => {
            let next = pm.dynamics(state, action);
            let reached = pm.at_goal([next[0], next[1]]);
            Ok(Transition {
                next_state: next,
                reward: if reached { 1.0 } else { 0.0 },
                done: reached || last,
            })
        }
    }
}

/// Scripted proportional-derivative controller toward the goal. On the maze it
/// visits the configured way-points in order, so it keeps a cursor.
#[derive(Debug, Clone, Default)]
pub struct ExpertPolicy {
    next_waypoint: usize,
}

impl ExpertPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn act(&mut self, spec: &EnvSpec, state: &[f64]) -> Vec<f64> {
        match spec {
            EnvSpec::LinearPoint(lp) => {
                let err: Vec<f64> = state.iter().zip(&lp.goal).map(|(s, g)| s - g).collect();
                lp.expert_gain
                    .iter()
                    .map(|row| -row.iter().zip(&err).map(|(k, e)| k * e).sum::<f64>())
                    .collect()
            }
            EnvSpec::PointMaze(pm) => {
                let pos = [state[0], state[1]];
                while self.next_waypoint < pm.waypoints.len()
                    && dist(pos, pm.waypoints[self.next_waypoint]) < 0.3
                {
                    self.next_waypoint += 1;
                }
                let target = pm.waypoints.get(self.next_waypoint).copied().unwrap_or(pm.goal);
                (0..2)
                    .map(|d| {
                        (pm.expert_kp * (target[d] - pos[d]) - pm.expert_kd * state[2 + d])
                            .clamp(-pm.action_clip, pm.action_clip)
                    })
                    .collect()
            }
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn random_action<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> Vec<f64> {
    let b = spec.action_bound();
    (0..spec.action_dim()).map(|_| rng.random_range(-b..=b)).collect()
}

pub(crate) fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
