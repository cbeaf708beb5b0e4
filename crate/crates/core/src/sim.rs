//! Kinematic differential-drive simulation of the plan, follow 10 %, replan
//! loop in point-obstacle worlds.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{read_cloud_csv, OccupancyGrid, SensorGeometry};
use crate::planner::{plan_step, to_robot_frame, to_world_frame, PlanContext, PlanResult, PlanStatus, PolicySet, Pose};
use crate::point::Point2;
use crate::spline::{CostWeights, SplineSettings};

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffDriveParams {
    pub wheelbase_m: f64,
    pub wheel_radius_m: f64,
}

impl Default for DiffDriveParams {
    fn default() -> Self {
        Self {
            wheelbase_m: 0.15,
            wheel_radius_m: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.heading)
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

impl From<Pose> for RobotState {
    fn from(p: Pose) -> Self {
        Self::new(p.x, p.y, p.heading)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Command {
    /// Forward speed, m/s.
    pub v: f64,
    /// Yaw rate, rad/s.
    pub omega: f64,
}

impl Command {
    /// Body twist from left/right wheel angular speeds (rad/s).
    pub fn from_wheel_speeds(left: f64, right: f64, params: &DiffDriveParams) -> Self {
        let r = params.wheel_radius_m;
        Self {
            v: r * (left + right) / 2.0,
            omega: r * (right - left) / params.wheelbase_m,
        }
    }
}

/// Forward-Euler unicycle step.
pub fn step_dynamics(state: RobotState, cmd: Command, dt: f64) -> RobotState {
    debug_assert!(dt > 0.0);
    let (s, c) = state.heading.sin_cos();
    RobotState::new(
        state.x + cmd.v * c * dt,
        state.y + cmd.v * s * dt,
        state.heading + cmd.omega * dt,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub omega_max: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 2.0,
            ki: 0.0,
            kd: 0.1,
            omega_max: 2.5,
        }
    }
}

/// Heading PID toward a waypoint. The integrator holds while the output is
/// saturated.
#[derive(Debug, Clone, PartialEq)]
pub struct PidSteer {
    gains: PidGains,
    integral: f64,
    prev_error: Option<f64>,
}

impl PidSteer {
    pub fn new(gains: PidGains) -> Self {
        Self {
            gains,
            integral: 0.0,
            prev_error: None,
        }
    }

    pub fn integral(&self) -> f64 {
        self.integral
    }

    pub fn steer(&mut self, state: &RobotState, waypoint: Point2, dt: f64) -> f64 {
        let g = self.gains;
        let bearing = (waypoint - state.position()).bearing();
        let e = wrap_angle(bearing - state.heading);
        let de = self.prev_error.map_or(0.0, |p| wrap_angle(e - p) / dt);
        self.prev_error = Some(e);
        let integral = self.integral + e * dt;
        let raw = g.kp * e + g.ki * integral + g.kd * de;
        if raw.abs() <= g.omega_max {
            self.integral = integral;
            raw
        } else {
            raw.clamp(-g.omega_max, g.omega_max)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldScenario {
    pub obstacle_points: Vec<Point2>,
    pub start: Pose,
    pub target: Point2,
    pub arrival_radius: f64,
}

impl WorldScenario {
    pub fn validate(&self) -> Result<()> {
        if self.start.position().distance(self.target) <= self.arrival_radius {
            return Err(Error::Config("start lies inside the arrival radius".into()));
        }
        if self.obstacle_points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::Config("non-finite obstacle point".into()));
        }
        Ok(())
    }

    /// Header block of `# key: values` lines followed by `x_m,y_m` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# start: {},{},{}", self.start.x, self.start.y, self.start.heading)?;
        writeln!(out, "# target: {},{}", self.target.x, self.target.y)?;
        writeln!(out, "# arrival_radius: {}", self.arrival_radius)?;
        writeln!(out, "x_m,y_m")?;
        for p in &self.obstacle_points {
            writeln!(out, "{},{}", p.x, p.y)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, defaults: &ScenarioParams) -> Result<Self> {
        let mut start = defaults.start;
        let mut target = defaults.target;
        let mut arrival_radius = defaults.arrival_radius;
        let mut body = String::new();
        for line in input.lines() {
            let line = line?;
            let trimmed = line.trim();
            if let Some(rest) = trimmed.strip_prefix('#') {
                let Some((key, value)) = rest.split_once(':') else {
                    continue;
                };
                let nums: Vec<f64> = value
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Config(format!("scenario header `{trimmed}`: {e}")))?;
                match (key.trim(), nums.as_slice()) {
                    ("start", [x, y, h]) => start = Pose::new(*x, *y, *h),
                    ("start", [x, y]) => start = Pose::new(*x, *y, 0.0),
                    ("target", [x, y]) => target = Point2::new(*x, *y),
                    ("arrival_radius", [r]) => arrival_radius = *r,
                    _ => return Err(Error::Config(format!("unrecognized scenario header `{trimmed}`"))),
                }
            } else {
                body.push_str(&line);
                body.push('\n');
            }
        }
        let scenario = Self {
            obstacle_points: read_cloud_csv(body.as_bytes())?,
            start,
            target,
            arrival_radius,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    RandomField,
    Wall,
    CustomCsv,
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_field" | "random-field" => Ok(Self::RandomField),
            "wall" => Ok(Self::Wall),
            "custom_csv" | "custom-csv" | "csv" => Ok(Self::CustomCsv),
            other => Err(Error::Config(format!("unknown scenario kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    pub start: Pose,
    pub target: Point2,
    pub arrival_radius: f64,
    /// Lateral half-extent is `corridor_width / 2` about the start-goal line.
    pub corridor_width: f64,
    pub obstacle_count: usize,
    pub obstacle_side: f64,
    pub point_spacing: f64,
    /// Obstacle centers keep at least this distance from start and goal.
    pub clear_radius: f64,
    /// Minimum distance between obstacle centers.
    pub min_separation: f64,
    pub max_attempts: usize,
    pub wall_length: f64,
    /// Wall position along the start-goal line, from the start.
    pub wall_distance: f64,
    /// Lateral offset of the wall center from the start-goal line.
    pub wall_offset: f64,
    pub csv_path: Option<PathBuf>,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            start: Pose::default(),
            target: Point2::new(15.0, 0.0),
            arrival_radius: 3.0,
            corridor_width: 10.0,
            obstacle_count: 12,
            obstacle_side: 0.4,
            point_spacing: 0.05,
            clear_radius: 1.5,
            min_separation: 1.5,
            max_attempts: 10_000,
            wall_length: 1.5,
            wall_distance: 6.0,
            wall_offset: 0.0,
            csv_path: None,
        }
    }
}

fn segment_points(a: Point2, b: Point2, spacing: f64) -> Vec<Point2> {
    let len = a.distance(b);
    if len == 0.0 {
        return Vec::new();
    }
    let steps = (len / spacing).round().max(1.0) as usize;
    (0..=steps).map(|i| a + (b - a) * (i as f64 / steps as f64)).collect()
}

/// Boundary points of an axis-aligned square, each corner once.
fn square_points(center: Point2, side: f64, spacing: f64) -> Vec<Point2> {
    let h = side / 2.0;
    let corners = [
        center + Point2::new(-h, -h),
        center + Point2::new(h, -h),
        center + Point2::new(h, h),
        center + Point2::new(-h, h),
    ];
    let mut pts = Vec::new();
    for k in 0..4 {
        let seg = segment_points(corners[k], corners[(k + 1) % 4], spacing);
        pts.extend_from_slice(&seg[..seg.len().saturating_sub(1)]);
    }
    pts
}

pub fn make_scenario(kind: &ScenarioKind, seed: u64, params: &ScenarioParams) -> Result<WorldScenario> {
    let start = params.start;
    let goal = params.target;
    let axis = goal - start.position();
    let length = axis.norm();
    if length == 0.0 {
        return Err(Error::Config("start and target coincide".into()));
    }
    let u = axis * (1.0 / length);
    let v = Point2::new(-u.y, u.x);
    let obstacle_points = match kind {
        ScenarioKind::RandomField => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut centers: Vec<Point2> = Vec::with_capacity(params.obstacle_count);
            let half_w = params.corridor_width / 2.0;
            for index in 0..params.obstacle_count {
                let mut placed = false;
                for _ in 0..params.max_attempts {
                    let s = rng.gen_range(0.0..length);
                    let w = if half_w > 0.0 { rng.gen_range(-half_w..half_w) } else { 0.0 };
                    let c = start.position() + u * s + v * w;
                    let clear = c.distance(start.position()) >= params.clear_radius
                        && c.distance(goal) >= params.clear_radius
                        && centers.iter().all(|o| o.distance(c) >= params.min_separation);
                    if clear {
                        centers.push(c);
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    return Err(Error::Placement {
                        index,
                        attempts: params.max_attempts,
                    });
                }
            }
            centers
                .iter()
                .flat_map(|&c| square_points(c, params.obstacle_side, params.point_spacing))
                .collect()
        }
        ScenarioKind::Wall => {
            if params.wall_length <= 0.0 {
                Vec::new()
            } else {
                let center = start.position() + u * params.wall_distance + v * params.wall_offset;
                let half = v * (params.wall_length / 2.0);
                segment_points(center - half, center + half, params.point_spacing)
            }
        }
        ScenarioKind::CustomCsv => {
            let path = params
                .csv_path
                .as_ref()
                .ok_or_else(|| Error::Config("custom_csv scenario needs csv_path".into()))?;
            return load_scenario(path, params);
        }
    };
    let scenario = WorldScenario {
        obstacle_points,
        start,
        target: goal,
        arrival_radius: params.arrival_radius,
    };
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: &Path, defaults: &ScenarioParams) -> Result<WorldScenario> {
    let file = std::fs::File::open(path)?;
    WorldScenario::read_csv(std::io::BufReader::new(file), defaults)
}

/// Obstacle points in the robot frame that the sector sensor returns.
pub fn sense(scenario: &WorldScenario, pose: &Pose, geometry: &SensorGeometry) -> Vec<Point2> {
    let half = geometry.half_fov_rad();
    scenario
        .obstacle_points
        .iter()
        .map(|&p| to_robot_frame(p, pose))
        .filter(|p| p.norm() <= geometry.range_m && p.bearing().abs() <= half)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub speed: f64,
    pub gains: PidGains,
    /// Arc-length distance of the steering waypoint ahead of the projection.
    pub lookahead_m: f64,
    /// Fraction of the current path followed before replanning.
    pub replan_fraction: f64,
    pub clearance_m: f64,
    pub max_steps: usize,
    pub robot: DiffDriveParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            speed: 0.3,
            gains: PidGains::default(),
            lookahead_m: 0.15,
            replan_fraction: 0.1,
            clearance_m: 0.05,
            max_steps: 4_000,
            robot: DiffDriveParams::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.speed >= 0.0) {
            return Err(Error::Config("dt must be positive and speed non-negative".into()));
        }
        if !(self.replan_fraction > 0.0 && self.replan_fraction <= 1.0) {
            return Err(Error::Config("replan_fraction must be in (0, 1]".into()));
        }
        if !(self.lookahead_m > 0.0) || !(self.clearance_m >= 0.0) {
            return Err(Error::Config("lookahead must be positive, clearance non-negative".into()));
        }
        Ok(())
    }
}

/// Planning inputs that stay fixed over an episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeSetup<'a> {
    pub policies: &'a PolicySet,
    pub geometry: SensorGeometry,
    pub weights: CostWeights,
    pub settings: SplineSettings,
    pub sim: SimConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub pose: Pose,
    pub v: f64,
    pub omega: f64,
    pub replan: bool,
}

#[derive(Debug, Clone)]
pub struct ReplanEvent {
    pub step: usize,
    pub pose: Pose,
    /// Sensed points in the world frame.
    pub sensed_world: Vec<Point2>,
    pub plan: PlanResult,
    /// The planned spline in the world frame.
    pub world_path: Vec<Point2>,
    pub path_length: f64,
    /// Arc length covered along the previous path when this replan fired.
    pub progress_on_previous: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Reached,
    Collision,
    AllBlocked,
    StepBudget,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub trajectory: Vec<TrajectorySample>,
    pub replan_events: Vec<ReplanEvent>,
    pub reached: bool,
    pub collided: bool,
    pub steps: usize,
    pub termination: Termination,
}

impl EpisodeResult {
    pub fn fallback_count(&self) -> usize {
        self.replan_events.iter().filter(|e| e.plan.fallback_used).count()
    }

    pub fn driven_length(&self) -> f64 {
        self.trajectory
            .windows(2)
            .map(|w| w[0].pose.position().distance(w[1].pose.position()))
            .sum()
    }

    pub fn write_log_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,y,heading,v,omega,replan_flag")?;
        for s in &self.trajectory {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.t, s.pose.x, s.pose.y, s.pose.heading, s.v, s.omega, s.replan as u8
            )?;
        }
        Ok(())
    }
}

/// True iff `p` is within `clearance` of any obstacle point.
pub fn in_collision(p: Point2, obstacles: &[Point2], clearance: f64) -> bool {
    obstacles.iter().any(|o| o.distance(p) <= clearance)
}

struct Tracked {
    points: Vec<Point2>,
    /// Cumulative arc length at each point.
    arc: Vec<f64>,
}

impl Tracked {
    fn new(points: Vec<Point2>) -> Self {
        let mut arc = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        arc.push(0.0);
        for w in points.windows(2) {
            acc += w[0].distance(w[1]);
            arc.push(acc);
        }
        Self { points, arc }
    }

    fn length(&self) -> f64 {
        *self.arc.last().unwrap_or(&0.0)
    }

    /// Arc length of the closest point on the polyline.
    fn project(&self, p: Point2) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (i, w) in self.points.windows(2).enumerate() {
            let d = w[1] - w[0];
            let len2 = d.dot(d);
            let s = if len2 > 0.0 { ((p - w[0]).dot(d) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let q = w[0] + d * s;
            let dist = q.distance(p);
            if dist < best.0 {
                best = (dist, self.arc[i] + s * (self.arc[i + 1] - self.arc[i]));
            }
        }
        best.1
    }

    /// Point at arc length `s`, extrapolating along the last segment.
    fn point_at(&self, s: f64) -> Point2 {
        let n = self.points.len();
        if s >= self.length() {
            let (a, b) = (self.points[n - 2], self.points[n - 1]);
            let seg = b - a;
            let len = seg.norm();
            return if len > 0.0 { b + seg * ((s - self.length()) / len) } else { b };
        }
        let i = self.arc.partition_point(|&a| a <= s).clamp(1, n - 1);
        let (a0, a1) = (self.arc[i - 1], self.arc[i]);
        let f = if a1 > a0 { (s - a0) / (a1 - a0) } else { 0.0 };
        self.points[i - 1] + (self.points[i] - self.points[i - 1]) * f
    }
}

/// Run the sense, plan, follow-a-fraction loop until the robot arrives,
/// collides, finds every candidate path blocked, or exhausts its step budget.
pub fn run_episode(scenario: &WorldScenario, setup: &EpisodeSetup<'_>) -> Result<EpisodeResult> {
    scenario.validate()?;
    setup.sim.validate()?;
    let cfg = &setup.sim;
    let ctx = PlanContext {
        policies: setup.policies,
        weights: &setup.weights,
        geometry: &setup.geometry,
        settings: setup.settings,
    };
    let mut state = RobotState::from(scenario.start);
    let mut pid = PidSteer::new(cfg.gains);
    let mut trajectory = vec![TrajectorySample {
        t: 0.0,
        pose: state.pose(),
        v: 0.0,
        omega: 0.0,
        replan: false,
    }];
    let mut events: Vec<ReplanEvent> = Vec::new();
    let mut tracked: Option<Tracked> = None;
    let mut progress = 0.0;
    let mut steps = 0usize;

    let termination = loop {
        if in_collision(state.position(), &scenario.obstacle_points, cfg.clearance_m) {
            break Termination::Collision;
        }
        if state.position().distance(scenario.target) < scenario.arrival_radius {
            break Termination::Reached;
        }
        if steps >= cfg.max_steps {
            break Termination::StepBudget;
        }

        let due = match &tracked {
            None => true,
            Some(t) => progress >= cfg.replan_fraction * t.length(),
        };
        if due {
            let pose = state.pose();
            let cloud = sense(scenario, &pose, &setup.geometry);
            let grid = OccupancyGrid::from_cloud(&cloud, &setup.geometry);
            let mut plan = plan_step(&grid, to_robot_frame(scenario.target, &pose), &ctx)?;
            plan.frame.final_target_world = Some(scenario.target);
            let world_path: Vec<Point2> = plan
                .path
                .samples()
                .iter()
                .map(|&(_, p)| to_world_frame(p, &pose))
                .collect();
            let path = Tracked::new(world_path.clone());
            let blocked = plan.status == PlanStatus::AllBlocked;
            events.push(ReplanEvent {
                step: steps,
                pose,
                sensed_world: cloud.iter().map(|&p| to_world_frame(p, &pose)).collect(),
                world_path,
                path_length: path.length(),
                progress_on_previous: tracked.as_ref().map(|_| progress),
                plan,
            });
            if let Some(last) = trajectory.last_mut() {
                last.replan = true;
            }
            if blocked {
                break Termination::AllBlocked;
            }
            tracked = Some(path);
        }

        let path = tracked.as_ref().expect("a path is planned before following");
        let s = path.project(state.position());
        let waypoint = path.point_at(s + cfg.lookahead_m);
        let omega = pid.steer(&state, waypoint, cfg.dt);
        let cmd = Command { v: cfg.speed, omega };
        state = step_dynamics(state, cmd, cfg.dt);
        steps += 1;
        trajectory.push(TrajectorySample {
            t: steps as f64 * cfg.dt,
            pose: state.pose(),
            v: cmd.v,
            omega: cmd.omega,
            replan: false,
        });
        progress = path.project(state.position());
    };

    Ok(EpisodeResult {
        trajectory,
        replan_events: events,
        reached: termination == Termination::Reached,
        collided: termination == Termination::Collision,
        steps,
        termination,
    })
}
