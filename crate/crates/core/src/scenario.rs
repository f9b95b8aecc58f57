//! Driving-world data model and deterministic synthetic scene generation.
//!
//! The map frame is ego-anchored at scene time t=0: the ego starts at the
//! origin heading along +x. All scenes are pure functions of
//! `(template, seed)`.

use crate::error::{Error, Result};
use crate::geom::{Polygon, Polyline, Vec2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Supervision sampling rate.
pub const RATE_HZ: f64 = 2.0;
/// Sample spacing at [`RATE_HZ`].
pub const SAMPLE_DT: f64 = 0.5;
/// History horizon in seconds.
pub const T_H: f64 = 1.5;
/// Short-term planning horizon in seconds (meta-action window boundary).
pub const T_S: f64 = 1.0;
/// Prediction horizon in seconds.
pub const T_P: f64 = 4.0;
/// Waypoints in a future trajectory: t = 0.5, 1.0, ..., 4.0.
pub const FUTURE_STEPS: usize = 8;
/// Waypoints in a history trajectory: t = -1.0, -0.5, 0.0.
pub const HISTORY_STEPS: usize = 3;
/// Forward-Euler integration step for centerline replanning.
pub const EULER_DT: f64 = 0.1;

const UNIFORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64, t: f64) -> Self {
        Waypoint { x, y, t }
    }

    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Timestamped 2D waypoint sequence at a fixed rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
    pub rate_hz: f64,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Waypoint>, rate_hz: f64) -> Self {
        Trajectory { waypoints, rate_hz }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.waypoints.first().map(|w| w.t).unwrap_or(0.0)
    }

    pub fn end_time(&self) -> f64 {
        self.waypoints.last().map(|w| w.t).unwrap_or(0.0)
    }

    /// Check the stated invariants: finite, strictly increasing t, uniform dt.
    pub fn validate(&self) -> Result<()> {
        if self.rate_hz <= 0.0 {
            return Err(Error::InvalidInput("trajectory rate must be positive".into()));
        }
        let dt = 1.0 / self.rate_hz;
        for w in &self.waypoints {
            if !(w.x.is_finite() && w.y.is_finite() && w.t.is_finite()) {
                return Err(Error::InvalidInput("non-finite waypoint".into()));
            }
        }
        for pair in self.waypoints.windows(2) {
            let step = pair[1].t - pair[0].t;
            if step <= 0.0 {
                return Err(Error::InvalidInput("waypoint times must strictly increase".into()));
            }
            if (step - dt).abs() > UNIFORM_TOL {
                return Err(Error::InvalidInput(format!(
                    "non-uniform spacing: {step} vs expected {dt}"
                )));
            }
        }
        Ok(())
    }

    /// Linear interpolation of position at time `t`, clamped to the extent.
    pub fn position_at(&self, t: f64) -> Vec2 {
        let wps = &self.waypoints;
        if t <= wps[0].t {
            return wps[0].pos();
        }
        if t >= wps[wps.len() - 1].t {
            return wps[wps.len() - 1].pos();
        }
        let i = self.segment_index(t);
        let (a, b) = (&wps[i], &wps[i + 1]);
        let u = (t - a.t) / (b.t - a.t);
        a.pos() + (b.pos() - a.pos()) * u
    }

    /// Finite-difference velocity from the segment containing `t`.
    /// Before the start the first segment is used, past the end the last.
    pub fn velocity_at(&self, t: f64) -> Vec2 {
        let wps = &self.waypoints;
        if wps.len() < 2 {
            return Vec2::ZERO;
        }
        let i = if t <= wps[0].t {
            0
        } else if t >= wps[wps.len() - 1].t {
            wps.len() - 2
        } else {
            self.segment_index(t)
        };
        let (a, b) = (&wps[i], &wps[i + 1]);
        (b.pos() - a.pos()) * (1.0 / (b.t - a.t))
    }

    fn segment_index(&self, t: f64) -> usize {
        let wps = &self.waypoints;
        // Segment i covers [t_i, t_{i+1}).
        match wps.binary_search_by(|w| w.t.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(wps.len() - 2),
            Err(i) => i.saturating_sub(1).min(wps.len() - 2),
        }
    }
}

/// Axis dimensions of a vehicle/agent body, aligned to its heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

impl Footprint {
    pub fn new(length: f64, width: f64) -> Self {
        Footprint { length, width }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub footprint: Footprint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: u32,
    pub kind: AgentKind,
    pub footprint: Footprint,
    /// Scripted motion covering the whole episode window [-T_H, T_P];
    /// piecewise-constant velocity between waypoints.
    pub scripted_trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMap {
    pub centerline: Vec<Vec2>,
    pub lane_width: f64,
    pub drivable_area: Vec<Polygon>,
}

impl SceneMap {
    pub fn polyline(&self) -> Polyline {
        Polyline::new(self.centerline.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.centerline.len() < 2 {
            return Err(Error::InvalidInput("centerline needs >= 2 points".into()));
        }
        if self.drivable_area.is_empty() {
            return Err(Error::InvalidInput("drivable area is empty".into()));
        }
        for poly in &self.drivable_area {
            if !poly.is_simple() {
                return Err(Error::InvalidInput("drivable polygon self-intersects".into()));
            }
        }
        for p in &self.centerline {
            if !self.drivable_area.iter().any(|poly| poly.contains(*p)) {
                return Err(Error::InvalidInput(
                    "centerline leaves the drivable area".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedDecision {
    Maintain,
    Accelerate,
    Decelerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionDecision {
    KeepLane,
    TurnLeft,
    TurnRight,
    LaneChangeLeft,
    LaneChangeRight,
}

/// High-level (speed, direction) decision pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DrivingCommand {
    pub speed_decision: SpeedDecision,
    pub direction_decision: DirectionDecision,
}

impl DrivingCommand {
    pub fn new(speed: SpeedDecision, direction: DirectionDecision) -> Self {
        DrivingCommand {
            speed_decision: speed,
            direction_decision: direction,
        }
    }
}

/// Scenario template. Risk templates script at least one agent whose motion
/// can intersect the ego's constant-speed projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    FreeRoad,
    LeadBrake,
    Crossing,
    CutIn,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::FreeRoad,
        Template::LeadBrake,
        Template::Crossing,
        Template::CutIn,
    ];

    fn stream_id(self) -> u64 {
        match self {
            Template::FreeRoad => 1,
            Template::LeadBrake => 2,
            Template::Crossing => 3,
            Template::CutIn => 4,
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Template::FreeRoad => "free_road",
            Template::LeadBrake => "lead_brake",
            Template::Crossing => "crossing",
            Template::CutIn => "cut_in",
        };
        f.write_str(s)
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free_road" => Ok(Template::FreeRoad),
            "lead_brake" => Ok(Template::LeadBrake),
            "crossing" => Ok(Template::Crossing),
            "cut_in" => Ok(Template::CutIn),
            other => Err(Error::InvalidInput(format!("unknown template: {other}"))),
        }
    }
}

/// One unit of supervision: ego state plus scripted world and the observed
/// execution over the prediction horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub template: Template,
    pub ego: EgoState,
    pub ego_history: Trajectory,
    pub agents: Vec<Agent>,
    pub map: SceneMap,
    pub command: DrivingCommand,
    /// The "ground truth" execution over (0, T_P].
    pub observed_future: Trajectory,
}

impl Scene {
    /// Stable identifier used in traces and reports.
    pub fn id(&self) -> String {
        format!("{}:{}", self.template, self.seed)
    }

    /// The observed future with the t=0 ego pose prepended, so that safety
    /// metrics can evaluate the full [0, T_P] window.
    pub fn anchored_future(&self) -> Trajectory {
        anchor_trajectory(&self.observed_future, self.ego.position)
    }
}

/// Prepend the t=0 pose to a future trajectory that starts at t > 0.
pub fn anchor_trajectory(traj: &Trajectory, start: Vec2) -> Trajectory {
    if traj.is_empty() || traj.start_time() <= 0.0 {
        return traj.clone();
    }
    let mut waypoints = Vec::with_capacity(traj.len() + 1);
    waypoints.push(Waypoint::new(start.x, start.y, 0.0));
    waypoints.extend_from_slice(&traj.waypoints);
    Trajectory::new(waypoints, traj.rate_hz)
}

/// One stage of a piecewise acceleration profile: `accel` applies while
/// t < `end_time`. Beyond the last stage the acceleration is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelStage {
    pub end_time: f64,
    pub accel: f64,
}

fn accel_at(profile: &[AccelStage], t: f64) -> f64 {
    for stage in profile {
        if t < stage.end_time {
            return stage.accel;
        }
    }
    0.0
}

/// Resample a trajectory to `rate_hz` by linear interpolation in x and y
/// over t. Endpoints are preserved exactly; samples landing on an original
/// waypoint time reproduce that waypoint exactly.
pub fn resample_trajectory(traj: &Trajectory, rate_hz: f64) -> Result<Trajectory> {
    if traj.len() < 2 {
        return Err(Error::InvalidInput(
            "resample needs at least 2 waypoints".into(),
        ));
    }
    if rate_hz <= 0.0 {
        return Err(Error::InvalidInput("resample rate must be positive".into()));
    }
    let t0 = traj.start_time();
    let t1 = traj.end_time();
    let span = t1 - t0;
    let m = ((span * rate_hz).round() as usize).max(1);
    let mut waypoints = Vec::with_capacity(m + 1);
    for k in 0..=m {
        if k == 0 {
            waypoints.push(traj.waypoints[0]);
            continue;
        }
        if k == m {
            waypoints.push(*traj.waypoints.last().unwrap());
            continue;
        }
        let t = t0 + span * (k as f64) / (m as f64);
        // Snap to an original knot when the sample time coincides with one.
        if let Some(w) = traj
            .waypoints
            .iter()
            .find(|w| (w.t - t).abs() < 1e-12 * (1.0 + t.abs()))
        {
            waypoints.push(*w);
            continue;
        }
        let p = traj.position_at(t);
        waypoints.push(Waypoint::new(p.x, p.y, t));
    }
    Ok(Trajectory::new(waypoints, rate_hz))
}

/// Replan along the lane centerline with a piecewise longitudinal
/// acceleration profile. Arc length integrates s' = v by forward Euler at
/// [`EULER_DT`] with the speed clamped at zero, then samples at 2 Hz.
pub fn follow_centerline(
    map: &SceneMap,
    start: &EgoState,
    profile: &[AccelStage],
    horizon_s: f64,
) -> Result<Trajectory> {
    if horizon_s <= 0.0 {
        return Err(Error::InvalidInput("horizon must be positive".into()));
    }
    let line = map.polyline();
    let proj = line.project(start.position);
    if proj.offset.abs() > map.lane_width * 0.5 {
        return Err(Error::InvalidInput(format!(
            "start is {:.2} m off the centerline (max {:.2})",
            proj.offset.abs(),
            map.lane_width * 0.5
        )));
    }
    let steps = (horizon_s / EULER_DT).round() as usize;
    let sample_every = (SAMPLE_DT / EULER_DT).round() as usize;
    let mut v = start.speed;
    let mut s = 0.0;
    let mut waypoints = Vec::with_capacity(steps / sample_every);
    for k in 0..steps {
        let t = k as f64 * EULER_DT;
        let a = accel_at(profile, t);
        s += v * EULER_DT;
        v = (v + a * EULER_DT).max(0.0);
        if (k + 1) % sample_every == 0 {
            let t_out = ((k + 1) / sample_every) as f64 * SAMPLE_DT;
            let p = line.point_at(proj.arc_len + s);
            waypoints.push(Waypoint::new(p.x, p.y, t_out));
        }
    }
    Ok(Trajectory::new(waypoints, RATE_HZ))
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const EGO_FOOTPRINT: Footprint = Footprint {
    length: 4.5,
    width: 2.0,
};
const VEHICLE_FOOTPRINT: Footprint = Footprint {
    length: 4.5,
    width: 2.0,
};
const PEDESTRIAN_FOOTPRINT: Footprint = Footprint {
    length: 0.6,
    width: 0.6,
};
const LANE_WIDTH: f64 = 3.5;

fn straight_map(lanes_left: usize) -> SceneMap {
    let centerline: Vec<Vec2> = (0..=36).map(|i| Vec2::new(-30.0 + 5.0 * i as f64, 0.0)).collect();
    let y_max = LANE_WIDTH * (0.5 + lanes_left as f64);
    SceneMap {
        centerline,
        lane_width: LANE_WIDTH,
        drivable_area: vec![Polygon::rect(-30.0, -LANE_WIDTH * 0.5, 150.0, y_max)],
    }
}

fn constant_speed_history(speed: f64) -> Trajectory {
    let waypoints = (0..HISTORY_STEPS)
        .map(|i| {
            let t = -((HISTORY_STEPS - 1 - i) as f64) * SAMPLE_DT;
            Waypoint::new(speed * t, 0.0, t)
        })
        .collect();
    Trajectory::new(waypoints, RATE_HZ)
}

/// Sample a scripted longitudinal profile (position closed-form) at 2 Hz
/// over the episode window [-T_H, T_P].
fn script_agent<F: Fn(f64) -> Vec2>(pos: F) -> Trajectory {
    let n = ((T_H + T_P) / SAMPLE_DT).round() as usize;
    let waypoints = (0..=n)
        .map(|j| {
            let t = -T_H + j as f64 * SAMPLE_DT;
            let p = pos(t);
            Waypoint::new(p.x, p.y, t)
        })
        .collect();
    Trajectory::new(waypoints, RATE_HZ)
}

/// Longitudinal position of a vehicle driving at `v0` that brakes at
/// `t_brake` with constant deceleration `a` (negative) until stopped.
fn braking_position(x0: f64, v0: f64, t_brake: f64, a: f64, t: f64) -> f64 {
    if t <= t_brake {
        return x0 + v0 * t;
    }
    let t_stop = t_brake + (-v0 / a); // a < 0
    let dt = (t.min(t_stop)) - t_brake;
    let x_at_stop = x0 + v0 * t_brake + v0 * dt + 0.5 * a * dt * dt;
    x_at_stop
}

/// Generate a deterministic synthetic scene. Identical `(template, seed)`
/// pairs yield bit-identical scenes.
pub fn generate_scene(template: Template, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, template.stream_id()));
    match template {
        Template::FreeRoad => {
            let v0 = rng.gen_range(8.0..14.0);
            build_scene(template, seed, v0, straight_map(0), vec![])
        }
        Template::LeadBrake => {
            let v0 = rng.gen_range(9.0..13.0);
            let gap = rng.gen_range(16.0..26.0);
            let v_lead = v0 * rng.gen_range(0.9..1.0);
            let t_brake = rng.gen_range(0.0..0.8);
            let a_brake = -rng.gen_range(3.5..6.0);
            let lead = Agent {
                id: 1,
                kind: AgentKind::Vehicle,
                footprint: VEHICLE_FOOTPRINT,
                scripted_trajectory: script_agent(|t| {
                    Vec2::new(braking_position(gap, v_lead, t_brake, a_brake, t), 0.0)
                }),
            };
            build_scene(template, seed, v0, straight_map(0), vec![lead])
        }
        Template::Crossing => {
            let v0 = rng.gen_range(8.0..12.0);
            let x_cross = rng.gen_range(18.0..32.0);
            let is_vehicle = rng.gen_bool(0.7);
            let (kind, footprint, v_agent) = if is_vehicle {
                (AgentKind::Vehicle, VEHICLE_FOOTPRINT, rng.gen_range(5.0..9.0))
            } else {
                (AgentKind::Pedestrian, PEDESTRIAN_FOOTPRINT, 1.5)
            };
            let jitter = rng.gen_range(-0.5..0.5);
            let from_left = rng.gen_bool(0.5);
            let t_cross = x_cross / v0 + jitter;
            let side = if from_left { 1.0 } else { -1.0 };
            let agent = Agent {
                id: 1,
                kind,
                footprint,
                scripted_trajectory: script_agent(|t| {
                    Vec2::new(x_cross, side * v_agent * (t_cross - t))
                }),
            };
            build_scene(template, seed, v0, straight_map(0), vec![agent])
        }
        Template::CutIn => {
            let v0 = rng.gen_range(9.0..13.0);
            let x0 = rng.gen_range(6.0..14.0);
            let v_agent = v0 * rng.gen_range(0.75..0.95);
            let t_start = rng.gen_range(0.3..1.2);
            let t_ramp = 1.5;
            let agent = Agent {
                id: 1,
                kind: AgentKind::Vehicle,
                footprint: VEHICLE_FOOTPRINT,
                scripted_trajectory: script_agent(|t| {
                    let frac = ((t - t_start) / t_ramp).clamp(0.0, 1.0);
                    Vec2::new(x0 + v_agent * t, LANE_WIDTH * (1.0 - frac))
                }),
            };
            build_scene(template, seed, v0, straight_map(1), vec![agent])
        }
    }
}

fn build_scene(
    template: Template,
    seed: u64,
    v0: f64,
    map: SceneMap,
    agents: Vec<Agent>,
) -> Scene {
    let ego = EgoState {
        position: Vec2::ZERO,
        heading: 0.0,
        speed: v0,
        footprint: EGO_FOOTPRINT,
    };
    let observed_future = follow_centerline(&map, &ego, &[], T_P)
        .expect("ego starts on the centerline by construction");
    Scene {
        seed,
        template,
        ego_history: constant_speed_history(v0),
        ego,
        agents,
        map,
        command: DrivingCommand::new(SpeedDecision::Maintain, DirectionDecision::KeepLane),
        observed_future,
    }
}
