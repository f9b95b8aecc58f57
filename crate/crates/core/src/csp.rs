//! Counterfactual safety pairing: TTC-based safety labeling, longitudinal
//! candidate replanning, PDMS-based counterfactual selection, structured
//! negative analysis, and paired-record construction.

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::metrics::{self, progress_along, score_trajectory, SubScores, EvalCase, TTC_RISK};
use crate::scenario::{
    anchor_trajectory, follow_centerline, AccelStage, DirectionDecision, DrivingCommand, Scene,
    SpeedDecision, Trajectory, Waypoint, AgentKind, T_P, T_S,
};
use serde::{Deserialize, Serialize};

/// Per-stage acceleration grid for counterfactual replanning, before
/// speed-proportional scaling.
pub const ACCEL_GRID: [f64; 4] = [-3.0, -1.5, 0.0, 1.0];
/// Candidate count: the Cartesian product of the grid over two stages.
pub const CANDIDATE_COUNT: usize = ACCEL_GRID.len() * ACCEL_GRID.len();

/// Relative speed band treated as "maintain" when deriving meta-actions.
const SPEED_BAND: f64 = 0.1;
/// Net heading change (radians) that counts as a turn.
const TURN_THRESHOLD: f64 = 10.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelValue {
    Pos,
    Neg,
}

/// Binary safety label with the TTC value that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyLabel {
    #[serde(rename = "label")]
    pub value: LabelValue,
    pub ttc_min: f64,
}

impl SafetyLabel {
    pub fn is_pos(&self) -> bool {
        self.value == LabelValue::Pos
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Longitudinal,
    Lateral,
}

/// Level 1: declares the behavior unsafe and quantifies the deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskIdentification {
    pub unsafe_flag: bool,
    pub max_deviation: f64,
    pub mean_deviation: f64,
}

/// Level 2: decomposes the error into longitudinal/lateral components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureAttribution {
    pub longitudinal_error: f64,
    pub lateral_error: f64,
    pub primary_axis: Axis,
}

/// Level 3 entry: one alternative action and the PDMS it achieves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualEntry {
    pub meta_actions: (DrivingCommand, DrivingCommand),
    pub pdms: f64,
}

/// Level 4 entry: time-aligned correction in the target's local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionStep {
    pub t: f64,
    pub d_long: f64,
    pub d_lat: f64,
}

/// Four-level structured guidance attached to negative records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeAnalysisBlock {
    pub risk_identification: RiskIdentification,
    pub failure_attribution: FailureAttribution,
    pub counterfactual_analysis: Vec<CounterfactualEntry>,
    pub actionable_correction: Vec<CorrectionStep>,
}

/// Structured scene summary used in place of free text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub vehicles: usize,
    pub pedestrians: usize,
    pub cyclists: usize,
    pub ego_speed: f64,
    pub command: DrivingCommand,
}

/// Five-step structured reasoning record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotRecord {
    pub scene_description: SceneDescription,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub critical_object: Option<u32>,
    pub risk_estimate: SafetyLabel,
    pub counterfactual_reasoning: Vec<CounterfactualEntry>,
    pub meta_actions: (DrivingCommand, DrivingCommand),
}

/// One unit of paired supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CspRecord {
    pub scene: Scene,
    #[serde(flatten)]
    pub label: SafetyLabel,
    pub tau_pos: Trajectory,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau_neg: Option<Trajectory>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub analysis: Option<NegativeAnalysisBlock>,
    pub cot: CotRecord,
    /// Set when every replanned candidate scored zero, i.e. the selected
    /// counterfactual is itself unsafe.
    #[serde(default)]
    pub degenerate: bool,
}

impl CspRecord {
    /// EP reference progress: the arc length achieved by tau_pos.
    pub fn reference_progress(&self) -> f64 {
        let line = self.scene.map.polyline();
        progress_along(&anchor_trajectory(&self.tau_pos, self.scene.ego.position), &line)
    }

    pub fn eval_case(&self) -> EvalCase {
        EvalCase {
            scene: self.scene.clone(),
            reference: self.tau_pos.clone(),
            ep_reference: self.reference_progress(),
        }
    }
}

/// Label a scene by the minimum TTC of its observed execution over (0, T_P].
pub fn label_scene(scene: &Scene) -> SafetyLabel {
    let ttc = metrics::ttc_min(
        &scene.anchored_future(),
        scene.ego.footprint,
        &scene.agents,
        T_P,
    )
    .expect("scene invariant: observed future is non-empty");
    SafetyLabel {
        value: if ttc >= TTC_RISK {
            LabelValue::Pos
        } else {
            LabelValue::Neg
        },
        ttc_min: ttc,
    }
}

/// Speed-proportional scale applied to the acceleration grid.
pub fn accel_scale(v0: f64) -> f64 {
    (v0 / 10.0).clamp(0.3, 1.0)
}

/// Two-stage longitudinal replanning: the Cartesian product of the scaled
/// acceleration grid over stages [0, T_S) and [T_S, T_P].
pub fn generate_candidates(scene: &Scene, k: usize) -> Result<Vec<Trajectory>> {
    if k != CANDIDATE_COUNT {
        return Err(Error::InvalidConfig(format!(
            "candidate count {k} does not match the {}x{} acceleration grid",
            ACCEL_GRID.len(),
            ACCEL_GRID.len()
        )));
    }
    let scale = accel_scale(scene.ego.speed);
    let mut candidates = Vec::with_capacity(CANDIDATE_COUNT);
    for a1 in ACCEL_GRID {
        for a2 in ACCEL_GRID {
            let profile = [
                AccelStage {
                    end_time: T_S,
                    accel: a1 * scale,
                },
                AccelStage {
                    end_time: T_P,
                    accel: a2 * scale,
                },
            ];
            candidates.push(follow_centerline(&scene.map, &scene.ego, &profile, T_P)?);
        }
    }
    Ok(candidates)
}

/// Outcome of counterfactual selection over a candidate set.
#[derive(Debug, Clone)]
pub struct Selection {
    pub tau_pos: Trajectory,
    /// Winner's own arc-length progress; the scene's EP reference.
    pub reference_progress: f64,
    pub index: usize,
    /// True when every candidate scored zero.
    pub degenerate: bool,
    /// Selection-time PDMS per candidate (EP against the max progress).
    pub scores: Vec<f64>,
    pub sub_scores: Vec<SubScores>,
}

/// Score every candidate by PDMS — EP against the maximum candidate
/// progress — and select the argmax, ties broken by lowest index.
pub fn select_counterfactual(candidates: &[Trajectory], scene: &Scene) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidates to select from".into()));
    }
    let line = scene.map.polyline();
    let progresses: Vec<f64> = candidates
        .iter()
        .map(|c| progress_along(&anchor_trajectory(c, scene.ego.position), &line))
        .collect();
    let max_progress = progresses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sub_scores = Vec::with_capacity(candidates.len());
    let mut scores = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let sub = score_trajectory(candidate, scene, max_progress)?;
        scores.push(metrics::pdms(&sub));
        sub_scores.push(sub);
    }
    let mut best = 0usize;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(Selection {
        tau_pos: candidates[best].clone(),
        reference_progress: progresses[best],
        index: best,
        degenerate: scores[best] == 0.0,
        scores,
        sub_scores,
    })
}

/// Local travel directions of a trajectory at each waypoint, with fallback
/// to the nearest moving segment.
fn local_frames(traj: &Trajectory) -> Vec<Vec2> {
    let wps = &traj.waypoints;
    let n = wps.len();
    let mut dirs = vec![None; n];
    for i in 0..n {
        let seg = if i + 1 < n {
            wps[i + 1].pos() - wps[i].pos()
        } else {
            wps[i].pos() - wps[i - 1].pos()
        };
        dirs[i] = seg.normalized();
    }
    // Fill gaps from the nearest earlier direction, then later ones.
    let mut last = Vec2::new(1.0, 0.0);
    let mut filled: Vec<Vec2> = Vec::with_capacity(n);
    for d in &dirs {
        if let Some(v) = d {
            last = *v;
        }
        filled.push(last);
    }
    let mut next = *filled.last().unwrap();
    for i in (0..n).rev() {
        if dirs[i].is_some() {
            next = filled[i];
        } else if dirs[..=i].iter().all(|d| d.is_none()) {
            filled[i] = next;
        }
    }
    filled
}

/// Build the four-level analysis of `tau_neg` against `tau_pos`.
/// Deviations are decomposed per waypoint into longitudinal and lateral
/// components in tau_pos's local frame; the correction is the exact delta
/// that maps tau_neg back onto tau_pos.
pub fn build_negative_analysis(
    tau_neg: &Trajectory,
    tau_pos: &Trajectory,
    candidate_scores: &[CounterfactualEntry],
) -> Result<NegativeAnalysisBlock> {
    if tau_neg.len() != tau_pos.len() || tau_neg.is_empty() {
        return Err(Error::InvalidInput(format!(
            "trajectory length mismatch: {} vs {}",
            tau_neg.len(),
            tau_pos.len()
        )));
    }
    let frames = local_frames(tau_pos);
    let n = tau_pos.len() as f64;
    let mut max_dev = 0.0f64;
    let mut sum_dev = 0.0f64;
    let mut sum_long = 0.0f64;
    let mut sum_lat = 0.0f64;
    let mut corrections = Vec::with_capacity(tau_pos.len());
    for ((wn, wp), dir) in tau_neg
        .waypoints
        .iter()
        .zip(tau_pos.waypoints.iter())
        .zip(frames.iter())
    {
        let dev = wn.pos() - wp.pos();
        let long = dev.dot(*dir);
        let lat = dev.dot(dir.perp());
        max_dev = max_dev.max(dev.norm());
        sum_dev += dev.norm();
        sum_long += long.abs();
        sum_lat += lat.abs();
        corrections.push(CorrectionStep {
            t: wp.t,
            d_long: -long,
            d_lat: -lat,
        });
    }
    let longitudinal_error = sum_long / n;
    let lateral_error = sum_lat / n;
    Ok(NegativeAnalysisBlock {
        risk_identification: RiskIdentification {
            unsafe_flag: max_dev > 1e-9,
            max_deviation: max_dev,
            mean_deviation: sum_dev / n,
        },
        failure_attribution: FailureAttribution {
            longitudinal_error,
            lateral_error,
            primary_axis: if longitudinal_error >= lateral_error {
                Axis::Longitudinal
            } else {
                Axis::Lateral
            },
        },
        counterfactual_analysis: candidate_scores.to_vec(),
        actionable_correction: corrections,
    })
}

/// Apply an actionable correction to `tau_neg`, using `frame_source`
/// (normally tau_pos) to recover the local frames the correction was
/// expressed in.
pub fn apply_correction(
    tau_neg: &Trajectory,
    block: &NegativeAnalysisBlock,
    frame_source: &Trajectory,
) -> Result<Trajectory> {
    if block.actionable_correction.len() != tau_neg.len() {
        return Err(Error::InvalidInput("correction length mismatch".into()));
    }
    let frames = local_frames(frame_source);
    let waypoints = tau_neg
        .waypoints
        .iter()
        .zip(block.actionable_correction.iter())
        .zip(frames.iter())
        .map(|((w, c), dir)| {
            let p = w.pos() + *dir * c.d_long + dir.perp() * c.d_lat;
            Waypoint::new(p.x, p.y, w.t)
        })
        .collect();
    Ok(Trajectory::new(waypoints, tau_neg.rate_hz))
}

/// Path length of the trajectory between times `t0` and `t1` (waypoints
/// assumed to cover both).
fn window_distance(traj: &Trajectory, t0: f64, t1: f64) -> f64 {
    let mut dist = 0.0;
    for pair in traj.waypoints.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.t >= t0 - 1e-9 && b.t <= t1 + 1e-9 {
            dist += (b.pos() - a.pos()).norm();
        }
    }
    dist
}

fn window_heading(frames: &[Vec2], traj: &Trajectory, t: f64) -> f64 {
    let idx = traj
        .waypoints
        .iter()
        .position(|w| (w.t - t).abs() < 1e-9)
        .unwrap_or(0);
    frames[idx].angle()
}

fn speed_decision(mean_speed: f64, v_ref: f64) -> SpeedDecision {
    if v_ref < 1e-9 {
        return if mean_speed > 1e-9 {
            SpeedDecision::Accelerate
        } else {
            SpeedDecision::Maintain
        };
    }
    if mean_speed > v_ref * (1.0 + SPEED_BAND) {
        SpeedDecision::Accelerate
    } else if mean_speed < v_ref * (1.0 - SPEED_BAND) {
        SpeedDecision::Decelerate
    } else {
        SpeedDecision::Maintain
    }
}

/// Classify one window into a (speed, direction) decision.
fn window_decision(
    traj: &Trajectory,
    frames: &[Vec2],
    line: &crate::geom::Polyline,
    lane_width: f64,
    t0: f64,
    t1: f64,
    v_ref: f64,
) -> (DrivingCommand, f64) {
    let mean_speed = window_distance(traj, t0, t1) / (t1 - t0);
    let speed = speed_decision(mean_speed, v_ref);
    let h0 = window_heading(frames, traj, t0);
    let h1 = window_heading(frames, traj, t1);
    let net = crate::geom::wrap_angle(h1 - h0);
    let direction = if net > TURN_THRESHOLD {
        DirectionDecision::TurnLeft
    } else if net < -TURN_THRESHOLD {
        DirectionDecision::TurnRight
    } else {
        let off0 = line.project(traj.position_at(t0)).offset;
        let off1 = line.project(traj.position_at(t1)).offset;
        let shift = off1 - off0;
        if shift > lane_width * 0.5 {
            DirectionDecision::LaneChangeLeft
        } else if shift < -lane_width * 0.5 {
            DirectionDecision::LaneChangeRight
        } else {
            DirectionDecision::KeepLane
        }
    };
    (DrivingCommand::new(speed, direction), mean_speed)
}

/// Derive short-term (t in [0, T_S)) and long-term (t in [T_S, T_P])
/// meta-actions from a future trajectory. The short window compares mean
/// speed against `v0`; the long window against the short window's mean.
pub fn derive_meta_actions(
    traj: &Trajectory,
    v0: f64,
    map: &crate::scenario::SceneMap,
) -> (DrivingCommand, DrivingCommand) {
    // Futures are ego-frame: the ego sits at the origin at t=0.
    let anchored = anchor_trajectory(traj, Vec2::ZERO);
    let frames = local_frames(&anchored);
    let line = map.polyline();
    let (short, short_mean) =
        window_decision(&anchored, &frames, &line, map.lane_width, 0.0, T_S, v0);
    let (long, _) = window_decision(
        &anchored,
        &frames,
        &line,
        map.lane_width,
        T_S,
        T_P,
        short_mean,
    );
    (short, long)
}

/// Build the paired supervision record for one scene (Algorithm steps:
/// label, assign trajectories, construct reasoning, aggregate).
pub fn build_record(scene: &Scene) -> Result<CspRecord> {
    let label = label_scene(scene);
    let critical_object = critical_agent(scene);
    let scene_description = SceneDescription {
        vehicles: count_kind(scene, AgentKind::Vehicle),
        pedestrians: count_kind(scene, AgentKind::Pedestrian),
        cyclists: count_kind(scene, AgentKind::Cyclist),
        ego_speed: scene.ego.speed,
        command: scene.command,
    };
    if label.is_pos() {
        let tau_pos = scene.observed_future.clone();
        let meta_actions = derive_meta_actions(&tau_pos, scene.ego.speed, &scene.map);
        return Ok(CspRecord {
            scene: scene.clone(),
            label,
            tau_pos,
            tau_neg: None,
            analysis: None,
            cot: CotRecord {
                scene_description,
                critical_object,
                risk_estimate: label,
                counterfactual_reasoning: vec![],
                meta_actions,
            },
            degenerate: false,
        });
    }
    let tau_neg = scene.observed_future.clone();
    let candidates = generate_candidates(scene, CANDIDATE_COUNT)?;
    let selection = select_counterfactual(&candidates, scene)?;
    let entries: Vec<CounterfactualEntry> = candidates
        .iter()
        .zip(selection.scores.iter())
        .map(|(candidate, score)| CounterfactualEntry {
            meta_actions: derive_meta_actions(candidate, scene.ego.speed, &scene.map),
            pdms: *score,
        })
        .collect();
    let analysis = build_negative_analysis(&tau_neg, &selection.tau_pos, &entries)?;
    let meta_actions = derive_meta_actions(&selection.tau_pos, scene.ego.speed, &scene.map);
    Ok(CspRecord {
        scene: scene.clone(),
        label,
        tau_pos: selection.tau_pos,
        tau_neg: Some(tau_neg),
        analysis: Some(analysis),
        cot: CotRecord {
            scene_description,
            critical_object,
            risk_estimate: label,
            counterfactual_reasoning: entries,
            meta_actions,
        },
        degenerate: selection.degenerate,
    })
}

/// One record per scene, in input order.
pub fn build_dataset(scenes: &[Scene]) -> Result<Vec<CspRecord>> {
    scenes.iter().map(build_record).collect()
}

fn count_kind(scene: &Scene, kind: AgentKind) -> usize {
    scene.agents.iter().filter(|a| a.kind == kind).count()
}

/// Agent with the minimum TTC against the observed execution; ties broken
/// by lowest id; absent when the scene has no agents.
fn critical_agent(scene: &Scene) -> Option<u32> {
    let anchored = scene.anchored_future();
    let mut best: Option<(u32, f64)> = None;
    for agent in &scene.agents {
        let ttc = metrics::ttc_min(
            &anchored,
            scene.ego.footprint,
            std::slice::from_ref(agent),
            T_P,
        )
        .expect("observed future is non-empty");
        let better = match best {
            None => true,
            Some((bid, bttc)) => ttc < bttc - 1e-12 || (ttc <= bttc + 1e-12 && agent.id < bid),
        };
        if better {
            best = Some((agent.id, ttc));
        }
    }
    best.map(|(id, _)| id)
}
