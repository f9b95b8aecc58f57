//! Trajectory-quality and safety metrics: minimum time-to-collision, the
//! five PDMS sub-scores (NC, DAC, EP, TTC, C), PDMS aggregation,
//! displacement errors, and dataset-level evaluation.

use crate::error::{Error, Result};
use crate::geom::{OrientedRect, Polyline, Vec2};
use crate::scenario::{anchor_trajectory, resample_trajectory, Agent, Footprint, Scene, Trajectory, T_P};
use serde::{Deserialize, Serialize};

/// TTC threshold separating safe from risky interactions, shared between
/// scene labeling and the TTC sub-score.
pub const TTC_RISK: f64 = 2.0;
/// Cap returned when no projected overlap exists.
pub const TTC_CAP: f64 = 10.0;
/// Check-time grid for TTC evaluation.
pub const TTC_CHECK_DT: f64 = 0.1;
/// Forward-projection grid for TTC evaluation.
pub const TTC_SCAN_DT: f64 = 0.05;
/// Collision-check rate for NC and DAC.
pub const COLLISION_RATE_HZ: f64 = 10.0;

/// Comfort bounds: longitudinal/lateral acceleration and jerk.
pub const COMFORT_A_LONG_MAX: f64 = 4.0;
pub const COMFORT_A_LAT_MAX: f64 = 4.0;
pub const COMFORT_JERK_MAX: f64 = 8.0;

/// Below this speed the ego counts as stationary for the at-fault rule.
const STATIONARY_SPEED: f64 = 1e-3;

/// The five PDMS sub-scores. NC, DAC, TTC and C are binary; EP is in [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubScores {
    pub nc: f64,
    pub dac: f64,
    pub ep: f64,
    pub ttc: f64,
    pub comfort: f64,
}

impl SubScores {
    pub fn validate(&self) -> Result<()> {
        let binary = |v: f64| v == 0.0 || v == 1.0;
        if !(binary(self.nc) && binary(self.dac) && binary(self.ttc) && binary(self.comfort)) {
            return Err(Error::InvalidInput(
                "nc/dac/ttc/comfort must be 0 or 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ep) {
            return Err(Error::InvalidInput("ep must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Aggregate metrics over a dataset of (prediction, reference) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_pdms: f64,
    pub mean_nc: f64,
    pub mean_dac: f64,
    pub mean_ep: f64,
    pub mean_ttc: f64,
    pub mean_comfort: f64,
    pub l2_at_1s: f64,
    pub l2_at_4s: f64,
    pub fde: f64,
    pub collision_rate: f64,
    pub sample_count: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "pdms,nc,dac,ep,ttc,comfort,l2_1s,l2_4s,fde,coll_rate,n";

    /// Fixed-order CSV row matching [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.mean_pdms,
            self.mean_nc,
            self.mean_dac,
            self.mean_ep,
            self.mean_ttc,
            self.mean_comfort,
            self.l2_at_1s,
            self.l2_at_4s,
            self.fde,
            self.collision_rate,
            self.sample_count
        )
    }
}

/// One evaluation unit: the scene, the reference trajectory the prediction
/// is compared against, and the progress reference for EP.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub scene: Scene,
    pub reference: Trajectory,
    pub ep_reference: f64,
}

/// Velocity-direction heading with fallback to the nearest moving segment.
fn heading_at(traj: &Trajectory, t: f64) -> f64 {
    let v = traj.velocity_at(t);
    if let Some(dir) = v.normalized() {
        return dir.angle();
    }
    let wps = &traj.waypoints;
    if wps.len() < 2 {
        return 0.0;
    }
    let at = wps
        .iter()
        .position(|w| w.t > t)
        .unwrap_or(wps.len())
        .saturating_sub(1)
        .min(wps.len() - 2);
    // Nearest earlier moving segment first, then nearest later one.
    for i in (0..=at).rev() {
        if let Some(dir) = (wps[i + 1].pos() - wps[i].pos()).normalized() {
            return dir.angle();
        }
    }
    for i in at + 1..wps.len() - 1 {
        if let Some(dir) = (wps[i + 1].pos() - wps[i].pos()).normalized() {
            return dir.angle();
        }
    }
    0.0
}

fn body_rect(traj: &Trajectory, footprint: Footprint, t: f64) -> OrientedRect {
    OrientedRect::new(
        traj.position_at(t),
        footprint.length,
        footprint.width,
        heading_at(traj, t),
    )
}

/// Minimum time-to-collision between the ego and any agent over
/// `[0, horizon_s]`, under constant-velocity forward projection.
///
/// For each check time on a [`TTC_CHECK_DT`] grid, both bodies are
/// projected forward at their instantaneous (finite-difference) velocities
/// and the projection horizon is scanned on a [`TTC_SCAN_DT`] grid up to
/// [`TTC_CAP`] for the first oriented-footprint overlap. Returns the cap
/// when no projected overlap exists.
pub fn ttc_min(
    ego_traj: &Trajectory,
    ego_footprint: Footprint,
    agents: &[Agent],
    horizon_s: f64,
) -> Result<f64> {
    if ego_traj.is_empty() {
        return Err(Error::InvalidInput("ttc_min on empty trajectory".into()));
    }
    if agents.is_empty() {
        return Ok(TTC_CAP);
    }
    let checks = (horizon_s / TTC_CHECK_DT).round() as usize;
    let scans = (TTC_CAP / TTC_SCAN_DT).round() as usize;
    let t_lo = ego_traj.start_time();
    let t_hi = ego_traj.end_time();
    let mut best = TTC_CAP;
    for k in 0..=checks {
        let tau = k as f64 * TTC_CHECK_DT;
        if tau < t_lo - 1e-9 || tau > t_hi + 1e-9 {
            continue;
        }
        let ego_pos = ego_traj.position_at(tau);
        let ego_vel = ego_traj.velocity_at(tau);
        let ego_heading = heading_at(ego_traj, tau);
        for agent in agents {
            let a_pos = agent.scripted_trajectory.position_at(tau);
            let a_vel = agent.scripted_trajectory.velocity_at(tau);
            let a_heading = heading_at(&agent.scripted_trajectory, tau);
            // Reachability cull: the bodies cannot meet before `best` if
            // their separation exceeds the closing budget.
            let sep = (a_pos - ego_pos).norm();
            let radii = 0.5
                * ((ego_footprint.length.hypot(ego_footprint.width))
                    + (agent.footprint.length.hypot(agent.footprint.width)));
            let budget = (ego_vel.norm() + a_vel.norm()) * best + radii;
            if sep > budget {
                continue;
            }
            let scan_cap = (best / TTC_SCAN_DT).ceil() as usize;
            for j in 0..=scans.min(scan_cap) {
                let delta = j as f64 * TTC_SCAN_DT;
                if delta >= best {
                    break;
                }
                let ego_rect = OrientedRect::new(
                    ego_pos + ego_vel * delta,
                    ego_footprint.length,
                    ego_footprint.width,
                    ego_heading,
                );
                let a_rect = OrientedRect::new(
                    a_pos + a_vel * delta,
                    agent.footprint.length,
                    agent.footprint.width,
                    a_heading,
                );
                if ego_rect.overlaps(&a_rect) {
                    best = best.min(delta);
                    break;
                }
            }
        }
    }
    Ok(best)
}

/// No-at-fault-collision sub-score: 0 iff an oriented-rectangle overlap
/// occurs at any 10 Hz step and the ego is at fault. The ego is not at
/// fault when it is stationary at first contact or when the contact first
/// occurs on its rear face.
pub fn nc_score(ego_traj: &Trajectory, ego_footprint: Footprint, agents: &[Agent]) -> f64 {
    if ego_traj.len() < 2 || agents.is_empty() {
        return 1.0;
    }
    let ego = resample_trajectory(ego_traj, COLLISION_RATE_HZ)
        .expect("ego trajectory has >= 2 waypoints");
    for agent in agents {
        for w in &ego.waypoints {
            let ego_rect = body_rect(&ego, ego_footprint, w.t);
            let a_rect = body_rect(&agent.scripted_trajectory, agent.footprint, w.t);
            if !ego_rect.overlaps(&a_rect) {
                continue;
            }
            // First contact with this agent: evaluate fault.
            let ego_speed = ego.velocity_at(w.t).norm();
            if ego_speed < STATIONARY_SPEED {
                break; // stationary ego is not at fault
            }
            let rel = (a_rect.center - ego_rect.center).rotated(-ego_rect.heading);
            let nx = rel.x / ego_rect.half_len.max(1e-9);
            let ny = rel.y / ego_rect.half_wid.max(1e-9);
            if -nx >= ny.abs() {
                break; // contact on the rear face
            }
            return 0.0;
        }
    }
    1.0
}

/// Drivable-area compliance: 1 iff all four footprint corners stay inside
/// the union of drivable polygons at every 10 Hz step (boundary counts as
/// inside).
pub fn dac_score(
    ego_traj: &Trajectory,
    ego_footprint: Footprint,
    map: &crate::scenario::SceneMap,
) -> f64 {
    if ego_traj.len() < 2 {
        return 1.0;
    }
    let ego = resample_trajectory(ego_traj, COLLISION_RATE_HZ)
        .expect("ego trajectory has >= 2 waypoints");
    for w in &ego.waypoints {
        let rect = body_rect(&ego, ego_footprint, w.t);
        for corner in rect.corners() {
            if !map.drivable_area.iter().any(|poly| poly.contains(corner)) {
                return 0.0;
            }
        }
    }
    1.0
}

/// Signed arc-length progress of a trajectory along a centerline: endpoint
/// projection minus start projection.
pub fn progress_along(traj: &Trajectory, line: &Polyline) -> f64 {
    if traj.is_empty() {
        return 0.0;
    }
    let first = traj.waypoints.first().unwrap().pos();
    let last = traj.waypoints.last().unwrap().pos();
    line.project(last).arc_len - line.project(first).arc_len
}

/// Ego-progress sub-score: clip(progress / reference_progress, 0, 1).
pub fn ep_score(ego_traj: &Trajectory, line: &Polyline, reference_progress: f64) -> f64 {
    let progress = progress_along(ego_traj, line);
    if reference_progress <= 1e-9 {
        // Degenerate reference (stationary best candidate): any non-negative
        // progress counts as full.
        return if progress >= -1e-9 { 1.0 } else { 0.0 };
    }
    (progress / reference_progress).clamp(0.0, 1.0)
}

/// Binary TTC sub-score: 1 iff the minimum TTC over the horizon stays at or
/// above [`TTC_RISK`].
pub fn ttc_subscore(ego_traj: &Trajectory, ego_footprint: Footprint, agents: &[Agent]) -> Result<f64> {
    let t = ttc_min(ego_traj, ego_footprint, agents, T_P)?;
    Ok(if t >= TTC_RISK { 1.0 } else { 0.0 })
}

/// Comfort sub-score from 2 Hz finite differences: 1 iff longitudinal and
/// lateral accelerations stay within 4 m/s^2 and jerk within 8 m/s^3.
pub fn comfort_score(ego_traj: &Trajectory) -> Result<f64> {
    let wps = &ego_traj.waypoints;
    if wps.len() < 3 {
        return Err(Error::InvalidInput(
            "comfort needs at least 3 waypoints".into(),
        ));
    }
    let dt = 1.0 / ego_traj.rate_hz;
    let vels: Vec<Vec2> = wps
        .windows(2)
        .map(|p| (p[1].pos() - p[0].pos()) * (1.0 / dt))
        .collect();
    let accs: Vec<Vec2> = vels
        .windows(2)
        .map(|v| (v[1] - v[0]) * (1.0 / dt))
        .collect();
    for (k, acc) in accs.iter().enumerate() {
        let dir = vels[k]
            .normalized()
            .or_else(|| vels[k + 1].normalized())
            .unwrap_or(Vec2::new(1.0, 0.0));
        let a_long = acc.dot(dir);
        let a_lat = acc.dot(dir.perp());
        if a_long.abs() > COMFORT_A_LONG_MAX || a_lat.abs() > COMFORT_A_LAT_MAX {
            return Ok(0.0);
        }
    }
    for pair in accs.windows(2) {
        let jerk = (pair[1] - pair[0]) * (1.0 / dt);
        if jerk.norm() > COMFORT_JERK_MAX {
            return Ok(0.0);
        }
    }
    Ok(1.0)
}

/// PDMS aggregation: NC x DAC x (5 EP + 5 TTC + 2 C) / 12.
pub fn pdms(sub: &SubScores) -> f64 {
    sub.nc * sub.dac * (5.0 * sub.ep + 5.0 * sub.ttc + 2.0 * sub.comfort) / 12.0
}

/// Score a future trajectory within its scene. The trajectory is anchored
/// at the ego's t=0 pose before any metric is evaluated so that NC, DAC
/// and TTC cover the full [0, T_P] window.
pub fn score_trajectory(traj: &Trajectory, scene: &Scene, ep_reference: f64) -> Result<SubScores> {
    let anchored = anchor_trajectory(traj, scene.ego.position);
    let line = scene.map.polyline();
    Ok(SubScores {
        nc: nc_score(&anchored, scene.ego.footprint, &scene.agents),
        dac: dac_score(&anchored, scene.ego.footprint, &scene.map),
        ep: ep_score(&anchored, &line, ep_reference),
        ttc: ttc_subscore(&anchored, scene.ego.footprint, &scene.agents)?,
        comfort: comfort_score(&anchored)?,
    })
}

/// Displacement errors between prediction and reference: L2 at t=1 s,
/// L2 at t=4 s, and the final displacement error.
pub fn displacement_errors(pred: &Trajectory, reference: &Trajectory) -> Result<(f64, f64, f64)> {
    if pred.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            pred.len(),
            reference.len()
        )));
    }
    if (pred.rate_hz - reference.rate_hz).abs() > 1e-9 {
        return Err(Error::InvalidInput("rate mismatch".into()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    let err_at = |t: f64| -> Result<f64> {
        for (p, r) in pred.waypoints.iter().zip(reference.waypoints.iter()) {
            if (p.t - t).abs() < 1e-9 {
                return Ok((p.pos() - r.pos()).norm());
            }
        }
        Err(Error::InvalidInput(format!("no waypoint at t={t}")))
    };
    let l2_1s = err_at(1.0)?;
    let l2_4s = err_at(4.0)?;
    let fde = (pred.waypoints.last().unwrap().pos() - reference.waypoints.last().unwrap().pos())
        .norm();
    Ok((l2_1s, l2_4s, fde))
}

/// Aggregate predictions over a dataset. `collision_rate` counts scenes
/// whose prediction scored nc = 0.
pub fn evaluate_dataset(preds: &[Trajectory], cases: &[EvalCase]) -> Result<EvalReport> {
    if preds.len() != cases.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} scenes",
            preds.len(),
            cases.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let n = preds.len() as f64;
    let mut sums = [0.0f64; 9];
    let mut collisions = 0usize;
    for (pred, case) in preds.iter().zip(cases.iter()) {
        let sub = score_trajectory(pred, &case.scene, case.ep_reference)?;
        let (l2_1, l2_4, fde) = displacement_errors(pred, &case.reference)?;
        sums[0] += pdms(&sub);
        sums[1] += sub.nc;
        sums[2] += sub.dac;
        sums[3] += sub.ep;
        sums[4] += sub.ttc;
        sums[5] += sub.comfort;
        sums[6] += l2_1;
        sums[7] += l2_4;
        sums[8] += fde;
        if sub.nc == 0.0 {
            collisions += 1;
        }
    }
    Ok(EvalReport {
        mean_pdms: sums[0] / n,
        mean_nc: sums[1] / n,
        mean_dac: sums[2] / n,
        mean_ep: sums[3] / n,
        mean_ttc: sums[4] / n,
        mean_comfort: sums[5] / n,
        l2_at_1s: sums[6] / n,
        l2_at_4s: sums[7] / n,
        fde: sums[8] / n,
        collision_rate: collisions as f64 / n,
        sample_count: preds.len(),
    })
}
