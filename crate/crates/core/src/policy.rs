//! A small differentiable planner: deterministic scene-feature encoder,
//! learned softmax attention pooling over feature slots, a three-layer
//! action head decoding cumulative waypoint displacements, and a linear
//! meta-action classification head. All gradients are analytic.

use crate::csp::NegativeAnalysisBlock;
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::scenario::{
    follow_centerline, DirectionDecision, Scene, SpeedDecision, Trajectory, Waypoint, RATE_HZ,
    SAMPLE_DT, T_P,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::Read;
use std::path::Path;

/// Feature slots per scene.
pub const SLOTS: usize = 8;
/// Feature dimension per slot (also the pooled feature dimension).
pub const DIM: usize = 16;
/// Action-head hidden sizes.
pub const HIDDEN1: usize = 64;
pub const HIDDEN2: usize = 256;
/// Action-head output: 8 waypoints x (dx, dy).
pub const TRAJ_OUT: usize = 16;
/// Trajectory steps decoded from the action head.
pub const TRAJ_STEPS: usize = 8;
/// Meta-head output: (3 speed + 5 direction) logits for two windows.
pub const META_OUT: usize = 16;

/// Logit ranges of the four softmax groups: speed/direction per window.
pub const META_GROUPS: [(usize, usize); 4] = [(0, 3), (3, 8), (8, 11), (11, 16)];

const SPEED_VARIANTS: [SpeedDecision; 3] = [
    SpeedDecision::Maintain,
    SpeedDecision::Accelerate,
    SpeedDecision::Decelerate,
];
const DIRECTION_VARIANTS: [DirectionDecision; 5] = [
    DirectionDecision::KeepLane,
    DirectionDecision::TurnLeft,
    DirectionDecision::TurnRight,
    DirectionDecision::LaneChangeLeft,
    DirectionDecision::LaneChangeRight,
];

pub fn speed_class(d: SpeedDecision) -> usize {
    SPEED_VARIANTS.iter().position(|v| *v == d).unwrap()
}

pub fn direction_class(d: DirectionDecision) -> usize {
    DIRECTION_VARIANTS.iter().position(|v| *v == d).unwrap()
}

/// Fixed-shape slot matrix produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures {
    data: Vec<f64>, // SLOTS x DIM, slot-major
}

impl SceneFeatures {
    pub fn zeros() -> Self {
        SceneFeatures {
            data: vec![0.0; SLOTS * DIM],
        }
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        &self.data[i * DIM..(i + 1) * DIM]
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * DIM..(i + 1) * DIM]
    }

    pub fn swap_slots(&mut self, a: usize, b: usize) {
        for d in 0..DIM {
            self.data.swap(a * DIM + d, b * DIM + d);
        }
    }
}

/// Deterministic scene encoding. Slot layout:
/// 0 ego kinematics, 1-4 nearest agents (zero-padded), 5 route command,
/// 6 intent prior (meta-actions of a constant-speed rollout), 7 analysis
/// block (zero when absent).
pub fn encode_features(scene: &Scene, analysis: Option<&NegativeAnalysisBlock>) -> SceneFeatures {
    let mut f = SceneFeatures::zeros();

    // Slot 0: ego kinematics and history deltas.
    {
        let s = f.slot_mut(0);
        s[0] = scene.ego.speed / 10.0;
        s[1] = scene.ego.heading;
        let h = &scene.ego_history.waypoints;
        if h.len() >= 2 {
            let d1 = h[1].pos() - h[0].pos();
            s[2] = d1.x / 10.0;
            s[3] = d1.y / 10.0;
        }
        if h.len() >= 3 {
            let d2 = h[2].pos() - h[1].pos();
            s[4] = d2.x / 10.0;
            s[5] = d2.y / 10.0;
        }
        s[6] = scene.ego.speed * SAMPLE_DT / 10.0;
        s[7] = 1.0;
    }

    // Slots 1-4: up to four nearest agents by distance at t=0.
    {
        let ego_pos = scene.ego.position;
        let ego_vel = Vec2::from_angle(scene.ego.heading) * scene.ego.speed;
        let mut order: Vec<usize> = (0..scene.agents.len()).collect();
        order.sort_by(|&a, &b| {
            let da = (scene.agents[a].scripted_trajectory.position_at(0.0) - ego_pos).norm();
            let db = (scene.agents[b].scripted_trajectory.position_at(0.0) - ego_pos).norm();
            da.partial_cmp(&db)
                .unwrap()
                .then(scene.agents[a].id.cmp(&scene.agents[b].id))
        });
        for (slot_idx, &agent_idx) in order.iter().take(4).enumerate() {
            let agent = &scene.agents[agent_idx];
            let pos = agent.scripted_trajectory.position_at(0.0) - ego_pos;
            let vel = agent.scripted_trajectory.velocity_at(0.0) - ego_vel;
            let s = f.slot_mut(1 + slot_idx);
            s[0] = pos.x / 10.0;
            s[1] = pos.y / 10.0;
            s[2] = vel.x / 10.0;
            s[3] = vel.y / 10.0;
            s[4] = agent.footprint.length / 5.0;
            s[5] = agent.footprint.width / 5.0;
            let kind = match agent.kind {
                crate::scenario::AgentKind::Vehicle => 0,
                crate::scenario::AgentKind::Pedestrian => 1,
                crate::scenario::AgentKind::Cyclist => 2,
            };
            s[6 + kind] = 1.0;
            s[9] = pos.norm() / 20.0;
            s[10] = 1.0;
        }
    }

    // Slot 5: route command one-hots.
    {
        let s = f.slot_mut(5);
        s[speed_class(scene.command.speed_decision)] = 1.0;
        s[3 + direction_class(scene.command.direction_decision)] = 1.0;
        s[8] = 1.0;
    }

    // Slot 6: intent prior from a constant-speed centerline rollout.
    {
        if let Ok(rollout) = follow_centerline(&scene.map, &scene.ego, &[], T_P) {
            let (short, long) =
                crate::csp::derive_meta_actions(&rollout, scene.ego.speed, &scene.map);
            let s = f.slot_mut(6);
            s[speed_class(short.speed_decision)] = 1.0;
            s[3 + direction_class(short.direction_decision)] = 1.0;
            s[8 + speed_class(long.speed_decision)] = 1.0;
            s[11 + direction_class(long.direction_decision)] = 1.0;
        }
    }

    // Slot 7: analysis block summary (zero when absent).
    if let Some(block) = analysis {
        let s = f.slot_mut(7);
        s[0] = block.failure_attribution.longitudinal_error / 5.0;
        s[1] = block.failure_attribution.lateral_error / 5.0;
        s[2] = match block.failure_attribution.primary_axis {
            crate::csp::Axis::Longitudinal => 0.0,
            crate::csp::Axis::Lateral => 1.0,
        };
        let mean_corr = if block.actionable_correction.is_empty() {
            0.0
        } else {
            block
                .actionable_correction
                .iter()
                .map(|c| c.d_long.hypot(c.d_lat))
                .sum::<f64>()
                / block.actionable_correction.len() as f64
        };
        s[3] = mean_corr / 5.0;
    }
    f
}

/// Trainable parameters: pooling scorer, action head, meta head.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub pool_w: Vec<f64>, // DIM
    pub pool_b: f64,
    pub w1: Vec<f64>, // DIM x HIDDEN1
    pub b1: Vec<f64>,
    pub w2: Vec<f64>, // HIDDEN1 x HIDDEN2
    pub b2: Vec<f64>,
    pub w3: Vec<f64>, // HIDDEN2 x TRAJ_OUT
    pub b3: Vec<f64>,
    pub wm: Vec<f64>, // DIM x META_OUT
    pub bm: Vec<f64>,
}

/// Gradient accumulator with the same shape as [`PolicyParams`].
pub type PolicyGrads = PolicyParams;

/// Tensor table shared by flattening and the checkpoint format.
pub const TENSOR_TABLE: [(&str, &[usize]); 10] = [
    ("pool_w", &[DIM]),
    ("pool_b", &[1]),
    ("w1", &[DIM, HIDDEN1]),
    ("b1", &[HIDDEN1]),
    ("w2", &[HIDDEN1, HIDDEN2]),
    ("b2", &[HIDDEN2]),
    ("w3", &[HIDDEN2, TRAJ_OUT]),
    ("b3", &[TRAJ_OUT]),
    ("wm", &[DIM, META_OUT]),
    ("bm", &[META_OUT]),
];

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

impl PolicyParams {
    /// Seeded Xavier-uniform initialization, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyParams {
            pool_w: (0..DIM).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            pool_b: 0.0,
            w1: xavier(&mut rng, DIM, HIDDEN1, DIM * HIDDEN1),
            b1: vec![0.0; HIDDEN1],
            w2: xavier(&mut rng, HIDDEN1, HIDDEN2, HIDDEN1 * HIDDEN2),
            b2: vec![0.0; HIDDEN2],
            w3: xavier(&mut rng, HIDDEN2, TRAJ_OUT, HIDDEN2 * TRAJ_OUT),
            b3: vec![0.0; TRAJ_OUT],
            wm: xavier(&mut rng, DIM, META_OUT, DIM * META_OUT),
            bm: vec![0.0; META_OUT],
        }
    }

    pub fn zeros() -> Self {
        PolicyParams {
            pool_w: vec![0.0; DIM],
            pool_b: 0.0,
            w1: vec![0.0; DIM * HIDDEN1],
            b1: vec![0.0; HIDDEN1],
            w2: vec![0.0; HIDDEN1 * HIDDEN2],
            b2: vec![0.0; HIDDEN2],
            w3: vec![0.0; HIDDEN2 * TRAJ_OUT],
            b3: vec![0.0; TRAJ_OUT],
            wm: vec![0.0; DIM * META_OUT],
            bm: vec![0.0; META_OUT],
        }
    }

    pub fn param_count() -> usize {
        TENSOR_TABLE
            .iter()
            .map(|(_, dims)| dims.iter().product::<usize>())
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::param_count());
        out.extend_from_slice(&self.pool_w);
        out.push(self.pool_b);
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(&self.w3);
        out.extend_from_slice(&self.b3);
        out.extend_from_slice(&self.wm);
        out.extend_from_slice(&self.bm);
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, expected {}",
                flat.len(),
                Self::param_count()
            )));
        }
        let mut at = 0usize;
        let mut take = |n: usize| {
            let v = flat[at..at + n].to_vec();
            at += n;
            v
        };
        Ok(PolicyParams {
            pool_w: take(DIM),
            pool_b: take(1)[0],
            w1: take(DIM * HIDDEN1),
            b1: take(HIDDEN1),
            w2: take(HIDDEN1 * HIDDEN2),
            b2: take(HIDDEN2),
            w3: take(HIDDEN2 * TRAJ_OUT),
            b3: take(TRAJ_OUT),
            wm: take(DIM * META_OUT),
            bm: take(META_OUT),
        })
    }

    /// In-place `self += other * k`.
    pub fn add_scaled(&mut self, other: &PolicyParams, k: f64) {
        let pairs: [(&mut Vec<f64>, &Vec<f64>); 9] = [
            (&mut self.pool_w, &other.pool_w),
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
            (&mut self.w3, &other.w3),
            (&mut self.b3, &other.b3),
            (&mut self.wm, &other.wm),
            (&mut self.bm, &other.bm),
        ];
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s * k;
            }
        }
        self.pool_b += other.pool_b * k;
    }

    pub fn scale(&mut self, k: f64) {
        for v in [
            &mut self.pool_w,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.wm,
            &mut self.bm,
        ] {
            for x in v.iter_mut() {
                *x *= k;
            }
        }
        self.pool_b *= k;
    }

    pub fn l2_norm(&self) -> f64 {
        self.flatten().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Norm over one parameter group.
    pub fn group_norms(&self) -> GroupNorms {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        GroupNorms {
            pool: (sq(&self.pool_w) + self.pool_b * self.pool_b).sqrt(),
            action: (sq(&self.w1) + sq(&self.b1) + sq(&self.w2) + sq(&self.b2) + sq(&self.w3)
                + sq(&self.b3))
            .sqrt(),
            meta: (sq(&self.wm) + sq(&self.bm)).sqrt(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupNorms {
    pub pool: f64,
    pub action: f64,
    pub meta: f64,
}

/// Per-group learning rates for plain SGD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub pool: f64,
    pub action: f64,
    pub meta: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            pool: 1e-3,
            action: 1e-3,
            meta: 1e-3,
        }
    }
}

/// Which parameter groups an update may touch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMask {
    pub pool: bool,
    pub action: bool,
    pub meta: bool,
}

impl GroupMask {
    pub const ALL: GroupMask = GroupMask {
        pool: true,
        action: true,
        meta: true,
    };
    /// Pooling and action head only (meta head frozen), as used by the
    /// reinforcement stage.
    pub const POLICY_ONLY: GroupMask = GroupMask {
        pool: true,
        action: true,
        meta: false,
    };
}

/// Plain SGD step with per-group learning rates.
pub fn update(params: &mut PolicyParams, grads: &PolicyGrads, lr: &LearningRates, mask: &GroupMask) {
    let step = |dst: &mut [f64], src: &[f64], rate: f64| {
        for (d, g) in dst.iter_mut().zip(src.iter()) {
            *d -= rate * g;
        }
    };
    if mask.pool {
        step(&mut params.pool_w, &grads.pool_w, lr.pool);
        params.pool_b -= lr.pool * grads.pool_b;
    }
    if mask.action {
        step(&mut params.w1, &grads.w1, lr.action);
        step(&mut params.b1, &grads.b1, lr.action);
        step(&mut params.w2, &grads.w2, lr.action);
        step(&mut params.b2, &grads.b2, lr.action);
        step(&mut params.w3, &grads.w3, lr.action);
        step(&mut params.b3, &grads.b3, lr.action);
    }
    if mask.meta {
        step(&mut params.wm, &grads.wm, lr.meta);
        step(&mut params.bm, &grads.bm, lr.meta);
    }
}

/// Softmax attention pooling cache.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub alphas: [f64; SLOTS],
}

/// Pool slots into a single D-vector: softmax over per-slot scores
/// (slot . w + b), then the alpha-weighted sum of slots.
pub fn pool_forward(features: &SceneFeatures, params: &PolicyParams) -> (Vec<f64>, PoolCache) {
    let mut scores = [0.0f64; SLOTS];
    for i in 0..SLOTS {
        let slot = features.slot(i);
        let mut s = params.pool_b;
        for d in 0..DIM {
            s += slot[d] * params.pool_w[d];
        }
        scores[i] = s;
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut alphas = [0.0f64; SLOTS];
    let mut z = 0.0;
    for i in 0..SLOTS {
        alphas[i] = (scores[i] - max).exp();
        z += alphas[i];
    }
    for a in alphas.iter_mut() {
        *a /= z;
    }
    let mut pooled = vec![0.0f64; DIM];
    for i in 0..SLOTS {
        let slot = features.slot(i);
        for d in 0..DIM {
            pooled[d] += alphas[i] * slot[d];
        }
    }
    (pooled, PoolCache { alphas })
}

pub fn pool(features: &SceneFeatures, params: &PolicyParams) -> Vec<f64> {
    pool_forward(features, params).0
}

/// Backprop through the pooling layer, accumulating pool_w/pool_b grads.
pub fn pool_backward(
    features: &SceneFeatures,
    cache: &PoolCache,
    d_pooled: &[f64],
    grads: &mut PolicyGrads,
) {
    // dL/d score_i = alpha_i * (g . f_i - sum_j alpha_j (g . f_j))
    let mut gf = [0.0f64; SLOTS];
    for i in 0..SLOTS {
        let slot = features.slot(i);
        gf[i] = slot.iter().zip(d_pooled.iter()).map(|(a, b)| a * b).sum();
    }
    let mean: f64 = (0..SLOTS).map(|i| cache.alphas[i] * gf[i]).sum();
    for i in 0..SLOTS {
        let ds = cache.alphas[i] * (gf[i] - mean);
        let slot = features.slot(i);
        for d in 0..DIM {
            grads.pool_w[d] += ds * slot[d];
        }
        grads.pool_b += ds;
    }
}

/// Add seeded i.i.d. Gaussian noise to a pooled feature. `sigma = 0` is
/// the identity (the generator is still advanced by DIM draws).
pub fn perturb(pooled: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    pooled
        .iter()
        .map(|x| {
            let z: f64 = rng.sample(StandardNormal);
            x + sigma * z
        })
        .collect()
}

/// Cached activations of the action head for backprop.
#[derive(Debug, Clone)]
pub struct ActCache {
    pub x: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub out: Vec<f64>,
}

pub fn act_forward(x: &[f64], params: &PolicyParams) -> ActCache {
    debug_assert_eq!(x.len(), DIM);
    let mut h1 = params.b1.clone();
    for d in 0..DIM {
        let xv = x[d];
        if xv != 0.0 {
            let row = &params.w1[d * HIDDEN1..(d + 1) * HIDDEN1];
            for (h, w) in h1.iter_mut().zip(row.iter()) {
                *h += xv * w;
            }
        }
    }
    for h in h1.iter_mut() {
        *h = h.tanh();
    }
    let mut h2 = params.b2.clone();
    for i in 0..HIDDEN1 {
        let hv = h1[i];
        let row = &params.w2[i * HIDDEN2..(i + 1) * HIDDEN2];
        for (h, w) in h2.iter_mut().zip(row.iter()) {
            *h += hv * w;
        }
    }
    for h in h2.iter_mut() {
        *h = h.tanh();
    }
    let mut out = params.b3.clone();
    for i in 0..HIDDEN2 {
        let hv = h2[i];
        let row = &params.w3[i * TRAJ_OUT..(i + 1) * TRAJ_OUT];
        for (o, w) in out.iter_mut().zip(row.iter()) {
            *o += hv * w;
        }
    }
    ActCache {
        x: x.to_vec(),
        h1,
        h2,
        out,
    }
}

/// Backprop through the action head; accumulates grads and returns dL/dx.
pub fn act_backward(
    cache: &ActCache,
    params: &PolicyParams,
    d_out: &[f64],
    grads: &mut PolicyGrads,
) -> Vec<f64> {
    let mut dh2 = vec![0.0f64; HIDDEN2];
    for i in 0..HIDDEN2 {
        let row = &params.w3[i * TRAJ_OUT..(i + 1) * TRAJ_OUT];
        let grow = &mut grads.w3[i * TRAJ_OUT..(i + 1) * TRAJ_OUT];
        let hv = cache.h2[i];
        let mut acc = 0.0;
        for o in 0..TRAJ_OUT {
            grow[o] += hv * d_out[o];
            acc += row[o] * d_out[o];
        }
        dh2[i] = acc;
    }
    for (g, d) in grads.b3.iter_mut().zip(d_out.iter()) {
        *g += d;
    }
    // tanh' = 1 - h^2
    let dz2: Vec<f64> = dh2
        .iter()
        .zip(cache.h2.iter())
        .map(|(d, h)| d * (1.0 - h * h))
        .collect();
    let mut dh1 = vec![0.0f64; HIDDEN1];
    for i in 0..HIDDEN1 {
        let row = &params.w2[i * HIDDEN2..(i + 1) * HIDDEN2];
        let grow = &mut grads.w2[i * HIDDEN2..(i + 1) * HIDDEN2];
        let hv = cache.h1[i];
        let mut acc = 0.0;
        for o in 0..HIDDEN2 {
            grow[o] += hv * dz2[o];
            acc += row[o] * dz2[o];
        }
        dh1[i] = acc;
    }
    for (g, d) in grads.b2.iter_mut().zip(dz2.iter()) {
        *g += d;
    }
    let dz1: Vec<f64> = dh1
        .iter()
        .zip(cache.h1.iter())
        .map(|(d, h)| d * (1.0 - h * h))
        .collect();
    let mut dx = vec![0.0f64; DIM];
    for d in 0..DIM {
        let row = &params.w1[d * HIDDEN1..(d + 1) * HIDDEN1];
        let grow = &mut grads.w1[d * HIDDEN1..(d + 1) * HIDDEN1];
        let xv = cache.x[d];
        let mut acc = 0.0;
        for o in 0..HIDDEN1 {
            grow[o] += xv * dz1[o];
            acc += row[o] * dz1[o];
        }
        dx[d] = acc;
    }
    for (g, d) in grads.b1.iter_mut().zip(dz1.iter()) {
        *g += d;
    }
    dx
}

/// Decode head outputs as cumulative per-step displacements.
pub fn decode_trajectory(out: &[f64]) -> Trajectory {
    let mut waypoints = Vec::with_capacity(TRAJ_STEPS);
    let mut x = 0.0;
    let mut y = 0.0;
    for k in 0..TRAJ_STEPS {
        x += out[2 * k];
        y += out[2 * k + 1];
        waypoints.push(Waypoint::new(x, y, (k + 1) as f64 * SAMPLE_DT));
    }
    Trajectory::new(waypoints, RATE_HZ)
}

/// Map waypoint-space gradients back to head-output space (transpose of
/// the cumulative sum).
pub fn waypoint_grads_to_out(d_wp: &[Vec2]) -> Vec<f64> {
    debug_assert_eq!(d_wp.len(), TRAJ_STEPS);
    let mut d_out = vec![0.0f64; TRAJ_OUT];
    let mut sx = 0.0;
    let mut sy = 0.0;
    for k in (0..TRAJ_STEPS).rev() {
        sx += d_wp[k].x;
        sy += d_wp[k].y;
        d_out[2 * k] = sx;
        d_out[2 * k + 1] = sy;
    }
    d_out
}

pub fn meta_forward(x: &[f64], params: &PolicyParams) -> Vec<f64> {
    let mut logits = params.bm.clone();
    for d in 0..DIM {
        let xv = x[d];
        if xv != 0.0 {
            let row = &params.wm[d * META_OUT..(d + 1) * META_OUT];
            for (l, w) in logits.iter_mut().zip(row.iter()) {
                *l += xv * w;
            }
        }
    }
    logits
}

/// Backprop through the meta head; accumulates grads and returns dL/dx.
pub fn meta_backward(
    x: &[f64],
    params: &PolicyParams,
    d_logits: &[f64],
    grads: &mut PolicyGrads,
) -> Vec<f64> {
    let mut dx = vec![0.0f64; DIM];
    for d in 0..DIM {
        let row = &params.wm[d * META_OUT..(d + 1) * META_OUT];
        let grow = &mut grads.wm[d * META_OUT..(d + 1) * META_OUT];
        let xv = x[d];
        let mut acc = 0.0;
        for o in 0..META_OUT {
            grow[o] += xv * d_logits[o];
            acc += row[o] * d_logits[o];
        }
        dx[d] = acc;
    }
    for (g, d) in grads.bm.iter_mut().zip(d_logits.iter()) {
        *g += d;
    }
    dx
}

/// Policy output: a future trajectory in the ego frame plus meta logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub trajectory: Trajectory,
    pub meta_logits: Vec<f64>,
}

/// Full head evaluation on an input vector. Non-finite outputs signal
/// training divergence.
pub fn act(x: &[f64], params: &PolicyParams) -> Result<PolicyOutput> {
    let cache = act_forward(x, params);
    let logits = meta_forward(x, params);
    if cache.out.iter().chain(logits.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite policy output".into()));
    }
    Ok(PolicyOutput {
        trajectory: decode_trajectory(&cache.out),
        meta_logits: logits,
    })
}

/// Deterministic inference: encode, pool, decode (no noise, no analysis).
pub fn infer(scene: &Scene, params: &PolicyParams) -> Result<PolicyOutput> {
    let features = encode_features(scene, None);
    let pooled = pool(&features, params);
    act(&pooled, params)
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic, stage byte, tensor table, row-major f64 LE data.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"CPLNCKP1";

/// Pipeline stage recorded in a checkpoint, used to enforce train-mode
/// ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Init,
    Sft1,
    Sft2,
    Grpo,
}

impl Stage {
    fn to_byte(self) -> u8 {
        match self {
            Stage::Init => 0,
            Stage::Sft1 => 1,
            Stage::Sft2 => 2,
            Stage::Grpo => 3,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Stage::Init),
            1 => Ok(Stage::Sft1),
            2 => Ok(Stage::Sft2),
            3 => Ok(Stage::Grpo),
            other => Err(Error::ShapeMismatch(format!("unknown stage byte {other}"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Init => "init",
            Stage::Sft1 => "sft1",
            Stage::Sft2 => "sft2",
            Stage::Grpo => "grpo",
        };
        f.write_str(s)
    }
}

/// Serialize parameters to the flat binary checkpoint format.
pub fn checkpoint_bytes(params: &PolicyParams, stage: Stage) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(stage.to_byte());
    buf.extend_from_slice(&[0u8; 3]);
    buf.extend_from_slice(&(TENSOR_TABLE.len() as u32).to_le_bytes());
    for (name, dims) in TENSOR_TABLE {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dims.len() as u8);
        for d in dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
    }
    for v in params.flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams, stage: Stage) -> Result<()> {
    crate::jsonl::write_atomic(path, &checkpoint_bytes(params, stage))
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, Stage)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(PolicyParams, Stage)> {
    let fail = |msg: &str| Error::ShapeMismatch(msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic"));
    }
    let stage = Stage::from_byte(bytes[8])?;
    let mut at = 12usize;
    let read_u16 = |b: &[u8], at: usize| u16::from_le_bytes([b[at], b[at + 1]]) as usize;
    let read_u32 =
        |b: &[u8], at: usize| u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]) as usize;
    if bytes.len() < at + 4 {
        return Err(fail("truncated header"));
    }
    let count = read_u32(bytes, at);
    at += 4;
    if count != TENSOR_TABLE.len() {
        return Err(fail("tensor count mismatch"));
    }
    for (name, dims) in TENSOR_TABLE {
        if bytes.len() < at + 2 {
            return Err(fail("truncated tensor table"));
        }
        let name_len = read_u16(bytes, at);
        at += 2;
        if bytes.len() < at + name_len + 1 {
            return Err(fail("truncated tensor name"));
        }
        if &bytes[at..at + name_len] != name.as_bytes() {
            return Err(fail("tensor name mismatch"));
        }
        at += name_len;
        let ndim = bytes[at] as usize;
        at += 1;
        if ndim != dims.len() || bytes.len() < at + 4 * ndim {
            return Err(fail("tensor rank mismatch"));
        }
        for d in dims {
            if read_u32(bytes, at) != *d {
                return Err(fail("tensor dim mismatch"));
            }
            at += 4;
        }
    }
    let n = PolicyParams::param_count();
    if bytes.len() != at + 8 * n {
        return Err(fail("data size mismatch"));
    }
    let mut flat = Vec::with_capacity(n);
    for i in 0..n {
        let o = at + 8 * i;
        flat.push(f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()));
    }
    Ok((PolicyParams::from_flat(&flat)?, stage))
}

/// Write bytes via [`save_checkpoint`] semantics but for already-encoded
/// buffers (used when a command re-emits a checkpoint untouched).
pub fn write_checkpoint_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::jsonl::write_atomic(path, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scene, Template};

    #[test]
    fn encode_is_deterministic_and_padded() {
        let scene = generate_scene(Template::Crossing, 5);
        let a = encode_features(&scene, None);
        let b = encode_features(&scene, None);
        assert_eq!(a, b);
        // One agent: slots 2-4 are zero-padded.
        for slot in 2..5 {
            assert!(a.slot(slot).iter().all(|v| *v == 0.0));
        }
        let empty = generate_scene(Template::FreeRoad, 5);
        let f = encode_features(&empty, None);
        for slot in 1..5 {
            assert!(f.slot(slot).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn analysis_changes_only_its_slot() {
        let scene = generate_scene(Template::LeadBrake, 2);
        let record = crate::csp::build_record(&scene).unwrap();
        let block = record.analysis.as_ref().expect("lead_brake seed 2 is Neg");
        let without = encode_features(&scene, None);
        let with = encode_features(&scene, Some(block));
        for slot in 0..SLOTS - 1 {
            assert_eq!(without.slot(slot), with.slot(slot), "slot {slot} changed");
        }
        assert!(without.slot(7).iter().all(|v| *v == 0.0));
        assert!(with.slot(7).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn pool_uniform_when_scores_equal() {
        let scene = generate_scene(Template::Crossing, 1);
        let features = encode_features(&scene, None);
        let mut params = PolicyParams::init(0);
        params.pool_w = vec![0.0; DIM];
        params.pool_b = 0.7; // common bias shifts every score equally
        let pooled = pool(&features, &params);
        for d in 0..DIM {
            let mean: f64 = (0..SLOTS).map(|i| features.slot(i)[d]).sum::<f64>() / SLOTS as f64;
            assert!((pooled[d] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_saturates_to_dominant_slot() {
        let scene = generate_scene(Template::Crossing, 1);
        let mut features = encode_features(&scene, None);
        // Give slot 3 a private feature and weight it hard: its score wins
        // by a margin >= 30.
        features.slot_mut(3)[15] = 1.0;
        let mut params = PolicyParams::init(0);
        params.pool_w = vec![0.0; DIM];
        params.pool_w[15] = 40.0;
        params.pool_b = 0.0;
        let pooled = pool(&features, &params);
        for d in 0..DIM {
            assert!(
                (pooled[d] - features.slot(3)[d]).abs() < 1e-9,
                "dim {d}: {} vs {}",
                pooled[d],
                features.slot(3)[d]
            );
        }
    }

    #[test]
    fn pool_zero_features_zero_output() {
        let features = SceneFeatures::zeros();
        let params = PolicyParams::init(3);
        let pooled = pool(&features, &params);
        assert!(pooled.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pool_permutation_equivariance() {
        let scene = generate_scene(Template::CutIn, 8);
        let features = encode_features(&scene, None);
        let params = PolicyParams::init(11);
        let base = pool(&features, &params);
        let mut swapped = features.clone();
        swapped.swap_slots(1, 6);
        let after = pool(&swapped, &params);
        for (a, b) in base.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn perturb_identity_and_determinism() {
        let pooled: Vec<f64> = (0..DIM).map(|i| i as f64 * 0.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let same = perturb(&pooled, 0.0, &mut rng);
        assert_eq!(same, pooled);
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(perturb(&pooled, 0.1, &mut r1), perturb(&pooled, 0.1, &mut r2));
    }

    #[test]
    fn perturb_sample_std() {
        let pooled = vec![0.0; DIM];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000 / DIM;
        let mut values = Vec::with_capacity(n * DIM);
        for _ in 0..n {
            values.extend(perturb(&pooled, 0.1, &mut rng));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        let std = var.sqrt();
        assert!((0.097..=0.103).contains(&std), "sample std {std}");
    }

    #[test]
    fn act_zero_params_at_origin() {
        let params = PolicyParams::zeros();
        let x = vec![0.3; DIM];
        let out = act(&x, &params).unwrap();
        for w in &out.trajectory.waypoints {
            assert_eq!((w.x, w.y), (0.0, 0.0));
        }
    }

    #[test]
    fn act_is_pure() {
        let params = PolicyParams::init(5);
        let x: Vec<f64> = (0..DIM).map(|i| (i as f64).sin()).collect();
        let a = act(&x, &params).unwrap();
        let b = act(&x, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn act_cumulative_sum_decoding() {
        // Force the head output to (1, 0) per step via biases.
        let mut params = PolicyParams::zeros();
        for k in 0..TRAJ_STEPS {
            params.b3[2 * k] = 1.0;
        }
        let out = act(&vec![0.0; DIM], &params).unwrap();
        for (k, w) in out.trajectory.waypoints.iter().enumerate() {
            assert!((w.x - (k + 1) as f64).abs() < 1e-12);
            assert_eq!(w.y, 0.0);
            assert!((w.t - (k + 1) as f64 * 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn update_rules() {
        let mut params = PolicyParams::init(1);
        let before = params.clone();
        update(
            &mut params,
            &PolicyGrads::zeros(),
            &LearningRates::default(),
            &GroupMask::ALL,
        );
        assert_eq!(params, before);

        let mut scalar = PolicyParams::zeros();
        scalar.pool_b = 0.5;
        let mut grad = PolicyGrads::zeros();
        grad.pool_b = 1.0;
        update(
            &mut scalar,
            &grad,
            &LearningRates {
                pool: 0.1,
                action: 0.1,
                meta: 0.1,
            },
            &GroupMask::ALL,
        );
        assert!((scalar.pool_b - 0.4).abs() < 1e-15);
    }

    #[test]
    fn update_is_linear_in_grads() {
        let base = PolicyParams::init(2);
        let mut g1 = PolicyGrads::zeros();
        let mut g2 = PolicyGrads::zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in [&mut g1, &mut g2] {
            let mut flat = v.flatten();
            for x in flat.iter_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
            *v = PolicyParams::from_flat(&flat).unwrap();
        }
        let lr = LearningRates::default();
        let mut seq = base.clone();
        update(&mut seq, &g1, &lr, &GroupMask::ALL);
        update(&mut seq, &g2, &lr, &GroupMask::ALL);
        let mut summed = base.clone();
        let mut total = g1.clone();
        total.add_scaled(&g2, 1.0);
        update(&mut summed, &total, &lr, &GroupMask::ALL);
        for (a, b) in seq.flatten().iter().zip(summed.flatten().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_freezes_meta_head() {
        let mut params = PolicyParams::init(4);
        let frozen_wm = params.wm.clone();
        let mut grad = PolicyGrads::zeros();
        for g in grad.wm.iter_mut() {
            *g = 1.0;
        }
        for g in grad.w1.iter_mut() {
            *g = 1.0;
        }
        update(
            &mut params,
            &grad,
            &LearningRates::default(),
            &GroupMask::POLICY_ONLY,
        );
        assert_eq!(params.wm, frozen_wm);
        assert!(params.w1.iter().zip(grad.w1.iter()).all(|(p, _)| *p != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let params = PolicyParams::init(77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        save_checkpoint(&path, &params, Stage::Sft1).unwrap();
        let (back, stage) = load_checkpoint(&path).unwrap();
        assert_eq!(stage, Stage::Sft1);
        assert_eq!(back, params);
        // Byte-stable re-encoding.
        let bytes1 = checkpoint_bytes(&params, Stage::Sft1);
        let bytes2 = checkpoint_bytes(&back, Stage::Sft1);
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let params = PolicyParams::init(8);
        let mut bytes = checkpoint_bytes(&params, Stage::Grpo);
        bytes.truncate(bytes.len() - 9);
        assert!(parse_checkpoint(&bytes).is_err());
        let mut bad_magic = checkpoint_bytes(&params, Stage::Grpo);
        bad_magic[0] = b'X';
        assert!(parse_checkpoint(&bad_magic).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let params = PolicyParams::init(123);
        let flat = params.flatten();
        assert_eq!(flat.len(), PolicyParams::param_count());
        let back = PolicyParams::from_flat(&flat).unwrap();
        assert_eq!(back, params);
        assert!(PolicyParams::from_flat(&flat[1..]).is_err());
    }
}
