//! Anchor-based group-relative policy optimization with failure-feedback
//! refinement. Groups pair N perturbed policy samples (plus up to K
//! feedback-refined samples) with the record's positive and negative
//! anchor trajectories; advantages are normalized against the sampled
//! rewards only, and a dual-branch loss pulls positive-advantage members
//! toward tau_pos while pushing negative-advantage members beyond a
//! margin from tau_neg.

use crate::csp::{build_negative_analysis, CspRecord};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::metrics::{pdms, score_trajectory};
use crate::policy::{
    self, act_backward, act_forward, decode_trajectory, encode_features, perturb, pool_forward,
    GroupMask, LearningRates, PolicyGrads, PolicyParams, PoolCache, SceneFeatures,
};
use crate::scenario::{Scene, Trajectory};
use crate::trace::{GrpoTraceStep, MemberReward, MemberRole};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Reward weights: trajectory quality, preference, goal proximity.
pub const W_TRAJ: f64 = 0.5;
pub const W_PREF: f64 = 0.3;
pub const W_GOAL: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    /// Sampled candidates per group.
    pub n: usize,
    /// Maximum refined candidates kept per group.
    pub k: usize,
    /// Feedback threshold: refinement triggers when the best sampled
    /// reward falls below it.
    pub delta: f64,
    /// Std dev of the pooled-feature perturbation.
    pub sigma: f64,
    /// Hinge margin from the negative anchor (meters).
    pub margin: f64,
    /// Numerical-stability constant in the preference denominator.
    pub eta: f64,
    /// Preference clip ceiling.
    pub c_clip: f64,
    /// Goal-reward length scale (meters).
    pub s_goal: f64,
    /// Huber transition threshold (meters).
    pub delta_huber: f64,
    pub epochs: usize,
    pub seed: u64,
    pub lr_pool: f64,
    pub lr_action: f64,
    /// Perturbed redraws attempted during refinement before filtering.
    pub refine_budget: usize,
    /// Ablation toggle: include the anchor pair in the loss group.
    pub use_anchors: bool,
    /// Ablation toggle: enable feedback refinement.
    pub use_feedback: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            n: 6,
            k: 2,
            delta: 0.6,
            sigma: 0.1,
            margin: 1.0,
            eta: 1e-6,
            c_clip: 1.5,
            s_goal: 3.0,
            delta_huber: 1.0,
            epochs: 10,
            seed: 0,
            lr_pool: 1e-3,
            lr_action: 1e-3,
            refine_budget: 8,
            use_anchors: true,
            use_feedback: true,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidConfig(
                "group needs at least 2 sampled members".into(),
            ));
        }
        if !(0.0 < self.delta && self.delta < 1.0) {
            return Err(Error::InvalidConfig("delta must lie in (0,1)".into()));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("margin", self.margin),
            ("eta", self.eta),
            ("c_clip", self.c_clip),
            ("s_goal", self.s_goal),
            ("delta_huber", self.delta_huber),
            ("lr_pool", self.lr_pool),
            ("lr_action", self.lr_action),
        ] {
            if v < 0.0 || (name != "sigma" && v == 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn rates(&self) -> LearningRates {
        LearningRates {
            pool: self.lr_pool,
            action: self.lr_action,
            meta: 0.0,
        }
    }
}

/// Flattened-sequence L2 distance between trajectories: the root of the
/// summed squared per-waypoint Euclidean distances.
pub fn traj_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.waypoints
        .iter()
        .zip(b.waypoints.iter())
        .map(|(x, y)| {
            let d = x.pos() - y.pos();
            d.dot(d)
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_traj: f64,
    pub r_pref: f64,
    pub r_goal: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn combine(r_traj: f64, r_pref: f64, r_goal: f64) -> Self {
        RewardBreakdown {
            r_traj,
            r_pref,
            r_goal,
            total: W_TRAJ * r_traj + W_PREF * r_pref + W_GOAL * r_goal,
        }
    }
}

/// Preference reward: normalized, clipped distance from the negative
/// anchor relative to the anchor separation.
pub fn reward_pref(
    tau: &Trajectory,
    tau_pos: &Trajectory,
    tau_neg: &Trajectory,
    config: &GrpoConfig,
) -> f64 {
    let ratio = traj_distance(tau, tau_neg) / (traj_distance(tau_pos, tau_neg) + config.eta);
    ratio.clamp(0.0, config.c_clip) / config.c_clip
}

/// Goal reward: exponentially decaying in the final displacement error
/// from the positive anchor's endpoint.
pub fn reward_goal(tau: &Trajectory, tau_pos: &Trajectory, config: &GrpoConfig) -> f64 {
    let fde = (tau.waypoints.last().unwrap().pos() - tau_pos.waypoints.last().unwrap().pos())
        .norm();
    (-fde / config.s_goal).exp()
}

/// Scene-level context needed to score group members: the anchor pair and
/// the EP reference progress. Only negative records carry both anchors.
#[derive(Debug, Clone)]
pub struct RewardContext {
    pub scene: Scene,
    pub tau_pos: Trajectory,
    pub tau_neg: Trajectory,
    pub ep_reference: f64,
}

impl RewardContext {
    pub fn from_record(record: &CspRecord) -> Result<Self> {
        let tau_neg = record.tau_neg.clone().ok_or_else(|| {
            Error::InvalidInput(
                "reinforcement needs negative records (both anchors present)".into(),
            )
        })?;
        Ok(RewardContext {
            scene: record.scene.clone(),
            tau_pos: record.tau_pos.clone(),
            tau_neg,
            ep_reference: record.reference_progress(),
        })
    }
}

/// Weighted total reward: PDMS-based trajectory quality plus preference
/// and goal terms.
pub fn reward_total(
    tau: &Trajectory,
    ctx: &RewardContext,
    config: &GrpoConfig,
) -> Result<RewardBreakdown> {
    let sub = score_trajectory(tau, &ctx.scene, ctx.ep_reference)?;
    let r_traj = pdms(&sub);
    let r_pref = reward_pref(tau, &ctx.tau_pos, &ctx.tau_neg, config);
    let r_goal = reward_goal(tau, &ctx.tau_pos, config);
    Ok(RewardBreakdown::combine(r_traj, r_pref, r_goal))
}

/// Which pooled context decoded a member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureContext {
    Base,
    Refined,
}

#[derive(Debug, Clone)]
pub struct GroupMember {
    pub role: MemberRole,
    pub trajectory: Trajectory,
    pub reward: RewardBreakdown,
    /// Perturbed action-head input; `None` for anchors (no gradient path).
    pub input: Option<Vec<f64>>,
    pub context: FeatureContext,
}

/// Pooled feature context: the features and pooling cache needed to
/// backpropagate into the pooling parameters.
#[derive(Debug, Clone)]
pub struct PooledContext {
    pub features: SceneFeatures,
    pub pooled: Vec<f64>,
    pub cache: PoolCache,
}

/// One GRPO step's group: sampled members, refined members, then anchors.
#[derive(Debug, Clone)]
pub struct TrajectoryGroup {
    pub members: Vec<GroupMember>,
    pub base: PooledContext,
    pub refined: Option<PooledContext>,
}

impl TrajectoryGroup {
    pub fn refined_count(&self) -> usize {
        self.members
            .iter()
            .filter(|m| m.role == MemberRole::Refined)
            .count()
    }

    pub fn max_sampled_reward(&self) -> f64 {
        self.members
            .iter()
            .filter(|m| m.role == MemberRole::Sampled)
            .map(|m| m.reward.total)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Draw N perturbed samples from the base pooled feature and score them.
pub fn sample_group(
    ctx: &RewardContext,
    base: &PooledContext,
    params: &PolicyParams,
    config: &GrpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GroupMember>> {
    let mut members = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let input = perturb(&base.pooled, config.sigma, rng);
        let cache = act_forward(&input, params);
        if cache.out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite sample".into()));
        }
        let trajectory = decode_trajectory(&cache.out);
        let reward = reward_total(&trajectory, ctx, config)?;
        members.push(GroupMember {
            role: MemberRole::Sampled,
            trajectory,
            reward,
            input: Some(input),
            context: FeatureContext::Base,
        });
    }
    Ok(members)
}

/// Keep candidates whose reward strictly exceeds `threshold`, in draw
/// order, truncated to `k`.
fn truncate_qualifying(
    candidates: Vec<(Trajectory, RewardBreakdown, Vec<f64>)>,
    threshold: f64,
    k: usize,
) -> Vec<(Trajectory, RewardBreakdown, Vec<f64>)> {
    candidates
        .into_iter()
        .filter(|(_, r, _)| r.total > threshold)
        .take(k)
        .collect()
}

/// Feedback refinement: when the best sampled reward misses the threshold,
/// analyze the worst sample against tau_pos, re-encode the scene with the
/// analysis slot filled, redraw up to `refine_budget` samples, and keep
/// the first K that strictly beat the sampled maximum.
pub fn feedback_refine(
    sampled: &[GroupMember],
    ctx: &RewardContext,
    record: &CspRecord,
    params: &PolicyParams,
    config: &GrpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<GroupMember>, Option<PooledContext>)> {
    let max_reward = sampled
        .iter()
        .map(|m| m.reward.total)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_reward >= config.delta {
        return Ok((vec![], None));
    }
    let worst = sampled
        .iter()
        .min_by(|a, b| a.reward.total.partial_cmp(&b.reward.total).unwrap())
        .expect("sampled group is non-empty");
    let entries = record
        .analysis
        .as_ref()
        .map(|a| a.counterfactual_analysis.clone())
        .unwrap_or_default();
    let analysis = build_negative_analysis(&worst.trajectory, &ctx.tau_pos, &entries)?;
    let features = encode_features(&ctx.scene, Some(&analysis));
    let (pooled, cache) = pool_forward(&features, params);
    let mut drawn = Vec::with_capacity(config.refine_budget);
    for _ in 0..config.refine_budget {
        let input = perturb(&pooled, config.sigma, rng);
        let act = act_forward(&input, params);
        if act.out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite refined sample".into()));
        }
        let trajectory = decode_trajectory(&act.out);
        let reward = reward_total(&trajectory, ctx, config)?;
        drawn.push((trajectory, reward, input));
    }
    let kept = truncate_qualifying(drawn, max_reward, config.k);
    let members = kept
        .into_iter()
        .map(|(trajectory, reward, input)| GroupMember {
            role: MemberRole::Refined,
            trajectory,
            reward,
            input: Some(input),
            context: FeatureContext::Refined,
        })
        .collect();
    Ok((
        members,
        Some(PooledContext {
            features,
            pooled,
            cache,
        }),
    ))
}

fn anchor_members(ctx: &RewardContext, config: &GrpoConfig) -> Result<[GroupMember; 2]> {
    let pos_reward = reward_total(&ctx.tau_pos, ctx, config)?;
    let neg_reward = reward_total(&ctx.tau_neg, ctx, config)?;
    Ok([
        GroupMember {
            role: MemberRole::AnchorPos,
            trajectory: ctx.tau_pos.clone(),
            reward: pos_reward,
            input: None,
            context: FeatureContext::Base,
        },
        GroupMember {
            role: MemberRole::AnchorNeg,
            trajectory: ctx.tau_neg.clone(),
            reward: neg_reward,
            input: None,
            context: FeatureContext::Base,
        },
    ])
}

/// Assemble the full group for one record: sampled members, refined
/// members (when feedback triggers), then the anchor pair.
pub fn build_group(
    record: &CspRecord,
    params: &PolicyParams,
    config: &GrpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(TrajectoryGroup, RewardContext)> {
    let ctx = RewardContext::from_record(record)?;
    let features = encode_features(&ctx.scene, None);
    let (pooled, cache) = pool_forward(&features, params);
    let base = PooledContext {
        features,
        pooled,
        cache,
    };
    let mut members = sample_group(&ctx, &base, params, config, rng)?;
    let mut refined_ctx = None;
    if config.use_feedback {
        let (refined, rctx) = feedback_refine(&members, &ctx, record, params, config, rng)?;
        members.extend(refined);
        refined_ctx = rctx;
    }
    if config.use_anchors {
        members.extend(anchor_members(&ctx, config)?);
    }
    Ok((
        TrajectoryGroup {
            members,
            base,
            refined: refined_ctx,
        },
        ctx,
    ))
}

/// Group-relative advantages: mean/std over sampled and refined rewards
/// only (population std, guarded at 1e-8); every member, anchors included,
/// receives an advantage against those statistics.
pub fn normalize_advantages(group: &TrajectoryGroup) -> Result<Vec<f64>> {
    let sample_rewards: Vec<f64> = group
        .members
        .iter()
        .filter(|m| matches!(m.role, MemberRole::Sampled | MemberRole::Refined))
        .map(|m| m.reward.total)
        .collect();
    if sample_rewards.len() < 2 {
        return Err(Error::InvalidInput(
            "advantage normalization needs at least 2 sampled rewards".into(),
        ));
    }
    let n = sample_rewards.len() as f64;
    let lo = sample_rewards.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sample_rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Identical rewards: take the exact common value as the mean so the
    // sampled advantages come out exactly zero under the std guard.
    let mean = if lo == hi {
        lo
    } else {
        sample_rewards.iter().sum::<f64>() / n
    };
    let var = sample_rewards
        .iter()
        .map(|r| (r - mean) * (r - mean))
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(1e-8);
    Ok(group
        .members
        .iter()
        .map(|m| (m.reward.total - mean) / std)
        .collect())
}

/// Per-waypoint Huber distance: quadratic in the L2 norm while the
/// waypoint's L1 error stays at or below the threshold, linear in the L1
/// norm beyond it; averaged over waypoints.
pub fn huber_distance(tau: &Trajectory, tau_pos: &Trajectory, delta: f64) -> f64 {
    let n = tau.len() as f64;
    tau.waypoints
        .iter()
        .zip(tau_pos.waypoints.iter())
        .map(|(a, b)| {
            let e = a.pos() - b.pos();
            let l1 = e.x.abs() + e.y.abs();
            if l1 <= delta {
                0.5 * e.dot(e)
            } else {
                delta * (l1 - 0.5 * delta)
            }
        })
        .sum::<f64>()
        / n
}

/// Gradient of [`huber_distance`] w.r.t. `tau`'s waypoints. At the kink
/// (waypoint L1 error exactly at the threshold) the quadratic branch
/// applies, matching the `<=` switch condition.
fn huber_grad(tau: &Trajectory, tau_pos: &Trajectory, delta: f64) -> Vec<Vec2> {
    let n = tau.len() as f64;
    tau.waypoints
        .iter()
        .zip(tau_pos.waypoints.iter())
        .map(|(a, b)| {
            let e = a.pos() - b.pos();
            let l1 = e.x.abs() + e.y.abs();
            if l1 <= delta {
                e * (1.0 / n)
            } else {
                Vec2::new(delta * e.x.signum(), delta * e.y.signum()) * (1.0 / n)
            }
        })
        .collect()
}

/// Advantage-weighted dual-branch loss over the whole group, with
/// analytic gradients through the sampled and refined members only
/// (anchors contribute loss value but are parameter-constant; advantages
/// are treated as constants).
pub fn dual_branch_loss(
    group: &TrajectoryGroup,
    advantages: &[f64],
    ctx: &RewardContext,
    params: &PolicyParams,
    config: &GrpoConfig,
) -> Result<(f64, PolicyGrads)> {
    if advantages.len() != group.members.len() {
        return Err(Error::InvalidInput("advantage count mismatch".into()));
    }
    let count = group.members.len() as f64;
    let mut loss = 0.0;
    let mut grads = PolicyGrads::zeros();
    let mut d_pooled_base = vec![0.0f64; policy::DIM];
    let mut d_pooled_refined = vec![0.0f64; policy::DIM];
    let mut any_refined_grad = false;
    for (member, &adv) in group.members.iter().zip(advantages.iter()) {
        // Re-decode gradient-bearing members from their stored inputs so
        // the loss value and the gradient path share one forward pass.
        let cache = member.input.as_ref().map(|input| act_forward(input, params));
        let trajectory = match &cache {
            Some(c) => decode_trajectory(&c.out),
            None => member.trajectory.clone(),
        };
        let (term, d_wp) = if adv >= 0.0 {
            let h = huber_distance(&trajectory, &ctx.tau_pos, config.delta_huber);
            let d_wp: Vec<Vec2> = huber_grad(&trajectory, &ctx.tau_pos, config.delta_huber)
                .into_iter()
                .map(|g| g * (adv / count))
                .collect();
            (adv * h, d_wp)
        } else {
            let d = traj_distance(&trajectory, &ctx.tau_neg);
            let hinge = (config.margin - d).max(0.0);
            let mut d_wp = vec![Vec2::ZERO; trajectory.len()];
            if d < config.margin && d > 0.0 {
                let k = -adv.abs() / (d * count);
                for (g, (a, b)) in d_wp
                    .iter_mut()
                    .zip(trajectory.waypoints.iter().zip(ctx.tau_neg.waypoints.iter()))
                {
                    *g = (a.pos() - b.pos()) * k;
                }
            }
            (adv.abs() * hinge, d_wp)
        };
        loss += term / count;
        let Some(cache) = cache else {
            continue;
        };
        if d_wp.iter().all(|g| g.x == 0.0 && g.y == 0.0) {
            continue;
        }
        let d_out = policy::waypoint_grads_to_out(&d_wp);
        let dx = act_backward(&cache, params, &d_out, &mut grads);
        match member.context {
            FeatureContext::Base => {
                for (acc, v) in d_pooled_base.iter_mut().zip(dx.iter()) {
                    *acc += v;
                }
            }
            FeatureContext::Refined => {
                any_refined_grad = true;
                for (acc, v) in d_pooled_refined.iter_mut().zip(dx.iter()) {
                    *acc += v;
                }
            }
        }
    }
    policy::pool_backward(&group.base.features, &group.base.cache, &d_pooled_base, &mut grads);
    if any_refined_grad {
        let refined = group
            .refined
            .as_ref()
            .expect("refined members imply a refined context");
        policy::pool_backward(&refined.features, &refined.cache, &d_pooled_refined, &mut grads);
    }
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Divergence("non-finite dual-branch loss".into()));
    }
    Ok((loss, grads))
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Full reinforcement loop over the negative records of a dataset. Only
/// the pooling and action-head parameter groups are updated; the meta
/// head and encoder stay frozen.
pub fn train_grpo(
    records: &[CspRecord],
    params: &mut PolicyParams,
    config: &GrpoConfig,
) -> Result<Vec<GrpoTraceStep>> {
    config.validate()?;
    let neg: Vec<&CspRecord> = records.iter().filter(|r| r.tau_neg.is_some()).collect();
    if neg.is_empty() {
        return Err(Error::InvalidInput(
            "reinforcement needs negative records".into(),
        ));
    }
    let mut sample_rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x6770));
    let mut trace = Vec::new();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..neg.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0xE70C + epoch as u64));
        order.shuffle(&mut shuffle_rng);
        for &idx in &order {
            let record = neg[idx];
            let (group, ctx) = build_group(record, params, config, &mut sample_rng)?;
            let advantages = normalize_advantages(&group)?;
            let (loss, grads) = dual_branch_loss(&group, &advantages, &ctx, params, config)?;
            let norms = grads.group_norms();
            policy::update(params, &grads, &config.rates(), &GroupMask::POLICY_ONLY);
            if !params.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite parameters after step {step}"
                )));
            }
            trace.push(GrpoTraceStep {
                step,
                epoch,
                scene_id: record.scene.id(),
                rewards: group
                    .members
                    .iter()
                    .map(|m| MemberReward {
                        role: m.role,
                        reward: m.reward.total,
                    })
                    .collect(),
                advantages,
                loss,
                refined_count: group.refined_count(),
                grad_norm_pool: norms.pool,
                grad_norm_action: norms.action,
            });
            step += 1;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csp::build_record;
    use crate::scenario::{generate_scene, Template, Waypoint, RATE_HZ};

    fn neg_record(template: Template, seed: u64) -> CspRecord {
        let scene = generate_scene(template, seed);
        let record = build_record(&scene).unwrap();
        assert!(record.tau_neg.is_some(), "{template}:{seed} is not Neg");
        record
    }

    fn traj_of(points: &[(f64, f64)]) -> Trajectory {
        Trajectory::new(
            points
                .iter()
                .enumerate()
                .map(|(k, (x, y))| Waypoint::new(*x, *y, (k + 1) as f64 * 0.5))
                .collect(),
            RATE_HZ,
        )
    }

    #[test]
    fn pref_reward_bounds_and_anchors() {
        let config = GrpoConfig::default();
        let record = neg_record(Template::LeadBrake, 0);
        let ctx = RewardContext::from_record(&record).unwrap();
        assert_eq!(reward_pref(&ctx.tau_neg, &ctx.tau_pos, &ctx.tau_neg, &config), 0.0);
        let at_pos = reward_pref(&ctx.tau_pos, &ctx.tau_pos, &ctx.tau_neg, &config);
        assert!(
            (at_pos - 1.0 / 1.5).abs() < 1e-6,
            "tau_pos scores 1/c_clip: {at_pos}"
        );
        // Saturation: three halves of the anchor separation away.
        let d = traj_distance(&ctx.tau_pos, &ctx.tau_neg);
        let mut far = ctx.tau_neg.clone();
        let shift = 1.6 * d / (far.waypoints.len() as f64).sqrt();
        for w in &mut far.waypoints {
            w.y += shift;
        }
        assert_eq!(reward_pref(&far, &ctx.tau_pos, &ctx.tau_neg, &config), 1.0);
    }

    #[test]
    fn goal_reward_examples() {
        let config = GrpoConfig::default();
        let tau_pos = traj_of(&[(1.0, 0.0); 8]);
        assert_eq!(reward_goal(&tau_pos, &tau_pos, &config), 1.0);
        let mut fde3 = tau_pos.clone();
        fde3.waypoints[7].x += 3.0;
        let r = reward_goal(&fde3, &tau_pos, &config);
        assert!((r - (-1.0f64).exp()).abs() < 1e-12, "e^-1: {r}");
        let mut fde30 = tau_pos.clone();
        fde30.waypoints[7].y += 30.0;
        let r30 = reward_goal(&fde30, &tau_pos, &config);
        assert!(r30 > 0.0 && (r30 - (-10.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn reward_combination_weights() {
        let r = RewardBreakdown::combine(1.0, 1.0, 1.0);
        assert_eq!(r.total, 1.0);
        let r = RewardBreakdown::combine(0.916667, 0.666667, 1.0);
        assert!((r.total - 0.858333).abs() < 1e-6, "weighted sum {}", r.total);
        let gated = RewardBreakdown::combine(0.0, 0.5, 0.5);
        assert!((gated.total - (0.3 * 0.5 + 0.2 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn reward_total_on_anchors() {
        let config = GrpoConfig::default();
        let record = neg_record(Template::LeadBrake, 1);
        let ctx = RewardContext::from_record(&record).unwrap();
        let pos = reward_total(&ctx.tau_pos, &ctx, &config).unwrap();
        let neg = reward_total(&ctx.tau_neg, &ctx, &config).unwrap();
        assert!(pos.total > neg.total, "{} vs {}", pos.total, neg.total);
        for r in [pos, neg] {
            assert!((0.0..=1.0).contains(&r.total));
            assert!((0.0..=1.0).contains(&r.r_pref));
            assert!(r.r_goal > 0.0 && r.r_goal <= 1.0);
        }
    }

    #[test]
    fn reward_context_rejects_positive_records() {
        let scene = generate_scene(Template::FreeRoad, 0);
        let record = build_record(&scene).unwrap();
        assert!(RewardContext::from_record(&record).is_err());
    }

    fn base_context(record: &CspRecord, params: &PolicyParams) -> (RewardContext, PooledContext) {
        let ctx = RewardContext::from_record(record).unwrap();
        let features = encode_features(&ctx.scene, None);
        let (pooled, cache) = pool_forward(&features, params);
        (
            ctx,
            PooledContext {
                features,
                pooled,
                cache,
            },
        )
    }

    #[test]
    fn sampling_zero_sigma_collapses() {
        let record = neg_record(Template::LeadBrake, 2);
        let params = PolicyParams::init(0);
        let config = GrpoConfig {
            sigma: 0.0,
            ..GrpoConfig::default()
        };
        let (ctx, base) = base_context(&record, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let members = sample_group(&ctx, &base, &params, &config, &mut rng).unwrap();
        assert_eq!(members.len(), 6);
        for m in &members[1..] {
            assert_eq!(m.trajectory, members[0].trajectory);
            assert_eq!(m.reward.total, members[0].reward.total);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic_with_spread() {
        let record = neg_record(Template::LeadBrake, 2);
        let params = PolicyParams::init(7);
        let config = GrpoConfig::default();
        let (ctx, base) = base_context(&record, &params);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let g1 = sample_group(&ctx, &base, &params, &config, &mut r1).unwrap();
        let g2 = sample_group(&ctx, &base, &params, &config, &mut r2).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(a.trajectory, b.trajectory);
        }
        // Perturbation produces genuinely distinct candidates.
        let distinct: std::collections::BTreeSet<String> = g1
            .iter()
            .map(|m| format!("{:.9}", m.reward.total))
            .collect();
        assert!(distinct.len() >= 2, "no reward spread: {distinct:?}");
    }

    #[test]
    fn refine_skipped_above_threshold() {
        let record = neg_record(Template::LeadBrake, 2);
        let params = PolicyParams::init(7);
        let config = GrpoConfig {
            delta: 1e-9, // any sampled reward clears the bar
            ..GrpoConfig::default()
        };
        let (ctx, base) = base_context(&record, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sampled = sample_group(&ctx, &base, &params, &config, &mut rng).unwrap();
        let (refined, rctx) =
            feedback_refine(&sampled, &ctx, &record, &params, &config, &mut rng).unwrap();
        assert!(refined.is_empty());
        assert!(rctx.is_none());
    }

    #[test]
    fn refine_keeps_only_strict_improvements() {
        let record = neg_record(Template::LeadBrake, 2);
        let params = PolicyParams::init(7);
        let config = GrpoConfig::default(); // delta 0.6; untrained rewards are low
        let (ctx, base) = base_context(&record, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sampled = sample_group(&ctx, &base, &params, &config, &mut rng).unwrap();
        let max_sampled = sampled
            .iter()
            .map(|m| m.reward.total)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(max_sampled < config.delta, "fixture must trigger refinement");
        let (refined, rctx) =
            feedback_refine(&sampled, &ctx, &record, &params, &config, &mut rng).unwrap();
        assert!(rctx.is_some());
        assert!(refined.len() <= config.k);
        for m in &refined {
            assert!(m.reward.total > max_sampled);
            assert_eq!(m.role, MemberRole::Refined);
        }
    }

    #[test]
    fn truncation_rule() {
        let t = traj_of(&[(0.0, 0.0); 8]);
        let mk = |total: f64| {
            (
                t.clone(),
                RewardBreakdown {
                    r_traj: total,
                    r_pref: 0.0,
                    r_goal: 0.0,
                    total,
                },
                vec![0.0; policy::DIM],
            )
        };
        // Three qualify (> 0.5); exactly two kept, in draw order.
        let kept = truncate_qualifying(vec![mk(0.6), mk(0.4), mk(0.9), mk(0.7)], 0.5, 2);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].1.total, 0.6);
        assert_eq!(kept[1].1.total, 0.9);
        // None qualify: empty set, training proceeds.
        assert!(truncate_qualifying(vec![mk(0.1), mk(0.2)], 0.5, 2).is_empty());
    }

    fn synthetic_group(rewards: &[f64], anchor_rewards: Option<(f64, f64)>) -> TrajectoryGroup {
        let t = traj_of(&[(1.0, 1.0); 8]);
        let params = PolicyParams::init(0);
        let record = neg_record(Template::LeadBrake, 2);
        let (_, base) = base_context(&record, &params);
        let mut members: Vec<GroupMember> = rewards
            .iter()
            .map(|&r| GroupMember {
                role: MemberRole::Sampled,
                trajectory: t.clone(),
                reward: RewardBreakdown {
                    r_traj: r,
                    r_pref: 0.0,
                    r_goal: 0.0,
                    total: r,
                },
                input: None,
                context: FeatureContext::Base,
            })
            .collect();
        if let Some((rp, rn)) = anchor_rewards {
            for (role, r) in [(MemberRole::AnchorPos, rp), (MemberRole::AnchorNeg, rn)] {
                members.push(GroupMember {
                    role,
                    trajectory: t.clone(),
                    reward: RewardBreakdown {
                        r_traj: r,
                        r_pref: 0.0,
                        r_goal: 0.0,
                        total: r,
                    },
                    input: None,
                    context: FeatureContext::Base,
                });
            }
        }
        TrajectoryGroup {
            members,
            base,
            refined: None,
        }
    }

    #[test]
    fn advantages_hand_computed() {
        // Sampled rewards {0, 1}: population mean 0.5, std 0.5.
        let group = synthetic_group(&[0.0, 1.0], None);
        let adv = normalize_advantages(&group).unwrap();
        assert!((adv[0] + 1.0).abs() < 1e-12);
        assert!((adv[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn advantages_constant_rewards_guarded() {
        let group = synthetic_group(&[0.4, 0.4, 0.4], None);
        let adv = normalize_advantages(&group).unwrap();
        assert!(adv.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn advantages_exclude_anchors_from_stats() {
        let with_anchors = synthetic_group(&[0.0, 1.0], Some((0.9, 0.1)));
        let adv = normalize_advantages(&with_anchors).unwrap();
        assert!((adv[0] + 1.0).abs() < 1e-12);
        assert!((adv[1] - 1.0).abs() < 1e-12);
        assert!((adv[2] - 0.8).abs() < 1e-12, "anchor pos {}", adv[2]);
        assert!((adv[3] + 0.8).abs() < 1e-12, "anchor neg {}", adv[3]);
        // Removing the anchors leaves the sampled advantages unchanged.
        let without = synthetic_group(&[0.0, 1.0], None);
        let adv2 = normalize_advantages(&without).unwrap();
        assert_eq!(adv[..2], adv2[..]);
    }

    #[test]
    fn advantages_need_two_samples() {
        let group = synthetic_group(&[0.5], None);
        assert!(normalize_advantages(&group).is_err());
    }

    #[test]
    fn huber_examples() {
        let tau_pos = traj_of(&[(1.0, 2.0); 8]);
        assert_eq!(huber_distance(&tau_pos, &tau_pos, 1.0), 0.0);
        // Small offset: quadratic branch. 0.3 m in x per waypoint.
        let mut near = tau_pos.clone();
        for w in &mut near.waypoints {
            w.x += 0.3;
        }
        let h = huber_distance(&near, &tau_pos, 1.0);
        assert!((h - 0.5 * 0.09).abs() < 1e-12);
        // Large offset: linear branch. 3 m in x per waypoint.
        let mut far = tau_pos.clone();
        for w in &mut far.waypoints {
            w.x += 3.0;
        }
        let h = huber_distance(&far, &tau_pos, 1.0);
        assert!((h - (3.0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn dual_branch_term_values() {
        let record = neg_record(Template::LeadBrake, 2);
        let params = PolicyParams::init(0);
        let ctx = RewardContext::from_record(&record).unwrap();
        let config = GrpoConfig::default();

        // Member at tau_pos with positive advantage: zero term.
        let (_, base) = base_context(&record, &params);
        let group = TrajectoryGroup {
            members: vec![GroupMember {
                role: MemberRole::AnchorPos,
                trajectory: ctx.tau_pos.clone(),
                reward: RewardBreakdown::combine(1.0, 1.0, 1.0),
                input: None,
                context: FeatureContext::Base,
            }],
            base: base.clone(),
            refined: None,
        };
        let (loss, _) = dual_branch_loss(&group, &[1.0], &ctx, &params, &config).unwrap();
        assert_eq!(loss, 0.0);

        // Negative advantage far from tau_neg: hinge satisfied, zero term.
        let mut far = ctx.tau_neg.clone();
        for w in &mut far.waypoints {
            w.y += 5.0;
        }
        let group = TrajectoryGroup {
            members: vec![GroupMember {
                role: MemberRole::Sampled,
                trajectory: far,
                reward: RewardBreakdown::combine(0.0, 0.0, 0.0),
                input: None,
                context: FeatureContext::Base,
            }],
            base: base.clone(),
            refined: None,
        };
        let (loss, _) = dual_branch_loss(&group, &[-1.0], &ctx, &params, &config).unwrap();
        assert_eq!(loss, 0.0);

        // Negative advantage 0.4 m from tau_neg: term 0.6.
        let mut near = ctx.tau_neg.clone();
        near.waypoints[0].x += 0.4;
        assert!((traj_distance(&near, &ctx.tau_neg) - 0.4).abs() < 1e-12);
        let group = TrajectoryGroup {
            members: vec![GroupMember {
                role: MemberRole::Sampled,
                trajectory: near,
                reward: RewardBreakdown::combine(0.0, 0.0, 0.0),
                input: None,
                context: FeatureContext::Base,
            }],
            base,
            refined: None,
        };
        let (loss, _) = dual_branch_loss(&group, &[-1.0], &ctx, &params, &config).unwrap();
        assert!((loss - 0.6).abs() < 1e-12, "hinge term {loss}");
    }

    #[test]
    fn positive_branch_pull_after_one_step() {
        // One positive-advantage member (grads active) and one negative
        // member far outside the margin (no grads): a small step must
        // shrink the positive member's Huber distance to tau_pos under the
        // same noise.
        let record = neg_record(Template::LeadBrake, 3);
        let mut params = PolicyParams::init(3);
        let config = GrpoConfig {
            lr_pool: 1e-4,
            lr_action: 1e-4,
            ..GrpoConfig::default()
        };
        let (ctx, base) = base_context(&record, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut members = sample_group(&ctx, &base, &params, &config, &mut rng).unwrap();
        members.truncate(2);
        let noise: Vec<Vec<f64>> = members
            .iter()
            .map(|m| {
                m.input
                    .as_ref()
                    .unwrap()
                    .iter()
                    .zip(base.pooled.iter())
                    .map(|(x, p)| x - p)
                    .collect()
            })
            .collect();
        // Untrained outputs sit near the origin, far from tau_neg (> margin).
        for m in &members {
            assert!(traj_distance(&m.trajectory, &ctx.tau_neg) > config.margin);
        }
        let group = TrajectoryGroup {
            members,
            base,
            refined: None,
        };
        let advantages = vec![1.0, -1.0];
        let before = huber_distance(
            &group.members[0].trajectory,
            &ctx.tau_pos,
            config.delta_huber,
        );
        let (_, grads) =
            dual_branch_loss(&group, &advantages, &ctx, &params, &config).unwrap();
        policy::update(&mut params, &grads, &config.rates(), &GroupMask::POLICY_ONLY);
        // Re-run the same member with the same noise under updated params.
        let features = encode_features(&ctx.scene, None);
        let pooled = policy::pool(&features, &params);
        let input: Vec<f64> = pooled.iter().zip(noise[0].iter()).map(|(p, n)| p + n).collect();
        let after_traj = decode_trajectory(&act_forward(&input, &params).out);
        let after = huber_distance(&after_traj, &ctx.tau_pos, config.delta_huber);
        assert!(after < before, "pull failed: {after} >= {before}");
    }

    #[test]
    fn zero_spread_group_takes_zero_step() {
        let record = neg_record(Template::CutIn, 1);
        let mut params = PolicyParams::init(2);
        let config = GrpoConfig {
            sigma: 0.0,
            use_feedback: false,
            ..GrpoConfig::default()
        };
        let before = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (group, ctx) = build_group(&record, &params, &config, &mut rng).unwrap();
        let advantages = normalize_advantages(&group).unwrap();
        // All sampled rewards equal: every sampled advantage is zero.
        for (m, a) in group.members.iter().zip(advantages.iter()) {
            if m.role == MemberRole::Sampled {
                assert_eq!(*a, 0.0);
            }
        }
        let (_, grads) = dual_branch_loss(&group, &advantages, &ctx, &params, &config).unwrap();
        policy::update(&mut params, &grads, &config.rates(), &GroupMask::POLICY_ONLY);
        assert_eq!(params, before, "anchors alone must not move parameters");
    }

    #[test]
    fn train_grpo_is_deterministic() {
        let records: Vec<CspRecord> = (0..4)
            .map(|s| neg_record(Template::LeadBrake, s))
            .collect();
        let config = GrpoConfig {
            epochs: 2,
            ..GrpoConfig::default()
        };
        let mut p1 = PolicyParams::init(1);
        let t1 = train_grpo(&records, &mut p1, &config).unwrap();
        let mut p2 = PolicyParams::init(1);
        let t2 = train_grpo(&records, &mut p2, &config).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(t1, t2);
        assert_eq!(t1.len(), 8);
        // Meta head stays frozen throughout.
        assert_eq!(p1.wm, PolicyParams::init(1).wm);
    }

    #[test]
    fn train_grpo_needs_negative_records() {
        let scene = generate_scene(Template::FreeRoad, 0);
        let records = vec![build_record(&scene).unwrap()];
        let mut params = PolicyParams::init(0);
        assert!(train_grpo(&records, &mut params, &GrpoConfig::default()).is_err());
    }
}
