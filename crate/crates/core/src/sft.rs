//! Curriculum supervised fine-tuning. Stage 1 trains on positive records
//! only; stage 2 mixes positive records with negative correction records
//! whose encoder input carries the analysis block and whose target is the
//! counterfactual positive trajectory. The joint objective is
//! `L_total = L_text + alpha * L_traj` with `alpha` rebalanced per batch
//! from the two gradient norms.

use crate::csp::CspRecord;
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::policy::{
    self, act_backward, act_forward, decode_trajectory, direction_class, encode_features,
    meta_backward, meta_forward, pool_backward, pool_forward, speed_class, GroupMask,
    LearningRates, PolicyGrads, PolicyParams, SceneFeatures, META_GROUPS, META_OUT, TRAJ_STEPS,
};
use crate::scenario::{DrivingCommand, Trajectory};
use crate::trace::SftTraceStep;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    /// Base multiplier on the per-batch norm-ratio alpha rule.
    pub alpha: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Fraction of each stage-2 batch drawn from positive records.
    pub mix_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_pool: f64,
    pub lr_action: f64,
    pub lr_meta: f64,
    /// Stage-2 ablation toggle: condition negative records on their
    /// analysis block.
    pub analysis_conditioning: bool,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            alpha: 1.0,
            epochs_stage1: 15,
            epochs_stage2: 5,
            mix_ratio: 0.5,
            batch_size: 8,
            seed: 0,
            lr_pool: 1e-3,
            lr_action: 1e-3,
            lr_meta: 1e-3,
            analysis_conditioning: true,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::InvalidConfig("sft alpha must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::InvalidConfig("mix_ratio must lie in [0,1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn rates(&self) -> LearningRates {
        LearningRates {
            pool: self.lr_pool,
            action: self.lr_action,
            meta: self.lr_meta,
        }
    }
}

/// Clip range for the per-batch gradient-balance factor.
pub const ALPHA_MIN: f64 = 0.1;
pub const ALPHA_MAX: f64 = 10.0;

/// Per-batch alpha: base * |g_text| / (|g_traj| + 1e-8), clipped.
pub fn compute_alpha(base: f64, text_grad_norm: f64, traj_grad_norm: f64) -> f64 {
    (base * text_grad_norm / (traj_grad_norm + 1e-8)).clamp(ALPHA_MIN, ALPHA_MAX)
}

/// Mean squared waypoint error and its gradient w.r.t. the prediction.
pub fn traj_loss(pred: &Trajectory, target: &Trajectory) -> Result<(f64, Vec<Vec2>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::InvalidInput(format!(
            "trajectory length mismatch: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.waypoints.iter().zip(target.waypoints.iter()) {
        let d = p.pos() - t.pos();
        loss += d.dot(d);
        grads.push(d * (2.0 / n));
    }
    Ok((loss / n, grads))
}

/// Sum of four cross-entropy terms (speed and direction per window) with
/// the gradient w.r.t. the logits.
pub fn text_loss(
    meta_logits: &[f64],
    target: &(DrivingCommand, DrivingCommand),
) -> (f64, Vec<f64>) {
    debug_assert_eq!(meta_logits.len(), META_OUT);
    let classes = [
        speed_class(target.0.speed_decision),
        direction_class(target.0.direction_decision),
        speed_class(target.1.speed_decision),
        direction_class(target.1.direction_decision),
    ];
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; META_OUT];
    for (g, (lo, hi)) in META_GROUPS.iter().enumerate() {
        let logits = &meta_logits[*lo..*hi];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let target_idx = classes[g];
        // -log softmax[target], numerically stable.
        loss += z.ln() + max - logits[target_idx];
        for (i, e) in exps.iter().enumerate() {
            grad[lo + i] = e / z - if i == target_idx { 1.0 } else { 0.0 };
        }
    }
    (loss, grad)
}

/// One supervised sample: encoded features plus trajectory/meta targets.
#[derive(Debug, Clone)]
pub struct SftSample {
    pub features: SceneFeatures,
    pub target_traj: Trajectory,
    pub target_meta: (DrivingCommand, DrivingCommand),
}

/// Build the supervised sample for a record. Negative records may be
/// conditioned on their analysis block (stage 2); the target is always
/// tau_pos and the meta-actions derived from it.
pub fn sample_from_record(record: &CspRecord, with_analysis: bool) -> SftSample {
    let analysis = if with_analysis {
        record.analysis.as_ref()
    } else {
        None
    };
    SftSample {
        features: encode_features(&record.scene, analysis),
        target_traj: record.tau_pos.clone(),
        target_meta: record.cot.meta_actions,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_text: f64,
    pub loss_traj: f64,
    pub alpha: f64,
    pub grad_norm: f64,
}

/// Accumulate the batch-mean trajectory and text losses with their
/// separate gradient vectors.
fn batch_losses(
    batch: &[SftSample],
    params: &PolicyParams,
) -> Result<(f64, PolicyGrads, f64, PolicyGrads)> {
    let scale = 1.0 / batch.len() as f64;
    let mut g_traj = PolicyGrads::zeros();
    let mut g_text = PolicyGrads::zeros();
    let mut loss_traj = 0.0;
    let mut loss_text = 0.0;
    for sample in batch {
        let (pooled, pool_cache) = pool_forward(&sample.features, params);
        let act_cache = act_forward(&pooled, params);
        let pred = decode_trajectory(&act_cache.out);
        let (lt, d_wp) = traj_loss(&pred, &sample.target_traj)?;
        loss_traj += lt * scale;
        let d_wp: Vec<Vec2> = d_wp.iter().map(|g| *g * scale).collect();
        let d_out = policy::waypoint_grads_to_out(&d_wp);
        let dx = act_backward(&act_cache, params, &d_out, &mut g_traj);
        pool_backward(&sample.features, &pool_cache, &dx, &mut g_traj);

        let logits = meta_forward(&pooled, params);
        let (lx, mut d_logits) = text_loss(&logits, &sample.target_meta);
        loss_text += lx * scale;
        for d in d_logits.iter_mut() {
            *d *= scale;
        }
        let dx_text = meta_backward(&pooled, params, &d_logits, &mut g_text);
        pool_backward(&sample.features, &pool_cache, &dx_text, &mut g_text);
    }
    Ok((loss_traj, g_traj, loss_text, g_text))
}

/// One optimizer step on a batch: balance the two loss gradients with the
/// norm-ratio alpha, update all parameter groups.
pub fn joint_step(
    batch: &[SftSample],
    params: &mut PolicyParams,
    config: &SftConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let (loss_traj, g_traj, loss_text, g_text) = batch_losses(batch, params)?;
    let alpha = compute_alpha(config.alpha, g_text.l2_norm(), g_traj.l2_norm());
    let loss_total = loss_text + alpha * loss_traj;
    if !loss_total.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss: text {loss_text}, traj {loss_traj}"
        )));
    }
    let mut total = g_text;
    total.add_scaled(&g_traj, alpha);
    if !total.is_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    let grad_norm = total.l2_norm();
    policy::update(params, &total, &config.rates(), &GroupMask::ALL);
    Ok(StepStats {
        loss_total,
        loss_text,
        loss_traj,
        alpha,
        grad_norm,
    })
}

fn trace_step(step: usize, stage: &str, stats: &StepStats) -> SftTraceStep {
    SftTraceStep {
        step,
        stage: stage.to_string(),
        loss_total: stats.loss_total,
        loss_text: stats.loss_text,
        loss_traj: stats.loss_traj,
        alpha: stats.alpha,
        grad_norm: stats.grad_norm,
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stage 1: positive-only training on (tau_pos, meta-action) targets with
/// deterministic per-epoch shuffling.
pub fn train_stage1(
    records: &[CspRecord],
    params: &mut PolicyParams,
    config: &SftConfig,
) -> Result<Vec<SftTraceStep>> {
    config.validate()?;
    let samples: Vec<SftSample> = records
        .iter()
        .filter(|r| r.label.is_pos())
        .map(|r| sample_from_record(r, false))
        .collect();
    if samples.is_empty() {
        return Err(Error::InvalidInput(
            "stage 1 needs at least one positive record".into(),
        ));
    }
    let mut trace = Vec::new();
    let mut step = 0usize;
    for epoch in 0..config.epochs_stage1 {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x5f71 + epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<SftSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let stats = joint_step(&batch, params, config)?;
            trace.push(trace_step(step, "sft1", &stats));
            step += 1;
        }
    }
    Ok(trace)
}

/// Deterministic cycling sampler: shuffled order, reshuffled on exhaustion.
struct Cycler {
    order: Vec<usize>,
    at: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Cycler { order, at: 0, rng }
    }

    fn next(&mut self) -> usize {
        if self.at == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.at = 0;
        }
        let v = self.order[self.at];
        self.at += 1;
        v
    }
}

/// Label sequence for one stage-2 batch: positives and negatives
/// interleaved so every batch carries exactly
/// `round(batch_size * mix_ratio)` positives.
pub(crate) fn stage2_batch_labels(batch_size: usize, mix_ratio: f64) -> Vec<bool> {
    let pos_count = ((batch_size as f64) * mix_ratio).round() as usize;
    let pos_count = pos_count.min(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    // Alternate starting with a positive; append leftovers of whichever
    // side remains.
    let mut p = 0usize;
    let mut n = 0usize;
    for i in 0..batch_size {
        let want_pos = if p < pos_count && n < batch_size - pos_count {
            i % 2 == 0
        } else {
            p < pos_count
        };
        labels.push(want_pos);
        if want_pos {
            p += 1;
        } else {
            n += 1;
        }
    }
    labels
}

/// Stage 2: negative-enhanced mixed training. Batches interleave positive
/// and negative records 50/50 (by `mix_ratio`); negative records are
/// encoded with their analysis block and supervised toward tau_pos.
pub fn train_stage2(
    records: &[CspRecord],
    params: &mut PolicyParams,
    config: &SftConfig,
) -> Result<Vec<SftTraceStep>> {
    config.validate()?;
    let pos: Vec<SftSample> = records
        .iter()
        .filter(|r| r.label.is_pos())
        .map(|r| sample_from_record(r, false))
        .collect();
    let neg: Vec<SftSample> = records
        .iter()
        .filter(|r| !r.label.is_pos())
        .map(|r| sample_from_record(r, config.analysis_conditioning))
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidInput(
            "stage 2 needs both positive and negative records".into(),
        ));
    }
    let labels = stage2_batch_labels(config.batch_size, config.mix_ratio);
    let batches_per_epoch = records.len().div_ceil(config.batch_size);
    let mut pos_cycler = Cycler::new(pos.len(), mix(config.seed, 0x705));
    let mut neg_cycler = Cycler::new(neg.len(), mix(config.seed, 0xAE6));
    let mut trace = Vec::new();
    let mut step = 0usize;
    for _epoch in 0..config.epochs_stage2 {
        for _ in 0..batches_per_epoch {
            let batch: Vec<SftSample> = labels
                .iter()
                .map(|&is_pos| {
                    if is_pos {
                        pos[pos_cycler.next()].clone()
                    } else {
                        neg[neg_cycler.next()].clone()
                    }
                })
                .collect();
            let stats = joint_step(&batch, params, config)?;
            trace.push(trace_step(step, "sft2", &stats));
            step += 1;
        }
    }
    Ok(trace)
}
