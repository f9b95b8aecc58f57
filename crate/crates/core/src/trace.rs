//! Training-trace records emitted by the supervised and reinforcement
//! trainers, consumed by the report command. One JSON object per step.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftTraceStep {
    pub step: usize,
    pub stage: String,
    pub loss_total: f64,
    pub loss_text: f64,
    pub loss_traj: f64,
    pub alpha: f64,
    pub grad_norm: f64,
}

/// Role of a trajectory inside a GRPO group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberRole {
    Sampled,
    Refined,
    AnchorPos,
    AnchorNeg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReward {
    pub role: MemberRole,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoTraceStep {
    pub step: usize,
    pub epoch: usize,
    pub scene_id: String,
    pub rewards: Vec<MemberReward>,
    pub advantages: Vec<f64>,
    pub loss: f64,
    pub refined_count: usize,
    pub grad_norm_pool: f64,
    pub grad_norm_action: f64,
}
