//! Dataset splitting, sample preparation, the pretraining and fine-tuning
//! loops, evaluation and metrics.

mod loops;
pub mod metrics;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::geom::{normalize_sequence, GeomError, NormRecord, Point3, PointSequence};
use crate::model::{finetune_input, FinetuneInput, ModelConfig, ModelError};
use crate::patchmask::{build_patch_tensor, PatchError, PatchTensor};
use crate::rng;
use crate::tensornet::TensorError;

pub use loops::{
    evaluate_action, evaluate_pose, mean_pose_baseline, predict_class, predict_pose, StepReport, TrainState,
    Trainer,
};
pub use metrics::{flow_metrics, mean_class_accuracy, miou, mpjpe, ClassAccuracy, FlowMetrics, PartIou};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("class {class} has {count} sequence(s); at least 2 are needed to split")]
    TooFewInClass { class: usize, count: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss diverged at step {step} (value {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("sequence has no joints")]
    MissingJoints,
    #[error("sequence has {got} frames, model expects {expected}")]
    FrameCount { got: usize, expected: usize },
    #[error("metric: {0}")]
    Metric(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Steps between snapshots; 0 disables them.
    pub snapshot_every: usize,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            epochs: 20,
            batch: 16,
            lr: 1e-3,
            weight_decay: 0.05,
            schedule: Schedule::Cosine,
            seed: 0,
            snapshot_every: 0,
        }
    }

    pub fn finetune() -> Self {
        Self {
            lr: 5e-4,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(TrainError::InvalidConfig("epochs and batch must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "lr {} / weight decay {} out of range",
                self.lr, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Temporal and spatial mask ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    pub r_t: f64,
    pub r_s: f64,
    /// Draw each sample's mask once for the whole run instead of per step.
    pub fixed: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            r_t: 0.8,
            r_s: 0.6,
            fixed: false,
        }
    }
}

/// Stratified split of sequence indices by class. Every class keeps at
/// least one sequence on each side.
pub fn split_dataset(classes: &[usize], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(TrainError::InvalidConfig(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    if classes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let k = classes.iter().max().map_or(0, |m| m + 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..k {
        let mut members: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(TrainError::TooFewInClass {
                class: c,
                count: members.len(),
            });
        }
        members.shuffle(&mut rng::stream(seed, &[0x5B17, c as u64]));
        let n = members.len();
        let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Keeps the first `fraction` of each class (at least one), for label
/// budget experiments.
pub fn subsample_per_class(indices: &[usize], classes: &[usize], fraction: f64) -> Vec<usize> {
    let k = indices.iter().map(|&i| classes[i] + 1).max().unwrap_or(0);
    let mut out = Vec::new();
    for c in 0..k {
        let members: Vec<usize> = indices.iter().copied().filter(|&i| classes[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let keep = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        out.extend_from_slice(&members[..keep]);
    }
    out.sort_unstable();
    out
}

/// One sequence turned into model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub class: usize,
    pub patches: PatchTensor,
    pub input: FinetuneInput,
    /// Normalized joints, `L * J`.
    pub joints: Option<Vec<Point3>>,
    pub norm: NormRecord,
}

impl Sample {
    /// Joints relative to the root, in normalized units.
    pub fn root_relative(&self, joints: usize, root: usize) -> Result<Vec<Point3>, TrainError> {
        let j = self.joints.as_ref().ok_or(TrainError::MissingJoints)?;
        if joints == 0 || j.len() % joints != 0 || root >= joints {
            return Err(TrainError::MissingJoints);
        }
        Ok(j.chunks(joints).flat_map(|f| f.iter().map(move |p| *p - f[root])).collect())
    }
}

/// Normalizes a sequence and builds its patches and fine-tuning input.
/// Flow patches are built whenever every frame carries flow.
pub fn prepare_sample(seq: &PointSequence, cfg: &ModelConfig, seed: u64) -> Result<Sample, TrainError> {
    if seq.len() != cfg.frames {
        return Err(TrainError::FrameCount {
            got: seq.len(),
            expected: cfg.frames,
        });
    }
    let (norm_seq, norm) = normalize_sequence(seq)?;
    let with_flow = norm_seq.frames.iter().all(|f| f.flow.is_some());
    let patches = build_patch_tensor(&norm_seq, cfg.patch_size, with_flow, seed)?;
    let input = finetune_input(&norm_seq, &patches, cfg.global_points)?;
    Ok(Sample {
        class: seq.meta.motion_class as usize,
        patches,
        input,
        joints: norm_seq.meta.joints.as_ref().map(|j| j.concat()),
        norm,
    })
}
