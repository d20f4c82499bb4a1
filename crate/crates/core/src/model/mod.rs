//! Masked part-patch autoencoder and its fine-tuning heads.

mod layers;
mod network;
mod tokenizer;

use thiserror::Error;

use crate::tensornet::TensorError;

pub use layers::{param_specs, Init, ParamSpec};
pub use network::{
    action_loss, finetune_input, pose_loss, FinetuneInput, FinetuneOutput, PretrainOutput, PvuModel,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("flow input is not accepted when pretraining")]
    FlowInPretraining,
    #[error("config requires a flow channel but none was given")]
    MissingFlow,
    #[error("every masked patch is absent; nothing to reconstruct")]
    NothingToReconstruct,
    #[error("input does not match the model: {0}")]
    InputShape(String),
    #[error("model stage {0:?} cannot run this forward pass")]
    WrongStage(Stage),
    #[error("incompatible parameters: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Attention pattern of one transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// Attention among the tokens of one frame.
    Spatial,
    /// Attention along one token slot across frames.
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Action { classes: usize },
    Pose { joints: usize, root: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Token width C.
    pub dim: usize,
    pub heads: usize,
    pub encoder: Vec<LayerKind>,
    pub decoder: Vec<LayerKind>,
    pub mlp_ratio: usize,
    pub frames: usize,
    pub parts: usize,
    pub patch_size: usize,
    /// Points of the per-frame cloud fed to the global tokenizer.
    pub global_points: usize,
    /// Per-point widths of the tokenizer: first MLP (two layers) and the
    /// hidden layer after concatenation.
    pub tokenizer: [usize; 3],
    pub pe_hidden: usize,
    pub head: HeadKind,
    pub use_flow: bool,
    pub pose_hidden: usize,
}

fn layout(spec: &[(LayerKind, usize)]) -> Vec<LayerKind> {
    spec.iter()
        .flat_map(|(k, n)| std::iter::repeat_n(*k, *n))
        .collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        use LayerKind::*;
        Self {
            dim: 384,
            heads: 6,
            encoder: layout(&[(Spatial, 4), (Temporal, 4), (Spatial, 4)]),
            decoder: layout(&[(Spatial, 4)]),
            mlp_ratio: 4,
            frames: 30,
            parts: 9,
            patch_size: 48,
            global_points: 384,
            tokenizer: [64, 128, 256],
            pe_hidden: 128,
            head: HeadKind::Action { classes: 12 },
            use_flow: true,
            pose_hidden: 256,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core in minutes.
    pub fn toy() -> Self {
        use LayerKind::*;
        Self {
            dim: 32,
            heads: 2,
            encoder: vec![Spatial, Temporal, Spatial],
            decoder: vec![Spatial, Temporal],
            mlp_ratio: 2,
            frames: 8,
            parts: 9,
            patch_size: 16,
            global_points: 64,
            tokenizer: [16, 32, 32],
            pe_hidden: 16,
            head: HeadKind::Action { classes: 3 },
            use_flow: true,
            pose_hidden: 64,
        }
    }

    /// Two frames, two parts, tiny widths: fast enough for finite differences.
    pub fn micro() -> Self {
        use LayerKind::*;
        Self {
            dim: 8,
            heads: 2,
            encoder: vec![Spatial, Temporal],
            decoder: vec![Spatial],
            mlp_ratio: 2,
            frames: 2,
            parts: 2,
            patch_size: 4,
            global_points: 6,
            tokenizer: [4, 6, 6],
            pe_hidden: 4,
            head: HeadKind::Action { classes: 3 },
            use_flow: true,
            pose_hidden: 8,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return bad("encoder and decoder layouts must be non-empty".into());
        }
        if self.frames == 0 || self.parts == 0 || self.patch_size == 0 || self.global_points == 0 {
            return bad("frames, parts, patch size and global points must be positive".into());
        }
        if self.mlp_ratio == 0 || self.pe_hidden == 0 || self.tokenizer.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        match self.head {
            HeadKind::Action { classes } if classes < 2 => bad("need at least two classes".into()),
            HeadKind::Pose { joints, root } if joints == 0 || root >= joints => {
                bad(format!("root joint {root} outside {joints} joints"))
            }
            _ => Ok(()),
        }
    }

    /// Canonical text of every field that shapes the shared backbone
    /// (tokenizer, positional encodings, encoder). Checkpoints compare it.
    pub fn backbone_signature(&self) -> String {
        format!(
            "dim={};heads={};encoder={:?};mlp_ratio={};parts={};patch_size={};tokenizer={:?};pe_hidden={}",
            self.dim,
            self.heads,
            self.encoder,
            self.mlp_ratio,
            self.parts,
            self.patch_size,
            self.tokenizer,
            self.pe_hidden
        )
    }
}

/// Number of learnable scalars of a stage.
pub fn count_params(cfg: &ModelConfig, stage: Stage) -> usize {
    param_specs(cfg, stage)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

#[cfg(test)]
mod tests;
