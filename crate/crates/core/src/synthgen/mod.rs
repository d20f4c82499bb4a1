//! Synthetic labelled LiDAR human sequences.

pub mod actor;
pub mod augment;
pub mod dataset;
pub mod flow;
pub mod labels;
pub mod lidar;
pub mod motion;

pub use actor::{build_actor, ActorModel, BodyPart, Proportions, NUM_JOINTS, NUM_PARTS, ROOT_JOINT};
pub use augment::{add_noise_objects, crop_occlusion};
pub use dataset::{generate_dataset, generate_sequence, recipe_meshes, sequence_recipe, DatasetConfig, SequenceRecipe};
pub use flow::{flow_ground_truth, nn_flow_baseline, MeshedFrame, DEFAULT_FLOW_THRESHOLD};
pub use labels::{heuristic_part_labeler, map24to9};
pub use lidar::{simulate_lidar, LidarConfig};
pub use motion::{animate, MeshSequence, MotionClass, MotionSpec};

use crate::geom::GeomError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("empty mesh sequence")]
    EmptyMeshSequence,
    #[error("subject out of view (frame {frame})")]
    OutOfView { frame: usize },
    #[error("empty frame")]
    EmptyFrame,
    #[error("occlusion removed every point")]
    EmptyAfterCrop,
    #[error("frames belong to different actors")]
    MismatchedActors,
    #[error("vertex id {0} out of range")]
    VertexOutOfRange(u32),
    #[error("label {0} outside the 24-label range")]
    LabelOutOfRange(u8),
    #[error("missing channel: {0}")]
    MissingChannel(&'static str),
    #[error(transparent)]
    Geom(#[from] GeomError),
}
