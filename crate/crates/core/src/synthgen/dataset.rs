//! End-to-end sequence generation: actor, motion, scan, augmentation, flow
//! and resampling to a fixed point count.

use std::f64::consts::PI;

use rand::Rng;

use super::actor::{build_actor, ActorModel, Proportions};
use super::augment::{add_noise_objects, crop_occlusion};
use super::flow::{flow_ground_truth, MeshedFrame, DEFAULT_FLOW_THRESHOLD};
use super::lidar::{simulate_lidar, LidarConfig};
use super::motion::{animate, MeshSequence, MotionClass, MotionSpec};
use super::SynthError;
use crate::geom::{fps, FlowField, Point3, PointSequence};
use crate::rng;

/// Knobs of the synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    /// Frames per sequence (L).
    pub frames: usize,
    /// Points per frame after resampling (N).
    pub points: usize,
    /// Action classes; a sequence's class label is its index in this list.
    pub classes: Vec<MotionClass>,
    pub lidar: LidarConfig,
    /// Sensor to actor distance range, meters.
    pub distance: (f64, f64),
    pub height: (f64, f64),
    /// Largest number of noise blobs per frame.
    pub max_noise_objects: usize,
    /// Probability that a frame is occluded by a cut plane.
    pub occlusion_prob: f64,
    /// Largest fraction of a frame removed by occlusion.
    pub max_occlusion: f64,
    pub flow: bool,
    pub flow_threshold: f64,
    pub frame_rate: f32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            frames: 30,
            points: 384,
            classes: vec![MotionClass::Walk, MotionClass::Wave, MotionClass::Squat],
            lidar: LidarConfig::default(),
            distance: (3.0, 6.0),
            height: (1.5, 1.9),
            max_noise_objects: 1,
            occlusion_prob: 0.2,
            max_occlusion: 0.3,
            flow: true,
            flow_threshold: DEFAULT_FLOW_THRESHOLD,
            frame_rate: 10.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.lidar.validate()?;
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.frames == 0 || self.points == 0 {
            return bad("frames and points must be positive");
        }
        if self.classes.is_empty() {
            return bad("at least one motion class is required");
        }
        if !(self.distance.0 > 0.0 && self.distance.0 <= self.distance.1) {
            return bad("distance range must be positive and ordered");
        }
        if !(self.height.0 > 0.0 && self.height.0 <= self.height.1) {
            return bad("height range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) || !(0.0..1.0).contains(&self.max_occlusion) {
            return bad("occlusion probability or fraction out of range");
        }
        if !(self.flow_threshold > 0.0) {
            return bad("flow threshold must be positive");
        }
        Ok(())
    }
}

/// Everything needed to regenerate one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecipe {
    pub index: u32,
    pub class_label: u32,
    pub height: f64,
    pub actor_seed: u64,
    pub motion: MotionSpec,
    pub scan_seed: u64,
    pub augment_seed: u64,
}

fn class_motion(class: MotionClass, r: &mut impl Rng) -> (f64, f64) {
    let (a, f) = match class {
        MotionClass::Walk => ((0.35, 0.6), (0.06, 0.11)),
        MotionClass::Wave => ((0.3, 0.6), (0.08, 0.15)),
        MotionClass::Squat => ((0.35, 0.6), (0.04, 0.08)),
        MotionClass::Idle => ((0.0, 0.1), (0.02, 0.05)),
        MotionClass::Turn => ((0.3, 0.6), (0.04, 0.08)),
    };
    (r.random_range(a.0..=a.1), r.random_range(f.0..=f.1))
}

/// Recipe of sequence `index`. Classes are assigned round-robin.
pub fn sequence_recipe(cfg: &DatasetConfig, master_seed: u64, index: u32) -> SequenceRecipe {
    let seed = rng::derive_seed(master_seed, &[index as u64]);
    let mut r = rng::stream(seed, &[0xDA7A]);
    let class_label = index % cfg.classes.len() as u32;
    let class = cfg.classes[class_label as usize];
    let height = r.random_range(cfg.height.0..=cfg.height.1);
    let distance = r.random_range(cfg.distance.0..=cfg.distance.1);
    // place the actor in front of the sensor (+y), roughly facing it
    let bearing: f64 = r.random_range(-PI / 6.0..PI / 6.0);
    let yaw = -bearing + r.random_range(-0.5..0.5);
    let position = Point3::new(-bearing.sin() * distance, bearing.cos() * distance, 0.0);
    let (amplitude, frequency) = class_motion(class, &mut r);
    let velocity = if class == MotionClass::Walk {
        // walking across the field of view, sideways relative to its facing
        let speed = r.random_range(0.02..0.05) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        Point3::new(yaw.cos() * speed, yaw.sin() * speed, 0.0)
    } else {
        Point3::ZERO
    };
    let motion = MotionSpec {
        class,
        amplitude,
        frequency,
        phase: r.random_range(0.0..2.0 * PI),
        velocity,
        yaw,
        position,
        seed: r.random(),
    };
    SequenceRecipe {
        index,
        class_label,
        height,
        actor_seed: r.random(),
        motion,
        scan_seed: r.random(),
        augment_seed: r.random(),
    }
}

/// The actor and its animation over `frames` frames.
pub fn recipe_meshes(recipe: &SequenceRecipe, frames: usize) -> (ActorModel, MeshSequence) {
    let actor = build_actor(recipe.height, &Proportions::default(), recipe.actor_seed);
    let mesh = animate(&actor, recipe.index, &recipe.motion, frames);
    (actor, mesh)
}

/// Generates one sequence of `cfg.frames` frames with exactly `cfg.points`
/// points each. Flow of frame t points into frame t+1; an extra frame is
/// scanned so the last kept frame has a successor.
pub fn generate_sequence(cfg: &DatasetConfig, recipe: &SequenceRecipe) -> Result<PointSequence, SynthError> {
    cfg.validate()?;
    let (_, mesh) = recipe_meshes(recipe, cfg.frames + 1);
    let mut seq = simulate_lidar(&mesh, &cfg.lidar, recipe.scan_seed)?;

    let mut r = rng::stream(recipe.augment_seed, &[0xA06]);
    for (t, frame) in seq.frames.iter_mut().enumerate() {
        let k = r.random_range(0..=cfg.max_noise_objects);
        let occlude = r.random_bool(cfg.occlusion_prob);
        let fraction = r.random_range(0.0..=cfg.max_occlusion);
        let sub = rng::derive_seed(recipe.augment_seed, &[t as u64]);
        if occlude {
            *frame = crop_occlusion(frame, fraction, sub)?.0;
        }
        *frame = add_noise_objects(frame, k, sub);
    }

    if cfg.flow {
        let flows = (0..cfg.frames)
            .map(|t| {
                flow_ground_truth(
                    MeshedFrame {
                        cloud: &seq.frames[t],
                        vertices: &mesh.frames[t].vertices,
                        actor_id: recipe.index,
                    },
                    MeshedFrame {
                        cloud: &seq.frames[t + 1],
                        vertices: &mesh.frames[t + 1].vertices,
                        actor_id: recipe.index,
                    },
                    cfg.flow_threshold,
                )
            })
            .collect::<Result<Vec<FlowField>, _>>()?;
        for (f, flow) in seq.frames.iter_mut().zip(flows) {
            f.flow = Some(flow);
        }
    }
    seq.frames.truncate(cfg.frames);
    if let Some(j) = &mut seq.meta.joints {
        j.truncate(cfg.frames);
    }
    for f in &mut seq.frames {
        let idx = fps(&f.points, cfg.points, 0)?;
        *f = f.select(&idx);
    }
    seq.meta.motion_class = recipe.class_label;
    seq.meta.actor_id = recipe.index;
    seq.meta.frame_rate = cfg.frame_rate;
    Ok(seq)
}

/// Generates sequences `0..count` from one master seed.
pub fn generate_dataset(
    cfg: &DatasetConfig,
    master_seed: u64,
    count: u32,
) -> Result<Vec<(SequenceRecipe, PointSequence)>, SynthError> {
    (0..count)
        .map(|i| {
            let recipe = sequence_recipe(cfg, master_seed, i);
            generate_sequence(cfg, &recipe).map(|s| (recipe, s))
        })
        .collect()
}
