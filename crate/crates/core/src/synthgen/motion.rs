use std::f64::consts::TAU;

use rand::Rng;

use super::actor::{ActorModel, BodyPart, Pose, PosedFrame, NUM_PARTS};
use crate::geom::{Mat3, Point3, Rigid};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MotionClass {
    Walk,
    Wave,
    Squat,
    Idle,
    Turn,
}

impl MotionClass {
    pub const ALL: [MotionClass; 5] = [
        MotionClass::Walk,
        MotionClass::Wave,
        MotionClass::Squat,
        MotionClass::Idle,
        MotionClass::Turn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::Walk => "walk",
            MotionClass::Wave => "wave",
            MotionClass::Squat => "squat",
            MotionClass::Idle => "idle",
            MotionClass::Turn => "turn",
        }
    }

    pub fn from_name(s: &str) -> Option<MotionClass> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Parameters of one synthetic motion clip.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSpec {
    pub class: MotionClass,
    /// Joint swing amplitude in radians (turn: yaw radians per cycle).
    pub amplitude: f64,
    /// Cycles per frame; must be positive.
    pub frequency: f64,
    pub phase: f64,
    /// Root displacement per frame, world units.
    pub velocity: Point3,
    /// Initial heading about +z; 0 faces -y.
    pub yaw: f64,
    /// Ground position of the pelvis at frame 0 (z ignored).
    pub position: Point3,
    /// Seeds small static per-joint offsets (posture variation).
    pub seed: u64,
}

impl MotionSpec {
    pub fn new(class: MotionClass) -> Self {
        Self {
            class,
            amplitude: 0.5,
            frequency: 0.1,
            phase: 0.0,
            velocity: Point3::ZERO,
            yaw: 0.0,
            position: Point3::ZERO,
            seed: 0,
        }
    }
}

/// An animated actor: per-frame posed vertices and joints. Triangles and
/// vertex labels are those of the actor.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshSequence {
    pub actor_id: u32,
    pub triangles: Vec<[u32; 3]>,
    pub triangle_part: Vec<u8>,
    pub vertex_part: Vec<u8>,
    pub triangle_ranges: Vec<std::ops::Range<usize>>,
    pub vertex_ranges: Vec<std::ops::Range<usize>>,
    pub frames: Vec<PosedFrame>,
}

impl MeshSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn posture_offsets(seed: u64) -> [f64; NUM_PARTS] {
    let mut r = rng::stream(seed, &[0x9057]);
    let mut out = [0.0; NUM_PARTS];
    for o in &mut out {
        *o = r.random_range(-0.06..0.06);
    }
    out
}

/// Pose of the actor at frame `t`.
pub fn pose_at(actor: &ActorModel, spec: &MotionSpec, t: usize) -> Pose {
    use BodyPart::*;
    let tf = t as f64;
    let w = TAU * spec.frequency * tf + spec.phase;
    let a = spec.amplitude;
    let offs = posture_offsets(spec.seed);
    let mut local = [Mat3::IDENTITY; NUM_PARTS];
    // forward flexion of a hanging limb is a negative rotation about x
    let flex = |angle: f64| Mat3::rot_x(-angle);
    let mut yaw = spec.yaw;
    let mut drop = 0.0;

    local[LeftArm as usize] = Mat3::rot_y(-0.08 - offs[1].abs());
    local[RightArm as usize] = Mat3::rot_y(0.08 + offs[2].abs());
    local[Head as usize] = Mat3::rot_x(offs[0]);

    match spec.class {
        MotionClass::Idle => {}
        MotionClass::Walk => {
            let s = w.sin();
            local[LeftUpperLeg as usize] = flex(a * s);
            local[RightUpperLeg as usize] = flex(-a * s);
            local[LeftLowerLeg as usize] = flex(-a * 1.1 * (w - 0.9).sin().max(0.0));
            local[RightLowerLeg as usize] = flex(-a * 1.1 * (-(w - 0.9).sin()).max(0.0));
            local[LeftArm as usize] = local[LeftArm as usize].mul(&flex(-0.8 * a * s));
            local[RightArm as usize] = local[RightArm as usize].mul(&flex(0.8 * a * s));
            local[UpperBody as usize] = Mat3::rot_z(0.15 * a * s);
        }
        MotionClass::Wave => {
            let raise = 2.3 + 0.1 * offs[3];
            local[RightArm as usize] = Mat3::rot_y(raise + 0.45 * a * w.sin());
            local[Head as usize] = Mat3::rot_z(-0.2 * a * w.sin());
        }
        MotionClass::Squat => {
            let depth = a * (1.0 - w.cos()) * 0.5 * 1.6;
            local[LeftUpperLeg as usize] = flex(depth);
            local[RightUpperLeg as usize] = flex(depth);
            local[LeftLowerLeg as usize] = flex(-2.0 * depth);
            local[RightLowerLeg as usize] = flex(-2.0 * depth);
            local[UpperBody as usize] = Mat3::rot_x(0.6 * depth);
            local[LeftArm as usize] = local[LeftArm as usize].mul(&flex(1.2 * depth));
            local[RightArm as usize] = local[RightArm as usize].mul(&flex(1.2 * depth));
            // thigh and shin both end up tilted by `depth`, so the hip sinks
            // by the lost vertical extent of the whole leg
            drop = actor.segments[LeftUpperLeg as usize].pivot.z * (1.0 - depth.cos());
        }
        MotionClass::Turn => {
            yaw += a * w;
            let s = (2.0 * w).sin();
            local[LeftUpperLeg as usize] = flex(0.25 * a * s);
            local[RightUpperLeg as usize] = flex(-0.25 * a * s);
        }
    }
    let root_pivot = actor.segments[LowerBody as usize].pivot;
    let place = spec.position + spec.velocity * tf + Point3::new(0.0, 0.0, -drop);
    let root = Rigid::translation(Point3::new(place.x, place.y, place.z))
        .compose(&Rigid::about(Point3::new(0.0, 0.0, root_pivot.z), Mat3::rot_z(yaw)));
    Pose { root, local }
}

/// Poses the actor for `frames` consecutive frames.
pub fn animate(actor: &ActorModel, actor_id: u32, spec: &MotionSpec, frames: usize) -> MeshSequence {
    assert!(spec.frequency > 0.0, "motion frequency must be positive");
    MeshSequence {
        actor_id,
        triangles: actor.mesh.triangles.clone(),
        triangle_part: actor.mesh.triangle_part.clone(),
        vertex_part: actor.mesh.vertex_part.clone(),
        triangle_ranges: actor.triangle_ranges.clone(),
        vertex_ranges: actor.vertex_ranges.clone(),
        frames: (0..frames)
            .map(|t| actor.pose(&pose_at(actor, spec, t)))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::actor::{build_actor, Proportions, ROOT_JOINT};

    fn actor() -> ActorModel {
        build_actor(1.75, &Proportions::default(), 9)
    }

    #[test]
    fn idle_is_static() {
        let a = actor();
        let spec = MotionSpec {
            seed: 77,
            ..MotionSpec::new(MotionClass::Idle)
        };
        let seq = animate(&a, 0, &spec, 6);
        assert!(seq.frames.iter().all(|f| *f == seq.frames[0]));
    }

    #[test]
    fn walk_root_follows_velocity() {
        let a = actor();
        let spec = MotionSpec {
            velocity: Point3::new(0.05, 0.0, 0.0),
            ..MotionSpec::new(MotionClass::Walk)
        };
        let seq = animate(&a, 0, &spec, 12);
        let x0 = seq.frames[0].joints[ROOT_JOINT].x;
        for (t, f) in seq.frames.iter().enumerate() {
            assert!((f.joints[ROOT_JOINT].x - x0 - 0.05 * t as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn labels_are_frame_invariant() {
        let a = actor();
        let seq = animate(&a, 0, &MotionSpec::new(MotionClass::Squat), 8);
        assert_eq!(seq.vertex_part, a.mesh.vertex_part);
        assert!(seq.frames.iter().all(|f| f.vertices.len() == a.vertex_count()));
    }

    #[test]
    fn squat_keeps_feet_on_ground() {
        let a = actor();
        let spec = MotionSpec {
            amplitude: 0.6,
            ..MotionSpec::new(MotionClass::Squat)
        };
        let seq = animate(&a, 0, &spec, 10);
        for f in &seq.frames {
            let min_z = f.vertices.iter().map(|v| v.z).fold(f64::INFINITY, f64::min);
            assert!(min_z.abs() < 0.03, "feet left the ground: {min_z}");
        }
    }

    #[test]
    fn wave_raises_right_hand() {
        let a = actor();
        let seq = animate(&a, 0, &MotionSpec::new(MotionClass::Wave), 3);
        let top = seq.frames[0]
            .vertices
            .iter()
            .zip(&seq.vertex_part)
            .filter(|(_, l)| **l == BodyPart::RightArm as u8)
            .map(|(v, _)| v.z)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(top > 0.9 * a.height);
    }
}
