//! Procedural articulated human: nine rigid capsule segments, one per body
//! part, tessellated into a single triangle mesh whose vertex indexing is
//! fixed for the lifetime of the actor.
//!
//! Actor frame: z up, feet on z = 0, facing -y. The actor's left side is +x.

use rand::Rng;

use crate::geom::{Mat3, Point3, Rigid};
use crate::rng;

/// The nine body-part classes. The discriminant is the part label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum BodyPart {
    Head = 0,
    LeftArm = 1,
    RightArm = 2,
    UpperBody = 3,
    LowerBody = 4,
    LeftUpperLeg = 5,
    LeftLowerLeg = 6,
    RightUpperLeg = 7,
    RightLowerLeg = 8,
}

pub const NUM_PARTS: usize = 9;
/// Nine segment pivots plus the top of the head.
pub const NUM_JOINTS: usize = 10;
/// Index of the pelvis pivot in the joint list.
pub const ROOT_JOINT: usize = BodyPart::LowerBody as usize;
pub const HEAD_TOP_JOINT: usize = 9;

impl BodyPart {
    pub const ALL: [BodyPart; NUM_PARTS] = [
        BodyPart::Head,
        BodyPart::LeftArm,
        BodyPart::RightArm,
        BodyPart::UpperBody,
        BodyPart::LowerBody,
        BodyPart::LeftUpperLeg,
        BodyPart::LeftLowerLeg,
        BodyPart::RightUpperLeg,
        BodyPart::RightLowerLeg,
    ];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_label(l: u8) -> Option<BodyPart> {
        Self::ALL.get(l as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BodyPart::Head => "head",
            BodyPart::LeftArm => "left-arm",
            BodyPart::RightArm => "right-arm",
            BodyPart::UpperBody => "upper-body",
            BodyPart::LowerBody => "lower-body",
            BodyPart::LeftUpperLeg => "left-upper-leg",
            BodyPart::LeftLowerLeg => "left-lower-leg",
            BodyPart::RightUpperLeg => "right-upper-leg",
            BodyPart::RightLowerLeg => "right-lower-leg",
        }
    }

    pub fn parent(self) -> Option<BodyPart> {
        use BodyPart::*;
        match self {
            LowerBody => None,
            UpperBody | LeftUpperLeg | RightUpperLeg => Some(LowerBody),
            Head | LeftArm | RightArm => Some(UpperBody),
            LeftLowerLeg => Some(LeftUpperLeg),
            RightLowerLeg => Some(RightUpperLeg),
        }
    }
}

/// Shape knobs, as fractions of the actor height unless noted.
#[derive(Debug, Clone, PartialEq)]
pub struct Proportions {
    pub shoulder_half_width: f64,
    pub hip_half_width: f64,
    pub torso_radius: f64,
    pub limb_radius: f64,
    /// Relative per-segment radius jitter drawn from the seed.
    pub radius_jitter: f64,
    /// Vertices per capsule ring.
    pub around: usize,
    /// Rings per hemispherical cap.
    pub cap_rings: usize,
}

impl Default for Proportions {
    fn default() -> Self {
        Self {
            shoulder_half_width: 0.135,
            hip_half_width: 0.055,
            torso_radius: 0.095,
            limb_radius: 0.035,
            radius_jitter: 0.08,
            around: 16,
            cap_rings: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub part: BodyPart,
    pub parent: Option<usize>,
    /// Joint the segment rotates about (rest pose, actor frame).
    pub pivot: Point3,
    pub start: Point3,
    pub end: Point3,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
    pub vertex_part: Vec<u8>,
    pub triangle_part: Vec<u8>,
}

/// A built actor in its rest pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorModel {
    pub height: f64,
    pub segments: Vec<Segment>,
    pub mesh: TriMesh,
    pub head_top: Point3,
    /// `vertex_ranges[s]` is the contiguous vertex block of segment `s`.
    pub vertex_ranges: Vec<std::ops::Range<usize>>,
    pub triangle_ranges: Vec<std::ops::Range<usize>>,
}

/// Local joint rotations plus the global placement of the pelvis.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub root: Rigid,
    pub local: [Mat3; NUM_PARTS],
}

impl Pose {
    pub fn rest() -> Pose {
        Pose {
            root: Rigid::IDENTITY,
            local: [Mat3::IDENTITY; NUM_PARTS],
        }
    }
}

/// Posed vertex positions and joint centers for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedFrame {
    pub vertices: Vec<Point3>,
    pub joints: Vec<Point3>,
}

/// Builds the capsule actor. Identical inputs give bit-identical meshes.
pub fn build_actor(height: f64, proportions: &Proportions, seed: u64) -> ActorModel {
    assert!(height > 0.0, "actor height must be positive");
    let p = proportions;
    let mut rng = rng::stream(seed, &[0xAC70]);
    let mut jitter = |r: f64| r * (1.0 + p.radius_jitter * rng.random_range(-1.0..=1.0));
    let h = height;
    let v = |x: f64, z: f64| Point3::new(x * h, 0.0, z * h);

    let torso_r = jitter(p.torso_radius);
    let pelvis_r = jitter(p.torso_radius * 0.92);
    let head_r = jitter(0.06);
    let arm_r = jitter(p.limb_radius);
    let arm_r2 = jitter(p.limb_radius);
    let thigh_r = jitter(p.limb_radius * 1.45);
    let thigh_r2 = jitter(p.limb_radius * 1.45);
    let shin_r = 0.04;
    let sx = p.shoulder_half_width;
    let hx = p.hip_half_width;

    use BodyPart::*;
    // (part, pivot, start, end, radius) in height units
    let spec: [(BodyPart, Point3, Point3, Point3, f64); NUM_PARTS] = [
        (Head, v(0.0, 0.84), v(0.0, 0.88), v(0.0, 1.0 - head_r), head_r),
        (LeftArm, v(sx, 0.80), v(sx, 0.80 - arm_r), v(sx, 0.46), arm_r),
        (RightArm, v(-sx, 0.80), v(-sx, 0.80 - arm_r2), v(-sx, 0.46), arm_r2),
        (UpperBody, v(0.0, 0.62), v(0.0, 0.66), v(0.0, 0.76), torso_r),
        (LowerBody, v(0.0, 0.52), v(0.0, 0.50), v(0.0, 0.60), pelvis_r),
        (LeftUpperLeg, v(hx, 0.50), v(hx, 0.48), v(hx, 0.30), thigh_r),
        (LeftLowerLeg, v(hx, 0.28), v(hx, 0.27), v(hx, shin_r), shin_r),
        (RightUpperLeg, v(-hx, 0.50), v(-hx, 0.48), v(-hx, 0.30), thigh_r2),
        (RightLowerLeg, v(-hx, 0.28), v(-hx, 0.27), v(-hx, shin_r), shin_r),
    ];

    let mut segments = Vec::with_capacity(NUM_PARTS);
    let mut mesh = TriMesh {
        vertices: Vec::new(),
        triangles: Vec::new(),
        vertex_part: Vec::new(),
        triangle_part: Vec::new(),
    };
    let mut vertex_ranges = Vec::new();
    let mut triangle_ranges = Vec::new();
    for (part, pivot, start, end, radius) in spec {
        let radius = radius * h;
        let v0 = mesh.vertices.len();
        let t0 = mesh.triangles.len();
        add_capsule(&mut mesh, start, end, radius, p.around, p.cap_rings, part.label());
        vertex_ranges.push(v0..mesh.vertices.len());
        triangle_ranges.push(t0..mesh.triangles.len());
        segments.push(Segment {
            part,
            parent: part.parent().map(|pp| pp as usize),
            pivot,
            start,
            end,
            radius,
        });
    }
    ActorModel {
        height,
        segments,
        mesh,
        head_top: v(0.0, 1.0),
        vertex_ranges,
        triangle_ranges,
    }
}

fn add_capsule(
    mesh: &mut TriMesh,
    a: Point3,
    b: Point3,
    r: f64,
    around: usize,
    cap_rings: usize,
    label: u8,
) {
    let w = (b - a).normalized();
    let helper = if w.x.abs() < 0.9 {
        Point3::new(1.0, 0.0, 0.0)
    } else {
        Point3::new(0.0, 1.0, 0.0)
    };
    let u = w.cross(helper).normalized();
    let v = w.cross(u);
    let base = mesh.vertices.len() as u32;
    let ring_point = |center: Point3, polar: f64, k: usize| {
        let phi = std::f64::consts::TAU * k as f64 / around as f64;
        let (s, c) = polar.sin_cos();
        center + w * (r * c) + (u * phi.cos() + v * phi.sin()) * (r * s)
    };

    // bottom pole, rings from the bottom cap up to the top cap, top pole
    mesh.vertices.push(a - w * r);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut rings = 0;
    for i in 1..=cap_rings {
        let polar = std::f64::consts::PI - half_pi * i as f64 / cap_rings as f64;
        for k in 0..around {
            mesh.vertices.push(ring_point(a, polar, k));
        }
        rings += 1;
    }
    for i in 0..cap_rings {
        let polar = half_pi - half_pi * i as f64 / cap_rings as f64;
        for k in 0..around {
            mesh.vertices.push(ring_point(b, polar, k));
        }
        rings += 1;
    }
    mesh.vertices.push(b + w * r);
    let top = mesh.vertices.len() as u32 - 1;
    let n = mesh.vertices.len() - base as usize;
    mesh.vertex_part.extend(std::iter::repeat_n(label, n));

    let ring = |j: usize, k: usize| base + 1 + (j * around + k % around) as u32;
    let t0 = mesh.triangles.len();
    for k in 0..around {
        mesh.triangles.push([base, ring(0, k + 1), ring(0, k)]);
    }
    for j in 0..rings - 1 {
        for k in 0..around {
            mesh.triangles.push([ring(j, k), ring(j, k + 1), ring(j + 1, k + 1)]);
            mesh.triangles.push([ring(j, k), ring(j + 1, k + 1), ring(j + 1, k)]);
        }
    }
    for k in 0..around {
        mesh.triangles.push([ring(rings - 1, k), ring(rings - 1, k + 1), top]);
    }
    let added = mesh.triangles.len() - t0;
    mesh.triangle_part.extend(std::iter::repeat_n(label, added));
}

impl ActorModel {
    pub fn vertex_count(&self) -> usize {
        self.mesh.vertices.len()
    }

    /// World transform of every segment for a pose.
    pub fn segment_transforms(&self, pose: &Pose) -> Vec<Rigid> {
        let mut out: Vec<Rigid> = Vec::with_capacity(NUM_PARTS);
        // parents precede children in BodyPart order except for the pelvis,
        // so resolve recursively with memoization
        let mut done: [Option<Rigid>; NUM_PARTS] = [None; NUM_PARTS];
        fn resolve(
            s: usize,
            actor: &ActorModel,
            pose: &Pose,
            done: &mut [Option<Rigid>; NUM_PARTS],
        ) -> Rigid {
            if let Some(r) = done[s] {
                return r;
            }
            let seg = &actor.segments[s];
            let local = Rigid::about(seg.pivot, pose.local[s]);
            let r = match seg.parent {
                Some(p) => resolve(p, actor, pose, done).compose(&local),
                None => pose.root.compose(&local),
            };
            done[s] = Some(r);
            r
        }
        for s in 0..NUM_PARTS {
            out.push(resolve(s, self, pose, &mut done));
        }
        out
    }

    pub fn pose(&self, pose: &Pose) -> PosedFrame {
        let xf = self.segment_transforms(pose);
        let mut vertices = Vec::with_capacity(self.vertex_count());
        for (s, range) in self.vertex_ranges.iter().enumerate() {
            vertices.extend(self.mesh.vertices[range.clone()].iter().map(|v| xf[s].apply(*v)));
        }
        let mut joints: Vec<Point3> = self
            .segments
            .iter()
            .map(|seg| match seg.parent {
                Some(p) => xf[p].apply(seg.pivot),
                None => pose.root.apply(seg.pivot),
            })
            .collect();
        joints.push(xf[BodyPart::Head as usize].apply(self.head_top));
        PosedFrame { vertices, joints }
    }
}
