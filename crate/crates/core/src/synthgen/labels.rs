//! Part-label tables and the geometric fallback labeller.

use super::actor::BodyPart;
use super::SynthError;
use crate::geom::PointCloudFrame;

/// Names of the 24 SMPL-style segmentation labels, in index order.
pub const LABELS_24: [&str; 24] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

/// 24 → 9 reduction: hands and wrists join the arms, feet and ankles the
/// lower legs, the neck joins the head, collars join the upper body.
const MAP_24_TO_9: [BodyPart; 24] = {
    use BodyPart::*;
    [
        LowerBody,     // pelvis
        LeftUpperLeg,  // left_hip
        RightUpperLeg, // right_hip
        LowerBody,     // spine1
        LeftLowerLeg,  // left_knee
        RightLowerLeg, // right_knee
        UpperBody,     // spine2
        LeftLowerLeg,  // left_ankle
        RightLowerLeg, // right_ankle
        UpperBody,     // spine3
        LeftLowerLeg,  // left_foot
        RightLowerLeg, // right_foot
        Head,          // neck
        UpperBody,     // left_collar
        UpperBody,     // right_collar
        Head,          // head
        LeftArm,       // left_shoulder
        RightArm,      // right_shoulder
        LeftArm,       // left_elbow
        RightArm,      // right_elbow
        LeftArm,       // left_wrist
        RightArm,      // right_wrist
        LeftArm,       // left_hand
        RightArm,      // right_hand
    ]
};

pub fn map24to9(label24: u8) -> Result<u8, SynthError> {
    MAP_24_TO_9
        .get(label24 as usize)
        .map(|p| p.label())
        .ok_or(SynthError::LabelOutOfRange(label24))
}

/// Coarse labels from height slabs and the side of the sagittal plane.
///
/// Assumes an upright cloud (z up) whose subject faces -y, so the subject's
/// left is +x. The topmost 10% of points become the head.
pub fn heuristic_part_labeler(frame: &PointCloudFrame) -> Vec<u8> {
    let n = frame.len();
    if n == 0 {
        return Vec::new();
    }
    let mut zs: Vec<f64> = frame.points.iter().map(|p| p.z).collect();
    zs.sort_by(f64::total_cmp);
    let zmin = zs[0];
    let zmax = zs[n - 1];
    let height = (zmax - zmin).max(1e-9);
    // index of the first point in the top 10%
    let head_cut = zs[n - n.div_ceil(10)];
    let cx = frame.points.iter().map(|p| p.x).sum::<f64>() / n as f64;

    frame
        .points
        .iter()
        .map(|p| {
            use BodyPart::*;
            let rel = (p.z - zmin) / height;
            let dx = p.x - cx;
            let left = dx > 0.0;
            let part = if p.z >= head_cut {
                Head
            } else if rel > 0.45 && dx.abs() > 0.105 * height {
                if left {
                    LeftArm
                } else {
                    RightArm
                }
            } else if rel >= 0.62 {
                UpperBody
            } else if rel >= 0.49 {
                LowerBody
            } else if rel >= 0.28 {
                if left {
                    LeftUpperLeg
                } else {
                    RightUpperLeg
                }
            } else if left {
                LeftLowerLeg
            } else {
                RightLowerLeg
            };
            part.label()
        })
        .collect()
}
