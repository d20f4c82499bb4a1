//! ASCII PLY export of one frame.

use std::fmt::Write;

use crate::geom::{PointCloudFrame, NOISE_LABEL};

/// Colors of the nine body parts followed by noise (index 9, gray).
pub const PART_PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],   // head
    [60, 180, 75],   // left arm
    [255, 225, 25],  // right arm
    [0, 130, 200],   // upper body
    [245, 130, 48],  // lower body
    [145, 30, 180],  // left upper leg
    [70, 240, 240],  // left lower leg
    [240, 50, 230],  // right upper leg
    [170, 110, 40],  // right lower leg
    [128, 128, 128], // noise
];

/// Gray used for points without a label or without valid flow.
pub const UNKNOWN_COLOR: [u8; 3] = [128, 128, 128];

/// Cold to hot ramp for flow magnitude.
const RAMP: [[u8; 3]; 5] = [[0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorBy {
    Part,
    /// Magnitude relative to the largest valid flow in the frame.
    FlowMagnitude,
    None,
}

fn ramp(t: f64) -> [u8; 3] {
    let x = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    std::array::from_fn(|k| (a[k] as f64 + (b[k] as f64 - a[k] as f64) * f).round() as u8)
}

/// Renders the frame as ASCII PLY with `x y z red green blue` vertices.
/// Missing channels color points gray.
pub fn export_ply(frame: &PointCloudFrame, color_by: ColorBy) -> String {
    let colors: Vec<[u8; 3]> = match (color_by, &frame.part_labels, &frame.flow) {
        (ColorBy::Part, Some(labels), _) => labels
            .iter()
            .map(|l| PART_PALETTE.get(*l as usize).copied().unwrap_or(PART_PALETTE[NOISE_LABEL as usize]))
            .collect(),
        (ColorBy::FlowMagnitude, _, Some(flow)) => {
            let max = (0..flow.len())
                .filter_map(|i| flow.get(i))
                .map(|v| v.norm())
                .fold(0.0, f64::max);
            (0..flow.len())
                .map(|i| match flow.get(i) {
                    Some(v) if max > 0.0 => ramp(v.norm() / max),
                    Some(_) => RAMP[0],
                    None => UNKNOWN_COLOR,
                })
                .collect()
        }
        _ => vec![UNKNOWN_COLOR; frame.len()],
    };
    let mut s = String::with_capacity(64 + frame.len() * 40);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", frame.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for (p, c) in frame.points.iter().zip(&colors) {
        let _ = writeln!(s, "{} {} {} {} {} {}", p.x as f32, p.y as f32, p.z as f32, c[0], c[1], c[2]);
    }
    s
}
