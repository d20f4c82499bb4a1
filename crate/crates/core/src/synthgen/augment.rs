//! Occlusion and clutter augmentations. Neither ever relabels an existing
//! point: noise objects only append, occlusion only removes.

use rand::Rng;

use super::SynthError;
use crate::geom::{Point3, PointCloudFrame, NOISE_LABEL};
use crate::rng;

/// Appends `count` ellipsoidal blobs (10 to 40 points each) near randomly
/// chosen body points. New points are labelled noise, carry no vertex id
/// and no valid flow.
pub fn add_noise_objects(frame: &PointCloudFrame, count: usize, seed: u64) -> PointCloudFrame {
    let mut out = frame.clone();
    if count == 0 || frame.is_empty() {
        return out;
    }
    let mut r = rng::stream(seed, &[0x0B1E]);
    let anchors: Vec<usize> = match &frame.part_labels {
        Some(l) => (0..frame.len()).filter(|&i| l[i] != NOISE_LABEL).collect(),
        None => (0..frame.len()).collect(),
    };
    let anchors = if anchors.is_empty() {
        (0..frame.len()).collect()
    } else {
        anchors
    };
    for _ in 0..count {
        let anchor = frame.points[anchors[r.random_range(0..anchors.len())]];
        let offset = random_in_ball(&mut r) * 0.3;
        let center = anchor + offset;
        let axes = Point3::new(
            r.random_range(0.03..0.15),
            r.random_range(0.03..0.15),
            r.random_range(0.03..0.15),
        );
        let n = r.random_range(10..=40);
        for _ in 0..n {
            let u = random_in_ball(&mut r);
            out.points
                .push(center + Point3::new(u.x * axes.x, u.y * axes.y, u.z * axes.z));
        }
        if let Some(l) = &mut out.part_labels {
            l.extend(std::iter::repeat_n(NOISE_LABEL, n));
        }
        if let Some(f) = &mut out.flow {
            f.vectors.extend(std::iter::repeat_n(Point3::ZERO, n));
            f.valid.extend(std::iter::repeat_n(false, n));
        }
        if let Some(v) = &mut out.vertex_ids {
            v.extend(std::iter::repeat_n(None, n));
        }
    }
    out
}

fn random_in_ball(r: &mut impl Rng) -> Point3 {
    loop {
        let p = Point3::new(
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
        );
        if p.norm_sq() <= 1.0 {
            return p;
        }
    }
}

/// A cut plane: points with `normal · p >= offset` were removed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutPlane {
    pub normal: Point3,
    pub offset: f64,
}

/// Removes every point on one side of a random plane, choosing the plane
/// offset so that at least `fraction` of the points go (as few extra as
/// ties allow).
pub fn crop_occlusion(
    frame: &PointCloudFrame,
    fraction: f64,
    seed: u64,
) -> Result<(PointCloudFrame, Option<CutPlane>), SynthError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(SynthError::InvalidConfig(format!(
            "occlusion fraction {fraction} outside [0, 1)"
        )));
    }
    let n = frame.len();
    let remove = (fraction * n as f64).ceil() as usize;
    if remove == 0 {
        return Ok((frame.clone(), None));
    }
    let mut r = rng::stream(seed, &[0xC207]);
    // mostly horizontal normals: occluders stand on the ground
    let az = r.random_range(0.0..std::f64::consts::TAU);
    let tilt: f64 = r.random_range(-0.4..0.4);
    let normal = Point3::new(az.cos() * tilt.cos(), az.sin() * tilt.cos(), tilt.sin());
    let mut proj: Vec<f64> = frame.points.iter().map(|p| normal.dot(*p)).collect();
    proj.sort_by(|a, b| b.total_cmp(a));
    let offset = proj[remove - 1];
    let keep: Vec<usize> = (0..n)
        .filter(|&i| normal.dot(frame.points[i]) < offset)
        .collect();
    if keep.is_empty() {
        return Err(SynthError::EmptyAfterCrop);
    }
    Ok((frame.select(&keep), Some(CutPlane { normal, offset })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{knn_brute_force, FlowField};

    fn blob(n: usize, seed: u64) -> PointCloudFrame {
        let mut r = rng::stream(seed, &[1]);
        let points: Vec<Point3> = (0..n)
            .map(|_| {
                Point3::new(
                    r.random_range(-0.3..0.3),
                    r.random_range(-0.2..0.2),
                    r.random_range(0.0..1.8),
                )
            })
            .collect();
        PointCloudFrame {
            part_labels: Some((0..n).map(|i| (i % 9) as u8).collect()),
            flow: Some(FlowField::from_vectors(vec![Point3::new(0.1, 0.0, 0.0); n])),
            vertex_ids: Some((0..n as u32).map(Some).collect()),
            points,
        }
    }

    #[test]
    fn zero_noise_objects_is_identity() {
        let f = blob(100, 1);
        assert_eq!(add_noise_objects(&f, 0, 3), f);
    }

    #[test]
    fn noise_objects_append_labelled_clusters() {
        let f = blob(300, 2);
        let g = add_noise_objects(&f, 2, 4);
        let added = g.len() - f.len();
        assert!((20..=80).contains(&added));
        g.validate().unwrap();
        assert_eq!(&g.points[..f.len()], &f.points[..]);
        let labels = g.part_labels.as_ref().unwrap();
        assert_eq!(&labels[..f.len()], &f.part_labels.as_ref().unwrap()[..]);
        assert!(labels[f.len()..].iter().all(|l| *l == NOISE_LABEL));
        assert!(g.vertex_ids.as_ref().unwrap()[f.len()..].iter().all(|v| v.is_none()));
        assert!(g.flow.as_ref().unwrap().valid[f.len()..].iter().all(|v| !v));

        // split the appended points back into clusters: re-run the generator
        // one cluster at a time and compare lengths
        let one = add_noise_objects(&f, 1, 4);
        let first = one.len() - f.len();
        let clusters = [&g.points[f.len()..f.len() + first], &g.points[f.len() + first..]];
        assert!(clusters.iter().all(|c| (10..=40).contains(&c.len())));
        for c in clusters {
            let centroid = crate::geom::centroid(c).unwrap();
            let nn = knn_brute_force(&[centroid], &f.points, 1).unwrap();
            assert!(nn[0][0].distance < 0.5);
        }
    }

    #[test]
    fn crop_zero_is_identity() {
        let f = blob(50, 3);
        assert_eq!(crop_occlusion(&f, 0.0, 1).unwrap().0, f);
    }

    #[test]
    fn crop_removes_a_half_space() {
        for seed in 0..10 {
            let f = blob(1000, seed);
            let (g, plane) = crop_occlusion(&f, 0.3, seed).unwrap();
            assert!((650..=700).contains(&g.len()), "kept {}", g.len());
            let plane = plane.unwrap();
            // every kept point is strictly inside, every removed point outside
            let kept: std::collections::HashSet<u32> = g
                .vertex_ids
                .as_ref()
                .unwrap()
                .iter()
                .map(|v| v.unwrap())
                .collect();
            for (i, p) in f.points.iter().enumerate() {
                let inside = plane.normal.dot(*p) < plane.offset;
                assert_eq!(inside, kept.contains(&(i as u32)));
            }
            g.validate().unwrap();
        }
    }

    #[test]
    fn crop_is_deterministic() {
        let f = blob(200, 9);
        assert_eq!(
            crop_occlusion(&f, 0.4, 5).unwrap(),
            crop_occlusion(&f, 0.4, 5).unwrap()
        );
    }

    #[test]
    fn crop_rejects_bad_fraction() {
        assert!(crop_occlusion(&blob(10, 1), 1.0, 0).is_err());
    }
}
