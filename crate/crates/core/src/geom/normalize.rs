use super::{GeomError, Point3, PointSequence};

/// Translation and scale applied by [`normalize_sequence`]:
/// `normalized = (world - centroid) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRecord {
    pub centroid: Point3,
    pub scale: f64,
}

impl NormRecord {
    pub const IDENTITY: NormRecord = NormRecord {
        centroid: Point3::ZERO,
        scale: 1.0,
    };

    pub fn apply_point(&self, p: Point3) -> Point3 {
        (p - self.centroid) / self.scale
    }

    pub fn invert_point(&self, p: Point3) -> Point3 {
        p * self.scale + self.centroid
    }

    /// Maps a normalized sequence back to world coordinates.
    pub fn invert(&self, seq: &PointSequence) -> PointSequence {
        self.map(seq, |p| self.invert_point(p), |f| f * self.scale)
    }

    /// Applies this record to another sequence (e.g. a paired prediction).
    pub fn apply(&self, seq: &PointSequence) -> PointSequence {
        self.map(seq, |p| self.apply_point(p), |f| f / self.scale)
    }

    fn map(
        &self,
        seq: &PointSequence,
        point: impl Fn(Point3) -> Point3,
        flow: impl Fn(Point3) -> Point3,
    ) -> PointSequence {
        let mut out = seq.clone();
        for frame in &mut out.frames {
            for p in &mut frame.points {
                *p = point(*p);
            }
            if let Some(f) = &mut frame.flow {
                for v in &mut f.vectors {
                    *v = flow(*v);
                }
            }
        }
        if let Some(joints) = &mut out.meta.joints {
            for frame in joints {
                for j in frame {
                    *j = point(*j);
                }
            }
        }
        out
    }
}

/// Centers the whole sequence on the centroid of all its points and scales
/// it into the unit ball. Flow vectors are only scaled. A degenerate
/// sequence (all points identical) keeps scale 1.
pub fn normalize_sequence(seq: &PointSequence) -> Result<(PointSequence, NormRecord), GeomError> {
    let count: usize = seq.frames.iter().map(|f| f.len()).sum();
    if count == 0 {
        return Err(GeomError::EmptySequence);
    }
    let mut acc = Point3::ZERO;
    for f in &seq.frames {
        for p in &f.points {
            acc += *p;
        }
    }
    let centroid = acc / count as f64;
    let max_norm = seq
        .frames
        .iter()
        .flat_map(|f| f.points.iter())
        .map(|p| (*p - centroid).norm())
        .fold(0.0, f64::max);
    let scale = if max_norm > 0.0 && max_norm.is_finite() {
        max_norm
    } else {
        1.0
    };
    let record = NormRecord { centroid, scale };
    Ok((record.apply(seq), record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{FlowField, PointCloudFrame, SequenceMeta};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq_of(frames: Vec<Vec<Point3>>) -> PointSequence {
        PointSequence::new(
            frames.into_iter().map(PointCloudFrame::new).collect(),
            SequenceMeta::default(),
        )
    }

    #[test]
    fn hand_example() {
        let s = seq_of(vec![vec![Point3::new(2.0, 0.0, 0.0), Point3::new(4.0, 0.0, 0.0)]]);
        let (n, rec) = normalize_sequence(&s).unwrap();
        assert_eq!(rec.centroid, Point3::new(3.0, 0.0, 0.0));
        assert_eq!(rec.scale, 1.0);
        assert_eq!(
            n.frames[0].points,
            vec![Point3::new(-1.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)]
        );
    }

    #[test]
    fn idempotent_and_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<Vec<Point3>> = (0..5)
            .map(|_| {
                (0..40)
                    .map(|_| {
                        Point3::new(
                            rng.random_range(-3.0..8.0),
                            rng.random_range(2.0..9.0),
                            rng.random_range(0.0..2.0),
                        )
                    })
                    .collect()
            })
            .collect();
        let mut s = seq_of(frames);
        s.frames[0].flow = Some(FlowField::from_vectors(vec![Point3::new(0.5, 0.0, 0.0); 40]));
        let (n, rec) = normalize_sequence(&s).unwrap();
        let max = n
            .frames
            .iter()
            .flat_map(|f| f.points.iter())
            .map(|p| p.norm())
            .fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        assert!((n.frames[0].flow.as_ref().unwrap().vectors[0].x - 0.5 / rec.scale).abs() < 1e-15);

        let (again, rec2) = normalize_sequence(&n).unwrap();
        assert!(rec2.centroid.norm() < 1e-12);
        assert!((rec2.scale - 1.0).abs() < 1e-12);
        for (a, b) in again.frames.iter().zip(&n.frames) {
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!(p.dist(*q) < 1e-12);
            }
        }

        let back = rec.invert(&n);
        for (a, b) in back.frames.iter().zip(&s.frames) {
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!(p.dist(*q) <= 1e-6 * q.norm().max(1.0));
            }
        }
        let fb = back.frames[0].flow.as_ref().unwrap().vectors[0];
        assert!((fb.x - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_sequence_keeps_unit_scale() {
        let s = seq_of(vec![vec![Point3::new(1.0, 1.0, 1.0); 3]]);
        let (n, rec) = normalize_sequence(&s).unwrap();
        assert_eq!(rec.scale, 1.0);
        assert!(n.frames[0].points.iter().all(|p| *p == Point3::ZERO));
    }

    #[test]
    fn empty_is_error() {
        assert_eq!(
            normalize_sequence(&PointSequence::default()),
            Err(GeomError::EmptySequence)
        );
    }
}
