use super::{GeomError, Point3};

/// Farthest point sampling.
///
/// Greedily picks `k` indices starting from `start_index`, each new pick
/// being the point farthest from the already selected set (ties go to the
/// lowest index). When `k` exceeds the number of points, the full FPS order
/// is returned first and then repeated cyclically so the output always has
/// exactly `k` entries.
pub fn fps(points: &[Point3], k: usize, start_index: usize) -> Result<Vec<usize>, GeomError> {
    let n = points.len();
    if n == 0 {
        return Err(GeomError::EmptyPointSet);
    }
    if k == 0 {
        return Err(GeomError::ZeroK);
    }
    if start_index >= n {
        return Err(GeomError::StartIndexOutOfRange {
            index: start_index,
            len: n,
        });
    }

    let take = k.min(n);
    let mut order = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start_index;
    order.push(current);
    min_d[current] = f64::NEG_INFINITY;
    while order.len() < take {
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if min_d[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = p.dist_sq(c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
        min_d[current] = f64::NEG_INFINITY;
        order.push(current);
    }
    for i in n..k {
        order.push(order[i % n]);
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn min_pairwise(points: &[Point3], idx: &[usize]) -> f64 {
        let mut m = f64::INFINITY;
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                m = m.min(points[idx[a]].dist(points[idx[b]]));
            }
        }
        m
    }

    #[test]
    fn line_example_matches_exhaustive_search() {
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
            Point3::new(10.0, 0.0, 0.0),
        ];
        // exhaustive: best 2-subset containing index 0
        let best = (1..4)
            .max_by(|&a, &b| {
                min_pairwise(&pts, &[0, a])
                    .partial_cmp(&min_pairwise(&pts, &[0, b]))
                    .unwrap()
            })
            .unwrap();
        assert_eq!(best, 3);
        assert_eq!(fps(&pts, 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn full_k_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point3> = (0..37)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let mut idx = fps(&pts, pts.len(), 5).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..pts.len()).collect::<Vec<_>>());
    }

    #[test]
    fn cycles_when_k_exceeds_n() {
        assert_eq!(fps(&[Point3::ZERO], 3, 0).unwrap(), vec![0, 0, 0]);
        let pts = [Point3::ZERO, Point3::new(1.0, 0.0, 0.0)];
        assert_eq!(fps(&pts, 5, 1).unwrap(), vec![1, 0, 1, 0, 1]);
    }

    #[test]
    fn errors() {
        assert_eq!(fps(&[], 1, 0), Err(GeomError::EmptyPointSet));
        assert_eq!(fps(&[Point3::ZERO], 0, 0), Err(GeomError::ZeroK));
        assert!(matches!(
            fps(&[Point3::ZERO], 1, 1),
            Err(GeomError::StartIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn beats_random_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Point3> = (0..200)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let k = 12;
        let chosen = fps(&pts, k, 0).unwrap();
        let fps_min = min_pairwise(&pts, &chosen);
        for _ in 0..100 {
            let subset = rand::seq::index::sample(&mut rng, pts.len(), k).into_vec();
            assert!(fps_min >= min_pairwise(&pts, &subset));
        }
    }
}
