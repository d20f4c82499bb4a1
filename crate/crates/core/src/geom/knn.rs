use std::cmp::Ordering;
use std::collections::HashMap;

use super::{GeomError, Point3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// Euclidean distance.
    pub distance: f64,
}

#[inline]
fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

fn check_k(k: usize, len: usize) -> Result<(), GeomError> {
    if len == 0 {
        return Err(GeomError::EmptyPointSet);
    }
    if k == 0 {
        return Err(GeomError::ZeroK);
    }
    if k > len {
        return Err(GeomError::KTooLarge { k, len });
    }
    Ok(())
}

fn finish(mut cand: Vec<(f64, usize)>, k: usize) -> Vec<Neighbor> {
    cand.sort_by(by_dist_then_index);
    cand.truncate(k);
    cand.into_iter()
        .map(|(d2, index)| Neighbor {
            index,
            distance: d2.sqrt(),
        })
        .collect()
}

/// Exact k-nearest neighbours by exhaustive scan. Ties go to the lower index.
pub fn knn_brute_force(
    query: &[Point3],
    reference: &[Point3],
    k: usize,
) -> Result<Vec<Vec<Neighbor>>, GeomError> {
    check_k(k, reference.len())?;
    Ok(query
        .iter()
        .map(|q| {
            let cand = reference
                .iter()
                .enumerate()
                .map(|(i, r)| (q.dist_sq(*r), i))
                .collect();
            finish(cand, k)
        })
        .collect())
}

/// k-nearest neighbours; dispatches to the grid accelerator for large
/// reference sets. Results are identical to [`knn_brute_force`].
pub fn knn(
    query: &[Point3],
    reference: &[Point3],
    k: usize,
) -> Result<Vec<Vec<Neighbor>>, GeomError> {
    check_k(k, reference.len())?;
    if reference.len() < 256 {
        return knn_brute_force(query, reference, k);
    }
    let grid = GridIndex::build(reference, None)?;
    Ok(query.iter().map(|q| grid.query(*q, k)).collect())
}

type Cell = (i64, i64, i64);

/// Uniform-grid bucket index over a fixed reference set.
#[derive(Debug, Clone)]
pub struct GridIndex<'a> {
    points: &'a [Point3],
    origin: Point3,
    cell: f64,
    dims: [i64; 3],
    buckets: HashMap<Cell, Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    /// Builds the index. Without an explicit cell size, one is chosen so the
    /// average bucket holds a handful of points.
    pub fn build(points: &'a [Point3], cell: Option<f64>) -> Result<Self, GeomError> {
        if points.is_empty() {
            return Err(GeomError::EmptyPointSet);
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        }
        let ext = hi - lo;
        let cell = cell.unwrap_or_else(|| {
            let vol = (ext.x.max(1e-9)) * (ext.y.max(1e-9)) * (ext.z.max(1e-9));
            let target = 4.0;
            (vol * target / points.len() as f64).cbrt()
        });
        let cell = if cell.is_finite() && cell > 0.0 {
            cell.max(ext.norm() * 1e-6).max(f64::MIN_POSITIVE)
        } else {
            1.0
        };
        let dims = [
            (ext.x / cell).floor() as i64 + 1,
            (ext.y / cell).floor() as i64 + 1,
            (ext.z / cell).floor() as i64 + 1,
        ];
        let mut grid = GridIndex {
            points,
            origin: lo,
            cell,
            dims,
            buckets: HashMap::new(),
        };
        for (i, p) in points.iter().enumerate() {
            let c = grid.cell_of(*p);
            grid.buckets.entry(c).or_default().push(i);
        }
        Ok(grid)
    }

    fn cell_of(&self, p: Point3) -> Cell {
        let d = p - self.origin;
        (
            (d.x / self.cell).floor() as i64,
            (d.y / self.cell).floor() as i64,
            (d.z / self.cell).floor() as i64,
        )
    }

    /// Exact k nearest neighbours of `q`; `k` must not exceed the number of
    /// indexed points.
    pub fn query(&self, q: Point3, k: usize) -> Vec<Neighbor> {
        let k = k.min(self.points.len());
        let qc = self.cell_of(q);
        let qa = [qc.0, qc.1, qc.2];
        let max_r = (0..3)
            .map(|a| qa[a].abs().max((qa[a] - (self.dims[a] - 1)).abs()))
            .max()
            .unwrap_or(0);
        let mut cand: Vec<(f64, usize)> = Vec::new();
        let mut r: i64 = 0;
        loop {
            self.visit_shell(qc, r, q, &mut cand);
            if r >= max_r {
                break;
            }
            if cand.len() >= k {
                cand.sort_by(by_dist_then_index);
                cand.truncate(k.max(1));
                // Every unvisited point lies at least r * cell away; keep a
                // relative margin so floor() rounding at cell borders cannot
                // hide a closer (or equally close, lower-index) point.
                let bound = (r as f64 * self.cell) * (1.0 - 1e-9);
                if bound > 0.0 && cand[k - 1].0 < bound * bound {
                    break;
                }
            }
            r += 1;
        }
        finish(cand, k)
    }

    fn visit_shell(&self, c: Cell, r: i64, q: Point3, cand: &mut Vec<(f64, usize)>) {
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    if let Some(bucket) = self.buckets.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                        cand.extend(bucket.iter().map(|&i| (q.dist_sq(self.points[i]), i)));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    /// Independent oracle: full sort of all distances.
    fn oracle(q: Point3, reference: &[Point3], k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = reference
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d = ((q.x - r.x).powi(2) + (q.y - r.y).powi(2) + (q.z - r.z).powi(2)).sqrt();
                (i, d)
            })
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn simple_examples() {
        let r = knn(
            &[Point3::ZERO],
            &[Point3::new(1.0, 0.0, 0.0), Point3::new(0.5, 0.0, 0.0)],
            1,
        )
        .unwrap();
        assert_eq!(r[0], vec![Neighbor { index: 1, distance: 0.5 }]);

        let pts = [Point3::new(1.0, 2.0, 3.0), Point3::new(4.0, 5.0, 6.0)];
        let r = knn(&pts[1..], &pts, 1).unwrap();
        assert_eq!(r[0][0].index, 1);
        assert_eq!(r[0][0].distance, 0.0);
    }

    #[test]
    fn fifty_random_points_match_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let pts = cloud(&mut rng, 50);
        let res = knn(&pts, &pts, 5).unwrap();
        for (q, row) in pts.iter().zip(&res) {
            let want = oracle(*q, &pts, 5);
            for (got, (i, d)) in row.iter().zip(want) {
                assert_eq!(got.index, i);
                assert!((got.distance - d).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn k_too_large() {
        assert!(matches!(
            knn(&[Point3::ZERO], &[Point3::ZERO], 2),
            Err(GeomError::KTooLarge { .. })
        ));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let reference = [Point3::new(1.0, 0.0, 0.0), Point3::new(-1.0, 0.0, 0.0)];
        let r = knn_brute_force(&[Point3::ZERO], &reference, 1).unwrap();
        assert_eq!(r[0][0].index, 0);
    }

    #[test]
    fn grid_is_bit_identical_to_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let n = 50 + trial * 37;
            let mut pts = cloud(&mut rng, n);
            // duplicated points exercise tie handling
            pts.extend_from_within(0..10);
            let queries = cloud(&mut rng, 40);
            for cell in [None, Some(0.05), Some(0.3), Some(2.0)] {
                let grid = GridIndex::build(&pts, cell).unwrap();
                let brute = knn_brute_force(&queries, &pts, 7).unwrap();
                for (q, want) in queries.iter().zip(&brute) {
                    assert_eq!(&grid.query(*q, 7), want);
                }
            }
        }
    }

    #[test]
    fn grid_handles_far_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = cloud(&mut rng, 300);
        let q = Point3::new(25.0, -3.0, 4.0);
        let grid = GridIndex::build(&pts, None).unwrap();
        assert_eq!(
            grid.query(q, 3),
            knn_brute_force(&[q], &pts, 3).unwrap()[0]
        );
    }
}
