use super::{GeomError, Point3};

fn mean_min_sq(from: &[Point3], to: &[Point3]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|x| to.iter().map(|y| x.dist_sq(*y)).fold(f64::INFINITY, f64::min))
        .sum();
    total / from.len() as f64
}

/// Symmetric Chamfer distance with squared L2 terms:
/// mean over `a` of the squared distance to the closest point of `b`, plus
/// the same from `b` to `a`.
pub fn chamfer_l2(a: &[Point3], b: &[Point3]) -> Result<f64, GeomError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeomError::EmptyPointSet);
    }
    let ab = mean_min_sq(a, b);
    let ba = mean_min_sq(b, a);
    // fixed summation order keeps the value symmetric bit for bit
    Ok(if ab <= ba { ab + ba } else { ba + ab })
}
