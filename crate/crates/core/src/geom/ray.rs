use super::Point3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub dir: Point3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Point3 {
        self.origin + self.dir * t
    }
}

/// Nearest hit of a ray against a triangle list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleHit {
    pub t: f64,
    pub triangle: usize,
}

impl TriangleHit {
    /// Ordering used to pick among candidate hits: smaller distance first,
    /// and on an exact distance tie (a ray through a shared edge or vertex)
    /// the lower triangle id wins. Each edge hit therefore belongs to exactly
    /// one triangle.
    pub fn better_than(&self, other: &TriangleHit) -> bool {
        self.t < other.t || (self.t == other.t && self.triangle < other.triangle)
    }
}

/// Ray/triangle intersection (Möller–Trumbore) over the closed triangle.
///
/// Returns the parametric distance along `direction` (in units of its
/// length) of the hit, if it is strictly positive. Rays parallel to the
/// triangle plane never hit.
pub fn ray_triangle_intersect(origin: Point3, direction: Point3, tri: &[Point3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let pvec = direction.cross(e2);
    let det = e1.dot(pvec);
    let scale = e1.norm() * e2.norm() * direction.norm();
    if det.abs() <= 1e-14 * scale {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = origin - tri[0];
    let u = tvec.dot(pvec) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(e1);
    let v = direction.dot(qvec) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(qvec) * inv;
    (t > 0.0).then_some(t)
}
