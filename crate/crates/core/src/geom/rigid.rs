use super::Point3;

/// Row-major 3×3 matrix, used for rotations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn rot_x(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    }

    pub fn rot_y(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    pub fn rot_z(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn mul(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(r)
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let m = &self.0;
        Point3::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z,
            m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z,
            m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z,
        )
    }
}

/// Rigid transform `p -> rot * p + trans`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub rot: Mat3,
    pub trans: Point3,
}

impl Rigid {
    pub const IDENTITY: Rigid = Rigid {
        rot: Mat3::IDENTITY,
        trans: Point3::ZERO,
    };

    pub fn translation(t: Point3) -> Rigid {
        Rigid {
            rot: Mat3::IDENTITY,
            trans: t,
        }
    }

    /// Rotation by `rot` about the fixed point `pivot`.
    pub fn about(pivot: Point3, rot: Mat3) -> Rigid {
        Rigid {
            rot,
            trans: pivot - rot.apply(pivot),
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        self.rot.apply(p) + self.trans
    }

    /// `self ∘ inner`: applies `inner` first.
    pub fn compose(&self, inner: &Rigid) -> Rigid {
        Rigid {
            rot: self.rot.mul(&inner.rot),
            trans: self.rot.apply(inner.trans) + self.trans,
        }
    }
}
