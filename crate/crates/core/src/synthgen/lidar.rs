//! Simulated spinning LiDAR over an animated triangle mesh.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::motion::MeshSequence;
use super::SynthError;
use crate::geom::{
    ray_triangle_intersect, FlowField, Point3, PointCloudFrame, PointSequence, SequenceMeta,
    TriangleHit,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LidarConfig {
    pub origin: Point3,
    pub beams: usize,
    /// Lowest and highest beam elevation, degrees.
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    /// Azimuth step, degrees.
    pub azimuth_step_deg: f64,
    /// Standard deviation of Gaussian range noise, meters.
    pub range_sigma: f64,
    pub max_range: f64,
    /// Probability that a return is dropped, in [0, 1).
    pub dropout: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            origin: Point3::new(0.0, 0.0, 1.0),
            beams: 64,
            elevation_min_deg: -20.0,
            elevation_max_deg: 20.0,
            azimuth_step_deg: 0.2,
            range_sigma: 0.01,
            max_range: 60.0,
            dropout: 0.02,
        }
    }
}

impl LidarConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.beams == 0 {
            return Err(SynthError::InvalidConfig("lidar beams must be >= 1".into()));
        }
        if !(self.range_sigma >= 0.0) {
            return Err(SynthError::InvalidConfig("lidar range sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SynthError::InvalidConfig("lidar dropout must be in [0, 1)".into()));
        }
        if !(self.azimuth_step_deg > 0.0) || self.elevation_max_deg < self.elevation_min_deg {
            return Err(SynthError::InvalidConfig("lidar angular grid is empty".into()));
        }
        Ok(())
    }

    /// Elevation of each beam, radians, ascending.
    pub fn beam_elevations(&self) -> Vec<f64> {
        if self.beams == 1 {
            return vec![self.elevation_min_deg.to_radians()];
        }
        let span = self.elevation_max_deg - self.elevation_min_deg;
        (0..self.beams)
            .map(|b| (self.elevation_min_deg + span * b as f64 / (self.beams - 1) as f64).to_radians())
            .collect()
    }

    pub fn azimuth_count(&self) -> usize {
        (360.0 / self.azimuth_step_deg).round() as usize
    }

    pub fn direction(elevation: f64, azimuth: f64) -> Point3 {
        let (se, ce) = elevation.sin_cos();
        let (sa, ca) = azimuth.sin_cos();
        Point3::new(ce * ca, ce * sa, se)
    }
}

/// Bounding sphere from a vertex block.
fn bounding_sphere(vs: &[Point3]) -> (Point3, f64) {
    let mut lo = vs[0];
    let mut hi = vs[0];
    for v in vs {
        lo = Point3::new(lo.x.min(v.x), lo.y.min(v.y), lo.z.min(v.z));
        hi = Point3::new(hi.x.max(v.x), hi.y.max(v.y), hi.z.max(v.z));
    }
    let c = (lo + hi) * 0.5;
    let r = vs.iter().map(|v| v.dist(c)).fold(0.0, f64::max);
    (c, r * (1.0 + 1e-9) + 1e-12)
}

#[inline]
fn ray_hits_sphere(o: Point3, d: Point3, c: Point3, r: f64) -> bool {
    let oc = c - o;
    let proj = oc.dot(d);
    let perp2 = oc.norm_sq() - proj * proj;
    perp2 <= r * r && (proj >= 0.0 || oc.norm_sq() <= r * r)
}

/// One noise-free LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawReturn {
    pub point: Point3,
    pub range: f64,
    pub direction: Point3,
    pub triangle: usize,
}

/// Casts every (beam, azimuth) ray that can reach the mesh and returns the
/// nearest hits in beam-major order.
pub fn scan_frame(
    vertices: &[Point3],
    mesh: &MeshSequence,
    cfg: &LidarConfig,
) -> Vec<RawReturn> {
    let o = cfg.origin;
    let spheres: Vec<(Point3, f64)> = mesh
        .vertex_ranges
        .iter()
        .map(|r| bounding_sphere(&vertices[r.clone()]))
        .collect();
    let (center, radius) = bounding_sphere(vertices);
    let to_c = center - o;
    let dist = to_c.norm();
    let horiz = (to_c.x * to_c.x + to_c.y * to_c.y).sqrt();

    let elevations = cfg.beam_elevations();
    let n_az = cfg.azimuth_count();
    let step = cfg.azimuth_step_deg.to_radians();
    // azimuth columns that can reach the actor's bounding sphere
    let columns: Vec<usize> = if horiz > radius && dist > radius {
        let half = (radius / horiz).asin();
        let az_c = to_c.y.atan2(to_c.x);
        let k_lo = ((az_c - half) / step).floor() as i64;
        let k_hi = ((az_c + half) / step).ceil() as i64;
        (k_lo..=k_hi)
            .map(|k| k.rem_euclid(n_az as i64) as usize)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect()
    } else {
        (0..n_az).collect()
    };
    let el_window = if dist > radius {
        let el_c = (to_c.z / dist).asin();
        let half = (radius / dist).asin();
        (el_c - half, el_c + half)
    } else {
        (f64::NEG_INFINITY, f64::INFINITY)
    };

    let mut out = Vec::new();
    for &el in &elevations {
        if el < el_window.0 - 1e-12 || el > el_window.1 + 1e-12 {
            continue;
        }
        for &k in &columns {
            let d = LidarConfig::direction(el, k as f64 * step);
            let mut best: Option<TriangleHit> = None;
            for (s, (sc, sr)) in spheres.iter().enumerate() {
                if !ray_hits_sphere(o, d, *sc, *sr) {
                    continue;
                }
                for ti in mesh.triangle_ranges[s].clone() {
                    let t = &mesh.triangles[ti];
                    let tri = [
                        vertices[t[0] as usize],
                        vertices[t[1] as usize],
                        vertices[t[2] as usize],
                    ];
                    if let Some(dist) = ray_triangle_intersect(o, d, &tri) {
                        let hit = TriangleHit { t: dist, triangle: ti };
                        if best.is_none_or(|b| hit.better_than(&b)) {
                            best = Some(hit);
                        }
                    }
                }
            }
            if let Some(h) = best {
                if h.t <= cfg.max_range {
                    out.push(RawReturn {
                        point: o + d * h.t,
                        range: h.t,
                        direction: d,
                        triangle: h.triangle,
                    });
                }
            }
        }
    }
    out
}

/// Nearest of the hit triangle's three vertices (lowest index on ties).
pub fn nearest_triangle_vertex(p: Point3, tri: &[u32; 3], vertices: &[Point3]) -> u32 {
    let mut best = tri[0];
    let mut best_d = p.dist_sq(vertices[tri[0] as usize]);
    for &v in &tri[1..] {
        let d = p.dist_sq(vertices[v as usize]);
        if d < best_d || (d == best_d && v < best) {
            best = v;
            best_d = d;
        }
    }
    best
}

/// Scans one posed frame: noise, dropout, and nearest-vertex label transfer.
pub fn simulate_frame(
    mesh: &MeshSequence,
    frame_index: usize,
    cfg: &LidarConfig,
    seed: u64,
) -> PointCloudFrame {
    let vertices = &mesh.frames[frame_index].vertices;
    let raw = scan_frame(vertices, mesh, cfg);
    let mut rng = rng::stream(seed, &[0x11DA, frame_index as u64]);
    let noise = Normal::new(0.0, cfg.range_sigma.max(0.0)).expect("finite sigma");
    let mut points = Vec::with_capacity(raw.len());
    let mut labels = Vec::with_capacity(raw.len());
    let mut ids = Vec::with_capacity(raw.len());
    for r in raw {
        let dr = if cfg.range_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        let u: f64 = rng.random();
        if u < cfg.dropout {
            continue;
        }
        let v = nearest_triangle_vertex(r.point, &mesh.triangles[r.triangle], vertices);
        points.push(cfg.origin + r.direction * (r.range + dr));
        labels.push(mesh.vertex_part[v as usize]);
        ids.push(Some(v));
    }
    PointCloudFrame {
        points,
        part_labels: Some(labels),
        flow: None,
        vertex_ids: Some(ids),
    }
}

/// Scans every frame of an animation. Frames carry part labels and the
/// vertex id of each return; joints are copied from the animation.
pub fn simulate_lidar(
    mesh: &MeshSequence,
    cfg: &LidarConfig,
    seed: u64,
) -> Result<PointSequence, SynthError> {
    cfg.validate()?;
    if mesh.is_empty() {
        return Err(SynthError::EmptyMeshSequence);
    }
    let mut frames = Vec::with_capacity(mesh.len());
    for t in 0..mesh.len() {
        let f = simulate_frame(mesh, t, cfg, seed);
        if f.is_empty() {
            return Err(SynthError::OutOfView { frame: t });
        }
        frames.push(f);
    }
    Ok(PointSequence {
        frames,
        meta: SequenceMeta {
            actor_id: mesh.actor_id,
            joints: Some(mesh.frames.iter().map(|f| f.joints.clone()).collect()),
            ..SequenceMeta::default()
        },
    })
}

/// Attaches an all-invalid flow channel; used before flow estimation.
pub fn empty_flow(frame: &PointCloudFrame) -> FlowField {
    FlowField::all_invalid(frame.len())
}
