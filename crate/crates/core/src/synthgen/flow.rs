//! Motion-flow ground truth through shared mesh vertex ids.

use std::collections::{HashMap, HashSet};

use super::SynthError;
use crate::geom::{knn, FlowField, Point3, PointCloudFrame};

/// Default match threshold between a return and its mesh vertex, meters.
pub const DEFAULT_FLOW_THRESHOLD: f64 = 0.10;

/// A scanned frame together with the posed mesh vertices it was scanned from.
#[derive(Debug, Clone, Copy)]
pub struct MeshedFrame<'a> {
    pub cloud: &'a PointCloudFrame,
    pub vertices: &'a [Point3],
    pub actor_id: u32,
}

/// For every vertex id, the point of `f` that is closest to that vertex,
/// provided it lies within `threshold` (ties go to the lower point index).
fn representatives(f: &MeshedFrame, ids: &[Option<u32>], threshold: f64) -> Result<HashMap<u32, usize>, SynthError> {
    let mut best: HashMap<u32, (f64, usize)> = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        let Some(v) = *id else { continue };
        let vertex = f
            .vertices
            .get(v as usize)
            .ok_or(SynthError::VertexOutOfRange(v))?;
        let d = f.cloud.points[i].dist(*vertex);
        if d >= threshold {
            continue;
        }
        match best.get(&v) {
            Some(&(bd, _)) if bd <= d => {}
            _ => {
                best.insert(v, (d, i));
            }
        }
    }
    Ok(best.into_iter().map(|(v, (_, i))| (v, i)).collect())
}

/// One-directional connections from `from` to `to`: each matched point of
/// `from` connects to the representative of its vertex in `to`.
fn connections(
    from_ids: &[Option<u32>],
    from_rep: &HashMap<u32, usize>,
    to_rep: &HashMap<u32, usize>,
    from: &MeshedFrame,
    threshold: f64,
) -> HashSet<(usize, usize)> {
    let mut out = HashSet::new();
    for (i, id) in from_ids.iter().enumerate() {
        let Some(v) = *id else { continue };
        if from.cloud.points[i].dist(from.vertices[v as usize]) >= threshold {
            continue;
        }
        // only the point standing for its vertex may connect, which keeps
        // the mapping one-to-one
        if from_rep.get(&v) != Some(&i) {
            continue;
        }
        if let Some(&j) = to_rep.get(&v) {
            out.insert((i, j));
        }
    }
    out
}

/// Flow from frame t to t+1. A point keeps a flow vector only when its
/// forward connection is confirmed by the backward pass.
pub fn flow_ground_truth(
    t: MeshedFrame,
    t1: MeshedFrame,
    threshold: f64,
) -> Result<FlowField, SynthError> {
    if t.actor_id != t1.actor_id || t.vertices.len() != t1.vertices.len() {
        return Err(SynthError::MismatchedActors);
    }
    let ids_t = t
        .cloud
        .vertex_ids
        .as_deref()
        .ok_or(SynthError::MissingChannel("vertex_ids"))?;
    let ids_t1 = t1
        .cloud
        .vertex_ids
        .as_deref()
        .ok_or(SynthError::MissingChannel("vertex_ids"))?;
    let rep_t = representatives(&t, ids_t, threshold)?;
    let rep_t1 = representatives(&t1, ids_t1, threshold)?;

    let forward = connections(ids_t, &rep_t, &rep_t1, &t, threshold);
    let backward: HashSet<(usize, usize)> = connections(ids_t1, &rep_t1, &rep_t, &t1, threshold)
        .into_iter()
        .map(|(j, i)| (i, j))
        .collect();

    let mut flow = FlowField::all_invalid(t.cloud.len());
    for &(i, j) in forward.intersection(&backward) {
        flow.vectors[i] = t1.cloud.points[j] - t.cloud.points[i];
        flow.valid[i] = true;
    }
    Ok(flow)
}

/// Nearest-neighbour flow: each point moves to its nearest point of the
/// next frame. Always valid.
pub fn nn_flow_baseline(
    t: &PointCloudFrame,
    t1: &PointCloudFrame,
) -> Result<FlowField, SynthError> {
    if t.is_empty() || t1.is_empty() {
        return Err(SynthError::EmptyFrame);
    }
    let nn = knn(&t.points, &t1.points, 1)?;
    Ok(FlowField::from_vectors(
        nn.iter()
            .zip(&t.points)
            .map(|(n, p)| t1.points[n[0].index] - *p)
            .collect(),
    ))
}
