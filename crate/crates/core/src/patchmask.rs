//! Body-part patches and the temporal-then-spatial mask.

use rand::seq::index::sample;
use thiserror::Error;

use crate::geom::{centroid, fps, Point3, PointCloudFrame, PointSequence, NOISE_LABEL};
use crate::rng;

/// Number of body parts (patches per frame).
pub const NUM_PARTS: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("frame {frame} has no part labels")]
    MissingLabels { frame: usize },
    #[error("frame {frame} has no flow channel")]
    MissingFlow { frame: usize },
    #[error("patch size must be positive")]
    ZeroPatchSize,
    #[error("mask plan is {plan_l}x{plan_m} but patch tensor is {l}x{m}")]
    ShapeMismatch {
        plan_l: usize,
        plan_m: usize,
        l: usize,
        m: usize,
    },
    #[error("mask ratio {0} outside [0, 1)")]
    BadRatio(f64),
}

/// Point indices of each of the 9 parts; noise points are dropped.
pub fn group_by_part(frame: &PointCloudFrame) -> Result<[Vec<usize>; NUM_PARTS], PatchError> {
    let labels = frame
        .part_labels
        .as_ref()
        .ok_or(PatchError::MissingLabels { frame: 0 })?;
    let mut groups: [Vec<usize>; NUM_PARTS] = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        if l != NOISE_LABEL && (l as usize) < NUM_PARTS {
            groups[l as usize].push(i);
        }
    }
    Ok(groups)
}

/// Fixed-shape part patches of a sequence. Flat arrays are row-major:
/// `patches[((t * M + m) * n + k) * 3 + axis]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor {
    pub frames: usize,
    pub parts: usize,
    pub patch_size: usize,
    pub patches: Vec<f64>,
    pub centers: Vec<[f64; 3]>,
    pub flow: Option<Vec<f64>>,
    pub absent: Vec<bool>,
}

impl PatchTensor {
    pub fn slot(&self, t: usize, m: usize) -> usize {
        t * self.parts + m
    }

    pub fn slots(&self) -> usize {
        self.frames * self.parts
    }

    /// Coordinates of one patch, `patch_size * 3` values.
    pub fn patch(&self, slot: usize) -> &[f64] {
        let w = self.patch_size * 3;
        &self.patches[slot * w..(slot + 1) * w]
    }

    pub fn flow_patch(&self, slot: usize) -> Option<&[f64]> {
        let w = self.patch_size * 3;
        self.flow.as_ref().map(|f| &f[slot * w..(slot + 1) * w])
    }
}

fn frame_centroid(frame: &PointCloudFrame) -> Point3 {
    let body: Vec<Point3> = match &frame.part_labels {
        Some(l) => frame
            .points
            .iter()
            .zip(l)
            .filter(|(_, l)| **l != NOISE_LABEL)
            .map(|(p, _)| *p)
            .collect(),
        None => Vec::new(),
    };
    centroid(&body)
        .or_else(|| centroid(&frame.points))
        .unwrap_or(Point3::ZERO)
}

/// Samples every part of every frame to `patch_size` points with farthest
/// point sampling (cycling when a part has fewer points). The sampling
/// start inside each group is drawn from `seed`.
pub fn build_patch_tensor(
    seq: &PointSequence,
    patch_size: usize,
    with_flow: bool,
    seed: u64,
) -> Result<PatchTensor, PatchError> {
    if patch_size == 0 {
        return Err(PatchError::ZeroPatchSize);
    }
    let l = seq.len();
    let w = patch_size * 3;
    let mut patches = Vec::with_capacity(l * NUM_PARTS * w);
    let mut centers = Vec::with_capacity(l * NUM_PARTS);
    let mut absent = Vec::with_capacity(l * NUM_PARTS);
    let mut flow = with_flow.then(|| Vec::with_capacity(l * NUM_PARTS * w));
    let mut r = rng::stream(seed, &[0x9A7C]);

    for (t, frame) in seq.frames.iter().enumerate() {
        let groups = group_by_part(frame).map_err(|_| PatchError::MissingLabels { frame: t })?;
        let ff = if with_flow {
            Some(frame.flow.as_ref().ok_or(PatchError::MissingFlow { frame: t })?)
        } else {
            None
        };
        let fill = frame_centroid(frame);
        for g in &groups {
            use rand::Rng;
            let start: usize = r.random_range(0..g.len().max(1));
            if g.is_empty() {
                for _ in 0..patch_size {
                    patches.extend_from_slice(&fill.to_array());
                }
                if let Some(f) = &mut flow {
                    f.extend(std::iter::repeat_n(0.0, w));
                }
                centers.push(fill.to_array());
                absent.push(true);
                continue;
            }
            let pts: Vec<Point3> = g.iter().map(|&i| frame.points[i]).collect();
            let picked = fps(&pts, patch_size, start).expect("non-empty group");
            let mut sum = Point3::ZERO;
            for &k in &picked {
                let p = pts[k];
                sum += p;
                patches.extend_from_slice(&p.to_array());
                if let (Some(f), Some(ff)) = (&mut flow, ff) {
                    f.extend_from_slice(&ff.get(g[k]).unwrap_or(Point3::ZERO).to_array());
                }
            }
            centers.push((sum / patch_size as f64).to_array());
            absent.push(false);
        }
    }
    Ok(PatchTensor {
        frames: l,
        parts: NUM_PARTS,
        patch_size,
        patches,
        centers,
        flow,
        absent,
    })
}

/// Which slots are hidden. Frame and part lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub frames: usize,
    pub parts: usize,
    pub masked_frames: Vec<usize>,
    /// One entry per visible frame, in frame order.
    pub spatial_masked: Vec<(usize, Vec<usize>)>,
    pub seed: u64,
}

/// `round(ratio * n)` with halves rounded up.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + 0.5).floor() as usize).min(n)
}

/// Temporal mask first (whole frames), then a spatial mask over the parts
/// of every remaining frame. Both draws are uniform without replacement.
pub fn plan_mask(
    frames: usize,
    parts: usize,
    r_t: f64,
    r_s: f64,
    seed: u64,
) -> Result<MaskPlan, PatchError> {
    for r in [r_t, r_s] {
        if !(0.0..1.0).contains(&r) {
            return Err(PatchError::BadRatio(r));
        }
    }
    let mut rng = rng::stream(seed, &[0x3A5C]);
    let mut masked_frames = sample(&mut rng, frames, mask_count(r_t, frames)).into_vec();
    masked_frames.sort_unstable();
    let k = mask_count(r_s, parts);
    let spatial_masked = (0..frames)
        .filter(|t| masked_frames.binary_search(t).is_err())
        .map(|t| {
            let mut s = sample(&mut rng, parts, k).into_vec();
            s.sort_unstable();
            (t, s)
        })
        .collect();
    Ok(MaskPlan {
        frames,
        parts,
        masked_frames,
        spatial_masked,
        seed,
    })
}

/// Role of a slot under a mask plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotKind {
    Visible,
    SpatialMasked,
    TemporalMasked,
}

/// One group of slots with gathered patch data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchGroup {
    /// `(frame, part)` of each member, in slot order.
    pub slots: Vec<(usize, usize)>,
    /// Patches as sampled, `len * patch_size * 3`.
    pub raw: Vec<f64>,
    /// Patches minus their own centers.
    pub centered: Vec<f64>,
    pub centers: Vec<[f64; 3]>,
    pub absent: Vec<bool>,
    pub flow: Option<Vec<f64>>,
}

impl PatchGroup {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// A patch tensor split by a mask plan.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPatches {
    pub frames: usize,
    pub parts: usize,
    pub patch_size: usize,
    pub visible: PatchGroup,
    pub spatial: PatchGroup,
    pub temporal: PatchGroup,
}

impl MaskedPatches {
    /// Rebuilds the original tensor from the three groups.
    pub fn rescatter(&self) -> PatchTensor {
        let w = self.patch_size * 3;
        let n = self.frames * self.parts;
        let with_flow = self.visible.flow.is_some();
        let mut out = PatchTensor {
            frames: self.frames,
            parts: self.parts,
            patch_size: self.patch_size,
            patches: vec![0.0; n * w],
            centers: vec![[0.0; 3]; n],
            flow: with_flow.then(|| vec![0.0; n * w]),
            absent: vec![false; n],
        };
        for g in [&self.visible, &self.spatial, &self.temporal] {
            for (k, &(t, m)) in g.slots.iter().enumerate() {
                let s = t * self.parts + m;
                out.patches[s * w..(s + 1) * w].copy_from_slice(&g.raw[k * w..(k + 1) * w]);
                out.centers[s] = g.centers[k];
                out.absent[s] = g.absent[k];
                if let (Some(dst), Some(src)) = (&mut out.flow, &g.flow) {
                    dst[s * w..(s + 1) * w].copy_from_slice(&src[k * w..(k + 1) * w]);
                }
            }
        }
        out
    }
}

impl MaskPlan {
    pub fn kind(&self, t: usize, m: usize) -> SlotKind {
        if self.masked_frames.binary_search(&t).is_ok() {
            return SlotKind::TemporalMasked;
        }
        match self.spatial_masked.iter().find(|(f, _)| *f == t) {
            Some((_, parts)) if parts.binary_search(&m).is_ok() => SlotKind::SpatialMasked,
            _ => SlotKind::Visible,
        }
    }
}

/// Splits a patch tensor into visible, spatially masked and temporally
/// masked groups, each in (frame, part) order.
pub fn apply_mask(pt: &PatchTensor, plan: &MaskPlan) -> Result<MaskedPatches, PatchError> {
    if plan.frames != pt.frames || plan.parts != pt.parts {
        return Err(PatchError::ShapeMismatch {
            plan_l: plan.frames,
            plan_m: plan.parts,
            l: pt.frames,
            m: pt.parts,
        });
    }
    let w = pt.patch_size * 3;
    let new_group = || PatchGroup {
        flow: pt.flow.as_ref().map(|_| Vec::new()),
        ..PatchGroup::default()
    };
    let (mut vis, mut spa, mut tem) = (new_group(), new_group(), new_group());
    for t in 0..pt.frames {
        for m in 0..pt.parts {
            let g = match plan.kind(t, m) {
                SlotKind::Visible => &mut vis,
                SlotKind::SpatialMasked => &mut spa,
                SlotKind::TemporalMasked => &mut tem,
            };
            let s = pt.slot(t, m);
            let c = pt.centers[s];
            let patch = pt.patch(s);
            g.slots.push((t, m));
            g.raw.extend_from_slice(patch);
            g.centered
                .extend(patch.iter().enumerate().map(|(i, v)| v - c[i % 3]));
            g.centers.push(c);
            g.absent.push(pt.absent[s]);
            if let (Some(dst), Some(src)) = (&mut g.flow, &pt.flow) {
                dst.extend_from_slice(&src[s * w..(s + 1) * w]);
            }
        }
    }
    Ok(MaskedPatches {
        frames: pt.frames,
        parts: pt.parts,
        patch_size: pt.patch_size,
        visible: vis,
        spatial: spa,
        temporal: tem,
    })
}
