use crate::geom::{FlowField, Point3, NOISE_LABEL};
use crate::patchmask::NUM_PARTS;

use super::TrainError;

/// Recall per class (`None` for classes absent from the truth) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    pub per_class: Vec<Option<f64>>,
    pub macc: f64,
    /// Number of classes present in the truth.
    pub present: usize,
}

pub fn mean_class_accuracy(pred: &[usize], truth: &[usize], classes: usize) -> Result<ClassAccuracy, TrainError> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(TrainError::Metric(format!(
            "need equal non-empty prediction and truth lists, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(bad) = pred.iter().chain(truth).find(|c| **c >= classes) {
        return Err(TrainError::Metric(format!("label {bad} outside {classes} classes")));
    }
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (p, t) in pred.iter().zip(truth) {
        total[*t] += 1;
        if p == t {
            hit[*t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hit
        .iter()
        .zip(&total)
        .map(|(h, n)| (*n > 0).then(|| *h as f64 / *n as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(ClassAccuracy {
        macc: present.iter().sum::<f64>() / present.len() as f64,
        present: present.len(),
        per_class,
    })
}

/// Root-relative mean per-joint position error in millimetres. Both poses
/// are `L` frames of `joints` points in metres.
pub fn mpjpe(pred: &[Point3], gt: &[Point3], joints: usize, root: usize) -> Result<f64, TrainError> {
    if pred.len() != gt.len() || joints == 0 || pred.is_empty() || pred.len() % joints != 0 || root >= joints {
        return Err(TrainError::Metric(format!(
            "pose shapes {} vs {} with {joints} joints (root {root})",
            pred.len(),
            gt.len()
        )));
    }
    let mut sum = 0.0;
    for (pf, gf) in pred.chunks(joints).zip(gt.chunks(joints)) {
        for (p, g) in pf.iter().zip(gf) {
            sum += ((*p - pf[root]) - (*g - gf[root])).norm();
        }
    }
    Ok(sum / pred.len() as f64 * 1000.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowMetrics {
    pub epe: f64,
    pub acc_strict: f64,
    pub acc_relax: f64,
    pub outlier: f64,
    /// Points the metrics were computed over.
    pub count: usize,
}

/// Scene-flow metrics over the points whose ground truth is valid.
pub fn flow_metrics(pred: &FlowField, gt: &FlowField) -> Result<FlowMetrics, TrainError> {
    if pred.len() != gt.len() {
        return Err(TrainError::Metric(format!("flow lengths {} vs {}", pred.len(), gt.len())));
    }
    let (mut epe, mut strict, mut relax, mut outlier, mut n) = (0.0, 0, 0, 0, 0usize);
    for i in 0..gt.len() {
        let Some(g) = gt.get(i) else { continue };
        let e = (pred.vectors[i] - g).norm();
        let mag = g.norm();
        let rel = if e == 0.0 { 0.0 } else { e / mag };
        epe += e;
        n += 1;
        strict += usize::from(e < 0.05 || rel < 0.05);
        relax += usize::from(e < 0.1 || rel < 0.1);
        outlier += usize::from(e > 0.3 || rel > 0.1);
    }
    if n == 0 {
        return Err(TrainError::Metric("no valid ground-truth flow".into()));
    }
    let n_f = n as f64;
    Ok(FlowMetrics {
        epe: epe / n_f,
        acc_strict: strict as f64 / n_f,
        acc_relax: relax as f64 / n_f,
        outlier: outlier as f64 / n_f,
        count: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartIou {
    /// IoU of each body part, `None` when the part is absent from the truth.
    pub per_part: [Option<f64>; NUM_PARTS],
    pub miou: f64,
}

/// Intersection over union of the nine body parts. Points whose truth is
/// noise are ignored; a noise prediction counts as a miss.
pub fn miou(pred: &[u8], gt: &[u8]) -> Result<PartIou, TrainError> {
    if pred.len() != gt.len() {
        return Err(TrainError::Metric(format!("label lengths {} vs {}", pred.len(), gt.len())));
    }
    let mut tp = [0usize; NUM_PARTS];
    let mut fp = [0usize; NUM_PARTS];
    let mut fneg = [0usize; NUM_PARTS];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == NOISE_LABEL {
            continue;
        }
        if p as usize > NUM_PARTS || g as usize >= NUM_PARTS {
            return Err(TrainError::Metric(format!("label {} outside 0..=9", p.max(g))));
        }
        if p == g {
            tp[g as usize] += 1;
        } else {
            fneg[g as usize] += 1;
            if (p as usize) < NUM_PARTS {
                fp[p as usize] += 1;
            }
        }
    }
    let mut per_part = [None; NUM_PARTS];
    for c in 0..NUM_PARTS {
        if tp[c] + fneg[c] > 0 {
            per_part[c] = Some(tp[c] as f64 / (tp[c] + fp[c] + fneg[c]) as f64);
        }
    }
    let present: Vec<f64> = per_part.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(PartIou { per_part, miou })
}
