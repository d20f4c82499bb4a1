use rand::seq::SliceRandom;

use super::metrics::{mean_class_accuracy, mpjpe, ClassAccuracy};
use super::{MaskConfig, Sample, Schedule, TrainConfig, TrainError};
use crate::geom::Point3;
use crate::model::{action_loss, pose_loss, HeadKind, ModelError, PvuModel, Stage};
use crate::patchmask::{apply_mask, plan_mask};
use crate::rng;
use crate::tensornet::{cosine_lr, AdamW, AdamWState, Gradients, Graph, ParamStore};

/// Everything that changes while training; saving and restoring it resumes
/// a run bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub opt: AdamWState<f32>,
    /// Completed optimizer steps.
    pub step: usize,
    /// Mean batch loss of every step that had a loss.
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn new(params: ParamStore<f32>) -> Self {
        let opt = AdamWState::new(&params);
        Self {
            params,
            opt,
            step: 0,
            losses: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Steps completed after this one.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the samples that produced one.
    pub loss: Option<f64>,
    /// Samples skipped because they had nothing to reconstruct.
    pub skipped: usize,
    pub snapshot_due: bool,
}

/// Mini-batch AdamW training of one model stage over prepared samples.
/// Batch order and masks derive from the seed and the step index only.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    model: &'a PvuModel,
    cfg: TrainConfig,
    mask: MaskConfig,
    data: &'a [Sample],
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a PvuModel, cfg: TrainConfig, data: &'a [Sample]) -> Result<Self, TrainError> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        Ok(Self {
            model,
            cfg,
            mask: MaskConfig::default(),
            data,
        })
    }

    pub fn with_mask(mut self, mask: MaskConfig) -> Self {
        self.mask = mask;
        self
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.batch)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.cfg.epochs
    }

    fn batch(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, b) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng::stream(self.cfg.seed, &[0xE90C, epoch as u64]));
        let end = ((b + 1) * self.cfg.batch).min(order.len());
        order[b * self.cfg.batch..end].to_vec()
    }

    fn sample_loss(
        &self,
        params: &ParamStore<f32>,
        idx: usize,
        step: usize,
    ) -> Result<Option<(f64, Gradients<f32>)>, TrainError> {
        let s = &self.data[idx];
        let mut g = Graph::new(params);
        let loss = match self.model.stage() {
            Stage::Pretrain => {
                let seed = match self.mask.fixed {
                    true => rng::derive_seed(self.cfg.seed, &[0x3A5C, idx as u64]),
                    false => rng::derive_seed(self.cfg.seed, &[0x3A5C, step as u64, idx as u64]),
                };
                let pt = crate::patchmask::PatchTensor {
                    flow: None,
                    ..s.patches.clone()
                };
                let plan = plan_mask(pt.frames, pt.parts, self.mask.r_t, self.mask.r_s, seed)?;
                let mp = apply_mask(&pt, &plan)?;
                match self.model.pretrain_loss(&mut g, &mp, false) {
                    Ok(out) => out.loss,
                    Err(ModelError::NothingToReconstruct) => return Ok(None),
                    Err(e) => return Err(e.into()),
                }
            }
            Stage::Finetune => {
                let out = self.model.finetune_forward(&mut g, &s.input)?;
                match self.model.config().head {
                    HeadKind::Action { .. } => action_loss(&mut g, out.logits.expect("action head"), s.class)?,
                    HeadKind::Pose { joints, root } => {
                        let target: Vec<f64> = s
                            .root_relative(joints, root)?
                            .iter()
                            .flat_map(|p| p.to_array())
                            .collect();
                        pose_loss(&mut g, out.joints.expect("pose head"), &target)?
                    }
                }
            }
        };
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(TrainError::Diverged { step, loss: value });
        }
        Ok(Some((value, g.backward(loss)?)))
    }

    /// Runs one optimizer step.
    pub fn step(&self, st: &mut TrainState) -> Result<StepReport, TrainError> {
        let step = st.step;
        let total = self.total_steps();
        let lr = match self.cfg.schedule {
            Schedule::Constant => self.cfg.lr,
            Schedule::Cosine => cosine_lr(step, total, self.cfg.lr),
        };
        let mut grads = Gradients::empty(st.params.len());
        let (mut sum, mut count, mut skipped) = (0.0, 0usize, 0usize);
        for idx in self.batch(step) {
            match self.sample_loss(&st.params, idx, step)? {
                Some((l, g)) => {
                    sum += l;
                    count += 1;
                    grads.accumulate(&g);
                }
                None => skipped += 1,
            }
        }
        let loss = (count > 0).then(|| sum / count as f64);
        if count > 0 {
            grads.scale(1.0 / count as f32);
            if !grads.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    loss: f64::NAN,
                });
            }
            let opt = AdamW {
                weight_decay: self.cfg.weight_decay,
                ..AdamW::default()
            };
            opt.step(&mut st.params, &grads, &mut st.opt, lr);
        }
        if let Some(l) = loss {
            st.losses.push(l);
        }
        st.step += 1;
        Ok(StepReport {
            step: st.step,
            epoch: step / self.steps_per_epoch(),
            lr,
            loss,
            skipped,
            snapshot_due: self.cfg.snapshot_every > 0 && st.step % self.cfg.snapshot_every == 0,
        })
    }

    /// Steps until the schedule is exhausted, calling `on_step` after each.
    pub fn run<F>(&self, st: &mut TrainState, mut on_step: F) -> Result<(), TrainError>
    where
        F: FnMut(&TrainState, &StepReport) -> Result<(), TrainError>,
    {
        while st.step < self.total_steps() {
            let r = self.step(st)?;
            on_step(st, &r)?;
        }
        Ok(())
    }
}

pub fn predict_class(model: &PvuModel, params: &ParamStore<f32>, s: &Sample) -> Result<usize, TrainError> {
    let mut g = Graph::new(params);
    let out = model.finetune_forward(&mut g, &s.input)?;
    let logits = out.logits.ok_or(ModelError::WrongStage(model.stage()))?;
    let v = g.value(logits).data();
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn evaluate_action(model: &PvuModel, params: &ParamStore<f32>, data: &[Sample]) -> Result<ClassAccuracy, TrainError> {
    let HeadKind::Action { classes } = model.config().head else {
        return Err(TrainError::InvalidConfig("model has no action head".into()));
    };
    let pred = data
        .iter()
        .map(|s| predict_class(model, params, s))
        .collect::<Result<Vec<_>, _>>()?;
    let truth: Vec<usize> = data.iter().map(|s| s.class).collect();
    mean_class_accuracy(&pred, &truth, classes)
}

fn pose_dims(model: &PvuModel) -> Result<(usize, usize), TrainError> {
    match model.config().head {
        HeadKind::Pose { joints, root } => Ok((joints, root)),
        _ => Err(TrainError::InvalidConfig("model has no pose head".into())),
    }
}

/// Root-relative joints in metres.
pub fn predict_pose(model: &PvuModel, params: &ParamStore<f32>, s: &Sample) -> Result<Vec<Point3>, TrainError> {
    let mut g = Graph::new(params);
    let out = model.finetune_forward(&mut g, &s.input)?;
    let j = out.joints.ok_or(ModelError::WrongStage(model.stage()))?;
    let scale = s.norm.scale;
    Ok(g.value(j)
        .data()
        .chunks(3)
        .map(|c| Point3::new(c[0] as f64, c[1] as f64, c[2] as f64) * scale)
        .collect())
}

fn truth_metres(s: &Sample, joints: usize, root: usize) -> Result<Vec<Point3>, TrainError> {
    Ok(s.root_relative(joints, root)?
        .into_iter()
        .map(|p| p * s.norm.scale)
        .collect())
}

/// Mean MPJPE (mm) over sequences.
pub fn evaluate_pose(model: &PvuModel, params: &ParamStore<f32>, data: &[Sample]) -> Result<f64, TrainError> {
    let (joints, root) = pose_dims(model)?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut sum = 0.0;
    for s in data {
        let p = predict_pose(model, params, s)?;
        sum += mpjpe(&p, &truth_metres(s, joints, root)?, joints, root)?;
    }
    Ok(sum / data.len() as f64)
}

/// Static per-class mean pose of the training set, and its MPJPE (mm) on
/// `test`. Test classes unseen in training fall back to the overall mean.
pub fn mean_pose_baseline(train: &[Sample], test: &[Sample], joints: usize, root: usize) -> Result<f64, TrainError> {
    if train.is_empty() || test.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let k = train.iter().chain(test).map(|s| s.class + 1).max().unwrap_or(1);
    let mut acc = vec![(vec![Point3::ZERO; joints], 0usize); k + 1];
    for s in train {
        let t = truth_metres(s, joints, root)?;
        for frame in t.chunks(joints) {
            for slot in [s.class, k] {
                for (a, p) in acc[slot].0.iter_mut().zip(frame) {
                    *a += *p;
                }
                acc[slot].1 += 1;
            }
        }
    }
    let mean = |slot: usize| -> Vec<Point3> { acc[slot].0.iter().map(|p| *p / acc[slot].1 as f64).collect() };
    let mut sum = 0.0;
    for s in test {
        let t = truth_metres(s, joints, root)?;
        let pose = if acc[s.class].1 > 0 { mean(s.class) } else { mean(k) };
        let pred: Vec<Point3> = (0..t.len() / joints).flat_map(|_| pose.iter().copied()).collect();
        sum += mpjpe(&pred, &t, joints, root)?;
    }
    Ok(sum / test.len() as f64)
}
