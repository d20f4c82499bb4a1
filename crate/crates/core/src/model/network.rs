use super::layers::{init_store, run_stack, Binder, Block, Init, Linear, Norm, ParamSpec};
use super::tokenizer::{tokenize, MiniPointNet};
use super::{HeadKind, ModelConfig, ModelError, Stage};
use crate::geom::{centroid, fps, Point3, PointSequence};
use crate::patchmask::{MaskedPatches, PatchGroup, PatchTensor};
use crate::tensornet::{Graph, ParamStore, Real, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
struct Mlp2 {
    l1: Linear,
    l2: Linear,
}

impl Mlp2 {
    fn new<T: Real>(b: &mut Binder<T>, name: &str, inp: usize, hidden: usize, out: usize) -> Self {
        Self::with_output_init(b, name, inp, hidden, out, Init::Xavier)
    }

    fn with_output_init<T: Real>(b: &mut Binder<T>, name: &str, inp: usize, hidden: usize, out: usize, init: Init) -> Self {
        Self {
            l1: Linear::new(b, &format!("{name}.l1"), inp, hidden, Init::Xavier),
            l2: Linear::new(b, &format!("{name}.l2"), hidden, out, init),
        }
    }

    fn fwd<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let h = self.l1.fwd(g, x)?;
        let h = g.gelu(h);
        self.l2.fwd(g, h)
    }
}

#[derive(Debug, Clone)]
struct PretrainParts {
    mask_token: crate::tensornet::ParamId,
    part_embed: crate::tensornet::ParamId,
    decoder: Vec<Block>,
    dec_norm: Norm,
    recon: Linear,
}

#[derive(Debug, Clone)]
enum Head {
    Action { norm: Norm, mlp: Mlp2 },
    Pose { norm: Norm, mlp: Mlp2 },
}

#[derive(Debug, Clone)]
struct FinetuneParts {
    flow_tokenizer: Option<MiniPointNet>,
    global_tokenizer: MiniPointNet,
    class_token: crate::tensornet::ParamId,
    head: Head,
}

/// Layer structure of one stage, with parameter ids into a store laid out
/// by [`PvuModel::init_params`] (or resolved by name with [`PvuModel::bind`]).
#[derive(Debug, Clone)]
pub struct PvuModel {
    cfg: ModelConfig,
    stage: Stage,
    specs: Vec<ParamSpec>,
    tokenizer: MiniPointNet,
    spatial_pe: Mlp2,
    temporal_pe: Mlp2,
    encoder: Vec<Block>,
    enc_norm: Norm,
    pretrain: Option<PretrainParts>,
    finetune: Option<FinetuneParts>,
}

/// Graph handles of a pretraining pass.
#[derive(Debug, Clone, Copy)]
pub struct PretrainOutput {
    pub loss: Var,
    /// Centered patches of every slot, `[L * M, N' * 3]`, in slot order.
    pub patches: Var,
    /// Reconstructions `[S, N', 3]` of the present spatially masked patches.
    pub spatial: Option<Var>,
    /// Reconstructions of the present temporally masked patches.
    pub temporal: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct FinetuneOutput {
    /// `[1, K]` class scores.
    pub logits: Option<Var>,
    /// `[L, J, 3]` root-relative joints.
    pub joints: Option<Var>,
}

/// Per-sequence tensors consumed by the fine-tuning forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneInput {
    pub frames: usize,
    pub parts: usize,
    pub patch_size: usize,
    /// Patches minus their centers, slot order, `L * M * N' * 3`.
    pub centered: Vec<f64>,
    pub flow: Option<Vec<f64>>,
    pub centers: Vec<[f64; 3]>,
    pub global_points: usize,
    /// Per-frame clouds minus their centroids, `L * G * 3`.
    pub global: Vec<f64>,
    pub global_centers: Vec<[f64; 3]>,
}

/// Builds fine-tuning input from a normalized sequence and its patches.
pub fn finetune_input(seq: &PointSequence, pt: &PatchTensor, global_points: usize) -> Result<FinetuneInput, ModelError> {
    if seq.len() != pt.frames {
        return Err(ModelError::InputShape(format!(
            "{} frames but {} patch frames",
            seq.len(),
            pt.frames
        )));
    }
    let w = pt.patch_size * 3;
    let mut centered = Vec::with_capacity(pt.patches.len());
    for s in 0..pt.slots() {
        let c = pt.centers[s];
        centered.extend(pt.patches[s * w..(s + 1) * w].iter().enumerate().map(|(i, v)| v - c[i % 3]));
    }
    let mut global = Vec::with_capacity(seq.len() * global_points * 3);
    let mut global_centers = Vec::with_capacity(seq.len());
    for f in &seq.frames {
        let idx = fps(&f.points, global_points, 0).map_err(|e| ModelError::InputShape(e.to_string()))?;
        let pts: Vec<Point3> = idx.iter().map(|&i| f.points[i]).collect();
        let c = centroid(&pts).unwrap_or(Point3::ZERO);
        for p in pts {
            global.extend_from_slice(&(p - c).to_array());
        }
        global_centers.push(c.to_array());
    }
    Ok(FinetuneInput {
        frames: pt.frames,
        parts: pt.parts,
        patch_size: pt.patch_size,
        centered,
        flow: pt.flow.clone(),
        centers: pt.centers.clone(),
        global_points,
        global,
        global_centers,
    })
}

fn flat_centers(c: &[[f64; 3]]) -> Vec<f64> {
    c.iter().flatten().copied().collect()
}

fn constant<T: Real>(g: &mut Graph<T>, shape: &[usize], data: &[f64]) -> Result<Var, TensorError> {
    Ok(g.constant(Tensor::from_f64(shape, data)?))
}


/// Symmetric Chamfer distance averaged over a batch: `a, b: [S, n, 3]`.
fn batched_chamfer<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var, TensorError> {
    let d = g.pairwise_sq_dist(a, b)?;
    let ab = g.min_axis(d, 2)?;
    let ba = g.min_axis(d, 1)?;
    let ab = g.mean(ab)?;
    let ba = g.mean(ba)?;
    g.add(ab, ba)
}

impl PvuModel {
    pub(crate) fn layout<T: Real>(cfg: &ModelConfig, stage: Stage, b: &mut Binder<T>) -> Self {
        let c = cfg.dim;
        let tokenizer = MiniPointNet::new(b, "tokenizer", cfg.tokenizer, c, false);
        let spatial_pe = Mlp2::new(b, "pe.spatial", 3, cfg.pe_hidden, c);
        let temporal_pe = Mlp2::new(b, "pe.temporal", 1, cfg.pe_hidden, c);
        let encoder = cfg
            .encoder
            .iter()
            .enumerate()
            .map(|(i, k)| Block::new(b, &format!("encoder.{i}"), *k, cfg))
            .collect();
        let enc_norm = Norm::new(b, "encoder.norm", c);
        let (pretrain, finetune) = match stage {
            Stage::Pretrain => {
                let mask_token = b.param("mask_token", &[c], Init::Normal(0.02));
                let part_embed = b.param("part_embed", &[cfg.parts, c], Init::Normal(0.02));
                let decoder = cfg
                    .decoder
                    .iter()
                    .enumerate()
                    .map(|(i, k)| Block::new(b, &format!("decoder.{i}"), *k, cfg))
                    .collect();
                let dec_norm = Norm::new(b, "decoder.norm", c);
                let recon = Linear::new(b, "recon", c, cfg.patch_size * 3, Init::Normal(0.02));
                let p = PretrainParts {
                    mask_token,
                    part_embed,
                    decoder,
                    dec_norm,
                    recon,
                };
                (Some(p), None)
            }
            Stage::Finetune => {
                let flow_tokenizer = cfg
                    .use_flow
                    .then(|| MiniPointNet::new(b, "flow_tokenizer", cfg.tokenizer, c, true));
                let global_tokenizer = MiniPointNet::new(b, "global_tokenizer", cfg.tokenizer, c, false);
                let class_token = b.param("class_token", &[c], Init::Normal(0.02));
                let head = match cfg.head {
                    HeadKind::Action { classes } => Head::Action {
                        norm: Norm::new(b, "head.norm", c),
                        mlp: Mlp2::new(b, "head.mlp", c, c, classes),
                    },
                    HeadKind::Pose { joints, .. } => Head::Pose {
                        norm: Norm::new(b, "head.norm", c),
                        // small outputs at init, as for the reconstruction head
                        mlp: Mlp2::with_output_init(
                            b,
                            "head.mlp",
                            (cfg.parts + 1) * c,
                            cfg.pose_hidden,
                            joints * 3,
                            Init::Normal(0.02),
                        ),
                    },
                };
                let f = FinetuneParts {
                    flow_tokenizer,
                    global_tokenizer,
                    class_token,
                    head,
                };
                (None, Some(f))
            }
        };
        Self {
            cfg: cfg.clone(),
            stage,
            specs: Vec::new(),
            tokenizer,
            spatial_pe,
            temporal_pe,
            encoder,
            enc_norm,
            pretrain,
            finetune,
        }
    }

    /// Model whose parameter ids follow declaration order.
    pub fn new(cfg: &ModelConfig, stage: Stage) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut b = Binder::<f32>::declare();
        let mut m = Self::layout(cfg, stage, &mut b);
        m.specs = b.specs;
        Ok(m)
    }

    /// Model resolving every parameter by name in an existing store.
    pub fn bind<T: Real>(cfg: &ModelConfig, stage: Stage, store: &ParamStore<T>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut b = Binder::bind(store);
        let mut m = Self::layout(cfg, stage, &mut b);
        m.specs = b.finish()?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Fresh parameters in declaration order.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>, ModelError> {
        init_store(&self.specs, seed)
    }

    /// Copies every parameter `dst` shares by name with `src`. Shape
    /// conflicts are collected and reported together. Returns the number of
    /// copied tensors.
    pub fn transfer<T: Real>(dst: &mut ParamStore<T>, src: &ParamStore<T>) -> Result<usize, ModelError> {
        let mut conflicts = Vec::new();
        let mut copies = Vec::new();
        for (id, name, t) in dst.iter() {
            if let Some(s) = src.by_name(name) {
                if s.shape() == t.shape() {
                    copies.push((id, s.clone()));
                } else {
                    conflicts.push(format!("{name}: {:?} vs {:?}", t.shape(), s.shape()));
                }
            }
        }
        if !conflicts.is_empty() {
            return Err(ModelError::Incompatible(conflicts.join(", ")));
        }
        let n = copies.len();
        for (id, t) in copies {
            *dst.get_mut(id) = t;
        }
        Ok(n)
    }

    fn positional<T: Real>(
        &self,
        g: &mut Graph<T>,
        centers: &[[f64; 3]],
        frames: &[usize],
    ) -> Result<(Var, Var), TensorError> {
        let c = constant(g, &[centers.len(), 3], &flat_centers(centers))?;
        let spe = self.spatial_pe.fwd(g, c)?;
        // Time in [-1, 1] over the clip, the range of the normalized centers.
        let span = self.cfg.frames.saturating_sub(1).max(1) as f64;
        let tp: Vec<f64> = frames.iter().map(|&t| 2.0 * t as f64 / span - 1.0).collect();
        let t = constant(g, &[frames.len(), 1], &tp)?;
        let tpe = self.temporal_pe.fwd(g, t)?;
        Ok((spe, tpe))
    }

    fn check_frames(&self, frames: usize, parts: usize, patch_size: usize) -> Result<(), ModelError> {
        if parts != self.cfg.parts || patch_size != self.cfg.patch_size || frames == 0 {
            return Err(ModelError::InputShape(format!(
                "{frames} frames x {parts} parts x {patch_size} points, model expects {} parts x {} points",
                self.cfg.parts, self.cfg.patch_size
            )));
        }
        Ok(())
    }

    /// Masked reconstruction loss of one sequence. `patch_grad` makes the
    /// slot-order patch leaf differentiable (masked slots must receive an
    /// exactly zero gradient).
    pub fn pretrain_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        mp: &MaskedPatches,
        patch_grad: bool,
    ) -> Result<PretrainOutput, ModelError> {
        let p = self.pretrain.as_ref().ok_or(ModelError::WrongStage(self.stage))?;
        if mp.visible.flow.is_some() {
            return Err(ModelError::FlowInPretraining);
        }
        self.check_frames(mp.frames, mp.parts, mp.patch_size)?;
        if mp.visible.is_empty() {
            return Err(ModelError::InputShape("no visible patches".into()));
        }
        let (m, n, c) = (mp.parts, mp.patch_size, self.cfg.dim);
        let slots = mp.frames * m;
        let w = n * 3;

        let mut all = vec![0.0; slots * w];
        let mut centers = vec![[0.0; 3]; slots];
        for grp in [&mp.visible, &mp.spatial, &mp.temporal] {
            for (k, &(t, part)) in grp.slots.iter().enumerate() {
                let s = t * m + part;
                all[s * w..(s + 1) * w].copy_from_slice(&grp.centered[k * w..(k + 1) * w]);
                centers[s] = grp.centers[k];
            }
        }
        let patches = g.input(Tensor::from_f64(&[slots, w], &all)?, patch_grad);

        let vis: Vec<usize> = mp.visible.slots.iter().map(|&(t, q)| t * m + q).collect();
        let v = vis.len();
        let x = g.gather_rows(patches, &vis)?;
        let x = g.reshape(x, &[v * n, 3])?;
        let tokens = tokenize(g, &self.tokenizer, x, None, v, n)?;

        let vis_frames: Vec<usize> = mp.visible.slots.iter().map(|s| s.0).collect();
        let vis_parts: Vec<usize> = mp.visible.slots.iter().map(|s| s.1).collect();
        let (spe, tpe) = self.positional(g, &mp.visible.centers, &vis_frames)?;
        let pe = g.add(spe, tpe)?;
        let enc = run_stack(g, &self.encoder, tokens, pe, &vis_frames, &vis_parts)?;
        let enc = self.enc_norm.fwd(g, enc)?;

        // Decoder sees every slot: encoded tokens where visible, the mask
        // token elsewhere.
        let mut pos_of = vec![None; slots];
        for (k, &s) in vis.iter().enumerate() {
            pos_of[s] = Some(k);
        }
        let mask_token = g.param(p.mask_token);
        let mask_row = g.reshape(mask_token, &[1, c])?;
        let pool = g.concat(&[enc, mask_row], 0)?;
        let order: Vec<usize> = pos_of.iter().map(|p| p.unwrap_or(v)).collect();
        let dec_in = g.gather_rows(pool, &order)?;

        let temporal: Vec<bool> = {
            let mut t = vec![false; mp.frames];
            for &(f, _) in &mp.temporal.slots {
                t[f] = true;
            }
            (0..slots).map(|s| t[s / m]).collect()
        };
        let known: Vec<usize> = (0..slots).filter(|&s| !temporal[s]).collect();
        let hidden: Vec<usize> = (0..slots).filter(|&s| temporal[s]).collect();
        let known_centers: Vec<[f64; 3]> = known.iter().map(|&s| centers[s]).collect();
        let all_frames: Vec<usize> = (0..slots).map(|s| s / m).collect();
        let all_parts: Vec<usize> = (0..slots).map(|s| s % m).collect();
        let (spe_known, tpe) = self.positional(g, &known_centers, &all_frames)?;
        let spe = if hidden.is_empty() {
            spe_known
        } else {
            let embed = g.param(p.part_embed);
            let hidden_parts: Vec<usize> = hidden.iter().map(|&s| s % m).collect();
            let rows = g.gather_rows(embed, &hidden_parts)?;
            let pool = g.concat(&[spe_known, rows], 0)?;
            let mut place = vec![0; slots];
            for (k, &s) in known.iter().chain(&hidden).enumerate() {
                place[s] = k;
            }
            g.gather_rows(pool, &place)?
        };
        let dec_pe = g.add(spe, tpe)?;
        let dec = run_stack(g, &p.decoder, dec_in, dec_pe, &all_frames, &all_parts)?;
        let dec = p.dec_norm.fwd(g, dec)?;

        let reconstruct = |g: &mut Graph<T>, grp: &PatchGroup| -> Result<Option<(Var, Var)>, ModelError> {
            let keep: Vec<usize> = (0..grp.len()).filter(|&k| !grp.absent[k]).collect();
            if keep.is_empty() {
                return Ok(None);
            }
            let rows: Vec<usize> = keep.iter().map(|&k| grp.slots[k].0 * m + grp.slots[k].1).collect();
            let h = g.gather_rows(dec, &rows)?;
            let pred = p.recon.fwd(g, h)?;
            let pred = g.reshape(pred, &[keep.len(), n, 3])?;
            let target: Vec<f64> = keep
                .iter()
                .flat_map(|&k| grp.centered[k * w..(k + 1) * w].iter().copied())
                .collect();
            let target = constant(g, &[keep.len(), n, 3], &target)?;
            let loss = batched_chamfer(g, pred, target)?;
            Ok(Some((pred, loss)))
        };
        let spatial = reconstruct(g, &mp.spatial)?;
        let temporal_out = reconstruct(g, &mp.temporal)?;
        let loss = match (spatial, temporal_out) {
            (Some((_, a)), Some((_, b))) => g.add(a, b)?,
            (Some((_, a)), None) | (None, Some((_, a))) => a,
            (None, None) => return Err(ModelError::NothingToReconstruct),
        };
        Ok(PretrainOutput {
            loss,
            patches,
            spatial: spatial.map(|s| s.0),
            temporal: temporal_out.map(|s| s.0),
        })
    }

    /// Encodes part, global and class tokens and applies the task head.
    pub fn finetune_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        inp: &FinetuneInput,
    ) -> Result<FinetuneOutput, ModelError> {
        let f = self.finetune.as_ref().ok_or(ModelError::WrongStage(self.stage))?;
        self.check_frames(inp.frames, inp.parts, inp.patch_size)?;
        let (l, m, n, c) = (inp.frames, inp.parts, inp.patch_size, self.cfg.dim);
        let gp = inp.global_points;
        let slots = l * m;
        if inp.centered.len() != slots * n * 3
            || inp.centers.len() != slots
            || inp.global.len() != l * gp * 3
            || inp.global_centers.len() != l
        {
            return Err(ModelError::InputShape("inconsistent fine-tuning input lengths".into()));
        }

        let x = constant(g, &[slots * n, 3], &inp.centered)?;
        let flow = match (&f.flow_tokenizer, &inp.flow) {
            (Some(net), Some(fl)) => Some((net, constant(g, &[slots * n, 3], fl)?)),
            (Some(_), None) => return Err(ModelError::MissingFlow),
            (None, _) => None,
        };
        let part_tokens = tokenize(g, &self.tokenizer, x, flow, slots, n)?;
        let gx = constant(g, &[l * gp, 3], &inp.global)?;
        let global_tokens = tokenize(g, &f.global_tokenizer, gx, None, l, gp)?;
        let cls = g.param(f.class_token);
        let cls = g.reshape(cls, &[1, c])?;
        let cls = g.gather_rows(cls, &vec![0; l])?;

        // Per frame: M part tokens, the global token, the class token.
        let per = m + 2;
        let mut order = Vec::with_capacity(l * per);
        for t in 0..l {
            order.extend((0..m).map(|q| t * m + q));
            order.push(slots + t);
            order.push(slots + l + t);
        }
        let tokens = g.concat(&[part_tokens, global_tokens, cls], 0)?;
        let tokens = g.gather_rows(tokens, &order)?;

        let mut pos = inp.centers.clone();
        pos.extend_from_slice(&inp.global_centers);
        let frames: Vec<usize> = (0..l * per).map(|i| i / per).collect();
        let slot_ids: Vec<usize> = (0..l * per).map(|i| i % per).collect();
        let (spe, tpe) = self.positional(g, &pos, &frames)?;
        let zero = g.constant(Tensor::zeros(&[l, c]));
        let spe = g.concat(&[spe, zero], 0)?;
        let spe = g.gather_rows(spe, &order)?;
        let pe = g.add(spe, tpe)?;

        let enc = run_stack(g, &self.encoder, tokens, pe, &frames, &slot_ids)?;
        let enc = self.enc_norm.fwd(g, enc)?;

        match (&f.head, self.cfg.head) {
            (Head::Action { norm, mlp }, _) => {
                let rows: Vec<usize> = (0..l).map(|t| t * per + m + 1).collect();
                let h = g.gather_rows(enc, &rows)?;
                let h = norm.fwd(g, h)?;
                let h = g.mean_axis(h, 0)?;
                let h = g.reshape(h, &[1, c])?;
                let logits = mlp.fwd(g, h)?;
                Ok(FinetuneOutput {
                    logits: Some(logits),
                    joints: None,
                })
            }
            (Head::Pose { norm, mlp }, HeadKind::Pose { joints, root }) => {
                let rows: Vec<usize> = (0..l).flat_map(|t| (0..=m).map(move |q| t * per + q)).collect();
                let h = g.gather_rows(enc, &rows)?;
                let h = norm.fwd(g, h)?;
                let h = g.reshape(h, &[l, (m + 1) * c])?;
                let out = mlp.fwd(g, h)?;
                let out = g.reshape(out, &[l * joints, 3])?;
                let roots: Vec<usize> = (0..l * joints).map(|i| (i / joints) * joints + root).collect();
                let r = g.gather_rows(out, &roots)?;
                let out = g.sub(out, r)?;
                let out = g.reshape(out, &[l, joints, 3])?;
                Ok(FinetuneOutput {
                    logits: None,
                    joints: Some(out),
                })
            }
            _ => Err(ModelError::InvalidConfig("head does not match config".into())),
        }
    }
}

/// Cross-entropy of `[1, K]` logits against a class index.
pub fn action_loss<T: Real>(g: &mut Graph<T>, logits: Var, class: usize) -> Result<Var, ModelError> {
    let k = g.shape(logits).last().copied().unwrap_or(0);
    if class >= k {
        return Err(ModelError::InputShape(format!("class {class} outside {k} logits")));
    }
    let lp = g.log_softmax(logits)?;
    let mut onehot = vec![0.0; k];
    onehot[class] = -1.0;
    let oh = constant(g, &[1, k], &onehot)?;
    let picked = g.mul(lp, oh)?;
    Ok(g.sum(picked))
}

/// Mean squared joint error; `target` is `L * J * 3` root-relative values.
pub fn pose_loss<T: Real>(g: &mut Graph<T>, joints: Var, target: &[f64]) -> Result<Var, ModelError> {
    let shape = g.shape(joints).to_vec();
    let (l, j) = (shape[0], shape[1]);
    if target.len() != l * j * 3 {
        return Err(ModelError::InputShape(format!(
            "pose target has {} values, prediction {}",
            target.len(),
            l * j * 3
        )));
    }
    let t = constant(g, &shape, target)?;
    let d = g.sub(joints, t)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (l * j) as f64))
}
