use rand::Rng;

use super::*;
use crate::patchmask::{apply_mask, plan_mask, MaskedPatches, PatchTensor};
use crate::rng;
use crate::tensornet::gradcheck::{relative_error, FD_STEP};
use crate::tensornet::{Graph, ParamStore};

fn random_patches(cfg: &ModelConfig, seed: u64, flow: bool) -> PatchTensor {
    let mut r = rng::stream(seed, &[7]);
    let slots = cfg.frames * cfg.parts;
    let w = cfg.patch_size * 3;
    let centers: Vec<[f64; 3]> = (0..slots)
        .map(|_| [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)])
        .collect();
    let patches = (0..slots * w)
        .map(|i| centers[i / w][i % 3] + r.random_range(-0.1..0.1))
        .collect();
    PatchTensor {
        frames: cfg.frames,
        parts: cfg.parts,
        patch_size: cfg.patch_size,
        patches,
        centers,
        flow: flow.then(|| (0..slots * w).map(|_| r.random_range(-0.05..0.05)).collect()),
        absent: vec![false; slots],
    }
}

fn masked(cfg: &ModelConfig, seed: u64) -> MaskedPatches {
    let pt = random_patches(cfg, seed, false);
    let plan = plan_mask(cfg.frames, cfg.parts, 0.5, 0.5, seed).unwrap();
    apply_mask(&pt, &plan).unwrap()
}

fn loss_value(model: &PvuModel, store: &ParamStore<f64>, mp: &MaskedPatches) -> f64 {
    let mut g = Graph::new(store);
    let out = model.pretrain_loss(&mut g, mp, false).unwrap();
    g.value(out.loss).item()
}

#[test]
fn micro_pretrain_gradients_match_finite_differences() {
    let cfg = ModelConfig::micro();
    let model = PvuModel::new(&cfg, Stage::Pretrain).unwrap();
    let mut store: ParamStore<f64> = model.init_params(3).unwrap();
    let mp = masked(&cfg, 11);
    assert_eq!(mp.temporal.len(), 2);
    assert_eq!(mp.spatial.len(), 1);

    let mut g = Graph::new(&store);
    let out = model.pretrain_loss(&mut g, &mp, false).unwrap();
    let grads = g.backward(out.loss).unwrap();
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in ids {
        let n = store.get(id).len();
        let ga = grads.param(id).map(|t| t.to_f64_vec()).unwrap_or(vec![0.0; n]);
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = loss_value(&model, &store, &mp);
            store.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = loss_value(&model, &store, &mp);
            store.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
            analytic.push(ga[i]);
        }
    }
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn masked_patches_receive_exactly_zero_gradient() {
    let cfg = ModelConfig::toy();
    let model = PvuModel::new(&cfg, Stage::Pretrain).unwrap();
    let store: ParamStore<f32> = model.init_params(1).unwrap();
    let pt = random_patches(&cfg, 5, false);
    let plan = plan_mask(cfg.frames, cfg.parts, 0.5, 0.5, 9).unwrap();
    let mp = apply_mask(&pt, &plan).unwrap();
    let mut g = Graph::new(&store);
    let out = model.pretrain_loss(&mut g, &mp, true).unwrap();
    let grads = g.backward(out.loss).unwrap();
    let gp = grads.input(out.patches).unwrap();
    let w = cfg.patch_size * 3;
    for t in 0..cfg.frames {
        for m in 0..cfg.parts {
            let s = t * cfg.parts + m;
            let row = &gp.data()[s * w..(s + 1) * w];
            let nonzero = row.iter().any(|v| *v != 0.0);
            match plan.kind(t, m) {
                crate::patchmask::SlotKind::Visible => assert!(nonzero, "visible slot {s} got no gradient"),
                _ => assert!(!nonzero, "masked slot {s} leaked"),
            }
        }
    }
}

#[test]
fn reconstructions_have_patch_shape() {
    let cfg = ModelConfig::toy();
    let model = PvuModel::new(&cfg, Stage::Pretrain).unwrap();
    let store: ParamStore<f32> = model.init_params(1).unwrap();
    let mp = masked(&cfg, 2);
    let mut g = Graph::new(&store);
    let out = model.pretrain_loss(&mut g, &mp, false).unwrap();
    assert_eq!(g.shape(out.spatial.unwrap()), &[mp.spatial.len(), cfg.patch_size, 3]);
    assert_eq!(g.shape(out.temporal.unwrap()), &[mp.temporal.len(), cfg.patch_size, 3]);
    assert!(g.value(out.loss).item().is_finite());
}

#[test]
fn permuting_points_inside_patches_keeps_the_loss() {
    let cfg = ModelConfig::toy();
    let model = PvuModel::new(&cfg, Stage::Pretrain).unwrap();
    let store: ParamStore<f32> = model.init_params(4).unwrap();
    let mp = masked(&cfg, 8);
    let mut shuffled = mp.clone();
    let n = cfg.patch_size;
    for k in 0..shuffled.visible.len() {
        let base = k * n * 3;
        let orig = mp.visible.centered[base..base + n * 3].to_vec();
        for i in 0..n {
            let j = (i * 7 + 3) % n;
            shuffled.visible.centered[base + i * 3..base + i * 3 + 3].copy_from_slice(&orig[j * 3..j * 3 + 3]);
        }
    }
    assert_ne!(shuffled.visible.centered, mp.visible.centered);
    let a = {
        let mut g = Graph::new(&store);
        let o = model.pretrain_loss(&mut g, &mp, false).unwrap();
        g.value(o.loss).item()
    };
    let b = {
        let mut g = Graph::new(&store);
        let o = model.pretrain_loss(&mut g, &shuffled, false).unwrap();
        g.value(o.loss).item()
    };
    assert_eq!(a, b);
}

#[test]
fn pretraining_rejects_flow_and_all_absent_targets() {
    let cfg = ModelConfig::micro();
    let model = PvuModel::new(&cfg, Stage::Pretrain).unwrap();
    let store: ParamStore<f32> = model.init_params(1).unwrap();
    let pt = random_patches(&cfg, 1, true);
    let plan = plan_mask(cfg.frames, cfg.parts, 0.5, 0.5, 1).unwrap();
    let mp = apply_mask(&pt, &plan).unwrap();
    let mut g = Graph::new(&store);
    assert_eq!(
        model.pretrain_loss(&mut g, &mp, false).unwrap_err(),
        ModelError::FlowInPretraining
    );

    let mut mp = masked(&cfg, 1);
    mp.spatial.absent.iter_mut().for_each(|a| *a = true);
    mp.temporal.absent.iter_mut().for_each(|a| *a = true);
    let mut g = Graph::new(&store);
    assert_eq!(
        model.pretrain_loss(&mut g, &mp, false).unwrap_err(),
        ModelError::NothingToReconstruct
    );
}

fn ft_input(cfg: &ModelConfig, seed: u64) -> FinetuneInput {
    let pt = random_patches(cfg, seed, true);
    let mut r = rng::stream(seed, &[8]);
    let g = cfg.global_points;
    let w = cfg.patch_size * 3;
    FinetuneInput {
        frames: cfg.frames,
        parts: cfg.parts,
        patch_size: cfg.patch_size,
        centered: (0..pt.patches.len()).map(|i| pt.patches[i] - pt.centers[i / w][i % 3]).collect(),
        flow: pt.flow,
        centers: pt.centers,
        global_points: g,
        global: (0..cfg.frames * g * 3).map(|_| r.random_range(-0.5..0.5)).collect(),
        global_centers: (0..cfg.frames).map(|_| [0.0, 0.0, r.random_range(-0.1..0.1)]).collect(),
    }
}

#[test]
fn zero_initialised_flow_branch_is_silent() {
    let cfg = ModelConfig::toy();
    let model = PvuModel::new(&cfg, Stage::Finetune).unwrap();
    let store: ParamStore<f32> = model.init_params(6).unwrap();
    let inp = ft_input(&cfg, 3);
    let mut zeros = inp.clone();
    zeros.flow = Some(vec![0.0; inp.centered.len()]);
    let run = |i: &FinetuneInput| {
        let mut g = Graph::new(&store);
        let o = model.finetune_forward(&mut g, i).unwrap();
        g.value(o.logits.unwrap()).data().to_vec()
    };
    let a = run(&inp);
    assert_eq!(a.len(), 3);
    assert_eq!(a, run(&zeros));

    let mut missing = inp.clone();
    missing.flow = None;
    let mut g = Graph::new(&store);
    assert_eq!(model.finetune_forward(&mut g, &missing).unwrap_err(), ModelError::MissingFlow);
}

#[test]
fn action_loss_is_negative_log_probability() {
    let cfg = ModelConfig::micro();
    let model = PvuModel::new(&cfg, Stage::Finetune).unwrap();
    let store: ParamStore<f64> = model.init_params(2).unwrap();
    let inp = ft_input(&cfg, 4);
    let mut g = Graph::new(&store);
    let o = model.finetune_forward(&mut g, &inp).unwrap();
    let logits = o.logits.unwrap();
    let lp: Vec<f64> = {
        let v = g.value(logits).data().to_vec();
        let mx = v.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = v.iter().map(|x| (x - mx).exp()).sum();
        v.iter().map(|x| x - mx - z.ln()).collect()
    };
    let loss = action_loss(&mut g, logits, 1).unwrap();
    assert!((g.value(loss).item() + lp[1]).abs() < 1e-12);
    assert!(action_loss(&mut g, logits, 3).is_err());
}

#[test]
fn pose_head_pins_the_root_joint() {
    let mut cfg = ModelConfig::toy();
    cfg.head = HeadKind::Pose { joints: 10, root: 4 };
    let model = PvuModel::new(&cfg, Stage::Finetune).unwrap();
    let store: ParamStore<f32> = model.init_params(6).unwrap();
    let inp = ft_input(&cfg, 3);
    let mut g = Graph::new(&store);
    let o = model.finetune_forward(&mut g, &inp).unwrap();
    let j = o.joints.unwrap();
    assert_eq!(g.shape(j), &[cfg.frames, 10, 3]);
    let v = g.value(j).data().to_vec();
    for t in 0..cfg.frames {
        assert_eq!(&v[(t * 10 + 4) * 3..(t * 10 + 5) * 3], &[0.0, 0.0, 0.0]);
    }
    assert!(v.iter().any(|x| *x != 0.0));
    let target = vec![0.0; cfg.frames * 30];
    let l = pose_loss(&mut g, j, &target).unwrap();
    let expect = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / (cfg.frames * 10) as f64;
    assert!((g.value(l).item() as f64 - expect).abs() < 1e-5 * expect.max(1.0));
}

#[test]
fn stages_refuse_the_other_forward_pass() {
    let cfg = ModelConfig::micro();
    let pre = PvuModel::new(&cfg, Stage::Pretrain).unwrap();
    let fine = PvuModel::new(&cfg, Stage::Finetune).unwrap();
    let ps: ParamStore<f32> = pre.init_params(1).unwrap();
    let fs: ParamStore<f32> = fine.init_params(1).unwrap();
    let mut g = Graph::new(&ps);
    assert!(matches!(
        pre.finetune_forward(&mut g, &ft_input(&cfg, 1)),
        Err(ModelError::WrongStage(Stage::Pretrain))
    ));
    let mut g = Graph::new(&fs);
    assert!(matches!(
        fine.pretrain_loss(&mut g, &masked(&cfg, 1), false),
        Err(ModelError::WrongStage(Stage::Finetune))
    ));
}

#[test]
fn transfer_copies_the_shared_backbone() {
    let cfg = ModelConfig::micro();
    let pre = PvuModel::new(&cfg, Stage::Pretrain).unwrap();
    let fine = PvuModel::new(&cfg, Stage::Finetune).unwrap();
    let ps: ParamStore<f32> = pre.init_params(1).unwrap();
    let mut fs: ParamStore<f32> = fine.init_params(2).unwrap();
    let n = PvuModel::transfer(&mut fs, &ps).unwrap();
    let shared = fine.specs().iter().filter(|s| ps.id(&s.name).is_some()).count();
    assert_eq!(n, shared);
    assert!(n > 0);
    assert_eq!(fs.by_name("encoder.0.attn.qkv.w"), ps.by_name("encoder.0.attn.qkv.w"));
    assert_ne!(fs.by_name("class_token"), None);

    let mut wide = cfg.clone();
    wide.dim = 12;
    wide.heads = 3;
    let other: ParamStore<f32> = PvuModel::new(&wide, Stage::Pretrain).unwrap().init_params(1).unwrap();
    let err = PvuModel::transfer(&mut fs, &other).unwrap_err();
    match err {
        ModelError::Incompatible(msg) => assert!(msg.contains("encoder.0.attn.qkv.w")),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn bind_resolves_by_name_and_checks_shapes() {
    let cfg = ModelConfig::micro();
    let m = PvuModel::new(&cfg, Stage::Pretrain).unwrap();
    let store: ParamStore<f64> = m.init_params(1).unwrap();
    let bound = PvuModel::bind(&cfg, Stage::Pretrain, &store).unwrap();
    let mp = masked(&cfg, 3);
    assert_eq!(loss_value(&m, &store, &mp), loss_value(&bound, &store, &mp));

    let mut wide = cfg.clone();
    wide.patch_size = 5;
    assert!(matches!(
        PvuModel::bind(&wide, Stage::Pretrain, &store),
        Err(ModelError::Tensor(crate::tensornet::TensorError::ParamShape { .. }))
    ));
}

fn closed_form(cfg: &ModelConfig, stage: Stage) -> usize {
    let c = cfg.dim;
    let [h1, h2, h3] = cfg.tokenizer;
    let lin = |i: usize, o: usize| i * o + o;
    let tok = lin(3, h1) + lin(h1, h2) + lin(2 * h2, h3) + lin(h3, c);
    let p = cfg.pe_hidden;
    let pe = lin(3, p) + lin(p, c) + lin(1, p) + lin(p, c);
    let r = c * cfg.mlp_ratio;
    let block = 4 * c + lin(c, 3 * c) + lin(c, c) + lin(c, r) + lin(r, c);
    let backbone = tok + pe + cfg.encoder.len() * block + 2 * c;
    match stage {
        Stage::Pretrain => {
            backbone + c + cfg.parts * c + cfg.decoder.len() * block + 2 * c + lin(c, cfg.patch_size * 3)
        }
        Stage::Finetune => {
            let flow = if cfg.use_flow { tok } else { 0 };
            let head = match cfg.head {
                HeadKind::Action { classes } => 2 * c + lin(c, c) + lin(c, classes),
                HeadKind::Pose { joints, .. } => {
                    2 * c + lin((cfg.parts + 1) * c, cfg.pose_hidden) + lin(cfg.pose_hidden, joints * 3)
                }
            };
            backbone + flow + tok + c + head
        }
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    use LayerKind::*;
    let mut cfg = ModelConfig::toy();
    cfg.encoder = vec![Spatial, Temporal, Spatial];
    cfg.decoder = vec![Spatial];
    for stage in [Stage::Pretrain, Stage::Finetune] {
        assert_eq!(count_params(&cfg, stage), closed_form(&cfg, stage));
    }
    cfg.head = HeadKind::Pose { joints: 10, root: 4 };
    cfg.use_flow = false;
    assert_eq!(count_params(&cfg, Stage::Finetune), closed_form(&cfg, Stage::Finetune));
    let d = ModelConfig::default();
    assert_eq!(count_params(&d, Stage::Pretrain), closed_form(&d, Stage::Pretrain));
    assert!(count_params(&d, Stage::Finetune) < count_params(&d, Stage::Pretrain));
}

#[test]
fn attention_parameters_scale_quadratically() {
    let attn = |c: usize| {
        let mut cfg = ModelConfig::toy();
        cfg.dim = c;
        param_specs(&cfg, Stage::Pretrain)
            .iter()
            .filter(|s| s.name.contains(".attn."))
            .map(|s| s.shape.iter().product::<usize>())
            .sum::<usize>() as f64
    };
    let ratio = attn(64) / attn(32);
    assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::toy();
    c.heads = 3;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::toy();
    c.encoder.clear();
    assert!(c.validate().is_err());
    let mut c = ModelConfig::toy();
    c.head = HeadKind::Pose { joints: 4, root: 4 };
    assert!(c.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
    assert_ne!(
        ModelConfig::toy().backbone_signature(),
        ModelConfig::default().backbone_signature()
    );
}

#[test]
fn init_is_deterministic() {
    let m = PvuModel::new(&ModelConfig::micro(), Stage::Finetune).unwrap();
    let a: ParamStore<f32> = m.init_params(5).unwrap();
    let b: ParamStore<f32> = m.init_params(5).unwrap();
    let c: ParamStore<f32> = m.init_params(6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.by_name("flow_tokenizer.l4.w").unwrap().data().iter().all(|v| *v == 0.0));
}
