use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use pcvu::geom::{FlowField, Point3, PointSequence};
use pcvu::io::manifest::sha256_hex;
use pcvu::io::report::{loss_curve_csv, LossSummary};
use pcvu::io::{
    decode_sequence, encode_sequence, export_ply as render_ply, hex, Checkpoint, ColorBy, Manifest, MetricsReport,
    PvuhHeader, RunConfig,
};
use pcvu::model::{count_params, HeadKind, ModelConfig, PvuModel, Stage};
use pcvu::synthgen::{
    flow_ground_truth, generate_sequence, heuristic_part_labeler, nn_flow_baseline, recipe_meshes, sequence_recipe,
    MeshedFrame,
};
use pcvu::tensornet::ParamStore;
use pcvu::train::{
    evaluate_action, evaluate_pose, flow_metrics, miou, prepare_sample, split_dataset, subsample_per_class, Sample,
    TrainState, Trainer,
};

use crate::store::{self, out_dir, MANIFEST};
use crate::{Coloring, RunArgs};

pub fn gen(a: &RunArgs) -> Result<()> {
    let mut cfg = store::read_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    ensure!(cfg.data.count > 0, "data.count must be at least 1");
    let dc = cfg.dataset()?;
    let dir = out_dir(a.out.as_deref(), &cfg.paths.data);
    let names: Vec<&str> = dc.classes.iter().map(|c| c.name()).collect();
    let mut m = Manifest::new(cfg.data.seed, dc.frames, dc.points, &names);
    for i in 0..cfg.data.count {
        let recipe = sequence_recipe(&dc, cfg.data.seed, i);
        let seq = generate_sequence(&dc, &recipe).with_context(|| format!("generating sequence {i}"))?;
        let bytes = encode_sequence(&seq)?;
        let file = format!("seq_{i:05}.pvuh");
        store::write(&dir.join(&file), &bytes)?;
        m.add(&file, i, recipe.class_label, seq.meta.actor_id, &bytes)?;
    }
    store::write(&dir.join(MANIFEST), m.to_toml())?;
    println!("sequences={}", m.sequences.len());
    for c in &m.classes {
        println!("class.{}={}", c.name, c.count);
    }
    println!("dir={}", dir.display());
    Ok(())
}

pub fn flow_gt(a: &RunArgs) -> Result<()> {
    let cfg = store::read_config(&a.config)?;
    let dc = cfg.dataset()?;
    let dir = out_dir(a.out.as_deref(), &cfg.paths.data);
    let (mut m, seqs) = store::load_dataset(&dir)?;
    ensure!(
        m.frames == dc.frames && m.classes.len() == dc.classes.len(),
        "dataset in {} was generated with a different config",
        dir.display()
    );
    let (mut valid, mut total) = (0usize, 0usize);
    for (e, mut seq) in m.sequences.iter_mut().zip(seqs) {
        let recipe = sequence_recipe(&dc, m.seed, e.index);
        let (_, mesh) = recipe_meshes(&recipe, seq.len());
        let mut flows = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let flow = match t + 1 < seq.len() {
                true => flow_ground_truth(
                    MeshedFrame {
                        cloud: &seq.frames[t],
                        vertices: &mesh.frames[t].vertices,
                        actor_id: e.actor,
                    },
                    MeshedFrame {
                        cloud: &seq.frames[t + 1],
                        vertices: &mesh.frames[t + 1].vertices,
                        actor_id: e.actor,
                    },
                    dc.flow_threshold,
                )
                .with_context(|| format!("flow of {} frame {t}", e.file))?,
                false => FlowField::all_invalid(seq.frames[t].len()),
            };
            valid += flow.valid_count();
            total += flow.len();
            flows.push(flow);
        }
        for (f, flow) in seq.frames.iter_mut().zip(flows) {
            f.flow = Some(flow);
        }
        let bytes = encode_sequence(&seq)?;
        store::write(&dir.join(&e.file), &bytes)?;
        e.sha256 = sha256_hex(&bytes);
    }
    store::write(&dir.join(MANIFEST), m.to_toml())?;
    println!("sequences={}", m.sequences.len());
    println!("valid_flow_fraction={}", valid as f64 / total.max(1) as f64);
    Ok(())
}

/// Dataset, model config and the prepared train and test samples.
struct Prepared {
    seqs: Vec<PointSequence>,
    train: Vec<Sample>,
    test: Vec<Sample>,
    test_idx: Vec<usize>,
}

fn prepare(cfg: &RunConfig, mc: &ModelConfig, fraction: f64) -> Result<Prepared> {
    let dir = PathBuf::from(&cfg.paths.data);
    let (m, seqs) = store::load_dataset(&dir)?;
    let samples = seqs
        .iter()
        .zip(&m.sequences)
        .map(|(s, e)| prepare_sample(s, mc, e.index as u64).with_context(|| e.file.clone()))
        .collect::<Result<Vec<_>>>()?;
    let labels = m.labels();
    let (tr, te) = split_dataset(&labels, cfg.data.train_fraction, cfg.data.split_seed)?;
    let tr = subsample_per_class(&tr, &labels, fraction);
    Ok(Prepared {
        train: tr.iter().map(|&i| samples[i].clone()).collect(),
        test: te.iter().map(|&i| samples[i].clone()).collect(),
        test_idx: te,
        seqs,
    })
}

fn write_curve(dir: &Path, name: &str, losses: &[f64]) -> Result<PathBuf> {
    let path = dir.join(name);
    store::write(&path, loss_curve_csv(losses))?;
    Ok(path)
}

pub fn pretrain(a: &RunArgs, resume: Option<&Path>) -> Result<()> {
    let mut cfg = store::read_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.pretrain.seed = s;
    }
    let tc = cfg.pretrain_config()?;
    let mc = cfg.model(cfg.head_kind()?)?;
    let out = out_dir(a.out.as_deref(), &cfg.paths.out);
    let data = prepare(&cfg, &mc, 1.0)?;
    let mut model = PvuModel::new(&mc, Stage::Pretrain)?;
    let mut st = match resume {
        Some(p) => {
            let c = store::read_checkpoint(p)?;
            c.verify(&mc)?;
            ensure!(c.stage == Stage::Pretrain, "{} is not a pretraining checkpoint", p.display());
            ensure!(c.opt.is_some(), "{} has no optimizer state to resume from", p.display());
            model = PvuModel::bind(&mc, Stage::Pretrain, &c.params)?;
            c.into_state()
        }
        None => TrainState::new(model.init_params(tc.seed)?),
    };
    let trainer = Trainer::new(&model, tc, &data.train)?.with_mask(cfg.mask()?);
    let spe = trainer.steps_per_epoch();
    while st.step < trainer.total_steps() {
        let r = trainer.step(&mut st)?;
        if r.skipped > 0 {
            eprintln!("step {}: skipped {} sample(s) with nothing to reconstruct", r.step, r.skipped);
        }
        if r.snapshot_due {
            let path = out.join(format!("pretrain_step{:06}.pvuc", r.step));
            store::write_checkpoint(&path, &Checkpoint::from_state(&model, &st, true))?;
        }
        if r.step % spe == 0 {
            eprintln!("epoch {} loss {}", r.epoch, r.loss.map_or("na".into(), |l| format!("{l:.6}")));
        }
    }
    let ckpt = out.join("pretrain.pvuc");
    store::write_checkpoint(&ckpt, &Checkpoint::from_state(&model, &st, true))?;
    let curve = write_curve(&out, "pretrain_loss.csv", &st.losses)?;
    println!("checkpoint={}", ckpt.display());
    println!("curve={}", curve.display());
    println!("steps={}", st.step);
    println!("final_loss={}", st.losses.last().map_or("na".into(), |l| l.to_string()));
    Ok(())
}

fn test_report(model: &PvuModel, params: &ParamStore<f32>, test: &[Sample]) -> Result<MetricsReport> {
    let mut r = MetricsReport::default();
    match model.config().head {
        HeadKind::Action { .. } => r.action = Some(evaluate_action(model, params, test)?),
        HeadKind::Pose { .. } => r.mpjpe_mm = Some(evaluate_pose(model, params, test)?),
    }
    Ok(r)
}

fn headline(r: &MetricsReport) -> String {
    match (&r.action, r.mpjpe_mm) {
        (Some(a), _) => format!("test_macc {:.4}", a.macc),
        (None, Some(mm)) => format!("test_mpjpe_mm {mm:.2}"),
        _ => String::new(),
    }
}

pub fn finetune(a: &RunArgs, checkpoint: Option<&Path>, fraction: Option<f64>) -> Result<()> {
    let mut cfg = store::read_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.finetune.seed = s;
    }
    if let Some(f) = fraction {
        cfg.finetune.fraction = f;
    }
    let tc = cfg.finetune_config()?;
    let mc = cfg.model(cfg.head_kind()?)?;
    let out = out_dir(a.out.as_deref(), &cfg.paths.out);
    let data = prepare(&cfg, &mc, cfg.finetune.fraction)?;
    let model = PvuModel::new(&mc, Stage::Finetune)?;
    let mut params = model.init_params(tc.seed)?;
    if let Some(p) = checkpoint {
        let c = store::read_checkpoint(p)?;
        c.verify(&mc)?;
        let n = PvuModel::transfer(&mut params, &c.params).with_context(|| p.display().to_string())?;
        eprintln!("initialised {n} tensors from {}", p.display());
    }
    let mut st = TrainState::new(params);
    let trainer = Trainer::new(&model, tc, &data.train)?;
    let spe = trainer.steps_per_epoch();
    while st.step < trainer.total_steps() {
        let r = trainer.step(&mut st)?;
        if r.snapshot_due {
            let path = out.join(format!("finetune_step{:06}.pvuc", r.step));
            store::write_checkpoint(&path, &Checkpoint::from_state(&model, &st, true))?;
        }
        if r.step % spe == 0 {
            let rep = test_report(&model, &st.params, &data.test)?;
            eprintln!(
                "epoch {} loss {} {}",
                r.epoch,
                r.loss.map_or("na".into(), |l| format!("{l:.6}")),
                headline(&rep)
            );
        }
    }
    let mut report = test_report(&model, &st.params, &data.test)?;
    report.loss = LossSummary::from_curve(&st.losses);
    let ckpt = out.join("finetune.pvuc");
    store::write_checkpoint(&ckpt, &Checkpoint::from_state(&model, &st, true))?;
    let curve = write_curve(&out, "finetune_loss.csv", &st.losses)?;
    let rpath = out.join("metrics.txt");
    store::write(&rpath, report.to_text())?;
    println!("checkpoint={}", ckpt.display());
    println!("curve={}", curve.display());
    println!("report={}", rpath.display());
    println!("train_sequences={}", data.train.len());
    println!("{}", headline(&report).replace(' ', "="));
    Ok(())
}

/// Scores the nearest-neighbour flow baseline and the heuristic part
/// labeler against the stored ground truth of the test sequences.
fn baselines(seqs: &[&PointSequence], report: &mut MetricsReport) -> Result<()> {
    let (mut pred, mut gt) = (FlowField::default(), FlowField::default());
    let (mut lp, mut lg) = (Vec::new(), Vec::new());
    for s in seqs {
        for (t, f) in s.frames.iter().enumerate() {
            if let (Some(g), Some(next)) = (&f.flow, s.frames.get(t + 1)) {
                let p = nn_flow_baseline(f, next)?;
                pred.vectors.extend(p.vectors);
                pred.valid.extend(p.valid);
                gt.vectors.extend(&g.vectors);
                gt.valid.extend(&g.valid);
            }
            if let Some(l) = &f.part_labels {
                lp.extend(heuristic_part_labeler(f));
                lg.extend(l);
            }
        }
    }
    if gt.valid_count() > 0 {
        report.flow = Some(flow_metrics(&pred, &gt)?);
    }
    if !lg.is_empty() {
        report.parts = Some(miou(&lp, &lg)?);
    }
    Ok(())
}

pub fn eval(a: &RunArgs, checkpoint: &Path) -> Result<()> {
    let cfg = store::read_config(&a.config)?;
    let mc = cfg.model(cfg.head_kind()?)?;
    let c = store::read_checkpoint(checkpoint)?;
    c.verify(&mc)?;
    ensure!(
        c.stage == Stage::Finetune,
        "{} is a pretraining checkpoint; evaluate a fine-tuned one",
        checkpoint.display()
    );
    let model = PvuModel::bind(&mc, Stage::Finetune, &c.params)?;
    let data = prepare(&cfg, &mc, 1.0)?;
    let mut report = test_report(&model, &c.params, &data.test)?;
    report.loss = LossSummary::from_curve(&c.losses);
    let test_seqs: Vec<&PointSequence> = data.test_idx.iter().map(|&i| &data.seqs[i]).collect();
    baselines(&test_seqs, &mut report)?;
    let out = out_dir(a.out.as_deref(), &cfg.paths.out);
    let rpath = out.join("metrics.txt");
    store::write(&rpath, report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}

fn bbox(points: impl Iterator<Item = Point3>) -> Option<(Point3, Point3)> {
    points.fold(None, |acc, p| {
        Some(match acc {
            None => (p, p),
            Some((lo, hi)) => (
                Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z)),
                Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z)),
            ),
        })
    })
}

fn fmt_point(p: Point3) -> String {
    format!("{},{},{}", p.x, p.y, p.z)
}

fn inspect_sequence(bytes: &[u8]) -> Result<()> {
    let h = PvuhHeader::parse(bytes)?;
    let seq = decode_sequence(bytes)?;
    let channels: Vec<&str> = [
        (h.flags.labels, "labels"),
        (h.flags.flow, "flow"),
        (h.flags.vertex_ids, "vertex_ids"),
        (h.flags.joints, "joints"),
    ]
    .iter()
    .filter(|(on, _)| *on)
    .map(|(_, n)| *n)
    .collect();
    println!("format=PVUH");
    println!("frames={}", h.frames);
    println!("points={}", h.points);
    println!("dim={}", h.dim);
    println!("joints={}", h.joints);
    println!("frame_rate={}", h.frame_rate);
    println!("channels={}", channels.join(","));
    println!("bytes={}", bytes.len());
    if let Some((lo, hi)) = bbox(seq.frames.iter().flat_map(|f| f.points.iter().copied())) {
        println!("bbox_min={}", fmt_point(lo));
        println!("bbox_max={}", fmt_point(hi));
    }
    if h.flags.labels {
        let mut hist = [0usize; 10];
        for l in seq.frames.iter().flat_map(|f| f.part_labels.iter().flatten()) {
            hist[*l as usize] += 1;
        }
        let s: Vec<String> = hist.iter().map(|c| c.to_string()).collect();
        println!("label_histogram={}", s.join(","));
    }
    if h.flags.flow {
        let (v, n) = seq
            .frames
            .iter()
            .filter_map(|f| f.flow.as_ref())
            .fold((0, 0), |(v, n), f| (v + f.valid_count(), n + f.len()));
        println!("valid_flow_fraction={}", v as f64 / n.max(1) as f64);
    }
    Ok(())
}

fn inspect_checkpoint(bytes: &[u8]) -> Result<()> {
    let c = pcvu::io::decode_checkpoint(bytes)?;
    println!("format=PVUC");
    println!(
        "stage={}",
        match c.stage {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    );
    println!("digest={}", hex(&c.digest));
    println!("step={}", c.step);
    println!("tensors={}", c.params.len());
    println!("scalars={}", c.params.scalar_count());
    println!("optimizer={}", if c.opt.is_some() { "yes" } else { "no" });
    println!("losses={}", c.losses.len());
    println!("final_loss={}", c.losses.last().map_or("na".into(), |l| l.to_string()));
    Ok(())
}

pub fn inspect(file: &Path) -> Result<()> {
    let bytes = store::read(file)?;
    let r = match bytes.get(..4) {
        Some(b"PVUH") => inspect_sequence(&bytes),
        Some(b"PVUC") => inspect_checkpoint(&bytes),
        _ => bail!("{}: neither a PVUH container nor a PVUC checkpoint", file.display()),
    };
    r.with_context(|| file.display().to_string())
}

pub fn export_ply(file: &Path, frame: usize, color: Coloring, out: &Path) -> Result<()> {
    let seq = decode_sequence(&store::read(file)?).with_context(|| file.display().to_string())?;
    let f = seq
        .frames
        .get(frame)
        .with_context(|| format!("frame {frame} outside the {} frames of {}", seq.len(), file.display()))?;
    ensure!(!f.is_empty(), "frame {frame} has no points");
    let by = match color {
        Coloring::Part => ColorBy::Part,
        Coloring::Flow => ColorBy::FlowMagnitude,
        Coloring::None => ColorBy::None,
    };
    store::write(out, render_ply(f, by))?;
    println!("vertices={}", f.len());
    println!("ply={}", out.display());
    Ok(())
}

pub fn params(config: Option<&Path>) -> Result<()> {
    let mc = match config {
        Some(p) => {
            let cfg = store::read_config(p)?;
            cfg.model(cfg.head_kind()?)?
        }
        None => ModelConfig::default(),
    };
    println!("pretrain={}", count_params(&mc, Stage::Pretrain));
    println!("finetune={}", count_params(&mc, Stage::Finetune));
    Ok(())
}
