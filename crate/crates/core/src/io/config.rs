//! TOML run configuration.
//!
//! `data.frames`, `data.points` and `data.count` must be given; every other
//! key falls back to the value of [`RunConfig::default`]. Unknown keys are
//! errors. Layer layouts are strings of `S` (spatial) and `T` (temporal).
//!
//! ```toml
//! [data]
//! frames = 8
//! points = 128
//! count = 60
//! classes = ["walk", "wave", "squat"]
//!
//! [data.lidar]
//! beams = 64
//!
//! [mask]
//! r_t = 0.8
//! r_s = 0.6
//!
//! [model]
//! dim = 32
//! heads = 2
//! encoder = "STS"
//! decoder = "ST"
//!
//! [pretrain]
//! epochs = 20
//! schedule = "cosine"
//! ```

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::geom::Point3;
use crate::model::{HeadKind, LayerKind, ModelConfig};
use crate::synthgen::{DatasetConfig, LidarConfig, MotionClass, DEFAULT_FLOW_THRESHOLD, NUM_JOINTS, ROOT_JOINT};
use crate::train::{MaskConfig, Schedule, TrainConfig};

const REQUIRED: [(&str, &str); 3] = [("data", "frames"), ("data", "points"), ("data", "count")];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarSection {
    pub origin: [f64; 3],
    pub beams: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_step_deg: f64,
    pub range_sigma: f64,
    pub max_range: f64,
    pub dropout: f64,
}

impl Default for LidarSection {
    fn default() -> Self {
        let l = LidarConfig::default();
        Self {
            origin: l.origin.to_array(),
            beams: l.beams,
            elevation_min_deg: l.elevation_min_deg,
            elevation_max_deg: l.elevation_max_deg,
            azimuth_step_deg: l.azimuth_step_deg,
            range_sigma: l.range_sigma,
            max_range: l.max_range,
            dropout: l.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub frames: usize,
    pub points: usize,
    /// Sequences to generate.
    pub count: u32,
    pub seed: u64,
    pub classes: Vec<String>,
    /// Share of each class used for training; the rest is the test split.
    pub train_fraction: f64,
    pub split_seed: u64,
    pub distance: [f64; 2],
    pub height: [f64; 2],
    pub max_noise_objects: usize,
    pub occlusion_prob: f64,
    pub max_occlusion: f64,
    pub flow: bool,
    pub flow_threshold: f64,
    pub frame_rate: f32,
    pub lidar: LidarSection,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            frames: d.frames,
            points: d.points,
            count: 260,
            seed: 0,
            classes: d.classes.iter().map(|c| c.name().to_string()).collect(),
            train_fraction: 200.0 / 260.0,
            split_seed: 0,
            distance: [d.distance.0, d.distance.1],
            height: [d.height.0, d.height.1],
            max_noise_objects: d.max_noise_objects,
            occlusion_prob: d.occlusion_prob,
            max_occlusion: d.max_occlusion,
            flow: d.flow,
            flow_threshold: DEFAULT_FLOW_THRESHOLD,
            frame_rate: d.frame_rate,
            lidar: LidarSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    pub r_t: f64,
    pub r_s: f64,
}

impl Default for MaskSection {
    fn default() -> Self {
        let m = MaskConfig::default();
        Self { r_t: m.r_t, r_s: m.r_s }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dim: usize,
    pub heads: usize,
    pub encoder: String,
    pub decoder: String,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub global_points: usize,
    pub tokenizer: [usize; 3],
    pub pe_hidden: usize,
    pub use_flow: bool,
    /// `action` or `pose`.
    pub head: String,
    pub pose_hidden: usize,
}

fn layout_string(layers: &[LayerKind]) -> String {
    layers
        .iter()
        .map(|k| match k {
            LayerKind::Spatial => 'S',
            LayerKind::Temporal => 'T',
        })
        .collect()
}

fn parse_layout(key: &str, s: &str) -> Result<Vec<LayerKind>, IoError> {
    s.chars()
        .map(|c| match c {
            'S' | 's' => Ok(LayerKind::Spatial),
            'T' | 't' => Ok(LayerKind::Temporal),
            _ => Err(IoError::Config(format!("{key}: layer '{c}' is not S or T"))),
        })
        .collect()
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            dim: m.dim,
            heads: m.heads,
            encoder: layout_string(&m.encoder),
            decoder: layout_string(&m.decoder),
            mlp_ratio: m.mlp_ratio,
            patch_size: m.patch_size,
            global_points: m.global_points,
            tokenizer: m.tokenizer,
            pe_hidden: m.pe_hidden,
            use_flow: m.use_flow,
            head: "action".into(),
            pose_hidden: m.pose_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// `cosine` or `constant`.
    pub schedule: String,
    pub seed: u64,
    pub snapshot_every: usize,
    /// Share of each class of the training split used for fine-tuning.
    pub fraction: f64,
}

impl TrainSection {
    fn from_config(t: TrainConfig) -> Self {
        Self {
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            weight_decay: t.weight_decay,
            schedule: match t.schedule {
                Schedule::Cosine => "cosine".into(),
                Schedule::Constant => "constant".into(),
            },
            seed: t.seed,
            snapshot_every: t.snapshot_every,
            fraction: 1.0,
        }
    }

    fn finetune() -> Self {
        Self::from_config(TrainConfig::finetune())
    }

    fn to_config(&self, key: &str) -> Result<TrainConfig, IoError> {
        let schedule = match self.schedule.as_str() {
            "cosine" => Schedule::Cosine,
            "constant" => Schedule::Constant,
            s => return Err(IoError::Config(format!("{key}.schedule: unknown schedule '{s}'"))),
        };
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(IoError::Config(format!("{key}.fraction {} outside (0, 1]", self.fraction)));
        }
        let t = TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            weight_decay: self.weight_decay,
            schedule,
            seed: self.seed,
            snapshot_every: self.snapshot_every,
        };
        t.validate().map_err(|e| IoError::Config(format!("{key}: {e}")))?;
        Ok(t)
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::from_config(TrainConfig::pretrain())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Directory of generated containers and the manifest.
    pub data: String,
    /// Directory for checkpoints, curves and reports.
    pub out: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "out".into(),
        }
    }
}

fn finetune_default() -> TrainSection {
    TrainSection::finetune()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub mask: MaskSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: TrainSection,
    #[serde(default = "finetune_default")]
    pub finetune: TrainSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            mask: MaskSection::default(),
            model: ModelSection::default(),
            pretrain: TrainSection::default(),
            finetune: TrainSection::finetune(),
            paths: PathsSection::default(),
        }
    }
}

/// First line of a TOML error, which names the offending key.
fn one_line(e: &toml::de::Error) -> String {
    let msg = e.message().trim().replace('\n', " ");
    match e.span() {
        Some(s) => format!("{msg} (bytes {}..{})", s.start, s.end),
        None => msg,
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        let table: toml::Table = text.parse().map_err(|e| IoError::Config(one_line(&e)))?;
        for (section, key) in REQUIRED {
            let present = table
                .get(section)
                .and_then(|s| s.as_table())
                .is_some_and(|s| s.contains_key(key));
            if !present {
                return Err(IoError::Config(format!("missing required key {section}.{key}")));
            }
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| IoError::Config(one_line(&e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Builds every typed config once so errors surface at load time.
    pub fn validate(&self) -> Result<(), IoError> {
        self.dataset()?;
        self.model(self.head_kind()?)?;
        self.mask()?;
        self.pretrain.to_config("pretrain")?;
        self.finetune.to_config("finetune")?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(IoError::Config(format!(
                "data.train_fraction {} outside (0, 1)",
                self.data.train_fraction
            )));
        }
        Ok(())
    }

    pub fn classes(&self) -> Result<Vec<MotionClass>, IoError> {
        self.data
            .classes
            .iter()
            .map(|n| MotionClass::from_name(n).ok_or_else(|| IoError::Config(format!("data.classes: unknown class '{n}'"))))
            .collect()
    }

    pub fn dataset(&self) -> Result<DatasetConfig, IoError> {
        let d = &self.data;
        let l = &d.lidar;
        let cfg = DatasetConfig {
            frames: d.frames,
            points: d.points,
            classes: self.classes()?,
            lidar: LidarConfig {
                origin: Point3::new(l.origin[0], l.origin[1], l.origin[2]),
                beams: l.beams,
                elevation_min_deg: l.elevation_min_deg,
                elevation_max_deg: l.elevation_max_deg,
                azimuth_step_deg: l.azimuth_step_deg,
                range_sigma: l.range_sigma,
                max_range: l.max_range,
                dropout: l.dropout,
            },
            distance: (d.distance[0], d.distance[1]),
            height: (d.height[0], d.height[1]),
            max_noise_objects: d.max_noise_objects,
            occlusion_prob: d.occlusion_prob,
            max_occlusion: d.max_occlusion,
            flow: d.flow,
            flow_threshold: d.flow_threshold,
            frame_rate: d.frame_rate,
        };
        cfg.validate().map_err(|e| IoError::Config(format!("data: {e}")))?;
        Ok(cfg)
    }

    /// The head named by `model.head`: one class per `data.classes` entry,
    /// or the synthetic skeleton.
    pub fn head_kind(&self) -> Result<HeadKind, IoError> {
        match self.model.head.as_str() {
            "action" => Ok(HeadKind::Action {
                classes: self.data.classes.len(),
            }),
            "pose" => Ok(HeadKind::Pose {
                joints: NUM_JOINTS,
                root: ROOT_JOINT,
            }),
            h => Err(IoError::Config(format!("model.head: unknown head '{h}'"))),
        }
    }

    pub fn model(&self, head: HeadKind) -> Result<ModelConfig, IoError> {
        let m = &self.model;
        let cfg = ModelConfig {
            dim: m.dim,
            heads: m.heads,
            encoder: parse_layout("model.encoder", &m.encoder)?,
            decoder: parse_layout("model.decoder", &m.decoder)?,
            mlp_ratio: m.mlp_ratio,
            frames: self.data.frames,
            parts: crate::patchmask::NUM_PARTS,
            patch_size: m.patch_size,
            global_points: m.global_points,
            tokenizer: m.tokenizer,
            pe_hidden: m.pe_hidden,
            head,
            use_flow: m.use_flow,
            pose_hidden: m.pose_hidden,
        };
        cfg.validate().map_err(|e| IoError::Config(format!("model: {e}")))?;
        Ok(cfg)
    }

    pub fn mask(&self) -> Result<MaskConfig, IoError> {
        let (r_t, r_s) = (self.mask.r_t, self.mask.r_s);
        if !((0.0..1.0).contains(&r_t) && (0.0..1.0).contains(&r_s)) {
            return Err(IoError::Config(format!("mask ratios r_t = {r_t}, r_s = {r_s} outside [0, 1)")));
        }
        Ok(MaskConfig { r_t, r_s, fixed: false })
    }

    pub fn pretrain_config(&self) -> Result<TrainConfig, IoError> {
        self.pretrain.to_config("pretrain")
    }

    pub fn finetune_config(&self) -> Result<TrainConfig, IoError> {
        self.finetune.to_config("finetune")
    }
}
