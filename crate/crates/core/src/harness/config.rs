use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SyntheticShapeSpec;
use crate::diffusion::DiffusionConfig;
use crate::encoder::{EncoderConfig, Placement};
use crate::error::{Error, Result};
use crate::optim::OptimConfig;
use crate::serialization::{MaskMode, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pretrain,
    FinetuneCls,
    FinetuneSeg,
    Probe,
}

impl Task {
    /// Segmentation reads per-point structure best from axis-sorted
    /// sequences; everything else uses the curve pair.
    pub fn default_strategy(self) -> Strategy {
        match self {
            Task::FinetuneSeg => Strategy::AxisWise,
            _ => Strategy::HilbertPair,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Pretrain => "pretrain",
            Task::FinetuneCls => "finetune_cls",
            Task::FinetuneSeg => "finetune_seg",
            Task::Probe => "probe",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub shapes: SyntheticShapeSpec,
    pub train_size: usize,
    pub test_size: usize,
    /// Dataset written by `generate`; `None` generates in memory.
    pub root: Option<PathBuf>,
    /// Seed of the synthetic clouds, independent of the run seed so that
    /// runs with different seeds see the same data.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            shapes: SyntheticShapeSpec::default(),
            train_size: 200,
            test_size: 100,
            root: None,
            seed: 1234,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub ratio: f64,
    pub mode: MaskMode,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.6,
            mode: MaskMode::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Learning-rate multiplier for backbone parameters when fine-tuning.
    pub backbone_lr_scale: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            checkpoint_every: 100,
            backbone_lr_scale: 0.1,
            eval_batch_size: 25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Random, curve pair and axis-wise orderings, for both downstream tasks.
    Scanning,
    /// Stack without latent attention, with the latent block, and with a
    /// plain multi-head block in its place.
    Pmla,
    Placement,
    LatentDim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub axes: Vec<AblationAxis>,
    pub placements: Vec<Placement>,
    pub latent_dims: Vec<usize>,
    pub scanning: Vec<Strategy>,
    /// Pretrain every cell's backbone before fine-tuning it.
    pub pretrain: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            axes: vec![AblationAxis::Scanning, AblationAxis::Pmla, AblationAxis::Placement, AblationAxis::LatentDim],
            placements: vec![Placement::Early, Placement::Middle, Placement::Late],
            latent_dims: vec![32, 48, 64, 128],
            scanning: vec![Strategy::Random, Strategy::HilbertPair, Strategy::AxisWise],
            pretrain: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    pub mask: MaskConfig,
    pub diffusion: DiffusionConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    /// Checkpoint to initialize the backbone from (fine-tuning, probing).
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub ablation: AblationConfig,
}

impl RunConfig {
    /// Defaults for `task`: the desk encoder with the task's serialization.
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            seed: 0,
            encoder: EncoderConfig {
                strategy: task.default_strategy(),
                ..EncoderConfig::desk()
            },
            data: DataConfig::default(),
            mask: MaskConfig::default(),
            diffusion: DiffusionConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            checkpoint: None,
            out_dir: PathBuf::from("runs"),
            ablation: AblationConfig::default(),
        }
    }

    /// Layers a user JSON document and `key=value` overrides over the
    /// defaults of the document's task (or `fallback` when it names none).
    /// Unknown keys anywhere are rejected.
    pub fn resolve(user: Option<&str>, fallback: Task, overrides: &[String]) -> Result<Self> {
        let user: Value = match user {
            Some(text) => serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?,
            None => Value::Object(Default::default()),
        };
        if !user.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut task = match user.get("task") {
            Some(t) => serde_json::from_value(t.clone()).map_err(|e| Error::Config(format!("task: {e}")))?,
            None => fallback,
        };
        for o in overrides {
            if let Some(("task", v)) = o.split_once('=') {
                task = serde_json::from_value(parse_scalar(v)).map_err(|e| Error::Config(format!("task: {e}")))?;
            }
        }
        let mut doc = serde_json::to_value(Self::for_task(task)).expect("config serializes");
        merge(&mut doc, &user, "")?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder.validate()?;
        self.diffusion.validate()?;
        self.optim.validate()?;
        self.data.shapes.validate(self.encoder.groups.max(self.encoder.group_size))?;
        if !(0.0..1.0).contains(&self.mask.ratio) {
            return bad(format!("mask.ratio must lie in [0, 1), got {}", self.mask.ratio));
        }
        let kept = self.encoder.groups - (self.mask.ratio * self.encoder.groups as f64).round() as usize;
        if kept == 0 {
            return bad(format!("mask.ratio {} leaves no visible patch", self.mask.ratio));
        }
        if self.train.steps == 0 || self.train.batch_size == 0 || self.train.eval_batch_size == 0 {
            return bad("train.steps, train.batch_size and train.eval_batch_size must be positive".into());
        }
        if !(self.train.backbone_lr_scale >= 0.0 && self.train.backbone_lr_scale.is_finite()) {
            return bad("train.backbone_lr_scale must be finite and non-negative".into());
        }
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return bad("data.train_size and data.test_size must be positive".into());
        }
        if self.task == Task::FinetuneCls && self.train.batch_size.min(self.data.train_size) < 2 {
            return bad("classification fine-tuning needs at least 2 clouds per batch for its batch norm".into());
        }
        if self.task == Task::Pretrain && self.train.batch_size > self.data.train_size {
            return bad("train.batch_size exceeds data.train_size".into());
        }
        if self.ablation.latent_dims.contains(&0) {
            return bad("ablation.latent_dims must be positive".into());
        }
        Ok(())
    }
}

fn merge(base: &mut Value, user: &Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| Error::Config(format!("unknown config key `{here}`")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &here)?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        (b, u) => {
            *b = u.clone();
            Ok(())
        }
    }
}

/// JSON if it parses (numbers, booleans, arrays, quoted strings), else a
/// bare string.
fn parse_scalar(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

/// `a.b.c=value` on an existing key.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let mut slot = &mut *doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    *slot = parse_scalar(raw);
    Ok(())
}
