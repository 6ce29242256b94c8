use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::attention::{gate_state_probe, ProbeReport};
use crate::autodiff::Graph;
use crate::checkpoint;
use crate::data::{self, PARTS_PER_CLASS};
use crate::encoder::{ClassHead, Encoder, Layer, SegHead};
use crate::error::{Error, Result};
use crate::optim::{lr_at, AdamW};
use crate::params::ParamStore;
use crate::rng::{derive_seed, stream};

use super::config::{RunConfig, Task};
use super::metrics::{accuracy, miou, write_json, write_summary_csv, MetricsWriter, MiouReport, StepRecord};
use super::pipeline::{
    classify_forward, classify_forward_train, is_backbone, make_batch, prepare, pretrain_forward, segment_forward, Corruption, Prepared,
    PretrainModel,
};

const TAG_BATCH: u64 = 0xba7c;
const TAG_STEP: u64 = 0x57e9;
const TAG_PLAN: u64 = 0x91a2;
const TAG_EVAL: u64 = 0xe7a1;
const TAG_HEAD: u64 = 0x4ead;
const TAG_TEST: u64 = 0x7e57;

pub struct Dataset {
    pub train: Vec<Prepared>,
    pub test: Vec<Prepared>,
}

/// Reads `data.root` when set, otherwise generates the splits in memory.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let (train, test) = match &d.root {
        Some(root) => (
            data::read_split(root, "train", &d.shapes.classes)?,
            data::read_split(root, "test", &d.shapes.classes)?,
        ),
        None => (
            data::generate(&d.shapes, d.train_size, d.seed)?,
            data::generate(&d.shapes, d.test_size, derive_seed(d.seed, &[TAG_TEST]))?,
        ),
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("dataset has an empty split".into()));
    }
    Ok(Dataset {
        train: prepare(&train, &cfg.encoder)?,
        test: prepare(&test, &cfg.encoder)?,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateReport {
    pub root: PathBuf,
    pub train: usize,
    pub test: usize,
}

pub fn generate(cfg: &RunConfig, root: &Path) -> Result<GenerateReport> {
    let d = &cfg.data;
    let train = data::generate(&d.shapes, d.train_size, d.seed)?;
    let test = data::generate(&d.shapes, d.test_size, derive_seed(d.seed, &[TAG_TEST]))?;
    data::write_split(root, "train", &train)?;
    data::write_split(root, "test", &test)?;
    Ok(GenerateReport {
        root: root.to_owned(),
        train: train.len(),
        test: test.len(),
    })
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.out_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("config.json"), cfg)?;
    Ok(dir)
}

fn batch_indices(n: usize, k: usize, seed: u64, step: usize) -> Vec<usize> {
    let k = k.min(n);
    let mut idx = sample(&mut stream(seed, &[TAG_BATCH, step as u64]), n, k).into_vec();
    idx.sort_unstable();
    idx
}

fn numeric_failure(dir: &Path, step: usize, step_seed: u64, indices: &[usize], what: &str) -> Error {
    let dump = serde_json::json!({
        "step": step,
        "batch_seed": step_seed,
        "sample_indices": indices,
        "what": what,
    });
    let path = dir.join("nan_dump.json");
    let note = match write_json(&path, &dump) {
        Ok(()) => format!("; diagnostics in {}", path.display()),
        Err(_) => String::new(),
    };
    Error::Numeric(format!("{what} at step {step} (batch seed {step_seed}){note}"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub checkpoint: PathBuf,
    pub param_count: usize,
}

pub fn pretrain(cfg: &RunConfig) -> Result<PretrainReport> {
    let data = load_dataset(cfg)?;
    pretrain_on(cfg, &data.train)
}

pub fn pretrain_on(cfg: &RunConfig, train: &[Prepared]) -> Result<PretrainReport> {
    let dir = prepare_out_dir(cfg)?;
    let mut model = PretrainModel::new(&cfg.encoder, &cfg.diffusion)?;
    let mut ps = ParamStore::new();
    model.init(&mut ps, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut metrics = MetricsWriter::create(dir)?;
    let (mut losses, mut grad_norms) = (Vec::new(), Vec::new());
    let total = cfg.train.steps;
    let final_path = dir.join("final.plma");

    for step in 1..=total {
        let step_seed = derive_seed(cfg.seed, &[TAG_STEP, step as u64]);
        let idx = batch_indices(train.len(), cfg.train.batch_size, cfg.seed, step);
        let batch = make_batch(
            idx.iter().map(|&i| &train[i]).collect(),
            &cfg.encoder,
            derive_seed(cfg.seed, &[TAG_PLAN, step as u64]),
        )?;
        let mut g = Graph::new();
        let out = pretrain_forward(&mut g, &ps, &model, &batch, &cfg.mask, Corruption::Sampled, step_seed)?;
        let loss_var = out
            .loss
            .ok_or_else(|| Error::Config("pretraining needs mask.ratio > 0".into()))?;
        let loss = g.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(numeric_failure(dir, step, step_seed, &idx, &format!("loss is {loss}")));
        }
        g.backward(loss_var)?;
        let lr = lr_at(&cfg.optim, step, total);
        let grad_norm = match opt.step(&mut ps, &g.param_grads(), lr, |_| 1.0) {
            Ok(n) => n,
            Err(Error::Numeric(m)) => return Err(numeric_failure(dir, step, step_seed, &idx, &m)),
            Err(e) => return Err(e),
        };
        metrics.record(&StepRecord {
            step,
            loss,
            grad_norm,
            lr,
        })?;
        losses.push(loss);
        grad_norms.push(grad_norm);
        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 && step != total {
            checkpoint::save(&ps, &dir.join(format!("step_{step:06}.plma")))?;
        }
    }
    metrics.finish()?;
    checkpoint::save(&ps, &final_path)?;
    let tail = losses.len().min(10);
    let tail_mean = losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64;
    write_summary_csv(
        &dir.join("summary.csv"),
        &[
            ("steps".into(), total as f64),
            ("first_loss".into(), losses[0]),
            ("final_loss".into(), *losses.last().unwrap()),
            ("tail10_mean_loss".into(), tail_mean),
            ("params".into(), ps.num_scalars() as f64),
        ],
    )?;
    Ok(PretrainReport {
        losses,
        grad_norms,
        checkpoint: final_path,
        param_count: ps.num_scalars(),
    })
}

/// Copies backbone entries of `path` into `ps`. Any missing or misshapen
/// entry is a configuration error naming the first offending path.
pub fn load_backbone(ps: &mut ParamStore, path: &Path) -> Result<usize> {
    let ckpt = checkpoint::load(path)?;
    ps.load_matching(&ckpt, is_backbone)
        .map_err(|e| Error::Config(format!("checkpoint {} does not fit the encoder config: {e}", path.display())))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub task: Task,
    pub pretrained: bool,
    pub losses: Vec<f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_miou: Option<MiouReport>,
}

impl FinetuneReport {
    /// Accuracy for classification, instance mIoU for segmentation.
    pub fn headline(&self) -> f64 {
        self.test_accuracy.or(self.test_miou.as_ref().map(|m| m.instance)).unwrap_or(f64::NAN)
    }
}

enum Head {
    Cls(ClassHead),
    Seg(SegHead),
}

pub fn finetune(cfg: &RunConfig) -> Result<FinetuneReport> {
    let data = load_dataset(cfg)?;
    finetune_on(cfg, &data)
}

pub fn finetune_on(cfg: &RunConfig, data: &Dataset) -> Result<FinetuneReport> {
    if !matches!(cfg.task, Task::FinetuneCls | Task::FinetuneSeg) {
        return Err(Error::Config(format!("finetune cannot run task `{}`", cfg.task.name())));
    }
    let dir = prepare_out_dir(cfg)?;
    let (encoder, mut ps) = Encoder::build(&cfg.encoder, cfg.seed)?;
    let head_seed = derive_seed(cfg.seed, &[TAG_HEAD]);
    let num_parts = cfg.data.shapes.num_parts();
    let head = match cfg.task {
        Task::FinetuneCls => {
            let h = ClassHead::new(cfg.encoder.dim, cfg.data.shapes.classes.len());
            h.init(&mut ps, head_seed)?;
            Head::Cls(h)
        }
        _ => {
            let h = SegHead::new(cfg.encoder.dim, num_parts);
            h.init(&mut ps, head_seed)?;
            Head::Seg(h)
        }
    };
    let pretrained = match &cfg.checkpoint {
        Some(p) => {
            load_backbone(&mut ps, p)?;
            true
        }
        None => false,
    };

    let mut opt = AdamW::new(cfg.optim.clone());
    let mut metrics = MetricsWriter::create(dir)?;
    let mut losses = Vec::new();
    let total = cfg.train.steps;
    let scale = cfg.train.backbone_lr_scale;
    for step in 1..=total {
        let step_seed = derive_seed(cfg.seed, &[TAG_STEP, step as u64]);
        let idx = batch_indices(data.train.len(), cfg.train.batch_size, cfg.seed, step);
        let batch = make_batch(
            idx.iter().map(|&i| &data.train[i]).collect(),
            &cfg.encoder,
            derive_seed(cfg.seed, &[TAG_PLAN, step as u64]),
        )?;
        let mut g = Graph::new();
        let mut bn_stats = None;
        let loss_var = match &head {
            Head::Cls(h) => {
                let (logits, stats) = classify_forward_train(&mut g, &ps, &encoder, h, &batch)?;
                bn_stats = Some(stats);
                g.cross_entropy(logits, &batch.labels())?
            }
            Head::Seg(h) => {
                let logits = segment_forward(&mut g, &ps, &encoder, h, &batch)?;
                let labels: Vec<usize> = batch.items.iter().flat_map(|p| p.parts.iter().copied()).collect();
                g.cross_entropy(logits, &labels)?
            }
        };
        let loss = g.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(numeric_failure(dir, step, step_seed, &idx, &format!("loss is {loss}")));
        }
        g.backward(loss_var)?;
        let lr = lr_at(&cfg.optim, step, total);
        let grad_norm = match opt.step(&mut ps, &g.param_grads(), lr, |n| if is_backbone(n) { scale } else { 1.0 }) {
            Ok(n) => n,
            Err(Error::Numeric(m)) => return Err(numeric_failure(dir, step, step_seed, &idx, &m)),
            Err(e) => return Err(e),
        };
        if let (Head::Cls(h), Some(stats)) = (&head, &bn_stats) {
            h.bn.update(&mut ps, stats)?;
        }
        metrics.record(&StepRecord {
            step,
            loss,
            grad_norm,
            lr,
        })?;
        losses.push(loss);
    }
    metrics.finish()?;
    checkpoint::save(&ps, &dir.join("final.plma"))?;

    let mut report = FinetuneReport {
        task: cfg.task,
        pretrained,
        losses,
        train_accuracy: None,
        test_accuracy: None,
        test_miou: None,
    };
    let mut rows = vec![
        ("steps".to_string(), total as f64),
        ("final_loss".to_string(), *report.losses.last().unwrap()),
    ];
    match &head {
        Head::Cls(h) => {
            let tr = eval_cls(cfg, &encoder, h, &ps, &data.train)?;
            let te = eval_cls(cfg, &encoder, h, &ps, &data.test)?;
            rows.push(("train_accuracy".into(), tr));
            rows.push(("test_accuracy".into(), te));
            report.train_accuracy = Some(tr);
            report.test_accuracy = Some(te);
        }
        Head::Seg(h) => {
            let m = eval_seg(cfg, &encoder, h, &ps, &data.test)?;
            rows.push(("test_instance_miou".into(), m.instance));
            rows.push(("test_class_miou".into(), m.class));
            report.test_miou = Some(m);
        }
    }
    write_summary_csv(&dir.join("summary.csv"), &rows)?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn eval_cls(cfg: &RunConfig, enc: &Encoder, head: &ClassHead, ps: &ParamStore, set: &[Prepared]) -> Result<f64> {
    let mut pred = Vec::with_capacity(set.len());
    for (k, chunk) in set.chunks(cfg.train.eval_batch_size).enumerate() {
        let batch = make_batch(chunk.iter().collect(), &cfg.encoder, derive_seed(cfg.seed, &[TAG_EVAL, k as u64]))?;
        let mut g = Graph::new();
        let logits = classify_forward(&mut g, ps, enc, head, &batch)?;
        pred.extend(g.value(logits).data().chunks(head.num_classes).map(argmax));
    }
    let labels: Vec<usize> = set.iter().map(|p| p.label).collect();
    Ok(accuracy(&pred, &labels))
}

/// Predictions are restricted to the parts of each shape's known category.
fn eval_seg(cfg: &RunConfig, enc: &Encoder, head: &SegHead, ps: &ParamStore, set: &[Prepared]) -> Result<MiouReport> {
    let parts_of = |c: usize| (PARTS_PER_CLASS * c..PARTS_PER_CLASS * (c + 1)).collect::<Vec<_>>();
    let mut shapes = Vec::with_capacity(set.len());
    for (k, chunk) in set.chunks(cfg.train.eval_batch_size).enumerate() {
        let batch = make_batch(chunk.iter().collect(), &cfg.encoder, derive_seed(cfg.seed, &[TAG_EVAL, k as u64]))?;
        let mut g = Graph::new();
        let logits = segment_forward(&mut g, ps, enc, head, &batch)?;
        let rows: Vec<&[f64]> = g.value(logits).data().chunks(head.num_parts).collect();
        let mut offset = 0;
        for item in chunk {
            let cat = item.class.index();
            let allowed = parts_of(cat);
            let pred: Vec<usize> = rows[offset..offset + item.points.len()]
                .iter()
                .map(|r| allowed[argmax(&r[allowed[0]..=allowed[allowed.len() - 1]])])
                .collect();
            offset += item.points.len();
            shapes.push((cat, pred, item.parts.clone()));
        }
    }
    Ok(miou(&shapes, parts_of))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub layer: usize,
    pub report: ProbeReport,
}

/// Correlates the latent block's key gate with the preceding state-space
/// readout on the first evaluation batch of the test split.
pub fn probe(cfg: &RunConfig) -> Result<ProbeSummary> {
    let data = load_dataset(cfg)?;
    let dir = prepare_out_dir(cfg)?;
    let (encoder, mut ps) = Encoder::build(&cfg.encoder, cfg.seed)?;
    if let Some(p) = &cfg.checkpoint {
        load_backbone(&mut ps, p)?;
    }
    let (layer, block) = encoder
        .layers
        .iter()
        .enumerate()
        .find_map(|(i, l)| match l {
            Layer::Latent(b) => Some((i, b)),
            Layer::Mamba(_) => None,
        })
        .ok_or_else(|| Error::Config("probe needs an encoder with a latent-attention layer".into()))?;
    let Some(Layer::Mamba(prev)) = layer.checked_sub(1).map(|i| &encoder.layers[i]) else {
        return Err(Error::Config(format!("latent layer {layer} is not preceded by a state-space layer")));
    };
    let n = cfg.train.eval_batch_size.min(data.test.len());
    let batch = make_batch(data.test[..n].iter().collect(), &cfg.encoder, derive_seed(cfg.seed, &[TAG_EVAL, 0]))?;
    let mut g = Graph::new();
    let nb = g.constant(batch.neighborhoods.clone());
    let tokens = encoder.embed_patches(&mut g, &ps, nb)?;
    let seq = encoder.arrange(&mut g, tokens, &batch.plans)?;
    let centers = g.constant(batch.centers.clone());
    let x = encoder.embed_sequence(&mut g, &ps, seq, centers, &batch.order_ids)?;
    let (_, inputs) = encoder.run_layers_traced(&mut g, &ps, x)?;
    let readout = prev.mixer(&mut g, &ps, inputs[layer - 1])?;
    let report = gate_state_probe(block, &ps, g.value(inputs[layer]), g.value(readout))?;
    let summary = ProbeSummary { layer, report };
    write_json(&dir.join("probe.json"), &summary)?;
    Ok(summary)
}
