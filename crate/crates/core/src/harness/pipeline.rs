//! Batching and the forward passes shared by every run type.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::data::{Sample, ShapeClass};
use crate::diffusion::{noise_mse, Denoiser, DiffusionConfig, Schedule, SlotLayout};
use crate::encoder::{arranged_centers, nearest_center, ClassHead, Encoder, EncoderConfig, SegHead};
use crate::error::{Error, Result};
use crate::nn::BatchStats;
use crate::params::ParamStore;
use crate::pointcloud::{group, neighborhood_tensor, FpsStart, PatchSet, Point};
use crate::rng::{derive_seed, stream};
use crate::serialization::{mask_positions, plan, MaskRecord, OrderId, SequencePlan};
use crate::tensor::Tensor;

use super::config::MaskConfig;

const TAG_MASK: u64 = 0x6d61;
const TAG_TIME: u64 = 0x7469;

/// A cloud normalized and grouped once, ready for batching.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub points: Vec<Point>,
    pub patches: PatchSet,
    pub label: usize,
    pub class: ShapeClass,
    pub parts: Vec<usize>,
    /// Patch owning each point.
    pub nearest: Vec<usize>,
}

pub fn prepare(samples: &[Sample], cfg: &EncoderConfig) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let cloud = s.cloud.normalized();
            let patches = group(&cloud, cfg.groups, cfg.group_size, FpsStart::Centroid)?;
            let nearest = nearest_center(&cloud.points, &patches.centers);
            Ok(Prepared {
                points: cloud.points,
                patches,
                label: s.label,
                class: s.class,
                parts: s.parts.clone(),
                nearest,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub items: Vec<&'a Prepared>,
    pub plans: Vec<SequencePlan>,
    /// `[B, G, S, 3]`.
    pub neighborhoods: Tensor,
    /// Per-position centers `[B, T, 3]`.
    pub centers: Tensor,
    pub order_ids: Vec<OrderId>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.order_ids.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|p| p.label).collect()
    }
}

/// `plan_seed` only influences the random strategy.
pub fn make_batch<'a>(items: Vec<&'a Prepared>, cfg: &EncoderConfig, plan_seed: u64) -> Result<Batch<'a>> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let plans = items
        .iter()
        .enumerate()
        .map(|(b, p)| plan(&p.patches.centers, cfg.strategy, cfg.curve_bits, derive_seed(plan_seed, &[b as u64])))
        .collect::<Result<Vec<_>>>()?;
    let sets: Vec<PatchSet> = items.iter().map(|p| p.patches.clone()).collect();
    let centers: Vec<Vec<Point>> = items.iter().map(|p| p.patches.centers.clone()).collect();
    Ok(Batch {
        neighborhoods: neighborhood_tensor(&sets)?,
        centers: arranged_centers(&centers, &plans)?,
        order_ids: plans[0].order_ids.clone(),
        plans,
        items,
    })
}

/// Parameters outside both heads and the denoiser.
pub fn is_backbone(name: &str) -> bool {
    !(name.starts_with("cls_head.") || name.starts_with("seg_head.") || name.starts_with("denoiser."))
}

/// Encoder plus denoising head.
///
/// Clean targets come from a frozen copy of the patch embedder taken at
/// initialization. Drawing them from the live embedder lets it collapse
/// every token to the same vector, after which the noise is recoverable
/// from `Z_t` alone and the encoder learns nothing.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub encoder: Encoder,
    pub denoiser: Denoiser,
    pub schedule: Schedule,
    /// `patch_embed.*` as initialized; empty until `init`.
    pub target: ParamStore,
}

impl PretrainModel {
    pub fn new(enc: &EncoderConfig, diff: &DiffusionConfig) -> Result<Self> {
        let encoder = Encoder::new(enc)?;
        let denoiser = Denoiser::new(enc.dim, enc.pos_hidden, diff.decoder_depth, &enc.ssm);
        Ok(Self {
            encoder,
            denoiser,
            schedule: Schedule::from_config(diff).map_err(|e| Error::Config(e.to_string()))?,
            target: ParamStore::new(),
        })
    }

    pub fn init(&mut self, ps: &mut ParamStore, seed: u64) -> Result<()> {
        self.encoder.init(ps, seed)?;
        self.denoiser.init(ps, seed)?;
        self.target = ParamStore::new();
        for (name, t) in ps.iter().filter(|(n, _)| n.starts_with("patch_embed.")) {
            self.target.insert(name.clone(), t.clone())?;
        }
        Ok(())
    }

    /// Frozen patch tokens in sequence order, normalized without affine
    /// parameters and gathered at `positions`: `[B, M, D]`.
    pub fn clean_targets(&self, batch: &Batch, positions: &[Vec<usize>]) -> Result<Tensor> {
        if self.target.is_empty() {
            return Err(Error::InvalidArgument("pretrain model used before init".into()));
        }
        let mut g = Graph::new();
        let nb = g.constant(batch.neighborhoods.clone());
        let tokens = self.encoder.embed_patches(&mut g, &self.target, nb)?;
        let seq = self.encoder.arrange(&mut g, tokens, &batch.plans)?;
        let z = g.layer_norm(seq, None, None)?;
        let z = g.gather_batched(z, positions)?;
        Ok(g.value(z).clone())
    }
}

/// How the masked targets are corrupted.
#[derive(Clone, Copy, Debug)]
pub enum Corruption {
    /// `t ~ U[1, T]` and `ε ~ N(0, I)` per sequence from the step seed.
    Sampled,
    /// A fixed timestep and `ε = 0`.
    Noiseless { t: usize },
}

pub struct PretrainOutput {
    /// Condition tokens for the visible positions, `[B, V, D]`.
    pub cond: Var,
    /// Patch-level masks carried to sequence positions.
    pub masks: Vec<MaskRecord>,
    /// Frozen, normalized clean tokens at the masked positions `[B, M, D]`.
    pub targets: Option<Tensor>,
    pub timesteps: Vec<usize>,
    pub z_t: Option<Tensor>,
    /// `None` when nothing is masked.
    pub loss: Option<Var>,
}

/// group → embed patches → serialize → mask → order embedding → encode the
/// visible positions → denoise the masked ones.
pub fn pretrain_forward(
    g: &mut Graph,
    ps: &ParamStore,
    model: &PretrainModel,
    batch: &Batch,
    mask: &MaskConfig,
    corruption: Corruption,
    step_seed: u64,
) -> Result<PretrainOutput> {
    let enc = &model.encoder;
    let groups = enc.cfg.groups;
    let nb = g.constant(batch.neighborhoods.clone());
    let tokens = enc.embed_patches(g, ps, nb)?;
    let seq = enc.arrange(g, tokens, &batch.plans)?;
    let centers = g.constant(batch.centers.clone());
    let x = enc.embed_sequence(g, ps, seq, centers, &batch.order_ids)?;

    let masks = batch
        .plans
        .iter()
        .enumerate()
        .map(|(b, p)| {
            let patch_mask = mask_positions(groups, mask.ratio, mask.mode, derive_seed(step_seed, &[TAG_MASK, b as u64]))?;
            Ok(patch_mask.propagate(p))
        })
        .collect::<Result<Vec<_>>>()?;
    let visible: Vec<Vec<usize>> = masks.iter().map(MaskRecord::visible_indices).collect();
    let vis = g.gather_batched(x, &visible)?;
    let cond = enc.run_layers(g, ps, vis)?;

    let n_masked = masks[0].count();
    if n_masked == 0 {
        return Ok(PretrainOutput {
            cond,
            masks,
            targets: None,
            timesteps: Vec::new(),
            z_t: None,
            loss: None,
        });
    }
    let slots = SlotLayout::from_masks(&masks)?;
    let z0 = model.clean_targets(batch, &slots.masked)?;

    let d = enc.dim();
    let per = n_masked * d;
    let steps = model.schedule.steps();
    let mut timesteps = Vec::with_capacity(batch.len());
    let mut eps = Vec::with_capacity(batch.len() * per);
    for b in 0..batch.len() {
        match corruption {
            Corruption::Sampled => {
                let mut rng = stream(step_seed, &[TAG_TIME, b as u64]);
                timesteps.push(rng.random_range(1..=steps));
                eps.extend((0..per).map(|_| rng.sample::<f64, _>(StandardNormal)));
            }
            Corruption::Noiseless { t } => {
                timesteps.push(t);
                eps.extend(std::iter::repeat_n(0.0, per));
            }
        }
    }
    let eps = Tensor::new(vec![batch.len(), n_masked, d], eps)?;
    let mut zt = Vec::with_capacity(batch.len() * per);
    for (b, &t) in timesteps.iter().enumerate() {
        if t == 0 || t > steps {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [1, {steps}]")));
        }
        let (a, s) = (model.schedule.alpha_bar(t).sqrt(), (1.0 - model.schedule.alpha_bar(t)).sqrt());
        let range = b * per..(b + 1) * per;
        zt.extend(z0.data()[range.clone()].iter().zip(&eps.data()[range]).map(|(z, e)| a * z + s * e));
    }
    let z_t = Tensor::new(vec![batch.len(), n_masked, d], zt)?;

    let zv = g.constant(z_t.clone());
    let eps_hat = model.denoiser.predict(g, ps, zv, &timesteps, cond, centers, &slots)?;
    let loss = noise_mse(g, eps_hat, &eps)?;
    Ok(PretrainOutput {
        cond,
        masks,
        targets: Some(z0),
        timesteps,
        z_t: Some(z_t),
        loss: Some(loss),
    })
}

/// Every position encoded: `[B, T, D]`.
pub fn encode_batch(g: &mut Graph, ps: &ParamStore, enc: &Encoder, batch: &Batch) -> Result<Var> {
    let nb = g.constant(batch.neighborhoods.clone());
    let tokens = enc.embed_patches(g, ps, nb)?;
    let seq = enc.arrange(g, tokens, &batch.plans)?;
    let centers = g.constant(batch.centers.clone());
    enc.encode(g, ps, seq, centers, &batch.order_ids)
}

/// Training-mode logits `[B, K]` plus the head's batch statistics.
pub fn classify_forward_train(
    g: &mut Graph,
    ps: &ParamStore,
    enc: &Encoder,
    head: &ClassHead,
    batch: &Batch,
) -> Result<(Var, BatchStats)> {
    let feats = encode_batch(g, ps, enc, batch)?;
    head.forward_train(g, ps, feats)
}

/// Inference logits `[B, K]`.
pub fn classify_forward(g: &mut Graph, ps: &ParamStore, enc: &Encoder, head: &ClassHead, batch: &Batch) -> Result<Var> {
    let feats = encode_batch(g, ps, enc, batch)?;
    head.forward(g, ps, feats)
}

/// Per-point logits flattened to `[B·N, P]`.
pub fn segment_forward(g: &mut Graph, ps: &ParamStore, enc: &Encoder, head: &SegHead, batch: &Batch) -> Result<Var> {
    let feats = encode_batch(g, ps, enc, batch)?;
    let n = batch.items[0].points.len();
    if batch.items.iter().any(|p| p.points.len() != n) {
        return Err(Error::Shape("clouds in a segmentation batch differ in size".into()));
    }
    let pts = Tensor::new(
        vec![batch.len(), n, 3],
        batch.items.iter().flat_map(|p| p.points.iter().flatten().copied()).collect(),
    )?;
    let pts = g.constant(pts);
    let nearest: Vec<Vec<usize>> = batch.items.iter().map(|p| p.nearest.clone()).collect();
    let logits = head.forward(g, ps, feats, &batch.plans, enc.cfg.groups, pts, &nearest)?;
    g.reshape(logits, &[batch.len() * n, head.num_parts])
}
