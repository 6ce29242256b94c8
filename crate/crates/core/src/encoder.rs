//! The hybrid encoder: patch embedding, order scaling, positional MLP, a stack
//! of state-space blocks with latent-attention blocks at chosen depths, and
//! task heads.
//!
//! Parameter paths:
//! `patch_embed.*`, `pos_embed.*`, `order_scale.<order>.{gamma,beta}`,
//! `layers.<i>.*`, `norm_f.*`, `cls_head.*`, `seg_head.*`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, LatentBlock};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, BatchStats, Linear, Mlp, Norm};
use crate::params::ParamStore;
use crate::patch::{PatchEncoder, PatchEncoderConfig};
use crate::pointcloud::Point;
use crate::serialization::{init_order_scale, order_scale, OrderId, SequencePlan, Strategy};
use crate::ssm::{MambaBlock, SsmConfig};
use crate::tensor::Tensor;

pub const ORDER_SCALE: &str = "order_scale";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    /// Layers that are latent-attention blocks; all others are state-space blocks.
    pub pmla_positions: Vec<usize>,
    pub pos_hidden: usize,
    pub ssm: SsmConfig,
    pub attention: AttentionConfig,
    pub patch: PatchEncoderConfig,
    /// Patches per cloud.
    pub groups: usize,
    /// Points per patch.
    pub group_size: usize,
    pub strategy: Strategy,
    pub curve_bits: u32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 384,
            depth: 12,
            pmla_positions: vec![6],
            pos_hidden: 128,
            ssm: SsmConfig::default(),
            attention: AttentionConfig::default(),
            patch: PatchEncoderConfig::default(),
            groups: 128,
            group_size: 32,
            strategy: Strategy::HilbertPair,
            curve_bits: 10,
        }
    }
}

impl EncoderConfig {
    /// Default backbone laid out for classification: 64 patches, each
    /// appearing once per curve.
    pub fn classification() -> Self {
        Self {
            groups: 64,
            ..Self::default()
        }
    }

    /// A narrow configuration that trains in seconds on one core.
    pub fn desk() -> Self {
        Self {
            dim: 64,
            depth: 4,
            pmla_positions: vec![2],
            pos_hidden: 32,
            ssm: SsmConfig {
                state_dim: 8,
                dt_rank: Some(4),
                ..SsmConfig::default()
            },
            attention: AttentionConfig {
                heads: 4,
                head_dim: 16,
                latent_dim: 16,
                ..AttentionConfig::default()
            },
            patch: PatchEncoderConfig {
                hidden1: 32,
                hidden2: 64,
                hidden3: 128,
            },
            groups: 16,
            group_size: 16,
            strategy: Strategy::HilbertPair,
            curve_bits: 10,
        }
    }

    /// Sequence length seen by the stack.
    pub fn seq_len(&self) -> usize {
        self.groups * self.strategy.copies()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.depth == 0 || self.pos_hidden == 0 {
            return Err(Error::Config("encoder dim, depth and pos_hidden must be positive".into()));
        }
        if self.groups == 0 || self.group_size == 0 {
            return Err(Error::Config("groups and group_size must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for &p in &self.pmla_positions {
            if p >= self.depth {
                return Err(Error::Config(format!(
                    "pmla position {p} outside [0, {}) for depth {}",
                    self.depth, self.depth
                )));
            }
            if !seen.insert(p) {
                return Err(Error::Config(format!("pmla position {p} listed twice")));
            }
        }
        if !(1..=crate::serialization::MAX_BITS).contains(&self.curve_bits) {
            return Err(Error::Config(format!("curve_bits must be in 1..=20, got {}", self.curve_bits)));
        }
        self.ssm.validate()?;
        self.attention.validate()
    }
}

/// Where a single latent-attention block goes in a stack of `depth` layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Early,
    Middle,
    Late,
}

impl Placement {
    /// `1`, `depth / 2` and `depth − 2`; `{1, 6, 10}` at depth 12.
    pub fn index(self, depth: usize) -> usize {
        match self {
            Placement::Early => 1.min(depth - 1),
            Placement::Middle => depth / 2,
            Placement::Late => depth.saturating_sub(2),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Mamba(MambaBlock),
    Latent(LatentBlock),
}

impl Layer {
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Layer::Mamba(b) => b.forward(g, ps, x),
            Layer::Latent(b) => b.forward(g, ps, x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Mamba(b) => b.param_count(),
            Layer::Latent(b) => b.param_count(),
        }
    }

    pub fn flops(&self, len: usize) -> u64 {
        match self {
            Layer::Mamba(b) => b.flops(len),
            Layer::Latent(b) => b.flops(len),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: PatchEncoder,
    pub pos_embed: Mlp,
    pub layers: Vec<Layer>,
    pub norm_f: Norm,
}

/// Breakdown of learnable scalars.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub patch_embed: usize,
    pub pos_embed: usize,
    pub order_scale: usize,
    pub mamba_layers: usize,
    pub latent_layers: usize,
    pub final_norm: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.patch_embed + self.pos_embed + self.order_scale + self.mamba_layers + self.latent_layers + self.final_norm
    }
}

/// Analytic operation counts for one cloud (multiply-add = 2).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub seq_len: usize,
    /// Order scale, positional MLP, every layer and the final norm.
    pub backbone: u64,
    pub patch_embed: u64,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.depth)
            .map(|i| {
                let name = format!("layers.{i}");
                if cfg.pmla_positions.contains(&i) {
                    Layer::Latent(LatentBlock::new(&name, cfg.dim, &cfg.attention))
                } else {
                    Layer::Mamba(MambaBlock::new(&name, cfg.dim, &cfg.ssm))
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: PatchEncoder::new("patch_embed", &cfg.patch, cfg.dim),
            pos_embed: Mlp::new("pos_embed", 3, cfg.pos_hidden, cfg.dim),
            layers,
            norm_f: Norm::new("norm_f", cfg.dim),
        })
    }

    /// Builds the encoder and a deterministically initialized store.
    pub fn build(cfg: &EncoderConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let enc = Self::new(cfg)?;
        let mut ps = ParamStore::new();
        enc.init(&mut ps, seed)?;
        Ok((enc, ps))
    }

    pub fn init(&self, ps: &mut ParamStore, seed: u64) -> Result<()> {
        self.patch_embed.init(ps, seed)?;
        self.pos_embed.init(ps, seed)?;
        init_order_scale(ps, ORDER_SCALE, self.cfg.dim)?;
        for l in &self.layers {
            match l {
                Layer::Mamba(b) => b.init(ps, seed)?,
                Layer::Latent(b) => b.init(ps, seed)?,
            }
        }
        self.norm_f.init(ps)
    }

    pub fn num_latent_layers(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Latent(_))).count()
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// `[B, G, S, 3]` neighborhoods → `[B, G, D]` patch tokens.
    pub fn embed_patches(&self, g: &mut Graph, ps: &ParamStore, neighborhoods: Var) -> Result<Var> {
        self.patch_embed.forward(g, ps, neighborhoods)
    }

    /// Lays patch tokens `[B, G, D]` out as sequences `[B, T, D]`.
    pub fn arrange(&self, g: &mut Graph, tokens: Var, plans: &[SequencePlan]) -> Result<Var> {
        let idx: Vec<Vec<usize>> = plans.iter().map(|p| p.index.clone()).collect();
        g.gather_batched(tokens, &idx)
    }

    /// Order scaling plus positional embedding of `centers: [B, T, 3]`.
    pub fn embed_sequence(&self, g: &mut Graph, ps: &ParamStore, seq: Var, centers: Var, order_ids: &[OrderId]) -> Result<Var> {
        let x = order_scale(g, ps, ORDER_SCALE, seq, order_ids)?;
        let pos = self.pos_embed.forward(g, ps, centers)?;
        g.add(x, pos)
    }

    /// Runs the stack and final norm, returning the inputs of every layer too.
    pub fn run_layers_traced(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for l in &self.layers {
            inputs.push(h);
            h = l.forward(g, ps, h)?;
        }
        Ok((self.norm_f.forward(g, ps, h)?, inputs))
    }

    pub fn run_layers(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.run_layers_traced(g, ps, x)?.0)
    }

    /// Full sequence encoding: embedding then the stack. `seq: [B, T, D]`.
    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, seq: Var, centers: Var, order_ids: &[OrderId]) -> Result<Var> {
        let x = self.embed_sequence(g, ps, seq, centers, order_ids)?;
        self.run_layers(g, ps, x)
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let mut b = ParamBreakdown {
            patch_embed: self.patch_embed.param_count(),
            pos_embed: self.pos_embed.param_count(),
            order_scale: 2 * self.cfg.dim * OrderId::ALL.len(),
            final_norm: self.norm_f.param_count(),
            ..ParamBreakdown::default()
        };
        for l in &self.layers {
            match l {
                Layer::Mamba(m) => b.mamba_layers += m.param_count(),
                Layer::Latent(m) => b.latent_layers += m.param_count(),
            }
        }
        b
    }

    pub fn param_count(&self) -> usize {
        self.param_breakdown().total()
    }

    /// Operation count for one cloud with `len` sequence tokens.
    pub fn flop_estimate(&self, len: usize) -> FlopReport {
        let d = self.cfg.dim;
        let embed = 2 * (len * d) as u64 + self.pos_embed.flops(len) + (len * d) as u64;
        let layers: u64 = self.layers.iter().map(|l| l.flops(len)).sum();
        FlopReport {
            seq_len: len,
            backbone: embed + layers + self.norm_f.flops(len),
            patch_embed: self.patch_embed.flops(self.cfg.groups, self.cfg.group_size),
        }
    }
}

/// `concat(max_T, mean_T) → Linear(2D → hidden) → BatchNorm → SiLU →
/// Linear(hidden → K)`.
///
/// The batch norm makes the head indifferent to the overall scale of the
/// pooled features, which differs a lot between a fresh and a pretrained
/// backbone.
#[derive(Clone, Debug)]
pub struct ClassHead {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
    pub num_classes: usize,
}

pub const CLS_HIDDEN: usize = 256;

impl ClassHead {
    pub fn new(dim: usize, num_classes: usize) -> Self {
        Self {
            fc1: Linear::new("cls_head.fc1", 2 * dim, CLS_HIDDEN, true),
            bn: BatchNorm::new("cls_head.bn", CLS_HIDDEN),
            fc2: Linear::new("cls_head.fc2", CLS_HIDDEN, num_classes, true),
            num_classes,
        }
    }

    pub fn init(&self, ps: &mut ParamStore, seed: u64) -> Result<()> {
        self.fc1.init(ps, seed)?;
        self.bn.init(ps)?;
        self.fc2.init(ps, seed)
    }

    fn pool(g: &mut Graph, features: Var) -> Result<Var> {
        let mx = g.max_axis(features, 1)?;
        let mn = g.mean_axis(features, 1)?;
        g.concat(&[mx, mn], 1)
    }

    /// `features: [B, T, D]` → logits `[B, K]` with batch statistics, which
    /// the caller folds into the running averages after the update.
    pub fn forward_train(&self, g: &mut Graph, ps: &ParamStore, features: Var) -> Result<(Var, BatchStats)> {
        let pooled = Self::pool(g, features)?;
        let h = self.fc1.forward(g, ps, pooled)?;
        let (h, stats) = self.bn.forward_train(g, ps, h)?;
        let h = g.silu(h);
        Ok((self.fc2.forward(g, ps, h)?, stats))
    }

    /// Inference with the running statistics.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, features: Var) -> Result<Var> {
        let pooled = Self::pool(g, features)?;
        let h = self.fc1.forward(g, ps, pooled)?;
        let h = self.bn.forward_eval(g, ps, h)?;
        let h = g.silu(h);
        self.fc2.forward(g, ps, h)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.bn.param_count() + self.fc2.param_count()
    }

    /// Running statistics stored alongside the parameters.
    pub fn buffer_count(&self) -> usize {
        self.bn.buffer_count()
    }
}

/// Per-point part logits. Every patch feature is the mean of the token
/// features at the positions where that patch appears; each point takes the
/// feature of its nearest center, concatenated with its coordinates, through
/// `Linear(D + 3 → hidden) → SiLU → Linear(hidden → parts)`.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub mlp: Mlp,
    pub num_parts: usize,
}

pub const SEG_HIDDEN: usize = 128;

impl SegHead {
    pub fn new(dim: usize, num_parts: usize) -> Self {
        Self {
            mlp: Mlp::new("seg_head", dim + 3, SEG_HIDDEN, num_parts),
            num_parts,
        }
    }

    pub fn init(&self, ps: &mut ParamStore, seed: u64) -> Result<()> {
        self.mlp.init(ps, seed)
    }

    /// `features: [B, T, D]` laid out by `plans` over `groups` patches;
    /// `points: [B, N, 3]`; `nearest[b][n]` is the patch owning point `n`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        features: Var,
        plans: &[SequencePlan],
        groups: usize,
        points: Var,
        nearest: &[Vec<usize>],
    ) -> Result<Var> {
        let t = g.shape(features)[1];
        if !t.is_multiple_of(groups) || plans.iter().any(|p| p.len() != t) {
            return Err(Error::Shape(format!("{t} tokens do not tile {groups} patches")));
        }
        let copies = t / groups;
        let mut per_patch = Vec::with_capacity(copies);
        for k in 0..copies {
            let seg = g.slice_axis(features, 1, k * groups, groups)?;
            let inverse: Vec<Vec<usize>> = plans
                .iter()
                .map(|p| {
                    let mut inv = vec![0; groups];
                    for (pos, &patch) in p.index[k * groups..(k + 1) * groups].iter().enumerate() {
                        inv[patch] = pos;
                    }
                    inv
                })
                .collect();
            per_patch.push(g.gather_batched(seg, &inverse)?);
        }
        let mut patch_feat = per_patch[0];
        for &p in &per_patch[1..] {
            patch_feat = g.add(patch_feat, p)?;
        }
        let patch_feat = g.scale(patch_feat, 1.0 / copies as f64);
        let point_feat = g.gather_batched(patch_feat, nearest)?;
        let h = g.concat(&[point_feat, points], 2)?;
        self.mlp.forward(g, ps, h)
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }
}

/// Index of the nearest center for every point (lowest index on ties).
pub fn nearest_center(points: &[Point], centers: &[Point]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (i, c) in centers.iter().enumerate() {
                let d = crate::pointcloud::dist2(p, c);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect()
}

/// Gathers per-position centers `[B, T, 3]` for arranged sequences.
pub fn arranged_centers(centers: &[Vec<Point>], plans: &[SequencePlan]) -> Result<Tensor> {
    let t = plans.first().map_or(0, SequencePlan::len);
    let data: Vec<f64> = centers
        .iter()
        .zip(plans)
        .flat_map(|(c, p)| p.index.iter().flat_map(move |&i| c[i]))
        .collect();
    Tensor::new(vec![plans.len(), t, 3], data)
}
