//! Latent attention: the point-wise gated latent attention module (PMLA),
//! the block wrapping it, a standard multi-head attention alternative, and a
//! low-rank reference attention used as a structural oracle.
//!
//! PMLA builds queries with a depthwise temporal convolution (kernel 3,
//! centered) followed by a pointwise projection. Keys and values live in an
//! `r`-dimensional latent space, gated by a sigmoid:
//! `K' = MLP_K(x) ⊙ σ(W_K x)`, `V' = MLP_V(x) ⊙ σ(W_V x)`. Each head sees
//! `K' U_K`, `V' U_V` through bias-free up-projections, and scores are scaled
//! by `1/√r`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, Norm};
use crate::params::ParamStore;
use crate::rng::{name_tag, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Pmla,
    Mha,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub heads: usize,
    pub head_dim: usize,
    pub latent_dim: usize,
    pub q_kernel: usize,
    /// Hidden width of the feed-forward layer as a multiple of the model width.
    pub ffn_mult: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            kind: AttentionKind::Pmla,
            heads: 6,
            head_dim: 64,
            latent_dim: 48,
            q_kernel: 3,
            ffn_mult: 4,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.latent_dim == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("attention heads, head_dim, latent_dim and ffn_mult must be positive".into()));
        }
        if self.q_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("q_kernel must be odd, got {}", self.q_kernel)));
        }
        Ok(())
    }
}

/// Attention output with the weights kept for inspection.
pub struct AttentionOutput {
    pub out: Var,
    /// `[B, heads, T, T]`, rows sum to one.
    pub weights: Var,
}

/// Splits heads, attends, merges: `q, k, v: [B, T, h·d]` → `[B, T, h·d]`.
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<AttentionOutput> {
    let s = g.shape(q).to_vec();
    let (b, t, hd) = (s[0], s[1], s[2]);
    if hd % heads != 0 {
        return Err(Error::Shape(format!("width {hd} not divisible by {heads} heads")));
    }
    let d = hd / heads;
    let mut split = |x: Var| -> Result<Var> {
        let x = g.reshape(x, &[b, t, heads, d])?;
        g.permute(x, &[0, 2, 1, 3])
    };
    let (qh, kh, vh) = (split(q)?, split(k)?, split(v)?);
    let kt = g.transpose_last2(kh)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, scale);
    let weights = g.softmax_lastdim(scores);
    let o = g.matmul(weights, vh)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let out = g.reshape(o, &[b, t, hd])?;
    Ok(AttentionOutput { out, weights })
}

#[derive(Clone, Debug)]
pub struct Pmla {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub latent: usize,
    pub q_kernel: usize,
    pub q_proj: Linear,
    pub k_mlp: Mlp,
    pub v_mlp: Mlp,
    pub k_gate: Linear,
    pub v_gate: Linear,
    pub k_up: Linear,
    pub v_up: Linear,
    pub out: Linear,
}

/// Intermediate latent tensors of one PMLA pass.
pub struct PmlaTrace {
    pub attention: AttentionOutput,
    /// Gated latent keys `K'`, `[B, T, r]`.
    pub k_latent: Var,
    pub v_latent: Var,
    /// `σ(W_K x)`, `[B, T, r]`.
    pub k_gate: Var,
}

impl Pmla {
    pub fn new(name: &str, dim: usize, cfg: &AttentionConfig) -> Self {
        let (r, h) = (cfg.latent_dim, cfg.heads * cfg.head_dim);
        Self {
            name: name.to_string(),
            dim,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            latent: r,
            q_kernel: cfg.q_kernel,
            q_proj: Linear::new(format!("{name}.q_proj"), dim, h, true),
            k_mlp: Mlp::new(&format!("{name}.k_mlp"), dim, r, r),
            v_mlp: Mlp::new(&format!("{name}.v_mlp"), dim, r, r),
            k_gate: Linear::new(format!("{name}.k_gate"), dim, r, true),
            v_gate: Linear::new(format!("{name}.v_gate"), dim, r, true),
            k_up: Linear::new(format!("{name}.k_up"), r, h, false),
            v_up: Linear::new(format!("{name}.v_up"), r, h, false),
            out: Linear::new(format!("{name}.out"), h, dim, true),
        }
    }

    pub fn q_conv_names(&self) -> (String, String) {
        (format!("{}.q_conv.weight", self.name), format!("{}.q_conv.bias", self.name))
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let (wn, bn) = self.q_conv_names();
        let bound = 1.0 / (self.q_kernel as f64).sqrt();
        let mut rng = stream(seed, &[name_tag(&wn)]);
        store.insert(
            wn,
            Tensor::from_fn(&[self.q_kernel, self.dim], |_| rng.random_range(-bound..bound)),
        )?;
        store.insert(bn, Tensor::zeros(&[self.dim]))?;
        self.q_proj.init(store, seed)?;
        self.k_mlp.init(store, seed)?;
        self.v_mlp.init(store, seed)?;
        self.k_gate.init(store, seed)?;
        self.v_gate.init(store, seed)?;
        self.k_up.init(store, seed)?;
        self.v_up.init(store, seed)?;
        self.out.init(store, seed)
    }

    /// Query construction only: depthwise temporal conv then projection.
    pub fn queries(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let (wn, bn) = self.q_conv_names();
        let w = g.param(ps, &wn)?;
        let b = g.param(ps, &bn)?;
        let q = g.depthwise_conv1d(x, w, Some(b), Padding::Same)?;
        self.q_proj.forward(g, ps, q)
    }

    pub fn trace(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<PmlaTrace> {
        let q = self.queries(g, ps, x)?;
        let kl = self.k_mlp.forward(g, ps, x)?;
        let kg = self.k_gate.forward(g, ps, x)?;
        let kg = g.sigmoid(kg);
        let k_latent = g.mul(kl, kg)?;
        let vl = self.v_mlp.forward(g, ps, x)?;
        let vg = self.v_gate.forward(g, ps, x)?;
        let vg = g.sigmoid(vg);
        let v_latent = g.mul(vl, vg)?;
        let k = self.k_up.forward(g, ps, k_latent)?;
        let v = self.v_up.forward(g, ps, v_latent)?;
        let att = multi_head_attention(g, q, k, v, self.heads, 1.0 / (self.latent as f64).sqrt())?;
        let out = self.out.forward(g, ps, att.out)?;
        Ok(PmlaTrace {
            attention: AttentionOutput {
                out,
                weights: att.weights,
            },
            k_latent,
            v_latent,
            k_gate: kg,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<AttentionOutput> {
        Ok(self.trace(g, ps, x)?.attention)
    }

    pub fn param_count(&self) -> usize {
        self.q_kernel * self.dim
            + self.dim
            + self.q_proj.param_count()
            + self.k_mlp.param_count()
            + self.v_mlp.param_count()
            + self.k_gate.param_count()
            + self.v_gate.param_count()
            + self.k_up.param_count()
            + self.v_up.param_count()
            + self.out.param_count()
    }

    pub fn flops(&self, len: usize) -> u64 {
        let (t, r) = (len as u64, self.latent as u64);
        let conv = 2 * t * (self.q_kernel * self.dim) as u64 + t * self.dim as u64;
        let gates = 2 * (self.k_gate.flops(len) + 5 * t * r); // sigmoid and product
        conv + self.q_proj.flops(len)
            + self.k_mlp.flops(len)
            + self.v_mlp.flops(len)
            + gates
            + self.k_up.flops(len)
            + self.v_up.flops(len)
            + attention_core_flops(len, self.heads, self.head_dim)
            + self.out.flops(len)
    }
}

/// Scores, softmax (about five operations per weight) and weighted sum.
pub fn attention_core_flops(len: usize, heads: usize, head_dim: usize) -> u64 {
    let (t, h, d) = (len as u64, heads as u64, head_dim as u64);
    2 * h * t * t * d + 5 * h * t * t + 2 * h * t * t * d
}

/// Standard multi-head attention scaled by `1/√d_h`. The key projection has
/// no bias: a key bias shifts every score in a row equally and cancels in the
/// softmax.
#[derive(Clone, Debug)]
pub struct Mha {
    pub heads: usize,
    pub head_dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Mha {
    pub fn new(name: &str, dim: usize, cfg: &AttentionConfig) -> Self {
        let h = cfg.heads * cfg.head_dim;
        Self {
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            q: Linear::new(format!("{name}.q"), dim, h, true),
            k: Linear::new(format!("{name}.k"), dim, h, false),
            v: Linear::new(format!("{name}.v"), dim, h, true),
            out: Linear::new(format!("{name}.out"), h, dim, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(store, seed)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<AttentionOutput> {
        let q = self.q.forward(g, ps, x)?;
        let k = self.k.forward(g, ps, x)?;
        let v = self.v.forward(g, ps, x)?;
        let att = multi_head_attention(g, q, k, v, self.heads, 1.0 / (self.head_dim as f64).sqrt())?;
        let out = self.out.forward(g, ps, att.out)?;
        Ok(AttentionOutput {
            out,
            weights: att.weights,
        })
    }

    pub fn param_count(&self) -> usize {
        [&self.q, &self.k, &self.v, &self.out].iter().map(|l| l.param_count()).sum()
    }

    pub fn flops(&self, len: usize) -> u64 {
        self.q.flops(len)
            + self.k.flops(len)
            + self.v.flops(len)
            + attention_core_flops(len, self.heads, self.head_dim)
            + self.out.flops(len)
    }
}

/// Low-rank multi-head attention without biases:
/// `Q = X W_Q`, `K = X W_K^a W_K^b`, `V = X W_V^a W_V^b`, head outputs mapped
/// back by their row block `W_O,i` of `W_O: [h·d, D]` and summed.
#[derive(Clone, Debug)]
pub struct MlaReference {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub rank: usize,
}

impl MlaReference {
    pub fn p(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let h = self.heads * self.head_dim;
        let shapes = [
            ("w_q", [self.dim, h]),
            ("w_ka", [self.dim, self.rank]),
            ("w_kb", [self.rank, h]),
            ("w_va", [self.dim, self.rank]),
            ("w_vb", [self.rank, h]),
            ("w_o", [h, self.dim]),
        ];
        for (leaf, [rows, cols]) in shapes {
            let name = self.p(leaf);
            let bound = 1.0 / (rows as f64).sqrt();
            let mut rng = stream(seed, &[name_tag(&name)]);
            store.insert(name, Tensor::from_fn(&[rows, cols], |_| rng.random_range(-bound..bound)))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<AttentionOutput> {
        let mut w = |leaf: &str| g.param(ps, &self.p(leaf));
        let (wq, wka, wkb, wva, wvb, wo) = (w("w_q")?, w("w_ka")?, w("w_kb")?, w("w_va")?, w("w_vb")?, w("w_o")?);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wka)?;
        let k = g.matmul(k, wkb)?;
        let v = g.matmul(x, wva)?;
        let v = g.matmul(v, wvb)?;
        let att = multi_head_attention(g, q, k, v, self.heads, 1.0 / (self.head_dim as f64).sqrt())?;
        let out = g.matmul(att.out, wo)?;
        Ok(AttentionOutput {
            out,
            weights: att.weights,
        })
    }
}

#[derive(Clone, Debug)]
pub enum AttentionModule {
    Pmla(Pmla),
    Mha(Mha),
}

/// Pre-norm residual block: `h = x + Attn(LN(x))`, `y = h + FFN(LN(h))`.
#[derive(Clone, Debug)]
pub struct LatentBlock {
    pub name: String,
    pub dim: usize,
    pub norm1: Norm,
    pub attn: AttentionModule,
    pub norm2: Norm,
    pub ffn: Mlp,
}

impl LatentBlock {
    pub fn new(name: &str, dim: usize, cfg: &AttentionConfig) -> Self {
        let attn_name = format!("{name}.attn");
        Self {
            name: name.to_string(),
            dim,
            norm1: Norm::new(format!("{name}.norm1"), dim),
            attn: match cfg.kind {
                AttentionKind::Pmla => AttentionModule::Pmla(Pmla::new(&attn_name, dim, cfg)),
                AttentionKind::Mha => AttentionModule::Mha(Mha::new(&attn_name, dim, cfg)),
            },
            norm2: Norm::new(format!("{name}.norm2"), dim),
            ffn: Mlp::new(&format!("{name}.ffn"), dim, cfg.ffn_mult * dim, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.norm1.init(store)?;
        match &self.attn {
            AttentionModule::Pmla(m) => m.init(store, seed)?,
            AttentionModule::Mha(m) => m.init(store, seed)?,
        }
        self.norm2.init(store)?;
        self.ffn.init(store, seed)
    }

    pub fn attend(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<AttentionOutput> {
        let h = self.norm1.forward(g, ps, x)?;
        match &self.attn {
            AttentionModule::Pmla(m) => m.forward(g, ps, h),
            AttentionModule::Mha(m) => m.forward(g, ps, h),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let a = self.attend(g, ps, x)?;
        let h = g.add(x, a.out)?;
        let f = self.norm2.forward(g, ps, h)?;
        let f = self.ffn.forward(g, ps, f)?;
        g.add(h, f)
    }

    pub fn attention_param_count(&self) -> usize {
        match &self.attn {
            AttentionModule::Pmla(m) => m.param_count(),
            AttentionModule::Mha(m) => m.param_count(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.norm1.param_count() + self.attention_param_count() + self.norm2.param_count() + self.ffn.param_count()
    }

    pub fn flops(&self, len: usize) -> u64 {
        let attn = match &self.attn {
            AttentionModule::Pmla(m) => m.flops(len),
            AttentionModule::Mha(m) => m.flops(len),
        };
        self.norm1.flops(len) + attn + self.norm2.flops(len) + self.ffn.flops(len) + 2 * (len * self.dim) as u64
    }
}

/// Per latent channel Pearson correlation, over every (batch, position),
/// between the gated state readout `σ(W_K x_t) ⊙ MLP_K(s_t)` and
/// `MLP_K(PMLA(x)_t)`, where `s` is the state-space readout feeding the block.
/// Diagnostic only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub tokens: usize,
    pub correlations: Vec<f64>,
    pub mean_abs_correlation: f64,
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// `x`: block input, `state_readout`: the preceding state-space mixer output
/// at the same positions (both `[B, T, D]`).
pub fn gate_state_probe(block: &LatentBlock, ps: &ParamStore, x: &Tensor, state_readout: &Tensor) -> Result<ProbeReport> {
    let AttentionModule::Pmla(pmla) = &block.attn else {
        return Err(Error::InvalidArgument("gate-state probe needs a PMLA block".into()));
    };
    if x.shape() != state_readout.shape() {
        return Err(Error::Shape(format!("probe inputs {:?} vs {:?}", x.shape(), state_readout.shape())));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let sv = g.constant(state_readout.clone());
    let h = block.norm1.forward(&mut g, ps, xv)?;
    let tr = pmla.trace(&mut g, ps, h)?;
    let s_lat = pmla.k_mlp.forward(&mut g, ps, sv)?;
    let lhs = g.mul(tr.k_gate, s_lat)?;
    let rhs = pmla.k_mlp.forward(&mut g, ps, tr.attention.out)?;
    let (l, r) = (g.value(lhs), g.value(rhs));
    let c = pmla.latent;
    let n = l.len() / c;
    let correlations: Vec<f64> = (0..c)
        .map(|ch| {
            let a: Vec<f64> = (0..n).map(|i| l.data()[i * c + ch]).collect();
            let b: Vec<f64> = (0..n).map(|i| r.data()[i * c + ch]).collect();
            pearson(&a, &b)
        })
        .collect();
    let mean_abs_correlation = correlations.iter().map(|v| v.abs()).sum::<f64>() / c as f64;
    Ok(ProbeReport {
        tokens: n,
        correlations,
        mean_abs_correlation,
    })
}

#[cfg(test)]
mod tests;
