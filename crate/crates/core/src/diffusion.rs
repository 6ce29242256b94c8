//! Conditional denoising diffusion over masked token features.
//!
//! Forward kernel `q(Z_t | Z_{t−1}) = N(√(1 − β_t) Z_{t−1}, β_t I)` with the
//! closed-form marginal `Z_t = √ᾱ_t Z_0 + √(1 − ᾱ_t) ε`. The reverse step uses
//! the usual posterior mean from a noise prediction and `σ_t² = β_t`.
//!
//! The denoiser sees the whole serialized sequence: visible positions carry
//! the encoder's condition tokens, masked positions carry projected noisy
//! features. A sinusoidal timestep embedding and a positional MLP of the
//! centers are added everywhere, two state-space blocks mix the sequence, and
//! the noise estimate is read out at the masked positions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, Norm};
use crate::params::ParamStore;
use crate::rng::{name_tag, stream};
use crate::serialization::MaskRecord;
use crate::ssm::{MambaBlock, SsmConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub decoder_depth: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            decoder_depth: 2,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        Schedule::new(self.steps, self.beta_start, self.beta_end).map_err(|e| Error::Config(e.to_string()))?;
        if self.decoder_depth == 0 {
            return Err(Error::Config("decoder_depth must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step tables, indexed by `t ∈ [1, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    /// Linear β from `beta_start` to `beta_end`; ᾱ by cumulative product.
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("diffusion needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        Self::new(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::InvalidArgument(format!("timestep {t} outside [1, {}]", self.steps())))
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }
}

/// `Z_t = √ᾱ_t Z_0 + √(1 − ᾱ_t) ε`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, s: &Schedule) -> Result<Tensor> {
    s.check(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!("Z_0 {:?} vs ε {:?}", z0.shape(), eps.shape())));
    }
    let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    Tensor::new(z0.shape().to_vec(), data)
}

/// One reverse step from a noise estimate:
/// `Z_{t−1} = (Z_t − β_t/√(1 − ᾱ_t) ε̂)/√(1 − β_t) + σ_t·noise`, with the
/// noise term dropped at `t = 1`.
pub fn posterior_step(z_t: &Tensor, t: usize, eps_hat: &Tensor, s: &Schedule, noise: &Tensor) -> Result<Tensor> {
    s.check(t)?;
    if z_t.shape() != eps_hat.shape() || z_t.shape() != noise.shape() {
        return Err(Error::Shape("posterior step operands differ in shape".into()));
    }
    let beta = s.beta(t);
    let c = beta / (1.0 - s.alpha_bar(t)).sqrt();
    let inv = 1.0 / (1.0 - beta).sqrt();
    let sig = if t == 1 { 0.0 } else { s.sigma(t) };
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(noise.data())
        .map(|((z, e), n)| (z - c * e) * inv + sig * n)
        .collect();
    Tensor::new(z_t.shape().to_vec(), data)
}

/// Sinusoidal embedding of integer timesteps, `[len(ts), dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |i| {
        let (row, col) = (i / dim, i % dim);
        if col >= 2 * half {
            return 0.0;
        }
        let k = col % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = ts[row] as f64 * freq;
        if col < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Mean of `(ε̂ − ε)²` over every element.
pub fn noise_mse(g: &mut Graph, eps_hat: Var, eps: &Tensor) -> Result<Var> {
    let e = g.constant(eps.clone());
    let d = g.sub(eps_hat, e)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Slot roles of one batch: per cloud, the visible and masked positions.
#[derive(Clone, Debug)]
pub struct SlotLayout {
    pub visible: Vec<Vec<usize>>,
    pub masked: Vec<Vec<usize>>,
    pub len: usize,
}

impl SlotLayout {
    pub fn from_masks(masks: &[MaskRecord]) -> Result<Self> {
        let len = masks.first().map_or(0, |m| m.masked.len());
        let visible: Vec<Vec<usize>> = masks.iter().map(MaskRecord::visible_indices).collect();
        let masked: Vec<Vec<usize>> = masks.iter().map(MaskRecord::masked_indices).collect();
        if masks.iter().any(|m| m.masked.len() != len) {
            return Err(Error::Shape("masks differ in length".into()));
        }
        if masked.iter().any(|m| m.len() != masked[0].len()) {
            return Err(Error::Shape("masks differ in masked count".into()));
        }
        if masked.first().is_none_or(Vec::is_empty) {
            return Err(Error::InvalidArgument("denoiser needs at least one masked slot".into()));
        }
        if visible[0].is_empty() {
            return Err(Error::InvalidArgument("denoiser needs at least one visible slot".into()));
        }
        Ok(Self { visible, masked, len })
    }

    pub fn num_masked(&self) -> usize {
        self.masked[0].len()
    }

    pub fn num_visible(&self) -> usize {
        self.visible[0].len()
    }

    /// For each position, its row in `concat(visible, masked)`.
    fn assembly(&self) -> Vec<Vec<usize>> {
        let v = self.num_visible();
        self.visible
            .iter()
            .zip(&self.masked)
            .map(|(vis, msk)| {
                let mut idx = vec![0; self.len];
                for (k, &p) in vis.iter().enumerate() {
                    idx[p] = k;
                }
                for (k, &p) in msk.iter().enumerate() {
                    idx[p] = v + k;
                }
                idx
            })
            .collect()
    }
}

/// Learned vector added at every masked slot so the decoder can tell noisy
/// slots from condition slots.
pub const MASK_TOKEN: &str = "denoiser.mask_token";

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub dim: usize,
    pub time_mlp: Mlp,
    pub pos_mlp: Mlp,
    /// Maps encoder output into the decoder's space.
    pub cond_proj: Linear,
    pub in_proj: Linear,
    pub blocks: Vec<MambaBlock>,
    pub norm: Norm,
    pub out: Linear,
}

impl Denoiser {
    pub fn new(dim: usize, pos_hidden: usize, depth: usize, ssm: &SsmConfig) -> Self {
        Self {
            dim,
            time_mlp: Mlp::new("denoiser.time_mlp", dim, dim, dim),
            pos_mlp: Mlp::new("denoiser.pos_mlp", 3, pos_hidden, dim),
            cond_proj: Linear::new("denoiser.cond_proj", dim, dim, true),
            in_proj: Linear::new("denoiser.in_proj", dim, dim, true),
            blocks: (0..depth)
                .map(|i| MambaBlock::new(&format!("denoiser.blocks.{i}"), dim, ssm))
                .collect(),
            norm: Norm::new("denoiser.norm", dim),
            out: Linear::new("denoiser.out", dim, dim, true),
        }
    }

    pub fn init(&self, ps: &mut ParamStore, seed: u64) -> Result<()> {
        self.time_mlp.init(ps, seed)?;
        self.pos_mlp.init(ps, seed)?;
        self.cond_proj.init(ps, seed)?;
        self.in_proj.init(ps, seed)?;
        let mut rng = stream(seed, &[name_tag(MASK_TOKEN)]);
        ps.insert(
            MASK_TOKEN,
            Tensor::from_fn(&[self.dim], |_| 0.02 * rng.sample::<f64, _>(StandardNormal)),
        )?;
        for b in &self.blocks {
            b.init(ps, seed)?;
        }
        self.norm.init(ps)?;
        self.out.init(ps, seed)
    }

    pub fn param_count(&self) -> usize {
        self.time_mlp.param_count()
            + self.pos_mlp.param_count()
            + self.cond_proj.param_count()
            + self.in_proj.param_count()
            + self.dim
            + self.blocks.iter().map(MambaBlock::param_count).sum::<usize>()
            + self.norm.param_count()
            + self.out.param_count()
    }

    /// `z_t: [B, M, D]` noisy features at the masked slots, `cond: [B, V, D]`
    /// condition tokens at the visible slots, `centers: [B, T, 3]` for every
    /// position, `ts` one timestep per sequence. Returns `ε̂: [B, M, D]`.
    pub fn predict(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        z_t: Var,
        ts: &[usize],
        cond: Var,
        centers: Var,
        slots: &SlotLayout,
    ) -> Result<Var> {
        let (zs, cs) = (g.shape(z_t).to_vec(), g.shape(cond).to_vec());
        let b = ts.len();
        if zs.len() != 3 || zs[0] != b || zs[1] != slots.num_masked() || cs[..2] != [b, slots.num_visible()] {
            return Err(Error::Shape(format!(
                "denoiser inputs Z_t {zs:?}, cond {cs:?} do not match {b} sequences with {} masked / {} visible slots",
                slots.num_masked(),
                slots.num_visible()
            )));
        }
        let noisy = self.in_proj.forward(g, ps, z_t)?;
        let marker = g.param(ps, MASK_TOKEN)?;
        let noisy = g.add(noisy, marker)?;
        let cond = self.cond_proj.forward(g, ps, cond)?;
        let both = g.concat(&[cond, noisy], 1)?;
        let seq = g.gather_batched(both, &slots.assembly())?;

        let temb = g.constant(timestep_embedding(ts, self.dim));
        let temb = self.time_mlp.forward(g, ps, temb)?;
        let temb = g.expand_axis(temb, 1, slots.len)?;
        let pos = self.pos_mlp.forward(g, ps, centers)?;
        let mut h = g.add(seq, temb)?;
        h = g.add(h, pos)?;
        for blk in &self.blocks {
            h = blk.forward(g, ps, h)?;
        }
        let h = self.norm.forward(g, ps, h)?;
        let h = g.gather_batched(h, &slots.masked)?;
        self.out.forward(g, ps, h)
    }

    /// Network noise estimate followed by [`posterior_step`].
    #[allow(clippy::too_many_arguments)]
    pub fn p_sample_step(
        &self,
        ps: &ParamStore,
        z_t: &Tensor,
        t: usize,
        cond: &Tensor,
        centers: &Tensor,
        slots: &SlotLayout,
        schedule: &Schedule,
        noise: &Tensor,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.constant(z_t.clone());
        let c = g.constant(cond.clone());
        let p = g.constant(centers.clone());
        let ts = vec![t; z_t.shape()[0]];
        let eps = self.predict(&mut g, ps, z, &ts, c, p, slots)?;
        posterior_step(z_t, t, g.value(eps), schedule, noise)
    }
}
