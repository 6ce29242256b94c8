//! Mini-PointNet patch embedding.
//!
//! Per point: `3 → h1 → h2` shared MLP, channel max-pool over the patch,
//! pooled vector concatenated back onto every point (`2·h2`), second shared
//! MLP `2·h2 → h3 → LayerNorm → out`, final max-pool. The norm keeps tokens
//! at unit scale although relative patch coordinates are around 0.1. Max-pooling makes the token
//! exactly invariant to the order of points inside a patch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::nn::{Linear, Norm};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchEncoderConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub hidden3: usize,
}

impl Default for PatchEncoderConfig {
    fn default() -> Self {
        Self {
            hidden1: 128,
            hidden2: 256,
            hidden3: 512,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PatchEncoder {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    norm: Norm,
    fc4: Linear,
    pub out_dim: usize,
}

impl PatchEncoder {
    pub fn new(name: &str, cfg: &PatchEncoderConfig, out_dim: usize) -> Self {
        Self {
            fc1: Linear::new(format!("{name}.fc1"), 3, cfg.hidden1, true),
            fc2: Linear::new(format!("{name}.fc2"), cfg.hidden1, cfg.hidden2, true),
            fc3: Linear::new(format!("{name}.fc3"), 2 * cfg.hidden2, cfg.hidden3, true),
            norm: Norm::new(format!("{name}.norm"), cfg.hidden3),
            fc4: Linear::new(format!("{name}.fc4"), cfg.hidden3, out_dim, true),
            out_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        for l in [&self.fc1, &self.fc2, &self.fc3, &self.fc4] {
            l.init(store, seed)?;
        }
        self.norm.init(store)
    }

    /// `neighborhoods: [B, G, S, 3]` → tokens `[B, G, out_dim]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, neighborhoods: Var) -> Result<Var> {
        let s = g.shape(neighborhoods).to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(shape_err!("patch encoder expects [B, G, S, 3], got {s:?}"));
        }
        let (b, gg, n) = (s[0], s[1], s[2]);
        let x = g.reshape(neighborhoods, &[b * gg, n, 3])?;
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.silu(h);
        let f = self.fc2.forward(g, ps, h)?;
        let pooled = g.max_axis(f, 1)?;
        let pooled = g.expand_axis(pooled, 1, n)?;
        let h = g.concat(&[pooled, f], 2)?;
        let h = self.fc3.forward(g, ps, h)?;
        let h = self.norm.forward(g, ps, h)?;
        let h = g.silu(h);
        let h = self.fc4.forward(g, ps, h)?;
        let tok = g.max_axis(h, 1)?;
        g.reshape(tok, &[b, gg, self.out_dim])
    }

    pub fn param_count(&self) -> usize {
        [&self.fc1, &self.fc2, &self.fc3, &self.fc4]
            .iter()
            .map(|l| l.param_count())
            .sum::<usize>()
            + self.norm.param_count()
    }

    /// Cost of embedding `patches` patches of `points` points each.
    pub fn flops(&self, patches: usize, points: usize) -> u64 {
        let rows = patches * points;
        let act = 4 * rows as u64 * (self.fc1.d_out + self.fc3.d_out) as u64;
        let pools = (rows * (self.fc2.d_out + self.out_dim)) as u64;
        self.fc1.flops(rows) + self.fc2.flops(rows) + self.fc3.flops(rows) + self.fc4.flops(rows) + self.norm.flops(rows) + act + pools
    }
}
