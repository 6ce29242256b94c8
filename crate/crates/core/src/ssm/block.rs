use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Norm};
use crate::params::ParamStore;
use crate::rng::{name_tag, stream};
use crate::tensor::Tensor;

/// Shape of the selective-SSM mixer inside a block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsmConfig {
    pub state_dim: usize,
    pub conv_kernel: usize,
    pub expand: usize,
    /// Rank of the Δ projection; `None` means `ceil(dim / 16)`.
    pub dt_rank: Option<usize>,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            state_dim: 16,
            conv_kernel: 4,
            expand: 2,
            dt_rank: None,
            dt_min: 1e-3,
            dt_max: 0.1,
        }
    }
}

impl SsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.conv_kernel == 0 || self.expand == 0 {
            return Err(Error::Config("ssm state_dim, conv_kernel and expand must be positive".into()));
        }
        if !(0.0 < self.dt_min && self.dt_min <= self.dt_max) {
            return Err(Error::Config(format!(
                "ssm dt range must satisfy 0 < dt_min <= dt_max, got [{}, {}]",
                self.dt_min, self.dt_max
            )));
        }
        Ok(())
    }
}

/// Pre-norm residual block:
/// `x + out_proj(scan(silu(conv(in_x))) ⊙ silu(in_z))` with `[in_x, in_z] =
/// in_proj(LN(x))`.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub name: String,
    pub dim: usize,
    pub inner: usize,
    pub state: usize,
    pub kernel: usize,
    pub dt_rank: usize,
    dt_range: (f64, f64),
    norm: Norm,
    in_proj: Linear,
    x_proj: Linear,
    dt_proj: Linear,
    out_proj: Linear,
}

impl MambaBlock {
    pub fn new(name: &str, dim: usize, cfg: &SsmConfig) -> Self {
        let inner = cfg.expand * dim;
        let dt_rank = cfg.dt_rank.unwrap_or(dim.div_ceil(16));
        let state = cfg.state_dim;
        Self {
            name: name.to_string(),
            dim,
            inner,
            state,
            kernel: cfg.conv_kernel,
            dt_rank,
            dt_range: (cfg.dt_min, cfg.dt_max),
            norm: Norm::new(format!("{name}.norm"), dim),
            in_proj: Linear::new(format!("{name}.in_proj"), dim, 2 * inner, false),
            x_proj: Linear::new(format!("{name}.x_proj"), inner, dt_rank + 2 * state, false),
            dt_proj: Linear::new(format!("{name}.dt_proj"), dt_rank, inner, true),
            out_proj: Linear::new(format!("{name}.out_proj"), inner, dim, false),
        }
    }

    fn p(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.name)
    }

    /// S4D-real state init `A[c, n] = −(n + 1)`, stored as `ln(n + 1)`;
    /// Δ bias chosen so `softplus(bias)` is log-uniform in the Δ range.
    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.norm.init(store)?;
        self.in_proj.init(store, seed)?;
        self.x_proj.init(store, seed)?;
        self.dt_proj
            .init_scaled(store, seed, 1.0 / (self.dt_rank as f64).sqrt())?;
        let (lo, hi) = (self.dt_range.0.ln(), self.dt_range.1.ln());
        let mut rng = stream(seed, &[name_tag(&self.dt_proj.bias_name())]);
        let bias = Tensor::from_fn(&[self.inner], |_| {
            let dt = if hi > lo { rng.random_range(lo..hi).exp() } else { lo.exp() };
            dt + (-(-dt).exp_m1()).ln()
        });
        store.set(self.dt_proj.bias_name(), bias);
        self.out_proj.init(store, seed)?;

        let bound = 1.0 / (self.kernel as f64).sqrt();
        let mut rng = stream(seed, &[name_tag(&self.p("conv.weight"))]);
        store.insert(
            self.p("conv.weight"),
            Tensor::from_fn(&[self.kernel, self.inner], |_| rng.random_range(-bound..bound)),
        )?;
        store.insert(self.p("conv.bias"), Tensor::zeros(&[self.inner]))?;
        let state = self.state;
        store.insert(
            self.p("a_log"),
            Tensor::from_fn(&[self.inner, state], |i| ((i % state) as f64 + 1.0).ln()),
        )?;
        store.insert(self.p("d"), Tensor::ones(&[self.inner]))
    }

    /// The residual branch only (no skip connection added).
    pub fn mixer(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, ps, x)?;
        let xz = self.in_proj.forward(g, ps, h)?;
        let xs = g.slice_axis(xz, 2, 0, self.inner)?;
        let z = g.slice_axis(xz, 2, self.inner, self.inner)?;

        let cw = g.param(ps, &self.p("conv.weight"))?;
        let cb = g.param(ps, &self.p("conv.bias"))?;
        let xc = g.depthwise_conv1d(xs, cw, Some(cb), Padding::Causal)?;
        let xc = g.silu(xc);

        let proj = self.x_proj.forward(g, ps, xc)?;
        let dt_low = g.slice_axis(proj, 2, 0, self.dt_rank)?;
        let bmat = g.slice_axis(proj, 2, self.dt_rank, self.state)?;
        let cmat = g.slice_axis(proj, 2, self.dt_rank + self.state, self.state)?;
        let dt = self.dt_proj.forward(g, ps, dt_low)?;
        let dt = g.softplus(dt);

        let a_log = g.param(ps, &self.p("a_log"))?;
        let a = g.exp(a_log);
        let a = g.scale(a, -1.0);
        let d = g.param(ps, &self.p("d"))?;
        let y = g.selective_scan(xc, dt, a, bmat, cmat, d)?;

        let gate = g.silu(z);
        let y = g.mul(y, gate)?;
        self.out_proj.forward(g, ps, y)
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let delta = self.mixer(g, ps, x)?;
        g.add(x, delta)
    }

    pub fn param_count(&self) -> usize {
        self.norm.param_count()
            + self.in_proj.param_count()
            + self.kernel * self.inner
            + self.inner
            + self.x_proj.param_count()
            + self.dt_proj.param_count()
            + self.inner * self.state
            + self.inner
            + self.out_proj.param_count()
    }

    /// Operation count for one sequence of `len` tokens. Scan cost is ten
    /// operations per (token, channel, state) element: Δ·A, exp, expm1/A,
    /// two products for B̄x, the recurrence multiply-add and the C readout
    /// multiply-add.
    pub fn flops(&self, len: usize) -> u64 {
        let (t, c, n) = (len as u64, self.inner as u64, self.state as u64);
        self.norm.flops(len)
            + self.in_proj.flops(len)
            + 2 * t * c * self.kernel as u64 + t * c
            + 4 * t * c // conv SiLU
            + self.x_proj.flops(len)
            + self.dt_proj.flops(len)
            + 4 * t * c // softplus
            + 10 * t * c * n
            + 2 * t * c // D skip
            + 5 * t * c // gate SiLU and product
            + self.out_proj.flops(len)
            + t * self.dim as u64 // residual
    }
}
