//! Small parameterized building blocks shared by the larger modules.

use rand::Rng;

use crate::autodiff::{Graph, Var, LN_EPS};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::rng::{name_tag, stream};
use crate::tensor::Tensor;

/// Affine map over the last dimension: `x W + b`, `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Uniform(±1/√d_in) weights, zero bias.
    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let bound = 1.0 / (self.d_in as f64).sqrt();
        self.init_scaled(store, seed, bound)
    }

    pub fn init_scaled(&self, store: &mut ParamStore, seed: u64, bound: f64) -> Result<()> {
        let wn = self.weight_name();
        let mut rng = stream(seed, &[name_tag(&wn)]);
        let w = if bound == 0.0 {
            Tensor::zeros(&[self.d_in, self.d_out])
        } else {
            Tensor::from_fn(&[self.d_in, self.d_out], |_| rng.random_range(-bound..bound))
        };
        store.insert(wn, w)?;
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.d_out]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, &self.weight_name())?;
        let y = g.matmul(x, w)?;
        if self.bias {
            let b = g.param(ps, &self.bias_name())?;
            g.add(y, b)
        } else {
            Ok(y)
        }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias { self.d_out } else { 0 }
    }

    /// Multiply-add cost counted as two operations, plus the bias add.
    pub fn flops(&self, rows: usize) -> u64 {
        let rows = rows as u64;
        2 * rows * (self.d_in * self.d_out) as u64 + if self.bias { rows * self.d_out as u64 } else { 0 }
    }
}

/// Layer normalization with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub name: String,
    pub dim: usize,
}

impl Norm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&[self.dim]))?;
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.dim]))
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(ps, &format!("{}.gamma", self.name))?;
        let beta = g.param(ps, &format!("{}.beta", self.name))?;
        g.layer_norm(x, Some(gamma), Some(beta))
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    /// Mean, variance, normalize and affine: about eight operations per element.
    pub fn flops(&self, rows: usize) -> u64 {
        8 * (rows * self.dim) as u64
    }
}

/// Batch statistics of one training forward pass. `var` is unbiased.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization over the rows of `[N, F]`.
///
/// Training normalizes with the statistics of the batch itself and hands
/// them back so the caller can fold them into the running averages with
/// [`BatchNorm::update`]; evaluation reads the running averages only.
/// `running_mean` and `running_var` live in the store next to the affine
/// parameters but never receive gradients.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub dim: usize,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }

    fn key(&self, what: &str) -> String {
        format!("{}.{what}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(self.key("gamma"), Tensor::ones(&[self.dim]))?;
        store.insert(self.key("beta"), Tensor::zeros(&[self.dim]))?;
        store.insert(self.key("running_mean"), Tensor::zeros(&[self.dim]))?;
        store.insert(self.key("running_var"), Tensor::ones(&[self.dim]))
    }

    pub fn is_buffer(name: &str) -> bool {
        name.ends_with(".running_mean") || name.ends_with(".running_var")
    }

    fn check(&self, shape: &[usize], min_rows: usize) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.dim || shape[0] < min_rows {
            return Err(shape_err!(
                "batch norm `{}` expects [N >= {min_rows}, {}], got {shape:?}",
                self.name,
                self.dim
            ));
        }
        Ok(())
    }

    pub fn forward_train(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<(Var, BatchStats)> {
        let shape = g.shape(x).to_vec();
        self.check(&shape, 2)?;
        let n = shape[0];
        let xv = g.value(x);
        let mut mean = vec![0.0; self.dim];
        for row in xv.data().chunks(self.dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; self.dim];
        for row in xv.data().chunks(self.dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / (n - 1) as f64;
            }
        }
        let t = g.transpose_last2(x)?;
        let z = g.layer_norm(t, None, None)?;
        let z = g.transpose_last2(z)?;
        Ok((self.affine(g, ps, z)?, BatchStats { mean, var }))
    }

    pub fn forward_eval(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        self.check(g.shape(x), 1)?;
        let mean = ps.get(&self.key("running_mean")).ok_or_else(|| Error::MissingParam(self.key("running_mean")))?.clone();
        let inv = ps.get(&self.key("running_var")).ok_or_else(|| Error::MissingParam(self.key("running_var")))?.map(|v| 1.0 / (v + LN_EPS).sqrt());
        let m = g.constant(mean);
        let s = g.constant(inv);
        let z = g.sub(x, m)?;
        let z = g.mul(z, s)?;
        self.affine(g, ps, z)
    }

    fn affine(&self, g: &mut Graph, ps: &ParamStore, z: Var) -> Result<Var> {
        let gamma = g.param(ps, &self.key("gamma"))?;
        let beta = g.param(ps, &self.key("beta"))?;
        let y = g.mul(z, gamma)?;
        g.add(y, beta)
    }

    /// Exponential moving average with weight [`BN_MOMENTUM`] on the batch.
    pub fn update(&self, store: &mut ParamStore, stats: &BatchStats) -> Result<()> {
        for (what, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let key = self.key(what);
            let run = store.get_mut(&key).ok_or_else(|| Error::MissingParam(key.clone()))?;
            if run.len() != batch.len() {
                return Err(shape_err!("`{key}` has {} entries, batch statistics {}", run.len(), batch.len()));
            }
            for (r, b) in run.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    pub fn buffer_count(&self) -> usize {
        2 * self.dim
    }

    pub fn flops(&self, rows: usize) -> u64 {
        4 * (rows * self.dim) as u64
    }
}

/// Two linear layers with SiLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            fc1: Linear::new(format!("{name}.fc1"), d_in, hidden, true),
            fc2: Linear::new(format!("{name}.fc2"), hidden, d_out, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.fc1.init(store, seed)?;
        self.fc2.init(store, seed)
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.silu(h);
        self.fc2.forward(g, ps, h)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn flops(&self, rows: usize) -> u64 {
        self.fc1.flops(rows) + self.fc2.flops(rows) + 4 * (rows * self.fc1.d_out) as u64
    }
}
