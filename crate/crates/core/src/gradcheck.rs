//! Central finite-difference gradient verification.
//!
//! Evaluates the scalar function at `x ± h` per element and compares with
//! the reverse-mode gradient. Relative error uses a floored denominator:
//! `|g_analytic − g_numeric| / max(|g_analytic|, |g_numeric|, 1e-8)`.

use rand::seq::index::sample;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::stream;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
pub const DENOM_FLOOR: f64 = 1e-8;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Location and values of the worst element.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= REL_TOL
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = format!("{} analytic={analytic:e} numeric={numeric:e} rel={e:e}", what());
        }
    }
}

fn pick(len: usize, limit: Option<usize>, seed: u64, tag: u64) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut v = sample(&mut stream(seed, &[tag]), len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Autodiff(format!("function output must be scalar, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

/// Checks `f` with respect to explicit input tensors. `limit` caps the number
/// of elements probed per input (sampled deterministically).
pub fn check_inputs<F>(inputs: &[Tensor], limit: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let grad = g.grad(v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in pick(inputs[k].len(), limit, 17, k as u64) {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + FD_STEP;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - FD_STEP;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            report.record(|| format!("input {k}[{i}]"), grad.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Checks `f` with respect to every entry of a parameter store, probing at
/// most `limit` elements per entry.
pub fn check_params<F>(store: &ParamStore, limit: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_params_filtered(store, limit, |_| true, f)
}

pub fn check_params_filtered<F>(
    store: &ParamStore,
    limit: Option<usize>,
    include: impl Fn(&str) -> bool,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let grads = g.param_grads();
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let names: Vec<String> = store.names().filter(|n| include(n)).cloned().collect();
    for (k, name) in names.iter().enumerate() {
        let len = store.get(name).map_or(0, Tensor::len);
        let grad = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(&[len]));
        for i in pick(len, limit, 23, k as u64) {
            let x0 = store.get(name).expect("present").data()[i];
            let mut eval_at = |x: f64| -> Result<f64> {
                work.get_mut(name).expect("present").data_mut()[i] = x;
                let mut g = Graph::new();
                let out = f(&mut g, &work)?;
                scalar(&g, out)
            };
            let fp = eval_at(x0 + FD_STEP)?;
            let fm = eval_at(x0 - FD_STEP)?;
            eval_at(x0)?;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            report.record(|| format!("{name}[{i}]"), grad.data()[i], numeric);
        }
    }
    Ok(report)
}

/// A deterministic weighting tensor used to turn array outputs into scalars:
/// `loss = Σ out ⊙ w`.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = stream(seed, &[0x9e37]);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `Σ out ⊙ w` for a fixed random `w`.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = probe_weights(g.shape(out), seed);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Copy of `store` with every entry redrawn uniformly from `[-1, 1]`.
pub fn randomized(store: &ParamStore, seed: u64) -> ParamStore {
    use rand::Rng;
    store
        .iter()
        .map(|(name, t)| {
            let mut rng = stream(seed, &[crate::rng::name_tag(name)]);
            (name.clone(), Tensor::from_fn(t.shape(), |_| rng.random_range(-1.0..1.0)))
        })
        .collect()
}
