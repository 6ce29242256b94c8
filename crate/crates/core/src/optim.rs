//! AdamW with decoupled weight decay, plus a warmup/cosine learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    /// Floor of the cosine decay as a fraction of `lr`.
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 10,
            min_lr_ratio: 0.01,
            grad_clip: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("optim.lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("optim.weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optim betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("optim.eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("optim.min_lr_ratio must lie in [0, 1]");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("optim.grad_clip must be positive");
        }
        Ok(())
    }
}

/// Linear warmup from `lr / warmup` to `lr`, then cosine decay to
/// `lr · min_ratio` at `total`. Steps count from 1.
pub fn lr_at(cfg: &OptimConfig, step: usize, total: usize) -> f64 {
    let w = cfg.warmup_steps;
    if step <= w {
        return cfg.lr * step as f64 / w as f64;
    }
    let span = total.saturating_sub(w).max(1);
    let progress = ((step - w) as f64 / span as f64).min(1.0);
    let floor = cfg.lr * cfg.min_lr_ratio;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Matrices named `*.weight` decay; biases, norms and per-order affines do not.
pub fn decays(name: &str, value: &Tensor) -> bool {
    name.ends_with(".weight") && value.rank() >= 2
}

/// `sqrt(Σ g²)` over every gradient.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: OptimConfig,
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update at learning rate `lr`, scaled per parameter by
    /// `lr_scale(name)`. Parameters without a gradient are left alone.
    /// Returns the pre-clip global gradient norm.
    pub fn step(
        &mut self,
        ps: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        lr_scale: impl Fn(&str) -> f64,
    ) -> Result<f64> {
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let clip = match self.cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, g) in grads {
            let p = ps
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient of `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            let eta = lr * lr_scale(name);
            let wd = if decays(name, p) { self.cfg.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.cfg.eps);
                *x -= eta * (update + wd * *x);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64, rank2: bool) -> ParamStore {
        let mut ps = ParamStore::new();
        let shape = if rank2 { vec![1, 1] } else { vec![1] };
        ps.insert(name, Tensor::new(shape, vec![v]).unwrap()).unwrap();
        ps
    }

    fn grad(name: &str, g: f64, rank2: bool) -> BTreeMap<String, Tensor> {
        let shape = if rank2 { vec![1, 1] } else { vec![1] };
        BTreeMap::from([(name.to_string(), Tensor::new(shape, vec![g]).unwrap())])
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let cfg = OptimConfig {
            weight_decay: 0.1,
            grad_clip: None,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg.clone());
        let mut ps = one("l.weight", 2.0, true);
        let lr = 0.01;
        opt.step(&mut ps, &grad("l.weight", 0.5, true), lr, |_| 1.0).unwrap();
        // Step 1: m̂ = g, v̂ = g², so the Adam direction is g/(|g| + eps).
        let mut x = 2.0 - lr * (0.5 / (0.5 + 1e-8) + 0.1 * 2.0);
        assert!((ps.get("l.weight").unwrap().data()[0] - x).abs() < 1e-15);

        opt.step(&mut ps, &grad("l.weight", -1.0, true), lr, |_| 1.0).unwrap();
        let m = 0.9 * (0.1 * 0.5) + -0.1;
        let v = 0.999 * (0.001 * 0.25) + 0.001 * 1.0;
        let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
        x -= lr * (mh / (vh.sqrt() + 1e-8) + 0.1 * x);
        assert!((ps.get("l.weight").unwrap().data()[0] - x).abs() < 1e-15);
        assert_eq!(opt.steps_taken(), 2);
    }

    #[test]
    fn decay_is_decoupled_and_selective() {
        let mut opt = AdamW::new(OptimConfig::default());
        let mut ps = one("a.weight", 1.0, true);
        ps.insert("a.bias", Tensor::ones(&[1])).unwrap();
        let mut grads = grad("a.weight", 0.0, true);
        grads.insert("a.bias".into(), Tensor::zeros(&[1]));
        opt.step(&mut ps, &grads, 0.1, |_| 1.0).unwrap();
        assert!((ps.get("a.weight").unwrap().data()[0] - (1.0 - 0.1 * 0.05)).abs() < 1e-15);
        assert_eq!(ps.get("a.bias").unwrap().data()[0], 1.0);
    }

    #[test]
    fn lr_scale_and_clip() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        let mut ps = one("b", 0.0, false);
        let norm = opt.step(&mut ps, &grad("b", 30.0, false), 1.0, |_| 0.1).unwrap();
        assert_eq!(norm, 30.0);
        assert!((ps.get("b").unwrap().data()[0] + 0.1).abs() < 1e-8);
        assert!(opt.step(&mut ps, &grad("b", f64::NAN, false), 1.0, |_| 1.0).is_err());
        assert!(opt.step(&mut ps, &grad("zz", 1.0, false), 1.0, |_| 1.0).is_err());
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = AdamW::new(OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        });
        let mut ps = one("x", 3.0, false);
        for _ in 0..2000 {
            let x = ps.get("x").unwrap().data()[0];
            opt.step(&mut ps, &grad("x", 2.0 * (x - 0.5), false), 0.01, |_| 1.0).unwrap();
        }
        assert!((ps.get("x").unwrap().data()[0] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn schedule_shape() {
        let cfg = OptimConfig {
            lr: 1.0,
            warmup_steps: 4,
            min_lr_ratio: 0.1,
            ..OptimConfig::default()
        };
        assert_eq!(lr_at(&cfg, 1, 14), 0.25);
        assert_eq!(lr_at(&cfg, 4, 14), 1.0);
        assert!((lr_at(&cfg, 9, 14) - 0.55).abs() < 1e-12);
        assert!((lr_at(&cfg, 14, 14) - 0.1).abs() < 1e-12);
        assert!((lr_at(&cfg, 50, 14) - 0.1).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 4..=14 {
            assert!(lr_at(&cfg, s, 14) <= prev);
            prev = lr_at(&cfg, s, 14);
        }
        let no_warm = OptimConfig {
            warmup_steps: 0,
            ..cfg
        };
        assert_eq!(lr_at(&no_warm, 1, 1), 0.1);
    }

    #[test]
    fn validation() {
        assert!(OptimConfig::default().validate().is_ok());
        for bad in [
            OptimConfig { lr: 0.0, ..OptimConfig::default() },
            OptimConfig { beta1: 1.0, ..OptimConfig::default() },
            OptimConfig { grad_clip: Some(0.0), ..OptimConfig::default() },
            OptimConfig { weight_decay: f64::NAN, ..OptimConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
