//! Selective-scan kernels on flat buffers.
//!
//! Per batch element `b`, channel `c` and state `n`:
//!
//! ```text
//! Ā_t = exp(Δ_t · A)           B̄_t = (Ā_t − 1)/A · B_t
//! h_t = Ā_t h_{t−1} + B̄_t x_t   y_t = Σ_n C_t h_t + D x_t,   h_0 = 0
//! ```
//!
//! Layouts: `x, delta: [B,T,C]`, `a: [C,N]`, `b, c: [B,T,N]`, `d: [C]`,
//! hidden states `[B,T,C,N]`.

use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanDims {
    pub fn infer(x: &[usize], delta: &[usize], a: &[usize], b: &[usize], c: &[usize], d: &[usize]) -> Result<Self> {
        if x.len() != 3 || a.len() != 2 {
            return Err(shape_err!("selective scan: x {x:?} must be [B,T,C] and A {a:?} [C,N]"));
        }
        let dims = ScanDims {
            batch: x[0],
            len: x[1],
            channels: x[2],
            state: a[1],
        };
        let bt_n = [x[0], x[1], a[1]];
        if delta != x || a[0] != x[2] || b != bt_n || c != bt_n || d != [x[2]] {
            return Err(shape_err!(
                "selective scan shapes disagree: x {x:?} delta {delta:?} A {a:?} B {b:?} C {c:?} D {d:?}"
            ));
        }
        Ok(dims)
    }
}

/// Borrowed scan operands.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a> {
    pub dims: ScanDims,
    pub x: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
}

/// Zero-order-hold discretization of one diagonal entry: returns
/// `(Ā, (Ā − 1)/A)`; multiply the second by `B` to get `B̄`.
pub fn zoh(a: f64, delta: f64) -> (f64, f64) {
    let abar = (delta * a).exp();
    (abar, (delta * a).exp_m1() / a)
}

/// Discretizes a diagonal state matrix for one time step: `a: [N]`,
/// `b: [N]`. Returns `(Ā, B̄)`.
pub fn discretize(a: &[f64], b: &[f64], delta: f64) -> (Vec<f64>, Vec<f64>) {
    a.iter()
        .zip(b)
        .map(|(&an, &bn)| {
            let (abar, coef) = zoh(an, delta);
            (abar, coef * bn)
        })
        .unzip()
}

/// An element of the linear-recurrence semigroup: the affine map
/// `h ↦ mult·h + add`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub mult: f64,
    pub add: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { mult: 1.0, add: 0.0 };

    /// Applies `self` first, then `later`.
    pub fn then(self, later: Affine) -> Affine {
        Affine {
            mult: self.mult * later.mult,
            add: later.mult * self.add + later.add,
        }
    }
}

/// In-place inclusive scan with a fixed up-sweep/down-sweep tree.
pub fn blelloch_inclusive(elems: &mut [Affine]) {
    let n = elems.len();
    if n <= 1 {
        return;
    }
    let size = n.next_power_of_two();
    let mut tree = elems.to_vec();
    tree.resize(size, Affine::IDENTITY);

    let mut stride = 2;
    while stride <= size {
        let half = stride / 2;
        for r in (stride - 1..size).step_by(stride) {
            tree[r] = tree[r - half].then(tree[r]);
        }
        stride *= 2;
    }
    tree[size - 1] = Affine::IDENTITY;
    stride = size;
    while stride >= 2 {
        let half = stride / 2;
        for r in (stride - 1..size).step_by(stride) {
            let left = tree[r - half];
            tree[r - half] = tree[r];
            tree[r] = tree[r].then(left);
        }
        stride /= 2;
    }
    // tree now holds the exclusive prefix
    for (e, p) in elems.iter_mut().zip(&tree) {
        *e = p.then(*e);
    }
}

/// Sequential scan; also returns every hidden state `[B,T,C,N]`.
pub fn selective_scan_with_states(s: &ScanInputs) -> (Vec<f64>, Vec<f64>) {
    let ScanDims {
        batch,
        len,
        channels,
        state,
    } = s.dims;
    let mut y = vec![0.0; batch * len * channels];
    let mut hs = vec![0.0; batch * len * channels * state];
    for b in 0..batch {
        for ch in 0..channels {
            let mut h = vec![0.0; state];
            for t in 0..len {
                let bt = b * len + t;
                let xv = s.x[bt * channels + ch];
                let dt = s.delta[bt * channels + ch];
                let mut acc = s.d[ch] * xv;
                for n in 0..state {
                    let (abar, coef) = zoh(s.a[ch * state + n], dt);
                    h[n] = abar * h[n] + coef * s.b[bt * state + n] * xv;
                    acc += s.c[bt * state + n] * h[n];
                }
                y[bt * channels + ch] = acc;
                hs[(bt * channels + ch) * state..(bt * channels + ch + 1) * state].copy_from_slice(&h);
            }
        }
    }
    (y, hs)
}

pub fn selective_scan_sequential(s: &ScanInputs) -> Vec<f64> {
    selective_scan_with_states(s).0
}

/// Associative-scan evaluation: each `(b, c, n)` recurrence is reduced with
/// [`blelloch_inclusive`] over `(Ā_t, B̄_t x_t)` elements.
pub fn selective_scan_parallel(s: &ScanInputs) -> Vec<f64> {
    let ScanDims {
        batch,
        len,
        channels,
        state,
    } = s.dims;
    let mut y = vec![0.0; batch * len * channels];
    let mut elems = vec![Affine::IDENTITY; len];
    for b in 0..batch {
        for ch in 0..channels {
            for t in 0..len {
                let bt = b * len + t;
                y[bt * channels + ch] = s.d[ch] * s.x[bt * channels + ch];
            }
            for n in 0..state {
                let an = s.a[ch * state + n];
                for (t, e) in elems.iter_mut().enumerate() {
                    let bt = b * len + t;
                    let (abar, coef) = zoh(an, s.delta[bt * channels + ch]);
                    *e = Affine {
                        mult: abar,
                        add: coef * s.b[bt * state + n] * s.x[bt * channels + ch],
                    };
                }
                blelloch_inclusive(&mut elems);
                for (t, e) in elems.iter().enumerate() {
                    let bt = b * len + t;
                    y[bt * channels + ch] += s.c[bt * state + n] * e.add;
                }
            }
        }
    }
    y
}

/// Gradients of `Σ gy ⊙ y` with respect to `[x, delta, a, b, c, d]`.
pub fn selective_scan_backward(s: &ScanInputs, hs: &[f64], gy: &[f64]) -> [Vec<f64>; 6] {
    let ScanDims {
        batch,
        len,
        channels,
        state,
    } = s.dims;
    let mut gx = vec![0.0; s.x.len()];
    let mut gdelta = vec![0.0; s.delta.len()];
    let mut ga = vec![0.0; s.a.len()];
    let mut gb = vec![0.0; s.b.len()];
    let mut gc = vec![0.0; s.c.len()];
    let mut gd = vec![0.0; s.d.len()];
    let mut carry = vec![0.0; state];
    for b in 0..batch {
        for ch in 0..channels {
            carry.iter_mut().for_each(|v| *v = 0.0);
            for t in (0..len).rev() {
                let bt = b * len + t;
                let xi = bt * channels + ch;
                let (xv, dt, dy) = (s.x[xi], s.delta[xi], gy[xi]);
                gx[xi] += s.d[ch] * dy;
                gd[ch] += dy * xv;
                for n in 0..state {
                    let an = s.a[ch * state + n];
                    let h = hs[xi * state + n];
                    let h_prev = if t > 0 { hs[((bt - 1) * channels + ch) * state + n] } else { 0.0 };
                    let (abar, coef) = zoh(an, dt);
                    let bn = s.b[bt * state + n];
                    let dh = s.c[bt * state + n] * dy + carry[n];
                    gc[bt * state + n] += dy * h;
                    let dabar = dh * h_prev;
                    gx[xi] += dh * coef * bn;
                    let dbbar = dh * xv;
                    gb[bt * state + n] += dbbar * coef;
                    let dcoef = dbbar * bn;
                    gdelta[xi] += dabar * an * abar + dcoef * abar;
                    ga[ch * state + n] += dabar * dt * abar + dcoef * (dt * abar * an - (dt * an).exp_m1()) / (an * an);
                    carry[n] = abar * dh;
                }
            }
        }
    }
    [gx, gdelta, ga, gb, gc, gd]
}
