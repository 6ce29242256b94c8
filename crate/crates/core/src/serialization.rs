//! Ordering patch tokens into 1D sequences, masking, and order embeddings.
//!
//! Curve indices use Skilling's transpose algorithm: the cell coordinates are
//! converted in place into the "transposed" Hilbert index and the bits are
//! then interleaved, most significant first, `x` before `y` before `z`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pointcloud::{dist2, PatchSet, Point};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const MAX_BITS: u32 = 20;

/// Which ordering produced a token position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderId {
    Raw,
    Hilbert,
    TransHilbert,
    AxisX,
    AxisY,
    AxisZ,
}

impl OrderId {
    pub const ALL: [OrderId; 6] = [
        OrderId::Raw,
        OrderId::Hilbert,
        OrderId::TransHilbert,
        OrderId::AxisX,
        OrderId::AxisY,
        OrderId::AxisZ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OrderId::Raw => "raw",
            OrderId::Hilbert => "hilbert",
            OrderId::TransHilbert => "trans_hilbert",
            OrderId::AxisX => "axis_x",
            OrderId::AxisY => "axis_y",
            OrderId::AxisZ => "axis_z",
        }
    }
}

impl fmt::Display for OrderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn check_bits(p: u32) -> Result<()> {
    if (1..=MAX_BITS).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("curve bits must be in 1..={MAX_BITS}, got {p}")))
    }
}

fn check_cell(cell: [u32; 3], p: u32) -> Result<()> {
    check_bits(p)?;
    if cell.iter().any(|&c| c >> p != 0) {
        return Err(Error::InvalidArgument(format!("cell {cell:?} outside the 2^{p} grid")));
    }
    Ok(())
}

fn axes_to_transpose(x: &mut [u32; 3], p: u32) {
    let m = 1u32 << (p - 1);
    let mut q = m;
    while q > 1 {
        let pm = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= pm;
            } else {
                let t = (x[0] ^ x[i]) & pm;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in x.iter_mut() {
        *v ^= t;
    }
}

fn transpose_to_axes(x: &mut [u32; 3], p: u32) {
    let n = 2u32 << (p - 1);
    let t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    let mut q = 2;
    while q != n {
        let pm = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= pm;
            } else {
                let t = (x[0] ^ x[i]) & pm;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
}

fn interleave(x: &[u32; 3], p: u32) -> u64 {
    let mut h = 0u64;
    for bit in (0..p).rev() {
        for v in x {
            h = (h << 1) | ((v >> bit) & 1) as u64;
        }
    }
    h
}

fn deinterleave(h: u64, p: u32) -> [u32; 3] {
    let mut x = [0u32; 3];
    for bit in 0..p {
        for (i, v) in x.iter_mut().enumerate() {
            let pos = 3 * bit + (2 - i as u32);
            *v |= (((h >> pos) & 1) as u32) << bit;
        }
    }
    x
}

/// Position of `cell` along the 3D Hilbert curve over a `2^p` grid.
pub fn hilbert_index(cell: [u32; 3], p: u32) -> Result<u64> {
    check_cell(cell, p)?;
    let mut x = cell;
    axes_to_transpose(&mut x, p);
    Ok(interleave(&x, p))
}

pub fn hilbert_index_inverse(index: u64, p: u32) -> Result<[u32; 3]> {
    check_bits(p)?;
    if index >> (3 * p) != 0 {
        return Err(Error::InvalidArgument(format!("index {index} outside [0, 2^{})", 3 * p)));
    }
    let mut x = deinterleave(index, p);
    transpose_to_axes(&mut x, p);
    Ok(x)
}

/// Hilbert index after the cyclic axis permutation `(x, y, z) → (y, z, x)`.
pub fn trans_hilbert_index(cell: [u32; 3], p: u32) -> Result<u64> {
    hilbert_index([cell[1], cell[2], cell[0]], p)
}

pub fn trans_hilbert_index_inverse(index: u64, p: u32) -> Result<[u32; 3]> {
    let [y, z, x] = hilbert_index_inverse(index, p)?;
    Ok([x, y, z])
}

/// Maps centers into the `2^p` grid: per-axis minimum subtracted, one shared
/// scale (the largest axis extent) so the aspect ratio is kept, then floor.
pub fn quantize(centers: &[Point], p: u32) -> Result<Vec<[u32; 3]>> {
    check_bits(p)?;
    if centers.is_empty() {
        return Ok(Vec::new());
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in centers {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let top = ((1u64 << p) - 1) as f64;
    Ok(centers
        .iter()
        .map(|c| {
            std::array::from_fn(|a| {
                if extent > 0.0 {
                    (((c[a] - lo[a]) / extent * top).floor()).clamp(0.0, top) as u32
                } else {
                    0
                }
            })
        })
        .collect())
}

/// Stable argsort by key; equal keys keep their original index order.
pub fn stable_argsort<K: PartialOrd>(keys: &[K]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveVariant {
    Hilbert,
    TransHilbert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HilbertConfig {
    pub bits: u32,
    pub variant: CurveVariant,
}

impl Default for HilbertConfig {
    fn default() -> Self {
        Self {
            bits: 10,
            variant: CurveVariant::Hilbert,
        }
    }
}

/// Curve-order permutation of `centers`.
pub fn curve_order(centers: &[Point], cfg: &HilbertConfig) -> Result<Vec<usize>> {
    let cells = quantize(centers, cfg.bits)?;
    let keys = cells
        .iter()
        .map(|&c| match cfg.variant {
            CurveVariant::Hilbert => hilbert_index(c, cfg.bits),
            CurveVariant::TransHilbert => trans_hilbert_index(c, cfg.bits),
        })
        .collect::<Result<Vec<u64>>>()?;
    Ok(stable_argsort(&keys))
}

/// How patch tokens are laid out as a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// FPS order, unchanged.
    Raw,
    /// A seeded uniform shuffle.
    Random,
    Hilbert,
    TransHilbert,
    /// Hilbert sequence followed by the Trans-Hilbert sequence (`2G`).
    HilbertPair,
    /// x-, y- and z-sorted sequences concatenated (`3G`).
    AxisWise,
}

impl Strategy {
    pub fn copies(self) -> usize {
        match self {
            Strategy::HilbertPair => 2,
            Strategy::AxisWise => 3,
            _ => 1,
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown serialization strategy `{s}`")))
    }
}

/// Which patch sits at each sequence position, and under which ordering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequencePlan {
    pub index: Vec<usize>,
    pub order_ids: Vec<OrderId>,
}

impl SequencePlan {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Builds the sequence layout for one cloud's patch centers. `seed` only
/// matters for [`Strategy::Random`].
pub fn plan(centers: &[Point], strategy: Strategy, bits: u32, seed: u64) -> Result<SequencePlan> {
    let g = centers.len();
    let curve = |variant| curve_order(centers, &HilbertConfig { bits, variant });
    let segments: Vec<(Vec<usize>, OrderId)> = match strategy {
        Strategy::Raw => vec![((0..g).collect(), OrderId::Raw)],
        Strategy::Random => {
            let mut idx: Vec<usize> = (0..g).collect();
            idx.shuffle(&mut stream(seed, &[0x5e7]));
            vec![(idx, OrderId::Raw)]
        }
        Strategy::Hilbert => vec![(curve(CurveVariant::Hilbert)?, OrderId::Hilbert)],
        Strategy::TransHilbert => vec![(curve(CurveVariant::TransHilbert)?, OrderId::TransHilbert)],
        Strategy::HilbertPair => vec![
            (curve(CurveVariant::Hilbert)?, OrderId::Hilbert),
            (curve(CurveVariant::TransHilbert)?, OrderId::TransHilbert),
        ],
        Strategy::AxisWise => axis_orders(centers).into_iter().zip([OrderId::AxisX, OrderId::AxisY, OrderId::AxisZ]).collect(),
    };
    let mut out = SequencePlan {
        index: Vec::with_capacity(g * strategy.copies()),
        order_ids: Vec::with_capacity(g * strategy.copies()),
    };
    for (idx, id) in segments {
        out.order_ids.extend(std::iter::repeat_n(id, idx.len()));
        out.index.extend(idx);
    }
    Ok(out)
}

/// Stable argsorts of the x, y and z coordinates.
pub fn axis_orders(centers: &[Point]) -> [Vec<usize>; 3] {
    std::array::from_fn(|a| stable_argsort(&centers.iter().map(|c| c[a]).collect::<Vec<_>>()))
}

/// Token features of one cloud with per-position bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `[G', C]`.
    pub tokens: Tensor,
    pub centers: Vec<Point>,
    pub order_ids: Vec<OrderId>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn raw(tokens: Tensor, centers: Vec<Point>) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] != centers.len() {
            return Err(Error::Shape(format!(
                "tokens {:?} do not match {} centers",
                tokens.shape(),
                centers.len()
            )));
        }
        let n = centers.len();
        Ok(Self {
            tokens,
            centers,
            order_ids: vec![OrderId::Raw; n],
            mask: vec![false; n],
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Gathers positions according to `plan`.
    pub fn arranged(&self, plan: &SequencePlan) -> Self {
        let c = self.tokens.shape()[1];
        let src = self.tokens.data();
        let data = plan.index.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        Self {
            tokens: Tensor::new(vec![plan.len(), c], data).expect("gathered shape"),
            centers: plan.index.iter().map(|&i| self.centers[i]).collect(),
            order_ids: plan.order_ids.clone(),
            mask: plan.index.iter().map(|&i| self.mask[i]).collect(),
        }
    }
}

/// Curve-sorts tokens and realigns the neighborhoods with the same order.
pub fn serialize_classification(
    patches: &PatchSet,
    tokens: &TokenSequence,
    cfg: &HilbertConfig,
) -> Result<(PatchSet, TokenSequence)> {
    let perm = curve_order(&tokens.centers, cfg)?;
    let id = match cfg.variant {
        CurveVariant::Hilbert => OrderId::Hilbert,
        CurveVariant::TransHilbert => OrderId::TransHilbert,
    };
    let plan = SequencePlan {
        order_ids: vec![id; perm.len()],
        index: perm,
    };
    Ok((patches.permuted(&plan.index), tokens.arranged(&plan)))
}

/// `[x-sorted ; y-sorted ; z-sorted]`, three times as long as the input.
pub fn serialize_segmentation(tokens: &TokenSequence) -> Result<TokenSequence> {
    let plan = plan(&tokens.centers, Strategy::AxisWise, 1, 0)?;
    Ok(tokens.arranged(&plan))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Random,
    /// One contiguous run, wrapping around the end.
    Block,
}

/// Masked flags over sequence positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRecord {
    pub masked: Vec<bool>,
}

impl MaskRecord {
    pub fn none(len: usize) -> Self {
        Self {
            masked: vec![false; len],
        }
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    /// Carries a mask over patches to every sequence position showing one of
    /// the masked patches.
    pub fn propagate(&self, plan: &SequencePlan) -> Self {
        Self {
            masked: plan.index.iter().map(|&i| self.masked[i]).collect(),
        }
    }
}

/// Masks `round(ratio · len)` positions.
pub fn mask_positions(len: usize, ratio: f64, mode: MaskMode, seed: u64) -> Result<MaskRecord> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio must be in [0, 1), got {ratio}")));
    }
    let k = (ratio * len as f64).round() as usize;
    if k >= len && len > 0 {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} leaves no visible token out of {len}"
        )));
    }
    let mut rng = stream(seed, &[0x3a5c]);
    let mut masked = vec![false; len];
    match mode {
        MaskMode::Random => {
            for i in rand::seq::index::sample(&mut rng, len, k) {
                masked[i] = true;
            }
        }
        MaskMode::Block if k > 0 => {
            let start = rng.random_range(0..len);
            for j in 0..k {
                masked[(start + j) % len] = true;
            }
        }
        MaskMode::Block => {}
    }
    Ok(MaskRecord { masked })
}

/// Splits a sequence into its visible part (relative order kept) and the mask.
pub fn apply_mask(seq: &TokenSequence, ratio: f64, mode: MaskMode, seed: u64) -> Result<(TokenSequence, MaskRecord)> {
    let mask = mask_positions(seq.len(), ratio, mode, seed)?;
    let visible = mask.visible_indices();
    let mut out = seq.arranged(&SequencePlan {
        order_ids: visible.iter().map(|&i| seq.order_ids[i]).collect(),
        index: visible,
    });
    out.mask = vec![false; out.len()];
    Ok((out, mask))
}

pub fn order_scale_names(prefix: &str, id: OrderId) -> (String, String) {
    (format!("{prefix}.{id}.gamma"), format!("{prefix}.{id}.beta"))
}

/// Registers `(γ = 1, β = 0)` for every order id.
pub fn init_order_scale(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    for id in OrderId::ALL {
        let (g, b) = order_scale_names(prefix, id);
        store.insert(g, Tensor::ones(&[dim]))?;
        store.insert(b, Tensor::zeros(&[dim]))?;
    }
    Ok(())
}

/// `y = γ_o ⊙ x + β_o` with `o` the order id of each position.
/// `tokens: [B, T, C]`, `order_ids.len() == T`.
pub fn order_scale(g: &mut Graph, ps: &ParamStore, prefix: &str, tokens: Var, order_ids: &[OrderId]) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 || s[1] != order_ids.len() {
        return Err(Error::Shape(format!("{} order ids for tokens {s:?}", order_ids.len())));
    }
    let c = s[2];
    let mut present: Vec<OrderId> = order_ids.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut gammas = Vec::new();
    let mut betas = Vec::new();
    for &id in &present {
        let (gn, bn) = order_scale_names(prefix, id);
        let missing = || Error::InvalidArgument(format!("no order-scale parameters for order `{id}`"));
        if !ps.contains(&gn) || !ps.contains(&bn) {
            return Err(missing());
        }
        let gv = g.param(ps, &gn)?;
        let bv = g.param(ps, &bn)?;
        gammas.push(g.reshape(gv, &[1, c])?);
        betas.push(g.reshape(bv, &[1, c])?);
    }
    let rows: Vec<usize> = order_ids
        .iter()
        .map(|id| present.binary_search(id).expect("present"))
        .collect();
    let gam = g.concat(&gammas, 0)?;
    let gam = g.index_select(gam, 0, &rows)?;
    let bet = g.concat(&betas, 0)?;
    let bet = g.index_select(bet, 0, &rows)?;
    let y = g.mul(tokens, gam)?;
    g.add(y, bet)
}

/// Mean Euclidean distance between consecutive centers in `order`.
pub fn mean_neighbor_distance(centers: &[Point], order: &[usize]) -> f64 {
    if order.len() < 2 {
        return 0.0;
    }
    let total: f64 = order.windows(2).map(|w| dist2(&centers[w[0]], &centers[w[1]]).sqrt()).sum();
    total / (order.len() - 1) as f64
}

#[cfg(test)]
mod tests;
