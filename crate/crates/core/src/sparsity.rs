//! Magnitude truncation operators and mask algebra.
//!
//! Three patterns are supported: global top-k over every prunable
//! coordinate, uniform per-layer top-k, and N:M semi-structured blocks.
//! All selections break magnitude ties by lowest coordinate index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numeric::{ParamSet, Vector};

/// One bit per prunable coordinate, with a cached popcount.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    bits: Vec<bool>,
    popcount: usize,
}

impl Mask {
    pub fn new(bits: Vec<bool>) -> Self {
        let popcount = bits.iter().filter(|b| **b).count();
        Mask { bits, popcount }
    }

    pub fn ones(len: usize) -> Self {
        Mask {
            bits: vec![true; len],
            popcount: len,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Mask {
            bits: vec![false; len],
            popcount: 0,
        }
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Self {
        let mut bits = vec![false; len];
        for &i in indices {
            bits[i] = true;
        }
        Mask::new(bits)
    }

    /// Support of a vector: `1[v_i != 0]`.
    pub fn support_of(v: &[f64]) -> Self {
        Mask::new(v.iter().map(|x| *x != 0.0).collect())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.popcount
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_all_ones(&self) -> bool {
        self.popcount == self.bits.len()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
            .collect()
    }

    /// Fraction of coordinates switched off.
    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            1.0 - self.popcount as f64 / self.bits.len() as f64
        }
    }

    /// `|self ∩ other|`
    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    /// FNV-1a hash of the bit pattern; used as a compact mask id in metrics.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in self.to_packed() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^ self.bits.len() as u64
    }

    /// Bits packed LSB-first into bytes.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, b) in self.bits.iter().enumerate() {
            if *b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_packed(len: usize, bytes: &[u8]) -> Result<Self> {
        check_len(len.div_ceil(8), bytes.len())?;
        let bits = (0..len).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect();
        Ok(Mask::new(bits))
    }
}

#[derive(Serialize, Deserialize)]
struct PackedMask {
    len: usize,
    bits: String,
}

impl Serialize for Mask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PackedMask {
            len: self.len(),
            bits: hex::encode(self.to_packed()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let p = PackedMask::deserialize(d)?;
        let bytes = hex::decode(&p.bits).map_err(serde::de::Error::custom)?;
        Mask::from_packed(p.len, &bytes).map_err(serde::de::Error::custom)
    }
}

/// Target size of a global top-k selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keep {
    Count(usize),
    /// Fraction of prunable coordinates kept, in `(0, 1]`.
    Fraction(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityPattern {
    GlobalTopK {
        keep: Keep,
    },
    /// Independent top-k in each prunable segment, keeping
    /// `floor(fraction × size)`. Exempt segments stay dense.
    UniformPerLayer {
        fraction: f64,
        #[serde(default)]
        exempt: Vec<String>,
    },
    /// Keep `n` of every `m` consecutive weights within each segment.
    SemiStructured {
        n: usize,
        m: usize,
    },
}

impl SparsityPattern {
    pub fn global_fraction(fraction: f64) -> Self {
        SparsityPattern::GlobalTopK {
            keep: Keep::Fraction(fraction),
        }
    }

    pub fn global_count(k: usize) -> Self {
        SparsityPattern::GlobalTopK { keep: Keep::Count(k) }
    }

    pub fn validate(&self, p: &ParamSet) -> Result<()> {
        match self {
            SparsityPattern::GlobalTopK { keep: Keep::Count(k) } => {
                if *k > p.prunable_count() {
                    return Err(Error::invalid(
                        "keep",
                        format!("k = {k} exceeds {} prunable coordinates", p.prunable_count()),
                    ));
                }
            }
            SparsityPattern::GlobalTopK {
                keep: Keep::Fraction(f),
            } => check_fraction(*f)?,
            SparsityPattern::UniformPerLayer { fraction, exempt } => {
                check_fraction(*fraction)?;
                for name in exempt {
                    if p.segment(name).is_none() {
                        return Err(Error::invalid("exempt", format!("no segment named `{name}`")));
                    }
                }
            }
            SparsityPattern::SemiStructured { n, m } => {
                if *m == 0 || *n == 0 || n > m {
                    return Err(Error::invalid("n:m", format!("need 1 <= n <= m, got {n}:{m}")));
                }
            }
        }
        Ok(())
    }

    /// Popcount every mask produced for `p` must have.
    pub fn expected_popcount(&self, p: &ParamSet) -> Result<usize> {
        self.validate(p)?;
        let prunable = p.segments().iter().filter(|s| s.prunable);
        Ok(match self {
            SparsityPattern::GlobalTopK { keep } => global_k(*keep, p.prunable_count()),
            SparsityPattern::UniformPerLayer { fraction, exempt } => prunable
                .map(|s| {
                    if exempt.contains(&s.name) {
                        s.values.len()
                    } else {
                        floor_count(*fraction, s.values.len())
                    }
                })
                .sum(),
            SparsityPattern::SemiStructured { n, m } => prunable
                .map(|s| {
                    let len = s.values.len();
                    (len / m) * n + (len % m).min(*n)
                })
                .sum(),
        })
    }

    /// Mask over the flat prunable view of `p`.
    pub fn mask_for(&self, p: &ParamSet) -> Result<Mask> {
        apply_pattern(p, self)
    }

    /// Mask for a plain vector treated as one prunable segment.
    pub fn mask_for_vector(&self, v: &[f64]) -> Result<Mask> {
        match self {
            SparsityPattern::GlobalTopK { keep } => top_k_global(v, global_k(*keep, v.len())),
            _ => apply_pattern(&ParamSet::single(v), self),
        }
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("fraction", format!("must lie in (0, 1], got {f}")))
    }
}

fn global_k(keep: Keep, total: usize) -> usize {
    match keep {
        Keep::Count(k) => k,
        Keep::Fraction(f) => ((f * total as f64).round() as usize).min(total),
    }
}

fn floor_count(fraction: f64, len: usize) -> usize {
    ((fraction * len as f64).floor() as usize).min(len)
}

/// Larger magnitude first, then lower index.
fn magnitude_order(v: &[f64], a: usize, b: usize) -> Ordering {
    v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b))
}

/// Indices of the `k` largest-magnitude entries, ties to the lowest index.
fn top_k_indices(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| magnitude_order(v, a, b));
        idx.truncate(k);
    }
    idx
}

/// Mask selecting the `k` entries of largest absolute value.
pub fn top_k_global(v: &[f64], k: usize) -> Result<Mask> {
    if k > v.len() {
        return Err(Error::invalid("k", format!("k = {k} exceeds length {}", v.len())));
    }
    Ok(Mask::from_indices(v.len(), &top_k_indices(v, k)))
}

/// `T_k(v)`: keeps the `k` largest-magnitude entries and zeros the rest.
pub fn truncate(v: &[f64], k: usize) -> Result<Vector> {
    let m = top_k_global(v, k)?;
    apply_mask(v, &m)
}

/// Computes the mask `pattern` induces on the prunable coordinates of `p`.
pub fn apply_pattern(p: &ParamSet, pattern: &SparsityPattern) -> Result<Mask> {
    pattern.validate(p)?;
    let (flat, layout) = p.flatten_prunable();
    match pattern {
        SparsityPattern::GlobalTopK { keep } => top_k_global(&flat, global_k(*keep, flat.len())),
        SparsityPattern::UniformPerLayer { fraction, exempt } => {
            let mut bits = vec![false; flat.len()];
            for e in layout.entries() {
                let seg = &flat[e.start..e.start + e.len];
                let k = if exempt.contains(&p.segments()[e.segment].name) {
                    e.len
                } else {
                    floor_count(*fraction, e.len)
                };
                for i in top_k_indices(seg, k) {
                    bits[e.start + i] = true;
                }
            }
            Ok(Mask::new(bits))
        }
        SparsityPattern::SemiStructured { n, m } => {
            let mut bits = vec![false; flat.len()];
            for e in layout.entries() {
                let mut block_start = e.start;
                for block in flat[e.start..e.start + e.len].chunks(*m) {
                    for i in top_k_indices(block, (*n).min(block.len())) {
                        bits[block_start + i] = true;
                    }
                    block_start += block.len();
                }
            }
            Ok(Mask::new(bits))
        }
    }
}

/// Elementwise `v ⊙ m`.
pub fn apply_mask(v: &[f64], m: &Mask) -> Result<Vector> {
    check_len(m.len(), v.len())?;
    Ok(v.iter()
        .zip(m.bits())
        .map(|(x, keep)| if *keep { *x } else { 0.0 })
        .collect())
}

/// Zeros masked-out coordinates in place.
pub fn mask_in_place(v: &mut [f64], m: &Mask) -> Result<()> {
    check_len(m.len(), v.len())?;
    for (x, keep) in v.iter_mut().zip(m.bits()) {
        if !*keep {
            *x = 0.0;
        }
    }
    Ok(())
}

/// Applies a prunable-coordinate mask to the prunable segments of `p`.
pub fn mask_params(p: &mut ParamSet, m: &Mask) -> Result<()> {
    check_len(p.prunable_count(), m.len())?;
    let mut off = 0;
    for s in p.segments_mut().iter_mut().filter(|s| s.prunable) {
        for (x, keep) in s.values.iter_mut().zip(&m.bits()[off..]) {
            if !*keep {
                *x = 0.0;
            }
        }
        off += s.values.len();
    }
    Ok(())
}

/// `h(k) = ‖T_k(x) − x‖² / (n − k)` with `n = nnz(x)`.
pub fn projection_gap(x: &[f64], k: usize) -> Result<f64> {
    let n = x.iter().filter(|v| **v != 0.0).count();
    if k >= n {
        return Err(Error::invalid("k", format!("need k < nnz(x) = {n}, got {k}")));
    }
    let kept = top_k_global(x, k)?;
    let residual: f64 = x
        .iter()
        .zip(kept.bits())
        .filter(|(_, keep)| !**keep)
        .map(|(v, _)| v * v)
        .sum();
    Ok(residual / (n - k) as f64)
}
