//! d̄-distances between finite-alphabet processes: exact `d̄_L` between
//! block distributions as an optimal transport problem under the
//! normalized Hamming cost, plug-in estimates from sample windows, and the
//! conditional-distribution upper bound.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::suspension::CountWindow;
use crate::transport;

/// A block of `L` symbols.
pub type Block = Vec<u32>;

/// One coupled pair of blocks and its mass.
pub type PlanEntry = (Block, Block, f64);

/// Default minimum number of harvested blocks per side.
pub const DEFAULT_BLOCK_FLOOR: usize = 10_000;

/// Normalized Hamming distance `#{i : x_i ≠ z_i} / L`.
pub fn hamming(x: &[u32], z: &[u32]) -> Result<f64> {
    if x.len() != z.len() {
        return Err(Error::LengthMismatch(x.len(), z.len()));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let d = x.iter().zip(z).filter(|(a, b)| a != b).count();
    Ok(d as f64 / x.len() as f64)
}

/// Probability law of `L`-blocks with finite support.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDistribution {
    l: usize,
    masses: BTreeMap<Block, f64>,
}

impl BlockDistribution {
    pub fn new(l: usize, masses: impl IntoIterator<Item = (Block, f64)>) -> Result<Self> {
        let mut out = BTreeMap::new();
        let mut total = 0.0;
        for (b, p) in masses {
            if b.len() != l {
                return Err(Error::LengthMismatch(b.len(), l));
            }
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::Domain(format!("invalid block mass {p}")));
            }
            total += p;
            if p > 0.0 {
                *out.entry(b).or_insert(0.0) += p;
            }
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("block masses sum to {total}")));
        }
        Ok(Self { l, masses: out })
    }

    pub fn from_counts(c: &BlockCounts) -> Result<Self> {
        let n = c.total as f64;
        Self::new(c.l, c.counts.iter().map(|(b, &k)| (b.clone(), k as f64 / n)))
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn mass(&self, b: &[u32]) -> f64 {
        self.masses.get(b).copied().unwrap_or(0.0)
    }

    pub fn support(&self) -> impl Iterator<Item = (&Block, f64)> {
        self.masses.iter().map(|(b, &p)| (b, p))
    }

    pub fn support_len(&self) -> usize {
        self.masses.len()
    }
}

/// Counts of overlapping blocks harvested from a sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockCounts {
    pub l: usize,
    pub counts: BTreeMap<Block, u64>,
    pub total: u64,
}

impl BlockCounts {
    /// Every length-`l` window of `values` (stride 1), each symbol
    /// saturated at `ell`.
    pub fn harvest(values: &[u64], l: usize, ell: u64) -> Result<Self> {
        if l == 0 {
            return Err(Error::Domain("block length must be positive".into()));
        }
        let n = (values.len() + 1).saturating_sub(l);
        let sym: Vec<u32> = values.iter().map(|&v| v.min(ell) as u32).collect();
        let counts = (0..n)
            .into_par_iter()
            .fold(BTreeMap::new, |mut m: BTreeMap<Block, u64>, s| {
                *m.entry(sym[s..s + l].to_vec()).or_insert(0) += 1;
                m
            })
            .reduce(BTreeMap::new, |mut a, b| {
                for (k, v) in b {
                    *a.entry(k).or_insert(0) += v;
                }
                a
            });
        Ok(Self { l, counts, total: n as u64 })
    }
}

/// A coupling of two block distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub l: usize,
    pub entries: Vec<PlanEntry>,
}

impl TransportPlan {
    /// Expected normalized Hamming cost.
    pub fn cost(&self) -> f64 {
        self.entries
            .iter()
            .map(|(a, b, m)| m * hamming(a, b).unwrap_or(1.0))
            .sum()
    }

    pub fn marginals(&self) -> (BTreeMap<Block, f64>, BTreeMap<Block, f64>) {
        let mut left = BTreeMap::new();
        let mut right = BTreeMap::new();
        for (a, b, m) in &self.entries {
            *left.entry(a.clone()).or_insert(0.0) += m;
            *right.entry(b.clone()).or_insert(0.0) += m;
        }
        (left, right)
    }

    /// Largest marginal deviation from `p` and `q`.
    pub fn marginal_error(&self, p: &BlockDistribution, q: &BlockDistribution) -> f64 {
        let (left, right) = self.marginals();
        let dev = |m: &BTreeMap<Block, f64>, d: &BlockDistribution| {
            let mut worst: f64 = 0.0;
            for (b, x) in m {
                worst = worst.max((x - d.mass(b)).abs());
            }
            for (b, x) in d.support() {
                worst = worst.max((m.get(b).copied().unwrap_or(0.0) - x).abs());
            }
            worst
        };
        dev(&left, p).max(dev(&right, q))
    }

    /// CSV rows `block_a,block_b,mass`, blocks written as `s1-s2-…`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["block_a", "block_b", "mass"])?;
        for (a, b, m) in &self.entries {
            w.write_record([block_string(a), block_string(b), format!("{m:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn block_string(b: &[u32]) -> String {
    b.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-")
}

/// Blocks packed into `u64` words for fast mismatch counting.
struct Packed {
    bits: u32,
    words: usize,
    low: u64,
    data: Vec<u64>,
}

impl Packed {
    fn new(blocks: &[&Block], l: usize, max_symbol: u32) -> Self {
        let bits = (32 - max_symbol.leading_zeros()).max(1);
        let per_word = (64 / bits) as usize;
        let words = l.div_ceil(per_word);
        let mut low = 0u64;
        for k in 0..per_word {
            low |= 1 << (k as u32 * bits);
        }
        let mut data = vec![0u64; blocks.len() * words];
        for (i, b) in blocks.iter().enumerate() {
            for (pos, &s) in b.iter().enumerate() {
                data[i * words + pos / per_word] |= (s as u64) << ((pos % per_word) as u32 * bits);
            }
        }
        Self { bits, words, low, data }
    }

    fn mismatches(&self, i: usize, other: &Packed, j: usize) -> i64 {
        let a = &self.data[i * self.words..(i + 1) * self.words];
        let b = &other.data[j * other.words..(j + 1) * other.words];
        let mut total = 0;
        for (x, y) in a.iter().zip(b) {
            let z = x ^ y;
            let mut m = z;
            for s in 1..self.bits {
                m |= z >> s;
            }
            total += (m & self.low).count_ones();
        }
        total as i64
    }
}

/// Optimal transport between two weighted block lists with integer or
/// real weights of equal total; returns (total cost in symbol mismatches,
/// plan entries with raw weights).
fn solve_blocks(l: usize, a: &BTreeMap<Block, f64>, b: &BTreeMap<Block, f64>) -> Result<(f64, Vec<PlanEntry>)> {
    let mut entries = Vec::new();
    let mut src = Vec::new();
    let mut supply = Vec::new();
    for (blk, &w) in a {
        let common = w.min(b.get(blk).copied().unwrap_or(0.0));
        if common > 0.0 {
            entries.push((blk.clone(), blk.clone(), common));
        }
        if w > common {
            src.push(blk);
            supply.push(w - common);
        }
    }
    let mut dst = Vec::new();
    let mut demand = Vec::new();
    for (blk, &w) in b {
        let common = w.min(a.get(blk).copied().unwrap_or(0.0));
        if w > common {
            dst.push(blk);
            demand.push(w - common);
        }
    }
    let max_symbol = src.iter().chain(&dst).flat_map(|b| b.iter()).copied().max().unwrap_or(0);
    let ps = Packed::new(&src, l, max_symbol);
    let pd = Packed::new(&dst, l, max_symbol);
    let sol = transport::solve(&supply, &demand, |i, j| ps.mismatches(i, &pd, j), 1, l as i64)?;
    for &(i, j, f) in &sol.flows {
        entries.push((src[i].clone(), dst[j].clone(), f));
    }
    entries.sort_by(|x, y| x.0.cmp(&y.0).then_with(|| x.1.cmp(&y.1)));
    Ok((sol.cost, entries))
}

/// Exact `d̄_L(P, Q)` and an optimal coupling.
pub fn dbar_l_exact(p: &BlockDistribution, q: &BlockDistribution) -> Result<(f64, TransportPlan)> {
    if p.l != q.l {
        return Err(Error::LengthMismatch(p.l, q.l));
    }
    let (cost, entries) = solve_blocks(p.l, &p.masses, &q.masses)?;
    let value = (cost / p.l as f64).clamp(0.0, 1.0);
    Ok((value, TransportPlan { l: p.l, entries }))
}

/// `d̄_L` between two empirical block laws, computed on integer weights
/// `count_a · N_B` and `count_b · N_A` so that the transport is exact.
pub fn dbar_l_counts(a: &BlockCounts, b: &BlockCounts) -> Result<(f64, TransportPlan)> {
    if a.l != b.l {
        return Err(Error::LengthMismatch(a.l, b.l));
    }
    if a.total == 0 || b.total == 0 {
        return Err(Error::InsufficientSample { needed: 1, got: 0 });
    }
    let scale = a.total as f64 * b.total as f64;
    if scale > (1u64 << 53) as f64 {
        return Err(Error::Budget {
            what: "block count product (exact integer weights)",
            needed: scale as u128,
            budget: 1 << 53,
        });
    }
    let wa = a.counts.iter().map(|(k, &c)| (k.clone(), (c * b.total) as f64)).collect();
    let wb = b.counts.iter().map(|(k, &c)| (k.clone(), (c * a.total) as f64)).collect();
    let (cost, mut entries) = solve_blocks(a.l, &wa, &wb)?;
    for e in &mut entries {
        e.2 /= scale;
    }
    let value = (cost / (a.l as f64 * scale)).clamp(0.0, 1.0);
    Ok((value, TransportPlan { l: a.l, entries }))
}

/// A plug-in `d̄_L` estimate with the sample sizes behind it.
#[derive(Clone, Debug, Serialize)]
pub struct EmpiricalDbar {
    pub value: f64,
    pub l: usize,
    pub ell: u64,
    pub blocks_a: u64,
    pub blocks_b: u64,
    pub distinct_a: usize,
    pub distinct_b: usize,
}

/// Plug-in `d̄_L` between the truncated block laws of two samples.
pub fn dbar_l_empirical(a: &[u64], b: &[u64], l: usize, ell: u64, floor: usize) -> Result<EmpiricalDbar> {
    let ca = BlockCounts::harvest(a, l, ell)?;
    let cb = BlockCounts::harvest(b, l, ell)?;
    for c in [&ca, &cb] {
        if (c.total as usize) < floor.max(1) {
            return Err(Error::InsufficientSample {
                needed: floor.max(1),
                got: c.total as usize,
            });
        }
    }
    let (value, _) = dbar_l_counts(&ca, &cb)?;
    Ok(EmpiricalDbar {
        value,
        l,
        ell,
        blocks_a: ca.total,
        blocks_b: cb.total,
        distinct_a: ca.counts.len(),
        distinct_b: cb.counts.len(),
    })
}

/// The `3ε` bound on `d̄` from the conditional-distribution criterion.
#[derive(Clone, Debug, Serialize)]
pub struct ConditionalBound {
    pub epsilon: f64,
    pub bound: f64,
    pub caveat: &'static str,
}

/// `ε = max(bad-mass ε, achieved max L1)`, bound `3ε`.
pub fn dbar_upper_conditional(bad_mass_eps: f64, max_l1_eps: f64) -> ConditionalBound {
    let epsilon = bad_mass_eps.max(max_l1_eps).max(0.0);
    ConditionalBound {
        epsilon,
        bound: 3.0 * epsilon,
        caveat: "epsilon estimated by Monte Carlo over enriched pasts",
    }
}

/// `min(x, ℓ)` pointwise.
pub fn truncate(window: &CountWindow, ell: u64) -> CountWindow {
    CountWindow {
        window: window.window,
        values: window.values.iter().map(|&v| v.min(ell)).collect(),
        meta: window.meta.clone(),
    }
}
