//! Entropy estimates in nats: plug-in block entropy, the entropy of a
//! Poisson law, the Fano-type continuity modulus under d̄, and symbolic
//! codings of the induced odometer.

use std::collections::HashMap;

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::construction::{Construction, DyadicPoint};
use crate::dbar::BlockCounts;
use crate::error::{domain, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correction {
    None,
    MillerMadow,
}

/// A block-entropy estimate `Ĥ_L / L`.
#[derive(Clone, Debug, Serialize)]
pub struct EntropyReport {
    pub l: usize,
    /// Symbols are saturated at this value.
    pub ell: u64,
    /// `Ĥ_L / L`.
    pub h_l: f64,
    /// `Ĥ_L`.
    pub block_entropy: f64,
    pub sample_blocks: u64,
    pub distinct_blocks: usize,
    pub correction: Correction,
}

fn entropy_of_counts(counts: &BlockCounts, correction: Correction) -> f64 {
    let n = counts.total as f64;
    let h: f64 = counts
        .counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    match correction {
        Correction::None => h,
        Correction::MillerMadow => h + (counts.counts.len() as f64 - 1.0) / (2.0 * n),
    }
}

/// Plug-in entropy of the overlapping `L`-blocks of `values ∧ ℓ`.
pub fn block_entropy(values: &[u64], l: usize, ell: u64, correction: Correction, floor: usize) -> Result<EntropyReport> {
    let counts = BlockCounts::harvest(values, l, ell)?;
    if (counts.total as usize) < floor.max(1) {
        return Err(Error::InsufficientSample {
            needed: floor.max(1),
            got: counts.total as usize,
        });
    }
    Ok(entropy_report(&counts, ell, correction))
}

/// Report for already harvested blocks.
pub fn entropy_report(counts: &BlockCounts, ell: u64, correction: Correction) -> EntropyReport {
    let h = entropy_of_counts(counts, correction);
    EntropyReport {
        l: counts.l,
        ell,
        h_l: h / counts.l as f64,
        block_entropy: h,
        sample_blocks: counts.total,
        distinct_blocks: counts.counts.len(),
        correction,
    }
}

/// Entropy of Poisson(λ); with `Some(ℓ)` the mass at and above `ℓ` is
/// lumped into one atom (the law of `X ∧ ℓ`).
pub fn poisson_entropy(lambda: f64, ell: Option<u64>) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return domain(format!("poisson_entropy needs λ > 0, got {lambda}"));
    }
    let ln_p = |k: u64| -lambda + k as f64 * lambda.ln() - ln_gamma(k as f64 + 1.0);
    let term = |lp: f64| if lp > -745.0 { -lp.exp() * lp } else { 0.0 };
    let mut h = 0.0;
    match ell {
        Some(ell) => {
            let mut head = 0.0;
            for k in 0..ell {
                let lp = ln_p(k);
                head += lp.exp();
                h += term(lp);
            }
            let tail = (1.0 - head).max(0.0);
            if tail > 0.0 {
                h -= tail * tail.ln();
            }
        }
        None => {
            let mut k = 0u64;
            loop {
                let lp = ln_p(k);
                let t = term(lp);
                h += t;
                // past the mode terms decrease geometrically
                if k as f64 > lambda + 1.0 && t < 1e-17 && lp.exp() < 1e-17 {
                    break;
                }
                k += 1;
            }
        }
    }
    Ok(h)
}

/// `H_2(p) = -p ln p - (1-p) ln(1-p)`.
pub fn binary_entropy(p: f64) -> f64 {
    let f = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    f(p) + f(1.0 - p)
}

/// `d ln(|𝔹| - 1) + H_2(d)`: bound on `|h(P) - h(Q)|` when `d̄(P,Q) ≤ d`.
pub fn entropy_gap_bound(dbar: f64, alphabet_size: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&dbar) {
        return domain(format!("d̄ must lie in [0,1], got {dbar}"));
    }
    if alphabet_size < 2 {
        return domain("alphabet needs at least two symbols");
    }
    Ok(dbar * ((alphabet_size - 1) as f64).ln() + binary_entropy(dbar))
}

/// Finite partitions of `[0,1)` used to code odometer orbits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InducedCoding {
    /// Return time to `[0,1)` for points of `A_1 … A_depth`; points of
    /// deeper `A_n` share the symbol 0.
    ReturnTime { depth: u32 },
    /// Rung index in Tower `m`.
    Rung { m: u32 },
}

/// Symbol sequence of the orbit `y, S y, S² y, …` of length `len`.
pub fn induced_symbols(scheme: InducedCoding, start: &DyadicPoint, len: usize, construction: &Construction) -> Result<Vec<u64>> {
    match scheme {
        InducedCoding::Rung { m } if m == 0 || m > 63 => return domain("rung coding needs 1 ≤ m ≤ 63"),
        InducedCoding::ReturnTime { depth } if construction.built_stages() < depth => {
            return domain(format!(
                "return-time coding to depth {depth} needs stages 1..{depth} built"
            ))
        }
        _ => {}
    }
    let mut out = Vec::with_capacity(len);
    let mut y = start.clone();
    for _ in 0..len {
        let symbol = match scheme {
            InducedCoding::Rung { m } => y.leading_digits(m).reverse_bits() >> (64 - m),
            InducedCoding::ReturnTime { depth } => {
                if y.a_index() > depth {
                    0
                } else {
                    construction
                        .return_time_at(&y)
                        .ok_or_else(|| Error::Domain("orbit point beyond built stages".into()))?
                }
            }
        };
        out.push(symbol);
        y = y.odometer_apply();
    }
    Ok(out)
}

/// Block entropy of an odometer orbit under `scheme`. Exactly `orbit_len`
/// blocks are counted.
pub fn induced_coding_entropy(
    scheme: InducedCoding,
    start: &DyadicPoint,
    orbit_len: usize,
    l: usize,
    construction: &Construction,
) -> Result<EntropyReport> {
    if l == 0 || orbit_len == 0 {
        return domain("orbit length and block length must be positive");
    }
    let symbols = induced_symbols(scheme, start, orbit_len + l - 1, construction)?;
    let ell = symbols.iter().copied().max().unwrap_or(0);
    block_entropy(&symbols, l, ell, Correction::None, 1)
}

/// LZ78 phrase-count entropy-rate estimate `c ln c / n` (nats per symbol).
pub fn lz78_rate(symbols: &[u64]) -> f64 {
    if symbols.is_empty() {
        return 0.0;
    }
    let mut dict: HashMap<(usize, u64), usize> = HashMap::new();
    let mut node = 0usize;
    let mut phrases = 0usize;
    for &s in symbols {
        match dict.get(&(node, s)) {
            Some(&next) => node = next,
            None => {
                let id = dict.len() + 1;
                dict.insert((node, s), id);
                phrases += 1;
                node = 0;
            }
        }
    }
    if node != 0 {
        phrases += 1;
    }
    let c = phrases as f64;
    c * c.ln() / symbols.len() as f64
}
