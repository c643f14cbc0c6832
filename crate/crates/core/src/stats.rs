//! Goodness-of-fit and moment helpers used by tests and experiments.

use std::collections::BTreeMap;
use std::hash::Hash;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Poisson};

/// Minimum expected count per χ² cell.
pub const MIN_EXPECTED: f64 = 5.0;

#[derive(Clone, Debug, Serialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub cells: usize,
    pub samples: usize,
}

impl ChiSquareResult {
    pub fn passes(&self, level: f64) -> bool {
        self.p_value >= level
    }
}

fn chi2_sf(stat: f64, dof: usize) -> f64 {
    if dof == 0 {
        return 1.0;
    }
    let dist = ChiSquared::new(dof as f64).expect("dof > 0");
    1.0 - dist.cdf(stat)
}

/// χ² goodness of fit of nonnegative integer data against `pmf`.
///
/// Cells are the values `0, 1, 2, …` merged left to right until each has
/// expected count at least [`MIN_EXPECTED`]; the last cell absorbs the
/// upper tail.
pub fn chi_square_gof(data: &[u64], pmf: impl Fn(u64) -> f64) -> ChiSquareResult {
    let n = data.len() as f64;
    let max = data.iter().copied().max().unwrap_or(0);
    let mut observed: BTreeMap<u64, u64> = BTreeMap::new();
    for &x in data {
        *observed.entry(x).or_insert(0) += 1;
    }
    // (expected, observed) per merged cell
    let mut cells: Vec<(f64, u64)> = Vec::new();
    let mut acc_e = 0.0;
    let mut acc_o = 0;
    let mut cum = 0.0;
    let mut v = 0u64;
    loop {
        let p = pmf(v);
        acc_e += p * n;
        cum += p;
        acc_o += observed.get(&v).copied().unwrap_or(0);
        v += 1;
        if acc_e >= MIN_EXPECTED {
            cells.push((acc_e, acc_o));
            acc_e = 0.0;
            acc_o = 0;
        }
        if (1.0 - cum) * n < MIN_EXPECTED && v > max {
            break;
        }
        if v > max + 10_000 {
            break;
        }
    }
    // tail: everything from v onwards
    let tail_o: u64 = observed.range(v..).map(|(_, c)| c).sum();
    let tail_e = ((1.0 - cum).max(0.0)) * n;
    acc_e += tail_e;
    acc_o += tail_o;
    if acc_e > 0.0 || acc_o > 0 {
        match cells.last_mut() {
            Some(last) if acc_e < MIN_EXPECTED => {
                last.0 += acc_e;
                last.1 += acc_o;
            }
            _ => cells.push((acc_e, acc_o)),
        }
    }
    let statistic: f64 = cells
        .iter()
        .map(|&(e, o)| {
            let d = o as f64 - e;
            if e > 0.0 {
                d * d / e
            } else if o > 0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .sum();
    let dof = cells.len().saturating_sub(1);
    ChiSquareResult {
        statistic,
        dof,
        p_value: chi2_sf(statistic, dof),
        cells: cells.len(),
        samples: data.len(),
    }
}

pub fn poisson_pmf(lambda: f64) -> impl Fn(u64) -> f64 {
    let dist = Poisson::new(lambda).ok();
    move |k| dist.as_ref().map_or(if k == 0 { 1.0 } else { 0.0 }, |d| d.pmf(k))
}

pub fn chi_square_poisson(data: &[u64], lambda: f64) -> ChiSquareResult {
    chi_square_gof(data, poisson_pmf(lambda))
}

/// χ² test of homogeneity between two samples over a shared categorical
/// key. Categories with pooled count below `2·MIN_EXPECTED` are merged
/// into one "rare" cell.
pub fn chi_square_two_sample<K: Ord + Hash + Clone>(a: &[K], b: &[K]) -> ChiSquareResult {
    let mut counts: BTreeMap<K, (u64, u64)> = BTreeMap::new();
    for x in a {
        counts.entry(x.clone()).or_default().0 += 1;
    }
    for x in b {
        counts.entry(x.clone()).or_default().1 += 1;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let total = na + nb;
    let mut cells: Vec<(u64, u64)> = Vec::new();
    let mut rare = (0u64, 0u64);
    for (_, (ca, cb)) in counts {
        let pooled = (ca + cb) as f64;
        if pooled * na.min(nb) / total < MIN_EXPECTED {
            rare.0 += ca;
            rare.1 += cb;
        } else {
            cells.push((ca, cb));
        }
    }
    if rare.0 + rare.1 > 0 {
        cells.push(rare);
    }
    let mut statistic = 0.0;
    for &(ca, cb) in &cells {
        let pooled = (ca + cb) as f64;
        let ea = pooled * na / total;
        let eb = pooled * nb / total;
        statistic += (ca as f64 - ea).powi(2) / ea + (cb as f64 - eb).powi(2) / eb;
    }
    let dof = cells.len().saturating_sub(1);
    ChiSquareResult {
        statistic,
        dof,
        p_value: chi2_sf(statistic, dof),
        cells: cells.len(),
        samples: a.len() + b.len(),
    }
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: impl IntoIterator<Item = f64>) -> (f64, f64, usize) {
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for x in xs {
        n += 1;
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    (mean, var, n)
}

/// Lag-`lag` empirical autocovariance of `xs`.
pub fn autocovariance(xs: &[f64], lag: usize) -> f64 {
    let n = xs.len();
    if lag >= n {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs[..n - lag]
        .iter()
        .zip(&xs[lag..])
        .map(|(a, b)| (a - mean) * (b - mean))
        .sum::<f64>()
        / (n - lag) as f64
}

/// Empirical cross-covariance `Cov(x_t, y_{t+lag})`.
pub fn cross_covariance(xs: &[f64], ys: &[f64], lag: usize) -> f64 {
    let n = xs.len().min(ys.len());
    if lag >= n {
        return 0.0;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    xs[..n - lag]
        .iter()
        .zip(&ys[lag..n])
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / (n - lag) as f64
}

/// `|observed - expected| ≤ z·σ`.
pub fn within_sigma(observed: f64, expected: f64, sigma: f64, z: f64) -> bool {
    (observed - expected).abs() <= z * sigma
}
