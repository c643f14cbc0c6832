//! The disconnected process ξ (independent black and white Poisson
//! particles) and the connected process ζ (each black particle linked to a
//! white one at a uniform offset in `{M, …, M+k-1}`), together with the
//! enriched-past analysis of ζ and the closed forms that go with it.
//!
//! Distances between laws on ℕ are reported as unhalved L1 sums
//! `Σ_ℓ |P(ℓ) - Q(ℓ)|`, i.e. twice the total variation.

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{Discrete, DiscreteCDF, Poisson as PoissonLaw};

use crate::error::{domain, Error, Result};
use crate::seed::{rng, seed_child, LabRng};
use crate::window::Window;

/// A label: a finite sequence of return times (empty in the simple case).
pub type Label = Vec<u64>;

/// Parameters of the pair (ξ, ζ).
#[derive(Clone, Debug, Serialize)]
pub struct LemmaParams {
    /// Expected number of black plus white particles per site.
    pub delta: f64,
    pub m: u64,
    pub k: u64,
    pub alphabet: Vec<Label>,
    /// Joining `λ` on `alphabet × alphabet` as `(black index, white index, mass)`.
    pub joining: Vec<(usize, usize, f64)>,
    #[serde(skip)]
    black_marginal: Vec<f64>,
    #[serde(skip)]
    white_marginal: Vec<f64>,
}

impl LemmaParams {
    pub fn new(
        delta: f64,
        m: u64,
        k: u64,
        alphabet: Vec<Label>,
        joining: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return domain(format!("delta must be positive, got {delta}"));
        }
        if m == 0 || k == 0 {
            return domain("M and k must be at least 1");
        }
        if alphabet.is_empty() {
            return domain("alphabet must be nonempty");
        }
        let mut black = vec![0.0; alphabet.len()];
        let mut white = vec![0.0; alphabet.len()];
        let mut total = 0.0;
        for &(a, b, p) in &joining {
            if a >= alphabet.len() || b >= alphabet.len() {
                return domain("joining refers to a label outside the alphabet");
            }
            if p.is_nan() || p < 0.0 {
                return domain(format!("negative joining mass {p}"));
            }
            black[a] += p;
            white[b] += p;
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return domain(format!("joining mass sums to {total}, not 1"));
        }
        Ok(Self {
            delta,
            m,
            k,
            alphabet,
            joining,
            black_marginal: black,
            white_marginal: white,
        })
    }

    /// Single-label alphabet: only counts matter.
    pub fn simple(delta: f64, m: u64, k: u64) -> Result<Self> {
        Self::new(delta, m, k, vec![Vec::new()], vec![(0, 0, 1.0)])
    }

    /// `P^B`.
    pub fn black_marginal(&self) -> &[f64] {
        &self.black_marginal
    }

    /// `P^W`.
    pub fn white_marginal(&self) -> &[f64] {
        &self.white_marginal
    }

    /// `M + k - 1`: the largest link offset.
    pub fn reach(&self) -> u64 {
        self.m + self.k - 1
    }
}

/// Per-site label counts of black and white particles over a window.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSiteCounts {
    pub window: Window,
    black: Vec<Vec<(u32, u32)>>,
    white: Vec<Vec<(u32, u32)>>,
    /// Present when sampled with link bookkeeping.
    pub links: Option<Vec<Link>>,
}

/// A black particle and its linked white particle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Link {
    pub black_site: i64,
    pub white_site: i64,
    pub black_label: u32,
    pub white_label: u32,
}

fn bump(site: &mut Vec<(u32, u32)>, label: u32) {
    match site.iter_mut().find(|(l, _)| *l == label) {
        Some((_, c)) => *c += 1,
        None => site.push((label, 1)),
    }
}

impl LabeledSiteCounts {
    pub fn empty(window: Window) -> Self {
        Self {
            window,
            black: vec![Vec::new(); window.len()],
            white: vec![Vec::new(); window.len()],
            links: None,
        }
    }

    pub fn add_black(&mut self, x: i64, label: u32) {
        let i = self.window.index(x);
        bump(&mut self.black[i], label);
    }

    pub fn add_white(&mut self, x: i64, label: u32) {
        let i = self.window.index(x);
        bump(&mut self.white[i], label);
    }

    /// `(label, count)` pairs of black particles at `x`.
    pub fn black_at(&self, x: i64) -> &[(u32, u32)] {
        &self.black[self.window.index(x)]
    }

    pub fn white_at(&self, x: i64) -> &[(u32, u32)] {
        &self.white[self.window.index(x)]
    }

    pub fn black(&self, x: i64, label: u32) -> u32 {
        self.black_at(x).iter().find(|(l, _)| *l == label).map_or(0, |(_, c)| *c)
    }

    pub fn white(&self, x: i64, label: u32) -> u32 {
        self.white_at(x).iter().find(|(l, _)| *l == label).map_or(0, |(_, c)| *c)
    }

    pub fn black_total(&self, x: i64) -> u32 {
        self.black_at(x).iter().map(|(_, c)| c).sum()
    }

    pub fn white_total(&self, x: i64) -> u32 {
        self.white_at(x).iter().map(|(_, c)| c).sum()
    }

    pub fn black_totals(&self) -> Vec<u64> {
        self.window.sites().map(|x| self.black_total(x) as u64).collect()
    }

    pub fn white_totals(&self) -> Vec<u64> {
        self.window.sites().map(|x| self.white_total(x) as u64).collect()
    }
}

fn alias(weights: &[f64]) -> Result<WeightedAliasIndex<f64>> {
    WeightedAliasIndex::new(weights.to_vec())
        .map_err(|e| Error::Domain(format!("bad label weights: {e}")))
}

fn poisson(mean: f64) -> Result<Poisson<f64>> {
    Poisson::new(mean).map_err(|e| Error::Domain(format!("bad Poisson mean {mean}: {e}")))
}

/// Samples ξ on `window`: at every site, Poisson(δ/2) black and Poisson(δ/2)
/// white particles, labelled independently by `P^B` and `P^W`. By Poisson
/// thinning the label-`a` black counts are independent Poisson(P^B(a)δ/2).
pub fn sample_xi(params: &LemmaParams, window: Window, seed: u64) -> Result<LabeledSiteCounts> {
    let mut rng = rng(seed);
    let counts = poisson(params.delta / 2.0)?;
    let black_labels = alias(&params.black_marginal)?;
    let white_labels = alias(&params.white_marginal)?;
    let mut out = LabeledSiteCounts::empty(window);
    for x in window.sites() {
        let nb = counts.sample(&mut rng) as u64;
        for _ in 0..nb {
            out.add_black(x, black_labels.sample(&mut rng) as u32);
        }
        let nw = counts.sample(&mut rng) as u64;
        for _ in 0..nw {
            out.add_white(x, white_labels.sample(&mut rng) as u32);
        }
    }
    Ok(out)
}

/// Samples ζ on `window`. Black particles are drawn on the window extended
/// `M+k-1` sites to the left so every site of the window receives whites
/// with the stationary law. Links are recorded for blacks inside the
/// window when `keep_links` is set.
pub fn sample_zeta(
    params: &LemmaParams,
    window: Window,
    seed: u64,
    keep_links: bool,
) -> Result<LabeledSiteCounts> {
    let mut rng = rng(seed);
    let counts = poisson(params.delta / 2.0)?;
    let pairs = alias(&params.joining.iter().map(|j| j.2).collect::<Vec<_>>())?;
    let mut out = LabeledSiteCounts::empty(window);
    let mut links = keep_links.then(Vec::new);
    let extended = window.extend(params.reach(), 0);
    for x in extended.sites() {
        let nb = counts.sample(&mut rng) as u64;
        for _ in 0..nb {
            let offset = params.m + rng.random_range(0..params.k);
            let (a, b, _) = params.joining[pairs.sample(&mut rng)];
            let (a, b) = (a as u32, b as u32);
            let w = x + offset as i64;
            if window.contains(x) {
                out.add_black(x, a);
                if let Some(links) = links.as_mut() {
                    links.push(Link {
                        black_site: x,
                        white_site: w,
                        black_label: a,
                        white_label: b,
                    });
                }
            }
            if window.contains(w) {
                out.add_white(w, b);
            }
        }
    }
    out.links = links;
    Ok(out)
}

/// Free black particles of the enriched past, `F_j` for `j = 1..k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FreeCounts {
    /// `f[j-1]` = free blacks at site `-(M+k)+j`.
    pub f: Vec<u64>,
}

impl FreeCounts {
    pub fn zeros(k: usize) -> Self {
        Self { f: vec![0; k] }
    }

    pub fn get(&self, j: usize) -> u64 {
        self.f[j - 1]
    }

    pub fn total(&self) -> u64 {
        self.f.iter().sum()
    }

    /// `S = Σ_j F_j / j`, the sum of the Bernoulli parameters.
    pub fn parameter_sum(&self) -> f64 {
        self.f
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 / (i + 1) as f64)
            .sum()
    }
}

/// What the enriched past reveals about site 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EnrichedPast {
    pub free: FreeCounts,
    /// Free blacks at sites `-M+1..-1`; they cannot reach site 0.
    pub free_beyond_reach: u64,
    /// Blacks at `-(M+k-1)..-M` that are linked to whites left of 0.
    pub linked: u64,
}

/// Classifies the blacks of `[-depth, -1]` in a linked ζ sample: a black is
/// free iff its white lies at a site `≥ 0`.
pub fn enriched_past(params: &LemmaParams, sample: &LabeledSiteCounts, depth: u64) -> Result<EnrichedPast> {
    let reach = params.m + params.k;
    if depth < reach {
        return domain(format!("depth {depth} is below M + k = {reach}"));
    }
    let links = sample
        .links
        .as_ref()
        .ok_or_else(|| Error::Domain("enriched past needs a sample with links".into()))?;
    let past = Window::new(-(depth as i64), -1)?;
    if !sample.window.contains_window(&past) {
        return domain("sample window does not cover the requested past");
    }
    let mut free = FreeCounts::zeros(params.k as usize);
    let mut free_beyond_reach = 0;
    let mut linked = 0;
    let origin = -(reach as i64);
    for l in links.iter().filter(|l| past.contains(l.black_site)) {
        let j = l.black_site - origin;
        if l.white_site < 0 {
            if (1..=params.k as i64).contains(&j) {
                linked += 1;
            }
            continue;
        }
        if (1..=params.k as i64).contains(&j) {
            free.f[(j - 1) as usize] += 1;
        } else {
            free_beyond_reach += 1;
        }
    }
    Ok(EnrichedPast {
        free,
        free_beyond_reach,
        linked,
    })
}

/// Samples a minimal linked past `[-(M+k), -1]` and returns its enriched
/// past.
pub fn sample_enriched_past(params: &LemmaParams, seed: u64) -> Result<EnrichedPast> {
    let depth = params.m + params.k;
    let window = Window::new(-(depth as i64), -1)?;
    let sample = sample_zeta(params, window, seed, true)?;
    enriched_past(params, &sample, depth)
}

/// Trailing masses below this are dropped during convolution.
const CONVOLUTION_FLOOR: f64 = 1e-20;

/// Law of `Σ_j Σ_{ℓ ≤ F_j} B_ℓ^j` with independent `B_ℓ^j ~ Bernoulli(1/j)`.
pub fn conditional_white_law(free: &FreeCounts) -> Vec<f64> {
    let mut law = vec![1.0];
    let mut shift = 0usize;
    for (i, &count) in free.f.iter().enumerate() {
        let j = i + 1;
        if j == 1 {
            // Bernoulli(1) is the constant 1.
            shift += count as usize;
            continue;
        }
        let p = 1.0 / j as f64;
        for _ in 0..count {
            convolve_bernoulli(&mut law, p);
        }
    }
    if shift > 0 {
        let mut shifted = vec![0.0; shift];
        shifted.extend(law);
        law = shifted;
    }
    law
}

fn convolve_bernoulli(law: &mut Vec<f64>, p: f64) {
    let q = 1.0 - p;
    law.push(0.0);
    for i in (1..law.len()).rev() {
        law[i] = law[i] * q + law[i - 1] * p;
    }
    law[0] *= q;
    while law.len() > 1 && *law.last().unwrap() < CONVOLUTION_FLOOR {
        law.pop();
    }
}

/// Exact law of a sum of independent Bernoulli(`p_i`) variables.
pub fn bernoulli_sum_law(ps: &[f64]) -> Vec<f64> {
    let mut law = vec![1.0];
    for &p in ps {
        let q = 1.0 - p;
        law.push(0.0);
        for i in (1..law.len()).rev() {
            law[i] = law[i] * q + law[i - 1] * p;
        }
        law[0] *= q;
    }
    law
}

/// `Σ_ℓ |law(ℓ) - Poisson(λ)(ℓ)|`, with the Poisson mass beyond the support
/// of `law` added through its survival function.
pub fn l1_to_poisson(law: &[f64], lambda: f64) -> f64 {
    if lambda <= 0.0 {
        let off: f64 = law.iter().skip(1).map(|x| x.abs()).sum();
        return (law.first().copied().unwrap_or(0.0) - 1.0).abs() + off;
    }
    let dist = PoissonLaw::new(lambda).expect("positive mean");
    let head: f64 = law
        .iter()
        .enumerate()
        .map(|(l, &p)| (p - dist.pmf(l as u64)).abs())
        .sum();
    let last = law.len().saturating_sub(1) as u64;
    head + dist.sf(last)
}

/// `P(F_j = 0, j = 1..J) = exp(-δJ(J+1)/(4k))`.
pub fn no_free_probability(j_max: u64, k: u64, delta: f64) -> Result<f64> {
    if j_max > k {
        return domain(format!("J = {j_max} exceeds k = {k}"));
    }
    Ok((-delta * (j_max * (j_max + 1)) as f64 / (4.0 * k as f64)).exp())
}

pub fn harmonic(k: u64) -> f64 {
    (1..=k).map(|j| 1.0 / j as f64).sum()
}

/// Mean `δ/2` and variance `(δ/2k) H_k` of `S = Σ_j F_j / j`.
pub fn param_sum_stats(k: u64, delta: f64) -> Result<(f64, f64)> {
    if k == 0 {
        return domain("k must be at least 1");
    }
    Ok((delta / 2.0, delta / (2.0 * k as f64) * harmonic(k)))
}

/// Exact L1 gap between a Bernoulli sum and the Poisson law of equal mean,
/// and the Le Cam bound `2 Σ p_i²`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LeCamGap {
    pub exact_l1: f64,
    pub bound: f64,
    pub lambda: f64,
}

pub fn lecam_gap(ps: &[f64]) -> Result<LeCamGap> {
    if let Some(p) = ps.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return domain(format!("Bernoulli parameter {p} outside [0,1]"));
    }
    let lambda: f64 = ps.iter().sum();
    let law = bernoulli_sum_law(ps);
    Ok(LeCamGap {
        exact_l1: l1_to_poisson(&law, lambda),
        bound: 2.0 * ps.iter().map(|p| p * p).sum::<f64>(),
        lambda,
    })
}

/// Monte Carlo estimate of the conditional criterion over enriched pasts.
#[derive(Clone, Debug, Serialize)]
pub struct CriterionEstimate {
    pub replicates: usize,
    pub eps_target: f64,
    /// Fraction of pasts whose conditional law is more than `eps_target`
    /// away (L1) from Poisson(δ/2).
    pub bad_mass: f64,
    pub bad_mass_stderr: f64,
    /// Largest L1 distance among the remaining pasts.
    pub max_l1_good: f64,
    pub mean_l1: f64,
    /// `min_t max(P̂(L1 > t), t)` over the observed distances.
    pub best_eps: f64,
    #[serde(skip)]
    pub l1: Vec<f64>,
    #[serde(skip)]
    pub parameter_sums: Vec<f64>,
}

/// For every replicate, sample a linked past of depth `n_past`, compute the
/// exact conditional law of the white count at 0 and its L1 distance to
/// Poisson(δ/2).
pub fn conditional_criterion_estimate(
    params: &LemmaParams,
    n_past: u64,
    eps_target: f64,
    replicates: usize,
    seed: u64,
) -> Result<CriterionEstimate> {
    if n_past < params.m + params.k {
        return domain(format!("past depth {n_past} is below M + k"));
    }
    if replicates == 0 {
        return domain("need at least one replicate");
    }
    let window = Window::new(-(n_past as i64), -1)?;
    let target = params.delta / 2.0;
    let rows: Vec<(f64, f64)> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let sample = sample_zeta(params, window, seed_child(seed, "enriched-past", i), true)?;
            let past = enriched_past(params, &sample, n_past)?;
            let law = conditional_white_law(&past.free);
            Ok((l1_to_poisson(&law, target), past.free.parameter_sum()))
        })
        .collect::<Result<_>>()?;
    let l1: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let parameter_sums = rows.iter().map(|r| r.1).collect();
    let bad = l1.iter().filter(|&&d| d > eps_target).count();
    let bad_mass = bad as f64 / replicates as f64;
    let max_l1_good = l1
        .iter()
        .copied()
        .filter(|&d| d <= eps_target)
        .fold(0.0, f64::max);
    Ok(CriterionEstimate {
        replicates,
        eps_target,
        bad_mass,
        bad_mass_stderr: (bad_mass * (1.0 - bad_mass) / replicates as f64).sqrt(),
        max_l1_good,
        mean_l1: l1.iter().sum::<f64>() / replicates as f64,
        best_eps: best_epsilon(&l1),
        l1,
        parameter_sums,
    })
}

/// Smallest `ε` such that at most a fraction `ε` of the distances exceed `ε`.
pub fn best_epsilon(l1: &[f64]) -> f64 {
    let mut sorted = l1.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for t in std::iter::once(0.0).chain(sorted.iter().copied()) {
        let above = n - sorted.partition_point(|&x| x <= t);
        best = best.min(t.max(above as f64 / n as f64));
    }
    best
}

/// Draws one sample of the enriched-past Bernoulli sum directly (used to
/// cross-check [`conditional_white_law`]).
pub fn sample_white_given_past(free: &FreeCounts, rng: &mut LabRng) -> u64 {
    let mut total = 0;
    for (i, &c) in free.f.iter().enumerate() {
        let p = 1.0 / (i + 1) as f64;
        for _ in 0..c {
            if rng.random::<f64>() < p {
                total += 1;
            }
        }
    }
    total
}
