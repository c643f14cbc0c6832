//! Count processes of the Poisson suspension: the number of particles in
//! `A` at integer times, for the approximating transformations `T^(n)` and
//! for `T` itself on windows short enough to be decided by a finite stage.
//!
//! Counts are assembled from labelled black/white particle processes: a
//! black particle at site `s` with label `h^B` sits in `A_n` at time `s` and
//! visited `A` at `s - (h_1 + … + h_j)` on its way up the first half of the
//! tower; its white partner at `w` (`w - s` is the return time) keeps
//! visiting `A` at `w + (h^W_1 + … + h^W_j)` while climbing the second half.

use std::io::Write;

use num_traits::ToPrimitive;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;

use crate::construction::{Construction, LabelLaw};
use crate::error::{domain, Error, Result};
use crate::lemma::{sample_xi, sample_zeta, LabeledSiteCounts, LemmaParams};
use crate::schedule::StageSchedule;
use crate::seed::{rng, seed_split};
use crate::window::Window;

/// Provenance recorded with a count window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CountMeta {
    /// Stage of the approximating transformation (0 for the i.i.d. process).
    pub stage: u32,
    pub linked: bool,
    pub schedule_hash: Option<String>,
    pub seed: u64,
}

/// ℕ-valued counts on a window of sites.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountWindow {
    pub window: Window,
    pub values: Vec<u64>,
    pub meta: CountMeta,
}

impl CountWindow {
    pub fn get(&self, x: i64) -> u64 {
        self.values[self.window.index(x)]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// CSV with `# key=value` metadata lines, then `site,value` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# n={}", self.meta.stage)?;
        writeln!(out, "# linked={}", self.meta.linked)?;
        writeln!(
            out,
            "# schedule={}",
            self.meta.schedule_hash.as_deref().unwrap_or("none")
        )?;
        writeln!(out, "# seed={}", self.meta.seed)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["site", "value"])?;
        for (x, v) in self.window.sites().zip(&self.values) {
            w.write_record([x.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// i.i.d. Poisson(1) counts: the suspension over the doubly infinite tower.
pub fn sample_xi0(window: Window, seed: u64) -> Result<CountWindow> {
    let mut rng = rng(seed);
    let dist = Poisson::new(1.0).map_err(|e| Error::Domain(e.to_string()))?;
    let values = window.sites().map(|_| dist.sample(&mut rng) as u64).collect();
    Ok(CountWindow {
        window,
        values,
        meta: CountMeta {
            stage: 0,
            linked: false,
            schedule_hash: None,
            seed,
        },
    })
}

/// How the label joining of a stage is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LawMode {
    /// Exact enumeration of the label partition (stage `n` must be built).
    Exact,
    /// Monte Carlo over uniform points of `A_n` (only stages `< n` needed).
    Sampled { samples: usize, seed: u64 },
}

/// Lemma parameters attached to stage `n`, with the alphabet description.
#[derive(Clone, Debug, Serialize)]
pub struct StageParams {
    pub stage: u32,
    pub params: LemmaParams,
    /// `R_{n-1}`: every label entry lies in `{1..R_{n-1}}`.
    pub alphabet_max: u64,
    /// `2^(n-1) - 1`: label length.
    pub label_len: u64,
    /// `R_{n-1}(2^(n-1) - 1)`: how far a particle's visits reach from its
    /// `A_n` (or `S A_n`) site.
    pub extension: u64,
}

/// `δ_n = 2^(1-n)`, `M = M_n`, `k = k_n`, and the label joining of stage `n`.
pub fn stage_lemma_params(c: &Construction, n: u32, mode: LawMode) -> Result<StageParams> {
    if n == 0 {
        return domain("stage parameters exist for n ≥ 1");
    }
    let stage = c
        .schedule()
        .stage(n)
        .ok_or_else(|| Error::Domain(format!("schedule has no stage {n}")))?;
    let law = match mode {
        LawMode::Exact => c.label_law(n)?,
        LawMode::Sampled { samples, seed } => c.label_law_sampled(n, samples, &mut rng(seed))?,
    };
    let (alphabet, joining) = index_law(&law);
    let params = LemmaParams::new(2f64.powi(1 - n as i32), stage.m, stage.k, alphabet, joining)?;
    let label_len = (1u64 << (n - 1)) - 1;
    let alphabet_max = c.schedule().max_return_time(n - 1);
    Ok(StageParams {
        stage: n,
        params,
        alphabet_max,
        label_len,
        extension: alphabet_max * label_len,
    })
}

type Joining = Vec<(usize, usize, f64)>;

/// Turns a law over label pairs into an indexed alphabet and joining.
fn index_law(law: &LabelLaw) -> (Vec<Vec<u64>>, Joining) {
    let mut alphabet: Vec<Vec<u64>> = law
        .entries
        .iter()
        .flat_map(|(p, _)| [p.hb.clone(), p.hw.clone()])
        .collect();
    alphabet.sort();
    alphabet.dedup();
    let idx = |l: &Vec<u64>| alphabet.binary_search(l).expect("label in alphabet");
    let joining = law
        .entries
        .iter()
        .map(|(p, mass)| (idx(&p.hb), idx(&p.hw), mass.to_f64().unwrap_or(0.0)))
        .collect();
    (alphabet, joining)
}

/// Counts in `A` at every time of `window`, from labelled particles.
pub fn reconstruct_xi_n(
    labeled: &LabeledSiteCounts,
    stage: &StageParams,
    window: Window,
) -> Result<CountWindow> {
    let needed = window.extend(stage.extension, stage.extension);
    if !labeled.window.contains_window(&needed) {
        return domain(format!(
            "labelled window {:?} does not cover {:?} (extension {})",
            labeled.window, needed, stage.extension
        ));
    }
    let alphabet = &stage.params.alphabet;
    let mut values = vec![0u64; window.len()];
    let mut add = |x: i64, c: u32| {
        if window.contains(x) {
            values[window.index(x)] += c as u64;
        }
    };
    for s in labeled.window.sites() {
        for &(label, count) in labeled.black_at(s) {
            let mut x = s;
            add(x, count);
            for &h in &alphabet[label as usize] {
                x -= h as i64;
                add(x, count);
            }
        }
        for &(label, count) in labeled.white_at(s) {
            let mut x = s;
            add(x, count);
            for &h in &alphabet[label as usize] {
                x += h as i64;
                add(x, count);
            }
        }
    }
    Ok(CountWindow {
        window,
        values,
        meta: CountMeta {
            stage: stage.stage,
            linked: labeled.links.is_some(),
            schedule_hash: None,
            seed: 0,
        },
    })
}

/// `ξ^(n)` on `window` (linked) or the stage-`n` representation of
/// `ξ^(n-1)` (unlinked).
pub fn sample_xi_n(
    c: &Construction,
    n: u32,
    window: Window,
    seed: u64,
    linked: bool,
    mode: LawMode,
) -> Result<CountWindow> {
    if n == 0 {
        return sample_xi0(window, seed);
    }
    let stage = stage_lemma_params(c, n, mode)?;
    sample_with_params(c.schedule(), &stage, window, seed, linked)
}

/// Like [`sample_xi_n`] with precomputed stage parameters.
pub fn sample_with_params(
    schedule: &StageSchedule,
    stage: &StageParams,
    window: Window,
    seed: u64,
    linked: bool,
) -> Result<CountWindow> {
    let labeled_window = window.extend(stage.extension, stage.extension);
    let particle_seed = seed_split(seed, &["particles"]);
    let labeled = if linked {
        sample_zeta(&stage.params, labeled_window, particle_seed, false)?
    } else {
        sample_xi(&stage.params, labeled_window, particle_seed)?
    };
    let mut out = reconstruct_xi_n(&labeled, stage, window)?;
    out.meta = CountMeta {
        stage: if linked { stage.stage } else { stage.stage - 1 },
        linked,
        schedule_hash: Some(schedule.hash()),
        seed,
    };
    Ok(out)
}

/// A window of `ξ^(∞)` on `[0, len-1]`, realised through the smallest stage
/// `n` with `M_{n+1} > len`. Returns the window and `n`.
pub fn sample_xi_infinity(
    len: usize,
    schedule: &StageSchedule,
    seed: u64,
    mode: LawMode,
) -> Result<(CountWindow, u32)> {
    let n = schedule.first_stage_with_gap(len as u64).ok_or_else(|| Error::Budget {
        what: "stages (need M_{n+1} > window length)",
        needed: len as u128 + 1,
        budget: schedule.stages().last().map_or(0, |s| s.m) as u128,
    })?;
    let build_to = if matches!(mode, LawMode::Exact) { n } else { n - 1 };
    let c = Construction::build_through(schedule.clone(), build_to)?;
    let w = sample_xi_n(&c, n, Window::from_len(len)?, seed, true, mode)?;
    Ok((w, n))
}

/// Largest distance between two visits to `A` of one linked pair at stage
/// `n`; sites farther apart than this are independent.
pub fn dependence_span(schedule: &StageSchedule, n: u32) -> u64 {
    if n == 0 {
        return 0;
    }
    let stage = schedule.stage(n).expect("stage exists");
    let ext = schedule.max_return_time(n - 1) * ((1u64 << (n - 1)) - 1);
    2 * ext + stage.m + stage.k - 1
}

/// Non-overlapping blocks of length `len` separated by `gap` sites.
pub fn spaced_blocks(values: &[u64], len: usize, gap: usize) -> Vec<Vec<u64>> {
    values
        .chunks(len + gap)
        .filter(|c| c.len() >= len)
        .map(|c| c[..len].to_vec())
        .collect()
}
