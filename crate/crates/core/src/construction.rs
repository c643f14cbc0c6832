//! The Von Neumann–Kakutani odometer on `A = [0,1)`, its cutting-and-stacking
//! towers, and the staged first-return time `r_A` of the tower transformation.
//!
//! Everything here is exact: interval endpoints are arbitrary-precision
//! rationals and points of `A` are dyadic rationals.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;

use crate::error::{domain, Error, Result};
use crate::schedule::StageSchedule;

/// Default cap on the number of pieces built for a single stage.
pub const DEFAULT_ATOM_BUDGET: usize = 1_000_000;

/// Default cap on the number of rungs materialised by [`tower`].
pub const DEFAULT_RUNG_BUDGET: u64 = 1 << 20;

/// A point `numerator / 2^level` of `[0,1)`, kept in canonical form
/// (numerator odd, or zero with level zero).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DyadicPoint {
    numerator: BigUint,
    level: u32,
}

impl DyadicPoint {
    pub fn new(numerator: impl Into<BigUint>, level: u32) -> Result<Self> {
        let numerator = numerator.into();
        if numerator >= (BigUint::one() << level) {
            return domain(format!("{numerator}/2^{level} is not in [0,1)"));
        }
        Ok(Self::canonical(numerator, level))
    }

    pub fn zero() -> Self {
        Self {
            numerator: BigUint::zero(),
            level: 0,
        }
    }

    fn canonical(mut numerator: BigUint, mut level: u32) -> Self {
        if numerator.is_zero() {
            return Self::zero();
        }
        let tz = numerator.trailing_zeros().unwrap_or(0).min(level as u64) as u32;
        numerator >>= tz;
        level -= tz;
        Self { numerator, level }
    }

    pub fn numerator(&self) -> &BigUint {
        &self.numerator
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn to_rational(&self) -> BigRational {
        BigRational::new(
            BigInt::from(self.numerator.clone()),
            BigInt::one() << self.level,
        )
    }

    pub fn to_f64(&self) -> f64 {
        self.to_rational().to_f64().unwrap_or(f64::NAN)
    }

    /// Binary digit `d_i` (weight `2^-i`), `i >= 1`.
    fn digit(&self, i: u32) -> bool {
        i <= self.level && self.numerator.bit((self.level - i) as u64)
    }

    /// Number of leading binary digits equal to `value`, capped at `level`.
    fn leading_run(&self, value: bool) -> u32 {
        (1..=self.level)
            .take_while(|&i| self.digit(i) == value)
            .count() as u32
    }

    /// Index `m` with `self ∈ A_m`.
    pub fn a_index(&self) -> u32 {
        self.leading_run(true) + 1
    }

    /// The first `m` binary digits as an integer, `d_1` most significant.
    pub fn leading_digits(&self, m: u32) -> u64 {
        assert!(m <= 64);
        (1..=m).fold(0u64, |acc, i| (acc << 1) | self.digit(i) as u64)
    }

    /// The odometer `S`: add one to the binary expansion read with the
    /// most significant digit (weight 1/2) as the least significant place.
    pub fn odometer_apply(&self) -> DyadicPoint {
        // x in [1 - 2^-k, 1 - 2^-(k+1))  ->  x - 1 + 2^-k + 2^-(k+1)
        let k = self.leading_run(true);
        let level = self.level.max(k + 1);
        let x = BigInt::from(self.numerator.clone()) << (level - self.level);
        let one = BigInt::one();
        let value = x - (&one << level) + (&one << (level - k)) + (&one << (level - k - 1));
        let numerator = value
            .to_biguint()
            .expect("odometer image stays in [0,1)");
        Self::canonical(numerator, level)
    }

    /// The inverse odometer. Undefined at 0, whose preimage is the
    /// non-representable all-ones point.
    pub fn odometer_inverse(&self) -> Result<DyadicPoint> {
        if self.numerator.is_zero() {
            return domain("the odometer preimage of 0 is not a dyadic point of [0,1)");
        }
        // x in [2^-(k+1), 2^-k)  ->  x + 1 - 2^-k - 2^-(k+1)
        let k = self.leading_run(false);
        let level = self.level.max(k + 1);
        let x = BigInt::from(self.numerator.clone()) << (level - self.level);
        let one = BigInt::one();
        let value = x + (&one << level) - (&one << (level - k)) - (&one << (level - k - 1));
        let numerator = value.to_biguint().expect("preimage stays in [0,1)");
        Ok(Self::canonical(numerator, level))
    }

    /// Uniform random dyadic point of `interval`, resolved to `extra_bits`
    /// bits below the interval's own dyadic grid. The interval must have
    /// dyadic endpoints.
    pub fn sample_in<R: Rng + ?Sized>(rng: &mut R, base: &DyadicPoint, width_level: u32, extra_bits: u32) -> DyadicPoint {
        let level = width_level + extra_bits;
        let mut offset = BigUint::zero();
        let mut remaining = extra_bits;
        while remaining > 0 {
            let take = remaining.min(32);
            offset = (offset << take) | BigUint::from(rng.random::<u32>() >> (32 - take));
            remaining -= take;
        }
        let base_num = if base.level <= level {
            base.numerator.clone() << (level - base.level)
        } else {
            panic!("base point finer than the sampling grid");
        };
        Self::canonical(base_num + offset, level)
    }
}

impl fmt::Display for DyadicPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.level == 0 {
            write!(f, "{}", self.numerator)
        } else {
            write!(f, "{}/{}", self.numerator, BigUint::one() << self.level)
        }
    }
}

impl PartialOrd for DyadicPoint {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for DyadicPoint {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let level = self.level.max(other.level);
        let a = &self.numerator << (level - self.level);
        let b = &other.numerator << (level - other.level);
        a.cmp(&b)
    }
}

/// Half-open interval `[left, right)` with rational endpoints.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Interval {
    pub left: BigRational,
    pub right: BigRational,
}

impl Interval {
    pub fn new(left: BigRational, right: BigRational) -> Self {
        debug_assert!(left < right);
        Self { left, right }
    }

    pub fn length(&self) -> BigRational {
        &self.right - &self.left
    }

    pub fn contains(&self, x: &BigRational) -> bool {
        &self.left <= x && x < &self.right
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.left, self.right)
    }
}

fn pow2_inv(e: u32) -> BigRational {
    BigRational::new(BigInt::one(), BigInt::one() << e)
}

/// `A_m = [1 - 2^-(m-1), 1 - 2^-(m-1) + 2^-m)`: the points whose binary
/// expansion starts with `m-1` ones followed by a zero.
pub fn a_set(m: u32) -> Interval {
    assert!(m >= 1);
    let left = BigRational::one() - pow2_inv(m - 1);
    let right = &left + pow2_inv(m);
    Interval::new(left, right)
}

/// Index `m` with `x ∈ A_m`, for `x ∈ [0,1)`.
pub fn a_index(x: &BigRational) -> u32 {
    let mut m = 1;
    let mut bound = pow2_inv(1);
    let half = pow2_inv(1);
    let one = BigRational::one();
    // A_1 ∪ ... ∪ A_m = [0, 1 - 2^-m)
    while x >= &(&one - &bound) {
        m += 1;
        bound = &bound * &half;
    }
    m
}

/// Position of rung `i` of any tower in the `A_m` decomposition:
/// rung `i` (1-based, not the top) lies in `A_{tz(i)+1}`.
pub fn rung_stage(i: u64) -> u32 {
    i.trailing_zeros() + 1
}

/// Tower `n` of the odometer: `2^n` dyadic rungs of length `2^-n`, listed
/// bottom to top, each mapped by `S` onto the next by translation.
#[derive(Clone, Debug)]
pub struct Tower {
    pub n: u32,
    pub rungs: Vec<Interval>,
}

impl Tower {
    /// 1-based index of the rung equal to `A_n`.
    pub fn a_n_index(&self) -> usize {
        1 << (self.n - 1)
    }

    pub fn rung(&self, i: usize) -> &Interval {
        &self.rungs[i - 1]
    }

    pub fn a_n(&self) -> &Interval {
        self.rung(self.a_n_index())
    }
}

/// Left endpoint of rung `i` (1-based) of Tower `n`: the bit reversal of
/// `i - 1` over `n` bits, divided by `2^n`.
pub fn rung_base(n: u32, i: u64) -> DyadicPoint {
    let idx = i - 1;
    let mut rev: u64 = 0;
    for b in 0..n {
        if idx >> b & 1 == 1 {
            rev |= 1 << (n - 1 - b);
        }
    }
    DyadicPoint::new(BigUint::from(rev), n).expect("rung base in [0,1)")
}

pub fn tower(n: u32, rung_budget: u64) -> Result<Tower> {
    if n == 0 {
        return domain("tower index must be at least 1");
    }
    if n >= 63 || (1u64 << n) > rung_budget {
        return Err(Error::Budget {
            what: "tower rungs",
            needed: 1u128 << n.min(127),
            budget: rung_budget as u128,
        });
    }
    let width = pow2_inv(n);
    let rungs = (1..=(1u64 << n))
        .map(|i| {
            let left = rung_base(n, i).to_rational();
            let right = &left + &width;
            Interval::new(left, right)
        })
        .collect();
    Ok(Tower { n, rungs })
}

/// Return-time labels of a point `y ∈ A_n`.
///
/// `hb[j-1] = r(S^-j y)` for `j = 1..2^(n-1)-1` (nearest rung first, i.e.
/// walking the backward orbit down the first half of Tower `n`), and
/// `hw[j-1] = r(S^j y)` for the same range (climbing the second half from
/// `S y`). With this ordering the partial sums of `hb` (resp. `hw`) are the
/// times separating the visits of a particle to `A`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelPair {
    pub hb: Vec<u64>,
    pub hw: Vec<u64>,
}

impl LabelPair {
    pub fn empty() -> Self {
        Self {
            hb: Vec::new(),
            hw: Vec::new(),
        }
    }
}

/// One constant piece of the return-time function on `A_n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Piece {
    pub interval: Interval,
    pub r: u64,
}

/// A cell of the label partition of `A_n`, with its atom index.
#[derive(Clone, Debug)]
pub struct LabelCell {
    pub interval: Interval,
    pub atom: usize,
}

/// Return time on `A_n` together with the label partition it was built from.
#[derive(Clone, Debug)]
pub struct ReturnTimeMap {
    pub stage: u32,
    /// Sorted by left endpoint; partitions `A_n`.
    pub pieces: Vec<Piece>,
    /// Atoms of the `(h^B, h^W)` partition in left-to-right order of first
    /// appearance.
    pub atoms: Vec<LabelPair>,
    /// Interval cells of the label partition, sorted.
    pub cells: Vec<LabelCell>,
}

impl ReturnTimeMap {
    /// Return time at `x`, or `None` if `x ∉ A_n`.
    pub fn lookup(&self, x: &BigRational) -> Option<u64> {
        let idx = self.pieces.partition_point(|p| &p.interval.left <= x);
        if idx == 0 {
            return None;
        }
        let piece = &self.pieces[idx - 1];
        piece.interval.contains(x).then_some(piece.r)
    }

    /// Label atom index of `x ∈ A_n`.
    pub fn atom_at(&self, x: &BigRational) -> Option<usize> {
        let idx = self.cells.partition_point(|c| &c.interval.left <= x);
        if idx == 0 {
            return None;
        }
        let cell = &self.cells[idx - 1];
        cell.interval.contains(x).then_some(cell.atom)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_pieces_csv(std::slice::from_ref(self), out)
    }
}

/// CSV export with columns `stage,left_num,left_den,right_num,right_den,r`.
pub fn write_pieces_csv<W: Write>(maps: &[ReturnTimeMap], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stage", "left_num", "left_den", "right_num", "right_den", "r"])?;
    for map in maps {
        for p in &map.pieces {
            w.write_record([
                map.stage.to_string(),
                p.interval.left.numer().to_string(),
                p.interval.left.denom().to_string(),
                p.interval.right.numer().to_string(),
                p.interval.right.denom().to_string(),
                p.r.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Exact joint law of `(h^B, h^W)` for `y` uniform on `A_n`.
#[derive(Clone, Debug)]
pub struct LabelLaw {
    pub stage: u32,
    pub entries: Vec<(LabelPair, BigRational)>,
}

impl LabelLaw {
    pub fn total_mass(&self) -> BigRational {
        self.entries
            .iter()
            .fold(BigRational::zero(), |acc, (_, p)| acc + p)
    }

    pub fn black_marginal(&self) -> BTreeMap<Vec<u64>, BigRational> {
        let mut out = BTreeMap::new();
        for (pair, p) in &self.entries {
            *out.entry(pair.hb.clone()).or_insert_with(BigRational::zero) += p;
        }
        out
    }

    pub fn white_marginal(&self) -> BTreeMap<Vec<u64>, BigRational> {
        let mut out = BTreeMap::new();
        for (pair, p) in &self.entries {
            *out.entry(pair.hw.clone()).or_insert_with(BigRational::zero) += p;
        }
        out
    }
}

/// The tower transformation built through some stage: the schedule plus
/// the return-time maps on `A_1, …, A_n`.
#[derive(Clone, Debug)]
pub struct Construction {
    schedule: StageSchedule,
    maps: Vec<ReturnTimeMap>,
    atom_budget: usize,
}

impl Construction {
    pub fn new(schedule: StageSchedule) -> Self {
        Self::with_budget(schedule, DEFAULT_ATOM_BUDGET)
    }

    pub fn with_budget(schedule: StageSchedule, atom_budget: usize) -> Self {
        Self {
            schedule,
            maps: Vec::new(),
            atom_budget,
        }
    }

    /// Build every stage up to and including `n`.
    pub fn build_through(schedule: StageSchedule, n: u32) -> Result<Self> {
        let mut c = Self::new(schedule);
        c.ensure_stage(n)?;
        Ok(c)
    }

    pub fn schedule(&self) -> &StageSchedule {
        &self.schedule
    }

    pub fn built_stages(&self) -> u32 {
        self.maps.len() as u32
    }

    pub fn ensure_stage(&mut self, n: u32) -> Result<()> {
        while self.built_stages() < n {
            let next = self.built_stages() + 1;
            let map = self.build_return_map(next)?;
            self.maps.push(map);
        }
        Ok(())
    }

    pub fn map(&self, n: u32) -> Option<&ReturnTimeMap> {
        self.maps.get((n as usize).checked_sub(1)?)
    }

    fn require(&self, n: u32) -> Result<&ReturnTimeMap> {
        self.map(n)
            .ok_or_else(|| Error::Domain(format!("stage {n} has not been built")))
    }

    /// Return time `r_A(x)` if `x` lies in a built stage, `None` on the
    /// roof of the last built tower.
    pub fn return_time(&self, x: &BigRational) -> Option<u64> {
        let m = a_index(x);
        self.map(m)?.lookup(x)
    }

    pub fn return_time_at(&self, y: &DyadicPoint) -> Option<u64> {
        self.return_time(&y.to_rational())
    }

    /// Builds the return map on `A_n` from the already built stages `< n`.
    ///
    /// The label partition of `A_n` is the common refinement of the
    /// translated piece boundaries of every rung of Tower `n` other than
    /// `A_n` and the roof. Each atom (a set of cells with equal labels,
    /// read left to right) is cut into `k_n` pieces of equal measure, piece
    /// `j` receiving `M_n + j - 1`.
    fn build_return_map(&self, n: u32) -> Result<ReturnTimeMap> {
        if n == 0 {
            return domain("stages are indexed from 1");
        }
        if self.built_stages() + 1 != n {
            return domain(format!("stage {n} requires stages 1..{} first", n - 1));
        }
        let stage = self
            .schedule
            .stage(n)
            .ok_or_else(|| Error::Domain(format!("schedule has no stage {n}")))?;
        if n >= 40 {
            return Err(Error::Budget {
                what: "tower rungs",
                needed: 1u128 << n,
                budget: DEFAULT_RUNG_BUDGET as u128,
            });
        }

        let half: u64 = 1 << (n - 1);
        let a_n = a_set(n);
        let base = |i: u64| rung_base(n, i).to_rational();
        let a_n_base = base(half);
        // S^-j y = y - back[j-1],  S^j y = y + fwd[j-1]
        let back: Vec<BigRational> = (1..half).map(|j| &a_n_base - base(half - j)).collect();
        let fwd: Vec<BigRational> = (1..half).map(|j| base(half + j) - &a_n_base).collect();

        let mut breaks: Vec<BigRational> = vec![a_n.left.clone(), a_n.right.clone()];
        let mut collect = |rung: u64, shift: &BigRational, sign_back: bool| -> Result<()> {
            let m = rung_stage(rung);
            let map = self.require(m)?;
            let lo = base(rung);
            let hi = &lo + pow2_inv(n);
            let rung_iv = Interval::new(lo, hi);
            let start = map.pieces.partition_point(|p| p.interval.right <= rung_iv.left);
            for p in &map.pieces[start..] {
                if p.interval.left >= rung_iv.right {
                    break;
                }
                for e in [&p.interval.left, &p.interval.right] {
                    if e > &rung_iv.left && e < &rung_iv.right {
                        breaks.push(if sign_back { e + shift } else { e - shift });
                    }
                }
            }
            if breaks.len() > self.atom_budget.saturating_mul(2) {
                return Err(Error::Budget {
                    what: "label cells",
                    needed: breaks.len() as u128,
                    budget: self.atom_budget as u128,
                });
            }
            Ok(())
        };
        for j in 1..half {
            collect(half - j, &back[(j - 1) as usize], true)?;
            collect(half + j, &fwd[(j - 1) as usize], false)?;
        }
        breaks.sort();
        breaks.dedup();

        let two = BigRational::from_integer(BigInt::from(2));
        let mut atoms: Vec<LabelPair> = Vec::new();
        let mut atom_ids: BTreeMap<LabelPair, usize> = BTreeMap::new();
        let mut cells: Vec<LabelCell> = Vec::with_capacity(breaks.len());
        for w in breaks.windows(2) {
            let interval = Interval::new(w[0].clone(), w[1].clone());
            let mid = (&w[0] + &w[1]) / &two;
            let mut label = LabelPair::empty();
            for j in 1..half {
                let xb = &mid - &back[(j - 1) as usize];
                let xw = &mid + &fwd[(j - 1) as usize];
                label.hb.push(self.return_time(&xb).ok_or_else(|| {
                    Error::Domain(format!("return time undefined below A_{n}"))
                })?);
                label.hw.push(self.return_time(&xw).ok_or_else(|| {
                    Error::Domain(format!("return time undefined above A_{n}"))
                })?);
            }
            let next = atoms.len();
            let atom = *atom_ids.entry(label.clone()).or_insert_with(|| {
                atoms.push(label);
                next
            });
            cells.push(LabelCell { interval, atom });
        }

        let needed = cells.len() as u128 * stage.k as u128;
        if needed > self.atom_budget as u128 {
            return Err(Error::Budget {
                what: "return-time pieces",
                needed,
                budget: self.atom_budget as u128,
            });
        }

        let mut by_atom: Vec<Vec<&Interval>> = vec![Vec::new(); atoms.len()];
        for c in &cells {
            by_atom[c.atom].push(&c.interval);
        }
        let k = BigRational::from_integer(BigInt::from(stage.k));
        let mut pieces = Vec::new();
        for ivs in &by_atom {
            let total = ivs.iter().fold(BigRational::zero(), |acc, iv| acc + iv.length());
            let step = &total / &k;
            // Walk the concatenated cells, cutting every `step` of measure.
            let mut j: u64 = 0;
            let mut consumed = BigRational::zero();
            let mut next_cut = step.clone();
            for iv in ivs {
                let mut left = iv.left.clone();
                let cell_end = &consumed + iv.length();
                while next_cut < cell_end && j + 1 < stage.k {
                    let cut = &iv.left + (&next_cut - &consumed);
                    if cut > left {
                        pieces.push(Piece {
                            interval: Interval::new(left.clone(), cut.clone()),
                            r: stage.m + j,
                        });
                    }
                    left = cut;
                    j += 1;
                    next_cut += &step;
                }
                if left < iv.right {
                    pieces.push(Piece {
                        interval: Interval::new(left, iv.right.clone()),
                        r: stage.m + j,
                    });
                }
                consumed = cell_end;
                if next_cut == consumed && j + 1 < stage.k {
                    j += 1;
                    next_cut += &step;
                }
            }
        }
        pieces.sort_by(|a, b| a.interval.left.cmp(&b.interval.left));

        Ok(ReturnTimeMap {
            stage: n,
            pieces,
            atoms,
            cells,
        })
    }

    /// Labels of `y ∈ A_n`, computed by walking the odometer orbit of `y`
    /// through Tower `n`.
    pub fn label_of(&self, y: &DyadicPoint, n: u32) -> Result<LabelPair> {
        if n == 0 {
            return domain("stages are indexed from 1");
        }
        if !a_set(n).contains(&y.to_rational()) {
            return domain(format!("{y} is not in A_{n}"));
        }
        if n > 1 {
            self.require(n - 1)?;
        }
        let half: u64 = 1 << (n - 1);
        let undefined = |x: &DyadicPoint| Error::Domain(format!("return time undefined at {x}"));
        let mut label = LabelPair::empty();
        let mut x = y.clone();
        for _ in 1..half {
            x = x.odometer_inverse()?;
            label.hb.push(self.return_time_at(&x).ok_or_else(|| undefined(&x))?);
        }
        let mut x = y.odometer_apply();
        for _ in 1..half {
            label.hw.push(self.return_time_at(&x).ok_or_else(|| undefined(&x))?);
            x = x.odometer_apply();
        }
        Ok(label)
    }

    /// Exact law of `(h^B, h^W)` under the normalised measure on `A_n`.
    /// Stage `n` must have been built.
    pub fn label_law(&self, n: u32) -> Result<LabelLaw> {
        if n == 0 {
            return domain("stages are indexed from 1");
        }
        let map = self.require(n)?;
        let mu = a_set(n).length();
        let mut masses = vec![BigRational::zero(); map.atoms.len()];
        for c in &map.cells {
            masses[c.atom] += c.interval.length();
        }
        let entries = map
            .atoms
            .iter()
            .cloned()
            .zip(masses.into_iter().map(|m| m / &mu))
            .collect();
        Ok(LabelLaw { stage: n, entries })
    }

    /// Monte Carlo approximation of the label law, for stages whose exact
    /// partition is over budget. Only stages `< n` need to be built.
    pub fn label_law_sampled<R: Rng + ?Sized>(
        &self,
        n: u32,
        samples: usize,
        rng: &mut R,
    ) -> Result<LabelLaw> {
        if samples == 0 {
            return domain("at least one sample is required");
        }
        let base = rung_base(n, 1 << (n - 1));
        let mut counts: BTreeMap<LabelPair, u64> = BTreeMap::new();
        for _ in 0..samples {
            let y = DyadicPoint::sample_in(rng, &base, n, 48);
            *counts.entry(self.label_of(&y, n)?).or_insert(0) += 1;
        }
        let total = BigInt::from(samples);
        let entries = counts
            .into_iter()
            .map(|(pair, c)| (pair, BigRational::new(BigInt::from(c), total.clone())))
            .collect();
        Ok(LabelLaw { stage: n, entries })
    }

    /// `Σ length(piece) · r(piece)` over all built stages.
    pub fn kac_sum(&self) -> BigRational {
        self.maps
            .iter()
            .flat_map(|m| m.pieces.iter())
            .fold(BigRational::zero(), |acc, p| {
                acc + p.interval.length() * BigRational::from_integer(BigInt::from(p.r))
            })
    }

    /// Measure of the part of the space swept through stage `n`:
    /// `Σ_{i≤n} 2^-i (M_i + (k_i - 1)/2)`.
    pub fn kac_closed_form(&self, n: u32) -> BigRational {
        let two = BigInt::from(2);
        (1..=n)
            .filter_map(|i| self.schedule.stage(i).map(|s| (i, s)))
            .fold(BigRational::zero(), |acc, (i, s)| {
                let mean = BigRational::new(BigInt::from(2 * s.m + s.k - 1), two.clone());
                acc + pow2_inv(i) * mean
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    fn dp(n: u64, level: u32) -> DyadicPoint {
        DyadicPoint::new(BigUint::from(n), level).unwrap()
    }

    /// Brute-force cutting and stacking: towers as explicit interval lists.
    fn stacked_towers(depth: u32) -> Vec<Vec<(BigRational, BigRational)>> {
        let mut towers = vec![vec![(q(0, 1), q(1, 1))]];
        for _ in 0..depth {
            let prev = towers.last().unwrap();
            let mut left = Vec::new();
            let mut right = Vec::new();
            for (a, b) in prev {
                let mid = (a + b) / q(2, 1);
                left.push((a.clone(), mid.clone()));
                right.push((mid, b.clone()));
            }
            left.extend(right);
            towers.push(left);
        }
        towers
    }

    fn brute_odometer(x: &BigRational, depth: u32) -> BigRational {
        let t = &stacked_towers(depth)[depth as usize];
        for (i, (a, b)) in t.iter().enumerate() {
            if a <= x && x < b {
                let (na, _) = &t[i + 1];
                return na + (x - a);
            }
        }
        unreachable!()
    }

    #[test]
    fn odometer_examples() {
        assert_eq!(DyadicPoint::zero().odometer_apply(), dp(1, 1));
        assert_eq!(dp(1, 1).odometer_apply(), dp(1, 2));
        assert_eq!(dp(3, 2).odometer_apply(), dp(1, 3));
        assert_eq!(dp(7, 3).odometer_apply(), dp(1, 4));
        assert_eq!(brute_odometer(&q(1, 2), 2), q(1, 4));
        assert_eq!(brute_odometer(&q(3, 4), 3), q(1, 8));
        assert_eq!(brute_odometer(&q(7, 8), 4), q(1, 16));
    }

    #[test]
    fn odometer_matches_stacking_oracle() {
        for level in 1..=6u32 {
            for num in 0..(1u64 << level) {
                let x = dp(num, level);
                let r = x.to_rational();
                assert_eq!(x.odometer_apply().to_rational(), brute_odometer(&r, level + 1));
            }
        }
    }

    #[test]
    fn inverse_roundtrip_and_zero() {
        assert!(DyadicPoint::zero().odometer_inverse().is_err());
        for num in 1..256u64 {
            let x = dp(num, 8);
            assert_eq!(x.odometer_inverse().unwrap().odometer_apply(), x);
            assert_eq!(x.odometer_apply().odometer_inverse().unwrap(), x);
        }
    }

    #[test]
    fn dyadic_rejects_out_of_range_and_canonicalises() {
        assert!(DyadicPoint::new(BigUint::from(4u32), 2).is_err());
        let x = DyadicPoint::new(BigUint::from(4u32), 4).unwrap();
        assert_eq!((x.numerator().clone(), x.level()), (BigUint::from(1u32), 2));
    }

    #[test]
    fn tower_one_and_two() {
        let t1 = tower(1, DEFAULT_RUNG_BUDGET).unwrap();
        assert_eq!(t1.rungs, vec![Interval::new(q(0, 1), q(1, 2)), Interval::new(q(1, 2), q(1, 1))]);
        assert_eq!(t1.a_n(), &a_set(1));
        let t2 = tower(2, DEFAULT_RUNG_BUDGET).unwrap();
        let lefts: Vec<_> = t2.rungs.iter().map(|r| r.left.clone()).collect();
        assert_eq!(lefts, vec![q(0, 1), q(1, 2), q(1, 4), q(3, 4)]);
        assert_eq!(t2.a_n(), &Interval::new(q(1, 2), q(3, 4)));
        // A_2 is the left half of the top rung of Tower 1.
        assert_eq!(t2.a_n().left, t1.rungs[1].left);
        // S maps rung 1 onto rung 2 pointwise.
        for num in 0..64u64 {
            let x = dp(num, 8);
            let y = x.odometer_apply();
            assert!(t2.rung(2).contains(&y.to_rational()));
            assert_eq!(y.to_rational() - x.to_rational(), q(1, 2));
        }
    }

    #[test]
    fn tower_budget() {
        assert!(matches!(tower(5, 16), Err(Error::Budget { .. })));
        assert!(tower(0, 16).is_err());
    }

    #[test]
    fn towers_match_stacking_and_a_sets() {
        let stacked = stacked_towers(6);
        for n in 1..=6u32 {
            let t = tower(n, DEFAULT_RUNG_BUDGET).unwrap();
            for (i, rung) in t.rungs.iter().enumerate() {
                assert_eq!((rung.left.clone(), rung.right.clone()), stacked[n as usize][i]);
                let idx = (i + 1) as u64;
                if idx < (1 << n) {
                    let m = rung_stage(idx);
                    let a = a_set(m);
                    assert!(a.left <= rung.left && rung.right <= a.right);
                    assert_eq!(a_index(&rung.left), m);
                }
            }
            assert_eq!(t.a_n(), &a_set(n));
        }
    }

    #[test]
    fn measure_preservation_on_rungs() {
        let n = 4;
        let t = tower(n, DEFAULT_RUNG_BUDGET).unwrap();
        for i in 1..(1usize << n) {
            let rung = t.rung(i);
            let next = t.rung(i + 1);
            let base = rung_base(n, i as u64);
            let mut lo: Option<BigRational> = None;
            let mut hi: Option<BigRational> = None;
            // stratified midpoints (2s+1) / 2^(n+13)
            for s in 0..(1u64 << 12) {
                let num = (base.numerator() << (n + 13 - base.level())) + BigUint::from(2 * s + 1);
                let p = DyadicPoint::new(num, n + 13).unwrap();
                let x = p.to_rational();
                assert!(rung.contains(&x));
                let img = p.odometer_apply().to_rational();
                assert_eq!(&img - &x, &next.left - &rung.left);
                lo = Some(lo.map_or(img.clone(), |l| l.min(img.clone())));
                hi = Some(hi.map_or(img.clone(), |h| h.max(img.clone())));
            }
            let (lo, hi) = (lo.unwrap(), hi.unwrap());
            assert!(next.contains(&lo) && next.contains(&hi));
            assert_eq!(&lo - &next.left, &next.right - &hi);
        }
    }

    fn sched(ms: &[u64], ks: &[u64]) -> StageSchedule {
        StageSchedule::new(ms.iter().zip(ks).map(|(&m, &k)| (m, k)).collect()).unwrap()
    }

    #[test]
    fn stage_one_pieces() {
        let c = Construction::build_through(sched(&[2], &[4]), 1).unwrap();
        let pieces: Vec<_> = c.map(1).unwrap().pieces.iter().map(|p| (p.interval.left.clone(), p.interval.right.clone(), p.r)).collect();
        assert_eq!(
            pieces,
            vec![
                (q(0, 1), q(1, 8), 2),
                (q(1, 8), q(1, 4), 3),
                (q(1, 4), q(3, 8), 4),
                (q(3, 8), q(1, 2), 5)
            ]
        );
        for k in [1u64, 3, 7, 10] {
            let c = Construction::build_through(sched(&[3], &[k]), 1).unwrap();
            let map = c.map(1).unwrap();
            assert_eq!(map.pieces.len() as u64, k);
            for p in &map.pieces {
                assert_eq!(p.interval.length(), q(1, 2 * k as i64));
            }
        }
    }

    #[test]
    fn label_of_stage_two() {
        let c = Construction::build_through(sched(&[2, 6], &[4, 3]), 2).unwrap();
        let y = dp(1, 1);
        assert_eq!(c.label_of(&y, 2).unwrap(), LabelPair { hb: vec![2], hw: vec![4] });
        assert_eq!(c.label_of(&dp(1, 2), 1).unwrap(), LabelPair::empty());
        assert!(c.label_of(&dp(1, 2), 2).is_err());
    }

    #[test]
    fn label_law_stage_two_is_exact_enumeration() {
        // Rung 1 of Tower 2 is [0,1/4), covering stage-1 pieces with r ∈ {2,3};
        // rung 3 is [1/4,1/2) with r ∈ {4,5}; both translate onto the same
        // cut point 5/8 of A_2.
        let c = Construction::build_through(sched(&[2, 6], &[4, 3]), 2).unwrap();
        let law = c.label_law(2).unwrap();
        assert_eq!(law.total_mass(), BigRational::one());
        assert!(law.entries.len() <= 16);
        let bm = law.black_marginal();
        assert_eq!(bm.get(&vec![2]), Some(&q(1, 2)));
        assert_eq!(bm.get(&vec![3]), Some(&q(1, 2)));
        let wm = law.white_marginal();
        assert_eq!(wm.get(&vec![4]), Some(&q(1, 2)));
        assert_eq!(wm.get(&vec![5]), Some(&q(1, 2)));
        assert_eq!(c.label_law(1).unwrap().entries, vec![(LabelPair::empty(), BigRational::one())]);
    }

    /// Enumeration oracle: labels at every point of a fine dyadic grid of
    /// A_n, each weighted by the grid spacing.
    fn grid_label_law(c: &Construction, n: u32, bits: u32) -> BTreeMap<LabelPair, BigRational> {
        let base = rung_base(n, 1 << (n - 1));
        let mut out = BTreeMap::new();
        let w = q(1, 1 << bits);
        for s in 0..(1u64 << bits) {
            let num = (base.numerator() << (n + bits - base.level())) + BigUint::from(s);
            let y = DyadicPoint::new(num, n + bits).unwrap();
            // midpoint of the grid cell
            let y = DyadicPoint::new((y.numerator() << (n + bits + 1 - y.level())) + BigUint::one(), n + bits + 1).unwrap();
            *out.entry(c.label_of(&y, n).unwrap()).or_insert_with(BigRational::zero) += w.clone();
        }
        out
    }

    #[test]
    fn label_law_matches_grid_enumeration_when_cuts_are_dyadic() {
        let c = Construction::build_through(sched(&[2, 6, 10], &[4, 2, 2]), 3).unwrap();
        for n in 1..=3 {
            let law = c.label_law(n).unwrap();
            let oracle = grid_label_law(&c, n, 8);
            let exact: BTreeMap<_, _> = law.entries.iter().cloned().collect();
            assert_eq!(exact, oracle, "stage {n}");
        }
    }

    #[test]
    fn label_of_agrees_with_cell_atoms() {
        let mut c = Construction::new(sched(&[2, 6, 10], &[3, 5, 2]));
        c.ensure_stage(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 2..=3u32 {
            let map = c.map(n).unwrap();
            let base = rung_base(n, 1 << (n - 1));
            for _ in 0..200 {
                let y = DyadicPoint::sample_in(&mut rng, &base, n, 40);
                let atom = map.atom_at(&y.to_rational()).unwrap();
                assert_eq!(c.label_of(&y, n).unwrap(), map.atoms[atom]);
            }
        }
    }

    #[test]
    fn return_time_is_uniform_and_independent_of_labels() {
        let mut c = Construction::new(sched(&[2, 6, 10], &[3, 5, 4]));
        c.ensure_stage(3).unwrap();
        for n in 1..=3u32 {
            let map = c.map(n).unwrap();
            let s = c.schedule().stage(n).unwrap();
            let mu = a_set(n).length();
            let kq = BigRational::from_integer(BigInt::from(s.k));
            // joint law of (atom, r)
            let mut joint: BTreeMap<(usize, u64), BigRational> = BTreeMap::new();
            for p in &map.pieces {
                assert!(p.r >= s.m && p.r < s.m + s.k);
                let atom = map.atom_at(&p.interval.left).unwrap();
                // a piece never straddles two atoms
                let mid = (&p.interval.left + &p.interval.right) / q(2, 1);
                assert_eq!(map.atom_at(&mid), Some(atom));
                *joint.entry((atom, p.r)).or_insert_with(BigRational::zero) += p.interval.length() / &mu;
            }
            let law = c.label_law(n).unwrap();
            for (a, (_, pa)) in law.entries.iter().enumerate() {
                for v in s.m..s.m + s.k {
                    let got = joint.get(&(a, v)).cloned().unwrap_or_else(BigRational::zero);
                    assert_eq!(got, pa / &kq, "stage {n} atom {a} r {v}");
                }
            }
            // pieces partition A_n
            assert_eq!(map.pieces.first().unwrap().interval.left, a_set(n).left);
            assert_eq!(map.pieces.last().unwrap().interval.right, a_set(n).right);
            for w in map.pieces.windows(2) {
                assert_eq!(w[0].interval.right, w[1].interval.left);
            }
        }
    }

    #[test]
    fn values_increase_left_to_right_within_atoms() {
        let mut c = Construction::new(sched(&[2, 6, 10], &[3, 5, 4]));
        c.ensure_stage(3).unwrap();
        for n in 1..=3u32 {
            let map = c.map(n).unwrap();
            let mut last: BTreeMap<usize, u64> = BTreeMap::new();
            for p in &map.pieces {
                let atom = map.atom_at(&p.interval.left).unwrap();
                let prev = last.insert(atom, p.r);
                if let Some(prev) = prev {
                    assert!(prev <= p.r);
                }
            }
        }
    }

    #[test]
    fn kac_sum_matches_closed_form() {
        let c = Construction::build_through(sched(&[2, 6, 10, 14], &[3, 5, 2, 3]), 4).unwrap();
        assert_eq!(c.kac_sum(), c.kac_closed_form(4));
        assert_eq!(c.kac_closed_form(1), q(1, 2) * q(3, 1));
    }

    #[test]
    fn label_entries_bounded_by_earlier_return_times() {
        let c = Construction::build_through(sched(&[2, 6, 10], &[3, 2, 2]), 3).unwrap();
        let law = c.label_law(3).unwrap();
        let sched = c.schedule().clone();
        let r2 = sched.max_return_time(2);
        for (pair, _) in &law.entries {
            assert_eq!(pair.hb.len(), 3);
            assert_eq!(pair.hw.len(), 3);
            for &v in pair.hb.iter().chain(&pair.hw) {
                assert!(v <= r2);
                assert!((1..=2).any(|i| {
                    let s = sched.stage(i).unwrap();
                    v >= s.m && v < s.m + s.k
                }));
            }
        }
    }

    #[test]
    fn orbit_walker_reproduces_visit_times() {
        // Walk S from the bottom rung of Tower 2 and record the cumulative
        // return times until reaching A_2; they must equal the partial sums
        // of h^B read from the top.
        let c = Construction::build_through(sched(&[2, 6], &[4, 3]), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = rung_base(2, 2);
        for _ in 0..100 {
            let y = DyadicPoint::sample_in(&mut rng, &base, 2, 30);
            let label = c.label_of(&y, 2).unwrap();
            let bottom = y.odometer_inverse().unwrap();
            let elapsed = c.return_time_at(&bottom).unwrap();
            assert_eq!(elapsed, label.hb.iter().sum::<u64>());
        }
    }

    #[test]
    fn sampled_label_law_close_to_exact() {
        let c = Construction::build_through(sched(&[2, 6, 10], &[3, 5, 4]), 3).unwrap();
        let exact = c.label_law(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = 20_000;
        let approx: BTreeMap<_, _> = c.label_law_sampled(3, samples, &mut rng).unwrap().entries.into_iter().collect();
        for (pair, p) in &exact.entries {
            let p = p.to_f64().unwrap();
            let got = approx.get(pair).map_or(0.0, |x| x.to_f64().unwrap());
            let sigma = (p * (1.0 - p) / samples as f64).sqrt();
            assert!((got - p).abs() <= 4.0 * sigma + 1e-12, "{pair:?}: {got} vs {p}");
        }
    }

    #[test]
    fn atom_budget_is_enforced() {
        let mut c = Construction::with_budget(sched(&[2, 6], &[64, 64]), 1000);
        assert!(matches!(c.ensure_stage(2), Err(Error::Budget { .. })));
    }

    #[test]
    fn csv_export_columns() {
        let c = Construction::build_through(sched(&[2], &[2]), 1).unwrap();
        let mut buf = Vec::new();
        c.map(1).unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "stage,left_num,left_den,right_num,right_den,r\n1,0,1,1,4,2\n1,1,4,1,2,3\n"
        );
    }
}
