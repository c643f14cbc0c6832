//! Stage parameters `(M_n, k_n)` of the tower construction.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Stage {
    /// Smallest return time on `A_n`.
    pub m: u64,
    /// Number of return-time values on `A_n`.
    pub k: u64,
}

/// Validated list of stages, indexed from 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageSchedule {
    stages: Vec<Stage>,
}

impl StageSchedule {
    pub fn new(stages: Vec<(u64, u64)>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("schedule needs at least one stage".into()));
        }
        for (i, &(m, k)) in stages.iter().enumerate() {
            if m == 0 || k == 0 {
                return Err(Error::Config(format!("stage {}: M and k must be positive", i + 1)));
            }
        }
        for (i, w) in stages.windows(2).enumerate() {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(format!(
                    "M must be strictly increasing: M.{} = {} after M.{} = {}",
                    i + 2,
                    w[1].0,
                    i + 1,
                    w[0].0
                )));
            }
        }
        Ok(Self {
            stages: stages.into_iter().map(|(m, k)| Stage { m, k }).collect(),
        })
    }

    /// `M_n = 2 + 4(n-1)` with the given `k_n`.
    pub fn default_with_k(ks: &[u64]) -> Result<Self> {
        Self::new(
            ks.iter()
                .enumerate()
                .map(|(i, &k)| (2 + 4 * i as u64, k))
                .collect(),
        )
    }

    pub fn len(&self) -> u32 {
        self.stages.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn stage(&self, n: u32) -> Option<Stage> {
        self.stages.get((n as usize).checked_sub(1)?).copied()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// `R_n = max_{i ≤ n} (M_i + k_i - 1)`; `R_0 = 0`.
    pub fn max_return_time(&self, n: u32) -> u64 {
        self.stages
            .iter()
            .take(n as usize)
            .map(|s| s.m + s.k - 1)
            .max()
            .unwrap_or(0)
    }

    /// Parses `M.n` / `k.n` keys out of a key-value map, ignoring others.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut ms = BTreeMap::new();
        let mut ks = BTreeMap::new();
        for (key, value) in map {
            let Some((name, idx)) = key.split_once('.') else {
                continue;
            };
            let target = match name {
                "M" => &mut ms,
                "k" => &mut ks,
                _ => continue,
            };
            let idx: u32 = kv::parse_num(key, idx)?;
            if idx == 0 {
                return Err(Error::Config(format!("`{key}`: stages are indexed from 1")));
            }
            target.insert(idx, kv::parse_num::<u64>(key, value)?);
        }
        let n = ms.len().max(ks.len()) as u32;
        let mut stages = Vec::new();
        for i in 1..=n {
            match (ms.get(&i), ks.get(&i)) {
                (Some(&m), Some(&k)) => stages.push((m, k)),
                _ => {
                    return Err(Error::Config(format!(
                        "stage {i} needs both M.{i} and k.{i} (stages must be contiguous from 1)"
                    )))
                }
            }
        }
        Self::new(stages)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let map = kv::parse(text)?;
        if let Some(bad) = map.keys().find(|k| !(k.starts_with("M.") || k.starts_with("k."))) {
            return Err(Error::Config(format!("unknown schedule key `{bad}`")));
        }
        Self::from_kv(&map)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, st) in self.stages.iter().enumerate() {
            let _ = writeln!(s, "M.{} = {}", i + 1, st.m);
            let _ = writeln!(s, "k.{} = {}", i + 1, st.k);
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Smallest `n ≤ len-1` with `M_{n+1} > window`.
    pub fn first_stage_with_gap(&self, window: u64) -> Option<u32> {
        (1..self.len()).find(|&n| self.stage(n + 1).is_some_and(|s| s.m > window))
    }
}

/// Asymptotic growth of `M_n + (k_n - 1)/2`, for deciding whether the
/// tower over the odometer has infinite total measure
/// `Σ 2^-n (M_n + (k_n - 1)/2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AsymptoticRule {
    /// Grows like `n^degree`.
    Polynomial { degree: f64 },
    /// Grows like `base^n`.
    Exponential { base: f64 },
}

impl AsymptoticRule {
    pub fn infinite_measure(&self) -> bool {
        match *self {
            AsymptoticRule::Polynomial { .. } => false,
            AsymptoticRule::Exponential { base } => base >= 2.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_and_r() {
        let s = StageSchedule::parse("M.1 = 2\nk.1 = 4\nM.2=6\nk.2=3\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.max_return_time(1), 5);
        assert_eq!(s.max_return_time(2), 8);
        assert_eq!(s.max_return_time(0), 0);
        assert_eq!(StageSchedule::parse(&s.to_text()).unwrap(), s);
        assert_eq!(s.hash().len(), 16);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(StageSchedule::parse("M.1=4\nk.1=2\nM.2=4\nk.2=2").is_err());
        assert!(StageSchedule::parse("M.1=4\nk.1=0").is_err());
        assert!(StageSchedule::parse("M.1=4").is_err());
        assert!(StageSchedule::parse("M.1=4\nk.1=2\nM.3=9\nk.3=2").is_err());
        assert!(StageSchedule::parse("M.1=4\nk.1=2\nfoo=1").is_err());
        assert!(StageSchedule::parse("M.0=4\nk.0=2").is_err());
    }

    #[test]
    fn default_schedule_and_gaps() {
        let s = StageSchedule::default_with_k(&[4, 4, 4, 4]).unwrap();
        let ms: Vec<_> = s.stages().iter().map(|st| st.m).collect();
        assert_eq!(ms, vec![2, 6, 10, 14]);
        assert_eq!(s.first_stage_with_gap(4), Some(1));
        assert_eq!(s.first_stage_with_gap(8), Some(2));
        assert_eq!(s.first_stage_with_gap(20), None);
        let t = StageSchedule::new(vec![(2, 4), (6, 4), (12, 4)]).unwrap();
        assert_eq!(t.first_stage_with_gap(4), Some(1));
    }

    #[test]
    fn infinite_measure_rule() {
        assert!(!AsymptoticRule::Polynomial { degree: 3.0 }.infinite_measure());
        assert!(AsymptoticRule::Exponential { base: 2.0 }.infinite_measure());
        assert!(!AsymptoticRule::Exponential { base: 1.5 }.infinite_measure());
    }
}
