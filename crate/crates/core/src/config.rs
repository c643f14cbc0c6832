//! Experiment configuration: a flat `key = value` file naming one
//! experiment, a mandatory seed, an optional schedule and the experiment's
//! parameters. Keys an experiment does not use are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kv;
use crate::schedule::StageSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    LemmaSimple,
    LemmaGeneral,
    StageDbar,
    EntropyGrowth,
    KrengelZero,
    PoissonApprox,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::LemmaSimple,
        ExperimentKind::LemmaGeneral,
        ExperimentKind::StageDbar,
        ExperimentKind::EntropyGrowth,
        ExperimentKind::KrengelZero,
        ExperimentKind::PoissonApprox,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::LemmaSimple => "lemma-simple",
            ExperimentKind::LemmaGeneral => "lemma-general",
            ExperimentKind::StageDbar => "stage-dbar",
            ExperimentKind::EntropyGrowth => "entropy-growth",
            ExperimentKind::KrengelZero => "krengel-zero",
            ExperimentKind::PoissonApprox => "poisson-approx",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ExperimentKind::LemmaSimple => {
                "free-particle laws, closed forms and the conditional criterion (unlabelled particles)"
            }
            ExperimentKind::LemmaGeneral => "per-label Poisson fits of the labelled particle processes of one stage",
            ExperimentKind::StageDbar => "d̄_L between consecutive stages over a sweep of k_n",
            ExperimentKind::EntropyGrowth => "block entropies of ξ^(0), ξ^(1), ξ^(2), ξ^(∞) and the continuity chain",
            ExperimentKind::KrengelZero => "block entropy decay of codings of the induced odometer",
            ExperimentKind::PoissonApprox => "exact Bernoulli-sum vs Poisson L1 gaps against the Le Cam bound",
        }
    }

    /// Parameter keys accepted besides `experiment` and `seed`.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::LemmaSimple => &[
                "delta", "M", "k", "J", "eps", "replicates", "cond_replicates", "past", "level", "gof_j",
            ],
            ExperimentKind::LemmaGeneral => &["schedule", "stage", "window", "level"],
            ExperimentKind::StageDbar => &[
                "schedule", "stage", "M", "k_sweep", "window", "L", "ell", "replicates", "level", "blocks_floor",
                "dbar_max", "cond_k", "cond_replicates", "eps", "bound_max",
            ],
            ExperimentKind::EntropyGrowth => &["schedule", "window", "L", "ell", "replicates", "blocks_floor"],
            ExperimentKind::KrengelZero => &["schedule", "depth", "orbit", "L_list", "rung_m", "ratio_max"],
            ExperimentKind::PoissonApprox => &["cases", "n_max", "p_max"],
        }
    }

    fn accepts_inline_schedule(self) -> bool {
        self.keys().contains(&"schedule")
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}` (see --list)")))
    }
}

/// A validated experiment configuration.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub schedule: Option<StageSchedule>,
    /// Every key exactly as written, for echoing.
    pub raw: BTreeMap<String, String>,
    params: BTreeMap<String, String>,
}

impl ExperimentConfig {
    /// Parses config text; a `schedule = <file>` reference is resolved
    /// against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let raw = kv::parse(text)?;
        let experiment: ExperimentKind = raw
            .get("experiment")
            .ok_or_else(|| Error::Config("missing `experiment`".into()))?
            .parse()?;
        let seed = raw
            .get("seed")
            .ok_or_else(|| Error::Config("missing `seed` (runs are never seeded from the clock)".into()))
            .and_then(|v| kv::parse_num::<u64>("seed", v))?;

        let mut params = BTreeMap::new();
        let mut inline = BTreeMap::new();
        for (key, value) in &raw {
            if key == "experiment" || key == "seed" {
                continue;
            }
            if key.starts_with("M.") || key.starts_with("k.") {
                if !experiment.accepts_inline_schedule() {
                    return Err(Error::Config(format!("`{key}`: {experiment} takes no schedule")));
                }
                inline.insert(key.clone(), value.clone());
                continue;
            }
            if !experiment.keys().contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown key `{key}` for {experiment}")));
            }
            params.insert(key.clone(), value.clone());
        }

        let schedule = match (params.remove("schedule"), inline.is_empty()) {
            (Some(_), false) => {
                return Err(Error::Config("give either `schedule = <file>` or inline M.n/k.n keys, not both".into()))
            }
            (Some(file), true) => {
                let path = base_dir.join(&file);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("schedule file {}: {e}", path.display())))?;
                Some(StageSchedule::parse(&text)?)
            }
            (None, false) => Some(StageSchedule::from_kv(&inline)?),
            (None, true) => None,
        };

        Ok(Self {
            experiment,
            seed,
            schedule,
            raw,
            params,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.params.get(key).map(|v| kv::parse_num(key, v)).transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// A size: must be positive.
    pub fn size_or(&self, key: &str, default: u64) -> Result<u64> {
        let v = self.get_or(key, default)?;
        if v == 0 {
            return Err(Error::Config(format!("`{key}` must be positive")));
        }
        Ok(v)
    }

    /// A positive real.
    pub fn positive_or(&self, key: &str, default: f64) -> Result<f64> {
        let v: f64 = self.get_or(key, default)?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("`{key}` must be a positive number, got {v}")));
        }
        Ok(v)
    }

    /// Comma-separated list.
    pub fn list_or<T: FromStr + Clone>(&self, key: &str, default: &[T]) -> Result<Vec<T>> {
        match self.params.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => {
                let items: Vec<T> = v
                    .split(',')
                    .map(|s| kv::parse_num(key, s.trim()))
                    .collect::<Result<_>>()?;
                if items.is_empty() {
                    return Err(Error::Config(format!("`{key}` is empty")));
                }
                Ok(items)
            }
        }
    }
}
