//! Named experiments. Each reads an [`ExperimentConfig`], writes CSV
//! tables and a `summary.json` into an output directory and reports its
//! assertions. Runs are pure functions of the config.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::construction::{Construction, DyadicPoint};
use crate::dbar::{dbar_l_counts, dbar_l_empirical, dbar_upper_conditional, BlockCounts, EmpiricalDbar};
use crate::entropy::{
    block_entropy, entropy_gap_bound, entropy_report, induced_symbols, poisson_entropy, Correction, EntropyReport,
    InducedCoding,
};
use crate::error::{Error, Result};
use crate::lemma::{
    conditional_criterion_estimate, lecam_gap, no_free_probability, param_sum_stats, sample_enriched_past,
    sample_xi, sample_zeta, CriterionEstimate, LabeledSiteCounts, LemmaParams,
};
use crate::schedule::StageSchedule;
use crate::seed::{rng, seed_child, seed_split};
use crate::stats::{chi_square_poisson, mean_var, ChiSquareResult};
use crate::suspension::{sample_with_params, sample_xi0, sample_xi_n, stage_lemma_params, LawMode};
use crate::window::Window;

/// One checked claim of a run.
#[derive(Clone, Debug, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub experiment: ExperimentKind,
    pub assertions: Vec<Assertion>,
    pub files: Vec<String>,
    pub summary: Value,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn failures(&self) -> Vec<&Assertion> {
        self.assertions.iter().filter(|a| !a.passed).collect()
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    files: Vec<String>,
    inputs: Map<String, Value>,
    assertions: Vec<Assertion>,
}

impl Ctx<'_> {
    fn input(&mut self, key: &str, value: impl Serialize) {
        self.inputs
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.assertions.push(Assertion {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    fn csv(&mut self, name: &str) -> Result<csv::Writer<File>> {
        self.files.push(name.to_string());
        Ok(csv::Writer::from_path(self.dir.join(name))?)
    }

    fn schedule_or(&mut self, ks: &[u64]) -> Result<StageSchedule> {
        let s = match &self.cfg.schedule {
            Some(s) => s.clone(),
            None => StageSchedule::default_with_k(ks)?,
        };
        self.input(
            "schedule",
            json!({
                "stages": s.stages().iter().map(|st| json!({"M": st.m, "k": st.k})).collect::<Vec<_>>(),
                "hash": s.hash(),
            }),
        );
        Ok(s)
    }
}

/// Runs `config`, writing artifacts into `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut ctx = Ctx {
        cfg: config,
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
        inputs: Map::new(),
        assertions: Vec::new(),
    };
    let results = match config.experiment {
        ExperimentKind::LemmaSimple => lemma_simple(&mut ctx)?,
        ExperimentKind::LemmaGeneral => lemma_general(&mut ctx)?,
        ExperimentKind::StageDbar => stage_dbar(&mut ctx)?,
        ExperimentKind::EntropyGrowth => entropy_growth(&mut ctx)?,
        ExperimentKind::KrengelZero => krengel_zero(&mut ctx)?,
        ExperimentKind::PoissonApprox => poisson_approx(&mut ctx)?,
    };
    let mut files = ctx.files.clone();
    files.push("summary.json".into());
    files.sort();
    let passed = ctx.assertions.iter().all(|a| a.passed);
    let summary = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": config.experiment.name(),
        "seed": config.seed,
        "config": config.raw,
        "inputs": ctx.inputs,
        "results": results,
        "assertions": ctx.assertions,
        "passed": passed,
        "files": files,
    });
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(out_dir.join("summary.json"), text)?;
    Ok(RunOutcome {
        experiment: config.experiment,
        assertions: ctx.assertions,
        files,
        summary,
    })
}

fn label_string(label: &[u64]) -> String {
    if label.is_empty() {
        "none".into()
    } else {
        label.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-")
    }
}

fn sd_of(xs: &[f64]) -> f64 {
    let (_, v, n) = mean_var(xs.iter().copied());
    if n < 2 {
        0.0
    } else {
        v.sqrt()
    }
}

fn gof_json(r: &ChiSquareResult) -> Value {
    json!({
        "statistic": r.statistic,
        "dof": r.dof,
        "p_value": r.p_value,
        "cells": r.cells,
        "samples": r.samples,
    })
}

#[derive(Default)]
struct FreeTally {
    sum: Vec<u64>,
    sum_sq: Vec<u64>,
    selected: Vec<Vec<u64>>,
    no_free: u64,
    param_sums: Vec<f64>,
}

fn lemma_simple(ctx: &mut Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    let delta = cfg.positive_or("delta", 2.0)?;
    let m = cfg.size_or("M", 5)?;
    let k = cfg.size_or("k", 100)?;
    let j_max = cfg.size_or("J", 3)?;
    let eps = cfg.positive_or("eps", 0.1)?;
    let replicates = cfg.size_or("replicates", 100_000)? as usize;
    let cond_replicates = cfg.size_or("cond_replicates", 2_000)? as usize;
    let past = cfg.size_or("past", m + k)?;
    let level = cfg.positive_or("level", 0.01)?;
    let mut gof_j = cfg.list_or::<u64>("gof_j", &[1, (k / 2).max(1), k])?;
    gof_j.dedup();
    if let Some(bad) = gof_j.iter().find(|&&j| j == 0 || j > k) {
        return Err(Error::Config(format!("`gof_j` entry {bad} outside 1..={k}")));
    }
    for (key, v) in [("delta", json!(delta)), ("M", json!(m)), ("k", json!(k)), ("J", json!(j_max))] {
        ctx.input(key, v);
    }
    ctx.input("eps", eps);
    ctx.input("replicates", replicates);
    ctx.input("cond_replicates", cond_replicates);
    ctx.input("past", past);
    ctx.input("level", level);
    ctx.input("gof_j", &gof_j);

    let params = LemmaParams::simple(delta, m, k)?;
    let p_none = no_free_probability(j_max, k, delta)?;
    let free_seed = seed_split(cfg.seed, &["free"]);
    const CHUNK: usize = 1000;
    let chunks = replicates.div_ceil(CHUNK);
    let tallies: Vec<FreeTally> = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<FreeTally> {
            let mut t = FreeTally {
                sum: vec![0; k as usize],
                sum_sq: vec![0; k as usize],
                selected: vec![Vec::new(); gof_j.len()],
                ..Default::default()
            };
            for r in c * CHUNK..((c + 1) * CHUNK).min(replicates) {
                let ep = sample_enriched_past(&params, seed_child(free_seed, "past", r as u64))?;
                for (i, &f) in ep.free.f.iter().enumerate() {
                    t.sum[i] += f;
                    t.sum_sq[i] += f * f;
                }
                for (s, &j) in gof_j.iter().enumerate() {
                    t.selected[s].push(ep.free.get(j as usize));
                }
                if (1..=j_max as usize).all(|j| ep.free.get(j) == 0) {
                    t.no_free += 1;
                }
                t.param_sums.push(ep.free.parameter_sum());
            }
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let mut total = FreeTally {
        sum: vec![0; k as usize],
        sum_sq: vec![0; k as usize],
        selected: vec![Vec::new(); gof_j.len()],
        ..Default::default()
    };
    for t in tallies {
        for i in 0..k as usize {
            total.sum[i] += t.sum[i];
            total.sum_sq[i] += t.sum_sq[i];
        }
        for (s, v) in t.selected.into_iter().enumerate() {
            total.selected[s].extend(v);
        }
        total.no_free += t.no_free;
        total.param_sums.extend(t.param_sums);
    }
    let n = replicates as f64;

    let mut w = ctx.csv("free_counts.csv")?;
    w.write_record(["j", "expected_mean", "mean", "variance", "replicates"])?;
    for i in 0..k as usize {
        let mean = total.sum[i] as f64 / n;
        let var = total.sum_sq[i] as f64 / n - mean * mean;
        let expected = delta * (i + 1) as f64 / (2.0 * k as f64);
        w.write_record([
            (i + 1).to_string(),
            expected.to_string(),
            mean.to_string(),
            var.to_string(),
            replicates.to_string(),
        ])?;
    }
    w.flush()?;

    let p_hat = total.no_free as f64 / n;
    let sigma = (p_none * (1.0 - p_none) / n).sqrt();
    ctx.check(
        "no-free probability within 3 binomial sigma",
        (p_hat - p_none).abs() <= 3.0 * sigma,
        format!("observed {p_hat}, closed form {p_none}, sigma {sigma}, n {replicates}"),
    );

    let (s_mean, s_var, _) = mean_var(total.param_sums.iter().copied());
    let (mean0, var0) = param_sum_stats(k, delta)?;
    let m4 = total.param_sums.iter().map(|s| (s - s_mean).powi(4)).sum::<f64>() / n;
    let var_sigma = ((m4 - s_var * s_var).max(0.0) / n).sqrt();
    ctx.check(
        "variance of the parameter sum within 3 sigma",
        (s_var - var0).abs() <= 3.0 * var_sigma,
        format!("observed {s_var}, closed form {var0}, sigma {var_sigma}"),
    );
    let mean_sigma = (var0 / n).sqrt();
    ctx.check(
        "mean of the parameter sum within 3 sigma",
        (s_mean - mean0).abs() <= 3.0 * mean_sigma,
        format!("observed {s_mean}, closed form {mean0}, sigma {mean_sigma}"),
    );

    let mut gof_rows = Vec::new();
    let mut w = ctx.csv("free_gof.csv")?;
    w.write_record(["j", "lambda", "statistic", "dof", "p_value", "samples", "passed"])?;
    let mut gof_checks = Vec::new();
    for (s, &j) in gof_j.iter().enumerate() {
        let lambda = delta * j as f64 / (2.0 * k as f64);
        let r = chi_square_poisson(&total.selected[s], lambda);
        let ok = r.passes(level);
        w.write_record([
            j.to_string(),
            lambda.to_string(),
            r.statistic.to_string(),
            r.dof.to_string(),
            r.p_value.to_string(),
            r.samples.to_string(),
            ok.to_string(),
        ])?;
        gof_checks.push((j, ok, r.p_value));
        gof_rows.push(json!({"j": j, "lambda": lambda, "gof": gof_json(&r)}));
    }
    w.flush()?;
    for (j, ok, p) in gof_checks {
        ctx.check(format!("F_{j} Poisson fit"), ok, format!("p-value {p} at level {level}"));
    }

    let est = conditional_criterion_estimate(&params, past, eps, cond_replicates, seed_split(cfg.seed, &["criterion"]))?;
    write_criterion_csv(ctx, "criterion.csv", &est)?;
    let at_target = dbar_upper_conditional(est.bad_mass, est.max_l1_good);
    let best = dbar_upper_conditional(est.best_eps, est.best_eps);

    Ok(json!({
        "no_free": {"observed": p_hat, "closed_form": p_none, "sigma": sigma, "replicates": replicates},
        "parameter_sum": {
            "mean": s_mean, "mean_closed_form": mean0, "mean_sigma": mean_sigma,
            "variance": s_var, "variance_closed_form": var0, "variance_sigma": var_sigma,
            "replicates": replicates,
        },
        "free_gof": gof_rows,
        "criterion": criterion_json(&est),
        "dbar_bound_at_target": at_target,
        "dbar_bound_best": best,
    }))
}

fn criterion_json(est: &CriterionEstimate) -> Value {
    json!({
        "replicates": est.replicates,
        "eps_target": est.eps_target,
        "bad_mass": est.bad_mass,
        "bad_mass_stderr": est.bad_mass_stderr,
        "max_l1_good": est.max_l1_good,
        "mean_l1": est.mean_l1,
        "best_eps": est.best_eps,
        "conditioning": "enriched past (counts and links on negative sites)",
    })
}

fn write_criterion_csv(ctx: &mut Ctx, name: &str, est: &CriterionEstimate) -> Result<()> {
    let mut w = ctx.csv(name)?;
    w.write_record(["replicate", "l1", "parameter_sum"])?;
    for (i, (l1, s)) in est.l1.iter().zip(&est.parameter_sums).enumerate() {
        w.write_record([i.to_string(), l1.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn lemma_general(ctx: &mut Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    let schedule = ctx.schedule_or(&[4, 4])?;
    let n = cfg.size_or("stage", schedule.len() as u64)? as u32;
    let len = cfg.size_or("window", 200_000)? as usize;
    let level = cfg.positive_or("level", 0.01)?;
    ctx.input("stage", n);
    ctx.input("window", len);
    ctx.input("level", level);
    if n > schedule.len() {
        return Err(Error::Config(format!("stage {n} is beyond the schedule")));
    }
    let c = Construction::build_through(schedule, n)?;
    let st = stage_lemma_params(&c, n, LawMode::Exact)?;
    let window = Window::from_len(len)?;
    let xi = sample_xi(&st.params, window, seed_split(cfg.seed, &["xi"]))?;
    let zeta = sample_zeta(&st.params, window, seed_split(cfg.seed, &["zeta"]), false)?;
    let p = &st.params;
    let half = p.delta / 2.0;

    struct Row {
        process: &'static str,
        colour: &'static str,
        label: String,
        lambda: f64,
        mean: f64,
        gof: ChiSquareResult,
    }
    let mut rows = Vec::new();
    let per_label = |s: &LabeledSiteCounts, a: u32, black: bool| -> Vec<u64> {
        window
            .sites()
            .map(|x| if black { s.black(x, a) } else { s.white(x, a) } as u64)
            .collect()
    };
    for (process, sample) in [("xi", &xi), ("zeta", &zeta)] {
        for (colour, marginal, black) in [("black", p.black_marginal(), true), ("white", p.white_marginal(), false)] {
            for (a, &mass) in marginal.iter().enumerate() {
                if mass <= 0.0 {
                    continue;
                }
                let data = per_label(sample, a as u32, black);
                let lambda = half * mass;
                let (mean, _, _) = mean_var(data.iter().map(|&x| x as f64));
                rows.push(Row {
                    process,
                    colour,
                    label: label_string(&p.alphabet[a]),
                    lambda,
                    mean,
                    gof: chi_square_poisson(&data, lambda),
                });
            }
        }
    }
    let per_test = level / rows.len() as f64;
    ctx.input("per_test_level", per_test);
    let mut w = ctx.csv("label_gof.csv")?;
    w.write_record(["process", "colour", "label", "lambda", "mean", "statistic", "dof", "p_value", "sites", "passed"])?;
    let mut worst = (f64::INFINITY, String::new());
    for r in &rows {
        let ok = r.gof.passes(per_test);
        w.write_record([
            r.process.to_string(),
            r.colour.to_string(),
            r.label.clone(),
            r.lambda.to_string(),
            r.mean.to_string(),
            r.gof.statistic.to_string(),
            r.gof.dof.to_string(),
            r.gof.p_value.to_string(),
            r.gof.samples.to_string(),
            ok.to_string(),
        ])?;
        if r.gof.p_value < worst.0 {
            worst = (r.gof.p_value, format!("{} {} label {}", r.process, r.colour, r.label));
        }
    }
    w.flush()?;
    let failed = rows.iter().filter(|r| !r.gof.passes(per_test)).count();
    ctx.check(
        "per-label Poisson fits (Bonferroni)",
        failed == 0,
        format!("{failed} of {} fits rejected at {per_test}; smallest p-value {} ({})", rows.len(), worst.0, worst.1),
    );
    Ok(json!({
        "stage": n,
        "delta": p.delta,
        "labels": p.alphabet.len(),
        "tests": rows.len(),
        "rejected": failed,
        "min_p_value": worst.0,
        "sites": len,
    }))
}

fn dbar_json(e: &EmpiricalDbar) -> Value {
    serde_json::to_value(e).unwrap_or(Value::Null)
}

fn stage_dbar(ctx: &mut Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    let n = cfg.size_or("stage", 1)? as u32;
    let base = match &cfg.schedule {
        Some(s) => {
            if s.len() + 1 < n {
                return Err(Error::Config(format!("stage {n} needs stages 1..{} in the schedule", n - 1)));
            }
            Some(s.clone())
        }
        None if n == 1 => None,
        None => Some(StageSchedule::default_with_k(&vec![4; n as usize - 1])?),
    };
    let previous: Vec<(u64, u64)> = base
        .as_ref()
        .map(|b| b.stages()[..n as usize - 1].iter().map(|s| (s.m, s.k)).collect())
        .unwrap_or_default();
    let default_m = base.as_ref().and_then(|b| b.stage(n)).map_or(2 + 4 * (n as u64 - 1), |s| s.m);
    let m = cfg.size_or("M", default_m)?;
    let ks = cfg.list_or::<u64>("k_sweep", &[2, 8, 32, 128])?;
    let blocks = cfg.size_or("window", 100_000)? as usize;
    let l = cfg.size_or("L", 8)? as usize;
    let ell: u64 = cfg.get_or("ell", 6)?;
    let reps = cfg.size_or("replicates", 4)? as usize;
    if reps < 2 {
        return Err(Error::Config("`replicates` must be at least 2 to calibrate the noise floor".into()));
    }
    let level = cfg.positive_or("level", 0.01)?;
    let floor = cfg.size_or("blocks_floor", 10_000)? as usize;
    let dbar_max: Option<f64> = cfg.get("dbar_max")?;
    let cond_k: Option<u64> = cfg.get("cond_k")?;
    let cond_reps = cfg.size_or("cond_replicates", 2_000)? as usize;
    let eps = cfg.positive_or("eps", 0.1)?;
    let bound_max: Option<f64> = cfg.get("bound_max")?;
    let delta = 2f64.powi(1 - n as i32);
    ctx.input("stage", n);
    ctx.input("previous_stages", &previous);
    ctx.input("M", m);
    ctx.input("delta", delta);
    ctx.input("k_sweep", &ks);
    ctx.input("blocks", blocks);
    ctx.input("L", l);
    ctx.input("ell", ell);
    ctx.input("replicates", reps);
    ctx.input("level", level);
    ctx.input("blocks_floor", floor);
    ctx.input("dbar_max", dbar_max);
    ctx.input("cond_k", cond_k);
    ctx.input("cond_replicates", cond_reps);
    ctx.input("eps", eps);
    ctx.input("bound_max", bound_max);

    let window = Window::from_len(blocks + l - 1)?;
    let schedule_with = |k: u64| {
        let mut st = previous.clone();
        st.push((m, k));
        StageSchedule::new(st)
    };
    let prev_construction = if n > 1 {
        Some(Construction::build_through(StageSchedule::new(previous.clone())?, n - 1)?)
    } else {
        None
    };
    let sample_prev = |seed: u64| -> Result<Vec<u64>> {
        Ok(match &prev_construction {
            None => sample_xi0(window, seed)?.values,
            Some(c) => sample_xi_n(c, n - 1, window, seed, true, LawMode::Exact)?.values,
        })
    };

    let reference = sample_prev(seed_split(cfg.seed, &["reference"]))?;
    let sweep: Vec<(u64, EmpiricalDbar)> = ks
        .iter()
        .map(|&k| -> Result<_> {
            let c = Construction::build_through(schedule_with(k)?, n)?;
            let xs = sample_xi_n(&c, n, window, seed_split(cfg.seed, &["xi-n", &k.to_string()]), true, LawMode::Exact)?;
            Ok((k, dbar_l_empirical(&reference, &xs.values, l, ell, floor)?))
        })
        .collect::<Result<_>>()?;

    let floor_values: Vec<f64> = (0..reps as u64)
        .map(|r| -> Result<f64> {
            let a = sample_prev(seed_child(cfg.seed, "floor-a", r))?;
            let b = sample_prev(seed_child(cfg.seed, "floor-b", r))?;
            Ok(dbar_l_empirical(&a, &b, l, ell, floor)?.value)
        })
        .collect::<Result<_>>()?;
    let floor_mean = floor_values.iter().sum::<f64>() / reps as f64;
    let floor_sd = sd_of(&floor_values);
    // A rise between neighbouring k is the difference of two estimates with
    // the floor's spread; its ratio to √2·sd is Student-t with reps-1 dof.
    let comparisons = ks.len().saturating_sub(1).max(1) as f64;
    let t_quantile = StudentsT::new(0.0, 1.0, (reps - 1) as f64)
        .map_err(|e| Error::Domain(e.to_string()))?
        .inverse_cdf(1.0 - level / comparisons);
    let tolerance = t_quantile * std::f64::consts::SQRT_2 * floor_sd;

    let mut w = ctx.csv("dbar_sweep.csv")?;
    w.write_record(["stage", "M", "k", "L", "ell", "dbar", "blocks_a", "blocks_b", "distinct_a", "distinct_b"])?;
    for (k, e) in &sweep {
        w.write_record([
            n.to_string(),
            m.to_string(),
            k.to_string(),
            l.to_string(),
            ell.to_string(),
            e.value.to_string(),
            e.blocks_a.to_string(),
            e.blocks_b.to_string(),
            e.distinct_a.to_string(),
            e.distinct_b.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = ctx.csv("noise_floor.csv")?;
    w.write_record(["replicate", "L", "ell", "dbar"])?;
    for (r, v) in floor_values.iter().enumerate() {
        w.write_record([r.to_string(), l.to_string(), ell.to_string(), v.to_string()])?;
    }
    w.flush()?;

    let values: Vec<f64> = sweep.iter().map(|(_, e)| e.value).collect();
    let worst_rise = values.windows(2).map(|p| p[1] - p[0]).fold(f64::NEG_INFINITY, f64::max);
    ctx.check(
        "d̄_L nonincreasing in k up to noise",
        values.windows(2).all(|p| p[1] <= p[0] + tolerance),
        format!("values {values:?}, largest rise {worst_rise}, tolerance {tolerance} (t quantile {t_quantile} × √2 × noise sd {floor_sd})"),
    );
    if let Some(max) = dbar_max {
        let last = *values.last().unwrap_or(&f64::NAN);
        ctx.check(
            "d̄_L at the largest k below threshold",
            last < max,
            format!("d̄_{l} = {last} at k = {}, threshold {max}", ks.last().copied().unwrap_or(0)),
        );
    }

    let mut conditional = Value::Null;
    if let Some(k) = cond_k {
        let params = LemmaParams::simple(delta, m, k)?;
        let est = conditional_criterion_estimate(&params, m + k, eps, cond_reps, seed_split(cfg.seed, &["criterion"]))?;
        write_criterion_csv(ctx, "criterion.csv", &est)?;
        let at_target = dbar_upper_conditional(est.bad_mass, est.max_l1_good);
        let best = dbar_upper_conditional(est.best_eps, est.best_eps);
        if let Some(max) = bound_max {
            ctx.check(
                "conditional 3ε bound below threshold",
                best.bound < max,
                format!("3ε = {} with ε = {} at k = {k} ({} pasts), threshold {max}", best.bound, best.epsilon, cond_reps),
            );
        }
        conditional = json!({
            "k": k,
            "criterion": criterion_json(&est),
            "bound_at_target": at_target,
            "bound_best": best,
        });
    }

    Ok(json!({
        "sweep": sweep.iter().map(|(k, e)| json!({"k": k, "dbar": dbar_json(e)})).collect::<Vec<_>>(),
        "noise_floor": {"mean": floor_mean, "sd": floor_sd, "replicates": reps, "values": floor_values},
        "monotone_tolerance": {"value": tolerance, "t_quantile": t_quantile, "level": level, "comparisons": comparisons},
        "conditional": conditional,
    }))
}

fn report_json(r: &EntropyReport) -> Value {
    serde_json::to_value(r).unwrap_or(Value::Null)
}

fn entropy_growth(ctx: &mut Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    let schedule = ctx.schedule_or(&[128, 32])?;
    let len = cfg.size_or("window", 200_000)? as usize;
    let l = cfg.size_or("L", 4)? as usize;
    let ell: u64 = cfg.get_or("ell", 6)?;
    let reps = cfg.size_or("replicates", 20_000)? as usize;
    let floor = cfg.size_or("blocks_floor", 10_000)? as usize;
    ctx.input("window", len);
    ctx.input("L", l);
    ctx.input("ell", ell);
    ctx.input("replicates", reps);
    ctx.input("blocks_floor", floor);
    let alphabet = ell as usize + 1;
    let window = Window::from_len(len)?;

    let x0 = sample_xi0(window, seed_split(cfg.seed, &["xi-0"]))?;
    let single = block_entropy(&x0.values, 1, 8, Correction::None, floor)?;
    let h_poisson = poisson_entropy(1.0, Some(8))?;
    ctx.check(
        "single-site entropy of ξ^(0) matches the Poisson series",
        (single.h_l - h_poisson).abs() <= 0.02,
        format!("plug-in {} vs series {h_poisson} ({} sites)", single.h_l, single.sample_blocks),
    );
    let c0 = BlockCounts::harvest(&x0.values, l, ell)?;
    let h0 = entropy_report(&c0, ell, Correction::None);

    struct Row {
        process: String,
        stage: u32,
        report: EntropyReport,
        dbar: f64,
        gap: f64,
    }
    let mut rows = vec![Row {
        process: "xi-0".into(),
        stage: 0,
        report: h0.clone(),
        dbar: 0.0,
        gap: 0.0,
    }];
    let deepest = schedule.len().min(2);
    let c = Construction::build_through(schedule.clone(), deepest)?;
    for n in 1..=deepest {
        let xs = sample_xi_n(&c, n, window, seed_split(cfg.seed, &["xi-n", &n.to_string()]), true, LawMode::Exact)?;
        let cn = BlockCounts::harvest(&xs.values, l, ell)?;
        let (d, _) = dbar_l_counts(&c0, &cn)?;
        rows.push(Row {
            process: format!("xi-{n}"),
            stage: n,
            report: entropy_report(&cn, ell, Correction::None),
            dbar: d,
            gap: entropy_gap_bound(d, alphabet)?,
        });
    }

    let mut infinity = Value::Null;
    if let Some(n_inf) = schedule.first_stage_with_gap(l as u64) {
        let ci = Construction::build_through(schedule.clone(), n_inf)?;
        let st = stage_lemma_params(&ci, n_inf, LawMode::Exact)?;
        let base = seed_split(cfg.seed, &["xi-infinity"]);
        let short = Window::from_len(l)?;
        let blocks: Vec<Vec<u32>> = (0..reps as u64)
            .into_par_iter()
            .map(|r| -> Result<Vec<u32>> {
                let w = sample_with_params(&schedule, &st, short, seed_child(base, "window", r), true)?;
                Ok(w.values.iter().map(|&v| v.min(ell) as u32).collect())
            })
            .collect::<Result<_>>()?;
        let mut counts = BTreeMap::new();
        for b in blocks {
            *counts.entry(b).or_insert(0u64) += 1;
        }
        let ci_counts = BlockCounts { l, counts, total: reps as u64 };
        let (d, _) = dbar_l_counts(&c0, &ci_counts)?;
        rows.push(Row {
            process: "xi-infinity".into(),
            stage: n_inf,
            report: entropy_report(&ci_counts, ell, Correction::None),
            dbar: d,
            gap: entropy_gap_bound(d, alphabet)?,
        });
        infinity = json!({"stage_used": n_inf, "independent_windows": reps});
    }

    let mut w = ctx.csv("entropy_chain.csv")?;
    w.write_record(["process", "stage", "L", "ell", "h_l", "blocks", "distinct", "dbar_to_xi0", "gap_bound", "chain_holds"])?;
    let mut chain = Vec::new();
    for r in &rows {
        let holds = r.report.h_l >= h0.h_l - r.gap;
        w.write_record([
            r.process.clone(),
            r.stage.to_string(),
            l.to_string(),
            ell.to_string(),
            r.report.h_l.to_string(),
            r.report.sample_blocks.to_string(),
            r.report.distinct_blocks.to_string(),
            r.dbar.to_string(),
            r.gap.to_string(),
            holds.to_string(),
        ])?;
        chain.push(json!({
            "process": r.process,
            "stage": r.stage,
            "entropy": report_json(&r.report),
            "dbar_to_xi0": r.dbar,
            "gap_bound": r.gap,
            "chain_holds": holds,
        }));
        if r.stage > 0 {
            ctx.check(
                format!("entropy chain for {}", r.process),
                holds,
                format!("h = {} ≥ {} - {} (d̄_{l} = {})", r.report.h_l, h0.h_l, r.gap, r.dbar),
            );
        }
    }
    w.flush()?;
    Ok(json!({
        "single_site": {"plug_in": report_json(&single), "poisson_series": h_poisson},
        "chain": chain,
        "xi_infinity": infinity,
    }))
}

fn krengel_zero(ctx: &mut Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    let schedule = ctx.schedule_or(&[4, 4, 4])?;
    let depth = cfg.size_or("depth", 3)? as u32;
    let orbit = cfg.size_or("orbit", 1 << 20)? as usize;
    let ls = cfg.list_or::<usize>("L_list", &[1, 2, 4, 8, 16])?;
    let rung_m = cfg.size_or("rung_m", 4)? as u32;
    let ratio_max = cfg.positive_or("ratio_max", 0.5)?;
    ctx.input("depth", depth);
    ctx.input("orbit", orbit);
    ctx.input("L_list", &ls);
    ctx.input("rung_m", rung_m);
    ctx.input("ratio_max", ratio_max);
    if ls.contains(&0) {
        return Err(Error::Config("`L_list` entries must be positive".into()));
    }
    if depth > schedule.len() {
        return Err(Error::Config(format!("depth {depth} exceeds the schedule's {} stages", schedule.len())));
    }
    let c = Construction::build_through(schedule, depth)?;
    let lmax = *ls.iter().max().unwrap_or(&1);

    let starts = [("0", DyadicPoint::zero()), ("1/4", DyadicPoint::new(1u32, 2)?)];
    let mut table: Vec<(String, String, usize, EntropyReport)> = Vec::new();
    let mut code = |scheme: InducedCoding, name: &str, start_name: &str, start: &DyadicPoint| -> Result<Vec<f64>> {
        let symbols = induced_symbols(scheme, start, orbit + lmax - 1, &c)?;
        let ell = symbols.iter().copied().max().unwrap_or(0);
        let mut out = Vec::new();
        for &l in &ls {
            let counts = BlockCounts::harvest(&symbols[..orbit + l - 1], l, ell)?;
            let rep = entropy_report(&counts, ell, Correction::None);
            out.push(rep.h_l);
            table.push((name.to_string(), start_name.to_string(), l, rep));
        }
        Ok(out)
    };
    let scheme = InducedCoding::ReturnTime { depth };
    let h_return: Vec<Vec<f64>> = starts
        .iter()
        .map(|(name, y)| code(scheme, "return-time", name, y))
        .collect::<Result<_>>()?;
    let h_rung = code(InducedCoding::Rung { m: rung_m }, "rung", "0", &DyadicPoint::zero())?;

    let mut w = ctx.csv("krengel.csv")?;
    w.write_record(["scheme", "start", "L", "h_l", "block_entropy", "blocks", "distinct"])?;
    for (scheme, start, l, rep) in &table {
        w.write_record([
            scheme.clone(),
            start.clone(),
            l.to_string(),
            rep.h_l.to_string(),
            rep.block_entropy.to_string(),
            rep.sample_blocks.to_string(),
            rep.distinct_blocks.to_string(),
        ])?;
    }
    w.flush()?;

    let h = &h_return[0];
    ctx.check(
        "return-time Ĥ_L/L decreasing in L",
        h.windows(2).all(|p| p[1] < p[0]),
        format!("L {ls:?}: {h:?}"),
    );
    let first = h[0];
    let last = *h.last().unwrap_or(&f64::NAN);
    ctx.check(
        "return-time Ĥ_L/L at the largest L against the first",
        last <= ratio_max * first,
        format!("{last} at L = {lmax} vs {ratio_max} × {first} at L = {}", ls[0]),
    );
    let period = 1usize << rung_m;
    if orbit.is_multiple_of(period) {
        let worst = ls
            .iter()
            .zip(&h_rung)
            .map(|(&l, &v)| (v - rung_m as f64 * std::f64::consts::LN_2 / l as f64).abs())
            .fold(0.0, f64::max);
        ctx.check(
            "rung coding gives (m ln 2)/L",
            worst < 1e-12,
            format!("largest deviation {worst}"),
        );
    }
    let start_gap = h_return[0]
        .iter()
        .zip(&h_return[1])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(json!({
        "L": ls,
        "return_time": {"start_0": h_return[0], "start_quarter": h_return[1], "largest_start_difference": start_gap, "orbit": orbit},
        "rung": {"m": rung_m, "h_l": h_rung, "orbit": orbit},
        "entries": table.iter().map(|(s, st, _, r)| json!({"scheme": s, "start": st, "entropy": report_json(r)})).collect::<Vec<_>>(),
    }))
}

fn poisson_approx(ctx: &mut Ctx) -> Result<Value> {
    use rand::Rng;
    let cfg = ctx.cfg;
    let cases = cfg.size_or("cases", 1000)? as usize;
    let n_max = cfg.size_or("n_max", 200)? as usize;
    let p_max = cfg.positive_or("p_max", 0.3)?.min(1.0);
    ctx.input("cases", cases);
    ctx.input("n_max", n_max);
    ctx.input("p_max", p_max);
    let mut r = rng(seed_split(cfg.seed, &["grid"]));
    let grid: Vec<Vec<f64>> = (0..cases)
        .map(|_| {
            let n = r.random_range(1..=n_max);
            (0..n).map(|_| p_max * (1.0 - r.random::<f64>())).collect()
        })
        .collect();
    let gaps: Vec<_> = grid.par_iter().map(|ps| lecam_gap(ps)).collect::<Result<_>>()?;
    let mut w = ctx.csv("lecam.csv")?;
    w.write_record(["case", "n", "lambda", "exact_l1", "bound", "within_bound"])?;
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    for (i, (ps, g)) in grid.iter().zip(&gaps).enumerate() {
        let ok = g.exact_l1 <= g.bound;
        violations += usize::from(!ok);
        worst_ratio = worst_ratio.max(g.exact_l1 / g.bound);
        w.write_record([
            i.to_string(),
            ps.len().to_string(),
            g.lambda.to_string(),
            g.exact_l1.to_string(),
            g.bound.to_string(),
            ok.to_string(),
        ])?;
    }
    w.flush()?;
    ctx.check(
        "exact L1 within the Le Cam bound on the grid",
        violations == 0,
        format!("{violations} violations in {cases} cases; largest exact/bound ratio {worst_ratio}"),
    );
    let fixed = lecam_gap(&[0.01; 100])?;
    ctx.check(
        "100 Bernoulli(0.01): exact L1 ≤ 0.02",
        fixed.exact_l1 <= 0.02,
        format!("exact L1 {}, bound {}", fixed.exact_l1, fixed.bound),
    );
    Ok(json!({
        "cases": cases,
        "violations": violations,
        "largest_ratio": worst_ratio,
        "fixed_case": fixed,
    }))
}
