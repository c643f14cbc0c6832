//! Acceptance gate: ten end-to-end checks at their full tolerances. Prints
//! one PASS/FAIL line per check and exits nonzero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde_json::Value;

use suspension_lab::config::ExperimentConfig;
use suspension_lab::construction::Construction;
use suspension_lab::dbar::{dbar_l_exact, BlockDistribution};
use suspension_lab::experiments::{self, RunOutcome};
use suspension_lab::schedule::StageSchedule;
use suspension_lab::seed::{rng, seed_child};
use suspension_lab::stats::{chi_square_poisson, chi_square_two_sample};
use suspension_lab::suspension::{
    dependence_span, sample_with_params, sample_xi0, sample_xi_n, stage_lemma_params, LawMode,
};
use suspension_lab::window::Window;

type Check = Result<(bool, String), String>;

fn run_config(text: &str, dir: &Path) -> Result<(RunOutcome, Value), String> {
    let cfg = ExperimentConfig::parse(text, Path::new(".")).map_err(|e| e.to_string())?;
    let out = experiments::run(&cfg, dir).map_err(|e| e.to_string())?;
    let summary = out.summary.clone();
    Ok((out, summary))
}

fn assertion<'a>(out: &'a RunOutcome, prefix: &str) -> Result<&'a experiments::Assertion, String> {
    out.assertions
        .iter()
        .find(|a| a.name.starts_with(prefix))
        .ok_or_else(|| format!("no assertion `{prefix}`"))
}

fn tmp() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(|e| e.to_string())
}

fn closed_forms() -> Check {
    let mut ok = true;
    let mut detail = Vec::new();
    for (j, k) in [(3u64, 100u64), (5, 1000)] {
        let dir = tmp()?;
        let text = format!(
            "experiment = lemma-simple\nseed = {}\ndelta = 2\nM = 5\nk = {k}\nJ = {j}\nreplicates = 100000\ncond_replicates = 10\ngof_j = 1",
            1000 + k
        );
        let t = Instant::now();
        let (out, _) = run_config(&text, dir.path())?;
        let secs = t.elapsed().as_secs_f64();
        let nf = assertion(&out, "no-free probability")?;
        let var = assertion(&out, "variance of the parameter sum")?;
        let fast = secs < 60.0;
        ok &= nf.passed && var.passed && fast;
        detail.push(format!("(J={j},k={k}) [{}] [{}] {secs:.1}s", nf.detail, var.detail));
    }
    Ok((ok, detail.join("; ")))
}

fn free_particle_law() -> Check {
    let dir = tmp()?;
    let text = "experiment = lemma-simple\nseed = 2002\ndelta = 2\nM = 5\nk = 200\nreplicates = 100000\ncond_replicates = 10\ngof_j = 1,100,200\nlevel = 0.01";
    let (out, _) = run_config(text, dir.path())?;
    let fits: Vec<_> = out.assertions.iter().filter(|a| a.name.ends_with("Poisson fit")).collect();
    let ok = fits.len() == 3 && fits.iter().all(|a| a.passed);
    Ok((ok, fits.iter().map(|a| format!("{}: {}", a.name, a.detail)).collect::<Vec<_>>().join("; ")))
}

fn poisson_marginals() -> Check {
    let sites = 100_000usize;
    let schedule = StageSchedule::default_with_k(&[4, 4]).map_err(|e| e.to_string())?;
    let c = Construction::build_through(schedule.clone(), 2).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut detail = Vec::new();
    for n in 0..=2u32 {
        let stride = dependence_span(&schedule, n) as usize + 1;
        let window = Window::from_len(sites * stride).map_err(|e| e.to_string())?;
        let seed = seed_child(3003, "marginal", n as u64);
        let w = if n == 0 {
            sample_xi0(window, seed)
        } else {
            sample_xi_n(&c, n, window, seed, true, LawMode::Exact)
        }
        .map_err(|e| e.to_string())?;
        let data: Vec<u64> = w.values.iter().step_by(stride).copied().collect();
        let r = chi_square_poisson(&data, 1.0);
        ok &= r.passes(0.01) && data.len() >= sites;
        detail.push(format!("n={n}: p={:.4} on {} sites (stride {stride})", r.p_value, data.len()));
    }
    Ok((ok, detail.join("; ")))
}

/// Minimum-cost coupling by enumerating every basis of the transport
/// polytope: each vertex is a spanning tree of the bipartite support graph.
fn brute_force_coupling(p: &[(Vec<u32>, f64)], q: &[(Vec<u32>, f64)]) -> f64 {
    let (ns, nt) = (p.len(), q.len());
    let cells: Vec<(usize, usize)> = (0..ns).flat_map(|i| (0..nt).map(move |j| (i, j))).collect();
    let r = ns + nt - 1;
    let cost = |i: usize, j: usize| {
        let (a, b) = (&p[i].0, &q[j].0);
        a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
    };
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << cells.len()) {
        if mask.count_ones() as usize != r {
            continue;
        }
        let basis: Vec<(usize, usize)> = (0..cells.len()).filter(|&c| mask >> c & 1 == 1).map(|c| cells[c]).collect();
        let mut rows: Vec<f64> = p.iter().map(|x| x.1).collect();
        let mut cols: Vec<f64> = q.iter().map(|x| x.1).collect();
        let mut flow = vec![None; r];
        loop {
            let mut progress = false;
            for i in 0..ns {
                let open: Vec<usize> = (0..r).filter(|&b| flow[b].is_none() && basis[b].0 == i).collect();
                if open.len() == 1 {
                    let b = open[0];
                    flow[b] = Some(rows[i]);
                    cols[basis[b].1] -= rows[i];
                    rows[i] = 0.0;
                    progress = true;
                }
            }
            for j in 0..nt {
                let open: Vec<usize> = (0..r).filter(|&b| flow[b].is_none() && basis[b].1 == j).collect();
                if open.len() == 1 {
                    let b = open[0];
                    flow[b] = Some(cols[j]);
                    rows[basis[b].0] -= cols[j];
                    cols[j] = 0.0;
                    progress = true;
                }
            }
            if !progress {
                break;
            }
        }
        if flow.iter().any(|f| f.is_none_or(|x| x < -1e-12)) {
            continue;
        }
        if rows.iter().chain(&cols).any(|x| x.abs() > 1e-9) {
            continue;
        }
        let c: f64 = basis.iter().zip(&flow).map(|(&(i, j), f)| f.unwrap() * cost(i, j)).sum();
        best = best.min(c);
    }
    best
}

fn exact_solver() -> Check {
    let t = Instant::now();
    let mut r = rng(4004);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let l = r.random_range(1..=2usize);
        let draw = |r: &mut rand_chacha::ChaCha8Rng| {
            let size = r.random_range(1..=3usize);
            let mut blocks: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
            while blocks.len() < size {
                let b: Vec<u32> = (0..l).map(|_| r.random_range(0..3u32)).collect();
                blocks.insert(b, 1.0 - r.random::<f64>());
            }
            let total: f64 = blocks.values().sum();
            blocks.into_iter().map(|(b, m)| (b, m / total)).collect::<Vec<_>>()
        };
        let p = draw(&mut r);
        let q = draw(&mut r);
        let pd = BlockDistribution::new(l, p.clone()).map_err(|e| e.to_string())?;
        let qd = BlockDistribution::new(l, q.clone()).map_err(|e| e.to_string())?;
        let (d, _) = dbar_l_exact(&pd, &qd).map_err(|e| e.to_string())?;
        worst = worst.max((d - brute_force_coupling(&p, &q)).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    Ok((worst <= 1e-9 && secs < 60.0, format!("largest difference {worst:e} over 100 pairs, {secs:.2}s")))
}

fn stage_trend() -> Check {
    let dir = tmp()?;
    let text = "experiment = stage-dbar\nseed = 5005\nstage = 1\nM = 4\nk_sweep = 2,8,32,128\nwindow = 100000\nL = 8\nell = 6\nreplicates = 4\ndbar_max = 0.1\ncond_k = 2000\ncond_replicates = 2000\nbound_max = 0.3";
    let t = Instant::now();
    let (out, _) = run_config(text, dir.path())?;
    let secs = t.elapsed().as_secs_f64();
    let ok = out.passed() && out.assertions.len() == 3 && secs < 600.0;
    let detail: Vec<String> = out.assertions.iter().map(|a| format!("[{}] {}", a.name, a.detail)).collect();
    Ok((ok, format!("{} ({secs:.0}s)", detail.join("; "))))
}

fn entropy_chain() -> Check {
    let mut ok = true;
    let mut detail = Vec::new();
    for seed in 6006..6011u64 {
        let dir = tmp()?;
        let text = format!(
            "experiment = entropy-growth\nseed = {seed}\nM.1 = 4\nk.1 = 128\nM.2 = 8\nk.2 = 32\nwindow = 200000\nL = 4\nell = 6"
        );
        let (out, _) = run_config(&text, dir.path())?;
        let single = assertion(&out, "single-site entropy")?;
        let chain = assertion(&out, "entropy chain for xi-1")?;
        ok &= single.passed && chain.passed;
        detail.push(format!("seed {seed}: [{}] [{}]", single.detail, chain.detail));
    }
    Ok((ok, detail.join("; ")))
}

fn krengel_zero() -> Check {
    let dir = tmp()?;
    let text = "experiment = krengel-zero\nseed = 7007\ndepth = 3\norbit = 262144\nL_list = 1,2,4,8,16\nrung_m = 4\nratio_max = 0.5";
    let (out, _) = run_config(text, dir.path())?;
    let rung = assertion(&out, "rung coding")?;
    let ratio = assertion(&out, "return-time Ĥ_L/L at the largest L")?;
    Ok((rung.passed && ratio.passed, format!("[{}] [{}]", rung.detail, ratio.detail)))
}

fn lecam() -> Check {
    let dir = tmp()?;
    let text = "experiment = poisson-approx\nseed = 8008\ncases = 1000\nn_max = 200\np_max = 0.3";
    let (out, _) = run_config(text, dir.path())?;
    let detail: Vec<String> = out.assertions.iter().map(|a| a.detail.clone()).collect();
    Ok((out.passed() && out.assertions.len() == 2, detail.join("; ")))
}

fn window_coincidence() -> Check {
    let l = 8usize;
    let samples = 100_000u64;
    let schedule = StageSchedule::default_with_k(&[4, 4, 4]).map_err(|e| e.to_string())?;
    let m3 = schedule.stage(3).map(|s| s.m).unwrap_or(0);
    let c = Construction::build_through(schedule.clone(), 3).map_err(|e| e.to_string())?;
    let window = Window::from_len(l).map_err(|e| e.to_string())?;
    let mut blocks = Vec::new();
    for n in [2u32, 3] {
        let st = stage_lemma_params(&c, n, LawMode::Exact).map_err(|e| e.to_string())?;
        let b: Vec<Vec<u64>> = (0..samples)
            .into_par_iter()
            .map(|r| {
                sample_with_params(&schedule, &st, window, seed_child(9009 + n as u64, "window", r), true)
                    .map(|w| w.values)
                    .map_err(|e| e.to_string())
            })
            .collect::<Result<_, _>>()?;
        blocks.push(b);
    }
    let r = chi_square_two_sample(&blocks[0], &blocks[1]);
    Ok((
        m3 > l as u64 && r.passes(0.01),
        format!("M_3 = {m3}, p = {:.4}, statistic {:.1} on {} dof, {} blocks", r.p_value, r.statistic, r.dof, r.samples),
    ))
}

fn determinism() -> Check {
    let configs = [
        "experiment = lemma-simple\nseed = 11\nk = 40\nreplicates = 5000\ncond_replicates = 200",
        "experiment = lemma-general\nseed = 12\nwindow = 20000",
        "experiment = stage-dbar\nseed = 13\nk_sweep = 2,16\nwindow = 20000\nL = 4\nreplicates = 2\nblocks_floor = 1000\ncond_k = 50\ncond_replicates = 200",
        "experiment = entropy-growth\nseed = 14\nwindow = 50000\nreplicates = 10000",
        "experiment = krengel-zero\nseed = 15\norbit = 65536",
        "experiment = poisson-approx\nseed = 16\ncases = 200",
    ];
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for text in configs {
        let (a, b) = (tmp()?, tmp()?);
        let (out, _) = run_config(text, a.path())?;
        run_config(text, b.path())?;
        for f in &out.files {
            let x = std::fs::read(a.path().join(f)).map_err(|e| e.to_string())?;
            let y = std::fs::read(b.path().join(f)).map_err(|e| e.to_string())?;
            compared += 1;
            if x != y {
                mismatches.push(format!("{}/{f}", out.experiment));
            }
        }
    }
    Ok((
        mismatches.is_empty(),
        format!("{compared} files compared across 6 experiments; mismatches: {mismatches:?}"),
    ))
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Check); 10] = [
        ("closed forms vs Monte Carlo", closed_forms),
        ("free-particle Poisson law", free_particle_law),
        ("Poisson(1) marginals of xi^(0..2)", poisson_marginals),
        ("exact d-bar solver vs coupling enumeration", exact_solver),
        ("d-bar trend over k_1 and conditional bound", stage_trend),
        ("entropy chain", entropy_chain),
        ("Krengel-zero codings", krengel_zero),
        ("Le Cam guarantee", lecam),
        ("window coincidence of xi^(2) and xi^(3)", window_coincidence),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let t = Instant::now();
        let (passed, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!passed);
        println!(
            "{} {:>2} {name}: {detail} [{:.1}s]",
            if passed { "PASS" } else { "FAIL" },
            i + 1,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
