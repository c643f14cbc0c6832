//! Minimum-cost transportation by primal network simplex.
//!
//! Sources ship to sinks along arcs with small nonnegative integer costs.
//! A hub node with arcs `source → hub` (cost `max_cost`) and
//! `hub → sink` (cost 0) gives a strongly feasible starting tree and keeps
//! every restricted problem feasible. When the full bipartite graph is too
//! large, arcs are added by column generation: after each restricted optimum
//! every pair is priced and the most negative arcs per source join the
//! problem, until no pair has negative reduced cost.

use rayon::prelude::*;

use crate::error::{Error, Result};

const NONE: u32 = u32::MAX;

/// Pairs below this count are all added up front.
pub const DENSE_LIMIT: usize = 250_000;

/// Arcs added per source in one pricing round.
const ARCS_PER_ROUND: usize = 6;

const MAX_ROUNDS: usize = 10_000;

#[derive(Clone, Debug)]
struct Arc {
    tail: u32,
    head: u32,
    cost: i64,
    flow: f64,
}

/// Optimal flows between source `i` and sink `j`, and the total cost.
#[derive(Clone, Debug)]
pub struct TransportSolution {
    pub cost: f64,
    pub flows: Vec<(usize, usize, f64)>,
    pub pivots: u64,
    pub rounds: usize,
    pub arcs: usize,
}

struct Simplex {
    arcs: Vec<Arc>,
    parent: Vec<u32>,
    pred: Vec<u32>,
    /// Tree arc is oriented node → parent.
    up: Vec<bool>,
    depth: Vec<u32>,
    pi: Vec<i64>,
    children: Vec<Vec<u32>>,
    pos: Vec<u32>,
    next_arc: usize,
    pivots: u64,
    stack: Vec<u32>,
}

impl Simplex {
    fn new(supply: &[f64], demand: &[f64], max_cost: i64) -> Self {
        let ns = supply.len();
        let nt = demand.len();
        let n = ns + nt + 1;
        let root = (n - 1) as u32;
        let mut s = Simplex {
            arcs: Vec::with_capacity(n),
            parent: vec![root; n],
            pred: vec![NONE; n],
            up: vec![false; n],
            depth: vec![1; n],
            pi: vec![0; n],
            children: vec![Vec::new(); n],
            pos: vec![0; n],
            next_arc: 0,
            pivots: 0,
            stack: Vec::new(),
        };
        s.parent[n - 1] = NONE;
        s.depth[n - 1] = 0;
        for (i, &a) in supply.iter().enumerate() {
            s.arcs.push(Arc { tail: i as u32, head: root, cost: max_cost, flow: a });
            s.pred[i] = i as u32;
            s.up[i] = true;
            s.pi[i] = -max_cost;
        }
        for (j, &b) in demand.iter().enumerate() {
            let v = ns + j;
            s.arcs.push(Arc { tail: root, head: v as u32, cost: 0, flow: b });
            s.pred[v] = v as u32;
        }
        for v in 0..n - 1 {
            s.pos[v] = s.children[n - 1].len() as u32;
            s.children[n - 1].push(v as u32);
        }
        s
    }

    fn reduced_cost(&self, a: &Arc) -> i64 {
        a.cost + self.pi[a.tail as usize] - self.pi[a.head as usize]
    }

    fn find_entering(&mut self) -> Option<usize> {
        let m = self.arcs.len();
        let block = ((m as f64).sqrt().ceil() as usize).max(16);
        let mut best = 0i64;
        let mut best_arc = None;
        let mut scanned = 0;
        let mut e = self.next_arc % m;
        while scanned < m {
            let stop = (scanned + block).min(m);
            while scanned < stop {
                let rc = self.reduced_cost(&self.arcs[e]);
                if rc < best {
                    best = rc;
                    best_arc = Some(e);
                }
                e += 1;
                if e == m {
                    e = 0;
                }
                scanned += 1;
            }
            if best_arc.is_some() {
                self.next_arc = e;
                return best_arc;
            }
        }
        None
    }

    fn detach(&mut self, v: u32) {
        let p = self.parent[v as usize] as usize;
        let idx = self.pos[v as usize] as usize;
        self.children[p].swap_remove(idx);
        if idx < self.children[p].len() {
            let moved = self.children[p][idx];
            self.pos[moved as usize] = idx as u32;
        }
    }

    fn attach(&mut self, v: u32, p: u32, arc: u32, up: bool) {
        self.parent[v as usize] = p;
        self.pred[v as usize] = arc;
        self.up[v as usize] = up;
        self.pos[v as usize] = self.children[p as usize].len() as u32;
        self.children[p as usize].push(v);
    }

    fn pivot(&mut self, e: usize) -> Result<()> {
        self.pivots += 1;
        let p = self.arcs[e].tail;
        let q = self.arcs[e].head;
        let (mut a, mut b) = (p, q);
        while a != b {
            let (da, db) = (self.depth[a as usize], self.depth[b as usize]);
            if da >= db {
                a = self.parent[a as usize];
            }
            if db >= da {
                b = self.parent[b as usize];
            }
        }
        let apex = a;

        let mut theta = f64::INFINITY;
        let mut leave = NONE;
        let mut leave_on_q = false;
        let mut w = p;
        while w != apex {
            if self.up[w as usize] {
                let f = self.arcs[self.pred[w as usize] as usize].flow;
                if f < theta {
                    theta = f;
                    leave = w;
                }
            }
            w = self.parent[w as usize];
        }
        let mut w = q;
        while w != apex {
            if !self.up[w as usize] {
                let f = self.arcs[self.pred[w as usize] as usize].flow;
                if f <= theta {
                    theta = f;
                    leave = w;
                    leave_on_q = true;
                }
            }
            w = self.parent[w as usize];
        }
        if leave == NONE {
            return Err(Error::Infeasible("unbounded pivot cycle".into()));
        }

        if theta > 0.0 {
            let mut w = p;
            while w != apex {
                let arc = &mut self.arcs[self.pred[w as usize] as usize];
                if self.up[w as usize] {
                    arc.flow -= theta;
                } else {
                    arc.flow += theta;
                }
                w = self.parent[w as usize];
            }
            let mut w = q;
            while w != apex {
                let arc = &mut self.arcs[self.pred[w as usize] as usize];
                if self.up[w as usize] {
                    arc.flow += theta;
                } else {
                    arc.flow -= theta;
                }
                w = self.parent[w as usize];
            }
        }
        self.arcs[e].flow = theta;
        let leaving_arc = self.pred[leave as usize] as usize;
        self.arcs[leaving_arc].flow = 0.0;

        // re-hang the detached subtree from the entering arc
        let cost = self.arcs[e].cost;
        let (z, outside, z_up, delta) = if leave_on_q {
            (q, p, false, self.pi[p as usize] + cost - self.pi[q as usize])
        } else {
            (p, q, true, self.pi[q as usize] - cost - self.pi[p as usize])
        };
        let mut child = z;
        let mut new_parent = outside;
        let mut new_arc = e as u32;
        let mut new_up = z_up;
        loop {
            let old_parent = self.parent[child as usize];
            let old_arc = self.pred[child as usize];
            let old_up = self.up[child as usize];
            self.detach(child);
            self.attach(child, new_parent, new_arc, new_up);
            if child == leave {
                break;
            }
            new_parent = child;
            new_arc = old_arc;
            new_up = !old_up;
            child = old_parent;
        }

        let mut stack = std::mem::take(&mut self.stack);
        stack.clear();
        stack.push(z);
        while let Some(v) = stack.pop() {
            let v = v as usize;
            self.depth[v] = self.depth[self.parent[v] as usize] + 1;
            self.pi[v] += delta;
            stack.extend_from_slice(&self.children[v]);
        }
        self.stack = stack;
        Ok(())
    }

    fn optimize(&mut self, pivot_budget: u64) -> Result<()> {
        while let Some(e) = self.find_entering() {
            if self.pivots >= pivot_budget {
                return Err(Error::Budget {
                    what: "network simplex pivots",
                    needed: self.pivots as u128 + 1,
                    budget: pivot_budget as u128,
                });
            }
            self.pivot(e)?;
        }
        Ok(())
    }
}

/// Solves `min Σ c(i,j) x_ij` subject to row sums `supply` and column sums
/// `demand` (equal totals, all entries positive).
///
/// `cost(i, j)` must lie in `[min_cost, max_cost]`; `min_cost` only sharpens
/// the pricing scan.
pub fn solve<F>(supply: &[f64], demand: &[f64], cost: F, min_cost: i64, max_cost: i64) -> Result<TransportSolution>
where
    F: Fn(usize, usize) -> i64 + Sync,
{
    solve_with_limit(supply, demand, cost, min_cost, max_cost, DENSE_LIMIT)
}

fn solve_with_limit<F>(
    supply: &[f64],
    demand: &[f64],
    cost: F,
    min_cost: i64,
    max_cost: i64,
    dense_limit: usize,
) -> Result<TransportSolution>
where
    F: Fn(usize, usize) -> i64 + Sync,
{
    let ns = supply.len();
    let nt = demand.len();
    if supply.iter().chain(demand).any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::Infeasible("supplies and demands must be positive".into()));
    }
    let ts: f64 = supply.iter().sum();
    let td: f64 = demand.iter().sum();
    if (ts - td).abs() > 1e-9 * ts.max(td).max(1.0) {
        return Err(Error::Infeasible(format!("totals differ: {ts} vs {td}")));
    }
    if ns == 0 || nt == 0 {
        return Ok(TransportSolution { cost: 0.0, flows: Vec::new(), pivots: 0, rounds: 0, arcs: 0 });
    }

    let mut sx = Simplex::new(supply, demand, max_cost);
    let n_nodes = (ns + nt + 1) as u64;
    let pivot_budget = 2_000 * n_nodes * n_nodes.ilog2().max(1) as u64 + 1_000_000;
    let dense = ns.saturating_mul(nt) <= dense_limit;
    if dense {
        for i in 0..ns {
            for j in 0..nt {
                sx.arcs.push(Arc { tail: i as u32, head: (ns + j) as u32, cost: cost(i, j), flow: 0.0 });
            }
        }
    }
    let mut rounds = 0;
    loop {
        sx.optimize(pivot_budget)?;
        if dense {
            break;
        }
        rounds += 1;
        if rounds > MAX_ROUNDS {
            return Err(Error::Budget {
                what: "column generation rounds",
                needed: rounds as u128,
                budget: MAX_ROUNDS as u128,
            });
        }
        let new_arcs = price(&sx.pi, ns, nt, &cost, min_cost);
        if new_arcs.is_empty() {
            break;
        }
        for (i, j, c) in new_arcs {
            sx.arcs.push(Arc { tail: i as u32, head: (ns + j) as u32, cost: c, flow: 0.0 });
        }
    }
    Ok(extract(&sx, supply, demand, &cost, rounds))
}

/// Most negative reduced-cost pairs per source.
fn price<F>(pi: &[i64], ns: usize, nt: usize, cost: &F, min_cost: i64) -> Vec<(usize, usize, i64)>
where
    F: Fn(usize, usize) -> i64 + Sync,
{
    let mut sinks: Vec<(i64, usize)> = (0..nt).map(|j| (pi[ns + j], j)).collect();
    sinks.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let per_source: Vec<Vec<(usize, usize, i64)>> = (0..ns)
        .into_par_iter()
        .map(|i| {
            let pi_i = pi[i];
            let mut best: Vec<(i64, usize, i64)> = Vec::new();
            for &(pi_j, j) in &sinks {
                if pi_j - pi_i <= min_cost {
                    break;
                }
                let c = cost(i, j);
                let rc = c + pi_i - pi_j;
                if rc < 0 && (best.len() < ARCS_PER_ROUND || rc < best[best.len() - 1].0) {
                    let at = best.partition_point(|b| b.0 <= rc);
                    best.insert(at, (rc, j, c));
                    best.truncate(ARCS_PER_ROUND);
                }
            }
            best.into_iter().map(|(_, j, c)| (i, j, c)).collect()
        })
        .collect();
    per_source.into_iter().flatten().collect()
}

/// Direct flows plus the hub flows paired in order.
fn extract<F>(sx: &Simplex, supply: &[f64], demand: &[f64], cost: &F, rounds: usize) -> TransportSolution
where
    F: Fn(usize, usize) -> i64,
{
    let ns = supply.len();
    let nt = demand.len();
    let mut flows = Vec::new();
    let mut via_hub_out: Vec<(usize, f64)> = Vec::new();
    let mut via_hub_in: Vec<(usize, f64)> = Vec::new();
    for (idx, a) in sx.arcs.iter().enumerate() {
        if a.flow <= 0.0 {
            continue;
        }
        if idx < ns {
            via_hub_out.push((a.tail as usize, a.flow));
        } else if idx < ns + nt {
            via_hub_in.push((a.head as usize - ns, a.flow));
        } else {
            flows.push((a.tail as usize, a.head as usize - ns, a.flow));
        }
    }
    let (mut x, mut y) = (0, 0);
    while x < via_hub_out.len() && y < via_hub_in.len() {
        let f = via_hub_out[x].1.min(via_hub_in[y].1);
        if f > 0.0 {
            flows.push((via_hub_out[x].0, via_hub_in[y].0, f));
        }
        via_hub_out[x].1 -= f;
        via_hub_in[y].1 -= f;
        if via_hub_out[x].1 <= 0.0 {
            x += 1;
        }
        if via_hub_in[y].1 <= 0.0 {
            y += 1;
        }
    }
    flows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(flows.len());
    for f in flows {
        match merged.last_mut() {
            Some(last) if last.0 == f.0 && last.1 == f.1 => last.2 += f.2,
            _ => merged.push(f),
        }
    }
    let total = merged.iter().map(|&(i, j, f)| f * cost(i, j) as f64).sum();
    TransportSolution {
        cost: total,
        flows: merged,
        pivots: sx.pivots,
        rounds,
        arcs: sx.arcs.len(),
    }
}
