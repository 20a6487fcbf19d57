//! Runtime allocation optimizer: estimates the table-to-table transition
//! matrix from counters, models per-table capacity with a scaled USL curve,
//! and searches integer PMU allocations that maximize delivered throughput.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;

use crate::types::{PmuId, VmtId};

/// Virtual sink in edge targets; flows reaching it count as delivered.
pub const SINK: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UslParams {
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta0: f64,
    pub beta1: f64,
}

impl UslParams {
    pub const IDENTITY: UslParams = UslParams { alpha0: 0.0, alpha1: 0.0, beta0: 0.0, beta1: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapacityError {
    /// 1 + (n·a0 + a1)(X − 1) dropped to zero or below.
    NonPositiveDenominator,
}

/// Sustainable throughput of a table holding `n` blocks under offered load
/// `x` (Mpps). The linear term models per-block gain, the rational term the
/// coherency penalty.
pub fn usl_capacity(x: f64, n: usize, p: &UslParams) -> Result<f64, CapacityError> {
    debug_assert!(x >= 0.0);
    if x == 0.0 {
        return Ok(0.0);
    }
    let denom = 1.0 + (n as f64 * p.alpha0 + p.alpha1) * (x - 1.0);
    if denom <= 0.0 {
        return Err(CapacityError::NonPositiveDenominator);
    }
    Ok((x / denom + (n as f64 * p.beta0 + p.beta1) * x).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CfgError {
    Cycle,
    BadProbability { node: usize },
    Capacity { node: usize },
}

/// Pipeline graph: a DAG of match tables between a virtual source and sink.
/// Out-probabilities may sum to less than one; the residual drains to the
/// sink implicitly.
#[derive(Debug, Clone, Default)]
pub struct CfgGraph {
    pub n: usize,
    /// Source fan-out. Targets are node ids or SINK.
    pub source: Vec<(usize, f64)>,
    /// Per-node fan-out, targets are node ids or SINK.
    pub out: Vec<Vec<(usize, f64)>>,
}

impl CfgGraph {
    pub fn new(n: usize) -> CfgGraph {
        CfgGraph { n, source: Vec::new(), out: alloc::vec![Vec::new(); n] }
    }

    fn check_row(node: usize, row: &[(usize, f64)], n: usize) -> Result<(), CfgError> {
        let mut sum = 0.0;
        for &(tgt, p) in row {
            if !(0.0..=1.0).contains(&p) || (tgt != SINK && tgt >= n) {
                return Err(CfgError::BadProbability { node });
            }
            sum += p;
        }
        if sum > 1.0 + 1e-9 {
            return Err(CfgError::BadProbability { node });
        }
        Ok(())
    }

    /// Share of a node's output that reaches the sink: explicit sink edges
    /// plus the implicit residual.
    pub fn sink_share(row: &[(usize, f64)]) -> f64 {
        let to_nodes: f64 = row.iter().filter(|&&(t, _)| t != SINK).map(|&(_, p)| p).sum();
        (1.0 - to_nodes).max(0.0)
    }

    /// Kahn topological order, smallest id first. Fails on a cycle.
    pub fn topo_order(&self) -> Result<Vec<usize>, CfgError> {
        let mut indeg = alloc::vec![0usize; self.n];
        for row in &self.out {
            for &(t, _) in row {
                if t != SINK {
                    indeg[t] += 1;
                }
            }
        }
        let mut ready: BTreeSet<usize> = (0..self.n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &(t, _) in &self.out[i] {
                if t != SINK {
                    indeg[t] -= 1;
                    if indeg[t] == 0 {
                        ready.insert(t);
                    }
                }
            }
        }
        if order.len() != self.n {
            return Err(CfgError::Cycle);
        }
        Ok(order)
    }

    pub fn validate(&self) -> Result<(), CfgError> {
        Self::check_row(SINK, &self.source, self.n)?; // SINK stands in for "source row" in errors
        for (i, row) in self.out.iter().enumerate() {
            Self::check_row(i, row, self.n)?;
        }
        self.topo_order().map(|_| ())
    }

    /// Nodes reachable from the source along positive-probability edges.
    pub fn active_nodes(&self) -> Vec<bool> {
        let mut active = alloc::vec![false; self.n];
        let mut work: VecDeque<usize> = VecDeque::new();
        for &(t, p) in &self.source {
            if t != SINK && p > 0.0 && !active[t] {
                active[t] = true;
                work.push_back(t);
            }
        }
        while let Some(i) = work.pop_front() {
            for &(t, p) in &self.out[i] {
                if t != SINK && p > 0.0 && !active[t] {
                    active[t] = true;
                    work.push_back(t);
                }
            }
        }
        active
    }
}

#[derive(Debug, Clone)]
pub struct FlowResult {
    /// Offered load per node, Mpps.
    pub inflow: Vec<f64>,
    /// Served rate per node after the capacity cap.
    pub throughput: Vec<f64>,
    /// Delivered-to-sink rate, the solver objective.
    pub objective: f64,
}

/// Propagates `source_rate` (Mpps) through the DAG: each node serves
/// min(inflow, capacity) and splits the served rate over its out-edges.
pub fn propagate_flows(
    cfg: &CfgGraph,
    alloc: &[usize],
    params: &[UslParams],
    source_rate: f64,
) -> Result<FlowResult, CfgError> {
    debug_assert_eq!(alloc.len(), cfg.n);
    debug_assert_eq!(params.len(), cfg.n);
    let order = cfg.topo_order()?;
    let mut inflow = alloc::vec![0.0f64; cfg.n];
    let mut throughput = alloc::vec![0.0f64; cfg.n];
    let mut objective = source_rate * CfgGraph::sink_share(&cfg.source);
    for &(t, p) in &cfg.source {
        if t != SINK {
            inflow[t] += source_rate * p;
        }
    }
    for &j in &order {
        let x = inflow[j];
        let t_j = if x > 0.0 {
            let cap = usl_capacity(x, alloc[j], &params[j]).map_err(|_| CfgError::Capacity { node: j })?;
            x.min(cap)
        } else {
            0.0
        };
        throughput[j] = t_j;
        for &(t, p) in &cfg.out[j] {
            if t != SINK {
                inflow[t] += t_j * p;
            }
        }
        objective += t_j * CfgGraph::sink_share(&cfg.out[j]);
    }
    Ok(FlowResult { inflow, throughput, objective })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    Exact,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub counts: Vec<usize>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SolveError {
    /// Budget below the per-active-node floor.
    InfeasibleFloor { required: usize, budget: usize },
    Graph(CfgError),
}

/// Searches integer allocations with Σ n_i ≤ budget. Active nodes get a
/// floor of one block. Exact mode enumerates by (total, lex) order and keeps
/// the first argmax, so ties resolve to the smallest total, then
/// lexicographically smallest vector. Heuristic mode is greedy marginal gain
/// plus a pairwise-move local search.
pub fn solve_allocation(
    cfg: &CfgGraph,
    budget: usize,
    params: &[UslParams],
    source_rate: f64,
    mode: SolveMode,
) -> Result<Allocation, SolveError> {
    cfg.validate().map_err(SolveError::Graph)?;
    let floors: Vec<usize> = cfg.active_nodes().iter().map(|&a| usize::from(a)).collect();
    let required: usize = floors.iter().sum();
    if required > budget {
        return Err(SolveError::InfeasibleFloor { required, budget });
    }
    let eval = |counts: &[usize]| -> f64 {
        propagate_flows(cfg, counts, params, source_rate).map(|r| r.objective).unwrap_or(f64::NEG_INFINITY)
    };

    match mode {
        SolveMode::Exact => {
            let mut best = floors.clone();
            let mut best_obj = eval(&best);
            let mut counts = floors.clone();
            for total in required..=budget {
                enumerate_sum(&mut counts, &floors, 0, total - required, &mut |c| {
                    let obj = eval(c);
                    if obj > best_obj {
                        best_obj = obj;
                        best = c.to_vec();
                    }
                });
            }
            Ok(Allocation { counts: best, objective: best_obj })
        }
        SolveMode::Heuristic => {
            let mut counts = floors.clone();
            let mut obj = eval(&counts);
            // greedy: hand out one block at a time to the best taker
            while counts.iter().sum::<usize>() < budget {
                let mut best: Option<(usize, f64)> = None;
                for i in 0..cfg.n {
                    counts[i] += 1;
                    let o = eval(&counts);
                    counts[i] -= 1;
                    if o > obj && best.is_none_or(|(_, bo)| o > bo) {
                        best = Some((i, o));
                    }
                }
                match best {
                    Some((i, o)) => {
                        counts[i] += 1;
                        obj = o;
                    }
                    None => break,
                }
            }
            // local search: move one block between nodes while it helps
            let mut moved = true;
            let mut guard = 10 * cfg.n * cfg.n + 10;
            while moved && guard > 0 {
                moved = false;
                guard -= 1;
                'scan: for a in 0..cfg.n {
                    if counts[a] <= floors[a] {
                        continue;
                    }
                    for b in 0..cfg.n {
                        if a == b {
                            continue;
                        }
                        counts[a] -= 1;
                        counts[b] += 1;
                        let o = eval(&counts);
                        if o > obj {
                            obj = o;
                            moved = true;
                            break 'scan;
                        }
                        counts[a] += 1;
                        counts[b] -= 1;
                    }
                }
            }
            Ok(Allocation { counts, objective: obj })
        }
    }
}

/// Visits every vector with counts[i] = floors[i] + extra_i and Σ extra_i =
/// `extra`, in lexicographic order.
fn enumerate_sum(counts: &mut Vec<usize>, floors: &[usize], at: usize, extra: usize, f: &mut impl FnMut(&[usize])) {
    if at + 1 == floors.len() {
        counts[at] = floors[at] + extra;
        f(counts);
        return;
    }
    for here in 0..=extra {
        counts[at] = floors[at] + here;
        enumerate_sum(counts, floors, at + 1, extra - here, f);
    }
    counts[at] = floors[at];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FitError {
    TooFewSamples,
    NeedTwoGroupSizes,
    Singular,
    /// Fitted parameters break the positive-denominator invariant somewhere
    /// in the sampled load range.
    Domain,
}

/// Least-squares fit of the capacity curve from (offered load, served rate,
/// block count) samples: per-n curve fits, then a linear fit of the per-n
/// coefficients against n.
pub fn fit_usl(samples: &[(f64, f64, usize)]) -> Result<UslParams, FitError> {
    if samples.len() < 8 {
        return Err(FitError::TooFewSamples);
    }
    let mut by_n: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for &(x, s, n) in samples {
        by_n.entry(n).or_default().push((x, s));
    }
    if by_n.len() < 2 {
        return Err(FitError::NeedTwoGroupSizes);
    }

    // s = x/(1 + a(x−1)) + b·x; for fixed a the best b is closed-form
    fn best_b(points: &[(f64, f64)], a: f64) -> Option<(f64, f64)> {
        let mut num = 0.0;
        let mut den = 0.0;
        for &(x, s) in points {
            let d = 1.0 + a * (x - 1.0);
            if d <= 0.0 {
                return None;
            }
            let g = x / d;
            num += (s - g) * x;
            den += x * x;
        }
        if den == 0.0 {
            return None;
        }
        let b = num / den;
        let mut rss = 0.0;
        for &(x, s) in points {
            let d = 1.0 + a * (x - 1.0);
            let e = s - (x / d + b * x);
            rss += e * e;
        }
        Some((b, rss))
    }

    let mut per_n: Vec<(usize, f64, f64)> = Vec::new();
    for (&n, points) in &by_n {
        // log grid over a, plus zero, then local refinement around the best
        let mut best: Option<(f64, f64, f64)> = None; // (a, b, rss)
        let consider = |a: f64, best: &mut Option<(f64, f64, f64)>| {
            if let Some((b, rss)) = best_b(points, a) {
                if best.is_none() || rss < best.unwrap().2 {
                    *best = Some((a, b, rss));
                }
            }
        };
        consider(0.0, &mut best);
        for i in 0..=240 {
            let a = libm::pow(10.0, -8.0 + i as f64 * (8.0 + 1.0) / 240.0); // 1e-8 .. 10
            consider(a, &mut best);
        }
        let (mut a, ..) = best.ok_or(FitError::Singular)?;
        let mut step = a.max(1e-8) * 0.5;
        for _ in 0..60 {
            for cand in [a - step, a + step] {
                if cand >= 0.0 {
                    consider(cand, &mut best);
                }
            }
            a = best.unwrap().0;
            step *= 0.7;
        }
        let (a, b, _) = best.unwrap();
        per_n.push((n, a, b));
    }

    // linear fits a(n) = n·a0 + a1 and b(n) = n·b0 + b1
    fn line_fit(points: &[(f64, f64)]) -> Result<(f64, f64), FitError> {
        let m = points.len() as f64;
        let sx: f64 = points.iter().map(|p| p.0).sum();
        let sy: f64 = points.iter().map(|p| p.1).sum();
        let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
        let det = m * sxx - sx * sx;
        if det.abs() < 1e-12 {
            return Err(FitError::Singular);
        }
        let slope = (m * sxy - sx * sy) / det;
        let intercept = (sy * sxx - sx * sxy) / det;
        Ok((slope, intercept))
    }
    let (alpha0, alpha1) = line_fit(&per_n.iter().map(|&(n, a, _)| (n as f64, a)).collect::<Vec<_>>())?;
    let (beta0, beta1) = line_fit(&per_n.iter().map(|&(n, _, b)| (n as f64, b)).collect::<Vec<_>>())?;
    let params = UslParams { alpha0, alpha1, beta0, beta1 };

    // the fit must keep every sampled operating point in-domain
    for &(x, _, n) in samples {
        if x > 0.0 && usl_capacity(x, n, &params).is_err() {
            return Err(FitError::Domain);
        }
    }
    Ok(params)
}

/// Per-edge PHV transit counts over one observation window. Targets use SINK
/// for PHVs leaving the pipeline; the source row uses `from = SINK`.
#[derive(Debug, Clone, Default)]
pub struct EdgeCounters {
    counts: BTreeMap<(usize, usize), u64>,
}

impl EdgeCounters {
    pub fn record(&mut self, from: usize, to: usize) {
        *self.counts.entry((from, to)).or_insert(0) += 1;
    }

    pub fn reset(&mut self) {
        self.counts.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn count(&self, from: usize, to: usize) -> u64 {
        self.counts.get(&(from, to)).copied().unwrap_or(0)
    }

    fn rows(&self) -> BTreeMap<usize, Vec<(usize, u64)>> {
        let mut rows: BTreeMap<usize, Vec<(usize, u64)>> = BTreeMap::new();
        for (&(from, to), &c) in &self.counts {
            rows.entry(from).or_default().push((to, c));
        }
        rows
    }
}

/// Maintains the smoothed transition matrix across windows. Rows move toward
/// the window's maximum-likelihood estimate with weight `gamma`; rows with no
/// observations keep their previous estimate.
#[derive(Debug, Clone)]
pub struct TransitionEstimator {
    pub gamma: f64,
    pub n: usize,
    /// rows[n] is the source row.
    rows: Vec<BTreeMap<usize, f64>>,
    seen: Vec<bool>,
}

impl TransitionEstimator {
    pub fn new(n: usize, gamma: f64) -> TransitionEstimator {
        TransitionEstimator { gamma, n, rows: alloc::vec![BTreeMap::new(); n + 1], seen: alloc::vec![false; n + 1] }
    }

    fn row_index(&self, from: usize) -> usize {
        if from == SINK {
            self.n
        } else {
            from
        }
    }

    pub fn update(&mut self, counters: &EdgeCounters) {
        for (from, row) in counters.rows() {
            let total: u64 = row.iter().map(|&(_, c)| c).sum();
            if total == 0 {
                continue;
            }
            let ri = self.row_index(from);
            let mle: BTreeMap<usize, f64> = row.iter().map(|&(to, c)| (to, c as f64 / total as f64)).collect();
            if !self.seen[ri] {
                self.rows[ri] = mle;
                self.seen[ri] = true;
            } else {
                let old = core::mem::take(&mut self.rows[ri]);
                let mut merged = BTreeMap::new();
                let keys: BTreeSet<usize> = old.keys().chain(mle.keys()).copied().collect();
                for k in keys {
                    let o = old.get(&k).copied().unwrap_or(0.0);
                    let m = mle.get(&k).copied().unwrap_or(0.0);
                    merged.insert(k, self.gamma * m + (1.0 - self.gamma) * o);
                }
                self.rows[ri] = merged;
            }
        }
    }

    pub fn probability(&self, from: usize, to: usize) -> f64 {
        self.rows[self.row_index(from)].get(&to).copied().unwrap_or(0.0)
    }

    /// Materializes the current estimate as a graph for the solver.
    pub fn to_cfg(&self) -> CfgGraph {
        let mut cfg = CfgGraph::new(self.n);
        cfg.source = self.rows[self.n].iter().map(|(&t, &p)| (t, p)).collect();
        for i in 0..self.n {
            cfg.out[i] = self.rows[i].iter().map(|(&t, &p)| (t, p)).collect();
        }
        cfg
    }
}

/// One block changing hands; `from` None means it was free, `to` None means
/// it ends up unassigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PmuMove {
    pub pmu: PmuId,
    pub from: Option<VmtId>,
    pub to: Option<VmtId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransitionPlan {
    pub moves: Vec<PmuMove>,
}

impl TransitionPlan {
    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }
}

/// Computes the churn-minimizing move set: every table keeps its current
/// blocks up to the new count (lowest ids released first), then freed and
/// idle blocks are handed to growing tables in ascending id order.
pub fn plan_reallocation(
    current: &BTreeMap<VmtId, Vec<PmuId>>,
    free_pool: &[PmuId],
    target: &BTreeMap<VmtId, usize>,
) -> TransitionPlan {
    let mut released: Vec<(PmuId, VmtId)> = Vec::new();
    let mut needs: Vec<(VmtId, usize)> = Vec::new();
    for (&vmt, &want) in target {
        let have = current.get(&vmt).map(|v| v.len()).unwrap_or(0);
        if want < have {
            let mut owned = current[&vmt].clone();
            owned.sort_unstable();
            for &pmu in owned.iter().take(have - want) {
                released.push((pmu, vmt));
            }
        } else if want > have {
            needs.push((vmt, want - have));
        }
    }
    // tables absent from the target release everything
    for (&vmt, owned) in current {
        if !target.contains_key(&vmt) {
            let mut owned = owned.clone();
            owned.sort_unstable();
            for &pmu in &owned {
                released.push((pmu, vmt));
            }
        }
    }

    let mut pool: Vec<(PmuId, Option<VmtId>)> = free_pool.iter().map(|&p| (p, None)).collect();
    pool.extend(released.iter().map(|&(p, v)| (p, Some(v))));
    pool.sort_unstable_by_key(|&(p, _)| p);

    let mut moves: Vec<PmuMove> = Vec::new();
    let mut pool_iter = pool.into_iter();
    for (vmt, mut deficit) in needs {
        while deficit > 0 {
            match pool_iter.next() {
                Some((pmu, from)) => {
                    moves.push(PmuMove { pmu, from, to: Some(vmt) });
                    deficit -= 1;
                }
                None => break, // infeasible target; assign what exists
            }
        }
    }
    // leftovers that were released but not reassigned still transition out
    for (pmu, from) in pool_iter {
        if from.is_some() {
            moves.push(PmuMove { pmu, from, to: None });
        }
    }
    moves.sort_unstable_by_key(|m| m.pmu);
    TransitionPlan { moves }
}
