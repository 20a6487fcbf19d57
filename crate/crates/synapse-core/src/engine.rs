//! Deterministic cycle loop wiring the traffic source, match stages, the
//! request network, cache blocks, the external lookup unit, and the runtime
//! allocator. One `Engine` is one simulation: same configuration and seed,
//! same outputs, cycle for cycle.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::elu::trie::trie_lookup;
use crate::elu::{memory_bandwidth_gbps, Elu, EluConfig};
use crate::interconnect::{collect_responses, IcnConfig, Interconnect};
use crate::optimizer::{
    plan_reallocation, solve_allocation, CfgGraph, EdgeCounters, PmuMove, SolveMode,
    TransitionEstimator, UslParams, SINK,
};
use crate::pmu::{Pmu, PmuConfig, PmuState};
use crate::traffic::{route_next, FlowSpec, Packet};
use crate::types::{Cycle, LookupResponse, Phv, PmuId, VmtId};
use crate::vmt::{classify_key, Emitted, Vmt, VmtConfig};

/// When and how the runtime allocator runs. Window counters are always
/// collected; this only controls the solve itself.
#[derive(Debug, Clone)]
pub struct OptSchedule {
    /// Solve every this many windows.
    pub period_windows: u64,
    pub mode: SolveMode,
    /// Smoothing weight for the transition estimate.
    pub gamma: f64,
}

impl Default for OptSchedule {
    fn default() -> OptSchedule {
        OptSchedule { period_windows: 100, mode: SolveMode::Heuristic, gamma: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Pipeline clock period; 4.0 ns is a 250 MHz fabric.
    pub cycle_time_ns: f64,
    pub vmts: Vec<VmtConfig>,
    /// Template for every block; ids are assigned by position.
    pub pmu: PmuConfig,
    pub pmu_count: usize,
    pub icn: IcnConfig,
    pub elu: EluConfig,
    /// Routing graph: one node per VMT, probabilities per out-edge, the
    /// residual share of every row drains to the sink.
    pub graph: CfgGraph,
    /// Capacity model per node, used only by the allocator. Empty means
    /// identity (capacity == offered load) everywhere.
    pub usl: Vec<UslParams>,
    /// Blocks owned by each VMT at cycle zero.
    pub initial_assoc: Vec<Vec<PmuId>>,
    pub opt: Option<OptSchedule>,
    pub window_cycles: u64,
    /// Injector backpressure threshold: a packet arriving while its entry
    /// queue holds this many PHVs is dropped at the source.
    pub input_depth: usize,
    /// Give up this many cycles past the last injection.
    pub drain_timeout_cycles: u64,
}

impl EngineConfig {
    /// Workable defaults for n identical stages over `pmu_count` blocks; the
    /// caller still has to provide the graph and the associations.
    pub fn sized(vmts: usize, pmu_count: usize) -> EngineConfig {
        EngineConfig {
            cycle_time_ns: 4.0,
            vmts: (0..vmts).map(|id| VmtConfig { id, ..VmtConfig::default() }).collect(),
            pmu: PmuConfig::default(),
            pmu_count,
            icn: IcnConfig::default(),
            elu: EluConfig::default(),
            graph: CfgGraph::new(vmts),
            usl: Vec::new(),
            initial_assoc: alloc::vec![Vec::new(); vmts],
            opt: None,
            window_cycles: 2_500,
            input_depth: 64,
            drain_timeout_cycles: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    NoVmts,
    NoPmus,
    BadGraph,
    GraphSizeMismatch { graph: usize, vmts: usize },
    UslSizeMismatch { usl: usize, vmts: usize },
    AssocSizeMismatch,
    PmuOutOfRange { pmu: PmuId },
    PmuSharedByTwoVmts { pmu: PmuId },
    BadWindow,
    BadCycleTime,
    BadInputDepth,
    BadOptSchedule,
    FlowKeyCount { flow: usize, keys: usize },
    PacketUnknownFlow { index: usize },
}

impl core::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ConfigError::NoVmts => write!(f, "no match tables configured"),
            ConfigError::NoPmus => write!(f, "no cache blocks configured"),
            ConfigError::BadGraph => write!(f, "routing graph failed validation"),
            ConfigError::GraphSizeMismatch { graph, vmts } => {
                write!(f, "graph has {graph} nodes but {vmts} tables are configured")
            }
            ConfigError::UslSizeMismatch { usl, vmts } => {
                write!(f, "{usl} capacity-model rows for {vmts} tables")
            }
            ConfigError::AssocSizeMismatch => write!(f, "initial association list length mismatch"),
            ConfigError::PmuOutOfRange { pmu } => write!(f, "block id {pmu} out of range"),
            ConfigError::PmuSharedByTwoVmts { pmu } => {
                write!(f, "block {pmu} initially assigned to two tables")
            }
            ConfigError::BadWindow => write!(f, "window length must be positive"),
            ConfigError::BadCycleTime => write!(f, "cycle time must be positive"),
            ConfigError::BadInputDepth => write!(f, "input depth must be positive"),
            ConfigError::BadOptSchedule => write!(f, "allocator schedule invalid"),
            ConfigError::FlowKeyCount { flow, keys } => {
                write!(f, "flow {flow} carries {keys} keys, one per table required")
            }
            ConfigError::PacketUnknownFlow { index } => {
                write!(f, "packet {index} references an unknown flow")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VmtMetrics {
    pub produced: u64,
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
    pub defaulted: u64,
    pub reordered: u64,
    pub displaced: u64,
    pub producer_stall_cycles: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencySummary {
    pub count: u64,
    pub mean: f64,
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
    pub max: u64,
    /// bucket i counts samples with floor(log2(latency)) == i; 0 and 1 land
    /// in bucket 0, everything past 2^31 in the last.
    pub log2_buckets: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WindowRow {
    pub window: u64,
    pub injected: u64,
    pub emitted: u64,
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
    pub active_pmus: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    /// Cycles simulated, injection through drain.
    pub cycles: Cycle,
    pub injected: u64,
    pub dropped: u64,
    pub emitted: u64,
    /// Subset of emitted that the source routed straight to the sink.
    pub bypassed: u64,
    pub in_flight_at_end: u64,
    pub per_vmt: Vec<VmtMetrics>,
    pub hit_rate: f64,
    pub latency: LatencySummary,
    pub throughput_pps: f64,
    pub mem_gbps: f64,
    pub elu_lookups: u64,
    pub elu_reads: u64,
    pub reorder_count: u64,
    pub producer_stall_cycles: u64,
    pub windows: Vec<WindowRow>,
    pub solves: u64,
    pub deferred_solves: u64,
    pub moves: u64,
}

/// Snapshot of every stateful element, emitted when the drain timeout fires.
#[derive(Debug, Clone)]
pub struct DeadlockReport {
    pub cycle: Cycle,
    pub in_flight: u64,
    pub input_depths: Vec<usize>,
    pub vmt_outstanding: Vec<usize>,
    pub vmt_held: Vec<usize>,
    pub icn_queued: usize,
    pub pmu_lines: Vec<String>,
    pub elu_q_mg: usize,
    pub elu_q_lg: usize,
    pub elu_outstanding: usize,
    pub pending_moves: usize,
}

impl core::fmt::Display for DeadlockReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        writeln!(f, "deadlock: drain timeout at cycle {} with {} PHVs in flight", self.cycle, self.in_flight)?;
        for (v, ((inp, out), held)) in
            self.input_depths.iter().zip(&self.vmt_outstanding).zip(&self.vmt_held).enumerate()
        {
            writeln!(f, "  vmt {v}: input={inp} outstanding={out} held={held}")?;
        }
        for line in &self.pmu_lines {
            writeln!(f, "  {line}")?;
        }
        writeln!(f, "  icn: queued={}", self.icn_queued)?;
        writeln!(
            f,
            "  elu: q_mg={} q_lg={} outstanding={}",
            self.elu_q_mg, self.elu_q_lg, self.elu_outstanding
        )?;
        write!(f, "  pending moves: {}", self.pending_moves)
    }
}

#[derive(Debug, Clone, Copy)]
struct PendingMove {
    pmu: PmuId,
    to: Option<VmtId>,
}

#[derive(Debug, Default)]
struct Totals {
    injected: u64,
    dropped: u64,
    emitted: u64,
    bypassed: u64,
    solves: u64,
    deferred_solves: u64,
    moves: u64,
}

#[derive(Debug, Default, Clone, Copy)]
struct WindowSnapshot {
    injected: u64,
    emitted: u64,
    hits: u64,
    misses: u64,
}

#[derive(Debug)]
pub struct Engine {
    cfg: EngineConfig,
    vmts: Vec<Vmt>,
    pmus: Vec<Pmu>,
    icn: Interconnect,
    pub elu: Elu,
    flows: Vec<FlowSpec>,
    /// (cycle, flow), sorted; injection consumes it front to back.
    schedule: Vec<(Cycle, usize)>,
    next_pkt: usize,
    now: Cycle,
    inputs: Vec<VecDeque<Phv>>,
    /// Round-robin pointer for the shared miss bus.
    rotor: usize,
    injected_seq: u64,
    counters: EdgeCounters,
    estimator: Option<TransitionEstimator>,
    pending: VecDeque<PendingMove>,
    last_solve_injected: u64,
    emit_buf: Vec<(VmtId, Emitted)>,
    seq_scratch: Vec<Emitted>,
    latencies: Vec<u64>,
    windows: Vec<WindowRow>,
    window_prev: WindowSnapshot,
    totals: Totals,
}

impl Engine {
    pub fn new(cfg: EngineConfig, flows: Vec<FlowSpec>, packets: &[Packet]) -> Result<Engine, ConfigError> {
        let n = cfg.vmts.len();
        if n == 0 {
            return Err(ConfigError::NoVmts);
        }
        if cfg.pmu_count == 0 {
            return Err(ConfigError::NoPmus);
        }
        if cfg.graph.n != n {
            return Err(ConfigError::GraphSizeMismatch { graph: cfg.graph.n, vmts: n });
        }
        cfg.graph.validate().map_err(|_| ConfigError::BadGraph)?;
        if !cfg.usl.is_empty() && cfg.usl.len() != n {
            return Err(ConfigError::UslSizeMismatch { usl: cfg.usl.len(), vmts: n });
        }
        if cfg.initial_assoc.len() != n {
            return Err(ConfigError::AssocSizeMismatch);
        }
        let mut owner = alloc::vec![None; cfg.pmu_count];
        for (v, set) in cfg.initial_assoc.iter().enumerate() {
            for &p in set {
                if p >= cfg.pmu_count {
                    return Err(ConfigError::PmuOutOfRange { pmu: p });
                }
                if owner[p].replace(v).is_some() {
                    return Err(ConfigError::PmuSharedByTwoVmts { pmu: p });
                }
            }
        }
        if cfg.window_cycles == 0 {
            return Err(ConfigError::BadWindow);
        }
        if !(cfg.cycle_time_ns > 0.0) {
            return Err(ConfigError::BadCycleTime);
        }
        if cfg.input_depth == 0 {
            return Err(ConfigError::BadInputDepth);
        }
        if let Some(s) = &cfg.opt {
            if s.period_windows == 0 || !(s.gamma > 0.0 && s.gamma <= 1.0) {
                return Err(ConfigError::BadOptSchedule);
            }
        }
        for (i, flow) in flows.iter().enumerate() {
            if flow.keys.len() != n {
                return Err(ConfigError::FlowKeyCount { flow: i, keys: flow.keys.len() });
            }
        }
        let mut schedule = Vec::with_capacity(packets.len());
        for (i, p) in packets.iter().enumerate() {
            if p.flow as usize >= flows.len() {
                return Err(ConfigError::PacketUnknownFlow { index: i });
            }
            schedule.push(((p.time_ns / cfg.cycle_time_ns) as Cycle, p.flow as usize));
        }
        schedule.sort_by_key(|&(c, f)| (c, f));

        let mut vmts: Vec<Vmt> = cfg
            .vmts
            .iter()
            .enumerate()
            .map(|(i, vc)| {
                assert_eq!(vc.id, i, "table ids must equal their position");
                Vmt::new(vc.clone())
            })
            .collect();
        let mut pmus: Vec<Pmu> =
            (0..cfg.pmu_count).map(|id| Pmu::new(PmuConfig { id, ..cfg.pmu.clone() })).collect();
        for (v, set) in cfg.initial_assoc.iter().enumerate() {
            for &p in set {
                let ok = pmus[p].set_state(PmuState::Associated { vmt: v, mask: vmts[v].mask });
                assert!(ok);
            }
            vmts[v].set_pmus(set);
        }

        let icn = Interconnect::new(cfg.icn.clone(), cfg.pmu_count);
        let elu = Elu::new(cfg.elu.clone());
        let estimator = cfg.opt.as_ref().map(|s| TransitionEstimator::new(n, s.gamma));
        let usl = if cfg.usl.is_empty() {
            alloc::vec![UslParams::IDENTITY; n]
        } else {
            cfg.usl.clone()
        };
        let mut cfg = cfg;
        cfg.usl = usl;

        Ok(Engine {
            inputs: alloc::vec![VecDeque::new(); n],
            vmts,
            pmus,
            icn,
            elu,
            flows,
            schedule,
            next_pkt: 0,
            now: 0,
            rotor: 0,
            injected_seq: 0,
            counters: EdgeCounters::default(),
            estimator,
            pending: VecDeque::new(),
            last_solve_injected: 0,
            emit_buf: Vec::new(),
            seq_scratch: Vec::new(),
            latencies: Vec::new(),
            windows: Vec::new(),
            window_prev: WindowSnapshot::default(),
            totals: Totals::default(),
            cfg,
        })
    }

    /// Fills the caches as if every flow's key had already been looked up
    /// once: resolvable keys land in their steering block's CAM.
    pub fn prewarm(&mut self) {
        for fi in 0..self.flows.len() {
            for v in 0..self.vmts.len() {
                let key = self.flows[fi].keys[v];
                let Some(trie) = self.elu.policy(v) else { continue };
                let (raw, _) = trie_lookup(trie, &key);
                if !raw.is_found() {
                    continue;
                }
                if let Some(pmu) = classify_key(&self.vmts[v].table, &key) {
                    self.pmus[pmu].cam.insert(&key, raw);
                }
            }
        }
    }

    pub fn vmt_pmus(&self, v: VmtId) -> &[PmuId] {
        &self.vmts[v].pmus
    }

    /// PHVs injected but not yet emitted or dropped.
    fn in_flight(&self) -> u64 {
        let queued: usize = self.inputs.iter().map(|q| q.len()).sum();
        let awaiting: usize = self.vmts.iter().map(|v| v.outstanding_len()).sum();
        let held: usize = self.vmts.iter().map(|v| v.held()).sum();
        (queued + awaiting + held) as u64
    }

    fn idle(&self) -> bool {
        self.in_flight() == 0
            && self.icn.is_idle()
            && self.elu.is_idle()
            && self.pmus.iter().all(|p| p.is_drained())
            && self.pending.is_empty()
    }

    pub fn run(&mut self) -> Result<Metrics, DeadlockReport> {
        let last_injection = self.schedule.last().map(|&(c, _)| c).unwrap_or(0);
        loop {
            if self.next_pkt >= self.schedule.len() && self.idle() {
                break;
            }
            if self.now > last_injection + self.cfg.drain_timeout_cycles {
                return Err(self.deadlock_report());
            }
            self.tick();
        }
        Ok(self.finish())
    }

    fn tick(&mut self) {
        let now = self.now;
        let source = self.cfg.graph.n; // rng stream index distinct from every node

        // traffic injection: all packets due this cycle
        while let Some(&(cyc, flow)) = self.schedule.get(self.next_pkt) {
            if cyc > now {
                break;
            }
            self.next_pkt += 1;
            self.totals.injected += 1;
            let f = &self.flows[flow];
            let entry = route_next(f.path_seed, source, &self.cfg.graph.source);
            if entry == SINK {
                self.counters.record(SINK, SINK);
                self.totals.emitted += 1;
                self.totals.bypassed += 1;
                continue;
            }
            if self.inputs[entry].len() >= self.cfg.input_depth {
                self.totals.dropped += 1;
                continue;
            }
            let phv = Phv {
                flow: f.id,
                seq: self.injected_seq,
                injected_cycle: now,
                path_seed: f.path_seed,
                keys: f.keys.clone(),
                actions: Vec::new(),
            };
            self.injected_seq += 1;
            self.counters.record(SINK, entry);
            self.inputs[entry].push_back(phv);
        }

        // request production, one PHV per stage per cycle
        for v in 0..self.vmts.len() {
            let Some(front) = self.inputs[v].front() else { continue };
            match self.vmts[v].classify(front) {
                None => {
                    let phv = self.inputs[v].pop_front().unwrap();
                    let e = self.vmts[v].admit_default(phv);
                    self.seq_scratch.clear();
                    self.vmts[v].sequence(e, &mut self.seq_scratch);
                    for e in self.seq_scratch.drain(..) {
                        self.emit_buf.push((v, e));
                    }
                }
                Some(pmu) => {
                    if self.vmts[v].can_produce() && self.icn.can_accept(pmu) {
                        let phv = self.inputs[v].pop_front().unwrap();
                        let req = self.vmts[v].produce_request(phv, pmu, now);
                        let accepted = self.icn.offer(v, req);
                        debug_assert!(accepted);
                    } else {
                        self.vmts[v].stats.producer_stall_cycles += 1;
                    }
                }
            }
        }

        // request network arbitration
        self.icn.grant(&mut self.pmus);

        // cache blocks
        for p in &mut self.pmus {
            p.tick();
        }

        // shared miss bus: one forwarded miss per cycle, round robin
        if !self.elu.q_mg.is_full() {
            let count = self.pmus.len();
            for i in 0..count {
                let p = (self.rotor + i) % count;
                if let Some(req) = self.pmus[p].q_m.pop() {
                    self.elu.q_mg.push(req).ok().unwrap();
                    self.rotor = (p + 1) % count;
                    break;
                }
            }
        }

        // external lookups
        self.elu.tick(now);

        // resolutions back to their blocks; a raw NOT_FOUND resolves to the
        // table's default action, the raw verdict still drives negative
        // caching
        for _ in 0..self.elu.cfg.drain_width {
            let Some(reply) = self.elu.q_lg.peek() else { break };
            let req = reply.req;
            let raw = reply.raw;
            let action = if raw.is_found() { raw } else { self.vmts[req.vmt].cfg.default_action };
            let resp = LookupResponse::resolution(req.req_id, req.vmt, req.pmu, action);
            if self.pmus[req.pmu].deliver_resolution(resp, raw, &req.key) {
                self.elu.q_lg.pop();
            } else {
                break; // reply queue full: head of line waits
            }
        }

        // response bus and consumption
        collect_responses(&mut self.pmus, &mut self.icn, now);
        for resp in self.icn.due_responses(now) {
            if let Some(e) = self.vmts[resp.vmt].consume_response(&resp, now) {
                self.seq_scratch.clear();
                self.vmts[resp.vmt].sequence(e, &mut self.seq_scratch);
                for e in self.seq_scratch.drain(..) {
                    self.emit_buf.push((resp.vmt, e));
                }
            }
        }

        // route this cycle's emissions onward
        let mut emitted = core::mem::take(&mut self.emit_buf);
        for (v, e) in emitted.drain(..) {
            if let Some(l) = e.latency {
                self.latencies.push(l);
            }
            let next = route_next(e.phv.path_seed, v, &self.cfg.graph.out[v]);
            self.counters.record(v, next);
            if next == SINK {
                self.totals.emitted += 1;
            } else {
                self.inputs[next].push_back(e.phv);
            }
        }
        self.emit_buf = emitted;

        // blocks finishing their transition
        self.advance_pending();

        if (now + 1) % self.cfg.window_cycles == 0 {
            self.window_boundary(now);
        }
        self.now = now + 1;
    }

    fn advance_pending(&mut self) {
        let mut i = 0;
        while i < self.pending.len() {
            let m = self.pending[i];
            if self.pmus[m.pmu].try_finish_release() {
                self.pending.remove(i);
                if let Some(v) = m.to {
                    self.associate(m.pmu, v);
                }
                self.totals.moves += 1;
            } else {
                i += 1;
            }
        }
    }

    fn associate(&mut self, pmu: PmuId, v: VmtId) {
        let ok = self.pmus[pmu].set_state(PmuState::Associated { vmt: v, mask: self.vmts[v].mask });
        assert!(ok, "protocol fault: associating a block that is not free");
        let mut set = self.vmts[v].pmus.clone();
        set.push(pmu);
        self.vmts[v].set_pmus(&set);
    }

    fn begin_move(&mut self, m: &PmuMove) {
        match m.from {
            Some(v) => {
                let ok = self.pmus[m.pmu].begin_release();
                assert!(ok, "protocol fault: releasing a block that is not associated");
                let set: Vec<PmuId> =
                    self.vmts[v].pmus.iter().copied().filter(|&p| p != m.pmu).collect();
                self.vmts[v].set_pmus(&set);
                self.pending.push_back(PendingMove { pmu: m.pmu, to: m.to });
            }
            None => {
                if let Some(v) = m.to {
                    self.associate(m.pmu, v);
                    self.totals.moves += 1;
                }
            }
        }
    }

    fn window_boundary(&mut self, now: Cycle) {
        let window = (now + 1) / self.cfg.window_cycles - 1;
        let hits: u64 = self.vmts.iter().map(|v| v.stats.emitted_hits).sum();
        let misses: u64 = self.vmts.iter().map(|v| v.stats.emitted_resolutions).sum();
        let dh = hits - self.window_prev.hits;
        let dm = misses - self.window_prev.misses;
        let row = WindowRow {
            window,
            injected: self.totals.injected - self.window_prev.injected,
            emitted: self.totals.emitted - self.window_prev.emitted,
            hits: dh,
            misses: dm,
            hit_rate: if dh + dm > 0 { dh as f64 / (dh + dm) as f64 } else { 0.0 },
            active_pmus: self.pmus.iter().filter(|p| !matches!(p.state, PmuState::Free)).count(),
        };
        self.windows.push(row);
        self.window_prev = WindowSnapshot {
            injected: self.totals.injected,
            emitted: self.totals.emitted,
            hits,
            misses,
        };

        if let Some(est) = &mut self.estimator {
            est.update(&self.counters);
        }
        self.counters.reset();
        self.check_assoc_invariant();

        if let Some(sched) = self.cfg.opt.clone() {
            if (window + 1) % sched.period_windows == 0 {
                self.solve_and_plan(&sched);
            }
        }
    }

    fn solve_and_plan(&mut self, sched: &OptSchedule) {
        // never re-plan over an unfinished transition
        if !self.pending.is_empty() {
            self.totals.deferred_solves += 1;
            return;
        }
        let injected = self.totals.injected - self.last_solve_injected;
        self.last_solve_injected = self.totals.injected;
        let graph = self.estimator.as_ref().unwrap().to_cfg();
        if graph.source.is_empty() || injected == 0 {
            return; // nothing observed yet
        }
        let period_ns =
            (self.cfg.window_cycles * sched.period_windows) as f64 * self.cfg.cycle_time_ns;
        let rate_mpps = injected as f64 * 1e3 / period_ns;
        match solve_allocation(&graph, self.pmus.len(), &self.cfg.usl, rate_mpps, sched.mode) {
            Ok(alloc) => {
                self.totals.solves += 1;
                let mut target: BTreeMap<VmtId, usize> = BTreeMap::new();
                for (v, &count) in alloc.counts.iter().enumerate() {
                    if count > 0 {
                        target.insert(v, count);
                    }
                }
                let current: BTreeMap<VmtId, Vec<PmuId>> = self
                    .vmts
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| !m.pmus.is_empty())
                    .map(|(v, m)| (v, m.pmus.clone()))
                    .collect();
                let free: Vec<PmuId> = (0..self.pmus.len())
                    .filter(|&p| matches!(self.pmus[p].state, PmuState::Free))
                    .collect();
                let plan = plan_reallocation(&current, &free, &target);
                for m in &plan.moves {
                    self.begin_move(m);
                }
            }
            Err(_) => {
                self.totals.deferred_solves += 1;
            }
        }
    }

    /// Association tables and block states must agree at every boundary.
    fn check_assoc_invariant(&self) {
        if cfg!(debug_assertions) {
            let mut owned = 0usize;
            for (v, vmt) in self.vmts.iter().enumerate() {
                for &p in &vmt.pmus {
                    owned += 1;
                    assert!(
                        matches!(self.pmus[p].state, PmuState::Associated { vmt: o, .. } if o == v),
                        "block {p} in table {v}'s set but not associated to it"
                    );
                }
            }
            let associated =
                self.pmus.iter().filter(|p| matches!(p.state, PmuState::Associated { .. })).count();
            assert_eq!(owned, associated);
        }
    }

    fn deadlock_report(&self) -> DeadlockReport {
        let pmu_lines = self
            .pmus
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let state = match p.state {
                    PmuState::Free => String::from("free"),
                    PmuState::Associated { vmt, .. } => format!("associated(vmt={vmt})"),
                    PmuState::Transient { vmt, .. } => format!("transient(vmt={vmt})"),
                };
                format!(
                    "pmu {i}: {state} q_r={} q_p={} q_m={} outstanding={}",
                    p.q_r.len(),
                    p.q_p.len(),
                    p.q_m.len(),
                    p.outstanding
                )
            })
            .collect();
        DeadlockReport {
            cycle: self.now,
            in_flight: self.in_flight(),
            input_depths: self.inputs.iter().map(|q| q.len()).collect(),
            vmt_outstanding: self.vmts.iter().map(|v| v.outstanding_len()).collect(),
            vmt_held: self.vmts.iter().map(|v| v.held()).collect(),
            icn_queued: self.icn.queued(),
            pmu_lines,
            elu_q_mg: self.elu.q_mg.len(),
            elu_q_lg: self.elu.q_lg.len(),
            elu_outstanding: self.elu.outstanding(),
            pending_moves: self.pending.len(),
        }
    }

    fn finish(&mut self) -> Metrics {
        let per_vmt: Vec<VmtMetrics> = self
            .vmts
            .iter()
            .map(|v| {
                let s = &v.stats;
                let looked = s.emitted_hits + s.emitted_resolutions;
                VmtMetrics {
                    produced: s.produced,
                    hits: s.emitted_hits,
                    misses: s.emitted_resolutions,
                    hit_rate: if looked > 0 { s.emitted_hits as f64 / looked as f64 } else { 0.0 },
                    defaulted: s.default_steered,
                    reordered: s.reordered_emissions,
                    displaced: s.displaced_resolutions,
                    producer_stall_cycles: s.producer_stall_cycles,
                }
            })
            .collect();
        let hits: u64 = per_vmt.iter().map(|v| v.hits).sum();
        let misses: u64 = per_vmt.iter().map(|v| v.misses).sum();
        let in_flight = self.in_flight();
        assert_eq!(
            self.totals.injected,
            self.totals.dropped + self.totals.emitted + in_flight,
            "conservation violated"
        );

        self.latencies.sort_unstable();
        let latency = summarize_latencies(&self.latencies);
        let elapsed_s = self.now as f64 * self.cfg.cycle_time_ns * 1e-9;
        Metrics {
            cycles: self.now,
            injected: self.totals.injected,
            dropped: self.totals.dropped,
            emitted: self.totals.emitted,
            bypassed: self.totals.bypassed,
            in_flight_at_end: in_flight,
            hit_rate: if hits + misses > 0 { hits as f64 / (hits + misses) as f64 } else { 0.0 },
            per_vmt,
            latency,
            throughput_pps: if elapsed_s > 0.0 { self.totals.emitted as f64 / elapsed_s } else { 0.0 },
            mem_gbps: memory_bandwidth_gbps(
                self.elu.stats.reads,
                self.elu.cfg.node_bytes,
                self.now,
                self.cfg.cycle_time_ns,
            ),
            elu_lookups: self.elu.stats.admitted,
            elu_reads: self.elu.stats.reads,
            reorder_count: self.vmts.iter().map(|v| v.stats.reordered_emissions).sum(),
            producer_stall_cycles: self.vmts.iter().map(|v| v.stats.producer_stall_cycles).sum(),
            windows: self.windows.clone(),
            solves: self.totals.solves,
            deferred_solves: self.totals.deferred_solves,
            moves: self.totals.moves,
        }
    }
}

fn summarize_latencies(sorted: &[u64]) -> LatencySummary {
    let mut buckets = alloc::vec![0u64; 32];
    let mut sum = 0u128;
    for &l in sorted {
        sum += l as u128;
        let idx = if l < 2 { 0 } else { (63 - l.leading_zeros() as usize).min(31) };
        buckets[idx] += 1;
    }
    let pct = |q: f64| -> u64 {
        if sorted.is_empty() {
            return 0;
        }
        let rank = libm::ceil(q * sorted.len() as f64) as usize;
        sorted[rank.clamp(1, sorted.len()) - 1]
    };
    LatencySummary {
        count: sorted.len() as u64,
        mean: if sorted.is_empty() { 0.0 } else { sum as f64 / sorted.len() as f64 },
        p50: pct(0.50),
        p95: pct(0.95),
        p99: pct(0.99),
        max: sorted.last().copied().unwrap_or(0),
        log2_buckets: buckets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elu::rules::{expand_rules, FieldMatch, Rule, RuleField};
    use crate::elu::trie::build_trie;
    use crate::types::{ActionRef, Key};

    /// Policy that resolves every key to the same action at the trie root.
    fn catch_all_policy(action: u32) -> crate::elu::trie::Trie {
        let rules = alloc::vec![Rule {
            fields: alloc::vec![RuleField { width: 32, m: FieldMatch::Prefix { value: 0, len: 0 } }],
            action: ActionRef(action),
            priority: 0,
        }];
        let prefixes = expand_rules(&rules).unwrap();
        build_trie(&prefixes, 4, 8, 32).unwrap()
    }

    /// Policy with one fully specified rule: a matching walk reads all eight
    /// levels.
    fn exact_policy(key: u32, action: u32) -> crate::elu::trie::Trie {
        let rules = alloc::vec![Rule {
            fields: alloc::vec![RuleField {
                width: 32,
                m: FieldMatch::Prefix { value: key as u64, len: 32 },
            }],
            action: ActionRef(action),
            priority: 0,
        }];
        let prefixes = expand_rules(&rules).unwrap();
        build_trie(&prefixes, 4, 8, 32).unwrap()
    }

    fn flow(id: u64, key: u32, n_vmts: usize) -> FlowSpec {
        FlowSpec {
            id,
            size: 1,
            rate_pps: 0.0,
            start_ns: 0.0,
            rule_rank: 0,
            path_seed: 0x5eed_0000 + id,
            keys: alloc::vec![Key::from_u32(key); n_vmts],
        }
    }

    fn single_stage_config() -> EngineConfig {
        let mut cfg = EngineConfig::sized(1, 1);
        cfg.graph.source = alloc::vec![(0, 1.0)];
        cfg.initial_assoc = alloc::vec![alloc::vec![0]];
        cfg
    }

    fn pkt(time_ns: f64, flow: u64) -> Packet {
        Packet { time_ns, flow }
    }

    #[test]
    fn zero_packet_run_exits_clean() {
        let cfg = single_stage_config();
        let mut eng = Engine::new(cfg, alloc::vec![], &[]).unwrap();
        let m = eng.run().unwrap();
        assert_eq!(m.cycles, 0);
        assert_eq!(m.injected, 0);
        assert_eq!(m.emitted, 0);
        assert_eq!(m.dropped, 0);
        assert_eq!(m.latency.count, 0);
        assert!(m.windows.is_empty());
    }

    #[test]
    fn prewarmed_single_packet_hits_on_the_constant_path() {
        let cfg = single_stage_config();
        let hit_path = cfg.pmu.timing.tau_c + cfg.icn.response_latency;
        let mut eng =
            Engine::new(cfg, alloc::vec![flow(0, 7, 1)], &[pkt(0.0, 0)]).unwrap();
        eng.elu.install_policy(0, catch_all_policy(9));
        eng.prewarm();
        let m = eng.run().unwrap();
        assert_eq!(m.emitted, 1);
        assert_eq!(m.per_vmt[0].hits, 1);
        assert_eq!(m.per_vmt[0].misses, 0);
        assert!((m.hit_rate - 1.0).abs() < 1e-12);
        assert_eq!(m.latency.count, 1);
        assert_eq!(m.latency.p50, hit_path);
        assert_eq!(m.latency.max, hit_path);
    }

    #[test]
    fn cold_miss_resolves_through_the_external_unit() {
        let mut eng =
            Engine::new(single_stage_config(), alloc::vec![flow(0, 7, 1)], &[pkt(0.0, 0), pkt(4000.0, 0)])
                .unwrap();
        eng.elu.install_policy(0, exact_policy(7, 9));
        let m = eng.run().unwrap();
        assert_eq!(m.emitted, 2);
        assert_eq!(m.per_vmt[0].misses, 1);
        // second packet finds the resolution cached
        assert_eq!(m.per_vmt[0].hits, 1);
        assert_eq!(m.elu_lookups, 1);
        assert_eq!(m.elu_reads, 8);
        // full trie walk plus queueing on both sides of the walk
        assert!(m.latency.max >= 404 && m.latency.max <= 416, "miss latency {}", m.latency.max);
    }

    #[test]
    fn unresolvable_key_falls_back_to_the_default_action() {
        let mut cfg = single_stage_config();
        cfg.vmts[0].default_action = ActionRef(3);
        let mut eng = Engine::new(cfg, alloc::vec![flow(0, 7, 1)], &[pkt(0.0, 0)]).unwrap();
        // no policy installed: the walk reports no covering rule
        let m = eng.run().unwrap();
        assert_eq!(m.emitted, 1);
        assert_eq!(m.per_vmt[0].misses, 1);
        assert_eq!(m.per_vmt[0].hits, 0);
    }

    fn two_stage_workload() -> (EngineConfig, Vec<FlowSpec>, Vec<Packet>) {
        let mut cfg = EngineConfig::sized(2, 3);
        cfg.graph.source = alloc::vec![(0, 1.0)];
        cfg.graph.out[0] = alloc::vec![(1, 0.7)];
        cfg.initial_assoc = alloc::vec![alloc::vec![0, 1], alloc::vec![2]];
        cfg.window_cycles = 200;
        let flows: Vec<FlowSpec> = (0..16).map(|i| flow(i, 100 + i as u32, 2)).collect();
        let packets: Vec<Packet> =
            (0..400).map(|i| pkt(i as f64 * 11.0, (i % 16) as u64)).collect();
        (cfg, flows, packets)
    }

    #[test]
    fn identical_runs_produce_identical_metrics() {
        let (cfg, flows, packets) = two_stage_workload();
        let run = |cfg: EngineConfig, flows: Vec<FlowSpec>| {
            let mut eng = Engine::new(cfg, flows, &packets).unwrap();
            eng.elu.install_policy(0, catch_all_policy(5));
            eng.elu.install_policy(1, catch_all_policy(6));
            eng.run().unwrap()
        };
        let a = run(cfg.clone(), flows.clone());
        let b = run(cfg, flows);
        assert_eq!(a, b);
        assert!(a.emitted > 0);
        assert!(!a.windows.is_empty());
    }

    #[test]
    fn conservation_holds_under_source_drops() {
        let (mut cfg, flows, _) = two_stage_workload();
        cfg.input_depth = 2;
        // a burst far above the drain rate forces source drops
        let packets: Vec<Packet> = (0..600).map(|i| pkt((i / 100) as f64, (i % 16) as u64)).collect();
        let mut eng = Engine::new(cfg, flows, &packets).unwrap();
        eng.elu.install_policy(0, catch_all_policy(5));
        eng.elu.install_policy(1, catch_all_policy(6));
        let m = eng.run().unwrap();
        assert!(m.dropped > 0, "burst should overflow the entry queue");
        assert_eq!(m.injected, m.dropped + m.emitted);
        assert_eq!(m.in_flight_at_end, 0);
    }

    #[test]
    fn deeper_queues_never_hurt_throughput() {
        let (cfg, flows, _) = two_stage_workload();
        let packets: Vec<Packet> = (0..600).map(|i| pkt((i / 100) as f64, (i % 16) as u64)).collect();
        let emitted = |cfg: EngineConfig| {
            let mut eng = Engine::new(cfg, flows.clone(), &packets).unwrap();
            eng.elu.install_policy(0, catch_all_policy(5));
            eng.elu.install_policy(1, catch_all_policy(6));
            eng.run().unwrap().emitted
        };
        let mut big = cfg.clone();
        big.input_depth *= 2;
        big.icn.deferred_cap *= 2;
        big.pmu.qr_depth *= 2;
        big.pmu.qp_depth *= 2;
        big.pmu.qm_depth *= 2;
        big.elu.qmg_depth *= 2;
        big.elu.qlg_depth *= 2;
        big.elu.orb_capacity *= 2;
        for v in &mut big.vmts {
            v.await_depth *= 2;
        }
        let base = emitted(cfg);
        let deep = emitted(big);
        assert!(deep >= base, "doubling depths lowered emitted {base} -> {deep}");
    }

    #[test]
    fn strict_order_stream_has_no_reordering() {
        let (mut cfg, flows, packets) = two_stage_workload();
        for v in &mut cfg.vmts {
            v.strict_order = true;
        }
        let mut eng = Engine::new(cfg, flows, &packets).unwrap();
        eng.elu.install_policy(0, catch_all_policy(5));
        eng.elu.install_policy(1, catch_all_policy(6));
        let m = eng.run().unwrap();
        assert_eq!(m.reorder_count, 0);
        assert_eq!(m.emitted, m.injected - m.dropped);
    }

    #[test]
    fn allocator_reclaims_idle_blocks() {
        let mut cfg = EngineConfig::sized(2, 4);
        cfg.graph.source = alloc::vec![(0, 1.0)]; // node 1 never sees traffic
        cfg.initial_assoc = alloc::vec![alloc::vec![0], alloc::vec![1, 2, 3]];
        cfg.window_cycles = 100;
        cfg.opt = Some(OptSchedule { period_windows: 2, mode: SolveMode::Exact, gamma: 0.5 });
        // growth has to pay off for the solver to spread blocks
        cfg.usl = alloc::vec![UslParams { alpha0: 0.0, alpha1: 1e-3, beta0: 1e-3, beta1: 0.0 }; 2];
        let flows: Vec<FlowSpec> = (0..8).map(|i| flow(i, 40 + i as u32, 2)).collect();
        let packets: Vec<Packet> = (0..3000).map(|i| pkt(i as f64 * 5.0, (i % 8) as u64)).collect();
        let mut eng = Engine::new(cfg, flows, &packets).unwrap();
        eng.elu.install_policy(0, catch_all_policy(5));
        eng.elu.install_policy(1, catch_all_policy(6));
        let m = eng.run().unwrap();
        assert!(m.solves >= 1);
        assert!(m.moves >= 3, "idle table should surrender its blocks, got {} moves", m.moves);
        assert_eq!(eng.vmt_pmus(1).len(), 0);
        assert_eq!(eng.vmt_pmus(0).len(), 4);
        assert_eq!(m.in_flight_at_end, 0);
    }

    #[test]
    fn stalled_pipeline_reports_a_deadlock() {
        let mut cfg = single_stage_config();
        // a block this slow cannot serve the lookup before the deadline
        cfg.pmu.timing.clock_ratio = 1e-4;
        cfg.drain_timeout_cycles = 2_000;
        let mut eng = Engine::new(cfg, alloc::vec![flow(0, 7, 1)], &[pkt(0.0, 0)]).unwrap();
        eng.elu.install_policy(0, catch_all_policy(9));
        let report = eng.run().unwrap_err();
        assert_eq!(report.in_flight, 1);
        assert_eq!(report.vmt_outstanding[0], 1);
        let text = format!("{report}");
        assert!(text.contains("deadlock"));
        assert!(text.contains("pmu 0"));
    }

    #[test]
    fn window_series_accounts_for_all_traffic() {
        let (cfg, flows, packets) = two_stage_workload();
        let window = cfg.window_cycles;
        let mut eng = Engine::new(cfg, flows, &packets).unwrap();
        eng.elu.install_policy(0, catch_all_policy(5));
        eng.elu.install_policy(1, catch_all_policy(6));
        let m = eng.run().unwrap();
        assert_eq!(m.windows.len() as u64, m.cycles / window);
        let w_injected: u64 = m.windows.iter().map(|w| w.injected).sum();
        let w_emitted: u64 = m.windows.iter().map(|w| w.emitted).sum();
        assert!(w_injected <= m.injected);
        assert!(w_emitted <= m.emitted);
        for w in &m.windows {
            assert!((0.0..=1.0).contains(&w.hit_rate));
            assert_eq!(w.active_pmus, 3); // no allocator: associations never change
        }
    }

    #[test]
    fn rejects_overlapping_initial_association() {
        let mut cfg = EngineConfig::sized(2, 2);
        cfg.graph.source = alloc::vec![(0, 1.0)];
        cfg.initial_assoc = alloc::vec![alloc::vec![0], alloc::vec![0]];
        let err = Engine::new(cfg, alloc::vec![], &[]).unwrap_err();
        assert_eq!(err, ConfigError::PmuSharedByTwoVmts { pmu: 0 });
    }

    #[test]
    fn rejects_flows_with_missing_keys() {
        let cfg = single_stage_config();
        let bad = FlowSpec { keys: Vec::new(), ..flow(0, 1, 1) };
        let err = Engine::new(cfg, alloc::vec![bad], &[]).unwrap_err();
        assert_eq!(err, ConfigError::FlowKeyCount { flow: 0, keys: 0 });
    }
}
