//! Turns a `SimConfig` into a ready-to-run engine: rulesets, lookup tries,
//! traffic, routing graph, block ownership.

use crate::config::SimConfig;
use crate::formats;
use anyhow::{bail, Result};
use std::path::Path;
use synapse_core::elu::rules::{expand_rules, spine_prune, Rule};
use synapse_core::elu::trie::{build_trie, Trie};
use synapse_core::engine::{Engine, EngineConfig, Metrics, OptSchedule};
use synapse_core::interconnect::IcnConfig;
use synapse_core::optimizer::{CfgGraph, SolveMode, UslParams};
use synapse_core::pmu::{PmuConfig, PmuTiming};
use synapse_core::rng::SimRng;
use synapse_core::traffic::{
    gen_flows, gen_packets, gen_ruleset, materialize_keys, FlowSizeDistribution, FlowSpec, Packet,
    RulesetSpec,
};
use synapse_core::types::{ActionRef, PmuId, VmtId};
use synapse_core::vmt::VmtConfig;

/// Everything needed to run and re-run one experiment cell.
pub struct Scenario {
    pub engine_cfg: EngineConfig,
    pub flows: Vec<FlowSpec>,
    pub packets: Vec<Packet>,
    pub tries: Vec<Trie>,
    pub prewarm: bool,
}

impl Scenario {
    pub fn build(cfg: &SimConfig, base: &Path) -> Result<Scenario> {
        cfg.validate()?;
        let rulesets = build_rulesets(cfg, base)?;
        let (flows, packets) = build_traffic(cfg, base, &rulesets)?;
        let tries = build_tries(cfg, &rulesets)?;
        let (graph, usl) = build_graph(cfg, base)?;
        if graph.n != cfg.vmt.count {
            bail!("graph has {} nodes but vmt.count is {}", graph.n, cfg.vmt.count);
        }
        let engine_cfg = engine_config(cfg, graph, usl);
        Ok(Scenario { engine_cfg, flows, packets, tries, prewarm: cfg.pipeline.prewarm })
    }

    /// Like `build`, but with caller-supplied traffic. Keys are materialized
    /// here so the flows bind to this config's rulesets.
    pub fn build_with_traffic(
        cfg: &SimConfig,
        base: &Path,
        mut flows: Vec<FlowSpec>,
        packets: Vec<Packet>,
    ) -> Result<Scenario> {
        cfg.validate()?;
        let rulesets = build_rulesets(cfg, base)?;
        materialize_keys(&mut flows, &rulesets, cfg.vmt.key_width_bytes, cfg.seed);
        let tries = build_tries(cfg, &rulesets)?;
        let (graph, usl) = build_graph(cfg, base)?;
        if graph.n != cfg.vmt.count {
            bail!("graph has {} nodes but vmt.count is {}", graph.n, cfg.vmt.count);
        }
        let engine_cfg = engine_config(cfg, graph, usl);
        Ok(Scenario { engine_cfg, flows, packets, tries, prewarm: cfg.pipeline.prewarm })
    }

    pub fn into_engine(self) -> Result<Engine> {
        let mut eng = Engine::new(self.engine_cfg, self.flows, &self.packets)
            .map_err(|e| anyhow::anyhow!("engine config: {e}"))?;
        for (v, trie) in self.tries.into_iter().enumerate() {
            eng.elu.install_policy(v, trie);
        }
        if self.prewarm {
            eng.prewarm();
        }
        Ok(eng)
    }
}

/// A stalled pipeline, carrying the engine's diagnostic text. Kept as its
/// own type so callers can map it to a distinct exit code.
#[derive(Debug)]
pub struct DeadlockError(pub String);

impl std::fmt::Display for DeadlockError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for DeadlockError {}

/// Run to completion. A deadlock surfaces as a `DeadlockError`.
pub fn run_scenario(sc: Scenario) -> Result<Metrics> {
    let mut eng = sc.into_engine()?;
    eng.run().map_err(|report| anyhow::Error::new(DeadlockError(format!("{report}"))))
}

/// Stream tag for trace-derived path seeds, distinct from the generator's
/// own streams.
const TRACE_PATH_STREAM: u64 = 0x7ACE << 32;

fn table_seed(seed: u64, vmt: VmtId) -> u64 {
    seed.wrapping_add((vmt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn build_rulesets(cfg: &SimConfig, base: &Path) -> Result<Vec<Vec<Rule>>> {
    if !cfg.rules.file.is_empty() {
        let rules = formats::load_ruleset(&base.join(&cfg.rules.file))?;
        if rules.is_empty() {
            bail!("ruleset file {} holds no rules", cfg.rules.file);
        }
        return Ok(vec![rules; cfg.vmt.count]);
    }
    let spec = RulesetSpec {
        field_width_bits: cfg.vmt.key_width_bytes * 8,
        count: cfg.rules.count,
        length_histogram: cfg.rules.lengths.clone(),
    };
    (0..cfg.vmt.count)
        .map(|v| {
            gen_ruleset(&spec, table_seed(cfg.seed, v))
                .map_err(|e| anyhow::anyhow!("generating ruleset for table {v}: {e:?}"))
        })
        .collect()
}

fn size_distribution(cfg: &SimConfig, base: &Path) -> Result<FlowSizeDistribution> {
    let t = &cfg.traffic;
    let d = match t.size_dist.as_str() {
        "zipf" => FlowSizeDistribution::zipf(t.zipf_max, t.zipf_exponent),
        "pareto" => FlowSizeDistribution::pareto(t.pareto_alpha, t.pareto_xmin),
        "uniform" => FlowSizeDistribution::uniform(t.uniform_lo, t.uniform_hi),
        "file" => {
            let points = formats::load_cdf(&base.join(&t.cdf_file))?;
            FlowSizeDistribution::empirical(points)
        }
        other => bail!("unknown size_dist {other:?}"),
    };
    d.map_err(|e| anyhow::anyhow!("size distribution: {e:?}"))
}

fn build_traffic(
    cfg: &SimConfig,
    base: &Path,
    rulesets: &[Vec<Rule>],
) -> Result<(Vec<FlowSpec>, Vec<Packet>)> {
    match cfg.traffic.mode.as_str() {
        "generate" => {
            let dist = size_distribution(cfg, base)?;
            let mut flows = gen_flows(
                &dist,
                cfg.traffic.flow_count,
                cfg.traffic.rate_pps,
                cfg.pipeline.duration_ns(),
                rulesets[0].len(),
                cfg.traffic.rule_zipf_exponent,
                cfg.seed,
            );
            materialize_keys(&mut flows, rulesets, cfg.vmt.key_width_bytes, cfg.seed);
            let packets = gen_packets(&flows, cfg.pipeline.duration_ns(), cfg.seed);
            Ok((flows, packets))
        }
        "trace" => {
            let rows = formats::load_trace(&base.join(&cfg.traffic.trace_file))?;
            traffic_from_trace(cfg, rows)
        }
        other => bail!("unknown traffic.mode {other:?}"),
    }
}

/// A trace carries the entry key per packet; the same key is used at every
/// table. Flow ids are compacted in first-appearance order and path seeds
/// are derived from the run seed so routing stays reproducible.
fn traffic_from_trace(
    cfg: &SimConfig,
    rows: Vec<formats::TraceRow>,
) -> Result<(Vec<FlowSpec>, Vec<Packet>)> {
    let mut flows: Vec<FlowSpec> = Vec::new();
    let mut dense: std::collections::HashMap<u64, usize> = std::collections::HashMap::new();
    let mut packets = Vec::with_capacity(rows.len());
    for row in &rows {
        let idx = match dense.get(&row.flow) {
            Some(&i) => i,
            None => {
                if row.key.width() != cfg.vmt.key_width_bytes as usize {
                    bail!(
                        "trace flow {} has a {}-byte key, config says {}",
                        row.flow,
                        row.key.width(),
                        cfg.vmt.key_width_bytes
                    );
                }
                let i = flows.len();
                let mut rng = SimRng::new(cfg.seed, TRACE_PATH_STREAM ^ row.flow);
                flows.push(FlowSpec {
                    id: i as u64,
                    size: 0,
                    rate_pps: 0.0,
                    start_ns: row.time_ns,
                    rule_rank: 0,
                    path_seed: rng.next_u64(),
                    keys: vec![row.key; cfg.vmt.count],
                });
                dense.insert(row.flow, i);
                i
            }
        };
        if flows[idx].keys[0] != row.key {
            bail!("trace flow {} changes key mid-stream", row.flow);
        }
        packets.push(Packet { time_ns: row.time_ns, flow: idx as u64 });
    }
    if packets.is_empty() {
        bail!("trace holds no packets");
    }
    Ok((flows, packets))
}

pub fn build_tries(cfg: &SimConfig, rulesets: &[Vec<Rule>]) -> Result<Vec<Trie>> {
    let width_bits = cfg.vmt.key_width_bytes as usize * 8;
    rulesets
        .iter()
        .enumerate()
        .map(|(v, rules)| {
            let expanded =
                expand_rules(rules).map_err(|e| anyhow::anyhow!("table {v} ruleset: {e}"))?;
            if let Some(long) = expanded.iter().find(|r| r.prefix.len() > width_bits) {
                bail!(
                    "table {v}: rule prefix of {} bits exceeds the {width_bits}-bit key",
                    long.prefix.len()
                );
            }
            let pruned = spine_prune(&expanded);
            build_trie(&pruned, cfg.elu.stride, cfg.elu.banks, width_bits)
                .map_err(|e| anyhow::anyhow!("table {v} trie: {e:?}"))
        })
        .collect()
}

fn build_graph(cfg: &SimConfig, base: &Path) -> Result<(CfgGraph, Vec<UslParams>)> {
    if !cfg.graph.file.is_empty() {
        return formats::load_cfg(&base.join(&cfg.graph.file));
    }
    let n = cfg.vmt.count;
    let mut out = vec![Vec::new(); n];
    for &(from, to, prob) in &cfg.graph.edges {
        if from >= n || to >= n {
            bail!("inline edge {from} -> {to} references a node outside 0..{n}");
        }
        out[from].push((to, prob));
    }
    let graph = CfgGraph { n, source: cfg.graph.source.clone(), out };
    graph.validate().map_err(|e| anyhow::anyhow!("inline graph: {e:?}"))?;

    let usl = match cfg.optimizer.usl.len() {
        0 => vec![UslParams::IDENTITY; n],
        1 => vec![row_params(cfg.optimizer.usl[0]); n],
        k if k == n => cfg.optimizer.usl.iter().map(|&r| row_params(r)).collect(),
        k => bail!("optimizer.usl has {k} rows, want 1 or {n}"),
    };
    Ok((graph, usl))
}

fn row_params(r: [f64; 4]) -> UslParams {
    UslParams { alpha0: r[0], alpha1: r[1], beta0: r[2], beta1: r[3] }
}

pub fn initial_assoc(cfg: &SimConfig) -> Vec<Vec<PmuId>> {
    let n = cfg.vmt.count;
    let mut assoc = vec![Vec::new(); n];
    if cfg.vmt.initial_blocks.is_empty() {
        for pmu in 0..cfg.pmu.count {
            assoc[pmu % n].push(pmu);
        }
    } else {
        let mut next = 0;
        for (v, &count) in cfg.vmt.initial_blocks.iter().enumerate() {
            assoc[v] = (next..next + count).collect();
            next += count;
        }
    }
    assoc
}

fn engine_config(cfg: &SimConfig, graph: CfgGraph, usl: Vec<UslParams>) -> EngineConfig {
    let vmts = (0..cfg.vmt.count)
        .map(|id| VmtConfig {
            id,
            table_exp: cfg.vmt.table_exp as u32,
            vnodes_per_pmu: cfg.vmt.vnodes_per_pmu,
            ring_salt: (table_seed(cfg.seed, id) >> 32) as u32,
            await_depth: cfg.vmt.await_depth,
            key_width: cfg.vmt.key_width_bytes as usize,
            default_action: ActionRef(cfg.vmt.default_action),
            strict_order: cfg.vmt.strict_order,
        })
        .collect();
    let pmu = PmuConfig {
        id: 0,
        block_size: cfg.pmu.block_size,
        timing: PmuTiming {
            tau_c: cfg.pmu.tau_c,
            ii_c: cfg.pmu.ii_c,
            clock_ratio: cfg.pmu.clock_ratio,
        },
        qr_depth: cfg.pmu.qr_depth,
        qp_depth: cfg.pmu.qp_depth,
        qm_depth: cfg.pmu.qm_depth,
        negative_caching: cfg.pmu.negative_caching,
    };
    let icn = IcnConfig {
        channels: cfg.icn.channels,
        deferred_cap: cfg.icn.deferred_cap,
        response_latency: cfg.icn.response_latency,
    };
    let elu = synapse_core::elu::EluConfig {
        stride: cfg.elu.stride,
        n_banks: cfg.elu.banks,
        channels: cfg.elu.channels,
        l_mem: cfg.elu.l_mem,
        ii_mem: cfg.elu.ii_mem,
        node_bytes: cfg.elu.node_bytes,
        cycle_time_ns: cfg.pipeline.cycle_time_ns(),
        orb_capacity: cfg.elu.orb_capacity,
        drain_width: cfg.elu.drain_width,
        sched_slots: cfg.elu.sched_slots,
        overhead: cfg.elu.overhead,
        qmg_depth: cfg.elu.qmg_depth,
        qlg_depth: cfg.elu.qlg_depth,
    };
    let opt = cfg.optimizer.enabled.then(|| OptSchedule {
        period_windows: cfg.optimizer.period_windows,
        mode: if cfg.optimizer.mode == "exact" { SolveMode::Exact } else { SolveMode::Heuristic },
        gamma: cfg.optimizer.gamma,
    });
    EngineConfig {
        cycle_time_ns: cfg.pipeline.cycle_time_ns(),
        vmts,
        pmu,
        pmu_count: cfg.pmu.count,
        icn,
        elu,
        graph,
        usl,
        initial_assoc: initial_assoc(cfg),
        opt,
        window_cycles: cfg.pipeline.window_cycles(),
        input_depth: cfg.pipeline.input_depth,
        drain_timeout_cycles: cfg.pipeline.drain_timeout_cycles,
    }
}

/// Entry keys per flow (table 0), used when exporting a trace.
pub fn entry_keys(flows: &[FlowSpec]) -> Vec<synapse_core::types::Key> {
    flows.iter().map(|f| f.keys[0]).collect()
}
