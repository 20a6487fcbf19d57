//! TOML run configuration.
//!
//! Every field has a default so a minimal config file is enough to get a
//! run going; `SimConfig::resolved_toml` echoes the fully-expanded config
//! back out so a run directory always records what it actually ran with.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub vmt: VmtSection,
    #[serde(default)]
    pub pmu: PmuSection,
    #[serde(default)]
    pub icn: IcnSection,
    #[serde(default)]
    pub elu: EluSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub rules: RulesSection,
    #[serde(default)]
    pub traffic: TrafficSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub stress: StressSection,
    #[serde(default)]
    pub adaptive: AdaptiveSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    /// Pipeline clock; cycle time is derived from it.
    pub frequency_mhz: f64,
    pub duration_ms: f64,
    /// Metrics window length.
    pub window_us: f64,
    pub input_depth: usize,
    pub drain_timeout_cycles: u64,
    /// Install every flow's entries before the first packet.
    pub prewarm: bool,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            frequency_mhz: 250.0,
            duration_ms: 1.0,
            window_us: 10.0,
            input_depth: 64,
            drain_timeout_cycles: 1_000_000,
            prewarm: false,
        }
    }
}

impl PipelineSection {
    pub fn cycle_time_ns(&self) -> f64 {
        1e3 / self.frequency_mhz
    }

    pub fn duration_ns(&self) -> f64 {
        self.duration_ms * 1e6
    }

    pub fn window_cycles(&self) -> u64 {
        let c = (self.window_us * 1e3 / self.cycle_time_ns()).round();
        c.max(1.0) as u64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VmtSection {
    pub count: usize,
    /// log2 of the lookup-table size shared by all tables.
    pub table_exp: u8,
    pub vnodes_per_pmu: usize,
    pub await_depth: usize,
    pub key_width_bytes: u8,
    /// Action id returned when nothing matches anywhere.
    pub default_action: u32,
    pub strict_order: bool,
    /// Blocks initially owned per table. Empty means spread every block
    /// round-robin across tables.
    pub initial_blocks: Vec<usize>,
}

impl Default for VmtSection {
    fn default() -> Self {
        VmtSection {
            count: 1,
            table_exp: 8,
            vnodes_per_pmu: 64,
            await_depth: 64,
            key_width_bytes: 4,
            default_action: 1,
            strict_order: false,
            initial_blocks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PmuSection {
    pub count: usize,
    pub block_size: usize,
    pub tau_c: u64,
    pub ii_c: u64,
    pub clock_ratio: f64,
    pub qr_depth: usize,
    pub qp_depth: usize,
    pub qm_depth: usize,
    pub negative_caching: bool,
}

impl Default for PmuSection {
    fn default() -> Self {
        PmuSection {
            count: 4,
            block_size: 256,
            tau_c: 2,
            ii_c: 2,
            clock_ratio: 1.0,
            qr_depth: 16,
            qp_depth: 16,
            qm_depth: 16,
            negative_caching: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcnSection {
    pub channels: usize,
    pub deferred_cap: usize,
    pub response_latency: u64,
}

impl Default for IcnSection {
    fn default() -> Self {
        IcnSection { channels: 4, deferred_cap: 32, response_latency: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EluSection {
    pub stride: usize,
    pub banks: usize,
    pub channels: usize,
    pub l_mem: u64,
    pub ii_mem: u64,
    pub node_bytes: u64,
    pub orb_capacity: usize,
    pub drain_width: usize,
    pub sched_slots: usize,
    pub overhead: u64,
    pub qmg_depth: usize,
    pub qlg_depth: usize,
}

impl Default for EluSection {
    fn default() -> Self {
        EluSection {
            stride: 4,
            banks: 8,
            channels: 1,
            l_mem: 50,
            ii_mem: 2,
            node_bytes: 64,
            orb_capacity: 64,
            drain_width: 1,
            sched_slots: 2,
            overhead: 4,
            qmg_depth: 64,
            qlg_depth: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub enabled: bool,
    pub period_windows: u64,
    /// "exact" or "heuristic".
    pub mode: String,
    pub gamma: f64,
    /// Per-node rows `[a0, a1, b0, b1]`. One row is broadcast to all
    /// nodes; empty leaves scaling neutral. Ignored when the graph file
    /// carries its own node lines.
    pub usl: Vec<[f64; 4]>,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            enabled: false,
            period_windows: 100,
            mode: "heuristic".into(),
            gamma: 0.5,
            usl: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    /// Graph description file; when set it wins over the inline fields.
    pub file: String,
    /// Inline fallback: entry edges `[node, prob]` ...
    pub source: Vec<(usize, f64)>,
    /// ... and interior edges `[from, to, prob]`. Residual probability at
    /// a node leaves the pipeline.
    pub edges: Vec<(usize, usize, f64)>,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection { file: String::new(), source: vec![(0, 1.0)], edges: Vec::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RulesSection {
    /// Ruleset file used for every table; empty means generate.
    pub file: String,
    pub count: usize,
    /// Prefix-length histogram `[len, weight]`.
    pub lengths: Vec<(u8, f64)>,
}

impl Default for RulesSection {
    fn default() -> Self {
        RulesSection { file: String::new(), count: 1000, lengths: vec![(16, 0.5), (24, 0.5)] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficSection {
    /// "generate" or "trace".
    pub mode: String,
    pub trace_file: String,
    pub flow_count: usize,
    pub rate_pps: f64,
    /// "zipf", "pareto", "uniform" or "file".
    pub size_dist: String,
    pub zipf_max: u64,
    pub zipf_exponent: f64,
    pub pareto_alpha: f64,
    pub pareto_xmin: f64,
    pub uniform_lo: u64,
    pub uniform_hi: u64,
    /// Empirical size CDF, used when size_dist = "file".
    pub cdf_file: String,
    pub rule_zipf_exponent: f64,
}

impl Default for TrafficSection {
    fn default() -> Self {
        TrafficSection {
            mode: "generate".into(),
            trace_file: String::new(),
            flow_count: 1024,
            rate_pps: 1e6,
            size_dist: "zipf".into(),
            zipf_max: 100_000,
            zipf_exponent: 1.0,
            pareto_alpha: 1.5,
            pareto_xmin: 1.0,
            uniform_lo: 1,
            uniform_hi: 1000,
            cdf_file: String::new(),
            rule_zipf_exponent: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub block_sizes: Vec<usize>,
    /// Total entries per table; block count is capacity / block_size.
    pub capacities: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            block_sizes: vec![64, 128, 256, 512],
            capacities: vec![256, 512, 1024, 1536],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StressSection {
    pub rates_pps: Vec<f64>,
    pub pmu_counts: Vec<usize>,
    /// Active flow count scales with offered rate.
    pub flows_per_mpps: f64,
}

impl Default for StressSection {
    fn default() -> Self {
        StressSection {
            rates_pps: vec![5e5, 1e6, 2e6, 4e6, 8e6, 16e6],
            pmu_counts: vec![3, 4, 5],
            flows_per_mpps: 768.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveSection {
    /// Offered-load profile: `[duration_ms, rate_pps]` per segment.
    pub segments: Vec<(f64, f64)>,
    /// Fresh flows arriving per segment scale with its rate.
    pub flows_per_mpps: f64,
    /// Blocks per table for the static baseline; empty means all blocks.
    pub static_blocks: Vec<usize>,
    /// Starting blocks per table for the managed run; empty means one each.
    pub adaptive_blocks: Vec<usize>,
}

impl Default for AdaptiveSection {
    fn default() -> Self {
        AdaptiveSection {
            segments: vec![(1.0, 1e6), (1.0, 4e6), (1.0, 8e6)],
            flows_per_mpps: 200.0,
            static_blocks: Vec::new(),
            adaptive_blocks: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn load(path: &Path) -> anyhow::Result<SimConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let cfg: SimConfig =
            toml::from_str(&text).map_err(|e| anyhow::anyhow!("bad config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let p = &self.pipeline;
        if !(p.frequency_mhz > 0.0) || !(p.duration_ms > 0.0) || !(p.window_us > 0.0) {
            anyhow::bail!("pipeline frequency, duration and window must all be positive");
        }
        if self.vmt.count == 0 {
            anyhow::bail!("vmt.count must be at least 1");
        }
        if self.vmt.key_width_bytes == 0 || self.vmt.key_width_bytes as usize > synapse_core::types::KEY_WIDTH_MAX {
            anyhow::bail!(
                "vmt.key_width_bytes must be in 1..={}",
                synapse_core::types::KEY_WIDTH_MAX
            );
        }
        if self.pmu.count == 0 || self.pmu.block_size == 0 {
            anyhow::bail!("pmu.count and pmu.block_size must be positive");
        }
        if !self.vmt.initial_blocks.is_empty() {
            if self.vmt.initial_blocks.len() != self.vmt.count {
                anyhow::bail!("vmt.initial_blocks must list one count per table");
            }
            let total: usize = self.vmt.initial_blocks.iter().sum();
            if total > self.pmu.count {
                anyhow::bail!("vmt.initial_blocks assigns {total} blocks but only {} exist", self.pmu.count);
            }
        }
        match self.optimizer.mode.as_str() {
            "exact" | "heuristic" => {}
            other => anyhow::bail!("optimizer.mode must be \"exact\" or \"heuristic\", got {other:?}"),
        }
        for row in &self.optimizer.usl {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                anyhow::bail!("optimizer.usl rows must be finite and non-negative");
            }
        }
        match self.traffic.mode.as_str() {
            "generate" | "trace" => {}
            other => anyhow::bail!("traffic.mode must be \"generate\" or \"trace\", got {other:?}"),
        }
        if self.traffic.mode == "trace" && self.traffic.trace_file.is_empty() {
            anyhow::bail!("traffic.mode = \"trace\" needs traffic.trace_file");
        }
        match self.traffic.size_dist.as_str() {
            "zipf" | "pareto" | "uniform" | "file" => {}
            other => anyhow::bail!(
                "traffic.size_dist must be one of zipf, pareto, uniform, file; got {other:?}"
            ),
        }
        if self.traffic.size_dist == "file" && self.traffic.cdf_file.is_empty() {
            anyhow::bail!("traffic.size_dist = \"file\" needs traffic.cdf_file");
        }
        if self.rules.file.is_empty() {
            if self.rules.count == 0 || self.rules.lengths.is_empty() {
                anyhow::bail!("rules.count and rules.lengths must be non-empty when generating rules");
            }
            if self.vmt.key_width_bytes > 8 {
                anyhow::bail!("generated rules support key widths up to 8 bytes");
            }
        }
        Ok(())
    }

    /// Fully-expanded echo of this config, written next to run outputs.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
