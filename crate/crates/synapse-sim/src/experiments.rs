//! Canned experiment drivers: capacity sweep, rate stress, adaptive-vs-static
//! comparison, capacity-model fitting. Each produces structured rows plus a
//! CSV rendering so the CLI and tests share one code path.

use crate::config::SimConfig;
use crate::scenario::{run_scenario, Scenario};
use anyhow::{bail, Context, Result};
use std::fmt::Write as _;
use std::path::Path;
use synapse_core::engine::Metrics;
use synapse_core::optimizer::{fit_usl, UslParams};
use synapse_core::traffic::{gen_flows, gen_packets, FlowSizeDistribution, FlowSpec, Packet};

#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    pub block_size: usize,
    pub capacity: usize,
    pub hit_rate: f64,
    pub p50_cycles: u64,
    pub p95_cycles: u64,
    pub mem_gbps: f64,
}

/// Hit rate and latency across table capacity, repeated per block size.
/// Cells whose capacity is not a whole number of blocks are skipped.
pub fn sweep(cfg: &SimConfig, base: &Path) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &block in &cfg.sweep.block_sizes {
        for &capacity in &cfg.sweep.capacities {
            if block == 0 || capacity % block != 0 {
                continue;
            }
            let mut cell = cfg.clone();
            cell.pmu.block_size = block;
            cell.pmu.count = capacity / block;
            cell.vmt.initial_blocks = Vec::new();
            cell.optimizer.enabled = false;
            let sc = Scenario::build(&cell, base)
                .with_context(|| format!("sweep cell block={block} capacity={capacity}"))?;
            let m = run_scenario(sc)
                .with_context(|| format!("sweep cell block={block} capacity={capacity}"))?;
            rows.push(SweepRow {
                block_size: block,
                capacity,
                hit_rate: m.hit_rate,
                p50_cycles: m.latency.p50,
                p95_cycles: m.latency.p95,
                mem_gbps: m.mem_gbps,
            });
        }
    }
    if rows.is_empty() {
        bail!("sweep grid is empty: no capacity divides evenly into blocks");
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("block_size,vmt_capacity,hit_rate,p50_cycles,p95_cycles,mem_gbps\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.block_size, r.capacity, r.hit_rate, r.p50_cycles, r.p95_cycles, r.mem_gbps
        );
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct StressRow {
    pub input_rate_pps: f64,
    pub pmu_count: usize,
    pub throughput_pps: f64,
    pub mem_gbps: f64,
}

/// Delivered throughput across offered rate, per block count. The active
/// flow population scales with the offered rate so cache pressure grows
/// with load.
pub fn stress(cfg: &SimConfig, base: &Path) -> Result<Vec<StressRow>> {
    let mut rows = Vec::new();
    for &pmus in &cfg.stress.pmu_counts {
        for &rate in &cfg.stress.rates_pps {
            let mut cell = cfg.clone();
            cell.pmu.count = pmus;
            cell.traffic.rate_pps = rate;
            cell.traffic.flow_count =
                ((rate / 1e6 * cfg.stress.flows_per_mpps).round() as usize).max(1);
            cell.vmt.initial_blocks = Vec::new();
            cell.optimizer.enabled = false;
            let sc = Scenario::build(&cell, base)
                .with_context(|| format!("stress cell rate={rate} pmus={pmus}"))?;
            let m = run_scenario(sc)
                .with_context(|| format!("stress cell rate={rate} pmus={pmus}"))?;
            rows.push(StressRow {
                input_rate_pps: rate,
                pmu_count: pmus,
                throughput_pps: m.throughput_pps,
                mem_gbps: m.mem_gbps,
            });
        }
    }
    Ok(rows)
}

pub fn stress_csv(rows: &[StressRow]) -> String {
    let mut out = String::from("input_rate_pps,pmu_count,throughput_pps,mem_gbps\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.input_rate_pps, r.pmu_count, r.throughput_pps, r.mem_gbps);
    }
    out
}

pub struct AdaptiveOutcome {
    pub static_metrics: Metrics,
    pub adaptive_metrics: Metrics,
}

/// Replays one multi-segment load profile twice over identical packets:
/// once with a fixed full allocation, once starting minimal with the
/// allocator on.
pub fn adaptive(cfg: &SimConfig, base: &Path) -> Result<AdaptiveOutcome> {
    if cfg.adaptive.segments.is_empty() {
        bail!("adaptive.segments is empty");
    }
    let (flows, packets, total_ms) = segment_traffic(cfg)?;

    let mut static_cfg = cfg.clone();
    static_cfg.pipeline.duration_ms = total_ms;
    static_cfg.optimizer.enabled = false;
    static_cfg.vmt.initial_blocks = cfg.adaptive.static_blocks.clone();

    let mut adaptive_cfg = cfg.clone();
    adaptive_cfg.pipeline.duration_ms = total_ms;
    adaptive_cfg.optimizer.enabled = true;
    adaptive_cfg.vmt.initial_blocks = if cfg.adaptive.adaptive_blocks.is_empty() {
        vec![1; cfg.vmt.count]
    } else {
        cfg.adaptive.adaptive_blocks.clone()
    };

    let st = Scenario::build_with_traffic(&static_cfg, base, flows.clone(), packets.clone())?;
    let static_metrics = run_scenario(st).context("static run")?;
    let ad = Scenario::build_with_traffic(&adaptive_cfg, base, flows, packets)?;
    let adaptive_metrics = run_scenario(ad).context("adaptive run")?;
    Ok(AdaptiveOutcome { static_metrics, adaptive_metrics })
}

/// Fresh flows per segment, Poisson arrivals within it. Flow ids stay
/// globally unique so later segments key new table entries.
fn segment_traffic(cfg: &SimConfig) -> Result<(Vec<FlowSpec>, Vec<Packet>, f64)> {
    let t = &cfg.traffic;
    let dist = match t.size_dist.as_str() {
        "zipf" => FlowSizeDistribution::zipf(t.zipf_max, t.zipf_exponent),
        "pareto" => FlowSizeDistribution::pareto(t.pareto_alpha, t.pareto_xmin),
        "uniform" => FlowSizeDistribution::uniform(t.uniform_lo, t.uniform_hi),
        other => bail!("adaptive profiles need a generated size_dist, got {other:?}"),
    }
    .map_err(|e| anyhow::anyhow!("size distribution: {e:?}"))?;

    let mut flows: Vec<FlowSpec> = Vec::new();
    let mut packets: Vec<Packet> = Vec::new();
    let mut offset_ns = 0.0;
    for (si, &(dur_ms, rate)) in cfg.adaptive.segments.iter().enumerate() {
        if !(dur_ms > 0.0) || !(rate > 0.0) {
            bail!("segment {si}: duration and rate must be positive");
        }
        let seg_ns = dur_ms * 1e6;
        let count = ((rate / 1e6 * cfg.adaptive.flows_per_mpps).round() as usize).max(1);
        let seed = cfg.seed.wrapping_add((si as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
        let mut seg = gen_flows(&dist, count, rate, seg_ns, cfg.rules.count, t.rule_zipf_exponent, seed);
        let id_base = flows.len() as u64;
        for f in &mut seg {
            f.id += id_base;
        }
        let mut seg_packets = gen_packets(&seg, seg_ns, seed);
        for p in &mut seg_packets {
            p.time_ns += offset_ns;
        }
        for f in &mut seg {
            f.start_ns += offset_ns;
        }
        flows.extend(seg);
        packets.extend(seg_packets);
        offset_ns += seg_ns;
    }
    Ok((flows, packets, offset_ns / 1e6))
}

/// Side-by-side window series; the shorter run pads with blanks.
pub fn adaptive_csv(out: &AdaptiveOutcome) -> String {
    let s = &out.static_metrics.windows;
    let a = &out.adaptive_metrics.windows;
    let mut text = String::from(
        "window,static_emitted,static_hit_rate,static_active_pmus,adaptive_emitted,adaptive_hit_rate,adaptive_active_pmus\n",
    );
    for i in 0..s.len().max(a.len()) {
        let _ = write!(text, "{i}");
        match s.get(i) {
            Some(w) => { let _ = write!(text, ",{},{},{}", w.emitted, w.hit_rate, w.active_pmus); }
            None => text.push_str(",,,"),
        }
        match a.get(i) {
            Some(w) => { let _ = write!(text, ",{},{},{}", w.emitted, w.hit_rate, w.active_pmus); }
            None => text.push_str(",,,"),
        }
        text.push('\n');
    }
    text
}

/// Reads measured operating points and recovers capacity-model terms.
/// Accepts the stress CSV directly or any CSV with rate, throughput and
/// block-count columns (pps columns are converted to Mpps).
pub fn fit_samples_from_csv(text: &str) -> Result<Vec<(f64, f64, usize)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let header = lines.next().ok_or_else(|| anyhow::anyhow!("empty samples file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |names: &[&str]| cols.iter().position(|c| names.contains(c));
    let (xi, x_pps) = match find(&["input_rate_pps", "x_pps"]) {
        Some(i) => (i, true),
        None => match find(&["x_mpps", "input_rate_mpps", "x"]) {
            Some(i) => (i, false),
            None => bail!("no rate column (want input_rate_pps or x_mpps), header: {header}"),
        },
    };
    let (yi, y_pps) = match find(&["throughput_pps", "y_pps"]) {
        Some(i) => (i, true),
        None => match find(&["throughput_mpps", "y_mpps", "y", "throughput"]) {
            Some(i) => (i, false),
            None => bail!("no throughput column, header: {header}"),
        },
    };
    let ni = find(&["pmu_count", "n", "blocks"])
        .ok_or_else(|| anyhow::anyhow!("no block-count column (want pmu_count or n), header: {header}"))?;

    let mut samples = Vec::new();
    for (ln, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let need = xi.max(yi).max(ni);
        if f.len() <= need {
            bail!("samples line {}: only {} columns", ln + 2, f.len());
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| anyhow::anyhow!("samples line {}: bad number {s:?}", ln + 2))
        };
        let x = parse(f[xi])? / if x_pps { 1e6 } else { 1.0 };
        let y = parse(f[yi])? / if y_pps { 1e6 } else { 1.0 };
        let n: usize = f[ni]
            .parse()
            .map_err(|_| anyhow::anyhow!("samples line {}: bad block count {:?}", ln + 2, f[ni]))?;
        samples.push((x, y, n));
    }
    if samples.is_empty() {
        bail!("samples file has a header but no rows");
    }
    Ok(samples)
}

pub fn fit(samples: &[(f64, f64, usize)]) -> Result<UslParams> {
    fit_usl(samples).map_err(|e| anyhow::anyhow!("fit failed: {e:?}"))
}

pub fn fit_json(p: &UslParams) -> String {
    let doc = serde_json::json!({
        "alpha0": p.alpha0,
        "alpha1": p.alpha1,
        "beta0": p.beta0,
        "beta1": p.beta1,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("params serialize");
    s.push('\n');
    s
}
