//! Run outputs: metrics.json plus per-window, per-table and latency CSVs.
//! Everything here is a pure function of the metrics so identical runs
//! serialize to identical bytes.

use anyhow::{Context, Result};
use serde_json::json;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use synapse_core::engine::Metrics;

pub fn metrics_json(m: &Metrics) -> String {
    let per_vmt: Vec<_> = m
        .per_vmt
        .iter()
        .enumerate()
        .map(|(v, t)| {
            json!({
                "vmt": v,
                "produced": t.produced,
                "hits": t.hits,
                "misses": t.misses,
                "hit_rate": t.hit_rate,
                "defaulted": t.defaulted,
                "reordered": t.reordered,
                "displaced": t.displaced,
                "producer_stall_cycles": t.producer_stall_cycles,
            })
        })
        .collect();
    let doc = json!({
        "cycles": m.cycles,
        "injected": m.injected,
        "dropped": m.dropped,
        "emitted": m.emitted,
        "bypassed": m.bypassed,
        "in_flight_at_end": m.in_flight_at_end,
        "hit_rate": m.hit_rate,
        "throughput_pps": m.throughput_pps,
        "mem_gbps": m.mem_gbps,
        "elu_lookups": m.elu_lookups,
        "elu_reads": m.elu_reads,
        "reorder_count": m.reorder_count,
        "producer_stall_cycles": m.producer_stall_cycles,
        "solves": m.solves,
        "deferred_solves": m.deferred_solves,
        "moves": m.moves,
        "latency": {
            "count": m.latency.count,
            "mean": m.latency.mean,
            "p50": m.latency.p50,
            "p95": m.latency.p95,
            "p99": m.latency.p99,
            "max": m.latency.max,
        },
        "per_vmt": per_vmt,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("metrics serialize");
    s.push('\n');
    s
}

pub fn windows_csv(m: &Metrics) -> String {
    let mut out = String::from("window,injected,emitted,hits,misses,hit_rate,active_pmus\n");
    for w in &m.windows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            w.window, w.injected, w.emitted, w.hits, w.misses, w.hit_rate, w.active_pmus
        );
    }
    out
}

pub fn latency_csv(m: &Metrics) -> String {
    let mut out = String::from("log2_bucket,count\n");
    for (i, &count) in m.latency.log2_buckets.iter().enumerate() {
        if count > 0 {
            let _ = writeln!(out, "{i},{count}");
        }
    }
    out
}

pub fn vmt_csv(m: &Metrics) -> String {
    let mut out =
        String::from("vmt,produced,hits,misses,hit_rate,defaulted,reordered,displaced,stall_cycles\n");
    for (v, t) in m.per_vmt.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            v, t.produced, t.hits, t.misses, t.hit_rate, t.defaulted, t.reordered, t.displaced,
            t.producer_stall_cycles
        );
    }
    out
}

pub fn write_run_outputs(dir: &Path, m: &Metrics) -> Result<()> {
    write_file(dir, "metrics.json", &metrics_json(m))?;
    write_file(dir, "windows.csv", &windows_csv(m))?;
    write_file(dir, "latency.csv", &latency_csv(m))?;
    write_file(dir, "vmt.csv", &vmt_csv(m))?;
    Ok(())
}

pub fn write_file(dir: &Path, name: &str, content: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, content).with_context(|| format!("writing {}", path.display()))
}
