//! On-disk formats: rulesets, pipeline graphs, traces, size CDFs.

use anyhow::{anyhow, bail, Context, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use synapse_core::elu::rules::{FieldMatch, Rule, RuleField};
use synapse_core::optimizer::{CfgGraph, UslParams};
use synapse_core::traffic::Packet;
use synapse_core::types::{ActionRef, Key};

/// Ruleset text format, one rule per line:
///
/// ```text
/// fields f0/32,f1/16              # optional width header, 32 bits otherwise
/// f0=0x0A000000/8 -> 7 prio=2     # prefix: full-width value, top bits kept
/// f0=0x0A000001 -> 9              # exact
/// f1=80-443 -> 4                  # range
/// ```
///
/// Values are decimal or 0x-hex. `#` starts a comment.
pub fn parse_ruleset(text: &str) -> Result<Vec<Rule>> {
    let mut widths: Vec<(String, u8)> = Vec::new();
    let mut rules = Vec::new();

    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| anyhow!("line {}: {msg}", ln + 1);

        if let Some(rest) = line.strip_prefix("fields ") {
            if !rules.is_empty() {
                return Err(at("width header must come before the first rule".into()));
            }
            widths.clear();
            for part in rest.split(',') {
                let (name, w) = part
                    .trim()
                    .split_once('/')
                    .ok_or_else(|| at(format!("bad field declaration {part:?}, want name/width")))?;
                let w: u8 = w.parse().map_err(|_| at(format!("bad width in {part:?}")))?;
                if w == 0 || w > 64 {
                    return Err(at(format!("field {name} width must be 1..=64")));
                }
                widths.push((name.trim().to_string(), w));
            }
            continue;
        }

        let (lhs, rhs) = line
            .split_once("->")
            .ok_or_else(|| at("missing \"->\"".into()))?;
        let mut action: Option<u32> = None;
        let mut priority: i32 = 0;
        for tok in rhs.split_whitespace() {
            if let Some(p) = tok.strip_prefix("prio=") {
                priority = p.parse().map_err(|_| at(format!("bad priority {p:?}")))?;
            } else if action.is_none() {
                action = Some(tok.parse().map_err(|_| at(format!("bad action id {tok:?}")))?);
            } else {
                return Err(at(format!("unexpected token {tok:?}")));
            }
        }
        let action = action.ok_or_else(|| at("missing action id".into()))?;

        let mut fields = Vec::new();
        for part in lhs.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (name, spec) = part
                .split_once('=')
                .ok_or_else(|| at(format!("bad field match {part:?}, want name=spec")))?;
            let name = name.trim();
            let width = match widths.iter().find(|(n, _)| n == name) {
                Some(&(_, w)) => w,
                None if widths.is_empty() => 32,
                None => return Err(at(format!("field {name:?} not in the fields header"))),
            };
            let spec = spec.trim();
            let m = if let Some((v, len)) = spec.split_once('/') {
                let value = parse_num(v).map_err(|e| at(e))?;
                let len: u8 = len.parse().map_err(|_| at(format!("bad prefix length {len:?}")))?;
                FieldMatch::Prefix { value, len }
            } else if let Some((lo, hi)) = spec.split_once('-') {
                FieldMatch::Range {
                    lo: parse_num(lo).map_err(|e| at(e))?,
                    hi: parse_num(hi).map_err(|e| at(e))?,
                }
            } else {
                FieldMatch::Exact(parse_num(spec).map_err(|e| at(e))?)
            };
            fields.push(RuleField { width, m });
        }
        if fields.is_empty() {
            return Err(at("rule matches no fields".into()));
        }
        rules.push(Rule { fields, action: ActionRef(action), priority });
    }
    Ok(rules)
}

fn parse_num(s: &str) -> std::result::Result<u64, String> {
    let s = s.trim();
    let r = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16)
    } else {
        s.parse()
    };
    r.map_err(|_| format!("bad number {s:?}"))
}

pub fn write_ruleset(rules: &[Rule]) -> String {
    let mut widths: Vec<u8> = Vec::new();
    for r in rules {
        for (i, f) in r.fields.iter().enumerate() {
            if i >= widths.len() {
                widths.push(f.width);
            }
        }
    }
    let mut out = String::new();
    let header: Vec<String> = widths.iter().enumerate().map(|(i, w)| format!("f{i}/{w}")).collect();
    let _ = writeln!(out, "fields {}", header.join(","));
    for r in rules {
        let mut parts = Vec::new();
        for (i, f) in r.fields.iter().enumerate() {
            let spec = match f.m {
                FieldMatch::Exact(v) => format!("0x{v:X}"),
                FieldMatch::Prefix { value, len } => format!("0x{value:X}/{len}"),
                FieldMatch::Range { lo, hi } => format!("{lo}-{hi}"),
            };
            parts.push(format!("f{i}={spec}"));
        }
        let _ = write!(out, "{} -> {}", parts.join(","), r.action.0);
        if r.priority != 0 {
            let _ = write!(out, " prio={}", r.priority);
        }
        out.push('\n');
    }
    out
}

pub fn load_ruleset(path: &Path) -> Result<Vec<Rule>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading ruleset {}", path.display()))?;
    parse_ruleset(&text).with_context(|| format!("parsing ruleset {}", path.display()))
}

/// Pipeline graph text format:
///
/// ```text
/// edge s 0 1.0        # entry edge
/// edge 0 1 0.7        # interior edge; residual probability exits
/// edge 1 t 1.0        # explicit exit, equivalent to leaving it implicit
/// node 0 usl 2e-4 1e-3 0 5e-4
/// ```
pub fn parse_cfg(text: &str) -> Result<(CfgGraph, Vec<UslParams>)> {
    struct NodeLine {
        id: usize,
        usl: UslParams,
    }
    let mut source: Vec<(usize, f64)> = Vec::new();
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    let mut nodes: Vec<NodeLine> = Vec::new();
    let mut max_id: Option<usize> = None;

    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| anyhow!("line {}: {msg}", ln + 1);
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "edge" => {
                if toks.len() != 4 {
                    return Err(at("want: edge <from> <to> <prob>".into()));
                }
                let prob: f64 = toks[3].parse().map_err(|_| at(format!("bad probability {:?}", toks[3])))?;
                if !(0.0..=1.0).contains(&prob) {
                    return Err(at(format!("probability {prob} out of [0, 1]")));
                }
                let parse_node = |t: &str| -> std::result::Result<Option<usize>, String> {
                    match t {
                        "s" | "t" => Ok(None),
                        _ => t.parse().map(Some).map_err(|_| format!("bad node {t:?}")),
                    }
                };
                let from = parse_node(toks[1]).map_err(|e| at(e))?;
                let to = parse_node(toks[2]).map_err(|e| at(e))?;
                match (toks[1], toks[2]) {
                    ("s", "t") | ("t", _) | (_, "s") => {
                        return Err(at("edges must go s -> node, node -> node, or node -> t".into()))
                    }
                    ("s", _) => {
                        let to = to.unwrap();
                        max_id = Some(max_id.map_or(to, |m| m.max(to)));
                        source.push((to, prob));
                    }
                    (_, "t") => {
                        let from = from.unwrap();
                        max_id = Some(max_id.map_or(from, |m| m.max(from)));
                        // exit mass is the residual; nothing to record
                    }
                    _ => {
                        let (from, to) = (from.unwrap(), to.unwrap());
                        max_id = Some(max_id.map_or(from.max(to), |m| m.max(from.max(to))));
                        edges.push((from, to, prob));
                    }
                }
            }
            "node" => {
                if toks.len() != 7 || toks[2] != "usl" {
                    return Err(at("want: node <id> usl <a0> <a1> <b0> <b1>".into()));
                }
                let id: usize = toks[1].parse().map_err(|_| at(format!("bad node id {:?}", toks[1])))?;
                let mut v = [0.0f64; 4];
                for (i, t) in toks[3..7].iter().enumerate() {
                    v[i] = t.parse().map_err(|_| at(format!("bad number {t:?}")))?;
                    if !v[i].is_finite() || v[i] < 0.0 {
                        return Err(at(format!("usl terms must be finite and non-negative, got {t}")));
                    }
                }
                max_id = Some(max_id.map_or(id, |m| m.max(id)));
                nodes.push(NodeLine {
                    id,
                    usl: UslParams { alpha0: v[0], alpha1: v[1], beta0: v[2], beta1: v[3] },
                });
            }
            other => return Err(at(format!("unknown directive {other:?}"))),
        }
    }

    let n = match max_id {
        Some(m) => m + 1,
        None => bail!("graph file declares no nodes"),
    };
    if source.is_empty() {
        bail!("graph file has no entry edges (edge s <node> <prob>)");
    }
    let mut graph = CfgGraph { n, source, out: vec![Vec::new(); n] };
    for (from, to, prob) in edges {
        graph.out[from].push((to, prob));
    }
    for (node, row) in graph.out.iter().enumerate() {
        let total: f64 = row.iter().map(|&(_, p)| p).sum();
        if total > 1.0 + 1e-9 {
            bail!("node {node}: outgoing probability sums to {total}, above 1");
        }
    }

    let mut usl = vec![UslParams::IDENTITY; n];
    for nl in nodes {
        usl[nl.id] = nl.usl;
    }
    Ok((graph, usl))
}

pub fn load_cfg(path: &Path) -> Result<(CfgGraph, Vec<UslParams>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading graph {}", path.display()))?;
    parse_cfg(&text).with_context(|| format!("parsing graph {}", path.display()))
}

pub const TRACE_HEADER: &str = "time_ns,flow_id,vmt_entry_key_hex";

pub fn write_trace(packets: &[Packet], entry_keys: &[Key]) -> String {
    let mut out = String::with_capacity(packets.len() * 32);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for p in packets {
        let key = &entry_keys[p.flow as usize];
        let _ = write!(out, "{},{},", p.time_ns, p.flow);
        for b in key.as_bytes() {
            let _ = write!(out, "{b:02x}");
        }
        out.push('\n');
    }
    out
}

pub struct TraceRow {
    pub time_ns: f64,
    pub flow: u64,
    pub key: Key,
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line == TRACE_HEADER {
            continue;
        }
        let at = |msg: String| anyhow!("trace line {}: {msg}", ln + 1);
        let mut it = line.split(',');
        let (t, f, k) = match (it.next(), it.next(), it.next(), it.next()) {
            (Some(t), Some(f), Some(k), None) => (t, f, k),
            _ => return Err(at("want: time_ns,flow_id,key_hex".into())),
        };
        let time_ns: f64 = t.trim().parse().map_err(|_| at(format!("bad time {t:?}")))?;
        if !time_ns.is_finite() || time_ns < 0.0 {
            return Err(at(format!("time {time_ns} out of range")));
        }
        let flow: u64 = f.trim().parse().map_err(|_| at(format!("bad flow id {f:?}")))?;
        let k = k.trim();
        if k.is_empty() || k.len() % 2 != 0 || k.len() / 2 > synapse_core::types::KEY_WIDTH_MAX {
            return Err(at(format!("bad key hex {k:?}")));
        }
        let mut bytes = Vec::with_capacity(k.len() / 2);
        for i in (0..k.len()).step_by(2) {
            let b = u8::from_str_radix(&k[i..i + 2], 16).map_err(|_| at(format!("bad key hex {k:?}")))?;
            bytes.push(b);
        }
        rows.push(TraceRow { time_ns, flow, key: Key::from_bytes(&bytes) });
    }
    Ok(rows)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading trace {}", path.display()))?;
    parse_trace(&text)
}

/// Size CDF: `size,cum_prob` rows, cum_prob non-decreasing and ending at 1.
pub fn load_cdf(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading cdf {}", path.display()))?;
    let mut points = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("size,") {
            continue;
        }
        let (s, p) = line
            .split_once(',')
            .ok_or_else(|| anyhow!("cdf line {}: want size,cum_prob", ln + 1))?;
        let size: u64 = s.trim().parse().map_err(|_| anyhow!("cdf line {}: bad size {s:?}", ln + 1))?;
        let prob: f64 = p.trim().parse().map_err(|_| anyhow!("cdf line {}: bad prob {p:?}", ln + 1))?;
        points.push((size, prob));
    }
    if points.is_empty() {
        bail!("cdf file {} has no points", path.display());
    }
    Ok(points)
}
