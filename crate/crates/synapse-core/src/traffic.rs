//! Synthetic workload generation: rulesets with a prefix-length histogram,
//! flow populations with size-proportional Poisson rates, key
//! materialization, and per-flow path routing. Everything is a pure function
//! of (spec, seed).

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::elu::rules::{FieldMatch, Rule, RuleField};
use crate::optimizer::SINK;
use crate::rng::SimRng;
use crate::types::{ActionRef, FlowId, Key, VmtId};

// rng stream tags; per-flow streams get the flow id in the low bits
const STREAM_SIZES: u64 = 1 << 56;
const STREAM_STARTS: u64 = 2 << 56;
const STREAM_RULES: u64 = 3 << 56;
const STREAM_PATH: u64 = 4 << 56;
const STREAM_PKT: u64 = 5 << 56;
const STREAM_KEY: u64 = 6 << 56;

#[derive(Debug, Clone)]
pub enum FlowSizeDistribution {
    Uniform { lo: u64, hi: u64 },
    /// P(size = k) ∝ k^-exponent over 1..=max.
    Zipf { exponent: f64, max: u64, cum: Vec<f64> },
    /// P(size > x) = (x_min / x)^alpha, rounded up to whole packets.
    Pareto { alpha: f64, x_min: f64 },
    /// (size, cumulative probability), monotone, ending at 1.0.
    Empirical { points: Vec<(u64, f64)> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistError {
    EmptyCdf,
    NonMonotoneCdf,
    CdfDoesNotReachOne,
    BadParameter,
}

impl FlowSizeDistribution {
    pub fn uniform(lo: u64, hi: u64) -> Result<FlowSizeDistribution, DistError> {
        if lo == 0 || hi < lo {
            return Err(DistError::BadParameter);
        }
        Ok(FlowSizeDistribution::Uniform { lo, hi })
    }

    pub fn zipf(max: u64, exponent: f64) -> Result<FlowSizeDistribution, DistError> {
        if max == 0 || !(exponent > 0.0) {
            return Err(DistError::BadParameter);
        }
        let mut cum = Vec::with_capacity(max as usize);
        let mut total = 0.0;
        for k in 1..=max {
            total += libm::pow(k as f64, -exponent);
            cum.push(total);
        }
        for c in cum.iter_mut() {
            *c /= total;
        }
        Ok(FlowSizeDistribution::Zipf { exponent, max, cum })
    }

    pub fn pareto(alpha: f64, x_min: f64) -> Result<FlowSizeDistribution, DistError> {
        if !(alpha > 0.0) || !(x_min >= 1.0) {
            return Err(DistError::BadParameter);
        }
        Ok(FlowSizeDistribution::Pareto { alpha, x_min })
    }

    pub fn empirical(points: Vec<(u64, f64)>) -> Result<FlowSizeDistribution, DistError> {
        if points.is_empty() {
            return Err(DistError::EmptyCdf);
        }
        let mut last = 0.0;
        for &(size, p) in &points {
            if size == 0 || p < last {
                return Err(DistError::NonMonotoneCdf);
            }
            last = p;
        }
        if (last - 1.0).abs() > 1e-9 {
            return Err(DistError::CdfDoesNotReachOne);
        }
        Ok(FlowSizeDistribution::Empirical { points })
    }

    pub fn sample(&self, rng: &mut SimRng) -> u64 {
        let u = rng.unit_f64();
        match self {
            FlowSizeDistribution::Uniform { lo, hi } => lo + ((hi - lo + 1) as f64 * u) as u64,
            FlowSizeDistribution::Zipf { cum, .. } => {
                let idx = cum.partition_point(|&c| c < u);
                idx as u64 + 1
            }
            FlowSizeDistribution::Pareto { alpha, x_min } => {
                let x = x_min / libm::pow(1.0 - u, 1.0 / alpha);
                libm::ceil(x) as u64
            }
            FlowSizeDistribution::Empirical { points } => {
                let idx = points.partition_point(|&(_, c)| c < u);
                points[idx.min(points.len() - 1)].0
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RulesetSpec {
    pub field_width_bits: u8,
    pub count: usize,
    /// (prefix length, weight); weights need not be normalized.
    pub length_histogram: Vec<(u8, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenError {
    EmptySpec,
    LengthExceedsWidth,
    /// More unique rules requested than the lengths can hold.
    DomainExhausted,
}

/// Deterministic ruleset honoring the prefix-length histogram. Rules are
/// unique (length, value) pairs with actions 1..=count and unique
/// priorities.
pub fn gen_ruleset(spec: &RulesetSpec, seed: u64) -> Result<Vec<Rule>, GenError> {
    if spec.count == 0 || spec.length_histogram.is_empty() {
        return Err(GenError::EmptySpec);
    }
    let w = spec.field_width_bits;
    let mut capacity = 0u128;
    for &(len, weight) in &spec.length_histogram {
        if len > w {
            return Err(GenError::LengthExceedsWidth);
        }
        if weight > 0.0 {
            capacity = capacity.saturating_add(1u128 << len.min(64));
        }
    }
    if (spec.count as u128) > capacity {
        return Err(GenError::DomainExhausted);
    }

    let total_w: f64 = spec.length_histogram.iter().map(|&(_, p)| p.max(0.0)).sum();
    let mut rng = SimRng::new(seed, STREAM_RULES);
    let mut taken: BTreeSet<(u8, u64)> = BTreeSet::new();
    let mut rules = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        // sample a length, falling back to the next one with room
        let u = rng.unit_f64() * total_w;
        let mut acc = 0.0;
        let mut pick = 0usize;
        for (j, &(_, p)) in spec.length_histogram.iter().enumerate() {
            acc += p.max(0.0);
            if u < acc {
                pick = j;
                break;
            }
            pick = j;
        }
        let mut len = None;
        for off in 0..spec.length_histogram.len() {
            let (l, p) = spec.length_histogram[(pick + off) % spec.length_histogram.len()];
            if p <= 0.0 {
                continue;
            }
            let pool = 1u128 << l.min(64);
            let used = taken.range((l, 0)..=(l, u64::MAX)).count() as u128;
            if used < pool {
                len = Some(l);
                break;
            }
        }
        let len = len.ok_or(GenError::DomainExhausted)?;

        let value = loop {
            let raw = if len == 0 { 0 } else { rng.next_u64() >> (64 - len) };
            // value in field domain, high bits significant
            let v = if len == 0 { 0 } else { raw << (w - len) };
            if taken.insert((len, v)) {
                break v;
            }
        };
        rules.push(Rule {
            fields: alloc::vec![RuleField { width: w, m: FieldMatch::Prefix { value, len } }],
            action: ActionRef(i as u32 + 1),
            priority: i as i32,
        });
    }
    Ok(rules)
}

#[derive(Debug, Clone)]
pub struct FlowSpec {
    pub id: FlowId,
    pub size: u64,
    pub rate_pps: f64,
    pub start_ns: f64,
    /// Popularity rank into the ruleset (0 = most popular).
    pub rule_rank: usize,
    pub path_seed: u64,
    /// One lookup key per table, filled by materialize_keys.
    pub keys: Vec<Key>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Packet {
    pub time_ns: f64,
    pub flow: FlowId,
}

/// Samples the flow population: sizes from `dist`, rates proportional to
/// size and scaled so they sum to `target_rate_pps`, starts uniform over the
/// duration, rule binding Zipf over popularity ranks.
pub fn gen_flows(
    dist: &FlowSizeDistribution,
    flow_count: usize,
    target_rate_pps: f64,
    duration_ns: f64,
    rule_count: usize,
    rule_zipf_exponent: f64,
    seed: u64,
) -> Vec<FlowSpec> {
    let mut size_rng = SimRng::new(seed, STREAM_SIZES);
    let mut start_rng = SimRng::new(seed, STREAM_STARTS);
    let mut rule_rng = SimRng::new(seed, STREAM_RULES + 1);
    let mut path_rng = SimRng::new(seed, STREAM_PATH);

    let sizes: Vec<u64> = (0..flow_count).map(|_| dist.sample(&mut size_rng)).collect();
    let total: u64 = sizes.iter().sum();
    let scale = if total > 0 { target_rate_pps / total as f64 } else { 0.0 };

    // popularity over ranks
    let mut cum = Vec::with_capacity(rule_count);
    let mut acc = 0.0;
    for r in 1..=rule_count {
        acc += libm::pow(r as f64, -rule_zipf_exponent);
        cum.push(acc);
    }

    (0..flow_count)
        .map(|i| {
            let rank = if rule_count == 0 {
                0
            } else {
                let u = rule_rng.unit_f64() * acc;
                cum.partition_point(|&c| c < u).min(rule_count - 1)
            };
            FlowSpec {
                id: i as FlowId,
                size: sizes[i],
                rate_pps: sizes[i] as f64 * scale,
                start_ns: start_rng.unit_f64() * duration_ns,
                rule_rank: rank,
                path_seed: path_rng.next_u64(),
                keys: Vec::new(),
            }
        })
        .collect()
}

/// Builds each flow's per-table key: the bound rule's prefix bits followed by
/// a flow-specific random suffix, constant across the flow's packets.
pub fn materialize_keys(flows: &mut [FlowSpec], rulesets: &[Vec<Rule>], key_width_bytes: u8, seed: u64) {
    for flow in flows.iter_mut() {
        flow.keys = (0..rulesets.len())
            .map(|vmt| flow_key(flow, vmt, &rulesets[vmt], key_width_bytes, seed))
            .collect();
    }
}

fn flow_key(flow: &FlowSpec, vmt: VmtId, ruleset: &[Rule], key_width_bytes: u8, seed: u64) -> Key {
    let mut rng = SimRng::new(seed, STREAM_KEY | ((vmt as u64) << 40) | flow.id);
    let width_bits = key_width_bytes as usize * 8;
    let mut bytes = [0u8; crate::types::KEY_WIDTH_MAX];
    for b in bytes.iter_mut().take(key_width_bytes as usize) {
        *b = rng.next_u32() as u8;
    }
    if !ruleset.is_empty() {
        let rule = &ruleset[flow.rule_rank.min(ruleset.len() - 1)];
        if let FieldMatch::Prefix { value, len } = rule.fields[0].m {
            let w = rule.fields[0].width as usize;
            // overlay the prefix bits, MSB-first, onto the key head
            for i in 0..(len as usize).min(width_bits) {
                let bit = (value >> (w - 1 - i)) & 1;
                let byte = i / 8;
                let mask = 1u8 << (7 - i % 8);
                if bit != 0 {
                    bytes[byte] |= mask;
                } else {
                    bytes[byte] &= !mask;
                }
            }
        }
    }
    Key::from_bytes(&bytes[..key_width_bytes as usize])
}

/// Packet arrival times: each flow runs a Poisson process for the whole
/// duration starting at its offset, wrapping at the end, so the expected
/// count is rate x duration regardless of the offset.
pub fn gen_packets(flows: &[FlowSpec], duration_ns: f64, seed: u64) -> Vec<Packet> {
    let mut packets = Vec::new();
    for flow in flows {
        if flow.rate_pps <= 0.0 {
            continue;
        }
        let mut rng = SimRng::new(seed, STREAM_PKT | flow.id);
        let rate_per_ns = flow.rate_pps * 1e-9;
        let mut elapsed = rng.exp_f64(rate_per_ns);
        while elapsed < duration_ns {
            let mut t = flow.start_ns + elapsed;
            if t >= duration_ns {
                t -= duration_ns;
            }
            packets.push(Packet { time_ns: t, flow: flow.id });
            elapsed += rng.exp_f64(rate_per_ns);
        }
    }
    packets.sort_unstable_by(|a, b| a.time_ns.total_cmp(&b.time_ns).then(a.flow.cmp(&b.flow)));
    packets
}

/// Next hop for a flow leaving `node`: sampled once per (flow, node) from
/// the row's probabilities, so every packet of the flow takes the same
/// branch. Residual probability goes to the sink.
pub fn route_next(path_seed: u64, node: usize, row: &[(usize, f64)]) -> usize {
    let mut rng = SimRng::new(path_seed, node as u64);
    let u = rng.unit_f64();
    let mut acc = 0.0;
    for &(tgt, p) in row {
        acc += p;
        if u < acc {
            return tgt;
        }
    }
    SINK
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn empirical_cdf_validation() {
        assert_eq!(FlowSizeDistribution::empirical(vec![]).unwrap_err(), DistError::EmptyCdf);
        assert_eq!(
            FlowSizeDistribution::empirical(vec![(1, 0.5), (2, 0.4)]).unwrap_err(),
            DistError::NonMonotoneCdf
        );
        assert_eq!(
            FlowSizeDistribution::empirical(vec![(1, 0.5), (2, 0.9)]).unwrap_err(),
            DistError::CdfDoesNotReachOne
        );
        let d = FlowSizeDistribution::empirical(vec![(10, 0.5), (100, 1.0)]).unwrap();
        let mut rng = SimRng::new(1, 1);
        for _ in 0..100 {
            let s = d.sample(&mut rng);
            assert!(s == 10 || s == 100);
        }
    }

    #[test]
    fn zipf_sizes_skew_small() {
        let d = FlowSizeDistribution::zipf(1000, 1.2).unwrap();
        let mut rng = SimRng::new(2, 1);
        let mut ones = 0;
        for _ in 0..10_000 {
            if d.sample(&mut rng) == 1 {
                ones += 1;
            }
        }
        // k=1 carries the largest single mass under any zipf exponent > 0
        assert!(ones > 2_000, "got {ones}");
    }

    #[test]
    fn single_rule_generation() {
        let spec = RulesetSpec { field_width_bits: 32, count: 1, length_histogram: vec![(16, 1.0)] };
        let rules = gen_ruleset(&spec, 9).unwrap();
        assert_eq!(rules.len(), 1);
        assert_eq!(rules[0].action, ActionRef(1));
    }

    #[test]
    fn ruleset_generation_is_deterministic() {
        let spec = RulesetSpec {
            field_width_bits: 32,
            count: 500,
            length_histogram: vec![(8, 0.5), (16, 0.5)],
        };
        let a = gen_ruleset(&spec, 42).unwrap();
        let b = gen_ruleset(&spec, 42).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.fields[0].m, y.fields[0].m);
            assert_eq!(x.action, y.action);
        }
        let c = gen_ruleset(&spec, 43).unwrap();
        let same = a.iter().zip(c.iter()).filter(|(x, y)| x.fields[0].m == y.fields[0].m).count();
        assert!(same < a.len() / 2, "different seed should diverge");
    }

    #[test]
    fn histogram_shares_are_respected() {
        // lengths with ample domain so uniqueness never skews the split
        let spec = RulesetSpec {
            field_width_bits: 32,
            count: 1000,
            length_histogram: vec![(12, 0.5), (16, 0.5)],
        };
        let rules = gen_ruleset(&spec, 7).unwrap();
        let twelves = rules
            .iter()
            .filter(|r| matches!(r.fields[0].m, FieldMatch::Prefix { len: 12, .. }))
            .count();
        assert!((460..=540).contains(&twelves), "got {twelves} /12 rules");
        // uniqueness
        let mut seen = BTreeSet::new();
        for r in &rules {
            if let FieldMatch::Prefix { value, len } = r.fields[0].m {
                assert!(seen.insert((len, value)));
            }
        }
    }

    #[test]
    fn domain_exhaustion_is_an_error() {
        let spec = RulesetSpec { field_width_bits: 32, count: 5, length_histogram: vec![(1, 1.0)] };
        assert_eq!(gen_ruleset(&spec, 1).unwrap_err(), GenError::DomainExhausted);
    }

    #[test]
    fn saturated_length_falls_back_to_another() {
        // /1 holds two rules; the rest must land on /16
        let spec = RulesetSpec {
            field_width_bits: 32,
            count: 50,
            length_histogram: vec![(1, 0.9), (16, 0.1)],
        };
        let rules = gen_ruleset(&spec, 3).unwrap();
        assert_eq!(rules.len(), 50);
        let ones = rules.iter().filter(|r| matches!(r.fields[0].m, FieldMatch::Prefix { len: 1, .. })).count();
        assert_eq!(ones, 2);
    }

    #[test]
    fn empty_population_gives_empty_trace() {
        let d = FlowSizeDistribution::uniform(1, 10).unwrap();
        let flows = gen_flows(&d, 0, 1e6, 1e6, 10, 1.0, 5);
        assert!(flows.is_empty());
        assert!(gen_packets(&flows, 1e6, 5).is_empty());
    }

    #[test]
    fn rates_sum_to_target() {
        let d = FlowSizeDistribution::zipf(10_000, 1.0).unwrap();
        let flows = gen_flows(&d, 2_000, 5e6, 1e7, 100, 1.0, 11);
        let sum: f64 = flows.iter().map(|f| f.rate_pps).sum();
        assert!((sum - 5e6).abs() / 5e6 < 1e-9, "rates must sum to the target exactly");
        for f in &flows {
            assert!((0.0..1e7).contains(&f.start_ns));
        }
    }

    #[test]
    fn single_flow_packet_count_and_interarrival() {
        // one flow at 1e6 pps for 10 ms: ~1e4 packets, 1 us mean gap
        let mut counts = Vec::new();
        let mut gap_sum = 0.0;
        let mut gap_n = 0u64;
        for seed in 0..20u64 {
            let flows = vec![FlowSpec {
                id: 0,
                size: 100,
                rate_pps: 1e6,
                start_ns: seed as f64 * 1000.0,
                rule_rank: 0,
                path_seed: 1,
                keys: vec![],
            }];
            let pkts = gen_packets(&flows, 1e7, seed);
            counts.push(pkts.len() as f64);
            for w in pkts.windows(2) {
                gap_sum += w[1].time_ns - w[0].time_ns;
                gap_n += 1;
            }
        }
        let mean_count = counts.iter().sum::<f64>() / counts.len() as f64;
        assert!((mean_count - 1e4).abs() / 1e4 < 0.05, "mean count {mean_count}");
        let mean_gap = gap_sum / gap_n as f64;
        assert!((mean_gap - 1000.0).abs() / 1000.0 < 0.05, "mean gap {mean_gap} ns");
    }

    #[test]
    fn aggregate_rate_tracks_target_within_two_percent() {
        let d = FlowSizeDistribution::zipf(50_000, 1.0).unwrap();
        let mut flows = gen_flows(&d, 10_000, 1e7, 1e8, 100, 1.0, 13);
        materialize_keys(&mut flows, &[], 4, 13);
        let pkts = gen_packets(&flows, 1e8, 13);
        let realized = pkts.len() as f64 / 0.1; // packets per second over 100 ms
        assert!((realized - 1e7).abs() / 1e7 < 0.02, "realized {realized}");
        // sortedness
        for w in pkts.windows(2) {
            assert!(w[0].time_ns <= w[1].time_ns);
        }
    }

    #[test]
    fn traces_are_reproducible() {
        let d = FlowSizeDistribution::uniform(1, 100).unwrap();
        let flows = gen_flows(&d, 200, 1e6, 1e6, 10, 1.0, 21);
        let a = gen_packets(&flows, 1e6, 21);
        let b = gen_packets(&flows, 1e6, 21);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn keys_carry_the_bound_rule_prefix_and_are_stable() {
        let spec = RulesetSpec { field_width_bits: 32, count: 50, length_histogram: vec![(12, 1.0)] };
        let ruleset = gen_ruleset(&spec, 17).unwrap();
        let d = FlowSizeDistribution::uniform(1, 10).unwrap();
        let mut flows = gen_flows(&d, 100, 1e6, 1e6, 50, 1.0, 17);
        materialize_keys(&mut flows, &[ruleset.clone()], 4, 17);
        let mut again = flows.clone();
        materialize_keys(&mut again, &[ruleset.clone()], 4, 17);
        for (f, g) in flows.iter().zip(again.iter()) {
            assert_eq!(f.keys, g.keys, "keys constant across materializations");
            let FieldMatch::Prefix { value, len } = ruleset[f.rule_rank].fields[0].m else {
                panic!("generator emits prefixes")
            };
            for i in 0..len as usize {
                let want = ((value >> (31 - i)) & 1) as u8;
                assert_eq!(f.keys[0].bit(i), want, "flow {} bit {i}", f.id);
            }
        }
    }

    #[test]
    fn one_hot_row_routes_to_its_successor() {
        for seed in 0..50u64 {
            assert_eq!(route_next(seed, 0, &[(3, 1.0)]), 3);
            assert_eq!(route_next(seed, 1, &[]), SINK);
        }
    }

    #[test]
    fn even_split_routes_evenly_and_per_flow_stably() {
        let row = [(1usize, 0.5), (2usize, 0.5)];
        let mut to1 = 0;
        for seed in 0..10_000u64 {
            let first = route_next(seed, 0, &row);
            assert_eq!(route_next(seed, 0, &row), first, "same flow, same branch");
            if first == 1 {
                to1 += 1;
            }
        }
        assert!((to1 as f64 / 10_000.0 - 0.5).abs() < 0.03, "got {to1}");
    }
}
