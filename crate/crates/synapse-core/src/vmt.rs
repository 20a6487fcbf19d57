//! Virtual match table: consistent-hash steering of keys onto cache blocks,
//! request production, and response consumption with the await-FIFO miss
//! discipline.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;

use crate::hash::{hash32, hash32_pair};
use crate::types::{ActionRef, ByteMask, Cycle, Key, LookupRequest, LookupResponse, Phv, PmuId, ReqId, VmtId};

/// Ring of virtual nodes over the full 32-bit hash space. Position ties are
/// broken by pmu id, so the layout is a pure function of (pmu set, salt).
#[derive(Debug, Clone)]
pub struct HashRing {
    positions: Vec<(u32, PmuId)>,
    pub vnodes_per_pmu: usize,
}

impl HashRing {
    pub fn build(pmus: &[PmuId], vnodes_per_pmu: usize, salt: u32) -> HashRing {
        let mut positions = Vec::with_capacity(pmus.len() * vnodes_per_pmu);
        for &p in pmus {
            for j in 0..vnodes_per_pmu {
                positions.push((hash32_pair(p as u64, j as u64, salt), p));
            }
        }
        positions.sort_unstable();
        HashRing { positions, vnodes_per_pmu }
    }

    /// Nearest virtual node clockwise from `point` (wrapping).
    pub fn owner(&self, point: u32) -> Option<PmuId> {
        if self.positions.is_empty() {
            return None;
        }
        let idx = self.positions.partition_point(|&(pos, _)| pos < point);
        let (_, pmu) = self.positions[idx % self.positions.len()];
        Some(pmu)
    }
}

/// Precomputed steering table: bucket index -> owning PMU. Bucket `i` stands
/// for the ring point `i * 2^32 / v`, so consistent-hashing stability carries
/// over to the table.
#[derive(Debug, Clone)]
pub struct LookupTable {
    pub exp: u32,
    pub vnodes_per_pmu: usize,
    pub salt: u32,
    entries: Vec<Option<PmuId>>,
}

pub fn build_lookup_table(pmus: &[PmuId], exp: u32, vnodes_per_pmu: usize, salt: u32) -> LookupTable {
    let v = 1usize << exp;
    let ring = HashRing::build(pmus, vnodes_per_pmu, salt);
    let step = (1u64 << 32) / v as u64;
    let entries = (0..v).map(|i| ring.owner((i as u64 * step) as u32)).collect();
    LookupTable { exp, vnodes_per_pmu, salt, entries }
}

/// Rebuilds for the new set and swaps it in; returns the bucket indices whose
/// owner changed, ascending.
pub fn update_lookup_table(table: &mut LookupTable, new_pmus: &[PmuId]) -> Vec<usize> {
    let fresh = build_lookup_table(new_pmus, table.exp, table.vnodes_per_pmu, table.salt);
    let changed = table
        .entries
        .iter()
        .zip(&fresh.entries)
        .enumerate()
        .filter(|(_, (old, new))| old != new)
        .map(|(i, _)| i)
        .collect();
    *table = fresh;
    changed
}

impl LookupTable {
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, bucket: usize) -> Option<PmuId> {
        self.entries[bucket]
    }
}

/// Steers a key to its bucket owner; `None` means the default action applies.
pub fn classify_key(table: &LookupTable, key: &Key) -> Option<PmuId> {
    let bucket = hash32(key.as_bytes(), 0) as usize & (table.entries.len() - 1);
    table.entries[bucket]
}

#[derive(Debug, Clone)]
pub struct VmtConfig {
    pub id: VmtId,
    pub table_exp: u32,
    pub vnodes_per_pmu: usize,
    pub ring_salt: u32,
    pub await_depth: usize,
    pub key_width: usize,
    pub default_action: ActionRef,
    /// Hold emissions until every earlier arrival has been emitted. Trades
    /// latency for a reorder-free output stream.
    pub strict_order: bool,
}

impl Default for VmtConfig {
    fn default() -> VmtConfig {
        VmtConfig {
            id: 0,
            table_exp: 8,
            vnodes_per_pmu: 64,
            ring_salt: 0,
            await_depth: 64,
            key_width: 4,
            default_action: ActionRef(0),
            strict_order: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VmtStats {
    pub produced: u64,
    pub default_steered: u64,
    pub emitted_hits: u64,
    pub emitted_resolutions: u64,
    pub buffered_misses: u64,
    pub displaced_resolutions: u64,
    pub reordered_emissions: u64,
    pub producer_stall_cycles: u64,
}

#[derive(Debug, Clone)]
struct Outstanding {
    phv: Phv,
    arrival: u64,
    issued_cycle: Cycle,
    buffered: bool,
}

/// What a consumed response or a default-path admit hands back to the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitKind {
    Hit,
    Resolved,
    Default,
}

#[derive(Debug)]
pub struct Emitted {
    pub phv: Phv,
    pub arrival: u64,
    pub kind: EmitKind,
    /// Request-to-action latency in pipeline cycles; None on the default path.
    pub latency: Option<u64>,
}

/// Match-stage state: steering table plus the shared outstanding store used
/// by the producer and consumer routines. The store holds every PHV with a
/// request in flight; entries flagged `buffered` form the await FIFO.
#[derive(Debug)]
pub struct Vmt {
    pub cfg: VmtConfig,
    pub table: LookupTable,
    pub pmus: Vec<PmuId>,
    pub mask: ByteMask,
    outstanding: BTreeMap<ReqId, Outstanding>,
    await_fifo: VecDeque<ReqId>,
    /// Strict-order staging: emissions parked until their turn.
    hold: BTreeMap<u64, Emitted>,
    next_emit: u64,
    next_req: u64,
    next_arrival: u64,
    pub stats: VmtStats,
}

impl Vmt {
    pub fn new(cfg: VmtConfig) -> Vmt {
        let table = build_lookup_table(&[], cfg.table_exp, cfg.vnodes_per_pmu, cfg.ring_salt);
        let mask = ByteMask::prefix(cfg.key_width);
        Vmt {
            cfg,
            table,
            pmus: Vec::new(),
            mask,
            outstanding: BTreeMap::new(),
            await_fifo: VecDeque::new(),
            hold: BTreeMap::new(),
            next_emit: 0,
            next_req: 0,
            next_arrival: 0,
            stats: VmtStats::default(),
        }
    }

    /// Replaces the associated PMU set; returns the rewritten bucket indices.
    pub fn set_pmus(&mut self, pmus: &[PmuId]) -> Vec<usize> {
        self.pmus = pmus.to_vec();
        self.pmus.sort_unstable();
        update_lookup_table(&mut self.table, &self.pmus)
    }

    pub fn classify(&self, phv: &Phv) -> Option<PmuId> {
        classify_key(&self.table, phv.key_for(self.cfg.id))
    }

    pub fn can_produce(&self) -> bool {
        self.outstanding.len() < self.cfg.await_depth
    }

    pub fn outstanding_len(&self) -> usize {
        self.outstanding.len()
    }

    /// Admit a PHV that classified to `pmu`. Caller must have checked
    /// `can_produce` and interconnect acceptance; this never fails.
    pub fn produce_request(&mut self, phv: Phv, pmu: PmuId, now: Cycle) -> LookupRequest {
        assert!(self.can_produce(), "await structure full");
        let req_id = (self.cfg.id as u64) << 40 | self.next_req;
        self.next_req += 1;
        let arrival = self.next_arrival;
        self.next_arrival += 1;
        let key = phv.keys[self.cfg.id];
        self.outstanding.insert(req_id, Outstanding { phv, arrival, issued_cycle: now, buffered: false });
        self.stats.produced += 1;
        LookupRequest { req_id, vmt: self.cfg.id, pmu, key, mask: self.mask, issued_cycle: now }
    }

    /// Admit a PHV on the default path (invalid bucket): annotated and handed
    /// straight back for emission.
    pub fn admit_default(&mut self, mut phv: Phv) -> Emitted {
        let arrival = self.next_arrival;
        self.next_arrival += 1;
        apply_action(&mut phv, self.cfg.id, self.cfg.default_action);
        self.stats.default_steered += 1;
        Emitted { phv, arrival, kind: EmitKind::Default, latency: None }
    }

    pub fn consume_response(&mut self, resp: &LookupResponse, now: Cycle) -> Option<Emitted> {
        assert_eq!(resp.vmt, self.cfg.id);
        if !resp.valid {
            // early miss notification: move the PHV into the await FIFO
            let entry = self
                .outstanding
                .get_mut(&resp.req_id)
                .unwrap_or_else(|| panic!("protocol fault: miss notice for unknown req {}", resp.req_id));
            assert!(!entry.buffered, "protocol fault: duplicate miss notice for req {}", resp.req_id);
            entry.buffered = true;
            self.await_fifo.push_back(resp.req_id);
            self.stats.buffered_misses += 1;
            return None;
        }

        let entry = self
            .outstanding
            .remove(&resp.req_id)
            .unwrap_or_else(|| panic!("protocol fault: response for unknown req {}", resp.req_id));
        let kind = if entry.buffered {
            // resolution: expected at the buffer front; responses from
            // different PMUs can displace that, which we tolerate and count
            match self.await_fifo.front() {
                Some(&front) if front == resp.req_id => {
                    self.await_fifo.pop_front();
                }
                _ => {
                    let pos = self
                        .await_fifo
                        .iter()
                        .position(|&r| r == resp.req_id)
                        .expect("buffered entry missing from await fifo");
                    self.await_fifo.remove(pos);
                    self.stats.displaced_resolutions += 1;
                }
            }
            self.stats.emitted_resolutions += 1;
            EmitKind::Resolved
        } else {
            self.stats.emitted_hits += 1;
            EmitKind::Hit
        };

        let mut phv = entry.phv;
        apply_action(&mut phv, self.cfg.id, resp.action);
        if !self.cfg.strict_order && self.outstanding.values().any(|o| o.arrival < entry.arrival) {
            self.stats.reordered_emissions += 1;
        }
        Some(Emitted { phv, arrival: entry.arrival, kind, latency: Some(now - entry.issued_cycle) })
    }

    /// Final ordering filter in front of the output. Pass-through by
    /// default; in strict mode emissions wait in the hold until every
    /// earlier arrival has left, so the output carries no reordering at all.
    pub fn sequence(&mut self, e: Emitted, out: &mut Vec<Emitted>) {
        if !self.cfg.strict_order {
            out.push(e);
            return;
        }
        self.hold.insert(e.arrival, e);
        while let Some(e) = self.hold.remove(&self.next_emit) {
            self.next_emit += 1;
            out.push(e);
        }
    }

    /// Emissions parked in the strict-order hold.
    pub fn held(&self) -> usize {
        self.hold.len()
    }
}

/// Annotates the PHV; the routing decision to the next stage lives with the
/// traffic model.
pub fn apply_action(phv: &mut Phv, vmt: VmtId, action: ActionRef) {
    assert!(action.is_found(), "protocol fault: NOT_FOUND reached apply_action");
    phv.actions.push((vmt, action));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;
    use alloc::vec;

    fn phv_with_key(vmt_count: usize, vmt: VmtId, key: Key) -> Phv {
        let mut keys = vec![Key::from_u32(0); vmt_count];
        keys[vmt] = key;
        Phv { flow: 0, seq: 0, injected_cycle: 0, path_seed: 0, keys, actions: Vec::new() }
    }

    #[test]
    fn single_owner_table() {
        let t = build_lookup_table(&[3], 8, 64, 0);
        assert_eq!(t.size(), 256);
        assert!((0..256).all(|i| t.entry(i) == Some(3)));
    }

    #[test]
    fn empty_set_all_invalid() {
        let t = build_lookup_table(&[], 8, 64, 0);
        assert!((0..256).all(|i| t.entry(i).is_none()));
        let key = Key::from_u32(99);
        assert_eq!(classify_key(&t, &key), None);
    }

    #[test]
    fn add_one_pmu_remaps_bounded_fraction() {
        // three owners, add a fourth: at most 2/(n+1) of buckets may move
        for salt in 0..20u32 {
            let old = build_lookup_table(&[0, 1, 2], 8, 64, salt);
            let new = build_lookup_table(&[0, 1, 2, 3], 8, 64, salt);
            let changed = (0..256).filter(|&i| old.entry(i) != new.entry(i)).count();
            assert!(
                changed as f64 / 256.0 <= 2.0 / 4.0,
                "salt {salt}: {changed}/256 remapped"
            );
            // every changed bucket moved to the new PMU
            for i in 0..256 {
                if old.entry(i) != new.entry(i) {
                    assert_eq!(new.entry(i), Some(3));
                }
            }
        }
    }

    #[test]
    fn update_equals_fresh_build_and_reports_exact_diff() {
        let mut t = build_lookup_table(&[0, 1, 2], 8, 64, 7);
        let before: Vec<_> = (0..256).map(|i| t.entry(i)).collect();
        let changed = update_lookup_table(&mut t, &[0, 1, 2, 3]);
        let fresh = build_lookup_table(&[0, 1, 2, 3], 8, 64, 7);
        for i in 0..256 {
            assert_eq!(t.entry(i), fresh.entry(i));
            let differs = before[i] != fresh.entry(i);
            assert_eq!(changed.contains(&i), differs, "bucket {i}");
        }

        // no-op update reports nothing
        assert!(update_lookup_table(&mut t, &[0, 1, 2, 3]).is_empty());
    }

    #[test]
    fn remove_pmu_changes_only_owned_buckets() {
        let mut t = build_lookup_table(&[0, 1, 2, 3], 8, 64, 13);
        let owned: Vec<usize> = (0..256).filter(|&i| t.entry(i) == Some(2)).collect();
        let changed = update_lookup_table(&mut t, &[0, 1, 3]);
        assert_eq!(changed, owned);
    }

    #[test]
    fn classify_spreads_evenly_over_equal_vnode_pmus() {
        // 2^12 buckets and 512 vnodes per PMU: enough ring resolution that
        // arc-length variance stays inside the 3% band
        let t = build_lookup_table(&[0, 1, 2, 3], 12, 512, 0);
        let mut counts = [0u64; 4];
        let mut rng = SimRng::new(0xc1a55, 0);
        for _ in 0..100_000 {
            let key = Key::from_u32(rng.next_u32());
            counts[classify_key(&t, &key).unwrap()] += 1;
        }
        for (p, &c) in counts.iter().enumerate() {
            let share = c as f64 / 100_000.0;
            assert!((share - 0.25).abs() < 0.03, "pmu {p} share {share}");
        }
    }

    #[test]
    fn classify_is_deterministic() {
        let t = build_lookup_table(&[0, 1, 2], 8, 64, 0);
        let key = Key::from_bytes(&[9, 9, 9, 9]);
        assert_eq!(classify_key(&t, &key), classify_key(&t, &key));
    }

    #[test]
    fn produce_allocates_distinct_req_ids_and_stalls_at_depth() {
        let mut vmt = Vmt::new(VmtConfig { await_depth: 3, ..VmtConfig::default() });
        vmt.set_pmus(&[0]);
        let mut ids = Vec::new();
        for i in 0..3 {
            assert!(vmt.can_produce());
            let req = vmt.produce_request(phv_with_key(1, 0, Key::from_u32(i)), 0, 0);
            ids.push(req.req_id);
        }
        ids.dedup();
        assert_eq!(ids.len(), 3);
        assert!(!vmt.can_produce());
    }

    /// Minimal reference consumer: a map plus a list, no FIFO machinery.
    struct RefConsumer {
        pending: BTreeMap<ReqId, u32>, // req -> key tag
        emitted: Vec<u32>,
    }

    impl RefConsumer {
        fn consume(&mut self, resp: &LookupResponse) {
            if resp.valid {
                let tag = self.pending.remove(&resp.req_id).unwrap();
                self.emitted.push(tag);
            }
        }
    }

    #[test]
    fn miss_then_hit_emits_hit_first_then_resolution() {
        let mut vmt = Vmt::new(VmtConfig::default());
        vmt.set_pmus(&[0]);

        let r1 = vmt.produce_request(phv_with_key(1, 0, Key::from_u32(1)), 0, 0);
        let r2 = vmt.produce_request(phv_with_key(1, 0, Key::from_u32(2)), 0, 1);

        let mut reference = RefConsumer { pending: BTreeMap::new(), emitted: Vec::new() };
        reference.pending.insert(r1.req_id, 1);
        reference.pending.insert(r2.req_id, 2);

        let mut emissions = Vec::new();

        // k1 misses: notification buffers it, nothing emitted
        let notice = LookupResponse::miss_notice(&r1);
        assert!(vmt.consume_response(&notice, 2).is_none());
        reference.consume(&notice);

        // k2 hits and overtakes
        let hit = LookupResponse::hit(&r2, ActionRef(7));
        let e = vmt.consume_response(&hit, 3).unwrap();
        assert_eq!(e.kind, EmitKind::Hit);
        assert_eq!(e.latency, Some(2));
        emissions.push(e.phv.keys[0].bits(0, 32));
        reference.consume(&hit);

        // k1's resolution arrives and matches the buffer front
        let res = LookupResponse::resolution(r1.req_id, 0, 0, ActionRef(9));
        let e = vmt.consume_response(&res, 10).unwrap();
        assert_eq!(e.kind, EmitKind::Resolved);
        emissions.push(e.phv.keys[0].bits(0, 32));
        reference.consume(&res);

        assert_eq!(emissions, vec![2, 1]);
        assert_eq!(reference.emitted, vec![2, 1]);
        assert_eq!(vmt.stats.reordered_emissions, 1);
        assert_eq!(vmt.stats.displaced_resolutions, 0);
        assert_eq!(vmt.outstanding_len(), 0);
    }

    #[test]
    fn strict_order_holds_hits_behind_buffered_misses() {
        let mut vmt = Vmt::new(VmtConfig { strict_order: true, ..VmtConfig::default() });
        vmt.set_pmus(&[0]);

        let r1 = vmt.produce_request(phv_with_key(1, 0, Key::from_u32(1)), 0, 0);
        let r2 = vmt.produce_request(phv_with_key(1, 0, Key::from_u32(2)), 0, 1);

        let mut out = Vec::new();
        assert!(vmt.consume_response(&LookupResponse::miss_notice(&r1), 2).is_none());

        // the overtaking hit parks in the hold
        let e = vmt.consume_response(&LookupResponse::hit(&r2, ActionRef(7)), 3).unwrap();
        vmt.sequence(e, &mut out);
        assert!(out.is_empty());
        assert_eq!(vmt.held(), 1);

        // the resolution releases both, in arrival order
        let res = LookupResponse::resolution(r1.req_id, 0, 0, ActionRef(9));
        let e = vmt.consume_response(&res, 10).unwrap();
        vmt.sequence(e, &mut out);
        let keys: Vec<u32> = out.iter().map(|e| e.phv.keys[0].bits(0, 32)).collect();
        assert_eq!(keys, vec![1, 2]);
        assert_eq!(vmt.held(), 0);
        assert_eq!(vmt.stats.reordered_emissions, 0);
    }

    #[test]
    fn pass_through_sequence_emits_immediately() {
        let mut vmt = Vmt::new(VmtConfig::default());
        let mut out = Vec::new();
        let e = vmt.admit_default(phv_with_key(1, 0, Key::from_u32(5)));
        vmt.sequence(e, &mut out);
        assert_eq!(out.len(), 1);
        assert_eq!(vmt.held(), 0);
    }

    #[test]
    #[should_panic(expected = "protocol fault")]
    fn unknown_req_id_is_a_protocol_fault() {
        let mut vmt = Vmt::new(VmtConfig::default());
        vmt.set_pmus(&[0]);
        let resp = LookupResponse::resolution(12345, 0, 0, ActionRef(1));
        let _ = vmt.consume_response(&resp, 0);
    }

    #[test]
    fn default_path_annotates_with_configured_action() {
        let mut vmt = Vmt::new(VmtConfig { default_action: ActionRef(42), ..VmtConfig::default() });
        // no PMUs associated: everything takes the default path
        let e = vmt.admit_default(phv_with_key(1, 0, Key::from_u32(5)));
        assert_eq!(e.kind, EmitKind::Default);
        assert_eq!(e.phv.actions, vec![(0, ActionRef(42))]);
    }
}
