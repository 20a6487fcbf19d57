//! Physical match unit: an LRU-CAM cache shard with its own clock ratio,
//! non-blocking miss handling, and the free/transient/associated FSM.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;

use crate::queue::ClockedQueue;
use crate::types::{ActionRef, ByteMask, Key, LookupRequest, LookupResponse, PmuId, VmtId};

fn normalize(key: &Key, mask: ByteMask) -> Key {
    let mut bytes = [0u8; crate::types::KEY_WIDTH_MAX];
    for (i, &b) in key.as_bytes().iter().enumerate() {
        if mask.covers(i) {
            bytes[i] = b;
        }
    }
    Key::from_bytes(&bytes[..key.width()])
}

#[derive(Debug, Clone)]
struct CamSlot {
    key: Key,
    action: ActionRef,
    prev: Option<usize>,
    next: Option<usize>,
}

/// Fully associative block with O(1) LRU maintenance: entries carry list
/// links, an index keyed by the mask-normalized key stands in for the
/// parallel search.
#[derive(Debug, Clone)]
pub struct CamBlock {
    cap: usize,
    mask: ByteMask,
    slots: Vec<CamSlot>,
    free: Vec<usize>,
    head: Option<usize>,
    tail: Option<usize>,
    index: BTreeMap<Key, usize>,
}

impl CamBlock {
    pub fn new(cap: usize, mask: ByteMask) -> CamBlock {
        assert!(cap >= 1);
        CamBlock {
            cap,
            mask,
            slots: Vec::with_capacity(cap),
            free: Vec::new(),
            head: None,
            tail: None,
            index: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn clear(&mut self, mask: ByteMask) {
        self.mask = mask;
        self.slots.clear();
        self.free.clear();
        self.head = None;
        self.tail = None;
        self.index.clear();
    }

    fn unlink(&mut self, idx: usize) {
        let (prev, next) = (self.slots[idx].prev, self.slots[idx].next);
        match prev {
            Some(p) => self.slots[p].next = next,
            None => self.head = next,
        }
        match next {
            Some(n) => self.slots[n].prev = prev,
            None => self.tail = prev,
        }
    }

    fn link_front(&mut self, idx: usize) {
        self.slots[idx].prev = None;
        self.slots[idx].next = self.head;
        if let Some(h) = self.head {
            self.slots[h].prev = Some(idx);
        }
        self.head = Some(idx);
        if self.tail.is_none() {
            self.tail = Some(idx);
        }
    }

    fn promote(&mut self, idx: usize) {
        if self.head == Some(idx) {
            return;
        }
        self.unlink(idx);
        self.link_front(idx);
    }

    pub fn lookup(&mut self, key: &Key, mask: ByteMask) -> Option<ActionRef> {
        let idx = if mask == self.mask {
            *self.index.get(&normalize(key, mask))?
        } else {
            // request mask differs from the installed one: honest scan
            let mut cur = self.head;
            loop {
                let i = cur?;
                if crate::types::masked_eq(&self.slots[i].key, &normalize(key, mask), mask) {
                    break i;
                }
                cur = self.slots[i].next;
            }
        };
        self.promote(idx);
        Some(self.slots[idx].action)
    }

    /// Insert at the LRU head; a full block evicts its tail and returns it.
    /// Re-inserting a present key refreshes its action and recency instead.
    pub fn insert(&mut self, key: &Key, action: ActionRef) -> Option<(Key, ActionRef)> {
        let norm = normalize(key, self.mask);
        if let Some(&idx) = self.index.get(&norm) {
            self.slots[idx].action = action;
            self.promote(idx);
            return None;
        }

        let mut evicted = None;
        if self.index.len() == self.cap {
            let t = self.tail.expect("full block has a tail");
            self.unlink(t);
            let (k, a) = (self.slots[t].key, self.slots[t].action);
            self.index.remove(&k);
            self.free.push(t);
            evicted = Some((k, a));
        }

        let idx = match self.free.pop() {
            Some(i) => {
                self.slots[i] = CamSlot { key: norm, action, prev: None, next: None };
                i
            }
            None => {
                self.slots.push(CamSlot { key: norm, action, prev: None, next: None });
                self.slots.len() - 1
            }
        };
        self.link_front(idx);
        self.index.insert(norm, idx);
        evicted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmuState {
    Free,
    Transient { vmt: VmtId, mask: ByteMask },
    Associated { vmt: VmtId, mask: ByteMask },
}

impl PmuState {
    pub fn vmt(&self) -> Option<VmtId> {
        match self {
            PmuState::Free => None,
            PmuState::Transient { vmt, .. } | PmuState::Associated { vmt, .. } => Some(*vmt),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PmuTiming {
    pub tau_c: u64,
    pub ii_c: u64,
    pub clock_ratio: f64,
}

impl Default for PmuTiming {
    fn default() -> PmuTiming {
        PmuTiming { tau_c: 2, ii_c: 2, clock_ratio: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct PmuConfig {
    pub id: PmuId,
    pub block_size: usize,
    pub timing: PmuTiming,
    pub qr_depth: usize,
    pub qp_depth: usize,
    pub qm_depth: usize,
    pub negative_caching: bool,
}

impl Default for PmuConfig {
    fn default() -> PmuConfig {
        PmuConfig {
            id: 0,
            block_size: 256,
            timing: PmuTiming::default(),
            qr_depth: 16,
            qp_depth: 16,
            qm_depth: 16,
            negative_caching: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PmuStats {
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub fills: u64,
    pub issue_stall_cycles: u64,
}

#[derive(Debug, Clone)]
struct InFlight {
    req: LookupRequest,
    verdict: Option<ActionRef>,
    ready: u64,
}

/// Phase-accumulator clock divider: `fire` local ticks per pipeline cycle
/// follow the configured ratio exactly, in integer arithmetic.
#[derive(Debug, Clone)]
struct ClockGate {
    num: u64,
    acc: u64,
}

const CLOCK_DEN: u64 = 1 << 16;

impl ClockGate {
    fn new(ratio: f64) -> ClockGate {
        assert!(ratio > 0.0, "clock ratio must be positive");
        let num = libm::round(ratio * CLOCK_DEN as f64) as u64;
        assert!(num > 0, "clock ratio too small");
        ClockGate { num, acc: 0 }
    }

    fn fire(&mut self) -> u32 {
        self.acc += self.num;
        let n = self.acc / CLOCK_DEN;
        self.acc %= CLOCK_DEN;
        n as u32
    }
}

#[derive(Debug)]
pub struct Pmu {
    pub cfg: PmuConfig,
    pub state: PmuState,
    pub cam: CamBlock,
    pub q_r: ClockedQueue<LookupRequest>,
    pub q_p: ClockedQueue<LookupResponse>,
    pub q_m: ClockedQueue<LookupRequest>,
    pipeline: VecDeque<InFlight>,
    gate: ClockGate,
    local_now: u64,
    last_issue: Option<u64>,
    /// Misses forwarded externally whose resolution has not come back yet;
    /// gates transient→free.
    pub outstanding: u64,
    pub stats: PmuStats,
}

impl Pmu {
    pub fn new(cfg: PmuConfig) -> Pmu {
        let gate = ClockGate::new(cfg.timing.clock_ratio);
        assert!(cfg.timing.tau_c >= 1 && cfg.timing.ii_c >= 1);
        Pmu {
            cam: CamBlock::new(cfg.block_size, ByteMask::none()),
            q_r: ClockedQueue::new(cfg.qr_depth),
            q_p: ClockedQueue::new(cfg.qp_depth),
            q_m: ClockedQueue::new(cfg.qm_depth),
            pipeline: VecDeque::new(),
            gate,
            local_now: 0,
            last_issue: None,
            outstanding: 0,
            stats: PmuStats::default(),
            state: PmuState::Free,
            cfg,
        }
    }

    pub fn is_drained(&self) -> bool {
        self.pipeline.is_empty() && self.q_r.is_empty() && self.q_p.is_empty() && self.q_m.is_empty()
    }

    /// Legal transitions: free→associated (flushes the CAM, installs the
    /// mask), associated→transient, transient→free (only when drained).
    pub fn set_state(&mut self, target: PmuState) -> bool {
        match (self.state, target) {
            (PmuState::Free, PmuState::Associated { mask, .. }) => {
                self.cam.clear(mask);
                self.state = target;
                true
            }
            (PmuState::Associated { vmt: a, .. }, PmuState::Transient { vmt: b, .. }) if a == b => {
                self.state = target;
                true
            }
            (PmuState::Transient { .. }, PmuState::Free) => {
                if self.outstanding == 0 && self.is_drained() {
                    self.state = PmuState::Free;
                    true
                } else {
                    false
                }
            }
            _ => false,
        }
    }

    pub fn begin_release(&mut self) -> bool {
        match self.state {
            PmuState::Associated { vmt, mask } => self.set_state(PmuState::Transient { vmt, mask }),
            _ => false,
        }
    }

    /// Auto transition out of transient once everything in flight settled.
    pub fn try_finish_release(&mut self) -> bool {
        matches!(self.state, PmuState::Transient { .. }) && self.set_state(PmuState::Free)
    }

    fn serving(&self) -> bool {
        matches!(self.state, PmuState::Associated { .. } | PmuState::Transient { .. })
    }

    /// One pipeline cycle. The local clock may fire zero or more times
    /// depending on the clock ratio.
    pub fn tick(&mut self) {
        for _ in 0..self.gate.fire() {
            self.local_now += 1;
            self.complete_front();
            self.try_issue();
        }
    }

    fn complete_front(&mut self) {
        while let Some(front) = self.pipeline.front() {
            if front.ready > self.local_now {
                break;
            }
            match front.verdict {
                Some(action) => {
                    if self.q_p.is_full() {
                        break;
                    }
                    let f = self.pipeline.pop_front().unwrap();
                    self.q_p.push(LookupResponse::hit(&f.req, action)).ok().unwrap();
                }
                None => {
                    // miss duplication: notification and forwarded request
                    // must go out together
                    if self.q_p.is_full() || self.q_m.is_full() {
                        break;
                    }
                    let f = self.pipeline.pop_front().unwrap();
                    self.q_p.push(LookupResponse::miss_notice(&f.req)).ok().unwrap();
                    self.q_m.push(f.req).ok().unwrap();
                    self.outstanding += 1;
                }
            }
        }
    }

    fn try_issue(&mut self) {
        if !self.serving() || self.q_r.is_empty() {
            return;
        }
        if let Some(last) = self.last_issue {
            if self.local_now - last < self.cfg.timing.ii_c {
                return;
            }
        }
        if self.q_p.is_full() || self.q_m.is_full() {
            self.stats.issue_stall_cycles += 1;
            return;
        }
        let req = self.q_r.pop().unwrap();
        let verdict = self.cam.lookup(&req.key, req.mask);
        self.stats.lookups += 1;
        match verdict {
            Some(_) => self.stats.hits += 1,
            None => self.stats.misses += 1,
        }
        self.pipeline.push_back(InFlight { req, verdict, ready: self.local_now + self.cfg.timing.tau_c });
        self.last_issue = Some(self.local_now);
    }

    /// ELU resolution arriving at this PMU: fill the CAM (subject to the
    /// negative-caching choice) and forward the resolved response upstream.
    /// Fails without side effects when Q_p has no room.
    pub fn deliver_resolution(&mut self, resp: LookupResponse, raw: ActionRef, key: &Key) -> bool {
        debug_assert!(resp.valid);
        if self.q_p.is_full() {
            return false;
        }
        if raw.is_found() || self.cfg.negative_caching {
            if self.cam.insert(key, resp.action).is_some() {
                self.stats.evictions += 1;
            }
            self.stats.fills += 1;
        }
        assert!(self.outstanding > 0, "protocol fault: resolution without a forwarded miss");
        self.outstanding -= 1;
        self.q_p.push(resp).ok().unwrap();
        true
    }
}
