//! External lookup unit: resolves misses by walking a banked multi-bit trie
//! under a static scheduling window, replying strictly in arrival order.

pub mod orb;
pub mod rules;
pub mod trie;

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::queue::ClockedQueue;
use crate::types::{ActionRef, Cycle, LookupRequest, ReqId, VmtId};
use orb::{Orb, OrbReply};
use trie::{trie_lookup, Trie};

#[derive(Debug, Clone)]
pub struct EluConfig {
    pub stride: usize,
    pub n_banks: usize,
    /// Independent ports per bank.
    pub channels: usize,
    /// Bank access latency, cycles.
    pub l_mem: u64,
    /// Minimum spacing between two accesses on one port, cycles.
    pub ii_mem: u64,
    /// Bytes fetched per node read.
    pub node_bytes: u64,
    pub cycle_time_ns: f64,
    pub orb_capacity: usize,
    /// Replies committed to the reply queue per cycle.
    pub drain_width: usize,
    /// Static scheduling window: lookups walking the trie at once. The
    /// scheduler is the throughput bottleneck by design; widen it to model a
    /// more aggressive issue stage.
    pub sched_slots: usize,
    /// Fixed entry/exit pipeline cost added after the last bank return.
    pub overhead: u64,
    pub qmg_depth: usize,
    pub qlg_depth: usize,
}

impl Default for EluConfig {
    fn default() -> EluConfig {
        EluConfig {
            stride: 4,
            n_banks: 8,
            channels: 1,
            l_mem: 50,
            ii_mem: 2,
            node_bytes: 64,
            cycle_time_ns: 4.0,
            orb_capacity: 64,
            drain_width: 1,
            sched_slots: 2,
            overhead: 4,
            qmg_depth: 64,
            qlg_depth: 64,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EluStats {
    /// Requests accepted into the reply ring.
    pub admitted: u64,
    /// Replies pushed to the outbound queue.
    pub replies: u64,
    /// Walks that ended with no covering rule.
    pub not_found: u64,
    /// Total node reads issued.
    pub reads: u64,
    pub reads_per_bank: Vec<u64>,
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    NeedAccess,
    InAccess { until: Cycle },
    Overhead { until: Cycle },
}

#[derive(Debug)]
struct ActiveLookup {
    req_id: ReqId,
    raw: ActionRef,
    trace: Vec<(usize, usize)>,
    idx: usize,
    phase: Phase,
}

#[derive(Debug)]
pub struct Elu {
    pub cfg: EluConfig,
    tries: BTreeMap<VmtId, Trie>,
    /// Global miss queue feeding the scheduler.
    pub q_mg: ClockedQueue<LookupRequest>,
    /// Resolved replies in arrival order, waiting for the response path.
    pub q_lg: ClockedQueue<OrbReply>,
    orb: Orb,
    /// Issued to the ring but not yet walking; front is oldest.
    waiting: alloc::collections::VecDeque<LookupRequest>,
    /// Walking lookups, oldest first; length <= sched_slots.
    active: Vec<ActiveLookup>,
    /// bank_free[bank][port]: earliest cycle the port can start a read.
    bank_free: Vec<Vec<Cycle>>,
    pub stats: EluStats,
}

impl Elu {
    pub fn new(cfg: EluConfig) -> Elu {
        assert!(cfg.sched_slots >= 1, "scheduler needs at least one slot");
        assert!(cfg.channels >= 1 && cfg.n_banks >= 1);
        assert!(cfg.l_mem >= 1);
        let stats = EluStats { reads_per_bank: alloc::vec![0; cfg.n_banks], ..EluStats::default() };
        Elu {
            q_mg: ClockedQueue::new(cfg.qmg_depth),
            q_lg: ClockedQueue::new(cfg.qlg_depth),
            orb: Orb::new(cfg.orb_capacity),
            waiting: alloc::collections::VecDeque::new(),
            active: Vec::new(),
            bank_free: alloc::vec![alloc::vec![0; cfg.channels]; cfg.n_banks],
            tries: BTreeMap::new(),
            stats,
            cfg,
        }
    }

    pub fn install_policy(&mut self, vmt: VmtId, trie: Trie) {
        assert_eq!(trie.n_banks, self.cfg.n_banks, "policy striped over a different bank count");
        self.tries.insert(vmt, trie);
    }

    pub fn policy(&self, vmt: VmtId) -> Option<&Trie> {
        self.tries.get(&vmt)
    }

    pub fn outstanding(&self) -> usize {
        self.orb.outstanding()
    }

    pub fn is_idle(&self) -> bool {
        self.orb.is_empty() && self.q_mg.is_empty() && self.q_lg.is_empty()
    }

    /// One cycle: admit new misses to the ring, refill scheduler slots,
    /// advance walks, and commit finished replies in arrival order.
    pub fn tick(&mut self, now: Cycle) {
        // miss queue -> reply ring (claims reply order on arrival)
        while !self.orb.is_full() {
            let Some(req) = self.q_mg.pop() else { break };
            assert!(self.orb.issue(req.clone()), "ring had room");
            self.waiting.push_back(req);
            self.stats.admitted += 1;
        }

        // refill scheduler slots in arrival order; the walk result is known
        // up front, timing comes from replaying its bank trace
        while self.active.len() < self.cfg.sched_slots {
            let Some(req) = self.waiting.pop_front() else { break };
            let (raw, trace) = match self.tries.get(&req.vmt) {
                Some(t) => trie_lookup(t, &req.key),
                None => (ActionRef::NOT_FOUND, alloc::vec![(0, 0)]),
            };
            if !raw.is_found() {
                self.stats.not_found += 1;
            }
            self.active.push(ActiveLookup { req_id: req.req_id, raw, trace, idx: 0, phase: Phase::NeedAccess });
        }

        // advance walks; a returned read may start the next level this cycle
        let mut finished: Vec<usize> = Vec::new();
        for (i, lk) in self.active.iter_mut().enumerate() {
            loop {
                match lk.phase {
                    Phase::InAccess { until } => {
                        if now < until {
                            break;
                        }
                        lk.idx += 1;
                        lk.phase = if lk.idx == lk.trace.len() {
                            Phase::Overhead { until: now + self.cfg.overhead }
                        } else {
                            Phase::NeedAccess
                        };
                    }
                    Phase::NeedAccess => {
                        let bank = lk.trace[lk.idx].0;
                        let Some(port) = self.bank_free[bank].iter().position(|&t| t <= now) else {
                            break;
                        };
                        self.bank_free[bank][port] = now + self.cfg.ii_mem;
                        self.stats.reads += 1;
                        self.stats.reads_per_bank[bank] += 1;
                        lk.phase = Phase::InAccess { until: now + self.cfg.l_mem };
                    }
                    Phase::Overhead { until } => {
                        if now < until {
                            break;
                        }
                        self.orb.complete(lk.req_id, lk.raw);
                        finished.push(i);
                        break;
                    }
                }
            }
        }
        for &i in finished.iter().rev() {
            self.active.remove(i);
        }

        // commit in arrival order, stopping when the reply queue fills
        let q_lg = &mut self.q_lg;
        let replies = &mut self.stats.replies;
        self.orb.drain(self.cfg.drain_width, |reply| {
            if q_lg.push(reply).is_ok() {
                *replies += 1;
                true
            } else {
                false
            }
        });
    }
}

/// Sustained read bandwidth in GB/s (one byte per nanosecond is 1 GB/s).
pub fn memory_bandwidth_gbps(reads: u64, node_bytes: u64, cycles: u64, cycle_time_ns: f64) -> f64 {
    if cycles == 0 {
        return 0.0;
    }
    (reads as f64 * node_bytes as f64) / (cycles as f64 * cycle_time_ns)
}
