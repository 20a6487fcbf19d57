//! Ordered reply buffer: a ring that forces replies out in issue order no
//! matter what order the bank accesses complete in.

use alloc::vec;
use alloc::vec::Vec;

use crate::types::{ActionRef, LookupRequest, ReqId};

#[derive(Debug, Clone)]
struct OrbSlot {
    req: LookupRequest,
    /// Raw walk outcome; NOT_FOUND is a legal result, so completion is
    /// tracked separately.
    result: Option<ActionRef>,
}

/// A committed reply leaving the buffer, still carrying the raw outcome.
#[derive(Debug, Clone)]
pub struct OrbReply {
    pub req: LookupRequest,
    pub raw: ActionRef,
}

#[derive(Debug)]
pub struct Orb {
    ring: Vec<Option<OrbSlot>>,
    /// Monotonic cursors; commit <= issue <= commit + capacity.
    issue: u64,
    commit: u64,
}

impl Orb {
    pub fn new(capacity: usize) -> Orb {
        assert!(capacity >= 1, "reply ring needs at least one slot");
        Orb { ring: vec![None; capacity], issue: 0, commit: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.ring.len()
    }

    pub fn outstanding(&self) -> usize {
        (self.issue - self.commit) as usize
    }

    pub fn is_full(&self) -> bool {
        self.outstanding() == self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.issue == self.commit
    }

    /// Claims the next slot in issue order. Fails when the ring is full.
    pub fn issue(&mut self, req: LookupRequest) -> bool {
        if self.is_full() {
            return false;
        }
        let idx = (self.issue % self.ring.len() as u64) as usize;
        debug_assert!(self.ring[idx].is_none());
        self.ring[idx] = Some(OrbSlot { req, result: None });
        self.issue += 1;
        true
    }

    /// Records the walk result for an outstanding request. Completing an
    /// unknown or already-complete request is a protocol fault.
    pub fn complete(&mut self, req_id: ReqId, raw: ActionRef) {
        for off in self.commit..self.issue {
            let idx = (off % self.ring.len() as u64) as usize;
            let slot = self.ring[idx].as_mut().expect("cursor range holds occupied slots");
            if slot.req.req_id == req_id {
                assert!(slot.result.is_none(), "protocol fault: request {req_id} completed twice");
                slot.result = Some(raw);
                return;
            }
        }
        panic!("protocol fault: completion for unknown request {req_id}");
    }

    /// Drains up to `width` replies from the commit cursor, stopping at the
    /// first incomplete slot or when `out` refuses one (downstream full).
    pub fn drain<F: FnMut(OrbReply) -> bool>(&mut self, width: usize, mut out: F) -> usize {
        let mut drained = 0;
        while drained < width && self.commit < self.issue {
            let idx = (self.commit % self.ring.len() as u64) as usize;
            let ready = self.ring[idx].as_ref().expect("cursor range holds occupied slots");
            let Some(raw) = ready.result else { break };
            if !out(OrbReply { req: ready.req.clone(), raw }) {
                break;
            }
            self.ring[idx] = None;
            self.commit += 1;
            drained += 1;
        }
        drained
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;
    use crate::types::{ByteMask, Key};

    fn req(id: ReqId) -> LookupRequest {
        LookupRequest {
            req_id: id,
            vmt: 0,
            pmu: 0,
            key: Key::from_u32(id as u32),
            mask: ByteMask::prefix(4),
            issued_cycle: 0,
        }
    }

    #[test]
    fn replies_come_out_in_issue_order() {
        let mut orb = Orb::new(8);
        for i in 0..4 {
            assert!(orb.issue(req(i)));
        }
        // complete out of order
        for i in [2u64, 0, 3, 1] {
            orb.complete(i, ActionRef(i as u32));
        }
        let mut got = Vec::new();
        orb.drain(16, |r| {
            got.push(r.req.req_id);
            true
        });
        assert_eq!(got, vec![0, 1, 2, 3]);
        assert!(orb.is_empty());
    }

    #[test]
    fn head_of_line_blocks_until_complete() {
        let mut orb = Orb::new(4);
        for i in 0..3 {
            assert!(orb.issue(req(i)));
        }
        orb.complete(1, ActionRef(1));
        orb.complete(2, ActionRef(2));
        let mut got = Vec::new();
        assert_eq!(orb.drain(16, |r| { got.push(r.req.req_id); true }), 0);
        orb.complete(0, ActionRef(0));
        assert_eq!(orb.drain(16, |r| { got.push(r.req.req_id); true }), 3);
        assert_eq!(got, vec![0, 1, 2]);
    }

    #[test]
    fn full_ring_refuses_issue() {
        let mut orb = Orb::new(2);
        assert!(orb.issue(req(0)));
        assert!(orb.issue(req(1)));
        assert!(!orb.issue(req(2)));
        orb.complete(0, ActionRef(0));
        assert_eq!(orb.drain(1, |_| true), 1);
        assert!(orb.issue(req(2)));
    }

    #[test]
    fn drain_respects_downstream_refusal() {
        let mut orb = Orb::new(4);
        for i in 0..3 {
            assert!(orb.issue(req(i)));
            orb.complete(i, ActionRef(i as u32));
        }
        let mut room = 2;
        let mut got = Vec::new();
        let n = orb.drain(16, |r| {
            if room == 0 {
                return false;
            }
            room -= 1;
            got.push(r.req.req_id);
            true
        });
        assert_eq!(n, 2);
        assert_eq!(got, vec![0, 1]);
        assert_eq!(orb.outstanding(), 1);
    }

    #[test]
    #[should_panic(expected = "protocol fault")]
    fn double_completion_is_a_fault() {
        let mut orb = Orb::new(4);
        orb.issue(req(7));
        orb.complete(7, ActionRef(1));
        orb.complete(7, ActionRef(1));
    }

    #[test]
    #[should_panic(expected = "protocol fault")]
    fn unknown_completion_is_a_fault() {
        let mut orb = Orb::new(4);
        orb.issue(req(7));
        orb.complete(8, ActionRef(1));
    }

    #[test]
    fn random_completion_orders_always_reply_in_issue_order() {
        let mut rng = SimRng::new(0x0b0b, 1);
        for trial in 0..200 {
            let cap = 1 + rng.below(64) as usize;
            let mut orb = Orb::new(cap);
            let n = 1 + rng.below(cap as u64);
            let mut ids: Vec<u64> = (0..n).map(|i| trial * 1000 + i).collect();
            for &id in &ids {
                assert!(orb.issue(req(id)));
            }
            // shuffle completion order
            for i in (1..ids.len()).rev() {
                let j = rng.below(i as u64 + 1) as usize;
                ids.swap(i, j);
            }
            let mut replied = Vec::new();
            for &id in &ids {
                orb.complete(id, ActionRef(id as u32));
                orb.drain(usize::MAX, |r| {
                    assert_eq!(r.raw, ActionRef(r.req.req_id as u32));
                    replied.push(r.req.req_id);
                    true
                });
            }
            let want: Vec<u64> = (0..n).map(|i| trial * 1000 + i).collect();
            assert_eq!(replied, want, "trial {trial} cap {cap}");
        }
    }
}
