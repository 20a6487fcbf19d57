//! Shared domain types: keys, masks, actions, header bundles, and the
//! request/response messages exchanged between match stages and cache blocks.

use alloc::vec::Vec;

/// Widest supported match key, in bytes.
pub const KEY_WIDTH_MAX: usize = 64;

pub type VmtId = usize;
pub type PmuId = usize;
pub type ReqId = u64;
pub type FlowId = u64;
pub type Cycle = u64;

/// Fixed-width match key. Bytes past `width` are always zero so that
/// comparisons and hashing over the full array stay consistent.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key {
    bytes: [u8; KEY_WIDTH_MAX],
    width: u8,
}

impl Key {
    pub fn from_bytes(src: &[u8]) -> Key {
        assert!(src.len() <= KEY_WIDTH_MAX, "key wider than {KEY_WIDTH_MAX} bytes");
        let mut bytes = [0u8; KEY_WIDTH_MAX];
        bytes[..src.len()].copy_from_slice(src);
        Key { bytes, width: src.len() as u8 }
    }

    pub fn from_u32(v: u32) -> Key {
        Key::from_bytes(&v.to_be_bytes())
    }

    pub fn from_u64(v: u64, width: usize) -> Key {
        assert!(width <= 8);
        Key::from_bytes(&v.to_be_bytes()[8 - width..])
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes[..self.width as usize]
    }

    /// Bit `i` counted MSB-first from the start of the key.
    pub fn bit(&self, i: usize) -> u8 {
        debug_assert!(i < self.width as usize * 8);
        (self.bytes[i / 8] >> (7 - i % 8)) & 1
    }

    /// `width_bits` bits starting at bit `start` (MSB-first), right-aligned.
    /// Used by trie walks; `width_bits` never exceeds 16 in practice.
    pub fn bits(&self, start: usize, width_bits: usize) -> u32 {
        debug_assert!(width_bits <= 32);
        let mut v = 0u32;
        for i in 0..width_bits {
            let idx = start + i;
            let bit = if idx < self.width as usize * 8 { self.bit(idx) } else { 0 };
            v = (v << 1) | bit as u32;
        }
        v
    }
}

impl core::fmt::Debug for Key {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Key(0x")?;
        for b in self.as_bytes() {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

/// Byte-granularity validity mask over a key: bit `i` set means byte `i`
/// participates in comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteMask {
    bits: u64,
}

impl ByteMask {
    pub fn none() -> ByteMask {
        ByteMask { bits: 0 }
    }

    /// Mask covering the first `width` bytes.
    pub fn prefix(width: usize) -> ByteMask {
        assert!(width <= KEY_WIDTH_MAX);
        if width == 64 {
            ByteMask { bits: u64::MAX }
        } else {
            ByteMask { bits: (1u64 << width) - 1 }
        }
    }

    pub fn with_byte(mut self, i: usize) -> ByteMask {
        assert!(i < KEY_WIDTH_MAX);
        self.bits |= 1 << i;
        self
    }

    pub fn covers(&self, i: usize) -> bool {
        self.bits >> i & 1 == 1
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }
}

/// Byte-wise equality under a mask. Bytes whose mask bit is clear never
/// disqualify a match; an all-clear mask matches anything.
pub fn masked_eq(a: &Key, b: &Key, mask: ByteMask) -> bool {
    debug_assert_eq!(a.width, b.width);
    let mut bits = mask.bits;
    while bits != 0 {
        let i = bits.trailing_zeros() as usize;
        if a.bytes[i] != b.bytes[i] {
            return false;
        }
        bits &= bits - 1;
    }
    true
}

/// Action identifier resolved by a match. `NOT_FOUND` is a reserved sentinel
/// and never a real action id.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActionRef(pub u32);

impl ActionRef {
    pub const NOT_FOUND: ActionRef = ActionRef(u32::MAX);

    pub fn is_found(&self) -> bool {
        *self != ActionRef::NOT_FOUND
    }
}

impl core::fmt::Debug for ActionRef {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        if self.is_found() {
            write!(f, "Action({})", self.0)
        } else {
            write!(f, "Action(NOT_FOUND)")
        }
    }
}

/// Packet header bundle moving through the pipeline. Keys are materialized
/// per table at injection; the seq number is a global injection counter used
/// for reorder accounting.
#[derive(Debug, Clone)]
pub struct Phv {
    pub flow: FlowId,
    pub seq: u64,
    pub injected_cycle: Cycle,
    pub path_seed: u64,
    pub keys: Vec<Key>,
    pub actions: Vec<(VmtId, ActionRef)>,
}

impl Phv {
    pub fn key_for(&self, vmt: VmtId) -> &Key {
        &self.keys[vmt]
    }
}

/// Lookup issued by a match stage toward a cache block.
#[derive(Debug, Clone, Copy)]
pub struct LookupRequest {
    pub req_id: ReqId,
    pub vmt: VmtId,
    pub pmu: PmuId,
    pub key: Key,
    pub mask: ByteMask,
    pub issued_cycle: Cycle,
}

/// Reply toward a match stage. `valid == false` if and only if the action is
/// `NOT_FOUND`: that combination is the early miss notification.
#[derive(Debug, Clone, Copy)]
pub struct LookupResponse {
    pub req_id: ReqId,
    pub vmt: VmtId,
    pub pmu: PmuId,
    pub action: ActionRef,
    pub valid: bool,
}

impl LookupResponse {
    pub fn hit(req: &LookupRequest, action: ActionRef) -> LookupResponse {
        debug_assert!(action.is_found());
        LookupResponse { req_id: req.req_id, vmt: req.vmt, pmu: req.pmu, action, valid: true }
    }

    pub fn miss_notice(req: &LookupRequest) -> LookupResponse {
        LookupResponse {
            req_id: req.req_id,
            vmt: req.vmt,
            pmu: req.pmu,
            action: ActionRef::NOT_FOUND,
            valid: false,
        }
    }

    /// Resolved action arriving after an external lookup completed.
    pub fn resolution(req_id: ReqId, vmt: VmtId, pmu: PmuId, action: ActionRef) -> LookupResponse {
        debug_assert!(action.is_found());
        LookupResponse { req_id, vmt, pmu, action, valid: true }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_zero_pads_past_width() {
        let k = Key::from_bytes(&[0xab, 0xcd]);
        assert_eq!(k.width(), 2);
        assert_eq!(k.as_bytes(), &[0xab, 0xcd]);
        assert_eq!(k.bytes[2..], [0u8; 62]);
    }

    #[test]
    fn key_bits_msb_first() {
        let k = Key::from_u32(0x8000_0001);
        assert_eq!(k.bit(0), 1);
        assert_eq!(k.bit(1), 0);
        assert_eq!(k.bit(31), 1);
        assert_eq!(k.bits(0, 4), 0x8);
        assert_eq!(k.bits(28, 4), 0x1);
        // reads past the key width see zeros
        assert_eq!(k.bits(30, 4), 0b0100);
    }

    #[test]
    fn masked_eq_examples() {
        let a = Key::from_bytes(&[1, 2, 3, 4]);
        let b = Key::from_bytes(&[1, 2, 9, 4]);
        assert!(masked_eq(&a, &b, ByteMask::none().with_byte(0).with_byte(1).with_byte(3)));
        assert!(!masked_eq(&a, &b, ByteMask::prefix(4)));
        assert!(masked_eq(&a, &b, ByteMask::none()));
    }

    #[test]
    fn full_mask_is_byte_equality() {
        let a = Key::from_bytes(&[5, 6, 7]);
        let b = Key::from_bytes(&[5, 6, 7]);
        assert!(masked_eq(&a, &b, ByteMask::prefix(3)));
        assert_eq!(a, b);
    }

    #[test]
    fn response_invariant() {
        let req = LookupRequest {
            req_id: 7,
            vmt: 0,
            pmu: 1,
            key: Key::from_u32(1),
            mask: ByteMask::prefix(4),
            issued_cycle: 0,
        };
        let h = LookupResponse::hit(&req, ActionRef(3));
        assert!(h.valid && h.action.is_found());
        let m = LookupResponse::miss_notice(&req);
        assert!(!m.valid && !m.action.is_found());
    }
}
