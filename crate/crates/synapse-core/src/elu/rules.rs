//! Control-plane rule preprocessing: range expansion into covering prefixes
//! and spine pruning into a disjoint, backtrack-free prefix set.

use alloc::vec;
use alloc::vec::Vec;

use crate::types::ActionRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldMatch {
    Exact(u64),
    Prefix { value: u64, len: u8 },
    Range { lo: u64, hi: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct RuleField {
    pub width: u8,
    pub m: FieldMatch,
}

impl RuleField {
    fn domain_max(&self) -> u64 {
        if self.width == 64 {
            u64::MAX
        } else {
            (1u64 << self.width) - 1
        }
    }

    /// Fully unconstrained field (matches its whole domain).
    fn is_wildcard(&self) -> bool {
        match self.m {
            FieldMatch::Prefix { len, .. } => len == 0,
            FieldMatch::Range { lo, hi } => lo == 0 && hi == self.domain_max(),
            FieldMatch::Exact(_) => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub fields: Vec<RuleField>,
    pub action: ActionRef,
    pub priority: i32,
}

impl Rule {
    pub fn total_width_bits(&self) -> usize {
        self.fields.iter().map(|f| f.width as usize).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleError {
    EmptyRange { rule: usize },
    PrefixTooLong { rule: usize },
    ValueTooWide { rule: usize },
    ReservedAction { rule: usize },
    /// Constrained field after a partially-specified one: the concatenated
    /// match would not be a contiguous prefix, which a single trie cannot
    /// represent.
    NotTrieCompatible { rule: usize },
}

impl core::fmt::Display for RuleError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RuleError::EmptyRange { rule } => write!(f, "rule {rule}: empty range (lo > hi)"),
            RuleError::PrefixTooLong { rule } => write!(f, "rule {rule}: prefix length exceeds field width"),
            RuleError::ValueTooWide { rule } => write!(f, "rule {rule}: value exceeds field width"),
            RuleError::ReservedAction { rule } => write!(f, "rule {rule}: action id is reserved"),
            RuleError::NotTrieCompatible { rule } => {
                write!(f, "rule {rule}: constrained field after a partial match is not trie-compatible")
            }
        }
    }
}

/// A prefix over the concatenated key bit-string, MSB-first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct BitPrefix {
    bytes: Vec<u8>,
    len: usize,
}

impl BitPrefix {
    pub fn empty() -> BitPrefix {
        BitPrefix { bytes: Vec::new(), len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&self, i: usize) -> u8 {
        debug_assert!(i < self.len);
        (self.bytes[i / 8] >> (7 - i % 8)) & 1
    }

    pub fn push_bit(&mut self, b: u8) {
        if self.len % 8 == 0 {
            self.bytes.push(0);
        }
        if b != 0 {
            self.bytes[self.len / 8] |= 1 << (7 - self.len % 8);
        }
        self.len += 1;
    }

    pub fn push_bits(&mut self, value: u64, nbits: usize) {
        for i in (0..nbits).rev() {
            self.push_bit(((value >> i) & 1) as u8);
        }
    }

    pub fn child(&self, b: u8) -> BitPrefix {
        let mut c = self.clone();
        c.push_bit(b);
        c
    }

    /// Chunk of `width` bits starting at `start`, zero-padded past the end.
    pub fn chunk(&self, start: usize, width: usize) -> u32 {
        let mut v = 0u32;
        for i in 0..width {
            let b = if start + i < self.len { self.bit(start + i) } else { 0 };
            v = (v << 1) | b as u32;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixRule {
    pub prefix: BitPrefix,
    pub action: ActionRef,
    pub priority: i32,
    pub order: u32,
}

/// Minimal set of (value, prefix_len) pairs covering [lo, hi] within a field
/// of `width` bits. Greedy aligned-block decomposition; the result is the
/// unique minimal cover.
pub fn range_to_prefixes(lo: u64, hi: u64, width: u8) -> Vec<(u64, u8)> {
    debug_assert!(lo <= hi);
    let mut out = Vec::new();
    let mut cur = lo;
    loop {
        // largest aligned block starting at cur that stays within [lo, hi]
        let max_align = if cur == 0 { width as u32 } else { cur.trailing_zeros().min(width as u32) };
        let mut k = max_align;
        while k > 0 {
            let span = 1u64 << k;
            if cur.checked_add(span - 1).is_none_or(|end| end > hi) {
                k -= 1;
            } else {
                break;
            }
        }
        out.push((cur, width - k as u8));
        let step = 1u64 << k;
        match cur.checked_add(step) {
            Some(next) if next <= hi => cur = next,
            _ => break,
        }
    }
    out
}

/// Expands every rule into equivalent prefix rules over the concatenated key.
/// At most one field may be partially specified; everything after it must be
/// wildcard. Duplicate prefixes keep the highest-priority (then earliest)
/// rule.
pub fn expand_rules(rules: &[Rule]) -> Result<Vec<PrefixRule>, RuleError> {
    let mut out: Vec<PrefixRule> = Vec::new();
    for (ri, rule) in rules.iter().enumerate() {
        if !rule.action.is_found() {
            return Err(RuleError::ReservedAction { rule: ri });
        }
        let mut head = BitPrefix::empty();
        let mut open = false; // a partial field has been consumed
        let mut variants: Vec<BitPrefix> = Vec::new();

        for f in &rule.fields {
            if f.width == 0 || f.width > 64 {
                return Err(RuleError::ValueTooWide { rule: ri });
            }
            let max = f.domain_max();
            match f.m {
                FieldMatch::Exact(v) => {
                    if v > max {
                        return Err(RuleError::ValueTooWide { rule: ri });
                    }
                    if open {
                        return Err(RuleError::NotTrieCompatible { rule: ri });
                    }
                    head.push_bits(v, f.width as usize);
                }
                FieldMatch::Prefix { value, len } => {
                    if len > f.width {
                        return Err(RuleError::PrefixTooLong { rule: ri });
                    }
                    if value > max {
                        return Err(RuleError::ValueTooWide { rule: ri });
                    }
                    if f.is_wildcard() {
                        continue;
                    }
                    if open {
                        return Err(RuleError::NotTrieCompatible { rule: ri });
                    }
                    // value is in field domain; keep its top `len` bits
                    head.push_bits(value >> (f.width - len), len as usize);
                    if len < f.width {
                        open = true;
                    }
                }
                FieldMatch::Range { lo, hi } => {
                    if lo > hi {
                        return Err(RuleError::EmptyRange { rule: ri });
                    }
                    if hi > max {
                        return Err(RuleError::ValueTooWide { rule: ri });
                    }
                    if f.is_wildcard() {
                        continue;
                    }
                    if open {
                        return Err(RuleError::NotTrieCompatible { rule: ri });
                    }
                    for (v, plen) in range_to_prefixes(lo, hi, f.width) {
                        let mut p = head.clone();
                        if plen > 0 {
                            p.push_bits(v >> (f.width - plen), plen as usize);
                        }
                        variants.push(p);
                    }
                    open = true;
                    head = BitPrefix::empty(); // consumed into variants
                }
            }
        }

        if variants.is_empty() {
            variants.push(head);
        }
        for prefix in variants {
            out.push(PrefixRule { prefix, action: rule.action, priority: rule.priority, order: ri as u32 });
        }
    }

    // duplicate prefixes: highest priority wins, then earliest rule
    out.sort_by(|a, b| {
        a.prefix
            .cmp(&b.prefix)
            .then(b.priority.cmp(&a.priority))
            .then(a.order.cmp(&b.order))
    });
    out.dedup_by(|b, a| a.prefix == b.prefix);
    Ok(out)
}

struct BNode {
    child: [Option<usize>; 2],
    action: Option<ActionRef>,
    rules_below: bool,
}

/// Leaf-pushes overlapping prefixes into a disjoint cover: after pruning, at
/// most one rule matches any key and it is the longest-prefix winner of the
/// input set. Disjoint inputs come back unchanged.
pub fn spine_prune(rules: &[PrefixRule]) -> Vec<PrefixRule> {
    let mut arena: Vec<BNode> = vec![BNode { child: [None, None], action: None, rules_below: false }];
    for r in rules {
        let mut at = 0usize;
        for i in 0..r.prefix.len() {
            let b = r.prefix.bit(i) as usize;
            if arena[at].child[b].is_none() {
                arena.push(BNode { child: [None, None], action: None, rules_below: false });
                let idx = arena.len() - 1;
                arena[at].child[b] = Some(idx);
            }
            at = arena[at].child[b].unwrap();
        }
        arena[at].action = Some(r.action);
    }

    // mark nodes with rules strictly below them (iterative post-order)
    fn mark(arena: &mut Vec<BNode>, at: usize) -> bool {
        let mut any = arena[at].action.is_some();
        for b in 0..2 {
            if let Some(c) = arena[at].child[b] {
                let below = mark(arena, c);
                arena[at].rules_below |= below;
            }
        }
        any |= arena[at].rules_below;
        any
    }
    mark(&mut arena, 0);

    let mut out = Vec::new();
    fn cover(arena: &Vec<BNode>, at: usize, prefix: BitPrefix, inherited: Option<ActionRef>, out: &mut Vec<PrefixRule>) {
        let inh = arena[at].action.or(inherited);
        if !arena[at].rules_below {
            if let Some(a) = inh {
                out.push(PrefixRule { prefix, action: a, priority: 0, order: 0 });
            }
            return;
        }
        for b in 0..2u8 {
            match arena[at].child[b as usize] {
                Some(c) => cover(arena, c, prefix.child(b), inh, out),
                None => {
                    if let Some(a) = inh {
                        out.push(PrefixRule { prefix: prefix.child(b), action: a, priority: 0, order: 0 });
                    }
                }
            }
        }
    }
    cover(&arena, 0, BitPrefix::empty(), None, &mut out);
    out
}

/// Longest-prefix-match reference over an arbitrary prefix rule set.
pub fn lpm_scan(rules: &[PrefixRule], key_bits: &BitPrefix) -> ActionRef {
    let mut best: Option<&PrefixRule> = None;
    'rule: for r in rules {
        if r.prefix.len() > key_bits.len() {
            continue;
        }
        for i in 0..r.prefix.len() {
            if r.prefix.bit(i) != key_bits.bit(i) {
                continue 'rule;
            }
        }
        let better = match best {
            None => true,
            Some(b) => {
                (r.prefix.len(), r.priority, core::cmp::Reverse(r.order))
                    > (b.prefix.len(), b.priority, core::cmp::Reverse(b.order))
            }
        };
        if better {
            best = Some(r);
        }
    }
    best.map(|r| r.action).unwrap_or(ActionRef::NOT_FOUND)
}
