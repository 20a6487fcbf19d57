//! Multi-bit trie over a disjoint prefix rule set. Nodes are striped across
//! memory banks by level so independent lookups can overlap.

use alloc::vec;
use alloc::vec::Vec;

use super::rules::PrefixRule;
use crate::types::{ActionRef, Key};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Empty,
    Next(u32),
    Leaf(ActionRef),
}

#[derive(Debug, Clone)]
pub struct TrieNode {
    pub slots: Vec<Slot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrieError {
    InvalidStride,
    InvalidWidth,
    PrefixTooLong { rule: usize },
    /// Two rules claimed the same slot: the input set was not disjoint.
    SlotConflict { rule: usize },
}

impl core::fmt::Display for TrieError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrieError::InvalidStride => write!(f, "stride must be in 1..=16"),
            TrieError::InvalidWidth => write!(f, "key width must be at least one bit"),
            TrieError::PrefixTooLong { rule } => write!(f, "rule {rule}: prefix longer than the key"),
            TrieError::SlotConflict { rule } => write!(f, "rule {rule}: slot already taken (rules not disjoint)"),
        }
    }
}

/// Levels of nodes; `levels[0]` is the root level and always holds exactly
/// one node. Level l lives in bank `l % n_banks`.
#[derive(Debug, Clone)]
pub struct Trie {
    pub stride: usize,
    pub n_banks: usize,
    pub width_bits: usize,
    pub levels: Vec<Vec<TrieNode>>,
    /// Action of a lone zero-length rule; only set when the whole domain maps
    /// to one action.
    pub root_default: Option<ActionRef>,
}

impl Trie {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }
}

/// Builds the trie from a disjoint prefix set (the output of spine pruning).
pub fn build_trie(rules: &[PrefixRule], stride: usize, n_banks: usize, width_bits: usize) -> Result<Trie, TrieError> {
    if stride == 0 || stride > 16 {
        return Err(TrieError::InvalidStride);
    }
    if width_bits == 0 || n_banks == 0 {
        return Err(TrieError::InvalidWidth);
    }
    let depth = width_bits.div_ceil(stride);
    let fanout = 1usize << stride;
    let mut levels: Vec<Vec<TrieNode>> = vec![vec![TrieNode { slots: vec![Slot::Empty; fanout] }]];
    let mut root_default = None;

    for (ri, r) in rules.iter().enumerate() {
        let len = r.prefix.len();
        if len > width_bits {
            return Err(TrieError::PrefixTooLong { rule: ri });
        }
        if len == 0 {
            // disjointness leaves no room for anything else
            if rules.len() > 1 || root_default.is_some() {
                return Err(TrieError::SlotConflict { rule: ri });
            }
            root_default = Some(r.action);
            continue;
        }
        // walk full strides down to the level holding the terminal slots
        let term_level = (len - 1) / stride;
        let mut at = 0usize; // node index within its level
        for lvl in 0..term_level {
            let idx = r.prefix.chunk(lvl * stride, stride) as usize;
            at = match levels[lvl][at].slots[idx] {
                Slot::Next(n) => n as usize,
                Slot::Empty => {
                    if levels.len() == lvl + 1 {
                        levels.push(Vec::new());
                    }
                    levels[lvl + 1].push(TrieNode { slots: vec![Slot::Empty; fanout] });
                    let n = levels[lvl + 1].len() - 1;
                    levels[lvl][at].slots[idx] = Slot::Next(n as u32);
                    n
                }
                Slot::Leaf(_) => return Err(TrieError::SlotConflict { rule: ri }),
            };
        }
        // fill every terminal slot the prefix covers at this level
        let covered = term_level * stride;
        let spare = (term_level + 1) * stride - len; // bits free within the slot index
        let base = (r.prefix.chunk(covered, stride) >> spare << spare) as usize;
        for e in 0..(1usize << spare) {
            let slot = &mut levels[term_level][at].slots[base + e];
            match slot {
                Slot::Empty => *slot = Slot::Leaf(r.action),
                _ => return Err(TrieError::SlotConflict { rule: ri }),
            }
        }
    }

    // keep depth bounded by the key width even if all rules are short
    debug_assert!(levels.len() <= depth);
    Ok(Trie { stride, n_banks, width_bits, levels, root_default })
}

/// Walks the trie for `key`. Returns the action (NOT_FOUND when no rule
/// covers the key) and the ordered (bank, level) access trace; the root read
/// always happens, so the trace is never empty.
pub fn trie_lookup(trie: &Trie, key: &Key) -> (ActionRef, Vec<(usize, usize)>) {
    let mut trace = Vec::new();
    let mut at = 0usize;
    for lvl in 0..trie.levels.len() {
        trace.push((lvl % trie.n_banks, lvl));
        let idx = key.bits(lvl * trie.stride, trie.stride) as usize;
        match trie.levels[lvl][at].slots[idx] {
            Slot::Leaf(a) => return (a, trace),
            Slot::Next(n) => at = n as usize,
            Slot::Empty => return (trie.root_default.unwrap_or(ActionRef::NOT_FOUND), trace),
        }
    }
    (trie.root_default.unwrap_or(ActionRef::NOT_FOUND), trace)
}
