//! Length-limited canonical prefix codes over `u32` symbols.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use crate::bits::{BitReader, BitWriter};
use crate::error::{CodecError, Result};

pub(crate) const MAX_CODE_LEN: u8 = 24;

/// Code lengths for each symbol, sorted by symbol.
pub(crate) fn code_lengths(freqs: &BTreeMap<u32, u64>) -> Vec<(u32, u8)> {
    match freqs.len() {
        0 => return Vec::new(),
        1 => return vec![(*freqs.keys().next().expect("one symbol"), 1)],
        _ => {}
    }
    let mut weights: Vec<u64> = freqs.values().copied().collect();
    loop {
        let lengths = unlimited_lengths(&weights);
        if lengths.iter().all(|&l| l <= u32::from(MAX_CODE_LEN)) {
            return freqs
                .keys()
                .zip(lengths)
                .map(|(&s, l)| (s, l as u8))
                .collect();
        }
        // Flatten the distribution until the tree is shallow enough.
        for w in &mut weights {
            *w = (*w >> 1) | 1;
        }
    }
}

/// Plain Huffman tree depths. Ties are broken by node creation order so the
/// result depends only on the weights.
fn unlimited_lengths(weights: &[u64]) -> Vec<u32> {
    let n = weights.len();
    // parent links for leaves [0, n) and internal nodes [n, 2n - 1)
    let mut parent = vec![usize::MAX; 2 * n - 1];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| Reverse((w, i)))
        .collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().expect("two nodes");
        let Reverse((wb, b)) = heap.pop().expect("two nodes");
        parent[a] = next;
        parent[b] = next;
        heap.push(Reverse((wa.saturating_add(wb), next)));
        next += 1;
    }
    let root = next - 1;
    let mut depth = vec![0u32; 2 * n - 1];
    // internal nodes are created in increasing index order, so walk top-down
    for node in (0..root).rev() {
        depth[node] = depth[parent[node]] + 1;
    }
    depth.truncate(n);
    depth
}

/// Canonical code assignment: (length, symbol) order, consecutive code values.
fn canonical_order(table: &[(u32, u8)]) -> Vec<(u32, u8)> {
    let mut sorted = table.to_vec();
    sorted.sort_by_key(|&(s, l)| (l, s));
    sorted
}

pub(crate) struct Encoder {
    codes: BTreeMap<u32, (u64, u8)>,
}

impl Encoder {
    pub(crate) fn new(table: &[(u32, u8)]) -> Self {
        let mut codes = BTreeMap::new();
        let mut code = 0u64;
        let mut prev_len = 0u8;
        for (symbol, len) in canonical_order(table) {
            code <<= len - prev_len;
            codes.insert(symbol, (code, len));
            code += 1;
            prev_len = len;
        }
        Self { codes }
    }

    pub(crate) fn put(&self, w: &mut BitWriter, symbol: u32) {
        let (code, len) = self.codes[&symbol];
        w.write(code, u32::from(len));
    }
}

pub(crate) struct Decoder {
    /// Symbols in canonical order.
    symbols: Vec<u32>,
    /// Per length: (first code, number of codes, index of first symbol).
    by_len: Vec<(u64, u64, usize)>,
    max_len: u8,
}

impl Decoder {
    pub(crate) fn new(table: &[(u32, u8)]) -> Result<Self> {
        if table.is_empty() {
            return Ok(Self {
                symbols: Vec::new(),
                by_len: Vec::new(),
                max_len: 0,
            });
        }
        let max_len = table.iter().map(|&(_, l)| l).max().unwrap_or(0);
        if table.iter().any(|&(_, l)| l == 0 || l > MAX_CODE_LEN) {
            return Err(CodecError::format("code table", "code length out of range"));
        }
        // Kraft inequality guards against tables that would overflow the code space.
        let kraft: u128 = table
            .iter()
            .map(|&(_, l)| 1u128 << (MAX_CODE_LEN - l))
            .sum();
        if kraft > 1u128 << MAX_CODE_LEN {
            return Err(CodecError::format("code table", "oversubscribed prefix code"));
        }
        let sorted = canonical_order(table);
        let symbols: Vec<u32> = sorted.iter().map(|&(s, _)| s).collect();
        let mut by_len = vec![(0u64, 0u64, 0usize); usize::from(max_len) + 1];
        let mut code = 0u64;
        let mut idx = 0usize;
        for len in 1..=max_len {
            let count = sorted.iter().filter(|&&(_, l)| l == len).count() as u64;
            by_len[usize::from(len)] = (code, count, idx);
            code = (code + count) << 1;
            idx += count as usize;
        }
        Ok(Self {
            symbols,
            by_len,
            max_len,
        })
    }

    pub(crate) fn get(&self, r: &mut BitReader<'_>) -> Result<u32> {
        let mut code = 0u64;
        for len in 1..=self.max_len {
            code = (code << 1) | u64::from(r.read_bit()?);
            let (first, count, idx) = self.by_len[usize::from(len)];
            if code >= first && code - first < count {
                return Ok(self.symbols[idx + (code - first) as usize]);
            }
        }
        Err(CodecError::format("stream", "invalid prefix code"))
    }
}
