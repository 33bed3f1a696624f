//! Variable length coding of quantizer indices: histograms, canonical
//! Huffman codebooks, MSB-first bit packing and entropy bookkeeping.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::ByteReader;

/// Longest code the bit writer can emit in one call.
pub const MAX_CODE_LEN: usize = 64;
/// Width of the raw value that follows an escape code.
pub const ESCAPE_RAW_BITS: u32 = 32;
const MAX_SPAN: usize = 1 << 24;

#[derive(Debug, Error, PartialEq)]
pub enum VlcError {
    #[error("histogram has no nonzero counts")]
    EmptyHistogram,
    #[error("symbol range too wide: {0} slots")]
    SpanTooWide(u64),
    #[error("symbol {0} has no code and the codebook has no escape")]
    SymbolNotCoded(i32),
    #[error("bit stream exhausted at bit {0}")]
    StreamExhausted(u64),
    #[error("nonzero padding bits after payload")]
    NonZeroPadding,
    #[error("{0} unread bits after payload")]
    TrailingData(u64),
    #[error("bit pattern does not match any code")]
    InvalidCode,
    #[error("code length {0} exceeds {MAX_CODE_LEN} bits")]
    CodeTooLong(usize),
    #[error("malformed codebook: {0}")]
    BadCodebook(String),
}

/// Packed bits, most significant bit of each byte first; unused trailing
/// bits of the last byte are zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BitStream {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitStream {
    /// Wraps stored payload bytes; every bit counts as present.
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let bit_len = 8 * bytes.len() as u64;
        Self { bytes, bit_len }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn bit_len(&self) -> u64 {
        self.bit_len
    }

    pub fn is_empty(&self) -> bool {
        self.bit_len == 0
    }
}

#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bit_len(&self) -> u64 {
        self.bit_len
    }

    /// Appends the low `len` bits of `value`, most significant first.
    pub fn write_bits(&mut self, value: u64, len: u32) {
        debug_assert!(len as usize <= MAX_CODE_LEN);
        for i in (0..len).rev() {
            let bit = (value >> i) & 1;
            let used = (self.bit_len % 8) as u32;
            if used == 0 {
                self.bytes.push(0);
            }
            if bit == 1 {
                *self.bytes.last_mut().expect("byte pushed") |= 0x80 >> used;
            }
            self.bit_len += 1;
        }
    }

    pub fn finish(self) -> BitStream {
        BitStream { bytes: self.bytes, bit_len: self.bit_len }
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    bit_len: u64,
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(stream: &'a BitStream) -> Self {
        Self { bytes: &stream.bytes, bit_len: stream.bit_len, pos: 0 }
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    #[inline]
    pub fn read_bit(&mut self) -> Result<u64, VlcError> {
        if self.pos >= self.bit_len {
            return Err(VlcError::StreamExhausted(self.pos));
        }
        let byte = self.bytes[(self.pos / 8) as usize];
        let bit = (byte >> (7 - (self.pos % 8))) & 1;
        self.pos += 1;
        Ok(bit as u64)
    }

    pub fn read_bits(&mut self, len: u32) -> Result<u64, VlcError> {
        let mut v = 0u64;
        for _ in 0..len {
            v = (v << 1) | self.read_bit()?;
        }
        Ok(v)
    }

    /// Checks that only zero padding up to the next byte boundary remains.
    pub fn finish(self) -> Result<(), VlcError> {
        let padded_end = self.pos.div_ceil(8) * 8;
        if self.bit_len > padded_end {
            return Err(VlcError::TrailingData(self.bit_len - self.pos));
        }
        let mut pos = self.pos;
        while pos < self.bit_len {
            let byte = self.bytes[(pos / 8) as usize];
            if (byte >> (7 - (pos % 8))) & 1 != 0 {
                return Err(VlcError::NonZeroPadding);
            }
            pos += 1;
        }
        Ok(())
    }
}

/// Counts of integer symbols over a contiguous range `[min, min + len)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolHistogram {
    min: i32,
    counts: Vec<u64>,
}

impl SymbolHistogram {
    pub fn from_counts(min: i32, counts: Vec<u64>) -> Result<Self, VlcError> {
        if counts.iter().all(|&c| c == 0) {
            return Err(VlcError::EmptyHistogram);
        }
        if counts.len() > MAX_SPAN || (min as i64) + counts.len() as i64 - 1 > i32::MAX as i64 {
            return Err(VlcError::SpanTooWide(counts.len() as u64));
        }
        Ok(Self { min, counts })
    }

    pub fn from_symbols(symbols: &[i32]) -> Result<Self, VlcError> {
        let (Some(&lo), Some(&hi)) = (symbols.iter().min(), symbols.iter().max()) else {
            return Err(VlcError::EmptyHistogram);
        };
        let span = (hi as i64 - lo as i64 + 1) as u64;
        if span as usize > MAX_SPAN {
            return Err(VlcError::SpanTooWide(span));
        }
        let mut counts = vec![0u64; span as usize];
        for &s in symbols {
            counts[(s as i64 - lo as i64) as usize] += 1;
        }
        Ok(Self { min: lo, counts })
    }

    pub fn min_symbol(&self) -> i32 {
        self.min
    }

    pub fn max_symbol(&self) -> i32 {
        self.min + self.counts.len() as i32 - 1
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, symbol: i32) -> u64 {
        let i = symbol as i64 - self.min as i64;
        if i < 0 {
            return 0;
        }
        self.counts.get(i as usize).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(symbol, count)` for every nonzero count.
    pub fn iter(&self) -> impl Iterator<Item = (i32, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(move |(i, &c)| (self.min + i as i32, c))
    }
}

/// `−Σ p log2 p` in bits per symbol.
pub fn entropy(h: &SymbolHistogram) -> f64 {
    let total = h.total() as f64;
    h.iter()
        .map(|(_, c)| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

/// Canonical prefix code over a symbol range, with an optional escape code
/// for symbols outside it.
///
/// Only code lengths are stored; codes are assigned in `(length, slot)`
/// order where the escape occupies the slot after the last symbol. A code
/// with exactly one entry uses length 0 and emits no bits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StoredLengths", into = "StoredLengths")]
pub struct HuffmanCodebook {
    min: i32,
    lengths: Vec<u8>,
    escape_len: u8,
    codes: Vec<u64>,
    escape_code: u64,
    // canonical decode tables, indexed by code length
    sorted_slots: Vec<usize>,
    first_code: Vec<u64>,
    first_index: Vec<usize>,
    len_count: Vec<usize>,
}

impl HuffmanCodebook {
    /// Rebuilds the canonical code from stored lengths.
    pub fn from_lengths(min: i32, lengths: Vec<u8>, escape_len: u8) -> Result<Self, VlcError> {
        if lengths.len() > MAX_SPAN {
            return Err(VlcError::SpanTooWide(lengths.len() as u64));
        }
        let span = lengths.len();
        let all: Vec<u8> = lengths.iter().copied().chain([escape_len]).collect();
        let slot_len = |s: usize| all[s];
        let coded: Vec<usize> = (0..=span).filter(|&s| slot_len(s) > 0).collect();
        let max_len = coded.iter().map(|&s| slot_len(s) as usize).max().unwrap_or(0);
        if max_len > MAX_CODE_LEN {
            return Err(VlcError::CodeTooLong(max_len));
        }

        let mut cb = Self {
            min,
            lengths,
            escape_len,
            codes: vec![0; span],
            escape_code: 0,
            sorted_slots: Vec::new(),
            first_code: vec![0; max_len + 1],
            first_index: vec![0; max_len + 1],
            len_count: vec![0; max_len + 1],
        };

        if coded.is_empty() {
            // a lone symbol is represented by `single`, not by lengths
            return Err(VlcError::BadCodebook("no coded symbols".into()));
        }
        let kraft: u128 = coded.iter().map(|&s| 1u128 << (max_len - slot_len(s) as usize)).sum();
        if kraft != 1u128 << max_len || coded.len() < 2 {
            return Err(VlcError::BadCodebook("code lengths do not form a complete prefix code".into()));
        }

        let mut order = coded;
        order.sort_by_key(|&s| (slot_len(s), s));
        let mut code = 0u64;
        let mut prev = slot_len(order[0]) as usize;
        for (idx, &s) in order.iter().enumerate() {
            let l = slot_len(s) as usize;
            code <<= l - prev;
            prev = l;
            if cb.len_count[l] == 0 {
                cb.first_code[l] = code;
                cb.first_index[l] = idx;
            }
            cb.len_count[l] += 1;
            if s == span {
                cb.escape_code = code;
            } else {
                cb.codes[s] = code;
            }
            code += 1;
        }
        cb.sorted_slots = order;
        Ok(cb)
    }

    /// Codebook whose only entry is `symbol`, coded with zero bits.
    pub fn single(symbol: i32) -> Self {
        Self {
            min: symbol,
            lengths: vec![0],
            escape_len: 0,
            codes: vec![0],
            escape_code: 0,
            sorted_slots: vec![0],
            first_code: vec![0],
            first_index: vec![0],
            len_count: vec![1],
        }
    }

    pub fn is_single(&self) -> bool {
        self.sorted_slots.len() == 1
    }

    pub fn min_symbol(&self) -> i32 {
        self.min
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    pub fn escape_len(&self) -> u8 {
        self.escape_len
    }

    pub fn has_escape(&self) -> bool {
        self.escape_len > 0
    }

    fn slot(&self, symbol: i32) -> Option<usize> {
        let i = symbol as i64 - self.min as i64;
        (i >= 0 && (i as usize) < self.lengths.len()).then_some(i as usize)
    }

    /// Code length for `symbol` if it has its own code.
    pub fn len_of(&self, symbol: i32) -> Option<u8> {
        let s = self.slot(symbol)?;
        if self.is_single() {
            return Some(0);
        }
        let l = self.lengths[s];
        (l > 0).then_some(l)
    }

    /// `(code, length)` of a symbol with its own code.
    pub fn code_of(&self, symbol: i32) -> Option<(u64, u8)> {
        let s = self.slot(symbol)?;
        self.len_of(symbol).map(|l| (self.codes[s], l))
    }

    /// Bits `symbol` costs, including escape overhead.
    pub fn cost(&self, symbol: i32) -> Option<u64> {
        match self.len_of(symbol) {
            Some(l) => Some(l as u64),
            None if self.has_escape() => Some(self.escape_len as u64 + ESCAPE_RAW_BITS as u64),
            None => None,
        }
    }

    pub fn encode_symbol(&self, w: &mut BitWriter, symbol: i32) -> Result<(), VlcError> {
        if let Some((code, len)) = self.code_of(symbol) {
            w.write_bits(code, len as u32);
            return Ok(());
        }
        if !self.has_escape() {
            return Err(VlcError::SymbolNotCoded(symbol));
        }
        w.write_bits(self.escape_code, self.escape_len as u32);
        w.write_bits(symbol as u32 as u64, ESCAPE_RAW_BITS);
        Ok(())
    }

    pub fn decode_symbol(&self, r: &mut BitReader<'_>) -> Result<i32, VlcError> {
        if self.is_single() {
            return Ok(self.min + self.sorted_slots[0] as i32);
        }
        let mut code = 0u64;
        for l in 1..self.len_count.len() {
            code = (code << 1) | r.read_bit()?;
            let n = self.len_count[l];
            if n > 0 && code >= self.first_code[l] && code - self.first_code[l] < n as u64 {
                let slot = self.sorted_slots[self.first_index[l] + (code - self.first_code[l]) as usize];
                if slot == self.lengths.len() {
                    return Ok(r.read_bits(ESCAPE_RAW_BITS)? as u32 as i32);
                }
                return Ok(self.min + slot as i32);
            }
        }
        Err(VlcError::InvalidCode)
    }

    /// Wire form: u32 min symbol, u32 slot count, one length byte per slot,
    /// then the escape length byte. Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.lengths.len());
        self.write_to(&mut out);
        out
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.min as u32).to_le_bytes());
        out.extend_from_slice(&(self.lengths.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.lengths);
        out.push(self.escape_len);
    }

    pub fn wire_len(&self) -> usize {
        9 + self.lengths.len()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VlcError> {
        let mut r = ByteReader::new(bytes);
        let cb = Self::read_from(&mut r)?;
        if r.remaining() != 0 {
            return Err(VlcError::BadCodebook(format!("{} trailing bytes", r.remaining())));
        }
        Ok(cb)
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>) -> Result<Self, VlcError> {
        let short = || VlcError::BadCodebook("truncated codebook".into());
        let min = r.u32().ok_or_else(short)? as i32;
        let span = r.u32().ok_or_else(short)? as usize;
        if span > MAX_SPAN {
            return Err(VlcError::SpanTooWide(span as u64));
        }
        let lengths = r.take(span).ok_or_else(short)?.to_vec();
        let escape_len = r.u8().ok_or_else(short)?;
        Self::try_from(StoredLengths { min, lengths, escape_len })
    }
}

/// Serialized form of a codebook: the lengths alone determine it.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredLengths {
    min: i32,
    lengths: Vec<u8>,
    escape_len: u8,
}

impl From<HuffmanCodebook> for StoredLengths {
    fn from(cb: HuffmanCodebook) -> Self {
        Self { min: cb.min, lengths: cb.lengths, escape_len: cb.escape_len }
    }
}

impl TryFrom<StoredLengths> for HuffmanCodebook {
    type Error = VlcError;

    fn try_from(s: StoredLengths) -> Result<Self, Self::Error> {
        if s.lengths == [0] && s.escape_len == 0 {
            return Ok(Self::single(s.min));
        }
        Self::from_lengths(s.min, s.lengths, s.escape_len)
    }
}

/// Optimal code lengths for `weights` (zero weight → uncoded). Heap ties
/// break on `(weight, node id)` with leaves numbered by slot.
fn huffman_lengths(weights: &[u64]) -> Result<Vec<u8>, VlcError> {
    let leaves: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0).collect();
    let mut lengths = vec![0u8; weights.len()];
    if leaves.len() < 2 {
        return Ok(lengths);
    }
    let mut parent = vec![usize::MAX; weights.len() + leaves.len()];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = leaves.iter().map(|&i| Reverse((weights[i], i))).collect();
    let mut next = weights.len();
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().expect("two nodes");
        let Reverse((wb, b)) = heap.pop().expect("two nodes");
        parent[a] = next;
        parent[b] = next;
        heap.push(Reverse((wa + wb, next)));
        next += 1;
    }
    for &leaf in &leaves {
        let mut depth = 0usize;
        let mut node = leaf;
        while parent[node] != usize::MAX {
            node = parent[node];
            depth += 1;
        }
        if depth > MAX_CODE_LEN {
            return Err(VlcError::CodeTooLong(depth));
        }
        lengths[leaf] = depth as u8;
    }
    Ok(lengths)
}

/// Huffman codebook over the symbols present in `h`.
pub fn build_codebook(h: &SymbolHistogram) -> Result<HuffmanCodebook, VlcError> {
    let present: Vec<(i32, u64)> = h.iter().collect();
    match present.as_slice() {
        [] => Err(VlcError::EmptyHistogram),
        [(s, _)] => Ok(HuffmanCodebook::single(*s)),
        _ => {
            let lengths = huffman_lengths(h.counts())?;
            HuffmanCodebook::from_lengths(h.min_symbol(), lengths, 0)
        }
    }
}

/// Huffman codebook over `h` plus an escape entry weighted as one
/// occurrence, so symbols never seen in `h` remain encodable.
pub fn build_codebook_with_escape(h: &SymbolHistogram) -> Result<HuffmanCodebook, VlcError> {
    if h.total() == 0 {
        return Err(VlcError::EmptyHistogram);
    }
    let mut weights = h.counts().to_vec();
    weights.push(1);
    let mut lengths = huffman_lengths(&weights)?;
    let escape_len = lengths.pop().expect("escape slot");
    HuffmanCodebook::from_lengths(h.min_symbol(), lengths, escape_len)
}

pub fn encode(symbols: &[i32], codebook: &HuffmanCodebook) -> Result<BitStream, VlcError> {
    let mut w = BitWriter::new();
    for &s in symbols {
        codebook.encode_symbol(&mut w, s)?;
    }
    Ok(w.finish())
}

pub fn decode(stream: &BitStream, codebook: &HuffmanCodebook, count: usize) -> Result<Vec<i32>, VlcError> {
    let mut r = BitReader::new(stream);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(codebook.decode_symbol(&mut r)?);
    }
    r.finish()?;
    Ok(out)
}

/// Expected code length `Σ p_s·len_s` of `h` under `codebook`, counting
/// escapes at their full cost.
pub fn average_rate(codebook: &HuffmanCodebook, h: &SymbolHistogram) -> Result<f64, VlcError> {
    let total = h.total() as f64;
    let mut bits = 0.0;
    for (s, c) in h.iter() {
        let cost = codebook.cost(s).ok_or(VlcError::SymbolNotCoded(s))?;
        bits += c as f64 * cost as f64;
    }
    Ok(bits / total)
}

/// Code-length profile of a codebook's symbol entries (escape excluded).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeBalance {
    pub max_len: u8,
    pub min_len: u8,
    /// code length → number of symbols with that length
    pub length_histogram: BTreeMap<u8, usize>,
}

impl TreeBalance {
    pub fn spread(&self) -> u8 {
        self.max_len - self.min_len
    }
}

pub fn tree_balance(codebook: &HuffmanCodebook) -> TreeBalance {
    let mut length_histogram = BTreeMap::new();
    if codebook.is_single() {
        length_histogram.insert(0, 1);
    } else {
        for &l in codebook.lengths().iter().filter(|&&l| l > 0) {
            *length_histogram.entry(l).or_insert(0) += 1;
        }
    }
    let max_len = length_histogram.keys().next_back().copied().unwrap_or(0);
    let min_len = length_histogram.keys().next().copied().unwrap_or(0);
    TreeBalance { max_len, min_len, length_histogram }
}
