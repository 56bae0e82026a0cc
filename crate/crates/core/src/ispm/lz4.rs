//! LZ4 block format (no frame header), safe Rust.
//!
//! A block is a run of sequences. Each sequence is a token (literal length
//! in the high nibble, match length minus 4 in the low nibble), optional
//! 255-run length extensions, the literals, a little-endian u16 offset and
//! an optional match length extension. The final sequence carries literals
//! only. Encoders must leave the last 5 bytes as literals and start no
//! match within the last 12 bytes.

use std::fmt;

const MIN_MATCH: usize = 4;
const LAST_LITERALS: usize = 5;
const MF_LIMIT: usize = 12;
const MAX_OFFSET: usize = u16::MAX as usize;
const HASH_LOG: u32 = 14;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lz4Error(pub String);

impl fmt::Display for Lz4Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Lz4Error {}

/// Upper bound on the encoded size of `n` input bytes.
pub fn max_compressed_len(n: usize) -> usize {
    n + n / 255 + 16
}

#[inline]
fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

#[inline]
fn hash(seq: u32) -> usize {
    (seq.wrapping_mul(2_654_435_761) >> (32 - HASH_LOG)) as usize
}

fn push_length(out: &mut Vec<u8>, mut extra: usize) {
    while extra >= 255 {
        out.push(255);
        extra -= 255;
    }
    out.push(extra as u8);
}

fn emit_sequence(out: &mut Vec<u8>, literals: &[u8], offset: usize, match_len: usize) {
    let lit = literals.len();
    let ml = match_len - MIN_MATCH;
    let token = ((lit.min(15) as u8) << 4) | ml.min(15) as u8;
    out.push(token);
    if lit >= 15 {
        push_length(out, lit - 15);
    }
    out.extend_from_slice(literals);
    out.extend_from_slice(&(offset as u16).to_le_bytes());
    if ml >= 15 {
        push_length(out, ml - 15);
    }
}

fn emit_last_literals(out: &mut Vec<u8>, literals: &[u8]) {
    let lit = literals.len();
    out.push((lit.min(15) as u8) << 4);
    if lit >= 15 {
        push_length(out, lit - 15);
    }
    out.extend_from_slice(literals);
}

/// Number of earlier positions examined per match search.
const SEARCH_DEPTH: usize = 64;
const WINDOW: usize = 1 << 16;

struct MatchFinder<'a> {
    input: &'a [u8],
    head: Vec<u32>,
    chain: Vec<u32>,
    next_insert: usize,
}

impl<'a> MatchFinder<'a> {
    fn new(input: &'a [u8]) -> Self {
        Self {
            input,
            head: vec![0; 1 << HASH_LOG],
            chain: vec![0; WINDOW],
            next_insert: 0,
        }
    }

    /// Inserts every position below `pos` not yet in the chains.
    fn insert_until(&mut self, pos: usize) {
        while self.next_insert < pos {
            let p = self.next_insert;
            let slot = hash(read_u32(self.input, p));
            self.chain[p % WINDOW] = self.head[slot];
            self.head[slot] = p as u32 + 1;
            self.next_insert += 1;
        }
    }

    /// Longest match for `pos` ending no later than `end_limit`.
    fn longest(&mut self, pos: usize, end_limit: usize) -> Option<(usize, usize)> {
        self.insert_until(pos);
        let input = self.input;
        let seq = read_u32(input, pos);
        let mut best: Option<(usize, usize)> = None;
        let mut link = self.head[hash(seq)] as usize;
        for _ in 0..SEARCH_DEPTH {
            if link == 0 {
                break;
            }
            let cand = link - 1;
            if pos - cand > MAX_OFFSET {
                break;
            }
            if read_u32(input, cand) == seq {
                let mut len = MIN_MATCH;
                while pos + len < end_limit && input[cand + len] == input[pos + len] {
                    len += 1;
                }
                if best.is_none_or(|(l, _)| len > l) {
                    best = Some((len, cand));
                    if pos + len >= end_limit {
                        break;
                    }
                }
            }
            let next = self.chain[cand % WINDOW] as usize;
            if next == 0 || next > cand {
                break;
            }
            link = next;
        }
        best
    }
}

/// Hash-chain encoder with one step of lazy matching.
pub fn compress(input: &[u8]) -> Vec<u8> {
    let n = input.len();
    let mut out = Vec::with_capacity(max_compressed_len(n));
    if n < MF_LIMIT + 1 {
        emit_last_literals(&mut out, input);
        return out;
    }
    let match_start_limit = n - MF_LIMIT;
    let match_end_limit = n - LAST_LITERALS;
    let mut finder = MatchFinder::new(input);
    let mut anchor = 0usize;
    let mut pos = 0usize;

    while pos < match_start_limit {
        let Some((mut len, mut cand)) = finder.longest(pos, match_end_limit) else {
            pos += 1;
            continue;
        };
        let mut start = pos;
        // Defer by one byte when the next position matches further.
        if pos + 1 < match_start_limit {
            if let Some((next_len, next_cand)) = finder.longest(pos + 1, match_end_limit) {
                if next_len > len {
                    start = pos + 1;
                    len = next_len;
                    cand = next_cand;
                }
            }
        }
        while start > anchor && cand > 0 && input[start - 1] == input[cand - 1] {
            start -= 1;
            cand -= 1;
            len += 1;
        }
        emit_sequence(&mut out, &input[anchor..start], start - cand, len);
        pos = start + len;
        anchor = pos;
    }
    emit_last_literals(&mut out, &input[anchor..]);
    out
}

fn read_length(input: &[u8], ip: &mut usize, mut len: usize) -> Result<usize, Lz4Error> {
    loop {
        let b = *input
            .get(*ip)
            .ok_or_else(|| Lz4Error("truncated length extension".into()))?;
        *ip += 1;
        len = len
            .checked_add(b as usize)
            .ok_or_else(|| Lz4Error("length overflow".into()))?;
        if b != 255 {
            return Ok(len);
        }
    }
}

/// Decodes one block whose decompressed size is exactly `raw_len`.
pub fn decompress(input: &[u8], raw_len: usize) -> Result<Vec<u8>, Lz4Error> {
    let mut out: Vec<u8> = Vec::with_capacity(raw_len);
    if input.is_empty() {
        return if raw_len == 0 {
            Ok(out)
        } else {
            Err(Lz4Error("empty block".into()))
        };
    }
    let mut ip = 0usize;
    loop {
        let token = *input
            .get(ip)
            .ok_or_else(|| Lz4Error("missing sequence token".into()))?;
        ip += 1;

        let mut lit = (token >> 4) as usize;
        if lit == 15 {
            lit = read_length(input, &mut ip, lit)?;
        }
        let lit_end = ip
            .checked_add(lit)
            .filter(|&e| e <= input.len())
            .ok_or_else(|| Lz4Error("literals run past the block".into()))?;
        if out.len() + lit > raw_len {
            return Err(Lz4Error("literals overflow the declared size".into()));
        }
        out.extend_from_slice(&input[ip..lit_end]);
        ip = lit_end;

        if ip == input.len() {
            break;
        }
        if ip + 2 > input.len() {
            return Err(Lz4Error("truncated match offset".into()));
        }
        let offset = u16::from_le_bytes([input[ip], input[ip + 1]]) as usize;
        ip += 2;
        if offset == 0 || offset > out.len() {
            return Err(Lz4Error(format!("match offset {offset} outside the output window")));
        }
        let mut len = (token & 15) as usize;
        if len == 15 {
            len = read_length(input, &mut ip, len)?;
        }
        len += MIN_MATCH;
        if out.len() + len > raw_len {
            return Err(Lz4Error("match overflows the declared size".into()));
        }
        let from = out.len() - offset;
        if offset >= len {
            out.extend_from_within(from..from + len);
        } else {
            for k in 0..len {
                let b = out[from + k];
                out.push(b);
            }
        }
    }
    if out.len() != raw_len {
        return Err(Lz4Error(format!(
            "block decodes to {} bytes, expected {raw_len}",
            out.len()
        )));
    }
    Ok(out)
}
