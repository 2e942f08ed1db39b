//! Range coding of integer symbols under per-symbol frequency tables.
//!
//! A 32-bit range coder with byte-wise renormalization and carry
//! propagation. Frequency tables have a total of at most 2^16; the
//! per-element tables derived from discretized logistic PMFs always total
//! exactly 2^16 ([`QuantizedCdf`]).
//!
//! The first output byte of this family of coders is always zero and is not
//! stored. On finish, only as many bytes of the final `low` are written as
//! are needed to pin a value inside the final interval; the decoder reads
//! zeros past the end of its input. The encoded size therefore never drops
//! below the ideal code length and exceeds it by at most one byte plus the
//! range-truncation loss.

use crate::error::{Error, Result};
use crate::rpm::logistic_cdf;

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
const TOP: u32 = 1 << 24;

/// A frequency table over a contiguous symbol range.
pub trait SymbolModel {
    fn total(&self) -> u32;
    fn min_symbol(&self) -> i32;
    fn num_symbols(&self) -> usize;
    /// `(cumulative start, frequency)` of a symbol.
    fn interval(&self, symbol: i32) -> Result<(u32, u32)>;
    /// Symbol whose interval contains `target < total`, with its interval.
    fn lookup(&self, target: u32) -> (i32, u32, u32);

    fn max_symbol(&self) -> i32 {
        self.min_symbol() + self.num_symbols() as i32 - 1
    }
}

/// Cumulative integer frequencies totalling exactly 2^16, every symbol
/// having frequency at least 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    min_symbol: i32,
    cum: Vec<u32>,
}

impl QuantizedCdf {
    /// Quantize a probability vector: each frequency is `round(p * 2^16)`
    /// floored at 1; the rounding surplus or deficit is charged to the
    /// largest-frequency symbol.
    pub fn from_probs(min_symbol: i32, probs: &[f64]) -> Self {
        assert!(!probs.is_empty() && probs.len() <= (TOTAL / 2) as usize);
        let mut freq: Vec<i64> = probs
            .iter()
            .map(|&p| ((p.max(0.0) * TOTAL as f64).round() as i64).max(1))
            .collect();
        let mut diff = TOTAL as i64 - freq.iter().sum::<i64>();
        while diff != 0 {
            let (imax, &fmax) = freq
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("non-empty");
            let delta = if diff > 0 { diff } else { diff.max(1 - fmax) };
            freq[imax] += delta;
            diff -= delta;
        }
        let mut cum = Vec::with_capacity(freq.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for f in freq {
            acc += f as u32;
            cum.push(acc);
        }
        debug_assert_eq!(acc, TOTAL);
        Self { min_symbol, cum }
    }

    /// Discretized logistic over `[-bound, bound]`; the edge symbols absorb
    /// the tails.
    pub fn logistic(mu: f64, s: f64, bound: i32) -> Self {
        let n = (2 * bound + 1) as usize;
        let mut probs = Vec::with_capacity(n);
        let mut prev = 0.0;
        for k in 0..n {
            let upper = if k + 1 == n {
                1.0
            } else {
                logistic_cdf(-(bound as f64) + k as f64 + 0.5, mu, s)
            };
            probs.push(upper - prev);
            prev = upper;
        }
        Self::from_probs(-bound, &probs)
    }

    pub fn uniform(min_symbol: i32, n: usize) -> Self {
        Self::from_probs(min_symbol, &vec![1.0 / n as f64; n])
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    pub fn freq(&self, symbol: i32) -> Option<u32> {
        let i = symbol.checked_sub(self.min_symbol)?;
        if i < 0 || i as usize + 1 >= self.cum.len() {
            return None;
        }
        Some(self.cum[i as usize + 1] - self.cum[i as usize])
    }

    /// Code length in bits of `symbol` under this table.
    pub fn bits(&self, symbol: i32) -> Result<f64> {
        let (_, f) = self.interval(symbol)?;
        Ok(PRECISION_BITS as f64 - (f as f64).log2())
    }
}

impl SymbolModel for QuantizedCdf {
    fn total(&self) -> u32 {
        TOTAL
    }

    fn min_symbol(&self) -> i32 {
        self.min_symbol
    }

    fn num_symbols(&self) -> usize {
        self.cum.len() - 1
    }

    fn interval(&self, symbol: i32) -> Result<(u32, u32)> {
        let f = self.freq(symbol).ok_or(Error::Alphabet {
            symbol: symbol as i64,
            min: self.min_symbol as i64,
            max: self.max_symbol() as i64,
        })?;
        let i = (symbol - self.min_symbol) as usize;
        Ok((self.cum[i], f))
    }

    fn lookup(&self, target: u32) -> (i32, u32, u32) {
        // last index with cum[i] <= target
        let i = self.cum.partition_point(|&c| c <= target) - 1;
        (self.min_symbol + i as i32, self.cum[i], self.cum[i + 1] - self.cum[i])
    }
}

/// Adaptive frequency counts, updated identically on both sides after
/// every symbol. Total stays below 2^16 by halving.
#[derive(Clone, Debug)]
pub struct AdaptiveModel {
    min_symbol: i32,
    cum: Vec<u32>,
    increment: u32,
}

impl AdaptiveModel {
    pub fn new(min_symbol: i32, n: usize, increment: u32) -> Self {
        assert!(n >= 1 && (n as u32) * 2 < TOTAL);
        Self {
            min_symbol,
            cum: (0..=n as u32).collect(),
            increment,
        }
    }

    pub fn update(&mut self, symbol: i32) {
        let i = (symbol - self.min_symbol) as usize;
        for c in &mut self.cum[i + 1..] {
            *c += self.increment;
        }
        if *self.cum.last().expect("non-empty") > TOTAL - self.increment {
            let mut acc = 0;
            let mut prev = 0;
            for k in 1..self.cum.len() {
                let f = self.cum[k] - prev;
                prev = self.cum[k];
                acc += f.div_ceil(2);
                self.cum[k] = acc;
            }
        }
    }
}

impl SymbolModel for AdaptiveModel {
    fn total(&self) -> u32 {
        *self.cum.last().expect("non-empty")
    }

    fn min_symbol(&self) -> i32 {
        self.min_symbol
    }

    fn num_symbols(&self) -> usize {
        self.cum.len() - 1
    }

    fn interval(&self, symbol: i32) -> Result<(u32, u32)> {
        let i = symbol - self.min_symbol;
        if i < 0 || i as usize >= self.num_symbols() {
            return Err(Error::Alphabet {
                symbol: symbol as i64,
                min: self.min_symbol as i64,
                max: self.max_symbol() as i64,
            });
        }
        let i = i as usize;
        Ok((self.cum[i], self.cum[i + 1] - self.cum[i]))
    }

    fn lookup(&self, target: u32) -> (i32, u32, u32) {
        let i = self.cum.partition_point(|&c| c <= target) - 1;
        (self.min_symbol + i as i32, self.cum[i], self.cum[i + 1] - self.cum[i])
    }
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    skipped_lead: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            skipped_lead: false,
            out: Vec::new(),
        }
    }

    pub fn range(&self) -> u32 {
        self.range
    }

    fn emit(&mut self, b: u8) {
        if self.skipped_lead {
            self.out.push(b);
        } else {
            debug_assert_eq!(b, 0);
            self.skipped_lead = true;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn encode<M: SymbolModel + ?Sized>(&mut self, model: &M, symbol: i32) -> Result<()> {
        let (lo, f) = model.interval(symbol)?;
        let r = self.range / model.total();
        self.low += r as u64 * lo as u64;
        self.range = r * f;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        // Round low up to the coarsest grid point inside [low, low + range).
        let k = 31 - self.range.leading_zeros();
        let mask = (1u64 << k) - 1;
        self.low = (self.low + mask) & !mask;
        let needed = (32 - k).div_ceil(8) as usize;
        for _ in 0..5 {
            self.shift_low();
        }
        let zeros = 4 - needed;
        debug_assert!(self.out[self.out.len() - zeros..].iter().all(|&b| b == 0));
        self.out.truncate(self.out.len() - zeros);
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            data,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    pub fn range(&self) -> u32 {
        self.range
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode<M: SymbolModel + ?Sized>(&mut self, model: &M) -> Result<i32> {
        let r = self.range / model.total();
        let v = self.code / r;
        if v >= model.total() {
            return Err(Error::CorruptStream("code value outside the coding interval"));
        }
        let (sym, lo, f) = model.lookup(v);
        self.code -= r * lo;
        self.range = r * f;
        if self.code >= self.range {
            return Err(Error::CorruptStream("range invariant violated"));
        }
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
        Ok(sym)
    }

    /// Verify the whole input was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos < self.data.len() {
            return Err(Error::CorruptStream("trailing bytes after the last symbol"));
        }
        Ok(())
    }
}

pub fn encode(symbols: &[i32], cdfs: &[QuantizedCdf]) -> Result<Vec<u8>> {
    if symbols.len() != cdfs.len() {
        return Err(Error::Shape {
            op: "encode",
            detail: format!("{} symbols vs {} tables", symbols.len(), cdfs.len()),
        });
    }
    let mut enc = RangeEncoder::new();
    for (&s, c) in symbols.iter().zip(cdfs) {
        enc.encode(c, s)?;
    }
    Ok(enc.finish())
}

pub fn decode(bytes: &[u8], cdfs: &[QuantizedCdf]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes);
    let out = cdfs.iter().map(|c| dec.decode(c)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}

/// `sum -log2(freq / total)`: the length an ideal coder would need.
pub fn ideal_bits(symbols: &[i32], cdfs: &[QuantizedCdf]) -> Result<f64> {
    symbols.iter().zip(cdfs).map(|(&s, c)| c.bits(s)).sum()
}
