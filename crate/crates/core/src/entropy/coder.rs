//! Byte-oriented range coder with 16-bit frequency tables.
//!
//! Carry propagation follows the cache/cache_size scheme of LZMA, so the
//! encoder never revisits bytes already emitted.

use super::gaussian::gaussian_mass;
use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
const TOTAL: u32 = 1 << PROB_BITS;
/// Symbols in `[-TAIL, TAIL]` are coded directly; larger magnitudes escape.
pub const TAIL: i32 = 64;
/// Direct symbols plus the escape symbol.
pub const ALPHABET: usize = 2 * TAIL as usize + 2;
const ESCAPE: usize = ALPHABET - 1;
const TOP: u32 = 1 << 24;
/// Magnitudes at or above this cannot be represented.
const MAX_MAGNITUDE: u32 = 1 << 16;

/// Cumulative frequencies of the coder alphabet; every symbol has mass ≥ 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    cum: [u32; ALPHABET + 1],
}

impl FreqTable {
    /// `probs` covers `[-TAIL, TAIL]` in order; `escape` is the remaining tail mass.
    pub fn from_probs(probs: &[f64], escape: f64) -> Result<Self> {
        assert_eq!(probs.len(), ALPHABET - 1, "probability table length");
        let spare = (TOTAL - ALPHABET as u32) as f64;
        let mut freq = [0i64; ALPHABET];
        for (i, &p) in probs.iter().chain(std::iter::once(&escape)).enumerate() {
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::Model(format!("probability table entry {i} is {p}")));
            }
            freq[i] = 1 + (p * spare).floor() as i64;
        }
        let rest = TOTAL as i64 - freq.iter().sum::<i64>();
        let top = (0..ALPHABET).max_by(|&a, &b| freq[a].cmp(&freq[b]).then(b.cmp(&a))).unwrap();
        freq[top] += rest;
        if freq[top] < 1 {
            return Err(Error::Model("probability table does not sum to one".into()));
        }
        let mut cum = [0u32; ALPHABET + 1];
        for i in 0..ALPHABET {
            cum[i + 1] = cum[i] + freq[i] as u32;
        }
        debug_assert_eq!(cum[ALPHABET], TOTAL);
        Ok(FreqTable { cum })
    }

    /// Discretised zero-mean Gaussian over the integer residuals.
    pub fn gaussian(sigma: f64) -> Self {
        let mut probs = [0.0; ALPHABET - 1];
        for k in 0..=TAIL {
            let p = gaussian_mass(k as f64, sigma);
            probs[(TAIL + k) as usize] = p;
            probs[(TAIL - k) as usize] = p;
        }
        // both tails beyond ±(TAIL + 1/2)
        let escape = libm::erfc((TAIL as f64 + 0.5) / sigma * std::f64::consts::FRAC_1_SQRT_2);
        Self::from_probs(&probs, escape).expect("gaussian table is well formed")
    }

    /// `(start, size)` of alphabet index `s`.
    pub fn range_of(&self, s: usize) -> (u32, u32) {
        (self.cum[s], self.cum[s + 1] - self.cum[s])
    }

    pub fn freq(&self, symbol: i32) -> u32 {
        self.range_of((symbol + TAIL) as usize).1
    }

    fn find(&self, target: u32) -> usize {
        // largest s with cum[s] <= target
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Monotone cumulative table, ending at `2^PROB_BITS`.
    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }
}

/// Supplies the table for each position of a stream.
pub trait SymbolModel {
    fn table(&self, index: usize) -> FreqTable;
}

/// Gaussian residual tables, one scale per symbol.
pub struct GaussianModel {
    pub sigmas: Vec<f64>,
}

impl SymbolModel for GaussianModel {
    fn table(&self, index: usize) -> FreqTable {
        FreqTable::gaussian(self.sigmas[index])
    }
}

/// One table per channel; symbols are laid out channel-major with `plane` per channel.
pub struct FactorizedModel {
    tables: Vec<FreqTable>,
    plane: usize,
}

impl FactorizedModel {
    pub fn new(probs: &[Vec<f64>], plane: usize) -> Result<Self> {
        let tables = probs.iter().map(|p| FreqTable::from_probs(p, 0.0)).collect::<Result<_>>()?;
        Ok(FactorizedModel { tables, plane: plane.max(1) })
    }
}

impl SymbolModel for FactorizedModel {
    fn table(&self, index: usize) -> FreqTable {
        self.tables[index / self.plane].clone()
    }
}

struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Encoder {
    fn new() -> Self {
        Encoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn encode(&mut self, start: u32, size: u32) {
        let r = self.range >> PROB_BITS;
        self.low += start as u64 * r as u64;
        self.range = size * r;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn encode_bit(&mut self, bit: bool) {
        let half = TOTAL / 2;
        self.encode(if bit { half } else { 0 }, half);
    }

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

struct Decoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = Decoder { code: 0, range: u32::MAX, input, pos: 0 };
        d.next_byte()?;
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::Integrity(format!("range decoder read past the end of a {}-byte stream", self.input.len())))?;
        self.pos += 1;
        Ok(b)
    }

    fn decode(&mut self, table: &FreqTable) -> Result<usize> {
        let r = self.range >> PROB_BITS;
        let target = self.code / r;
        if target >= TOTAL {
            return Err(Error::Integrity("range decoder state diverged".into()));
        }
        let s = table.find(target);
        let (start, size) = table.range_of(s);
        self.code -= start * r;
        self.range = size * r;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(s)
    }

    fn decode_bit(&mut self) -> Result<bool> {
        let r = self.range >> PROB_BITS;
        let target = self.code / r;
        if target >= TOTAL {
            return Err(Error::Integrity("range decoder state diverged".into()));
        }
        let bit = target >= TOTAL / 2;
        let half = TOTAL / 2;
        self.code -= if bit { half * r } else { 0 };
        self.range = half * r;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(bit)
    }
}

/// Codes `symbols[i]` with `model.table(i)`. Magnitudes above [`TAIL`] are sent as an
/// escape, a sign bit and an Elias-gamma code of `|s| - TAIL`.
pub fn encode_stream(symbols: &[i32], model: &dyn SymbolModel) -> Result<Vec<u8>> {
    let mut enc = Encoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let table = model.table(i);
        if s.abs() <= TAIL {
            let (start, size) = table.range_of((s + TAIL) as usize);
            enc.encode(start, size);
            continue;
        }
        let mag = s.unsigned_abs();
        if mag >= MAX_MAGNITUDE {
            return Err(Error::Input(format!("symbol {s} at position {i} exceeds the coder range")));
        }
        let (start, size) = table.range_of(ESCAPE);
        enc.encode(start, size);
        enc.encode_bit(s < 0);
        let n = mag - TAIL as u32;
        let len = 31 - n.leading_zeros();
        for _ in 0..len {
            enc.encode_bit(false);
        }
        for b in (0..=len).rev() {
            enc.encode_bit((n >> b) & 1 == 1);
        }
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_stream`] for `count` symbols.
pub fn decode_stream(bytes: &[u8], count: usize, model: &dyn SymbolModel) -> Result<Vec<i32>> {
    let mut dec = Decoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let table = model.table(i);
        let s = dec.decode(&table)?;
        if s != ESCAPE {
            out.push(s as i32 - TAIL);
            continue;
        }
        let negative = dec.decode_bit()?;
        let mut len = 0;
        while !dec.decode_bit()? {
            len += 1;
            if len > 16 {
                return Err(Error::Integrity(format!("escape code too long at symbol {i}")));
            }
        }
        let mut n = 1u32;
        for _ in 0..len {
            n = (n << 1) | dec.decode_bit()? as u32;
        }
        let mag = n + TAIL as u32;
        if mag >= MAX_MAGNITUDE {
            return Err(Error::Integrity(format!("escaped magnitude {mag} at symbol {i} is out of range")));
        }
        out.push(if negative { -(mag as i32) } else { mag as i32 });
    }
    Ok(out)
}
