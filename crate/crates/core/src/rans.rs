//! Range asymmetric numeral system coder over 16-bit quantized CDF tables.
//!
//! State is 32 bits and is kept in `[L, 256 L)` with `L = 2^23`;
//! renormalisation moves whole bytes. Symbols outside a table's support go
//! through an escape bucket at either end followed by an order-0
//! Exp-Golomb code of the overshoot, written as uniform bypass operations.
//!
//! Stream layout: payload bytes, read front to back by the decoder, then the
//! encoder's final state as a 4-byte little-endian word. The encoder starts
//! from `L` plus a 23-bit checksum of the symbols; a correct decode consumes
//! the whole payload and ends in exactly that state.

use std::sync::OnceLock;

use crate::error::{DcaeError, Result};
use crate::kernels::{normal_cdf, sigmoid};

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
const RANS_L: u32 = 1 << 23;

const CHECK_SEED: u32 = 0x2545_f491;

/// Running checksum of the coded symbols. Each step is a bijection of the
/// running value, so any single changed symbol changes the result.
fn mix(h: u32, symbol: i32) -> u32 {
    (h ^ symbol as u32).wrapping_mul(0x9e37_79b1).rotate_left(13)
}

/// The encoder's initial state and the decoder's expected final state:
/// `L` plus the top 23 bits of the checksum, so bypass bits, which the
/// state otherwise passes through untouched, are covered as well.
fn check_state(h: u32) -> u32 {
    RANS_L + (h >> 9)
}
/// Widest support radius any table will use.
pub const MAX_RADIUS: i32 = 8192;
/// Tail mass treated as negligible when choosing a support radius.
pub const TAIL_MASS: f64 = 1.0 / TOTAL as f64;

pub const SCALE_COUNT: usize = 64;
pub const SCALE_MIN: f64 = 0.11;
pub const SCALE_MAX: f64 = 256.0;

/// Integer masses totalling `2^16`, every bucket at least 1.
///
/// Masses are `max(1, floor(p · 2^16))` of the normalised pmf; a positive
/// residual goes one unit at a time to the largest fractional parts (lower
/// index first on ties); a negative one, caused by the floor of 1, is taken
/// from the smallest fractional parts among masses above 1.
pub fn quantize_pmf(pmf: &[f64]) -> Result<Vec<u32>> {
    if pmf.is_empty() {
        return Err(DcaeError::Input("quantize_pmf: empty support".into()));
    }
    if pmf.len() > TOTAL as usize {
        return Err(DcaeError::Input(format!(
            "quantize_pmf: {} buckets exceed the precision",
            pmf.len()
        )));
    }
    if pmf.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(DcaeError::Input("quantize_pmf: negative or non-finite mass".into()));
    }
    let sum: f64 = pmf.iter().sum();
    if sum > 1.0 + 1e-6 {
        return Err(DcaeError::Input(format!("quantize_pmf: masses sum to {sum}")));
    }
    let n = pmf.len();
    let scaled: Vec<f64> = if sum > 0.0 {
        pmf.iter().map(|p| p / sum * TOTAL as f64).collect()
    } else {
        vec![TOTAL as f64 / n as f64; n]
    };
    let mut counts: Vec<u32> = scaled.iter().map(|&v| (v.floor() as u32).max(1)).collect();
    let assigned: i64 = counts.iter().map(|&c| c as i64).sum();
    let mut residual = TOTAL as i64 - assigned;
    if residual > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        let frac = |i: usize| scaled[i] - scaled[i].floor();
        order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
        let mut k = 0;
        while residual > 0 {
            counts[order[k % n]] += 1;
            residual -= 1;
            k += 1;
        }
    } else if residual < 0 {
        let mut order: Vec<usize> = (0..n).collect();
        let frac = |i: usize| scaled[i] - scaled[i].floor();
        order.sort_by(|&a, &b| {
            frac(a)
                .total_cmp(&frac(b))
                .then(counts[b].cmp(&counts[a]))
                .then(a.cmp(&b))
        });
        while residual < 0 {
            let mut moved = false;
            for &i in &order {
                if residual == 0 {
                    break;
                }
                if counts[i] > 1 {
                    counts[i] -= 1;
                    residual += 1;
                    moved = true;
                }
            }
            if !moved {
                return Err(DcaeError::Input("quantize_pmf: cannot fit masses".into()));
            }
        }
    }
    Ok(counts)
}

/// Coding table over symbols `min ..= max` plus a low escape bucket (bin 0)
/// and a high escape bucket (last bin).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    min: i32,
    freqs: Vec<u32>,
    cdf: Vec<u32>,
}

/// How one symbol is coded against a table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Placement {
    Inside(usize),
    Low(u32),
    High(u32),
}

impl QuantizedCdf {
    /// `pmf` covers `[low tail, p(min), ..., p(max), high tail]`.
    pub fn from_pmf(min: i32, pmf: &[f64]) -> Result<Self> {
        if pmf.len() < 3 {
            return Err(DcaeError::Input(
                "a table needs at least one symbol and two escape buckets".into(),
            ));
        }
        let freqs = quantize_pmf(pmf)?;
        let mut cdf = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for &f in &freqs {
            acc += f;
            cdf.push(acc);
        }
        Ok(QuantizedCdf { min, freqs, cdf })
    }

    pub fn min_symbol(&self) -> i32 {
        self.min
    }

    pub fn max_symbol(&self) -> i32 {
        self.min + self.freqs.len() as i32 - 3
    }

    /// Cumulative masses `c_0 = 0 < ... < c_B = 2^16`.
    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    /// Quantized mass of an in-support symbol, or of the escape bucket.
    pub fn mass(&self, symbol: i32) -> u32 {
        match self.place(symbol) {
            Placement::Inside(b) => self.freqs[b],
            Placement::Low(_) => self.freqs[0],
            Placement::High(_) => self.freqs[self.freqs.len() - 1],
        }
    }

    fn place(&self, symbol: i32) -> Placement {
        let s = symbol as i64;
        if s < self.min as i64 {
            Placement::Low((self.min as i64 - 1 - s) as u32)
        } else if s > self.max_symbol() as i64 {
            Placement::High((s - self.max_symbol() as i64 - 1) as u32)
        } else {
            Placement::Inside((s - self.min as i64) as usize + 1)
        }
    }

    /// Code length in bits, escape bucket plus bypass bits included.
    pub fn symbol_bits(&self, symbol: i32) -> f64 {
        let escape = |b: usize, v: u32| {
            -(self.freqs[b] as f64 / TOTAL as f64).log2() + exp_golomb_len(v) as f64
        };
        match self.place(symbol) {
            Placement::Inside(b) => -(self.freqs[b] as f64 / TOTAL as f64).log2(),
            Placement::Low(v) => escape(0, v),
            Placement::High(v) => escape(self.freqs.len() - 1, v),
        }
    }

    fn bin_of_slot(&self, slot: u32) -> usize {
        self.cdf.partition_point(|&c| c <= slot) - 1
    }
}

fn exp_golomb_len(v: u32) -> u32 {
    let u = v as u64 + 1;
    let nb = 63 - u.leading_zeros();
    2 * nb + 1
}

/// Smallest `r` with `P(k >= r) < 2^-16` under the discretised `N(0, σ²)`.
pub fn support_radius(sigma: f64) -> i32 {
    let mut r = 1;
    while r < MAX_RADIUS && normal_cdf(-(r as f64 - 0.5) / sigma) >= TAIL_MASS {
        r += 1;
    }
    r
}

/// Table for the discretised zero-mean Gaussian of scale `sigma`.
pub fn build_gaussian_cdf(sigma: f64) -> Result<QuantizedCdf> {
    let r = support_radius(sigma);
    let tail = normal_cdf(-(r as f64 + 0.5) / sigma);
    let mut pmf = Vec::with_capacity(2 * r as usize + 3);
    pmf.push(tail);
    for k in -r..=r {
        pmf.push(crate::entropy::gaussian_mass((k as f64).abs(), sigma));
    }
    pmf.push(tail);
    QuantizedCdf::from_pmf(-r, &pmf)
}

/// Table for a logistic prior with location `loc` and scale `scale`,
/// centred on `round(loc)`.
pub fn build_logistic_cdf(loc: f64, scale: f64) -> Result<QuantizedCdf> {
    if !(scale > 0.0 && scale.is_finite() && loc.is_finite()) {
        return Err(DcaeError::integrity(
            "prior",
            format!("invalid logistic parameters loc={loc} scale={scale}"),
        ));
    }
    let c = crate::kernels::round_half_away(loc).clamp(-1e6, 1e6) as i32;
    let upper = |r: i32| sigmoid(-((c + r) as f64 - 0.5 - loc) / scale);
    let lower = |r: i32| sigmoid(((c - r) as f64 + 0.5 - loc) / scale);
    let mut r = 1;
    while r < MAX_RADIUS && (upper(r) >= TAIL_MASS || lower(r) >= TAIL_MASS) {
        r += 1;
    }
    let mut pmf = Vec::with_capacity(2 * r as usize + 3);
    pmf.push(lower(r + 1));
    for k in c - r..=c + r {
        pmf.push(crate::entropy::logistic_mass(k as f64 - loc, scale));
    }
    pmf.push(upper(r + 1));
    QuantizedCdf::from_pmf(c - r, &pmf)
}

/// 64 log-spaced Gaussian scales with one table each.
#[derive(Debug)]
pub struct ScaleTable {
    scales: Vec<f64>,
    tables: Vec<QuantizedCdf>,
}

impl ScaleTable {
    pub fn new() -> Result<Self> {
        let (lo, hi) = (SCALE_MIN.ln(), SCALE_MAX.ln());
        let mut scales: Vec<f64> = (0..SCALE_COUNT)
            .map(|i| (lo + (hi - lo) * i as f64 / (SCALE_COUNT - 1) as f64).exp())
            .collect();
        scales[0] = SCALE_MIN;
        scales[SCALE_COUNT - 1] = SCALE_MAX;
        let tables = scales
            .iter()
            .map(|&s| build_gaussian_cdf(s))
            .collect::<Result<_>>()?;
        Ok(ScaleTable { scales, tables })
    }

    /// Process-wide shared instance.
    pub fn shared() -> &'static ScaleTable {
        static TABLE: OnceLock<ScaleTable> = OnceLock::new();
        TABLE.get_or_init(|| ScaleTable::new().expect("scale table construction"))
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Index of the smallest table scale `>= sigma`, the last one if none.
    pub fn index_for(&self, sigma: f64) -> usize {
        self.scales
            .partition_point(|&s| s < sigma)
            .min(SCALE_COUNT - 1)
    }

    pub fn table(&self, index: usize) -> &QuantizedCdf {
        &self.tables[index]
    }

    pub fn scale(&self, index: usize) -> f64 {
        self.scales[index]
    }
}

#[derive(Clone, Copy, Debug)]
struct Op {
    start: u32,
    freq: u32,
    bits: u32,
}

/// Collects symbols in decode order; [`RansEncoder::finish`] writes them.
pub struct RansEncoder {
    ops: Vec<Op>,
    ideal_bits: f64,
    check: u32,
}

impl Default for RansEncoder {
    fn default() -> Self {
        RansEncoder {
            ops: Vec::new(),
            ideal_bits: 0.0,
            check: CHECK_SEED,
        }
    }
}

impl RansEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    fn bypass(&mut self, value: u64, bits: u32) {
        let mut left = bits;
        while left > 0 {
            let n = left.min(16);
            left -= n;
            let chunk = ((value >> left) & ((1 << n) - 1)) as u32;
            self.ops.push(Op {
                start: chunk,
                freq: 1,
                bits: n,
            });
        }
    }

    fn exp_golomb(&mut self, v: u32) {
        let u = v as u64 + 1;
        let nb = 63 - u.leading_zeros();
        for _ in 0..nb {
            self.bypass(0, 1);
        }
        self.bypass(1, 1);
        self.bypass(u, nb);
    }

    /// Queue one symbol; returns its code length in bits.
    pub fn put(&mut self, symbol: i32, cdf: &QuantizedCdf) -> f64 {
        let (bin, over) = match cdf.place(symbol) {
            Placement::Inside(b) => (b, None),
            Placement::Low(v) => (0, Some(v)),
            Placement::High(v) => (cdf.freqs.len() - 1, Some(v)),
        };
        self.ops.push(Op {
            start: cdf.cdf[bin],
            freq: cdf.freqs[bin],
            bits: PRECISION,
        });
        if let Some(v) = over {
            self.exp_golomb(v);
        }
        self.check = mix(self.check, symbol);
        let bits = cdf.symbol_bits(symbol);
        self.ideal_bits += bits;
        bits
    }

    /// Sum of `-log2 q` over everything queued, bypass bits included.
    pub fn ideal_bits(&self) -> f64 {
        self.ideal_bits
    }

    pub fn finish(self) -> Vec<u8> {
        let mut x = check_state(self.check) as u64;
        let mut out = Vec::new();
        for op in self.ops.iter().rev() {
            let x_max = (((RANS_L >> op.bits) as u64) << 8) * op.freq as u64;
            while x >= x_max {
                out.push((x & 0xff) as u8);
                x >>= 8;
            }
            x = ((x / op.freq as u64) << op.bits) + x % op.freq as u64 + op.start as u64;
        }
        out.reverse();
        out.extend_from_slice(&(x as u32).to_le_bytes());
        out
    }
}

pub struct RansDecoder<'a> {
    payload: &'a [u8],
    pos: usize,
    x: u32,
    check: u32,
}

impl<'a> RansDecoder<'a> {
    pub fn new(stream: &'a [u8]) -> Result<Self> {
        if stream.len() < 4 {
            return Err(DcaeError::CorruptStream(format!(
                "stream of {} bytes has no final state",
                stream.len()
            )));
        }
        let (payload, tail) = stream.split_at(stream.len() - 4);
        let x = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if !(RANS_L..RANS_L << 8).contains(&x) {
            return Err(DcaeError::CorruptStream(format!("state {x:#x} out of range")));
        }
        Ok(RansDecoder {
            payload,
            pos: 0,
            x,
            check: CHECK_SEED,
        })
    }

    fn pop(&mut self, bits: u32, locate: impl Fn(u32) -> (u32, u32, u32)) -> Result<u32> {
        let slot = self.x & ((1 << bits) - 1);
        let (value, start, freq) = locate(slot);
        self.x = freq * (self.x >> bits) + slot - start;
        while self.x < RANS_L {
            let Some(&b) = self.payload.get(self.pos) else {
                return Err(DcaeError::CorruptStream("payload exhausted".into()));
            };
            self.pos += 1;
            self.x = (self.x << 8) | b as u32;
        }
        Ok(value)
    }

    fn bypass(&mut self, bits: u32) -> Result<u64> {
        let mut v = 0u64;
        let mut left = bits;
        while left > 0 {
            let n = left.min(16);
            left -= n;
            let chunk = self.pop(n, |slot| (slot, slot, 1))?;
            v = (v << n) | chunk as u64;
        }
        Ok(v)
    }

    fn exp_golomb(&mut self) -> Result<u32> {
        let mut nb = 0;
        while self.bypass(1)? == 0 {
            nb += 1;
            if nb > 32 {
                return Err(DcaeError::CorruptStream("runaway escape prefix".into()));
            }
        }
        let low = self.bypass(nb)?;
        let u = (1u64 << nb) | low;
        u32::try_from(u - 1).map_err(|_| DcaeError::CorruptStream("escape overflow".into()))
    }

    pub fn get(&mut self, cdf: &QuantizedCdf) -> Result<i32> {
        let bin = self.pop(PRECISION, |slot| {
            let b = cdf.bin_of_slot(slot);
            (b as u32, cdf.cdf[b], cdf.freqs[b])
        })? as usize;
        let last = cdf.freqs.len() - 1;
        let sym = if bin == 0 {
            cdf.min as i64 - 1 - self.exp_golomb()? as i64
        } else if bin == last {
            cdf.max_symbol() as i64 + 1 + self.exp_golomb()? as i64
        } else {
            cdf.min as i64 + bin as i64 - 1
        };
        let sym = i32::try_from(sym)
            .map_err(|_| DcaeError::CorruptStream("escaped symbol overflow".into()))?;
        self.check = mix(self.check, sym);
        Ok(sym)
    }

    /// Verify that the stream was consumed exactly.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.payload.len() {
            return Err(DcaeError::CorruptStream(format!(
                "{} payload bytes left over",
                self.payload.len() - self.pos
            )));
        }
        if self.x != check_state(self.check) {
            return Err(DcaeError::CorruptStream("final state check failed".into()));
        }
        Ok(())
    }
}

pub fn rans_encode(symbols: &[i32], cdfs: &[&QuantizedCdf]) -> Result<Vec<u8>> {
    if symbols.len() != cdfs.len() {
        return Err(DcaeError::dim(format!(
            "{} symbols but {} tables",
            symbols.len(),
            cdfs.len()
        )));
    }
    let mut enc = RansEncoder::new();
    for (&s, c) in symbols.iter().zip(cdfs) {
        enc.put(s, c);
    }
    Ok(enc.finish())
}

pub fn rans_decode(stream: &[u8], cdfs: &[&QuantizedCdf], count: usize) -> Result<Vec<i32>> {
    if cdfs.len() != count {
        return Err(DcaeError::dim(format!("{count} symbols but {} tables", cdfs.len())));
    }
    let mut dec = RansDecoder::new(stream)?;
    let out = cdfs.iter().map(|c| dec.get(c)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}
