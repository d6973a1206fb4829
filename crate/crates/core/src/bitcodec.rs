//! Bit-level weight representations.
//!
//! Weights are stored as `b`-bit two's-complement codes ("BCD" storage). A
//! protected weight is instead stored as a unary (thermometer) word or its
//! truncated complementary form (TCU), in which every stored bit is worth
//! exactly one LSB of the decoded level.
//!
//! Levels use the unsigned reinterpretation of the two's-complement code,
//! `u = code mod 2^b`, so a unary word holds `u` ones followed by
//! `2^b - 1 - u` zeros.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Widest supported weight bitwidth.
pub const MAX_BITS: u8 = 16;

/// Per-weight TCU metadata in exact accounting: one polarity bit plus three
/// bits naming the power-of-two width class.
pub const TCU_META_BITS: u64 = 4;

/// Inclusive two's-complement range of a `bits`-wide code.
pub fn code_range(bits: u8) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

pub fn check_bits(bits: u8) -> Result<()> {
    if !(2..=MAX_BITS).contains(&bits) {
        return Err(Error::input(format!(
            "bitwidth {bits} outside supported range 2..={MAX_BITS}"
        )));
    }
    Ok(())
}

pub fn check_code(code: i32, bits: u8) -> Result<()> {
    check_bits(bits)?;
    let (lo, hi) = code_range(bits);
    if code < lo || code > hi {
        return Err(Error::input(format!(
            "code {code} outside {bits}-bit range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Clamp a value into the `bits`-wide code range.
pub fn saturate(value: i64, bits: u8) -> i32 {
    let (lo, hi) = code_range(bits);
    value.clamp(lo as i64, hi as i64) as i32
}

/// Value of bit `j` (0 = LSB, `bits - 1` = sign) of a two's-complement code.
pub fn bit_of(code: i32, j: u8, bits: u8) -> bool {
    debug_assert!(j < bits);
    (level(code, bits) >> j) & 1 == 1
}

/// Toggle bit `j` of a two's-complement code.
///
/// `flip_bit(-3, 3, 4) == 5`: the sign flip shifts the value by half the range.
pub fn flip_bit(code: i32, j: u8, bits: u8) -> Result<i32> {
    check_code(code, bits)?;
    if j >= bits {
        return Err(Error::input(format!(
            "bit position {j} outside 0..{bits}"
        )));
    }
    Ok(code_from_level(level(code, bits) ^ (1 << j), bits))
}

/// Unsigned level `code mod 2^bits`.
pub fn level(code: i32, bits: u8) -> u32 {
    (code as u32) & ((1u32 << bits) - 1)
}

/// Inverse of [`level`].
pub fn code_from_level(u: u32, bits: u8) -> i32 {
    let u = u & ((1u32 << bits) - 1);
    if u >= 1 << (bits - 1) {
        u as i32 - (1i32 << bits)
    } else {
        u as i32
    }
}

/// `ceil(log2(n))`, with `ceil(log2(0)) = ceil(log2(1)) = 0`.
pub fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// An ordered bit string. Index 0 is the first (most significant) character
/// of the textual form.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitString(Vec<bool>);

impl BitString {
    pub fn new(bits: Vec<bool>) -> Self {
        BitString(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, i: usize) -> Option<bool> {
        self.0.get(i).copied()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    /// Copy with bit `i` toggled.
    pub fn flipped(&self, i: usize) -> Result<BitString> {
        if i >= self.0.len() {
            return Err(Error::input(format!(
                "bit index {i} outside word of width {}",
                self.0.len()
            )));
        }
        let mut bits = self.0.clone();
        bits[i] = !bits[i];
        Ok(BitString(bits))
    }

    fn run(ones: usize, zeros: usize) -> Self {
        let mut bits = vec![true; ones];
        bits.resize(ones + zeros, false);
        BitString(bits)
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitString({self})")
    }
}

impl std::str::FromStr for BitString {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Format(format!("invalid bit character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(BitString)
    }
}

impl Serialize for BitString {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BitString {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Full-width unary word: `u` ones followed by `2^b - 1 - u` zeros.
pub fn unary_encode(code: i32, bits: u8) -> Result<BitString> {
    check_code(code, bits)?;
    let width = (1usize << bits) - 1;
    let u = level(code, bits) as usize;
    Ok(BitString::run(u, width - u))
}

/// Decoded level of a unary word (its popcount).
pub fn unary_decode_level(word: &BitString, bits: u8) -> Result<u32> {
    check_bits(bits)?;
    let width = (1usize << bits) - 1;
    if word.len() != width {
        return Err(Error::Format(format!(
            "unary word has width {}, expected {width} for {bits}-bit weights",
            word.len()
        )));
    }
    Ok(word.count_ones() as u32)
}

pub fn unary_decode(word: &BitString, bits: u8) -> Result<i32> {
    unary_decode_level(word, bits).map(|u| code_from_level(u, bits))
}

/// Which symbol a TCU codeword counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Leading ones kept, trailing zeros truncated; count = popcount.
    OnesStored,
    /// Trailing zeros kept, leading ones trimmed; count = width - popcount.
    ZerosStored,
}

/// Truncated complementary unary codeword.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TcuCodeword {
    pub polarity: Polarity,
    pub bits: BitString,
}

impl TcuCodeword {
    pub fn width(&self) -> usize {
        self.bits.len()
    }

    /// Number of stored symbols of the codeword's polarity.
    pub fn count(&self) -> usize {
        match self.polarity {
            Polarity::OnesStored => self.bits.count_ones(),
            Polarity::ZerosStored => self.bits.len() - self.bits.count_ones(),
        }
    }

    /// Decoded unary level. Unlike [`level`], this is not reduced modulo
    /// `2^b`, so a corrupted codeword may report one level past the range.
    pub fn level(&self, bits: u8) -> i64 {
        match self.polarity {
            Polarity::OnesStored => self.count() as i64,
            Polarity::ZerosStored => ((1i64 << bits) - 1) - self.count() as i64,
        }
    }

    /// Copy with codeword bit `i` toggled.
    pub fn flipped(&self, i: usize) -> Result<TcuCodeword> {
        Ok(TcuCodeword {
            polarity: self.polarity,
            bits: self.bits.flipped(i)?,
        })
    }

    /// Change in stored count caused by toggling bit `i` (+1 or -1).
    pub fn count_delta(&self, i: usize) -> i32 {
        let one = self.bits.get(i).unwrap_or(false);
        match (self.polarity, one) {
            (Polarity::OnesStored, false) | (Polarity::ZerosStored, true) => 1,
            _ => -1,
        }
    }
}

/// Codeword width for a stored count: the smallest power of two strictly
/// greater than the count, so zero stores in a single bit.
pub fn tcu_width(count: usize) -> usize {
    (count + 1).next_power_of_two()
}

pub fn tcu_encode(code: i32, bits: u8) -> Result<TcuCodeword> {
    check_code(code, bits)?;
    let ones = level(code, bits) as usize;
    let zeros = (1usize << bits) - 1 - ones;
    if ones <= zeros {
        let width = tcu_width(ones);
        Ok(TcuCodeword {
            polarity: Polarity::OnesStored,
            bits: BitString::run(ones, width - ones),
        })
    } else {
        let width = tcu_width(zeros);
        Ok(TcuCodeword {
            polarity: Polarity::ZerosStored,
            bits: BitString::run(width - zeros, zeros),
        })
    }
}

/// Decode a TCU codeword to a two's-complement code.
///
/// Polarity carries the sign: ones-stored words decode to non-negative codes
/// and zeros-stored words to negative codes. A corrupted word whose count runs
/// one past the representable range saturates at the range end.
pub fn tcu_decode(word: &TcuCodeword, bits: u8) -> Result<i32> {
    check_bits(bits)?;
    let width = word.width();
    let max_width = 1usize << (bits - 1);
    if width == 0 || !width.is_power_of_two() || width > max_width {
        return Err(Error::Format(format!(
            "TCU width {width} is not a power of two in 1..={max_width}"
        )));
    }
    let count = word.count() as i64;
    Ok(match word.polarity {
        Polarity::OnesStored => saturate(count, bits),
        Polarity::ZerosStored => saturate(-1 - count, bits),
    })
}

/// Per-weight TCU payload under the closed-form accounting:
/// `2^ceil(log2(min(2^b - |w|, |w|)))`, with a zero minimum costing one bit.
pub fn tcu_payload_bits(code: i32, bits: u8) -> u64 {
    let magnitude = code.unsigned_abs() as u64;
    let m = ((1u64 << bits) - magnitude).min(magnitude);
    if m == 0 {
        1
    } else {
        1u64 << ceil_log2(m)
    }
}

/// Per-weight storage of the implemented codeword, including metadata.
pub fn tcu_exact_bits(code: i32, bits: u8) -> Result<u64> {
    Ok(tcu_encode(code, bits)?.width() as u64 + TCU_META_BITS)
}

/// How protected-weight storage is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accounting {
    /// Closed-form payload widths, no per-weight metadata.
    #[default]
    Formula,
    /// Implemented codeword widths plus polarity/width metadata.
    Exact,
}

/// Integer bit counts behind every reported overhead ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryLedger {
    pub payload_bits: u64,
    pub index_bits: u64,
    pub metadata_bits: u64,
    pub signature_bits: u64,
    pub cluster_id_bits: u64,
    pub baseline_bits: u64,
}

impl MemoryLedger {
    pub fn with_baseline(baseline_bits: u64) -> Self {
        MemoryLedger {
            baseline_bits,
            ..Default::default()
        }
    }

    pub fn protection_bits(&self) -> u64 {
        self.payload_bits + self.index_bits + self.metadata_bits
    }

    pub fn lock_bits(&self) -> u64 {
        self.signature_bits + self.cluster_id_bits
    }

    fn ratio(&self, bits: u64) -> f64 {
        if self.baseline_bits == 0 {
            0.0
        } else {
            bits as f64 / self.baseline_bits as f64
        }
    }

    /// Unary or TCU overhead ratio.
    pub fn protection_ratio(&self) -> f64 {
        self.ratio(self.protection_bits())
    }

    /// Locking overhead ratio.
    pub fn lock_ratio(&self) -> f64 {
        self.ratio(self.lock_bits())
    }

    /// `protection_ratio + lock_ratio`, summed in floating point so the two
    /// reported parts add up to the reported total exactly.
    pub fn total_ratio(&self) -> f64 {
        self.protection_ratio() + self.lock_ratio()
    }

    /// Sum of two ledgers over the same baseline.
    pub fn combine(&self, other: &MemoryLedger) -> MemoryLedger {
        debug_assert_eq!(self.baseline_bits, other.baseline_bits);
        MemoryLedger {
            payload_bits: self.payload_bits + other.payload_bits,
            index_bits: self.index_bits + other.index_bits,
            metadata_bits: self.metadata_bits + other.metadata_bits,
            signature_bits: self.signature_bits + other.signature_bits,
            cluster_id_bits: self.cluster_id_bits + other.cluster_id_bits,
            baseline_bits: self.baseline_bits.max(other.baseline_bits),
        }
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            ledger: *self,
            protection_ratio: self.protection_ratio(),
            lock_ratio: self.lock_ratio(),
            total_ratio: self.total_ratio(),
        }
    }
}

/// JSON form of a ledger: integer counts plus derived ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    #[serde(flatten)]
    pub ledger: MemoryLedger,
    pub protection_ratio: f64,
    pub lock_ratio: f64,
    pub total_ratio: f64,
}

/// Protected codes of one layer.
#[derive(Debug, Clone, Copy)]
pub struct ProtectedLayer<'a> {
    pub layer_size: usize,
    pub codes: &'a [i32],
}

fn baseline(layer_sizes: impl Iterator<Item = usize>, bits: u8) -> u64 {
    layer_sizes.map(|n| n as u64).sum::<u64>() * bits as u64
}

/// Full-width unary storage: `(2^b - 1)` bits per protected weight plus
/// `ceil(log2 N_U^l)` index bits per protected weight of layer `l`.
pub fn ledger_unary(layers: &[ProtectedLayer<'_>], bits: u8) -> MemoryLedger {
    let mut ledger = MemoryLedger::with_baseline(baseline(layers.iter().map(|l| l.layer_size), bits));
    for layer in layers {
        let n = layer.codes.len() as u64;
        ledger.payload_bits += ((1u64 << bits) - 1) * n;
        ledger.index_bits += ceil_log2(n) as u64 * n;
    }
    ledger
}

/// TCU storage with `ceil(log2 |W^l|)` index bits per protected weight.
pub fn ledger_tcu(layers: &[ProtectedLayer<'_>], bits: u8, mode: Accounting) -> MemoryLedger {
    let mut ledger = MemoryLedger::with_baseline(baseline(layers.iter().map(|l| l.layer_size), bits));
    for layer in layers {
        let n = layer.codes.len() as u64;
        for &code in layer.codes {
            ledger.payload_bits += match mode {
                Accounting::Formula => tcu_payload_bits(code, bits),
                Accounting::Exact => tcu_encode(code, bits).map(|w| w.width() as u64).unwrap_or(0),
            };
        }
        if mode == Accounting::Exact {
            ledger.metadata_bits += TCU_META_BITS * n;
        }
        ledger.index_bits += ceil_log2(layer.layer_size as u64) as u64 * n;
    }
    ledger
}

/// Locking configuration of one layer; `None` means the layer is not locked.
#[derive(Debug, Clone, Copy)]
pub struct LockedLayer {
    pub layer_size: usize,
    /// Weights split into groups; TCU-stored weights are left out.
    pub lockable: usize,
    pub group_and_clusters: Option<(usize, usize)>,
}

/// Checksum signatures (2 bits per group, 1 when `G = 1`) plus `log2 K`
/// cluster-ID bits per group.
pub fn ledger_lock(layers: &[LockedLayer], bits: u8) -> MemoryLedger {
    let mut ledger = MemoryLedger::with_baseline(baseline(layers.iter().map(|l| l.layer_size), bits));
    for layer in layers {
        if let Some((group, clusters)) = layer.group_and_clusters {
            let groups = layer.lockable.div_ceil(group) as u64;
            ledger.signature_bits += groups * signature_width(group) as u64;
            ledger.cluster_id_bits += groups * ceil_log2(clusters as u64) as u64;
        }
    }
    ledger
}

/// Signature bits stored per detection group.
pub fn signature_width(group: usize) -> u32 {
    if group == 1 {
        1
    } else {
        2
    }
}

/// Closed-form per-layer locking overhead for group size `G` and `K` clusters.
pub fn lock_overhead(group: usize, clusters: usize, bits: u8) -> f64 {
    let id_bits = (clusters as f64).log2();
    if group > 1 {
        (id_bits + 2.0) / (group as f64 * bits as f64)
    } else {
        (id_bits + 1.0) / bits as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_codes(bits: u8) -> impl Iterator<Item = i32> {
        let (lo, hi) = code_range(bits);
        lo..=hi
    }

    #[test]
    fn sign_flip_example() {
        assert_eq!(flip_bit(-3, 3, 4).unwrap(), 5);
        assert_eq!(flip_bit(0, 0, 4).unwrap(), 1);
        assert_eq!(flip_bit(1, 0, 4).unwrap(), 0);
    }

    #[test]
    fn flip_rejects_bad_position() {
        assert!(matches!(flip_bit(0, 4, 4), Err(Error::Input(_))));
        assert!(matches!(flip_bit(8, 0, 4), Err(Error::Input(_))));
    }

    #[test]
    fn msb_flip_moves_half_range_exhaustive() {
        for bits in 2..=8 {
            for code in all_codes(bits) {
                let flipped = flip_bit(code, bits - 1, bits).unwrap();
                assert_eq!((flipped - code).abs(), 1 << (bits - 1));
                assert_eq!(flip_bit(flipped, bits - 1, bits).unwrap(), code);
            }
        }
    }

    #[test]
    fn flip_matches_textbook_twos_complement() {
        // Independent route: build the binary string by hand and reparse it.
        for bits in 2..=8u8 {
            for code in all_codes(bits) {
                for j in 0..bits {
                    let mut digits: Vec<u8> = (0..bits)
                        .map(|k| ((code.rem_euclid(1 << bits) >> k) & 1) as u8)
                        .collect();
                    digits[j as usize] ^= 1;
                    let mut value: i32 = digits
                        .iter()
                        .enumerate()
                        .map(|(k, &d)| (d as i32) << k)
                        .sum();
                    if digits[bits as usize - 1] == 1 {
                        value -= 1 << bits;
                    }
                    assert_eq!(flip_bit(code, j, bits).unwrap(), value);
                }
            }
        }
    }

    #[test]
    fn unary_examples() {
        assert_eq!(unary_encode(2, 3).unwrap().to_string(), "1100000");
        assert_eq!(unary_encode(0, 3).unwrap().to_string(), "0000000");
        assert_eq!(unary_encode(-1, 3).unwrap().to_string(), "1111111");
        let word: BitString = "110000".parse().unwrap();
        assert!(matches!(unary_decode(&word, 3), Err(Error::Format(_))));
    }

    #[test]
    fn unary_single_flip_moves_one_level_exhaustive() {
        for bits in 2..=6 {
            for code in all_codes(bits) {
                let word = unary_encode(code, bits).unwrap();
                let base = unary_decode_level(&word, bits).unwrap() as i64;
                assert_eq!(unary_decode(&word, bits).unwrap(), code);
                for i in 0..word.len() {
                    let hit = unary_decode_level(&word.flipped(i).unwrap(), bits).unwrap() as i64;
                    assert_eq!((hit - base).abs(), 1);
                }
            }
        }
    }

    #[test]
    fn tcu_examples() {
        let word = tcu_encode(2, 3).unwrap();
        assert_eq!(word.polarity, Polarity::OnesStored);
        assert_eq!(word.bits.to_string(), "1100");
        for bits in 2..=8 {
            let zero = tcu_encode(0, bits).unwrap();
            assert_eq!(zero.width(), 1);
            assert_eq!(zero.count(), 0);
            let minus_one = tcu_encode(-1, bits).unwrap();
            assert_eq!(minus_one.polarity, Polarity::ZerosStored);
            assert_eq!(minus_one.width(), 1);
            assert_eq!(minus_one.count(), 0);
        }
        // -3 at 4 bits: level 13 holds two zeros, stored in a 4-bit word.
        let word = tcu_encode(-3, 4).unwrap();
        assert_eq!(word.polarity, Polarity::ZerosStored);
        assert_eq!(word.bits.to_string(), "1100");
    }

    #[test]
    fn tcu_rejects_malformed_width() {
        let word = TcuCodeword {
            polarity: Polarity::OnesStored,
            bits: "110".parse().unwrap(),
        };
        assert!(matches!(tcu_decode(&word, 4), Err(Error::Format(_))));
        let wide = TcuCodeword {
            polarity: Polarity::OnesStored,
            bits: BitString::run(0, 16),
        };
        assert!(matches!(tcu_decode(&wide, 4), Err(Error::Format(_))));
    }

    #[test]
    fn tcu_roundtrip_and_flip_exhaustive() {
        for bits in 2..=8u8 {
            for code in all_codes(bits) {
                let word = tcu_encode(code, bits).unwrap();
                assert!(word.width().is_power_of_two());
                assert!(word.count() <= word.width());
                assert_eq!(tcu_decode(&word, bits).unwrap(), code);
                assert_eq!(word.level(bits), level(code, bits) as i64);
                for i in 0..word.width() {
                    let hit = word.flipped(i).unwrap();
                    assert_eq!((hit.level(bits) - word.level(bits)).abs(), 1);
                    assert_eq!(hit.count() as i64 - word.count() as i64, word.count_delta(i) as i64);
                    let moved = tcu_decode(&hit, bits).unwrap();
                    assert!((moved - code).abs() <= 1);
                }
            }
        }
    }

    #[test]
    fn payload_formula_examples() {
        assert_eq!(tcu_payload_bits(3, 4), 4);
        assert_eq!(tcu_payload_bits(-3, 4), 4);
        assert_eq!(tcu_payload_bits(1, 4), 1);
        assert_eq!(tcu_payload_bits(0, 4), 1);
        assert_eq!(tcu_payload_bits(-8, 4), 8);
        assert_eq!(tcu_payload_bits(5, 8), 8);
    }

    #[test]
    fn lock_overhead_examples() {
        assert_eq!(lock_overhead(16, 8, 8), 5.0 / 128.0);
        assert!((lock_overhead(16, 8, 8) * 100.0 - 3.90625).abs() < 1e-12);
        assert_eq!(lock_overhead(1, 2, 8), 0.25);
        let layers = [LockedLayer {
            layer_size: 4096,
            lockable: 4096,
            group_and_clusters: Some((16, 8)),
        }];
        assert_eq!(ledger_lock(&layers, 8).lock_ratio(), 0.0390625);
        let layers = [LockedLayer {
            layer_size: 4096,
            lockable: 4096,
            group_and_clusters: Some((1, 2)),
        }];
        assert_eq!(ledger_lock(&layers, 8).lock_ratio(), 0.25);
    }

    #[test]
    fn lock_overhead_monotone() {
        let groups = [512, 256, 128, 64, 32, 16, 8, 4, 2, 1];
        for k in [1, 2, 4, 8, 16] {
            for pair in groups.windows(2) {
                assert!(lock_overhead(pair[0], k, 8) <= lock_overhead(pair[1], k, 8));
                if pair[1] > 1 || k > 1 {
                    assert!(lock_overhead(pair[0], k, 8) < lock_overhead(pair[1], k, 8));
                }
            }
        }
        // With a single cluster, G = 2 and G = 1 both cost one bit per weight.
        assert_eq!(lock_overhead(2, 1, 8), lock_overhead(1, 1, 8));
        for g in groups {
            for k in [1usize, 2, 4, 8, 16, 32] {
                assert!(lock_overhead(g, k, 8) < lock_overhead(g, 2 * k, 8));
            }
        }
    }

    #[test]
    fn empty_plans_cost_nothing() {
        let layers = [ProtectedLayer {
            layer_size: 100,
            codes: &[],
        }];
        assert_eq!(ledger_unary(&layers, 8).protection_ratio(), 0.0);
        assert_eq!(ledger_tcu(&layers, 8, Accounting::Exact).protection_ratio(), 0.0);
        assert_eq!(ledger_lock(&[], 8).total_ratio(), 0.0);
    }

    #[test]
    fn ledger_summary_serializes_integers() {
        let layers = [ProtectedLayer {
            layer_size: 10,
            codes: &[3, -3],
        }];
        let json = serde_json::to_value(ledger_tcu(&layers, 4, Accounting::Formula).summary()).unwrap();
        assert_eq!(json["payload_bits"], 8);
        assert_eq!(json["index_bits"], 8);
        assert_eq!(json["baseline_bits"], 40);
        assert!(json["payload_bits"].is_u64());
        assert_eq!(json["protection_ratio"], 0.4);
    }

    #[test]
    fn bitstring_text_roundtrip() {
        let word: BitString = "0110".parse().unwrap();
        assert_eq!(word.to_string(), "0110");
        assert!("01a".parse::<BitString>().is_err());
        let json = serde_json::to_string(&word).unwrap();
        assert_eq!(json, "\"0110\"");
        assert_eq!(serde_json::from_str::<BitString>(&json).unwrap(), word);
    }
}
