use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bitcodec::{self, TcuCodeword};
use crate::error::{Error, Result};

/// Fixed-point weight tensor: `value = scale * code` with `bits`-wide
/// two's-complement codes.
///
/// Individual weights may be re-encoded into TCU storage. Their codeword is
/// kept alongside and their code always equals the codeword's decoded value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    codes: Vec<i32>,
    scale: f64,
    bits: u8,
    tcu: BTreeMap<usize, TcuCodeword>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    bits: u8,
    scale: f64,
    codes: Vec<i32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tcu: Vec<(usize, TcuCodeword)>,
}

impl TryFrom<RawTensor> for QuantizedTensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        let mut tensor = QuantizedTensor::new(raw.shape, raw.codes, raw.scale, raw.bits)?;
        for (index, word) in raw.tcu {
            let decoded = bitcodec::tcu_decode(&word, tensor.bits)?;
            if index >= tensor.codes.len()
                || decoded != tensor.codes[index]
                || tensor.tcu.contains_key(&index)
            {
                return Err(Error::Format(format!(
                    "TCU entry {index} does not match stored code"
                )));
            }
            tensor.tcu.insert(index, word);
        }
        Ok(tensor)
    }
}

impl From<QuantizedTensor> for RawTensor {
    fn from(t: QuantizedTensor) -> Self {
        RawTensor {
            shape: t.shape,
            bits: t.bits,
            scale: t.scale,
            codes: t.codes,
            tcu: t.tcu.into_iter().collect(),
        }
    }
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<i32>, scale: f64, bits: u8) -> Result<Self> {
        bitcodec::check_bits(bits)?;
        let len: usize = shape.iter().product();
        if len != codes.len() {
            return Err(Error::Shape {
                context: "quantized tensor".into(),
                expected: shape,
                got: vec![codes.len()],
            });
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::input(format!("scale must be positive, got {scale}")));
        }
        for &c in &codes {
            bitcodec::check_code(c, bits)?;
        }
        Ok(QuantizedTensor {
            shape,
            codes,
            scale,
            bits,
            tcu: BTreeMap::new(),
        })
    }

    /// Symmetric per-tensor quantization with `scale = max|v| / (2^(b-1) - 1)`.
    pub fn quantize(shape: Vec<usize>, values: &[f64], bits: u8) -> Result<Self> {
        bitcodec::check_bits(bits)?;
        let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let qmax = ((1i64 << (bits - 1)) - 1) as f64;
        let scale = if max_abs > 0.0 { max_abs / qmax } else { 1.0 };
        let codes = values
            .iter()
            .map(|v| bitcodec::saturate((v / scale).round() as i64, bits))
            .collect();
        QuantizedTensor::new(shape, codes, scale, bits)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn code(&self, index: usize) -> i32 {
        self.codes[index]
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn value(&self, index: usize) -> f64 {
        self.scale * self.codes[index] as f64
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| self.scale * c as f64).collect()
    }

    /// Nearest representable code for a real value.
    pub fn code_for(&self, value: f64) -> i32 {
        bitcodec::saturate((value / self.scale).round() as i64, self.bits)
    }

    pub fn is_protected(&self, index: usize) -> bool {
        self.tcu.contains_key(&index)
    }

    pub fn protected(&self) -> impl Iterator<Item = (usize, &TcuCodeword)> {
        self.tcu.iter().map(|(&i, w)| (i, w))
    }

    pub fn protected_count(&self) -> usize {
        self.tcu.len()
    }

    pub fn codeword(&self, index: usize) -> Option<&TcuCodeword> {
        self.tcu.get(&index)
    }

    /// Overwrite a BCD-stored code.
    pub fn set_code(&mut self, index: usize, code: i32) -> Result<()> {
        self.check_index(index)?;
        bitcodec::check_code(code, self.bits)?;
        if self.is_protected(index) {
            return Err(Error::plan(format!("weight {index} is TCU-protected")));
        }
        self.codes[index] = code;
        Ok(())
    }

    /// Re-encode a weight into TCU storage. The decoded value is unchanged.
    pub fn protect(&mut self, index: usize) -> Result<&TcuCodeword> {
        self.check_index(index)?;
        if self.is_protected(index) {
            return Err(Error::plan(format!("weight {index} is already protected")));
        }
        let word = bitcodec::tcu_encode(self.codes[index], self.bits)?;
        Ok(self.tcu.entry(index).or_insert(word))
    }

    /// Toggle one stored bit. BCD weights flip bit `bit` of the code; TCU
    /// weights flip bit `bit` of their codeword. Returns the new code.
    pub fn flip(&mut self, index: usize, bit: usize) -> Result<i32> {
        self.check_index(index)?;
        let code = match self.tcu.get_mut(&index) {
            Some(word) => {
                *word = word.flipped(bit)?;
                bitcodec::tcu_decode(word, self.bits)?
            }
            None => {
                let j = u8::try_from(bit).map_err(|_| Error::input("bit position too large"))?;
                bitcodec::flip_bit(self.codes[index], j, self.bits)?
            }
        };
        self.codes[index] = code;
        Ok(code)
    }

    /// Code that would result from [`flip`](Self::flip) without applying it.
    pub fn flipped_code(&self, index: usize, bit: usize) -> Result<i32> {
        self.check_index(index)?;
        match self.tcu.get(&index) {
            Some(word) => bitcodec::tcu_decode(&word.flipped(bit)?, self.bits),
            None => {
                let j = u8::try_from(bit).map_err(|_| Error::input("bit position too large"))?;
                bitcodec::flip_bit(self.codes[index], j, self.bits)
            }
        }
    }

    /// Number of stored bits for this weight in its current format.
    pub fn stored_width(&self, index: usize) -> usize {
        match self.tcu.get(&index) {
            Some(word) => word.width(),
            None => self.bits as usize,
        }
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.codes.len() {
            return Err(Error::input(format!(
                "weight index {index} outside tensor of {} weights",
                self.codes.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_grid_points_roundtrip() {
        let t = QuantizedTensor::new(vec![4], vec![-8, -1, 0, 7], 0.25, 4).unwrap();
        let again = QuantizedTensor::quantize(vec![4], &t.dequantize(), 4).unwrap();
        // Requantizing rescales to max|v| / 7, which maps -8 out of range.
        assert_eq!(again.codes(), &[-7, -1, 0, 6]);
        let t = QuantizedTensor::new(vec![3], vec![-7, 2, 7], 0.5, 4).unwrap();
        let again = QuantizedTensor::quantize(vec![3], &t.dequantize(), 4).unwrap();
        assert_eq!(again.codes(), t.codes());
        assert_eq!(again.scale(), t.scale());
    }

    #[test]
    fn rejects_invalid_tensors() {
        assert!(QuantizedTensor::new(vec![2], vec![0], 1.0, 4).is_err());
        assert!(QuantizedTensor::new(vec![1], vec![8], 1.0, 4).is_err());
        assert!(QuantizedTensor::new(vec![1], vec![0], 0.0, 4).is_err());
    }

    #[test]
    fn protection_preserves_value_and_blocks_double_protect() {
        let mut t = QuantizedTensor::new(vec![3], vec![-3, 2, 5], 0.1, 4).unwrap();
        t.protect(0).unwrap();
        assert_eq!(t.code(0), -3);
        assert!(t.protect(0).is_err());
        assert!(t.set_code(0, 1).is_err());
        // A TCU flip moves by one level, a BCD MSB flip by half the range.
        let moved = t.flip(0, 0).unwrap();
        assert_eq!((moved + 3).abs(), 1);
        assert_eq!(t.flip(1, 3).unwrap(), -6);
    }

    #[test]
    fn serde_validates_tcu_table() {
        let mut t = QuantizedTensor::new(vec![2], vec![1, -2], 0.5, 4).unwrap();
        t.protect(1).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: QuantizedTensor = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        let bad = json.replace("[1,-2]", "[1,-3]");
        assert!(serde_json::from_str::<QuantizedTensor>(&bad).is_err());
    }
}
